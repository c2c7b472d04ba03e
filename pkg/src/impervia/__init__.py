"""Desk-scale land-cover imperviousness change forecasting toolkit."""

__version__ = "0.1.0"
