"""Denoising-diffusion machinery over normalized imperviousness patches.

The forward process follows the standard variance-preserving chain: a linear
beta schedule, closed-form jumps to any step via the cumulative alpha
product, and a noise-prediction (epsilon) objective trained with MSE. The
reverse process is available as ancestral (DDPM) sampling or as a DDIM
trajectory over an evenly spaced step subsequence, deterministic at eta=0.

Patches live in [-1, 1]: imperviousness percent p maps to p/50 - 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import DivergenceError, ShapeMismatchError

DEFAULT_TIMESTEPS = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


# ---------------------------------------------------------------------------
# Schedule

@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed beta/alpha/alpha-bar arrays for a T-step chain.

    Arrays are indexed 0..T-1 for steps 1..T; use the accessors to avoid
    off-by-one slips. ``alpha_bar_prev(1)`` is 1 by convention.
    """

    timesteps: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def check_step(self, t: int) -> None:
        if not 1 <= t <= self.timesteps:
            raise ValueError(f"step {t} outside [1, {self.timesteps}]")

    def alpha_bar_at(self, t: int) -> float:
        self.check_step(t)
        return float(self.alpha_bar[t - 1])

    def alpha_bar_prev(self, t: int) -> float:
        self.check_step(t)
        return 1.0 if t == 1 else float(self.alpha_bar[t - 2])

    def beta_at(self, t: int) -> float:
        self.check_step(t)
        return float(self.beta[t - 1])

    def alpha_at(self, t: int) -> float:
        self.check_step(t)
        return float(self.alpha[t - 1])


def make_schedule(timesteps: int = DEFAULT_TIMESTEPS,
                  beta_start: float = DEFAULT_BETA_START,
                  beta_end: float = DEFAULT_BETA_END) -> NoiseSchedule:
    """Build a linear beta schedule with precomputed alpha products."""
    if timesteps < 1:
        raise ValueError(f"timesteps must be >= 1, got {timesteps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )
    beta = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(timesteps=timesteps, beta=beta, alpha=alpha,
                         alpha_bar=alpha_bar)


# ---------------------------------------------------------------------------
# Normalization between percent and latent space

def percent_to_latent(percent):
    """Map imperviousness percent [0, 100] to the model's [-1, 1] range."""
    return percent / 50.0 - 1.0


def latent_to_percent(latent):
    """Invert :func:`percent_to_latent`, clamping to the valid percent range."""
    return np.clip((np.asarray(latent, dtype=np.float64) + 1.0) * 50.0, 0.0, 100.0)


# ---------------------------------------------------------------------------
# Forward process and loss

@dataclass
class LatentPatch:
    """A single-channel square patch in latent space at diffusion step ``t``."""

    values: np.ndarray
    t: int = 0

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2 or self.values.shape[0] != self.values.shape[1]:
            raise ShapeMismatchError(f"patch must be square 2-D, got {self.values.shape}")

    @property
    def side(self) -> int:
        return self.values.shape[0]


def q_sample(x0, t: int, eps, sched: NoiseSchedule):
    """Jump the clean patch straight to step t: sqrt(ab)*x0 + sqrt(1-ab)*eps.

    Works on numpy arrays and torch tensors alike; shapes must match.
    """
    if x0.shape != eps.shape:
        raise ShapeMismatchError(f"x0 {x0.shape} vs eps {eps.shape}")
    ab = sched.alpha_bar_at(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def denoise_loss(predicted_eps, true_eps):
    """Mean squared error between predicted and true noise, over all elements."""
    if predicted_eps.shape != true_eps.shape:
        raise ShapeMismatchError(
            f"shape mismatch: {predicted_eps.shape} vs {true_eps.shape}"
        )
    diff = predicted_eps - true_eps
    return (diff * diff).mean()


# ---------------------------------------------------------------------------
# Training

@dataclass
class DiffusionDataset:
    """Conditioning/target pairs as stacked tensors.

    ``cond`` is [M, 2N, H, W] with (imperviousness, likelihood) channel pairs
    per conditioning timestamp; ``x0`` is [M, 1, H, W] in latent space.
    ``weights``, when given, bias batch sampling (cluster reverse-weighting).
    """

    cond: torch.Tensor
    x0: torch.Tensor
    weights: torch.Tensor | None = None

    def __post_init__(self) -> None:
        if self.cond.shape[0] != self.x0.shape[0]:
            raise ShapeMismatchError("cond and x0 sample counts differ")
        if self.weights is not None and self.weights.shape[0] != self.x0.shape[0]:
            raise ShapeMismatchError("weights length differs from sample count")

    def __len__(self) -> int:
        return self.x0.shape[0]


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 3e-4
    ema_rate: float = 0.99
    seed: int = 0
    log_every: int = 100


@dataclass
class TrainResult:
    model: torch.nn.Module
    ema: dict[str, torch.Tensor]
    loss_history: list[float] = field(default_factory=list)


def train(model: torch.nn.Module, dataset: DiffusionDataset, sched: NoiseSchedule,
          cfg: TrainConfig) -> TrainResult:
    """Run the denoising training loop.

    Each step samples a batch (weighted when the dataset carries weights),
    per-sample steps t ~ U[1, T], and unit-normal noise; forms x_t with the
    closed-form jump; takes an Adam step on the epsilon MSE; and updates the
    EMA copy of the parameters. Fully deterministic for a fixed seed.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    ema = {name: p.detach().clone() for name, p in model.named_parameters()}
    alpha_bar = torch.from_numpy(sched.alpha_bar).to(dataset.x0.dtype)
    history: list[float] = []

    for step in range(cfg.steps):
        if dataset.weights is not None:
            idx = torch.multinomial(dataset.weights, cfg.batch_size,
                                    replacement=True, generator=gen)
        else:
            idx = torch.randint(0, len(dataset), (cfg.batch_size,), generator=gen)
        x0 = dataset.x0[idx]
        cond = dataset.cond[idx]
        t = torch.randint(1, sched.timesteps + 1, (cfg.batch_size,), generator=gen)
        eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
        ab = alpha_bar[t - 1].view(-1, 1, 1, 1)
        xt = ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps

        pred = model(xt, t, cond)
        loss = denoise_loss(pred, eps)
        if not torch.isfinite(loss):
            raise DivergenceError(f"non-finite loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()

        with torch.no_grad():
            for name, p in model.named_parameters():
                ema[name].mul_(cfg.ema_rate).add_(p, alpha=1.0 - cfg.ema_rate)
        history.append(float(loss.detach()))

    return TrainResult(model=model, ema=ema, loss_history=history)


def apply_ema(model: torch.nn.Module, ema: dict[str, torch.Tensor]) -> None:
    """Copy EMA weights into the model in place (used before sampling)."""
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(ema[name])


# ---------------------------------------------------------------------------
# Samplers

def _as_cond_tensor(cond, dtype: torch.dtype) -> torch.Tensor | None:
    if cond is None:
        return None
    if isinstance(cond, torch.Tensor):
        t = cond
    else:
        t = cond.tensor()  # ConditioningStack
    if t.dim() == 3:
        t = t.unsqueeze(0)
    return t.to(dtype)


def ddpm_chain(eps_fn, x: torch.Tensor, sched: NoiseSchedule,
               gen: torch.Generator) -> torch.Tensor:
    """Ancestral reverse chain from x_T down to x_0 (batched core).

    ``eps_fn(x, t_batch)`` predicts the noise; the posterior mean uses the
    epsilon parameterization and the posterior variance is the standard
    (1 - abar_{t-1}) / (1 - abar_t) * beta_t, which vanishes at t=1.
    """
    for t in range(sched.timesteps, 0, -1):
        tb = torch.full((x.shape[0],), t, dtype=torch.long)
        eps = eps_fn(x, tb)
        ab = sched.alpha_bar_at(t)
        a = sched.alpha_at(t)
        beta = sched.beta_at(t)
        mean = (x - beta / math.sqrt(1.0 - ab) * eps) / math.sqrt(a)
        if t > 1:
            var = (1.0 - sched.alpha_bar_prev(t)) / (1.0 - ab) * beta
            noise = torch.randn(x.shape, generator=gen, dtype=x.dtype)
            x = mean + math.sqrt(var) * noise
        else:
            x = mean
    return x


def ddim_steps_sequence(timesteps: int, steps: int) -> list[int]:
    """Evenly spaced descending step subsequence starting at T."""
    if not 1 <= steps <= timesteps:
        raise ValueError(f"steps must be in [1, {timesteps}], got {steps}")
    if steps == 1:
        return [timesteps]
    raw = np.linspace(timesteps, 1, steps)
    return [int(math.floor(v + 0.5)) for v in raw]


def ddim_chain(eps_fn, x: torch.Tensor, sched: NoiseSchedule, steps: int,
               eta: float, gen: torch.Generator | None,
               clip_x0: bool = True) -> torch.Tensor:
    """DDIM trajectory over an evenly spaced subsequence (batched core).

    eta=0 is fully deterministic given x_T; eta=1 over the full sequence
    matches the ancestral sampler's transition kernel. ``clip_x0`` keeps the
    per-step clean-patch estimate inside the latent range and re-derives the
    direction noise from it, which stops off-manifold drift compounding
    through the deterministic recursion (inactive when estimates are already
    in range, so exact-oracle trajectories are unaffected).
    """
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must be in [0, 1], got {eta}")
    taus = ddim_steps_sequence(sched.timesteps, steps)
    for i, t in enumerate(taus):
        t_next = taus[i + 1] if i + 1 < len(taus) else 0
        tb = torch.full((x.shape[0],), t, dtype=torch.long)
        eps = eps_fn(x, tb)
        ab = sched.alpha_bar_at(t)
        ab_next = 1.0 if t_next == 0 else sched.alpha_bar_at(t_next)
        x0_hat = (x - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
        if clip_x0:
            x0_hat = x0_hat.clamp(-1.0, 1.0)
            eps = (x - math.sqrt(ab) * x0_hat) / math.sqrt(1.0 - ab)
        sigma = eta * math.sqrt((1.0 - ab_next) / (1.0 - ab)) * math.sqrt(
            max(1.0 - ab / ab_next, 0.0))
        dir_coeff = math.sqrt(max(1.0 - ab_next - sigma * sigma, 0.0))
        x = math.sqrt(ab_next) * x0_hat + dir_coeff * eps
        if sigma > 0.0:
            if gen is None:
                raise ValueError("eta > 0 requires a generator")
            x = x + sigma * torch.randn(x.shape, generator=gen, dtype=x.dtype)
    return x


def _run_sampler(model, cond, sched, seed, side, chain):
    cond_t = _as_cond_tensor(cond, torch.float32)
    if side is None:
        if cond_t is None:
            raise ValueError("side is required when no conditioning is given")
        side = cond_t.shape[-1]
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn((1, 1, side, side), generator=gen)

    def eps_fn(xb, tb):
        with torch.no_grad():
            return model(xb, tb, cond_t)

    x = chain(eps_fn, x, gen)
    out = x.clamp(-1.0, 1.0).squeeze(0).squeeze(0).numpy()
    return LatentPatch(values=out, t=0)


def ddpm_sample(model, cond, sched: NoiseSchedule, seed: int = 0,
                side: int | None = None) -> LatentPatch:
    """Draw one patch by full ancestral sampling, clamped to [-1, 1] at the end."""
    return _run_sampler(model, cond, sched, seed, side,
                        lambda f, x, g: ddpm_chain(f, x, sched, g))


def ddim_sample(model, cond, sched: NoiseSchedule, steps: int = 500,
                eta: float = 0.0, seed: int = 0,
                side: int | None = None) -> LatentPatch:
    """Draw one patch via DDIM; eta=0 makes the trajectory deterministic."""
    return _run_sampler(model, cond, sched, seed, side,
                        lambda f, x, g: ddim_chain(f, x, sched, steps, eta, g))


# ---------------------------------------------------------------------------
# Synthetic task for desk-scale training runs

def _smooth_field(rng: np.random.Generator, side: int, coarse: int,
                  lo: float, hi: float) -> np.ndarray:
    """Random field built by bilinear upsampling of coarse noise."""
    base = rng.uniform(lo, hi, size=(coarse, coarse))
    xs = np.linspace(0, coarse - 1, side)
    i0 = np.clip(xs.astype(int), 0, coarse - 2)
    frac = xs - i0
    cols = base[:, i0] * (1 - frac) + base[:, i0 + 1] * frac
    return cols[i0, :] * (1 - frac[:, None]) + cols[i0 + 1, :] * frac[:, None]


def synthetic_dataset(count: int, side: int, n_cond: int, seed: int,
                      gain: float = 5.0) -> tuple[DiffusionDataset, np.ndarray, np.ndarray]:
    """Generate a toy forecasting task with a known ground-truth rule.

    Each sample has a smooth past imperviousness field (percent) and a smooth
    likelihood field in [0, 1]; the target is clamp(past + gain * likelihood,
    0, 100). Conditioning repeats the past and likelihood across the N
    timestamps. Returns the dataset plus the raw past and truth stacks in
    percent for evaluation.
    """
    rng = np.random.default_rng(seed)
    cond = np.empty((count, 2 * n_cond, side, side), dtype=np.float32)
    x0 = np.empty((count, 1, side, side), dtype=np.float32)
    past_stack = np.empty((count, side, side), dtype=np.float32)
    truth_stack = np.empty((count, side, side), dtype=np.float32)
    for i in range(count):
        past = _smooth_field(rng, side, 5, 0.0, 80.0)
        lam = _smooth_field(rng, side, 4, 0.0, 1.0)
        truth = np.clip(past + gain * lam, 0.0, 100.0)
        lat_past = percent_to_latent(past).astype(np.float32)
        for k in range(n_cond):
            cond[i, 2 * k] = lat_past
            cond[i, 2 * k + 1] = lam.astype(np.float32)
        x0[i, 0] = percent_to_latent(truth).astype(np.float32)
        past_stack[i] = past
        truth_stack[i] = truth
    dataset = DiffusionDataset(cond=torch.from_numpy(cond), x0=torch.from_numpy(x0))
    return dataset, past_stack, truth_stack
