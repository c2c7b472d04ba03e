"""Run manifests and dataset split bookkeeping.

Manifests are flat key=value text files carrying everything needed to
re-execute a run bit-identically: the full config snapshot, SHA-256 digests
of the input files, the seed list, and output artifact paths. Splits pair a
forecast target year with the most recent conditioning years at least a
fixed lag older.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    run_id: str
    config: dict[str, str] = field(default_factory=dict)
    inputs: dict[str, str] = field(default_factory=dict)   # path -> sha256 hex
    seeds: list[int] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    created_utc: str = ""

    def add_input(self, path: str | Path) -> None:
        self.inputs[str(path)] = sha256_file(path)


def write_manifest(manifest: RunManifest, path: str | Path) -> None:
    """Serialize as sorted key=value lines, atomically (temp file + rename)."""
    lines = [f"run_id={manifest.run_id}"]
    if manifest.created_utc:
        lines.append(f"created_utc={manifest.created_utc}")
    for key in sorted(manifest.config):
        lines.append(f"config.{key}={manifest.config[key]}")
    for p in sorted(manifest.inputs):
        lines.append(f"input.{p}={manifest.inputs[p]}")
    if manifest.seeds:
        lines.append("seeds=" + ",".join(str(s) for s in manifest.seeds))
    for out in manifest.outputs:
        lines.append(f"output={out}")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    os.replace(tmp, path)


def read_manifest(path: str | Path) -> RunManifest:
    manifest = RunManifest(run_id="")
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        if key == "run_id":
            manifest.run_id = value
        elif key == "created_utc":
            manifest.created_utc = value
        elif key.startswith("config."):
            manifest.config[key[len("config."):]] = value
        elif key.startswith("input."):
            manifest.inputs[key[len("input."):]] = value
        elif key == "seeds":
            manifest.seeds = [int(s) for s in value.split(",") if s]
        elif key == "output":
            manifest.outputs.append(value)
        else:
            raise ValueError(f"{path}: unknown manifest key {key!r}")
    return manifest


def verify_manifest(manifest: RunManifest) -> list[str]:
    """Re-hash every referenced input; return the paths whose digest changed."""
    stale = []
    for path, digest in manifest.inputs.items():
        if not Path(path).exists() or sha256_file(path) != digest:
            stale.append(path)
    return stale


# ---------------------------------------------------------------------------
# Splits

@dataclass(frozen=True)
class SplitPair:
    target_year: int
    conditioning_years: tuple[int, ...]


def make_split(years, target_years=None, *, lag_years: int = 10,
               n_cond: int = 3, holdout=()) -> list[SplitPair]:
    """Enumerate (target year, conditioning years) pairs under the lag rule.

    Conditioning years are the ``n_cond`` most recent dataset years at least
    ``lag_years`` older than the target, kept in chronological order. Targets
    listed in ``holdout`` are excluded from the result (training use). An
    explicitly requested target without enough history raises; with the
    default (every dataset year), short-history years are skipped instead.
    """
    years = sorted(set(int(y) for y in years))
    strict = target_years is not None
    if target_years is None:
        target_years = years
    holdout = set(int(y) for y in holdout)
    pairs = []
    for target in sorted(set(int(y) for y in target_years)):
        if target in holdout:
            continue
        eligible = [y for y in years if y <= target - lag_years]
        if len(eligible) < n_cond:
            if strict:
                raise ValueError(
                    f"target {target}: only {len(eligible)} years satisfy the "
                    f">= {lag_years} year lag, need {n_cond}"
                )
            continue
        pairs.append(SplitPair(target_year=target,
                               conditioning_years=tuple(eligible[-n_cond:])))
    if not pairs:
        raise ValueError("no usable target years after holdout filtering")
    return pairs
