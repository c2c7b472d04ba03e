"""Batch command-line entry point.

Subcommands cover the full desk-scale pipeline: `ingest` raw arrays into
IGRD grids, `likelihood` maps from land-cover series, `cluster` temporal
signatures, `train` the conditional denoiser, `sample` DDIM forecasts over
tiles and seeds, `ca-forecast` the cellular-automata baseline, `evaluate`
forecasts against a persistence null, and `plot` MAE curves. All randomness
is controlled by --seed; per-tile sampling streams are derived from
(seed, tile id, seed index) so runs are reproducible byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import os
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np
import torch

from . import camarkov, clustering, evaluation, transition
from .checkpoint import load_checkpoint, save_checkpoint, save_loss_history
from .config import Config, config_items, load_config, model_digest
from .denoiser import ConditioningStack, Denoiser, DenoiserConfig, load_parameter_arrays, parameter_arrays
from .diffusion import (
    DiffusionDataset,
    TrainConfig,
    ddim_sample,
    latent_to_percent,
    make_schedule,
    percent_to_latent,
    synthetic_dataset,
    train,
)
from .errors import ImperviaError
from .raster import (
    Grid,
    GridKind,
    categorical_grid,
    continuous_grid,
    load_grid,
    save_grid,
    tile,
)
from .store import RunManifest, make_split, write_manifest

BUILTIN_CURVES = {
    "all_aois": "curves_all_aois.csv",
    "vegas": "curves_vegas.csv",
    "chicago": "curves_chicago.csv",
}


def _config_keys_epilog(*keys: str) -> str:
    return "config keys consumed: " + ", ".join(keys)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_cfg(args) -> Config:
    overrides = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ImperviaError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value
    return load_config(args.config, overrides)


def _derive_seed(base: int, *parts) -> int:
    text = ":".join([str(base)] + [str(p) for p in parts])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


def _read_array(path: Path) -> np.ndarray:
    if path.suffix == ".npy":
        return np.load(path)
    if path.suffix == ".csv":
        return np.loadtxt(path, delimiter=",", ndmin=2)
    raise ImperviaError(f"unsupported input format {path.suffix!r} (want .npy or .csv)")


def _manifest(args, cfg: Config, run_id: str) -> RunManifest:
    manifest = RunManifest(run_id=run_id, config=config_items(cfg),
                           seeds=[args.seed],
                           created_utc=time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()))
    return manifest


# ---------------------------------------------------------------------------
# Dataset directory conventions

def discover_years(data_dir: Path, prefix: str) -> dict[int, Path]:
    """Map years to grid files named ``<prefix>_<year>.igrd`` in a directory."""
    found = {}
    for path in sorted(data_dir.glob(f"{prefix}_*.igrd")):
        stem = path.stem[len(prefix) + 1:]
        if stem.isdigit():
            found[int(stem)] = path
    return found


def _build_stacks(data_dir: Path, cond_years: tuple[int, ...], cfg: Config,
                  require_full_tiles: bool = True):
    """Cut aligned conditioning stacks for every usable tile.

    Returns (tileset, [(tile_id, ConditioningStack)], parent imperviousness
    grid of the most recent conditioning year).
    """
    imps = discover_years(data_dir, "imperv")
    lcs = discover_years(data_dir, "lulc")
    missing = [y for y in cond_years if y not in imps or y not in lcs]
    if missing:
        raise ImperviaError(f"{data_dir}: missing imperv/lulc grids for years {missing}")
    imp_grids = [load_grid(imps[y]) for y in cond_years]
    lc_grids = [load_grid(lcs[y]) for y in cond_years]
    shape = imp_grids[0].shape
    for g in imp_grids + lc_grids:
        if g.shape != shape:
            raise ImperviaError("dataset grids are not aligned")
    lmaps = transition.likelihood_series(lc_grids, years=list(cond_years))
    tiles = tile(imp_grids[0], cfg.input_side)
    if tiles.warning:
        print(f"warning: {tiles.warning}", file=sys.stderr)
    stacks = []
    for tid in range(len(tiles)):
        if require_full_tiles and tiles.nodata_fraction[tid] > 0:
            continue
        imp_patches = [percent_to_latent(tiles.extract(g, tid).values.astype(np.float64)
                                         ).astype(np.float32)
                       for g in imp_grids]
        lam_patches = [tiles.extract(m.grid, tid).values.astype(np.float32)
                       for m in lmaps]
        stacks.append((tid, ConditioningStack(imp_patches, lam_patches,
                                              years=list(cond_years))))
    return tiles, stacks, imp_grids[-1]


# ---------------------------------------------------------------------------
# Subcommand handlers

def cmd_ingest(args) -> int:
    out = _out_dir(args)
    arr = _read_array(Path(args.input))
    if args.kind == "continuous":
        grid = continuous_grid(arr, pixel_size=args.pixel_size)
    else:
        grid = categorical_grid(arr, pixel_size=args.pixel_size)
    grid.validate_range()
    grid_path = out / args.name
    save_grid(grid, grid_path)
    print(f"wrote {grid_path} ({grid.width}x{grid.height}, {args.kind})")
    if args.tile_side:
        tiles = tile(grid, args.tile_side)
        index_path = out / (grid_path.stem + "_tiles.csv")
        with index_path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["tile_id", "row", "col", "nodata_fraction"])
            for tid, ((r, c), frac) in enumerate(zip(tiles.offsets, tiles.nodata_fraction)):
                writer.writerow([tid, r, c, f"{frac:.6g}"])
        print(f"wrote {index_path} ({len(tiles)} tiles, "
              f"margins {tiles.margin_rows}x{tiles.margin_cols}px)")
        if tiles.warning:
            print(f"warning: {tiles.warning}", file=sys.stderr)
    return 0


def cmd_likelihood(args) -> int:
    out = _out_dir(args)
    grids = [load_grid(p) for p in args.lulc]
    years = [int(y) for y in args.years.split(",")] if args.years else None
    maps = transition.likelihood_series(grids, years=years)
    for i, lmap in enumerate(maps):
        year = years[i] if years else i
        path = out / f"lmap_{year}.igrd"
        save_grid(lmap.grid, path)
        print(f"wrote {path}")
    # audit table for the final consecutive pair
    tables = transition.transition_tables(grids[-2], grids[-1])
    probs_path = out / "transition_probs.txt"
    transition.save_probs(tables.probs, probs_path)
    print(f"wrote {probs_path}"
          + (f" (absent classes: {sorted(tables.absent_classes)})"
             if tables.absent_classes else ""))
    return 0


def cmd_cluster(args) -> int:
    out = _out_dir(args)
    cfg = _load_cfg(args)
    grids = [load_grid(p) for p in args.imperv]
    tiles = tile(grids[0], args.patch_side or cfg.patch_side)
    signatures = []
    for tid in range(len(tiles)):
        series = [tiles.extract(g, tid) for g in grids]
        signatures.append(clustering.signature(series, patch_id=tid,
                                               stat=cfg.signature_stat))
    model = clustering.cluster(signatures, k=args.k or cfg.cluster_k, seed=args.seed)
    clustering.save_signatures(signatures, out / "signatures.csv")
    clustering.save_assignments(model, signatures, out / "assignments.csv")
    weights = clustering.patch_weights(model)
    with (out / "patch_weights.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patch_id", "weight"])
        for sig, w in zip(signatures, weights):
            writer.writerow([sig.patch_id, f"{w:.9g}"])
    for c in range(model.k):
        print(f"cluster {c}: share={model.ratios[c]:.4f} "
              f"weight={model.weights[c]:.4f}")
    print(f"wrote {out / 'signatures.csv'}, {out / 'assignments.csv'}, "
          f"{out / 'patch_weights.csv'}")
    return 0


def _build_model(cfg: Config, seed: int) -> Denoiser:
    torch.manual_seed(seed)
    dcfg = DenoiserConfig(depth=cfg.depth, base_channels=cfg.base_channels,
                          gn_groups=cfg.gn_groups, embed_dim=cfg.embed_dim,
                          n_cond=cfg.n_cond, input_side=cfg.input_side)
    return Denoiser(dcfg)


def cmd_train(args) -> int:
    out = _out_dir(args)
    cfg = _load_cfg(args)
    if args.steps is not None:
        cfg.train_steps = args.steps
    if args.batch is not None:
        cfg.batch_size = args.batch
    cfg.validate()

    if args.synthetic:
        dataset, _, _ = synthetic_dataset(args.samples, cfg.input_side,
                                          cfg.n_cond, args.seed)
    else:
        if not args.data:
            raise ImperviaError("train needs --synthetic or --data DIR")
        data_dir = Path(args.data)
        years = sorted(discover_years(data_dir, "imperv"))
        targets = ([int(y) for y in args.target_years.split(",")]
                   if args.target_years else None)
        holdout = ([int(y) for y in args.holdout.split(",")] if args.holdout else [])
        pairs = make_split(years, targets, lag_years=cfg.lag_years,
                           n_cond=cfg.n_cond, holdout=holdout)
        cond_list, x0_list, sample_tiles = [], [], []
        imps = discover_years(data_dir, "imperv")
        for pair in pairs:
            tiles, stacks, _ = _build_stacks(data_dir, pair.conditioning_years, cfg)
            target_grid = load_grid(imps[pair.target_year])
            for tid, stack in stacks:
                cond_list.append(stack.tensor())
                patch = tiles.extract(target_grid, tid).values.astype(np.float64)
                x0_list.append(torch.from_numpy(
                    percent_to_latent(patch).astype(np.float32)).unsqueeze(0))
                sample_tiles.append(tid)
        if not cond_list:
            raise ImperviaError("no usable (pair, tile) samples in the dataset")
        weights = None
        if args.patch_weights:
            table = {}
            with Path(args.patch_weights).open(newline="", encoding="utf-8") as fh:
                reader = csv.reader(fh)
                next(reader)
                for row in reader:
                    table[int(row[0])] = float(row[1])
            weights = torch.tensor([table.get(tid, 0.0) for tid in sample_tiles],
                                   dtype=torch.float32)
        dataset = DiffusionDataset(cond=torch.stack(cond_list),
                                   x0=torch.stack(x0_list), weights=weights)
        print(f"dataset: {len(dataset)} samples from {len(pairs)} split pairs")

    sched = make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)
    model = _build_model(cfg, args.seed)
    result = train(model, dataset, sched,
                   TrainConfig(steps=cfg.train_steps, batch_size=cfg.batch_size,
                               lr=cfg.lr, ema_rate=cfg.ema_rate, seed=args.seed))
    ckpt_path = out / args.checkpoint
    ema_arrays = {name: t.numpy().astype(np.float32) for name, t in result.ema.items()}
    save_checkpoint(ckpt_path, model_digest(cfg), parameter_arrays(model), ema_arrays)
    save_loss_history(out / "loss.csv", result.loss_history)
    manifest = _manifest(args, cfg, run_id=f"train-{args.seed}")
    manifest.outputs = [str(ckpt_path), str(out / "loss.csv")]
    write_manifest(manifest, out / "run.manifest")
    last = result.loss_history[-1] if result.loss_history else float("nan")
    print(f"wrote {ckpt_path} ({cfg.train_steps} steps, final loss {last:.5f})")
    return 0


def cmd_sample(args) -> int:
    out = _out_dir(args)
    cfg = _load_cfg(args)
    if args.ddim_steps is not None:
        cfg.ddim_steps = args.ddim_steps
    if args.eta is not None:
        cfg.ddim_eta = args.eta
    if args.seeds is not None:
        cfg.seeds = args.seeds
    cfg.validate()

    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.config_digest != model_digest(cfg):
        raise ImperviaError(
            "checkpoint was trained under a different model/schedule config "
            f"(digest {ckpt.config_digest[:12]} != {model_digest(cfg)[:12]})"
        )
    model = _build_model(cfg, args.seed)
    load_parameter_arrays(model, ckpt.ema if args.use_ema else ckpt.params)
    model.eval()
    sched = make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)

    data_dir = Path(args.data)
    years = sorted(discover_years(data_dir, "imperv"))
    if not years:
        raise ImperviaError(f"no imperv_<year>.igrd grids in {data_dir}")
    target = args.target_year
    cond_years = tuple(y for y in years if y <= target - cfg.lag_years)[-cfg.n_cond:]
    if len(cond_years) < cfg.n_cond:
        raise ImperviaError(
            f"target {target}: need {cfg.n_cond} years at least "
            f"{cfg.lag_years} older, found {list(cond_years)}"
        )
    print(f"conditioning years for {target}: {list(cond_years)}")
    tiles, stacks, parent = _build_stacks(data_dir, cond_years, cfg)
    outputs = []
    for k in range(cfg.seeds):
        canvas = np.zeros(parent.shape, dtype=np.float32)
        mask = np.ones(parent.shape, dtype=bool)
        for tid, stack in stacks:
            patch_seed = _derive_seed(args.seed, tid, k)
            patch = ddim_sample(model, stack, sched, steps=cfg.ddim_steps,
                                eta=cfg.ddim_eta, seed=patch_seed)
            r, c = tiles.offsets[tid]
            canvas[r:r + tiles.side, c:c + tiles.side] = latent_to_percent(patch.values)
            mask[r:r + tiles.side, c:c + tiles.side] = False
        grid = Grid(canvas, GridKind.CONTINUOUS, pixel_size=parent.pixel_size,
                    nodata=mask)
        path = out / f"forecast_{target}_seed{k}.igrd"
        save_grid(grid, path)
        outputs.append(str(path))
        print(f"wrote {path}")
    manifest = _manifest(args, cfg, run_id=f"sample-{target}-{args.seed}")
    manifest.seeds = [_derive_seed(args.seed, 0, k) for k in range(cfg.seeds)]
    manifest.outputs = outputs
    manifest.add_input(args.checkpoint)
    write_manifest(manifest, out / "run.manifest")
    return 0


def cmd_ca_forecast(args) -> int:
    out = _out_dir(args)
    cfg = _load_cfg(args)
    lc_a = load_grid(args.lulc_a)
    lc_b = load_grid(args.lulc_b)
    if args.collapse16:
        lc_a = camarkov.collapse_to_8(lc_a)
        lc_b = camarkov.collapse_to_8(lc_b)
    model = camarkov.fit_markov(lc_a, lc_b)
    state = camarkov.make_allocation_state(lc_b, model, window=cfg.ca_window)
    allocation = camarkov.allocate(state, model.targets, eta=cfg.ca_eta,
                                   tolerance=cfg.ca_tolerance,
                                   max_iterations=cfg.ca_max_iterations)
    save_grid(allocation, out / "ca_allocation.igrd")
    camarkov.save_transition_matrix(model, out / "ca_transition.txt")
    change = camarkov.imperv_change_binary(lc_b, allocation)
    save_grid(change, out / "ca_change_binary.igrd")
    status = "converged" if state.converged else "did not converge"
    print(f"allocation {status} after {state.iterations} iterations "
          f"(max residual {np.abs(state.deficits).max():.1f} cells)")
    print(f"wrote {out / 'ca_allocation.igrd'}, {out / 'ca_transition.txt'}, "
          f"{out / 'ca_change_binary.igrd'}")
    return 0


def _resolve_curves(spec_arg: str) -> tuple[evaluation.MaeCurve, evaluation.MaeCurve]:
    if spec_arg in BUILTIN_CURVES:
        ref = resources.files("impervia.data") / BUILTIN_CURVES[spec_arg]
        with resources.as_file(ref) as path:
            return evaluation.load_curves_csv(path)
    return evaluation.load_curves_csv(spec_arg)


def cmd_evaluate(args) -> int:
    out = _out_dir(args)
    cfg = _load_cfg(args)
    if args.curves:
        model_curve, null_curve = _resolve_curves(args.curves)
        nr = evaluation.null_resolution(model_curve, null_curve)
        report = evaluation.EvalReport(model_curve=model_curve,
                                       null_curve=null_curve, null_res=nr)
    else:
        if not (args.pred and args.truth and args.past):
            raise ImperviaError("evaluate needs --curves or --pred/--truth/--past")
        preds = [load_grid(p) for p in args.pred]
        truth = load_grid(args.truth)
        past = load_grid(args.past)
        cells = ([int(c) for c in args.cells.split(",")] if args.cells
                 else list(cfg.scales))
        report = evaluation.build_report(preds, truth, past, cells)
    evaluation.save_curves_csv(report.model_curve, report.null_curve,
                               out / "curves.csv")
    (out / "report.txt").write_text(evaluation.report_text(report), encoding="utf-8")
    print(evaluation.report_text(report), end="")
    print(f"null resolution: {report.null_res.label()} km")
    return 0


def cmd_plot(args) -> int:
    out = _out_dir(args)
    model_curve, null_curve = _resolve_curves(args.curves)
    svg = evaluation.curves_svg(model_curve, null_curve, title=args.title)
    svg_path = out / args.name
    svg_path.write_text(svg, encoding="utf-8")
    evaluation.save_curves_csv(model_curve, null_curve,
                               svg_path.with_suffix(".csv"))
    print(f"wrote {svg_path} and {svg_path.with_suffix('.csv')}")
    return 0


# ---------------------------------------------------------------------------
# Parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="impervia",
        description="Desk-scale imperviousness change forecasting pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="key=value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, default=0, help="master RNG seed")
    common.add_argument("--threads", type=int, default=1,
                        help="worker threads (1 keeps runs bit-stable)")
    common.add_argument("--out", default=os.environ.get("IMPERVIA_OUT", "."),
                        help="output directory (default $IMPERVIA_OUT or .)")

    p = sub.add_parser("ingest", parents=[common],
                       help="convert a raw array to an IGRD grid (+ tile index)",
                       epilog=_config_keys_epilog("patch_side"))
    p.add_argument("--input", required=True, help=".npy or .csv array")
    p.add_argument("--kind", choices=["continuous", "categorical"],
                   default="continuous")
    p.add_argument("--pixel-size", type=float, default=30.0)
    p.add_argument("--name", default="grid.igrd")
    p.add_argument("--tile-side", type=int, default=None)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("likelihood", parents=[common],
                       help="imperviousness-transition likelihood maps from a "
                            "land-cover series",
                       epilog=_config_keys_epilog("n_cond"))
    p.add_argument("--lulc", nargs="+", required=True,
                   help="categorical IGRDs in chronological order")
    p.add_argument("--years", default=None, help="comma-separated years")
    p.set_defaults(func=cmd_likelihood)

    p = sub.add_parser("cluster", parents=[common],
                       help="temporal-signature clustering and reverse weights",
                       epilog=_config_keys_epilog("patch_side", "cluster_k",
                                                  "signature_stat"))
    p.add_argument("--imperv", nargs="+", required=True,
                   help="continuous IGRDs in chronological order")
    p.add_argument("--patch-side", type=int, default=None)
    p.add_argument("--k", type=int, default=None)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("train", parents=[common],
                       help="train the conditional denoiser",
                       epilog=_config_keys_epilog(
                           "timesteps", "beta_start", "beta_end", "depth",
                           "base_channels", "gn_groups", "embed_dim", "n_cond",
                           "input_side", "lr", "ema_rate", "train_steps",
                           "batch_size", "lag_years"))
    p.add_argument("--synthetic", action="store_true",
                   help="train on the built-in synthetic task")
    p.add_argument("--samples", type=int, default=64,
                   help="synthetic sample count")
    p.add_argument("--data", default=None,
                   help="directory of imperv_<year>.igrd / lulc_<year>.igrd")
    p.add_argument("--target-years", default=None, help="comma-separated targets")
    p.add_argument("--holdout", default=None, help="years excluded as targets")
    p.add_argument("--patch-weights", default=None,
                   help="patch_weights.csv from the cluster subcommand")
    p.add_argument("--steps", type=int, default=None, help="override train_steps")
    p.add_argument("--batch", type=int, default=None, help="override batch_size")
    p.add_argument("--checkpoint", default="checkpoint.idnp")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", parents=[common],
                       help="DDIM forecasts over tiles x seeds",
                       epilog=_config_keys_epilog(
                           "timesteps", "beta_start", "beta_end", "depth",
                           "base_channels", "gn_groups", "embed_dim", "n_cond",
                           "input_side", "ddim_steps", "ddim_eta", "seeds",
                           "lag_years"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True,
                   help="directory of imperv_<year>.igrd / lulc_<year>.igrd")
    p.add_argument("--target-year", type=int, required=True)
    p.add_argument("--seeds", type=int, default=None, help="override seeds count")
    p.add_argument("--ddim-steps", type=int, default=None)
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--use-ema", action=argparse.BooleanOptionalAction, default=True,
                   help="sample with EMA weights (default) or raw weights")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("ca-forecast", parents=[common],
                       help="CA-Markov baseline allocation",
                       epilog=_config_keys_epilog("ca_window", "ca_eta",
                                                  "ca_tolerance",
                                                  "ca_max_iterations"))
    p.add_argument("--lulc-a", required=True, help="earlier categorical IGRD")
    p.add_argument("--lulc-b", required=True, help="later categorical IGRD")
    p.add_argument("--collapse16", action="store_true",
                   help="collapse 16-class inputs to the 8 aggregate classes")
    p.set_defaults(func=cmd_ca_forecast)

    p = sub.add_parser("evaluate", parents=[common],
                       help="multi-scale evaluation against the persistence null",
                       epilog=_config_keys_epilog("scales"))
    p.add_argument("--curves", default=None,
                   help="curve CSV path or builtin name: "
                        + ", ".join(sorted(BUILTIN_CURVES)))
    p.add_argument("--pred", nargs="+", default=None,
                   help="forecast IGRDs (one per seed)")
    p.add_argument("--truth", default=None)
    p.add_argument("--past", default=None)
    p.add_argument("--cells", default=None, help="comma-separated cell sizes")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plot", parents=[common],
                       help="emit CSV + self-contained SVG of MAE curves",
                       epilog=_config_keys_epilog("scales"))
    p.add_argument("--curves", required=True,
                   help="curve CSV path or builtin name")
    p.add_argument("--name", default="curves.svg")
    p.add_argument("--title", default="MAE vs resolution")
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    torch.set_num_threads(max(1, args.threads))
    try:
        return args.func(args)
    except ImperviaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
