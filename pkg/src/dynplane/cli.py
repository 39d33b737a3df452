"""Command-line entry point: ``python -m dynplane <command> ...``.

Every run writes its artifacts under ``<out>/<command>-<timestamp>/``
together with ``config.json``, the fully resolved configuration. Passing
that file back through ``--config`` reproduces the run.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .data import FAMILIES, DatasetRecipe, SampleFormatError, generate_dataset, load_dataset, load_sample, self_check
from .meshing import MeshingConfig, ModelField, export_obj, mise_extract
from .metrics import (
    DEFAULT_F_THRESHOLD,
    RotationEvalConfig,
    evaluate_meshes,
    plane_report,
    rotation_eval,
    sample_seed,
    shape_mesh,
    write_reports,
    write_rotation_table,
)
from .networks import CheckpointError, DynamicPlaneONet, EncoderConfig, load_checkpoint
from .training import TrainConfig, train

logger = logging.getLogger("dynplane")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------
def _add_model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--planes", type=int, default=3, help="number of projection planes (k in kD / kC); 0 = global-feature baseline")
    kind = g.add_mutually_exclusive_group()
    kind.add_argument("--dynamic", dest="canonical", action="store_false", help="predict plane normals per input (kD, default)")
    kind.add_argument("--canonical", dest="canonical", action="store_true", help="use the three axis-aligned planes (3C)")
    p.set_defaults(canonical=False)
    g.add_argument("--pe", action="store_true", help="sin/cos positional encoding of coordinates (PE)")
    g.add_argument("--frequencies", type=int, default=10, help="positional-encoding frequency bands (10 lifts R^3 to R^60)")
    g.add_argument("--feature-dim", type=int, default=32, help="feature channels D (32 as in the reference setup)")
    g.add_argument("--resolution", type=int, default=64, help="plane grid resolution (64 for objects, 128 for scenes)")
    g.add_argument("--unet-depth", type=int, default=None, help="U-Net depth; default is the smallest covering the plane")


def _add_data_flags(p: argparse.ArgumentParser, split: str = "test") -> None:
    p.add_argument("--data", required=True, help="dataset directory written by gen-data")
    p.add_argument("--split", default=split, choices=["train", "val", "test"])


def _add_checkpoint_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", required=True, help="checkpoint file; its directory must hold config.json")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynplane", description="Occupancy networks with learned projection planes.")
    parser.add_argument("--out", default="runs", help="root directory for run outputs")
    parser.add_argument("--seed", type=int, default=0, help="single source of all randomness")
    parser.add_argument("--precision", choices=["float32", "float64"], default="float32")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic analytic-shape dataset")
    p.add_argument("--dest", required=True, help="dataset directory to create")
    p.add_argument("--family", action="append", choices=sorted(FAMILIES), help="shape family (repeatable; default object)")
    p.add_argument("--train", type=int, default=50)
    p.add_argument("--val", type=int, default=10)
    p.add_argument("--test", type=int, default=10)
    p.add_argument("--n-surface", type=int, default=3000, help="surface points per cloud (3000 objects, 10000 scenes)")
    p.add_argument("--n-queries", type=int, default=2048, help="labelled occupancy queries per sample (2048)")
    p.add_argument("--noise", type=float, default=0.05, help="Gaussian noise std on the input cloud (0.05)")

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="resolved config.json of an earlier run; flags given explicitly override it")
    _add_data_flags(p, "train")
    _add_model_flags(p)
    p.add_argument("--sim-loss", choices=["off", "always", "warmup"], default="off", help="plane similarity loss schedule (SL)")
    p.add_argument("--sim-disable-after", type=int, default=20000, help="warmup: last iteration with the similarity loss (20000)")
    p.add_argument("--sim-exponent", type=int, default=10, help="exponent d; 10 penalizes angles under 45 degrees")
    p.add_argument("--sim-weight-factor", type=float, default=10.0, help="C = factor x number of plane pairs (10)")
    p.add_argument("--lr", type=float, default=1e-4, help="Adam learning rate (1e-4)")
    p.add_argument("--batch-size", type=int, default=8, help="clouds per step (8 at desk scale; 32 objects / 16 scenes at full scale)")
    p.add_argument("--iterations", type=int, default=5000)
    p.add_argument("--validate-every", type=int, default=1000, help="validation interval (1000 at desk scale; 10000 at full scale)")
    p.add_argument("--queries-per-step", type=int, default=None, help="subsample each sample's stored queries per step")

    p = sub.add_parser("reconstruct", help="extract meshes for a split or a single sample file")
    _add_checkpoint_flags(p)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--sample", help="a single .dpcs sample file instead of --data")
    p.add_argument("--initial-res", type=int, default=32)
    p.add_argument("--final-res", type=int, default=128)
    p.add_argument("--threshold", type=float, default=0.5, help="occupancy probability of the surface")

    p = sub.add_parser("eval", help="IoU, Chamfer-L1, normal consistency and F-score per sample")
    _add_checkpoint_flags(p)
    _add_data_flags(p)
    p.add_argument("--surface-samples", type=int, default=100_000)
    p.add_argument("--iou-points", type=int, default=100_000)
    p.add_argument("--f-threshold", type=float, default=DEFAULT_F_THRESHOLD, help="F-score distance threshold (1%% of the cube side)")
    p.add_argument("--initial-res", type=int, default=32)
    p.add_argument("--final-res", type=int, default=128)

    p = sub.add_parser("rotate-eval", help="mean IoU under random rotations of growing magnitude")
    _add_checkpoint_flags(p)
    _add_data_flags(p)
    p.add_argument("--thetas", default="0,15,30,45", help="comma-separated maximum angles in degrees")
    p.add_argument("--rotations-per-sample", type=int, default=1)
    p.add_argument("--iou-points", type=int, default=20_000)

    p = sub.add_parser("plane-report", help="predicted plane normals and their pairwise angles")
    _add_checkpoint_flags(p)
    _add_data_flags(p)

    p = sub.add_parser("selfcheck", help="gradient checks, geometry properties and metric oracles")
    p.add_argument("--instances", type=int, default=100, help="random instances per differentiable op")
    p.add_argument("--quick", action="store_true", help="fewer geometry samples")
    p.add_argument("--data", help="also re-verify every stored label of this dataset")
    return parser


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------
def make_run_dir(root: str | Path, command: str) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = Path(root) / f"{command}-{stamp}"
    run, k = base, 1
    while run.exists():
        run = base.with_name(f"{base.name}-{k}")
        k += 1
    run.mkdir(parents=True)
    return run


def write_config(run: Path, config: dict) -> None:
    (run / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def encoder_config_from_args(args) -> EncoderConfig:
    if args.canonical:
        if args.planes != 3:
            raise UsageError("--canonical uses exactly the three axis-aligned planes (--planes 3)")
        dynamic, fixed = 0, 3
    else:
        dynamic, fixed = args.planes, 0
    return EncoderConfig(
        feature_dim=args.feature_dim,
        num_planes=dynamic,
        plane_resolution=args.resolution,
        unet_depth=args.unet_depth,
        use_positional_encoding=args.pe,
        num_frequencies=args.frequencies,
        fixed_canonical_planes=fixed,
    )


def load_model(checkpoint: str | Path) -> DynamicPlaneONet:
    ckpt = Path(checkpoint)
    cfg_path = ckpt.parent / "config.json"
    if not ckpt.is_file():
        raise UsageError(f"checkpoint not found: {ckpt}")
    if not cfg_path.is_file():
        raise UsageError(f"no config.json next to checkpoint {ckpt}")
    config = json.loads(cfg_path.read_text(encoding="utf-8"))
    model = DynamicPlaneONet(EncoderConfig(**config["encoder"]))
    model.load_state_dict(load_checkpoint(ckpt))
    return model


def _records(args):
    if not Path(args.data).is_dir():
        raise UsageError(f"dataset directory not found: {args.data}")
    recs = load_dataset(args.data, [args.split])
    if not recs:
        raise UsageError(f"split {args.split!r} of {args.data} is empty")
    return recs


_TRAIN_FLAG_TO_FIELD = {
    "lr": "learning_rate", "batch_size": "batch_size", "iterations": "max_iterations",
    "validate_every": "validate_every", "sim_exponent": "similarity_exponent",
    "sim_weight_factor": "similarity_weight_factor", "sim_loss": "similarity_mode",
    "sim_disable_after": "similarity_disable_after", "queries_per_step": "queries_per_step",
}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------
def cmd_gen_data(args) -> int:
    families = args.family or ["object"]
    counts = {f: {"train": args.train, "val": args.val, "test": args.test} for f in families}
    recipe = DatasetRecipe(counts, args.seed, args.n_surface, args.n_queries, args.noise)
    try:
        records = generate_dataset(args.dest, recipe)
    except OSError as exc:
        raise UsageError(str(exc)) from exc
    (Path(args.dest) / "recipe.json").write_text(json.dumps(vars(recipe), indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(records)} samples to {args.dest}")
    return 0


def cmd_train(args, argv: Sequence[str]) -> int:
    if args.config:
        # explicit flags win over the stored config
        stored = json.loads(Path(args.config).read_text(encoding="utf-8"))
        enc_cfg = EncoderConfig(**stored["encoder"])
        train_fields = stored["train"]
        given = {a.split("=")[0] for a in argv if a.startswith("--")}
        for flag, name in _TRAIN_FLAG_TO_FIELD.items():
            if "--" + flag.replace("_", "-") in given:
                train_fields[name] = getattr(args, flag)
        if "--seed" in given:
            train_fields["seed"] = args.seed
        train_cfg = TrainConfig(**train_fields)
        data = args.data
    else:
        enc_cfg = encoder_config_from_args(args)
        train_cfg = TrainConfig(
            **{name: getattr(args, flag) for flag, name in _TRAIN_FLAG_TO_FIELD.items()},
            seed=args.seed,
        )
        data = args.data
    records = load_dataset(data)
    tr = [r for r in records if r.split == "train"]
    va = [r for r in records if r.split == "val"]
    if not tr:
        raise UsageError(f"no training samples in {data}")
    run = make_run_dir(args.out, "train")
    write_config(run, {"encoder": enc_cfg.to_dict(), "train": train_cfg.to_dict(), "data": str(Path(data).resolve()),
                       "precision": args.precision})
    model = DynamicPlaneONet(enc_cfg, seed=train_cfg.seed)
    report = train(model, tr, va, train_cfg, out_dir=run)
    print(f"best validation IoU {report.best_iou:.4f} at iteration {report.best_iteration}; outputs in {run}")
    return 0


def cmd_reconstruct(args) -> int:
    model = load_model(args.checkpoint)
    if args.sample:
        recs = [load_sample(args.sample)]
    elif args.data:
        recs = _records(args)
    else:
        raise UsageError("reconstruct needs --data or --sample")
    mcfg = MeshingConfig(args.initial_res, args.final_res, args.threshold)
    run = make_run_dir(args.out, "reconstruct")
    write_config(run, {"checkpoint": str(Path(args.checkpoint).resolve()), "meshing": vars(mcfg),
                       "data": args.data, "sample": args.sample, "split": args.split})
    for rec in recs:
        mesh = mise_extract(ModelField(model, rec.input_cloud, mcfg.chunk_size), mcfg).mesh
        export_obj(mesh, run / f"{rec.name}.obj")
    print(f"wrote {len(recs)} meshes to {run}")
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.checkpoint)
    recs = _records(args)
    mcfg = MeshingConfig(args.initial_res, args.final_res)
    run = make_run_dir(args.out, "eval")
    write_config(run, {"checkpoint": str(Path(args.checkpoint).resolve()), "data": args.data, "split": args.split,
                       "surface_samples": args.surface_samples, "iou_points": args.iou_points,
                       "f_threshold": args.f_threshold, "meshing": vars(mcfg), "seed": args.seed})
    reports = []
    for idx, rec in enumerate(recs):
        field = ModelField(model, rec.input_cloud, mcfg.chunk_size)
        pred = mise_extract(field, mcfg).mesh
        reports.append(
            evaluate_meshes(
                pred, shape_mesh(rec.shape, mcfg.final_resolution), lambda p: field(p) >= mcfg.threshold,
                rec.shape.occupancy, args.surface_samples, args.iou_points, args.f_threshold,
                sample_seed(args.seed, idx),
            )
        )
    write_reports(run / "metrics.csv", [r.name for r in recs], reports)
    print(f"mean IoU {np.mean([r.iou for r in reports]):.4f} over {len(reports)} samples; outputs in {run}")
    return 0


def cmd_rotate_eval(args) -> int:
    model = load_model(args.checkpoint)
    recs = _records(args)
    try:
        thetas = tuple(float(t) for t in args.thetas.split(","))
    except ValueError as exc:
        raise UsageError(f"bad --thetas {args.thetas!r}") from exc
    cfg = RotationEvalConfig(thetas, args.rotations_per_sample, args.seed, args.iou_points)
    run = make_run_dir(args.out, "rotate-eval")
    write_config(run, {"checkpoint": str(Path(args.checkpoint).resolve()), "data": args.data, "split": args.split,
                       "rotation": vars(cfg)})
    table = rotation_eval(model, recs, cfg)
    write_rotation_table(run / "rotation.csv", table)
    for theta, iou in table:
        print(f"theta_max {theta:5.1f}  mean IoU {iou:.4f}")
    return 0


def cmd_plane_report(args) -> int:
    model = load_model(args.checkpoint)
    recs = _records(args)
    run = make_run_dir(args.out, "plane-report")
    write_config(run, {"checkpoint": str(Path(args.checkpoint).resolve()), "data": args.data, "split": args.split})
    rep = plane_report(model, recs)
    rep.write(run / "planes.csv")
    print(f"{len(rep.rows)} plane normals, {len(rep.pairwise_angles)} pairwise angles; outputs in {run}")
    return 0


def cmd_selfcheck(args) -> int:
    from .selfcheck import CheckResult, run_all

    results = run_all(op_instances=args.instances, quick=args.quick)
    if args.data:
        bad = self_check(args.data)
        results.append(CheckResult("dataset labels", not bad, f"{len(bad)} mismatching samples"))
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 0 if not failed else 1


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        with ad.precision(args.precision):
            if args.command == "gen-data":
                return cmd_gen_data(args)
            if args.command == "train":
                return cmd_train(args, argv)
            handler = {
                "reconstruct": cmd_reconstruct,
                "eval": cmd_eval,
                "rotate-eval": cmd_rotate_eval,
                "plane-report": cmd_plane_report,
                "selfcheck": cmd_selfcheck,
            }[args.command]
            return handler(args)
    except (UsageError, OSError, SampleFormatError, CheckpointError) as exc:
        parser.print_usage(sys.stderr)
        print(f"dynplane {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
