"""Command-line entry point: gen-synth, train, gradcheck, infer, eval, sweep.

Config precedence is defaults < JSON config file < flags. Every run writes
a resolved-config snapshot into its output directory; unknown config keys
are rejected. Errors exit nonzero with one machine-parsable line on
stderr.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np
import torch

from .bundles import DatasetManifest, read_bundle, fuse_target
from .gradcheck import DEFAULT_TOLERANCE, run_gradcheck
from .scoring import AggregationConfig, aggregate, evaluate, write_pgm
from .synthetic import SyntheticSpec, gen_synthetic
from .training import (
    Trainer,
    TrainConfig,
    load_engine_for_eval,
    save_checkpoint,
    score_maps,
)

_CONFIG_FIELDS = {f.name: f.type for f in fields(TrainConfig)}


class CliError(Exception):
    pass


def _load_config(path: str | None, overrides: dict) -> TrainConfig:
    cfg = TrainConfig()
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"config file {path}: {exc}") from exc
        unknown = set(raw) - set(_CONFIG_FIELDS)
        if unknown:
            raise CliError(f"unknown config keys: {sorted(unknown)}")
        cfg = replace(cfg, **raw)
    clean = {k: v for k, v in overrides.items() if v is not None}
    cfg = replace(cfg, **clean)
    try:
        cfg.validate()
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    return cfg


def _config_overrides(args: argparse.Namespace) -> dict:
    return {
        name: getattr(args, name)
        for name in _CONFIG_FIELDS
        if hasattr(args, name)
    }


def _add_train_config_flags(p: argparse.ArgumentParser) -> None:
    for f in fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        if isinstance(f.default, bool):
            p.add_argument(flag, dest=f.name, default=None, action="store_const", const=True)
            p.add_argument("--no-" + f.name.replace("_", "-"), dest=f.name,
                           default=None, action="store_const", const=False)
        elif isinstance(f.default, int):
            p.add_argument(flag, type=int, default=None)
        elif isinstance(f.default, float):
            p.add_argument(flag, type=float, default=None)
        else:
            p.add_argument(flag, type=str, default=None)


def _snapshot(out_dir: Path, command: str, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    snap = {"command": command, **payload}
    (out_dir / "resolved_config.json").write_text(json.dumps(snap, indent=2, sort_keys=True))


def cmd_gen_synth(args) -> int:
    spec = SyntheticSpec(
        n_classes=args.classes,
        samples_per_class=args.train_per_class,
        test_per_class=args.test_per_class,
        grid_h=args.grid,
        grid_w=args.grid,
        dim=args.dim,
        manifold_rank=args.rank,
        seed=args.seed,
    )
    out = Path(args.out)
    gen_synthetic(spec, out)
    _snapshot(out, "gen-synth", {"spec": asdict(spec)})
    print(f"wrote synthetic dataset to {out}")
    return 0


def _train(data: Path, out: Path, cfg: TrainConfig, log_every: int = 0) -> Path:
    manifest = DatasetManifest.load(data / "manifest.json")
    trainer = Trainer(data, manifest, cfg)
    trainer.run(log_every=log_every)
    trainer.compute_score_stats()
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.amoc"
    save_checkpoint(trainer, ckpt)
    with open(out / "metrics.jsonl", "w") as fh:
        for m in trainer.metrics:
            fh.write(json.dumps(m, sort_keys=True) + "\n")
    return ckpt


def cmd_train(args) -> int:
    cfg = _load_config(args.config, _config_overrides(args))
    out = Path(args.out)
    _snapshot(out, "train", {"config": asdict(cfg), "data": str(args.data)})
    ckpt = _train(Path(args.data), out, cfg, log_every=args.log_every)
    print(f"checkpoint written to {ckpt}")
    return 0


def cmd_gradcheck(args) -> int:
    ok = run_gradcheck(tolerance=args.tolerance, case=args.case)
    if not ok:
        raise CliError(f"gradient check failed at tolerance {args.tolerance:g}")
    print("gradient check passed")
    return 0


def cmd_infer(args) -> int:
    cfg, model, kb, stats, meta = load_engine_for_eval(args.checkpoint)
    b = read_bundle(args.bundle)
    target = torch.from_numpy(fuse_target(b))
    cls_vec = torch.from_numpy(b.cls_embedding.copy())
    maps, mass, gates = score_maps(model, kb, target, cls_vec, b.class_id)
    agg_cfg = AggregationConfig(
        normalize=not args.no_normalize, weighting=args.weighting,
        image_stat=args.image_stat,
    )
    agg, img = aggregate(maps, mass, stats.get(b.class_id), agg_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = {
        "sample_id": b.sample_id,
        "class_id": b.class_id,
        "label": b.label,
        "image_score": img,
        "gate_mass": mass,
        "gates": gates.tolist(),
    }
    (out / "result.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    write_pgm(out / "aggregated.pgm", agg)
    for g, m in maps.items():
        write_pgm(out / f"map_{g}.pgm", m)
    _snapshot(out, "infer", {"checkpoint": str(args.checkpoint), "bundle": str(args.bundle)})
    print(f"image score {img:.4f} -> {out}")
    return 0


def cmd_eval(args) -> int:
    manifest = DatasetManifest.load(Path(args.data) / "manifest.json")
    agg_cfg = AggregationConfig(
        normalize=not args.no_normalize, weighting=args.weighting,
        image_stat=args.image_stat,
    )
    report = evaluate(args.data, manifest, args.checkpoint, agg_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "report.txt").write_text(report.to_text())
    _snapshot(out, "eval", {"checkpoint": str(args.checkpoint), "data": str(args.data)})
    print(report.to_text())
    return 0


def _parse_grid(text: str | None, cast) -> list | None:
    if text is None:
        return None
    return [cast(v) for v in text.split(",") if v != ""]


def cmd_sweep(args) -> int:
    base = _load_config(args.config, _config_overrides(args))
    axes = {
        "experts_per_group": _parse_grid(args.sweep_experts, int) or [base.n_patch_experts],
        "top_k": _parse_grid(args.sweep_k, int) or [base.top_k],
        "balance_weight": _parse_grid(args.sweep_balance, float) or [base.balance_weight],
        "repulsion_weight": _parse_grid(args.sweep_repulsion, float) or [base.repulsion_weight],
    }
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _snapshot(out, "sweep", {"config": asdict(base), "axes": axes, "data": str(args.data)})

    rows = []
    cells = list(itertools.product(*axes.values()))
    for i, (n_exp, k, bw, rw) in enumerate(cells):
        cfg = replace(
            base,
            n_patch_experts=n_exp,
            n_component_experts=n_exp,
            n_global_experts=n_exp,
            top_k=k,
            balance_weight=bw,
            repulsion_weight=rw,
        )
        try:
            cfg.validate()
        except ValueError as exc:
            raise CliError(f"sweep cell {i}: {exc}") from exc
        cell_dir = out / f"cell_{i:03d}"
        ckpt = _train(Path(args.data), cell_dir, cfg)
        manifest = DatasetManifest.load(Path(args.data) / "manifest.json")
        report = evaluate(args.data, manifest, ckpt)
        (cell_dir / "report.json").write_text(report.to_json())
        rows.append(
            {
                "cell": i,
                "experts_per_group": n_exp,
                "top_k": k,
                "balance_weight": bw,
                "repulsion_weight": rw,
                "image_auroc": report.data["mean"]["image_auroc"],
                "pixel_auroc": report.data["mean"]["pixel_auroc"],
            }
        )
        print(f"cell {i}: experts={n_exp} k={k} bw={bw} rw={rw} "
              f"image_auroc={rows[-1]['image_auroc']:.4f}")
    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    print(f"sweep summary -> {out / 'summary.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixad")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate a synthetic feature dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--train-per-class", type=int, default=200)
    p.add_argument("--test-per-class", type=int, default=60)
    p.add_argument("--grid", type=int, default=14)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--rank", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train", help="train on a manifest of normal bundles")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--log-every", type=int, default=0)
    _add_train_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gradcheck", help="finite-difference check of the objective")
    p.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE)
    p.add_argument("--case", choices=("all", "tiny", "paired"), default="all")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("infer", help="score one bundle with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-normalize", action="store_true")
    p.add_argument("--weighting", choices=("gate", "uniform", "max"), default="gate")
    p.add_argument("--image-stat", choices=("topq", "max"), default="topq")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="evaluate a checkpoint over a test manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-normalize", action="store_true")
    p.add_argument("--weighting", choices=("gate", "uniform", "max"), default="gate")
    p.add_argument("--image-stat", choices=("topq", "max"), default="topq")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="grid sweep over experts / top-k / loss weights")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--sweep-experts", default=None, help="comma list, experts per group")
    p.add_argument("--sweep-k", default=None, help="comma list of top-k values")
    p.add_argument("--sweep-balance", default=None, help="comma list of balance weights")
    p.add_argument("--sweep-repulsion", default=None, help="comma list of repulsion weights")
    _add_train_config_flags(p)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - single-line machine-parsable contract
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
