"""Command-line entry points.

Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .attention import proximity_radius
from .backbone import BackboneConfig
from .backbone import load_config as _load_config
from .data import SceneDataset
from .formats import load_pnm, write_csv
from .scene import Bounds, load_scene
from .sparse import count_flops
from .train import (
    CKPT_FINAL,
    LAMBDA_GRID,
    MASK_SOURCES,
    STAGES,
    ConfigError,
    NumericError,
    RunConfig,
    default_mask,
    evaluate,
    load_model,
    load_run_config,
    sweep_sparsity,
    train,
    visualize,
)

log = logging.getLogger("sadrive")

# flag name -> RunConfig field
RUN_FLAGS = {
    "seed": "seed",
    "n_train": "n_train",
    "n_eval": "n_eval",
    "stage": "stage",
    "epochs": "epochs",
    "lr": "lr",
    "batch_size": "batch_size",
    "mask": "mask",
    "scale": "scale",
    "depth": "depth",
    "block_size": "block_size",
    "n_negatives": "n_negatives",
    "pretrained": "pretrained",
}
WEIGHT_FLAGS = {"lambda_attn": "attn", "attn_scale": "attn_scale", "gamma1": "gamma1", "gamma0": "gamma0",
                "weight_decay": "decay"}


def resolve_config(args) -> RunConfig:
    """Config file first, then every flag that was given on the command line."""
    base = load_run_config(args.config).to_dict() if getattr(args, "config", None) else RunConfig().to_dict()
    for flag, key in RUN_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            base[key] = v
    for flag, key in WEIGHT_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            base["weights"][key] = v
    return RunConfig.from_dict(base)


def load_config(path) -> BackboneConfig:
    try:
        return _load_config(path)
    except (OSError, ValueError, TypeError) as e:
        raise ConfigError(f"cannot read model config {path}: {e}") from e


def _load_split(data_dir, split: str, limit: int | None) -> SceneDataset:
    path = Path(data_dir) / split
    try:
        return SceneDataset.load(path, limit)
    except FileNotFoundError as e:
        raise ConfigError(str(e)) from e


# ---------------------------------------------------------------------------
# verbs


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    SceneDataset.generate(cfg.n_train, cfg.seed, "train").save(out / "train")
    SceneDataset.generate(cfg.n_eval, cfg.seed, "eval").save(out / "eval")
    (out / "data.json").write_text(json.dumps({"seed": cfg.seed, "n_train": cfg.n_train, "n_eval": cfg.n_eval}))
    print(f"wrote {cfg.n_train} train and {cfg.n_eval} eval scenes to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    cfg.run_dir = args.run
    cfg.validate()
    data = _load_split(args.data, "train", cfg.n_train)
    res = train(cfg, data, max_steps=args.max_steps)
    print(f"trained {res.steps} steps; checkpoint {Path(args.run) / CKPT_FINAL}")
    return 0


def cmd_eval(args) -> int:
    expected = load_config(args.model_config) if args.model_config else None
    model, meta = load_model(args.checkpoint, expected)
    mask = args.mask or default_mask(meta)
    data = _load_split(args.data, "eval", args.n_eval)
    ref = None
    if args.region_from:
        ref_model, ref_meta = load_model(args.region_from)
        ref = evaluate(ref_model, data, default_mask(ref_meta), seed=args.seed).masks
    res = evaluate(model, data, mask, seed=args.seed, ref_masks=ref)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res.report.save_csv(out / "metrics.csv")
    (out / "metrics.txt").write_text(res.report.to_text())
    write_csv(out / "l2_curve.csv", ["t", "l2_m"], [((k + 1) * 0.5, v) for k, v in enumerate(res.report.l2_curve)])
    print(res.report.to_text(), end="")
    return 0


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    cfg.stage = "joint"
    cfg.mask = "learned"
    cfg.pretrained = args.pretrained
    cfg.validate()
    model, _ = load_model(args.pretrained, cfg.model_config())
    state = model.state_dict()
    train_data = _load_split(args.data, "train", cfg.n_train)
    eval_data = _load_split(args.data, "eval", cfg.n_eval)
    seeds = args.seeds or [cfg.seed]
    out = Path(args.run)
    out.mkdir(parents=True, exist_ok=True)
    rows = sweep_sparsity(cfg, train_data, eval_data, {s: state for s in seeds}, args.lambdas or LAMBDA_GRID,
                          seeds, out / "sweep.csv", max_steps=args.max_steps)
    for r in rows:
        print(f"lambda_A={r['lambda_attn']:.1e} seed={r['seed']} sparsity={r['sparsity_pct']:.1f}% "
              f"L2={r['planning_l2_3s_m']:.3f} collision={r['collision_rate_pct']:.2f}%")
    return 0


def cmd_viz(args) -> int:
    model, meta = load_model(args.checkpoint)
    if args.scene:
        try:
            scene = load_scene(args.scene)
        except (OSError, ValueError) as e:
            raise ConfigError(f"cannot read scene {args.scene}: {e}") from e
    else:
        data = _load_split(args.data, "eval", None)
        if not 0 <= args.index < len(data):
            raise ConfigError(f"index {args.index} outside the {len(data)} eval scenes")
        scene = data.scenes[args.index]
    paths, _ = visualize(model, scene, args.out, args.mask or default_mask(meta), args.seed, args.pixel_scale)
    print("\n".join(paths))
    return 0


def disk_mask(grid: int, sparsity: float, stride: int = 4) -> np.ndarray:
    """Single disk around the grid centre covering 1 - ``sparsity`` of the backbone cells."""
    size = grid * 0.5
    b = Bounds(-size / 2, -size / 2, size, size, 0.5)
    r = proximity_radius(b, sparsity, stride)
    return np.linalg.norm(b.cell_centers(stride), axis=-1) <= r


def cmd_flops(args) -> int:
    cfg = load_config(args.model_config) if args.model_config else BackboneConfig()
    if args.mask_pgm:
        try:
            mask = load_pnm(args.mask_pgm) > 127
        except (OSError, ValueError) as e:
            raise ConfigError(f"cannot read mask {args.mask_pgm}: {e}") from e
    elif args.sparsity is not None:
        mask = disk_mask(args.grid, args.sparsity)
    else:
        mask = None
    if mask is not None and mask.shape != (args.grid // 4, args.grid // 4):
        raise ConfigError(f"mask {mask.shape} does not match a {args.grid}×{args.grid} input")
    rep = count_flops(cfg, mask, grid=(args.grid, args.grid), scorer=args.scorer)
    if args.out:
        rep.save_csv(args.out)
    g = rep.gated()
    print(f"sparsity {100 * rep.sparsity:.1f}%  dense {rep.dense_flops / 1e9:.3f} GFLOP  "
          f"sparse {rep.sparse_flops / 1e9:.3f} GFLOP  ratio {rep.ratio:.3f}  gated ratio {g.ratio:.3f}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config; flags given here override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-eval", type=int)
    p.add_argument("--stage", choices=STAGES)
    p.add_argument("--epochs", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--mask", choices=MASK_SOURCES)
    p.add_argument("--scale", type=float, help="backbone width multiplier")
    p.add_argument("--depth", type=int)
    p.add_argument("--block-size", type=int)
    p.add_argument("--n-negatives", type=int)
    p.add_argument("--pretrained")
    p.add_argument("--lambda-attn", type=float)
    p.add_argument("--attn-scale", type=float)
    p.add_argument("--gamma1", type=float)
    p.add_argument("--gamma0", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--max-steps", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sadrive", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("gen-data", help="generate train/eval scenes with cached BEV rasters")
    _run_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="dense pretraining or joint training")
    _run_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--run", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="metrics of a checkpoint on the eval split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mask", choices=("none",) + MASK_SOURCES)
    p.add_argument("--model-config", help="expected model config; a mismatch is an error")
    p.add_argument("--region-from", help="checkpoint whose learned masks define the attended region")
    p.add_argument("--n-eval", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="joint training over a λ_A grid")
    _run_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--lambdas", type=float, nargs="+")
    p.add_argument("--seeds", type=int, nargs="+")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("viz", help="render the attention mask and planned trajectory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", help="scene file; otherwise --data and --index")
    p.add_argument("--data")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--mask", choices=("none",) + MASK_SOURCES)
    p.add_argument("--out", required=True, help="output prefix")
    p.add_argument("--pixel-scale", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_viz)

    p = sub.add_parser("flops", help="analytic dense vs sparse backbone FLOPs")
    p.add_argument("--model-config")
    p.add_argument("--grid", type=int, default=96, help="input grid side (cells)")
    p.add_argument("--sparsity", type=float, help="use a centred disk mask of this sparsity")
    p.add_argument("--mask-pgm", help="mask at backbone resolution (nonzero = attended)")
    p.add_argument("--scorer", action="store_true", help="count the attention scorer")
    p.add_argument("--out", help="per-layer CSV")
    p.set_defaults(fn=cmd_flops)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "verb", None) == "viz" and not args.scene and not args.data:
        parser.error("viz needs --scene or --data")
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
