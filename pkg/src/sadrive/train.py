"""Two-stage training, evaluation, the λ_A sweep and raster visualisation."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import nn
from .attention import baseline_mask, temperature
from .backbone import SANMP, BackboneConfig, config_from_dict, decode_detections
from .data import SceneDataset
from .evaluation import (
    MetricsReport,
    collides,
    detection_map,
    gt_coverage,
    planning_l2,
    violates_lanes,
)
from .formats import save_tensor, write_csv
from .losses import LossLog, LossWeights, cls_loss_map, planning_loss, reg_loss_map, reweight, total_loss
from .nn import Tape, Tensor
from .nn import functional as F
from .planner import Trajectory, plan, sample_trajectories
from .render import save_visualization
from .scene import Scene, rasterize
from .sparse import count_flops

log = logging.getLogger(__name__)

STAGES = ("dense-pretrain", "joint")
MASK_SOURCES = ("learned", "road", "vehicle", "proximity", "dense")
LAMBDA_GRID = (1e-8, 1e-7, 5e-7, 1e-6, 5e-6)
CKPT_FINAL = "model.ckpt"


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration (CLI exit code 2)."""


class NumericError(RuntimeError):
    """Non-finite loss during training (CLI exit code 3)."""


@dataclass
class RunConfig:
    seed: int = 0
    n_train: int = 2000
    n_eval: int = 500
    stage: str = "dense-pretrain"
    epochs: float = 2.0
    lr: float = 1e-4
    lr_decay_epochs: tuple = (1.0, 1.6)
    lr_decay: float = 0.1
    batch_size: int = 4
    weights: LossWeights = field(default_factory=LossWeights)
    mask: str = "learned"
    scale: float = 1.0
    depth: int = 3
    block_size: int = 4
    n_negatives: int = 200
    n_plan_samples: int = 200
    k_start: float = 1.0
    k_end: float = 0.5
    anneal: bool = False
    pretrained: str | None = None
    run_dir: str | None = None

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.lr_decay_epochs = tuple(self.lr_decay_epochs)

    def validate(self, need_pretrained: bool = True) -> None:
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.mask not in MASK_SOURCES:
            raise ConfigError(f"mask must be one of {MASK_SOURCES}, got {self.mask!r}")
        for name in ("n_train", "batch_size", "n_negatives", "n_plan_samples", "depth", "block_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1, got {getattr(self, name)}")
        if not all(math.isfinite(v) and v > 0 for v in (self.epochs, self.lr, self.scale)):
            raise ConfigError("epochs, lr and scale must be positive and finite")
        if self.stage == "joint" and need_pretrained:
            if not self.pretrained:
                raise ConfigError("joint stage needs a pretrained checkpoint (pretrained=...)")
            if not Path(self.pretrained).exists():
                raise ConfigError(f"pretrained checkpoint {self.pretrained} does not exist")

    def model_config(self) -> BackboneConfig:
        cfg = BackboneConfig().scaled(self.scale) if self.scale != 1.0 else BackboneConfig()
        cfg.depth = self.depth
        cfg.block_size = self.block_size
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_decay_epochs"] = list(self.lr_decay_epochs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown run config keys: {unknown}")
        try:
            w = d.get("weights", {})
            weights = LossWeights(**w) if isinstance(w, dict) else w
            return cls(**{**d, "weights": weights})
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e


def load_run_config(path) -> RunConfig:
    try:
        return RunConfig.from_dict(json.loads(Path(path).read_text()))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e


def lr_at(epoch: float, cfg: RunConfig) -> float:
    """Step decay: multiply by ``lr_decay`` at each boundary already passed."""
    n = sum(epoch >= b for b in cfg.lr_decay_epochs)
    return cfg.lr * cfg.lr_decay**n


# ---------------------------------------------------------------------------
# checkpoints


def save_model(path, model: SANMP, run: RunConfig | None = None, **meta) -> None:
    info = {"model": asdict(model.cfg), **meta}
    if run is not None:
        info["run"] = run.to_dict()
    nn.save_checkpoint(path, model.state_dict(), info)


def config_diff(a: dict, b: dict) -> list[str]:
    keys = sorted(set(a) | set(b))
    return [f"{k}: {a.get(k)!r} != {b.get(k)!r}" for k in keys if a.get(k) != b.get(k)]


def load_model(path, expected: BackboneConfig | None = None) -> tuple[SANMP, dict]:
    """Rebuild a model from a checkpoint; a config mismatch raises ConfigError with the diff."""
    try:
        state, meta = nn.load_checkpoint(path)
    except (OSError, ValueError) as e:
        raise ConfigError(f"cannot load checkpoint {path}: {e}") from e
    saved = json.loads(json.dumps(meta.get("model", {})))
    if expected is not None:
        want = json.loads(json.dumps(asdict(expected)))
        diff = config_diff(saved, want)
        if diff:
            raise ConfigError("checkpoint config differs from requested config:\n  " + "\n  ".join(diff))
    model = SANMP(config_from_dict(saved))
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as e:
        raise ConfigError(f"checkpoint {path} does not fit its config: {e}") from e
    return model, meta


# ---------------------------------------------------------------------------
# losses on a batch


def fixed_masks(samples, source: str, stride: int = 4) -> np.ndarray:
    return np.stack([baseline_mask(source, s.scene, stride).hard for s in samples])


def batch_losses(model: SANMP, x: np.ndarray, samples, cfg: RunConfig, attention, K: float = 1.0,
                 noise_rng=None, neg_rng=None) -> tuple[dict, object]:
    """Loss parts (batch means) and the model output for one batch."""
    N = len(samples)
    out = model(Tensor(x), attention, K, noise_rng)
    w = cfg.weights
    score_lab = np.stack([s.labels.score for s in samples])[:, None]
    targets = np.stack([s.labels.targets for s in samples])
    positive = np.stack([s.labels.positive for s in samples])
    if out.mask is None:
        A = np.ones((N, 1) + score_lab.shape[-2:], dtype=np.float32)
    else:
        A = out.mask.gated
    cls_map = cls_loss_map(out.detection.score, score_lab)
    reg_map = F.reshape(reg_loss_map(out.detection.regression, targets, positive), cls_map.shape)
    parts = {
        "cls": reweight(cls_map, A, w.gamma0, w.gamma1) * (1.0 / N),
        "reg": reweight(reg_map, A, w.gamma0, w.gamma1) * (1.0 / N),
    }
    plan_terms = []
    for n, s in enumerate(samples):
        negs = sample_trajectories(s.scene.ego_speed, cfg.n_negatives, neg_rng)
        cost_n = F.index(out.cost, n)
        plan_terms.append(planning_loss(cost_n, Trajectory.observed(s.scene.ego_future), negs,
                                        s.scene.lanes, s.scene.bounds, w.v_penalty))
    total_plan = plan_terms[0]
    for t in plan_terms[1:]:
        total_plan = total_plan + t
    parts["plan"] = total_plan * (1.0 / N)
    if out.mask is not None and isinstance(attention, str) and attention == "learned":
        parts["attn"] = F.sum(out.mask.gated) * (1.0 / N)
    return parts, out


def _attention_for(stage: str, source: str, samples, stride: int):
    if stage == "dense-pretrain":
        return "none"
    if source == "learned":
        return "learned"
    return fixed_masks(samples, source, stride)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: SANMP
    log: LossLog
    steps: int
    checkpoints: list[str] = field(default_factory=list)


def _dump_batch(run_dir: Path | None, step: int, x: np.ndarray, samples, parts: dict) -> Path | None:
    if run_dir is None:
        return None
    d = run_dir / f"nan_step{step}"
    d.mkdir(parents=True, exist_ok=True)
    save_tensor(d / "input.tensor", x, {"step": step})
    info = {
        "step": step,
        "scene_seeds": [int(s.scene.seed) for s in samples],
        "parts": {k: float(v.item()) for k, v in parts.items()},
    }
    (d / "batch.json").write_text(json.dumps(info, indent=1))
    return d


def train(cfg: RunConfig, data: SceneDataset, init_state: dict | None = None,
          max_steps: int | None = None) -> TrainResult:
    """Adam on the joint objective with the epoch-based step schedule.

    ``dense-pretrain`` trains without attention. ``joint`` starts from the
    pretrained weights (``cfg.pretrained`` or ``init_state``) and gates the
    backbone with ``cfg.mask``.
    """
    cfg.validate(need_pretrained=init_state is None)
    model = SANMP(cfg.model_config(), seed=cfg.seed)
    if cfg.stage == "joint":
        if init_state is None:
            pre, _ = load_model(cfg.pretrained, model.cfg)
            init_state = pre.state_dict()
        model.load_state_dict(init_state)
    params = model.parameters()
    opt = nn.Adam(params, lr=cfg.lr)
    shuffle_rng, noise_rng, neg_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(3))
    steps_per_epoch = math.ceil(len(data) / cfg.batch_size)
    total = max(1, int(round(cfg.epochs * steps_per_epoch)))
    if max_steps is not None:
        total = min(total, max_steps)
    run_dir = Path(cfg.run_dir) if cfg.run_dir else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    losslog = LossLog()
    ckpts = []
    order = np.array([], dtype=int)
    stride = model.cfg.downsample
    for step in range(total):
        if step % steps_per_epoch == 0:
            order = shuffle_rng.permutation(len(data))
        k = step % steps_per_epoch
        idx = order[k * cfg.batch_size : (k + 1) * cfg.batch_size]
        epoch = step / steps_per_epoch
        opt.lr = lr_at(epoch, cfg)
        K = temperature(step / total, cfg.k_start, cfg.k_end, cfg.anneal)
        x, samples = data.batch(idx)
        attention = _attention_for(cfg.stage, cfg.mask, samples, stride)
        with Tape() as tape:
            parts, out = batch_losses(model, x, samples, cfg, attention, K, noise_rng, neg_rng)
            loss = total_loss(parts, cfg.weights, params)
        if not np.isfinite(loss.item()):
            where = _dump_batch(run_dir, step, x, samples, parts)
            raise NumericError(f"non-finite loss at step {step}; batch dumped to {where}")
        grads = tape.backward(loss, params)
        opt.step(grads)
        sparsity = out.mask.sparsity if out.mask is not None else 0.0
        losslog.append(step, parts, sparsity)
        if step % 50 == 0:
            log.info("step %d/%d loss %.4f sparsity %.3f lr %.1e", step, total, loss.item(), sparsity, opt.lr)
        if run_dir is not None and ((step + 1) % steps_per_epoch == 0 or step + 1 == total):
            p = run_dir / f"epoch{(step + 1 + steps_per_epoch - 1) // steps_per_epoch}.ckpt"
            save_model(p, model, cfg, step=step + 1)
            ckpts.append(str(p))
    if run_dir is not None:
        save_model(run_dir / CKPT_FINAL, model, cfg, step=total)
        losslog.save(run_dir / "loss.csv")
    return TrainResult(model, losslog, total, ckpts)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    report: MetricsReport
    masks: list[np.ndarray]
    plans: list[Trajectory]
    detections: list[list]


def predict(model: SANMP, x: np.ndarray, attention, sparse: bool = True):
    with nn.no_grad():
        return model(Tensor(x), attention, 1.0, None, sparse=sparse)


def evaluate(model: SANMP, data: SceneDataset, mask: str = "learned", seed: int = 0, batch_size: int = 8,
             n_samples: int = 200, ref_masks: list | None = None, score_threshold: float = 0.05) -> EvalResult:
    """Metrics over every scene of ``data``.

    ``mask`` is "none" (ungated model) or one of MASK_SOURCES. ``ref_masks``
    define the attended region for mAP; by default the masks used for gating.
    """
    if mask != "none" and mask not in MASK_SOURCES:
        raise ConfigError(f"unknown mask source {mask!r}")
    stride = model.cfg.downsample
    l2, coll, lane, masks, plans, dets, gts, flops = [], [], [], [], [], [], [], []
    for start in range(0, len(data), batch_size):
        x, samples = data.batch(range(start, min(start + batch_size, len(data))))
        if mask in ("none", "learned"):
            attention = mask
        else:
            attention = fixed_masks(samples, mask, stride)
        out = predict(model, x, attention)
        for n, s in enumerate(samples):
            sc = s.scene
            rng = np.random.default_rng([seed, sc.seed])
            res = plan(out.cost.data[n], sc.ego_speed, n_samples, rng, sc.bounds)
            plans.append(res.trajectory)
            l2.append(planning_l2(res.trajectory, sc.ego_future))
            coll.append(collides(res.trajectory, sc.actors, sc.ego_size))
            lane.append(violates_lanes(res.trajectory, sc.lanes, sc.ego_size))
            m = out.mask.hard[n, 0] if out.mask is not None else np.ones(out.features.shape[-2:], np.float32)
            masks.append(m)
            flops.append(count_flops(model.cfg, m if out.mask is not None else None,
                                     grid=x.shape[-2:], scorer=mask == "learned").sparse_flops)
            d = decode_detections(out.detection.score.data[n, 0], out.detection.regression.data[n], sc.bounds,
                                  threshold=score_threshold, max_candidates=64)
            dets.append([(det.box, det.score) for det in d])
            gts.append([a.box for a in sc.actors if sc.bounds.contains(np.array(a.center))])
    region = ref_masks if ref_masks is not None else masks
    report = MetricsReport(
        sparsity=100.0 * (1.0 - float(np.mean([m.mean() for m in masks]))),
        planning_l2=float(np.mean([v[-1] for v in l2])),
        collision_rate=100.0 * float(np.mean(coll)),
        lane_violation=100.0 * float(np.mean(lane)),
        map_full=detection_map(dets, gts),
        map_attended=detection_map(dets, gts, masks=region, bounds=data.scenes[0].bounds),
        flops=float(np.mean(flops)),
        l2_curve=np.mean(l2, axis=0).tolist(),
        n_scenes=len(data),
    )
    return EvalResult(report, masks, plans, dets)


# ---------------------------------------------------------------------------
# sweeps


SWEEP_COLUMNS = ["lambda_attn", "seed", "sparsity_pct", "planning_l2_3s_m", "collision_rate_pct",
                 "lane_violation_pct", "map_full@0.5", "map_attended@0.5", "gt_coverage_pct"]


def sweep_sparsity(base: RunConfig, train_data: SceneDataset, eval_data: SceneDataset,
                   pretrained: dict[int, dict], lambdas=LAMBDA_GRID, seeds=(0,), out_csv=None,
                   max_steps: int | None = None) -> list[dict]:
    """One joint run per (λ_A, seed) from that seed's pretrained weights."""
    rows = []
    for lam in lambdas:
        for seed in seeds:
            w = LossWeights(**{**asdict(base.weights), "attn": lam})
            cfg = RunConfig.from_dict({**base.to_dict(), "seed": seed, "stage": "joint", "mask": "learned",
                                       "weights": asdict(w), "run_dir": None})
            res = train(cfg, train_data, init_state=pretrained[seed], max_steps=max_steps)
            ev = evaluate(res.model, eval_data, "learned", seed=seed)
            rows.append(report_row(ev, eval_data, lambda_attn=lam, seed=seed))
            log.info("lambda %.1e seed %d sparsity %.1f%%", lam, seed, ev.report.sparsity)
    if out_csv is not None:
        write_csv(out_csv, SWEEP_COLUMNS, [[r[c] for c in SWEEP_COLUMNS] for r in rows])
    return rows


def report_row(ev: EvalResult, data: SceneDataset, **keys) -> dict:
    """Flat row of the sweep columns for one evaluation."""
    rep = ev.report
    return {**keys, "sparsity_pct": rep.sparsity, "planning_l2_3s_m": rep.planning_l2,
            "collision_rate_pct": rep.collision_rate, "lane_violation_pct": rep.lane_violation,
            "map_full@0.5": rep.map_full[0.5], "map_attended@0.5": rep.map_attended[0.5],
            "gt_coverage_pct": 100.0 * gt_coverage(data.scenes, ev.masks)}


def median_by_lambda(rows: list[dict], key: str = "sparsity_pct") -> dict[float, float]:
    out = {}
    for lam in dict.fromkeys(r["lambda_attn"] for r in rows):
        out[lam] = float(np.median([r[key] for r in rows if r["lambda_attn"] == lam]))
    return out


def dataset_loss(model: SANMP, data: SceneDataset, cfg: RunConfig, attention="none", seed: int = 0) -> float:
    """Mean total loss over ``data`` without noise, with a fixed negative stream."""
    neg_rng = np.random.default_rng(seed)
    total, n = 0.0, 0
    with nn.no_grad():
        for start in range(0, len(data), cfg.batch_size):
            idx = range(start, min(start + cfg.batch_size, len(data)))
            x, samples = data.batch(idx)
            parts, _ = batch_losses(model, x, samples, cfg, attention, 1.0, None, neg_rng)
            total += total_loss(parts, cfg.weights).item() * len(samples)
            n += len(samples)
    return total / n


# ---------------------------------------------------------------------------
# visualisation


def default_mask(meta: dict) -> str:
    """Mask source a checkpoint was trained with; dense pretraining means ungated."""
    run = meta.get("run", {})
    if run.get("stage", "dense-pretrain") == "dense-pretrain":
        return "none"
    return run.get("mask", "learned")


def visualize(model: SANMP, scene: Scene, prefix, mask: str = "learned", seed: int = 0,
              scale: int = 2) -> tuple[list[str], EvalResult]:
    """Plan on one scene and write its attention mask and BEV composite."""
    data = SceneDataset([scene], [rasterize(scene).grid])
    res = evaluate(model, data, mask, seed=seed)
    shown = res.masks[0] if mask != "none" else None
    return save_visualization(prefix, scene, shown, res.plans[0], scale=scale), res
