"""Acceptance checks. Each test prints one PASS/FAIL line (collected in the run summary)."""
import math
import time

import numpy as np
import pytest
from scipy import ndimage

from sadrive import geometry as geo
from sadrive.attention import binarize, gumbel_noise, perturb, sample_uniform
from sadrive.backbone import SANMP, BackboneConfig, CrossScaleBlock
from sadrive.cli import disk_mask, main
from sadrive.evaluation import collides, detection_map
from sadrive.losses import LossWeights, cls_loss_map, margin_terms, planning_loss, reg_loss_map, reweight, task_margin
from sadrive.nn import Tensor, count_macs, grad_check
from sadrive.nn import functional as F
from sadrive.planner import Trajectory, sample_trajectories, select
from sadrive.scene import Actor, Bounds
from sadrive.sparse import ResidualUnit, count_flops, dense_residual_block, sparse_residual_block

from conftest import record

# ---------------------------------------------------------------------------
# gradients


def _conv_case(rng):
    w = Tensor(rng.standard_normal((3, 2, 3, 3)) * 0.5)
    b = Tensor(rng.standard_normal(3))
    up = rng.standard_normal((1, 3, 3, 3))
    f = lambda x: (F.conv2d(x, w, b, stride=2, padding=1) * up).sum()
    return f, rng.standard_normal((1, 2, 6, 6)), None, 1e-3


def _deconv_case(rng):
    w = Tensor(rng.standard_normal((2, 3, 3, 3)) * 0.5)
    up = rng.standard_normal((1, 3, 8, 8))
    f = lambda x: (F.deconv2d(x, w, None, stride=2, padding=1, output_padding=1) * up).sum()
    return f, rng.standard_normal((1, 2, 4, 4)), None, 1e-3


def _relu_conv_case(rng):
    w = Tensor(rng.standard_normal((3, 2, 3, 3)) * 0.5)
    f = lambda x: F.square_norm(F.relu(F.conv2d(x, w, None, padding=1)))
    pattern = lambda xv: (F.conv2d(Tensor(xv), w, None, padding=1).data > 0).ravel()
    return f, rng.standard_normal((1, 2, 5, 5)), pattern, 1e-3


def _attention_case(rng):
    g0, g1 = gumbel_noise(sample_uniform(rng, (4, 4))), gumbel_noise(sample_uniform(rng, (4, 4)))
    up = rng.standard_normal((4, 4))
    K = rng.uniform(0.5, 2.0)
    f = lambda z: (binarize(*_pair(perturb(z, g0, g1)), K=K, dtype=None).soft * up).sum()
    return f, rng.standard_normal((4, 4)), None, 1e-3


def _pair(logits):
    return logits.alpha0, logits.alpha1


def _cls_case(rng):
    lab = (rng.random((1, 1, 4, 4)) > 0.6).astype(float)
    A = (rng.random((4, 4)) > 0.5).astype(float)
    f = lambda x: reweight(cls_loss_map(F.sigmoid(x), lab), A)
    return f, rng.standard_normal((1, 1, 4, 4)), None, 1e-3


def _reg_case(rng):
    tgt = rng.standard_normal((1, 4, 3, 3))
    pos = rng.random((1, 3, 3)) > 0.4
    A = (rng.random((3, 3)) > 0.5).astype(float)
    f = lambda x: reweight(F.reshape(reg_loss_map(x, tgt, pos), (1, 1, 3, 3)), A)
    kinks = lambda xv: (np.abs(xv - tgt) < 1.0).ravel()
    return f, rng.standard_normal((1, 4, 3, 3)), kinks, 1e-2


def _plan_case(rng):
    bounds = Bounds(-1.0, -2.0, 4.0, 4.0, 0.5)
    gt = sample_trajectories(0.5, 1, rng)[0]
    negs = sample_trajectories(0.5, 4, rng)
    delta = task_margin(gt, negs)

    def active(C):
        m = margin_terms(C, gt, negs, delta, bounds).data
        return np.concatenate([(m > 0).ravel(), [np.argmax(m.sum(1))]])

    f = lambda C: planning_loss(C, gt, negs, bounds=bounds, delta=delta)
    return f, rng.random((6, 8, 8)), active, 1e-2


GRAD_CASES = {"conv": _conv_case, "deconv": _deconv_case, "relu-conv": _relu_conv_case,
              "attention-soft": _attention_case, "cls-loss": _cls_case, "reg-loss": _reg_case,
              "plan-loss": _plan_case}


def test_gradient_suite():
    t0 = time.perf_counter()
    worst, failures = {}, []
    for name, case in GRAD_CASES.items():
        for seed in range(20):
            f, x, pattern, tol = case(np.random.default_rng(1000 + seed))
            rep = grad_check(f, x, tol=tol, pattern=pattern)
            worst[name] = max(worst.get(name, 0.0), rep.max_rel_error)
            if not rep.passed:
                failures.append((name, seed, rep.max_rel_error))
    dt = time.perf_counter() - t0
    ok = not failures and dt < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record("gradient suite", ok, f"7 ops × 20 seeds in {dt:.1f} s; worst rel err {detail}")
    assert ok, failures


# ---------------------------------------------------------------------------
# sparse / dense equivalence


def test_sparse_dense_equivalence():
    rng = np.random.default_rng(0)
    worst = 0.0
    units = {}
    for _ in range(100):
        b = int(rng.choice([1, 2, 3, 4, 6]))
        C = int(rng.integers(2, 5))
        unit = units.setdefault(C, ResidualUnit(C, rng=np.random.default_rng(C)))
        x = Tensor(rng.standard_normal((int(rng.integers(1, 3)), C, 12, 12)).astype(np.float32))
        A = (rng.random((x.shape[0], 12, 12)) < rng.uniform(0, 0.5)).astype(np.float32)
        worst = max(worst, float(np.abs(dense_residual_block(x, unit, A).data
                                        - sparse_residual_block(x, unit, A, b).data).max()))
    blk = CrossScaleBlock(8, (4, 6, 8), (1, 2, 4), rng=rng)
    for _ in range(5):
        x = Tensor(rng.standard_normal((1, 8, 24, 24)).astype(np.float32))
        A = (rng.random((24, 24)) < rng.uniform(0, 0.2)).astype(np.float32)
        worst = max(worst, float(np.abs(dense_residual_block(x, blk, A).data
                                        - sparse_residual_block(x, blk, A, 4).data).max()))
    model = SANMP(BackboneConfig().scaled(0.25))
    x = Tensor(rng.random((1, 33, 96, 96)).astype(np.float32))
    ones = np.ones((1, 24, 24), np.float32)
    ungated = model.backbone(x)[0].data
    dense_gap = max(float(np.abs(model.backbone(x, ones)[0].data - ungated).max()),
                    float(np.abs(model.backbone(x, ones, sparse=True)[0].data - ungated).max()))
    ok = worst <= 1e-5 and dense_gap <= 1e-6
    record("sparse/dense equivalence", ok,
           f"100 triples + 5 cross-scale max-abs {worst:.1e}; dense mask vs ungated {dense_gap:.1e}")
    assert ok


# ---------------------------------------------------------------------------
# attention


def test_gumbel_correctness():
    at_inv_e = gumbel_noise(math.exp(-1))
    rng = np.random.default_rng(0)
    mean = float(gumbel_noise(sample_uniform(rng, 10**6)).mean())
    z = rng.standard_normal((64, 64)) * 3
    lg = perturb(Tensor(z))
    hard = binarize(lg.alpha0, lg.alpha1).hard
    agree = bool(np.array_equal(hard, (lg.pi >= 0.5).astype(np.float32)))
    ok = at_inv_e == 0.0 and abs(mean - 0.5772) <= 0.01 and agree
    record("gumbel correctness", ok, f"g(1/e)={at_inv_e}, mean of 1e6 draws {mean:.4f}, zero-noise = 1[pi>=0.5]: {agree}")
    assert ok


def test_straight_through_consistency():
    rng = np.random.default_rng(1)
    z = rng.standard_normal(200_000) * 2
    lg = perturb(Tensor(z), gumbel_noise(sample_uniform(rng, z.shape)), gumbel_noise(sample_uniform(rng, z.shape)))
    m = binarize(lg.alpha0, lg.alpha1, K=0.01, dtype=None)
    sel = np.abs(lg.alpha0.data - lg.alpha1.data) > 0.1
    frac = float(np.mean(np.abs(m.soft.data[sel] - m.hard[sel]) < 1e-3))
    ok = frac >= 0.999
    record("straight-through consistency", ok, f"K=0.01: soft within 1e-3 of hard on {100 * frac:.3f}% of {sel.sum()} cells")
    assert ok


# ---------------------------------------------------------------------------
# FLOPs


def test_flop_accounting():
    rng = np.random.default_rng(2)
    cfg = BackboneConfig().scaled(0.25)
    model = SANMP(cfg)
    parity = True
    for p in (0.02, 0.1, 0.4):
        A = (rng.random((1, 24, 24)) < p).astype(np.float32)
        with count_macs() as c:
            model.backbone(Tensor(rng.random((1, 33, 96, 96)).astype(np.float32)), A, sparse=True)
        rep = count_flops(cfg, A, grid=(96, 96), scorer=False)
        parity &= {l.name: l.sparse for l in rep.layers} == {k: 2 * v for k, v in c.by_tag.items()}
    mask = disk_mask(768, 0.95)
    big = count_flops(BackboneConfig(), mask, grid=(768, 768), scorer=True)
    gated = big.gated().ratio
    ok = parity and gated <= 0.12 and 0.15 <= big.ratio <= 0.35
    record("FLOP accounting", ok,
           f"analytic = counted: {parity}; 192² grid at {100 * big.sparsity:.1f}% sparsity: "
           f"gated {100 * gated:.1f}%, whole {100 * big.ratio:.1f}%")
    assert ok


# ---------------------------------------------------------------------------
# oracle equivalence


def _segments_cross(p, q, r, s):
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    return (orient(r, s, p) > 0) != (orient(r, s, q) > 0) and (orient(p, q, r) > 0) != (orient(p, q, s) > 0)


def _inside(pt, poly):
    signs = [(poly[(k + 1) % 4][0] - poly[k][0]) * (pt[1] - poly[k][1])
             - (poly[(k + 1) % 4][1] - poly[k][1]) * (pt[0] - poly[k][0]) for k in range(4)]
    return all(s > 0 for s in signs) or all(s < 0 for s in signs)


def _polygons_meet(a, b):
    if any(_segments_cross(a[i], a[(i + 1) % 4], b[j], b[(j + 1) % 4]) for i in range(4) for j in range(4)):
        return True
    return _inside(a[0], b) or _inside(b[0], a)


def _oracle_ap(dets, gts, thr):
    flat = sorted(((s, k, n, b) for k, ds in enumerate(dets) for n, (b, s) in enumerate(ds)),
                  key=lambda r: (-r[0], r[1], r[2]))
    taken, tps = set(), []
    for _, k, _, b in flat:
        cands = [(geo.rotated_iou(b, g), i) for i, g in enumerate(gts[k]) if (k, i) not in taken]
        cands = [c for c in cands if c[0] >= thr]
        if cands:
            taken.add((k, max(cands, key=lambda c: (c[0], -c[1]))[1]))
        tps.append(1 if cands else 0)
    n_gt = sum(len(g) for g in gts)
    if n_gt == 0:
        return float("nan")
    prec = [sum(tps[:c]) / c for c in range(1, len(tps) + 1)]
    rec = [sum(tps[:c]) / n_gt for c in range(1, len(tps) + 1)]
    total = 0.0
    for r10 in range(11):
        ps = [p for p, r in zip(prec, rec) if r >= r10 / 10 - 1e-12]
        total += max(ps) if ps else 0.0
    return total / 11


def _box(rng, around=None):
    if around is None:
        return (rng.uniform(-8, 8), rng.uniform(-8, 8), rng.uniform(3, 6), rng.uniform(1.5, 2.5),
                rng.uniform(-np.pi, np.pi))
    x, y, w, h, t = around
    return (x + rng.normal(0, 0.6), y + rng.normal(0, 0.4), w * rng.uniform(0.8, 1.2), h * rng.uniform(0.8, 1.2),
            t + rng.normal(0, 0.2))


def _oracle_plan_index(trajs, C, bounds):
    best, best_i = math.inf, -1
    for i, tr in enumerate(trajs):
        total = 0.0
        for t, (x, y, _) in enumerate(tr.waypoints):
            r = (x - bounds.x_min) / bounds.resolution - 0.5
            c = (y - bounds.y_min) / bounds.resolution - 0.5
            total += float(ndimage.map_coordinates(C[t], [[r], [c]], order=1, mode="nearest")[0])
        if total < best - 1e-12:
            best, best_i = total, i
    return best_i


def test_oracle_equivalence():
    rng = np.random.default_rng(3)
    n = 1000
    sat = 0
    for _ in range(n):
        ego = np.column_stack([rng.uniform(-4, 4, 6), rng.uniform(-4, 4, 6), rng.uniform(-np.pi, np.pi, 6)])
        other = np.column_stack([rng.uniform(-4, 4, 6), rng.uniform(-4, 4, 6), rng.uniform(-np.pi, np.pi, 6)])
        size = (float(rng.uniform(1, 5)), float(rng.uniform(0.5, 2.5)))
        actor = Actor(center=(0.0, 0.0), size=size, heading=0.0, future_track=other,
                      past_track=other[:1].repeat(10, 0))
        ref = any(_polygons_meet(geo.box_corners(*ego[t, :2], 4.5, 2.0, ego[t, 2]),
                                 geo.box_corners(*other[t, :2], *size, other[t, 2])) for t in range(6))
        sat += collides(ego, [actor]) == ref
    ap = 0
    for _ in range(n):
        gts = [[_box(rng) for _ in range(rng.integers(0, 4))] for _ in range(int(rng.integers(1, 3)))]
        dets = []
        for gs in gts:
            ds = [(_box(rng, g), float(rng.random())) for g in gs if rng.random() < 0.8]
            dets.append(ds + [(_box(rng), float(rng.random())) for _ in range(rng.integers(0, 3))])
        thr = float(rng.choice([0.3, 0.5, 0.7]))
        got, want = detection_map(dets, gts, (thr,))[thr], _oracle_ap(dets, gts, thr)
        ap += (math.isnan(got) and math.isnan(want)) or abs(got - want) < 1e-9
    bounds = Bounds(-4.0, -8.0, 16.0, 16.0, 0.5)
    arg = 0
    for _ in range(n):
        C = rng.random((6, 32, 32))
        trajs = sample_trajectories(float(rng.uniform(0, 8)), int(rng.integers(1, 20)), rng)
        arg += select(trajs, C, bounds).index == _oracle_plan_index(trajs, C, bounds)
    ok = sat == n and ap == n and arg == n
    record("oracle equivalence", ok, f"SAT {sat}/{n}, mAP {ap}/{n}, planner argmin {arg}/{n}")
    assert ok


# ---------------------------------------------------------------------------
# CLI determinism


def test_cli_determinism(tmp_path):
    outs = []
    for k in range(2):
        d = tmp_path / f"run{k}"
        rcs = [
            main(["gen-data", "--out", str(d / "data"), "--n-train", "4", "--n-eval", "3", "--seed", "11"]),
            main(["train", "--data", str(d / "data"), "--run", str(d / "pre"), "--epochs", "1", "--scale", "0.25",
                  "--batch-size", "2", "--seed", "11"]),
            main(["train", "--data", str(d / "data"), "--run", str(d / "joint"), "--stage", "joint", "--epochs", "1",
                  "--scale", "0.25", "--batch-size", "2", "--seed", "11", "--pretrained", str(d / "pre" / "model.ckpt")]),
            main(["eval", "--checkpoint", str(d / "joint" / "model.ckpt"), "--data", str(d / "data"),
                  "--out", str(d / "ev"), "--seed", "11"]),
            main(["sweep", "--data", str(d / "data"), "--run", str(d / "sweep"), "--scale", "0.25", "--batch-size", "2",
                  "--pretrained", str(d / "pre" / "model.ckpt"), "--lambdas", "1e-8", "1e-6", "--seeds", "11",
                  "--max-steps", "1"]),
            main(["flops", "--grid", "96", "--sparsity", "0.9", "--out", str(d / "flops.csv")]),
        ]
        assert rcs == [0] * len(rcs)
        files = sorted(p for p in d.rglob("*.csv"))
        outs.append({str(p.relative_to(d)): p.read_bytes() for p in files})
    same = outs[0] == outs[1]
    record("CLI determinism", same, f"{len(outs[0])} CSV files byte-identical across two runs: {same}")
    assert same


# ---------------------------------------------------------------------------
# trend study (desk scale, 3 seeds; about 25 minutes on one core)


@pytest.fixture(scope="module")
def study(tmp_path_factory):
    from sadrive.study import StudyConfig, run_study, summarize

    out = tmp_path_factory.mktemp("study")
    t = time.time()
    res = run_study(StudyConfig(), out)
    s = summarize(res)
    print(f"\ntrend study: {time.time() - t:.0f} s, csv in {out}")
    for k, v in s.items():
        print(f"  {k}: {v}")
    return s


def test_trend_sparsity_grows_with_lambda(study):
    by_lam = study["sparsity_by_lambda"]
    vals = [by_lam[k] for k in sorted(by_lam)]
    ok = all(b >= a for a, b in zip(vals, vals[1:]))
    spread = "flat" if max(vals) == min(vals) else "rising"
    record("trend (a) sparsity vs lambda", ok,
           "median sparsity % over seeds: " + ", ".join(f"{k:.0e}→{by_lam[k]:.1f}" for k in sorted(by_lam))
           + f" ({spread})")
    assert ok


def test_trend_learned_collision_ordering(study):
    ok = (study["learned_sparsity"] >= 90.0 and study["learned_collision"] <= study["dense_collision"]
          and study["learned_collision"] <= study["proximity_collision"])
    record("trend (b) collision ordering", ok,
           f"learned {study['learned_collision']:.1f}% at {study['learned_sparsity']:.1f}% sparsity; "
           f"dense {study['dense_collision']:.1f}%, proximity {study['proximity_collision']:.1f}%"
           + (" (mask fully off: every gated block skipped)" if study["learned_sparsity"] == 100.0 else ""))
    assert ok


def test_trend_gamma1_one_cheats(study):
    ok = study["cheat_coverage"] < 20.0
    record("trend (c) gamma1=1 coverage", ok,
           f"gt coverage {study['cheat_coverage']:.1f}% at {study['cheat_sparsity']:.1f}% sparsity "
           f"(gamma1=0.9: {study['learned_coverage']:.1f}%)")
    assert ok


def test_attended_region_map(study):
    full, att = study["learned_map_full"], study["learned_map_attended"]
    ok = bool(att >= full)  # NaN (empty attended region) compares False
    record("attended-region mAP@0.5", ok, f"attended {att:.4f} vs full {full:.4f}")
    assert ok
