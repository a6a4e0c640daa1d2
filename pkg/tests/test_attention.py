import math

import numpy as np
import pytest

from sadrive import nn
from sadrive.attention import (
    BASELINES,
    UNetScorer,
    attend,
    baseline_mask,
    binarize,
    gumbel_noise,
    perturb,
    proximity_radius,
    sparsity_loss,
    temperature,
)
from sadrive.formats import load_pnm
from sadrive.nn import Tape, Tensor, grad_check
from sadrive.nn import functional as F
from sadrive.scene import Bounds, generate_scene


def pair(a0, a1):
    return Tensor(np.asarray(a0, np.float64)), Tensor(np.asarray(a1, np.float64))


# ---------------------------------------------------------------- scorer


def test_unet_output_shape():
    net = UNetScorer(in_channels=8, widths=(4, 6, 8))
    z = net(Tensor(np.random.default_rng(0).standard_normal((2, 8, 12, 16))))
    assert z.shape == (2, 1, 12, 16)


def test_unet_zero_start():
    net = UNetScorer(in_channels=8, widths=(4, 6, 8))
    z = net(Tensor(np.zeros((1, 8, 8, 8))))
    assert np.all(z.data == 0)
    assert np.all(perturb(z).pi == 0.5)


def test_unet_rejects_wrong_channels():
    with pytest.raises(nn.ShapeError, match="expected"):
        UNetScorer(in_channels=8)(Tensor(np.zeros((1, 7, 8, 8))))


def relu_signs(net, x):
    """Sign pattern of every ReLU input in the scorer, used to exclude kinks."""
    seen = []
    orig = F.relu

    def spy(t):
        seen.append(t.data > 0)
        return orig(t)

    F.relu = spy
    try:
        net(Tensor(x))
    finally:
        F.relu = orig
    return np.concatenate([s.ravel() for s in seen])


@pytest.mark.parametrize("seed", range(3))
def test_unet_feature_gradient(seed):
    rng = np.random.default_rng(seed)
    net = UNetScorer(in_channels=3, widths=(2, 3, 4), rng=rng)
    # non-zero head so the gradient is not identically zero
    net.head.weight.data[...] = rng.standard_normal(net.head.weight.shape)
    for p in net.parameters():
        p.data = p.data.astype(np.float64)
    rep = grad_check(lambda x: net(x).sum(), rng.standard_normal((1, 3, 8, 8)), tol=1e-3,
                     pattern=lambda x: relu_signs(net, x))
    assert rep.passed, rep


# ---------------------------------------------------------------- gumbel


def test_gumbel_closed_forms():
    assert gumbel_noise(math.exp(-1)) == 0.0
    assert gumbel_noise(math.exp(-math.e)) == pytest.approx(-1.0, abs=1e-15)


@pytest.mark.parametrize("u", [0.0, 1.0, -0.5, 2.0])
def test_gumbel_rejects_outside_unit_interval(u):
    with pytest.raises(ValueError):
        gumbel_noise(u)


def test_gumbel_mean_is_euler_mascheroni():
    rng = np.random.default_rng(0)
    g = gumbel_noise(rng.uniform(np.finfo(float).tiny, 1.0, 10**6))
    assert abs(g.mean() - 0.5772156649) < 0.01


# ---------------------------------------------------------------- binarize


def test_binarize_comparison_and_tie():
    m = binarize(*pair([0.3, 0.5], [0.2, 0.5]))
    assert m.hard.tolist() == [1.0, 1.0]
    assert m.soft.data[1] == 0.5


def test_binarize_closed_form_soft():
    m = binarize(*pair([1.0], [0.0]), K=1.0)
    assert m.soft.data[0] == pytest.approx(math.e / (math.e + 1), abs=1e-12)
    assert m.soft.data[0] == pytest.approx(0.731059, abs=1e-6)


@pytest.mark.parametrize("K", [0.0, -1.0])
def test_binarize_rejects_nonpositive_temperature(K):
    with pytest.raises(ValueError):
        binarize(*pair([0.0], [0.0]), K=K)


def test_zero_noise_matches_half_threshold():
    rng = np.random.default_rng(1)
    z = Tensor(rng.standard_normal((1, 1, 24, 24)) * 3)
    logits = perturb(z)
    m = binarize(logits.alpha0, logits.alpha1)
    assert np.array_equal(m.hard, (logits.pi >= 0.5).astype(np.float32))
    assert m.sparsity == 1 - int(np.count_nonzero(m.hard)) / m.hard.size


def test_logit_difference_identity():
    rng = np.random.default_rng(2)
    z = Tensor(rng.standard_normal(50))
    g0, g1 = gumbel_noise(rng.random(50)), gumbel_noise(rng.random(50))
    lg = perturb(z, g0, g1)
    pi = lg.pi
    np.testing.assert_allclose(lg.alpha0.data - lg.alpha1.data, np.log(pi / (1 - pi)) + g0 - g1, atol=1e-9)
    assert np.all((pi > 0) & (pi < 1))


def test_raising_logit_never_turns_cell_off():
    rng = np.random.default_rng(3)
    z = rng.standard_normal(200)
    g0, g1 = gumbel_noise(rng.random(200)), gumbel_noise(rng.random(200))
    lo = perturb(Tensor(z), g0, g1)
    hi = perturb(Tensor(z + rng.uniform(0, 2, 200)), g0, g1)
    a_lo = binarize(lo.alpha0, lo.alpha1).hard
    a_hi = binarize(hi.alpha0, hi.alpha1).hard
    assert not np.any((a_lo == 1) & (a_hi == 0))


# ---------------------------------------------------------------- straight-through


def test_forward_is_hard_backward_is_soft():
    rng = np.random.default_rng(4)
    z = Tensor(rng.standard_normal((1, 1, 5, 5)), requires_grad=True)
    up = rng.standard_normal((1, 1, 5, 5))
    with Tape() as tape:
        m = attend(z, K=0.7)
        loss = (m.gated * up).sum()
    (g,) = tape.backward(loss, [z])
    assert set(np.unique(m.gated.data)) <= {0.0, 1.0}
    s = m.soft.data.reshape(z.shape)
    np.testing.assert_allclose(g, up * s * (1 - s) / 0.7, rtol=1e-5, atol=1e-7)


def test_zero_upstream_gives_zero_grad():
    z = Tensor(np.random.default_rng(0).standard_normal((1, 1, 4, 4)), requires_grad=True)
    with Tape() as tape:
        loss = (attend(z).gated * 0.0).sum()
    (g,) = tape.backward(loss, [z])
    assert np.all(g == 0)


@pytest.mark.parametrize("seed", range(5))
def test_soft_path_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    g0, g1 = gumbel_noise(rng.random((3, 3))), gumbel_noise(rng.random((3, 3)))
    w = rng.standard_normal((3, 3))

    def f(z):
        lg = perturb(z, g0, g1)
        return (binarize(lg.alpha0, lg.alpha1, K=0.5, dtype=None).soft * w).sum()

    rep = grad_check(f, rng.standard_normal((3, 3)), tol=1e-3)
    assert rep.passed, rep


def test_low_temperature_concentrates_gradient():
    rng = np.random.default_rng(5)
    z = Tensor(rng.standard_normal(64) * 0.5, requires_grad=True)
    with Tape() as tape:
        lg = perturb(z)
        m = binarize(lg.alpha0, lg.alpha1, K=0.01)
        loss = m.gated.sum()
    (g,) = tape.backward(loss, [z])
    diff = np.abs(lg.alpha0.data - lg.alpha1.data)
    assert np.argmax(np.abs(g)) == np.argmin(diff)


# ---------------------------------------------------------------- sparsity loss


def test_sparsity_loss_counts():
    ones = binarize(*pair(np.ones((4, 4)), np.zeros((4, 4))))
    zeros = binarize(*pair(np.zeros((4, 4)), np.ones((4, 4))))
    assert sparsity_loss(ones).item() == 16
    assert sparsity_loss(zeros).item() == 0
    rng = np.random.default_rng(6)
    a0, a1 = rng.standard_normal((9, 9)), rng.standard_normal((9, 9))
    m = binarize(*pair(a0, a1))
    assert sparsity_loss(m).item() == int(np.count_nonzero(a0 >= a1))


def test_temperature_schedule():
    assert temperature(0.3) == 1.0
    assert temperature(0.0, anneal=True) == 1.0
    assert temperature(1.0, anneal=True) == 0.5
    assert temperature(0.5, anneal=True) == pytest.approx(0.75)


# ---------------------------------------------------------------- baselines


def blank_scene():
    s = generate_scene(0, "sparse")
    s.actors = []
    return s


def test_dense_baseline():
    assert baseline_mask("dense", generate_scene(0, "urban")).sparsity == 0.0


def test_vehicle_baseline_empty_scene():
    assert baseline_mask("vehicle", blank_scene()).hard.sum() == 0


def test_vehicle_baseline_covers_positives():
    s = generate_scene(2, "urban")
    from sadrive.scene import rasterize_labels

    pos = rasterize_labels(s).score > 0
    m = baseline_mask("vehicle", s).hard > 0
    assert np.all(m[pos])
    assert m.sum() > pos.sum()


def test_road_baseline_is_lane_surface():
    s = generate_scene(3, "urban")
    m = baseline_mask("road", s)
    assert 0 < m.sparsity < 1


def test_proximity_radius_by_bisection():
    b = Bounds()
    r = proximity_radius(b)
    n = (b.H // 4) * (b.W // 4)
    analytic = math.sqrt(0.06 * n * 2.0**2 / math.pi)
    # lattice counting keeps the bisected radius within one cell of the disk-area estimate
    assert abs(r - analytic) < 2.0
    m = baseline_mask("proximity", blank_scene())
    assert abs(m.sparsity - 0.94) < 0.01


def test_unknown_baseline_rejected():
    with pytest.raises(ValueError, match="unknown"):
        baseline_mask("lidar", blank_scene())
    assert "proximity" in BASELINES


def test_mask_pgm_export(tmp_path):
    m = binarize(*pair([[1.0, -1.0], [0.0, 2.0]], np.zeros((2, 2))))
    m.save_pgm(tmp_path / "m.pgm")
    img = load_pnm(tmp_path / "m.pgm")
    assert img.tolist() == [[255, 0], [255, 255]]
