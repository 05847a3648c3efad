import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from darcot import autodiff as ad
from darcot.autodiff import Tensor, finite_diff_check
from darcot.errors import ContractViolation
from darcot.objective import (
    CostConfig,
    loss_potential,
    loss_task_contrastive,
    loss_transport_paired,
    loss_transport_unpaired,
    residual_reg,
    transport_cost,
)

OFF = CostConfig(residual_reg_mode="off")


def contrastive_oracle(emb, labels, tau, balanced=True):
    """Explicit double loop over pairs."""
    z = [np.asarray(v, float) / (np.linalg.norm(v) or 1.0) for v in emb]
    total = 0.0
    for k in sorted(set(labels)):
        pos, neg = [], []
        for i, li in enumerate(labels):
            if li != k:
                continue
            for j, lj in enumerate(labels):
                if i == j:
                    continue
                val = math.exp(float(np.dot(z[i], z[j])) / tau)
                (pos if lj == k else neg).append(val)
        if not pos:
            continue
        p = sum(pos) / len(pos) if balanced else sum(pos)
        q = (sum(neg) / len(neg) if balanced else sum(neg)) if neg else 0.0
        total += -math.log(p / (p + q))
    return total


def direct_dft_mags(img):
    h, w = img.shape
    a = np.arange(h)[:, None]
    b = np.arange(w)[None, :]
    out = np.empty((h, w))
    for u in range(h):
        for v in range(w):
            out[u, v] = abs((img * np.exp(-2j * np.pi * (u * a / h + v * b / w))).sum())
    return out


# ------------------------------------------------------------ transport_cost


def test_transport_cost_examples():
    y = Tensor(np.random.default_rng(0).random((3, 4, 4)))
    assert transport_cost(y, y).item() == 0.0
    onehot = np.zeros((3, 4, 4))
    onehot[1, 2, 3] = 1.0
    assert transport_cost(Tensor(onehot), Tensor(np.zeros_like(onehot))).item() == 1.0
    d = np.zeros(10)
    d[:2] = [0.3, 0.4]
    assert transport_cost(Tensor(d), Tensor(np.zeros(10))).item() == pytest.approx(np.sqrt(0.09 + 0.16))


def test_transport_cost_shape_mismatch():
    with pytest.raises(ContractViolation):
        transport_cost(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


# ------------------------------------------------------------- residual_reg


def test_residual_reg_zero():
    for mode in ("fourier_l1", "fourier_l2", "off"):
        assert residual_reg(Tensor(np.zeros((3, 4, 4))), mode).item() == 0.0


def test_residual_reg_impulse_direct_dft():
    imp = np.array([[1.0, 0.0], [0.0, 0.0]])
    mags = direct_dft_mags(imp)
    assert residual_reg(Tensor(imp), "fourier_l1").item() == pytest.approx(mags.sum())
    assert residual_reg(Tensor(imp), "fourier_l1").item() == pytest.approx(4.0)
    assert residual_reg(Tensor(imp), "fourier_l2").item() == pytest.approx(np.sqrt((mags**2).sum()))
    assert residual_reg(Tensor(imp), "fourier_l2").item() == pytest.approx(2.0)


@pytest.mark.parametrize("c", [0.5, -1.25, 3.0])
def test_residual_reg_constant(c):
    assert residual_reg(Tensor(np.full((2, 2), c)), "fourier_l1").item() == pytest.approx(4 * abs(c))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 6))
def test_residual_reg_l2_parseval(seed, h, w):
    r = np.random.default_rng(seed).standard_normal((3, h, w))
    val = residual_reg(Tensor(r), "fourier_l2").item()
    assert val == pytest.approx(np.sqrt(h * w) * np.linalg.norm(r), rel=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_costs_nonnegative_and_zero_iff_zero(seed):
    rng = np.random.default_rng(seed)
    r = rng.standard_normal((3, 4, 4)) * rng.random()
    for mode in ("fourier_l1", "fourier_l2"):
        assert residual_reg(Tensor(r), mode).item() > 0
    assert transport_cost(Tensor(r), Tensor(np.zeros_like(r))).item() > 0


# ---------------------------------------------------------- transport losses


def batch(seed, n=3, shape=(3, 4, 4)):
    rng = np.random.default_rng(seed)
    return (
        Tensor(rng.random((n, *shape))),
        Tensor(rng.random((n, *shape))),
        Tensor(rng.random((n, *shape))),
        Tensor(rng.standard_normal(n)),
    )


def test_unpaired_trivial():
    y = Tensor(np.random.default_rng(0).random((1, 3, 4, 4)))
    assert loss_transport_unpaired(y, y, Tensor(np.zeros(1)), OFF).item() == 0.0
    assert loss_transport_unpaired(y, y, Tensor(np.array([5.0])), OFF).item() == -5.0


def test_unpaired_matches_resummation():
    y, ty, _, phi = batch(1)
    tasks = ["noise", "rain", "haze"]
    cfg = CostConfig()
    got = loss_transport_unpaired(y, ty, phi, cfg, tasks).item()
    expected = 0.0
    for i, t in enumerate(tasks):
        r = y.data[i] - ty.data[i]
        mags = np.abs(np.fft.fft2(r))
        g = np.sqrt((mags**2).sum()) if t == "noise" else mags.sum()
        expected += np.linalg.norm(r) + g - phi.data[i]
    assert got == pytest.approx(expected / 3, rel=1e-12)


def test_paired_examples():
    y, ty, xstar, phi = batch(2)
    zero_phi = Tensor(np.zeros(3))
    got = loss_transport_paired(y, xstar, xstar, zero_phi, OFF).item()
    expect = np.mean([np.linalg.norm(y.data[i] - xstar.data[i]) for i in range(3)])
    assert got == pytest.approx(expect, rel=1e-12)

    cfg0 = CostConfig(lambda_pair=0.0)
    tasks = ["noise", "rain", "rain"]
    a = loss_transport_paired(y, ty, xstar, phi, cfg0, tasks).item()
    b = loss_transport_unpaired(y, ty, phi, cfg0, tasks).item()
    assert a == b


def test_paired_lambda_hand_evaluation():
    ty = np.zeros((1, 3, 2, 2))
    xstar = ty.copy()
    xstar[0, 0, 0, 0] = 0.2
    cfg = CostConfig(residual_reg_mode="off", lambda_pair=10.0)
    got = loss_transport_paired(Tensor(ty), Tensor(ty), Tensor(xstar), Tensor(np.zeros(1)), cfg).item()
    assert got == pytest.approx(2.0)


def test_paired_missing_pair():
    y, ty, _, phi = batch(3)
    with pytest.raises(ContractViolation):
        loss_transport_paired(y, ty, None, phi, CostConfig())


def test_empty_batch_rejected():
    e = Tensor(np.zeros((0, 3, 2, 2)))
    with pytest.raises(ContractViolation):
        loss_transport_unpaired(e, e, Tensor(np.zeros(0)), OFF)
    with pytest.raises(ContractViolation):
        loss_potential(Tensor(np.zeros(0)), Tensor(np.ones(2)))


def test_potential_loss():
    assert loss_potential(Tensor(np.full(4, 3.0)), Tensor(np.full(2, 3.0))).item() == 0.0
    assert loss_potential(Tensor(np.array([1.0, 3.0])), Tensor(np.array([4.0, 6.0]))).item() == -3.0
    rng = np.random.default_rng(5)
    a, b = rng.standard_normal(7), rng.standard_normal(5)
    assert loss_potential(Tensor(a), Tensor(b)).item() == pytest.approx(sum(a) / 7 - sum(b) / 5, rel=1e-12)


def test_losses_pass_gradient_check():
    y, ty, xstar, phi = batch(4, n=2)
    tasks = ["noise", "haze"]
    cfg = CostConfig()
    f = lambda t: loss_transport_paired(y, t, xstar, phi, cfg, tasks)
    assert finite_diff_check(f, ty.data) < 1e-4
    g = lambda t: loss_transport_unpaired(y, ty, t, cfg, tasks)
    assert finite_diff_check(g, phi.data) < 1e-4


# ----------------------------------------------------------- contrastive


def test_contrastive_single_task_is_zero():
    emb = Tensor(np.random.default_rng(0).standard_normal((2, 4)))
    assert loss_task_contrastive(emb, [0, 0], 0.07).item() == 0.0


def test_contrastive_two_tasks_equal_similarity():
    emb = Tensor(np.ones((4, 3)))
    assert loss_task_contrastive(emb, [0, 0, 1, 1], 0.07).item() == pytest.approx(2 * math.log(2), abs=1e-9)


def test_contrastive_separated():
    emb = Tensor(np.array([[1.0, 0], [1.0, 0], [-1.0, 0], [-1.0, 0]]))
    assert loss_task_contrastive(emb, [0, 0, 1, 1], 0.07).item() < 1e-8


def test_contrastive_single_sample_task_flagged():
    emb = Tensor(np.random.default_rng(1).standard_normal((3, 4)))
    loss, flags = loss_task_contrastive(emb, [0, 0, 1], 0.5, return_flags=True)
    assert flags == [1]
    assert np.isfinite(loss.item())


@pytest.mark.parametrize("balanced", [True, False])
@pytest.mark.parametrize("seed", range(4))
def test_contrastive_matches_oracle(seed, balanced):
    rng = np.random.default_rng(seed)
    emb = rng.standard_normal((7, 5))
    labels = [0, 1, 2, 0, 1, 2, 0]
    got = loss_task_contrastive(Tensor(emb), labels, 0.3, balanced=balanced).item()
    assert got == pytest.approx(contrastive_oracle(emb, labels, 0.3, balanced), rel=1e-10)


def test_contrastive_gradient():
    labels = [0, 1, 0, 1, 2, 2]
    f = lambda t: loss_task_contrastive(t, labels, 0.5)
    assert finite_diff_check(f, np.random.default_rng(3).standard_normal((6, 4))) < 1e-4


def test_contrastive_monotone_in_positive_similarity():
    # rotate sample 1 toward sample 0 inside a plane orthogonal to the
    # negatives, so only the positive similarity changes
    base = np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0], [0, 0, 1.0, 0], [0, 0, 0.6, 0.8]])
    labels = [0, 0, 1, 1]
    prev = None
    for ang in np.linspace(np.pi, 0.0, 25):
        emb = base.copy()
        emb[1] = [np.cos(ang), np.sin(ang), 0.0, 0.0]
        val = loss_task_contrastive(Tensor(emb), labels, 0.07).item()
        if prev is not None:
            assert val < prev
        prev = val
