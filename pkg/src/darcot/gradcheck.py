"""Finite-difference gradient table for every op, block and loss (float64)."""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, finite_diff_check, param_grad_check
from .networks import GDFN, MDTA, REGM, Fusion, Generator, Potential, TransportMap
from .objective import (
    CostConfig,
    loss_potential,
    loss_task_contrastive,
    loss_transport_paired,
    loss_transport_unpaired,
    residual_reg,
)

TOLERANCE = 1e-4


def _const(shape, seed, scale=0.5):
    return Tensor(np.random.default_rng(seed).standard_normal(shape) * scale)


def _project(out: Tensor, seed: int) -> Tensor:
    """Random linear functional so every output entry influences the check."""
    if out.shape == ():
        return out
    return ad.sum(ad.mul(out, _const(out.shape, seed, 1.0)))


def op_cases() -> dict[str, tuple[tuple, Callable[[Tensor], Tensor]]]:
    c = _const
    return {
        "add": ((3, 4), lambda t: ad.add(t, c((3, 4), 1))),
        "sub": ((3, 4), lambda t: ad.sub(c((3, 4), 1), t)),
        "mul": ((3, 4), lambda t: ad.mul(t, c((3, 4), 1))),
        "matmul": ((2, 3, 4), lambda t: ad.matmul(t, c((2, 4, 3), 1))),
        "linear": ((3, 4), lambda t: ad.linear(t, c((4, 2), 1), c((2,), 2))),
        "conv2d": ((2, 3, 6, 6), lambda t: ad.conv2d(t, c((4, 3, 3, 3), 1), c((4,), 2))),
        "conv2d_stride2": ((1, 2, 6, 6), lambda t: ad.conv2d(t, c((3, 2, 3, 3), 1), None, stride=2)),
        "depthwise_conv2d": ((2, 3, 5, 5), lambda t: ad.depthwise_conv2d(t, c((3, 1, 3, 3), 1), c((3,), 2))),
        "upsample2x": ((1, 2, 3, 3), ad.upsample2x),
        "relu": ((3, 4), ad.relu),
        "leaky_relu": ((3, 4), ad.leaky_relu),
        "gelu": ((3, 4), ad.gelu),
        "sigmoid": ((3, 4), ad.sigmoid),
        "tanh": ((3, 4), ad.tanh),
        "softplus": ((3, 4), ad.softplus),
        "exp": ((3, 4), ad.exp),
        "log": ((3, 4), lambda t: ad.log(ad.add(ad.square(t), 0.5))),
        "abs": ((3, 4), ad.abs_),
        "sqrt": ((3, 4), lambda t: ad.sqrt(ad.add(ad.square(t), 0.5))),
        "square": ((3, 4), ad.square),
        "softmax": ((3, 5), ad.softmax),
        "normalize": ((3, 5), ad.normalize),
        "layer_norm": ((2, 4, 3, 3), lambda t: ad.layer_norm(t, ad.add(c((4,), 1), 1.0), c((4,), 2))),
        "global_avg_pool": ((2, 3, 4, 4), ad.global_avg_pool),
        "concat_channels": ((2, 2, 3, 3), lambda t: ad.concat_channels([t, ad.mul(t, t)])),
        "reshape": ((2, 6), lambda t: ad.reshape(t, (3, 4))),
        "transpose": ((2, 3, 4), lambda t: ad.transpose(t, (2, 0, 1))),
        "take_rows": ((4, 3), lambda t: ad.take_rows(t, [2, 0, 2])),
        "sum": ((3, 4), lambda t: ad.sum(t, axis=1)),
        "mean": ((3, 4), lambda t: ad.mean(t, axis=0)),
        "l1_norm": ((2, 5), lambda t: ad.l1_norm(t, per_sample=True)),
        "l2_norm": ((2, 5), lambda t: ad.l2_norm(t, per_sample=True)),
        "fft2_magnitudes": ((2, 3, 4, 4), ad.fft2_magnitudes),
    }


def _randomize_fusions(module, rng) -> None:
    # fusion convs start at zero, which would hide the embedding branch
    for name, p in module.named_parameters():
        if ".fuse" in f".{name}" and name.endswith("weight"):
            p.data = rng.standard_normal(p.shape) * 0.3


def composite_cases(seed: int = 0) -> dict[str, Callable[[], float]]:
    rng = np.random.default_rng(seed)
    small = (8, 8, 8)

    def block(cls, c=4):
        blk = cls(np.random.default_rng(seed), c)
        x = rng.standard_normal((2, c, 4, 4))
        fx = lambda t: _project(blk(t), 3)
        fp = lambda: _project(blk(Tensor(x)), 3)
        return max(finite_diff_check(fx, x), param_grad_check(fp, blk.parameters(), per_param=3, seed=seed))

    def regm_chain():
        regm = REGM(np.random.default_rng(seed), small)
        r = rng.standard_normal((1, 3, 8, 8)) * 0.3

        def loss(t):
            e = regm(t)
            return ad.add(ad.add(_project(e.R1, 1), _project(e.R2, 2)), _project(e.R3, 3))

        return max(finite_diff_check(loss, r), param_grad_check(lambda: loss(Tensor(r)), regm.parameters(), per_param=2, seed=seed))

    def two_pass():
        tm = TransportMap(np.random.default_rng(seed), base=4, emb_channels=small, blocks=1)
        _randomize_fusions(tm, rng)
        y = rng.random((1, 3, 8, 8))
        f = lambda t: _project(tm.two_pass_restore(t).x_hat, 4)
        return max(finite_diff_check(f, y), param_grad_check(lambda: f(Tensor(y)), tm.parameters(), per_param=2, seed=seed))

    def generator():
        g = Generator(np.random.default_rng(seed), base=4, emb_channels=small, blocks=1)
        y = rng.random((1, 3, 8, 8))
        f = lambda: ad.mean(g(Tensor(y)))
        return param_grad_check(f, g.parameters(), per_param=2, seed=seed)

    def potential():
        pot = Potential(np.random.default_rng(seed), base=4)
        x = rng.random((2, 3, 16, 16))
        f = lambda t: ad.sum(pot(t))
        return max(finite_diff_check(f, x, coords=range(0, x.size, 7)), param_grad_check(lambda: f(Tensor(x)), pot.parameters(), per_param=3, seed=seed))

    def fusion():
        fu = Fusion(np.random.default_rng(seed), 3, 2)
        fu.conv.weight.data = rng.standard_normal(fu.conv.weight.shape)
        r = Tensor(rng.standard_normal((1, 2, 4, 4)))
        return finite_diff_check(lambda t: _project(fu(t, r), 5), rng.standard_normal((1, 3, 4, 4)))

    return {
        "MDTA": lambda: block(MDTA),
        "GDFN": lambda: block(GDFN),
        "fusion": fusion,
        "REGM chain": regm_chain,
        "generator": generator,
        "two_pass_restore 3x8x8": two_pass,
        "potential": potential,
    }


def loss_cases(seed: int = 0) -> dict[str, Callable[[], float]]:
    rng = np.random.default_rng(seed)
    y = Tensor(rng.random((2, 3, 4, 4)))
    xs = Tensor(rng.random((2, 3, 4, 4)))
    phi = Tensor(rng.standard_normal(2))
    ty = rng.random((2, 3, 4, 4))
    phi_x = Tensor(rng.standard_normal(3))
    tasks = ["noise", "rain"]
    cfg = CostConfig()
    return {
        "residual_reg fourier_l1": lambda: finite_diff_check(lambda t: residual_reg(t, "fourier_l1"), rng.standard_normal((3, 4, 4))),
        "residual_reg fourier_l2": lambda: finite_diff_check(lambda t: residual_reg(t, "fourier_l2"), rng.standard_normal((3, 4, 4))),
        "loss_transport_unpaired": lambda: finite_diff_check(lambda t: loss_transport_unpaired(y, t, phi, cfg, tasks), ty),
        "loss_transport_paired": lambda: finite_diff_check(lambda t: loss_transport_paired(y, t, xs, phi, cfg, tasks), ty),
        "loss_potential": lambda: finite_diff_check(lambda t: loss_potential(t, phi_x), rng.standard_normal(4)),
        "loss_task_contrastive": lambda: finite_diff_check(lambda t: loss_task_contrastive(t, [0, 1, 0, 1, 2, 2], 0.5), rng.standard_normal((6, 4))),
    }


def gradient_table(seed: int = 0, tolerance: float = TOLERANCE) -> list[dict]:
    """Run every check; one row per op/composite/loss with its max relative error."""
    rows = []
    for name, (shape, fn) in op_cases().items():
        t0 = time.perf_counter()
        x = np.random.default_rng(seed + 7).standard_normal(shape)
        err = finite_diff_check(lambda t, fn=fn: _project(fn(t), 11), x)
        rows.append({"kind": "op", "name": name, "max_rel_error": err, "seconds": time.perf_counter() - t0})
    for kind, cases in (("composite", composite_cases(seed)), ("loss", loss_cases(seed))):
        for name, run in cases.items():
            t0 = time.perf_counter()
            err = run()
            rows.append({"kind": kind, "name": name, "max_rel_error": err, "seconds": time.perf_counter() - t0})
    for r in rows:
        r["passed"] = bool(r["max_rel_error"] < tolerance)
    return rows
