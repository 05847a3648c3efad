"""Adversarial training of the transport map and the potential with RMSProp.

Each step makes one potential update followed by ``n_T`` transport-map
updates.  The potential minimizes ``mean phi(T(y)) - mean phi(x)``; the map
minimizes the transport loss (paired or unpaired) plus ``gamma_task`` times
the task contrastive loss on pooled first-scale embeddings.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from pathlib import Path
from typing import Any

import numpy as np

from . import autodiff as ad
from . import io as fio
from .autodiff import Tensor
from .degradations import DatasetBundle
from .errors import ContractViolation, NumericError
from .networks import Potential, TransportMap
from .objective import (
    CostConfig,
    loss_potential,
    loss_task_contrastive,
    loss_transport_paired,
    loss_transport_unpaired,
)

log = logging.getLogger(__name__)

MODES = ("paired", "unpaired")
LOSSES = ("ot", "l1_only")


@dataclasses.dataclass
class TrainConfig:
    lr_T: float = 1e-4
    lr_phi: float = 0.5e-4
    n_T: int = 1
    batch_size: int = 4
    steps: int = 100
    tau: float = 0.07
    gamma_task: float = 0.1
    lambda_pair: float = 10.0
    mode: str = "paired"
    seed: int = 0
    rmsprop_decay: float = 0.99
    rmsprop_eps: float = 1e-8
    grad_penalty: float = 0.0
    residual_reg_mode: str = "fourier_l1"
    loss: str = "ot"
    base: int = 16
    emb_channels: tuple = (64, 32, 16)
    blocks: int = 1
    conditioning: str = "multiscale"
    potential_base: int = 16
    dtype: str = "float32"

    def __post_init__(self):
        self.emb_channels = tuple(int(c) for c in self.emb_channels)
        if self.lr_T < 0 or self.lr_phi < 0:
            raise ContractViolation("learning rates must be >= 0")
        if self.n_T < 1:
            raise ContractViolation("n_T must be >= 1")
        if self.batch_size < 1 or self.steps < 0:
            raise ContractViolation("batch_size must be >= 1 and steps >= 0")
        if self.mode not in MODES:
            raise ContractViolation(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.loss not in LOSSES:
            raise ContractViolation(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if not 0 <= self.rmsprop_decay < 1 or self.rmsprop_eps < 0:
            raise ContractViolation("rmsprop_decay must lie in [0, 1) and eps >= 0")
        if self.grad_penalty < 0:
            raise ContractViolation("grad_penalty must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ContractViolation("dtype must be float32 or float64")
        self.cost_config()

    def cost_config(self) -> CostConfig:
        return CostConfig(
            residual_reg_mode=self.residual_reg_mode,
            lambda_pair=self.lambda_pair,
            gamma_task=self.gamma_task,
            tau=self.tau,
        )

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["emb_channels"] = list(self.emb_channels)
        return d

    def hash(self) -> str:
        return fio.config_hash(self.to_json())


# ------------------------------------------------------------------ RMSProp


def rmsprop_update(params, grads, state, lr: float, decay: float = 0.99, eps: float = 1e-8):
    """In-place RMSProp step; ``state`` is a list of running squared-gradient arrays.

    Returns the (mutated) state.  Non-finite gradients abort before any
    parameter is touched.
    """
    if not (len(params) == len(grads) == len(state)):
        raise ContractViolation("params, grads and state must align")
    for i, (p, g, v) in enumerate(zip(params, grads, state)):
        if g.shape != p.shape or v.shape != p.shape:
            raise ContractViolation(f"rmsprop: shape mismatch at parameter {i}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"rmsprop: non-finite gradient for parameter {i}")
    for p, g, v in zip(params, grads, state):
        data = p.data if isinstance(p, Tensor) else p
        v *= decay
        v += (1.0 - decay) * g * g
        data -= lr * g / (np.sqrt(v) + eps)
    return state


# ------------------------------------------------------------------ state


@dataclasses.dataclass
class TrainerState:
    transport: TransportMap
    potential: Potential
    opt_T: list
    opt_phi: list
    rng: np.random.Generator
    step: int = 0
    counters: dict = dataclasses.field(default_factory=lambda: {"phi_updates": 0, "T_updates": 0})

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"T/{k}": v for k, v in self.transport.state_dict().items()}
        out.update({f"phi/{k}": v for k, v in self.potential.state_dict().items()})
        for prefix, names, opt in (("optT", self.transport, self.opt_T), ("optphi", self.potential, self.opt_phi)):
            for (k, _), v in zip(names.named_parameters(), opt):
                out[f"{prefix}/{k}"] = v
        return out


def init_state(cfg: TrainConfig) -> TrainerState:
    init_seq, data_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    init_rng = np.random.default_rng(init_seq)
    transport = TransportMap(init_rng, cfg.base, cfg.emb_channels, cfg.blocks, cfg.conditioning)
    potential = Potential(init_rng, cfg.potential_base)
    transport.astype(cfg.dtype)
    potential.astype(cfg.dtype)
    return TrainerState(
        transport=transport,
        potential=potential,
        opt_T=[np.zeros_like(p.data) for p in transport.parameters()],
        opt_phi=[np.zeros_like(p.data) for p in potential.parameters()],
        rng=np.random.default_rng(data_seq),
    )


def state_to_checkpoint(state: TrainerState, cfg: TrainConfig) -> fio.Checkpoint:
    meta = {"rng": state.rng.bit_generator.state, "counters": dict(state.counters), "config": cfg.to_json()}
    return fio.Checkpoint(state.step, cfg.hash(), state.arrays(), meta)


def state_from_checkpoint(ckpt: fio.Checkpoint, cfg: TrainConfig) -> TrainerState:
    if ckpt.config_hash != cfg.hash():
        raise ContractViolation("checkpoint was written with a different config")
    state = init_state(cfg)
    t = ckpt.tensors
    state.transport.load_state_dict({k[2:]: v for k, v in t.items() if k.startswith("T/")})
    state.potential.load_state_dict({k[4:]: v for k, v in t.items() if k.startswith("phi/")})
    state.opt_T = [t[f"optT/{k}"].copy() for k, _ in state.transport.named_parameters()]
    state.opt_phi = [t[f"optphi/{k}"].copy() for k, _ in state.potential.named_parameters()]
    state.rng.bit_generator.state = ckpt.meta["rng"]
    state.counters = dict(ckpt.meta["counters"])
    state.step = ckpt.step
    return state


# ------------------------------------------------------------------ batches


@dataclasses.dataclass
class Batch:
    y: np.ndarray
    x: np.ndarray
    xstar: np.ndarray | None
    tasks: list[str]
    labels: np.ndarray


def sample_batch(data: DatasetBundle, cfg: TrainConfig, rng: np.random.Generator) -> Batch:
    """Task-stratified draw from the degraded pool plus a target batch.

    Paired batches use the ground truth of each degraded sample as targets;
    unpaired batches draw targets independently from the clean pool.
    """
    ids = data.task_ids()
    k = int(ids.max()) + 1
    order = rng.permutation(k)
    counts = np.zeros(k, dtype=int)
    for i in range(cfg.batch_size):
        counts[order[i % k]] += 1
    idx = []
    for t in range(k):
        pool = np.flatnonzero(ids == t)
        if counts[t]:
            idx.extend(rng.choice(pool, size=counts[t], replace=counts[t] > len(pool)).tolist())
    idx = np.array(idx)
    dt = np.dtype(cfg.dtype)
    y = data.degraded[idx].astype(dt)
    if cfg.mode == "paired":
        xstar = data.clean_for(idx).astype(dt)
        x = xstar
    else:
        xstar = data.clean_for(idx).astype(dt) if data.pair_index is not None else None
        x = data.clean[rng.integers(0, len(data.clean), size=cfg.batch_size)].astype(dt)
    return Batch(y, x, xstar, [data.tasks[i] for i in idx], ids[idx])


# ------------------------------------------------------------------ steps


def _finite(name: str, value: float) -> float:
    if not np.isfinite(value):
        raise NumericError(f"non-finite {name}: {value}")
    return float(value)


def _lipschitz_penalty(phi_a: Tensor, phi_b: Tensor, a: np.ndarray, b: np.ndarray) -> Tensor:
    # first-order surrogate: penalize difference quotients above 1
    dist = np.sqrt(((a - b) ** 2).reshape(len(a), -1).sum(1)) + 1e-12
    quot = ad.mul(ad.abs_(ad.sub(phi_a, phi_b)), Tensor((1.0 / dist).astype(a.dtype)))
    excess = ad.relu(ad.sub(quot, 1.0))
    return ad.mean(ad.square(excess))


def _task_loss(rest, labels, cfg: TrainConfig):
    r1 = rest.embeddings.R1
    if cfg.gamma_task == 0 or r1 is None:
        return None
    if len(labels) < 2:
        log.warning("batch smaller than 2: task loss skipped")
        return None
    if len(np.unique(labels)) < 2:
        return None
    pooled = ad.global_avg_pool(r1)
    return loss_task_contrastive(pooled, labels, cfg.tau, warn=False)


def train_step(state: TrainerState, cfg: TrainConfig, batch: Batch) -> dict:
    """One potential update followed by n_T transport updates."""
    costs = cfg.cost_config()
    t_params = state.transport.parameters()
    p_params = state.potential.parameters()
    y = Tensor(batch.y)
    out: dict[str, Any] = {"L_phi": None, "L_T": None, "L_task": None}

    rest = state.transport.two_pass_restore(y)
    if cfg.loss == "ot":
        ty_fixed = rest.x_hat.data
        phi_ty = state.potential(Tensor(ty_fixed))
        phi_x = state.potential(Tensor(batch.x))
        l_phi = loss_potential(phi_ty, phi_x)
        out["L_phi"] = _finite("L_phi", l_phi.item())
        if cfg.grad_penalty > 0:
            pen = _lipschitz_penalty(phi_ty, phi_x, ty_fixed, batch.x)
            l_phi = ad.add(l_phi, ad.mul(pen, cfg.grad_penalty))
        grads = ad.backward(l_phi, p_params)
        rmsprop_update(p_params, grads, state.opt_phi, cfg.lr_phi, cfg.rmsprop_decay, cfg.rmsprop_eps)
        state.counters["phi_updates"] += 1

    for t in range(cfg.n_T):
        if t > 0:
            rest = state.transport.two_pass_restore(y)
        ty = rest.x_hat
        if cfg.loss == "l1_only":
            if batch.xstar is None:
                raise ContractViolation("l1_only loss needs paired data")
            l_t = ad.mean(ad.l1_norm(ad.sub(ty, Tensor(batch.xstar)), per_sample=True))
        else:
            phi_ty = state.potential(ty)
            if cfg.mode == "paired":
                l_t = loss_transport_paired(y, ty, Tensor(batch.xstar), phi_ty, costs, batch.tasks)
            else:
                l_t = loss_transport_unpaired(y, ty, phi_ty, costs, batch.tasks)
        out["L_T"] = _finite("L_T", l_t.item())
        total = l_t
        l_task = _task_loss(rest, batch.labels, cfg)
        if l_task is not None:
            out["L_task"] = _finite("L_task", l_task.item())
            total = ad.add(total, ad.mul(l_task, cfg.gamma_task))
        grads = ad.backward(total, t_params)
        rmsprop_update(t_params, grads, state.opt_T, cfg.lr_T, cfg.rmsprop_decay, cfg.rmsprop_eps)
        state.counters["T_updates"] += 1
    state.step += 1
    return out


# ------------------------------------------------------------------ fit


@dataclasses.dataclass
class FitResult:
    state: TrainerState
    metrics: list[dict]

    @property
    def transport(self) -> TransportMap:
        return self.state.transport

    @property
    def potential(self) -> Potential:
        return self.state.potential


def _write_log(path: Path, records: list[dict]) -> None:
    fio.atomic_write_text(path, "".join(json.dumps(r) + "\n" for r in records))


def read_metrics_log(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def fit(
    cfg: TrainConfig,
    data: DatasetBundle,
    out_dir: str | Path | None = None,
    log_every: int = 1,
    checkpoint_every: int = 0,
    resume: str | Path | None = None,
    stop_at: int | None = None,
    record_time: bool = True,
) -> FitResult:
    """Run ``cfg.steps`` training steps (or up to ``stop_at``).

    With ``out_dir`` the metrics log goes to ``metrics.jsonl`` and
    checkpoints to ``checkpoint.bin`` (every ``checkpoint_every`` steps and
    at the end).  ``resume`` restarts from a checkpoint and continues the
    same random streams, so the result matches an uninterrupted run.
    ``record_time=False`` writes ``wall_ms`` as null, which makes the log
    file itself reproducible byte for byte.
    """
    if cfg.mode == "paired" and data.pair_index is None:
        raise ContractViolation("paired training needs a paired dataset")
    if len(data) == 0:
        raise ContractViolation("empty dataset")
    out = Path(out_dir) if out_dir is not None else None
    records: list[dict] = []
    if resume is not None:
        state = state_from_checkpoint(fio.load_checkpoint(resume), cfg)
        if out is not None and (out / "metrics.jsonl").exists():
            records = [r for r in read_metrics_log(out / "metrics.jsonl") if r["step"] <= state.step]
    else:
        state = init_state(cfg)
    end = cfg.steps if stop_at is None else min(stop_at, cfg.steps)

    def save():
        if out is not None:
            fio.save_checkpoint(state_to_checkpoint(state, cfg), out / "checkpoint.bin")
            _write_log(out / "metrics.jsonl", records)

    while state.step < end:
        t0 = time.perf_counter()
        batch = sample_batch(data, cfg, state.rng)
        m = train_step(state, cfg, batch)
        wall = (time.perf_counter() - t0) * 1000.0 if record_time else None
        if state.step % log_every == 0 or state.step == end:
            records.append({"step": state.step, "L_phi": m["L_phi"], "L_T": m["L_T"], "L_task": m["L_task"], "wall_ms": wall})
        if checkpoint_every and state.step % checkpoint_every == 0:
            save()
    save()
    return FitResult(state, records)


# ------------------------------------------------------------------ 1-D transport


@dataclasses.dataclass
class OT1DConfig:
    """Adversarial training of a scalar map and potential between two 1-D Gaussians."""

    source: tuple = (0.0, 1.0)
    target: tuple = (2.0, 2.0)
    steps: int = 10000
    batch_size: int = 256
    lr_T: float = 3e-4
    lr_phi: float = 3e-4
    n_T: int = 1
    hidden: int = 32
    seed: int = 0
    grad_penalty: float = 1.0
    monotone: bool = True
    rmsprop_decay: float = 0.99
    rmsprop_eps: float = 1e-8

    def __post_init__(self):
        if self.n_T < 1 or self.steps < 0 or self.batch_size < 2:
            raise ContractViolation("need n_T >= 1, steps >= 0 and batch_size >= 2")
        if self.source[1] <= 0 or self.target[1] <= 0:
            raise ContractViolation("standard deviations must be > 0")


@dataclasses.dataclass
class OT1DResult:
    transport: Any
    potential: Any
    metrics: list[dict]

    def map_numpy(self, y: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return self.transport(Tensor(np.asarray(y, float).reshape(-1, 1))).data.ravel()

    def potential_numpy(self, x: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return self.potential(Tensor(np.asarray(x, float).reshape(-1, 1))).data.ravel()


def fit_1d(cfg: OT1DConfig) -> OT1DResult:
    """Unpaired minimax training with cost |y - T(y)| and no residual term."""
    from .networks import MLP, MonotoneMLP

    init_seq, data_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    init_rng, rng = np.random.default_rng(init_seq), np.random.default_rng(data_seq)
    h = cfg.hidden
    transport = MonotoneMLP(init_rng, h) if cfg.monotone else MLP(init_rng, [1, h, h, 1], residual=True)
    potential = MLP(init_rng, [1, h, h, 1])
    t_params, p_params = transport.parameters(), potential.parameters()
    opt_t = [np.zeros_like(p.data) for p in t_params]
    opt_p = [np.zeros_like(p.data) for p in p_params]
    records = []
    for step in range(1, cfg.steps + 1):
        y = rng.normal(cfg.source[0], cfg.source[1], (cfg.batch_size, 1))
        x = rng.normal(cfg.target[0], cfg.target[1], (cfg.batch_size, 1))
        with ad.no_grad():
            ty = transport(Tensor(y)).data
        phi_ty, phi_x = potential(Tensor(ty)), potential(Tensor(x))
        l_phi = ad.sub(ad.mean(phi_ty), ad.mean(phi_x))
        if cfg.grad_penalty > 0:
            pen = _lipschitz_penalty(ad.reshape(phi_ty, (-1,)), ad.reshape(phi_x, (-1,)), ty, x)
            l_phi = ad.add(l_phi, ad.mul(pen, cfg.grad_penalty))
        lp = _finite("L_phi", l_phi.item())
        rmsprop_update(p_params, ad.backward(l_phi, p_params), opt_p, cfg.lr_phi, cfg.rmsprop_decay, cfg.rmsprop_eps)
        for _ in range(cfg.n_T):
            yt = Tensor(y)
            ty_t = transport(yt)
            l_t = ad.mean(ad.sub(ad.abs_(ad.sub(yt, ty_t)), potential(ty_t)))
            lt = _finite("L_T", l_t.item())
            rmsprop_update(t_params, ad.backward(l_t, t_params), opt_t, cfg.lr_T, cfg.rmsprop_decay, cfg.rmsprop_eps)
        if step % 100 == 0 or step == cfg.steps:
            records.append({"step": step, "L_phi": lp, "L_T": lt})
    return OT1DResult(transport, potential, records)
