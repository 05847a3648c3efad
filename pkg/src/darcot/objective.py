"""Transport costs, Fourier residual regularizers and the training losses.

All batched functions take tensors with a leading batch axis.  Per-sample
scalars (potential values, costs) are 1-D tensors of length N.
"""

from __future__ import annotations

import dataclasses
import logging
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractViolation

log = logging.getLogger(__name__)

REG_MODES = ("fourier_l1", "fourier_l2", "off")


def default_per_task_reg() -> dict[str, str]:
    # l1 on the Fourier residual everywhere except denoising, which uses l2
    return {"noise": "fourier_l2", "rain": "fourier_l1", "haze": "fourier_l1", "blur": "fourier_l1", "lowlight": "fourier_l1"}


@dataclasses.dataclass
class CostConfig:
    residual_reg_mode: str = "fourier_l1"
    lambda_pair: float = 10.0
    gamma_task: float = 0.1
    tau: float = 0.07
    per_task_reg: dict[str, str] = dataclasses.field(default_factory=default_per_task_reg)

    def __post_init__(self):
        if self.tau <= 0:
            raise ContractViolation(f"tau must be > 0, got {self.tau}")
        if self.lambda_pair < 0 or self.gamma_task < 0:
            raise ContractViolation("lambda_pair and gamma_task must be >= 0")
        for mode in [self.residual_reg_mode, *self.per_task_reg.values()]:
            if mode not in REG_MODES:
                raise ContractViolation(f"unknown residual regularizer {mode!r}")

    def mode_for(self, task: str | None) -> str:
        """Regularizer for a sample; ``off`` globally disables it."""
        if self.residual_reg_mode == "off":
            return "off"
        if task is None:
            return self.residual_reg_mode
        return self.per_task_reg.get(task, self.residual_reg_mode)


def transport_cost(y: Tensor, ty: Tensor, per_sample: bool = False) -> Tensor:
    """Euclidean distance ||y - T(y)|| over all entries (or per sample)."""
    if y.shape != ty.shape:
        raise ContractViolation(f"transport_cost: shape mismatch {y.shape} vs {ty.shape}")
    return ad.l2_norm(ad.sub(y, ty), per_sample=per_sample)


def residual_reg(r: Tensor, mode: str, per_sample: bool = False) -> Tensor:
    """Norm of the DFT magnitudes of a residual image.

    ``fourier_l1`` sums the magnitudes, ``fourier_l2`` takes their Euclidean
    norm, ``off`` returns zeros.
    """
    if mode not in REG_MODES:
        raise ContractViolation(f"residual_reg: unknown mode {mode!r}")
    if r.ndim < 2:
        raise ContractViolation(f"residual_reg: need an image, got shape {r.shape}")
    if mode == "off":
        shape = (r.shape[0],) if per_sample else ()
        return Tensor(np.zeros(shape, dtype=r.dtype))
    mags = ad.fft2_magnitudes(r)
    if mode == "fourier_l1":
        return ad.l1_norm(mags, per_sample=per_sample)
    return ad.l2_norm(mags, per_sample=per_sample)


def batched_residual_reg(r: Tensor, tasks: Sequence[str | None] | None, cfg: CostConfig) -> Tensor | None:
    """Per-sample g(r) with the mode chosen from each sample's task label."""
    n = r.shape[0]
    modes = [cfg.mode_for(None if tasks is None else tasks[i]) for i in range(n)]
    total = None
    for mode in ("fourier_l1", "fourier_l2"):
        mask = np.array([m == mode for m in modes])
        if not mask.any():
            continue
        g = residual_reg(r, mode, per_sample=True)
        if not mask.all():
            g = ad.mul(g, Tensor(mask.astype(r.dtype)))
        total = g if total is None else ad.add(total, g)
    return total


def _check_batch(name: str, *ts: Tensor) -> int:
    n = ts[0].shape[0] if ts[0].ndim else 0
    if n == 0:
        raise ContractViolation(f"{name}: empty batch")
    for t in ts[1:]:
        if t.shape[0] != n:
            raise ContractViolation(f"{name}: batch sizes differ {[u.shape for u in ts]}")
    return n


def per_sample_transport_terms(y: Tensor, ty: Tensor, phi_ty: Tensor, cfg: CostConfig, tasks=None) -> Tensor:
    """c(y, T(y)) + g(y - T(y)) - phi(T(y)) for each sample."""
    _check_batch("transport loss", y, ty, phi_ty)
    if phi_ty.ndim != 1:
        raise ContractViolation(f"potential values must be per-sample scalars, got {phi_ty.shape}")
    if tasks is not None and len(tasks) != y.shape[0]:
        raise ContractViolation("transport loss: one task label per sample required")
    r = ad.sub(y, ty)
    terms = ad.l2_norm(r, per_sample=True)
    g = batched_residual_reg(r, tasks, cfg)
    if g is not None:
        terms = ad.add(terms, g)
    return ad.sub(terms, phi_ty)


def loss_transport_unpaired(y: Tensor, ty: Tensor, phi_ty: Tensor, cfg: CostConfig, tasks=None) -> Tensor:
    """Mini-batch estimate of E_P[c(y,T y) + g(y - T y) - phi(T y)]."""
    return ad.mean(per_sample_transport_terms(y, ty, phi_ty, cfg, tasks))


def loss_transport_paired(y: Tensor, ty: Tensor, xstar: Tensor | None, phi_ty: Tensor, cfg: CostConfig, tasks=None) -> Tensor:
    """Unpaired loss plus lambda * ||T(y) - x*(y)||_1 averaged over the batch."""
    if xstar is None:
        raise ContractViolation("loss_transport_paired: missing ground-truth pairs")
    if xstar.shape != ty.shape:
        raise ContractViolation(f"loss_transport_paired: pair shape {xstar.shape} vs {ty.shape}")
    terms = per_sample_transport_terms(y, ty, phi_ty, cfg, tasks)
    if cfg.lambda_pair != 0:
        pair = ad.mul(ad.l1_norm(ad.sub(ty, xstar), per_sample=True), float(cfg.lambda_pair))
        terms = ad.add(terms, pair)
    return ad.mean(terms)


def loss_potential(phi_ty: Tensor, phi_x: Tensor) -> Tensor:
    """mean phi(T(y)) - mean phi(x); minimizing it maximizes the dual over phi."""
    _check_batch("loss_potential", phi_ty)
    _check_batch("loss_potential", phi_x)
    return ad.sub(ad.mean(phi_ty), ad.mean(phi_x))


def loss_task_contrastive(
    embeddings: Tensor,
    labels: Sequence[int],
    tau: float = 0.07,
    balanced: bool = True,
    return_flags: bool = False,
    warn: bool = True,
):
    """Task-identification contrastive loss on pooled embeddings.

    For every task k present in the batch, positives are ordered same-task
    pairs (i != j) and negatives are pairs whose second member belongs to
    another task.  The per-task term is

        -log( P_k / (P_k + N_k) ),  P_k, N_k = aggregated exp(sim / tau)

    summed over tasks.  With ``balanced`` the positive and negative
    aggregates are means over their pair sets instead of plain sums, which
    makes the loss independent of how many samples each task contributes.
    Embeddings are L2-normalized before the dot products.  A task without
    positives contributes 0 and is reported in the flags (and logged unless
    ``warn`` is false).
    """
    if tau <= 0:
        raise ContractViolation("tau must be > 0")
    if embeddings.ndim != 2:
        raise ContractViolation(f"embeddings must be (N, D), got {embeddings.shape}")
    labels = np.asarray(labels)
    n = embeddings.shape[0]
    if labels.shape != (n,):
        raise ContractViolation("one label per embedding required")
    z = ad.normalize(embeddings, axis=1)
    sims = ad.mul(ad.matmul(z, ad.transpose(z, (1, 0))), 1.0 / tau)
    e = ad.exp(sims)
    same = labels[:, None] == labels[None, :]
    offdiag = ~np.eye(n, dtype=bool)
    dtype = embeddings.dtype
    total = None
    flagged: list[int] = []
    for k in np.unique(labels):
        rows = (labels == k)[:, None]
        pos = rows & same & offdiag
        neg = rows & ~same
        if not pos.any():
            flagged.append(int(k))
            if warn:
                log.warning("contrastive loss: task %s has no positive pair; contributes 0", k)
            continue
        pw = pos / pos.sum() if balanced else pos
        p = ad.sum(ad.mul(e, Tensor(pw.astype(dtype))))
        if neg.any():
            nw = neg / neg.sum() if balanced else neg
            denom = ad.add(p, ad.sum(ad.mul(e, Tensor(nw.astype(dtype)))))
            term = ad.sub(ad.log(denom), ad.log(p))
        else:
            term = ad.sub(ad.log(p), ad.log(p))
        total = term if total is None else ad.add(total, term)
    if total is None:
        total = ad.mul(ad.sum(embeddings), 0.0)
    return (total, flagged) if return_flags else total
