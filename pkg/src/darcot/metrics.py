"""Image quality metrics, the embedding probe and the ablation harness."""

from __future__ import annotations

import csv
import dataclasses
import io as _io
import logging
from concurrent.futures import ProcessPoolExecutor
from typing import Any, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.spatial.distance import cdist

from . import autodiff as ad
from . import io as fio
from .autodiff import Tensor
from .degradations import DatasetBundle
from .errors import ContractViolation
from .networks import TransportMap
from .trainer import TrainConfig, fit

log = logging.getLogger(__name__)

PSNR_CAP = 99.0
SSIM_WINDOW = 8
SSIM_K1, SSIM_K2 = 0.01, 0.03


# ------------------------------------------------------------------ pixels


def psnr(x: np.ndarray, y: np.ndarray, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE), capped at 99 dB for identical inputs."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ContractViolation(f"psnr: shape mismatch {x.shape} vs {y.shape}")
    if peak <= 0:
        raise ContractViolation("psnr: peak must be > 0")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(peak * peak / mse)))


def _ssim_channel(a: np.ndarray, b: np.ndarray) -> float:
    c1, c2 = (SSIM_K1 * 1.0) ** 2, (SSIM_K2 * 1.0) ** 2
    wa = sliding_window_view(a, (SSIM_WINDOW, SSIM_WINDOW))
    wb = sliding_window_view(b, (SSIM_WINDOW, SSIM_WINDOW))
    mu_a, mu_b = wa.mean(axis=(-2, -1)), wb.mean(axis=(-2, -1))
    var_a = (wa**2).mean(axis=(-2, -1)) - mu_a**2
    var_b = (wb**2).mean(axis=(-2, -1)) - mu_b**2
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(x: np.ndarray, y: np.ndarray) -> float:
    """Mean local SSIM over sliding 8x8 uniform windows, dynamic range 1.

    Accepts (H, W) or (C, H, W) images; channels are averaged.
    """
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ContractViolation(f"ssim: shape mismatch {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x, y = x[None], y[None]
    if x.ndim != 3:
        raise ContractViolation(f"ssim: expected (H, W) or (C, H, W), got {x.shape}")
    if min(x.shape[1:]) < SSIM_WINDOW:
        raise ContractViolation(f"ssim: image {x.shape[1:]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    if np.array_equal(x, y):
        return 1.0
    return float(np.mean([_ssim_channel(a, b) for a, b in zip(x, y)]))


# ------------------------------------------------------------------ probe


def silhouette(emb: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette coefficient with Euclidean distances."""
    d = cdist(emb, emb)
    classes = np.unique(labels)
    scores = np.zeros(len(emb))
    for i in range(len(emb)):
        same = labels == labels[i]
        same[i] = False
        if not same.any():
            continue
        a = d[i, same].mean()
        b = min(d[i, labels == k].mean() for k in classes if k != labels[i])
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0 else (b - a) / denom
    return float(scores.mean())


def embedding_probe(embeddings: np.ndarray, labels, seed: int = 0, train_fraction: float = 0.5) -> dict:
    """Held-out accuracy of a closed-form least-squares linear classifier, plus silhouette."""
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if emb.ndim != 2 or len(emb) != len(labels):
        raise ContractViolation("embedding_probe: need (N, D) embeddings and N labels")
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2:
        raise ContractViolation("embedding_probe: need at least two tasks")
    if counts.min() < 8:
        raise ContractViolation("embedding_probe: need at least 8 samples per task")
    k = len(classes)
    if np.all(emb == emb[0]):
        log.warning("embedding_probe: all embeddings identical; silhouette undefined")
        return {"probe_accuracy": 1.0 / k, "silhouette": 0.0, "degenerate": True}
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in classes:
        idx = rng.permutation(np.flatnonzero(labels == c))
        cut = max(1, int(round(train_fraction * len(idx))))
        train.extend(idx[:cut])
        test.extend(idx[cut:])
    train, test = np.array(train), np.array(test)
    mu, sd = emb[train].mean(0), emb[train].std(0)
    sd[sd == 0] = 1.0
    z = (emb - mu) / sd
    design = np.hstack([z, np.ones((len(z), 1))])
    onehot = (labels[:, None] == classes[None, :]).astype(float)
    w, *_ = np.linalg.lstsq(design[train], onehot[train], rcond=None)
    pred = classes[np.argmax(design[test] @ w, axis=1)]
    acc = float(np.mean(pred == labels[test]))
    return {"probe_accuracy": acc, "silhouette": silhouette(emb, labels), "degenerate": False}


# ------------------------------------------------------------------ evaluation


def restore(transport: TransportMap, images: np.ndarray, batch: int = 64) -> tuple[np.ndarray, np.ndarray | None]:
    """Two-pass restoration without gradients; returns outputs and pooled R1 (if any)."""
    dtype = transport.parameters()[0].dtype
    outs, embs = [], []
    with ad.no_grad():
        for i in range(0, len(images), batch):
            rest = transport.two_pass_restore(Tensor(np.asarray(images[i : i + batch], dtype=dtype)))
            outs.append(rest.x_hat.data)
            if rest.embeddings.R1 is not None:
                embs.append(ad.global_avg_pool(rest.embeddings.R1).data)
    return np.concatenate(outs), (np.concatenate(embs) if embs else None)


@dataclasses.dataclass
class EvalReport:
    per_task: dict[str, dict[str, float]]
    average: dict[str, float]
    probe: dict | None = None
    deltas: dict = dataclasses.field(default_factory=dict)
    arms: dict = dataclasses.field(default_factory=dict)
    meta: dict = dataclasses.field(default_factory=dict)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "EvalReport":
        return cls(**d)

    def to_csv(self) -> str:
        """Rows are tasks (plus the average); columns are PSNR/SSIM pairs."""
        buf = _io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task", "psnr", "ssim", "input_psnr", "input_ssim"])
        for task, m in self.per_task.items():
            w.writerow([task, f"{m['psnr']:.4f}", f"{m['ssim']:.4f}", f"{m['input_psnr']:.4f}", f"{m['input_ssim']:.4f}"])
        a = self.average
        w.writerow(["average", f"{a['psnr']:.4f}", f"{a['ssim']:.4f}", f"{a['input_psnr']:.4f}", f"{a['input_ssim']:.4f}"])
        return buf.getvalue()


def evaluate(transport: TransportMap, data: DatasetBundle, probe_seed: int = 0, meta: dict | None = None) -> EvalReport:
    """Per-task and average PSNR/SSIM of restored vs clean, plus the R1 probe."""
    if data.pair_index is None:
        raise ContractViolation("evaluation needs a paired bundle")
    out, emb = restore(transport, data.degraded)
    gt = data.clean_for(np.arange(len(data)))
    per_task = {}
    for task in data.task_names:
        idx = [i for i, t in enumerate(data.tasks) if t == task]
        per_task[task] = {
            "psnr": float(np.mean([psnr(out[i], gt[i]) for i in idx])),
            "ssim": float(np.mean([ssim(out[i], gt[i]) for i in idx])),
            "input_psnr": float(np.mean([psnr(data.degraded[i], gt[i]) for i in idx])),
            "input_ssim": float(np.mean([ssim(data.degraded[i], gt[i]) for i in idx])),
        }
    keys = ("psnr", "ssim", "input_psnr", "input_ssim")
    average = {k: float(np.mean([m[k] for m in per_task.values()])) for k in keys}
    probe = None
    if emb is not None and len(data.task_names) >= 2:
        counts = np.bincount(data.task_ids())
        if counts.min() >= 8:
            probe = embedding_probe(emb, data.task_ids(), seed=probe_seed)
    return EvalReport(per_task, average, probe, meta=dict(meta or {}))


# ------------------------------------------------------------------ ablations

SUITES: dict[str, dict[str, dict]] = {
    "rec_conditioning": {
        "none": {"conditioning": "none"},
        "condition-on-x0": {"conditioning": "x0"},
        "condition-on-R0": {"conditioning": "r0"},
        "condition-on-R1..R3": {"conditioning": "multiscale"},
    },
    "loss_variants": {
        "L1-only": {"loss": "l1_only", "gamma_task": 0.0},
        "L_p": {"mode": "paired", "gamma_task": 0.0},
        "L_p+L_task": {"mode": "paired"},
        "L_u": {"mode": "unpaired", "gamma_task": 0.0},
        "L_u+L_task": {"mode": "unpaired"},
    },
    "residual_reg": {
        "with g": {},
        "without g": {"residual_reg_mode": "off"},
    },
}
REFERENCE_ARM = {"rec_conditioning": "none", "loss_variants": "L1-only", "residual_reg": "without g"}


def _subset(data: DatasetBundle, tasks: Sequence[str]) -> DatasetBundle:
    keep = np.array([t in tasks for t in data.tasks])
    if not keep.any():
        raise ContractViolation(f"no samples for tasks {list(tasks)}")
    idx = np.flatnonzero(keep)
    return dataclasses.replace(
        data,
        degraded=data.degraded[idx],
        tasks=[data.tasks[i] for i in idx],
        specs=[data.specs[i] for i in idx],
        pair_index=None if data.pair_index is None else data.pair_index[idx],
        manifest=[data.manifest[i] for i in idx],
    )


def _train_and_eval(args) -> dict:
    cfg, train, test = args
    result = fit(cfg, train)
    rep = evaluate(result.transport, test, probe_seed=cfg.seed, meta={"config_hash": cfg.hash(), "seed": cfg.seed})
    return rep.to_json()


def run_arms(
    base: TrainConfig,
    arms: dict[str, dict],
    train: DatasetBundle,
    test: DatasetBundle,
    seeds: Sequence[int] = (0, 1, 2),
    task_sets: dict[str, Sequence[str]] | None = None,
    workers: int = 1,
) -> dict[str, dict]:
    """Train and evaluate each arm at each seed; identical configs are trained once.

    Every run depends only on its own config (seed included), so arm order
    and concurrency never change the results.
    """
    jobs: dict[tuple, tuple] = {}
    plan: dict[str, list[tuple]] = {}
    for name, over in arms.items():
        keys = []
        for s in seeds:
            cfg = dataclasses.replace(base, **over, seed=int(s))
            tasks = tuple(task_sets[name]) if task_sets and name in task_sets else None
            key = (cfg.hash(), tasks)
            if key not in jobs:
                tr = _subset(train, tasks) if tasks else train
                te = _subset(test, tasks) if tasks else test
                jobs[key] = (cfg, tr, te)
            keys.append(key)
        plan[name] = keys
    order = list(jobs)
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = dict(zip(order, pool.map(_train_and_eval, [jobs[k] for k in order])))
    else:
        results = {k: _train_and_eval(jobs[k]) for k in order}
    out = {}
    for name, keys in plan.items():
        runs = [results[k] for k in keys]
        out[name] = {
            "overrides": arms[name],
            "seeds": [int(s) for s in seeds],
            "runs": runs,
            "mean_psnr": float(np.mean([r["average"]["psnr"] for r in runs])),
            "mean_ssim": float(np.mean([r["average"]["ssim"] for r in runs])),
            "mean_input_psnr": float(np.mean([r["average"]["input_psnr"] for r in runs])),
        }
    return out


def run_ablation(
    suite: str,
    base: TrainConfig,
    train: DatasetBundle,
    test: DatasetBundle,
    seeds: Sequence[int] = (0, 1, 2),
    workers: int = 1,
) -> EvalReport:
    """Train every arm of a suite with identical seeds and budget; report deltas."""
    task_sets = None
    if suite == "task_count":
        names = train.task_names
        arms = {f"{k} tasks": {} for k in range(1, len(names) + 1)}
        task_sets = {f"{k} tasks": names[:k] for k in range(1, len(names) + 1)}
        ref = "1 tasks"
    elif suite in SUITES:
        arms, ref = SUITES[suite], REFERENCE_ARM[suite]
    else:
        raise ContractViolation(f"unknown ablation suite {suite!r}")
    res = run_arms(base, arms, train, test, seeds, task_sets, workers)
    deltas = {name: res[name]["mean_psnr"] - res[ref]["mean_psnr"] for name in res}
    # headline numbers: seed-averaged metrics of the best arm
    top = max(res, key=lambda n: res[n]["mean_psnr"])
    runs = res[top]["runs"]
    per_task = {
        t: {k: float(np.mean([r["per_task"][t][k] for r in runs])) for k in runs[0]["per_task"][t]}
        for t in runs[0]["per_task"]
    }
    average = {k: float(np.mean([m[k] for m in per_task.values()])) for k in runs[0]["average"]}
    meta = {"suite": suite, "reference_arm": ref, "best_arm": top, "base_config_hash": base.hash(), "seeds": list(map(int, seeds))}
    return EvalReport(per_task, average, runs[0].get("probe"), deltas, res, meta)


def ablation_csv(report: EvalReport) -> str:
    """One row per arm: mean PSNR, mean SSIM and PSNR delta to the reference arm."""
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["arm", "psnr", "ssim", "delta_psnr"])
    for name, arm in report.arms.items():
        w.writerow([name, f"{arm['mean_psnr']:.4f}", f"{arm['mean_ssim']:.4f}", f"{report.deltas[name]:.4f}"])
    return buf.getvalue()


def save_report(report: EvalReport, path) -> None:
    fio.atomic_write_json(path, report.to_json())


# ------------------------------------------------------------------ toy setting

TOY_TASKS = ("noise", "rain", "haze")


def toy_config(**overrides) -> TrainConfig:
    """Desk-scale paired all-in-one setting (32x32 patches, 2000 steps)."""
    cfg = dict(
        base=8,
        emb_channels=(32, 16, 8),
        blocks=0,
        potential_base=8,
        batch_size=4,
        steps=2000,
        lr_T=1e-3,
        lr_phi=5e-4,
        # the unnormalized DFT scales g by sqrt(H*W); scale lambda the same way so the pair term keeps pace at 32x32
        lambda_pair=10.0 * 32,
        mode="paired",
    )
    cfg.update(overrides)
    return TrainConfig(**cfg)


def toy_data(seed: int = 0, train_count: int = 300, test_count: int = 180, tasks=TOY_TASKS):
    """Disjoint train/test bundles (noise at sigma 25) drawn from separate seeds."""
    from .degradations import DatasetConfig, make_dataset

    train = make_dataset(DatasetConfig(tasks=tuple(tasks), count=train_count, size=32, pairing="paired"), seed=2 * seed + 1)
    test = make_dataset(DatasetConfig(tasks=tuple(tasks), count=test_count, size=32, pairing="paired"), seed=2 * seed + 2)
    return train, test
