"""Synthetic degraded/clean pairs and Fourier statistics of their residuals.

Clean images are procedural by default (smooth colour ramps, hard-edged
shapes and sinusoidal textures), so nothing needs to be downloaded.  Five
degradation families are supported: noise, rain, haze, blur and lowlight.
All images are float arrays of shape (3, H, W) with values in [0, 1].
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from scipy import ndimage

from .errors import ContractViolation

TASKS = ("noise", "rain", "haze", "blur", "lowlight")

# Gaussian noise levels on the 0-255 scale used for denoising benchmarks.
NOISE_LEVELS = (15, 25, 50)


@dataclasses.dataclass(frozen=True)
class DegradationSpec:
    task: str
    params: dict
    seed: int

    def validate(self) -> None:
        p = self.params
        if self.task not in TASKS:
            raise ContractViolation(f"unknown task {self.task!r}")
        try:
            if self.task == "noise":
                _check(0 < p["sigma"] <= 255, "noise sigma must lie in (0, 255]")
            elif self.task == "rain":
                _check(int(p["count"]) >= 1, "rain count must be >= 1")
                _check(p["length"] > 0, "rain length must be > 0")
                _check(-90 <= p["angle"] <= 90, "rain angle must lie in [-90, 90]")
                _check(0 < p["intensity"] <= 1, "rain intensity must lie in (0, 1]")
                _check(p.get("width", 0.6) > 0, "rain width must be > 0")
            elif self.task == "haze":
                _check(0 < p["t"] <= 1, "haze transmission must lie in (0, 1]")
                _check(0 <= p["airlight"] <= 1, "haze airlight must lie in [0, 1]")
            elif self.task == "blur":
                _check(p["length"] >= 1, "blur length must be >= 1")
            elif self.task == "lowlight":
                _check(p["gamma"] >= 1, "lowlight gamma must be >= 1")
                _check(0 < p["gain"] <= 1, "lowlight gain must lie in (0, 1]")
        except KeyError as exc:
            raise ContractViolation(f"{self.task}: missing parameter {exc.args[0]!r}") from None

    def to_json(self) -> dict:
        return {"task": self.task, "params": dict(self.params), "seed": int(self.seed)}

    @classmethod
    def from_json(cls, d: dict) -> "DegradationSpec":
        return cls(d["task"], dict(d["params"]), int(d["seed"]))


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ContractViolation(msg)


# ------------------------------------------------------------ clean scenes


def procedural_scene(rng: np.random.Generator, size: int = 32) -> np.ndarray:
    """Piecewise-smooth RGB scene with edges and a textured patch."""
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    theta = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(theta) * xx + np.sin(theta) * yy
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
    c0, c1 = rng.uniform(0.15, 0.85, size=(2, 3))
    img = c0[:, None, None] + (c1 - c0)[:, None, None] * ramp[None]

    for _ in range(rng.integers(2, 5)):
        h, w = rng.integers(size // 6, size // 2 + 1, size=2)
        top, left = rng.integers(0, size - h + 1), rng.integers(0, size - w + 1)
        color = rng.uniform(0.05, 0.95, size=3)
        if rng.random() < 0.5:
            img[:, top : top + h, left : left + w] = color[:, None, None]
        else:
            cy, cx = top + h / 2, left + w / 2
            mask = ((np.arange(size)[:, None] - cy) / (h / 2)) ** 2 + (
                (np.arange(size)[None, :] - cx) / (w / 2)
            ) ** 2 <= 1.0
            img[:, mask] = color[:, None]

    freq = rng.uniform(2, 6)
    phi = rng.uniform(0, 2 * np.pi)
    tex = np.sin(2 * np.pi * freq * (np.cos(phi) * xx + np.sin(phi) * yy))
    h, w = rng.integers(size // 4, size // 2 + 1, size=2)
    top, left = rng.integers(0, size - h + 1), rng.integers(0, size - w + 1)
    amp = rng.uniform(0.05, 0.15)
    img[:, top : top + h, left : left + w] += amp * tex[None, top : top + h, left : left + w]
    return np.clip(img, 0.0, 1.0)


def load_image_folder(folder: str | Path, size: int, count: int, seed: int) -> np.ndarray:
    """Random ``size`` x ``size`` RGB crops from the images in ``folder``."""
    from PIL import Image

    paths = sorted(p for p in Path(folder).iterdir() if p.suffix.lower() in {".png", ".jpg", ".jpeg", ".bmp"})
    if not paths:
        raise ContractViolation(f"no images found in {folder}")
    rng = np.random.default_rng(seed)
    out = np.empty((count, 3, size, size), dtype=np.float32)
    for i in range(count):
        with Image.open(paths[rng.integers(len(paths))]) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        h, w = arr.shape[:2]
        if h < size or w < size:
            raise ContractViolation(f"image smaller than patch size {size}")
        top, left = rng.integers(0, h - size + 1), rng.integers(0, w - size + 1)
        out[i] = arr[top : top + size, left : left + size].transpose(2, 0, 1)
    return out


# ---------------------------------------------------------- degradations


def _line_kernel(length: float, angle_deg: float) -> np.ndarray:
    n = int(np.ceil(length)) | 1
    k = np.zeros((n, n))
    c = n // 2
    a = np.deg2rad(angle_deg)
    dx, dy = np.cos(a), -np.sin(a)
    for s in np.linspace(-(length - 1) / 2, (length - 1) / 2, 4 * n):
        x, y = c + s * dx, c + s * dy
        x0, y0 = int(np.floor(x)), int(np.floor(y))
        fx, fy = x - x0, y - y0
        for yi, xi, wgt in (
            (y0, x0, (1 - fx) * (1 - fy)),
            (y0, x0 + 1, fx * (1 - fy)),
            (y0 + 1, x0, (1 - fx) * fy),
            (y0 + 1, x0 + 1, fx * fy),
        ):
            if 0 <= yi < n and 0 <= xi < n:
                k[yi, xi] += wgt
    return k / k.sum()


def rain_streaks(shape: tuple[int, int], p: dict, rng: np.random.Generator) -> np.ndarray:
    """Anti-aliased line segments with a Gaussian cross profile, values in [0, 1]."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # angle measured from vertical; streaks fall top to bottom
    a = np.deg2rad(p["angle"])
    d = np.array([np.sin(a), np.cos(a)])
    half = p["length"] / 2
    width = p.get("width", 0.6)
    out = np.zeros(shape)
    for _ in range(int(p["count"])):
        cx, cy = rng.uniform(-half * abs(d[0]), w + half * abs(d[0])), rng.uniform(-half, h + half)
        bright = rng.uniform(0.6, 1.0)
        rx, ry = xx - cx, yy - cy
        s = np.clip(rx * d[0] + ry * d[1], -half, half)
        dist2 = (rx - s * d[0]) ** 2 + (ry - s * d[1]) ** 2
        out = np.maximum(out, bright * np.exp(-dist2 / (2 * width**2)))
    return out


def apply_degradation(x: np.ndarray, spec: DegradationSpec) -> np.ndarray:
    """Degrade a clean (3, H, W) image in [0, 1]; deterministic given ``spec``."""
    spec.validate()
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[0] != 3:
        raise ContractViolation(f"expected a (3, H, W) image, got {x.shape}")
    if x.size and (x.min() < 0 or x.max() > 1):
        raise ContractViolation("clean image must lie in [0, 1]")
    p = spec.params
    rng = np.random.default_rng(spec.seed)
    xf = x.astype(np.float64)

    if spec.task == "noise":
        y = xf + rng.normal(0.0, p["sigma"] / 255.0, size=x.shape)
    elif spec.task == "haze":
        y = xf * p["t"] + p["airlight"] * (1.0 - p["t"])
    elif spec.task == "blur":
        k = _line_kernel(p["length"], p.get("angle", 0.0))
        y = np.stack([ndimage.convolve(c, k, mode="reflect") for c in xf])
    elif spec.task == "rain":
        streaks = rain_streaks(x.shape[1:], p, rng)
        y = xf + p["intensity"] * streaks[None]
    else:
        y = p["gain"] * xf ** p["gamma"]
    return np.clip(y, 0.0, 1.0).astype(x.dtype, copy=False)


def sample_spec(task: str, rng: np.random.Generator, size: int = 32, noise_levels: Sequence[int] = (25,)) -> DegradationSpec:
    """Draw a random parameter record for ``task`` sized for ``size``-pixel patches."""
    seed = int(rng.integers(0, 2**31 - 1))
    scale = size / 32.0
    if task == "noise":
        params: dict[str, Any] = {"sigma": float(rng.choice(list(noise_levels)))}
    elif task == "rain":
        params = {
            "count": int(rng.integers(max(2, int(6 * scale**2)), max(3, int(14 * scale**2)))),
            "length": float(rng.uniform(6, 14) * scale),
            "angle": float(rng.uniform(-20, 20)),
            "intensity": float(rng.uniform(0.5, 0.9)),
            "width": 0.6,
        }
    elif task == "haze":
        params = {"t": float(rng.uniform(0.4, 0.75)), "airlight": float(rng.uniform(0.75, 1.0))}
    elif task == "blur":
        params = {"length": float(rng.uniform(5, 9) * scale), "angle": float(rng.uniform(0, 180))}
    elif task == "lowlight":
        params = {"gamma": float(rng.uniform(1.5, 3.0)), "gain": float(rng.uniform(0.4, 0.8))}
    else:
        raise ContractViolation(f"unknown task {task!r}")
    return DegradationSpec(task, params, seed)


# ------------------------------------------------------ residual spectra


DEFAULT_BINS = np.logspace(-4, 3, 29)


def spectral_sparsity(r: np.ndarray) -> float:
    """1 - ||F||_1 / (sqrt(HW) ||F||_2) of the DFT magnitudes, channel-averaged.

    0 for a flat spectrum, 1 - 1/sqrt(HW) for a single nonzero coefficient.
    Channels with zero energy are skipped; an all-zero input gives 0.
    """
    r = np.asarray(r, dtype=np.float64)
    if r.ndim == 2:
        r = r[None]
    mags = np.abs(np.fft.fft2(r))
    hw = r.shape[-2] * r.shape[-1]
    vals = []
    for m in mags.reshape(-1, hw):
        l2 = np.sqrt((m * m).sum())
        if l2 > 0:
            vals.append(1.0 - m.sum() / (np.sqrt(hw) * l2))
    return float(np.clip(np.mean(vals), 0.0, 1.0)) if vals else 0.0


def residual_spectrum_stats(r: np.ndarray, bins: np.ndarray = DEFAULT_BINS) -> dict:
    """Histogram of Fourier magnitudes (log-spaced bins, channel-averaged) and sparsity."""
    r = np.asarray(r, dtype=np.float64)
    if r.ndim == 2:
        r = r[None]
    mags = np.abs(np.fft.fft2(r))
    lo, hi = bins[0], bins[-1]
    counts = np.mean([np.histogram(np.clip(m, lo, hi), bins=bins)[0] for m in mags], axis=0)
    all_zero = not np.any(r)
    return {
        "bin_edges": bins.tolist(),
        "amplitude_histogram": counts.tolist(),
        "sparsity": 0.0 if all_zero else spectral_sparsity(r),
        "all_zero": all_zero,
    }


# -------------------------------------------------------------- datasets


@dataclasses.dataclass
class DatasetConfig:
    tasks: tuple[str, ...] = ("noise", "rain", "haze")
    count: int = 30
    size: int = 32
    pairing: str = "paired"
    noise_levels: tuple[int, ...] = (25,)
    clean_count: int | None = None
    image_folder: str | None = None

    def __post_init__(self):
        self.tasks = tuple(self.tasks)
        self.noise_levels = tuple(int(v) for v in self.noise_levels)
        if not self.tasks:
            raise ContractViolation("at least one task must be enabled")
        for t in self.tasks:
            if t not in TASKS:
                raise ContractViolation(f"unknown task {t!r}")
        if self.pairing not in ("paired", "unpaired"):
            raise ContractViolation(f"pairing must be paired or unpaired, got {self.pairing!r}")
        if self.size % 4 or self.size <= 0:
            raise ContractViolation(f"patch size must be a positive multiple of 4, got {self.size}")
        if self.count < 1:
            raise ContractViolation("count must be >= 1")

    def to_json(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}


@dataclasses.dataclass
class DatasetBundle:
    """Degraded pool (P), clean pool (Q) and, in paired mode, the pairing."""

    clean: np.ndarray
    degraded: np.ndarray
    tasks: list[str]
    specs: list[DegradationSpec]
    pairing: str
    pair_index: np.ndarray | None
    manifest: list[dict]
    config: dict = dataclasses.field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.degraded)

    @property
    def task_names(self) -> list[str]:
        return sorted(set(self.tasks), key=TASKS.index)

    def task_ids(self) -> np.ndarray:
        names = self.task_names
        return np.array([names.index(t) for t in self.tasks], dtype=np.int64)

    def clean_for(self, idx) -> np.ndarray:
        if self.pair_index is None:
            raise ContractViolation("unpaired bundle has no ground-truth pairs")
        return self.clean[self.pair_index[idx]]

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.clean, self.degraded):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(json.dumps(self.manifest, sort_keys=True).encode())
        return h.hexdigest()


def _balanced_counts(count: int, k: int) -> list[int]:
    base, extra = divmod(count, k)
    return [base + (i < extra) for i in range(k)]


def make_dataset(config: DatasetConfig, seed: int) -> DatasetBundle:
    """Balanced multi-task bundle; identical output for identical (config, seed)."""
    ss = np.random.SeedSequence(seed)
    scene_ss, spec_ss, clean_ss = ss.spawn(3)
    scene_rng = np.random.default_rng(scene_ss)
    spec_rng = np.random.default_rng(spec_ss)
    counts = _balanced_counts(config.count, len(config.tasks))
    n = config.count

    if config.image_folder:
        sources = load_image_folder(config.image_folder, config.size, n, int(scene_rng.integers(2**31)))
    else:
        sources = np.stack([procedural_scene(scene_rng, config.size) for _ in range(n)]).astype(np.float32)
    if len(sources) == 0:
        raise ContractViolation("empty clean pool")

    tasks: list[str] = []
    specs: list[DegradationSpec] = []
    degraded = np.empty_like(sources)
    i = 0
    for task, c in zip(config.tasks, counts):
        for _ in range(c):
            spec = sample_spec(task, spec_rng, config.size, config.noise_levels)
            degraded[i] = apply_degradation(sources[i], spec)
            tasks.append(task)
            specs.append(spec)
            i += 1

    if config.pairing == "paired":
        clean = sources
        pair_index = np.arange(n)
    else:
        m = config.clean_count or n
        clean_rng = np.random.default_rng(clean_ss)
        if config.image_folder:
            clean = load_image_folder(config.image_folder, config.size, m, int(clean_rng.integers(2**31)))
        else:
            clean = np.stack([procedural_scene(clean_rng, config.size) for _ in range(m)]).astype(np.float32)
        pair_index = None

    manifest = [
        {
            "id": j,
            "task": tasks[j],
            "params": specs[j].params,
            "seed": specs[j].seed,
            "clean_index": int(pair_index[j]) if pair_index is not None else None,
        }
        for j in range(n)
    ]
    return DatasetBundle(clean, degraded, tasks, specs, config.pairing, pair_index, manifest, config.to_json() | {"seed": seed})


# ------------------------------------------------------------ disk format


def save_bundle(bundle: DatasetBundle, folder: str | Path) -> None:
    """Write clean.frtn, degraded.frtn and manifest.json (all atomically)."""
    from . import io as fio

    folder = Path(folder)
    fio.save_tensor(np.asarray(bundle.clean, dtype=np.float32), folder / "clean.frtn")
    fio.save_tensor(np.asarray(bundle.degraded, dtype=np.float32), folder / "degraded.frtn")
    doc = {
        "pairing": bundle.pairing,
        "config": bundle.config,
        "items": [
            {**item, "spec": bundle.specs[j].to_json(), "files": {"degraded": ["degraded.frtn", j], "clean": ["clean.frtn", item["clean_index"]]}}
            for j, item in enumerate(bundle.manifest)
        ],
    }
    fio.atomic_write_json(folder / "manifest.json", doc)


def load_bundle(folder: str | Path) -> DatasetBundle:
    from . import io as fio

    folder = Path(folder)
    try:
        doc = json.loads((folder / "manifest.json").read_text())
    except FileNotFoundError:
        raise ContractViolation(f"{folder}: no manifest.json") from None
    clean = fio.load_tensor(folder / "clean.frtn")
    degraded = fio.load_tensor(folder / "degraded.frtn")
    items = doc["items"]
    if len(items) != len(degraded):
        raise ContractViolation("manifest and degraded tensor disagree on item count")
    specs = [DegradationSpec.from_json(it["spec"]) for it in items]
    manifest = [{k: it[k] for k in ("id", "task", "params", "seed", "clean_index")} for it in items]
    paired = doc["pairing"] == "paired"
    pair_index = np.array([it["clean_index"] for it in items], dtype=np.int64) if paired else None
    return DatasetBundle(clean, degraded, [it["task"] for it in items], specs, doc["pairing"], pair_index, manifest, doc["config"])
