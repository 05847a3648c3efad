"""``darcot`` command line: data synthesis, training, evaluation and checks.

Exit status is 0 on success, 1 for usage errors, contract violations and
malformed files, 2 for numeric failures (non-finite values, failed
gradient checks, unconverged quadrature).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io as fio
from .degradations import TASKS, DatasetConfig, load_bundle, make_dataset, residual_spectrum_stats, save_bundle
from .errors import ContractViolation, FormatError, NumericError

log = logging.getLogger("darcot")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _tasks(text: str) -> tuple[str, ...]:
    names = tuple(t.strip() for t in text.split(",") if t.strip())
    bad = [t for t in names if t not in TASKS]
    if bad or not names:
        raise argparse.ArgumentTypeError(f"tasks must be a comma list drawn from {','.join(TASKS)}")
    return names


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON config file (unknown keys are rejected)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, default=Path("."), help="output directory")
    p.add_argument("--mode", choices=("paired", "unpaired"))
    p.add_argument("--tasks", type=_tasks, help="comma-separated task list")
    p.add_argument("--steps", type=int)


def _overrides(args, **extra) -> dict:
    out = {k: v for k, v in extra.items() if v is not None}
    for key in ("seed", "mode", "steps"):
        if getattr(args, key, None) is not None:
            out[key] = getattr(args, key)
    return out


def _train_config(args):
    from .metrics import toy_config
    from .trainer import TrainConfig

    base = fio.load_config(args.config, TrainConfig).to_json() if args.config else toy_config().to_json()
    base.update(_overrides(args))
    return fio.config_from_dict(base, TrainConfig)


def _data(args, split: str):
    """Bundle from --data/--test-data, else the toy split for --tasks and --data-seed."""
    from .metrics import TOY_TASKS, toy_data

    folder = getattr(args, "test_data" if split == "test" else "data", None)
    if folder is not None:
        return load_bundle(folder)
    train, test = toy_data(seed=args.data_seed, tasks=args.tasks or TOY_TASKS)
    return test if split == "test" else train


# ------------------------------------------------------------------ commands


def cmd_synth_data(args) -> int:
    raw = json.loads(args.config.read_text()) if args.config else {}
    if args.tasks:
        raw["tasks"] = list(args.tasks)
    if args.count is not None:
        raw["count"] = args.count
    if args.size is not None:
        raw["size"] = args.size
    if args.mode:
        raw["pairing"] = args.mode
    cfg = fio.config_from_dict(raw, DatasetConfig)
    bundle = make_dataset(cfg, seed=args.seed or 0)
    save_bundle(bundle, args.out)
    print(f"wrote {len(bundle)} items to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .trainer import fit

    cfg = _train_config(args)
    data = _data(args, "train")
    args.out.mkdir(parents=True, exist_ok=True)
    fio.atomic_write_json(args.out / "config.json", cfg.to_json())
    res = fit(
        cfg,
        data,
        out_dir=args.out,
        log_every=args.log_every,
        checkpoint_every=args.checkpoint_every,
        resume=args.resume,
        record_time=not args.no_timing,
    )
    last = res.metrics[-1] if res.metrics else {}
    print(f"trained {res.state.step} steps, config {cfg.hash()}; last L_T={last.get('L_T')}")
    return 0


def load_transport(path: Path):
    """Rebuild the trained transport map from a checkpoint file."""
    from .trainer import TrainConfig, state_from_checkpoint

    ckpt = fio.load_checkpoint(path)
    if "config" not in ckpt.meta:
        raise FormatError(f"{path}: checkpoint has no config in its header")
    cfg = fio.config_from_dict(ckpt.meta["config"], TrainConfig)
    return state_from_checkpoint(ckpt, cfg).transport, cfg, ckpt


def cmd_eval(args) -> int:
    from .metrics import evaluate, save_report

    transport, cfg, ckpt = load_transport(args.checkpoint)
    data = _data(args, "test")
    meta = {"config_hash": ckpt.config_hash, "step": ckpt.step, "seed": cfg.seed, "data_digest": data.digest()}
    report = evaluate(transport, data, probe_seed=cfg.seed, meta=meta)
    save_report(report, args.out / "eval.json")
    fio.atomic_write_text(args.out / "eval.csv", report.to_csv())
    print(report.to_csv(), end="")
    return 0


def cmd_analyze_residual(args) -> int:
    if args.data is not None:
        data = load_bundle(args.data)
    else:
        cfg = DatasetConfig(tasks=args.tasks or TASKS, count=args.count * len(args.tasks or TASKS), size=args.size)
        data = make_dataset(cfg, seed=args.seed or 0)
    gt = data.clean_for(np.arange(len(data)))
    residual = data.degraded.astype(np.float64) - gt
    stats_by_task = {}
    for task in data.task_names:
        idx = [i for i, t in enumerate(data.tasks) if t == task]
        per = [residual_spectrum_stats(residual[i]) for i in idx]
        stats_by_task[task] = {
            "count": len(idx),
            "mean_sparsity": float(np.mean([s["sparsity"] for s in per])),
            "amplitude_histogram": np.mean([s["amplitude_histogram"] for s in per], axis=0).tolist(),
            "bin_edges": per[0]["bin_edges"],
        }
    ranking = sorted(stats_by_task, key=lambda t: -stats_by_task[t]["mean_sparsity"])
    fio.atomic_write_json(args.out / "residual_stats.json", {"tasks": stats_by_task, "sparsity_ranking": ranking})
    for task in ranking:
        print(f"{task:10s} sparsity {stats_by_task[task]['mean_sparsity']:.4f}")
    if args.plot is not None:
        _plot_histograms(stats_by_task, args.plot)
    return 0


_COLOURS = [(31, 119, 180), (255, 127, 14), (44, 160, 44), (214, 39, 40), (148, 103, 189)]


def _plot_histograms(stats_by_task: dict, path: Path) -> None:
    """Line plot of the per-task amplitude histograms (log-amplitude x axis)."""
    import io as _io

    from PIL import Image, ImageDraw

    w, h, pad = 640, 360, 40
    img = Image.new("RGB", (w, h), "white")
    draw = ImageDraw.Draw(img)
    draw.rectangle([pad, pad // 2, w - pad // 2, h - pad], outline="black")
    top = max(max(s["amplitude_histogram"]) for s in stats_by_task.values()) or 1.0
    for k, (task, s) in enumerate(stats_by_task.items()):
        hist = s["amplitude_histogram"]
        xs = np.linspace(pad, w - pad // 2, len(hist))
        ys = (h - pad) - np.asarray(hist) / top * (h - 1.5 * pad)
        colour = _COLOURS[k % len(_COLOURS)]
        draw.line(list(zip(xs.tolist(), ys.tolist())), fill=colour, width=2)
        draw.text((pad + 8, pad // 2 + 4 + 12 * k), task, fill=colour)
    draw.text((pad, h - pad + 8), "log10 |F(r)|: -4 ... 3", fill="black")
    buf = _io.BytesIO()
    img.save(buf, format="PNG")
    fio.atomic_write_bytes(path, buf.getvalue())


def cmd_grad_check(args) -> int:
    from .gradcheck import TOLERANCE, gradient_table

    rows = gradient_table(seed=args.seed or 0, tolerance=args.tolerance)
    for r in rows:
        print(f"{r['kind']:9s} {r['name']:28s} {r['max_rel_error']:.2e}  {'ok' if r['passed'] else 'FAIL'}")
    fio.atomic_write_json(args.out / "grad_check.json", {"tolerance": args.tolerance, "rows": rows})
    failed = [r["name"] for r in rows if not r["passed"]]
    if failed:
        raise NumericError(f"gradient check above {args.tolerance:g}: {', '.join(failed)}")
    return 0


def cmd_ot_sanity(args) -> int:
    from .ot_oracle import Gaussian1D, monotone_map_1d, verify_saddle
    from .trainer import OT1DConfig, fit_1d

    raw = json.loads(args.config.read_text()) if args.config else {}
    raw.update(_overrides(args))
    raw.pop("mode", None)
    cfg = fio.config_from_dict(raw, OT1DConfig)
    res = fit_1d(cfg)
    p, q = Gaussian1D(*cfg.source), Gaussian1D(*cfg.target)
    oracle = monotone_map_1d(p, q)
    report = verify_saddle(
        res.map_numpy,
        res.potential_numpy,
        p.sample,
        q.sample,
        lambda y, ty: np.abs(y - ty),
        oracle.cost,
        n=args.samples,
        rng=np.random.default_rng(cfg.seed + 1),
    )
    grid = np.linspace(-2.0, 2.0, 401)
    max_dev = float(np.max(np.abs(res.map_numpy(grid) - oracle(grid))))
    doc = {"config": dataclasses.asdict(cfg), "oracle_cost": oracle.cost, "max_map_deviation": max_dev, **report.to_json()}
    fio.atomic_write_json(args.out / "ot_sanity.json", doc)
    print(f"primal {report.primal_cost:.4f}  oracle {oracle.cost:.4f}  relative gap {report.relative_gap:+.3%}  max |T - T*| {max_dev:.4f}")
    return 0


def cmd_ablate(args) -> int:
    from .metrics import ablation_csv, run_ablation, save_report

    base = _train_config(args)
    train, test = _data(args, "train"), _data(args, "test")
    seeds = [int(s) for s in args.seeds.split(",")]
    report = run_ablation(args.suite, base, train, test, seeds=seeds, workers=args.workers)
    save_report(report, args.out / f"ablation_{args.suite}.json")
    text = ablation_csv(report)
    fio.atomic_write_text(args.out / f"ablation_{args.suite}.csv", text)
    print(text, end="")
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="darcot", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-data", help="write a synthetic degraded/clean bundle")
    _common(p)
    p.add_argument("--count", type=int, help="total number of degraded items")
    p.add_argument("--size", type=int)
    p.set_defaults(func=cmd_synth_data)

    def data_flags(q):
        q.add_argument("--data", type=Path, help="training bundle folder (default: toy data)")
        q.add_argument("--test-data", type=Path, help="evaluation bundle folder (default: toy data)")
        q.add_argument("--data-seed", type=int, default=0, help="seed of the default toy data")

    p = sub.add_parser("train", help="adversarial training of (T, phi)")
    _common(p)
    data_flags(p)
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--log-every", type=int, default=1)
    p.add_argument("--no-timing", action="store_true", help="write wall_ms as null for reproducible logs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="PSNR/SSIM and embedding probe of a checkpoint")
    _common(p)
    data_flags(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze-residual", help="Fourier amplitude statistics of degradation residuals")
    _common(p)
    p.add_argument("--data", type=Path)
    p.add_argument("--count", type=int, default=40, help="pairs per task when synthesizing")
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--plot", type=Path, help="optional PNG plot of the histograms")
    p.set_defaults(func=cmd_analyze_residual)

    p = sub.add_parser("grad-check", help="finite-difference table for ops, blocks and losses")
    _common(p)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("ot-sanity", help="1-D Gaussian transport against the exact monotone map")
    _common(p)
    p.add_argument("--samples", type=int, default=20000)
    p.set_defaults(func=cmd_ot_sanity)

    p = sub.add_parser("ablate", help="train and compare the arms of an ablation suite")
    _common(p)
    data_flags(p)
    p.add_argument("--suite", required=True, choices=("rec_conditioning", "loss_variants", "residual_reg", "task_count"))
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        return args.func(args)
    except (ContractViolation, FormatError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
