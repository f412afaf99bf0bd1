"""Command line entry point: ``inrlab <verb> [options]``.

Verbs: run, compare, accept, export-slices, grad-check. Failures print one JSON
object to stderr (``{"error": ..., "message": ..., "problems": [...]}``) and
exit nonzero: 2 for invalid configs, 3 for non-finite training, 4 for I/O.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .config import ExperimentConfig, load_config
from .diffcore import ConfigError
from .models import build_model, load_checkpoint, save_checkpoint
from .tasks import ImageTask, SdfTask, StripeTask, export_slices, fit

EXIT_CONFIG = 2
EXIT_NONFINITE = 3
EXIT_IO = 4


class CliFailure(Exception):
    def __init__(self, kind: str, message: str, code: int, problems=None):
        super().__init__(message)
        self.kind = kind
        self.code = code
        self.problems = list(problems or [])


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=float) / 255.0


def to_uint8(values) -> np.ndarray:
    """[0, 1] floats to 8 bits, rounding halves up."""
    return np.floor(np.clip(values, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_png(values, path) -> None:
    arr = to_uint8(values)
    mode = "RGB" if arr.ndim == 3 and arr.shape[2] == 3 else "L"
    Image.fromarray(arr if mode == "RGB" else arr.reshape(arr.shape[:2]), mode=mode).save(path)


def build_task(cfg: ExperimentConfig):
    t = cfg.task
    if t.kind == "stripe":
        return StripeTask(t.n_points, t.n_bands, t.band_width)
    if t.kind == "image":
        if t.source == "procedural":
            return ImageTask(size=t.size, sampling_factor=t.sampling_factor)
        if t.source == "constant":
            return ImageTask(np.broadcast_to(np.asarray(t.color, float), (t.size, t.size, 3)).copy(),
                             sampling_factor=t.sampling_factor)
        try:
            pixels = load_png(t.source)
        except OSError as exc:
            raise CliFailure("io", f"cannot read image {t.source}: {exc}", EXIT_IO) from exc
        return ImageTask(pixels, sampling_factor=t.sampling_factor)
    return SdfTask(t.shape, t.eval_resolution)


def build(cfg: ExperimentConfig):
    task = build_task(cfg)
    model = build_model(cfg.model.kind, task.d_in, task.d_out, cfg.model, rng=cfg.seed,
                        key_lattice=task.key_lattice)
    return task, model


def train(cfg: ExperimentConfig):
    task, model = build(cfg)
    o = cfg.optim
    record = fit(task, model, o.iters, batch_size=o.batch_size, seed=cfg.seed, lr=o.lr, table_lr=o.table_lr,
                 eval_interval=o.eval_interval, cosine=o.cosine, config=cfg.to_dict())
    return task, model, record


def _prepare_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise CliFailure("io", f"output directory {out} is not writable: {exc}", EXIT_IO) from exc
    return out


def write_slices(cfg: ExperimentConfig, task, model, out: Path) -> list[str]:
    s = cfg.slices
    fixed = {int(k): v for k, v in s.fixed.items()} if s.fixed else None
    sl = export_slices(model, task, m=s.m, axes=tuple(s.axes) if s.axes else None, fixed=fixed)
    d = out / "slices"
    d.mkdir(exist_ok=True)
    rows = ["h,t," + ",".join(f"out{k}" for k in range(sl.raster.shape[2]))]
    for i, tv in enumerate(sl.t_axis):
        for j, hv in enumerate(sl.h_axis):
            rows.append(",".join(repr(float(v)) for v in (hv, tv, *sl.raster[i, j])))
    (d / "slice.csv").write_text("\n".join(rows) + "\n")
    overlay = ["split,h,t"]
    for name, pts in (("train", sl.train_points), ("heldout", sl.heldout_points)):
        overlay += [f"{name},{float(h)!r},{float(t)!r}" for h, t in pts]
    (d / "overlay.csv").write_text("\n".join(overlay) + "\n")
    raster = sl.raster if sl.raster.shape[2] == 3 else sl.raster[..., :1]
    save_png(raster[::-1], d / "slice.png")  # t increases upwards
    return ["slices/slice.csv", "slices/overlay.csv", "slices/slice.png"]


def write_artifacts(cfg: ExperimentConfig, task, model, record, out: Path) -> list[str]:
    (out / "config.snapshot").write_text(cfg.dump())
    (out / "metrics.csv").write_text(record.metrics_csv(task.metric_names))
    (out / "summary.json").write_text(json.dumps(record.summary(), indent=2, sort_keys=True) + "\n")
    save_checkpoint(model, out / "checkpoint")
    written = ["config.snapshot", "metrics.csv", "summary.json", "checkpoint"]
    if isinstance(task, ImageTask):
        save_png(task.render(model), out / "recon.png")
        written.append("recon.png")
    if cfg.slices.enabled:
        written += write_slices(cfg, task, model, out)
    return written


def cmd_run(args) -> int:
    cfg = _load(args.config, args)
    out = _prepare_dir(args.out or cfg.output_dir)
    task, model, record = train(cfg)
    write_artifacts(cfg, task, model, record, out)
    print(json.dumps({"output_dir": str(out), "status": record.status, "final": record.final}, sort_keys=True))
    if record.status != "ok":
        raise CliFailure("nonfinite", record.error or "non-finite value during training", EXIT_NONFINITE)
    return 0


def compare_records(cfg_a, rec_a, cfg_b, rec_b) -> dict:
    keys = [k for k in rec_a.final if k in rec_b.final]
    rows = {k: {"a": rec_a.final[k], "b": rec_b.final[k], "delta": rec_b.final[k] - rec_a.final[k]} for k in keys}
    report = {"a": cfg_a.model.kind, "b": cfg_b.model.kind, "task": cfg_a.task.kind, "seed": cfg_a.seed,
              "metrics": rows}
    if "heldout_mse" in rows:
        a, b = rows["heldout_mse"]["a"], rows["heldout_mse"]["b"]
        report["heldout_mse_ratio_b_over_a"] = b / a if a > 0 else None
    return report


def format_comparison(report: dict) -> str:
    lines = [f"{'metric':<14}{report['a']:>16}{report['b']:>16}{'delta':>14}"]
    for k, r in report["metrics"].items():
        lines.append(f"{k:<14}{r['a']:>16.6g}{r['b']:>16.6g}{r['delta']:>14.6g}")
    if report.get("heldout_mse_ratio_b_over_a") is not None:
        lines.append(f"held-out MSE ratio b/a: {report['heldout_mse_ratio_b_over_a']:.4g}")
    return "\n".join(lines)


def cmd_compare(args) -> int:
    if len(args.config) != 2:
        raise CliFailure("validation", "compare needs exactly two --config files", EXIT_CONFIG,
                         ["--config: expected 2 files"])
    cfg_a, cfg_b = (_load(p, args) for p in args.config)
    if cfg_a.task != cfg_b.task:
        raise CliFailure("validation", "configs describe different tasks", EXIT_CONFIG, ["task: configs differ"])
    if cfg_a.seed != cfg_b.seed:
        raise CliFailure("validation", "configs use different seeds", EXIT_CONFIG, ["seed: configs differ"])
    _, _, rec_a = train(cfg_a)
    _, _, rec_b = train(cfg_b)
    report = compare_records(cfg_a, rec_a, cfg_b, rec_b)
    print(format_comparison(report))
    if args.out:
        out = _prepare_dir(args.out)
        (out / "comparison.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_export_slices(args) -> int:
    cfg = _load(args.config, args)
    out = _prepare_dir(args.out or cfg.output_dir)
    cfg.slices.enabled = True
    ckpt = out / "checkpoint"
    task, model = build(cfg)
    if ckpt.exists():
        try:
            load_checkpoint(model, ckpt)
        except ValueError as exc:
            raise CliFailure("validation", f"checkpoint does not match config: {exc}", EXIT_CONFIG) from exc
    else:
        task, model, record = train(cfg)
        write_artifacts(cfg, task, model, record, out)
    for name in write_slices(cfg, task, model, out):
        print(out / name)
    return 0


def cmd_grad_check(args) -> int:
    from .gradcheck import run_gradcheck

    results = run_gradcheck(n_configs=args.configs, seed=args.seed or 0)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<22} worst violation {r.worst:.3g} over {r.configs} configs")
    return 0 if all(r.passed for r in results) else 1


def cmd_accept(args) -> int:
    from .acceptance import run_acceptance

    results = run_acceptance(overrides=args.override, seed=args.seed, stream=sys.stdout)
    if args.out:
        out = _prepare_dir(args.out)
        (out / "acceptance.json").write_text(json.dumps([r.as_dict() for r in results], indent=2) + "\n")
    return 0 if all(r.passed for r in results) else 1


def _load(path, args):
    if path is None:
        raise CliFailure("validation", "--config is required", EXIT_CONFIG, ["--config: missing"])
    return load_config(path, overrides=args.override, seed=args.seed)


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="inrlab", description="Coordinate-network experiments.")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, multi_config=False):
        if multi_config:
            p.add_argument("--config", action="append", default=[], metavar="PATH")
        else:
            p.add_argument("--config", metavar="PATH")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", metavar="DIR", default=None)
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
        return p

    common(sub.add_parser("run", help="train one config and write artifacts")).set_defaults(func=cmd_run)
    common(sub.add_parser("compare", help="train two configs and report metric deltas"),
           multi_config=True).set_defaults(func=cmd_compare)
    common(sub.add_parser("accept", help="run the acceptance suite")).set_defaults(func=cmd_accept)
    common(sub.add_parser("export-slices", help="write trunk slice rasters")).set_defaults(func=cmd_export_slices)
    gc = common(sub.add_parser("grad-check", help="finite-difference gradient checks"))
    gc.add_argument("--configs", type=int, default=100)
    gc.set_defaults(func=cmd_grad_check)
    return parser


def _fail(kind, message, code, problems=None) -> int:
    print(json.dumps({"error": kind, "message": message, "problems": list(problems or [])}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliFailure as exc:
        return _fail(exc.kind, str(exc), exc.code, exc.problems)
    except ConfigError as exc:
        return _fail("validation", str(exc), EXIT_CONFIG, exc.problems)
    except OSError as exc:
        return _fail("io", str(exc), EXIT_IO)


if __name__ == "__main__":
    sys.exit(main())
