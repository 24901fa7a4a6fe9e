"""``qvdit`` command line: calibrate, evaluate, ablation, grad-check, entropy-check.

Exit codes: 0 success, 1 configuration or dimension error, 2 calibration
diverged, 3 a verification command found a violation.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import archive as arc
from ._backend import BACKEND
from .calibration import (
    CalibrationDiverged,
    MetricsReport,
    calibrate,
    evaluate,
    run_ablation,
)
from .config import ConfigError, RunConfig, load_config, to_ini
from .entropy import entropy_sweep
from .gradcheck import run_all
from .model import ToyDiT, build_model, make_calibration_set
from .tensor import ShapeError, make_rng
from .tqe import tqe_param_count

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_CHECK_FAILED = 0, 1, 2, 3
ARTIFACT_VERSION = "0.1.0"
DATA_STREAM, EVAL_STREAM = 3, 4

log = logging.getLogger("qvdit")


def build_run(cfg: RunConfig) -> tuple[ToyDiT, list[np.ndarray], list[np.ndarray]]:
    model = build_model(cfg.model)
    layout, d, data = cfg.model.layout, cfg.model.d, cfg.data
    calib = make_calibration_set(make_rng(cfg.seed, DATA_STREAM), layout, d, data.prompts, data.timesteps,
                                 data.frame_step)
    ev = make_calibration_set(make_rng(cfg.seed, EVAL_STREAM), layout, d, data.eval_prompts,
                              data.eval_timesteps, data.frame_step)
    return model, calib, ev


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _write_manifest(out: Path, command: str, cfg: RunConfig, outputs: dict, started: str) -> None:
    manifest = {
        "artifact_version": ARTIFACT_VERSION,
        "backend": BACKEND,
        "command": command,
        "config": cfg.snapshot(),
        "finished_at": _now(),
        "numpy_version": np.__version__,
        "outputs": outputs,
        "seed": cfg.seed,
        "started_at": started,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _fmt(v: float) -> str:
    return repr(float(v))


def _metrics_table(rows: list[tuple[str, MetricsReport]]) -> str:
    head = f"{'run':<16}{'task_loss':>16}{'temporal_kl':>16}{'relation_gap':>16}{'rel_error':>12}"
    lines = [head, "-" * len(head)]
    for label, m in rows:
        lines.append(f"{label:<16}{m.task_loss:>16.6g}{m.temporal_kl:>16.6g}{m.relation_gap:>16.6g}"
                     f"{m.relative_error:>12.4g}")
    return "\n".join(lines)


def cmd_calibrate(cfg: RunConfig, out: Path) -> int:
    started = _now()
    model, calib_set, _ = build_run(cfg)
    t0 = time.perf_counter()
    res = calibrate(model, calib_set, cfg.calib, progress_every=100)
    log.info("calibrated %d iterations in %.1fs", len(res.history), time.perf_counter() - t0)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "task", "temporal", "total"])
        for row in res.history:
            w.writerow([row.iteration, _fmt(row.task), _fmt(row.temporal), _fmt(row.total)])
    arc.save(arc.pack_state(res.qstate, model, {"config": cfg.snapshot()}), out / "params.qvda")
    (out / "config.ini").write_text(to_ini(cfg))
    outputs = {"archive": "params.qvda", "config": "config.ini", "loss_csv": "loss.csv"}
    _write_manifest(out, "calibrate", cfg, outputs, started)
    if res.history:
        last = res.history[-1]
        print(f"final task {last.task:.6g} temporal {last.temporal:.6g} total {last.total:.6g}")
    print(f"wrote {out / 'params.qvda'}")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, archive_path: Path, out: Path) -> int:
    started = _now()
    model, _, eval_set = build_run(cfg)
    a = arc.load(archive_path)
    arc.check_model_weights(a, model)
    qstate = arc.unpack_state(a, model)
    report = evaluate(model, qstate, eval_set)
    print(_metrics_table([("evaluated", report)]))
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(report.as_dict(), indent=2, sort_keys=True) + "\n")
    _write_manifest(out, "evaluate", cfg, {"archive_in": str(archive_path), "metrics": "metrics.json"}, started)
    return EXIT_OK


def cmd_ablation(cfg: RunConfig, out: Path) -> int:
    started = _now()
    model, calib_set, _ = build_run(cfg)
    rows = run_ablation(model, calib_set, cfg.calib)
    print(_metrics_table([(r.label, r.metrics) for r in rows]))
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "task_loss", "temporal_kl", "relation_gap", "relative_error", "final_total"])
        for r in rows:
            m = r.metrics
            w.writerow([r.label, _fmt(m.task_loss), _fmt(m.temporal_kl), _fmt(m.relation_gap),
                        _fmt(m.relative_error), _fmt(r.final_total)])
    payload = [{"row": r.label, **r.metrics.as_dict(), "final_total": r.final_total} for r in rows]
    (out / "ablation.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    _write_manifest(out, "ablation", cfg, {"csv": "ablation.csv", "json": "ablation.json"}, started)
    return EXIT_OK


def cmd_grad_check(frames: int, spatial: int, dim: int, seed: int, corrupt: bool) -> int:
    results = run_all(frames, spatial, dim, seed, corrupt=corrupt)
    print(f"instance t={frames} s={spatial} d={dim} seed={seed}, central differences h=1e-6"
          + (" (corrupted gradient)" if corrupt else ""))
    for r in results:
        print(f"{r.name:<26} worst {r.error:.3e}  tol {r.tol:.0e}  {'ok' if r.ok else 'FAIL'}")
    return EXIT_OK if all(r.ok for r in results) else EXIT_CHECK_FAILED


def cmd_entropy_check(seeds: int, bits: list[int], constant: bool, granularity: str, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    failures = total = 0
    with open(out / "entropy.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "bits", "h_w", "h_delta", "holds"])
        for seed, b, chk in entropy_sweep(seeds, bits, granularity=granularity, constant=constant):
            w.writerow([seed, b, _fmt(chk.h_w), _fmt(chk.h_delta), int(chk.holds)])
            total += 1
            failures += not chk.holds
    print(f"{total - failures}/{total} cases satisfy H(delta) <= H(W); wrote {out / 'entropy.csv'}")
    return EXIT_OK if failures == 0 else EXIT_CHECK_FAILED


def _bits_list(text: str) -> list[int]:
    try:
        return [int(b) for b in text.split(",") if b.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bit list must be comma-separated integers, got {text!r}") from None


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="overrides run.seed")
    common.add_argument("--out-dir", type=Path, default=Path("qvdit-out"))
    common.add_argument("--override", action="append", default=[], metavar="SECTION.KEY=VALUE")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="qvdit", description="Video-DiT quantization toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("calibrate", parents=[common], help="calibrate and write an archive")
    c.add_argument("config", nargs="?", type=Path, help="INI config (defaults if omitted)")

    e = sub.add_parser("evaluate", parents=[common], help="metrics for an archive")
    e.add_argument("config", nargs="?", type=Path)
    e.add_argument("--archive", type=Path, required=True)

    a = sub.add_parser("ablation", parents=[common], help="five-row ablation ladder")
    a.add_argument("config", nargs="?", type=Path)

    g = sub.add_parser("grad-check", parents=[common], help="analytic vs finite-difference gradients")
    g.add_argument("--frames", type=int, default=4)
    g.add_argument("--spatial", type=int, default=3)
    g.add_argument("--dim", type=int, default=5)
    g.add_argument("--corrupt", action="store_true", help="negative control: use a wrong gradient")

    h = sub.add_parser("entropy-check", parents=[common], help="sweep the error-entropy inequality")
    h.add_argument("--seeds", type=int, default=1000)
    h.add_argument("--bits", type=_bits_list, default=[2, 3, 4])
    h.add_argument("--granularity", default="per_tensor", choices=["per_tensor", "per_channel"])
    h.add_argument("--constant", action="store_true", help="use constant matrices")
    return p


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "grad-check":
            if min(args.frames, args.spatial, args.dim) < 1:
                raise ConfigError("grad-check dimensions must be positive")
            if args.override:
                raise ConfigError("grad-check takes no config overrides")
            return cmd_grad_check(args.frames, args.spatial, args.dim, args.seed or 0, args.corrupt)
        if args.command == "entropy-check":
            if args.seeds < 1 or not args.bits:
                raise ConfigError("entropy-check needs --seeds >= 1 and at least one bit-width")
            if any(not 2 <= b <= 16 for b in args.bits):
                raise ConfigError(f"bit-widths must be in [2, 16], got {args.bits}")
            if args.override:
                raise ConfigError("entropy-check takes no config overrides")
            return cmd_entropy_check(args.seeds, args.bits, args.constant, args.granularity, args.out_dir)
        cfg = load_config(args.config, args.override, args.seed)
        if args.command == "calibrate":
            return cmd_calibrate(cfg, args.out_dir)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.archive, args.out_dir)
        return cmd_ablation(cfg, args.out_dir)
    except CalibrationDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, arc.ArchiveError, ShapeError, KeyError, ValueError, FileNotFoundError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_CONFIG


def preset_param_ratio(cfg: RunConfig) -> float:
    """Largest TQE-parameters / weight-parameters ratio over the preset's layers."""
    model = build_model(cfg.model)
    t = cfg.model.frames
    return max(tqe_param_count(l.d_in, l.d_out, t) / (l.d_in * l.d_out) for l in model.linears.values())


if __name__ == "__main__":
    sys.exit(main())
