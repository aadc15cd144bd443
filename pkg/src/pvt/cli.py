"""``pvt`` command line: train, eval, bench-voxelize, sample-arch, report.

Every command writes ``metrics.json`` into ``--out``. Wall-clock numbers sit
under ``timings`` keys so two runs with the same config and seeds produce
identical files once those keys are dropped. Exit status is 0 only when a
complete report was written.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
import time
from dataclasses import asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .arch import ArchError, ArchSpec, enumerate_point_space, sample_point_specs, sample_voxel_specs
from .bench import PRESETS, run_benchmark
from .flops import SceneShape, count_flops, total_params
from .io import FormatError, load_checkpoint, parse_kv_lines, read_kv_file, save_checkpoint, write_kv_file
from .model import Detector
from .scenes import SceneGenConfig, generate_scene
from .train import ConfigError, DivergenceError, ExperimentConfig, evaluate, load_into, train
from .voxelizer import PillarGridConfig

SCHEMA_VERSION = 1
REPORT_COLUMNS = ["run", "status", "arch_hash", "gflops", "params", "mean_ap", "ap_vehicle", "ap_pedestrian",
                  "heading_mae_vehicle", "heading_mae_pedestrian", "seed"]
EXIT_CONTRACT = 2
EXIT_DIVERGED = 3


def _clean(obj):
    """JSON-safe copy: NaN/Inf become null, numpy scalars become Python numbers."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_metrics(out: Path, metrics: dict) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / "metrics.json"
    path.write_text(json.dumps(_clean({"schema_version": SCHEMA_VERSION, **metrics}), indent=2, sort_keys=True)
                    + "\n")
    return path


def strip_timings(obj):
    """Drop every ``timings`` entry, recursively (used to compare reruns)."""
    if isinstance(obj, dict):
        return {k: strip_timings(v) for k, v in obj.items() if k != "timings"}
    if isinstance(obj, list):
        return [strip_timings(v) for v in obj]
    return obj


def _raw_config(args) -> dict[str, str]:
    raw: dict[str, str] = {}
    if getattr(args, "config", None):
        raw.update(read_kv_file(args.config))
    raw.update(parse_kv_lines(args.set or [], "--set"))
    if getattr(args, "seed", None) is not None:
        raw["seed"] = str(args.seed)
    return raw


def _log(msg: str) -> None:
    print(msg, flush=True)


# ----------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = ExperimentConfig.from_mapping(_raw_config(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_kv_file(out / "config.txt", cfg.flat())
    try:
        result = train(cfg, _log)
    except DivergenceError as exc:
        rep = exc.report
        rep["command"] = "train"
        write_metrics(out, rep)
        _log(f"diverged: non-finite loss at step {rep['divergence']['step']} "
             f"(query mode {rep['divergence']['mode']})")
        return EXIT_DIVERGED
    save_checkpoint(out / "checkpoint.txt", result.detector.named_parameters())
    rep = result.report
    rep["command"] = "train"
    if cfg["eval.scenes"] > 0:
        ev = evaluate(result.detector, cfg)
        rep["eval"] = ev
        rep["timings"]["eval_seconds"] = ev.pop("timings")["eval_seconds"]
    write_metrics(out, rep)
    write_report_csv(out / "report.csv", [_row_from_metrics(out.name, rep)])
    _log(f"wrote {out / 'metrics.json'}")
    return 0


def cmd_eval(args) -> int:
    cfg = ExperimentConfig.from_mapping(_raw_config(args))
    ckpt = Path(args.checkpoint)
    det = Detector.build(cfg.arch, cfg.grid_config(), f=4, seed=cfg["seed"], strict=bool(cfg["arch.strict"]))
    load_into(det, load_checkpoint(ckpt))
    before = [p.data.copy() for p in det.parameters()]
    ev = evaluate(det, cfg)
    if any(not np.array_equal(a, p.data) for a, p in zip(before, det.parameters())):
        raise RuntimeError("evaluation mutated parameters")
    rep = {"command": "eval", "checkpoint": ckpt.name, "seed": cfg["seed"], "arch": dict(cfg.arch),
           "arch_hash": cfg.arch.digest(), "params": det.num_parameters(),
           "flops": count_flops(cfg.arch, SceneShape(cfg.grid_config().grid_extent, cfg["grid.max_voxels"],
                                                     cfg["grid.cap_points"], 4, 1)),
           "eval": ev, "timings": ev.pop("timings")}
    out = Path(args.out)
    write_metrics(out, rep)
    write_report_csv(out / "report.csv", [_row_from_metrics(out.name, rep)])
    _log(json.dumps(_clean(ev["ap"])))
    return 0


def cmd_bench(args) -> int:
    if args.preset not in PRESETS:
        raise ConfigError(f"--preset must be one of {sorted(PRESETS)}")
    t0 = time.perf_counter()
    rep = run_benchmark(args.preset, args.repeats, seed=args.seed or 0, log=_log)
    metrics = {
        "command": "bench-voxelize",
        "preset": rep["preset"],
        "shape": rep["shape"],
        "repeats": rep["repeats"],
        "equivalence_max_abs_diff": rep["equivalence_max_abs_diff"],
        "equivalent": rep["equivalence_max_abs_diff"] < 1e-9,
        "reference_tpu_ms": rep["reference_tpu_ms"],
        "warnings": rep["warnings"],
        "timings": {"rows": rep["rows"], "total_seconds": time.perf_counter() - t0},
    }
    write_metrics(Path(args.out), metrics)
    return 0


def forward_check(spec: ArchSpec, extent: float = 4.0, seed: int = 0) -> tuple[bool, str]:
    """Build ``spec`` and run a one-scene microbatch; check every output shape."""
    n = int(round(extent / 0.32))
    grid = PillarGridConfig((-extent / 2, -extent / 2), 0.32, (n, n), 32, 512)
    try:
        det = Detector.build(spec, grid, seed=seed, strict=True)
        scene = generate_scene(SceneGenConfig(extent=extent, objects_per_scene=(1, 2), background_points=60), seed)
        with T.no_grad():
            out = det.forward(det.voxelize([scene]))
        for cls, stride in ((0, 2), (1, 1)):
            hw = (-(-n // stride),) * 2
            o = out[cls]
            if o.heatmap.shape != (1,) + hw or o.box_reg.shape != (1,) + hw + (5,) or o.fg_seg.shape != (1,) + hw:
                return False, f"class {cls}: unexpected output shape {o.heatmap.shape}"
            if not all(np.isfinite(a.data).all() for a in (o.heatmap, o.box_reg, o.fg_seg)):
                return False, f"class {cls}: non-finite output"
        return True, "ok"
    except (ArchError, ValueError) as exc:
        return False, str(exc)


def cmd_sample_arch(args) -> int:
    seed = args.seed or 0
    if args.count < 1:
        raise ConfigError("--count must be >= 1")
    if args.space == "point":
        specs = enumerate_point_space() if args.enumerate else sample_point_specs(args.count, seed)
    else:
        specs = sample_voxel_specs(args.count, seed)
    out = Path(args.out)
    (out / "specs").mkdir(parents=True, exist_ok=True)
    shape = SceneShape((32, 32), 1024, 32, 4, 1)
    rows = []
    t0 = time.perf_counter()
    for i, spec in enumerate(specs):
        ok, msg = forward_check(spec, seed=seed) if not args.no_check else (True, "skipped")
        (out / "specs" / f"spec_{i:03d}.txt").write_text("\n".join(spec.to_lines()) + "\n")
        rows.append({"index": i, "arch_hash": spec.digest(), "flops": count_flops(spec, shape, strict=True),
                     "params": total_params(spec, strict=True), "forward_check": ok, "message": msg,
                     "arch": dict(spec)})
    metrics = {"command": "sample-arch", "space": args.space, "count": len(specs), "seed": seed,
               "flop_shape": asdict(shape),
               "samples": rows, "all_ok": all(r["forward_check"] for r in rows),
               "timings": {"seconds": time.perf_counter() - t0}}
    write_metrics(out, metrics)
    _log(f"{len(specs)} {args.space} specs, forward checks ok: {metrics['all_ok']}")
    return 0 if metrics["all_ok"] else EXIT_CONTRACT


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if not math.isfinite(v) else f"{v:.6g}"
    return str(v)


def _row_from_metrics(run: str, m: dict) -> dict:
    ev = m.get("eval") or {}
    ap = ev.get("ap") or {}
    mae = ev.get("heading_mae") or {}
    diverged = (m.get("divergence") or {}).get("diverged")
    return {"run": run, "status": "diverged" if diverged else "ok", "arch_hash": m.get("arch_hash", ""),
            "gflops": (m["flops"] / 1e9) if m.get("flops") is not None else None, "params": m.get("params"),
            "mean_ap": ev.get("mean_ap"), "ap_vehicle": ap.get("vehicle"), "ap_pedestrian": ap.get("pedestrian"),
            "heading_mae_vehicle": mae.get("vehicle"), "heading_mae_pedestrian": mae.get("pedestrian"),
            "seed": m.get("seed")}


def write_report_csv(path: Path, rows: list[dict]) -> str:
    """Write rows in the fixed column order; returns the file's sha256."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in REPORT_COLUMNS])
    return hashlib.sha256(path.read_bytes()).hexdigest()


def cmd_report(args) -> int:
    if not args.run_dirs:
        raise ConfigError("report needs at least one run directory")
    rows, bad = [], []
    for d in args.run_dirs:
        p = Path(d)
        try:
            m = json.loads((p / "metrics.json").read_text())
            if m.get("command") not in ("train", "eval"):
                raise ValueError(f"not a train/eval run ({m.get('command')})")
            rows.append(_row_from_metrics(p.name, m))
        except (OSError, ValueError, KeyError, TypeError) as exc:
            print(f"warning: skipping {d}: {exc}", file=sys.stderr)
            bad.append({"run": p.name, "status": "corrupt"})
    rows.sort(key=lambda r: (r["gflops"] if r["gflops"] is not None else math.inf, r["run"]))
    rows += sorted(bad, key=lambda r: r["run"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    digest = write_report_csv(out / "report.csv", rows)
    width = max(len(c) for c in REPORT_COLUMNS)
    table = [" ".join(c.rjust(min(width, 14)) for c in REPORT_COLUMNS)]
    for r in rows:
        table.append(" ".join(_fmt(r.get(c)).rjust(min(width, 14)) for c in REPORT_COLUMNS))
    (out / "report.txt").write_text("\n".join(table) + "\n")
    print("\n".join(table))
    write_metrics(out, {"command": "report", "runs": len(rows), "corrupt": len(bad), "csv_sha256": digest,
                        "rows": rows})
    return 0


# ----------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pvt", description="Point-to-voxel transformer toy detection harness.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="flat key=value config file")
            sp.add_argument("--set", action="append", metavar="K=V", help="override a config key (repeatable)")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", required=True, help="output directory")

    tr = sub.add_parser("train", help="train on streaming synthetic scenes, then evaluate")
    common(tr)
    tr.set_defaults(fn=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on the held-out scene seeds")
    common(ev)
    ev.add_argument("--checkpoint", required=True)
    ev.set_defaults(fn=cmd_eval)

    bv = sub.add_parser("bench-voxelize", help="fixed vs dynamic voxelization benchmark")
    common(bv, config=False)
    bv.add_argument("--preset", default="tiny", choices=sorted(PRESETS))
    bv.add_argument("--repeats", type=int, default=None)
    bv.set_defaults(fn=cmd_bench)

    sa = sub.add_parser("sample-arch", help="sample architectures from the point or voxel space")
    common(sa, config=False)
    sa.add_argument("--space", choices=("point", "voxel"), default="voxel")
    sa.add_argument("--count", type=int, default=5)
    sa.add_argument("--enumerate", action="store_true", help="point space: list every variant")
    sa.add_argument("--no-check", action="store_true", help="skip the forward shape check")
    sa.set_defaults(fn=cmd_sample_arch)

    rp = sub.add_parser("report", help="consolidate run directories into report.csv")
    rp.add_argument("run_dirs", nargs="*")
    rp.add_argument("--out", required=True)
    rp.set_defaults(fn=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ArchError, FormatError) as exc:
        print(f"pvt {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
