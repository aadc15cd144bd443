"""Experiment configs, the training loop and held-out evaluation."""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .arch import DEFAULTS as ARCH_DEFAULTS, ArchError, ArchSpec, parse_value
from .backbone import HEAD_STRIDE, LossWeights, decode_boxes
from .flops import SceneShape, count_flops
from .model import HEAD_NAMES, Detector, target_grid
from .optim import AdamWState, WarmupCosine, adamw_step
from .scenes import Scene, SceneGenConfig, evaluate_ap_multi, generate_scene, heading_mae, match_detections
from .voxelizer import PillarGridConfig

# Non-architecture keys with defaults. Architecture keys (point.*, backbone.*,
# head.*) live in the same flat file and default to arch.DEFAULTS.
RUN_DEFAULTS: dict[str, object] = {
    "seed": 0,
    "scene.preset": "default",
    "scene.extent": 8.0,
    "scene.objects_min": 1,
    "scene.objects_max": 4,
    "scene.points_min": 10,
    "scene.points_max": 120,
    "scene.background": 200,
    "scene.clutter_min": 0,
    "scene.clutter_max": 0,
    "scene.noise_std": 0.02,
    "grid.voxel_size": 0.32,
    "grid.cap_points": 32,
    "grid.max_voxels": 1024,
    "optim.steps": 2000,
    "optim.batch": 8,
    "optim.warmup_steps": 200,
    "optim.warmup_lr": 3e-4,
    "optim.peak_lr": 1.2e-3,
    "optim.final_lr": 0.0,
    "optim.weight_decay": 1e-4,
    "optim.beta1": 0.9,
    "optim.beta2": 0.999,
    "optim.grad_clip": 0.0,
    "loss.w_heatmap": 1.0,
    "loss.w_box": 1.0,
    "loss.w_seg": 1.0,
    "eval.scenes": 64,
    "eval.seed": 20_240_601,
    "eval.batch": 8,
    "eval.score_threshold": 0.3,
    "eval.iou": 0.3,
    "log.every": 50,
    "arch.strict": False,
}

SCENE_PRESETS: dict[str, dict[str, object]] = {
    "default": {},
    # Dense pillars on a smaller board. Both classes share one size and
    # height, so only the bright/dim mix tells them apart, and look-alike
    # clutter lacks the rim returns real objects have.
    "bottleneck": {
        "scene.extent": 6.4,
        "scene.objects_min": 2,
        "scene.objects_max": 3,
        "scene.points_min": 250,
        "scene.points_max": 450,
        "scene.background": 30,
        "scene.clutter_min": 1,
        "scene.clutter_max": 3,
    },
}

# per-preset scene-generator overrides that are not plain keys
_PRESET_GEN: dict[str, dict[str, object]] = {
    "default": {},
    "bottleneck": {
        "vehicle_size": ((0.75, 0.85), (0.75, 0.85)),
        "pedestrian_size": ((0.75, 0.85), (0.75, 0.85)),
        "height": (1.5, 1.5),
        "bright_fraction": (0.62, 0.38),
    },
}


class ConfigError(ValueError):
    """Unknown key or badly typed value in an experiment config."""


class DivergenceError(RuntimeError):
    def __init__(self, report: dict):
        super().__init__(f"loss became non-finite at step {report['divergence']['step']}")
        self.report = report


def _coerce(key: str, value, like):
    if isinstance(value, str):
        if isinstance(like, float):
            try:
                return float(value)
            except ValueError:
                raise ConfigError(f"{key}: expected a number, got {value!r}") from None
        try:
            return parse_value(key, value, like)
        except ArchError as exc:
            raise ConfigError(str(exc)) from None
    if isinstance(like, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    return value


@dataclass
class ExperimentConfig:
    values: dict[str, object]
    arch: ArchSpec

    @classmethod
    def from_mapping(cls, raw: Mapping[str, object]) -> "ExperimentConfig":
        """Validate every key before anything runs; presets fill in scene keys."""
        unknown = [k for k in raw if k not in RUN_DEFAULTS and k not in ARCH_DEFAULTS]
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        preset = str(raw.get("scene.preset", RUN_DEFAULTS["scene.preset"]))
        if preset not in SCENE_PRESETS:
            raise ConfigError(f"scene.preset must be one of {sorted(SCENE_PRESETS)}")
        vals = dict(RUN_DEFAULTS)
        vals.update(SCENE_PRESETS[preset])
        arch_vals = {}
        for k, v in raw.items():
            if k in ARCH_DEFAULTS:
                arch_vals[k] = v
            else:
                vals[k] = _coerce(k, v, RUN_DEFAULTS[k])
        try:
            arch = ArchSpec(arch_vals).validate(bool(vals["arch.strict"]))
        except ArchError as exc:
            raise ConfigError(str(exc)) from None
        cfg = cls(vals, arch)
        cfg._check()
        return cfg

    def _check(self) -> None:
        v = self.values
        for k in ("optim.steps", "eval.scenes", "log.every"):
            if v[k] < 0:
                raise ConfigError(f"{k} must be >= 0")
        for k in ("optim.batch", "eval.batch", "grid.cap_points", "grid.max_voxels"):
            if v[k] < 1:
                raise ConfigError(f"{k} must be >= 1")
        if v["grid.voxel_size"] <= 0 or v["scene.extent"] <= 0:
            raise ConfigError("grid.voxel_size and scene.extent must be > 0")
        if v["scene.objects_min"] > v["scene.objects_max"] or v["scene.points_min"] > v["scene.points_max"] \
                or v["scene.clutter_min"] > v["scene.clutter_max"]:
            raise ConfigError("scene ranges must satisfy min <= max")

    def __getitem__(self, key: str):
        return self.arch[key] if key in ARCH_DEFAULTS else self.values[key]

    def flat(self) -> dict[str, object]:
        return {**self.values, **dict(self.arch)}

    def scene_config(self) -> SceneGenConfig:
        v = self.values
        return SceneGenConfig(
            extent=v["scene.extent"],
            objects_per_scene=(v["scene.objects_min"], v["scene.objects_max"]),
            points_per_object=(v["scene.points_min"], v["scene.points_max"]),
            background_points=v["scene.background"],
            clutter_per_scene=(v["scene.clutter_min"], v["scene.clutter_max"]),
            noise_std=v["scene.noise_std"],
            **_PRESET_GEN[v["scene.preset"]],
        )

    def grid_config(self) -> PillarGridConfig:
        v = self.values
        half = v["scene.extent"] / 2
        n = int(math.ceil(v["scene.extent"] / v["grid.voxel_size"] - 1e-9))
        return PillarGridConfig((-half, -half), v["grid.voxel_size"], (n, n), v["grid.cap_points"],
                                v["grid.max_voxels"])

    def schedule(self) -> WarmupCosine:
        v = self.values
        return WarmupCosine(v["optim.warmup_lr"], v["optim.peak_lr"], v["optim.warmup_steps"],
                            max(1, v["optim.steps"]), v["optim.final_lr"])

    def loss_weights(self) -> LossWeights:
        v = self.values
        return LossWeights(v["loss.w_heatmap"], v["loss.w_box"], v["loss.w_seg"])


def scene_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint64)[0])


def producer_threads() -> int:
    try:
        return max(1, int(os.environ.get("PVT_THREADS", "1")))
    except ValueError:
        return 1


def make_scenes(cfg: SceneGenConfig, seeds: Sequence[int], threads: int = 1) -> list[Scene]:
    """Scenes for fixed per-scene seeds; thread count never changes the result."""
    if threads <= 1 or len(seeds) <= 1:
        return [generate_scene(cfg, s) for s in seeds]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(lambda s: generate_scene(cfg, s), seeds))


def train_seeds(run_seed: int, step: int, batch: int) -> list[int]:
    return [scene_seed(run_seed, 0, step, i) for i in range(batch)]


def eval_seeds(eval_seed: int, n: int) -> list[int]:
    return [scene_seed(eval_seed, 1, k) for k in range(n)]


def _finite(x: float) -> bool:
    return math.isfinite(x)


def grad_norm(params) -> float:
    return math.sqrt(sum(float((p.grad ** 2).sum()) for p in params if p.grad is not None))


@dataclass
class TrainResult:
    detector: Detector
    report: dict = field(default_factory=dict)


def train(cfg: ExperimentConfig, log=None) -> TrainResult:
    """Train on streaming synthetic scenes; aborts via DivergenceError on NaN/Inf."""
    v = cfg.values
    seed = v["seed"]
    grid = cfg.grid_config()
    scfg = cfg.scene_config()
    det = Detector.build(cfg.arch, grid, f=4, seed=seed, strict=bool(v["arch.strict"]))
    params = det.parameters()
    state = AdamWState.for_params(params)
    sched = cfg.schedule()
    weights = cfg.loss_weights()
    threads = producer_threads()
    losses: list[dict] = []
    t0 = time.perf_counter()
    steps = v["optim.steps"]
    for step in range(max(1, steps)):
        scenes = make_scenes(scfg, train_seeds(seed, step, v["optim.batch"]), threads)
        T.zero_grads(params)
        loss, parts = det.loss(scenes, weights)
        value = loss.item()
        rec = {"step": step, "loss": value, **parts}
        if not _finite(value):
            report = base_report(cfg, det)
            report["losses"] = losses + [rec]
            report["divergence"] = {"diverged": True, "step": step, "mode": cfg.arch["point.query"]}
            raise DivergenceError(report)
        if steps == 0:
            losses.append(rec)
            break
        T.backward(loss)
        grads = [p.grad for p in params]
        clip = v["optim.grad_clip"]
        if clip > 0:
            n = grad_norm(params)
            if n > clip:
                grads = [None if g is None else g * (clip / n) for g in grads]
        lr = sched(step)
        rec["lr"] = lr
        adamw_step(params, grads, state, lr, v["optim.beta1"], v["optim.beta2"], 1e-8, v["optim.weight_decay"])
        losses.append(rec)
        if log is not None and v["log.every"] and (step % v["log.every"] == 0 or step == steps - 1):
            log(f"step {step:5d}  loss {value:.4f}  lr {lr:.2e}")
    report = base_report(cfg, det)
    report["losses"] = losses
    report["initial_loss"] = losses[0]["loss"]
    report["final_loss"] = float(np.mean([r["loss"] for r in losses[-20:]]))
    report["timings"] = {"train_seconds": time.perf_counter() - t0}
    return TrainResult(det, report)


def base_report(cfg: ExperimentConfig, det: Detector) -> dict:
    grid = cfg.grid_config()
    shape = SceneShape(grid.grid_extent, n_voxels=grid.max_voxels, cap_points=grid.cap_points, f=4, batch=1)
    return {
        "seed": cfg.values["seed"],
        "arch": dict(cfg.arch),
        "arch_hash": cfg.arch.digest(),
        "config": cfg.flat(),
        "params": det.num_parameters(),
        "flops": count_flops(cfg.arch, shape),
        "divergence": {"diverged": False, "step": None, "mode": cfg.arch["point.query"]},
    }


def evaluate(det: Detector, cfg: ExperimentConfig) -> dict:
    """AP per class and heading error over the held-out seed range (no parameter updates)."""
    v = cfg.values
    scfg = cfg.scene_config()
    seeds = eval_seeds(v["eval.seed"], v["eval.scenes"])
    preds = {c: [] for c in HEAD_NAMES}
    truths = {c: [] for c in HEAD_NAMES}
    t0 = time.perf_counter()
    with T.no_grad():
        for i in range(0, len(seeds), v["eval.batch"]):
            scenes = make_scenes(scfg, seeds[i:i + v["eval.batch"]], producer_threads())
            out = det.forward(det.voxelize(scenes))
            for cls, o in out.items():
                tg = target_grid(det.grid, HEAD_STRIDE[cls])
                for b, s in enumerate(scenes):
                    preds[cls].append(decode_boxes(o.heatmap.data[b], o.box_reg.data[b], tg, cls,
                                                   v["eval.score_threshold"]))
                    truths[cls].append([bx for bx in s.boxes if bx.class_id == cls])
    ap, mae = {}, {}
    for cls, name in HEAD_NAMES.items():
        ap[name] = evaluate_ap_multi(preds[cls], truths[cls], v["eval.iou"])
        pairs = []
        for p, t in zip(preds[cls], truths[cls]):
            pairs += match_detections(p, t, v["eval.iou"])[1]
        mae[name] = heading_mae(pairs)
    vals = [a for a in ap.values() if not math.isnan(a)]
    return {
        "ap": ap,
        "mean_ap": float(np.mean(vals)) if vals else float("nan"),
        "heading_mae": mae,
        "eval_scenes": len(seeds),
        "timings": {"eval_seconds": time.perf_counter() - t0},
    }


def load_into(det: Detector, tensors: Mapping[str, np.ndarray]) -> None:
    """Copy checkpoint tensors into ``det``; mismatched names or shapes raise."""
    own = dict(det.named_parameters())
    missing = sorted(set(own) - set(tensors))
    extra = sorted(set(tensors) - set(own))
    bad = sorted(k for k in set(own) & set(tensors) if own[k].shape != tensors[k].shape)
    if missing or extra or bad:
        parts = []
        if missing:
            parts.append("missing: " + ", ".join(missing[:10]))
        if extra:
            parts.append("unexpected: " + ", ".join(extra[:10]))
        if bad:
            parts.append("shape mismatch: " + ", ".join(bad[:10]))
        raise ConfigError("checkpoint does not match the architecture; " + "; ".join(parts))
    for k, p in own.items():
        p.data[...] = tensors[k]
