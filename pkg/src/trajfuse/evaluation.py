"""MPJPE horizon tables, simple baselines, the ablation harness and SVG pose plots."""
from __future__ import annotations

import logging
import math
import time
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .motion import MotionSequence, SampleWindow, SkeletonSpec
from .network import FUSION_MODES, ModelConfig, TwoStreamParams, predict
from .tensor import NonFiniteError
from .training import TrainConfig, stack_windows, train

log = logging.getLogger(__name__)

DEFAULT_HORIZONS = (80, 160, 320, 400)
DEPTH_VARIANTS = ("tst-6", "tst-11", "tst-16", "tst-21")
DEFAULT_VARIANTS = DEPTH_VARIANTS + FUSION_MODES


def mpjpe_metric(pred, target) -> np.ndarray:
    """Mean (over joints) unsquared Euclidean error per frame, mm.

    ``[T, N, 3]`` -> ``[T]``; a leading batch axis is kept.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim < 3 or pred.shape[-1] != 3:
        raise ValueError(f"pred {pred.shape} and target {target.shape} must both be [..., T, N, 3]")
    return np.linalg.norm(pred - target, axis=-1).mean(axis=-1)


def horizons_to_frames(horizons_ms: Sequence[float], fps: float, t_out: int | None = None) -> list[int]:
    """1-based predicted-frame index per horizon, rounding half up."""
    if not fps > 0:
        raise ValueError(f"fps must be positive, got {fps}")
    out = []
    for ms in horizons_ms:
        if not ms > 0:
            raise ValueError(f"horizons must be positive, got {ms}")
        idx = math.floor(ms * fps / 1000.0 + 0.5)
        if idx < 1:
            raise ValueError(f"{ms} ms is shorter than one frame at {fps} fps")
        if t_out is not None and idx > t_out:
            raise ValueError(f"{ms} ms maps to frame {idx}, beyond the {t_out} predicted frames")
        out.append(idx)
    return out


def baseline_predict(kind: str, inputs, t_out: int) -> np.ndarray:
    """``zero-velocity`` repeats the last pose; ``constant-velocity`` extends the last step."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim not in (3, 4):
        raise ValueError(f"inputs must be [T, N, 3] or [B, T, N, 3], got {x.shape}")
    last = x[..., -1:, :, :]
    reps = (1,) * (x.ndim - 3) + (t_out, 1, 1)
    if kind == "zero-velocity":
        return np.tile(last, reps)
    if kind == "constant-velocity":
        if x.shape[-3] < 2:
            raise ValueError("constant-velocity baseline needs at least 2 input frames")
        step = last - x[..., -2:-1, :, :]
        k = np.arange(1, t_out + 1, dtype=np.float64).reshape((t_out, 1, 1))
        return last + k * step
    raise ValueError(f"unknown baseline {kind!r}")


@dataclass(frozen=True)
class HorizonRow:
    horizon_ms: float
    frame: int
    mpjpe_mm: float
    count: int


@dataclass
class HorizonTable:
    label: str
    rows: list[HorizonRow]

    def error_at(self, horizon_ms: float) -> float:
        for r in self.rows:
            if r.horizon_ms == horizon_ms:
                return r.mpjpe_mm
        raise KeyError(horizon_ms)

    def csv_rows(self) -> list[str]:
        return [f"{self.label},{_num(r.horizon_ms)},{r.frame},{r.mpjpe_mm!r},{r.count}" for r in self.rows]


def _num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def evaluate_predictions(label: str, preds: np.ndarray, targets: np.ndarray,
                         horizons_ms: Sequence[float], fps: float) -> HorizonTable:
    """Horizon table from ``[B, T_out, N, 3]`` predictions; windows reduced in order."""
    frames = horizons_to_frames(sorted(horizons_ms), fps, targets.shape[-3])
    per = mpjpe_metric(preds, targets)  # [B, T_out]
    acc = np.zeros(per.shape[1])
    for row in per:  # fixed reduction order
        acc += row
    mean = acc / per.shape[0]
    rows = [HorizonRow(ms, f, float(mean[f - 1]), per.shape[0]) for ms, f in zip(sorted(horizons_ms), frames)]
    return HorizonTable(label, rows)


def evaluate_model(params: TwoStreamParams, windows: Sequence[SampleWindow], horizons_ms, fps,
                   label: str = "model", batch: int = 64) -> HorizonTable:
    x, y = stack_windows(windows)
    preds = np.concatenate([predict(params, x[s : s + batch]) for s in range(0, len(x), batch)])
    return evaluate_predictions(label, preds, y, horizons_ms, fps)


def evaluate_baseline(kind: str, windows: Sequence[SampleWindow], horizons_ms, fps) -> HorizonTable:
    x, y = stack_windows(windows)
    return evaluate_predictions(kind, baseline_predict(kind, x, y.shape[1]), y, horizons_ms, fps)


def write_tables_csv(path, tables: Sequence[HorizonTable]) -> None:
    lines = ["variant,horizon_ms,frame,mpjpe_mm,count"]
    for t in tables:
        lines += t.csv_rows()
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def format_tables(tables: Sequence[HorizonTable], failed: dict[str, str] | None = None) -> str:
    """Aligned text table, one row per variant, one column per horizon."""
    horizons = sorted({r.horizon_ms for t in tables for r in t.rows})
    head = ["variant"] + [f"{_num(h)}ms" for h in horizons]
    body = []
    for t in tables:
        vals = {r.horizon_ms: f"{r.mpjpe_mm:.2f}" for r in t.rows}
        body.append([t.label] + [vals.get(h, "-") for h in horizons])
    for label, why in (failed or {}).items():
        body.append([label] + ["FAILED"] * len(horizons))
    widths = [max(len(r[i]) for r in [head] + body) for i in range(len(head))]
    fmt = lambda r: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
    return "\n".join([fmt(head), fmt(["-" * w for w in widths])] + [fmt(r) for r in body])


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

class BudgetExceeded(RuntimeError):
    pass


def variant_config(base: ModelConfig, variant: str) -> ModelConfig:
    if variant.startswith("tst-"):
        try:
            depth = int(variant[4:])
        except ValueError:
            raise ValueError(f"bad depth variant {variant!r}") from None
        return replace(base, depth=depth, fusion="temporal-fusion")
    if variant in FUSION_MODES:
        return replace(base, fusion=variant)
    raise ValueError(f"unknown variant {variant!r}; expected tst-<depth> or one of {FUSION_MODES}")


@dataclass
class AblationReport:
    tables: dict[str, HorizonTable] = field(default_factory=dict)
    failed: dict[str, str] = field(default_factory=dict)
    baselines: dict[str, HorizonTable] = field(default_factory=dict)
    train_window_ids: list[str] = field(default_factory=list)
    eval_window_ids: list[str] = field(default_factory=list)

    def all_tables(self) -> list[HorizonTable]:
        return list(self.tables.values()) + [
            HorizonTable(f"baseline:{k}", t.rows) for k, t in self.baselines.items()
        ]

    def write_csv(self, path) -> None:
        lines = ["variant,horizon_ms,frame,mpjpe_mm,count"]
        for t in self.all_tables():
            lines += t.csv_rows()
        for label in self.failed:
            lines.append(f"{label},,,nan,0")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    def to_text(self) -> str:
        return format_tables(self.all_tables(), self.failed)


def run_ablation(train_windows: Sequence[SampleWindow], eval_windows: Sequence[SampleWindow],
                 variants: Sequence[str], base: ModelConfig, tcfg: TrainConfig,
                 horizons_ms: Sequence[float] = DEFAULT_HORIZONS, fps: float = 25.0,
                 max_seconds: float | None = None,
                 progress: Callable[[str], None] | None = None) -> AblationReport:
    """Train every variant from the same seeds on the same windows; one table each."""
    if not variants:
        raise ValueError("no ablation variants given")
    if not train_windows or not eval_windows:
        raise ValueError("ablation needs non-empty train and eval windows")
    horizons_to_frames(horizons_ms, fps, base.t_out)  # fail fast
    configs = {v: variant_config(base, v) for v in variants}
    report = AblationReport(
        train_window_ids=[w.window_id for w in train_windows],
        eval_window_ids=[w.window_id for w in eval_windows],
    )
    for kind in ("zero-velocity", "constant-velocity"):
        report.baselines[kind] = evaluate_baseline(kind, eval_windows, horizons_ms, fps)
    for v, cfg in configs.items():
        if progress:
            progress(v)
        t0 = time.perf_counter()

        def guard(step, loss):
            if max_seconds is not None and time.perf_counter() - t0 > max_seconds:
                raise BudgetExceeded(f"exceeded {max_seconds}s at step {step}")

        try:
            params, _ = train(cfg, train_windows, tcfg, on_step=guard)
            table = evaluate_model(params, eval_windows, horizons_ms, fps, label=v)
        except (NonFiniteError, BudgetExceeded) as e:
            log.warning("variant %s failed: %s", v, e)
            report.failed[v] = str(e)
            continue
        report.tables[v] = table
    return report


# ---------------------------------------------------------------------------
# SVG rendering
# ---------------------------------------------------------------------------

_AXES = {"x": 0, "y": 1, "z": 2}


def render_pose_svg(seq: MotionSequence, skeleton: SkeletonSpec, frames: Sequence[int], path,
                    pred: MotionSequence | None = None, plane: str = "xz",
                    panel: float = 200.0) -> None:
    """Side-by-side orthographic stick figures, one panel per frame index.

    Ground truth is drawn in dark grey; ``pred`` (same frame indexing) in red.
    """
    frames = list(frames)
    if not frames:
        raise ValueError("no frames to render")
    if len(plane) != 2 or any(c not in _AXES for c in plane) or plane[0] == plane[1]:
        raise ValueError(f"plane must name two distinct axes, got {plane!r}")
    if seq.n_joints != skeleton.joint_count:
        raise ValueError("sequence and skeleton disagree on joint count")
    seqs = [(seq, "#333333")] + ([(pred, "#d62728")] if pred is not None else [])
    for s, _ in seqs:
        for f in frames:
            if not 0 <= f < s.n_frames:
                raise IndexError(f"frame {f} out of range for {s.n_frames}-frame sequence")
    u, v = _AXES[plane[0]], _AXES[plane[1]]
    pts = np.concatenate([s.frames[frames][..., [u, v]].reshape(-1, 2) for s, _ in seqs])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = float(max(hi[0] - lo[0], hi[1] - lo[1], 1e-9))
    margin = 10.0
    sc = (panel - 2 * margin) / span

    svg = ET.Element("svg", xmlns="http://www.w3.org/2000/svg",
                     width=f"{panel * len(frames):g}", height=f"{panel:g}")
    for col, f in enumerate(frames):
        g = ET.SubElement(svg, "g", transform=f"translate({col * panel:g},0)")
        for s, colour in seqs:
            pose = s.frames[f]
            for a, b in skeleton.bones():
                x1 = margin + (pose[a, u] - lo[0]) * sc
                x2 = margin + (pose[b, u] - lo[0]) * sc
                y1 = panel - margin - (pose[a, v] - lo[1]) * sc  # svg y grows downward
                y2 = panel - margin - (pose[b, v] - lo[1]) * sc
                ET.SubElement(g, "line", x1=f"{x1:.2f}", y1=f"{y1:.2f}", x2=f"{x2:.2f}", y2=f"{y2:.2f}",
                              stroke=colour, **{"stroke-width": "2"})
    data = ET.tostring(svg, encoding="unicode")
    try:
        Path(path).write_text('<?xml version="1.0" encoding="UTF-8"?>\n' + data + "\n", encoding="utf-8")
    except OSError as e:
        raise OSError(f"cannot write {path}: {e.strerror or e}") from e
