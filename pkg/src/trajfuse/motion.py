"""Skeleton sequences, velocity transforms, windowing, mocap CSV and synthetic motion."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import Tensor, add, cumsum_channels


class MotionDataError(ValueError):
    """Malformed or unusable motion data."""


H36M_17_NAMES = [
    "hip", "rhip", "rknee", "rfoot", "lhip", "lknee", "lfoot", "spine", "thorax",
    "neck", "head", "lshoulder", "lelbow", "lwrist", "rshoulder", "relbow", "rwrist",
]
H36M_17_PARENTS = [-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15]


@dataclass(frozen=True)
class SkeletonSpec:
    names: tuple[str, ...]
    parents: tuple[int, ...]
    unit: str = "mm"

    def __post_init__(self):
        n = len(self.names)
        if n < 1 or len(self.parents) != n:
            raise MotionDataError(f"skeleton needs matching names/parents, got {n} and {len(self.parents)}")
        roots = 0
        for j, p in enumerate(self.parents):
            if not -1 <= p < n or p == j:
                raise MotionDataError(f"joint {j} has invalid parent {p}")
            roots += p == -1
        if roots < 1:
            raise MotionDataError("skeleton has no root joint")

    @property
    def joint_count(self) -> int:
        return len(self.names)

    def bones(self) -> list[tuple[int, int]]:
        return [(p, j) for j, p in enumerate(self.parents) if p >= 0]


def default_skeleton(n: int) -> SkeletonSpec:
    """17-joint H3.6M-style layout when ``n == 17``, otherwise a binary tree."""
    if n == 17:
        return SkeletonSpec(tuple(H36M_17_NAMES), tuple(H36M_17_PARENTS))
    return SkeletonSpec(tuple(f"j{j}" for j in range(n)), tuple((j - 1) // 2 for j in range(n)))


@dataclass(frozen=True)
class MotionSequence:
    frames: np.ndarray  # [F, N, 3] mm
    fps: float
    seq_id: str = "0"

    def __post_init__(self):
        frames = np.array(self.frames, dtype=np.float64)
        if frames.ndim != 3 or frames.shape[2] != 3 or frames.shape[0] < 1 or frames.shape[1] < 1:
            raise MotionDataError(f"frames must be [F>=1, N>=1, 3], got {frames.shape}")
        if not np.isfinite(frames).all():
            raise MotionDataError("frames contain non-finite coordinates")
        if not self.fps > 0:
            raise MotionDataError(f"fps must be positive, got {self.fps}")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_joints(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class VelocitySequence:
    deltas: np.ndarray  # [F-1, N, 3] mm/frame


@dataclass(frozen=True)
class SampleWindow:
    input: np.ndarray   # [T, N, 3]
    target: np.ndarray  # [T_out, N, 3]
    source_id: str
    start: int

    @property
    def window_id(self) -> str:
        return f"{self.source_id}:{self.start}"


def compute_velocity(seq: MotionSequence) -> VelocitySequence:
    if seq.n_frames < 2:
        raise MotionDataError("velocity needs at least 2 frames")
    return VelocitySequence(seq.frames[1:] - seq.frames[:-1])


def recover_positions(vel, anchor):
    """Cumulative sum of velocities added onto ``anchor``.

    ndarray inputs: ``vel`` [T_out, N, 3], ``anchor`` [N, 3].  Tensor inputs
    (possibly batched, channel axis -3) stay on the tape.
    """
    if isinstance(vel, Tensor) or isinstance(anchor, Tensor):
        vel = vel if isinstance(vel, Tensor) else Tensor(vel)
        anchor = anchor if isinstance(anchor, Tensor) else Tensor(anchor)
        if anchor.shape[-2:] != vel.shape[-2:]:
            raise MotionDataError(f"anchor {anchor.shape} does not match velocities {vel.shape}")
        return add(cumsum_channels(vel), anchor)
    vel = np.asarray(vel, dtype=np.float64)
    anchor = np.asarray(anchor, dtype=np.float64)
    if vel.ndim != 3 or anchor.shape != vel.shape[1:]:
        raise MotionDataError(f"anchor {anchor.shape} does not match velocities {vel.shape}")
    return anchor[None] + np.cumsum(vel, axis=0)


def downsample(seq: MotionSequence, factor: int) -> MotionSequence:
    if factor < 1:
        raise MotionDataError(f"downsample factor must be >= 1, got {factor}")
    if factor == 1:
        return seq
    return MotionSequence(seq.frames[::factor], seq.fps / factor, seq.seq_id)


def window_dataset(seq: MotionSequence, t_in: int, t_out: int, stride: int = 1) -> list[SampleWindow]:
    if stride < 1:
        raise MotionDataError(f"stride must be >= 1, got {stride}")
    if t_in < 1 or t_out < 1:
        raise MotionDataError("window lengths must be positive")
    span = t_in + t_out
    if seq.n_frames < span:
        raise MotionDataError(f"sequence {seq.seq_id!r} has {seq.n_frames} frames, need {span}")
    count = (seq.n_frames - span) // stride + 1
    out = []
    for k in range(count):
        s = k * stride
        out.append(SampleWindow(seq.frames[s : s + t_in], seq.frames[s + t_in : s + span], seq.seq_id, s))
    return out


# ---------------------------------------------------------------------------
# mocap CSV
# ---------------------------------------------------------------------------

MAGIC = "#mocap-csv v1"


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_mocap_csv(path, sequences: Sequence[MotionSequence], skeleton: SkeletonSpec) -> None:
    if not sequences:
        raise MotionDataError("nothing to write")
    fps = sequences[0].fps
    n = skeleton.joint_count
    lines = [MAGIC, f"joints={n},fps={_fmt(fps)},unit={skeleton.unit}",
             ",".join(skeleton.names), ",".join(str(p) for p in skeleton.parents)]
    for seq in sequences:
        if seq.n_joints != n:
            raise MotionDataError(f"sequence {seq.seq_id!r} has {seq.n_joints} joints, skeleton has {n}")
        if seq.fps != fps:
            raise MotionDataError("all sequences in one file must share fps")
        lines.append(f"#sequence {seq.seq_id}")
        for frame in seq.frames:
            lines.append(",".join(_fmt(v) for v in frame.reshape(-1)))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_header(line: str, lineno: int) -> tuple[int, float, str]:
    fields = {}
    for part in line.split(","):
        key, sep, val = part.partition("=")
        if not sep:
            raise MotionDataError(f"line {lineno}: malformed header field {part!r}")
        fields[key.strip()] = val.strip()
    try:
        n = int(fields["joints"])
        fps = float(fields["fps"])
    except (KeyError, ValueError) as e:
        raise MotionDataError(f"line {lineno}: header needs integer joints= and numeric fps=") from e
    unit = fields.get("unit", "mm")
    if unit != "mm":
        raise MotionDataError(f"line {lineno}: unsupported unit {unit!r}")
    if n < 1 or not (fps > 0 and math.isfinite(fps)):
        raise MotionDataError(f"line {lineno}: joints must be >= 1 and fps > 0")
    return n, fps, unit


def load_mocap_csv(path) -> tuple[list[MotionSequence], SkeletonSpec]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise MotionDataError(f"cannot read {path}: {e.strerror or e}") from e
    lines = text.split("\n")
    if len(lines) < 4:
        raise MotionDataError(f"line {len(lines)}: truncated header")
    if lines[0].strip() != MAGIC:
        raise MotionDataError(f"line 1: expected {MAGIC!r}")
    n, fps, unit = _parse_header(lines[1], 2)
    names = [s.strip() for s in lines[2].split(",")]
    if len(names) != n:
        raise MotionDataError(f"line 3: expected {n} joint names, got {len(names)}")
    try:
        parents = [int(s) for s in lines[3].split(",")]
    except ValueError as e:
        raise MotionDataError("line 4: parent indices must be integers") from e
    if len(parents) != n:
        raise MotionDataError(f"line 4: expected {n} parent indices, got {len(parents)}")
    skeleton = SkeletonSpec(tuple(names), tuple(parents), unit)

    blocks: list[tuple[str, int, list[list[float]]]] = []
    current: tuple[str, int, list[list[float]]] | None = None
    for lineno, raw in enumerate(lines[4:], start=5):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#sequence"):
            sid = line[len("#sequence"):].strip()
            if not sid:
                raise MotionDataError(f"line {lineno}: sequence marker without id")
            current = (sid, lineno, [])
            blocks.append(current)
            continue
        if line.startswith("#"):
            raise MotionDataError(f"line {lineno}: unexpected directive {line!r}")
        cells = line.split(",")
        if len(cells) != 3 * n:
            raise MotionDataError(f"line {lineno}: expected {3 * n} values, got {len(cells)}")
        try:
            row = [float(c) for c in cells]
        except ValueError as e:
            raise MotionDataError(f"line {lineno}: non-numeric cell ({e})") from e
        if not all(math.isfinite(v) for v in row):
            raise MotionDataError(f"line {lineno}: non-finite coordinate")
        if current is None:
            current = ("0", lineno, [])
            blocks.append(current)
        current[2].append(row)

    if not blocks or all(not rows for _, _, rows in blocks):
        raise MotionDataError(f"{path}: no frames")
    seqs = []
    for sid, lineno, rows in blocks:
        if not rows:
            raise MotionDataError(f"line {lineno}: sequence {sid!r} has no frames")
        seqs.append(MotionSequence(np.array(rows).reshape(len(rows), n, 3), fps, sid))
    return seqs, skeleton


# ---------------------------------------------------------------------------
# synthetic motion
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthParams:
    rest_offsets: np.ndarray          # [N, 3] mm
    amplitude: np.ndarray             # [N, 3] mm
    frequency: np.ndarray             # [N] Hz
    phase: np.ndarray                 # [N, 3] rad
    drift: tuple[float, float, float] = (0.0, 0.0, 0.0)  # mm/frame
    noise_std: float = 0.0
    duration: int = 50
    fps: float = 25.0
    seed: int = 0
    seq_id: str = "synth"

    @property
    def joint_count(self) -> int:
        return np.shape(self.rest_offsets)[0]

    def validate(self, min_duration: int = 1) -> None:
        n = self.joint_count
        shapes = {
            "rest_offsets": (np.shape(self.rest_offsets), (n, 3)),
            "amplitude": (np.shape(self.amplitude), (n, 3)),
            "frequency": (np.shape(self.frequency), (n,)),
            "phase": (np.shape(self.phase), (n, 3)),
        }
        for name, (got, want) in shapes.items():
            if got != want:
                raise MotionDataError(f"SynthParams.{name} has shape {got}, expected {want}")
        if n < 1:
            raise MotionDataError("SynthParams needs at least one joint")
        if np.any(np.asarray(self.amplitude) < 0) or self.noise_std < 0:
            raise MotionDataError("amplitudes and noise std must be non-negative")
        if len(self.drift) != 3:
            raise MotionDataError("drift must be a 3-vector")
        if self.duration < max(1, min_duration):
            raise MotionDataError(f"duration {self.duration} shorter than required {min_duration}")
        if not self.fps > 0:
            raise MotionDataError("fps must be positive")


def generate_synthetic(params: SynthParams, min_duration: int = 1) -> MotionSequence:
    """rest + drift*f + amplitude*sin(2*pi*freq*f/fps + phase) + gaussian noise."""
    params.validate(min_duration)
    f = np.arange(params.duration, dtype=np.float64)[:, None, None]
    rest = np.asarray(params.rest_offsets, dtype=np.float64)[None]
    amp = np.asarray(params.amplitude, dtype=np.float64)[None]
    freq = np.asarray(params.frequency, dtype=np.float64)[None, :, None]
    phase = np.asarray(params.phase, dtype=np.float64)[None]
    drift = np.asarray(params.drift, dtype=np.float64)[None, None]
    frames = rest + drift * f + amp * np.sin(2.0 * np.pi * freq * f / params.fps + phase)
    if params.noise_std > 0:
        rng = np.random.default_rng(params.seed)
        frames = frames + rng.normal(0.0, params.noise_std, size=frames.shape)
    return MotionSequence(frames, params.fps, params.seq_id)


def random_synth_params(skeleton: SkeletonSpec, seed: int, duration: int = 50, fps: float = 25.0,
                        amplitude_mm: float = 60.0, freq_range=(0.5, 1.5), noise_std: float = 0.0,
                        drift=(0.0, 0.0, 0.0), bone_mm=(80.0, 200.0), seq_id: str | None = None) -> SynthParams:
    """Random periodic motion on ``skeleton``: bone lengths, per-joint sinusoids."""
    rng = np.random.default_rng(seed)
    n = skeleton.joint_count
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    bones = dirs * rng.uniform(*bone_mm, size=(n, 1))
    bones[np.asarray(skeleton.parents) < 0] = 0.0
    # walk each chain to the root; parents may be listed after children
    resolved = bones.copy()
    for j in range(n):
        p, hops = skeleton.parents[j], 0
        while p >= 0 and hops < n:
            resolved[j] += bones[p]
            p, hops = skeleton.parents[p], hops + 1
    amp = rng.uniform(0.2, 1.0, size=(n, 3)) * amplitude_mm
    freq = np.full(n, rng.uniform(*freq_range))  # shared gait frequency
    phase = rng.uniform(0, 2 * np.pi, size=(n, 3))
    return SynthParams(resolved, amp, freq, phase, tuple(float(d) for d in drift), noise_std,
                       duration, fps, seed, seq_id if seq_id is not None else f"synth{seed}")
