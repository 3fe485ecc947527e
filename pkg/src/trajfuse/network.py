"""Two-stream (position + velocity) trajectory network with temporal fusion.

Tensors are laid out time-as-channel: a pose sequence is ``[T, N, 3]``
(optionally batched ``[B, T, N, 3]``) and every TST block convolves over the
``N x 3`` joints-by-coordinates plane.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator

import numpy as np

from .motion import recover_positions
from .tensor import (
    ShapeError,
    Tensor,
    add,
    concat_channels,
    conv2d,
    dropout,
    leaky_relu,
    slice_channels,
    sub,
)

FUSION_MODES = ("temporal-fusion", "p-only", "v-only", "addition", "naive-concat")
SKIP_EVERY = 5


@dataclass(frozen=True)
class ModelConfig:
    n_joints: int
    t_in: int = 10
    t_out: int = 10
    hidden: int = 64
    slope: float = 0.2
    dropout: float = 0.1
    seed: int = 0
    depth: int = 11
    fusion: str = "temporal-fusion"

    def __post_init__(self):
        if self.n_joints < 1:
            raise ValueError(f"n_joints must be >= 1, got {self.n_joints}")
        if self.t_in < 2:
            raise ValueError(f"t_in must be >= 2 for the velocity stream, got {self.t_in}")
        if self.t_out < 1:
            raise ValueError(f"t_out must be >= 1, got {self.t_out}")
        if self.hidden < 1 or self.depth < 1:
            raise ValueError("hidden width and depth must be >= 1")
        if not 0 <= self.slope < 1 or not 0 <= self.dropout < 1:
            raise ValueError("slope and dropout must lie in [0, 1)")
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {self.fusion!r}; choose from {FUSION_MODES}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**d)


def skip_topology(depth: int) -> tuple[tuple[int, int], ...]:
    """1x1 residual links among input (0), every 5th layer, and the last layer.

    Ordered by destination then source; depth 11 gives
    (0,5) (0,10) (5,10) (0,11) (5,11) (10,11).
    """
    nodes = [0] + list(range(SKIP_EVERY, depth, SKIP_EVERY)) + [depth]
    return tuple((s, d) for d in nodes[1:] for s in nodes if s < d)


@dataclass
class TSTParams:
    c_in: int
    c_out: int
    hidden: int
    kernels: list[Tensor]
    biases: list[Tensor]
    skip_kernels: list[Tensor]
    skip_biases: list[Tensor]

    @property
    def depth(self) -> int:
        return len(self.kernels)

    @property
    def skips(self) -> tuple[tuple[int, int], ...]:
        return skip_topology(self.depth)

    def channels(self, node: int) -> int:
        if node == 0:
            return self.c_in
        return self.c_out if node == self.depth else self.hidden

    def tensors(self) -> Iterator[Tensor]:
        for k, b in zip(self.kernels, self.biases):
            yield k
            yield b
        for k, b in zip(self.skip_kernels, self.skip_biases):
            yield k
            yield b

    @classmethod
    def shapes(cls, c_in: int, c_out: int, hidden: int, depth: int) -> list[tuple[int, ...]]:
        """Canonical (kernel, bias) shape list: layers 1..depth, then skips."""
        ch = lambda n: c_in if n == 0 else (c_out if n == depth else hidden)
        out = []
        for k in range(1, depth + 1):
            out += [(ch(k), ch(k - 1), 3, 3), (ch(k),)]
        for s, d in skip_topology(depth):
            out += [(ch(d), ch(s), 1, 1), (ch(d),)]
        return out

    @classmethod
    def from_tensors(cls, c_in, c_out, hidden, depth, tensors: list[Tensor]) -> "TSTParams":
        n_layers = 2 * depth
        layer, skip = tensors[:n_layers], tensors[n_layers:]
        return cls(c_in, c_out, hidden, layer[0::2], layer[1::2], skip[0::2], skip[1::2])


@dataclass
class TwoStreamParams:
    config: ModelConfig
    p_tst: TSTParams
    v_tst: TSTParams
    selector_kernels: list[Tensor]
    selector_biases: list[Tensor]
    reinf_tst: TSTParams
    # only for the naive-concat ablation: one 1x1 conv over all 2*T_out channels
    mixer: tuple[Tensor, Tensor] | None = None

    def tensors(self) -> list[Tensor]:
        out = list(self.p_tst.tensors()) + list(self.v_tst.tensors())
        for k, b in zip(self.selector_kernels, self.selector_biases):
            out += [k, b]
        out += list(self.reinf_tst.tensors())
        if self.mixer is not None:
            out += list(self.mixer)
        return out

    def groups(self) -> dict[str, list[Tensor]]:
        return {
            "p_tst": list(self.p_tst.tensors()),
            "v_tst": list(self.v_tst.tensors()),
            "selectors": [t for pair in zip(self.selector_kernels, self.selector_biases) for t in pair],
            "reinf_tst": list(self.reinf_tst.tensors()),
            "mixer": list(self.mixer) if self.mixer is not None else [],
        }


def param_shapes(cfg: ModelConfig) -> list[tuple[int, ...]]:
    """Shapes of :meth:`TwoStreamParams.tensors` in canonical order."""
    T, To, H, D = cfg.t_in, cfg.t_out, cfg.hidden, cfg.depth
    shapes = TSTParams.shapes(T, To, H, D) + TSTParams.shapes(T - 1, To, H, D)
    shapes += [(1, 2, 1, 1), (1,)] * To
    shapes += TSTParams.shapes(To, To, H, D)
    if cfg.fusion == "naive-concat":
        shapes += [(To, 2 * To, 1, 1), (To,)]
    return shapes


def params_from_arrays(cfg: ModelConfig, arrays: list[np.ndarray]) -> TwoStreamParams:
    shapes = param_shapes(cfg)
    if len(arrays) != len(shapes):
        raise ShapeError(f"expected {len(shapes)} parameter arrays, got {len(arrays)}")
    tensors = []
    for a, s in zip(arrays, shapes):
        if np.shape(a) != s:
            raise ShapeError(f"parameter shape {np.shape(a)} != expected {s}")
        tensors.append(Tensor(a, requires_grad=True))
    T, To, H, D = cfg.t_in, cfg.t_out, cfg.hidden, cfg.depth
    n_tst = lambda: 2 * (D + len(skip_topology(D)))
    i = 0
    p = TSTParams.from_tensors(T, To, H, D, tensors[i : i + n_tst()]); i += n_tst()
    v = TSTParams.from_tensors(T - 1, To, H, D, tensors[i : i + n_tst()]); i += n_tst()
    sel = tensors[i : i + 2 * To]; i += 2 * To
    r = TSTParams.from_tensors(To, To, H, D, tensors[i : i + n_tst()]); i += n_tst()
    mixer = (tensors[i], tensors[i + 1]) if cfg.fusion == "naive-concat" else None
    return TwoStreamParams(cfg, p, v, sel[0::2], sel[1::2], r, mixer)


def init_params(cfg: ModelConfig) -> TwoStreamParams:
    """Kernels ~ U(-sqrt(1/fan_in), +sqrt(1/fan_in)); biases zero."""
    rng = np.random.default_rng(cfg.seed)
    arrays = []
    for s in param_shapes(cfg):
        if len(s) == 4:
            bound = np.sqrt(1.0 / (s[1] * s[2] * s[3]))
            arrays.append(rng.uniform(-bound, bound, size=s))
        else:
            arrays.append(np.zeros(s))
    return params_from_arrays(cfg, arrays)


def zero_params(cfg: ModelConfig) -> TwoStreamParams:
    return params_from_arrays(cfg, [np.zeros(s) for s in param_shapes(cfg)])


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def tst_forward(x: Tensor, p: TSTParams, training: bool = False, slope: float = 0.2,
                rate: float = 0.0, rng: np.random.Generator | None = None) -> Tensor:
    """3x3 same-padding conv stack with 1x1 residual skips; last layer linear."""
    if x.shape[-3] != p.c_in:
        raise ShapeError(f"TST expects {p.c_in} input channels, got {x.shape}")
    depth = p.depth
    skips = p.skips
    saved = {0: x}
    h = x
    for k in range(1, depth + 1):
        z = conv2d(h, p.kernels[k - 1], p.biases[k - 1], stride=1, padding=1)
        for idx, (s, d) in enumerate(skips):
            if d == k:
                z = add(z, conv2d(saved[s], p.skip_kernels[idx], p.skip_biases[idx]))
        if k < depth:
            h = dropout(leaky_relu(z, slope), rate, training, rng)
        else:
            h = z
        saved[k] = h
    return h


def _as_input(positions) -> Tensor:
    return positions if isinstance(positions, Tensor) else Tensor(positions)


def _check_plane(x: Tensor, cfg: ModelConfig, channels: int, what: str):
    if x.ndim not in (3, 4) or x.shape[-3:] != (channels, cfg.n_joints, 3):
        raise ShapeError(f"{what}: expected [..., {channels}, {cfg.n_joints}, 3], got {x.shape}")


def pstream_forward(positions, p: TSTParams, training: bool = False, slope: float = 0.2,
                    rate: float = 0.0, rng=None) -> Tensor:
    x = _as_input(positions)
    if x.shape[-3] != p.c_in:
        raise ShapeError(f"P-stream expects {p.c_in} frames, got {x.shape}")
    return tst_forward(x, p, training, slope, rate, rng)


def velocities(positions: Tensor) -> Tensor:
    t = positions.shape[-3]
    if t < 2:
        raise ShapeError("velocity stream needs at least 2 input frames")
    return sub(slice_channels(positions, 1, t), slice_channels(positions, 0, t - 1))


def vstream_forward(positions, p: TSTParams, training: bool = False, slope: float = 0.2,
                    rate: float = 0.0, rng=None) -> Tensor:
    """Predict per-frame displacements, then integrate from the last observed pose."""
    x = _as_input(positions)
    t = x.shape[-3]
    if t < 2:
        raise ShapeError("velocity stream needs at least 2 input frames")
    if t - 1 != p.c_in:
        raise ShapeError(f"V-stream expects {p.c_in + 1} frames, got {x.shape}")
    vel_pred = tst_forward(velocities(x), p, training, slope, rate, rng)
    return recover_positions(vel_pred, slice_channels(x, t - 1, t))


def temporal_concat(p_pred: Tensor, v_pred: Tensor, kernels, biases) -> Tensor:
    """Per-timestep [p_i, v_i] -> own 1x1 selector -> restack in time order."""
    if p_pred.shape != v_pred.shape:
        raise ShapeError(f"stream outputs differ: {p_pred.shape} vs {v_pred.shape}")
    t_out = p_pred.shape[-3]
    if len(kernels) != t_out or len(biases) != t_out:
        raise ShapeError(f"need {t_out} selectors, got {len(kernels)}")
    steps = []
    for i in range(t_out):
        pair = concat_channels([slice_channels(p_pred, i, i + 1), slice_channels(v_pred, i, i + 1)])
        steps.append(conv2d(pair, kernels[i], biases[i]))
    return concat_channels(steps)


def temporal_fusion(p_pred: Tensor, v_pred: Tensor, params: TwoStreamParams, training: bool = False,
                    rng=None, bypass_reinforcement: bool = False) -> tuple[Tensor, Tensor]:
    """Returns ``(final, pre_reinforcement)``."""
    pre = temporal_concat(p_pred, v_pred, params.selector_kernels, params.selector_biases)
    if bypass_reinforcement:
        return pre, pre
    cfg = params.config
    return tst_forward(pre, params.reinf_tst, training, cfg.slope, cfg.dropout, rng), pre


@dataclass
class Prediction:
    final: Tensor
    p_pred: Tensor
    v_pred: Tensor
    pre_reinforcement: Tensor


def model_forward(positions, params: TwoStreamParams, training: bool = False,
                  rng: np.random.Generator | None = None, bypass_reinforcement: bool = False) -> Prediction:
    cfg = params.config
    x = _as_input(positions)
    _check_plane(x, cfg, cfg.t_in, "model input")
    if training and cfg.dropout > 0 and rng is None:
        raise ValueError("training forward with dropout needs a generator")
    common = dict(training=training, slope=cfg.slope, rate=cfg.dropout, rng=rng)
    mode = cfg.fusion
    p_pred = pstream_forward(x, params.p_tst, **common) if mode != "v-only" else None
    v_pred = vstream_forward(x, params.v_tst, **common) if mode != "p-only" else None

    if mode == "temporal-fusion":
        final, pre = temporal_fusion(p_pred, v_pred, params, training, rng, bypass_reinforcement)
        return Prediction(final, p_pred, v_pred, pre)
    if mode == "p-only":
        return Prediction(p_pred, p_pred, p_pred, p_pred)
    if mode == "v-only":
        return Prediction(v_pred, v_pred, v_pred, v_pred)
    if mode == "addition":
        pre = add(p_pred, v_pred)
    else:  # naive-concat
        k, b = params.mixer
        pre = conv2d(concat_channels([p_pred, v_pred]), k, b)
    if bypass_reinforcement:
        return Prediction(pre, p_pred, v_pred, pre)
    final = tst_forward(pre, params.reinf_tst, training, cfg.slope, cfg.dropout, rng)
    return Prediction(final, p_pred, v_pred, pre)


def predict(params: TwoStreamParams, inputs: np.ndarray) -> np.ndarray:
    """Inference-mode final prediction for ``[T, N, 3]`` or ``[B, T, N, 3]`` arrays."""
    return model_forward(np.asarray(inputs, dtype=np.float64), params, training=False).final.data


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"TSTCKPT1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: TwoStreamParams) -> None:
    """``TSTCKPT1`` | u64 LE header length | JSON ModelConfig | <f8 arrays in canonical order."""
    header = json.dumps(params.config.to_dict(), sort_keys=True).encode("utf-8")
    body = b"".join(np.ascontiguousarray(t.data, dtype="<f8").tobytes() for t in params.tensors())
    Path(path).write_bytes(CKPT_MAGIC + struct.pack("<Q", len(header)) + header + body)


def load_checkpoint(path) -> TwoStreamParams:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e.strerror or e}") from e
    if raw[:8] != CKPT_MAGIC or len(raw) < 16:
        raise CheckpointError(f"{path}: not a TSTCKPT1 checkpoint")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        cfg = ModelConfig.from_dict(json.loads(raw[16 : 16 + hlen].decode("utf-8")))
    except (ValueError, TypeError) as e:
        raise CheckpointError(f"{path}: bad header ({e})") from e
    shapes = param_shapes(cfg)
    expected = 8 * sum(int(np.prod(s)) for s in shapes)
    body = raw[16 + hlen :]
    if len(body) != expected:
        raise CheckpointError(f"{path}: body has {len(body)} bytes, expected {expected}")
    flat = np.frombuffer(body, dtype="<f8")
    arrays, off = [], 0
    for s in shapes:
        n = int(np.prod(s))
        arrays.append(flat[off : off + n].reshape(s).astype(np.float64))
        off += n
    return params_from_arrays(cfg, arrays)
