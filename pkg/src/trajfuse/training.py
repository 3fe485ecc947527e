"""Weighted squared-error loss and the seeded Adam training loop."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .motion import SampleWindow
from .network import ModelConfig, TwoStreamParams, init_params, model_forward, save_checkpoint
from .optim import AdamHyper, AdamState, adam_step
from .tensor import NonFiniteError, ShapeError, Tape, Tensor, backward, mul, scale, square, sub, tsum

log = logging.getLogger(__name__)


def make_frame_weights(t_out: int, tail_len: int, tail_weight: float) -> np.ndarray:
    """Ones, except the last ``tail_len`` predicted frames get ``tail_weight``."""
    if not 0 <= tail_len <= t_out:
        raise ValueError(f"tail_len must lie in [0, {t_out}], got {tail_len}")
    if not tail_weight > 0:
        raise ValueError(f"tail_weight must be positive, got {tail_weight}")
    w = np.ones(t_out)
    if tail_len:
        w[t_out - tail_len :] = tail_weight
    return w


def weighted_loss(pred, target, weights):
    """Per-frame-weighted mean squared joint error.

    ``l = 1/(T*N) * sum_t sum_k w_t * ||pred[t,k] - target[t,k]||^2`` for
    ``[T, N, 3]`` inputs; batched ``[B, T, N, 3]`` inputs average over B.
    Tensor ``pred`` keeps the result on the tape.
    """
    pshape = pred.shape
    tshape = np.shape(target.data if isinstance(target, Tensor) else target)
    if pshape != tshape or len(pshape) not in (3, 4) or pshape[-1] != 3:
        raise ShapeError(f"pred {pshape} and target {tshape} must both be [..., T, N, 3]")
    weights = np.asarray(weights, dtype=np.float64)
    t_out, n = pshape[-3], pshape[-2]
    if weights.shape != (t_out,):
        raise ShapeError(f"weights shape {weights.shape} != ({t_out},)")
    batch = pshape[0] if len(pshape) == 4 else 1
    denom = batch * t_out * n
    w = weights[:, None, None]
    if isinstance(pred, Tensor) or isinstance(target, Tensor):
        return scale(tsum(mul(square(sub(pred, target)), w)), 1.0 / denom)
    d = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return float((d * d * w).sum() / denom)


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 16
    hyper: AdamHyper = field(default_factory=AdamHyper)
    frame_weights: np.ndarray | None = None
    shuffle_seed: int = 0
    dropout_seed: int = 1
    checkpoint_every: int = 0
    checkpoint_path: str | None = None

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if self.frame_weights is not None and np.any(np.asarray(self.frame_weights) <= 0):
            raise ValueError("frame weights must be positive")
        if self.checkpoint_every and not self.checkpoint_path:
            raise ValueError("checkpoint cadence set without a checkpoint path")


@dataclass
class TrainLog:
    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    millis: list[float] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def append(self, step: int, loss: float, ms: float):
        if self.steps and step <= self.steps[-1]:
            raise ValueError("train log steps must increase")
        self.steps.append(step)
        self.losses.append(loss)
        self.millis.append(ms)

    def write_csv(self, path, timing: bool = True) -> None:
        """``step,loss,millis``; ``timing=False`` drops the wall-clock column."""
        rows = ["step,loss,millis" if timing else "step,loss"]
        for s, l, m in zip(self.steps, self.losses, self.millis):
            rows.append(f"{s},{l!r},{m:.3f}" if timing else f"{s},{l!r}")
        Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


def stack_windows(windows: Sequence[SampleWindow]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([w.input for w in windows]), np.stack([w.target for w in windows])


def batch_order(n: int, batch_size: int, steps: int, seed: int) -> list[np.ndarray]:
    """Index batches for ``steps`` updates; reshuffled each epoch, last batch may be short."""
    rng = np.random.default_rng(seed)
    out: list[np.ndarray] = []
    while len(out) < steps:
        perm = rng.permutation(n)
        for s in range(0, n, batch_size):
            out.append(perm[s : s + batch_size])
            if len(out) == steps:
                break
    return out


def split_windows(windows: Sequence[SampleWindow], eval_sources: set[str]):
    """Partition by source sequence id so no frame is shared across splits."""
    train = [w for w in windows if w.source_id not in eval_sources]
    held = [w for w in windows if w.source_id in eval_sources]
    assert_disjoint(train, held)
    return train, held


def assert_disjoint(train: Sequence[SampleWindow], held: Sequence[SampleWindow]) -> None:
    overlap = {w.window_id for w in train} & {w.window_id for w in held}
    if overlap:
        raise ValueError(f"train/eval windows overlap: {sorted(overlap)[:5]}")


def train(cfg: ModelConfig, dataset: Sequence[SampleWindow], tcfg: TrainConfig,
          params: TwoStreamParams | None = None,
          on_step: Callable[[int, float], None] | None = None) -> tuple[TwoStreamParams, TrainLog]:
    if not dataset:
        raise ValueError("training dataset is empty")
    x_all, y_all = stack_windows(dataset)
    want_in, want_out = (cfg.t_in, cfg.n_joints, 3), (cfg.t_out, cfg.n_joints, 3)
    if x_all.shape[1:] != want_in or y_all.shape[1:] != want_out:
        raise ShapeError(f"windows {x_all.shape[1:]}/{y_all.shape[1:]} do not match model {want_in}/{want_out}")
    params = params if params is not None else init_params(cfg)
    if params.config != cfg:
        raise ValueError("params were built for a different ModelConfig")
    weights = np.ones(cfg.t_out) if tcfg.frame_weights is None else np.asarray(tcfg.frame_weights, float)
    tensors = params.tensors()
    state = AdamState.zeros_like(tensors)
    drop_rng = np.random.default_rng(tcfg.dropout_seed)
    tlog = TrainLog()
    t0 = time.perf_counter()
    for step, idx in enumerate(batch_order(len(dataset), tcfg.batch_size, tcfg.steps, tcfg.shuffle_seed)):
        try:
            with Tape() as tape:
                pred = model_forward(x_all[idx], params, training=True, rng=drop_rng)
                loss = weighted_loss(pred.final, y_all[idx], weights)
            grads = backward(tape, loss, tensors)
        except NonFiniteError as e:
            raise NonFiniteError(f"step {step}: {e}") from e
        value = loss.item()
        adam_step(tensors, grads, state, tcfg.hyper)
        tlog.append(step, value, (time.perf_counter() - t0) * 1000.0)
        if on_step is not None:
            on_step(step, value)
        if step % 100 == 0:
            log.info("step %d loss %.6g", step, value)
        if tcfg.checkpoint_every and (step + 1) % tcfg.checkpoint_every == 0:
            save_checkpoint(tcfg.checkpoint_path, params)
    if tcfg.checkpoint_path:
        save_checkpoint(tcfg.checkpoint_path, params)
    tlog.summary = {"steps": tcfg.steps, "first_loss": tlog.losses[0], "final_loss": tlog.losses[-1]}
    return params, tlog
