"""Finite-difference audit of the full two-stream model's gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import ModelConfig, TwoStreamParams, init_params, model_forward
from .tensor import Tape, backward, numerical_grad, relative_error
from .training import weighted_loss

SMALL_CONFIG = ModelConfig(n_joints=5, t_in=4, t_out=3, hidden=8, depth=11, dropout=0.1)


@dataclass
class GradReport:
    errors: dict[str, float]   # group -> max relative error
    checked: dict[str, int]    # group -> number of sampled entries

    @property
    def max_error(self) -> float:
        return max(self.errors.values())


def param_groups(params: TwoStreamParams) -> dict[str, list]:
    """Tensors split into the groups audited separately."""
    skips = []
    for tst in (params.p_tst, params.v_tst, params.reinf_tst):
        skips += tst.skip_kernels
    groups = {
        "p_tst_kernels": list(params.p_tst.kernels),
        "v_tst_kernels": list(params.v_tst.kernels),
        "skip_kernels": skips,
        "selectors": list(params.selector_kernels),
        "reinf_tst_kernels": list(params.reinf_tst.kernels),
        "biases": list(params.p_tst.biases) + list(params.v_tst.biases)
        + list(params.selector_biases) + list(params.reinf_tst.biases),
    }
    if params.mixer is not None:
        groups["mixer"] = [params.mixer[0]]
    return groups


def run_gradcheck(cfg: ModelConfig = SMALL_CONFIG, seed: int = 0, per_group: int = 6,
                  h: float = 1e-5) -> GradReport:
    """Compare autodiff with central differences on sampled entries per group.

    Inputs and targets are uniform in [-2, 2]; the model runs in inference
    mode so the loss is a deterministic function of the parameters.
    """
    rng = np.random.default_rng(seed)
    params = init_params(ModelConfig(**{**cfg.to_dict(), "seed": seed}))
    x = rng.uniform(-2, 2, size=(2, cfg.t_in, cfg.n_joints, 3))
    y = rng.uniform(-2, 2, size=(2, cfg.t_out, cfg.n_joints, 3))
    w = rng.uniform(0.5, 1.5, size=cfg.t_out)
    # nudge biases off zero so their gradients are exercised generically
    for t in params.tensors():
        if t.ndim == 1:
            t.data[:] = rng.uniform(-0.1, 0.1, size=t.shape)

    def loss_value() -> float:
        return weighted_loss(model_forward(x, params, training=False).final.data, y, w)

    tensors = params.tensors()
    with Tape() as tape:
        loss = weighted_loss(model_forward(x, params, training=False).final, y, w)
    grads = dict(zip(map(id, tensors), backward(tape, loss, tensors)))

    errors, checked = {}, {}
    for name, group in param_groups(params).items():
        worst, count = 0.0, 0
        for _ in range(per_group):
            t = group[rng.integers(len(group))]
            idx = tuple(int(rng.integers(s)) for s in t.shape)
            fd = numerical_grad(loss_value, t.data, idx, h)
            worst = max(worst, relative_error(grads[id(t)][idx], fd, floor=1e-6))
            count += 1
        errors[name], checked[name] = worst, count
    return GradReport(errors, checked)
