import subprocess
import sys
from dataclasses import replace

import numpy as np
import pytest

from trajfuse.evaluation import baseline_predict
from trajfuse.gradcheck import SMALL_CONFIG, run_gradcheck
from trajfuse.motion import SynthParams, generate_synthetic
from trajfuse.network import (
    CheckpointError,
    ModelConfig,
    TSTParams,
    init_params,
    load_checkpoint,
    model_forward,
    param_shapes,
    params_from_arrays,
    pstream_forward,
    save_checkpoint,
    skip_topology,
    temporal_concat,
    temporal_fusion,
    tst_forward,
    vstream_forward,
    zero_params,
)
from trajfuse.tensor import ShapeError, Tape, Tensor, backward, mean

from .oracles import central_difference


def make_tst(c_in, c_out, hidden, depth, fill=None, rng=None):
    arrays = []
    for s in TSTParams.shapes(c_in, c_out, hidden, depth):
        arrays.append(np.full(s, fill) if fill is not None else rng.uniform(-0.3, 0.3, size=s))
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    return TSTParams.from_tensors(c_in, c_out, hidden, depth, ts)


def impulse_support(depth, size=64, hidden=2):
    p = make_tst(1, 1, hidden, depth, fill=1.0)
    for b in p.biases + p.skip_biases:
        b.data[:] = 0.0
    x = np.zeros((1, size, size))
    x[0, size // 2, size // 2] = 1.0
    out = tst_forward(Tensor(x), p, training=False).data[0]
    rows, cols = np.nonzero(out)
    return rows.max() - rows.min() + 1, cols.max() - cols.min() + 1, (rows.min(), cols.min())


# --- structure ---------------------------------------------------------------------

def test_skip_topology_depth_11():
    assert skip_topology(11) == ((0, 5), (0, 10), (5, 10), (0, 11), (5, 11), (10, 11))


@pytest.mark.parametrize("depth,count", [(6, 3), (11, 6), (16, 10), (21, 15)])
def test_skip_counts(depth, count):
    assert len(skip_topology(depth)) == count


def test_tst_shapes_and_skip_kernels_are_1x1(rng):
    shapes = TSTParams.shapes(10, 10, 16, 11)
    convs = [s for s in shapes if len(s) == 4]
    assert sum(1 for s in convs if s[2:] == (3, 3)) == 11
    assert sum(1 for s in convs if s[2:] == (1, 1)) == 6


def test_init_is_deterministic_with_zero_biases():
    cfg = ModelConfig(n_joints=5, t_in=4, t_out=3, hidden=8, seed=42)
    a, b = init_params(cfg), init_params(cfg)
    for x, y in zip(a.tensors(), b.tensors()):
        assert x.data.tobytes() == y.data.tobytes()
    for t in a.tensors():
        if t.ndim == 1:
            assert not t.data.any()
    c = init_params(replace(cfg, seed=43))
    assert a.p_tst.kernels[0].data.tobytes() != c.p_tst.kernels[0].data.tobytes()


def test_init_layer1_std_matches_uniform():
    cfg = ModelConfig(n_joints=3, t_in=10, t_out=2, hidden=128, depth=6, seed=1)
    k = init_params(cfg).p_tst.kernels[0].data
    assert k.size >= 10**4
    bound = np.sqrt(1.0 / (10 * 9))
    expected = bound / np.sqrt(3.0)
    assert abs(k.std() - expected) < 0.2 * expected
    assert np.abs(k).max() <= bound


# --- TST block -------------------------------------------------------------------

def test_tst_preserves_plane(rng):
    p = make_tst(10, 10, 8, 11, rng=rng)
    assert tst_forward(Tensor(rng.normal(size=(10, 22, 3))), p).shape == (10, 22, 3)


@pytest.mark.parametrize("n_joints", [1, 2, 7, 25])
def test_tst_shape_preservation_any_n(rng, n_joints):
    p = make_tst(4, 3, 4, 6, rng=rng)
    assert tst_forward(Tensor(rng.normal(size=(2, 4, n_joints, 3))), p).shape == (2, 3, n_joints, 3)


def test_tst_zero_params_zero_output(rng):
    p = make_tst(10, 10, 8, 11, fill=0.0)
    assert not tst_forward(Tensor(rng.normal(size=(10, 22, 3))), p).data.any()


@pytest.mark.parametrize("depth,size", [(6, 13), (11, 23), (16, 33), (21, 43)])
def test_impulse_receptive_field(depth, size):
    h, w, corner = impulse_support(depth)
    assert (h, w) == (size, size)
    assert corner == (32 - depth, 32 - depth)


def test_tst_input_channel_mismatch(rng):
    with pytest.raises(ShapeError):
        tst_forward(Tensor(rng.normal(size=(3, 5, 3))), make_tst(4, 2, 4, 6, rng=rng))


# --- streams ---------------------------------------------------------------------

def test_pstream_shape_and_zero(rng):
    p = make_tst(6, 4, 8, 11, rng=rng)
    assert pstream_forward(rng.normal(size=(6, 5, 3)), p).shape == (4, 5, 3)
    z = make_tst(6, 4, 8, 11, fill=0.0)
    assert not pstream_forward(rng.normal(size=(6, 5, 3)), z).data.any()


def test_pstream_middle_kernel_gradient(rng):
    p = make_tst(4, 3, 6, 11, rng=rng)
    x = rng.uniform(-2, 2, size=(4, 5, 3))
    k = p.kernels[5]
    with Tape() as tape:
        loss = mean(pstream_forward(x, p))
    (g,) = backward(tape, loss, [k])
    for _ in range(6):
        idx = tuple(int(rng.integers(s)) for s in k.shape)
        fd = central_difference(lambda: pstream_forward(x, p).data.mean(), k.data, idx)
        assert abs(g[idx] - fd) / max(abs(g[idx]), abs(fd), 1e-6) < 1e-3


def test_vstream_zero_params_repeat_last_pose(rng):
    x = rng.normal(size=(5, 4, 3))
    out = vstream_forward(x, make_tst(4, 3, 8, 11, fill=0.0)).data
    for f in out:
        assert f.tobytes() == x[-1].tobytes()


def test_vstream_constant_input(rng):
    pose = rng.normal(size=(4, 3))
    x = np.repeat(pose[None], 5, axis=0)
    out = vstream_forward(x, make_tst(4, 3, 8, 11, fill=0.0)).data
    np.testing.assert_array_equal(out, np.repeat(pose[None], 3, axis=0))


def test_vstream_continues_pure_drift_line():
    t_in, t_out, n = 6, 4, 5
    sp = SynthParams(rest_offsets=np.arange(3.0 * n).reshape(n, 3), amplitude=np.zeros((n, 3)),
                     frequency=np.ones(n), phase=np.zeros((n, 3)), drift=(1.5, -0.5, 2.0),
                     duration=t_in + t_out)
    frames = generate_synthetic(sp).frames
    p = make_tst(t_in - 1, t_out, 8, 11, fill=0.0)
    # only the input->last-layer skip is live: it averages the observed velocities
    last_skip = p.skips.index((0, 11))
    p.skip_kernels[last_skip].data[:] = 1.0 / (t_in - 1)
    out = vstream_forward(frames[:t_in], p).data
    np.testing.assert_allclose(out, frames[t_in:], atol=1e-6, rtol=0)


def test_vstream_needs_two_frames(rng):
    with pytest.raises(ShapeError):
        vstream_forward(rng.normal(size=(1, 4, 3)), make_tst(1, 3, 4, 6, rng=rng))


# --- temporal fusion --------------------------------------------------------------

def _fusion_params(t_out=5, n=4, hidden=4):
    return init_params(ModelConfig(n_joints=n, t_in=4, t_out=t_out, hidden=hidden, depth=6, seed=3))


def test_selector_passes_position_stream(rng):
    params = _fusion_params()
    for k, b in zip(params.selector_kernels, params.selector_biases):
        k.data[:] = np.array([1.0, 0.0]).reshape(1, 2, 1, 1)
        b.data[:] = 0.0
    p, v = Tensor(rng.normal(size=(5, 4, 3))), Tensor(rng.normal(size=(5, 4, 3)))
    final, _ = temporal_fusion(p, v, params, bypass_reinforcement=True)
    assert final.data.tobytes() == p.data.tobytes()


def test_selector_averages_streams(rng):
    params = _fusion_params()
    for k, b in zip(params.selector_kernels, params.selector_biases):
        k.data[:] = 0.5
        b.data[:] = 0.0
    p, v = rng.normal(size=(5, 4, 3)), rng.normal(size=(5, 4, 3))
    _, pre = temporal_fusion(Tensor(p), Tensor(v), params)
    np.testing.assert_allclose(pre.data, 0.5 * (p + v), rtol=0, atol=1e-15)


@pytest.mark.parametrize("stream", ["p", "v"])
def test_fusion_locality(rng, stream):
    params = _fusion_params(t_out=10)
    p, v = rng.normal(size=(10, 4, 3)), rng.normal(size=(10, 4, 3))
    base = temporal_concat(Tensor(p), Tensor(v), params.selector_kernels, params.selector_biases).data
    for i in range(10):
        p2, v2 = p.copy(), v.copy()
        (p2 if stream == "p" else v2)[i] += rng.normal(size=(4, 3))
        out = temporal_concat(Tensor(p2), Tensor(v2), params.selector_kernels, params.selector_biases).data
        for j in range(10):
            if j == i:
                assert out[j].tobytes() != base[j].tobytes()
            else:
                assert out[j].tobytes() == base[j].tobytes()


def test_fusion_wrong_selector_count(rng):
    params = _fusion_params()
    p = Tensor(rng.normal(size=(5, 4, 3)))
    with pytest.raises(ShapeError):
        temporal_concat(p, p, params.selector_kernels[:-1], params.selector_biases[:-1])
    with pytest.raises(ShapeError):
        temporal_concat(p, Tensor(rng.normal(size=(5, 3, 3))), params.selector_kernels, params.selector_biases)


# --- whole model ---------------------------------------------------------------------

@pytest.mark.parametrize("fusion", ["temporal-fusion", "p-only", "v-only", "addition", "naive-concat"])
def test_model_shapes_every_fusion(rng, fusion):
    cfg = ModelConfig(n_joints=5, t_in=4, t_out=3, hidden=4, depth=6, fusion=fusion)
    pred = model_forward(rng.normal(size=(2, 4, 5, 3)), init_params(cfg))
    for t in (pred.final, pred.p_pred, pred.v_pred, pred.pre_reinforcement):
        assert t.shape == (2, 3, 5, 3)


def test_model_zero_params_composition(rng):
    cfg = ModelConfig(n_joints=5, t_in=4, t_out=3, hidden=8)
    x = rng.normal(size=(4, 5, 3))
    pred = model_forward(x, zero_params(cfg))
    assert not pred.p_pred.data.any()
    assert not pred.final.data.any()
    assert pred.v_pred.data.tobytes() == baseline_predict("zero-velocity", x, 3).tobytes()


def test_model_rejects_wrong_plane(rng):
    params = init_params(ModelConfig(n_joints=5, t_in=4, t_out=3, hidden=4, depth=6))
    with pytest.raises(ShapeError):
        model_forward(rng.normal(size=(4, 6, 3)), params)
    with pytest.raises(ShapeError):
        model_forward(rng.normal(size=(3, 5, 3)), params)


def test_p_only_equals_frozen_selector_bypass(rng):
    cfg = ModelConfig(n_joints=5, t_in=4, t_out=3, hidden=4, depth=6)
    full = init_params(cfg)
    p_only = params_from_arrays(replace(cfg, fusion="p-only"), [t.data.copy() for t in full.tensors()])
    for k, b in zip(full.selector_kernels, full.selector_biases):
        k.data[:] = np.array([1.0, 0.0]).reshape(1, 2, 1, 1)
        b.data[:] = 0.0
    x = rng.normal(size=(3, 4, 5, 3))
    a = model_forward(x, full, bypass_reinforcement=True).final.data
    b = model_forward(x, p_only).final.data
    assert a.tobytes() == b.tobytes()


def test_end_to_end_gradients_small_config():
    report = run_gradcheck(SMALL_CONFIG, seed=3, per_group=4)
    assert report.max_error < 1e-3, report.errors


def test_training_forward_without_rng_rejected(rng):
    params = init_params(ModelConfig(n_joints=5, t_in=4, t_out=3, hidden=4, depth=6))
    with pytest.raises(ValueError):
        model_forward(rng.normal(size=(4, 5, 3)), params, training=True)


_PROBE = """
import hashlib, numpy as np
from trajfuse.network import ModelConfig, init_params, predict
cfg = ModelConfig(n_joints=6, t_in=5, t_out=4, hidden=8, seed=11)
x = np.random.default_rng(2).normal(size=(3, 5, 6, 3)) * 100
print(hashlib.sha256(predict(init_params(cfg), x).tobytes()).hexdigest())
"""


def test_forward_bitwise_identical_across_processes():
    runs = [subprocess.run([sys.executable, "-c", _PROBE], capture_output=True, text=True, check=True).stdout
            for _ in range(2)]
    assert runs[0] == runs[1] and len(runs[0].strip()) == 64


# --- checkpoints --------------------------------------------------------------------

@pytest.mark.parametrize("fusion", ["temporal-fusion", "naive-concat"])
def test_checkpoint_round_trip_bitwise(tmp_path, rng, fusion):
    cfg = ModelConfig(n_joints=5, t_in=4, t_out=3, hidden=6, depth=6, seed=9, fusion=fusion)
    params = init_params(cfg)
    x = rng.normal(size=(2, 4, 5, 3))
    before = model_forward(x, params).final.data
    save_checkpoint(tmp_path / "m.ckpt", params)
    loaded = load_checkpoint(tmp_path / "m.ckpt")
    assert loaded.config == cfg
    assert model_forward(x, loaded).final.data.tobytes() == before.tobytes()


def test_checkpoint_layout(tmp_path):
    cfg = ModelConfig(n_joints=2, t_in=3, t_out=2, hidden=3, depth=6)
    save_checkpoint(tmp_path / "m.ckpt", init_params(cfg))
    raw = (tmp_path / "m.ckpt").read_bytes()
    assert raw[:8] == b"TSTCKPT1"
    hlen = int.from_bytes(raw[8:16], "little")
    n_values = sum(int(np.prod(s)) for s in param_shapes(cfg))
    assert len(raw) == 16 + hlen + 8 * n_values


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "bad").write_bytes(b"NOTACKPT" + b"\0" * 20)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad")
    cfg = ModelConfig(n_joints=2, t_in=3, t_out=2, hidden=3, depth=6)
    save_checkpoint(tmp_path / "m.ckpt", init_params(cfg))
    (tmp_path / "cut").write_bytes((tmp_path / "m.ckpt").read_bytes()[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "cut")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing")


@pytest.mark.parametrize("kw", [{"t_in": 1}, {"t_out": 0}, {"n_joints": 0}, {"fusion": "sum"}, {"slope": 1.0}])
def test_model_config_validation(kw):
    with pytest.raises(ValueError):
        ModelConfig(**{"n_joints": 3, **kw})
