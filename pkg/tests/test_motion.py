import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from trajfuse.motion import (
    MotionDataError,
    MotionSequence,
    SkeletonSpec,
    SynthParams,
    compute_velocity,
    default_skeleton,
    downsample,
    generate_synthetic,
    load_mocap_csv,
    random_synth_params,
    recover_positions,
    window_dataset,
    write_mocap_csv,
)
from trajfuse.tensor import Tape, Tensor, backward, tsum

coords = st.floats(-2000, 2000, allow_nan=False, allow_infinity=False)


def _seq(frames, fps=25.0, sid="a"):
    return MotionSequence(np.asarray(frames, dtype=float), fps, sid)


# --- velocity / recovery --------------------------------------------------------

def test_constant_pose_has_zero_velocity(rng):
    pose = rng.normal(size=(4, 3))
    assert not compute_velocity(_seq(np.repeat(pose[None], 5, axis=0))).deltas.any()


def test_velocity_definition():
    frames = np.zeros((3, 1, 3))
    frames[:, 0, 0] = [0, 1, 3]
    np.testing.assert_array_equal(compute_velocity(_seq(frames)).deltas[:, 0, 0], [1, 2])


def test_velocity_matches_elementwise_subtraction(rng):
    frames = rng.normal(size=(20, 6, 3))
    d = compute_velocity(_seq(frames)).deltas
    oracle = np.empty((19, 6, 3))
    for t in range(19):
        for j in range(6):
            for a in range(3):
                oracle[t, j, a] = frames[t + 1, j, a] - frames[t, j, a]
    assert d.tobytes() == oracle.tobytes()


def test_velocity_needs_two_frames():
    with pytest.raises(MotionDataError):
        compute_velocity(_seq(np.zeros((1, 2, 3))))


def test_recover_zero_velocity_repeats_anchor(rng):
    anchor = rng.normal(size=(5, 3))
    out = recover_positions(np.zeros((4, 5, 3)), anchor)
    for frame in out:
        np.testing.assert_array_equal(frame, anchor)


def test_recover_cumulative_sum():
    vel = np.zeros((2, 1, 3))
    vel[:, 0, 0] = [2, 1]
    anchor = np.array([[3.0, 0, 0]])
    np.testing.assert_array_equal(recover_positions(vel, anchor)[:, 0, 0], [5, 6])


def test_recover_shape_mismatch():
    with pytest.raises(MotionDataError):
        recover_positions(np.zeros((2, 3, 3)), np.zeros((4, 3)))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 30), st.integers(1, 6), st.just(3)), elements=coords))
def test_velocity_recovery_round_trip(frames):
    seq = _seq(frames)
    rec = recover_positions(compute_velocity(seq).deltas, seq.frames[0])
    np.testing.assert_allclose(rec, seq.frames[1:], atol=1e-9, rtol=0)


def test_recover_on_tape_is_differentiable(rng):
    vel = Tensor(rng.normal(size=(4, 3, 3)), requires_grad=True)
    anchor = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    with Tape() as tape:
        loss = tsum(recover_positions(vel, anchor))
    gv, ga = backward(tape, loss, [vel, anchor])
    # frame k of velocity feeds frames k..T-1 of the output
    np.testing.assert_array_equal(gv[:, 0, 0], [4, 3, 2, 1])
    np.testing.assert_array_equal(ga, np.full((3, 3), 4.0))


# --- downsample / windows ----------------------------------------------------------

def test_downsample_identity(rng):
    seq = _seq(rng.normal(size=(7, 2, 3)))
    assert downsample(seq, 1) is seq


def test_downsample_50fps_by_2():
    seq = _seq(np.arange(50 * 3, dtype=float).reshape(50, 1, 3), fps=50.0)
    out = downsample(seq, 2)
    assert out.n_frames == 25 and out.fps == 25.0
    for i in range(25):
        np.testing.assert_array_equal(out.frames[i], seq.frames[2 * i])


@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 60))
def test_downsample_composes(k, m, n_frames):
    seq = _seq(np.arange(n_frames * 3, dtype=float).reshape(n_frames, 1, 3), fps=100.0)
    a, b = downsample(downsample(seq, k), m), downsample(seq, k * m)
    np.testing.assert_array_equal(a.frames, b.frames)
    assert a.fps == pytest.approx(b.fps)


def test_downsample_rejects_zero():
    with pytest.raises(MotionDataError):
        downsample(_seq(np.zeros((3, 1, 3))), 0)


def test_window_count():
    seq = _seq(np.zeros((100, 1, 3)))
    assert len(window_dataset(seq, 10, 10, 1)) == 81
    assert len(window_dataset(_seq(np.zeros((20, 1, 3))), 10, 10, 1)) == 1
    assert len(window_dataset(seq, 10, 10, 7)) == (100 - 20) // 7 + 1


def test_windows_match_source_slices(rng):
    seq = _seq(rng.normal(size=(40, 3, 3)))
    for w in window_dataset(seq, 6, 4, 3):
        joined = np.concatenate([w.input, w.target])
        assert joined.tobytes() == seq.frames[w.start : w.start + 10].tobytes()


@given(st.integers(2, 40), st.integers(1, 6), st.integers(1, 6))
def test_stride_one_windows_cover_every_frame(n_frames, t_in, t_out):
    if n_frames < t_in + t_out:
        return
    seq = _seq(np.zeros((n_frames, 1, 3)))
    covered = set()
    for w in window_dataset(seq, t_in, t_out, 1):
        covered.update(range(w.start, w.start + t_in + t_out))
    assert covered == set(range(n_frames))


def test_window_too_short():
    with pytest.raises(MotionDataError):
        window_dataset(_seq(np.zeros((5, 1, 3))), 3, 3)


# --- CSV --------------------------------------------------------------------------

def _write(tmp_path, text):
    p = tmp_path / "m.csv"
    p.write_text(text, encoding="utf-8")
    return p


def test_csv_parse_fidelity(tmp_path):
    p = _write(tmp_path, "#mocap-csv v1\njoints=2,fps=25,unit=mm\nroot,tip\n-1,0\n"
                         "1,2,3,4,5,6\n7,8,9,10,11,12.5\n")
    seqs, sk = load_mocap_csv(p)
    assert len(seqs) == 1 and sk.names == ("root", "tip") and sk.parents == (-1, 0)
    np.testing.assert_array_equal(seqs[0].frames, [[[1, 2, 3], [4, 5, 6]], [[7, 8, 9], [10, 11, 12.5]]])
    assert seqs[0].fps == 25.0


def test_csv_empty_data_section(tmp_path):
    p = _write(tmp_path, "#mocap-csv v1\njoints=1,fps=25,unit=mm\nroot\n-1\n")
    with pytest.raises(MotionDataError, match="no frames"):
        load_mocap_csv(p)


@pytest.mark.parametrize("body,line", [
    ("#mocap-csv v2\njoints=1,fps=25,unit=mm\nr\n-1\n1,2,3\n", 1),
    ("#mocap-csv v1\njoints=x,fps=25,unit=mm\nr\n-1\n1,2,3\n", 2),
    ("#mocap-csv v1\njoints=1,fps=25,unit=mm\nr\n-1\n1,2,3\n1,2\n", 6),
    ("#mocap-csv v1\njoints=1,fps=25,unit=mm\nr\n-1\n1,2,3\n1,abc,3\n", 6),
    ("#mocap-csv v1\njoints=2,fps=25,unit=mm\nr\n-1,0\n1,2,3,4,5,6\n", 3),
])
def test_csv_errors_carry_line_numbers(tmp_path, body, line):
    with pytest.raises(MotionDataError, match=f"line {line}"):
        load_mocap_csv(_write(tmp_path, body))


def test_csv_multiple_sequences_round_trip(tmp_path, rng):
    sk = SkeletonSpec(("a", "b", "c"), (-1, 0, 1))
    seqs = [MotionSequence(rng.normal(scale=500, size=(n, 3, 3)), 25.0, sid) for n, sid in ((4, "x"), (7, "y"))]
    write_mocap_csv(tmp_path / "r.csv", seqs, sk)
    back, sk2 = load_mocap_csv(tmp_path / "r.csv")
    assert sk2 == sk
    assert [s.seq_id for s in back] == ["x", "y"]
    for a, b in zip(seqs, back):
        assert a.frames.tobytes() == b.frames.tobytes()


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 4), st.just(3)),
              elements=st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)))
def test_csv_round_trip_is_lossless(tmp_path_factory, frames):
    path = tmp_path_factory.mktemp("rt") / "s.csv"
    seq = MotionSequence(frames, 50.0, "q")
    write_mocap_csv(path, [seq], default_skeleton(frames.shape[1]))
    (back,), _ = load_mocap_csv(path)
    assert back.frames.tobytes() == seq.frames.tobytes()


def test_skeleton_validation():
    with pytest.raises(MotionDataError):
        SkeletonSpec(("a", "b"), (-1, 5))
    with pytest.raises(MotionDataError):
        SkeletonSpec(("a", "b"), (1, 0))


# --- synthetic ------------------------------------------------------------------

def _params(**kw):
    n = 4
    base = dict(rest_offsets=np.arange(12.0).reshape(n, 3), amplitude=np.zeros((n, 3)), frequency=np.ones(n),
                phase=np.zeros((n, 3)), duration=30)
    base.update(kw)
    return SynthParams(**base)


def test_synthetic_degenerate_is_constant():
    seq = generate_synthetic(_params())
    for f in seq.frames:
        np.testing.assert_array_equal(f, seq.frames[0])


def test_synthetic_pure_drift_has_constant_velocity():
    d = compute_velocity(generate_synthetic(_params(drift=(1.0, 0.0, 0.0)))).deltas
    np.testing.assert_allclose(d, np.broadcast_to([1.0, 0.0, 0.0], d.shape), atol=1e-12)


def test_synthetic_is_seed_deterministic(skeleton17):
    p = random_synth_params(skeleton17, seed=5, noise_std=3.0)
    assert generate_synthetic(p).frames.tobytes() == generate_synthetic(p).frames.tobytes()
    q = random_synth_params(skeleton17, seed=6, noise_std=3.0)
    assert generate_synthetic(p).frames.tobytes() != generate_synthetic(q).frames.tobytes()


def test_synthetic_formula_pointwise():
    p = _params(amplitude=np.full((4, 3), 2.0), frequency=np.full(4, 0.5), phase=np.full((4, 3), 0.3),
                drift=(0.5, -1.0, 2.0), fps=10.0)
    seq = generate_synthetic(p)
    f, j = 7, 2
    expect = p.rest_offsets[j] + np.array(p.drift) * f + 2.0 * np.sin(2 * np.pi * 0.5 * f / 10.0 + 0.3)
    np.testing.assert_allclose(seq.frames[f, j], expect, rtol=1e-14)


@pytest.mark.parametrize("kw", [{"noise_std": -1.0}, {"amplitude": -np.ones((4, 3))},
                                {"frequency": np.ones(3)}, {"duration": 0}])
def test_synthetic_invalid_params(kw):
    with pytest.raises(MotionDataError):
        generate_synthetic(_params(**kw))


def test_synthetic_duration_must_cover_window():
    with pytest.raises(MotionDataError):
        generate_synthetic(_params(duration=15), min_duration=20)
