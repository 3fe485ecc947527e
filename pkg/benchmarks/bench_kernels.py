"""Compare the numba and numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Times im2col / col2im on their own, then one forward+backward conv2d and one
full training step at the default model size.  Also checks that both backends
return bitwise identical results.
"""
import argparse
import timeit

import numpy as np

from trajfuse import _kernels
from trajfuse.motion import default_skeleton, generate_synthetic, random_synth_params, window_dataset
from trajfuse.network import ModelConfig
from trajfuse.tensor import Tape, Tensor, backward, conv2d, tsum
from trajfuse.training import TrainConfig, train

# (batch, channels, H, W) as seen inside the model: T channels, N joints, 3 coords
CASES = [(16, 10, 17, 3), (16, 64, 17, 3), (8, 64, 32, 3)]


def best_ms(fn, repeat):
    fn()  # warm up / jit
    return 1e3 * min(timeit.repeat(fn, number=1, repeat=repeat))


def kernel_fns(shape, kh=3, kw=3):
    rng = np.random.default_rng(0)
    xp = np.pad(rng.normal(size=shape), ((0, 0), (0, 0), (1, 1), (1, 1)))
    ho, wo = shape[2], shape[3]
    cols = _kernels.im2col(xp, kh, kw, 1, ho, wo)
    return (lambda: _kernels.im2col(xp, kh, kw, 1, ho, wo),
            lambda: _kernels.col2im(cols, shape[1], *xp.shape[2:], kh, kw, 1, ho, wo))


def conv_step(shape):
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=shape), requires_grad=True)
    k = Tensor(rng.normal(size=(64, shape[1], 3, 3)), requires_grad=True)
    b = Tensor(np.zeros(64), requires_grad=True)

    def run():
        with Tape() as tape:
            loss = tsum(conv2d(x, k, b, padding=1))
        return backward(tape, loss, [x, k, b])

    return run


def train_steps(steps=5):
    sk = default_skeleton(17)
    windows = []
    for s in range(4):
        windows += window_dataset(generate_synthetic(random_synth_params(sk, seed=s, duration=40)), 10, 10, 5)
    cfg = ModelConfig(n_joints=17, t_in=10, t_out=10)
    return lambda: train(cfg, windows, TrainConfig(steps=steps, batch_size=8))[1].losses


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()

    backends = ["numpy"] + (["numba"] if _kernels.HAS_NUMBA else [])
    print(f"{'case':<34}" + "".join(f"{b:>12}" for b in backends) + "   (best of n, ms)")
    for shape in CASES:
        rows = {"im2col": [], "col2im": [], "conv fwd+bwd": []}
        outs = {}
        for be in backends:
            _kernels.use_backend(be)
            fwd, adj = kernel_fns(shape)
            rows["im2col"].append(best_ms(fwd, args.repeat))
            rows["col2im"].append(best_ms(adj, args.repeat))
            rows["conv fwd+bwd"].append(best_ms(conv_step(shape), args.repeat))
            outs[be] = (fwd(), adj(), conv_step(shape)())
        for name, times in rows.items():
            print(f"{name + ' ' + str(shape):<34}" + "".join(f"{t:12.3f}" for t in times))
        if len(outs) == 2:
            a, b = outs["numpy"], outs["numba"]
            same = all(np.array_equal(x, y) for x, y in zip(a[:2] + tuple(a[2]), b[:2] + tuple(b[2])))
            print(f"{'  backends agree bitwise':<34}{same!s:>12}")

    losses = {}
    for be in backends:
        _kernels.use_backend(be)
        fn = train_steps()
        ms = best_ms(fn, max(1, args.repeat // 10))
        losses[be] = fn()
        print(f"{'5 train steps (N=17, B=8, C=64)':<34}{be:>12}{ms:12.1f}")
    if len(losses) == 2:
        print(f"{'  identical loss traces':<34}{losses['numpy'] == losses['numba']!s:>12}")


if __name__ == "__main__":
    main()
