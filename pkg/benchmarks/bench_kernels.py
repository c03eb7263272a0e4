"""Compare the compiled and numpy kernel backends.

Shapes match one training step of the default configuration (batch 16,
67 tokens, width 64, 4 heads, 8x8 grid, 3 classes).  Each kernel is timed
with ``timeit`` (best of several repeats) and checked for agreement
between backends.  A final section times a full forward+backward step
under each backend.

    python benchmarks/bench_kernels.py [--repeat 5] [--number 20]
"""

import argparse
import timeit

import numpy as np

from mctformer import kernels
from mctformer.config import ModelConfig
from mctformer.model import forward, init_params
from mctformer.training import total_loss


def kernel_cases(rng):
    b, h, t, d, n, c = 16, 4, 67, 64, 8, 3
    logits = rng.normal(size=(b * h * t, t))
    y = kernels.fallback.softmax_forward(logits)
    gy = rng.normal(size=y.shape)
    x = rng.normal(size=(b * t, d))
    gamma, beta = rng.normal(size=d), rng.normal(size=d)
    ln = kernels.fallback.layernorm_forward(x, gamma, beta, 1e-6)
    hidden = rng.normal(size=b * t * 4 * d)
    gelu_t = kernels.fallback.gelu_forward(hidden)[1]
    ghid = rng.normal(size=hidden.shape)
    fmap = rng.normal(size=(b, n, n, d))
    kern = rng.normal(size=(c, 3, 3, d))
    bias = rng.normal(size=c)
    gconv = rng.normal(size=(b, n, n, c))
    pred = rng.integers(0, c + 1, size=50 * n * n).astype(np.int64)
    truth = rng.integers(0, c + 1, size=50 * n * n).astype(np.int64)
    return {
        "softmax_forward": (logits,),
        "softmax_backward": (y, gy),
        "layernorm_forward": (x, gamma, beta, 1e-6),
        "layernorm_backward": (rng.normal(size=x.shape), ln[1], ln[2], gamma),
        "gelu_forward": (hidden,),
        "gelu_backward": (hidden, gelu_t, ghid),
        "conv3x3_forward": (fmap, kern, bias),
        "conv3x3_backward": (fmap, kern, gconv),
        "confusion_counts": (pred, truth, c + 1),
    }


def _max_diff(a, b):
    if isinstance(a, tuple):
        return max(_max_diff(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))))


def best_time(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def bench_kernels(repeat, number):
    cases = kernel_cases(np.random.default_rng(0))
    print(f"{'kernel':<20s} {'python (ms)':>12s} {'cython (ms)':>12s} {'speedup':>8s} {'max |diff|':>11s}")
    for name, args in cases.items():
        py = getattr(kernels.fallback, name)
        t_py = best_time(lambda: py(*args), repeat, number)
        if kernels.compiled is None:
            print(f"{name:<20s} {t_py * 1e3:12.3f} {'n/a':>12s}")
            continue
        cy = getattr(kernels.compiled, name)
        t_cy = best_time(lambda: cy(*args), repeat, number)
        diff = _max_diff(py(*args), cy(*args))
        print(f"{name:<20s} {t_py * 1e3:12.3f} {t_cy * 1e3:12.3f} {t_py / t_cy:8.2f} {diff:11.2e}")


def bench_step(repeat):
    config = ModelConfig()
    params = init_params(config, 0)
    rng = np.random.default_rng(1)
    images = rng.random((16, 3, config.image_side, config.image_side))
    labels = (rng.random((16, config.num_classes)) < 0.5).astype(np.float64)

    def step():
        for p in params.values():
            p.grad = None
        loss = total_loss(forward(images, params, config), labels)[0]
        loss.backward()

    previous = kernels.BACKEND
    backends = ["python"] + (["cython"] if kernels.compiled is not None else [])
    print("\nfull training step (forward + backward, batch 16, default config)")
    for name in backends:
        kernels.use_backend(name)
        print(f"  {name:<7s} {best_time(step, repeat, 1) * 1e3:9.1f} ms")
    kernels.use_backend(previous)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--number", type=int, default=20)
    args = parser.parse_args()
    print(f"compiled backend available: {kernels.compiled is not None}\n")
    bench_kernels(args.repeat, args.number)
    bench_step(args.repeat)


if __name__ == "__main__":
    main()
