"""Compare the compiled and numpy CNMP training kernels.

Usage::

    python benchmarks/bench_kernels.py [--steps 2000] [--width 128]

Prints per-call timings of ``loss_grad``, ``adam_update`` and a full
``CnmpTrainer.train_step`` for each available backend, plus the maximum
gradient difference between them.
"""
import argparse
import time

import numpy as np

from cormp.cnmp import CnmpModel, CnmpTrainer, backend


def _time(fn, n):
    fn()
    t0 = time.perf_counter()
    for _ in range(n):
        fn()
    return (time.perf_counter() - t0) / n


def bench(kernels, steps, width):
    rng = np.random.default_rng(0)
    model = CnmpModel(3, 1, width=width, rng=rng)
    trainer = CnmpTrainer(model, kernels=kernels)
    t = np.linspace(0, 1, 200)
    demos = [(np.column_stack([t, rng.normal(size=(200, 3))]), rng.uniform(-1, 1, 1))
             for _ in range(20)]
    obs, ctx, tgt = demos[0][0][[3, 50, 120]], demos[0][1], demos[0][0][[77]]
    a = trainer.adam
    loss = _time(lambda: trainer.loss_and_grad(obs, ctx, tgt), steps)
    adam = _time(lambda: kernels.adam_update(model.theta, model.grad, a.first_moment[0],
                                             a.second_moment[0], 1e-4, 0.9, 0.999, 1e-8, 10),
                 steps)
    step_rng = np.random.default_rng(1)
    full = _time(lambda: trainer.train_step(demos, step_rng), steps)
    return loss, adam, full


def gradient_gap(width):
    compiled = backend.compiled_kernels()
    if compiled is None:
        return None
    rng = np.random.default_rng(2)
    model = CnmpModel(3, 1, width=width, rng=rng)
    obs, tgt = rng.normal(size=(4, 4)), rng.normal(size=(1, 4))
    grads = []
    for k in (compiled, backend.python_kernels):
        CnmpTrainer(model, kernels=k).loss_and_grad(obs, [0.3], tgt)
        grads.append(model.grad.copy())
    return float(np.max(np.abs(grads[0] - grads[1])))


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--width", type=int, default=128)
    args = p.parse_args()
    rows = []
    compiled = backend.compiled_kernels()
    if compiled is not None:
        rows.append(("cython", bench(compiled, args.steps, args.width)))
    else:
        print("compiled kernel not built; timing the numpy fallback only")
    rows.append(("python", bench(backend.python_kernels, max(1, args.steps // 4), args.width)))
    print(f"{'backend':<8}{'loss_grad us':>14}{'adam us':>10}{'train_step us':>15}"
          f"{'200k steps s':>14}")
    for name, (loss, adam, full) in rows:
        print(f"{name:<8}{loss * 1e6:>14.1f}{adam * 1e6:>10.1f}{full * 1e6:>15.1f}"
              f"{full * 2e5:>14.1f}")
    if len(rows) == 2:
        print(f"speed-up per train_step: {rows[1][1][2] / rows[0][1][2]:.1f}x")
    gap = gradient_gap(args.width)
    if gap is not None:
        print(f"max |grad_cython - grad_python| = {gap:.2e}")


if __name__ == "__main__":
    main()
