"""Fast internal checks: gradients, invariances, simulator and oracle examples.

Each check returns ``(passed, detail)``; :func:`run` prints one line per check.
"""
from __future__ import annotations

import hashlib
import math
import tempfile
import time
from pathlib import Path

import numpy as np

from . import demonstrator as dm
from . import sim
from .cnmp import CnmpModel, CnmpTrainer, backend
from .nn import (Adam, Conv2dLayer, ConvTranspose2dLayer, DenseLayer, gaussian_nll,
                 gaussian_nll_grad, load_params, save_params)
from .nn.gradcheck import numeric_gradient, relative_error
from .pipeline import trajectory_error

FD_TOL = 1e-4


def _layer_fd(layer, x, rng):
    """Worst relative error over parameter and input gradients of sum(R * layer(x))."""
    r = rng.normal(size=layer.apply(x).shape)
    layer.forward(x)
    dx = layer.backward(r)
    analytic = [g.copy() for g in layer.grads()] + [dx]

    def f():
        return float(np.sum(r * layer.apply(x)))

    numeric = [numeric_gradient(f, p) for p in layer.params()] + [numeric_gradient(f, x)]
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))


def check_dense_gradient():
    rng = np.random.default_rng(0)
    worst = 0.0
    for act in ("relu", "linear", "sigmoid", "softplus"):
        layer = DenseLayer(4, 3, act, rng)
        layer.bias[:] = rng.normal(size=3) * 0.1
        worst = max(worst, _layer_fd(layer, rng.normal(size=(5, 4)), rng))
    return worst < FD_TOL, f"max relative error {worst:.2e}"


def check_conv_gradient():
    rng = np.random.default_rng(1)
    worst = 0.0
    for stride in (1, 2):
        layer = Conv2dLayer(2, 3, stride, "sigmoid", rng)
        worst = max(worst, _layer_fd(layer, rng.normal(size=(2, 2, 5, 6)), rng))
    layer = ConvTranspose2dLayer(2, 3, 2, "sigmoid", rng)
    worst = max(worst, _layer_fd(layer, rng.normal(size=(2, 2, 3, 4)), rng))
    return worst < FD_TOL, f"max relative error {worst:.2e}"


def check_nll_gradient():
    rng = np.random.default_rng(2)
    mean, std = rng.normal(size=(4, 3)), rng.uniform(0.2, 2.0, size=(4, 3))
    target = rng.normal(size=(4, 3))
    dm_, ds_ = gaussian_nll_grad(mean, std, target)

    def f():
        return gaussian_nll(mean, std, target)

    err = max(relative_error(dm_, numeric_gradient(f, mean)),
              relative_error(ds_, numeric_gradient(f, std)))
    return err < FD_TOL, f"max relative error {err:.2e}"


def check_cnmp_gradient(kernels=None):
    """Full encoder-aggregate-decoder-NLL gradient on a two-demo toy set."""
    rng = np.random.default_rng(3)
    model = CnmpModel(2, 1, width=6, encoder_layers=2, decoder_layers=3, rng=rng)
    model.theta += rng.normal(size=model.theta.size) * 0.05
    trainer = CnmpTrainer(model, kernels=kernels or backend.kernels)
    t = np.linspace(0, 1, 8)
    demos = [(np.column_stack([t, np.sin(3 * t), t ** 2]), np.array([-0.5])),
             (np.column_stack([t, np.cos(2 * t), -t]), np.array([0.7]))]
    worst = 0.0
    for points, ctx in demos:
        obs, tgt = points[[0, 3, 5]], points[[2, 6]]
        trainer.loss_and_grad(obs, ctx, tgt)
        analytic = model.grad.copy()
        numeric = numeric_gradient(lambda: trainer.loss_and_grad(obs, ctx, tgt), model.theta)
        worst = max(worst, relative_error(analytic, numeric))
    return worst < FD_TOL, f"max relative error {worst:.2e}"


def check_permutation_invariance():
    rng = np.random.default_rng(4)
    model = CnmpModel(3, 1, rng=rng)
    obs = rng.normal(size=(5, 4))
    ref = model.encode_observations(obs)
    ok = all(np.array_equal(ref, model.encode_observations(obs[rng.permutation(5)]))
             for _ in range(20))
    dup = np.array_equal(ref, model.encode_observations(np.vstack([obs, obs])))
    return ok and dup, f"permutations {'identical' if ok else 'differ'}, duplication " \
                       f"{'identical' if dup else 'differs'}"


def check_sigma_positive():
    rng = np.random.default_rng(5)
    model = CnmpModel(3, 1, rng=rng)
    model.theta *= 4.0
    lowest = math.inf
    for _ in range(1000):
        n = int(rng.integers(1, 6))
        _, sigma = model.predict(rng.normal(size=(n, 4)) * 3, rng.uniform(-1, 1, 1),
                                 rng.uniform(0, 1))
        lowest = min(lowest, float(sigma.min()))
    return lowest > 0, f"min sigma {lowest:.3e} over 1000 queries"


def check_adam_first_step():
    """After one step the update is -lr * sign(g) (up to eps)."""
    p = np.array([1.0, -2.0, 0.5])
    g = np.array([0.3, -4.0, 1e-3])
    opt = Adam([p], lr=0.01)
    opt.step([g])
    expected = np.array([1.0, -2.0, 0.5]) - 0.01 * g / (np.abs(g) + 1e-8)
    err = float(np.max(np.abs(p - expected)))
    return err < 1e-12, f"max deviation {err:.1e}"


def check_sim_replay():
    rng = np.random.default_rng(6)
    scene = sim.sample_scene(rng)
    path = np.vstack([dm.min_jerk_path(dm.pre_waypoints()),
                      rng.normal(scale=0.001, size=(60, 3)).cumsum(axis=0)
                      + [0.0, -0.05, 0.01]])
    a = sim.EpisodeLog()
    b = sim.EpisodeLog()
    sa = sim.execute(scene, path, log=a)
    sb = sim.execute(scene, path, log=b)
    ok = sa == sb and a.rows == b.rows
    return ok, f"{len(a.rows)} steps replayed {'bit-exactly' if ok else 'with differences'}"


def check_expert(n_seeds=500):
    failures = 0
    for seed in range(n_seeds):
        scene = sim.sample_scene(np.random.default_rng(seed))
        try:
            dm.demonstrate(scene)
        except Exception:
            failures += 1
    return failures == 0, f"{n_seeds - failures}/{n_seeds} scripted demonstrations succeed"


def check_checkpoint_roundtrip():
    rng = np.random.default_rng(7)
    params = [rng.normal(size=(3, 4)), rng.normal(size=7)]
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "x.ckpt"
        save_params(path, params, {"kind": "test"}, seed=1)
        _, loaded = load_params(path)
    ok = all(np.array_equal(a, b) for a, b in zip(params, loaded))
    return ok, "identical" if ok else "parameters differ after reload"


def check_trajectory_error_oracles():
    a = np.zeros((200, 3))
    b = a + [0.01, 0.0, 0.0]
    z = trajectory_error(a, a)
    o = trajectory_error(a, b)
    ok = z == (0.0, 0.0) and abs(o[0] - 1.0) < 1e-12 and abs(o[1] - 1.0) < 1e-12
    return ok, f"identical -> {z}, 1 cm shift -> ({o[0]:.3f}, {o[1]:.3f})"


def _tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode() + p.read_bytes())
    return h.hexdigest()


def check_dataset_reproducible(n=20, seed=0):
    from . import dataset as ds

    with tempfile.TemporaryDirectory() as tmp:
        digests = []
        for run in ("a", "b"):
            ds.save_dataset(ds.build_dataset(n, seed), Path(tmp) / run)
            digests.append(_tree_digest(Path(tmp) / run))
    ok = digests[0] == digests[1]
    return ok, f"{n} demos, sha256 {digests[0][:12]}" + ("" if ok else f" vs {digests[1][:12]}")


CHECKS = [
    ("dense finite-difference gradient", check_dense_gradient),
    ("conv finite-difference gradient", check_conv_gradient),
    ("gaussian nll finite-difference gradient", check_nll_gradient),
    ("cnmp finite-difference gradient", check_cnmp_gradient),
    ("encoder permutation/duplication invariance", check_permutation_invariance),
    ("sigma positive", check_sigma_positive),
    ("adam first step closed form", check_adam_first_step),
    ("simulator replay", check_sim_replay),
    ("scripted expert success", check_expert),
    ("checkpoint round trip", check_checkpoint_roundtrip),
    ("trajectory error oracles", check_trajectory_error_oracles),
    ("dataset byte reproducibility", check_dataset_reproducible),
]


def run(out=print):
    """Run every check; returns the number of failures."""
    failures = 0
    for name, fn in CHECKS:
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        failures += not ok
        out(f"{'PASS' if ok else 'FAIL'}  {name}: {detail} ({time.perf_counter() - t0:.1f} s)")
    out(f"{len(CHECKS) - failures}/{len(CHECKS)} checks passed (backend {backend.NAME})")
    return failures
