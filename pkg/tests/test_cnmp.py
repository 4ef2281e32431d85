import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cormp.cnmp import CnmpModel, CnmpTrainer, count_parameters, generate_trajectory, backend
from cormp.errors import ContractViolation, DimensionError, OptimizationError
from cormp.nn import softplus
from cormp.nn.gradcheck import numeric_gradient, relative_error
from cormp.selftest import check_cnmp_gradient
from cormp.trajectory import ContextVector

compiled = backend.compiled_kernels()
needs_compiled = pytest.mark.skipif(compiled is None, reason="compiled kernel not built")


def toy_demos(n=4, points=50, dim=3, seed=0):
    rng = np.random.default_rng(seed)
    t = np.linspace(0, 1, points)
    demos = []
    for _ in range(n):
        c = rng.uniform(-1, 1)
        vals = np.column_stack([np.sin(2 * t + c * k) * c for k in range(1, dim + 1)])
        demos.append((np.column_stack([t, vals]), np.array([c])))
    return demos


def test_architecture_dimensions():
    m = CnmpModel(3, 1, rng=np.random.default_rng(0))
    enc, dec = m.encoder.layers, m.decoder.layers
    assert len(enc) == 3 and len(dec) == 4
    assert enc[0].n_in == 4 and all(l.n_out == 128 for l in enc)
    assert dec[0].n_in == 128 + 1 + 1 and dec[-1].n_out == 6
    assert m.parameter_count == count_parameters(3, 1)


def test_zero_model_query():
    m = CnmpModel(3, 1)
    mu, sigma = m.query(np.zeros(128), [0.2], np.linspace(0, 1, 11))
    assert not np.any(mu)
    np.testing.assert_allclose(sigma, softplus(0.0) + 1e-4)
    assert sigma[0, 0] == pytest.approx(0.6933, abs=1e-4)


def test_single_observation_latent_equals_encoding():
    m = CnmpModel(3, 1, rng=np.random.default_rng(1))
    obs = np.array([[0.3, 0.1, -0.2, 0.5]])
    assert np.array_equal(m.encode_observations(obs), m.encoder.apply(obs[0]))


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 8), seed=st.integers(0, 10_000), reps=st.sampled_from([2, 4, 8]))
def test_latent_permutation_and_duplication_invariance(n, seed, reps):
    rng = np.random.default_rng(seed)
    m = CnmpModel(3, 1, width=32, rng=np.random.default_rng(2))
    obs = rng.normal(size=(n, 4)) * rng.uniform(0.1, 10)
    ref = m.encode_observations(obs)
    assert np.array_equal(ref, m.encode_observations(obs[rng.permutation(n)]))
    assert np.array_equal(ref, m.encode_observations(np.tile(obs, (reps, 1))))


def test_empty_observations_rejected():
    m = CnmpModel(3, 1)
    with pytest.raises(ContractViolation):
        m.encode_observations(np.zeros((0, 4)))


def test_query_errors():
    m = CnmpModel(3, 1)
    with pytest.raises(DimensionError):
        m.query(np.zeros(128), [0.1, 0.2], 0.5)
    with pytest.raises(ContractViolation):
        m.query(np.zeros(128), [0.1], 1.5)
    with pytest.raises(DimensionError):
        m.encode_observations(np.zeros((2, 3)))


def test_context_vector_accepted():
    m = CnmpModel(3, 8, width=16, rng=np.random.default_rng(0))
    ctx = ContextVector(np.full(8, 0.1), "autoencoder_latent")
    mu, sigma = m.predict(np.zeros((1, 4)), ctx, 0.5)
    assert mu.shape == (3,) and sigma.shape == (3,)


def test_sigma_positive_on_random_queries():
    rng = np.random.default_rng(3)
    m = CnmpModel(3, 1, rng=rng)
    m.theta *= 5.0  # push the sigma head into saturation
    for _ in range(1000):
        _, sigma = m.predict(rng.normal(size=(int(rng.integers(1, 6)), 4)) * 3,
                             rng.uniform(-1, 1, 1), rng.uniform(0, 1))
        assert np.all(sigma > 0)


def test_full_cnmp_gradient():
    ok, detail = check_cnmp_gradient()
    assert ok, detail


@pytest.mark.parametrize("kernels", [backend.python_kernels,
                                     pytest.param(compiled, marks=needs_compiled)],
                         ids=["python", "cython"])
def test_full_cnmp_finite_differences_default_shape(kernels):
    rng = np.random.default_rng(4)
    m = CnmpModel(3, 1, width=10, rng=rng)
    tr = CnmpTrainer(m, kernels=kernels)
    obs, tgt = rng.normal(size=(3, 4)), rng.normal(size=(2, 4))
    tr.loss_and_grad(obs, [0.4], tgt)
    analytic = m.grad.copy()
    numeric = numeric_gradient(lambda: tr.loss_and_grad(obs, [0.4], tgt), m.theta)
    assert relative_error(analytic, numeric) < 1e-4


@needs_compiled
@pytest.mark.parametrize("context_dim", [0, 1, 8])
def test_compiled_matches_fallback(context_dim):
    rng = np.random.default_rng(5)
    m = CnmpModel(3, context_dim, rng=rng)
    obs, tgt = rng.normal(size=(4, 4)), rng.normal(size=(3, 4))
    ctx = rng.uniform(-1, 1, context_dim)
    out = []
    for k in (compiled, backend.python_kernels):
        loss = CnmpTrainer(m, kernels=k).loss_and_grad(obs, ctx, tgt)
        out.append((loss, m.grad.copy()))
    assert out[0][0] == pytest.approx(out[1][0], rel=1e-13)
    np.testing.assert_allclose(out[0][1], out[1][1], rtol=1e-10, atol=1e-14)


@needs_compiled
def test_compiled_adam_matches_fallback():
    rng = np.random.default_rng(6)
    states = []
    for k in (compiled, backend.python_kernels):
        th, m, v = rng.normal(size=50), np.zeros(50), np.zeros(50)
        r = np.random.default_rng(7)
        th = np.random.default_rng(8).normal(size=50)
        for step in range(1, 20):
            assert k.adam_update(th, r.normal(size=50), m, v, 1e-3, 0.9, 0.999, 1e-8, step)
        states.append(th)
    np.testing.assert_allclose(states[0], states[1], rtol=1e-13)


@pytest.mark.parametrize("kernels", [backend.python_kernels,
                                     pytest.param(compiled, marks=needs_compiled)],
                         ids=["python", "cython"])
def test_adam_kernel_refuses_nonfinite(kernels):
    th, g = np.ones(4), np.array([0.0, np.inf, 0.0, 0.0])
    m, v = np.zeros(4), np.zeros(4)
    assert not kernels.adam_update(th, g, m, v, 1e-3, 0.9, 0.999, 1e-8, 1)
    np.testing.assert_array_equal(th, 1.0)


def test_train_step_determinism():
    demos = toy_demos()
    losses = []
    for _ in range(2):
        m = CnmpModel(3, 1, width=32, rng=np.random.default_rng(9))
        tr = CnmpTrainer(m)
        rng = np.random.default_rng(10)
        losses.append([tr.train_step(demos, rng) for _ in range(20)])
        assert tr.step_count == 20
    assert losses[0] == losses[1]


def test_sample_respects_observation_bounds():
    demos = toy_demos()
    tr = CnmpTrainer(CnmpModel(3, 1, width=8), obs_max=5)
    rng = np.random.default_rng(11)
    counts = set()
    for _ in range(500):
        idx, obs, tgt = tr.sample(demos, rng)
        counts.add(obs.shape[0])
        assert tgt.shape == (1, 4)
        assert len({tuple(r) for r in obs}) == obs.shape[0]  # without replacement
    assert counts == {1, 2, 3, 4, 5}


def test_loss_decreases_on_toy_set():
    demos = toy_demos(n=6)
    m = CnmpModel(3, 1, width=64, rng=np.random.default_rng(12))
    tr = CnmpTrainer(m, lr=1e-3)
    rng = np.random.default_rng(13)
    losses = [tr.train_step(demos, rng) for _ in range(3000)]
    assert np.mean(losses[-500:]) < np.mean(losses[:500])


def test_constant_trajectory_approaches_sigma_floor_bound():
    t = np.linspace(0, 1, 20)
    demos = [(np.column_stack([t, np.zeros((20, 1))]), np.zeros(0))]
    m = CnmpModel(1, 0, width=16, rng=np.random.default_rng(14))
    tr = CnmpTrainer(m, lr=1e-3)
    rng = np.random.default_rng(15)
    losses = [tr.train_step(demos, rng) for _ in range(5000)]
    floor_bound = 0.5 * math.log(2 * math.pi) + math.log(1e-4)  # NLL with sigma at the floor
    # sigma shrinks toward the floor: far below the unit-sigma loss, never below the bound
    assert np.mean(losses[-1000:]) < 0.5 * math.log(2 * math.pi) - 3.0
    assert min(losses) > floor_bound


def test_nonfinite_loss_aborts_with_diagnostics():
    demos = toy_demos(n=2)
    m = CnmpModel(3, 1, width=8, rng=np.random.default_rng(16))
    m.theta[:] = np.nan
    with pytest.raises(OptimizationError, match=r"demonstration \d+ at step 1"):
        CnmpTrainer(m).train_step(demos, np.random.default_rng(0))
    with pytest.raises(ContractViolation):
        CnmpTrainer(m).train_step([], np.random.default_rng(0))


def test_generate_trajectory_grid_passthrough():
    m = CnmpModel(3, 1, width=8, rng=np.random.default_rng(17))
    grid = np.linspace(0, 1, 200)
    mu, sigma = generate_trajectory(m, np.zeros((1, 4)), [0.0], grid)
    assert mu.shape == (200, 3) and np.all(sigma > 0)
    with pytest.raises(ContractViolation):
        generate_trajectory(m, np.zeros((1, 4)), [0.0], grid[::-1])


def test_trained_probe_reproduces_conditioning():
    demos = toy_demos(n=3, points=40)
    m = CnmpModel(3, 1, width=64, rng=np.random.default_rng(18))
    tr = CnmpTrainer(m, lr=1e-3)
    rng = np.random.default_rng(19)
    for _ in range(8000):
        tr.train_step(demos, rng)
    points, ctx = demos[0]
    cond = points[[0, 20]]
    mu, sigma = generate_trajectory(m, cond, ctx, cond[:, 0])
    assert np.all(np.abs(mu - cond[:, 1:]) < 2 * sigma + 0.05)


def test_checkpoint_round_trip(tmp_path):
    m = CnmpModel(3, 1, width=16, rng=np.random.default_rng(20))
    m.save(tmp_path / "m.ckpt", seed=20, metadata={"phase": "cor"})
    m2, header = CnmpModel.load(tmp_path / "m.ckpt")
    assert header["metadata"]["phase"] == "cor" and header["seed"] == 20
    assert np.array_equal(m.theta, m2.theta)
    rng = np.random.default_rng(21)
    for _ in range(100):
        obs, t = rng.normal(size=(2, 4)), rng.uniform()
        assert np.array_equal(m.predict(obs, [0.1], t)[0], m2.predict(obs, [0.1], t)[0])
