import math
import threading

import numpy as np
import pytest

from cormp import dataset as ds
from cormp import demonstrator as dm
from cormp import pipeline as pl
from cormp import sim
from cormp.cnmp import CnmpModel
from cormp.errors import ContractViolation, DataError, SimulationError
from cormp.normalization import MinMax, ZScore
from cormp.trajectory import Trajectory


@pytest.fixture(scope="module")
def small():
    return ds.build_dataset(10, seed=1)


@pytest.fixture(scope="module")
def scenes():
    return dm.build_test_scenes(np.random.default_rng(0))


_seen = threading.local()  # state at the last observation, per worker thread


class ExpertPrimitive:
    """Stands in for a trained CNMP by replaying the scripted expert."""

    def __init__(self, phase, config=sim.WorldConfig(), fail=False):
        self.phase, self.config, self.fail = phase, config, fail

    def generate(self, start, raw_context, grid):
        if self.fail:
            raise SimulationError("injected failure")
        state = getattr(_seen, "state", None)
        if self.phase == "pre":
            wp = dm.pre_waypoints(self.config)
        elif self.phase == "cor":
            wp = dm.cor_waypoints(state, self.config)[0]
        else:
            wp = dm.post_waypoints(state, self.config)
        return dm.min_jerk_path(wp, grid.size), None


def expert_models(fail_phase=None):
    prims = {p: ExpertPrimitive(p, fail=(p == fail_phase)) for p in pl.PHASES}
    return pl.ModelSet("pc", 0, prims)


@pytest.fixture
def live_state(monkeypatch):
    """Let expert primitives see the state the robot observes."""
    real = pl.observe

    def observe(models, state, phase, config):
        _seen.state = state
        return real(models, state, phase, config)

    monkeypatch.setattr(pl, "observe", observe)


# -- trajectory error ----------------------------------------------------------------

def test_trajectory_error_oracles():
    rng = np.random.default_rng(0)
    path = rng.normal(size=(200, 3))
    assert pl.trajectory_error(path, path) == (0.0, 0.0)
    shifted = path + [0.01, 0.0, 0.0]
    mean, mx = pl.trajectory_error(shifted, path)
    assert mean == pytest.approx(1.0) and mx == pytest.approx(1.0)
    bump = path.copy()
    bump[7] += [0.0, 0.03, 0.04]  # one 5 cm outlier
    assert pl.trajectory_error(bump, path) == pytest.approx((5.0 / 200, 5.0))


def test_trajectory_error_contract():
    t = np.linspace(0, 1, 200)
    with pytest.raises(ContractViolation):
        pl.trajectory_error(np.zeros((200, 3)), np.zeros((199, 3)))
    a = Trajectory(t, np.zeros((200, 3)), "cor")
    b = Trajectory(t ** 2, np.zeros((200, 3)), "cor")
    with pytest.raises(ContractViolation):
        pl.trajectory_error(a, b)
    assert pl.trajectory_error(a, Trajectory(t, np.zeros((200, 3)), "cor")) == (0.0, 0.0)


# -- configuration ---------------------------------------------------------------------

def test_monolithic_parameters_match_segmented_sum():
    cfg = pl.ExperimentConfig(context_mode="mono")
    mono = CnmpModel(3, 1, cfg.monolithic_width()).parameter_count
    assert abs(mono / cfg.segmented_parameter_count() - 1) < 0.01


def test_config_validation_and_round_trip():
    cfg = pl.ExperimentConfig(context_mode="ae", seeds=[4, 5])
    assert cfg.seeds == (4, 5)
    assert pl.ExperimentConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.lr == 1e-4 and cfg.ae_epochs == 70 and cfg.ae_lr == 3e-4
    for bad in ({"context_mode": "x"}, {"budget": 0}, {"seeds": ()}):
        with pytest.raises(ContractViolation):
            pl.ExperimentConfig(**bad)
    with pytest.raises(ContractViolation):
        pl.ExperimentConfig.from_dict({"bogus": 1})


def test_streams_are_independent_and_repeatable():
    a = pl.stream(0, "cor/pc", 1).random(3)
    assert np.array_equal(a, pl.stream(0, "cor/pc", 1).random(3))
    assert not np.array_equal(a, pl.stream(0, "cor/pc", 2).random(3))
    assert not np.array_equal(a, pl.stream(1, "cor/pc", 1).random(3))
    assert not np.array_equal(a, pl.stream(0, "post/pc", 1).random(3))


# -- primitives -----------------------------------------------------------------------

def random_primitive(relative):
    model = CnmpModel(3, 1, width=16, rng=np.random.default_rng(2))
    values = ZScore((0.0, -0.1, 0.02), (0.05, 0.1, 0.01))
    return pl.Primitive("cor/pc", model, values, MinMax((-0.03,), (0.03,)), relative)


@pytest.mark.parametrize("relative", [False, True])
def test_generated_path_starts_at_gripper(relative):
    prim = random_primitive(relative)
    start = (0.013, -0.05, 0.01)
    path, std = prim.generate(start, [0.01], np.linspace(0, 1, 200))
    np.testing.assert_allclose(path[0], start, atol=1e-15)
    assert path.shape == (200, 3) and np.all(std > 0)


def test_primitive_round_trip(tmp_path):
    prim = random_primitive(True)
    prim.save(tmp_path / "p.ckpt", seed=3)
    back, header = pl.Primitive.load(tmp_path / "p.ckpt")
    assert back.relative and back.values == prim.values and back.context == prim.context
    grid = np.linspace(0, 1, 50)
    assert np.array_equal(prim.generate((0, -0.05, 0.01), [0.0], grid)[0],
                          back.generate((0, -0.05, 0.01), [0.0], grid)[0])
    CnmpModel(3, 1, width=8).save(tmp_path / "bare.ckpt")
    with pytest.raises(DataError):
        pl.Primitive.load(tmp_path / "bare.ckpt")


def test_training_set_normalisation(small):
    train, val, values, ctx = pl.prepare_training_set(small, "cor", "pc")
    assert len(train) == 5 and len(val) == 5
    points, c = train[0]
    assert points.shape == (200, 4) and c.shape == (1,)
    assert np.all(np.abs(np.array([c for _, c in train])) <= 1.0 + 1e-12)
    pre = pl.prepare_training_set(small, "pre", "pc")
    assert pre[3] is None and pre[0][0][1].shape == (0,)
    with pytest.raises(ContractViolation):
        pl.train_segmented(small, pl.ExperimentConfig(context_mode="ae", budget=1), 0)


def test_validation_nll_improves(small):
    cfg = pl.ExperimentConfig(budget=2000)
    train, val, values, ctx = pl.prepare_training_set(small, "post", "pc")
    prim = pl.train_cnmp("post/pc", train, val, values, ctx, cfg, 0)
    assert len(prim.curve) == 20 and prim.curve[0][0] == 100
    assert prim.curve[-1][2] < prim.curve[0][2]


# -- trial execution ------------------------------------------------------------------

def test_expert_primitives_give_perfect_scores(scenes, live_state):
    models = expert_models()
    traces = []
    results = pl.evaluate(models, scenes, traces=traces)
    rep = pl.report(results)
    assert rep.success_count == 25 and rep.match_count == 25
    assert [row["n"] for row in rep.kinds] == [9, 6, 10]
    assert all(row["decision_match"] == 100.0 and row["success"] == 100.0 for row in rep.kinds)
    assert rep.errors["cor"] == (0.0, 0.0) and rep.errors["post"] == (0.0, 0.0)
    assert all(r.executed and r.cause == "" for r in results)
    for r in results:
        assert math.copysign(1, r.cor_dx) == math.copysign(1, r.corridor_offset) or \
            r.expected_kind == "no_correction"
    assert len(traces) == 25 and set(traces[0].predicted) == set(pl.PHASES)


def test_threads_do_not_change_results(scenes, live_state):
    serial = pl.evaluate(expert_models(), scenes[:6])
    pooled = pl.evaluate(expert_models(), scenes[:6], threads=3)
    assert serial == pooled


def test_aborted_trial_keeps_running_suite(scenes, live_state):
    r = pl.execute_trial(expert_models(fail_phase="post"), scenes[0])
    assert not r.executed and not r.success and r.cause.startswith("aborted")
    assert not math.isnan(r.cor_error_mean) and math.isnan(r.post_error_mean)


def test_skipping_correction_fails_far_offsets(live_state):
    class Lazy(ExpertPrimitive):
        def generate(self, start, raw_context, grid):
            return np.repeat(np.asarray(start, float)[None], grid.size, axis=0), None

    models = expert_models()
    models.primitives["cor"] = Lazy("cor")
    r = pl.execute_trial(models, sim.initial_state(0.03))
    assert r.predicted_kind == "no_correction" and not r.success
    assert r.cause == "corridor contact"


# -- reports ------------------------------------------------------------------------------

def fake_results(seed, n_fail=0):
    out = []
    kinds = ["push"] * 9 + ["no_correction"] * 6 + ["pull"] * 10
    for i, kind in enumerate(kinds):
        ok = i >= n_fail
        out.append(pl.TrialResult(seed, i, 0.001 * i, kind, kind if ok else "no_correction", ok,
                                  0.5 + 0.01 * i, 1.0, 1.5, 2.0 + 0.1 * i, 0.001 * i,
                                  "" if ok else "corridor contact"))
    return out


def test_report_aggregates_over_seeds():
    rep = pl.report(fake_results(0) + fake_results(1, n_fail=3))
    assert rep.success_count == pytest.approx(23.5) and rep.match_count == pytest.approx(23.5)
    push = rep.kinds[0]
    assert push["kind"] == "push" and push["success"] == pytest.approx(100 * (1 + 6 / 9) / 2)
    assert rep.errors["cor"][1] == pytest.approx(0.74)  # max of per-trial means
    assert rep.errors["post"][0] == pytest.approx(1.5)
    with pytest.raises(ContractViolation):
        pl.report([])


def test_report_regeneration_is_byte_identical(tmp_path, scenes, live_state):
    traces = []
    results = pl.evaluate(expert_models(), scenes[:5], traces=traces)
    rep = pl.report(results + fake_results(1))
    pl.write_report(rep, tmp_path, {0: traces})
    before = {p.name: p.read_bytes() for p in tmp_path.rglob("*") if p.is_file()}
    assert {"trials.csv", "summary.csv", "errors.csv", "report.txt", "traces.csv",
            "cor_seed_0.svg"} <= set(before)
    for name in ("summary.csv", "errors.csv", "report.txt", "plots/cor_seed_0.svg"):
        (tmp_path / name).unlink()
    pl.regenerate_report(tmp_path, rep.mode)
    after = {p.name: p.read_bytes() for p in tmp_path.rglob("*") if p.is_file()}
    assert before == after
    assert pl.read_trials_csv(tmp_path / "trials.csv") == rep.trials


def test_summary_mentions_reference_values():
    text = pl.summary_text(pl.report(fake_results(0)))
    assert "0.80" in text and "1.69" in text
    assert text.count("\n  seed ") == 1


# -- model directories --------------------------------------------------------------------

def test_model_sets_round_trip_and_fingerprint(tmp_path, small):
    cfg = pl.ExperimentConfig(budget=20, seeds=(0,))
    sets, _ = pl.train_all(small, cfg)
    pl.save_model_sets(sets, tmp_path, cfg, small.fingerprint)
    back, manifest = pl.load_model_sets(tmp_path, small.fingerprint)
    assert manifest["mode"] == "pc" and back[0].seed == 0
    for k in pl.PHASES:
        assert np.array_equal(back[0].primitives[k].model.theta, sets[0].primitives[k].model.theta)
    with pytest.raises(DataError, match="different dataset"):
        pl.load_model_sets(tmp_path, "0" * 64)
    with pytest.raises(DataError):
        pl.load_model_sets(tmp_path / "missing")


@pytest.mark.slow
def test_trial_on_training_context_succeeds():
    data = ds.build_dataset(6, seed=2, with_tests=False)
    # 3 training demos; 30k single-target updates still leave pre off by 2 cm
    cfg = pl.ExperimentConfig(budget=100_000, seeds=(0,))
    sets, _ = pl.train_all(data, cfg)
    demo = data.train[0]
    r = pl.execute_trial(sets[0], sim.initial_state(demo.context_corridor))
    assert r.success, r
