import numpy as np
import pytest

from cormp import demonstrator as dm
from cormp import sim
from cormp.errors import SimulationError

CFG = sim.WorldConfig()


def staging_error(demo):
    x_after_pre = demo.context_object - net_dx(demo)
    return x_after_pre - CFG.object_start[0]


def net_dx(demo):
    # object displacement during cor, replayed from the stored gripper path
    state = sim.execute(demo.scene, demo.pre.values)
    x0 = state.object_center[0]
    state = sim.execute(state, demo.cor.values)
    return state.object_center[0] - x0


def test_min_jerk_path_endpoints_and_dwell():
    wp = [(0.0, 0.0, 0.0), (1.0, 0.0, 0.0), (1.0, 0.0, 0.0), (1.0, 2.0, 0.0)]
    path = dm.min_jerk_path(wp, 31)
    assert path.shape == (31, 3)
    np.testing.assert_array_equal(path[0], wp[0])
    np.testing.assert_array_equal(path[-1], wp[-1])
    np.testing.assert_array_equal(path[10:21], np.tile(wp[1], (11, 1)))  # middle segment dwells


def test_min_jerk_segment_profile():
    path = dm.min_jerk_path([(0.0, 0.0, 0.0), (1.0, 0.0, 0.0)], 5)
    s = np.linspace(0, 1, 5)
    np.testing.assert_allclose(path[:, 0], 10 * s ** 3 - 15 * s ** 4 + 6 * s ** 5)


@pytest.mark.parametrize("dead_band,shift,kind", [(0.005, 0.006, "push"), (0.005, -0.006, "pull"),
                                                  (0.005, 0.005, "no_correction"),
                                                  (0.005, -0.005, "no_correction")])
def test_correction_kind(dead_band, shift, kind):
    assert dm.correction_kind(shift, dead_band) == kind


def test_push_scene_moves_object_by_offset():
    demo = dm.demonstrate(sim.initial_state(0.03))
    assert demo.correction_kind == "push"
    assert net_dx(demo) == pytest.approx(0.03 - staging_error(demo), abs=1e-3)
    assert net_dx(demo) == pytest.approx(0.03, abs=1e-3)


def test_pull_scene_moves_object_back():
    demo = dm.demonstrate(sim.initial_state(-0.025))
    assert demo.correction_kind == "pull"
    assert net_dx(demo) == pytest.approx(-0.025, abs=1e-3)
    assert demo.cor.values[:, 2].max() >= CFG.hover_z - 1e-12  # lifts over the object


def test_centred_scene_needs_no_correction():
    demo = dm.demonstrate(sim.initial_state(0.0))
    assert demo.correction_kind == "no_correction"
    assert abs(net_dx(demo)) < CFG.dead_band


def test_demonstration_records_200_points_per_phase():
    demo = dm.demonstrate(sim.initial_state(0.012))
    for traj in (demo.pre, demo.cor, demo.post):
        assert traj.values.shape == (200, 3)
        assert traj.t[0] == 0.0 and traj.t[-1] == 1.0
    assert demo.full.values.shape == (600, 3)
    assert [img.shape for img in demo.images] == [(64, 64), (64, 64)]
    assert all(img.dtype == np.uint8 for img in demo.images)


def test_phase_continuity_and_kind_consistency():
    rng = np.random.default_rng(0)
    for demo in dm.collect(40, rng):
        assert np.linalg.norm(demo.pre.values[-1] - demo.cor.values[0]) < 1e-3
        assert np.linalg.norm(demo.cor.values[-1] - demo.post.values[0]) < 1e-3
        assert dm.correction_kind(net_dx(demo), CFG.dead_band) == demo.correction_kind
        d = demo.context_corridor - staging_error(demo)
        if abs(d) > CFG.dead_band:
            assert net_dx(demo) == pytest.approx(d, abs=1e-3)


def test_scripted_expert_is_perfect_on_500_seeds():
    for seed in range(500):
        scene = sim.sample_scene(np.random.default_rng(seed))
        dm.demonstrate(scene)  # raises SimulationError on any failure


def test_collect_gives_up_after_consecutive_failures(monkeypatch):
    def broken(scene, config=CFG, n_points=200):
        raise SimulationError("always fails")

    monkeypatch.setattr(dm, "demonstrate", broken)
    with pytest.raises(SimulationError):
        dm.collect(1, np.random.default_rng(0), max_failures=10)


def test_test_scenes_stratified_and_unseen():
    train = [sim.sample_scene(np.random.default_rng([3, i])).corridor_offset for i in range(200)]
    scenes = dm.build_test_scenes(np.random.default_rng(1), train)
    kinds = [dm.correction_kind(s.corridor_offset, CFG.dead_band) for s in scenes]
    assert len(scenes) == 25
    assert (kinds.count("push"), kinds.count("no_correction"), kinds.count("pull")) == (9, 6, 10)
    offsets = np.array([s.corridor_offset for s in scenes])
    assert np.all(np.abs(offsets) <= CFG.max_offset)
    assert np.min(np.abs(offsets[:, None] - np.array(train)[None])) >= 1e-4
    assert len(set(offsets)) == 25


def test_test_scenes_impossible_constraint():
    with pytest.raises(SimulationError):
        dm.build_test_scenes(np.random.default_rng(0), counts=(("no_correction", 30),),
                             min_separation=0.001)
