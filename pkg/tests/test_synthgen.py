import math

import numpy as np
import pytest

from omnitraj.numerics import kernels
from omnitraj.synthgen import (
    CANONICAL_SETUPS,
    SETUP_3,
    AgentParams,
    GenSpec,
    attach_synthetic_pose,
    build_cross_setup_benchmark,
    closed_form_positions,
    evaluate_scene,
    generate,
    pose_template,
    simulate_social,
)
from omnitraj.trajstore import CueKind, ResampleError, SceneRecord, make_track, resample


def test_canonical_setups():
    assert [(s.fps, s.t_obs, s.t_pred) for s in CANONICAL_SETUPS] == [(5.0, 10, 20), (2.5, 4, 8), (1.0, 3, 3)]


def test_const_velocity_analytic():
    p = AgentParams(np.zeros(2), 0.0, 1.0, 0.0)
    frames = np.arange(51)
    pos = closed_form_positions(p, frames / 25.0)
    np.testing.assert_allclose(pos[:, 0], 0.04 * frames, atol=1e-12)
    np.testing.assert_array_equal(pos[:, 1], 0.0)


def test_turning_circle_radius():
    p = AgentParams(np.zeros(2), 0.0, 1.0, math.pi / 2)
    pos = closed_form_positions(p, np.linspace(0, 4, 401))
    centre = np.array([0.0, 2 / math.pi])
    np.testing.assert_allclose(np.linalg.norm(pos - centre, axis=1), 2 / math.pi, atol=1e-12)


def test_social_head_on_keeps_distance():
    start = np.array([[-3.0, 0.0], [3.0, 0.0]])
    vel = np.array([[1.0, 0.0], [-1.0, 0.0]])
    free = simulate_social(start, vel, 25.0, 250, strength=0.0)
    pushed = simulate_social(start, vel, 25.0, 250)
    def closest(p):
        return np.linalg.norm(p[:, 0] - p[:, 1], axis=1).min()
    assert closest(pushed) > closest(free)


def test_social_no_nan_ten_agents():
    spec = GenSpec(kind="social", n_scenes=2, n_agents=10, duration_s=30.0, seed=3)
    for scene in generate(spec):
        assert len(scene.agents) == 10
        assert all(np.all(np.isfinite(a.xy)) for a in scene.agents)


def test_generate_deterministic():
    spec = GenSpec(kind="turning", n_scenes=5, n_agents=2, noise_std=0.05, seed=9)
    a, b = generate(spec), generate(spec)
    for sa, sb in zip(a, b):
        for x, y in zip(sa.agents, sb.agents):
            assert x.xy.tobytes() == y.xy.tobytes()


@pytest.mark.parametrize("kind", ["const_velocity", "turning"])
@pytest.mark.parametrize("fps", [5.0, 2.5, 1.0])
def test_resample_matches_closed_form(kind, fps):
    spec = GenSpec(kind=kind, n_scenes=3, n_agents=2, seed=4)
    for i, scene in enumerate(generate(spec)):
        low = resample(scene, fps)
        direct = evaluate_scene(spec, i, fps)
        for j, agent in enumerate(low.agents):
            np.testing.assert_array_equal(agent.xy, direct[:, j])


def test_genspec_validation():
    with pytest.raises(ValueError):
        GenSpec(n_scenes=0)
    with pytest.raises(ValueError):
        GenSpec(speed_range=(-1.0, 1.0))
    with pytest.raises(ValueError):
        GenSpec(noise_std=-0.1)
    with pytest.raises(ValueError):
        GenSpec(kind="spiral")


def test_benchmark_construction():
    bench = build_cross_setup_benchmark(GenSpec(n_scenes=100, seed=2))
    assert {s.fps for s in bench.train} == {5.0, 2.5}
    assert {s.fps for s in bench.test} == {1.0}
    assert not bench.train_scene_ids & bench.test_scene_ids
    assert {s.scene_id for s in bench.train} <= bench.train_scene_ids
    assert all((s.t_obs, s.t_pred) == (3, 3) for s in bench.test)


def test_benchmark_indivisible_base():
    with pytest.raises(ResampleError):
        build_cross_setup_benchmark(GenSpec(n_scenes=12, base_fps=24.0))


def test_social_kernel_backends_agree():
    from omnitraj.numerics import _kernels_py

    rng = np.random.default_rng(0)
    pos, vel = rng.uniform(-2, 2, (6, 2)), rng.normal(size=(6, 2))
    a = kernels.social_integrate(pos, vel, 200, 0.04, 1.0, 2.0)
    b = _kernels_py.social_integrate(pos, vel, 200, 0.04, 1.0, 2.0)
    np.testing.assert_allclose(np.asarray(a), np.asarray(b), rtol=1e-12, atol=1e-12)


def _still_scene():
    return SceneRecord("still", 25.0, (make_track("a", np.arange(5), np.ones((5, 2))),))


def test_pose_stationary_is_template():
    scene = attach_synthetic_pose(_still_scene(), seed=1)
    pose = scene.agents[0].cues[CueKind.P3]
    np.testing.assert_array_equal(pose, np.repeat(pose_template(17)[None], 5, axis=0))


def test_pose_centroid_on_trajectory():
    scene = generate(GenSpec(kind="turning", n_scenes=1, n_agents=2, seed=5))[0]
    posed = attach_synthetic_pose(scene, seed=2)
    for agent in posed.agents:
        np.testing.assert_allclose(agent.cues[CueKind.P3].mean(axis=1), 0.0, atol=1e-12)


def test_pose_deterministic():
    scene = generate(GenSpec(n_scenes=1, seed=5))[0]
    a = attach_synthetic_pose(scene, seed=7).agents[0].cues[CueKind.P3]
    b = attach_synthetic_pose(scene, seed=7).agents[0].cues[CueKind.P3]
    assert a.tobytes() == b.tobytes()


def test_setup3_windows_one_per_scene():
    bench = build_cross_setup_benchmark(GenSpec(n_scenes=60, seed=1), n_test_scenes=10)
    assert len(bench.test) == 10
    assert all(s.fps == SETUP_3.fps for s in bench.test)
