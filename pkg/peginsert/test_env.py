#!/usr/bin/env python3
"""Test script for the contact environment."""

import logging
import math
import sys

import numpy as np
import pytest

from peginsert.config import load_config
from peginsert.env import (
    HOLE_SLOT,
    OBS_SIZE,
    WRENCH_SLOT,
    Action,
    EefState,
    EnvConfig,
    HoleTarget,
    InsertionEnv,
    ObservationMask,
    VectorEnv,
    Wrench,
    compute_wrench,
    make_observation,
    success,
)
from peginsert.errors import EpisodeFinished, InvalidConfig
from peginsert.geometry import (
    CrossSection,
    bottom_face_contact_samples,
    get_shape,
    hole_for_clearance,
    overlap_depth,
    points_inside,
)

# Set up logging
logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    handlers=[logging.StreamHandler(sys.stdout)],
)
logger = logging.getLogger("test_env")

PEG = get_shape("tr")
HOLE = hole_for_clearance(PEG, 4.0)

# Upper 1% point of chi-square with 24 degrees of freedom
CHI2_24_P01 = 42.98


def _env(mask=ObservationMask.VFTM, **overrides):
    return InsertionEnv(EnvConfig(**overrides), PEG, HOLE, mask)


def _quiet(**overrides):
    """Noise-free config, hole pinned at the origin with zero yaw unless overridden."""
    settings = dict(
        obs_noise=0.0,
        ft_noise=0.0,
        hole_low=(0.0, 0.0),
        hole_high=(0.0, 0.0),
        randomize_yaw=False,
    )
    settings.update(overrides)
    return settings


def test_reset_is_deterministic():
    first, target_a = _env().reset(7)
    second, target_b = _env().reset(7)
    assert np.array_equal(target_a.p_h, target_b.p_h)
    assert target_a.yaw == target_b.yaw
    assert np.array_equal(first.vector(), second.vector())

    _, target_c = _env().reset(8)
    assert not np.array_equal(target_a.p_h, target_c.p_h)


def test_reset_start_pose_and_domain():
    env = _env()
    obs, target = env.reset(3)
    assert np.array_equal(obs.p_ee, [0.0, 0.0, 10.0])
    assert obs.theta_z == 0.0
    assert -15.0 <= target.p_h[0] <= 15.0 and -15.0 <= target.p_h[1] <= 15.0
    assert target.p_h[2] == 0.0
    assert -math.pi <= target.yaw <= math.pi
    assert np.array_equal(obs.wrench_norm, np.zeros(6))


def test_noise_free_observation():
    env = _env(obs_noise=0.0)
    obs, target = env.reset(11)
    assert np.array_equal(obs.p_h_observed, target.p_h)


def test_hole_position_is_uniform():
    env = _env(obs_noise=0.0)
    bins = 5
    counts = np.zeros((bins, bins))
    for seed in range(10_000):
        _, target = env.reset(seed)
        cell = np.floor((target.p_h[:2] + 15.0) / 30.0 * bins).astype(int)
        cell = np.clip(cell, 0, bins - 1)
        counts[cell[0], cell[1]] += 1
    expected = 10_000 / bins**2
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    logger.info(f"chi-square over {bins}x{bins} cells: {chi2:.2f}")
    assert chi2 < CHI2_24_P01


def test_zero_action_in_free_space():
    env = _env()
    obs, _ = env.reset(2)
    obs, wrench, done, info = env.step(Action())
    assert np.array_equal(info["p_ee"], [0.0, 0.0, 10.0])
    assert np.array_equal(wrench.raw, np.zeros(6))
    assert np.array_equal(obs.wrench_norm, np.zeros(6))
    assert not done


def test_press_into_plate():
    # Hole far away so every sample is over solid plate
    env = _env(**_quiet(hole_low=(40.0, 40.0), hole_high=(40.0, 40.0), start_height=0.3))
    env.reset(0)
    _, wrench, _, info = env.step(Action(dz=-0.5))
    logger.info(f"Raw wrench after pressing 0.2 mm: {wrench.raw}")
    assert info["p_ee"][2] == pytest.approx(-0.2, abs=1e-12)
    assert wrench.force[2] == pytest.approx(2.0, abs=1e-9)
    assert wrench.normalized[2] == pytest.approx(2.0 / 40.0, abs=1e-9)
    # Symmetric full-face press
    assert abs(wrench.torque[0]) < 0.05
    assert abs(wrench.torque[1]) < 0.05
    assert not info["in_hole"]


def test_penetration_is_capped():
    config = _quiet(hole_low=(40.0, 40.0), hole_high=(40.0, 40.0), start_height=0.3)
    env = _env(**config)
    env.reset(0)
    depths = []
    for _ in range(8):
        _, wrench, _, info = env.step(Action(dz=-2.0))
        depths.append(info["penetration"])
        assert wrench.normalized[2] <= 1.0
    logger.info(f"Penetration sequence: {depths}")
    assert depths == pytest.approx([1.0, 2.0, 3.0, 4.0, 4.0, 4.0, 4.0, 4.0], abs=1e-12)
    assert env.config.max_penetration == 4.0
    assert env.peak_force == pytest.approx(1.0, abs=1e-12)


def test_sliding_onto_plate_rides_up():
    # Peg half over the hole, pressed, then dragged sideways onto solid plate without descending
    env = _env(**_quiet(hole_low=(10.0, 0.0), hole_high=(10.0, 0.0), start_height=0.3))
    env.reset(0)
    for _ in range(2):
        _, wrench, _, info = env.step(Action(dz=-2.0))
    pressed_fz = wrench.normalized[2]
    pressed_z = info["p_ee"][2]
    assert pressed_fz > 0.0

    forces, heights = [pressed_fz], [pressed_z]
    for _ in range(6):
        _, wrench, _, info = env.step(Action(dx=-2.0))
        forces.append(wrench.normalized[2])
        heights.append(info["p_ee"][2])
    logger.info(f"F_z while dragging: {forces}, heights: {heights}")

    assert all(b <= a + 1e-9 for a, b in zip(forces, forces[1:]))
    assert heights[-1] > pressed_z
    assert env.peak_force == pytest.approx(pressed_fz, abs=1e-9)

    # Descending again still presses harder, one penetration step at a time
    _, wrench, _, _ = env.step(Action(dz=-2.0))
    assert forces[-1] < wrench.normalized[2]
    assert wrench.normalized[2] <= forces[-1] + env.config.contact_stiffness * 1.0 / 40.0 + 1e-9


def test_horizon_ends_episode():
    env = _env()
    env.reset(5)
    for step in range(1, 111):
        _, _, done, info = env.step(Action())
        assert info["step"] == step
        assert done == (step == 110)
    with pytest.raises(EpisodeFinished):
        env.step(Action())


def test_step_before_reset():
    with pytest.raises(EpisodeFinished):
        _env().step(Action())


def test_action_is_clamped():
    env = _env(**_quiet())
    env.reset(0)
    _, _, _, info = env.step(Action(dx=5.0, dy=-5.0, dz=0.5, dtheta_z=1.0))
    applied = info["applied_action"]
    assert applied == Action(2.0, -2.0, 0.5, math.radians(2.0))
    assert np.allclose(info["p_ee"], [2.0, -2.0, 10.5])
    assert info["theta_z"] == pytest.approx(math.radians(2.0))


def test_aligned_descent_succeeds():
    env = _env(**_quiet())
    env.reset(0)
    heights = []
    while True:
        _, wrench, done, info = env.step(Action(dz=-2.0))
        heights.append(info["p_ee"][2])
        assert np.array_equal(wrench.raw, np.zeros(6))
        if done:
            break
    logger.info(f"Descent heights: {heights}")
    assert heights == [8.0, 6.0, 4.0, 2.0, 0.0, -2.0, -4.0]
    assert info["success"]
    assert info["in_hole"]


def test_wall_limits_lateral_motion():
    env = _env(**_quiet())
    env.reset(0)
    for _ in range(6):
        env.step(Action(dz=-2.0))
    assert env.state.in_hole

    for _ in range(10):
        _, wrench, _, info = env.step(Action(dx=2.0))
        depth = overlap_depth(HOLE, env.target.pose, PEG, env.state.pose)
        assert depth <= env.config.wall_penetration + 1e-9
    logger.info(f"Stopped at x={info['p_ee'][0]:.4f} mm with wrench {wrench.raw}")
    assert info["p_ee"][0] < 20.0
    assert info["p_ee"][2] == -2.0
    assert wrench.force[0] < 0.0


def test_edge_press_signature():
    # Circle peg half over a circular hole on its +x side
    peg = CrossSection.circle(10.0)
    target = HoleTarget((15.0, 0.0, 0.0), 0.0, CrossSection.circle(12.0), 20.0)
    config = EnvConfig(ft_noise=0.0)
    state = EefState((0.0, 0.0, -0.2))
    wrench = compute_wrench(peg, state, target, (0.0, 0.0), config)

    samples = bottom_face_contact_samples(peg, state.pose, config.contact_samples)
    supported = ~points_inside(target.shape, target.pose, samples)
    expected_fz = config.contact_stiffness * 0.2 * supported.sum() / len(samples)
    logger.info(f"{supported.sum()} of {len(samples)} samples supported, wrench {wrench.raw}")

    assert 0 < supported.sum() < len(samples)
    assert wrench.force[2] == pytest.approx(expected_fz, abs=1e-9)
    assert wrench.torque[1] > 0.0
    assert abs(wrench.torque[0]) < 0.01 * wrench.torque[1]


def test_free_space_wrench_is_zero_with_noise():
    config = EnvConfig()
    target = HoleTarget((0.0, 0.0, 0.0), 0.0, HOLE, 20.0)
    state = EefState((30.0, 0.0, 0.01))
    wrench = compute_wrench(PEG, state, target, (1.0, 0.0), config, np.random.default_rng(0))
    assert np.array_equal(wrench.raw, np.zeros(6))
    assert np.array_equal(wrench.normalized, np.zeros(6))


def test_friction_opposes_motion():
    config = EnvConfig(ft_noise=0.0)
    target = HoleTarget((40.0, 40.0, 0.0), 0.0, HOLE, 20.0)
    state = EefState((0.0, 0.0, -0.5))
    wrench = compute_wrench(PEG, state, target, (0.0, 1.5), config)
    assert wrench.force[2] == pytest.approx(5.0, abs=1e-9)
    assert wrench.force[0] == pytest.approx(0.0, abs=1e-12)
    assert wrench.force[1] == pytest.approx(-0.3 * 5.0, abs=1e-9)


def test_success_predicate():
    target = HoleTarget((4.0, -3.0, 0.0), 0.3, HOLE, 20.0)
    assert success(PEG, EefState((4.0, -3.0, -2.6), 0.3), target)
    assert not success(PEG, EefState((4.0, -3.0, -2.4), 0.3), target)
    assert success(PEG, EefState((4.0, -3.0, -2.6), 0.3 + 2.0 * math.pi / 3.0), target)
    # Misaligned peg: never succeeds, whatever the depth
    assert not success(PEG, EefState((9.0, -3.0, -15.0), 0.3), target)
    assert not success(PEG, EefState((4.0, -3.0, -15.0), 0.3 + math.pi / 3.0), target)


def test_hole_target_depth():
    with pytest.raises(InvalidConfig):
        HoleTarget((0.0, 0.0, 0.0), 0.0, HOLE, 9.0)
    target = HoleTarget((0.0, 0.0, 1.5), 4.0, HOLE, 12.0)
    assert target.floor_z == -10.5
    assert -math.pi < target.yaw <= math.pi


def test_observation_masks():
    state = EefState((1.0, 2.0, 3.0), 0.5)
    wrench_a = Wrench.from_raw([1, 2, 3, 4, 5, 6], EnvConfig().full_scale)
    wrench_b = Wrench.from_raw([-7, 0, 30, 0, 100, -50], EnvConfig().full_scale)
    hole_a, hole_b = np.array([5.0, 5.0, 0.0]), np.array([-9.0, 1.0, 0.0])

    ftm_a = make_observation(state, wrench_a, hole_a, ObservationMask.FTM).vector()
    ftm_b = make_observation(state, wrench_a, hole_b, ObservationMask.FTM).vector()
    assert np.array_equal(ftm_a, ftm_b)
    assert np.array_equal(ftm_a[HOLE_SLOT], np.zeros(3))

    vm_a = make_observation(state, wrench_a, hole_a, ObservationMask.VM).vector()
    vm_b = make_observation(state, wrench_b, hole_a, ObservationMask.VM).vector()
    assert np.array_equal(vm_a, vm_b)
    assert np.array_equal(vm_a[WRENCH_SLOT], np.zeros(6))

    full = make_observation(state, wrench_b, hole_b, ObservationMask.VFTM).vector()
    assert full.shape == (OBS_SIZE,)
    assert np.array_equal(full, np.concatenate([[1, 2, 3], wrench_b.normalized, [0.5], hole_b]))
    for mask in ObservationMask:
        masked = make_observation(state, wrench_b, hole_b, mask).vector()
        assert np.array_equal(masked, full * mask.slots())


def test_env_applies_mask():
    obs, _ = _env(ObservationMask.FTM, obs_noise=1.0).reset(4)
    assert np.array_equal(obs.p_h_observed, np.zeros(3))


def test_wrench_normalization():
    wrench = Wrench.from_raw([40.0, -10.0, 20.0, 0.0, -600.0, 250.0], EnvConfig().full_scale)
    assert np.array_equal(wrench.normalized, [1.0, -0.5, 0.5, 0.0, -1.0, 0.5])
    assert np.array_equal(Wrench.zero().normalized, np.zeros(6))


def test_trajectories_are_deterministic():
    rng = np.random.default_rng(1)
    actions = [Action.from_array(a) for a in rng.uniform(-2.0, 2.0, (60, 4))]
    runs = []
    for _ in range(2):
        env = _env()
        obs, _ = env.reset(21)
        record = [obs.vector()]
        for action in actions:
            obs, wrench, done, info = env.step(action)
            record.append(np.concatenate([obs.vector(), wrench.raw, info["p_ee"]]))
            if done:
                break
        runs.append(np.concatenate(record))
    assert np.array_equal(runs[0], runs[1])


def test_vector_env_auto_reset():
    envs = [_env(horizon=3) for _ in range(2)]
    vector = VectorEnv(envs, seed=5)
    first = vector.reset()
    holes = [env.target.p_h.copy() for env in envs]
    assert len(first) == 2
    assert not np.array_equal(holes[0], holes[1])

    for _ in range(3):
        _, _, dones, infos = vector.step([Action(), Action()])
    assert dones.tolist() == [True, True]
    assert all("terminal_observation" in info for info in infos)
    assert all(env.steps == 0 and not env.done for env in envs)
    assert not np.array_equal(envs[0].target.p_h, holes[0])

    # A member's seed stream does not depend on how many members there are
    wider = VectorEnv([_env(horizon=3) for _ in range(3)], seed=5)
    wider.reset()
    assert np.array_equal(wider.envs[0].target.p_h, holes[0])


def test_env_config_from_defaults():
    assert EnvConfig.from_config(load_config()) == EnvConfig()


def test_env_config_validation():
    with pytest.raises(InvalidConfig):
        EnvConfig(hole_low=(1.0, 0.0), hole_high=(0.0, 0.0))
    with pytest.raises(InvalidConfig):
        EnvConfig(contact_stiffness=0.0)
    with pytest.raises(InvalidConfig):
        EnvConfig(hole_depth=5.0)
    with pytest.raises(InvalidConfig):
        EnvConfig(full_scale=(1.0, 1.0, 1.0))


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
