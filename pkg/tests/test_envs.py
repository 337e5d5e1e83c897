import math
from dataclasses import replace

import numpy as np
import pytest

from mobody.envs import (
    ShiftConfig, base_spec, env_step, make_policy_kind, make_shifted_spec,
    parse_shift, pendulum_energy, reference_policy, reset, reward_fn,
    run_episode, spec_for,
)
from mobody.rng import Rng


def test_identity_shift_returns_base():
    base = base_spec("pointmass2d")
    for kind in ("gravity", "friction", "kinematic"):
        assert make_shifted_spec(base, ShiftConfig(kind, 1.0)) == base


def test_gravity_shift_pendulum():
    spec = make_shifted_spec(base_spec("pendulum"), ShiftConfig("gravity", 0.5))
    assert spec.gravity == pytest.approx(4.905)
    assert base_spec("pendulum").gravity == pytest.approx(9.81)


def test_friction_shift_pointmass():
    spec = make_shifted_spec(base_spec("pointmass2d"), ShiftConfig("friction", 5.0))
    assert spec.friction == pytest.approx(2.5)


def test_invalid_shift_levels():
    base = base_spec("pendulum")
    with pytest.raises(ValueError):
        make_shifted_spec(base, ShiftConfig("gravity", 0.0))
    with pytest.raises(ValueError):
        make_shifted_spec(base, ShiftConfig("friction", -1.0))
    with pytest.raises(ValueError):
        make_shifted_spec(base, ShiftConfig("kinematic", 1.5))


def test_parse_shift_presets():
    assert parse_shift("kinematic:medium").level == 0.6
    assert parse_shift("kinematic:hard").level == 0.3
    assert parse_shift("gravity:5.0") == ShiftConfig("gravity", 5.0)
    assert parse_shift("none").kind == "none"
    with pytest.raises(ValueError):
        parse_shift("wind:2.0")


def test_pointmass_fixed_point_without_forces():
    spec = replace(base_spec("pointmass2d"), gravity=0.0)
    s = np.array([1.0, 1.0, 0.0, 0.0])
    for _ in range(3):
        s2, r, done = env_step(spec, s, np.zeros(2))
        assert np.array_equal(s2, s)
        assert r == 0.0
        assert not done


def test_pointmass_euler_step_by_hand():
    spec = replace(base_spec("pointmass2d"), gravity=0.0, friction=0.0)
    s = np.array([0.0, 0.0, 1.0, 0.0])
    s2, _, _ = env_step(spec, s, np.zeros(2))
    assert s2[:2] == pytest.approx([0.1, 0.0])
    assert s2[2:] == pytest.approx([1.0, 0.0])


def test_pointmass_goal_terminates():
    spec = base_spec("pointmass2d")
    s = np.array([0.11, 0.0, -1.0, 0.0])
    s2, _, done = env_step(spec, s, np.zeros(2))
    assert done
    assert math.hypot(s2[0], s2[1]) < 0.1


def test_pendulum_equilibrium_is_exact():
    spec = base_spec("pendulum")
    s = np.array([1.0, 0.0, 0.0])
    s2, _, done = env_step(spec, s, np.zeros(1))
    assert np.array_equal(s2, s)
    assert not done


def test_rejects_bad_state():
    spec = base_spec("pendulum")
    with pytest.raises(ValueError):
        env_step(spec, np.array([np.nan, 0.0, 0.0]), np.zeros(1))
    with pytest.raises(ValueError):
        env_step(spec, np.zeros(2), np.zeros(1))


def test_reward_values():
    pm = base_spec("pointmass2d")
    s = np.array([1.0, 0.0, 0.0, 0.0])
    assert reward_fn(pm, s, np.zeros(2), s) == 0.0
    s2 = np.array([0.9, 0.0, 0.0, 0.0])
    assert reward_fn(pm, s, np.zeros(2), s2) == pytest.approx(1.0)
    pend = base_spec("pendulum")
    hang = np.array([-1.0, 0.0, 0.0])
    assert reward_fn(pend, hang, np.zeros(1), hang) == pytest.approx(-math.pi**2)


def test_reward_same_under_shifts():
    base = base_spec("pointmass2d")
    rng = Rng(5)
    s = reset(base, rng)
    a = np.array([0.4, -0.2])
    s2, _, _ = env_step(base, s, a)
    r0 = reward_fn(base, s, a, s2)
    for shift in ("gravity:5.0", "friction:0.1", "kinematic:hard"):
        assert reward_fn(spec_for("pointmass2d", shift), s, a, s2) == r0


def test_shift_identity_bit_identical_steps():
    base = base_spec("pendulum")
    same = make_shifted_spec(base, ShiftConfig("friction", 1.0))
    rng = Rng(11)
    s = reset(base, rng)
    a = np.array([0.7])
    out_a = env_step(base, s, a)
    out_b = env_step(same, s, a)
    assert np.array_equal(out_a[0], out_b[0]) and out_a[1] == out_b[1]


@pytest.mark.parametrize("shift", ["none", "gravity:5.0", "friction:0.1", "friction:5.0"])
def test_pendulum_energy_nonincreasing_passive(shift):
    spec = spec_for("pendulum", shift)
    tol = 1e-6 * spec.dt
    for seed in range(20):
        rng = Rng(seed)
        s = reset(spec, rng)
        for _ in range(200):
            e0 = pendulum_energy(spec, s)
            s, _, _ = env_step(spec, s, np.zeros(1))
            assert pendulum_energy(spec, s) - e0 <= tol


def test_random_policy_deterministic_given_rng():
    spec = base_spec("pointmass2d")
    kind = make_policy_kind("random", spec.env_id)
    s = reset(spec, Rng(0))
    a1 = reference_policy(kind, spec, s, Rng(3))
    a2 = reference_policy(kind, spec, s, Rng(3))
    assert np.array_equal(a1, a2)
    assert np.all(np.abs(a1) <= spec.action_limit)


def test_medium_with_zero_noise_is_expert():
    spec = base_spec("pendulum")
    s = reset(spec, Rng(1))
    expert = make_policy_kind("expert", spec.env_id)
    medium = make_policy_kind("medium", spec.env_id, noise_scale=0.0)
    assert np.array_equal(reference_policy(expert, spec, s, Rng(0)),
                          reference_policy(medium, spec, s, Rng(0)))


def test_expert_action_zero_at_goal():
    spec = base_spec("pointmass2d")
    s = np.zeros(4)
    a = reference_policy(make_policy_kind("expert", spec.env_id), spec, s, Rng(0))
    assert np.allclose(a, 0.0, atol=1e-12)


def test_policy_ordering_on_source_env():
    for env_id in ("pointmass2d", "pendulum"):
        spec = base_spec(env_id)
        means = {}
        for tag in ("expert", "medium", "random"):
            kind = make_policy_kind(tag, env_id)
            rets = []
            for seed in range(3):
                rng = Rng(100 + seed)
                for _ in range(20):
                    ep = rng.spawn()
                    rets.append(run_episode(
                        spec, lambda s, r: reference_policy(kind, spec, s, r), ep))
            means[tag] = np.mean(rets)
        assert means["expert"] >= means["medium"] >= means["random"]
