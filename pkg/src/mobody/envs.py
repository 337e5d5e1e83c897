"""Desk-scale continuous-control environments with configurable dynamics shifts.

Two environments stand in for heavyweight physics benchmarks:

* ``pointmass2d`` — a force-controlled mass in the plane, state (x, y, vx, vy),
  driven toward a goal at the origin against linear drag and a constant
  downward pull. Reward is per-step progress toward the goal minus a small
  action cost; episodes end early inside the goal radius.
* ``pendulum`` — state (cos a, sin a, adot) with torque control, angular
  damping, and a restoring term; reward penalizes angle, speed, and torque.

Shifts multiply gravity or friction, or shrink the admissible action range
(kinematic). Reward functions never depend on shifted quantities, so a fixed
(s, a, s') scores identically under any shift of the same environment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .rng import Rng

GOAL_RADIUS = 0.1
_POS_BOUND = 10.0
_VEL_BOUND = 10.0
_PENDULUM_SPEED_BOUND = 8.0
# Pendulum integrates in substeps: symplectic Euler dissipates only when
# friction >= g*dt_sub/2, and the harshest preset (friction x0.1) needs
# dt_sub <= 0.004 at base gravity. 25 substeps of dt=0.05 give 2x margin.
_PENDULUM_SUBSTEPS = 25

# scripted-controller gains (acceleration units for pointmass, torque for pendulum)
_PM_KP = 40.0
_PM_KD = 12.0
_PEND_KP = 6.0
_PEND_KD = 3.0

# medium = expert + N(0, noise^2), calibrated offline so the medium policy's
# return lands near halfway between random and expert on the source env
MEDIUM_NOISE = {"pointmass2d": 6.0, "pendulum": 2.5}

KINEMATIC_PRESETS = {"medium": 0.6, "hard": 0.3}
SHIFT_LEVEL_PRESETS = (0.1, 0.5, 2.0, 5.0)


@dataclass(frozen=True)
class EnvSpec:
    env_id: str
    state_dim: int
    action_dim: int
    dt: float
    horizon: int
    gravity: float       # pointmass: downward accel; pendulum: g
    friction: float      # pointmass: linear drag coeff; pendulum: angular damping
    action_scale: float  # force / torque per unit action
    action_limit: float  # admissible box [-limit, limit]; shrunk by kinematic shift
    shift_kind: str = "none"
    shift_level: float = 1.0


@dataclass(frozen=True)
class ShiftConfig:
    kind: str    # gravity | friction | kinematic
    level: float


BASE_SPECS = {
    "pointmass2d": EnvSpec("pointmass2d", 4, 2, dt=0.1, horizon=200,
                           gravity=0.5, friction=0.5, action_scale=5.0, action_limit=1.0),
    "pendulum": EnvSpec("pendulum", 3, 1, dt=0.05, horizon=200,
                        gravity=9.81, friction=0.2, action_scale=2.0, action_limit=1.0),
}


def base_spec(env_id: str) -> EnvSpec:
    if env_id not in BASE_SPECS:
        raise ValueError(f"unknown env '{env_id}' (have {sorted(BASE_SPECS)})")
    return BASE_SPECS[env_id]


def parse_shift(text: str) -> ShiftConfig:
    """Parse 'gravity:0.5', 'kinematic:medium', 'none', ... into a ShiftConfig."""
    if text in ("none", "", "1.0"):
        return ShiftConfig("none", 1.0)
    kind, _, level_text = text.partition(":")
    if kind not in ("gravity", "friction", "kinematic"):
        raise ValueError(f"unknown shift kind '{kind}'")
    if kind == "kinematic" and level_text in KINEMATIC_PRESETS:
        return ShiftConfig(kind, KINEMATIC_PRESETS[level_text])
    try:
        level = float(level_text)
    except ValueError:
        raise ValueError(f"bad shift level '{level_text}'") from None
    return ShiftConfig(kind, level)


def make_shifted_spec(base: EnvSpec, shift: ShiftConfig) -> EnvSpec:
    """Copy of ``base`` with gravity/friction scaled or the action range shrunk."""
    if shift.kind == "none":
        return base
    if shift.level <= 0:
        raise ValueError(f"shift level must be positive, got {shift.level}")
    if shift.level == 1.0:
        return base
    if shift.kind == "gravity":
        return replace(base, gravity=base.gravity * shift.level,
                       shift_kind="gravity", shift_level=shift.level)
    if shift.kind == "friction":
        return replace(base, friction=base.friction * shift.level,
                       shift_kind="friction", shift_level=shift.level)
    if shift.kind == "kinematic":
        if shift.level > 1.0:
            raise ValueError(f"kinematic level must be in (0, 1], got {shift.level}")
        return replace(base, action_limit=base.action_limit * shift.level,
                       shift_kind="kinematic", shift_level=shift.level)
    raise ValueError(f"unknown shift kind '{shift.kind}'")


def spec_for(env_id: str, shift_text: str = "none") -> EnvSpec:
    return make_shifted_spec(base_spec(env_id), parse_shift(shift_text))


def wrap_angle(a: float) -> float:
    return math.atan2(math.sin(a), math.cos(a))


def reward_fn(spec: EnvSpec, s: np.ndarray, a: np.ndarray, s_next: np.ndarray) -> float:
    """Shared reward r(s, a, s'); identical under source and shifted specs."""
    s = np.asarray(s, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    s_next = np.asarray(s_next, dtype=np.float64)
    if s.shape != (spec.state_dim,) or a.shape != (spec.action_dim,):
        raise ValueError("state/action dims do not match spec")
    if spec.env_id == "pointmass2d":
        d_before = math.hypot(s[0], s[1])
        d_after = math.hypot(s_next[0], s_next[1])
        return (d_before - d_after) / spec.dt - 0.01 * float(a @ a)
    angle = math.atan2(s_next[1], s_next[0])
    return -(angle * angle + 0.1 * s_next[2] ** 2 + 0.001 * float(a @ a))


def env_step(spec: EnvSpec, s: np.ndarray, a: np.ndarray, rng: Rng | None = None):
    """One semi-implicit Euler step. Returns (s_next, reward, done).

    The env itself is deterministic; ``rng`` is accepted for interface
    uniformity with stochastic policies. Actions are clamped to the spec's
    admissible box before anything else. ``done`` marks only environment
    termination (goal reached); episode horizons are the caller's job since
    steps are stateless.
    """
    s = np.asarray(s, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise ValueError("non-finite state")
    if s.shape != (spec.state_dim,) or a.shape != (spec.action_dim,):
        raise ValueError("state/action dims do not match spec")
    a_exec = np.clip(a, -spec.action_limit, spec.action_limit)

    if spec.env_id == "pointmass2d":
        p, v = s[:2], s[2:]
        accel = spec.action_scale * a_exec - spec.friction * v
        accel = accel + np.array([0.0, -spec.gravity])
        v2 = np.clip(v + spec.dt * accel, -_VEL_BOUND, _VEL_BOUND)
        p2 = np.clip(p + spec.dt * v2, -_POS_BOUND, _POS_BOUND)
        s2 = np.concatenate([p2, v2])
        r = reward_fn(spec, s, a_exec, s2)
        done = math.hypot(p2[0], p2[1]) < GOAL_RADIUS
        return s2, r, done

    if spec.env_id == "pendulum":
        angle = math.atan2(s[1], s[0])
        speed = s[2]
        h = spec.dt / _PENDULUM_SUBSTEPS
        torque = spec.action_scale * a_exec[0]
        for _ in range(_PENDULUM_SUBSTEPS):
            accel = -spec.gravity * math.sin(angle) - spec.friction * speed + torque
            speed = min(max(speed + h * accel, -_PENDULUM_SPEED_BOUND),
                        _PENDULUM_SPEED_BOUND)
            angle = angle + h * speed
        s2 = np.array([math.cos(angle), math.sin(angle), speed])
        r = reward_fn(spec, s, a_exec, s2)
        return s2, r, False

    raise ValueError(f"unknown env '{spec.env_id}'")


def reset(spec: EnvSpec, rng: Rng) -> np.ndarray:
    if spec.env_id == "pointmass2d":
        while True:
            p = rng.uniform(-2.0, 2.0, 2)
            if math.hypot(p[0], p[1]) >= 0.5:
                break
        return np.concatenate([p, np.zeros(2)])
    if spec.env_id == "pendulum":
        angle = float(rng.uniform(-math.pi, math.pi))
        speed = float(rng.uniform(-1.0, 1.0))
        return np.array([math.cos(angle), math.sin(angle), speed])
    raise ValueError(f"unknown env '{spec.env_id}'")


def pendulum_energy(spec: EnvSpec, s: np.ndarray) -> float:
    """Kinetic plus potential energy, zero at rest at angle 0."""
    angle = math.atan2(s[1], s[0])
    return 0.5 * s[2] ** 2 + spec.gravity * (1.0 - math.cos(angle))


@dataclass(frozen=True)
class RefPolicyKind:
    tag: str                         # random | medium | expert
    noise_scale: float = 0.0         # used by medium only


def make_policy_kind(tag: str, env_id: str, noise_scale: float | None = None) -> RefPolicyKind:
    if tag not in ("random", "medium", "expert"):
        raise ValueError(f"unknown policy kind '{tag}'")
    if tag == "medium":
        scale = MEDIUM_NOISE[env_id] if noise_scale is None else noise_scale
        return RefPolicyKind(tag, scale)
    return RefPolicyKind(tag)


def _expert_action(spec: EnvSpec, s: np.ndarray) -> np.ndarray:
    if spec.env_id == "pointmass2d":
        p, v = s[:2], s[2:]
        accel_des = -_PM_KP * p - _PM_KD * v
        a = accel_des / spec.action_scale
    else:
        angle = math.atan2(s[1], s[0])
        torque = -_PEND_KP * angle - _PEND_KD * s[2]
        a = np.array([torque / spec.action_scale])
    return np.clip(a, -spec.action_limit, spec.action_limit)


def reference_policy(kind: RefPolicyKind, spec: EnvSpec, s: np.ndarray, rng: Rng) -> np.ndarray:
    """Scripted behavior policies: random, expert (PD), medium (noisy expert)."""
    if kind.tag == "random":
        return rng.uniform(-spec.action_limit, spec.action_limit, spec.action_dim)
    a = _expert_action(spec, s)
    if kind.tag == "medium" and kind.noise_scale > 0:
        a = a + kind.noise_scale * rng.normal(spec.action_dim)
        a = np.clip(a, -spec.action_limit, spec.action_limit)
    return a


def run_episode(spec: EnvSpec, policy_fn, rng: Rng, collect=None) -> float:
    """Roll one episode; returns the undiscounted return.

    ``policy_fn(s, rng) -> action``. When ``collect`` is a list, transition
    tuples (s, a_executed, r, s', done) are appended to it; the stored done
    flag marks environment termination only, not the horizon cutoff.
    """
    s = reset(spec, rng)
    total = 0.0
    for _ in range(spec.horizon):
        a = np.clip(np.asarray(policy_fn(s, rng), dtype=np.float64),
                    -spec.action_limit, spec.action_limit)
        s2, r, done = env_step(spec, s, a)
        total += r
        if collect is not None:
            collect.append((s, a, r, s2, done))
        s = s2
        if done:
            break
    return total
