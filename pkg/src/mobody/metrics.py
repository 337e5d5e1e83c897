"""Evaluation metrics: episodic returns, normalized scores, model rollout MSE.

Score anchors are the mean returns of the scripted random and expert policies
on the target environment, computed over a fixed number of seeded episodes.
Anchor computation is deterministic: the episode seed stream derives from the
(env, shift) key alone, so recomputing reproduces cached anchors bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .dynamics import DynamicsEnsemble
from .envs import EnvSpec, env_step, make_policy_kind, reference_policy, reset, run_episode
from .policy import PolicyAgent
from .rng import Rng


@dataclass(frozen=True)
class ScoreAnchors:
    key: str             # "<env_id>/<shift_kind>:<shift_level>"
    random_score: float
    expert_score: float

    def __post_init__(self):
        if not self.expert_score > self.random_score:
            raise ValueError(
                f"invalid anchors for {self.key}: expert {self.expert_score} "
                f"<= random {self.random_score}")


def anchors_key(spec: EnvSpec) -> str:
    return f"{spec.env_id}/{spec.shift_kind}:{spec.shift_level!r}"


def agent_policy(agent: PolicyAgent):
    """Deterministic evaluation policy (no exploration noise)."""
    def policy_fn(s, rng):
        return agent.act(s)
    return policy_fn


def reference_policy_fn(tag: str, spec: EnvSpec):
    kind = make_policy_kind(tag, spec.env_id)

    def policy_fn(s, rng):
        return reference_policy(kind, spec, s, rng)
    return policy_fn


def evaluate_policy(policy_fn, spec: EnvSpec, n_episodes: int, seed: int):
    """Mean and population std of undiscounted returns over seeded episodes."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    rng = Rng(seed)
    returns = [run_episode(spec, policy_fn, rng.spawn()) for _ in range(n_episodes)]
    return float(np.mean(returns)), float(np.std(returns))


def evaluate_agent(agent: PolicyAgent, spec: EnvSpec, n_episodes: int, seed: int):
    return evaluate_policy(agent_policy(agent), spec, n_episodes, seed)


def _anchor_seed(key: str) -> int:
    return int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "little")


def compute_anchors(spec: EnvSpec, n_episodes: int = 20) -> ScoreAnchors:
    key = anchors_key(spec)
    seed = _anchor_seed(key)
    random_mean, _ = evaluate_policy(reference_policy_fn("random", spec), spec,
                                     n_episodes, seed)
    expert_mean, _ = evaluate_policy(reference_policy_fn("expert", spec), spec,
                                     n_episodes, seed + 1)
    return ScoreAnchors(key, random_mean, expert_mean)


def normalized_score(raw: float, anchors: ScoreAnchors) -> float:
    """100 * (raw - random) / (expert - random); may leave [0, 100]."""
    span = anchors.expert_score - anchors.random_score
    if span == 0:
        raise ValueError("degenerate anchors: expert == random")
    return (raw - anchors.random_score) / span * 100.0


def save_anchors(path, anchors_map: dict[str, ScoreAnchors]):
    payload = {key: {"random_score": a.random_score, "expert_score": a.expert_score}
               for key, a in sorted(anchors_map.items())}
    with open(path, "w") as f:
        json.dump(payload, f, indent=1, sort_keys=True)
        f.write("\n")


def load_anchors(path) -> dict[str, ScoreAnchors]:
    with open(path) as f:
        payload = json.load(f)
    return {key: ScoreAnchors(key, v["random_score"], v["expert_score"])
            for key, v in payload.items()}


def rollout_mse(ensemble: DynamicsEnsemble, policy_fn, spec: EnvSpec,
                horizon: int, n_starts: int, seed: int,
                open_loop: bool = False) -> float:
    """Mean squared next-state prediction error along on-policy target episodes.

    The true environment advances under the policy's actions (computed on the
    true trajectory); each step one uniformly drawn member predicts via the
    mean path. Teacher-forced by default (model predicts from the true
    state); ``open_loop`` instead lets the model roll its own state chain and
    compares it against the true trajectory.
    """
    if len(ensemble.members) == 0:
        raise ValueError("empty ensemble")
    rng = Rng(seed)
    errors = []
    for _ in range(n_starts):
        ep_rng = rng.spawn()
        s_true = reset(spec, ep_rng)
        s_model = s_true.copy()
        for _ in range(horizon):
            a = np.clip(np.asarray(policy_fn(s_true, ep_rng), dtype=np.float64),
                        -spec.action_limit, spec.action_limit)
            member = ensemble.members[int(ep_rng.integers(len(ensemble.members)))]
            model_input = s_model if open_loop else s_true
            s_hat, _ = member.predict_next(
                "trg", model_input.reshape(1, -1).astype(np.float32),
                a.reshape(1, -1).astype(np.float32), sample=False)
            s_next, _, done = env_step(spec, s_true, a)
            errors.append(float(np.sum((s_hat[0] - s_next) ** 2)))
            s_true = s_next
            s_model = s_hat[0].astype(np.float64)
            if done:
                break
    return float(np.mean(errors))
