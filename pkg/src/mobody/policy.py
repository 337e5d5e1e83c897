"""Offline policy optimization on enhanced target data.

The agent is a deterministic tanh actor with twin critics and target copies.
Each training step rolls the current policy through the learned dynamics into
a bounded fake buffer (rewards penalized by ensemble uncertainty), samples a
mixed batch of augmented-source / target / fake data, takes one TD step on
the critics against the target nets (smoothed target action, twin-min
bootstrap), one step on the actor, and soft-updates the targets.

The actor objective combines a critic-maximization term scaled by
lambda = alpha / mean|Q| with a behavior-cloning term over real (never fake)
transitions, each residual weighted by exp(clamped normalized Q) so imitation
leans toward actions the critic scores highly under target-like data. The
exponential weights and both normalization denominators are treated as
constants with respect to gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import serialize as ser
from . import tape
from .data import Batch, FakeBuffer, Normalizer, ReplayView, TransitionDataset
from .dynamics import DynamicsEnsemble
from .nets import Mlp
from .optim import Adam
from .rng import Rng
from .tape import Tensor, backprop

CHECKPOINT_MAGIC = b"MBDP"
CHECKPOINT_VERSION = 1

WEIGHT_MODES = ("target_q", "vanilla", "none")
SMOOTHING_STD = 0.2
SMOOTHING_CLIP = 0.5
EXPLORATION_STD = 0.1


@dataclass
class PolicyTrainConfig:
    steps: int = 5000
    rollout_len: int = 1            # model rollout horizon L
    rollout_batch: int = 128        # start states per training step
    batch_src: int = 128
    batch_trg: int = 128
    batch_fake: int = 128
    weight_clamp: float = 10.0      # clamp on the BC weight exponent
    lr: float = 3e-4
    use_rollouts: bool = True       # off: no fake data (ablation / plain TD3-BC)

    def __post_init__(self):
        if self.rollout_len < 1:
            raise ValueError("rollout_len must be >= 1")
        if min(self.batch_src, self.batch_trg, self.batch_fake) < 0:
            raise ValueError("batch sizes must be >= 0")


class PolicyAgent:
    """Deterministic actor, twin critics, and their target copies."""

    def __init__(self, state_dim: int, action_dim: int, hidden=(256, 256),
                 rng: Rng | None = None, normalizer: Normalizer | None = None,
                 gamma: float = 0.99, tau: float = 5e-3, alpha: float = 0.1,
                 weight_mode: str = "target_q"):
        if weight_mode not in WEIGHT_MODES:
            raise ValueError(f"unknown weight_mode '{weight_mode}'")
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.hidden = tuple(hidden)
        self.normalizer = normalizer or Normalizer.identity(state_dim)
        self.gamma = gamma
        self.tau = tau
        self.alpha = alpha
        self.weight_mode = weight_mode
        self.actor = Mlp([state_dim, *hidden, action_dim], rng)
        self.q1 = Mlp([state_dim + action_dim, *hidden, 1], rng)
        self.q2 = Mlp([state_dim + action_dim, *hidden, 1], rng)
        self.actor_target = self.actor.copy()
        self.q1_target = self.q1.copy()
        self.q2_target = self.q2.copy()

    def networks(self):
        return [self.actor, self.q1, self.q2,
                self.actor_target, self.q1_target, self.q2_target]

    def parameters(self):
        return [p for net in self.networks() for p in net.parameters()]

    def act(self, s: np.ndarray) -> np.ndarray:
        """Deterministic policy action(s) in [-1, 1]; accepts a row or batch."""
        single = s.ndim == 1
        ns = self.normalizer.normalize(np.atleast_2d(np.asarray(s, np.float32)))
        a = np.tanh(self.actor.predict(ns))
        return a[0] if single else a

    def copy(self, dtype=None) -> "PolicyAgent":
        clone = PolicyAgent(self.state_dim, self.action_dim, self.hidden, rng=None,
                            normalizer=self.normalizer, gamma=self.gamma,
                            tau=self.tau, alpha=self.alpha, weight_mode=self.weight_mode)
        for mine, theirs in zip(clone.networks(), self.networks()):
            mine.load_from(theirs, dtype=dtype)
        return clone

    def soft_update_targets(self):
        """target <- (1 - tau) * target + tau * online, exactly."""
        pairs = [(self.actor_target, self.actor), (self.q1_target, self.q1),
                 (self.q2_target, self.q2)]
        tau = np.float32(self.tau)
        one_minus = np.float32(1.0) - tau
        for target, online in pairs:
            for pt, po in zip(target.parameters(), online.parameters()):
                pt.data = one_minus * pt.data + tau * po.data


def rollout_fake(agent: PolicyAgent, ensemble: DynamicsEnsemble,
                 start_states: np.ndarray, length: int, rng: Rng) -> Batch:
    """Roll the noisy policy through the learned target dynamics.

    Per step each transition uses one uniformly chosen ensemble member's
    mean-path prediction; rewards are the ensemble reward estimate penalized
    by beta times the prediction uncertainty. Fake transitions never
    terminate.
    """
    if length < 1:
        raise ValueError("rollout length must be >= 1")
    if len(ensemble.members) == 0:
        raise ValueError("empty ensemble")
    s = np.asarray(start_states, dtype=np.float32)
    out_s, out_a, out_r, out_s2 = [], [], [], []
    for _ in range(length):
        noise = (EXPLORATION_STD * rng.normal(s.shape[0] * agent.action_dim)
                 ).reshape(s.shape[0], agent.action_dim)
        a = np.clip(agent.act(s) + noise.astype(np.float32), -1.0, 1.0).astype(np.float32)
        member_idx = rng.integers(len(ensemble.members), s.shape[0])
        preds = ensemble.predict_all(s, a, "trg")              # (M, B, sd)
        s_hat = preds[member_idx, np.arange(s.shape[0])].astype(np.float32)
        r_tilde = ensemble.penalized_reward(s, a, s_hat, "trg", preds=preds)
        out_s.append(s)
        out_a.append(a)
        out_r.append(r_tilde.astype(np.float32))
        out_s2.append(s_hat)
        s = s_hat
    n = len(out_s) * s.shape[0]
    return Batch(np.concatenate(out_s), np.concatenate(out_a),
                 np.concatenate(out_r), np.concatenate(out_s2),
                 np.zeros(n, bool), np.full(n, "fake", dtype="<U4"))


def critic_td_loss(agent: PolicyAgent, batch: Batch, rng: Rng) -> Tensor:
    """Twin-critic TD loss against smoothed target-policy bootstrap."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    ns = agent.normalizer.normalize(batch.s.astype(np.float32))
    ns2 = agent.normalizer.normalize(batch.s_next.astype(np.float32))
    # target value: no gradients flow anywhere here
    a2 = np.tanh(agent.actor_target.predict(ns2))
    noise = np.clip(SMOOTHING_STD * rng.normal(a2.shape), -SMOOTHING_CLIP,
                    SMOOTHING_CLIP).astype(np.float32)
    a2 = np.clip(a2 + noise, -1.0, 1.0)
    feats2 = np.concatenate([ns2, a2], axis=1)
    q_min = np.minimum(agent.q1_target.predict(feats2),
                       agent.q2_target.predict(feats2))[:, 0]
    y = batch.r + agent.gamma * (1.0 - batch.done.astype(np.float32)) * q_min
    y_t = Tensor(y.reshape(-1, 1).astype(np.float32))
    feats = Tensor(np.concatenate([ns, batch.a.astype(np.float32)], axis=1))
    err1 = tape.square(tape.sub(y_t, agent.q1.forward(feats)))
    err2 = tape.square(tape.sub(y_t, agent.q2.forward(feats)))
    return tape.mean_all(tape.add(err1, err2))


def actor_loss(agent: PolicyAgent, enhanced: Batch, bc_batch: Batch | None,
               weights: np.ndarray | None = None) -> Tensor:
    """Critic-maximization plus Q-weighted behavior cloning.

    ``enhanced`` feeds the Q term; ``bc_batch`` (real transitions only) feeds
    the cloning term unless weight_mode is 'none'. The cloning weights are
    constants of the loss; pass ``weights`` to pin them explicitly (gradient
    verification), otherwise they are computed from the current networks.
    """
    if len(enhanced) == 0:
        raise ValueError("empty enhanced batch")
    ns = agent.normalizer.normalize(enhanced.s.astype(np.float32))
    pi = tape.tanh(agent.actor.forward(Tensor(ns)))
    q_pi = agent.q1.forward(tape.concat([Tensor(ns), pi]))
    # lambda's denominator is a constant: mean |Q| over the batch actions
    feats_data = np.concatenate([ns, enhanced.a.astype(np.float32)], axis=1)
    denom = float(np.mean(np.abs(agent.q1.predict(feats_data)[:, 0])))
    lam = agent.alpha / denom if denom > 0 else agent.alpha
    loss = tape.mul(tape.mean_all(q_pi), Tensor(np.asarray(-lam, np.float32)))

    if agent.weight_mode == "none":
        return loss
    if bc_batch is None or len(bc_batch) == 0:
        raise ValueError("behavior-cloning term needs a nonempty real-data batch")
    if np.any(bc_batch.domain == "fake"):
        raise ValueError("fake transitions must not enter the behavior-cloning term")
    ns_bc = agent.normalizer.normalize(bc_batch.s.astype(np.float32))
    pi_bc = tape.tanh(agent.actor.forward(Tensor(ns_bc)))
    if weights is None:
        if agent.weight_mode == "target_q":
            weights = bc_weights(agent, bc_batch.s)
        else:
            weights = np.ones(len(bc_batch))
    residual = tape.sum_axis(tape.square(tape.sub(
        pi_bc, Tensor(bc_batch.a.astype(np.float32)))), axis=1)
    weighted = tape.mul(residual, Tensor(weights.astype(np.float32)))
    return tape.add(loss, tape.mean_all(weighted))


def bc_weights(agent: PolicyAgent, states: np.ndarray,
               clamp: float = 10.0) -> np.ndarray:
    """exp of the clamped, mean-|Q|-normalized critic value at pi(s).

    All-zero critic outputs degenerate to weight 1 everywhere.
    """
    ns = agent.normalizer.normalize(np.asarray(states, np.float32))
    q = agent.q1.predict(np.concatenate([ns, np.tanh(agent.actor.predict(ns))],
                                        axis=1))[:, 0]
    denom = float(np.mean(np.abs(q)))
    normalized = q / denom if denom > 0 else np.zeros_like(q)
    return np.exp(np.clip(normalized, -clamp, clamp))


def train_policy(agent: PolicyAgent, ensemble: DynamicsEnsemble | None,
                 d_src_aug: TransitionDataset, d_trg: TransitionDataset,
                 cfg: PolicyTrainConfig, rng: Rng,
                 fake_buffer: FakeBuffer | None = None,
                 eval_fn=None, eval_every: int = 0):
    """Full policy optimization loop; returns per-step metric history.

    ``eval_fn(agent) -> float`` is called every ``eval_every`` steps when
    given; its values land in the history under 'eval_return'.
    """
    if cfg.use_rollouts and (ensemble is None or len(ensemble.members) == 0):
        raise ValueError("rollouts need a trained ensemble")
    view = ReplayView({"src": d_src_aug, "trg": d_trg})
    if fake_buffer is None:
        fake_buffer = FakeBuffer(agent.state_dim, agent.action_dim)
    actor_opt = Adam(agent.actor.parameters(), lr=cfg.lr)
    critic_params = agent.q1.parameters() + agent.q2.parameters()
    critic_opt = Adam(critic_params, lr=cfg.lr)
    history: dict[str, list] = {"critic_loss": [], "actor_loss": []}
    if eval_fn is not None:
        history["eval_step"] = []
        history["eval_return"] = []
    for step in range(cfg.steps):
        if cfg.use_rollouts and cfg.rollout_batch > 0:
            n_src = cfg.rollout_batch // 2
            n_trg = cfg.rollout_batch - n_src
            starts = view.sample_batch({"src": n_src, "trg": n_trg}, rng)
            fake = rollout_fake(agent, ensemble, starts.s, cfg.rollout_len, rng)
            fake_buffer.push(fake.s, fake.a, fake.r, fake.s_next, fake.done)

        parts = [view.sample_batch({"src": cfg.batch_src, "trg": cfg.batch_trg}, rng)]
        if cfg.use_rollouts and cfg.batch_fake > 0 and len(fake_buffer) > 0:
            parts.append(fake_buffer.sample(cfg.batch_fake, rng))
        enhanced = Batch.concat(parts)

        c_loss = critic_td_loss(agent, enhanced, rng)
        critic_opt.step(backprop(c_loss, critic_params))

        bc_batch = parts[0] if agent.weight_mode != "none" else None
        weights = (bc_weights(agent, bc_batch.s, cfg.weight_clamp)
                   if bc_batch is not None and agent.weight_mode == "target_q" else None)
        a_loss = actor_loss(agent, enhanced, bc_batch, weights=weights)
        actor_opt.step(backprop(a_loss, agent.actor.parameters()))

        agent.soft_update_targets()
        history["critic_loss"].append(float(c_loss.item()))
        history["actor_loss"].append(float(a_loss.item()))
        if eval_fn is not None and eval_every > 0 and (step + 1) % eval_every == 0:
            history["eval_step"].append(step + 1)
            history["eval_return"].append(float(eval_fn(agent)))
    return history



def save_agent(agent: PolicyAgent, path):
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        ser.write_u32(f, CHECKPOINT_VERSION)
        ser.write_u32(f, agent.state_dim)
        ser.write_u32(f, agent.action_dim)
        ser.write_u32(f, len(agent.hidden))
        for w in agent.hidden:
            ser.write_u32(f, w)
        ser.write_f32(f, agent.gamma)
        ser.write_f32(f, agent.tau)
        ser.write_f32(f, agent.alpha)
        ser.write_string(f, agent.weight_mode)
        ser.write_f32_block(f, agent.normalizer.mean)
        ser.write_f32_block(f, agent.normalizer.std)
        for net in agent.networks():
            ser.write_params(f, net.parameters())


def load_agent(path) -> PolicyAgent:
    with open(path, "rb") as f:
        ser.check_magic(f, CHECKPOINT_MAGIC)
        ser.check_version(f, CHECKPOINT_VERSION)
        sd = ser.read_u32(f, "state_dim")
        ad = ser.read_u32(f, "action_dim")
        hidden = tuple(ser.read_u32(f, "hidden") for _ in range(ser.read_u32(f, "n_hidden")))
        gamma = ser.read_f32(f, "gamma")
        tau = ser.read_f32(f, "tau")
        alpha = ser.read_f32(f, "alpha")
        weight_mode = ser.read_string(f, "weight_mode")
        norm = Normalizer(ser.read_f32_block(f, (sd,), "norm mean"),
                          ser.read_f32_block(f, (sd,), "norm std"))
        agent = PolicyAgent(sd, ad, hidden, rng=None, normalizer=norm,
                            gamma=gamma, tau=tau, alpha=alpha, weight_mode=weight_mode)
        for net in agent.networks():
            ser.read_params(f, net.parameters())
        if f.read(1):
            raise ser.CheckpointFormatError("trailing bytes after parameters")
    return agent
