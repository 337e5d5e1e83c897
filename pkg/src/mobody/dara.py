"""Domain-classifier reward augmentation for source-domain data.

Two binary classifiers estimate p(trg | s, a) and p(trg | s, a, s'). Their
log-odds difference estimates the dynamics log-ratio

    delta_r = log p(trg|s,a,s') - log p(trg|s,a)
            + log p(src|s,a)    - log p(src|s,a,s')

with p(src|.) = 1 - p(trg|.), and all four probabilities floored before the
logs so the correction stays finite even when the classifiers saturate.
Source rewards become r + eta * delta_r; everything else is copied bit-exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import serialize as ser
from . import tape
from .data import Normalizer, TransitionDataset
from .nets import Mlp
from .optim import Adam
from .rng import Rng
from .tape import Tensor, backprop

CHECKPOINT_MAGIC = b"MBDC"
CHECKPOINT_VERSION = 1


@dataclass
class DaraConfig:
    eta: float = 0.1
    steps: int = 10_000
    batch_size: int = 128      # per domain; batches are balanced
    prob_floor: float = 1e-6
    lr: float = 3e-4

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if not 0.0 < self.prob_floor < 0.5:
            raise ValueError("prob_floor must be in (0, 0.5)")


class DomainClassifierPair:
    """p(trg|s,a) and p(trg|s,a,s') nets over normalized states."""

    def __init__(self, state_dim: int, action_dim: int, hidden=(256, 256),
                 rng: Rng | None = None, normalizer: Normalizer | None = None):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.hidden = tuple(hidden)
        self.normalizer = normalizer or Normalizer.identity(state_dim)
        self.sa_net = Mlp([state_dim + action_dim, *hidden, 1], rng)
        self.sas_net = Mlp([2 * state_dim + action_dim, *hidden, 1], rng)

    def parameters(self):
        return self.sa_net.parameters() + self.sas_net.parameters()

    def _features(self, s, a, s_next=None):
        ns = self.normalizer.normalize(np.asarray(s, dtype=np.float32))
        a = np.asarray(a, dtype=np.float32)
        if s_next is None:
            return np.concatenate([ns, a], axis=1)
        ns2 = self.normalizer.normalize(np.asarray(s_next, dtype=np.float32))
        return np.concatenate([ns, a, ns2], axis=1)

    def prob_sa(self, s, a) -> np.ndarray:
        return _sigmoid(self.sa_net.predict(self._features(s, a))[:, 0])

    def prob_sas(self, s, a, s_next) -> np.ndarray:
        return _sigmoid(self.sas_net.predict(self._features(s, a, s_next))[:, 0])


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _bce_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Stable binary cross-entropy: mean(relu(x) - x*y + log(1 + exp(-|x|)))."""
    y = Tensor(labels.reshape(-1, 1).astype(logits.data.dtype))
    softplus = tape.log(tape.add(tape.exp(tape.mul(tape.absolute(logits),
                                                   Tensor(np.asarray(-1.0, logits.data.dtype)))),
                                 Tensor(np.asarray(1.0, logits.data.dtype))))
    per = tape.add(tape.sub(tape.relu(logits), tape.mul(logits, y)), softplus)
    return tape.mean_all(per)


def train_classifiers(pair: DomainClassifierPair, d_src: TransitionDataset,
                      d_trg: TransitionDataset, cfg: DaraConfig, rng: Rng) -> np.ndarray:
    """Joint BCE training on balanced per-domain batches (trg=1, src=0).

    Returns accuracy history, shape (steps, 2): per-step batch accuracy of
    the (s,a) net and the (s,a,s') net.
    """
    if len(d_src) == 0 or len(d_trg) == 0:
        raise ValueError("both datasets must be nonempty")
    opt = Adam(pair.parameters(), lr=cfg.lr)
    labels = np.concatenate([np.zeros(cfg.batch_size, np.float32),
                             np.ones(cfg.batch_size, np.float32)])
    history = np.zeros((cfg.steps, 2), dtype=np.float32)
    for i in range(cfg.steps):
        si = rng.integers(len(d_src), cfg.batch_size)
        ti = rng.integers(len(d_trg), cfg.batch_size)
        s = np.concatenate([d_src.states[si], d_trg.states[ti]])
        a = np.concatenate([d_src.actions[si], d_trg.actions[ti]])
        s2 = np.concatenate([d_src.next_states[si], d_trg.next_states[ti]])
        sa_logits = pair.sa_net.forward(Tensor(pair._features(s, a)))
        sas_logits = pair.sas_net.forward(Tensor(pair._features(s, a, s2)))
        loss = tape.add(_bce_with_logits(sa_logits, labels),
                        _bce_with_logits(sas_logits, labels))
        grads = backprop(loss, pair.parameters())
        opt.step(grads)
        history[i, 0] = np.mean((sa_logits.data[:, 0] > 0) == (labels > 0.5))
        history[i, 1] = np.mean((sas_logits.data[:, 0] > 0) == (labels > 0.5))
    return history


def classifier_accuracy(pair: DomainClassifierPair, d_src: TransitionDataset,
                        d_trg: TransitionDataset) -> tuple[float, float]:
    """Balanced accuracy of both nets over full datasets (sa_acc, sas_acc)."""
    p_sa_src = pair.prob_sa(d_src.states, d_src.actions)
    p_sa_trg = pair.prob_sa(d_trg.states, d_trg.actions)
    p_sas_src = pair.prob_sas(d_src.states, d_src.actions, d_src.next_states)
    p_sas_trg = pair.prob_sas(d_trg.states, d_trg.actions, d_trg.next_states)
    sa_acc = 0.5 * (np.mean(p_sa_src < 0.5) + np.mean(p_sa_trg >= 0.5))
    sas_acc = 0.5 * (np.mean(p_sas_src < 0.5) + np.mean(p_sas_trg >= 0.5))
    return float(sa_acc), float(sas_acc)


def delta_r(pair: DomainClassifierPair, s, a, s_next,
            prob_floor: float = 1e-6) -> np.ndarray:
    """Dynamics-gap reward correction; finite for any inputs via flooring."""
    p_sas = pair.prob_sas(s, a, s_next)
    p_sa = pair.prob_sa(s, a)
    floor = prob_floor
    return (np.log(np.maximum(p_sas, floor))
            - np.log(np.maximum(p_sa, floor))
            + np.log(np.maximum(1.0 - p_sa, floor))
            - np.log(np.maximum(1.0 - p_sas, floor)))


def augment_source(d_src: TransitionDataset, pair: DomainClassifierPair,
                   eta: float, prob_floor: float = 1e-6) -> TransitionDataset:
    """Copy of the source dataset with rewards shifted by eta * delta_r."""
    if eta == 0.0:
        return d_src.with_rewards(d_src.rewards)
    dr = delta_r(pair, d_src.states, d_src.actions, d_src.next_states, prob_floor)
    rewards = (d_src.rewards.astype(np.float64) + eta * dr).astype(np.float32)
    return d_src.with_rewards(rewards)


def save_classifiers(pair: DomainClassifierPair, path):
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        ser.write_u32(f, CHECKPOINT_VERSION)
        ser.write_u32(f, pair.state_dim)
        ser.write_u32(f, pair.action_dim)
        ser.write_u32(f, len(pair.hidden))
        for w in pair.hidden:
            ser.write_u32(f, w)
        ser.write_f32_block(f, pair.normalizer.mean)
        ser.write_f32_block(f, pair.normalizer.std)
        ser.write_params(f, pair.parameters())


def load_classifiers(path) -> DomainClassifierPair:
    with open(path, "rb") as f:
        ser.check_magic(f, CHECKPOINT_MAGIC)
        ser.check_version(f, CHECKPOINT_VERSION)
        sd = ser.read_u32(f, "state_dim")
        ad = ser.read_u32(f, "action_dim")
        hidden = tuple(ser.read_u32(f, "hidden") for _ in range(ser.read_u32(f, "n_hidden")))
        norm = Normalizer(ser.read_f32_block(f, (sd,), "norm mean"),
                          ser.read_f32_block(f, (sd,), "norm std"))
        pair = DomainClassifierPair(sd, ad, hidden, rng=None, normalizer=norm)
        ser.read_params(f, pair.parameters())
        if f.read(1):
            raise ser.CheckpointFormatError("trailing bytes after parameters")
    return pair
