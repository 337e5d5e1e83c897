"""Latent dynamics learning with per-domain action encoders.

Each member encodes states through a shared variational state encoder into a
d_z-dimensional latent, adds a domain-specific action-encoder increment, and
decodes the next state through a shared transition net:

    z_s  = mu(s) + sigma(s) * eps        (mean path when not sampling)
    z_sa = z_s + action_encoder_domain(z_s, a)
    s'   = transition(z_sa)

Training combines four losses per minibatch: next-state MSE, a latent
consistency loss pulling z_sa toward the frozen encoding of the true next
state, a VAE-style cycle loss (KL + reconstruct s from z_s alone), and a
reward-model loss fit on both the true and the predicted next state. The
transition, consistency, and reward losses run on the posterior mean; only
the cycle loss reparameterizes z_s with sampled noise (a sampled z_s in the
prediction path would put an irreducible sigma-floor under the transition
error, since the KL anchors sigma near 1). An ensemble of independently
initialized members provides uncertainty as the largest per-dimension
standard deviation of the mean-path predictions, which penalizes rollout
rewards MOPO-style.

Alternative training modes (single action encoder, transition+reward loss
only) reproduce the standard baselines: target-only, combined-data, and
pretrain-finetune.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import serialize as ser
from .data import Batch, Normalizer, ReplayView, TransitionDataset
from .nets import Mlp
from .optim import Adam
from .rng import Rng
from . import tape
from .tape import Tensor, backprop, stop_gradient

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
CHECKPOINT_MAGIC = b"MBDW"
CHECKPOINT_VERSION = 1

MODES = ("mobody", "target_only", "combined", "pretrain_finetune")


@dataclass
class DynTrainConfig:
    mode: str = "mobody"
    steps: int = 5000            # per member; pretrain_finetune adds steps//10 on target
    target_freq: int = 2         # K: target batch when step % K == 0
    lambda_rep: float = 1.0
    use_cycle_loss: bool = True  # off reproduces the no-cycle-loss ablation
    batch_size: int = 128
    lr: float = 3e-4

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode '{self.mode}'")
        if self.target_freq < 1:
            raise ValueError("target_freq must be >= 1")
        if self.lambda_rep < 0:
            raise ValueError("lambda_rep must be >= 0")


class DynamicsMember:
    """One state-encoder / action-encoders / transition / reward-head bundle.

    All networks consume states normalized by ``normalizer`` (identity by
    default) and the transition net predicts normalized next states;
    ``predict_next`` returns raw-space states. ``single_encoder`` shares one
    action encoder across domains (used by the baseline training modes).
    """

    def __init__(self, state_dim: int, action_dim: int, d_z: int = 16,
                 hidden=(256, 256), enc_hidden=(32,), rng: Rng | None = None,
                 normalizer: Normalizer | None = None, single_encoder: bool = False,
                 dtype=np.float32):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.d_z = d_z
        self.hidden = tuple(hidden)
        self.enc_hidden = tuple(enc_hidden)
        self.single_encoder = single_encoder
        self.normalizer = normalizer or Normalizer.identity(state_dim)
        self.state_encoder = Mlp([state_dim, *hidden, 2 * d_z], rng, dtype)
        self.action_encoder_src = Mlp([d_z + action_dim, *enc_hidden, d_z], rng, dtype)
        self.action_encoder_trg = (self.action_encoder_src if single_encoder
                                   else Mlp([d_z + action_dim, *enc_hidden, d_z], rng, dtype))
        self.transition = Mlp([d_z, *hidden, state_dim], rng, dtype)
        self.reward_head = Mlp([2 * state_dim + action_dim, *hidden, 1], rng, dtype)

    def action_encoder(self, domain: str) -> Mlp:
        if domain == "src":
            return self.action_encoder_src
        if domain == "trg":
            return self.action_encoder_trg
        raise ValueError(f"unknown domain '{domain}'")

    def networks(self) -> list[Mlp]:
        nets = [self.state_encoder, self.action_encoder_src]
        if not self.single_encoder:
            nets.append(self.action_encoder_trg)
        nets.extend([self.transition, self.reward_head])
        return nets

    def parameters(self):
        return [p for net in self.networks() for p in net.parameters()]

    @property
    def dtype(self):
        return self.state_encoder.weights[0].data.dtype

    def copy(self, dtype=None) -> "DynamicsMember":
        clone = DynamicsMember(self.state_dim, self.action_dim, self.d_z,
                               self.hidden, self.enc_hidden, rng=None,
                               normalizer=self.normalizer,
                               single_encoder=self.single_encoder,
                               dtype=dtype or self.dtype)
        for mine, theirs in zip(clone.networks(), self.networks()):
            mine.load_from(theirs, dtype=dtype)
        return clone

    # numpy inference ----------------------------------------------------

    def _encode_np(self, ns: np.ndarray):
        out = self.state_encoder.predict(ns)
        mu = out[:, :self.d_z]
        log_std = np.clip(out[:, self.d_z:], LOG_STD_MIN, LOG_STD_MAX)
        return mu, log_std

    def predict_next(self, domain: str, s: np.ndarray, a: np.ndarray,
                     sample: bool = False, rng: Rng | None = None):
        """Predict (s_hat, r_hat) in raw state space for a batch of rows."""
        psi = self.action_encoder(domain)
        s = np.asarray(s, dtype=self.dtype)
        a = np.asarray(a, dtype=self.dtype)
        ns = self.normalizer.normalize(s)
        mu, log_std = self._encode_np(ns)
        if sample:
            if rng is None:
                raise ValueError("sampling requires an rng")
            z = mu + np.exp(log_std) * rng.normal(mu.shape).astype(self.dtype)
        else:
            z = mu
        zsa = z + psi.predict(np.concatenate([z, a], axis=1))
        ns_hat = self.transition.predict(zsa)
        s_hat = self.normalizer.denormalize(ns_hat)
        r_hat = self.reward_head.predict(np.concatenate([ns, a, ns_hat], axis=1))[:, 0]
        return s_hat, r_hat

    # differentiable losses ----------------------------------------------

    def _prep(self, batch: Batch):
        ns = Tensor(self.normalizer.normalize(batch.s.astype(self.dtype)))
        a = Tensor(batch.a.astype(self.dtype))
        ns2 = Tensor(self.normalizer.normalize(batch.s_next.astype(self.dtype)))
        r = Tensor(batch.r.astype(self.dtype).reshape(-1, 1))
        return ns, a, ns2, r

    def _noise(self, n: int, rng: Rng | None, noise: np.ndarray | None) -> np.ndarray:
        if noise is not None:
            return np.asarray(noise, dtype=self.dtype)
        if rng is None:
            raise ValueError("need an rng or explicit latent noise")
        return rng.normal((n, self.d_z)).astype(self.dtype)

    def _encode(self, ns: Tensor):
        out = self.state_encoder.forward(ns)
        mu = tape.slice_cols(out, 0, self.d_z)
        log_std = tape.clip(tape.slice_cols(out, self.d_z, 2 * self.d_z),
                            LOG_STD_MIN, LOG_STD_MAX)
        return mu, log_std

    def _latent_prediction(self, ns: Tensor, a: Tensor, domain: str):
        """Mean-path latent state-action representation z_sa = z_s + psi(z_s, a)."""
        mu, log_std = self._encode(ns)
        inc = self.action_encoder(domain).forward(tape.concat([mu, a]))
        zsa = tape.add(mu, inc)
        return mu, log_std, zsa

    def loss_transition(self, batch: Batch, domain: str) -> Tensor:
        """Mean squared next-state error through the latent prediction path."""
        if len(batch) == 0:
            raise ValueError("empty batch")
        ns, a, ns2, _ = self._prep(batch)
        _, _, zsa = self._latent_prediction(ns, a, domain)
        err = tape.sub(ns2, self.transition.forward(zsa))
        return tape.mean_all(tape.sum_axis(tape.square(err), axis=1))

    def loss_encoder(self, batch: Batch, domain: str) -> Tensor:
        """Pull z_sa toward the frozen mean encoding of the true next state."""
        if len(batch) == 0:
            raise ValueError("empty batch")
        ns, a, ns2, _ = self._prep(batch)
        _, _, zsa = self._latent_prediction(ns, a, domain)
        target_mu, _ = self._encode(ns2)
        err = tape.sub(stop_gradient(target_mu), zsa)
        return tape.mean_all(tape.sum_axis(tape.square(err), axis=1))

    def loss_cycle(self, batch: Batch,
                   rng: Rng | None = None, noise: np.ndarray | None = None) -> Tensor:
        """KL to the standard normal plus state reconstruction through z_s alone."""
        if len(batch) == 0:
            raise ValueError("empty batch")
        ns, _, _, _ = self._prep(batch)
        eps = self._noise(len(batch), rng, noise)
        mu, log_std = self._encode(ns)
        sigma_sq = tape.exp(tape.mul(log_std, Tensor(np.asarray(2.0, self.dtype))))
        kl_terms = tape.sub(tape.add(tape.square(mu), sigma_sq),
                            tape.add(tape.mul(log_std, Tensor(np.asarray(2.0, self.dtype))),
                                     Tensor(np.asarray(1.0, self.dtype))))
        kl = tape.mul(tape.mean_all(tape.sum_axis(kl_terms, axis=1)),
                      Tensor(np.asarray(0.5, self.dtype)))
        z = tape.add(mu, tape.mul(tape.exp(log_std), Tensor(eps)))
        rec = self.transition.forward(z)
        rec_norm = tape.sqrt(tape.sum_axis(tape.square(tape.sub(ns, rec)), axis=1))
        return tape.add(kl, tape.mean_all(rec_norm))

    def loss_reward(self, batch: Batch) -> Tensor:
        """Reward MSE on the true and the predicted next state (half each)."""
        if len(batch) == 0:
            raise ValueError("empty batch")
        ns, a, ns2, r = self._prep(batch)
        half = Tensor(np.asarray(0.5 / len(batch), self.dtype))
        sse_true = tape.sum_all(tape.square(tape.sub(
            r, self.reward_head.forward(tape.concat([ns, a, ns2])))))
        # predicted branch respects each row's domain tag
        sse_pred_parts = []
        for domain in ("src", "trg", "fake"):
            mask = batch.domain == domain
            if not mask.any():
                continue
            idx = np.flatnonzero(mask)
            sub = Batch(batch.s[idx], batch.a[idx], batch.r[idx],
                        batch.s_next[idx], batch.done[idx], batch.domain[idx])
            nss, aa, _, rr = self._prep(sub)
            dom = "trg" if domain in ("trg", "fake") else "src"
            _, _, zsa = self._latent_prediction(nss, aa, dom)
            ns_hat = self.transition.forward(zsa)
            pred = self.reward_head.forward(tape.concat([nss, aa, ns_hat]))
            sse_pred_parts.append(tape.sum_all(tape.square(tape.sub(rr, pred))))
        sse_pred = sse_pred_parts[0]
        for part in sse_pred_parts[1:]:
            sse_pred = tape.add(sse_pred, part)
        return tape.mul(tape.add(sse_true, sse_pred), half)

    def training_losses(self, batch: Batch, domain: str, rng: Rng | None,
                        lambda_rep: float = 1.0, use_cycle: bool = True,
                        use_rep: bool = True, noise: np.ndarray | None = None,
                        frozen_rep_target: np.ndarray | None = None):
        """Fused per-step objective sharing one encoder forward.

        The cycle term draws its reparameterization noise from ``rng`` (or
        uses ``noise`` when given, e.g. for gradient verification).
        ``frozen_rep_target`` substitutes a fixed array for the stop-gradient
        target of the consistency term; values and analytic gradients are
        unchanged, but it lets finite differences probe the loss as defined
        (the stopped branch is formally a constant). Returns (total, parts)
        where parts maps loss names to floats.
        """
        ns, a, ns2, r = self._prep(batch)
        mu, log_std, zsa = self._latent_prediction(ns, a, domain)
        ns_hat = self.transition.forward(zsa)

        err = tape.sub(ns2, ns_hat)
        l_dyn = tape.mean_all(tape.sum_axis(tape.square(err), axis=1))

        r_true = self.reward_head.forward(tape.concat([ns, a, ns2]))
        r_pred = self.reward_head.forward(tape.concat([ns, a, ns_hat]))
        half = Tensor(np.asarray(0.5, self.dtype))
        l_reward = tape.add(
            tape.mul(tape.mean_all(tape.square(tape.sub(r, r_true))), half),
            tape.mul(tape.mean_all(tape.square(tape.sub(r, r_pred))), half))

        total = tape.add(l_dyn, l_reward)
        parts = {"loss_dyn": l_dyn.item(), "loss_reward": l_reward.item()}

        if use_rep:
            if frozen_rep_target is not None:
                target = Tensor(np.asarray(frozen_rep_target, dtype=self.dtype))
            else:
                target_mu, _ = self._encode(ns2)
                target = stop_gradient(target_mu)
            l_rep = tape.mean_all(tape.sum_axis(
                tape.square(tape.sub(target, zsa)), axis=1))
            parts["loss_rep"] = l_rep.item()
            reg = l_rep
            if use_cycle:
                eps = self._noise(len(batch), rng, noise)
                two = Tensor(np.asarray(2.0, self.dtype))
                sigma_sq = tape.exp(tape.mul(log_std, two))
                kl_terms = tape.sub(tape.add(tape.square(mu), sigma_sq),
                                    tape.add(tape.mul(log_std, two),
                                             Tensor(np.asarray(1.0, self.dtype))))
                kl = tape.mul(tape.mean_all(tape.sum_axis(kl_terms, axis=1)), half)
                z = tape.add(mu, tape.mul(tape.exp(log_std), Tensor(eps)))
                rec = self.transition.forward(z)
                rec_norm = tape.sqrt(tape.sum_axis(tape.square(tape.sub(ns, rec)), axis=1))
                l_cycle = tape.add(kl, tape.mean_all(rec_norm))
                parts["loss_cycle"] = l_cycle.item()
                reg = tape.add(reg, l_cycle)
            total = tape.add(total, tape.mul(reg, Tensor(np.asarray(lambda_rep, self.dtype))))
        parts["loss_total"] = total.item()
        return total, parts


class DynamicsEnsemble:
    """Independently initialized members plus the reward-penalty scale beta."""

    def __init__(self, members: list[DynamicsMember], beta: float = 5.0):
        if not members:
            raise ValueError("ensemble needs at least one member")
        if beta < 0:
            raise ValueError("beta must be >= 0")
        self.members = members
        self.beta = beta

    @classmethod
    def create(cls, state_dim: int, action_dim: int, rng: Rng, n_members: int = 7,
               beta: float = 5.0, d_z: int = 16, hidden=(256, 256), enc_hidden=(32,),
               normalizer: Normalizer | None = None, single_encoder: bool = False):
        members = [DynamicsMember(state_dim, action_dim, d_z, hidden, enc_hidden,
                                  rng=rng.spawn(), normalizer=normalizer,
                                  single_encoder=single_encoder)
                   for _ in range(n_members)]
        return cls(members, beta)

    def __len__(self):
        return len(self.members)

    def predict_all(self, s: np.ndarray, a: np.ndarray, domain: str) -> np.ndarray:
        """Mean-path next-state predictions from every member, shape (M, B, sd)."""
        return np.stack([m.predict_next(domain, s, a, sample=False)[0]
                         for m in self.members])

    def uncertainty(self, s: np.ndarray, a: np.ndarray, domain: str = "trg",
                    preds: np.ndarray | None = None) -> np.ndarray:
        """Largest per-dimension std across members of mean-path predictions."""
        if preds is None:
            preds = self.predict_all(s, a, domain)
        return preds.std(axis=0).max(axis=1)

    def penalized_reward(self, s: np.ndarray, a: np.ndarray, s_hat: np.ndarray,
                         domain: str = "trg", preds: np.ndarray | None = None) -> np.ndarray:
        """Member-mean reward estimate at (s, a, s_hat) minus beta * uncertainty."""
        s = np.asarray(s, dtype=np.float32)
        a = np.asarray(a, dtype=np.float32)
        member0 = self.members[0]
        ns = member0.normalizer.normalize(s)
        ns_hat = member0.normalizer.normalize(np.asarray(s_hat, dtype=np.float32))
        feats = np.concatenate([ns, a, ns_hat], axis=1)
        r_hats = np.stack([m.reward_head.predict(feats)[:, 0] for m in self.members])
        return r_hats.mean(axis=0) - self.beta * self.uncertainty(s, a, domain, preds=preds)


def domain_schedule(cfg: DynTrainConfig) -> list[str]:
    """Per-step batch source: 'src', 'trg', or 'mixed' (combined mode)."""
    if cfg.mode == "mobody":
        return ["trg" if i % cfg.target_freq == 0 else "src"
                for i in range(cfg.steps)]
    if cfg.mode == "target_only":
        return ["trg"] * cfg.steps
    if cfg.mode == "combined":
        return ["mixed"] * cfg.steps
    return ["src"] * cfg.steps + ["trg"] * (cfg.steps // 10)


def train_dynamics(ensemble: DynamicsEnsemble, d_src: TransitionDataset | None,
                   d_trg: TransitionDataset, cfg: DynTrainConfig, rng: Rng):
    """Train every member independently per the configured mode; returns history.

    History maps loss names to float32 arrays of shape (members, steps).
    """
    if d_trg is None or len(d_trg) == 0:
        raise ValueError("target dataset must be nonempty")
    needs_src = cfg.mode != "target_only"
    if needs_src and (d_src is None or len(d_src) == 0):
        raise ValueError(f"mode '{cfg.mode}' needs a nonempty source dataset")
    if cfg.mode == "mobody" and ensemble.members[0].single_encoder:
        raise ValueError("mobody mode needs separate per-domain action encoders")

    datasets = {"trg": d_trg}
    if needs_src:
        datasets["src"] = d_src
    view = ReplayView(datasets)

    schedule = domain_schedule(cfg)

    history: dict[str, np.ndarray] = {}
    use_rep = cfg.mode == "mobody"
    for mi, member in enumerate(ensemble.members):
        member_rng = rng.spawn()
        opt = Adam(member.parameters(), lr=cfg.lr)
        for i, which in enumerate(schedule):
            if which == "mixed":
                batch = view.sample_mixed(cfg.batch_size, member_rng)
                domain = "src"  # single encoder; tag is irrelevant
            else:
                batch = view.sample_batch({which: cfg.batch_size}, member_rng)
                domain = which
            total, parts = member.training_losses(
                batch, domain, member_rng, lambda_rep=cfg.lambda_rep,
                use_cycle=cfg.use_cycle_loss and use_rep, use_rep=use_rep)
            grads = backprop(total, member.parameters())
            opt.step(grads)
            for name, value in parts.items():
                if name not in history:
                    history[name] = np.full((len(ensemble.members), len(schedule)),
                                            np.nan, dtype=np.float32)
                history[name][mi, i] = value
    return history


def save_ensemble(ensemble: DynamicsEnsemble, path):
    m0 = ensemble.members[0]
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        ser.write_u32(f, CHECKPOINT_VERSION)
        ser.write_u32(f, len(ensemble.members))
        ser.write_u32(f, m0.state_dim)
        ser.write_u32(f, m0.action_dim)
        ser.write_u32(f, m0.d_z)
        ser.write_u32(f, 1 if m0.single_encoder else 0)
        ser.write_f32(f, ensemble.beta)
        ser.write_u32(f, len(m0.hidden))
        for w in m0.hidden:
            ser.write_u32(f, w)
        ser.write_u32(f, len(m0.enc_hidden))
        for w in m0.enc_hidden:
            ser.write_u32(f, w)
        ser.write_f32_block(f, m0.normalizer.mean)
        ser.write_f32_block(f, m0.normalizer.std)
        for member in ensemble.members:
            ser.write_params(f, member.parameters())


def load_ensemble(path) -> DynamicsEnsemble:
    with open(path, "rb") as f:
        ser.check_magic(f, CHECKPOINT_MAGIC)
        ser.check_version(f, CHECKPOINT_VERSION)
        n_members = ser.read_u32(f, "n_members")
        sd = ser.read_u32(f, "state_dim")
        ad = ser.read_u32(f, "action_dim")
        d_z = ser.read_u32(f, "d_z")
        single = bool(ser.read_u32(f, "single_encoder"))
        beta = ser.read_f32(f, "beta")
        hidden = tuple(ser.read_u32(f, "hidden") for _ in range(ser.read_u32(f, "n_hidden")))
        enc_hidden = tuple(ser.read_u32(f, "enc_hidden")
                           for _ in range(ser.read_u32(f, "n_enc_hidden")))
        norm = Normalizer(ser.read_f32_block(f, (sd,), "norm mean"),
                          ser.read_f32_block(f, (sd,), "norm std"))
        members = []
        for _ in range(n_members):
            member = DynamicsMember(sd, ad, d_z, hidden, enc_hidden, rng=None,
                                    normalizer=norm, single_encoder=single)
            ser.read_params(f, member.parameters())
            members.append(member)
        if f.read(1):
            raise ser.CheckpointFormatError("trailing bytes after parameters")
    return DynamicsEnsemble(members, beta)
