import numpy as np
import pytest

from mobody.data import Batch, FakeBuffer, TransitionDataset
from mobody.dynamics import DynamicsEnsemble, DynamicsMember
from mobody.gradcheck import check_gradients
from mobody.policy import (
    PolicyAgent, PolicyTrainConfig, actor_loss, bc_weights, critic_td_loss,
    load_agent, rollout_fake, save_agent, train_policy,
)
from mobody.rng import Rng
from mobody.tape import backprop


def small_agent(sd=2, ad=1, rng=None, **kw):
    return PolicyAgent(sd, ad, hidden=(8, 8), rng=rng, **kw)


def toy_batch(rng, n, sd=2, ad=1, domain="src", r=None, done=None):
    return Batch(rng.normal((n, sd)).astype(np.float32),
                 rng.uniform(-1, 1, (n, ad)).astype(np.float32),
                 (np.full(n, r, np.float32) if r is not None
                  else rng.normal(n).astype(np.float32)),
                 rng.normal((n, sd)).astype(np.float32),
                 np.zeros(n, bool) if done is None else done,
                 np.full(n, domain, dtype="<U4"))


def toy_dataset(rng, n, sd=2, ad=1):
    b = toy_batch(rng, n, sd, ad)
    return TransitionDataset(b.s, b.a, b.r, b.s_next, b.done, "toy", "none",
                             "1.0", "synthetic", np.zeros(sd, np.float32),
                             np.ones(sd, np.float32))


def tiny_ensemble(sd=2, ad=1, n=2, rng=None):
    rng = rng or Rng(0)
    members = [DynamicsMember(sd, ad, d_z=2, hidden=(4,), enc_hidden=(3,),
                              rng=rng.spawn()) for _ in range(n)]
    return DynamicsEnsemble(members, beta=1.0)


def test_actor_outputs_in_bounds():
    agent = small_agent(rng=Rng(0))
    for p in agent.actor.parameters():
        p.data *= 50  # blow up pre-tanh magnitudes
    s = Rng(1).normal((32, 2)).astype(np.float32)
    a = agent.act(s)
    assert np.all(np.abs(a) <= 1.0)


def test_soft_update_exact_formula():
    agent = small_agent(rng=Rng(3))
    for p in agent.actor.parameters():  # desync targets
        p.data += 0.5
    expected = [(np.float32(1 - agent.tau) * pt.data
                 + np.float32(agent.tau) * po.data).copy()
                for pt, po in zip(agent.actor_target.parameters(),
                                  agent.actor.parameters())]
    agent.soft_update_targets()
    for e, pt in zip(expected, agent.actor_target.parameters()):
        assert np.array_equal(e, pt.data)


def test_critic_loss_hand_values():
    agent = small_agent(gamma=0.0)  # zero nets: q == 0 everywhere
    batch = toy_batch(Rng(0), 16, r=1.0)
    loss = critic_td_loss(agent, batch, Rng(1))
    assert loss.item() == pytest.approx(2.0)  # both critics miss by 1


def test_critic_terminal_ignores_next_state():
    agent = small_agent(rng=Rng(2), gamma=0.99)
    rng = Rng(0)
    done = np.ones(8, bool)
    b1 = toy_batch(rng, 8, r=0.5, done=done)
    b2 = Batch(b1.s, b1.a, b1.r, b1.s_next + 100.0, b1.done, b1.domain)
    l1 = critic_td_loss(agent, b1, Rng(5))
    l2 = critic_td_loss(agent, b2, Rng(5))
    assert l1.item() == pytest.approx(l2.item())


def test_critic_zero_when_already_fit():
    agent = small_agent(gamma=0.0)
    # zero critics fit r == 0 exactly
    batch = toy_batch(Rng(0), 8, r=0.0)
    assert critic_td_loss(agent, batch, Rng(1)).item() == 0.0


def test_bc_weights_zero_q_degenerate():
    agent = small_agent()  # critics are zero nets
    s = Rng(0).normal((6, 2)).astype(np.float32)
    w = bc_weights(agent, s)
    assert np.array_equal(w, np.ones(6))


def test_lambda_formula():
    agent = small_agent(alpha=1.0, weight_mode="none")
    agent.q1.biases[-1].data[:] = 10.0  # q1 == 10 everywhere
    batch = toy_batch(Rng(0), 8)
    loss = actor_loss(agent, batch, None)
    # loss = -lambda * mean q_pi = -(1/10) * 10 = -1
    assert loss.item() == pytest.approx(-1.0, rel=1e-6)


def test_weight_ratio_exp_of_normalized_q():
    # build q1(s, a) == s through relu(s) - relu(-s): states +1/-1 then have
    # normalized Q of +1/-1 and the weight ratio must be e^2
    agent = small_agent(sd=1)
    agent.q1.weights[0].data[0, 0] = 1.0
    agent.q1.weights[0].data[1, 0] = -1.0
    agent.q1.weights[1].data[0, 0] = 1.0
    agent.q1.weights[1].data[1, 1] = 1.0
    agent.q1.weights[2].data[0, 0] = 1.0
    agent.q1.weights[2].data[0, 1] = -1.0
    states = np.array([[1.0], [-1.0]], np.float32)
    w = bc_weights(agent, states)
    assert w[0] / w[1] == pytest.approx(np.exp(2.0), rel=1e-6)


def test_actor_loss_rejects_fake_in_bc_batch():
    agent = small_agent(rng=Rng(1))
    enhanced = toy_batch(Rng(0), 8)
    fake = toy_batch(Rng(2), 4, domain="fake")
    with pytest.raises(ValueError, match="fake"):
        actor_loss(agent, enhanced, fake)
    with pytest.raises(ValueError, match="behavior-cloning"):
        actor_loss(agent, enhanced, None)


def test_actor_and_critic_gradients_match_fd():
    rng = Rng(8)
    agent = small_agent(rng=Rng(4)).copy(dtype=np.float64)
    batch = toy_batch(rng, 6)
    noise = np.clip(0.2 * rng.normal((6, 1)), -0.5, 0.5)

    def critic_loss():
        # rebuild with fixed smoothing noise via a stub rng
        class FixedRng:
            def normal(self, shape):
                return noise.reshape(shape) / 0.2
        return critic_td_loss(agent, batch, FixedRng())

    critic_params = agent.q1.parameters() + agent.q2.parameters()
    assert check_gradients(critic_loss, critic_params, 12, rng) <= 1e-3

    # the cloning weights are constants of the loss: pin them for FD
    pinned = bc_weights(agent, batch.s)

    def a_loss():
        return actor_loss(agent, batch, batch, weights=pinned)

    assert check_gradients(a_loss, agent.actor.parameters(), 12, rng) <= 1e-3


def test_rollout_counts_and_determinism():
    ens = tiny_ensemble()
    agent = small_agent(rng=Rng(5))
    starts = Rng(7).normal((10, 2)).astype(np.float32)
    fake = rollout_fake(agent, ens, starts, 1, Rng(3))
    assert len(fake) == 10
    assert np.all(fake.domain == "fake")
    assert not fake.done.any()
    fake2 = rollout_fake(agent, ens, starts, 1, Rng(3))
    assert np.array_equal(fake.s_next, fake2.s_next)
    assert np.array_equal(fake.r, fake2.r)
    fake3 = rollout_fake(agent, ens, starts, 3, Rng(3))
    assert len(fake3) == 30


def test_rollout_penalty_dominates_with_huge_beta():
    ens = tiny_ensemble(rng=Rng(11))
    ens.beta = 1e6
    agent = small_agent(rng=Rng(5))
    starts = Rng(7).normal((16, 2)).astype(np.float32)
    fake = rollout_fake(agent, ens, starts, 1, Rng(3))
    assert np.all(fake.r < -10.0)  # members disagree, so u > 0


def test_train_zero_steps_and_determinism():
    src = toy_dataset(Rng(0), 200)
    trg = toy_dataset(Rng(1), 40)
    ens = tiny_ensemble(rng=Rng(2))

    def run(seed, steps):
        agent = small_agent(rng=Rng(42))
        cfg = PolicyTrainConfig(steps=steps, rollout_batch=8, batch_src=16,
                                batch_trg=16, batch_fake=16)
        train_policy(agent, ens, src, trg, cfg, Rng(seed))
        return [p.data.copy() for p in agent.actor.parameters()]

    before = [p.data.copy() for p in small_agent(rng=Rng(42)).actor.parameters()]
    assert all(np.array_equal(a, b) for a, b in zip(run(0, 0), before))
    w1, w2 = run(9, 25), run(9, 25)
    assert all(np.array_equal(a, b) for a, b in zip(w1, w2))


def test_no_rollout_mode_never_touches_ensemble():
    src = toy_dataset(Rng(0), 200)
    trg = toy_dataset(Rng(1), 40)
    agent = small_agent(rng=Rng(4))
    cfg = PolicyTrainConfig(steps=10, use_rollouts=False, batch_src=16,
                            batch_trg=16, batch_fake=16)
    history = train_policy(agent, None, src, trg, cfg, Rng(5))
    assert len(history["critic_loss"]) == 10


def test_checkpoint_roundtrip(tmp_path):
    agent = small_agent(rng=Rng(12), alpha=0.7, weight_mode="vanilla")
    train_policy(agent, tiny_ensemble(rng=Rng(1)), toy_dataset(Rng(0), 100),
                 toy_dataset(Rng(2), 30),
                 PolicyTrainConfig(steps=5, rollout_batch=8, batch_src=8,
                                   batch_trg=8, batch_fake=8), Rng(3))
    path = tmp_path / "agent.mbdp"
    save_agent(agent, path)
    loaded = load_agent(path)
    assert loaded.weight_mode == "vanilla"
    assert loaded.alpha == np.float32(0.7)
    for p_old, p_new in zip(agent.parameters(), loaded.parameters()):
        assert np.array_equal(p_old.data, p_new.data)
    save_agent(loaded, tmp_path / "agent2.mbdp")
    assert (tmp_path / "agent2.mbdp").read_bytes() == path.read_bytes()


def test_bc_weight_ranking_invariant_to_critic_scale():
    agent = small_agent(rng=Rng(6))
    states = Rng(3).normal((12, 2)).astype(np.float32)
    w_before = bc_weights(agent, states)
    # scaling the output layer multiplies every critic value by 3 exactly
    agent.q1.weights[-1].data *= 3.0
    agent.q1.biases[-1].data *= 3.0
    w_after = bc_weights(agent, states)
    assert np.array_equal(np.argsort(w_before), np.argsort(w_after))
    # normalization by mean |Q| makes the weights exactly scale-invariant
    assert np.allclose(w_before, w_after, rtol=1e-4)
