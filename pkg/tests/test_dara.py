import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mobody.dara import (
    DaraConfig, DomainClassifierPair, augment_source, classifier_accuracy,
    delta_r, load_classifiers, save_classifiers, train_classifiers,
)
from mobody.data import TransitionDataset
from mobody.rng import Rng


def synth_dataset(rng, n, sd=2, ad=1, shift=0.0):
    s = (rng.normal((n, sd)) + shift).astype(np.float32)
    a = rng.uniform(-1, 1, (n, ad)).astype(np.float32)
    s2 = (rng.normal((n, sd)) + shift).astype(np.float32)
    r = rng.normal(n).astype(np.float32)
    return TransitionDataset(s, a, r, s2, np.zeros(n, bool), "toy", "none", "1.0",
                             "synthetic", np.zeros(sd, np.float32), np.ones(sd, np.float32))


def pair_with_constant_probs(p_sa, p_sas, sd=2, ad=1):
    pair = DomainClassifierPair(sd, ad, hidden=(4,), rng=None)
    pair.sa_net.biases[-1].data[:] = math.log(p_sa / (1 - p_sa))
    pair.sas_net.biases[-1].data[:] = math.log(p_sas / (1 - p_sas))
    return pair


def test_delta_r_zero_for_uninformative_classifiers():
    pair = pair_with_constant_probs(0.5, 0.5)
    s = Rng(0).normal((5, 2)).astype(np.float32)
    a = Rng(1).uniform(-1, 1, (5, 1)).astype(np.float32)
    assert np.allclose(delta_r(pair, s, a, s), 0.0, atol=1e-9)


def test_delta_r_hand_value():
    pair = pair_with_constant_probs(p_sa=0.5, p_sas=0.8)
    s = np.zeros((1, 2), np.float32)
    a = np.zeros((1, 1), np.float32)
    dr = delta_r(pair, s, a, s)
    assert dr[0] == pytest.approx(math.log(4.0), abs=1e-7)


def test_delta_r_antisymmetric_under_label_swap():
    # swapping the trg/src convention flips every logit, negating delta_r
    rng = Rng(3)
    pair = DomainClassifierPair(2, 1, hidden=(8,), rng=rng)
    flipped = DomainClassifierPair(2, 1, hidden=(8,), rng=None)
    for p_f, p_o in zip(flipped.parameters(), pair.parameters()):
        p_f.data = p_o.data.copy()
    for net in (flipped.sa_net, flipped.sas_net):
        net.weights[-1].data *= -1
        net.biases[-1].data *= -1
    s = rng.normal((16, 2)).astype(np.float32)
    a = rng.uniform(-1, 1, (16, 1)).astype(np.float32)
    s2 = rng.normal((16, 2)).astype(np.float32)
    assert np.allclose(delta_r(flipped, s, a, s2), -delta_r(pair, s, a, s2),
                       atol=1e-5)


def test_delta_r_finite_even_when_saturated():
    pair = DomainClassifierPair(2, 1, hidden=(4,), rng=None)
    pair.sas_net.biases[-1].data[:] = 200.0   # sigmoid == 1.0 in float
    pair.sa_net.biases[-1].data[:] = -200.0
    s = np.zeros((3, 2), np.float32)
    a = np.zeros((3, 1), np.float32)
    dr = delta_r(pair, s, a, s)
    assert np.all(np.isfinite(dr))


@settings(max_examples=60, deadline=None)
@given(p_sas=st.floats(1e-5, 1 - 1e-5), p_sa=st.floats(1e-5, 1 - 1e-5),
       bump=st.floats(1e-4, 0.1))
def test_delta_r_monotone_in_p_sas(p_sas, p_sa, bump):
    hi = min(p_sas + bump, 1 - 1e-6)
    if hi <= p_sas:
        return
    s = np.zeros((1, 2), np.float32)
    a = np.zeros((1, 1), np.float32)
    lo_pair = pair_with_constant_probs(p_sa, p_sas)
    hi_pair = pair_with_constant_probs(p_sa, hi)
    assert delta_r(hi_pair, s, a, s)[0] > delta_r(lo_pair, s, a, s)[0]


def test_augment_source_eta_zero_is_bitexact_copy():
    ds = synth_dataset(Rng(0), 64)
    pair = pair_with_constant_probs(0.3, 0.7)
    out = augment_source(ds, pair, eta=0.0)
    assert out == ds
    assert out.states is ds.states  # other columns shared, not copied


def test_augment_source_applies_eta_delta():
    ds = synth_dataset(Rng(0), 8)
    pair = pair_with_constant_probs(0.5, 0.8)  # delta_r = ln 4 everywhere
    out = augment_source(ds, pair, eta=0.1)
    expected = ds.rewards + np.float32(0.1 * math.log(4.0))
    assert np.allclose(out.rewards, expected, atol=1e-6)
    assert np.array_equal(out.states, ds.states)
    assert np.array_equal(out.dones, ds.dones)
    assert len(out) == len(ds)


def test_zero_training_steps_leaves_pair_unchanged():
    pair = DomainClassifierPair(2, 1, hidden=(8,), rng=Rng(1))
    before = [p.data.copy() for p in pair.parameters()]
    ds = synth_dataset(Rng(0), 32)
    train_classifiers(pair, ds, ds, DaraConfig(steps=0), Rng(2))
    assert all(np.array_equal(b, p.data) for b, p in zip(before, pair.parameters()))


def test_classifiers_separate_separable_domains():
    src = synth_dataset(Rng(0), 1500, shift=0.0)
    trg = synth_dataset(Rng(1), 1500, shift=4.0)  # linearly separable
    pair = DomainClassifierPair(2, 1, hidden=(32, 32), rng=Rng(2))
    train_classifiers(pair, src, trg, DaraConfig(steps=400, lr=1e-3), Rng(3))
    held_src = synth_dataset(Rng(10), 800, shift=0.0)
    held_trg = synth_dataset(Rng(11), 800, shift=4.0)
    sa_acc, sas_acc = classifier_accuracy(pair, held_src, held_trg)
    assert sa_acc >= 0.95 and sas_acc >= 0.95


def test_classifiers_near_chance_on_identical_domains():
    for seed in (0, 1, 2):
        src = synth_dataset(Rng(100 + seed), 2000, shift=0.0)
        trg = synth_dataset(Rng(200 + seed), 2000, shift=0.0)
        pair = DomainClassifierPair(2, 1, hidden=(32, 32), rng=Rng(seed))
        train_classifiers(pair, src, trg, DaraConfig(steps=400, lr=1e-3), Rng(seed + 7))
        held_src = synth_dataset(Rng(300 + seed), 2000, shift=0.0)
        held_trg = synth_dataset(Rng(400 + seed), 2000, shift=0.0)
        sa_acc, sas_acc = classifier_accuracy(pair, held_src, held_trg)
        assert abs(sa_acc - 0.5) <= 0.05
        assert abs(sas_acc - 0.5) <= 0.05


def test_empty_dataset_rejected():
    ds = synth_dataset(Rng(0), 10)
    empty = TransitionDataset(ds.states[:0], ds.actions[:0], ds.rewards[:0],
                              ds.next_states[:0], ds.dones[:0], "toy", "none",
                              "1.0", "synthetic", ds.state_mean, ds.state_std)
    pair = DomainClassifierPair(2, 1, hidden=(4,), rng=Rng(0))
    with pytest.raises(ValueError, match="nonempty"):
        train_classifiers(pair, ds, empty, DaraConfig(steps=1), Rng(0))


def test_checkpoint_roundtrip(tmp_path):
    pair = DomainClassifierPair(3, 2, hidden=(8, 8), rng=Rng(5))
    path = tmp_path / "clf.mbdc"
    save_classifiers(pair, path)
    loaded = load_classifiers(path)
    for p_old, p_new in zip(pair.parameters(), loaded.parameters()):
        assert np.array_equal(p_old.data, p_new.data)
    save_classifiers(loaded, tmp_path / "clf2.mbdc")
    assert (tmp_path / "clf2.mbdc").read_bytes() == path.read_bytes()
