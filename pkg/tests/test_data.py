import numpy as np
import pytest

from mobody.data import (
    Batch, DatasetFormatError, FakeBuffer, Normalizer, ReplayView,
    TransitionDataset, collect_dataset, load_dataset, save_dataset,
)
from mobody.envs import base_spec, make_policy_kind, spec_for
from mobody.rng import Rng


@pytest.fixture(scope="module")
def small_ds():
    spec = base_spec("pointmass2d")
    return collect_dataset(spec, make_policy_kind("medium", spec.env_id), 300, seed=4)


def test_collect_exact_count_and_single():
    spec = base_spec("pendulum")
    kind = make_policy_kind("random", spec.env_id)
    ds = collect_dataset(spec, kind, 1, seed=0)
    assert len(ds) == 1
    ds5 = collect_dataset(spec, kind, 5, seed=0)
    assert len(ds5) == 5


def test_collect_ratio_preset():
    # desk preset keeps the 200:1 source/target ratio
    assert 40_000 // 200 == 200


def test_collect_deterministic_bytes(tmp_path, small_ds):
    spec = base_spec("pointmass2d")
    again = collect_dataset(spec, make_policy_kind("medium", spec.env_id), 300, seed=4)
    p1, p2 = tmp_path / "a.mbdy", tmp_path / "b.mbdy"
    save_dataset(small_ds, p1)
    save_dataset(again, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_roundtrip_identity(tmp_path, small_ds):
    path = tmp_path / "ds.mbdy"
    save_dataset(small_ds, path)
    loaded = load_dataset(path)
    assert loaded == small_ds
    save_dataset(loaded, tmp_path / "ds2.mbdy")
    assert (tmp_path / "ds2.mbdy").read_bytes() == path.read_bytes()


def test_bad_magic(tmp_path, small_ds):
    path = tmp_path / "ds.mbdy"
    save_dataset(small_ds, path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(DatasetFormatError, match="bad magic"):
        load_dataset(path)


def test_truncated_payload(tmp_path, small_ds):
    path = tmp_path / "ds.mbdy"
    save_dataset(small_ds, path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - 7])
    with pytest.raises(DatasetFormatError, match="unexpected end"):
        load_dataset(path)


def test_bad_version(tmp_path, small_ds):
    path = tmp_path / "ds.mbdy"
    save_dataset(small_ds, path)
    raw = bytearray(path.read_bytes())
    raw[4:8] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(raw))
    with pytest.raises(DatasetFormatError, match="version"):
        load_dataset(path)


def test_normalizer_roundtrip(small_ds):
    norm = small_ds.normalizer()
    raw = small_ds.states
    back = norm.denormalize(norm.normalize(raw))
    assert np.max(np.abs(back - raw)) <= 1e-6
    assert np.all(norm.std >= 1e-6)


def test_sample_batch_tags_and_sizes(small_ds):
    spec = spec_for("pointmass2d", "gravity:5.0")
    trg = collect_dataset(spec, make_policy_kind("medium", spec.env_id), 50, seed=9)
    view = ReplayView({"src": small_ds, "trg": trg})
    batch = view.sample_batch({"src": 128, "trg": 128}, Rng(0))
    assert len(batch) == 256
    assert int(np.sum(batch.domain == "src")) == 128
    assert int(np.sum(batch.domain == "trg")) == 128
    empty = view.sample_batch({"src": 0}, Rng(0))
    assert len(empty) == 0


def test_sample_batch_deterministic(small_ds):
    view = ReplayView({"src": small_ds})
    b1 = view.sample_batch({"src": 64}, Rng(7))
    b2 = view.sample_batch({"src": 64}, Rng(7))
    assert np.array_equal(b1.s, b2.s) and np.array_equal(b1.a, b2.a)


def test_sample_empty_dataset_rejected(small_ds):
    empty = small_ds.with_rewards(small_ds.rewards)
    empty = TransitionDataset(
        small_ds.states[:0], small_ds.actions[:0], small_ds.rewards[:0],
        small_ds.next_states[:0], small_ds.dones[:0], small_ds.env_id,
        small_ds.shift_kind, small_ds.shift_level_text, small_ds.behavior_kind,
        small_ds.state_mean, small_ds.state_std)
    view = ReplayView({"src": empty}, weights={"src": 1.0})
    with pytest.raises(ValueError, match="empty"):
        view.sample_batch({"src": 4}, Rng(0))


def test_sampling_uniformity(small_ds):
    ten = TransitionDataset(
        small_ds.states[:10], small_ds.actions[:10], small_ds.rewards[:10],
        small_ds.next_states[:10], small_ds.dones[:10], small_ds.env_id,
        small_ds.shift_kind, small_ds.shift_level_text, small_ds.behavior_kind,
        small_ds.state_mean, small_ds.state_std)
    view = ReplayView({"src": ten})
    rng = Rng(21)
    draws = 100_000
    batch = view.sample_batch({"src": draws}, rng)
    key = batch.s[:, 0]
    _, counts = np.unique(key, return_counts=True)
    expected = draws / 10
    sigma = np.sqrt(draws * 0.1 * 0.9)
    assert np.all(np.abs(counts - expected) <= 3 * sigma)


def test_fake_buffer_fifo_and_sampling():
    buf = FakeBuffer(2, 1, capacity=5)
    s = np.arange(12, dtype=np.float32).reshape(6, 2)
    a = np.zeros((6, 1), np.float32)
    r = np.arange(6, dtype=np.float32)
    buf.push(s, a, r, s, np.zeros(6, bool))
    assert len(buf) == 5
    batch = buf.sample(64, Rng(0))
    # oldest row (r=0) was overwritten
    assert 0.0 not in batch.r
    assert np.all(batch.domain == "fake")
