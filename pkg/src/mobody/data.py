"""Offline transition datasets: collection, binary persistence, sampling.

File format (little-endian): magic ``MBDY``, u32 version=1, length-prefixed
UTF-8 strings (env_id, shift_kind, shift_level_text, behavior_kind), u32
state_dim, u32 action_dim, u64 count, then ``count`` packed records of
[s f32*sd][a f32*ad][r f32][s' f32*sd][done u8], then a normalization block
[mean f32*sd][std f32*sd].
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .envs import EnvSpec, RefPolicyKind, env_step, reference_policy, reset
from .rng import Rng

MAGIC = b"MBDY"
VERSION = 1
FAKE_BUFFER_CAPACITY = 100_000
STD_FLOOR = 1e-6


class DatasetFormatError(ValueError):
    pass


@dataclass
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    done: bool
    domain: str  # src | trg | fake


@dataclass
class Batch:
    """Columnar minibatch; ``domain`` tags each row src/trg/fake."""
    s: np.ndarray        # (B, sd) f32
    a: np.ndarray        # (B, ad) f32
    r: np.ndarray        # (B,) f32
    s_next: np.ndarray   # (B, sd) f32
    done: np.ndarray     # (B,) bool
    domain: np.ndarray   # (B,) unicode

    def __len__(self):
        return self.s.shape[0]

    @staticmethod
    def concat(parts: list["Batch"]) -> "Batch":
        parts = [p for p in parts if len(p) > 0]
        if not parts:
            raise ValueError("cannot concat zero nonempty batches")
        return Batch(*(np.concatenate([getattr(p, f) for p in parts])
                       for f in ("s", "a", "r", "s_next", "done", "domain")))


@dataclass(frozen=True)
class Normalizer:
    """Per-dimension affine state normalizer (std floored at 1e-6)."""
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def identity(cls, dim: int) -> "Normalizer":
        return cls(np.zeros(dim, dtype=np.float32), np.ones(dim, dtype=np.float32))

    @classmethod
    def from_states(cls, states: np.ndarray) -> "Normalizer":
        mean = states.astype(np.float64).mean(axis=0)
        std = np.maximum(states.astype(np.float64).std(axis=0), STD_FLOOR)
        return cls(mean.astype(np.float32), std.astype(np.float32))

    def normalize(self, x: np.ndarray) -> np.ndarray:
        out = (x.astype(np.float64) - self.mean.astype(np.float64)) / self.std.astype(np.float64)
        return out.astype(x.dtype if x.dtype in (np.float32, np.float64) else np.float32)

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        out = x.astype(np.float64) * self.std.astype(np.float64) + self.mean.astype(np.float64)
        return out.astype(x.dtype if x.dtype in (np.float32, np.float64) else np.float32)


@dataclass
class TransitionDataset:
    states: np.ndarray        # (N, sd) f32
    actions: np.ndarray       # (N, ad) f32
    rewards: np.ndarray       # (N,) f32
    next_states: np.ndarray   # (N, sd) f32
    dones: np.ndarray         # (N,) bool
    env_id: str
    shift_kind: str
    shift_level_text: str
    behavior_kind: str
    state_mean: np.ndarray    # (sd,) f32
    state_std: np.ndarray     # (sd,) f32
    seed: int | None = field(default=None, compare=False)  # provenance; not persisted

    def __post_init__(self):
        n = self.states.shape[0]
        if not all(arr.shape[0] == n for arr in
                   (self.actions, self.rewards, self.next_states, self.dones)):
            raise ValueError("column lengths differ")
        if not np.all(np.isfinite(self.rewards)):
            raise ValueError("non-finite reward in dataset")

    def __len__(self):
        return self.states.shape[0]

    def __eq__(self, other):
        if not isinstance(other, TransitionDataset):
            return NotImplemented
        meta_eq = (self.env_id, self.shift_kind, self.shift_level_text, self.behavior_kind) == \
                  (other.env_id, other.shift_kind, other.shift_level_text, other.behavior_kind)
        return meta_eq and all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("states", "actions", "rewards", "next_states",
                      "dones", "state_mean", "state_std"))

    @property
    def state_dim(self):
        return self.states.shape[1]

    @property
    def action_dim(self):
        return self.actions.shape[1]

    def normalizer(self) -> Normalizer:
        return Normalizer(self.state_mean, self.state_std)

    def take(self, idx: np.ndarray, domain: str) -> Batch:
        return Batch(self.states[idx], self.actions[idx], self.rewards[idx],
                     self.next_states[idx], self.dones[idx],
                     np.full(len(idx), domain, dtype="<U4"))

    def with_rewards(self, rewards: np.ndarray) -> "TransitionDataset":
        """Copy with replaced rewards; every other column is shared bit-exactly."""
        return TransitionDataset(
            self.states, self.actions, rewards.astype(np.float32), self.next_states,
            self.dones, self.env_id, self.shift_kind, self.shift_level_text,
            self.behavior_kind, self.state_mean, self.state_std, seed=self.seed)


def collect_dataset(spec: EnvSpec, behavior: RefPolicyKind, n_transitions: int,
                    seed: int) -> TransitionDataset:
    """Roll behavior-policy episodes until ``n_transitions`` are gathered."""
    if n_transitions < 1:
        raise ValueError("n_transitions must be >= 1")
    rng = Rng(seed)
    rows_s, rows_a, rows_r, rows_s2, rows_d = [], [], [], [], []
    while len(rows_s) < n_transitions:
        ep_rng = rng.spawn()
        s = reset(spec, ep_rng)
        for _ in range(spec.horizon):
            a = reference_policy(behavior, spec, s, ep_rng)
            s2, r, done = env_step(spec, s, a)
            rows_s.append(np.asarray(s, dtype=np.float32))
            rows_a.append(np.asarray(a, dtype=np.float32))
            rows_r.append(np.float32(r))
            rows_s2.append(np.asarray(s2, dtype=np.float32))
            rows_d.append(done)
            s = s2
            if done or len(rows_s) >= n_transitions:
                break
    states = np.stack(rows_s)
    norm = Normalizer.from_states(states)
    return TransitionDataset(
        states, np.stack(rows_a), np.asarray(rows_r, dtype=np.float32),
        np.stack(rows_s2), np.asarray(rows_d, dtype=bool),
        env_id=spec.env_id, shift_kind=spec.shift_kind,
        shift_level_text=repr(float(spec.shift_level)),
        behavior_kind=behavior.tag, state_mean=norm.mean, state_std=norm.std,
        seed=seed)


def _record_dtype(sd: int, ad: int) -> np.dtype:
    return np.dtype([("s", "<f4", (sd,)), ("a", "<f4", (ad,)), ("r", "<f4"),
                     ("s2", "<f4", (sd,)), ("done", "u1")])


def _write_string(f, text: str):
    raw = text.encode("utf-8")
    f.write(struct.pack("<I", len(raw)))
    f.write(raw)


def _read_exact(f, n: int, what: str) -> bytes:
    raw = f.read(n)
    if len(raw) != n:
        raise DatasetFormatError(f"unexpected end of file reading {what}")
    return raw


def _read_string(f, what: str) -> str:
    (n,) = struct.unpack("<I", _read_exact(f, 4, f"{what} length"))
    return _read_exact(f, n, what).decode("utf-8")


def save_dataset(ds: TransitionDataset, path):
    sd, ad = ds.state_dim, ds.action_dim
    rec = np.zeros(len(ds), dtype=_record_dtype(sd, ad))
    rec["s"] = ds.states
    rec["a"] = ds.actions
    rec["r"] = ds.rewards
    rec["s2"] = ds.next_states
    rec["done"] = ds.dones.astype(np.uint8)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        for text in (ds.env_id, ds.shift_kind, ds.shift_level_text, ds.behavior_kind):
            _write_string(f, text)
        f.write(struct.pack("<IIQ", sd, ad, len(ds)))
        f.write(rec.tobytes())
        f.write(ds.state_mean.astype("<f4").tobytes())
        f.write(ds.state_std.astype("<f4").tobytes())


def load_dataset(path) -> TransitionDataset:
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != MAGIC:
            raise DatasetFormatError("bad magic")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != VERSION:
            raise DatasetFormatError(f"unsupported version {version}")
        env_id = _read_string(f, "env_id")
        shift_kind = _read_string(f, "shift_kind")
        shift_level_text = _read_string(f, "shift_level_text")
        behavior_kind = _read_string(f, "behavior_kind")
        sd, ad, count = struct.unpack("<IIQ", _read_exact(f, 16, "dims/count"))
        dtype = _record_dtype(sd, ad)
        rec = np.frombuffer(_read_exact(f, dtype.itemsize * count, "records"),
                            dtype=dtype, count=count)
        mean = np.frombuffer(_read_exact(f, 4 * sd, "norm mean"), dtype="<f4").copy()
        std = np.frombuffer(_read_exact(f, 4 * sd, "norm std"), dtype="<f4").copy()
        trailing = f.read(1)
        if trailing:
            raise DatasetFormatError("trailing bytes after normalization block")
    return TransitionDataset(
        rec["s"].astype(np.float32).reshape(count, sd),
        rec["a"].astype(np.float32).reshape(count, ad),
        rec["r"].astype(np.float32),
        rec["s2"].astype(np.float32).reshape(count, sd),
        rec["done"].astype(bool),
        env_id, shift_kind, shift_level_text, behavior_kind, mean, std)


class ReplayView:
    """Named collection of datasets with per-dataset sampling weights."""

    def __init__(self, datasets: dict[str, TransitionDataset],
                 weights: dict[str, float] | None = None):
        if not datasets:
            raise ValueError("need at least one dataset")
        self.datasets = dict(datasets)
        if weights is None:
            weights = {name: float(len(ds)) for name, ds in self.datasets.items()}
        if any(w < 0 for w in weights.values()) or sum(weights.values()) <= 0:
            raise ValueError("weights must be non-negative and not all zero")
        self.weights = {name: float(weights.get(name, 0.0)) for name in self.datasets}

    def sample_batch(self, sizes: dict[str, int], rng: Rng) -> Batch:
        """Uniform-with-replacement draws per dataset, tags preserved."""
        parts = []
        for name, ds in self.datasets.items():
            n = int(sizes.get(name, 0))
            if n == 0:
                continue
            if len(ds) == 0:
                raise ValueError(f"dataset '{name}' is empty but {n} samples requested")
            idx = rng.integers(len(ds), n)
            parts.append(ds.take(idx, name))
        if not parts:
            sd = next(iter(self.datasets.values())).state_dim
            ad = next(iter(self.datasets.values())).action_dim
            return Batch(np.zeros((0, sd), np.float32), np.zeros((0, ad), np.float32),
                         np.zeros(0, np.float32), np.zeros((0, sd), np.float32),
                         np.zeros(0, bool), np.zeros(0, dtype="<U4"))
        return Batch.concat(parts)

    def sample_mixed(self, n: int, rng: Rng) -> Batch:
        """One batch drawn across datasets proportionally to the view weights."""
        names = list(self.datasets)
        w = np.array([self.weights[name] for name in names], dtype=np.float64)
        cdf = np.cumsum(w / w.sum())
        choices = np.searchsorted(cdf, rng.random(n), side="right")
        inner = rng.random(n)
        parts = []
        for i, name in enumerate(names):
            mask = choices == i
            if not mask.any():
                continue
            ds = self.datasets[name]
            if len(ds) == 0:
                raise ValueError(f"dataset '{name}' is empty")
            idx = np.floor(inner[mask] * len(ds)).astype(np.int64)
            parts.append(ds.take(idx, name))
        return Batch.concat(parts)


class FakeBuffer:
    """Bounded FIFO buffer of model-generated transitions."""

    def __init__(self, state_dim: int, action_dim: int,
                 capacity: int = FAKE_BUFFER_CAPACITY):
        self.capacity = capacity
        self.size = 0
        self._head = 0
        self._s = np.zeros((capacity, state_dim), dtype=np.float32)
        self._a = np.zeros((capacity, action_dim), dtype=np.float32)
        self._r = np.zeros(capacity, dtype=np.float32)
        self._s2 = np.zeros((capacity, state_dim), dtype=np.float32)
        self._done = np.zeros(capacity, dtype=bool)

    def __len__(self):
        return self.size

    def push(self, s, a, r, s2, done):
        for i in range(s.shape[0]):
            j = self._head
            self._s[j] = s[i]
            self._a[j] = a[i]
            self._r[j] = r[i]
            self._s2[j] = s2[i]
            self._done[j] = done[i]
            self._head = (j + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)

    def sample(self, n: int, rng: Rng) -> Batch:
        if self.size == 0:
            raise ValueError("fake buffer is empty")
        idx = rng.integers(self.size, n)
        return Batch(self._s[idx], self._a[idx], self._r[idx], self._s2[idx],
                     self._done[idx], np.full(n, "fake", dtype="<U4"))
