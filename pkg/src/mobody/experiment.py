"""End-to-end experiment pipeline and metric emission.

A run is fully described by an :class:`ExperimentConfig`; its content hash is
the run id. Per seed the pipeline collects datasets, trains the domain
classifiers and augments source rewards, trains the dynamics ensemble in the
configured mode, trains the policy, and evaluates returns / normalized score
/ rollout MSE. Every stage checkpoints to files inside the run directory, and
all metrics land in one long-format CSV whose bytes depend only on the config
and seeds (rerunning reproduces it exactly).
"""

from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import dara as dara_mod
from . import dynamics as dyn_mod
from . import metrics as met
from . import policy as pol_mod
from .data import TransitionDataset, collect_dataset, load_dataset, save_dataset
from .envs import base_spec, make_policy_kind, parse_shift, spec_for
from .rng import Rng

METRICS_HEADER = ("run_id", "env", "shift_kind", "shift_level", "seed",
                  "stage", "step", "metric_name", "value")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class ExperimentConfig:
    env: str = "pointmass2d"
    shift: str = "gravity:5.0"
    seeds: tuple[int, ...] = (0, 1, 2)
    behavior: str = "medium"
    n_src: int = 40_000
    n_trg: int = 200
    # shared optimization
    lr: float = 3e-4
    batch_src: int = 128
    batch_trg: int = 128
    batch_fake: int = 128
    gamma: float = 0.99
    tau: float = 5e-3
    # dynamics
    dynamics_mode: str = "mobody"
    dyn_steps: int = 5000
    target_freq: int = 2
    lambda_rep: float = 1.0
    no_cycle_loss: bool = False
    n_members: int = 7
    d_z: int = 16
    beta: float = 5.0
    # reward augmentation
    disable_dara: bool = False
    eta: float = 0.1
    dara_steps: int = 10_000
    # policy
    policy_steps: int = 5000
    rollout_len: int = 1
    rollout_batch: int = 128
    alpha: float = 0.1
    weight_mode: str = "target_q"
    weight_clamp: float = 10.0
    disable_rollouts: bool = False
    # evaluation
    eval_episodes: int = 20
    eval_every: int = 1000
    anchor_episodes: int = 20
    mse_horizon: int = 50
    mse_starts: int = 10

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "seeds":
                value = ",".join(str(s) for s in value)
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"

    @property
    def run_id(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:12]

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        overrides = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected key=value, got '{raw}'")
            key, _, value = line.partition("=")
            overrides[key.strip()] = value.strip()
        return cls().with_overrides(overrides)

    def with_overrides(self, overrides: dict[str, str]) -> "ExperimentConfig":
        typed = {}
        by_name = {f.name: f for f in fields(self)}
        for key, value in overrides.items():
            if key not in by_name:
                raise ValueError(f"unknown config key '{key}'")
            typed[key] = _parse_field(by_name[key], value)
        return replace(self, **typed)


def _parse_field(field, value):
    if isinstance(value, str):
        if field.name == "seeds":
            return tuple(int(v) for v in value.split(",") if v.strip() != "")
        if field.type in ("int", int):
            return int(value)
        if field.type in ("float", float):
            return float(value)
        if field.type in ("bool", bool):
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
            raise ValueError(f"bad boolean for {field.name}: '{value}'")
    return value


def write_metrics_csv(path, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_HEADER)
    for row in rows:
        writer.writerow(row)
    Path(path).write_text(buf.getvalue())


def read_metrics_csv(path):
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = tuple(next(reader))
        if header != METRICS_HEADER:
            raise ValueError(f"unexpected metrics header {header}")
        return [tuple(row) for row in reader]


class _Recorder:
    def __init__(self, cfg: ExperimentConfig):
        shift = parse_shift(cfg.shift)
        self.prefix = (cfg.run_id, cfg.env, shift.kind, repr(shift.level))
        self.rows: list[tuple] = []

    def add(self, seed, stage, step, name, value):
        self.rows.append((*self.prefix, seed, stage, step, name, repr(float(value))))


def _thin(n_steps: int, keep: int = 20) -> list[int]:
    if n_steps <= 0:
        return []
    stride = max(1, n_steps // keep)
    idx = list(range(stride - 1, n_steps, stride))
    if idx and idx[-1] != n_steps - 1:
        idx.append(n_steps - 1)
    return idx


def run_experiment(cfg: ExperimentConfig, out_dir) -> Path:
    """Run the full pipeline for every seed; returns the run directory."""
    run_dir = Path(out_dir) / cfg.run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(cfg.to_text())
    (run_dir / "manifest.txt").write_text(
        f"run_id={cfg.run_id}\nseeds={','.join(str(s) for s in cfg.seeds)}\n")

    source_spec = base_spec(cfg.env)
    target_spec = spec_for(cfg.env, cfg.shift)

    try:
        anchors = met.compute_anchors(target_spec, cfg.anchor_episodes)
        met.save_anchors(run_dir / "anchors.json",
                         {anchors.key: anchors})
    except Exception as e:
        raise StageError("calibrate-anchors", e) from e

    rec = _Recorder(cfg)
    for seed in cfg.seeds:
        _run_seed(cfg, seed, run_dir, source_spec, target_spec, anchors, rec)
    write_metrics_csv(run_dir / "metrics.csv", rec.rows)
    write_summary(run_dir / "summary.csv", [run_dir])
    return run_dir


def _run_seed(cfg, seed, run_dir, source_spec, target_spec, anchors, rec):
    seed_dir = run_dir / f"seed{seed}"
    seed_dir.mkdir(exist_ok=True)
    root = Rng(seed)
    src_seed = root.child_seed()
    trg_seed = root.child_seed()
    dara_rng = root.spawn()
    dyn_rng = root.spawn()
    policy_rng = root.spawn()
    eval_seed = root.child_seed()
    mse_seed = root.child_seed()

    # --- datasets -------------------------------------------------------
    stage = "gen-data"
    try:
        behavior = make_policy_kind(cfg.behavior, cfg.env)
        src_path, trg_path = seed_dir / "src.mbdy", seed_dir / "trg.mbdy"
        if src_path.exists():
            d_src = load_dataset(src_path)
        else:
            d_src = collect_dataset(source_spec, behavior, cfg.n_src, src_seed)
            save_dataset(d_src, src_path)
        if trg_path.exists():
            d_trg = load_dataset(trg_path)
        else:
            d_trg = collect_dataset(target_spec, behavior, cfg.n_trg, trg_seed)
            save_dataset(d_trg, trg_path)
        rec.add(seed, stage, 0, "src_count", len(d_src))
        rec.add(seed, stage, 0, "trg_count", len(d_trg))
    except Exception as e:
        raise StageError(stage, e) from e

    normalizer = d_src.normalizer()

    # --- reward augmentation ---------------------------------------------
    stage = "train-dara"
    try:
        if cfg.disable_dara:
            d_src_aug = d_src
        else:
            pair_path = seed_dir / "dara.mbdc"
            dara_cfg = dara_mod.DaraConfig(eta=cfg.eta, steps=cfg.dara_steps,
                                           batch_size=cfg.batch_src, lr=cfg.lr)
            if pair_path.exists():
                pair = dara_mod.load_classifiers(pair_path)
            else:
                pair = dara_mod.DomainClassifierPair(
                    source_spec.state_dim, source_spec.action_dim,
                    rng=dara_rng.spawn(), normalizer=normalizer)
                history = dara_mod.train_classifiers(pair, d_src, d_trg,
                                                     dara_cfg, dara_rng.spawn())
                for i in _thin(len(history)):
                    rec.add(seed, stage, i + 1, "batch_acc_sa", history[i, 0])
                    rec.add(seed, stage, i + 1, "batch_acc_sas", history[i, 1])
                dara_mod.save_classifiers(pair, pair_path)
            sa_acc, sas_acc = dara_mod.classifier_accuracy(pair, d_src, d_trg)
            rec.add(seed, stage, cfg.dara_steps, "acc_sa", sa_acc)
            rec.add(seed, stage, cfg.dara_steps, "acc_sas", sas_acc)
            d_src_aug = dara_mod.augment_source(d_src, pair, cfg.eta,
                                                dara_cfg.prob_floor)
            save_dataset(d_src_aug, seed_dir / "src_aug.mbdy")
            rec.add(seed, stage, cfg.dara_steps, "mean_reward_shift",
                    float(np.mean(d_src_aug.rewards - d_src.rewards)))
    except Exception as e:
        raise StageError(stage, e) from e

    # --- dynamics ---------------------------------------------------------
    stage = "train-dynamics"
    try:
        dyn_path = seed_dir / "dynamics.mbdw"
        if dyn_path.exists():
            ensemble = dyn_mod.load_ensemble(dyn_path)
        else:
            ensemble = dyn_mod.DynamicsEnsemble.create(
                source_spec.state_dim, source_spec.action_dim, dyn_rng.spawn(),
                n_members=cfg.n_members, beta=cfg.beta, d_z=cfg.d_z,
                normalizer=normalizer,
                single_encoder=cfg.dynamics_mode != "mobody")
            dyn_cfg = dyn_mod.DynTrainConfig(
                mode=cfg.dynamics_mode, steps=cfg.dyn_steps,
                target_freq=cfg.target_freq, lambda_rep=cfg.lambda_rep,
                use_cycle_loss=not cfg.no_cycle_loss,
                batch_size=cfg.batch_src, lr=cfg.lr)
            history = dyn_mod.train_dynamics(ensemble, d_src_aug, d_trg,
                                             dyn_cfg, dyn_rng.spawn())
            for name, values in sorted(history.items()):
                member_mean = np.nanmean(values, axis=0)
                for i in _thin(values.shape[1]):
                    rec.add(seed, stage, i + 1, name, member_mean[i])
            dyn_mod.save_ensemble(ensemble, dyn_path)
    except Exception as e:
        raise StageError(stage, e) from e

    # --- policy -----------------------------------------------------------
    stage = "train-policy"
    try:
        agent_path = seed_dir / "policy.mbdp"
        if agent_path.exists():
            agent = pol_mod.load_agent(agent_path)
        else:
            agent = pol_mod.PolicyAgent(
                source_spec.state_dim, source_spec.action_dim,
                rng=policy_rng.spawn(), normalizer=normalizer, gamma=cfg.gamma,
                tau=cfg.tau, alpha=cfg.alpha, weight_mode=cfg.weight_mode)
            pol_cfg = pol_mod.PolicyTrainConfig(
                steps=cfg.policy_steps, rollout_len=cfg.rollout_len,
                rollout_batch=cfg.rollout_batch, batch_src=cfg.batch_src,
                batch_trg=cfg.batch_trg, batch_fake=cfg.batch_fake,
                weight_clamp=cfg.weight_clamp, lr=cfg.lr,
                use_rollouts=not cfg.disable_rollouts)

            def eval_fn(current):
                return met.evaluate_agent(current, target_spec,
                                          cfg.eval_episodes, eval_seed)[0]

            history = pol_mod.train_policy(
                agent, ensemble, d_src_aug, d_trg, pol_cfg, policy_rng.spawn(),
                eval_fn=eval_fn if cfg.eval_every > 0 else None,
                eval_every=cfg.eval_every)
            for name in ("critic_loss", "actor_loss"):
                values = history[name]
                for i in _thin(len(values)):
                    rec.add(seed, stage, i + 1, name, values[i])
            for step_no, value in zip(history.get("eval_step", ()),
                                      history.get("eval_return", ())):
                rec.add(seed, stage, step_no, "eval_return", value)
            pol_mod.save_agent(agent, agent_path)
    except Exception as e:
        raise StageError(stage, e) from e

    # --- final evaluation ---------------------------------------------------
    stage = "evaluate"
    try:
        mean_ret, std_ret = met.evaluate_agent(agent, target_spec,
                                               cfg.eval_episodes, eval_seed)
        rec.add(seed, stage, cfg.policy_steps, "mean_return", mean_ret)
        rec.add(seed, stage, cfg.policy_steps, "std_return", std_ret)
        rec.add(seed, stage, cfg.policy_steps, "normalized_score",
                met.normalized_score(mean_ret, anchors))
        policy_fn = met.agent_policy(agent)
        rec.add(seed, stage, cfg.policy_steps, "rollout_mse_one_step",
                met.rollout_mse(ensemble, policy_fn, target_spec,
                                cfg.mse_horizon, cfg.mse_starts, mse_seed))
        rec.add(seed, stage, cfg.policy_steps, "rollout_mse_open_loop",
                met.rollout_mse(ensemble, policy_fn, target_spec,
                                cfg.mse_horizon, cfg.mse_starts, mse_seed,
                                open_loop=True))
    except Exception as e:
        raise StageError(stage, e) from e


def write_summary(out_path, run_dirs):
    """Aggregate evaluate-stage metrics over seeds into a summary CSV."""
    groups: dict[tuple, list[float]] = {}
    for run_dir in run_dirs:
        for row in read_metrics_csv(Path(run_dir) / "metrics.csv"):
            run_id, env, shift_kind, shift_level, seed, stage, step, name, value = row
            if stage != "evaluate":
                continue
            groups.setdefault((run_id, env, shift_kind, shift_level, name),
                              []).append(float(value))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("run_id", "env", "shift_kind", "shift_level",
                     "metric_name", "mean", "std", "n_seeds"))
    for key in sorted(groups):
        values = groups[key]
        writer.writerow((*key, repr(float(np.mean(values))),
                         repr(float(np.std(values))), len(values)))
    Path(out_path).write_text(buf.getvalue())
    return out_path
