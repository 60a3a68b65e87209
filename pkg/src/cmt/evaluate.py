"""
Rollouts, score normalization, a behavior-cloning baseline and comparison
reports.

Continuous actions use the head mean. Discrete actions are drawn from the
policy head with a per-seed stream (``decode="sample"``, the default) or taken
greedily (``decode="greedy"``); both are deterministic given the seed.
"""

from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numcore as nc
from .envs import EnvSpec, Episode, OfflineDataset, env_rng, env_step, episode_seed, initial_state
from .errors import ContractError
from .numcore import RngStream, Tensor
from .seqmodel import MLP, Linear, Module, ModelBundle, Trajectory, adaptor_apply, encode, generate_heads

MODES = ("reconstruct", "tuned")
DECODES = ("sample", "greedy")


def worker_count() -> int:
    raw = os.environ.get("CMT_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return os.cpu_count() or 1


def normalized_score(raw: float, random_ref: float, expert_ref: float) -> float:
    """100 * (raw - random_ref) / (expert_ref - random_ref)."""
    if expert_ref == random_ref:
        raise ContractError("expert_ref and random_ref must differ")
    # divide first so the anchors come out exactly 0 and 100
    return 100.0 * ((raw - random_ref) / (expert_ref - random_ref))


def _pick_action(spec: EnvSpec, row: np.ndarray, rng, decode: str):
    if not spec.discrete_actions:
        return np.clip(row, -1.0, 1.0)
    if decode == "greedy":
        return int(np.argmax(row))
    p = nc.softmax(Tensor(row)).data
    return int(rng.choice(len(p), p=p))


class CMTPolicy:
    """Acts by re-encoding the episode so far at every step.

    ``mode="tuned"`` passes the prompt through the adaptor; ``"reconstruct"``
    never touches it.
    """

    def __init__(self, bundle: ModelBundle, mode: str = "reconstruct", decode: str = "sample",
                 window: int | None = None):
        if mode not in MODES:
            raise ContractError(f"unknown mode {mode!r}; expected one of {MODES}")
        if decode not in DECODES:
            raise ContractError(f"unknown decode {decode!r}")
        self.bundle = bundle
        self.mode = mode
        self.decode = decode
        self.window = window or int(bundle.info.get("fragment_len", 16))

    def prompts(self, histories: list[Trajectory], contexts) -> np.ndarray:
        with nc.no_grad():
            z = encode(self.bundle, [h.recent(self.window) for h in histories], contexts)
            if self.mode == "tuned":
                z = adaptor_apply(self.bundle, z)
        return z.data

    def act(self, spec: EnvSpec, histories: list[Trajectory], states, rngs, contexts=None) -> list:
        z = self.prompts(histories, contexts)
        windows = [h.recent(self.window - 1) for h in histories]
        with nc.no_grad():
            heads = generate_heads(self.bundle, z, windows, current_states=states)
        last = heads.action.data[:, -1, :]
        return [_pick_action(spec, last[i], rngs[i], self.decode) for i in range(len(histories))]


def _empty_history(spec: EnvSpec, s0: np.ndarray, task: str) -> Trajectory:
    acts = np.zeros((0,), dtype=np.int64) if spec.discrete_actions else np.zeros((0, spec.action_dim))
    return Trajectory(s0[None, :], acts, np.zeros(0), 0, task, spec.family)


def rollout_batch(policy, spec: EnvSpec, seeds: Sequence[int], contexts=None) -> list[Episode]:
    """Run one episode per seed in lockstep so each step is one batched
    forward pass. Env and decoding randomness come from per-seed streams."""
    seeds = [int(s) for s in seeds]
    B = len(seeds)
    erngs = [env_rng(s) for s in seeds]
    prngs = [RngStream(s, ("decode",)) for s in seeds]
    s0 = initial_state(spec)
    states = [[s0] for _ in range(B)]
    actions = [[] for _ in range(B)]
    rewards = [[] for _ in range(B)]
    cur = [s0] * B
    for t in range(spec.horizon):
        hist = [_history(spec, states[i], actions[i], rewards[i]) for i in range(B)]
        acts = policy.act(spec, hist, cur, prngs, contexts)
        for i in range(B):
            s, r = env_step(spec, cur[i], acts[i], erngs[i])
            actions[i].append(acts[i])
            rewards[i].append(r)
            states[i].append(s)
            cur[i] = s
    tag = getattr(policy, "mode", "policy")
    out = []
    for i in range(B):
        acts = np.array(actions[i], dtype=np.int64) if spec.discrete_actions \
            else np.array(actions[i], dtype=np.float64).reshape(spec.horizon, -1)
        out.append(Episode(spec.family, spec.task_id, tag, seeds[i], np.array(states[i]), acts,
                           np.array(rewards[i], dtype=np.float64)))
    return out


def _history(spec, states, actions, rewards) -> Trajectory:
    if not actions:
        return _empty_history(spec, states[0], spec.task_id)
    acts = np.array(actions, dtype=np.int64) if spec.discrete_actions \
        else np.array(actions, dtype=np.float64).reshape(len(actions), -1)
    return Trajectory(np.array(states), acts, np.array(rewards, dtype=np.float64), 0, spec.task_id, spec.family)


def rollout(bundle: ModelBundle, spec: EnvSpec, mode: str, seed: int, decode: str = "sample",
            context: Trajectory | None = None) -> Episode:
    ctxs = None if context is None else [context]
    return rollout_batch(CMTPolicy(bundle, mode, decode), spec, [seed], ctxs)[0]


# ---------------------------------------------------------------------------
# behavior cloning
# ---------------------------------------------------------------------------


class BCModel(Module):
    def __init__(self, state_dim: int, action_dim: int, hidden: int, rng):
        self.inp = Linear(state_dim, hidden, rng, std=0.2)
        self.body = MLP(hidden, hidden, rng)
        self.out = Linear(hidden, action_dim, rng, std=0.2)

    def __call__(self, s: Tensor) -> Tensor:
        h = nc.gelu(self.inp(s))
        return self.out(h + self.body(h))


class BCPolicy:
    mode = "bc"

    def __init__(self, model: BCModel, spec: EnvSpec, state_mean, state_std, decode: str = "sample"):
        self.model = model
        self.spec = spec
        self.state_mean = state_mean
        self.state_std = state_std
        self.decode = decode

    def act(self, spec: EnvSpec, histories, states, rngs, contexts=None) -> list:
        x = (np.stack(states) - self.state_mean) / self.state_std
        with nc.no_grad():
            out = self.model(Tensor(x)).data
        return [_pick_action(spec, out[i], rngs[i], self.decode) for i in range(len(states))]


def train_bc_baseline(dataset: OfflineDataset, epochs: int = 30, batch_size: int = 256, lr: float = 1e-3,
                      weight_decay: float = 0.01, grad_clip: float = 0.5, hidden: int = 64, seed: int = 0,
                      decode: str = "sample") -> BCPolicy:
    """State -> action regressor/classifier on every transition of the dataset."""
    if not len(dataset):
        raise ContractError("BC needs a non-empty dataset")
    spec = dataset.specs[0]
    S = np.concatenate([ep.states[:-1] for ep in dataset.episodes])
    A = np.concatenate([ep.actions for ep in dataset.episodes])
    if spec.one_hot_states:
        mean, std = np.zeros(S.shape[1]), np.ones(S.shape[1])
    else:
        mean, std = S.mean(0), np.where(S.std(0) < 1e-6, 1.0, S.std(0))
    Sn = (S - mean) / std
    rng = RngStream(seed, ("bc",))
    model = BCModel(spec.state_dim, spec.action_dim, hidden, rng.child("init"))
    opt = nc.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay, clip_norm=grad_clip)
    n = len(S)
    for epoch in range(epochs):
        order = rng.child("epoch", epoch).permutation(n)
        for k in range(0, n, batch_size):
            idx = order[k:k + batch_size]
            out = model(Tensor(Sn[idx]))
            if spec.discrete_actions:
                loss = nc.cross_entropy(out, A[idx].astype(np.int64))
            else:
                loss = nc.mse(out, Tensor(A[idx]))
            opt.zero_grad()
            nc.backward(loss)
            opt.step()
    return BCPolicy(model, spec, mean, std, decode)


# ---------------------------------------------------------------------------
# prompt geometry
# ---------------------------------------------------------------------------


def _mean_cos(za: np.ndarray, zb: np.ndarray) -> np.ndarray:
    a = za.reshape(len(za), -1)
    b = zb.reshape(len(zb), -1)
    a = a / np.linalg.norm(a, axis=1, keepdims=True)
    b = b / np.linalg.norm(b, axis=1, keepdims=True)
    return a @ b.T


@dataclass
class SimilarityMargin:
    within: float
    cross: float

    @property
    def margin(self) -> float:
        return self.within - self.cross


def trajectory_prompt_margin(bundle: ModelBundle, episodes: list[Episode], frag_len: int | None = None) -> SimilarityMargin:
    """Mean cosine between prompts of two disjoint fragments of the same
    episode, versus fragments of different episodes."""
    L = frag_len or int(bundle.info.get("fragment_len", 16))
    first = [Trajectory.from_episode(ep, 0, L) for ep in episodes]
    second = [Trajectory.from_episode(ep, ep.length - L, ep.length) for ep in episodes]
    with nc.no_grad():
        za = encode(bundle, first).data
        zb = encode(bundle, second).data
    c = _mean_cos(za, zb)
    off = ~np.eye(len(episodes), dtype=bool)
    return SimilarityMargin(float(np.mean(np.diag(c))), float(np.mean(c[off])))


def task_prompt_margin(bundle: ModelBundle, episodes: list[Episode], seed: int = 0,
                       context_len: int | None = None) -> SimilarityMargin:
    """Mean cosine of context-conditioned prompts within a task versus across
    tasks. Each prompt encodes one episode's first fragment with the opening
    steps of another episode of the same task as context."""
    L = context_len or int(bundle.info.get("context_len", 16))
    F = int(bundle.info.get("fragment_len", 16))
    rng = RngStream(seed, ("task-margin",))
    by_task: dict[str, list[int]] = {}
    for i, ep in enumerate(episodes):
        by_task.setdefault(ep.task, []).append(i)
    hist, ctx, tasks = [], [], []
    for i, ep in enumerate(episodes):
        peers = [j for j in by_task[ep.task] if j != i]
        if not peers:
            continue
        other = episodes[peers[int(rng.integers(len(peers)))]]
        ctx.append(Trajectory.from_episode(other, 0, min(L, other.length)))
        hist.append(Trajectory.from_episode(ep, 0, min(F, ep.length)))
        tasks.append(ep.task)
    with nc.no_grad():
        z = encode(bundle, hist, ctx).data
    c = _mean_cos(z, z)
    t = np.array(tasks)
    same = (t[:, None] == t[None, :]) & ~np.eye(len(t), dtype=bool)
    diff = t[:, None] != t[None, :]
    if not same.any() or not diff.any():
        raise ContractError("task margin needs >= 2 tasks with >= 2 episodes each")
    return SimilarityMargin(float(c[same].mean()), float(c[diff].mean()))


# ---------------------------------------------------------------------------
# comparison reports
# ---------------------------------------------------------------------------

REPORT_COLUMNS = ("config_id", "env", "tier", "mode", "seed_count", "return_mean", "return_std", "norm_score")


@dataclass
class CompareConfig:
    """One report row. ``run(seed)`` returns the mean return for that seed."""

    config_id: str
    env: str
    tier: str
    mode: str
    random_ref: float
    expert_ref: float
    run: Callable[[int], float]


@dataclass
class EvalRow:
    config_id: str
    env: str
    tier: str
    mode: str
    seed_count: int
    return_mean: float
    return_std: float
    norm_score: float
    seeds: list[int] = field(default_factory=list)
    per_seed: list[float] = field(default_factory=list)


@dataclass
class EvalReport:
    rows: list[EvalRow]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in self.rows:
            w.writerow([r.config_id, r.env, r.tier, r.mode, r.seed_count,
                        f"{r.return_mean:.6f}", f"{r.return_std:.6f}", f"{r.norm_score:.6f}"])
        return buf.getvalue()

    def row(self, config_id: str) -> EvalRow:
        for r in self.rows:
            if r.config_id == config_id:
                return r
        raise KeyError(config_id)


def policy_runner(policy, spec: EnvSpec, episodes_per_seed: int) -> Callable[[int], float]:
    def run(seed: int) -> float:
        seeds = [episode_seed(seed, j) for j in range(episodes_per_seed)]
        return float(np.mean([ep.ret for ep in rollout_batch(policy, spec, seeds)]))

    return run


def compare(configs: Sequence[CompareConfig], seeds: Sequence[int]) -> EvalReport:
    """Evaluate every config on every seed; rows keep the order of ``configs``.

    Aggregates are mean and population std over per-seed means; the same seeds
    are used for every config so differences are paired.
    """
    if not configs:
        raise ContractError("compare needs at least one config")
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ContractError("compare needs at least one seed")

    def cell(cfg: CompareConfig) -> EvalRow:
        per_seed = [float(cfg.run(s)) for s in seeds]
        mean = float(np.mean(per_seed))
        return EvalRow(cfg.config_id, cfg.env, cfg.tier, cfg.mode, len(seeds), mean, float(np.std(per_seed)),
                       normalized_score(mean, cfg.random_ref, cfg.expert_ref), seeds, per_seed)

    workers = min(worker_count(), len(configs))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            rows = list(ex.map(cell, configs))
    else:
        rows = [cell(c) for c in configs]
    return EvalReport(rows)
