"""
Training objectives: trajectory reconstruction, InfoNCE over three pair
definitions, reward ascent on the prompt, and the adaptor objective.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import numcore as nc
from .errors import ContractError
from .numcore import Tensor
from .seqmodel import (ACTION, REWARD, STATE, ModelBundle, PredictionHeads, TokenBatch, Trajectory, adaptor_apply, encode, generate_heads,
                       tokenize)

log = logging.getLogger(__name__)


@dataclass
class ContrastConfig:
    temperature: float = 0.2
    batch_size: int = 64
    return_threshold: float | None = None  # None: 10% of the dataset's return range
    weight: float = 0.1

    def __post_init__(self):
        if self.temperature <= 0:
            raise ContractError("temperature must be > 0")
        if self.batch_size < 2:
            raise ContractError("contrastive batch size must be >= 2")
        if self.return_threshold is not None and self.return_threshold < 0:
            raise ContractError("return threshold must be >= 0")
        if self.weight < 0:
            raise ContractError("loss weight must be >= 0")


ROLLOUTS = ("data", "imagined")


@dataclass
class ImprovementConfig:
    step_size: float = 0.01
    steps: int = 10
    behavior_weight: float = 1.0
    horizon: int = 8  # steps per fragment
    rollout: str = "data"  # "data" or "imagined", see predicted_reward

    def __post_init__(self):
        if self.step_size < 0 or self.behavior_weight < 0 or self.steps < 0:
            raise ContractError("step_size, steps and behavior_weight must be >= 0")
        if self.horizon < 1:
            raise ContractError("horizon must be >= 1")
        if self.rollout not in ROLLOUTS:
            raise ContractError(f"rollout must be one of {ROLLOUTS}, got {self.rollout!r}")


@dataclass
class ContrastTuple:
    """One InfoNCE term: indices into a candidate set."""

    anchor: int
    positive: int
    negatives: list[int]


# ---------------------------------------------------------------------------
# reconstruction
# ---------------------------------------------------------------------------


def supervised_terms(bundle: ModelBundle, z, taus: list[Trajectory]) -> dict[str, Tensor]:
    """Per-modality reconstruction terms, each summed over steps and averaged
    over the batch."""
    if not taus or any(t.n == 0 for t in taus):
        raise ContractError("supervised loss needs non-empty trajectories")
    heads = generate_heads(bundle, z, taus)
    n = taus[0].n
    norm = bundle.norm
    if bundle.config.discrete_actions:
        act = nc.cross_entropy(heads.action, np.stack([t.actions for t in taus]).astype(np.int64))
    else:
        act = nc.mse(heads.action, Tensor(np.stack([t.actions for t in taus])))
    rew = nc.mse(heads.reward, Tensor(norm.rewards(np.stack([t.rewards for t in taus]))))
    nxt = nc.mse(heads.next_state, Tensor(norm.states(np.stack([t.states[1:] for t in taus]))))
    # mean over (batch, step, feature) times n == per-step MSE summed over steps
    return {"action": act * float(n), "reward": rew * float(n), "state": nxt * float(n)}


def supervised_loss(bundle: ModelBundle, z, taus: list[Trajectory]) -> Tensor:
    terms = supervised_terms(bundle, z, taus)
    return terms["action"] + terms["reward"] + terms["state"]


# ---------------------------------------------------------------------------
# InfoNCE
# ---------------------------------------------------------------------------


def _flat(z: Tensor) -> Tensor:
    return nc.reshape(z, (z.shape[0], -1))


def infonce_batch(anchors: Tensor, candidates: Tensor, tuples: list[ContrastTuple], temperature: float) -> Tensor:
    """Mean InfoNCE over ``tuples``; prompts are flattened and L2-normalized.

    Candidates outside a tuple's positive/negative sets are masked out of its
    denominator. An empty tuple list contributes 0.
    """
    if not tuples:
        return Tensor(0.0)
    a_idx = np.array([t.anchor for t in tuples])
    sims = nc.cosine_similarity(_flat(anchors)[a_idx], _flat(candidates)) * (1.0 / temperature)
    mask = np.full(sims.shape, -1e9)
    targets = np.empty(len(tuples), dtype=np.int64)
    for row, t in enumerate(tuples):
        mask[row, t.positive] = 0.0
        mask[row, t.negatives] = 0.0
        targets[row] = t.positive
    return nc.cross_entropy(sims + mask, targets)


def infonce(z_q, positive: int, candidates, temperature: float) -> Tensor:
    """-log softmax(sim(z_q, z_i) / temperature)[positive] over K candidates."""
    cands = nc.as_tensor(candidates)
    K = cands.shape[0]
    if K < 2:
        raise ContractError(f"InfoNCE needs K >= 2 candidates, got {K}")
    if not 0 <= positive < K:
        raise ContractError(f"positive index {positive} outside 0..{K - 1}")
    q = nc.reshape(nc.as_tensor(z_q), (1,) + cands.shape[1:])
    t = ContrastTuple(0, positive, [i for i in range(K) if i != positive])
    return infonce_batch(q, cands, [t], temperature)


# ---------------------------------------------------------------------------
# pair construction
# ---------------------------------------------------------------------------


@dataclass
class FragmentPlan:
    """Disjoint step ranges drawn from one episode."""

    target: tuple[int, int]
    history: tuple[int, int]

    @property
    def disjoint(self) -> bool:
        (a, b), (c, d) = self.target, self.history
        return c == d or b <= c or d <= a


def sample_fragments(length: int, frag_len: int, rng, p_empty_history: float = 0.0) -> FragmentPlan | None:
    """A target fragment of ``frag_len`` steps plus a disjoint history fragment
    of 1..frag_len steps (empty with probability ``p_empty_history``).

    Returns None when the episode is too short for two disjoint fragments.
    """
    if length < frag_len + 1:
        return None
    start = int(rng.integers(0, length - frag_len + 1))
    target = (start, start + frag_len)
    if rng.random() < p_empty_history:
        return FragmentPlan(target, (start, start))
    left, right = start, length - target[1]
    sides = [s for s in ("left", "right") if (left if s == "left" else right) > 0]
    side = sides[int(rng.integers(len(sides)))]
    room = left if side == "left" else right
    n = int(rng.integers(1, min(frag_len, room) + 1))
    if side == "left":
        h0 = int(rng.integers(0, left - n + 1))
    else:
        h0 = int(rng.integers(target[1], length - n + 1))
    return FragmentPlan(target, (h0, h0 + n))


def pair_trajectory(lengths: list[int], frag_len: int, rng,
                    p_empty_history: float = 0.0) -> tuple[list[FragmentPlan | None], list[ContrastTuple], int]:
    """Same-trajectory positives.

    Anchor i is the history fragment of trajectory i; its positive is the
    target fragment of the same trajectory, the negatives are the target
    fragments of every other usable trajectory. Anchors whose history came
    out empty are not paired. Returns (plans, tuples, number of trajectories
    excluded as too short).
    """
    plans = [sample_fragments(n, frag_len, rng, p_empty_history) for n in lengths]
    usable = [i for i, p in enumerate(plans) if p is not None]
    skipped = len(lengths) - len(usable)
    if skipped:
        log.warning("pair_trajectory: %d trajectories too short for two fragments", skipped)
    tuples = []
    if len(usable) >= 2:
        for i in usable:
            h0, h1 = plans[i].history
            if h1 > h0:
                tuples.append(ContrastTuple(i, i, [j for j in usable if j != i]))
    return plans, tuples, skipped


def pair_return(returns, threshold: float, eligible=None) -> list[ContrastTuple]:
    """Return-threshold pairs: positive is the closest other return within
    ``threshold``; negatives are all returns further than ``threshold``."""
    r = np.asarray(returns, dtype=np.float64)
    idx = list(range(len(r))) if eligible is None else list(eligible)
    tuples = []
    for i in idx:
        others = [j for j in idx if j != i]
        diffs = {j: abs(r[i] - r[j]) for j in others}
        close = [j for j in others if diffs[j] <= threshold]
        far = [j for j in others if diffs[j] > threshold]
        if not close or not far:
            continue
        pos = min(close, key=lambda j: (diffs[j], j))
        tuples.append(ContrastTuple(i, pos, far))
    return tuples


def pair_task(task_keys: list[tuple[str, str]], rng, eligible=None) -> list[ContrastTuple]:
    """Task-level pairs over ``(env family, task id)`` keys.

    Positive: a random other member of the anchor's task. Negatives: all
    members of other tasks in the same env family. Other families are never
    compared.
    """
    idx = list(range(len(task_keys))) if eligible is None else list(eligible)
    tuples = []
    for i in idx:
        fam, task = task_keys[i]
        same = [j for j in idx if j != i and task_keys[j] == (fam, task)]
        neg = [j for j in idx if task_keys[j][0] == fam and task_keys[j][1] != task]
        if not same or not neg:
            continue
        tuples.append(ContrastTuple(i, same[int(rng.integers(len(same)))], neg))
    return tuples


# ---------------------------------------------------------------------------
# representation-stage objective
# ---------------------------------------------------------------------------


@dataclass
class PretrainBatch:
    """Fragments for one step. ``history[i]`` is disjoint from ``target[i]``;
    contexts are only present in meta mode."""

    target: list[Trajectory]
    history: list[Trajectory]
    returns: np.ndarray
    task_keys: list[tuple[str, str]]
    target_ctx: list[Trajectory | None] | None = None
    history_ctx: list[Trajectory | None] | None = None

    def __len__(self) -> int:
        return len(self.target)

    def sorted(self) -> "PretrainBatch":
        order = sorted(range(len(self)), key=lambda i: (self.target[i].key, self.history[i].key))
        pick = lambda xs: None if xs is None else [xs[i] for i in order]  # noqa: E731
        return PretrainBatch(pick(self.target), pick(self.history), self.returns[order],
                             pick(self.task_keys), pick(self.target_ctx), pick(self.history_ctx))


@dataclass
class LossBreakdown:
    total: Tensor
    parts: dict[str, float] = field(default_factory=dict)


def pretrain_loss(bundle: ModelBundle, batch: PretrainBatch, cfg: ContrastConfig, threshold: float,
                  rng, meta: bool = False, drop_rng=None) -> LossBreakdown:
    """L1 + weight * (L2_traj + L2_return) [+ weight * L2_task in meta mode].

    The batch is put in canonical order first, so the value does not depend
    on how the caller ordered it.
    """
    batch = batch.sorted()
    B = len(batch)
    z_all = encode(bundle, batch.history + batch.target,
                   (batch.history_ctx + batch.target_ctx) if meta else None, drop_rng)
    z_hist, z_tgt = z_all[:B], z_all[B:]
    l1 = supervised_loss(bundle, z_hist, batch.target)

    has_hist = [i for i in range(B) if batch.history[i].n > 0]
    zero = Tensor(0.0)
    l_traj = l_ret = l_task = zero
    if cfg.weight > 0:
        traj_t = [ContrastTuple(i, i, [j for j in range(B) if j != i]) for i in has_hist] if B >= 2 else []
        l_traj = infonce_batch(z_hist, z_tgt, traj_t, cfg.temperature)
        l_ret = infonce_batch(z_hist, z_hist, pair_return(batch.returns, threshold, has_hist), cfg.temperature)
        if meta:
            l_task = infonce_batch(z_hist, z_hist, pair_task(batch.task_keys, rng, has_hist), cfg.temperature)
    total = l1
    if cfg.weight > 0:
        total = total + (l_traj + l_ret + l_task) * cfg.weight
    parts = {"L1": l1.item(), "L2_traj": l_traj.item(), "L2_return": l_ret.item(), "L2_task": l_task.item()}
    return LossBreakdown(total, parts)


# ---------------------------------------------------------------------------
# improvement stage
# ---------------------------------------------------------------------------


def imagined_rewards(bundle: ModelBundle, z, start_states, t0s, steps: int, z_model=None,
                     through_model: bool = False) -> Tensor:
    """Roll the generator forward inside its own model for ``steps`` steps.

    Each step reads an action at the newest state token, appends it, reads the
    reward, appends it, then reads the next state. Discrete actions enter as
    their probability vector, continuous ones as the head mean, so the whole
    rollout is differentiable in ``z``.

    Actions are read under ``z``; rewards and next states under ``z_model``
    (default ``z``). Passing the unadapted prompt as ``z_model`` keeps the
    reward and dynamics reads fixed, so the return can only change through
    the actions. Returns (B, steps) rewards in raw units.
    """
    cfg = bundle.config
    norm = bundle.norm
    sd, ad = cfg.state_dim, cfg.action_dim
    s0 = np.atleast_2d(np.asarray(start_states, dtype=np.float64))
    B = len(s0)
    t0s = np.broadcast_to(np.asarray(t0s, dtype=np.int64), (B,))
    z = nc.as_tensor(z)
    zm = z if z_model is None else nc.as_tensor(z_model)
    gen = bundle.generator

    def token(value: Tensor, lo: int) -> Tensor:
        hi = lo + value.shape[1]
        parts = [Tensor(np.zeros((B, lo)))] if lo else []
        parts.append(value)
        if hi < cfg.input_dim:
            parts.append(Tensor(np.zeros((B, cfg.input_dim - hi))))
        return nc.reshape(nc.concat(parts, axis=1), (B, 1, cfg.input_dim))

    toks: list[Tensor] = []
    mods: list[int] = []
    times: list[np.ndarray] = []

    def push(tok: Tensor, mod: int, t: int) -> None:
        toks.append(tok)
        mods.append(mod)
        times.append(np.minimum(t0s + t, cfg.max_horizon - 1))

    def run(prompt: Tensor) -> PredictionHeads:
        batch = TokenBatch(nc.concat(toks, axis=1), np.tile(np.array(mods), (B, 1)),
                           np.stack(times, axis=1), np.ones((B, len(toks)), dtype=bool))
        return gen(prompt, batch)

    state = Tensor(norm.states(s0))
    rewards = []
    for t in range(steps):
        push(token(state, 0), STATE, t)
        a = run(z).action[:, -1, :]
        if cfg.discrete_actions:
            a = nc.softmax(a, axis=-1)
        push(token(a, sd), ACTION, t)
        r = run(zm).reward[:, -1:]
        rewards.append(r)
        push(token(r if through_model else Tensor(r.data), sd + ad), REWARD, t)
        if t + 1 < steps:
            state = run(zm).next_state[:, -1, :]
            if not through_model:
                state = Tensor(state.data)
    return nc.concat(rewards, axis=1) * norm.reward_std + norm.reward_mean


def data_rewards(bundle: ModelBundle, z, taus: list[Trajectory], z_model=None) -> Tensor:
    """Rewards the model predicts along recorded fragments when the actions
    are swapped for the policy's own soft choices.

    States, rewards and times stay those of the data. Actions are read under
    ``z`` with teacher forcing (probability vectors for discrete actions, head
    means otherwise); the generator then reads the reward of each swapped
    action under ``z_model`` (default ``z``). Returns (B, n) in raw units.
    """
    cfg = bundle.config
    sd, ad = cfg.state_dim, cfg.action_dim
    z = nc.as_tensor(z)
    zm = z if z_model is None else nc.as_tensor(z_model)
    batch = tokenize(bundle, taus)
    B, N, D = batch.features.shape
    if N % 3 or not np.all(batch.modality == np.tile([STATE, ACTION, REWARD], N // 3)):
        raise ContractError("data rollout needs plain s,a,r fragments")
    n = N // 3
    acts = bundle.generator(z, batch).action
    if cfg.discrete_actions:
        acts = nc.softmax(acts, axis=-1)
    feats = np.asarray(batch.features).reshape(B, n, 3, D)
    parts = [Tensor(np.zeros((B, n, sd))), acts]
    if sd + ad < D:
        parts.append(Tensor(np.zeros((B, n, D - sd - ad))))
    a_tok = nc.reshape(nc.concat(parts, axis=2), (B, n, 1, D))
    swapped = nc.concat([Tensor(feats[:, :, :1]), a_tok, Tensor(feats[:, :, 2:])], axis=2)
    swapped = TokenBatch(nc.reshape(swapped, (B, N, D)), batch.modality, batch.time, batch.valid)
    r = nc.reshape(bundle.generator(zm, swapped).reward, (B, n))
    return r * bundle.norm.reward_std + bundle.norm.reward_mean


def predicted_reward(bundle: ModelBundle, z, taus: list[Trajectory], horizon: int | None = None,
                     z_model=None, rollout: str = "data") -> Tensor:
    """Model-predicted return sum_t R(a_t, s_t, tau_<t; z), one value per
    fragment.

    ``rollout="data"`` sums :func:`data_rewards` over each fragment (its
    ``horizon`` most recent steps at most). ``rollout="imagined"`` lets the
    generator imagine a trajectory under ``z`` from each fragment's first
    state and time, for the fragment's length capped at ``horizon``.
    ``z_model`` as in :func:`imagined_rewards`.
    """
    lens = {t.n for t in taus}
    if len(lens) != 1 or 0 in lens:
        raise ContractError(f"need equal, non-zero fragment lengths, got {sorted(lens)}")
    n = lens.pop()
    steps = min(n, horizon or n)
    if rollout == "data":
        rew = data_rewards(bundle, z, [t.recent(steps) for t in taus], z_model)
    elif rollout == "imagined":
        starts = np.stack([t.states[0] for t in taus])
        rew = imagined_rewards(bundle, z, starts, [t.t0 for t in taus], steps, z_model)
    else:
        raise ContractError(f"rollout must be one of {ROLLOUTS}, got {rollout!r}")
    return nc.tsum(rew, axis=1)


def reward_objective(bundle: ModelBundle, taus: list[Trajectory], horizon: int | None = None,
                     z_model=None, rollout: str = "data") -> Callable[[Tensor], Tensor]:
    """Objective for :func:`prompt_ascent` over a fixed batch.

    A shared prompt of shape (m, d) gets the batch-mean predicted return; a
    per-trajectory prompt of shape (B, m, d) gets the sum, so each row
    receives the gradient of its own trajectory's return. ``z_model`` fixes
    the prompt used for reward and dynamics reads (default: the prompt being
    optimized).
    """
    zm = None if z_model is None else Tensor(np.array(nc.as_tensor(z_model).data))

    def objective(z: Tensor) -> Tensor:
        ret = predicted_reward(bundle, z, taus, horizon, zm, rollout)
        return nc.mean(ret) if z.ndim == 2 else nc.tsum(ret)

    return objective


def prompt_ascent(z, objective: Callable[[Tensor], Tensor], step_size: float, steps: int) -> np.ndarray:
    """``steps`` rounds of z <- z + step_size * grad_z objective(z)."""
    z = np.array(nc.as_tensor(z).data, dtype=np.float64)
    if step_size == 0 or steps == 0:
        return z
    for _ in range(steps):
        zt = Tensor(z, requires_grad=True)
        (g,) = nc.grad_of(objective(zt), [zt])
        z = z + step_size * g
    return z


def _check_frozen(bundle: ModelBundle) -> None:
    if not (bundle.frozen["encoder"] and bundle.frozen["generator"]):
        raise ContractError("improvement stage needs encoder and generator frozen")


def adaptor_loss(bundle: ModelBundle, z, taus: list[Trajectory], behavior_weight: float,
                 horizon: int | None = None, rollout: str = "data") -> LossBreakdown:
    """-mean_b sum_t R(.; L(z)) + behavior_weight * mean_b ||z - L(z)||^2.

    Actions are chosen under L(z) while rewards (and, for imagined rollouts,
    dynamics) are read under the unadapted z.
    """
    _check_frozen(bundle)
    z = nc.as_tensor(z)
    zp = adaptor_apply(bundle, z)
    ret = nc.mean(predicted_reward(bundle, zp, taus, horizon, Tensor(z.data), rollout))
    drift = nc.mse(zp, z) * (float(z.size) / z.shape[0])
    total = ret * -1.0 + drift * behavior_weight
    return LossBreakdown(total, {"pred_return": ret.item(), "drift": drift.item(), "adaptor_loss": total.item()})


def distill_loss(bundle: ModelBundle, z, z_target, behavior_weight: float) -> LossBreakdown:
    """||L(z) - z'||^2 + behavior_weight * ||z - L(z)||^2 (batch means), where
    z' is the ascent result for z."""
    _check_frozen(bundle)
    z = nc.as_tensor(z)
    zp = adaptor_apply(bundle, z)
    B = z.shape[0]
    fit = nc.mse(zp, Tensor(z_target)) * (float(z.size) / B)
    drift = nc.mse(zp, z) * (float(z.size) / B)
    total = fit + drift * behavior_weight
    return LossBreakdown(total, {"fit": fit.item(), "drift": drift.item(), "adaptor_loss": total.item()})
