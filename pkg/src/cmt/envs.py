"""
Toy multi-task environments, scripted behavior policies and offline datasets.

Three families stand in for the usual continuous-control suites:

* ``pointline_vel`` -- a point on a line, continuous 1-d acceleration, task is
  the target velocity (a Half-Cheetah-Vel analog).
* ``gridgoal`` -- 9 cells, start in the middle, task is the rewarded direction
  (an Ant-Fwd-Back analog).
* ``chain`` -- 5-state stochastic chain, task is a permutation seed over the
  two action labels.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import ContractError, DatasetFormatError
from .numcore import RngStream

FAMILIES = ("pointline_vel", "gridgoal", "chain")
TIERS = ("random", "medium", "expert", "mixed")

GRID_CELLS = 9
GRID_START = 4
CHAIN_STATES = 5
CHAIN_SLIP = 0.9
MEDIUM_EPSILON = 0.5
REF_EPISODES = 200
REF_SEED = 20220601
FORMAT_VERSION = 1


@dataclass(frozen=True)
class EnvSpec:
    family: str
    task: object = None
    horizon: int = 32
    discount: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ContractError(f"unknown env family {self.family!r}; expected one of {FAMILIES}")
        if self.horizon < 1:
            raise ContractError("horizon must be >= 1")
        task = self.task
        if self.family == "pointline_vel":
            task = 1.0 if task is None else float(task)
            if not -2.0 <= task <= 2.0:
                raise ContractError(f"pointline_vel target velocity {task} outside [-2, 2]")
        elif self.family == "gridgoal":
            task = "fwd" if task is None else str(task)
            if task not in ("fwd", "bwd"):
                raise ContractError(f"gridgoal direction must be 'fwd' or 'bwd', got {task!r}")
        else:
            task = 0 if task is None else int(task)
        object.__setattr__(self, "task", task)

    @property
    def task_id(self) -> str:
        if self.family == "pointline_vel":
            return f"v={self.task:g}"
        return str(self.task)

    @property
    def state_dim(self) -> int:
        return {"pointline_vel": 2, "gridgoal": GRID_CELLS, "chain": CHAIN_STATES}[self.family]

    @property
    def discrete_actions(self) -> bool:
        return self.family != "pointline_vel"

    @property
    def action_dim(self) -> int:
        """Continuous action dimension, or number of discrete actions."""
        return {"pointline_vel": 1, "gridgoal": 3, "chain": 2}[self.family]

    @property
    def one_hot_states(self) -> bool:
        return self.family != "pointline_vel"

    def to_dict(self) -> dict:
        return {"family": self.family, "task": self.task, "horizon": self.horizon, "discount": self.discount}

    @classmethod
    def from_dict(cls, d: dict) -> "EnvSpec":
        return cls(d["family"], d.get("task"), int(d.get("horizon", 32)), float(d.get("discount", 1.0)))


def _one_hot(i: int, n: int) -> np.ndarray:
    v = np.zeros(n)
    v[i] = 1.0
    return v


def _decode_one_hot(state, n: int, family: str) -> int:
    s = np.asarray(state, dtype=np.float64)
    if s.shape != (n,) or s.sum() != 1.0 or np.count_nonzero(s) != 1:
        raise ContractError(f"{family}: state must be a one-hot vector of length {n}")
    return int(np.argmax(s))


@lru_cache(maxsize=None)
def chain_action_map(task: int) -> tuple[int, int]:
    """Action label -> effect (0 advance, 1 retreat) for a chain task."""
    if task == 0:
        return (0, 1)
    perm = RngStream(task, ("chain-perm",)).permutation(2)
    return tuple(int(p) for p in perm)


def initial_state(spec: EnvSpec) -> np.ndarray:
    if spec.family == "pointline_vel":
        return np.zeros(2)
    if spec.family == "gridgoal":
        return _one_hot(GRID_START, GRID_CELLS)
    return _one_hot(0, CHAIN_STATES)


def check_action(spec: EnvSpec, action):
    if spec.discrete_actions:
        a = np.asarray(action)
        if a.ndim != 0 or float(a) != int(a) or not 0 <= int(a) < spec.action_dim:
            raise ContractError(f"{spec.family}: action {action!r} not in 0..{spec.action_dim - 1}")
        return int(a)
    a = np.asarray(action, dtype=np.float64).reshape(-1)
    if a.shape != (1,) or not np.isfinite(a[0]) or abs(a[0]) > 1.0:
        raise ContractError(f"{spec.family}: action {action!r} outside [-1, 1]")
    return float(a[0])


def env_step(spec: EnvSpec, state, action, rng) -> tuple[np.ndarray, float]:
    """One transition. ``rng`` is only consumed by ``chain`` (one uniform per step)."""
    a = check_action(spec, action)
    if spec.family == "pointline_vel":
        s = np.asarray(state, dtype=np.float64)
        if s.shape != (2,):
            raise ContractError("pointline_vel: state must be (x, v)")
        x, v = s
        v2 = min(max(v + 0.1 * a, -3.0), 3.0)
        x2 = x + 0.1 * v2
        return np.array([x2, v2]), -abs(v2 - spec.task)

    if spec.family == "gridgoal":
        pos = _decode_one_hot(state, GRID_CELLS, spec.family)
        pos2 = min(max(pos + (a - 1), 0), GRID_CELLS - 1)
        direction = 1 if spec.task == "fwd" else -1
        return _one_hot(pos2, GRID_CELLS), float((pos2 - pos) * direction)

    pos = _decode_one_hot(state, CHAIN_STATES, spec.family)
    effect = chain_action_map(spec.task)[a]
    moves = rng.random() < CHAIN_SLIP
    pos2 = pos
    if moves:
        if effect == 0:
            pos2 = 0 if pos == CHAIN_STATES - 1 else pos + 1
        else:
            pos2 = max(pos - 1, 0)
    reward = 1.0 if (pos2 == CHAIN_STATES - 1 and pos != CHAIN_STATES - 1) else 0.0
    return _one_hot(pos2, CHAIN_STATES), reward


# ---------------------------------------------------------------------------
# behavior policies
# ---------------------------------------------------------------------------


def expert_action(spec: EnvSpec, state):
    if spec.family == "pointline_vel":
        v = float(np.asarray(state)[1])
        return np.array([min(max(10.0 * (spec.task - v), -1.0), 1.0)])
    if spec.family == "gridgoal":
        return 2 if spec.task == "fwd" else 0
    return chain_action_map(spec.task).index(0)


def random_action(spec: EnvSpec, rng):
    if spec.discrete_actions:
        return int(rng.integers(spec.action_dim))
    return np.array([rng.uniform(-1.0, 1.0)])


class BehaviorPolicy:
    """Scripted data-collection policy of a given quality tier.

    ``begin_episode`` must be called before each episode; for the ``mixed``
    tier it draws which sub-policy (medium or expert) drives the episode and
    returns the resulting behavior tag.
    """

    def __init__(self, spec: EnvSpec, tier: str):
        if tier not in TIERS:
            raise ContractError(f"unknown tier {tier!r}; expected one of {TIERS}")
        self.spec = spec
        self.tier = tier
        self.active = tier

    def begin_episode(self, rng) -> str:
        if self.tier == "mixed":
            self.active = "medium" if rng.random() < 0.5 else "expert"
        return self.active

    def __call__(self, state, rng):
        if self.active == "expert":
            return expert_action(self.spec, state)
        if self.active == "random":
            return random_action(self.spec, rng)
        if rng.random() < MEDIUM_EPSILON:
            return random_action(self.spec, rng)
        return expert_action(self.spec, state)


def make_behavior_policy(spec: EnvSpec, tier: str) -> BehaviorPolicy:
    return BehaviorPolicy(spec, tier)


# ---------------------------------------------------------------------------
# episodes and datasets
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class Episode:
    env: str
    task: str
    behavior: str
    seed: int
    states: np.ndarray   # (T+1, state_dim)
    actions: np.ndarray  # (T,) int for discrete, (T, action_dim) float otherwise
    rewards: np.ndarray  # (T,)

    @property
    def length(self) -> int:
        return len(self.rewards)

    @property
    def ret(self) -> float:
        return float(np.sum(self.rewards))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Episode):
            return NotImplemented
        return (self.env, self.task, self.behavior, self.seed) == (other.env, other.task, other.behavior, other.seed) \
            and np.array_equal(self.states, other.states) and np.array_equal(self.actions, other.actions) \
            and np.array_equal(self.rewards, other.rewards)

    def validate(self) -> None:
        T = len(self.rewards)
        if self.states.shape[0] != T + 1 or len(self.actions) != T:
            raise DatasetFormatError(
                f"episode seed {self.seed}: {self.states.shape[0]} states, {len(self.actions)} actions, {T} rewards")
        if not np.all(np.isfinite(self.rewards)) or not np.all(np.isfinite(self.states)):
            raise DatasetFormatError(f"episode seed {self.seed}: non-finite values")


def env_rng(seed: int) -> RngStream:
    return RngStream(seed, ("env",))


def run_episode(spec: EnvSpec, policy, seed: int, behavior: str | None = None) -> Episode:
    """Roll out a callable ``policy(state, rng)`` for ``spec.horizon`` steps."""
    erng = env_rng(seed)
    prng = RngStream(seed, ("policy",))
    tag = policy.begin_episode(prng) if hasattr(policy, "begin_episode") else (behavior or "custom")
    s = initial_state(spec)
    states, actions, rewards = [s], [], []
    for _ in range(spec.horizon):
        a = policy(s, prng)
        s, r = env_step(spec, s, a, erng)
        states.append(s)
        actions.append(a)
        rewards.append(r)
    return Episode(spec.family, spec.task_id, tag, int(seed), np.array(states), _stack_actions(spec, actions),
                   np.array(rewards, dtype=np.float64))


def _stack_actions(spec: EnvSpec, actions) -> np.ndarray:
    if spec.discrete_actions:
        return np.array([int(a) for a in actions], dtype=np.int64)
    return np.array([np.asarray(a, dtype=np.float64).reshape(-1) for a in actions]).reshape(len(actions), -1)


def replay_episode(spec: EnvSpec, seed: int, actions) -> tuple[np.ndarray, np.ndarray]:
    """Re-simulate ``actions`` from the episode seed; returns (states, rewards)."""
    erng = env_rng(seed)
    s = initial_state(spec)
    states, rewards = [s], []
    for a in actions:
        s, r = env_step(spec, s, a if spec.discrete_actions else np.asarray(a), erng)
        states.append(s)
        rewards.append(r)
    return np.array(states), np.array(rewards, dtype=np.float64)


def episode_seed(seed: int, index: int) -> int:
    return RngStream(seed, ("episode", index)).derive_seed()


@lru_cache(maxsize=64)
def reference_returns(spec: EnvSpec, n: int = REF_EPISODES, seed: int = REF_SEED) -> tuple[float, float]:
    """(random_ref, expert_ref): mean returns of scripted rollouts at a fixed seed."""
    out = []
    for tier in ("random", "expert"):
        pol = BehaviorPolicy(spec, tier)
        rets = [run_episode(spec, pol, episode_seed(seed, i)).ret for i in range(n)]
        out.append(float(np.mean(rets)))
    return out[0], out[1]


class OfflineDataset:
    def __init__(self, episodes: list[Episode], manifest: dict):
        self.episodes = list(episodes)
        self.manifest = dict(manifest)

    def __len__(self) -> int:
        return len(self.episodes)

    def __eq__(self, other) -> bool:
        if not isinstance(other, OfflineDataset):
            return NotImplemented
        return self.manifest == other.manifest and self.episodes == other.episodes

    @property
    def family(self) -> str:
        return self.manifest["env"]

    @property
    def specs(self) -> list[EnvSpec]:
        return [EnvSpec.from_dict(d) for d in self.manifest["specs"]]

    @property
    def spec(self) -> EnvSpec:
        specs = self.specs
        if len(specs) != 1:
            raise ContractError(f"dataset spans {len(specs)} tasks; use .specs")
        return specs[0]

    @property
    def task_ids(self) -> list[str]:
        return sorted({ep.task for ep in self.episodes})

    @property
    def returns(self) -> np.ndarray:
        return np.array([ep.ret for ep in self.episodes])

    def validate(self) -> None:
        m = self.manifest
        if m.get("format_version") != FORMAT_VERSION:
            raise DatasetFormatError(f"unsupported format_version {m.get('format_version')!r}")
        if m.get("n") != len(self.episodes):
            raise DatasetFormatError(f"manifest n={m.get('n')} but dataset holds {len(self.episodes)} episodes")
        for ep in self.episodes:
            if ep.env != m["env"]:
                raise DatasetFormatError(f"episode seed {ep.seed} is from env {ep.env!r}, manifest says {m['env']!r}")
            ep.validate()


def generate_dataset(spec: EnvSpec, tier: str, n_episodes: int, seed: int) -> OfflineDataset:
    if n_episodes < 1:
        raise ContractError("n_episodes must be >= 1")
    policy = make_behavior_policy(spec, tier)
    # episodes own independent streams, so the index-ordered loop is the
    # same as any parallel schedule merged in index order
    episodes = [run_episode(spec, policy, episode_seed(seed, i)) for i in range(n_episodes)]
    rand_ref, exp_ref = reference_returns(spec)
    manifest = {
        "format_version": FORMAT_VERSION,
        "env": spec.family,
        "tier": tier,
        "n": n_episodes,
        "random_ref": rand_ref,
        "expert_ref": exp_ref,
        "seed": int(seed),
        "specs": [spec.to_dict()],
        "task_refs": {spec.task_id: [rand_ref, exp_ref]},
    }
    return OfflineDataset(episodes, manifest)


def merge_datasets(datasets: list[OfflineDataset]) -> OfflineDataset:
    """Combine per-task datasets of one env family into a multi-task dataset."""
    if not datasets:
        raise ContractError("nothing to merge")
    fams = {d.family for d in datasets}
    if len(fams) != 1:
        raise ContractError(f"cannot merge env families {sorted(fams)}")
    episodes = [ep for d in datasets for ep in d.episodes]
    specs, task_refs = [], {}
    for d in datasets:
        for s in d.manifest["specs"]:
            if s not in specs:
                specs.append(s)
        task_refs.update(d.manifest["task_refs"])
    tiers = sorted({d.manifest["tier"] for d in datasets})
    manifest = {
        "format_version": FORMAT_VERSION,
        "env": fams.pop(),
        "tier": "+".join(tiers),
        "n": len(episodes),
        "random_ref": float(np.mean([v[0] for v in task_refs.values()])),
        "expert_ref": float(np.mean([v[1] for v in task_refs.values()])),
        "seed": datasets[0].manifest.get("seed", 0),
        "specs": specs,
        "task_refs": task_refs,
    }
    return OfflineDataset(episodes, manifest)


# ---------------------------------------------------------------------------
# JSON Lines serialization
# ---------------------------------------------------------------------------


def _fmt_float(x: float) -> str:
    if not math.isfinite(x):
        raise DatasetFormatError(f"cannot serialize non-finite number {x}")
    s = format(x, ".17g")
    if "." not in s and "e" not in s:
        s += ".0"
    return s


def _dump(obj) -> str:
    if isinstance(obj, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {_dump(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, np.ndarray):
        return _dump(obj.tolist())
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(_dump(v) for v in obj) + "]"
    if isinstance(obj, (bool, np.bool_)) or obj is None:
        return json.dumps(None if obj is None else bool(obj))
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt_float(float(obj))
    return json.dumps(obj)


def episode_to_dict(ep: Episode) -> dict:
    return {"env": ep.env, "task": ep.task, "behavior": ep.behavior, "seed": ep.seed,
            "states": ep.states, "actions": ep.actions, "rewards": ep.rewards}


def dumps_dataset(ds: OfflineDataset) -> str:
    lines = [_dump(ds.manifest)] + [_dump(episode_to_dict(ep)) for ep in ds.episodes]
    return "\n".join(lines) + "\n"


def save_dataset(ds: OfflineDataset, path) -> None:
    ds.validate()
    Path(path).write_text(dumps_dataset(ds), encoding="utf-8")


def _episode_from_dict(d: dict, lineno: int) -> Episode:
    try:
        discrete = d["env"] != "pointline_vel"
        actions = np.array(d["actions"], dtype=np.int64 if discrete else np.float64)
        if not discrete:
            actions = actions.reshape(len(d["actions"]), -1)
        return Episode(str(d["env"]), str(d["task"]), str(d["behavior"]), int(d["seed"]),
                       np.array(d["states"], dtype=np.float64), actions, np.array(d["rewards"], dtype=np.float64))
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetFormatError(f"line {lineno}: malformed episode ({exc})") from None


def load_dataset(path) -> OfflineDataset:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DatasetFormatError("line 1: empty file, expected manifest")
    records = []
    for i, line in enumerate(lines, start=1):
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"line {i}: {exc.msg} (column {exc.colno})") from None
        if not isinstance(records[-1], dict):
            raise DatasetFormatError(f"line {i}: expected a JSON object")
    manifest = records[0]
    for key in ("format_version", "env", "tier", "n", "random_ref", "expert_ref"):
        if key not in manifest:
            raise DatasetFormatError(f"line 1: manifest missing {key!r}")
    episodes = [_episode_from_dict(r, i) for i, r in enumerate(records[1:], start=2)]
    ds = OfflineDataset(episodes, manifest)
    ds.validate()
    return ds
