"""
Trajectory encoder, prefix-prompted causal generator and prompt adaptor.

Token layout for a trajectory of n steps is ``s0 a0 r0 s1 a1 r1 ...``; with a
task context it becomes ``[ctx tokens] [SEP] [trajectory tokens]``. Each token
is a linear projection of its raw value plus a learned modality embedding and
a learned embedding of its time index within its episode.

The encoder attends bidirectionally and pools the token states into ``m``
prompt vectors with learned queries. The generator sees the prompt as a fully
visible prefix; trajectory tokens attend causally. Actions are read at state
tokens, rewards at action tokens and next states at reward tokens.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import numcore as nc
from .errors import CheckpointError, ContractError
from .numcore import Tensor

STATE, ACTION, REWARD, SEP, PAD = range(5)
N_MODALITIES = 5
NEG_INF = -1e9


@dataclass
class ModelConfig:
    state_dim: int
    action_dim: int  # continuous dimension, or cardinality when discrete
    discrete_actions: bool
    max_horizon: int = 32
    embed_dim: int = 32
    layers: int = 2
    heads: int = 2
    prompt_len: int = 4
    dropout: float = 0.0
    adaptor_hidden: int = 64

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ContractError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.prompt_len < 1 or self.max_horizon < 1:
            raise ContractError("prompt_len and max_horizon must be >= 1")
        if self.state_dim < 1 or self.action_dim < 1:
            raise ContractError("state_dim and action_dim must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError("dropout must be in [0, 1)")

    @property
    def input_dim(self) -> int:
        return self.state_dim + self.action_dim + 1

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_items(cls, items: dict) -> "ModelConfig":
        kw = {}
        for f in fields(cls):
            if f.name not in items:
                raise CheckpointError(f"model config missing {f.name!r}")
            raw = items[f.name]
            if f.type == "bool":
                kw[f.name] = raw in (True, "True", "true", "1")
            elif f.type == "float":
                kw[f.name] = float(raw)
            else:
                kw[f.name] = int(raw)
        return cls(**kw)


@dataclass
class Trajectory:
    """A run of consecutive steps. ``states`` has one more row than ``rewards``
    (the state reached after the last action)."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    t0: int = 0
    task: str = ""
    env: str = ""
    key: tuple = ()

    @property
    def n(self) -> int:
        return len(self.rewards)

    @classmethod
    def from_episode(cls, ep, start: int = 0, stop: int | None = None, key: tuple = ()) -> "Trajectory":
        stop = ep.length if stop is None else stop
        if not 0 <= start <= stop <= ep.length:
            raise ContractError(f"fragment [{start}, {stop}) outside episode of length {ep.length}")
        return cls(ep.states[start:stop + 1], ep.actions[start:stop], ep.rewards[start:stop], start,
                   ep.task, ep.env, key or (ep.task, ep.seed, start, stop))

    def recent(self, steps: int) -> "Trajectory":
        """The most recent ``steps`` steps (self if already short enough)."""
        if self.n <= steps:
            return self
        cut = self.n - steps
        return Trajectory(self.states[cut:], self.actions[cut:], self.rewards[cut:], self.t0 + cut,
                          self.task, self.env, self.key)


@dataclass
class Normalizer:
    state_mean: np.ndarray
    state_std: np.ndarray
    reward_mean: float = 0.0
    reward_std: float = 1.0

    @classmethod
    def identity(cls, state_dim: int) -> "Normalizer":
        return cls(np.zeros(state_dim), np.ones(state_dim))

    @classmethod
    def fit(cls, episodes, one_hot_states: bool) -> "Normalizer":
        states = np.concatenate([ep.states for ep in episodes])
        rewards = np.concatenate([ep.rewards for ep in episodes])
        if one_hot_states:
            mean, std = np.zeros(states.shape[1]), np.ones(states.shape[1])
        else:
            mean, std = states.mean(0), states.std(0)
            std = np.where(std < 1e-6, 1.0, std)
        rstd = float(rewards.std())
        return cls(mean, std, float(rewards.mean()), rstd if rstd > 1e-6 else 1.0)

    def states(self, s):
        return (np.asarray(s, dtype=np.float64) - self.state_mean) / self.state_std

    def rewards(self, r):
        return (np.asarray(r, dtype=np.float64) - self.reward_mean) / self.reward_std

    def arrays(self) -> dict[str, np.ndarray]:
        return {"state_mean": self.state_mean, "state_std": self.state_std,
                "reward": np.array([self.reward_mean, self.reward_std])}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "Normalizer":
        try:
            r = arrays["reward"]
            return cls(np.array(arrays["state_mean"]), np.array(arrays["state_std"]), float(r[0]), float(r[1]))
        except (KeyError, IndexError) as e:
            raise CheckpointError(f"normalizer tensors incomplete: {e}") from e


@dataclass
class TokenSequence:
    """Layout of one input sequence before projection: raw (normalized)
    feature rows, modality tags and time indices."""

    features: np.ndarray  # (N, input_dim)
    modality: np.ndarray  # (N,)
    time: np.ndarray      # (N,)
    causal: bool = False

    def __len__(self) -> int:
        return len(self.modality)

    @property
    def sep_index(self) -> int | None:
        idx = np.flatnonzero(self.modality == SEP)
        return int(idx[0]) if idx.size else None


def _trajectory_tokens(tau: Trajectory, cfg: ModelConfig, norm: Normalizer, current_state=None):
    sd, ad = cfg.state_dim, cfg.action_dim
    n = tau.n
    extra = 1 if current_state is not None else 0
    feats = np.zeros((3 * n + extra, cfg.input_dim))
    if n:
        feats[0:3 * n:3, :sd] = norm.states(tau.states[:n])
        if cfg.discrete_actions:
            acts = np.asarray(tau.actions, dtype=np.int64)
            feats[np.arange(1, 3 * n, 3), sd + acts] = 1.0
        else:
            feats[1:3 * n:3, sd:sd + ad] = np.asarray(tau.actions, dtype=np.float64).reshape(n, ad)
        feats[2:3 * n:3, sd + ad] = norm.rewards(tau.rewards)
    if extra:
        feats[3 * n, :sd] = norm.states(current_state)
    modality = np.tile([STATE, ACTION, REWARD], n + extra)[:3 * n + extra]
    time = np.minimum(np.repeat(np.arange(tau.t0, tau.t0 + n + extra), 3)[:3 * n + extra], cfg.max_horizon - 1)
    return feats, modality, time


def embed_trajectory(tau: Trajectory | None, ctx: Trajectory | None, cfg: ModelConfig,
                     norm: Normalizer | None = None, current_state=None) -> TokenSequence:
    """Lay out ``[ctx][SEP][tau]`` (or just ``[tau]``) as tokens.

    Trajectories longer than ``max_horizon`` keep only their most recent
    ``max_horizon`` steps. ``current_state`` appends a lone state token, used
    when the next action is being chosen.
    """
    norm = norm or Normalizer.identity(cfg.state_dim)
    parts = []
    if ctx is not None:
        f, m, t = _trajectory_tokens(ctx.recent(cfg.max_horizon), cfg, norm)
        parts.append((f, m, t))
        parts.append((np.zeros((1, cfg.input_dim)), np.array([SEP]), np.array([0])))
    if tau is None:
        tau = Trajectory(np.zeros((1, cfg.state_dim)), np.zeros((0,)), np.zeros(0))
    f, m, t = _trajectory_tokens(tau.recent(cfg.max_horizon), cfg, norm, current_state)
    parts.append((f, m, t))
    feats = np.concatenate([p[0] for p in parts])
    modality = np.concatenate([p[1] for p in parts]).astype(np.int64)
    time = np.concatenate([p[2] for p in parts]).astype(np.int64)
    return TokenSequence(feats, modality, time)


@dataclass
class TokenBatch:
    features: np.ndarray  # (B, N, D); a Tensor when built from model outputs
    modality: np.ndarray  # (B, N)
    time: np.ndarray      # (B, N)
    valid: np.ndarray     # (B, N) bool

    @classmethod
    def collate(cls, seqs: list[TokenSequence], input_dim: int) -> "TokenBatch":
        B = len(seqs)
        N = max(1, max((len(s) for s in seqs), default=0))
        feats = np.zeros((B, N, input_dim))
        mod = np.full((B, N), PAD, dtype=np.int64)
        time = np.zeros((B, N), dtype=np.int64)
        valid = np.zeros((B, N), dtype=bool)
        for i, s in enumerate(seqs):
            k = len(s)
            feats[i, :k] = s.features
            mod[i, :k] = s.modality
            time[i, :k] = s.time
            valid[i, :k] = True
        return cls(feats, mod, time, valid)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class Module:
    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and name in getattr(self, "_param_names", ()):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def param(self, name: str, data) -> Tensor:
        if "_param_names" not in vars(self):
            self._param_names = []
        self._param_names.append(name)
        t = Tensor(data, requires_grad=True, name=name)
        setattr(self, name, t)
        return t


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng, bias: bool = True, zero: bool = False, std: float = 0.02):
        self.param("w", np.zeros((n_in, n_out)) if zero else rng.normal(0.0, std, (n_in, n_out)))
        self.has_bias = bias
        if bias:
            self.param("b", np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        y = nc.matmul(x, self.w)
        return y + self.b if self.has_bias else y


class LayerNorm(Module):
    def __init__(self, d: int):
        self.param("g", np.ones(d))
        self.param("b", np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return nc.layer_norm(x, self.g, self.b, eps=1e-5)


class Attention(Module):
    def __init__(self, d: int, heads: int, rng):
        self.d, self.h = d, heads
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.o = Linear(d, d, rng)

    def _split(self, x: Tensor) -> Tensor:
        B, N, _ = x.shape
        return nc.transpose(nc.reshape(x, (B, N, self.h, self.d // self.h)), (0, 2, 1, 3))

    def __call__(self, x: Tensor, kv: Tensor | None = None, mask: np.ndarray | None = None) -> Tensor:
        kv = x if kv is None else kv
        B, Nq, _ = x.shape
        q, k, v = self._split(self.q(x)), self._split(self.k(kv)), self._split(self.v(kv))
        scores = nc.matmul(q, nc.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(self.d // self.h))
        if mask is not None:
            scores = scores + mask
        att = nc.softmax(scores, axis=-1)
        out = nc.transpose(nc.matmul(att, v), (0, 2, 1, 3))
        return self.o(nc.reshape(out, (B, Nq, self.d)))


class MLP(Module):
    def __init__(self, d: int, hidden: int, rng, zero_out: bool = False):
        self.fc1 = Linear(d, hidden, rng)
        self.fc2 = Linear(hidden, d, rng, zero=zero_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(nc.gelu(self.fc1(x)))


class Block(Module):
    """Pre-norm transformer block."""

    def __init__(self, d: int, heads: int, rng):
        self.ln1 = LayerNorm(d)
        self.attn = Attention(d, heads, rng)
        self.ln2 = LayerNorm(d)
        self.mlp = MLP(d, 4 * d, rng)

    def __call__(self, x: Tensor, mask, drop=None) -> Tensor:
        a = self.attn(self.ln1(x), mask=mask)
        x = x + (drop(a) if drop else a)
        f = self.mlp(self.ln2(x))
        return x + (drop(f) if drop else f)


class TokenEmbedding(Module):
    def __init__(self, cfg: ModelConfig, rng):
        self.proj = Linear(cfg.input_dim, cfg.embed_dim, rng, bias=False)
        self.param("modality", rng.normal(0.0, 0.02, (N_MODALITIES, cfg.embed_dim)))
        self.param("position", rng.normal(0.0, 0.02, (cfg.max_horizon, cfg.embed_dim)))

    def __call__(self, batch: TokenBatch) -> Tensor:
        return self.proj(nc.as_tensor(batch.features)) + self.modality[batch.modality] + self.position[batch.time]


def _dropout(rate: float, rng):
    if rate <= 0 or rng is None:
        return None

    def drop(x: Tensor) -> Tensor:
        keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
        return x * keep

    return drop


class Encoder(Module):
    """Bidirectional trajectory encoder producing a fixed-length prompt."""

    def __init__(self, cfg: ModelConfig, rng):
        self.cfg = cfg
        d = cfg.embed_dim
        self.embed = TokenEmbedding(cfg, rng)
        self.blocks = [Block(d, cfg.heads, rng) for _ in range(cfg.layers)]
        self.ln_f = LayerNorm(d)
        self.param("queries", rng.normal(0.0, 0.02, (cfg.prompt_len, d)))
        self.pool = Attention(d, cfg.heads, rng)
        self.pool_ln = LayerNorm(d)
        self.pool_mlp = MLP(d, 2 * d, rng)
        self.param("z0", rng.normal(0.0, 0.02, (cfg.prompt_len, d)))

    def __call__(self, batch: TokenBatch, drop_rng=None) -> Tensor:
        B, N = batch.valid.shape
        drop = _dropout(self.cfg.dropout, drop_rng)
        key_mask = np.where(batch.valid, 0.0, NEG_INF)[:, None, None, :]
        x = self.embed(batch)
        for blk in self.blocks:
            x = blk(x, key_mask, drop)
        h = self.ln_f(x)
        q = nc.broadcast_to(self.queries, (B, self.cfg.prompt_len, self.cfg.embed_dim))
        z = q + self.pool(q, kv=h, mask=key_mask)
        z = z + self.pool_mlp(self.pool_ln(z))
        empty = (~batch.valid.any(axis=1)).astype(np.float64)[:, None, None]
        if empty.any():
            z = z * (1.0 - empty) + self.z0 * empty
        return z


def prefix_causal_mask(m: int, n: int) -> np.ndarray:
    """Additive (m+n)x(m+n) mask: prompt is a bidirectional prefix, the rest causal."""
    L = m + n
    allowed = np.tril(np.ones((L, L), dtype=bool))
    allowed[:, :m] = True
    allowed[:m, m:] = False
    return np.where(allowed, 0.0, NEG_INF)


@dataclass
class PredictionHeads:
    """Head outputs, one row per token of the relevant modality.

    ``action`` is read at state tokens (logits when discrete, means when
    continuous), ``reward`` at action tokens and ``next_state`` at reward
    tokens. Rewards and states are in normalized units.
    """

    action: Tensor
    reward: Tensor
    next_state: Tensor
    discrete: bool

    @property
    def action_probs(self) -> np.ndarray:
        if not self.discrete:
            raise ContractError("continuous action head has no probability vector")
        return nc.softmax(Tensor(self.action.data), axis=-1).data


class Generator(Module):
    """GPT-style generator conditioned on a prompt prefix."""

    def __init__(self, cfg: ModelConfig, rng):
        self.cfg = cfg
        d = cfg.embed_dim
        self.embed = TokenEmbedding(cfg, rng)
        self.param("prompt_pos", rng.normal(0.0, 0.02, (cfg.prompt_len, d)))
        self.blocks = [Block(d, cfg.heads, rng) for _ in range(cfg.layers)]
        self.ln_f = LayerNorm(d)
        self.head_action = Linear(d, cfg.action_dim, rng)
        self.head_reward = Linear(d, 1, rng)
        self.head_state = Linear(d, cfg.state_dim, rng)

    def __call__(self, z: Tensor, batch: TokenBatch, drop_rng=None) -> PredictionHeads:
        if not batch.valid.all():
            raise ContractError("generator input must not contain padding")
        m = self.cfg.prompt_len
        B, N = batch.valid.shape
        if z.ndim == 2:
            z = nc.broadcast_to(z, (B,) + z.shape)
        drop = _dropout(self.cfg.dropout, drop_rng)
        x = nc.concat([z + self.prompt_pos, self.embed(batch)], axis=1)
        mask = prefix_causal_mask(m, N)
        for blk in self.blocks:
            x = blk(x, mask, drop)
        h = self.ln_f(x)[:, m:, :]
        # layouts always start at a state token, so positions are periodic
        act = self.head_action(h[:, 0::3, :])
        rew = nc.reshape(self.head_reward(h[:, 1::3, :]), (B, -1)) if N > 1 else Tensor(np.zeros((B, 0)))
        nxt = self.head_state(h[:, 2::3, :]) if N > 2 else Tensor(np.zeros((B, 0, self.cfg.state_dim)))
        return PredictionHeads(act, rew, nxt, self.cfg.discrete_actions)


class Adaptor(Module):
    """Residual two-layer map over each prompt vector; identity at init."""

    def __init__(self, cfg: ModelConfig, rng):
        self.mlp = MLP(cfg.embed_dim, cfg.adaptor_hidden, rng, zero_out=True)

    def __call__(self, z: Tensor) -> Tensor:
        return z + self.mlp(z)


COMPONENTS = ("encoder", "generator", "adaptor")


class ModelBundle:
    """Encoder, generator and adaptor with independent freeze flags.

    ``info`` carries free-form run metadata (env spec, reference scores) that
    rides along in checkpoints.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, norm: Normalizer | None = None, info: dict | None = None):
        self.config = cfg
        root = nc.RngStream(seed, ("init",))
        self.encoder = Encoder(cfg, root.child("encoder"))
        self.generator = Generator(cfg, root.child("generator"))
        self.adaptor = Adaptor(cfg, root.child("adaptor"))
        self.norm = norm or Normalizer.identity(cfg.state_dim)
        self.frozen = {c: False for c in COMPONENTS}
        self.info = dict(info or {})

    def component(self, name: str) -> Module:
        if name not in COMPONENTS:
            raise ContractError(f"unknown component {name!r}")
        return getattr(self, name)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(f"{c}.{n}", p) for c in COMPONENTS for n, p in self.component(c).named_parameters()]

    def parameters(self, *components: str) -> list[Tensor]:
        comps = components or COMPONENTS
        return [p for c in comps for p in self.component(c).parameters()]

    def trainable_parameters(self) -> list[Tensor]:
        return [p for c in COMPONENTS if not self.frozen[c] for p in self.component(c).parameters()]

    def freeze(self, *components: str) -> None:
        for c in components:
            self.frozen[c] = True
            for p in self.component(c).parameters():
                p.requires_grad = False
                p.grad = None

    def unfreeze(self, *components: str) -> None:
        for c in components:
            self.frozen[c] = False
            for p in self.component(c).parameters():
                p.requires_grad = True

    def snapshot(self, *components: str) -> dict[str, np.ndarray]:
        comps = components or COMPONENTS
        return {n: p.data.copy() for n, p in self.named_parameters() if n.split(".", 1)[0] in comps}

    def component_bytes(self, name: str) -> bytes:
        return b"".join(p.data.astype("<f8").tobytes() for _, p in self.component(name).named_parameters())

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(arrays)
        if missing:
            raise CheckpointError(f"missing tensors: {sorted(missing)[:5]}")
        for name, arr in arrays.items():
            if name not in params:
                continue
            if params[name].shape != arr.shape:
                raise CheckpointError(f"tensor {name}: shape {arr.shape} != expected {params[name].shape}")
        for name, p in params.items():
            p.data = np.array(arrays[name], dtype=np.float64)

    def copy(self) -> "ModelBundle":
        other = ModelBundle(self.config, 0, self.norm, self.info)
        other.load_arrays(self.snapshot())
        for c in COMPONENTS:
            if self.frozen[c]:
                other.freeze(c)
        return other


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def tokenize(bundle: ModelBundle, taus, ctxs=None, current_states=None) -> TokenBatch:
    cfg = bundle.config
    ctxs = ctxs if ctxs is not None else [None] * len(taus)
    cur = current_states if current_states is not None else [None] * len(taus)
    seqs = [embed_trajectory(t, c, cfg, bundle.norm, s) for t, c, s in zip(taus, ctxs, cur)]
    return TokenBatch.collate(seqs, cfg.input_dim)


def encode(bundle: ModelBundle, taus, ctxs=None, drop_rng=None) -> Tensor:
    """Policy prompts (B, m, d) for a batch of histories with optional contexts.

    Rows whose history and context are both empty get the learned initial
    prompt ``z0``.
    """
    single = isinstance(taus, Trajectory) or taus is None
    if single:
        taus, ctxs = [taus], [ctxs]
    taus = [t if (t is None or t.n) else None for t in taus]
    ctxs = [c if (c is None or c.n) else None for c in (ctxs or [None] * len(taus))]
    z = bundle.encoder(tokenize(bundle, taus, ctxs), drop_rng)
    return z[0] if single else z


def generate_heads(bundle: ModelBundle, z, taus, current_states=None, drop_rng=None) -> PredictionHeads:
    """Teacher-forced heads for each trajectory conditioned on prompt ``z``.

    With ``current_states`` each sequence ends in a lone state token and the
    last action row is the prediction for the next decision.
    """
    lens = {t.n for t in taus}
    if len(lens) != 1:
        raise ContractError(f"generator batch needs equal-length trajectories, got {sorted(lens)}")
    return bundle.generator(nc.as_tensor(z), tokenize(bundle, taus, None, current_states), drop_rng)


def adaptor_apply(bundle: ModelBundle, z) -> Tensor:
    return bundle.adaptor(nc.as_tensor(z))
