"""
Training stages, online-context meta-test, checkpoints and metrics logging.

Stages:

* ``pretrain_representation``: encoder + generator on reconstruction plus
  contrastive terms.
* ``improvement_tune``: adaptor only, encoder and generator frozen.
* ``meta_train``: the same two stages with task contexts on a multi-task
  dataset.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import struct
import tempfile
import time
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import numcore as nc
from .envs import EnvSpec, Episode, OfflineDataset
from .errors import CheckpointError, ContractError, NonFiniteError, TrainingDiverged
from .evaluate import CMTPolicy, rollout_batch
from .losses import (ContrastConfig, ImprovementConfig, PretrainBatch, adaptor_loss, distill_loss, pretrain_loss,
                     prompt_ascent, reward_objective, sample_fragments)
from .numcore import RngStream, Tensor
from .seqmodel import COMPONENTS, ModelBundle, ModelConfig, Normalizer, Trajectory, encode

log = logging.getLogger(__name__)

IMPROVE_MODES = ("direct", "distill")


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    fragment_len: int = 16
    context_len: int = 16
    lr: float = 1e-4
    weight_decay: float = 0.01
    grad_clip: float = 0.5
    p_empty_history: float = 0.1
    p_drop_context: float = 0.1
    seed: int = 0
    tune_epochs: int = 20
    tune_lr: float = 1e-3
    improve_mode: str = "direct"
    eval_every: int = 0
    eval_episodes: int = 8
    contrast: ContrastConfig = field(default_factory=ContrastConfig)
    improve: ImprovementConfig = field(default_factory=ImprovementConfig)

    def __post_init__(self):
        if self.epochs < 0 or self.tune_epochs < 0:
            raise ContractError("epoch counts must be >= 0")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if self.fragment_len < 2 or self.context_len < 1:
            raise ContractError("fragment_len must be >= 2 and context_len >= 1")
        if self.improve_mode not in IMPROVE_MODES:
            raise ContractError(f"improve_mode must be one of {IMPROVE_MODES}")
        for name in ("p_empty_history", "p_drop_context"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ContractError(f"{name} must lie in [0, 1]")


def model_config_for(spec: EnvSpec, **overrides) -> ModelConfig:
    base = dict(state_dim=spec.state_dim, action_dim=spec.action_dim, discrete_actions=spec.discrete_actions,
                max_horizon=spec.horizon)
    base.update(overrides)
    return ModelConfig(**base)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

METRIC_COLUMNS = ("stage", "epoch", "L1", "L2_traj", "L2_return", "L2_task", "adaptor_loss",
                  "eval_return_mean", "eval_return_std", "wall_seconds")


def _cell(v) -> str:
    if v is None or v == "":
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


class MetricsLog:
    """Append-only CSV; the header is written once when the file is new.

    ``wall_seconds`` stays blank unless ``timing`` is on, so repeated runs
    with the same seed produce identical files.
    """

    def __init__(self, path=None, timing: bool = False):
        self.path = Path(path) if path is not None else None
        self.timing = timing
        self.rows: list[dict] = []

    def append(self, row: dict) -> None:
        unknown = set(row) - set(METRIC_COLUMNS)
        if unknown:
            raise ContractError(f"unknown metric columns {sorted(unknown)}")
        if not self.timing:
            row = {**row, "wall_seconds": None}
        self.rows.append(row)
        if self.path is None:
            return
        new = not self.path.exists() or self.path.stat().st_size == 0
        with open(self.path, "a", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if new:
                w.writerow(METRIC_COLUMNS)
            w.writerow([_cell(row.get(c)) for c in METRIC_COLUMNS])

    def column(self, name: str, stage: str | None = None) -> list:
        return [r.get(name) for r in self.rows if stage is None or r.get("stage") == stage]


# ---------------------------------------------------------------------------
# batch sampling
# ---------------------------------------------------------------------------


def return_threshold(dataset: OfflineDataset, cfg: ContrastConfig) -> float:
    """Configured threshold, else a tenth of the dataset's return range."""
    if cfg.return_threshold is not None:
        return float(cfg.return_threshold)
    r = dataset.returns
    span = float(r.max() - r.min()) if len(r) else 0.0
    return 0.1 * span if span > 0 else 1e-6


def opening(ep: Episode, length: int) -> Trajectory:
    """Context fragment: the first ``length`` steps of ``ep``.

    Every episode starts from the same state, so the opening is where
    behaviour under different tasks separates; later steps can sit at a
    boundary where tasks look alike.
    """
    return Trajectory.from_episode(ep, 0, min(length, ep.length))


class _Sampler:
    """Draws fragment batches from a dataset with a dedicated stream."""

    def __init__(self, dataset: OfflineDataset, cfg: TrainConfig, meta: bool, rng: RngStream):
        self.episodes = dataset.episodes
        self.cfg = cfg
        self.meta = meta
        self.rng = rng
        self.by_task: dict[tuple[str, str], list[int]] = {}
        for i, ep in enumerate(self.episodes):
            self.by_task.setdefault((ep.env, ep.task), []).append(i)
        usable = [i for i, ep in enumerate(self.episodes) if ep.length >= cfg.fragment_len + 1]
        skipped = len(self.episodes) - len(usable)
        if skipped:
            log.warning("%d episodes shorter than fragment_len + 1 are excluded", skipped)
        if not usable:
            raise ContractError("no episode is long enough for two disjoint fragments")
        self.usable = usable

    def epoch_batches(self, epoch: int) -> list[list[int]]:
        order = self.rng.child("order", epoch).permutation(len(self.usable))
        idx = [self.usable[k] for k in order]
        B = self.cfg.batch_size
        return [idx[k:k + B] for k in range(0, len(idx), B)]

    def context(self, i: int, rng) -> Trajectory | None:
        ep = self.episodes[i]
        if rng.random() < self.cfg.p_drop_context:
            return None
        peers = [j for j in self.by_task[(ep.env, ep.task)] if j != i]
        if not peers:
            return None
        other = self.episodes[peers[int(rng.integers(len(peers)))]]
        return opening(other, self.cfg.context_len)

    def batch(self, idx: list[int], rng) -> PretrainBatch:
        targets, hists, rets, keys, tctx, hctx = [], [], [], [], [], []
        for i in idx:
            ep = self.episodes[i]
            plan = sample_fragments(ep.length, self.cfg.fragment_len, rng, self.cfg.p_empty_history)
            targets.append(Trajectory.from_episode(ep, *plan.target))
            hists.append(Trajectory.from_episode(ep, *plan.history))
            rets.append(ep.ret)
            keys.append((ep.env, ep.task))
            if self.meta:
                hctx.append(self.context(i, rng))
                tctx.append(self.context(i, rng))
        return PretrainBatch(targets, hists, np.array(rets), keys,
                             tctx if self.meta else None, hctx if self.meta else None)


def _dump_diagnostics(stage: str, epoch: int, step: int, batch: PretrainBatch | None, err: Exception,
                      dump_dir=None) -> str:
    dump_dir = Path(dump_dir) if dump_dir else Path(tempfile.gettempdir())
    dump_dir.mkdir(parents=True, exist_ok=True)
    path = dump_dir / f"cmt-diverged-{stage}-e{epoch}-s{step}-{os.getpid()}.json"
    info = {"stage": stage, "epoch": epoch, "step": step, "error": str(err),
            "batch_keys": [list(map(str, t.key)) for t in batch.target] if batch else []}
    path.write_text(json.dumps(info, indent=1))
    return str(path)


def _evaluate_bundle(bundle: ModelBundle, spec: EnvSpec | None, mode: str, episodes: int, seed: int):
    if spec is None or episodes <= 0:
        return None, None
    eps = rollout_batch(CMTPolicy(bundle, mode), spec, [seed * 1000 + j for j in range(episodes)])
    rets = np.array([e.ret for e in eps])
    return float(rets.mean()), float(rets.std())


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


@dataclass
class StageResult:
    bundle: ModelBundle
    history: list[dict]


def pretrain_representation(dataset: OfflineDataset, config: TrainConfig, model_config: ModelConfig | None = None,
                            metrics: MetricsLog | None = None, meta: bool = False, eval_spec: EnvSpec | None = None,
                            dump_dir=None) -> StageResult:
    """Train encoder and generator; the adaptor is untouched (identity).

    Raises :class:`TrainingDiverged` with a diagnostic dump path on any
    non-finite loss or gradient.
    """
    dataset.validate()
    spec = dataset.specs[0]
    mcfg = model_config or model_config_for(spec)
    norm = Normalizer.fit(dataset.episodes, spec.one_hot_states)
    info = {"env": spec.family, "tasks": dataset.task_ids, "fragment_len": config.fragment_len,
            "context_len": config.context_len, "meta": meta, "tier": dataset.manifest.get("tier", "")}
    bundle = ModelBundle(mcfg, config.seed, norm, info)
    bundle.freeze("adaptor")
    rng = RngStream(config.seed, ("pretrain",))
    sampler = _Sampler(dataset, config, meta, rng.child("sample"))
    threshold = return_threshold(dataset, config.contrast)
    opt = nc.AdamW(bundle.trainable_parameters(), lr=config.lr, weight_decay=config.weight_decay,
                   clip_norm=config.grad_clip)
    metrics = metrics or MetricsLog()
    history = []
    for epoch in range(1, config.epochs + 1):
        t_start = time.perf_counter()
        sums: dict[str, float] = {}
        batches = sampler.epoch_batches(epoch)
        for step, idx in enumerate(batches):
            srng = rng.child("step", epoch, step)
            batch = None
            try:
                batch = sampler.batch(idx, srng.child("frag"))
                out = pretrain_loss(bundle, batch, config.contrast, threshold, srng.child("pairs"), meta,
                                    srng.child("drop") if mcfg.dropout > 0 else None)
                opt.zero_grad()
                nc.backward(out.total)
                opt.step()
            except NonFiniteError as err:
                path = _dump_diagnostics("pretrain", epoch, step, batch, err, dump_dir)
                raise TrainingDiverged(f"non-finite value at epoch {epoch} step {step}: {err}", path) from err
            for k, v in out.parts.items():
                sums[k] = sums.get(k, 0.0) + v
        row = {"stage": "pretrain", "epoch": epoch, **{k: v / len(batches) for k, v in sums.items()}}
        if config.eval_every and epoch % config.eval_every == 0:
            m, s = _evaluate_bundle(bundle, eval_spec, "reconstruct", config.eval_episodes, config.seed)
            row.update(eval_return_mean=m, eval_return_std=s)
        row["wall_seconds"] = time.perf_counter() - t_start
        metrics.append(row)
        history.append(row)
        log.info("pretrain epoch %d L1=%.4f", epoch, row.get("L1", float("nan")))
    bundle.unfreeze("adaptor")
    return StageResult(bundle, history)


def improvement_tune(bundle: ModelBundle, dataset: OfflineDataset, config: TrainConfig,
                     metrics: MetricsLog | None = None, eval_spec: EnvSpec | None = None,
                     dump_dir=None) -> StageResult:
    """Train only the adaptor; ``bundle`` is updated in place and returned.

    Encoder and generator must already be frozen (ContractError otherwise);
    their bytes are checked to be unchanged afterwards.
    """
    if not (bundle.frozen["encoder"] and bundle.frozen["generator"]):
        raise ContractError("improvement_tune needs encoder and generator frozen")
    if bundle.frozen["adaptor"]:
        raise ContractError("adaptor is frozen; nothing to tune")
    before = {c: bundle.component_bytes(c) for c in ("encoder", "generator")}
    meta = bool(bundle.info.get("meta", False))
    rng = RngStream(config.seed, ("improve",))
    sampler = _Sampler(dataset, config, meta, rng.child("sample"))
    opt = nc.AdamW(bundle.parameters("adaptor"), lr=config.tune_lr, weight_decay=config.weight_decay,
                   clip_norm=config.grad_clip)
    imp = config.improve
    metrics = metrics or MetricsLog()
    history = []
    for epoch in range(1, config.tune_epochs + 1):
        t_start = time.perf_counter()
        total = 0.0
        batches = sampler.epoch_batches(epoch)
        for step, idx in enumerate(batches):
            srng = rng.child("step", epoch, step)
            batch = None
            try:
                batch = sampler.batch(idx, srng.child("frag"))
                with nc.no_grad():
                    z = encode(bundle, batch.history, batch.history_ctx).data
                if config.improve_mode == "direct":
                    out = adaptor_loss(bundle, z, batch.target, imp.behavior_weight, imp.horizon, imp.rollout)
                else:
                    z_star = prompt_ascent(z, reward_objective(bundle, batch.target, imp.horizon, z, imp.rollout), imp.step_size, imp.steps)
                    out = distill_loss(bundle, z, z_star, imp.behavior_weight)
                opt.zero_grad()
                nc.backward(out.total)
                opt.step()
            except NonFiniteError as err:
                path = _dump_diagnostics("improve", epoch, step, batch, err, dump_dir)
                raise TrainingDiverged(f"non-finite value at epoch {epoch} step {step}: {err}", path) from err
            total += out.parts["adaptor_loss"]
        row = {"stage": "improve", "epoch": epoch, "adaptor_loss": total / len(batches)}
        if config.eval_every and epoch % config.eval_every == 0:
            m, s = _evaluate_bundle(bundle, eval_spec, "tuned", config.eval_episodes, config.seed)
            row.update(eval_return_mean=m, eval_return_std=s)
        row["wall_seconds"] = time.perf_counter() - t_start
        metrics.append(row)
        history.append(row)
    for c, b in before.items():
        if bundle.component_bytes(c) != b:
            raise AssertionError(f"{c} parameters changed during improvement")
    return StageResult(bundle, history)


def train(dataset: OfflineDataset, config: TrainConfig, model_config: ModelConfig | None = None,
          metrics: MetricsLog | None = None, meta: bool = False, eval_spec: EnvSpec | None = None) -> StageResult:
    """Both stages back to back."""
    res = pretrain_representation(dataset, config, model_config, metrics, meta, eval_spec)
    res.bundle.freeze("encoder", "generator")
    tuned = improvement_tune(res.bundle, dataset, config, metrics, eval_spec)
    return StageResult(tuned.bundle, res.history + tuned.history)


def meta_train(dataset: OfflineDataset, config: TrainConfig, model_config: ModelConfig | None = None,
               metrics: MetricsLog | None = None) -> StageResult:
    """Context-conditioned training over several tasks of one env family."""
    if len(dataset.task_ids) < 2:
        raise ContractError(f"meta training needs >= 2 tasks, dataset has {dataset.task_ids}")
    families = {ep.env for ep in dataset.episodes}
    if len(families) != 1:
        raise ContractError(f"meta training needs a single env family, got {sorted(families)}")
    return train(dataset, config, model_config, metrics, meta=True)


# ---------------------------------------------------------------------------
# online-context meta-test
# ---------------------------------------------------------------------------


class ContextBuffer:
    """FIFO of this task's own completed episodes."""

    def __init__(self, task: str, capacity: int = 8):
        if capacity < 1:
            raise ContractError("buffer capacity must be >= 1")
        self.task = task
        self.capacity = capacity
        self._eps: deque[Episode] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._eps)

    def push(self, ep: Episode) -> None:
        if ep.task != self.task:
            raise ContractError(f"episode of task {ep.task!r} pushed to buffer for {self.task!r}")
        self._eps.append(ep)

    @property
    def episodes(self) -> list[Episode]:
        return list(self._eps)

    def sample(self, rng, length: int) -> Trajectory | None:
        """The opening ``length`` steps of a uniformly chosen episode."""
        if not self._eps:
            return None
        return opening(self._eps[int(rng.integers(len(self._eps)))], length)


@dataclass
class MetaTestResult:
    returns: list[float]
    episodes: list[Episode]
    context_used: list[bool]


def meta_test(bundle: ModelBundle, spec: EnvSpec, n_episodes: int, seed: int, mode: str = "tuned",
              capacity: int = 8, online: bool = True, decode: str = "sample") -> MetaTestResult:
    """Sequential episodes on one task. The first runs without context; later
    ones use a fragment of an earlier episode from the buffer. With
    ``online=False`` every episode runs without context."""
    if n_episodes < 1:
        raise ContractError("n_episodes must be >= 1")
    buf = ContextBuffer(spec.task_id, capacity)
    rng = RngStream(seed, ("meta-test",))
    policy = CMTPolicy(bundle, mode, decode)
    L = int(bundle.info.get("context_len", 16))
    returns, episodes, used = [], [], []
    for k in range(n_episodes):
        ctx = buf.sample(rng.child("ctx", k), L) if online else None
        ep = rollout_batch(policy, spec, [RngStream(seed, ("episode", k)).derive_seed()],
                           None if ctx is None else [ctx])[0]
        episodes.append(ep)
        returns.append(ep.ret)
        used.append(ctx is not None)
        buf.push(ep)
    return MetaTestResult(returns, episodes, used)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"CMT1\n"


def _config_text(bundle: ModelBundle) -> str:
    lines = ["[model]"]
    lines += [f"{k} = {json.dumps(v)}" for k, v in asdict(bundle.config).items()]
    lines.append("[frozen]")
    lines += [f"{c} = {json.dumps(bundle.frozen[c])}" for c in COMPONENTS]
    lines.append("[info]")
    lines += [f"{k} = {json.dumps(bundle.info[k], sort_keys=True)}" for k in sorted(bundle.info)]
    return "\n".join(lines) + "\n"


def _parse_config_text(text: str) -> dict[str, dict]:
    out: dict[str, dict] = {}
    section = None
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("[") and line.endswith("]"):
            section = out.setdefault(line[1:-1], {})
            continue
        if section is None or " = " not in line:
            raise CheckpointError(f"malformed checkpoint header line {n}: {line!r}")
        k, v = line.split(" = ", 1)
        try:
            section[k] = json.loads(v)
        except json.JSONDecodeError as e:
            raise CheckpointError(f"bad value on header line {n}: {e}") from e
    for s in ("model", "frozen", "info"):
        if s not in out:
            raise CheckpointError(f"checkpoint header lacks [{s}]")
    return out


def checkpoint_bytes(bundle: ModelBundle) -> bytes:
    text = _config_text(bundle).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    named = [(f"norm.{k}", v) for k, v in bundle.norm.arrays().items()] + \
            [(n, p.data) for n, p in bundle.named_parameters()]
    nc.write_tensors(buf, named)
    return buf.getvalue()


def save_checkpoint(bundle: ModelBundle, path) -> None:
    data = checkpoint_bytes(bundle)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def load_checkpoint(path, expected: ModelConfig | None = None) -> ModelBundle:
    """Rebuild a bundle. A config mismatch with ``expected`` is reported before
    any tensor is read."""
    try:
        fh = open(path, "rb")
    except OSError as e:
        raise CheckpointError(f"cannot open checkpoint {path}: {e}") from e
    with fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        raw = fh.read(4)
        if len(raw) != 4:
            raise CheckpointError(f"{path}: truncated header")
        (n,) = struct.unpack("<I", raw)
        text = fh.read(n)
        if len(text) != n:
            raise CheckpointError(f"{path}: truncated header")
        header = _parse_config_text(text.decode("utf-8"))
        names = {f.name for f in fields(ModelConfig)}
        if set(header["model"]) != names:
            raise CheckpointError(f"{path}: model config keys {sorted(header['model'])} do not match")
        cfg = ModelConfig(**header["model"])
        if expected is not None and cfg != expected:
            diff = [k for k in sorted(names) if getattr(cfg, k) != getattr(expected, k)]
            raise CheckpointError(f"{path}: config mismatch on {diff}")
        try:
            arrays = dict(nc.read_tensors(fh))
        except (ValueError, EOFError, struct.error) as e:
            raise CheckpointError(f"{path}: corrupt tensor block: {e}") from e
    norm_arrays = {k[5:]: v for k, v in arrays.items() if k.startswith("norm.")}
    bundle = ModelBundle(cfg, 0, Normalizer.from_arrays(norm_arrays), header["info"])
    bundle.load_arrays({k: v for k, v in arrays.items() if not k.startswith("norm.")})
    for c in COMPONENTS:
        if header["frozen"].get(c):
            bundle.freeze(c)
    return bundle
