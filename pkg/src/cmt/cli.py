"""
``cmt`` command line: dataset generation, both training stages, meta
training/testing, evaluation and comparison reports.

Settings resolve as defaults < ``--config`` file < flags. Every run writes a
``.meta.json`` file with the resolved settings, the seed and sha256 hashes of
its inputs and outputs.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import io
import json
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path

from . import __version__
from .envs import TIERS, EnvSpec, generate_dataset, load_dataset, merge_datasets, save_dataset
from .errors import CMTError, ConfigError
from .evaluate import (CMTPolicy, CompareConfig, EvalReport, compare, policy_runner, train_bc_baseline)
from .losses import ContrastConfig, ImprovementConfig
from .pipeline import (MetricsLog, TrainConfig, improvement_tune, load_checkpoint, meta_test, meta_train,
                       model_config_for, pretrain_representation, save_checkpoint)

log = logging.getLogger("cmt")

COMMANDS = ("gen-data", "pretrain", "tune", "meta-train", "meta-test", "eval", "report")


@dataclass
class RunConfig:
    seed: int = 0
    env: str = "chain"
    task: str = ""
    tier: str = "mixed"
    n: int = 200
    mode: str = "tuned"
    episodes: int = 20
    eval_seeds: int = 5
    decode: str = "sample"
    capacity: int = 8
    # training
    epochs: int = 50
    batch_size: int = 64
    fragment_len: int = 16
    context_len: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.01
    grad_clip: float = 0.5
    p_empty_history: float = 0.1
    p_drop_context: float = 0.1
    tune_epochs: int = 20
    tune_lr: float = 1e-3
    improve_mode: str = "direct"
    eval_every: int = 0
    eval_episodes: int = 8
    temperature: float = 0.2
    contrast_weight: float = 0.1
    return_threshold: float = -1.0  # < 0: a tenth of the dataset's return range
    step_size: float = 0.01
    ascent_steps: int = 10
    behavior_weight: float = 1.0
    improve_horizon: int = 8
    rollout: str = "data"
    bc_epochs: int = 30
    # model
    embed_dim: int = 32
    layers: int = 2
    heads: int = 2
    prompt_len: int = 4
    dropout: float = 0.0
    adaptor_hidden: int = 64

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, fragment_len=self.fragment_len,
            context_len=self.context_len, lr=self.lr, weight_decay=self.weight_decay, grad_clip=self.grad_clip,
            p_empty_history=self.p_empty_history, p_drop_context=self.p_drop_context, seed=self.seed,
            tune_epochs=self.tune_epochs, tune_lr=self.tune_lr, improve_mode=self.improve_mode,
            eval_every=self.eval_every, eval_episodes=self.eval_episodes,
            contrast=ContrastConfig(temperature=self.temperature, batch_size=self.batch_size,
                                    return_threshold=None if self.return_threshold < 0 else self.return_threshold,
                                    weight=self.contrast_weight),
            improve=ImprovementConfig(step_size=self.step_size, steps=self.ascent_steps,
                                      behavior_weight=self.behavior_weight, horizon=self.improve_horizon,
                                      rollout=self.rollout))

    def env_spec(self) -> EnvSpec:
        if not self.task:
            return EnvSpec(self.env)
        return EnvSpec(self.env, float(self.task) if self.env == "pointline_vel" else
                       (int(self.task) if self.env == "chain" else self.task))

    def model_overrides(self) -> dict:
        return dict(embed_dim=self.embed_dim, layers=self.layers, heads=self.heads, prompt_len=self.prompt_len,
                    dropout=self.dropout, adaptor_hidden=self.adaptor_hidden)


_TYPES = {f.name: f.type for f in fields(RunConfig)}
_CASTS = {"int": int, "float": float, "str": str}


def _cast(key: str, raw: str, where: str):
    kind = _TYPES[key]
    try:
        return _CASTS[kind](raw)
    except ValueError:
        raise ConfigError(f"{where}: key {key!r} expects {kind}, got {raw!r}") from None


def parse_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read a ``key = value`` file (``#`` starts a comment) and apply
    ``overrides`` on top. Unknown keys and badly typed values are errors."""
    values: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from e
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in _TYPES:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = _cast(key, raw, f"{path}:{lineno}")
    for key, v in (overrides or {}).items():
        if key not in _TYPES:
            raise ConfigError(f"unknown key {key!r}")
        if v is not None:
            values[key] = _cast(key, str(v), f"flag --{key.replace('_', '-')}") if isinstance(v, str) else v
    return RunConfig(**values)


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


_PRIMARY = {"seed": int, "env": str, "tier": str, "n": int, "mode": str, "episodes": int, "task": str}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cmt", description="Contextual meta transformer for offline RL on toy environments.")
    p.add_argument("--version", action="version", version=f"cmt {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "gen-data": "generate an offline dataset (JSONL)",
        "pretrain": "representation stage on a dataset; writes a checkpoint",
        "tune": "improvement stage (adaptor only) on a pretrained checkpoint",
        "meta-train": "both stages with task contexts on a multi-task dataset",
        "meta-test": "sequential episodes with an online context buffer; CSV per episode",
        "eval": "roll out a checkpoint; report CSV",
        "report": "BC baseline and CMT modes side by side; report CSV",
    }
    for name in COMMANDS:
        sp = sub.add_parser(name, help=helps[name])
        sp.add_argument("--config", help="key = value settings file")
        sp.add_argument("--out", help="output path (stdout for CSV commands when omitted)")
        sp.add_argument("--data", action="append", default=[], help="dataset path (repeatable)")
        sp.add_argument("--ckpt", help="checkpoint path")
        sp.add_argument("--timing", action="store_true", help="record wall_seconds in the metrics CSV")
        for key, typ in _PRIMARY.items():
            sp.add_argument(f"--{key}", type=typ, default=None)
        for f in fields(RunConfig):
            if f.name not in _PRIMARY:
                sp.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=_CASTS[f.type], default=None)
    return p


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_metadata(command: str, cfg: RunConfig, inputs: list, outputs: list, meta_path: Path) -> None:
    info = {
        "command": command,
        "version": __version__,
        "seed": cfg.seed,
        "config": dataclasses.asdict(cfg),
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {str(p): _sha256(p) for p in outputs},
    }
    meta_path.write_text(json.dumps(info, indent=1, sort_keys=True) + "\n")


def _load_data(paths: list[str]):
    if not paths:
        raise UsageError("--data is required")
    ds = [load_dataset(p) for p in paths]
    return ds[0] if len(ds) == 1 else merge_datasets(ds)


def _need(args, name: str) -> str:
    v = getattr(args, name)
    if not v:
        raise UsageError(f"--{name} is required for {args.command}")
    return v


def _train_outputs(args, cfg: RunConfig):
    out = Path(_need(args, "out"))
    metrics = MetricsLog(out.with_name(out.name + ".metrics.csv"), timing=args.timing)
    return out, metrics


def _emit(text: str, args) -> list:
    if args.out:
        Path(args.out).write_text(text)
        return [args.out]
    sys.stdout.write(text)
    return []


def _refs(bundle) -> tuple[float, float]:
    from .envs import reference_returns

    spec = EnvSpec.from_dict(bundle.info["spec"])
    if "random_ref" in bundle.info:
        return float(bundle.info["random_ref"]), float(bundle.info["expert_ref"])
    return reference_returns(spec)


def _eval_spec(bundle, cfg: RunConfig, args) -> EnvSpec:
    """The checkpoint's training spec unless --env/--task pick another; the
    family defaults to the checkpoint's."""
    base = EnvSpec.from_dict(bundle.info["spec"])
    family = args.env or base.family
    if family == base.family and not cfg.task:
        return base
    spec = dataclasses.replace(cfg, env=family).env_spec()
    if family == base.family:
        spec = EnvSpec(family, spec.task, base.horizon, base.discount)
    return spec


def _stamp(bundle, ds) -> None:
    bundle.info["spec"] = ds.specs[0].to_dict()
    bundle.info["random_ref"] = float(ds.manifest["random_ref"])
    bundle.info["expert_ref"] = float(ds.manifest["expert_ref"])


def run(args, cfg: RunConfig) -> tuple[list, list]:
    """Execute one subcommand; returns (input paths, output paths)."""
    cmd = args.command
    if cmd == "gen-data":
        if cfg.tier not in TIERS:
            raise UsageError(f"--tier must be one of {TIERS}")
        out = _need(args, "out")
        save_dataset(generate_dataset(cfg.env_spec(), cfg.tier, cfg.n, cfg.seed), out)
        return [], [out]
    if cmd in ("pretrain", "meta-train"):
        ds = _load_data(args.data)
        out, metrics = _train_outputs(args, cfg)
        mcfg = model_config_for(ds.specs[0], **cfg.model_overrides())
        if cmd == "pretrain":
            bundle = pretrain_representation(ds, cfg.train_config(), mcfg, metrics).bundle
        else:
            bundle = meta_train(ds, cfg.train_config(), mcfg, metrics).bundle
        _stamp(bundle, ds)
        save_checkpoint(bundle, out)
        return list(args.data), [out, metrics.path]
    if cmd == "tune":
        ckpt = _need(args, "ckpt")
        ds = _load_data(args.data)
        out, metrics = _train_outputs(args, cfg)
        bundle = load_checkpoint(ckpt)
        bundle.freeze("encoder", "generator")
        bundle.unfreeze("adaptor")
        improvement_tune(bundle, ds, cfg.train_config(), metrics)
        save_checkpoint(bundle, out)
        return [ckpt, *args.data], [out, metrics.path]
    if cmd == "meta-test":
        ckpt = _need(args, "ckpt")
        bundle = load_checkpoint(ckpt)
        spec = _eval_spec(bundle, cfg, args)
        res = meta_test(bundle, spec, cfg.episodes, cfg.seed, cfg.mode, cfg.capacity, decode=cfg.decode)
        buf = io.StringIO()
        buf.write("episode,return,context_used\n")
        for k, (r, used) in enumerate(zip(res.returns, res.context_used), 1):
            buf.write(f"{k},{r:.6f},{int(used)}\n")
        return [ckpt], _emit(buf.getvalue(), args)
    if cmd == "eval":
        ckpt = _need(args, "ckpt")
        bundle = load_checkpoint(ckpt)
        spec = _eval_spec(bundle, cfg, args)
        lo, hi = _refs(bundle)
        tier = str(bundle.info.get("tier", ""))
        cell = CompareConfig(f"{spec.family}-{cfg.mode}", spec.family, tier, cfg.mode, lo, hi,
                             policy_runner(CMTPolicy(bundle, cfg.mode, cfg.decode), spec, cfg.episodes))
        report = compare([cell], [cfg.seed + i for i in range(cfg.eval_seeds)])
        return [ckpt], _emit(report.to_csv(), args)
    if cmd == "report":
        ckpt = _need(args, "ckpt")
        bundle = load_checkpoint(ckpt)
        spec = _eval_spec(bundle, cfg, args)
        lo, hi = _refs(bundle)
        tier = str(bundle.info.get("tier", ""))
        seeds = [cfg.seed + i for i in range(cfg.eval_seeds)]
        cells = []
        if args.data:
            ds = _load_data(args.data)
            bc = train_bc_baseline(ds, epochs=cfg.bc_epochs, lr=cfg.lr, weight_decay=cfg.weight_decay,
                                   grad_clip=cfg.grad_clip, seed=cfg.seed, decode=cfg.decode)
            cells.append(CompareConfig(f"{spec.family}-bc", spec.family, tier, "bc", lo, hi,
                                       policy_runner(bc, spec, cfg.episodes)))
        for mode in ("reconstruct", "tuned"):
            cells.append(CompareConfig(f"{spec.family}-{mode}", spec.family, tier, mode, lo, hi,
                                       policy_runner(CMTPolicy(bundle, mode, cfg.decode), spec, cfg.episodes)))
        if bundle.info.get("meta"):
            for label, online in (("no-context", False), ("online-context", True)):
                cells.append(CompareConfig(f"{spec.family}-{label}", spec.family, tier, label, lo, hi,
                                           _meta_runner(bundle, spec, cfg, online)))
        report = compare(cells, seeds)
        return [ckpt, *args.data], _emit(report.to_csv(), args)
    raise UsageError(f"unknown command {cmd}")


def _meta_runner(bundle, spec, cfg: RunConfig, online: bool):
    def run_seed(seed: int) -> float:
        res = meta_test(bundle, spec, cfg.episodes, seed, cfg.mode, cfg.capacity, online, cfg.decode)
        # the first episode never has context; score the episodes that could
        rets = res.returns[1:] if len(res.returns) > 1 else res.returns
        return float(sum(rets) / len(rets))

    return run_seed


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig)}
        cfg = parse_config(args.config, overrides)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except ConfigError as e:
        print(f"cmt: config error: {e}", file=sys.stderr)
        return 1
    try:
        inputs, outputs = run(args, cfg)
        outputs = [o for o in outputs if o is not None]
        if outputs:
            meta_path = Path(str(outputs[0]) + ".meta.json")
        else:
            meta_path = Path(f"cmt-{args.command}.meta.json")
        _write_metadata(args.command, cfg, [*inputs, *([args.config] if args.config else [])], outputs, meta_path)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"cmt: error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"cmt: file not found: {e.filename or e}", file=sys.stderr)
        return 2
    except (CMTError, OSError, ValueError) as e:
        print(f"cmt: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
