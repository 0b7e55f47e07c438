"""Experiment configuration: a YAML tree mapped onto validated dataclasses.

Every key is checked against the schema; unknown keys, wrong types and rejected
values all raise :class:`ConfigurationError` naming the dotted key path.
"""

from __future__ import annotations

import dataclasses
import hashlib
import platform
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import yaml

from . import __version__
from .baselines import DiffusionRLConfig
from .diffusion import DenoiserTrainConfig, MixtureDataset, make_schedule
from .environment import EnvConfig
from .grpo import GrpoConfig
from .numerics import ConfigurationError
from .prompts import Prompt, Vocabulary
from .rewards import RewardSpec


@dataclass
class ScheduleConfig:
    T: int = 50
    beta_min: float = 1e-3
    beta_max: float = 0.2
    kind: str = "linear"

    def __post_init__(self) -> None:
        make_schedule(self.T, self.beta_min, self.beta_max, self.kind)  # validates


@dataclass
class VocabConfig:
    length: int = 4
    n_style: int = 0


@dataclass
class PolicyConfig:
    hidden: tuple[int, ...] = (64, 64)
    d_emb: int = 8
    xhat_scale: float = 5.0
    emb_scale: float = 2.0

    def __post_init__(self) -> None:
        if self.d_emb < 1 or any(h < 1 for h in self.hidden) or self.xhat_scale <= 0:
            raise ConfigurationError("policy sizes must be positive")


@dataclass
class TaskConfig:
    queries: str = "auto"  # auto | mode | ambiguous
    train_mode: str = "closed_loop"  # closed_loop | feedforward
    checkpoint_every: int = 100

    def __post_init__(self) -> None:
        if self.queries not in ("auto", "mode", "ambiguous"):
            raise ConfigurationError("queries must be auto, mode or ambiguous")
        if self.train_mode not in ("closed_loop", "feedforward"):
            raise ConfigurationError("train_mode must be closed_loop or feedforward")
        if self.checkpoint_every < 1:
            raise ConfigurationError("checkpoint_every must be >= 1")


EVAL_MODES = ("closed_loop", "precomputed", "identity", "feedforward")


@dataclass
class EvalConfig:
    episodes: int = 500
    mode: str = "closed_loop"
    refine_steps: int | None = None  # None: env.n_refine_infer
    bootstrap: int = 2000
    sweep: tuple[int, ...] = (1, 2, 3, 5)

    def __post_init__(self) -> None:
        if self.episodes < 0 or self.bootstrap < 1:
            raise ConfigurationError("episodes must be >= 0 and bootstrap >= 1")
        if self.mode not in EVAL_MODES:
            raise ConfigurationError(f"eval mode must be one of {EVAL_MODES}")
        if self.refine_steps is not None and self.refine_steps < 1:
            raise ConfigurationError("refine_steps must be >= 1")


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/default"
    denoiser_checkpoint: str | None = None  # default: <out>/denoiser.json
    dataset: MixtureDataset = field(default_factory=MixtureDataset)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    vocab: VocabConfig = field(default_factory=VocabConfig)
    denoiser: DenoiserTrainConfig = field(default_factory=DenoiserTrainConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    reward: RewardSpec = field(default_factory=RewardSpec)
    task: TaskConfig = field(default_factory=TaskConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    diffusion_rl: DiffusionRLConfig = field(default_factory=DiffusionRLConfig)

    def __post_init__(self) -> None:
        for n in (self.env.n_refine_train, self.env.n_refine_infer):
            if n > self.schedule.T:
                raise ConfigurationError(f"env: N_R={n} exceeds schedule.T={self.schedule.T}")
        if self.reward.budget > self.vocab.length:
            raise ConfigurationError("reward.budget exceeds vocab.length")

    # ---------------------------------------------------------------- derived
    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    @property
    def denoiser_path(self) -> Path:
        return Path(self.denoiser_checkpoint) if self.denoiser_checkpoint else self.out_dir / "denoiser.json"

    def make_vocab(self) -> Vocabulary:
        return Vocabulary.opposite_pairs(self.dataset.n_modes, self.vocab.length, self.vocab.n_style)

    def query_pool(self, vocab: Vocabulary) -> list[Prompt]:
        kind = self.task.queries
        if kind == "auto":
            kind = "ambiguous" if self.reward.kind == "ambiguous_nearest" else "mode"
        if kind == "ambiguous":
            if not vocab.ambiguous_pairs:
                raise ConfigurationError("ambiguous queries need an even number of modes")
            return [vocab.ambiguous_query(i) for i in range(len(vocab.ambiguous_pairs))]
        return [vocab.mode_query(k) for k in range(vocab.n_modes)]

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


# ------------------------------------------------------------------- building

def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def _coerce(value: Any, default: Any, key: str):
    """Match ``value`` to the type of the field default."""
    if value is None:
        return None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, str):
        if isinstance(value, bool):  # YAML reads bare on/off as booleans
            return "on" if value else "off"
        if not isinstance(value, str):
            raise ConfigurationError(f"{key}: expected a string, got {value!r}")
        return value
    if isinstance(default, float):
        try:
            if isinstance(value, bool):
                raise ValueError
            return float(value)
        except (TypeError, ValueError):
            raise ConfigurationError(f"{key}: expected a number, got {value!r}") from None
    if isinstance(default, int) or default is None and isinstance(value, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"{key}: expected a list, got {value!r}")
        if default and isinstance(default[0], (tuple, list)):
            return tuple(tuple(x) for x in value)
        return tuple(_coerce(x, default[0] if default else 0, f"{key}[{i}]") for i, x in enumerate(value))
    return value


def _build(cls, data: Mapping | None, prefix: str):
    data = {} if data is None else data
    if not isinstance(data, Mapping):
        raise ConfigurationError(f"{prefix or 'config'}: expected a mapping, got {data!r}")
    flds = {f.name: f for f in dataclasses.fields(cls)}
    for k in data:
        if k not in flds:
            raise ConfigurationError(f"{prefix}{k}: unknown key")
    proto = cls()
    kwargs = {}
    for name, f in flds.items():
        key = f"{prefix}{name}"
        if name not in data:
            continue
        default = getattr(proto, name)
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), data[name], key + ".")
        else:
            kwargs[name] = _coerce(data[name], default, key)
    try:
        return cls(**kwargs)
    except ConfigurationError as e:
        if prefix:
            raise ConfigurationError(f"{prefix.rstrip('.')}: {e}") from None
        raise


def config_from_dict(data: Mapping | None) -> ExperimentConfig:
    """Composite rewards train without the KL term unless ``grpo.kl_coef`` is given explicitly."""
    data = dict(data or {})
    reward, grpo = data.get("reward") or {}, data.get("grpo") or {}
    if isinstance(reward, Mapping) and reward.get("kind") == "composite" \
            and isinstance(grpo, Mapping) and "kl_coef" not in grpo:
        data["grpo"] = {**grpo, "kl_coef": 0.0}
    return _build(ExperimentConfig, data, "")


def load_config(path: str | Path | None, overrides: Mapping | None = None) -> ExperimentConfig:
    """Read YAML (or start from defaults when ``path`` is None) and apply dotted overrides."""
    data: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigurationError(f"config file not found: {p}")
        try:
            data = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigurationError(f"{p}: YAML parse error: {e}") from e
        if not isinstance(data, dict):
            raise ConfigurationError(f"{p}: top level must be a mapping")
    for dotted, value in (overrides or {}).items():
        node = data
        *parents, leaf = dotted.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    return config_from_dict(data)


def code_stamp() -> str:
    """Package version plus a digest of the package sources."""
    h = hashlib.sha256()
    for f in sorted(Path(__file__).parent.glob("*.py")):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def write_resolved(cfg: ExperimentConfig, out_dir: Path, command: str) -> Path:
    """Resolved config plus provenance, written beside a run's outputs."""
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "code_version": code_stamp(), "python": platform.python_version(),
           "numpy": np.__version__, "config": cfg.to_dict()}
    path = out_dir / f"resolved_{command}.yaml"
    path.write_text(yaml.safe_dump(doc, sort_keys=False))
    return path
