"""
Configuration management for code-ssm.

This module provides typed run configuration assembled from a named preset,
an optional JSON file and dotted ``section.key=value`` overrides, with
validation for every model, training, task and benchmark parameter.
"""

import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

from .exceptions import ConfigError


logger = logging.getLogger(__name__)

SEED_ENV_VAR = "CODESSM_SEED"

VARIANTS = ("base", "pos", "uni", "dft", "dropout")
MLM_HEADS = ("linear", "bert")
DISCRETIZATIONS = ("zoh", "bilinear")
SCHEDULES = ("cosine", "linear")
TASK_KINDS = ("retrieval", "seq_class", "pair_class", "token_class")
POOLINGS = ("mean", "first_token")
CLASSIFICATION_SCHEMES = ("accuracy", "f1_macro")
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")

NUM_SPECIAL_TOKENS = 5


@dataclass
class EncoderConfig:
    """Shape and variant of the encoder."""

    n_layers: int = 2
    hidden_dim: int = 64
    state_size: int = 16
    vocab_size: int = 261
    variant: str = "base"
    dropout_p: float = 0.1
    max_position: int = 256
    tie_mlm_head: bool = True
    mlm_head: str = "linear"
    gate_bias: bool = False
    discretization: str = "zoh"

    def validate(self) -> None:
        if self.n_layers < 1:
            raise ConfigError(f"model.n_layers must be >= 1, got {self.n_layers}")
        if self.hidden_dim < 2 or self.hidden_dim % 2 != 0:
            raise ConfigError(f"model.hidden_dim must be a positive even number, got {self.hidden_dim}")
        if self.state_size < 1:
            raise ConfigError(f"model.state_size must be >= 1, got {self.state_size}")
        if self.vocab_size < NUM_SPECIAL_TOKENS:
            raise ConfigError(f"model.vocab_size must cover the {NUM_SPECIAL_TOKENS} special tokens, "
                              f"got {self.vocab_size}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"model.variant must be one of {VARIANTS}, got {self.variant!r}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"model.dropout_p must lie in [0, 1), got {self.dropout_p}")
        if self.max_position < 1:
            raise ConfigError(f"model.max_position must be >= 1, got {self.max_position}")
        if self.mlm_head not in MLM_HEADS:
            raise ConfigError(f"model.mlm_head must be one of {MLM_HEADS}, got {self.mlm_head!r}")
        if self.discretization not in DISCRETIZATIONS:
            raise ConfigError(f"model.discretization must be one of {DISCRETIZATIONS}, "
                              f"got {self.discretization!r}")

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON form; stored in checkpoints."""
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass
class TrainConfig:
    """Optimisation and data settings for pretraining and fine-tuning."""

    lr: float = 1e-3
    warmup_steps: int = 300
    schedule: str = "cosine"
    weight_decay: float = 0.01
    batch_size: int = 16
    total_steps: int = 3000
    seq_len: int = 64
    mask_prob: float = 0.15
    grad_clip: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    log_interval: int = 100
    corpus_size: int = 2000
    eval_fraction: float = 0.05

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError(f"train.lr must be positive, got {self.lr}")
        if self.total_steps < 0:
            raise ConfigError(f"train.total_steps must be >= 0, got {self.total_steps}")
        if not 0 <= self.warmup_steps:
            raise ConfigError(f"train.warmup_steps must be >= 0, got {self.warmup_steps}")
        if self.total_steps > 0 and self.warmup_steps > self.total_steps:
            raise ConfigError(f"train.warmup_steps ({self.warmup_steps}) exceeds "
                              f"train.total_steps ({self.total_steps})")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"train.schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.weight_decay < 0:
            raise ConfigError(f"train.weight_decay must be non-negative, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size must be >= 1, got {self.batch_size}")
        if self.seq_len < 2:
            raise ConfigError(f"train.seq_len must be >= 2, got {self.seq_len}")
        if not 0.0 <= self.mask_prob < 1.0:
            raise ConfigError(f"train.mask_prob must lie in [0, 1), got {self.mask_prob}")
        if self.grad_clip <= 0:
            raise ConfigError(f"train.grad_clip must be positive, got {self.grad_clip}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError(f"train.beta1/beta2 must lie in [0, 1), got {self.beta1}/{self.beta2}")
        if self.log_interval < 1:
            raise ConfigError(f"train.log_interval must be >= 1, got {self.log_interval}")
        if self.corpus_size < 1:
            raise ConfigError(f"train.corpus_size must be >= 1, got {self.corpus_size}")
        if not 0.0 <= self.eval_fraction < 1.0:
            raise ConfigError(f"train.eval_fraction must lie in [0, 1), got {self.eval_fraction}")


@dataclass
class TaskConfig:
    """Downstream task selection and head settings."""

    kind: str = "seq_class"
    n_labels: int = 4
    n_types: int = 6
    unk_id: int = 0
    pooling: str = "mean"
    context_length: int = 128
    temperature: float = 0.05
    dataset_size: int = 400
    scheme: str = "accuracy"
    eval_fraction: float = 0.2

    def validate(self) -> None:
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"task.kind must be one of {TASK_KINDS}, got {self.kind!r}")
        if self.n_labels < 2:
            raise ConfigError(f"task.n_labels must be >= 2, got {self.n_labels}")
        if not 0 <= self.unk_id < self.n_types:
            raise ConfigError(f"task.unk_id must lie in [0, {self.n_types}), got {self.unk_id}")
        if self.pooling not in POOLINGS:
            raise ConfigError(f"task.pooling must be one of {POOLINGS}, got {self.pooling!r}")
        if self.context_length < 4:
            raise ConfigError(f"task.context_length must be >= 4, got {self.context_length}")
        if self.temperature <= 0:
            raise ConfigError(f"task.temperature must be positive, got {self.temperature}")
        if self.dataset_size < 10:
            raise ConfigError(f"task.dataset_size must be >= 10, got {self.dataset_size}")
        if self.scheme not in CLASSIFICATION_SCHEMES:
            raise ConfigError(f"task.scheme must be one of {CLASSIFICATION_SCHEMES}, got {self.scheme!r}")
        if not 0.0 < self.eval_fraction < 1.0:
            raise ConfigError(f"task.eval_fraction must lie in (0, 1), got {self.eval_fraction}")


@dataclass
class BenchConfig:
    """Benchmark grid; batch 4 by default."""

    lengths: List[int] = field(default_factory=lambda: [256, 512, 1024, 2048])
    batch: int = 4
    trials: int = 3
    hidden_dim: int = 64
    state_size: int = 16
    n_heads: int = 4

    def validate(self) -> None:
        if not self.lengths or any(not isinstance(n, int) or n < 1 for n in self.lengths):
            raise ConfigError(f"bench.lengths must be a non-empty list of positive ints, got {self.lengths}")
        if self.batch < 1 or self.trials < 1:
            raise ConfigError(f"bench.batch and bench.trials must be >= 1, got {self.batch}/{self.trials}")
        if self.hidden_dim % self.n_heads != 0:
            raise ConfigError(f"bench.hidden_dim ({self.hidden_dim}) must be divisible by "
                              f"bench.n_heads ({self.n_heads})")


@dataclass
class GradcheckConfig:
    """Shrunken model used by the finite-difference check."""

    hidden_dim: int = 8
    seq_len: int = 16
    batch_size: int = 2
    epsilon: float = 1e-5
    threshold: float = 1e-3
    # floor of the relative-error denominator; float64 central differences on an
    # O(1) loss carry about 1e-10 of rounding noise
    atol: float = 1e-6
    max_coords_per_param: Optional[int] = None

    def validate(self) -> None:
        if self.hidden_dim < 2 or self.hidden_dim % 2 != 0:
            raise ConfigError(f"gradcheck.hidden_dim must be a positive even number, got {self.hidden_dim}")
        if self.seq_len < 2 or self.batch_size < 1:
            raise ConfigError("gradcheck.seq_len must be >= 2 and gradcheck.batch_size >= 1")
        if self.epsilon <= 0 or self.threshold <= 0 or self.atol <= 0:
            raise ConfigError("gradcheck.epsilon, gradcheck.threshold and gradcheck.atol must be positive")


@dataclass
class SpectrumConfig:
    """Transfer-function export settings."""

    kernel_len: int = 10
    n_freq: int = 10

    def validate(self) -> None:
        if self.kernel_len < 1:
            raise ConfigError(f"spectrum.kernel_len must be >= 1, got {self.kernel_len}")
        if self.n_freq < 2:
            raise ConfigError(f"spectrum.n_freq must be >= 2, got {self.n_freq}")


SECTIONS = {
    "model": EncoderConfig,
    "train": TrainConfig,
    "task": TaskConfig,
    "bench": BenchConfig,
    "gradcheck": GradcheckConfig,
    "spectrum": SpectrumConfig,
}


@dataclass
class RunConfig:
    """Everything one command invocation needs."""

    seed: int = 0
    log_level: str = "INFO"
    model: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    gradcheck: GradcheckConfig = field(default_factory=GradcheckConfig)
    spectrum: SpectrumConfig = field(default_factory=SpectrumConfig)

    def validate(self) -> None:
        if self.log_level not in LOG_LEVELS:
            raise ConfigError(f"log_level must be one of {LOG_LEVELS}, got {self.log_level!r}")
        for name in SECTIONS:
            getattr(self, name).validate()

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        config = cls()
        merge_into(config, data)
        config.validate()
        return config


PRESETS: Dict[str, Dict[str, Any]] = {
    "desk": {},
    "tiny": {
        "model": {"n_layers": 1, "hidden_dim": 16, "state_size": 8},
        "train": {"total_steps": 20, "warmup_steps": 5, "batch_size": 4, "seq_len": 32,
                  "corpus_size": 64, "log_interval": 5},
        "task": {"dataset_size": 40, "context_length": 64},
        "bench": {"lengths": [64, 128], "batch": 2, "trials": 1, "hidden_dim": 16},
    },
    "large": {
        "model": {"n_layers": 12, "hidden_dim": 1024, "state_size": 64},
        "train": {"lr": 5e-5, "warmup_steps": 300, "seq_len": 256},
    },
}


def _coerce(section: str, key: str, current: Any, value: Any) -> Any:
    location = f"{section}.{key}" if section else key
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{location} expects true/false, got {value!r}")
        return value
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{location} expects an integer, got {value!r}")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{location} expects a number, got {value!r}")
        return float(value)
    if isinstance(current, str):
        if not isinstance(value, str):
            raise ConfigError(f"{location} expects a string, got {value!r}")
        return value
    if isinstance(current, list):
        if not isinstance(value, list):
            raise ConfigError(f"{location} expects a list, got {value!r}")
        return value
    if current is None:
        if value is not None and (isinstance(value, bool) or not isinstance(value, int)):
            raise ConfigError(f"{location} expects an integer or null, got {value!r}")
        return value
    raise ConfigError(f"{location} has unsupported type {type(current).__name__}")


def merge_into(config: RunConfig, data: Mapping[str, Any]) -> None:
    """Overlay a nested mapping onto ``config``; unknown keys are rejected."""
    for key, value in data.items():
        if key in SECTIONS:
            if not isinstance(value, Mapping):
                raise ConfigError(f"section {key!r} must be an object")
            section = getattr(config, key)
            known = {f.name for f in dataclasses.fields(section)}
            for sub_key, sub_value in value.items():
                if sub_key not in known:
                    raise ConfigError(f"unknown config key {key}.{sub_key}")
                setattr(section, sub_key, _coerce(key, sub_key, getattr(section, sub_key), sub_value))
        elif key in ("seed", "log_level"):
            setattr(config, key, _coerce("", key, getattr(config, key), value))
        else:
            raise ConfigError(f"unknown config key {key}")


def parse_override(text: str) -> Dict[str, Any]:
    """Turn ``a.b=3`` into ``{"a": {"b": 3}}``; values parse as JSON, else string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    dotted, raw = text.split("=", 1)
    keys = [part for part in dotted.strip().split(".") if part]
    if not keys or len(keys) > 2:
        raise ConfigError(f"override key {dotted!r} must be 'key' or 'section.key'")
    try:
        value: Any = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return {keys[0]: {keys[1]: value}} if len(keys) == 2 else {keys[0]: value}


def load_config(config_path: Optional[str] = None, preset: str = "desk",
                overrides: Sequence[str] = (), seed: Optional[int] = None,
                environ: Optional[Mapping[str, str]] = None) -> RunConfig:
    """Resolve preset -> file -> overrides -> explicit seed -> CODESSM_SEED.

    Args:
        config_path: Optional JSON file
        preset: Name in PRESETS
        overrides: Dotted ``section.key=value`` strings
        seed: Seed from the command line
        environ: Environment mapping (defaults to os.environ)

    Returns:
        Validated RunConfig
    """
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    config = RunConfig()
    merge_into(config, PRESETS[preset])

    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"config file {config_path} not found")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {config_path} is not valid JSON: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"config file {config_path} must hold a JSON object")
        merge_into(config, data)
        logger.info(f"Loaded configuration from {config_path}")

    for override in overrides:
        merge_into(config, parse_override(override))

    if seed is not None:
        config.seed = seed
    env = os.environ if environ is None else environ
    if env.get(SEED_ENV_VAR):
        try:
            config.seed = int(env[SEED_ENV_VAR])
        except ValueError as e:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {env[SEED_ENV_VAR]!r}") from e

    config.validate()
    return config


def write_resolved_config(config: RunConfig, output_dir: Path) -> Path:
    """Snapshot the resolved configuration next to a run's artifacts."""
    path = Path(output_dir) / "resolved_config.json"
    path.write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def encoder_config_from_dict(data: Mapping[str, Any]) -> EncoderConfig:
    """Rebuild an EncoderConfig from its dict form, rejecting unknown keys."""
    config = EncoderConfig()
    known = {f.name for f in dataclasses.fields(config)}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown config key model.{key}")
        setattr(config, key, _coerce("model", key, getattr(config, key), value))
    config.validate()
    return config


def describe_differences(left: EncoderConfig, right: EncoderConfig) -> List[Tuple[str, Any, Any]]:
    a, b = left.to_dict(), right.to_dict()
    return [(key, a[key], b[key]) for key in a if a[key] != b[key]]
