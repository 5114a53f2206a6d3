"""
Run configuration.

All knobs live in section dataclasses composed into RunConfig. On disk the
configuration is a JSON object with flat dotted keys ("fed.rounds": 10).
Precedence: command-line override > config file > dataclass default.
"""

import json
import logging
import os
import typing
from dataclasses import asdict, dataclass, field, fields, replace

from src.gridsentinel.errors import ConfigError

logger = logging.getLogger("gridsentinel.config")

DEFAULT_CONFIG_FILE = "./etc/run_config.json"

ARCHITECTURES = ("gcn_bigru", "gru_only", "gcn_only")
DECISION_MODES = ("consecutive", "any")
ALGORITHMS = ("fedprox", "fedavg")
TRAIN_MODES = ("federated", "centralized")

# seeds are fanned out from RunConfig.seed and never read from files
_DERIVED = {"derived": True}


def _require(condition, message):
    if not condition:
        raise ConfigError(message)


@dataclass(frozen=True)
class GeneratorConfig:
    n_sub: int = 16
    timesteps: int = 5000
    seed: int = field(default=7, metadata=_DERIVED)
    packet_bits: int = 1024
    packets_per_step: int = 200
    fading_coeff: float = 0.95
    scatter_std: float = 0.15
    t_symb: float = 1e-4
    cfo_hz: float = 20.0
    retx_delay_ms: float = 4.0
    max_tx: int = 8
    # attack perturbations
    snr_drop_db: float = 1.5
    csi_path_amplitude: float = 0.05
    cfo_bias_hz: float = 40.0
    ber_multiplier: float = 3.0
    latency_shift: float = 0.10
    latency_jitter_scale: float = 1.5
    ramp_length: int = 10
    coverage: float = 0.30
    coverage_tolerance: float = 0.05
    min_attack_len: int = 30
    max_attack_len: int = 120
    co_occurrence: float = 0.3

    def __post_init__(self):
        _require(self.n_sub >= 1, "gen.n_sub must be >= 1")
        _require(self.timesteps >= 1, "gen.timesteps must be >= 1")
        _require(self.packet_bits >= 1 and self.packets_per_step >= 1, "packet sizes must be >= 1")
        _require(0.0 <= self.fading_coeff < 1.0, "gen.fading_coeff must be in [0, 1)")
        _require(self.t_symb > 0, "gen.t_symb must be positive")
        _require(self.max_tx >= 1, "gen.max_tx must be >= 1")
        for name in ("snr_drop_db", "csi_path_amplitude", "cfo_bias_hz", "latency_shift", "scatter_std"):
            _require(getattr(self, name) >= 0, f"gen.{name} must be non-negative")
        _require(self.ber_multiplier >= 1.0, "gen.ber_multiplier must be >= 1")
        _require(self.latency_jitter_scale >= 1.0, "gen.latency_jitter_scale must be >= 1")
        _require(self.ramp_length >= 1, "gen.ramp_length must be >= 1")
        _require(0.0 < self.coverage < 1.0, "gen.coverage must be in (0, 1)")
        _require(0.0 < self.coverage_tolerance < self.coverage, "gen.coverage_tolerance must be in (0, coverage)")
        _require(1 <= self.min_attack_len <= self.max_attack_len, "attack lengths must satisfy 1 <= min <= max")
        _require(0.0 <= self.co_occurrence <= 1.0, "gen.co_occurrence must be in [0, 1]")


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.70
    val: float = 0.15
    test: float = 0.15
    buffer: int = 5

    def __post_init__(self):
        _require(min(self.train, self.val, self.test) > 0, "split ratios must be positive")
        _require(abs(self.train + self.val + self.test - 1.0) < 1e-9, "split ratios must sum to 1")
        _require(self.buffer >= 0, "split.buffer must be >= 0")

    def boundaries(self, timesteps):
        """Half-open (start, end) ranges of the train, val and test segments.

        Buffers sit at the start of val and test and belong to no segment.
        """
        b1 = round(self.train * timesteps)
        b2 = round((self.train + self.val) * timesteps)
        segments = {
            "train": (0, b1),
            "val": (b1 + self.buffer, b2),
            "test": (b2 + self.buffer, timesteps),
        }
        if any(end - start < 1 for start, end in segments.values()):
            raise ConfigError(f"{timesteps} timesteps cannot hold three segments with {self.buffer}-step buffers")
        return segments

    def buffers(self, timesteps):
        segments = self.boundaries(timesteps)
        return [(segments["train"][1], segments["val"][0]), (segments["val"][1], segments["test"][0])]


@dataclass(frozen=True)
class FeatureFlags:
    derived: bool = True
    neighbor: bool = True
    metadata: bool = True
    window: int = 9
    stride: int = 1
    stat_window: int = 9
    entropy_bins: int = 16
    entropy_eps: float = 1e-9
    smoothing: int = 5
    export: bool = False

    def __post_init__(self):
        _require(self.window >= 1, "features.window must be >= 1")
        _require(self.stride >= 1, "features.stride must be >= 1")
        _require(self.stat_window >= 4, "features.stat_window must be >= 4")
        _require(self.entropy_bins >= 2, "features.entropy_bins must be >= 2")
        _require(self.entropy_eps > 0, "features.entropy_eps must be positive")
        _require(self.smoothing >= 1, "features.smoothing must be >= 1")

    @property
    def variant(self):
        if self.derived and self.neighbor and self.metadata:
            return "all"
        return "+".join(f"no_{name}" for name in ("metadata", "derived", "neighbor") if not getattr(self, name))


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 128
    gru_hidden: int = 192
    gru_layers: int = 2
    dropout_gcn: float = 0.2
    dropout_gru: float = 0.2
    ln_eps: float = 1e-5
    arch: str = "gcn_bigru"
    init_seed: int = field(default=7, metadata=_DERIVED)

    def __post_init__(self):
        _require(self.hidden >= 1 and self.gru_hidden >= 1, "model widths must be >= 1")
        _require(self.gru_layers >= 1, "model.gru_layers must be >= 1")
        _require(0 <= self.dropout_gcn < 1 and 0 <= self.dropout_gru < 1, "dropout rates must be in [0, 1)")
        _require(self.ln_eps > 0, "model.ln_eps must be positive")
        _require(self.arch in ARCHITECTURES, f"model.arch must be one of {ARCHITECTURES}")


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.7
    lambda_seq: float = 0.20
    k_top: int = 3
    weight_decay: float = 5e-5
    clip_norm: float = 1.0
    eps: float = 1e-12

    def __post_init__(self):
        _require(self.alpha >= 0 and self.lambda_seq >= 0, "loss weights must be non-negative")
        _require(self.k_top >= 1, "loss.k_top must be >= 1")
        _require(self.weight_decay >= 0, "loss.weight_decay must be non-negative")
        _require(self.clip_norm > 0, "loss.clip_norm must be positive")
        _require(0 < self.eps < 0.5, "loss.eps must be in (0, 0.5)")

    def top_k(self, window):
        return min(self.k_top, window)


@dataclass(frozen=True)
class FedConfig:
    rounds: int = 10
    local_epochs: int = 1
    mu: float = 0.01
    lr: float = 1e-3
    batch_size: int = 64
    fraction: float = 1.0
    algorithm: str = "fedprox"
    mode: str = "federated"
    workers: int = 1
    seed: int = field(default=7, metadata=_DERIVED)

    def __post_init__(self):
        _require(self.rounds >= 1, "fed.rounds must be >= 1")
        _require(self.local_epochs >= 1, "fed.local_epochs must be >= 1")
        _require(self.mu >= 0, "fed.mu must be non-negative")
        _require(self.lr >= 0, "fed.lr must be non-negative")
        _require(self.batch_size >= 1, "fed.batch_size must be >= 1")
        _require(self.fraction == 1.0, "fed.fraction must be 1.0; partial participation is not supported")
        _require(self.algorithm in ALGORITHMS, f"fed.algorithm must be one of {ALGORITHMS}")
        _require(self.mode in TRAIN_MODES, f"fed.mode must be one of {TRAIN_MODES}")
        _require(self.workers >= 1, "fed.workers must be >= 1")

    @property
    def proximal_mu(self):
        return self.mu if self.algorithm == "fedprox" else 0.0


@dataclass(frozen=True)
class DecisionRule:
    tau: float = 0.55
    m: int = 2
    mode: str = "consecutive"

    def __post_init__(self):
        _require(0.0 < self.tau < 1.0, "rule.tau must be in (0, 1)")
        _require(self.m >= 1, "rule.m must be >= 1")
        _require(self.mode in DECISION_MODES, f"rule.mode must be one of {DECISION_MODES}")


@dataclass(frozen=True)
class SweepConfig:
    taus: tuple[float, ...] = (0.40, 0.45, 0.50, 0.55, 0.60, 0.65, 0.70)
    ms: tuple[int, ...] = (1, 2, 3, 4)

    def __post_init__(self):
        _require(len(self.taus) > 0 and len(self.ms) > 0, "sweep grids must be non-empty")
        _require(all(0 < t < 1 for t in self.taus), "sweep.taus must lie in (0, 1)")
        _require(all(m >= 1 for m in self.ms), "sweep.ms must be >= 1")


@dataclass(frozen=True)
class AblationConfig:
    include_arch: tuple[str, ...] = ()

    def __post_init__(self):
        _require(all(a in ARCHITECTURES for a in self.include_arch),
                 f"ablate.include_arch entries must be among {ARCHITECTURES}")


SECTIONS = {
    "gen": GeneratorConfig,
    "split": SplitSpec,
    "features": FeatureFlags,
    "model": ModelConfig,
    "loss": LossConfig,
    "fed": FedConfig,
    "rule": DecisionRule,
    "sweep": SweepConfig,
    "ablate": AblationConfig,
}


@dataclass(frozen=True)
class RunConfig:
    gen: GeneratorConfig = field(default_factory=GeneratorConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    features: FeatureFlags = field(default_factory=FeatureFlags)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    fed: FedConfig = field(default_factory=FedConfig)
    rule: DecisionRule = field(default_factory=DecisionRule)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    ablate: AblationConfig = field(default_factory=AblationConfig)
    output_dir: str = "runs/default"
    seed: int = 7
    force: bool = False

    def __post_init__(self):
        object.__setattr__(self, "gen", replace(self.gen, seed=self.seed))
        object.__setattr__(self, "model", replace(self.model, init_seed=self.seed))
        object.__setattr__(self, "fed", replace(self.fed, seed=self.seed))

    def to_flat(self):
        """Flat dotted-key mapping of every configurable knob."""
        flat = {}
        for section in SECTIONS:
            values = asdict(getattr(self, section))
            for f in fields(SECTIONS[section]):
                if f.metadata.get("derived"):
                    continue
                value = values[f.name]
                flat[f"{section}.{f.name}"] = list(value) if isinstance(value, tuple) else value
        flat["output_dir"] = self.output_dir
        flat["seed"] = self.seed
        flat["force"] = self.force
        return flat

    def to_json(self):
        return json.dumps(self.to_flat(), indent=2) + "\n"

    def with_overrides(self, overrides):
        return config_from_flat({**self.to_flat(), **overrides})


def config_keys():
    """Every accepted flat key with its declared type."""
    keys = {}
    for section, cls in SECTIONS.items():
        hints = typing.get_type_hints(cls)
        for f in fields(cls):
            if not f.metadata.get("derived"):
                keys[f"{section}.{f.name}"] = hints[f.name]
    keys["output_dir"] = str
    keys["seed"] = int
    keys["force"] = bool
    return keys


def _coerce(key, kind, value):
    """Convert a JSON or command-line value to the declared field type."""
    try:
        if typing.get_origin(kind) is tuple:
            item = typing.get_args(kind)[0]
            if isinstance(value, str):
                value = [v for v in value.split(",") if v.strip()]
            return tuple(_coerce(key, item, v) for v in value)
        if kind is bool:
            if isinstance(value, str):
                lowered = value.strip().lower()
                if lowered not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                return lowered in ("true", "1", "yes")
            return bool(value)
        if kind is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if kind is float:
            return float(value)
        return str(value).strip() if isinstance(value, str) else str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {value!r} as {getattr(kind, '__name__', kind)}") from None


def config_from_flat(flat):
    """Build a RunConfig from a flat mapping; unknown keys are rejected."""
    known = config_keys()
    unknown = sorted(set(flat) - set(known))
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")

    sections = {name: {} for name in SECTIONS}
    top = {}
    for key, value in flat.items():
        value = _coerce(key, known[key], value)
        if "." in key:
            section, name = key.split(".", 1)
            sections[section][name] = value
        else:
            top[key] = value
    built = {name: SECTIONS[name](**values) for name, values in sections.items()}
    return RunConfig(**built, **top)


def load_config(config_file=None, overrides=None):
    """Load the run configuration file and apply command-line overrides."""
    config_file = config_file or os.getenv("GRIDSENTINEL_CONFIG") or DEFAULT_CONFIG_FILE
    flat = {}
    try:
        with open(config_file, "r") as f:
            flat = json.load(f)
    except FileNotFoundError:
        logger.warning("config file %s not found, using defaults", config_file)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{config_file}: invalid JSON ({e})") from e
    if not isinstance(flat, dict):
        raise ConfigError(f"{config_file}: expected a JSON object of flat keys")
    return config_from_flat({**flat, **(overrides or {})})
