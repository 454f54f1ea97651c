"""Run configuration: flat ``key = value`` files with command-line overrides.

Precedence is command line > config file > defaults.  Every ablation is a
separate key, so any combination is reachable without code edits.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

from .fields import ModelConfig
from .render import RenderOptions
from .training import LossWeights, TrainConfig, TrainSchedule

VIEW_MODES = ("off", "approximate", "exact")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    dataset: str = ""
    output: str = ""
    seed: int = 0
    dtype: str = "float64"
    # model sizes
    canonical_width: int = 256
    canonical_depth: int = 8
    canonical_skip: int = 4
    encoding_bands: int = 10
    direction_bands: int = 4
    latent_dim: int = 32
    bending_width: int = 64
    bending_layers: int = 5
    rigidity_width: int = 32
    rigidity_layers: int = 3
    # schedule
    iterations: int = 200000
    batch_size: int = 1024
    base_lr: float = 5e-4
    decay_fraction: float = 0.1
    decay_iterations: int = 250000
    warmup: bool = False
    warmup_iterations: int = 1000
    ramp_start: float = 0.01
    # loss weights
    w_rigidity: float = 0.003
    w_offsets: float = 600.0
    w_divergence: float = 3.0
    # ablations
    disable_bending: bool = False
    disable_rigidity: bool = False
    naive_conditioning: bool = False
    naive_offsets: bool = False
    exponent_at_straight: bool = False  # offsets-loss exponent reads w at the straight point too
    disable_offsets_loss: bool = False
    disable_divergence_loss: bool = False
    disable_regularizers: bool = False
    view_dependence: str = "off"
    multi_view: bool = False
    # sampling and bookkeeping
    n_coarse: int = 64
    n_fine: int = 64
    chunk: int = 1024
    checkpoint_every: int = 0
    log_every: int = 100
    test_latent_iterations: int = 200
    test_latent_lr: float = 1e-3

    def validate(self) -> None:
        if self.view_dependence not in VIEW_MODES:
            raise ConfigError(f"view_dependence must be one of {VIEW_MODES}, got {self.view_dependence!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        for name in ("iterations", "batch_size", "n_coarse", "chunk", "latent_dim", "canonical_width",
                     "canonical_depth", "bending_width", "bending_layers", "rigidity_width", "rigidity_layers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.n_fine < 0:
            raise ConfigError("n_fine must be >= 0")
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        for name in ("w_rigidity", "w_offsets", "w_divergence"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        try:
            self.model_config(1).validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def model_config(self, num_latents: int) -> ModelConfig:
        return ModelConfig(
            canonical_width=self.canonical_width,
            canonical_depth=self.canonical_depth,
            canonical_skip=self.canonical_skip,
            encoding_bands=self.encoding_bands,
            latent_dim=self.latent_dim,
            num_latents=num_latents,
            bending_width=self.bending_width,
            bending_layers=self.bending_layers,
            rigidity_width=self.rigidity_width,
            rigidity_layers=self.rigidity_layers,
            use_bending=not self.disable_bending,
            use_rigidity=not self.disable_rigidity,
            naive_conditioning=self.naive_conditioning,
            view_dependence=self.view_dependence,
            direction_bands=self.direction_bands,
            seed=self.seed,
            dtype=self.dtype,
        )

    def train_config(self) -> TrainConfig:
        schedule = TrainSchedule(
            base_lr=self.base_lr,
            decay_fraction=self.decay_fraction,
            decay_iterations=self.decay_iterations,
            warmup=self.warmup,
            warmup_iterations=self.warmup_iterations,
            ramp_start=self.ramp_start,
            total_iterations=self.iterations,
            batch_size=self.batch_size,
        )
        weights = LossWeights(rigidity=self.w_rigidity, offsets=self.w_offsets, divergence=self.w_divergence)
        regularize = not (self.disable_regularizers or self.disable_bending)
        return TrainConfig(
            schedule=schedule,
            weights=weights,
            n_coarse=self.n_coarse,
            n_fine=self.n_fine,
            use_offsets_loss=regularize and not self.disable_offsets_loss,
            use_divergence_loss=regularize and not self.disable_divergence_loss,
            naive_offsets=self.naive_offsets,
            exponent_at_straight=self.exponent_at_straight,
            seed=self.seed,
        )

    def render_options(self, **overrides) -> RenderOptions:
        opts = RenderOptions(n_coarse=self.n_coarse, n_fine=self.n_fine, chunk=self.chunk)
        for k, v in overrides.items():
            setattr(opts, k, v)
        return opts

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_value(key: str, text: str):
    """Convert a raw string to the declared type of ``key``."""
    if key not in FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = FIELD_TYPES[key]
    text = text.strip()
    try:
        if kind == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None
    return text


def read_config_file(path: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are ignored."""
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            out[key] = parse_value(key, value)
    return out


def write_config_file(config: RunConfig, path: str) -> None:
    with open(path, "w") as fh:
        for k, v in config.to_dict().items():
            fh.write(f"{k} = {v}\n")


def resolve_config(file_path: str | None = None, overrides: dict | None = None,
                   base: RunConfig | None = None) -> RunConfig:
    """Merge ``base`` (or the defaults), then the file, then ``overrides``; None overrides are skipped."""
    values = (base or RunConfig()).to_dict()
    if file_path:
        values.update(read_config_file(file_path))
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        if k not in FIELD_TYPES:
            raise ConfigError(f"unknown config key {k!r}")
        values[k] = parse_value(k, v) if isinstance(v, str) else v
    cfg = RunConfig.from_dict(values)
    cfg.validate()
    return cfg
