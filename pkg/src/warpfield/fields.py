"""Canonical radiance field, ray-bending and rigidity networks, latent table."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import DiffArray


@dataclass(frozen=True)
class PositionalEncodingConfig:
    bands: int = 10
    include_raw: bool = True

    def encoded_dim(self, input_dim: int = 3) -> int:
        return input_dim * (2 * self.bands + (1 if self.include_raw else 0))


def encode_position(x, cfg: PositionalEncodingConfig) -> DiffArray:
    """Lift points (N, d) to [x, sin(2^k pi x), cos(2^k pi x) for k < L].

    Sine/cosine blocks are grouped per frequency, coordinates vary fastest.
    """
    x = ad.as_diff(x)
    parts = [x] if cfg.include_raw else []
    for k in range(cfg.bands):
        scaled = x * (np.pi * 2.0**k)
        parts.append(ad.sin(scaled))
        parts.append(ad.cos(scaled))
    if not parts:
        return ad.constant(np.zeros(x.shape[:-1] + (0,), dtype=x.dtype))
    return ad.concat(parts, axis=-1) if len(parts) > 1 else parts[0]


@dataclass
class ModelConfig:
    canonical_width: int = 256
    canonical_depth: int = 8
    canonical_skip: int = 4
    encoding_bands: int = 10
    latent_dim: int = 32
    num_latents: int = 1
    bending_width: int = 64
    bending_layers: int = 5
    rigidity_width: int = 32
    rigidity_layers: int = 3
    use_bending: bool = True
    use_rigidity: bool = True
    naive_conditioning: bool = False
    view_dependence: str = "off"  # off | approximate | exact
    direction_bands: int = 4
    seed: int = 0
    dtype: str = "float64"

    def validate(self) -> None:
        positive = ("canonical_width", "canonical_depth", "latent_dim", "num_latents",
                    "bending_width", "bending_layers", "rigidity_width", "rigidity_layers")
        for name in positive:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.encoding_bands < 0 or self.direction_bands < 0:
            raise ValueError("encoding bands must be nonnegative")
        if not 0 <= self.canonical_skip < self.canonical_depth:
            raise ValueError("canonical_skip must index a hidden layer")
        if self.view_dependence not in ("off", "approximate", "exact"):
            raise ValueError(f"unknown view_dependence mode {self.view_dependence!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")

    def to_dict(self) -> dict:
        return asdict(self)


class MLP:
    """Fully connected rectifier network; weights are (in, out) matrices."""

    def __init__(self, sizes, rng, dtype, zero_last=False, skip_at=None, skip_dim=0):
        self.weights: list[DiffArray] = []
        self.biases: list[DiffArray] = []
        self.skip_at = skip_at
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            if skip_at is not None and i == skip_at:
                n_in += skip_dim
            last = i == len(sizes) - 2
            if last and zero_last:
                w = np.zeros((n_in, n_out))
                b = np.zeros(n_out)
            else:
                bound = 1.0 / np.sqrt(n_in)
                w = rng.uniform(-bound, bound, size=(n_in, n_out))
                b = rng.uniform(-bound, bound, size=n_out)
            self.weights.append(ad.parameter(w, dtype))
            self.biases.append(ad.parameter(b, dtype))

    def parameters(self) -> list[DiffArray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def hidden(self, x: DiffArray, upto: int | None = None) -> DiffArray:
        """Run layers [0, upto) with rectifiers after each."""
        n = len(self.weights) if upto is None else upto
        h = x
        for i in range(n):
            if self.skip_at is not None and i == self.skip_at:
                h = ad.concat([x, h], axis=-1)
            h = ad.relu(ad.linear(h, self.weights[i], self.biases[i]))
        return h

    def __call__(self, x: DiffArray) -> DiffArray:
        h = self.hidden(x, len(self.weights) - 1)
        return ad.linear(h, self.weights[-1], self.biases[-1])


class CanonicalField:
    """Static radiance field: encoded position -> (color in [0,1]^3, density >= 0).

    The trunk follows NeRF (skip connection re-injecting the input); density
    and color are read out linearly from the last hidden layer.  With view
    dependence enabled, a small head mixes an encoded direction into color.
    """

    def __init__(self, cfg: ModelConfig, rng, dtype):
        self.encoding = PositionalEncodingConfig(cfg.encoding_bands, include_raw=True)
        self.in_dim = self.encoding.encoded_dim(3)
        self.cond_dim = cfg.latent_dim if cfg.naive_conditioning else 0
        width = cfg.canonical_width
        trunk_in = self.in_dim + self.cond_dim
        skip = cfg.canonical_skip if cfg.canonical_skip > 0 else None
        self.trunk = MLP([trunk_in] + [width] * cfg.canonical_depth, rng, dtype,
                         skip_at=skip, skip_dim=trunk_in)
        self.density_head = MLP([width, 1], rng, dtype)
        self.view_dependent = cfg.view_dependence != "off"
        self.dir_encoding = PositionalEncodingConfig(cfg.direction_bands, include_raw=True)
        if self.view_dependent:
            self.color_head = MLP([width + self.dir_encoding.encoded_dim(3), max(width // 2, 1), 3], rng, dtype)
        else:
            self.color_head = MLP([width, 3], rng, dtype)

    def parameters(self) -> list[DiffArray]:
        return self.trunk.parameters() + self.density_head.parameters() + self.color_head.parameters()

    def __call__(self, x, latent=None, directions=None) -> tuple[DiffArray, DiffArray]:
        x = ad.as_diff(x)
        if not np.all(np.isfinite(x.values)):
            raise ValueError("non-finite canonical position")
        h = encode_position(x, self.encoding)
        if self.cond_dim:
            if latent is None:
                raise ValueError("naive-conditioned field needs a latent code")
            h = ad.concat([h, latent], axis=-1)
        h = self.trunk.hidden(h)
        density = ad.softplus(self.density_head(h))
        if self.view_dependent:
            if directions is None:
                d = ad.constant(np.zeros((x.shape[0], self.dir_encoding.encoded_dim(3)), dtype=x.dtype))
            else:
                d = encode_position(directions, self.dir_encoding)
            color = ad.sigmoid(self.color_head(ad.concat([h, d], axis=-1)))
        else:
            color = ad.sigmoid(self.color_head(h))
        return color, ad.reshape(density, density.shape[:-1])


class BendingField:
    """Raw offsets b'(x, l): raw position concatenated with latent, no encoding."""

    def __init__(self, cfg: ModelConfig, rng, dtype):
        self.latent_dim = cfg.latent_dim
        sizes = [3 + cfg.latent_dim] + [cfg.bending_width] * (cfg.bending_layers - 1) + [3]
        self.mlp = MLP(sizes, rng, dtype, zero_last=True)

    def parameters(self) -> list[DiffArray]:
        return self.mlp.parameters()

    def __call__(self, x, latent) -> DiffArray:
        x, latent = ad.as_diff(x), ad.as_diff(latent)
        if latent.shape[-1] != self.latent_dim:
            raise ValueError(f"latent dimension {latent.shape[-1]} != {self.latent_dim}")
        if latent.ndim == 1:
            latent = ad.broadcast_to(latent, (x.shape[0], self.latent_dim))
        return self.mlp(ad.concat([x, latent], axis=-1))


class RigidityField:
    """w(x) = (tanh(raw) + 1) / 2, a function of raw position only."""

    def __init__(self, cfg: ModelConfig, rng, dtype):
        sizes = [3] + [cfg.rigidity_width] * (cfg.rigidity_layers - 1) + [1]
        self.mlp = MLP(sizes, rng, dtype, zero_last=True)

    def parameters(self) -> list[DiffArray]:
        return self.mlp.parameters()

    def __call__(self, x) -> DiffArray:
        raw = self.mlp(ad.as_diff(x))
        w = (ad.tanh(raw) + 1.0) * 0.5
        return ad.reshape(w, w.shape[:-1])


@dataclass
class LatentTable:
    """One auto-decoded code per time step, zero-initialized."""

    codes: DiffArray
    is_test: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def __len__(self) -> int:
        return self.codes.shape[0]

    def __getitem__(self, index) -> DiffArray:
        return self.codes[index]

    @property
    def dim(self) -> int:
        return self.codes.shape[1]


class SceneModel:
    """All learnable state: coarse/fine canonical fields, bending, rigidity, latents."""

    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.config = cfg
        self.dtype = np.dtype(cfg.dtype)
        rng = np.random.default_rng(cfg.seed)
        self.coarse = CanonicalField(cfg, rng, self.dtype)
        self.fine = CanonicalField(cfg, rng, self.dtype)
        self.bending = BendingField(cfg, rng, self.dtype) if cfg.use_bending else None
        self.rigidity = RigidityField(cfg, rng, self.dtype) if (cfg.use_bending and cfg.use_rigidity) else None
        self.latents = LatentTable(
            ad.parameter(np.zeros((cfg.num_latents, cfg.latent_dim)), self.dtype),
            np.zeros(cfg.num_latents, dtype=bool),
        )

    # named sections are the unit of checkpointing and of optimizer grouping
    def sections(self) -> dict[str, list[DiffArray]]:
        out = {
            "canonical-coarse": self.coarse.parameters(),
            "canonical-fine": self.fine.parameters(),
        }
        if self.bending is not None:
            out["bending"] = self.bending.parameters()
        if self.rigidity is not None:
            out["rigidity"] = self.rigidity.parameters()
        out["latents"] = [self.latents.codes]
        return out

    def parameters(self) -> list[DiffArray]:
        return [p for group in self.sections().values() for p in group]

    def network_parameters(self) -> list[DiffArray]:
        return [p for name, group in self.sections().items() if name != "latents" for p in group]

    def canonical(self, which: str) -> CanonicalField:
        if which == "coarse":
            return self.coarse
        if which == "fine":
            return self.fine
        raise ValueError(f"which must be 'coarse' or 'fine', got {which!r}")

    def copy(self) -> "SceneModel":
        other = SceneModel(self.config)
        for dst, src in zip(other.parameters(), self.parameters()):
            dst.values[...] = src.values
        other.latents.is_test = self.latents.is_test.copy()
        return other


def init_model(config: ModelConfig) -> SceneModel:
    return SceneModel(config)


def eval_canonical(model: SceneModel, x, which: str = "fine", latent=None, directions=None):
    return model.canonical(which)(x, latent=latent, directions=directions)


def eval_bending(model: SceneModel, x, latent) -> DiffArray:
    x = ad.as_diff(x)
    if model.bending is None:
        return ad.constant(np.zeros(x.shape, dtype=x.dtype))
    return model.bending(x, latent)


def eval_rigidity(model: SceneModel, x) -> DiffArray:
    x = ad.as_diff(x)
    if model.rigidity is None:
        return ad.constant(np.ones(x.shape[:-1], dtype=x.dtype))
    return model.rigidity(x)
