"""Loss terms, full objective, ADAM, schedules, training and test-latent fitting."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DiffArray
from .data import Dataset
from .deformation import BentSampleSet, divergence_hutchinson, hutchinson_noise, offset_field
from .fields import SceneModel, eval_rigidity
from .render import RayBundle, RayResult, RenderOptions, generate_rays, render_rays

log = logging.getLogger(__name__)

NORM_EPS = 1e-9
NOISE_STREAM = 0x5EED


class NumericalError(RuntimeError):
    """Non-finite loss or gradient during optimization."""


@dataclass
class LossWeights:
    rigidity: float = 0.003
    offsets: float = 600.0
    divergence: float = 3.0

    def __post_init__(self):
        if min(self.rigidity, self.offsets, self.divergence) < 0:
            raise ValueError("loss weights must be nonnegative")

    def scaled(self, factor: float) -> "LossWeights":
        return LossWeights(self.rigidity * factor, self.offsets * factor, self.divergence * factor)


@dataclass
class TrainSchedule:
    base_lr: float = 5e-4
    decay_fraction: float = 0.1
    decay_iterations: int = 250_000
    warmup: bool = False
    warmup_iterations: int = 1000
    warmup_start: float = 1.0 / 20.0
    ramp_start: float = 1.0 / 100.0
    total_iterations: int = 200_000
    batch_size: int = 1024

    def __post_init__(self):
        if self.decay_iterations <= 0 or self.warmup_iterations <= 0 or self.total_iterations <= 0:
            raise ValueError("schedule spans must be positive")
        for name in ("decay_fraction", "warmup_start", "ramp_start"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")


def schedule_at(iteration: int, schedule: TrainSchedule, weights: LossWeights) -> tuple[float, LossWeights]:
    """Learning rate and ramped loss weights at ``iteration``.

    lr decays geometrically to ``decay_fraction`` over ``decay_iterations``
    (times a linear warm-up factor when enabled); every loss weight grows
    geometrically from ``ramp_start`` of its value to the full value at
    ``total_iterations``.
    """
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    lr = schedule.base_lr * schedule.decay_fraction ** (iteration / schedule.decay_iterations)
    if schedule.warmup:
        frac = min(iteration / schedule.warmup_iterations, 1.0)
        lr *= schedule.warmup_start + (1.0 - schedule.warmup_start) * frac
    progress = min(iteration / schedule.total_iterations, 1.0)
    return lr, weights.scaled(schedule.ramp_start ** (1.0 - progress))


# ---------------------------------------------------------------- loss terms


def data_loss(coarse_color, fine_color, ground_truth) -> DiffArray:
    gt = np.asarray(ground_truth)
    total = ad.sum((ad.as_diff(coarse_color) - gt) ** 2, axis=-1)
    if fine_color is not None:
        total = total + ad.sum((ad.as_diff(fine_color) - gt) ** 2, axis=-1)
    return ad.mean(total)


def _smooth_norm(v: DiffArray) -> DiffArray:
    return ad.sqrt(ad.sum(v * v, axis=-1) + NORM_EPS**2)


def _blended_norm(v: DiffArray, w_exponent: DiffArray) -> DiffArray:
    """|v| ** (2 - w): l2-like where rigid (w ~ 0), l1-like where deformable."""
    return ad.power(_smooth_norm(v), 2.0 - w_exponent)


def offsets_loss(alpha, raw_offsets, w_bent, w_straight, omega_rigidity: float) -> DiffArray:
    """Mean over coarse samples of alpha * (|b'|^(2 - w(bent)) + omega * w(straight)).

    ``alpha`` = T_j * o_j is treated as a constant.
    """
    a = ad.constant(np.asarray(ad.as_diff(alpha).values).reshape(-1))
    term = _blended_norm(raw_offsets, w_bent) + ad.as_diff(w_straight) * omega_rigidity
    return ad.mean(a * term)


def naive_offsets_loss(alpha, offsets, w_bent) -> DiffArray:
    """Same magnitude penalty on the gated offsets b = w * b' (ablation)."""
    a = ad.constant(np.asarray(ad.as_diff(alpha).values).reshape(-1))
    return ad.mean(a * _blended_norm(offsets, w_bent))


def divergence_loss(occupancy, divergence) -> DiffArray:
    """Mean of o_j * div(b)^2 with the occupancy treated as a constant."""
    o = ad.constant(np.asarray(ad.as_diff(occupancy).values).reshape(-1))
    div = ad.as_diff(divergence)
    return ad.mean(o * div * div)


def total_loss(parts: dict, weights: LossWeights) -> DiffArray:
    total = parts["data"]
    if "offsets" in parts:
        total = total + parts["offsets"] * weights.offsets
    if "divergence" in parts:
        total = total + parts["divergence"] * weights.divergence
    return total


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params) -> "OptimizerState":
        return cls([np.zeros_like(p.values) for p in params], [np.zeros_like(p.values) for p in params])


def adam_step(state: OptimizerState, params, grads, lr: float) -> None:
    """Bias-corrected ADAM update, in place on the parameter arrays."""
    if len(grads) != len(params):
        raise ValueError("one gradient per parameter required")
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter of shape {p.shape} at step {state.step + 1}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        g = g.astype(p.dtype, copy=False)
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        mhat = state.m[i] / c1
        vhat = state.v[i] / c2
        p.values -= (lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.dtype)


# ---------------------------------------------------------------- objective


@dataclass
class TrainConfig:
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    weights: LossWeights = field(default_factory=LossWeights)
    n_coarse: int = 64
    n_fine: int = 64
    use_offsets_loss: bool = True
    use_divergence_loss: bool = True
    naive_offsets: bool = False
    exponent_at_straight: bool = False
    freeze_bending: bool = False
    seed: int = 0

    def render_options(self, jitter: bool = True) -> RenderOptions:
        return RenderOptions(n_coarse=self.n_coarse, n_fine=self.n_fine, jitter=jitter)


@dataclass
class RayBatch:
    rays: RayBundle
    colors: np.ndarray
    times: np.ndarray
    near: np.ndarray
    far: np.ndarray


def compute_losses(
    model: SceneModel,
    batch: RayBatch,
    weights: LossWeights,
    cfg: TrainConfig,
    rng: np.random.Generator | None,
    noise: np.ndarray | None = None,
    fine_depths: np.ndarray | None = None,
    latent_table: DiffArray | None = None,
    alpha: np.ndarray | None = None,
    occupancy: np.ndarray | None = None,
) -> tuple[dict, RayResult]:
    """Render a ray batch and evaluate every active loss term.

    Regularizers use the coarse samples only.  ``noise`` replays Hutchinson
    draws and ``fine_depths`` replays importance-sample placement, which the
    gradient check needs for a deterministic objective.  ``alpha`` and
    ``occupancy`` likewise replay the regularizer weights, which backward
    treats as constants; finite differences only agree with backward when
    they are held fixed too.
    """
    table = model.latents.codes if latent_table is None else latent_table
    ray_latents = ad.take_rows(table, batch.times)
    opts = cfg.render_options(jitter=rng is not None)
    result = render_rays(model, batch.rays, ray_latents, batch.near, batch.far, opts, rng, fine_depths=fine_depths)
    fine_color = result.fine.render.color if result.fine is not None else None
    parts = {"data": data_loss(result.coarse.render.color, fine_color, batch.colors)}
    if model.bending is None:
        return parts, result
    coarse = result.coarse
    bent: BentSampleSet = coarse.bent
    n_rays, n_samples = coarse.samples.depths.shape
    if cfg.use_offsets_loss:
        if cfg.exponent_at_straight or model.rigidity is None:
            w_exp = bent.rigidity
        else:
            w_exp = eval_rigidity(model, bent.bent)
        a = coarse.render.weights if alpha is None else alpha
        if cfg.naive_offsets:
            parts["offsets"] = naive_offsets_loss(a, bent.offsets, w_exp)
        else:
            parts["offsets"] = offsets_loss(a, bent.raw_offsets, w_exp, bent.rigidity, weights.rigidity)
    if cfg.use_divergence_loss:
        rows = np.repeat(np.asarray(batch.times), n_samples)
        fld = offset_field(model, ad.take_rows(table, rows))
        if noise is None:
            noise = hutchinson_noise(rng, n_rays * n_samples, 1, model.dtype)
        div = divergence_hutchinson(fld, bent.straight, noise=noise)
        occ = coarse.render.occupancy if occupancy is None else occupancy
        parts["divergence"] = divergence_loss(occ, div)
    return parts, result


# ---------------------------------------------------------------- training loop


def _ray_pool(dataset: Dataset, indices) -> dict:
    origins, dirs, colors, times, near, far, pixels = [], [], [], [], [], [], []
    for i in indices:
        rec = dataset.records[i]
        rays = generate_rays(rec.camera)
        origins.append(rays.origins)
        dirs.append(rays.directions)
        pixels.append(rays.pixels)
        colors.append(rec.image.reshape(-1, 3))
        times.append(np.full(len(rays), rec.time))
        near.append(np.full(len(rays), rec.camera.near))
        far.append(np.full(len(rays), rec.camera.far))
    return {
        "origins": np.concatenate(origins),
        "directions": np.concatenate(dirs),
        "pixels": np.concatenate(pixels),
        "colors": np.concatenate(colors),
        "times": np.concatenate(times).astype(np.int64),
        "near": np.concatenate(near),
        "far": np.concatenate(far),
    }


def _batch(pool: dict, idx: np.ndarray) -> RayBatch:
    rays = RayBundle(pool["origins"][idx], pool["directions"][idx], pool["pixels"][idx])
    return RayBatch(rays, pool["colors"][idx], pool["times"][idx], pool["near"][idx], pool["far"][idx])


class Trainer:
    """Owns a model, its optimizer state and the ray pool of one dataset."""

    def __init__(self, model: SceneModel, dataset: Dataset, cfg: TrainConfig, iteration: int = 0,
                 optimizer: OptimizerState | None = None, rng: np.random.Generator | None = None):
        self.model = model
        self.dataset = dataset
        self.cfg = cfg
        self.iteration = iteration
        self.params = model.parameters()
        self.optimizer = optimizer or OptimizerState.for_params(self.params)
        self.rng = rng or np.random.default_rng(cfg.seed)
        self.pool = _ray_pool(dataset, dataset.indices("train"))
        model.latents.is_test = dataset.test_times()[: len(model.latents)]
        frozen = set()
        if cfg.freeze_bending:
            for name in ("bending", "rigidity"):
                frozen.update(p.id for p in model.sections().get(name, []))
        self.frozen = frozen

    def sample_batch(self) -> RayBatch:
        n = len(self.pool["times"])
        idx = self.rng.integers(0, n, size=self.cfg.schedule.batch_size)
        return _batch(self.pool, idx)

    def step(self) -> dict:
        lr, weights = schedule_at(self.iteration, self.cfg.schedule, self.cfg.weights)
        batch = self.sample_batch()
        noise = None
        if self.model.bending is not None and self.cfg.use_divergence_loss:
            # own stream per iteration: batches and jitter stay identical with or without the regularizer
            noise_rng = np.random.default_rng((self.cfg.seed, NOISE_STREAM, self.iteration))
            noise = hutchinson_noise(noise_rng, len(batch.times) * self.cfg.n_coarse, 1, self.model.dtype)
        parts, _ = compute_losses(self.model, batch, weights, self.cfg, self.rng, noise=noise)
        total = total_loss(parts, weights)
        if not np.isfinite(total.item()):
            raise NumericalError(f"non-finite loss at iteration {self.iteration}")
        try:
            gmap = ad.backward(total)
        except ad.NonFiniteGradientError as exc:
            raise NumericalError(f"iteration {self.iteration}: {exc}") from exc
        grads = [np.zeros_like(p.values) if p.id in self.frozen else gmap[p] for p in self.params]
        adam_step(self.optimizer, self.params, grads, lr)
        report = {"iteration": self.iteration, "lr": lr, "w_rigidity": weights.rigidity,
                  "w_offsets": weights.offsets, "w_divergence": weights.divergence}
        for name in ("data", "offsets", "divergence"):
            report[name] = parts[name].item() if name in parts else 0.0
        report["total"] = total.item()
        self.iteration += 1
        return report

    def train(self, iterations: int, log_every: int = 0, callback=None) -> list[dict]:
        reports = []
        for _ in range(iterations):
            rep = self.step()
            reports.append(rep)
            if callback is not None:
                callback(rep)
            if log_every and rep["iteration"] % log_every == 0:
                log.info("it %d lr %.2e data %.5f total %.5f", rep["iteration"], rep["lr"], rep["data"], rep["total"])
        return reports


def train_step(trainer: Trainer) -> dict:
    return trainer.step()


CSV_FIELDS = ("iteration", "lr", "w_rigidity", "w_offsets", "w_divergence", "data", "offsets", "divergence", "total")


def csv_line(report: dict) -> str:
    return ",".join(f"{report[k]:.9g}" if k != "iteration" else str(report[k]) for k in CSV_FIELDS)


def fit_test_latents(model: SceneModel, dataset: Dataset, iterations: int, cfg: TrainConfig,
                     lr: float = 1e-3, seed: int = 0) -> list[float]:
    """Optimize only the latent codes of test time steps against test images.

    Network parameters and training latents are untouched.  Returns the data
    loss per iteration.
    """
    test_idx = dataset.indices("test")
    if not test_idx or iterations <= 0:
        return []
    pool = _ray_pool(dataset, test_idx)
    rng = np.random.default_rng(seed)
    is_test = dataset.test_times()[: len(model.latents)]
    model.latents.is_test = is_test
    codes = model.latents.codes
    state = OptimizerState.for_params([codes])
    _, weights = schedule_at(cfg.schedule.total_iterations, cfg.schedule, cfg.weights)
    history = []
    n = len(pool["times"])
    for _ in range(iterations):
        idx = rng.integers(0, n, size=min(cfg.schedule.batch_size, n))
        parts, _ = compute_losses(model, _batch(pool, idx), weights, cfg, rng)
        total = total_loss(parts, weights)
        g = ad.backward(total)[codes]
        g = g * is_test[:, None]
        adam_step(state, [codes], [g], lr)
        history.append(parts["data"].item())
    return history
