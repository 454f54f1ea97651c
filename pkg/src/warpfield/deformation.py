"""Ray bending, divergence of the offset field, and bent-ray view directions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import DiffArray
from .fields import SceneModel, eval_bending, eval_rigidity


@dataclass
class BentSampleSet:
    straight: np.ndarray  # (N, 3)
    raw_offsets: DiffArray  # b'
    rigidity: DiffArray  # w at the straight points, after any stabilization override
    offsets: DiffArray  # b = w * b'
    bent: DiffArray  # straight + m * b
    divergence: DiffArray | None = None


def _latent_rows(latent, n: int) -> DiffArray:
    latent = ad.as_diff(latent)
    if latent.ndim == 1:
        return ad.broadcast_to(latent, (n, latent.shape[0]))
    if latent.shape[0] != n:
        raise ValueError(f"need one latent per point: {latent.shape[0]} != {n}")
    return latent


def _stabilize(w: DiffArray, r_min: float | None) -> DiffArray:
    if not r_min:
        return w
    keep = (w.values >= r_min).astype(w.dtype)
    return w * keep


def offset_field(model: SceneModel, latent, r_min: float | None = None) -> Callable[[DiffArray], DiffArray]:
    """The gated offset field x -> w(x) * b'(x, l) as a recorded function of x."""

    def b(x: DiffArray) -> DiffArray:
        x = ad.as_diff(x)
        rows = _latent_rows(latent, x.shape[0])
        raw = eval_bending(model, x, rows)
        if model.rigidity is None:
            return raw
        w = _stabilize(eval_rigidity(model, x), r_min)
        return raw * ad.reshape(w, (x.shape[0], 1))

    return b


def bend_points(
    model: SceneModel,
    points,
    latent,
    exaggeration: float = 1.0,
    r_min: float | None = None,
) -> BentSampleSet:
    """Bend straight points x to x + m * w(x) * b'(x, l).

    ``latent`` is one code (D,) shared by all points or one row per point.
    ``r_min`` zeroes rigidity values below it (forced background stabilization).
    """
    x = np.asarray(points, dtype=model.dtype)
    n = x.shape[0]
    xd = ad.constant(x)
    if model.bending is None:
        zeros = ad.constant(np.zeros_like(x))
        return BentSampleSet(x, zeros, ad.constant(np.zeros(n, dtype=x.dtype)), zeros, xd)
    raw = eval_bending(model, xd, _latent_rows(latent, n))
    w = _stabilize(eval_rigidity(model, xd), r_min)
    offsets = raw * ad.reshape(w, (n, 1)) if model.rigidity is not None else raw
    if exaggeration == 1.0:
        bent = xd + offsets
    else:
        bent = xd + offsets * float(exaggeration)
    return BentSampleSet(x, raw, w, offsets, bent)


def hutchinson_noise(rng: np.random.Generator, n: int, samples: int = 1, dtype=np.float64) -> np.ndarray:
    return rng.standard_normal((samples, n, 3)).astype(dtype)


def divergence_hutchinson(
    field: Callable[[DiffArray], DiffArray],
    points,
    rng: np.random.Generator | None = None,
    samples: int = 1,
    noise: np.ndarray | None = None,
) -> DiffArray:
    """Per-point mean over ``samples`` draws of e^T J e with e ~ N(0, I).

    The estimate is recorded, so it stays differentiable w.r.t. the field's
    parameters.  Pass ``noise`` of shape (samples, N, 3) to replay draws.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    x = np.asarray(points)
    n = x.shape[0]
    if noise is None:
        if rng is None:
            raise ValueError("need an rng or explicit noise")
        noise = hutchinson_noise(rng, n, samples, x.dtype)
    noise = np.asarray(noise, dtype=x.dtype)
    samples = noise.shape[0]
    xs = np.broadcast_to(x, (samples, n, 3)).reshape(-1, 3)
    e = noise.reshape(-1, 3)
    je = ad.jvp(field, xs, e)
    quad = ad.sum(je * e, axis=-1)
    if samples == 1:
        return quad
    return ad.mean(ad.reshape(quad, (samples, n)), axis=0)


def divergence_exact(field: Callable[[DiffArray], DiffArray], points) -> np.ndarray:
    """Trace of the 3x3 Jacobian via three basis-direction jvps (test oracle)."""
    x = np.asarray(points)
    total = np.zeros(x.shape[0], dtype=x.dtype)
    with ad.no_grad():
        for k in range(3):
            e = np.zeros_like(x)
            e[:, k] = 1.0
            total += ad.jvp(field, x, e).values[:, k]
    return total


def _normalize(v: np.ndarray, fallback: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    bad = norm[..., 0] <= 1e-12
    safe = np.where(norm > 1e-12, norm, 1.0)
    out = v / safe
    if bad.any():
        fb = fallback / np.linalg.norm(fallback, axis=-1, keepdims=True)
        out = np.where(bad[..., None], fb, out)
    return out, bad


def bent_view_directions(
    bent: np.ndarray,
    mode: str,
    straight_direction: np.ndarray,
    field: Callable[[DiffArray], DiffArray] | None = None,
    straight: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Unit directions of the bent rays at each sample.

    ``bent``/``straight`` are (R, S, 3), ``straight_direction`` is (R, 3).
    ``approximate`` differences consecutive bent samples; ``exact`` pushes
    the straight direction through the Jacobian of x -> x + b(x).  Returns
    the directions and a flag array marking zero-length fallbacks.
    """
    bent = np.asarray(bent)
    d = np.broadcast_to(np.asarray(straight_direction)[:, None, :], bent.shape)
    if mode == "approximate":
        if bent.shape[1] < 2:
            raise ValueError("approximate view directions need >= 2 samples per ray")
        diff = np.empty_like(bent)
        diff[:, 1:] = bent[:, 1:] - bent[:, :-1]
        diff[:, 0] = diff[:, 1]
        return _normalize(diff, d)
    if mode == "exact":
        if field is None or straight is None:
            raise ValueError("exact view directions need the offset field and straight points")
        flat_x = np.asarray(straight).reshape(-1, 3)
        flat_d = np.ascontiguousarray(d).reshape(-1, 3)
        with ad.no_grad():
            jd = ad.jvp(field, flat_x, flat_d).values
        return _normalize((flat_d + jd).reshape(bent.shape), d)
    raise ValueError(f"unknown view-direction mode {mode!r}")
