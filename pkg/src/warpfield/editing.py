"""Render-time edits of a trained scene and the rigidity/correspondence views.

Every function here only changes how the model is rendered; parameters are
never touched.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .deformation import bend_points
from .render import Camera, RenderOptions, all_pixels, generate_rays, render_image, stratified_sample, make_samples

EMPTY_RAY_WEIGHT = 0.1
GRID_CELLS = 100


@dataclass
class EditOptions:
    exaggeration: float = 1.0
    remove_threshold: float | None = None  # tau; samples with w > tau are removed
    stabilize: float | None = None  # r_min; w < r_min is forced to 0
    time_weight: float | None = None  # t for latent interpolation

    def __post_init__(self):
        for name in ("remove_threshold", "stabilize", "time_weight"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    def apply(self, options: RenderOptions | None = None) -> RenderOptions:
        opts = options or RenderOptions()
        return replace(opts, exaggeration=float(self.exaggeration), remove_foreground=self.remove_threshold,
                       stabilize=self.stabilize)


def exaggerate_motion(model, latent, camera: Camera, m: float, options: RenderOptions | None = None) -> np.ndarray:
    """Render with every offset scaled by ``m`` (0 gives the canonical volume)."""
    return render_image(model, latent, camera, EditOptions(exaggeration=m).apply(options))


def remove_foreground(model, latent, camera: Camera, tau: float, options: RenderOptions | None = None) -> np.ndarray:
    """Render with samples whose straight-point rigidity exceeds ``tau`` made transparent."""
    return render_image(model, latent, camera, EditOptions(remove_threshold=tau).apply(options))


def force_background_stable(model, latent, camera: Camera, r_min: float,
                            options: RenderOptions | None = None) -> np.ndarray:
    """Render with rigidity values below ``r_min`` snapped to 0 (no deformation)."""
    return render_image(model, latent, camera, EditOptions(stabilize=r_min).apply(options))


def interpolate_time(latent_a, latent_b, t: float) -> np.ndarray:
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"interpolation weight must lie in [0, 1], got {t}")
    a = np.asarray(latent_a)
    b = np.asarray(latent_b)
    return (1.0 - t) * a + t * b


def median_sample_index(weights: np.ndarray) -> np.ndarray:
    """Per ray, the first sample at which accumulated weight reaches half the ray's total."""
    acc = np.cumsum(weights, axis=-1)
    return np.argmax(acc >= 0.5 * acc[..., -1:], axis=-1)


def visualize_rigidity(model, latent, camera: Camera, options: RenderOptions | None = None):
    """Per-pixel rigidity in [0, 1] read at each ray's median sample.

    The reported value is ``1 - w``: 1 for rigid (static) content and 0 for
    freely moving content.  Rays whose total weight is below 0.1 see only
    empty space and report 1.  Returns the (H, W) image and a dict with the
    raw ``w`` at the median sample and the empty-ray mask.
    """
    _, diag = render_image(model, latent, camera, options, diagnostics=True)
    weights = diag["weights"]
    idx = median_sample_index(weights)
    rows = np.arange(len(idx))
    w = diag["rigidity"][rows, idx].astype(np.float64)
    empty = weights.sum(axis=-1) < EMPTY_RAY_WEIGHT
    value = np.where(empty, 1.0, 1.0 - w)
    shape = (camera.height, camera.width)
    return value.reshape(shape), {"w": w.reshape(shape), "empty": empty.reshape(shape)}


@dataclass
class CanonicalBox:
    lower: np.ndarray
    upper: np.ndarray

    def to_dict(self) -> dict:
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "CanonicalBox":
        return cls(np.asarray(d["lower"], dtype=np.float64), np.asarray(d["upper"], dtype=np.float64))


def canonical_box(model, dataset, n_samples: int = 64, pixel_stride: int = 4, margin: float = 0.05) -> CanonicalBox:
    """Axis-aligned box around the bent training samples, grown by ``margin`` per side.

    Samples sit at coarse bin centers along rays through every
    ``pixel_stride``-th pixel plus the image border.
    """
    lo = np.full(3, np.inf)
    hi = np.full(3, -np.inf)
    for i in dataset.indices("train"):
        rec = dataset.records[i]
        cam = rec.camera
        pix = all_pixels(cam)
        u, v = pix[:, 0], pix[:, 1]
        keep = ((u % pixel_stride == 0) & (v % pixel_stride == 0)) | (u == 0) | (v == 0)
        keep |= (u == cam.width - 1) | (v == cam.height - 1)
        rays = generate_rays(cam, pix[keep])
        depths = stratified_sample(cam.near, cam.far, n_samples, None, len(rays))
        pts = make_samples(rays, depths, cam.far, "box").points.reshape(-1, 3)
        latent = model.latents.codes.values[rec.time]
        with ad.no_grad():
            bent = bend_points(model, pts, latent).bent.values
        lo = np.minimum(lo, bent.min(axis=0))
        hi = np.maximum(hi, bent.max(axis=0))
    if not np.all(np.isfinite(lo)):
        raise ValueError("dataset has no training images")
    grow = margin * (hi - lo)
    return CanonicalBox(lo - grow, hi + grow)


def correspondence_colors(points: np.ndarray, box: CanonicalBox, cells: int = GRID_CELLS):
    """Quantize canonical points into a ``cells``^3 grid colored by cell coordinates.

    Points outside the box clamp to its faces and are flagged.
    """
    unit = (np.asarray(points, dtype=np.float64) - box.lower) / (box.upper - box.lower)
    outside = np.any((unit < 0.0) | (unit > 1.0), axis=-1)
    cell = np.clip(np.floor(np.clip(unit, 0.0, 1.0) * cells), 0, cells - 1)
    return (cell + 0.5) / cells, outside


def visualize_correspondences(model, latent, camera: Camera, box: CanonicalBox,
                              options: RenderOptions | None = None):
    """Color each pixel by the canonical position of its median sample.

    Empty rays (total weight < 0.1) are black.  Returns the (H, W, 3) image
    and a dict with the canonical positions, clamp flags and empty mask.
    """
    _, diag = render_image(model, latent, camera, options, diagnostics=True)
    weights = diag["weights"]
    idx = median_sample_index(weights)
    pos = diag["bent"][np.arange(len(idx)), idx].astype(np.float64)
    colors, clamped = correspondence_colors(pos, box)
    empty = weights.sum(axis=-1) < EMPTY_RAY_WEIGHT
    colors[empty] = 0.0
    h, w = camera.height, camera.width
    return colors.reshape(h, w, 3), {
        "canonical": pos.reshape(h, w, 3),
        "clamped": (clamped & ~empty).reshape(h, w),
        "empty": empty.reshape(h, w),
    }
