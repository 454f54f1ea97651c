"""Pinhole cameras, ray sampling, volume-rendering quadrature, image rendering.

Conventions: ``R``/``t`` map camera to world (``x_world = R @ x_cam + t``),
the camera looks down +z, and pixel (u, v) is column u, row v.  Ray
directions are ``R @ K^-1 [u + 0.5, v + 0.5, 1]`` and are not normalized, so a
ray depth j is the camera-space z coordinate and the near/far planes are
true frustum planes.  Interval lengths are metric (depth step times |d|).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DiffArray
from .deformation import BentSampleSet, bend_points, bent_view_directions, offset_field
from .fields import SceneModel, eval_rigidity

DEFAULT_CHUNK = 1024


@dataclass
class Camera:
    R: np.ndarray
    t: np.ndarray
    K: np.ndarray
    width: int
    height: int
    near: float
    far: float

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        self.K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        self.width, self.height = int(self.width), int(self.height)
        if not np.allclose(self.R.T @ self.R, np.eye(3), atol=1e-6):
            raise ValueError("camera rotation is not orthonormal")
        if not 0 < self.near < self.far:
            raise ValueError(f"need 0 < near < far, got {self.near}, {self.far}")

    @classmethod
    def look_at(cls, eye, target, up, focal, width, height, near, far) -> "Camera":
        eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
        z = target - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, up)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        K = np.array([[focal, 0, width / 2], [0, focal, height / 2], [0, 0, 1]])
        return cls(np.stack([x, y, z], axis=1), eye, K, width, height, near, far)

    def to_dict(self) -> dict:
        return {
            "rotation": self.R.reshape(-1).tolist(),
            "translation": self.t.tolist(),
            "intrinsics": self.K.reshape(-1).tolist(),
            "width": self.width,
            "height": self.height,
            "near": self.near,
            "far": self.far,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(d["rotation"], d["translation"], d["intrinsics"], d["width"], d["height"], d["near"], d["far"])


@dataclass
class RayBundle:
    origins: np.ndarray
    directions: np.ndarray
    pixels: np.ndarray

    def __len__(self) -> int:
        return len(self.origins)


@dataclass
class SampleSet:
    depths: np.ndarray  # (R, S), ascending
    points: np.ndarray  # (R, S, 3)
    deltas: np.ndarray  # (R, S)
    tag: str = "coarse"


@dataclass
class RenderOutput:
    color: DiffArray  # (R, 3)
    transmittance: DiffArray  # (R, S)
    occupancy: DiffArray  # (R, S)
    weights: DiffArray  # (R, S)
    residual: DiffArray  # (R,)


def all_pixels(camera: Camera) -> np.ndarray:
    v, u = np.mgrid[0 : camera.height, 0 : camera.width]
    return np.stack([u.ravel(), v.ravel()], axis=-1)


def generate_rays(camera: Camera, pixels=None) -> RayBundle:
    pix = all_pixels(camera) if pixels is None else np.asarray(pixels).reshape(-1, 2)
    u, v = pix[:, 0], pix[:, 1]
    if (u < 0).any() or (v < 0).any() or (u >= camera.width).any() or (v >= camera.height).any():
        raise ValueError("pixel outside the image")
    homog = np.stack([u + 0.5, v + 0.5, np.ones(len(pix))], axis=-1)
    cam_dirs = homog @ np.linalg.inv(camera.K).T
    dirs = cam_dirs @ camera.R.T
    origins = np.broadcast_to(camera.t, dirs.shape).copy()
    return RayBundle(origins, dirs, pix)


def stratified_sample(near, far, n: int, rng: np.random.Generator | None = None, n_rays: int = 1) -> np.ndarray:
    """One depth per equal bin of [near, far]; bin centers when ``rng`` is None."""
    if n < 1:
        raise ValueError("need at least one sample")
    near = np.broadcast_to(np.asarray(near, dtype=np.float64), (n_rays,))[:, None]
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), (n_rays,))[:, None]
    if rng is None:
        u = np.broadcast_to((np.arange(n) + 0.5) / n, (n_rays, n))
    else:
        u = (np.arange(n) + rng.random((n_rays, n))) / n
    return near + (far - near) * u


def bin_edges(depths: np.ndarray, near, far) -> np.ndarray:
    """Edges of the bins owned by each coarse sample: midpoints plus near/far."""
    n_rays = depths.shape[0]
    near = np.broadcast_to(np.asarray(near, dtype=np.float64), (n_rays,))[:, None]
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), (n_rays,))[:, None]
    mids = 0.5 * (depths[:, 1:] + depths[:, :-1])
    return np.concatenate([near, mids, far], axis=1)


def importance_sample(weights, depths, n: int, rng=None, near=None, far=None, floor: float = 1e-5) -> np.ndarray:
    """Inverse-transform sample ``n`` depths per ray from coarse weights.

    The density is piecewise constant over the bins owned by the coarse
    samples, proportional to ``weight + floor``.  With ``rng`` None the CDF is
    inverted at stratified positions (k + 0.5) / n.
    """
    w = np.asarray(weights, dtype=np.float64) + floor
    depths = np.asarray(depths, dtype=np.float64)
    if near is None:
        near = depths[:, 0]
    if far is None:
        far = depths[:, -1]
    edges = bin_edges(depths, near, far)
    total = w.sum(axis=1, keepdims=True)
    assert np.all(total > 0), "weights vanished after flooring"
    pdf = w / total
    cdf = np.concatenate([np.zeros((w.shape[0], 1)), np.cumsum(pdf, axis=1)], axis=1)
    cdf[:, -1] = 1.0
    if rng is None:
        u = np.broadcast_to((np.arange(n) + 0.5) / n, (w.shape[0], n))
    else:
        u = rng.random((w.shape[0], n))
    # one flat search: offset each row's CDF by 2 * row so rows never interleave
    rows = np.arange(w.shape[0])[:, None]
    flat = np.searchsorted((cdf + 2.0 * rows).ravel(), (u + 2.0 * rows).ravel(), side="right")
    idx = flat.reshape(u.shape) - 1 - rows * cdf.shape[1]
    idx = np.clip(idx, 0, w.shape[1] - 1)
    c0, c1 = cdf[rows, idx], cdf[rows, idx + 1]
    e0, e1 = edges[rows, idx], edges[rows, idx + 1]
    frac = np.where(c1 > c0, (u - c0) / np.where(c1 > c0, c1 - c0, 1.0), 0.5)
    return e0 + frac * (e1 - e0)


def merge_depths(coarse: np.ndarray, fine: np.ndarray, near, far) -> np.ndarray:
    """Sorted union of coarse and fine depths, nudged to be strictly increasing."""
    merged = np.sort(np.concatenate([coarse, fine], axis=1), axis=1)
    span = np.broadcast_to(np.asarray(far, dtype=np.float64) - np.asarray(near, dtype=np.float64),
                           (merged.shape[0],))
    gap = 1e-7 * span[:, None]
    for j in range(1, merged.shape[1]):
        merged[:, j] = np.maximum(merged[:, j], merged[:, j - 1] + gap[:, 0])
    return merged


def interval_lengths(depths: np.ndarray, far, directions: np.ndarray) -> np.ndarray:
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), (depths.shape[0],))[:, None]
    steps = np.concatenate([depths[:, 1:] - depths[:, :-1], far - depths[:, -1:]], axis=1)
    return steps * np.linalg.norm(directions, axis=-1, keepdims=True)


def make_samples(rays: RayBundle, depths: np.ndarray, far, tag: str) -> SampleSet:
    points = rays.origins[:, None, :] + depths[..., None] * rays.directions[:, None, :]
    return SampleSet(depths, points, interval_lengths(depths, far, rays.directions), tag)


def composite(colors, densities, deltas) -> RenderOutput:
    """Discrete volume rendering.

    o_j = 1 - exp(-sigma_j delta_j), T_j = prod_{k<j} (1 - o_k),
    color = sum_j T_j o_j c_j.  Shapes: colors (R, S, 3), others (R, S).
    """
    colors, densities = ad.as_diff(colors), ad.as_diff(densities)
    deltas = np.asarray(deltas)
    if (densities.values < 0).any():
        raise ValueError("negative density")
    if (deltas <= 0).any():
        raise ValueError("non-positive interval length")
    optical = densities * deltas.astype(densities.dtype)
    occupancy = 1.0 - ad.exp(-optical)
    depth_sum = ad.cumsum(optical, axis=-1)
    # exclusive prefix sum: shift right by one
    zeros = ad.constant(np.zeros(optical.shape[:-1] + (1,), dtype=optical.dtype))
    exclusive = ad.concat([zeros, depth_sum[..., :-1]], axis=-1)
    transmittance = ad.exp(-exclusive)
    weights = transmittance * occupancy
    color = ad.sum(ad.reshape(weights, weights.shape + (1,)) * colors, axis=-2)
    residual = ad.exp(-depth_sum[..., -1])
    return RenderOutput(color, transmittance, occupancy, weights, residual)


@dataclass
class RenderOptions:
    n_coarse: int = 64
    n_fine: int = 64
    jitter: bool = False
    exaggeration: float = 1.0
    remove_foreground: float | None = None  # rigidity threshold tau, strict w > tau removed
    stabilize: float | None = None  # r_min
    view_dependence: str | None = None  # None -> model config
    canonical: bool = False  # render without bending
    chunk: int = DEFAULT_CHUNK


@dataclass
class PassResult:
    samples: SampleSet
    bent: BentSampleSet
    render: RenderOutput
    colors: DiffArray
    densities: DiffArray


@dataclass
class RayResult:
    coarse: PassResult
    fine: PassResult | None
    extras: dict = field(default_factory=dict)

    @property
    def color(self) -> DiffArray:
        return (self.fine or self.coarse).render.color


def _per_sample_latents(latent, n_rays: int, n_samples: int):
    latent = ad.as_diff(latent)
    if latent.ndim == 1:
        return latent
    d = latent.shape[1]
    expanded = ad.broadcast_to(ad.reshape(latent, (n_rays, 1, d)), (n_rays, n_samples, d))
    return ad.reshape(expanded, (n_rays * n_samples, d))


def _run_pass(model, rays, depths, far, latent, which, opts: RenderOptions, view_mode) -> PassResult:
    n_rays, n_samples = depths.shape
    samples = make_samples(rays, depths, far, which)
    flat = samples.points.reshape(-1, 3).astype(model.dtype)
    point_latent = _per_sample_latents(latent, n_rays, n_samples)
    m = 0.0 if opts.canonical else opts.exaggeration
    bent = bend_points(model, flat, point_latent, exaggeration=m, r_min=opts.stabilize)
    directions = None
    if view_mode in ("approximate", "exact") and model.bending is not None and m != 0.0:
        if view_mode == "exact":
            fld = offset_field(model, point_latent, opts.stabilize)

            def scaled(x, fld=fld):
                return fld(x) * m

            dirs, _ = bent_view_directions(
                bent.bent.values.reshape(n_rays, n_samples, 3), "exact", rays.directions, scaled,
                samples.points,
            )
        else:
            dirs, _ = bent_view_directions(bent.bent.values.reshape(n_rays, n_samples, 3), "approximate",
                                           rays.directions)
        directions = dirs.reshape(-1, 3).astype(model.dtype)
    elif view_mode in ("approximate", "exact"):
        d = rays.directions / np.linalg.norm(rays.directions, axis=-1, keepdims=True)
        directions = np.repeat(d, n_samples, axis=0).astype(model.dtype)
    canon = model.canonical(which)
    cond = point_latent if canon.cond_dim else None
    if cond is not None and cond.ndim == 1:
        cond = ad.broadcast_to(cond, (flat.shape[0], cond.shape[0]))
    colors, densities = canon(bent.bent, latent=cond, directions=directions)
    if opts.remove_foreground is not None:
        w_straight = eval_rigidity(model, flat).values if model.rigidity is not None else None
        if w_straight is not None:
            keep = (w_straight <= opts.remove_foreground).astype(densities.dtype)
            densities = densities * keep
    colors = ad.reshape(colors, (n_rays, n_samples, 3))
    densities = ad.reshape(densities, (n_rays, n_samples))
    render = composite(colors, densities, samples.deltas.astype(model.dtype))
    return PassResult(samples, bent, render, colors, densities)


def render_rays(
    model: SceneModel,
    rays: RayBundle,
    latent,
    near,
    far,
    opts: RenderOptions | None = None,
    rng: np.random.Generator | None = None,
    fine_depths: np.ndarray | None = None,
) -> RayResult:
    """Coarse pass, importance sampling on detached coarse weights, fine pass.

    ``latent`` is a single code (D,) or one code per ray (R, D).  The fine
    pass re-bends the merged coarse + fine sample set.  ``fine_depths``
    overrides importance sampling (replayed placement).
    """
    opts = opts or RenderOptions()
    view_mode = opts.view_dependence or model.config.view_dependence
    n_rays = len(rays)
    coarse_depths = stratified_sample(near, far, opts.n_coarse, rng if opts.jitter else None, n_rays)
    coarse = _run_pass(model, rays, coarse_depths, far, latent, "coarse", opts, view_mode)
    if opts.n_fine <= 0:
        return RayResult(coarse, None)
    if fine_depths is None:
        weights = ad.detach(coarse.render.weights).values
        fine_depths = importance_sample(
            weights, coarse_depths, opts.n_fine, rng if opts.jitter else None, near=near, far=far
        )
    merged = merge_depths(coarse_depths, fine_depths, near, far)
    fine = _run_pass(model, rays, merged, far, latent, "fine", opts, view_mode)
    return RayResult(coarse, fine, {"fine_depths": fine_depths})


def render_field(field_fn, camera: Camera, n_samples: int = 256, pixels=None) -> tuple[np.ndarray, RenderOutput]:
    """Render an analytic field ``points (N, 3) -> (colors (N, 3), densities (N,))``.

    Jitter-free stratified depths and the same quadrature as the learned path.
    """
    rays = generate_rays(camera, pixels)
    depths = stratified_sample(camera.near, camera.far, n_samples, None, len(rays))
    samples = make_samples(rays, depths, camera.far, "oracle")
    colors, densities = field_fn(samples.points.reshape(-1, 3))
    with ad.no_grad():
        out = composite(
            np.asarray(colors).reshape(len(rays), n_samples, 3),
            np.asarray(densities).reshape(len(rays), n_samples),
            samples.deltas,
        )
    return out.color.values, out


def render_image(model: SceneModel, latent, camera: Camera, options: RenderOptions | None = None,
                 rng: np.random.Generator | None = None, diagnostics: bool = False):
    """Render a full image (H, W, 3) in [0, 1].

    With ``diagnostics`` also returns a dict holding the coarse image, fine
    weights (H*W, S), straight-point rigidity and bent positions per sample.
    """
    opts = options or RenderOptions()
    rays = generate_rays(camera)
    fine_colors, coarse_colors = [], []
    diag = {"weights": [], "rigidity": [], "bent": [], "depths": []}
    with ad.no_grad():
        for start in range(0, len(rays), opts.chunk):
            sl = slice(start, start + opts.chunk)
            chunk = RayBundle(rays.origins[sl], rays.directions[sl], rays.pixels[sl])
            res = render_rays(model, chunk, latent, camera.near, camera.far, opts, rng)
            fine_colors.append(res.color.values)
            coarse_colors.append(res.coarse.render.color.values)
            if diagnostics:
                final = res.fine or res.coarse
                n, s = final.samples.depths.shape
                diag["weights"].append(final.render.weights.values)
                diag["rigidity"].append(final.bent.rigidity.values.reshape(n, s))
                diag["bent"].append(final.bent.bent.values.reshape(n, s, 3))
                diag["depths"].append(final.samples.depths)
    shape = (camera.height, camera.width, 3)
    image = np.concatenate(fine_colors).reshape(shape)
    if not diagnostics:
        return image
    out = {k: np.concatenate(v) for k, v in diag.items()}
    out["coarse"] = np.concatenate(coarse_colors).reshape(shape)
    return image, out
