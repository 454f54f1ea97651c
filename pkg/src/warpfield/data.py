"""Synthetic dynamic scenes with an analytic oracle, dataset I/O and splitting."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .render import Camera, generate_rays, make_samples, render_field, stratified_sample
from .imageio import read_png, write_png


@dataclass
class Blob:
    center: tuple[float, float, float]
    radius: float
    density: float
    color: tuple[float, float, float]
    # optional stripe texture: color += amp * sin(freq * <x, axis>)
    texture_amp: float = 0.0
    texture_freq: float = 0.0
    texture_axis: tuple[float, float, float] = (1.0, 0.0, 0.0)


@dataclass
class MovingBlob(Blob):
    # per-frame translation: offset(t) = amplitude * sin(2 pi t / period + phase)
    amplitude: tuple[float, float, float] = (0.0, 0.0, 0.0)
    period: float = 24.0
    phase: float = 0.0

    def center_at(self, frame: int) -> np.ndarray:
        s = np.sin(2 * np.pi * frame / self.period + self.phase)
        return np.asarray(self.center) + s * np.asarray(self.amplitude)


@dataclass
class SyntheticSceneSpec:
    background: list[Blob]
    foreground: list[MovingBlob]
    frames: int = 24
    width: int = 64
    height: int = 64
    focal: float = 80.0
    radius: float = 4.0
    arc_degrees: float = 60.0
    elevation_degrees: float = 10.0
    novel_elevation_offset: float = 5.0  # novel views sit this far above the training arc
    near: float = 2.0
    far: float = 6.0
    samples_per_ray: int = 256
    novel_views: int = 4
    mask_threshold: float = 0.01
    multi_view: int = 1  # cameras per time step
    seed: int = 0

    @classmethod
    def toy(cls, **overrides) -> "SyntheticSceneSpec":
        """One moving blob in front of three static, textured ones."""
        background = [
            Blob((0.0, 0.0, -0.9), 0.75, 14.0, (0.25, 0.45, 0.8), 0.2, 3.0, (1.0, 0.0, 0.0)),
            Blob((-0.75, 0.35, 0.0), 0.35, 20.0, (0.85, 0.7, 0.2), 0.12, 4.0, (0.0, 1.0, 0.0)),
            Blob((0.8, -0.3, 0.1), 0.35, 20.0, (0.3, 0.75, 0.35), 0.12, 4.0, (1.0, 1.0, 0.0)),
        ]
        foreground = [
            MovingBlob((0.0, -0.05, 0.45), 0.28, 30.0, (0.9, 0.2, 0.2), amplitude=(0.5, 0.0, 0.0), period=8.0),
        ]
        spec = cls(background, foreground)
        for k, v in overrides.items():
            setattr(spec, k, v)
        return spec

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSceneSpec":
        d = dict(d)
        d["background"] = [Blob(**b) for b in d.get("background", [])]
        d["foreground"] = [MovingBlob(**b) for b in d.get("foreground", [])]
        return cls(**d)


def blob_field(blobs: list[Blob], centers: list[np.ndarray]):
    """Analytic field: summed truncated Gaussians, density-weighted colors."""

    def field_fn(points: np.ndarray):
        points = np.asarray(points, dtype=np.float64)
        density = np.zeros(len(points))
        color_acc = np.zeros((len(points), 3))
        for blob, c in zip(blobs, centers):
            r2 = np.sum((points - c) ** 2, axis=-1)
            g = blob.density * np.exp(-r2 / (2 * blob.radius**2))
            g[r2 > (3 * blob.radius) ** 2] = 0.0
            col = np.broadcast_to(np.asarray(blob.color, dtype=np.float64), points.shape)
            if blob.texture_amp:
                axis = np.asarray(blob.texture_axis, dtype=np.float64)
                axis = axis / np.linalg.norm(axis)
                stripe = np.sin(blob.texture_freq * ((points - c) @ axis))
                col = np.clip(col + blob.texture_amp * stripe[:, None], 0.0, 1.0)
            density += g
            color_acc += g[:, None] * col
        color = np.where(density[:, None] > 0, color_acc / np.maximum(density, 1e-300)[:, None], 0.0)
        return color, density

    return field_fn


@dataclass
class Record:
    image: np.ndarray
    camera: Camera
    time: int
    split: str = "train"


@dataclass
class Dataset:
    records: list[Record]
    oracle: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def num_times(self) -> int:
        return max(r.time for r in self.records) + 1

    def indices(self, split: str) -> list[int]:
        return [i for i, r in enumerate(self.records) if r.split == split]

    def validate(self) -> None:
        times = sorted({r.time for r in self.records})
        if times != list(range(len(times))):
            raise ValueError("time-step ids must be contiguous from 0")

    def test_times(self) -> np.ndarray:
        """Per time step, True when its images are all test images."""
        is_test = np.ones(self.num_times, dtype=bool)
        for r in self.records:
            if r.split == "train":
                is_test[r.time] = False
        return is_test


def _arc_camera(spec: SyntheticSceneSpec, azimuth_deg: float, elevation_deg: float) -> Camera:
    az, el = np.radians(azimuth_deg), np.radians(elevation_deg)
    eye = spec.radius * np.array([np.sin(az) * np.cos(el), -np.sin(el), np.cos(az) * np.cos(el)])
    return Camera.look_at(eye, (0, 0, 0), (0, -1, 0), spec.focal, spec.width, spec.height, spec.near, spec.far)


def frame_centers(spec: SyntheticSceneSpec, frame: int, with_foreground: bool = True):
    blobs = list(spec.background)
    centers = [np.asarray(b.center, dtype=np.float64) for b in spec.background]
    if with_foreground:
        blobs += spec.foreground
        centers += [b.center_at(frame) for b in spec.foreground]
    return blobs, centers


def render_oracle(spec: SyntheticSceneSpec, frame: int, camera: Camera, with_foreground: bool = True,
                  samples: int | None = None) -> np.ndarray:
    blobs, centers = frame_centers(spec, frame, with_foreground)
    image, _ = render_field(blob_field(blobs, centers), camera, samples or spec.samples_per_ray)
    return image.reshape(camera.height, camera.width, 3)


def render_with_mask(spec: SyntheticSceneSpec, frame: int, camera: Camera,
                     samples: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Oracle image plus the pixels where foreground blobs carry more than
    ``mask_threshold`` of the ray weight."""
    n = samples or spec.samples_per_ray
    blobs, centers = frame_centers(spec, frame)
    full = blob_field(blobs, centers)
    image, out = render_field(full, camera, n)
    image = image.reshape(camera.height, camera.width, 3)
    if not spec.foreground:
        return image, np.zeros((camera.height, camera.width), dtype=bool)
    fg = blob_field(spec.foreground, centers[len(spec.background):])
    rays = generate_rays(camera)
    depths = stratified_sample(camera.near, camera.far, n, None, len(rays))
    pts = make_samples(rays, depths, camera.far, "oracle").points.reshape(-1, 3)
    _, dens_all = full(pts)
    _, dens_fg = fg(pts)
    share = np.where(dens_all > 0, dens_fg / np.maximum(dens_all, 1e-300), 0.0).reshape(len(rays), n)
    fg_weight = np.sum(out.weights.values * share, axis=1)
    return image, (fg_weight > spec.mask_threshold).reshape(camera.height, camera.width)


def foreground_mask(spec: SyntheticSceneSpec, frame: int, camera: Camera, samples: int | None = None) -> np.ndarray:
    return render_with_mask(spec, frame, camera, samples)[1]


def training_cameras(spec: SyntheticSceneSpec) -> list[tuple[int, Camera]]:
    out = []
    for f in range(spec.frames):
        for k in range(spec.multi_view):
            frac = f / max(spec.frames - 1, 1)
            az = -spec.arc_degrees / 2 + spec.arc_degrees * frac + 360.0 * k / spec.multi_view
            out.append((f, _arc_camera(spec, az, spec.elevation_degrees)))
    return out


def novel_cameras(spec: SyntheticSceneSpec) -> list[Camera]:
    """Views off the training arc: raised elevation, spread over the arc."""
    cams = []
    for k in range(spec.novel_views):
        frac = (k + 0.5) / max(spec.novel_views, 1)
        az = -spec.arc_degrees / 2 + spec.arc_degrees * frac
        cams.append(_arc_camera(spec, az, spec.elevation_degrees + spec.novel_elevation_offset))
    return cams


def _check_inside(spec: SyntheticSceneSpec) -> None:
    for f in range(spec.frames):
        _, centers = frame_centers(spec, f)
        for c in centers:
            if np.linalg.norm(c) > spec.radius - spec.near:
                raise ValueError(f"blob at {c} leaves the camera frustum at frame {f}")
    for b in spec.background + spec.foreground:
        if b.density < 0:
            raise ValueError("blob densities must be nonnegative")


def generate_synthetic(spec: SyntheticSceneSpec) -> Dataset:
    """Render every frame with the oracle and attach held-out ground truth.

    ``oracle`` holds: ``novel`` list of (time, camera, image), ``background``
    per-record foreground-free renders, ``masks`` per-record foreground masks,
    and ``spec`` itself.
    """
    _check_inside(spec)
    records, backgrounds, masks = [], [], []
    for f, cam in training_cameras(spec):
        image, mask = render_with_mask(spec, f, cam)
        records.append(Record(image, cam, f))
        backgrounds.append(render_oracle(spec, f, cam, with_foreground=False) if spec.foreground else image)
        masks.append(mask)
    novel = []
    for cam in novel_cameras(spec):
        for f in range(spec.frames):
            novel.append((f, cam, render_oracle(spec, f, cam)))
    data = Dataset(records, {"novel": novel, "background": backgrounds, "masks": masks, "spec": spec})
    return split_train_test(data, multi_view=spec.multi_view)


def split_mask(count: int, block: int = 16, train_per_block: int = 12) -> np.ndarray:
    """True for training positions: the first 12 of every block of 16."""
    return (np.arange(count) % block) < train_per_block


def split_train_test(dataset: Dataset, multi_view: int = 1) -> Dataset:
    """Tag records train/test by time step using the blocks-of-16 rule.

    In multi-view mode the rule runs over time steps so that all views of one
    time step land in the same split.
    """
    if multi_view > 1:
        train = split_mask(dataset.num_times)
        for r in dataset.records:
            r.split = "train" if train[r.time] else "test"
    else:
        order = sorted(range(len(dataset.records)), key=lambda i: dataset.records[i].time)
        train = split_mask(len(order))
        for pos, i in enumerate(order):
            dataset.records[i].split = "train" if train[pos] else "test"
    return dataset


# ---------------------------------------------------------------- directory format


def save_dataset(dataset: Dataset, path: str) -> None:
    os.makedirs(os.path.join(path, "images"), exist_ok=True)
    cams = []
    for i, r in enumerate(dataset.records):
        write_png(os.path.join(path, "images", f"{i:05d}.png"), r.image)
        entry = r.camera.to_dict()
        entry["time"] = r.time
        entry["image"] = f"images/{i:05d}.png"
        cams.append(entry)
    with open(os.path.join(path, "cameras.json"), "w") as fh:
        json.dump(cams, fh, indent=1)
    with open(os.path.join(path, "split.json"), "w") as fh:
        json.dump({"train": dataset.indices("train"), "test": dataset.indices("test")}, fh)
    oracle = dataset.oracle
    if not oracle:
        return
    odir = os.path.join(path, "oracle")
    os.makedirs(odir, exist_ok=True)
    extras = {}
    if "spec" in oracle:
        extras["spec"] = oracle["spec"].to_dict()
    if "background" in oracle:
        np.save(os.path.join(odir, "background.npy"), np.stack(oracle["background"]))
    if "masks" in oracle:
        np.save(os.path.join(odir, "masks.npy"), np.stack(oracle["masks"]))
    if "novel" in oracle:
        np.save(os.path.join(odir, "novel.npy"), np.stack([img for _, _, img in oracle["novel"]]))
        extras["novel"] = [{"time": t, **cam.to_dict()} for t, cam, _ in oracle["novel"]]
    with open(os.path.join(odir, "oracle.json"), "w") as fh:
        json.dump(extras, fh)


def load_dataset(path: str) -> Dataset:
    cams_path = os.path.join(path, "cameras.json")
    if not os.path.exists(cams_path):
        raise FileNotFoundError(f"no cameras.json under {path}")
    with open(cams_path) as fh:
        cams = json.load(fh)
    records = []
    for i, entry in enumerate(cams):
        img = read_png(os.path.join(path, entry.get("image", f"images/{i:05d}.png")))
        records.append(Record(img, Camera.from_dict(entry), int(entry["time"])))
    split_path = os.path.join(path, "split.json")
    data = Dataset(records)
    if os.path.exists(split_path):
        with open(split_path) as fh:
            split = json.load(fh)
        for i in split.get("test", []):
            records[i].split = "test"
    else:
        split_train_test(data)
    odir = os.path.join(path, "oracle")
    if os.path.isdir(odir):
        with open(os.path.join(odir, "oracle.json")) as fh:
            extras = json.load(fh)
        if "spec" in extras:
            data.oracle["spec"] = SyntheticSceneSpec.from_dict(extras["spec"])
        for name in ("background", "masks"):
            f = os.path.join(odir, f"{name}.npy")
            if os.path.exists(f):
                data.oracle[name] = list(np.load(f))
        if "novel" in extras:
            imgs = np.load(os.path.join(odir, "novel.npy"))
            data.oracle["novel"] = [
                (e["time"], Camera.from_dict(e), img) for e, img in zip(extras["novel"], imgs)
            ]
    data.validate()
    return data
