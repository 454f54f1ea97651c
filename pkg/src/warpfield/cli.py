"""Command-line entry point: ``warpfield <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
``WARPFIELD_THREADS`` caps the BLAS worker count (0 means one worker).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
from dataclasses import fields

import numpy as np

from . import checkpoint as ckpt
from .config import ConfigError, RunConfig, resolve_config, write_config_file
from .data import Dataset, SyntheticSceneSpec, generate_synthetic, load_dataset, save_dataset
from .editing import (
    CanonicalBox,
    EditOptions,
    canonical_box,
    interpolate_time,
    visualize_correspondences,
    visualize_rigidity,
)
from .fields import init_model
from .imageio import read_png, write_png
from .metrics import SSIM_WINDOW, background_stability, psnr, ssim
from .presets import PRESETS, preset
from .render import Camera, render_image
from .training import CSV_FIELDS, NumericalError, Trainer, csv_line, fit_test_latents

log = logging.getLogger("warpfield")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
CHECKPOINT_NAME = "checkpoint.wf"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------- helpers


def _thread_limit():
    raw = os.environ.get("WARPFIELD_THREADS")
    if raw is None or raw == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"WARPFIELD_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise UsageError("WARPFIELD_THREADS must be >= 0")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(n, 1))


def _prepare_output(path: str, overwrite: bool, allow_existing: bool = False) -> None:
    if not path:
        raise UsageError("--output is required")
    if os.path.exists(path) and os.listdir(path) and not allow_existing:
        if not overwrite:
            raise UsageError(f"output directory {path} is not empty (pass --overwrite to replace it)")
        shutil.rmtree(path)
    os.makedirs(path, exist_ok=True)


def _load_dataset(path: str) -> Dataset:
    if not path:
        raise UsageError("--dataset is required")
    try:
        return load_dataset(path)
    except (FileNotFoundError, ValueError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot load dataset {path}: {exc}") from exc


def _load_checkpoint(path: str) -> ckpt.Checkpoint:
    if not path or not os.path.exists(path):
        raise DataError(f"checkpoint {path!r} not found")
    try:
        return ckpt.load_checkpoint(path)
    except ckpt.CheckpointError as exc:
        raise DataError(str(exc)) from exc


def _run_config(checkpoint: ckpt.Checkpoint) -> RunConfig:
    return RunConfig.from_dict(checkpoint.config) if checkpoint.config else RunConfig()


def per_image_latents(dataset: Dataset) -> Dataset:
    """Give every image its own time step (monocular mode, no latent sharing)."""
    order = sorted(range(len(dataset.records)), key=lambda i: (dataset.records[i].time, i))
    for t, i in enumerate(order):
        dataset.records[i].time = t
    return dataset


def _cameras_and_times(args, dataset: Dataset | None) -> list[tuple[int, Camera]]:
    """(time, camera) pairs from --camera-path or the dataset's records."""
    if getattr(args, "camera_path", None):
        try:
            with open(args.camera_path) as fh:
                entries = json.load(fh)
            return [(int(e.get("time", 0)), Camera.from_dict(e)) for e in entries]
        except (OSError, ValueError, KeyError) as exc:
            raise DataError(f"cannot read camera path {args.camera_path}: {exc}") from exc
    if dataset is None:
        raise UsageError("need --dataset or --camera-path")
    split = getattr(args, "split", "all")
    idx = range(len(dataset.records)) if split == "all" else dataset.indices(split)
    return [(dataset.records[i].time, dataset.records[i].camera) for i in idx]


def _latent(model, time: int) -> np.ndarray:
    if not 0 <= time < len(model.latents):
        raise DataError(f"time step {time} has no latent code (model has {len(model.latents)})")
    return model.latents.codes.values[time]


# ---------------------------------------------------------------- subcommands


def cmd_make_dataset(args) -> int:
    _prepare_output(args.output, args.overwrite)
    if args.spec:
        try:
            with open(args.spec) as fh:
                spec = SyntheticSceneSpec.from_dict(json.load(fh))
        except (OSError, ValueError, TypeError) as exc:
            raise DataError(f"cannot read scene spec {args.spec}: {exc}") from exc
    else:
        spec = SyntheticSceneSpec.toy()
    for name in ("frames", "width", "height", "seed", "novel_views", "multi_view", "samples_per_ray"):
        value = getattr(args, name)
        if value is not None:
            setattr(spec, name, value)
    try:
        dataset = generate_synthetic(spec)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    save_dataset(dataset, args.output)
    print(f"wrote {len(dataset)} images ({len(dataset.indices('train'))} train) to {args.output}")
    return EXIT_OK


def _config_from_args(args) -> RunConfig:
    overrides = {f.name: getattr(args, f.name, None) for f in fields(RunConfig)}
    try:
        base = preset(args.preset)
    except KeyError as exc:
        raise UsageError(str(exc)) from None
    return resolve_config(args.config, overrides, base)


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    ckpt_path = os.path.join(cfg.output or "", CHECKPOINT_NAME)
    resume = args.resume and os.path.exists(ckpt_path)
    _prepare_output(cfg.output, args.overwrite, allow_existing=resume)
    dataset = _load_dataset(cfg.dataset)
    if not cfg.multi_view:
        per_image_latents(dataset)
    if resume:
        state = _load_checkpoint(ckpt_path)
        model, optimizer, start = state.model, state.optimizer, state.iteration
        rng = ckpt.restore_rng(state.rng_state, cfg.seed)
    else:
        model, optimizer, start = init_model(cfg.model_config(dataset.num_times)), None, 0
        rng = None
        write_config_file(cfg, os.path.join(cfg.output, "config.txt"))
    tcfg = cfg.train_config()
    trainer = Trainer(model, dataset, tcfg, iteration=start, optimizer=optimizer, rng=rng)
    loss_path = os.path.join(cfg.output, "loss.csv")
    mode = "a" if resume and os.path.exists(loss_path) else "w"

    def save(extras=None):
        ckpt.save_checkpoint(ckpt_path, model, trainer.optimizer, trainer.iteration, cfg.to_dict(), trainer.rng,
                             extras)

    with open(loss_path, mode) as fh:
        if mode == "w":
            fh.write(",".join(CSV_FIELDS) + "\n")
        while trainer.iteration < cfg.iterations:
            rep = trainer.step()
            fh.write(csv_line(rep) + "\n")
            if cfg.log_every and rep["iteration"] % cfg.log_every == 0:
                log.info("iteration %d data %.6f total %.6f", rep["iteration"], rep["data"], rep["total"])
            if cfg.checkpoint_every and trainer.iteration % cfg.checkpoint_every == 0:
                save()
    extras = {}
    if model.bending is not None:
        extras["canonical_box"] = canonical_box(model, dataset, n_samples=cfg.n_coarse).to_dict()
    save(extras)
    print(f"trained to iteration {trainer.iteration}; checkpoint at {ckpt_path}")
    return EXIT_OK


def _render_modality(model, latent, camera, cfg: RunConfig, modality: str, box):
    if modality == "color":
        return render_image(model, latent, camera, cfg.render_options())
    if modality == "canonical":
        return render_image(model, latent, camera, cfg.render_options(canonical=True))
    if modality == "rigidity":
        return visualize_rigidity(model, latent, camera, cfg.render_options())[0]
    if modality == "correspondence":
        return visualize_correspondences(model, latent, camera, box, cfg.render_options())[0]
    raise UsageError(f"unknown modality {modality!r}")


def _box_for(state: ckpt.Checkpoint, dataset: Dataset | None, cfg: RunConfig):
    if state.extras and "canonical_box" in state.extras:
        return CanonicalBox.from_dict(state.extras["canonical_box"])
    if dataset is None:
        raise UsageError("correspondence rendering needs --dataset when the checkpoint stores no canonical box")
    return canonical_box(state.model, dataset, n_samples=cfg.n_coarse)


def cmd_render(args) -> int:
    state = _load_checkpoint(args.checkpoint)
    cfg = _run_config(state)
    dataset = _load_dataset(args.dataset) if args.dataset else None
    if dataset is not None and not cfg.multi_view:
        per_image_latents(dataset)
    views = _cameras_and_times(args, dataset)
    _prepare_output(args.output, args.overwrite)
    box = _box_for(state, dataset, cfg) if args.modality == "correspondence" else None
    for k, (t, cam) in enumerate(views):
        img = _render_modality(state.model, _latent(state.model, t), cam, cfg, args.modality, box)
        write_png(os.path.join(args.output, f"{k:05d}.png"), img)
    print(f"rendered {len(views)} {args.modality} images to {args.output}")
    return EXIT_OK


def cmd_edit(args) -> int:
    state = _load_checkpoint(args.checkpoint)
    cfg = _run_config(state)
    model = state.model
    dataset = _load_dataset(args.dataset) if args.dataset else None
    if dataset is not None and not cfg.multi_view:
        per_image_latents(dataset)
    views = _cameras_and_times(args, dataset)
    try:
        edit = EditOptions(
            exaggeration=1.0 if args.exaggerate is None else args.exaggerate,
            remove_threshold=args.remove_foreground,
            stabilize=args.stabilize,
            time_weight=None if args.interpolate_time is None else args.interpolate_time[1],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _prepare_output(args.output, args.overwrite)
    opts = edit.apply(cfg.render_options())
    for k, (t, cam) in enumerate(views):
        if args.interpolate_time is not None:
            i = int(args.interpolate_time[0])
            latent = interpolate_time(_latent(model, i), _latent(model, min(i + 1, len(model.latents) - 1)),
                                      edit.time_weight)
        else:
            latent = _latent(model, t)
        write_png(os.path.join(args.output, f"{k:05d}.png"), render_image(model, latent, cam, opts))
    print(f"rendered {len(views)} edited images to {args.output}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    state = _load_checkpoint(args.checkpoint)
    cfg = _run_config(state)
    dataset = _load_dataset(args.dataset or cfg.dataset)
    if not cfg.multi_view:
        per_image_latents(dataset)
    model = state.model
    if dataset.num_times != len(model.latents):
        raise DataError(f"dataset has {dataset.num_times} time steps, model has {len(model.latents)} latents")
    iterations = cfg.test_latent_iterations if args.latent_iterations is None else args.latent_iterations
    fit_test_latents(model, dataset, iterations, cfg.train_config(), lr=cfg.test_latent_lr, seed=cfg.seed)
    if min(dataset.records[0].image.shape[:2]) < SSIM_WINDOW:
        raise DataError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels for SSIM")
    _prepare_output(args.output, args.overwrite)
    rows = []
    idx = dataset.indices(args.split) if args.split != "all" else list(range(len(dataset)))
    for i in idx:
        r = dataset.records[i]
        img = render_image(model, _latent(model, r.time), r.camera, cfg.render_options())
        rows.append({"index": i, "time": r.time, "split": r.split, "psnr": psnr(img, r.image),
                     "ssim": ssim(img, r.image)})
        if args.save_images:
            write_png(os.path.join(args.output, f"{i:05d}.png"), img)
    with open(os.path.join(args.output, "metrics.csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["index", "time", "split", "psnr", "ssim"])
        writer.writeheader()
        writer.writerows(rows)
    if rows:
        print(f"{len(rows)} images: mean PSNR {np.mean([r['psnr'] for r in rows]):.3f} dB, "
              f"mean SSIM {np.mean([r['ssim'] for r in rows]):.4f}")
    else:
        print("no images in the requested split")
    return EXIT_OK


def _stability_frames(args) -> list[np.ndarray]:
    if args.images:
        if not os.path.isdir(args.images):
            raise DataError(f"image directory {args.images} not found")
        names = sorted(n for n in os.listdir(args.images) if n.lower().endswith(".png"))
        return [read_png(os.path.join(args.images, n)) for n in names]
    if not args.checkpoint:
        raise UsageError("stability needs --images or --checkpoint with --dataset")
    state = _load_checkpoint(args.checkpoint)
    cfg = _run_config(state)
    dataset = _load_dataset(args.dataset or cfg.dataset)
    if not cfg.multi_view:
        per_image_latents(dataset)
    novel = dataset.oracle.get("novel")
    if args.camera_index is not None or not novel:
        camera = dataset.records[args.camera_index or 0].camera
    else:
        camera = novel[0][1]
    times = range(dataset.num_times)
    if args.times == "test":
        if state.model.latents.is_test.any():
            fit_test_latents(state.model, dataset, cfg.test_latent_iterations, cfg.train_config(),
                             lr=cfg.test_latent_lr, seed=cfg.seed)
        times = [t for t in times if dataset.test_times()[t]]
    return [render_image(state.model, _latent(state.model, t), camera, cfg.render_options()) for t in times]


def cmd_stability(args) -> int:
    frames = _stability_frames(args)
    if len(frames) < 2:
        raise DataError("stability needs at least two frames")
    if len({f.shape for f in frames}) != 1:
        raise DataError("frames differ in size")
    std, curve = background_stability(frames)
    _prepare_output(args.output, args.overwrite)
    peak = max(float(std.max()), 1e-12)
    write_png(os.path.join(args.output, "stability.png"), std / peak)
    with open(os.path.join(args.output, "stability.csv"), "w") as fh:
        fh.write("fraction,std\n")
        n = len(curve)
        for k, v in enumerate(curve):
            fh.write(f"{(k + 1) / n:.6f},{v:.9g}\n")
    print(f"median per-pixel std {float(np.median(std)):.6g}, max {float(std.max()):.6g}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _add_run_config_flags(p: argparse.ArgumentParser) -> None:
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool":
            p.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        else:
            kind = {"int": int, "float": float}.get(f.type, str)
            p.add_argument(flag, dest=f.name, type=kind, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="warpfield", description="Deformable radiance fields for dynamic scenes.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("make-dataset", help="render a synthetic dynamic scene with ground truth")
    p.add_argument("--output", required=True)
    p.add_argument("--spec", help="scene description as JSON (defaults to the toy scene)")
    for name in ("frames", "width", "height", "seed", "novel-views", "multi-view", "samples-per-ray"):
        p.add_argument("--" + name, type=int, default=None)
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_make_dataset)

    p = sub.add_parser("train", help="fit a model to a dataset")
    p.add_argument("--config", help="flat key = value file")
    p.add_argument("--preset", default="full", help=f"starting values: {', '.join(sorted(PRESETS))}")
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint in the output directory")
    p.add_argument("--overwrite", action="store_true")
    _add_run_config_flags(p)
    p.set_defaults(func=cmd_train)

    def add_views(p):
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--output", required=True)
        p.add_argument("--dataset")
        p.add_argument("--camera-path", help="JSON list of cameras, each with an optional time step")
        p.add_argument("--split", choices=("all", "train", "test"), default="all")
        p.add_argument("--overwrite", action="store_true")

    p = sub.add_parser("render", help="render images from a checkpoint")
    add_views(p)
    p.add_argument("--modality", choices=("color", "rigidity", "correspondence", "canonical"), default="color")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("edit", help="render with motion or rigidity edits")
    add_views(p)
    p.add_argument("--exaggerate", type=float, metavar="M")
    p.add_argument("--remove-foreground", type=float, metavar="TAU")
    p.add_argument("--interpolate-time", type=float, nargs=2, metavar=("I", "T"))
    p.add_argument("--stabilize", type=float, metavar="RMIN")
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("evaluate", help="fit test latents, then write per-image metrics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset")
    p.add_argument("--output", required=True)
    p.add_argument("--split", choices=("all", "train", "test"), default="test")
    p.add_argument("--latent-iterations", type=int)
    p.add_argument("--save-images", action="store_true")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("stability", help="per-pixel temporal std of a fixed-view sequence")
    p.add_argument("--output", required=True)
    p.add_argument("--images", help="directory of same-size PNG frames")
    p.add_argument("--checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--camera-index", type=int, help="use this dataset image's camera instead of a novel view")
    p.add_argument("--times", choices=("all", "test"), default="all")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_stability)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        limiter = _thread_limit()
        try:
            return args.func(args)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except (UsageError, ConfigError) as exc:
        print(f"warpfield: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"warpfield: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"warpfield: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
