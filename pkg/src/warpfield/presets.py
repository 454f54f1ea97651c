"""Named run configurations.

``toy`` is sized for the 64x64, 24-frame synthetic scene on one CPU core.
Scene units there are about 1, and motions of 0.5 are typical, so the
offsets penalty (which grows like |b'|^1.5 to |b'|^2) is much larger per
ray than on real footage.  Loss weights are scaled down to keep the
regularizers comparable to the photometric loss.
"""

from __future__ import annotations

from .config import RunConfig

PRESETS = {
    "full": {},
    "toy": {
        "dtype": "float32",
        "canonical_width": 64,
        "canonical_depth": 4,
        "canonical_skip": 2,
        "encoding_bands": 6,
        "iterations": 20000,
        "batch_size": 128,
        "base_lr": 2e-3,
        "decay_iterations": 20000,
        "w_rigidity": 1.0,
        "w_offsets": 0.5,
        "w_divergence": 2.0,
        "n_coarse": 16,
        "n_fine": 16,
        "chunk": 2048,
        "test_latent_iterations": 300,
        "test_latent_lr": 1e-2,
    },
}


def preset(name: str, **overrides) -> RunConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    values = RunConfig().to_dict()
    values.update(PRESETS[name])
    values.update(overrides)
    cfg = RunConfig.from_dict(values)
    cfg.validate()
    return cfg
