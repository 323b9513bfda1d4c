"""Synthetic dataset generation: toy images from a low-dimensional latent
space, extractor features, and responses from a planted per-voxel affine map
plus Gaussian noise with known signal/noise variances.

Keeping the images on a small latent manifold (class archetype + a handful of
smooth patterns) makes the planted map recoverable from a few hundred
stimuli, so training runs can be validated quantitatively.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .data_io import RoiAtlas, SUPERCATEGORIES, save_atlas, save_tensor
from .extractor import IMAGE_SIZE, ToyExtractor
from .metrics import noise_ceiling
from .saliency import bilinear_resize

LATENT_DIM = 12


def _smooth_field(rng: np.random.Generator, scale: float) -> np.ndarray:
    """Seeded smooth 224x224 pattern: low-res noise upsampled bilinearly."""
    coarse = rng.standard_normal((7, 7))
    return bilinear_resize(coarse, IMAGE_SIZE, IMAGE_SIZE) * scale


def synth_dataset(
    out_dir,
    seed: int = 0,
    n_stimuli: int = 200,
    n_voxels: int = 30,
    noise_ratio: float = 0.25,
    extractor_seed: int | None = None,
    with_activations: bool = False,
) -> dict:
    """Write a complete synthetic dataset under out_dir and return its metadata.

    Per-voxel signal is standardized to variance 1, so the recorded noise
    ceiling is 100 / (1 + noise_ratio) everywhere (100 exactly when
    noise_ratio is 0). Reruns with the same arguments are bit-identical.
    """
    if n_stimuli < 10:
        raise ValueError("need at least 10 stimuli")
    if n_voxels < 3:
        raise ValueError("need at least 3 voxels for the atlas regions")
    if noise_ratio < 0:
        raise ValueError("noise_ratio must be non-negative")
    out = Path(out_dir)
    subdirs = ["images", "features", "masks"]
    if with_activations:
        subdirs.append("activations")
    for sub in subdirs:
        (out / sub).mkdir(parents=True, exist_ok=True)

    if extractor_seed is None:
        extractor_seed = seed
    rng = np.random.default_rng(seed)
    extractor = ToyExtractor(extractor_seed)

    class_bases = {name: _smooth_field(rng, 0.35) for name in SUPERCATEGORIES}
    patterns = [_smooth_field(rng, 0.08) for _ in range(LATENT_DIM)]

    ids = [f"stim_{t:04d}" for t in range(n_stimuli)]
    labels = {sid: SUPERCATEGORIES[t % len(SUPERCATEGORIES)] for t, sid in enumerate(ids)}
    feature_rows = []
    for t, sid in enumerate(ids):
        z = rng.standard_normal(LATENT_DIM)
        field = class_bases[labels[sid]] + sum(c * p for c, p in zip(z, patterns))
        image = np.clip(0.5 + field[:, :, None] * np.array([1.0, 0.8, 0.6]), 0.0, 1.0)
        save_tensor(image.astype(np.float32), out / "images" / f"{sid}.visf")
        features, activations = extractor.extract(image)
        save_tensor(features.astype(np.float32), out / "features" / f"{sid}.visf")
        if with_activations:
            save_tensor(activations.astype(np.float32), out / "activations" / f"{sid}.visf")
        feature_rows.append(features.reshape(-1))

        cx, cy = rng.integers(40, 80, size=2)
        mask = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=np.uint8)
        mask[cy: cy + 112, cx: cx + 112] = 1
        save_tensor(mask, out / "masks" / f"{sid}.visf")

    flat = np.stack(feature_rows)
    planted = rng.standard_normal((flat.shape[1], n_voxels)) / np.sqrt(flat.shape[1])
    signal = flat @ planted
    mu = signal.mean(axis=0)
    sigma = signal.std(axis=0)
    if np.any(sigma == 0):
        raise RuntimeError("degenerate planted signal; change the seed")
    signal = (signal - mu) / sigma  # per-voxel affine map, unit signal variance
    noise = rng.standard_normal((n_stimuli, n_voxels)) * np.sqrt(noise_ratio)
    responses = signal + noise
    save_tensor(responses.astype(np.float32), out / "responses.visf")

    nc_value = noise_ceiling(1.0, noise_ratio)
    nc = np.full(n_voxels, nc_value, dtype=np.float32)
    save_tensor(nc, out / "noise_ceiling.visf")

    third = n_voxels // 3
    regions = {
        "V1v": list(range(0, third)),
        "V3v": list(range(third, 2 * third)),
        "hV4": list(range(2 * third, n_voxels)),
    }
    if third >= 2:
        # one overlapping parcel, as anatomical and functional atlases have
        regions["ventral"] = list(range(third // 2, n_voxels - third // 2))
    atlas = RoiAtlas("left", n_voxels, {k: np.asarray(v) for k, v in regions.items()})
    save_atlas(atlas, out / "atlas.json")

    (out / "supercategories.json").write_text(json.dumps(labels, indent=2, sort_keys=True) + "\n")

    meta = {
        "seed": int(seed),
        "extractor_seed": int(extractor_seed),
        "n_stimuli": int(n_stimuli),
        "n_voxels": int(n_voxels),
        "noise_ratio": float(noise_ratio),
        "latent_dim": LATENT_DIM,
        "sigma_signal_sq": 1.0,
        "sigma_noise_sq": float(noise_ratio),
        "noise_ceiling": float(nc_value),
        "planted_model": "per-voxel standardized affine map of the flattened features",
    }
    (out / "synth_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    paths = {
        "features_dir": str(out / "features"),
        "responses_file": str(out / "responses.visf"),
        "nc_file": str(out / "noise_ceiling.visf"),
        "atlas": str(out / "atlas.json"),
        "masks_dir": str(out / "masks"),
        "images_dir": str(out / "images"),
        "supercategories": str(out / "supercategories.json"),
        "output_dir": str(out / "out"),
    }
    if with_activations:
        paths["activations_dir"] = str(out / "activations")
    run_config = {
        "seed": int(seed),
        "encoder": {"hidden": 64, "query_out": 16},
        "train": {
            "learning_rate": 1e-3,
            "beta1": 0.9,
            "beta2": 0.999,
            "epsilon": 1e-8,
            "batch_size": 32,
            "max_epochs": 100,
            "patience": 10,
        },
        "extractor": {"kind": "toy", "seed": int(extractor_seed)},
        "paths": paths,
        "tune": {
            "budget": 12,
            "max_epochs": 12,
            "space": {
                "learning_rate": {"type": "continuous", "low": 1e-4, "high": 1e-2, "scale": "log"},
                "hidden": {"type": "int", "low": 16, "high": 96},
            },
        },
    }
    (out / "run_config.json").write_text(json.dumps(run_config, indent=2, sort_keys=True) + "\n")
    return meta
