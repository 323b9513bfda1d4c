"""Batch export of vision-tower features and last-normalization-layer
activation stacks for a directory of images.

Per image two VISF files are written: <stem>.features.visf with the 197x768
token matrix (the output of the vision encoder's final layer norm, CLS token
first) and <stem>.activations.visf with the 196 patch tokens rearranged into
768 channel maps of 14x14. manifest.json is written last, so its presence
marks a complete export.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .visf import write_visf

logger = logging.getLogger("visf_export")

IMAGE_SIZE = 224
GRID = 14
# OpenAI-CLIP normalization, which the BLIP family inherits
PIXEL_MEAN = np.array([0.48145466, 0.4578275, 0.40821073], dtype=np.float32)
PIXEL_STD = np.array([0.26862954, 0.26130258, 0.27577711], dtype=np.float32)

FEATURE_LAYER = "vision_model.post_layernorm"
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".webp")


@dataclass
class LoadedModel:
    model: torch.nn.Module
    model_id: str
    pretrained: bool


def load_model(model_id: str, seed: int = 0) -> LoadedModel:
    """Build the vision tower.

    "untrained:<layers>" constructs a randomly initialized (seeded) BLIP-style
    tower with the standard 224/16/768 geometry, for environments without
    checkpoint access; anything else is treated as a pretrained checkpoint
    identifier and loaded through transformers.
    """
    from transformers import BlipVisionConfig, BlipVisionModel

    if model_id.startswith("untrained:"):
        spec = model_id.split(":", 1)[1]
        layers = int(spec) if spec else 12
        config = BlipVisionConfig(
            image_size=IMAGE_SIZE,
            patch_size=16,
            hidden_size=768,
            num_hidden_layers=layers,
            num_attention_heads=12,
            intermediate_size=3072,
        )
        torch.manual_seed(seed)
        model = BlipVisionModel(config)
        pretrained = False
    else:
        model = BlipVisionModel.from_pretrained(model_id)
        pretrained = True
    model.eval()
    return LoadedModel(model=model, model_id=model_id, pretrained=pretrained)


def preprocess(path) -> np.ndarray:
    """Image file -> normalized (3, 224, 224) float32 tensor data."""
    with Image.open(path) as img:
        rgb = img.convert("RGB").resize((IMAGE_SIZE, IMAGE_SIZE), Image.BILINEAR)
    pixels = np.asarray(rgb, dtype=np.float32) / 255.0
    pixels = (pixels - PIXEL_MEAN) / PIXEL_STD
    return pixels.transpose(2, 0, 1)


def list_images(images_dir) -> list[Path]:
    images_dir = Path(images_dir)
    return sorted(p for p in images_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


@torch.no_grad()
def _forward(model: torch.nn.Module, batch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Returns (features (B, 197, 768), activations (B, 768, 14, 14))."""
    out = model(pixel_values=torch.from_numpy(batch))
    tokens = out.last_hidden_state.numpy().astype(np.float32)  # post layer-norm
    patches = tokens[:, 1:, :]  # drop CLS
    activations = patches.transpose(0, 2, 1).reshape(tokens.shape[0], 768, GRID, GRID)
    return tokens, activations


def export(images_dir, out_dir, model_id: str, batch_size: int = 8, seed: int = 0) -> dict:
    """Export every readable image and return the manifest dict.

    Unreadable images are skipped with a log entry; a model that cannot be
    loaded is fatal. The manifest is written last as the completion marker.
    """
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    loaded = load_model(model_id, seed=seed)

    paths = list_images(images_dir)
    if not paths:
        raise ValueError(f"no images found under {images_dir}")

    entries = []
    pending: list[tuple[str, np.ndarray]] = []

    def flush():
        if not pending:
            return
        batch = np.stack([p for _, p in pending])
        features, activations = _forward(loaded.model, batch)
        for (stem, _), feat, act in zip(pending, features, activations):
            write_visf(feat, out / f"{stem}.features.visf")
            write_visf(act, out / f"{stem}.activations.visf")
            entries.append(
                {
                    "image": stem,
                    "features_file": f"{stem}.features.visf",
                    "activations_file": f"{stem}.activations.visf",
                }
            )
        pending.clear()

    for path in paths:
        try:
            pixels = preprocess(path)
        except Exception as exc:
            logger.warning("skipping unreadable image %s: %s", path.name, exc)
            continue
        pending.append((path.stem, pixels))
        if len(pending) == batch_size:
            flush()
    flush()

    if not entries:
        raise ValueError("no image could be read")

    manifest = {
        "schema_version": 1,
        "model": loaded.model_id,
        "pretrained": loaded.pretrained,
        "feature_layer": FEATURE_LAYER,
        "activation_layer": FEATURE_LAYER + " (patch tokens as 768 channel maps)",
        "feature_shape": [197, 768],
        "activation_shape": [768, GRID, GRID],
        "normalization": {"mean": PIXEL_MEAN.tolist(), "std": PIXEL_STD.tolist()},
        "images": entries,
        "created_utc": datetime.now(timezone.utc).isoformat(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
