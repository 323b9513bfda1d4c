"""Feature extraction: a deterministic patch-projection extractor and query reshaping.

The built-in extractor mirrors vision-transformer token geometry (196 patch
tokens of a 14x14 grid plus one global token, 768 values each) so the query
reshape and attention-map machinery downstream run without any pretrained
weights. Real features exported from a pretrained model are ingested through
the VISF files of data_io instead.
"""

from __future__ import annotations

import numpy as np

IMAGE_SIZE = 224
CHANNELS = 3
PATCH = 16
GRID = IMAGE_SIZE // PATCH          # 14
N_PATCHES = GRID * GRID             # 196
N_QUERIES = N_PATCHES + 1           # 197 (global token + patches)
FEATURE_DIM = PATCH * PATCH * CHANNELS  # 768
QUERY_ROWS, QUERY_COLS = 32, 24     # 768 reshaped per query


def validate_image(pixels: np.ndarray) -> np.ndarray:
    """Check an image array, returning float64 pixels clamped to [0, 1]."""
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.shape != (IMAGE_SIZE, IMAGE_SIZE, CHANNELS):
        raise ValueError(
            f"image must have shape ({IMAGE_SIZE}, {IMAGE_SIZE}, {CHANNELS}), got {pixels.shape}"
        )
    if not np.all(np.isfinite(pixels)):
        raise ValueError("image contains non-finite values")
    return np.clip(pixels, 0.0, 1.0)


def _image_patches(image: np.ndarray) -> np.ndarray:
    """Split a (224, 224, 3) image into (196, 768) flattened 16x16 patches, row-major."""
    return (
        image.reshape(GRID, PATCH, GRID, PATCH, CHANNELS)
        .transpose(0, 2, 1, 3, 4)
        .reshape(N_PATCHES, FEATURE_DIM)
    )


class ToyExtractor:
    """Deterministic stand-in extractor: per-patch orthonormal projection.

    Each 16x16 patch is flattened to 768 values and multiplied by one fixed
    seeded orthonormal 768x768 projection, giving 196 patch tokens; token 0 of
    the output is the global token, the mean of the patch tokens. The
    activation stack holds one 14x14 map per patch token with that token's
    mean absolute value at its own grid cell and zeros elsewhere, so editing
    one patch touches exactly one token and one activation cell (plus the
    global token).

    Immutable after construction; extract may be called concurrently.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        rng = np.random.default_rng(self.seed)
        q, r = np.linalg.qr(rng.standard_normal((FEATURE_DIM, FEATURE_DIM)))
        # canonical sign so the projection is unique for a given seed
        self.projection = q * np.sign(np.diag(r))

    def extract(self, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return (features (197, 768), activation stack (196, 14, 14))."""
        image = validate_image(image)
        tokens = _image_patches(image) @ self.projection
        features = np.empty((N_QUERIES, FEATURE_DIM))
        features[0] = tokens.mean(axis=0)
        features[1:] = tokens
        magnitudes = np.abs(tokens).mean(axis=1)
        activations = np.zeros((N_PATCHES, GRID, GRID))
        activations.reshape(N_PATCHES, -1)[np.arange(N_PATCHES), np.arange(N_PATCHES)] = magnitudes
        return features, activations

    def perturbed_extract(self, image: np.ndarray, mask: np.ndarray) -> np.ndarray:
        """Features of the pixel-wise masked image, extract(image * mask).features."""
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != (IMAGE_SIZE, IMAGE_SIZE):
            raise ValueError(f"mask must have shape ({IMAGE_SIZE}, {IMAGE_SIZE}), got {mask.shape}")
        features, _ = self.extract(np.asarray(image, dtype=np.float64) * mask[:, :, None])
        return features


def reshape_to_queries(features: np.ndarray) -> np.ndarray:
    """View a (Q, 768) feature tensor as Q matrices of 32x24.

    Element (q, r, c) equals flat element (q, 24r + c); the map is a bijection.
    """
    features = np.asarray(features)
    if features.ndim != 2 or features.shape[1] != QUERY_ROWS * QUERY_COLS:
        raise ValueError(f"expected (Q, {QUERY_ROWS * QUERY_COLS}) features, got {features.shape}")
    return features.reshape(features.shape[0], QUERY_ROWS, QUERY_COLS)


def queries_to_tensor(queries: np.ndarray) -> np.ndarray:
    """Inverse of reshape_to_queries."""
    queries = np.asarray(queries)
    if queries.ndim != 3 or queries.shape[1:] != (QUERY_ROWS, QUERY_COLS):
        raise ValueError(f"expected (Q, {QUERY_ROWS}, {QUERY_COLS}) queries, got {queries.shape}")
    return queries.reshape(queries.shape[0], QUERY_ROWS * QUERY_COLS)
