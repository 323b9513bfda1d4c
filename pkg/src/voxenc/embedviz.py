"""Deterministic 2-D projection of condensed encoder features with
cluster-separation quantification.

PCA keeps the projection reproducible where stochastic manifold methods are
not; whether responses group semantically is quantified by the silhouette
score of the supercategory labels in the projected plane.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

LABEL_COLORS = {
    "person": "#1f77b4",
    "animal": "#ff7f0e",
    "both": "#2ca02c",
    "other": "#7f7f7f",
}
_FALLBACK_COLOR = "#d62728"


@dataclass
class EmbeddingResult:
    points: np.ndarray            # (n, 2)
    labels: list[str] | None
    explained: np.ndarray         # fraction of variance per component


def pca2(features: np.ndarray, labels=None) -> EmbeddingResult:
    """Mean-centered projection onto the top-2 principal directions.

    Sign convention: the largest-magnitude loading of each component is
    positive, so the embedding is unique.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3 or x.shape[1] < 2:
        raise ValueError(f"need an (n >= 3, d >= 2) matrix, got {x.shape}")
    if labels is not None and len(labels) != x.shape[0]:
        raise ValueError("labels length does not match the number of rows")
    centered = x - x.mean(axis=0)
    _, singular, vt = np.linalg.svd(centered, full_matrices=False)
    total = float((singular ** 2).sum())
    if total == 0.0:
        raise ValueError("zero-variance data has no principal directions")
    components = vt[:2].copy()
    for comp in components:
        if comp[np.argmax(np.abs(comp))] < 0:
            comp *= -1.0
    points = centered @ components.T
    explained = (singular[:2] ** 2) / total
    return EmbeddingResult(points=points, labels=list(labels) if labels is not None else None,
                           explained=explained)


def silhouette(points: np.ndarray, labels) -> float:
    """Mean silhouette with Euclidean distance; singletons score 0."""
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    if points.ndim != 2 or points.shape[0] != labels.shape[0]:
        raise ValueError("points and labels must have matching first dimension")
    names, assignment = np.unique(labels, return_inverse=True)
    if names.size < 2:
        raise ValueError("silhouette needs at least 2 distinct labels")
    diff = points[:, None, :] - points[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))
    n = points.shape[0]
    scores = np.zeros(n)
    counts = np.bincount(assignment, minlength=names.size)
    for i in range(n):
        own = assignment[i]
        if counts[own] == 1:
            continue  # singleton cluster scores 0
        a = dist[i][assignment == own].sum() / (counts[own] - 1)
        b = min(
            dist[i][assignment == c].mean() for c in range(names.size) if c != own
        )
        top = max(a, b)
        scores[i] = 0.0 if top == 0.0 else (b - a) / top
    return float(scores.mean())


def write_embedding_csv(path, ids, result: EmbeddingResult) -> None:
    lines = ["id,x,y,label"]
    labels = result.labels or [""] * len(ids)
    for sid, (x, y), label in zip(ids, result.points, labels):
        lines.append(f"{sid},{x!r},{y!r},{label}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_scatter_svg(path, result: EmbeddingResult, width: int = 640, height: int = 480) -> None:
    """Minimal self-contained SVG scatter with one fixed color per label."""
    pts = result.points
    lo = pts.min(axis=0)
    span = pts.max(axis=0) - lo
    span[span == 0] = 1.0
    margin = 40
    labels = result.labels or ["other"] * pts.shape[0]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    for (x, y), label in zip(pts, labels):
        px = margin + (x - lo[0]) / span[0] * (width - 2 * margin)
        py = height - margin - (y - lo[1]) / span[1] * (height - 2 * margin)
        color = LABEL_COLORS.get(label, _FALLBACK_COLOR)
        parts.append(f'<circle cx="{px:.2f}" cy="{py:.2f}" r="3" fill="{color}" fill-opacity="0.75"/>')
    for i, (label, color) in enumerate(LABEL_COLORS.items()):
        ly = 20 + 16 * i
        parts.append(f'<circle cx="{width - 110}" cy="{ly}" r="4" fill="{color}"/>')
        parts.append(
            f'<text x="{width - 100}" y="{ly + 4}" font-family="sans-serif" font-size="12">{label}</text>'
        )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
