"""Noise ceiling, per-voxel Pearson correlation, median noise-normalized
accuracy, ROI aggregation, and paired significance tests."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import betainc

from .data_io import RoiAtlas


def noise_ceiling(sigma_signal_sq: float, sigma_noise_sq: float) -> float:
    """Percent of response variance attributable to signal: 100 * s / (s + n)."""
    s = float(sigma_signal_sq)
    n = float(sigma_noise_sq)
    if s < 0 or n < 0:
        raise ValueError("variances must be non-negative")
    if s == 0 and n == 0:
        raise ValueError("noise ceiling undefined when both variances are zero")
    return 100.0 * s / (s + n)


def pearson(g: np.ndarray, p: np.ndarray) -> float:
    """Pearson correlation over stimuli; zero-variance input on either side gives 0."""
    g = np.asarray(g, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if g.shape != p.shape or g.ndim != 1:
        raise ValueError(f"expected equal-length vectors, got {g.shape} and {p.shape}")
    if g.shape[0] < 2:
        raise ValueError("need at least 2 samples for a correlation")
    gc = g - g.mean()
    pc = p - p.mean()
    denom = np.sqrt((gc * gc).sum() * (pc * pc).sum())
    if denom == 0.0:
        return 0.0
    return float((gc * pc).sum() / denom)


@dataclass
class VoxelScores:
    """Per-voxel correlations and noise-normalized scores.

    r2_over_nc is NaN at excluded voxels (noise ceiling of zero).
    """

    r: np.ndarray
    r2_over_nc: np.ndarray
    excluded: np.ndarray


@dataclass
class AccuracyReport:
    overall: float
    n_voxels: int
    n_scored: int
    n_excluded: int
    per_region: dict[str, float] = field(default_factory=dict)


def _pearson_columns(ground: np.ndarray, pred: np.ndarray) -> np.ndarray:
    gc = ground - ground.mean(axis=0)
    pc = pred - pred.mean(axis=0)
    denom = np.sqrt((gc * gc).sum(axis=0) * (pc * pc).sum(axis=0))
    num = (gc * pc).sum(axis=0)
    return np.where(denom > 0.0, num / np.where(denom > 0.0, denom, 1.0), 0.0)


def accuracy(
    ground: np.ndarray,
    pred: np.ndarray,
    nc: np.ndarray,
    nc_mode: str = "fraction",
) -> tuple[AccuracyReport, VoxelScores]:
    """Median noise-normalized prediction accuracy over voxels, as a percentage.

    Per voxel v, R_v is the Pearson correlation between ground truth and
    prediction across stimuli, and the voxel score is R_v^2 divided by the
    noise ceiling. With nc_mode="fraction" (default) the ceiling enters as
    nc/100 so a perfect prediction of fully explainable signal scores 100;
    "percent" divides by the raw [0, 100] value instead. Voxels with a zero
    ceiling are excluded from the median and counted.
    """
    ground = np.asarray(ground, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    nc = np.asarray(nc, dtype=np.float64)
    if ground.shape != pred.shape or ground.ndim != 2:
        raise ValueError(f"ground {ground.shape} and pred {pred.shape} must be equal (T, V)")
    if nc.shape != (ground.shape[1],):
        raise ValueError(f"noise ceiling shape {nc.shape} does not match V={ground.shape[1]}")
    if ground.shape[0] < 2:
        raise ValueError("need at least 2 stimuli")
    if nc_mode not in ("fraction", "percent"):
        raise ValueError(f"nc_mode must be 'fraction' or 'percent', got {nc_mode!r}")

    r = _pearson_columns(ground, pred)
    denom = nc / 100.0 if nc_mode == "fraction" else nc
    excluded = np.flatnonzero(nc == 0.0)
    scores = np.full(nc.shape, np.nan)
    scored = nc != 0.0
    scores[scored] = (r[scored] ** 2) / denom[scored]
    if not np.any(scored):
        raise ValueError("all voxels have zero noise ceiling; accuracy undefined")
    overall = float(np.median(scores[scored]) * 100.0)
    report = AccuracyReport(
        overall=overall,
        n_voxels=int(nc.shape[0]),
        n_scored=int(scored.sum()),
        n_excluded=int(excluded.size),
    )
    return report, VoxelScores(r=r, r2_over_nc=scores, excluded=excluded)


def region_accuracy(scores: VoxelScores, atlas: RoiAtlas) -> tuple[dict[str, float], list[str]]:
    """Median score per atlas region, times 100.

    Returns (region -> accuracy, regions omitted because no voxel was scored).
    """
    v = scores.r.shape[0]
    out: dict[str, float] = {}
    omitted: list[str] = []
    for name, idx in atlas.regions.items():
        if idx[-1] >= v:
            raise ValueError(f"region {name!r} indexes voxel {idx[-1]} but V={v}")
        vals = scores.r2_over_nc[idx]
        vals = vals[~np.isnan(vals)]
        if vals.size == 0:
            omitted.append(name)
            continue
        out[name] = float(np.median(vals) * 100.0)
    return out, omitted


@dataclass
class TTestResult:
    t: float
    p: float
    df: int
    degenerate: bool = False


def paired_ttest(a: np.ndarray, b: np.ndarray) -> TTestResult:
    """Two-sided paired t-test; p from the Student-t CDF via the regularized
    incomplete beta. All-zero differences are flagged degenerate with p = 1."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired test needs two equal-length vectors")
    n = a.shape[0]
    if n < 2:
        raise ValueError("need at least 2 pairs")
    d = a - b
    df = n - 1
    if np.all(d == 0.0):
        return TTestResult(t=0.0, p=1.0, df=df, degenerate=True)
    sd = d.std(ddof=1)
    if sd == 0.0:
        # constant non-zero differences: infinitely significant
        return TTestResult(t=float(np.sign(d.mean()) * np.inf), p=0.0, df=df)
    t = float(d.mean() / (sd / np.sqrt(n)))
    p = float(betainc(df / 2.0, 0.5, df / (df + t * t)))
    return TTestResult(t=t, p=p, df=df)
