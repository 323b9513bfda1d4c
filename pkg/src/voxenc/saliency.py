"""ScoreCAM attention maps for ROI-targeted predictions, KL-divergence region
comparison, and the functional-probability metric.

An attention map is an H x W probability distribution over pixels: each
activation map is min-max normalized and upsampled, scored by the change it
causes in the target ROI's mean predicted response when used as an input
mask, and the softmax-weighted combination is renormalized to sum 1.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .encoder import EncoderParams, predict
from .extractor import GRID, IMAGE_SIZE, validate_image

KL_EPS = 1e-8


class DegenerateMaskError(ValueError):
    pass


def bilinear_resize(values: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear upsampling with half-pixel centers and edge clamping."""
    values = np.asarray(values, dtype=np.float64)
    h, w = values.shape
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    wy = ys - y0
    wx = xs - x0
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    top = values[y0c][:, x0c] * (1 - wx) + values[y0c][:, x1c] * wx
    bottom = values[y1c][:, x0c] * (1 - wx) + values[y1c][:, x1c] * wx
    return top * (1 - wy)[:, None] + bottom * wy[:, None]


def minmax_normalize(values: np.ndarray) -> np.ndarray:
    """Scale to [0, 1]; a constant map becomes the all-zero (empty) mask."""
    lo = values.min()
    hi = values.max()
    if hi == lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def validate_attention(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError(f"attention map must be 2-D, got shape {values.shape}")
    if np.any(values < 0) or not np.all(np.isfinite(values)):
        raise ValueError("attention map must be finite and non-negative")
    if abs(values.sum() - 1.0) > 1e-9:
        raise ValueError(f"attention map must sum to 1, got {values.sum()}")
    return values


@dataclass(frozen=True)
class RegionTarget:
    """A named voxel set; the scalar target is the mean prediction over it."""

    name: str
    voxels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "voxels", np.asarray(self.voxels, dtype=np.int64))
        if self.voxels.size == 0:
            raise ValueError(f"region target {self.name!r} has no voxels")


@dataclass
class ScoreCamResult:
    attention: np.ndarray      # (H, W), sums to 1
    scores: np.ndarray         # (K,) raw mask scores for the ROI-mean target
    degenerate: bool = False   # True when the combined map was all zeros


def combine_masks(scores: np.ndarray, masks: np.ndarray) -> tuple[np.ndarray, bool]:
    """Softmax-weight the upsampled masks by their scores and renormalize.

    Returns (attention map summing to 1, degenerate flag); an all-zero
    combination yields the uniform distribution with the flag set.
    """
    scores = np.asarray(scores, dtype=np.float64)
    weights = np.exp(scores - scores.max())
    weights /= weights.sum()
    combined = np.maximum(np.tensordot(weights, masks, axes=1), 0.0)
    total = combined.sum()
    if total <= 0.0:
        shape = masks.shape[1:]
        return np.full(shape, 1.0 / (shape[0] * shape[1])), True
    return combined / total, False


def _upsampled_masks(activations: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    masks = np.empty((activations.shape[0], out_h, out_w))
    for k in range(activations.shape[0]):
        masks[k] = bilinear_resize(minmax_normalize(activations[k]), out_h, out_w)
    return masks


def scorecam_regions(
    image: np.ndarray,
    params: EncoderParams,
    targets,
    extractor,
    per_voxel: bool = False,
) -> dict[str, ScoreCamResult]:
    """ScoreCAM attention maps for several ROI targets of one image.

    The K masked forward passes are shared across targets. With per_voxel
    the map of each voxel in a region is computed separately and averaged
    (K+1 passes total either way; only the combination step differs).
    """
    image = validate_image(image)
    _, activations = extractor.extract(image)
    masks = _upsampled_masks(activations, IMAGE_SIZE, IMAGE_SIZE)

    baseline = extractor.perturbed_extract(image, np.zeros((IMAGE_SIZE, IMAGE_SIZE)))
    masked_feats = np.stack(
        [extractor.perturbed_extract(image, masks[k]) for k in range(masks.shape[0])]
    )
    base_pred = predict(params, baseline[None])[0]
    mask_preds = predict(params, masked_feats)          # (K, V)
    deltas = mask_preds - base_pred                     # (K, V)

    out: dict[str, ScoreCamResult] = {}
    for target in targets:
        if target.voxels.max() >= params.config.n_voxels:
            raise ValueError(f"target {target.name!r} indexes beyond V={params.config.n_voxels}")
        roi_scores = deltas[:, target.voxels].mean(axis=1)
        if per_voxel:
            maps = []
            degenerate_all = True
            for v in target.voxels:
                m, deg = combine_masks(deltas[:, v], masks)
                degenerate_all &= deg
                maps.append(m)
            combined = np.mean(maps, axis=0)
            combined /= combined.sum()
            out[target.name] = ScoreCamResult(combined, roi_scores, degenerate_all)
        else:
            combined, degenerate = combine_masks(roi_scores, masks)
            out[target.name] = ScoreCamResult(combined, roi_scores, degenerate)
    return out


def scorecam(
    image: np.ndarray,
    params: EncoderParams,
    target: RegionTarget,
    extractor,
    per_voxel: bool = False,
) -> ScoreCamResult:
    """ScoreCAM attention map for a single ROI target (see scorecam_regions)."""
    return scorecam_regions(image, params, [target], extractor, per_voxel)[target.name]


def patch_weights_from_mask(mask: np.ndarray) -> np.ndarray:
    """Per-patch mean of a pixel mask on the 14x14 grid, for token-space masking."""
    if mask.shape != (IMAGE_SIZE, IMAGE_SIZE):
        raise ValueError(f"mask must be ({IMAGE_SIZE}, {IMAGE_SIZE}), got {mask.shape}")
    patch = IMAGE_SIZE // GRID
    return mask.reshape(GRID, patch, GRID, patch).mean(axis=(1, 3))


def scorecam_tokens(
    features: np.ndarray,
    activations: np.ndarray,
    params: EncoderParams,
    targets,
) -> dict[str, ScoreCamResult]:
    """ScoreCAM for ingested features whose extractor cannot be re-run.

    Masked inputs are approximated in token space: each patch token is scaled
    by the mask's mean over its patch (the global token 0 by the overall
    mean), which matches pixel masking exactly for patch-local extractors
    with patch-constant masks.
    """
    features = np.asarray(features, dtype=np.float64)
    masks = _upsampled_masks(np.asarray(activations, dtype=np.float64), IMAGE_SIZE, IMAGE_SIZE)
    masked = np.empty((masks.shape[0],) + features.shape)
    for k in range(masks.shape[0]):
        w = patch_weights_from_mask(masks[k]).reshape(-1)
        masked[k] = features * np.concatenate(([w.mean()], w))[:, None]
    base_pred = predict(params, np.zeros_like(features)[None])[0]
    deltas = predict(params, masked) - base_pred
    out = {}
    for target in targets:
        roi_scores = deltas[:, target.voxels].mean(axis=1)
        combined, degenerate = combine_masks(roi_scores, masks)
        out[target.name] = ScoreCamResult(combined, roi_scores, degenerate)
    return out


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) in nats after flooring both maps at 1e-8 and renormalizing."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {q.shape}")
    pf = np.maximum(p, KL_EPS)
    qf = np.maximum(q, KL_EPS)
    pf = pf / pf.sum()
    qf = qf / qf.sum()
    return float(np.sum(pf * np.log(pf / qf)))


@dataclass
class PairSimilarity:
    kl_pq: float
    kl_qp: float
    j: float
    per_image_j: list[float] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"kl_pq": self.kl_pq, "kl_qp": self.kl_qp, "j": self.j, "per_image_j": self.per_image_j}


@dataclass
class SimilarityReport:
    """Symmetric KL comparison of an anchor region against two others.

    ratio = J(anchor, far) / J(anchor, near); infinite when the near pair's
    divergence is exactly zero.
    """

    anchor: str
    near: str
    far: str
    pairs: dict[str, PairSimilarity]
    ratio: float
    ratio_infinite: bool
    n_images: int

    def to_json(self) -> dict:
        return {
            "anchor": self.anchor,
            "near": self.near,
            "far": self.far,
            "pairs": {k: v.to_json() for k, v in self.pairs.items()},
            "ratio": None if self.ratio_infinite else self.ratio,
            "ratio_infinite": self.ratio_infinite,
            "n_images": self.n_images,
        }


def region_similarity(maps: dict[str, dict[str, np.ndarray]], anchor: str, others) -> SimilarityReport:
    """Average symmetric KL between the anchor's and each other region's
    attention maps over the images shared by all regions."""
    near, far = others
    for name in (anchor, near, far):
        if name not in maps:
            raise ValueError(f"no attention maps for region {name!r}")
    shared = sorted(set(maps[anchor]) & set(maps[near]) & set(maps[far]))
    if not shared:
        raise ValueError("regions share no images")
    pairs = {}
    for other in (near, far):
        kl_pq, kl_qp, js = [], [], []
        for image_id in shared:
            p = maps[anchor][image_id]
            q = maps[other][image_id]
            forward_kl = kl_divergence(p, q)
            reverse_kl = kl_divergence(q, p)
            kl_pq.append(forward_kl)
            kl_qp.append(reverse_kl)
            js.append(0.5 * (forward_kl + reverse_kl))
        pairs[other] = PairSimilarity(
            kl_pq=float(np.mean(kl_pq)),
            kl_qp=float(np.mean(kl_qp)),
            j=float(np.mean(js)),
            per_image_j=[float(j) for j in js],
        )
    j_near = pairs[near].j
    j_far = pairs[far].j
    infinite = j_near == 0.0
    ratio = float("inf") if infinite else j_far / j_near
    return SimilarityReport(anchor, near, far, pairs, ratio, infinite, len(shared))


@dataclass
class PfResult:
    p_f: float
    per_image: list[float]
    excluded: list[int]

    def to_json(self) -> dict:
        return {
            "p_f": self.p_f,
            "per_image": [None if np.isnan(p) else p for p in self.per_image],
            "excluded_images": self.excluded,
        }


def functional_probability(maps, masks) -> PfResult:
    """Probability that attention concentrates on the function-relevant area.

    Per image, p_i = mu_AF / (mu_OF + mu_AF) with mu_AF the mean attention
    over mask-1 pixels and mu_OF the mean over mask-0 pixels; P_f averages
    p_i. Images whose mask is all ones or all zeros are excluded with a
    warning (the ratio is undefined for them).
    """
    maps = list(maps)
    masks = list(masks)
    if not maps or len(maps) != len(masks):
        raise ValueError("need equally many attention maps and masks, at least one each")
    per_image = []
    excluded = []
    for i, (attention, mask) in enumerate(zip(maps, masks)):
        attention = validate_attention(attention)
        mask = np.asarray(mask)
        if mask.shape != attention.shape:
            raise ValueError(f"mask {i} shape {mask.shape} != map shape {attention.shape}")
        inside = mask != 0
        if inside.all() or not inside.any():
            warnings.warn(f"mask {i} covers everything or nothing; image excluded")
            excluded.append(i)
            per_image.append(float("nan"))
            continue
        mu_af = attention[inside].mean()
        mu_of = attention[~inside].mean()
        per_image.append(float(mu_af / (mu_of + mu_af)))
    used = [p for p in per_image if not np.isnan(p)]
    if not used:
        raise DegenerateMaskError("every mask was degenerate; P_f undefined")
    return PfResult(p_f=float(np.mean(used)), per_image=per_image, excluded=excluded)


def write_pgm(path, values: np.ndarray) -> None:
    """Render a non-negative map to binary PGM (P5, maxval 255), row-major."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError("PGM rendering needs a 2-D map")
    peak = values.max()
    scaled = np.zeros_like(values) if peak <= 0 else values / peak
    data = np.round(scaled * 255.0).astype(np.uint8)
    header = f"P5\n{values.shape[1]} {values.shape[0]}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header + data.tobytes())
