"""Per-query two-layer MLP encoder with a shared-weight GELU block and an
affine voxel head, plus analytic gradients and checkpoint serialization.

Every query (token) of a feature tensor runs through one shared
768 -> hidden -> query_out MLP; the per-query outputs are concatenated and an
affine head maps them to the V voxel predictions.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import erf

from .data_io import load_tensor, save_tensor

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class CheckpointError(ValueError):
    """Corrupt or inconsistent parameter bundle on disk."""


def gelu(x):
    """Exact GELU, x * Phi(x) with Phi the standard normal CDF (not the tanh fit)."""
    x = np.asarray(x, dtype=np.float64)
    return x * 0.5 * (1.0 + erf(x / _SQRT2))


def gelu_grad(x):
    """Derivative of exact GELU: Phi(x) + x * phi(x)."""
    x = np.asarray(x, dtype=np.float64)
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return cdf + x * pdf


@dataclass(frozen=True)
class EncoderConfig:
    """Shapes of the encoding network. n_voxels always comes from the data."""

    n_voxels: int
    n_queries: int = 197
    feat_dim: int = 768
    hidden: int = 256
    query_out: int = 64

    def __post_init__(self):
        for name in ("n_voxels", "n_queries", "feat_dim", "hidden", "query_out"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def condensed_dim(self) -> int:
        return self.n_queries * self.query_out


_TENSOR_NAMES = ("w1", "b1", "w2", "b2", "w_head", "b_head")


@dataclass
class EncoderParams:
    """Weights and biases; w1/b1/w2/b2 are shared across queries."""

    config: EncoderConfig
    w1: np.ndarray      # (D, hidden)
    b1: np.ndarray      # (hidden,)
    w2: np.ndarray      # (hidden, query_out)
    b2: np.ndarray      # (query_out,)
    w_head: np.ndarray  # (Q * query_out, V)
    b_head: np.ndarray  # (V,)

    def __post_init__(self):
        c = self.config
        expected = {
            "w1": (c.feat_dim, c.hidden),
            "b1": (c.hidden,),
            "w2": (c.hidden, c.query_out),
            "b2": (c.query_out,),
            "w_head": (c.condensed_dim, c.n_voxels),
            "b_head": (c.n_voxels,),
        }
        for name, shape in expected.items():
            t = getattr(self, name)
            if t.shape != shape:
                raise ValueError(f"{name} has shape {t.shape}, expected {shape}")
            if not np.all(np.isfinite(t)):
                raise ValueError(f"{name} contains non-finite values")

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in _TENSOR_NAMES}

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.config, *(getattr(self, n).copy() for n in _TENSOR_NAMES))


def init_params(config: EncoderConfig, seed: int) -> EncoderParams:
    """Seeded init: weights uniform in +-sqrt(6/(fan_in+fan_out)), biases zero."""
    rng = np.random.default_rng(seed)

    def uniform(fan_in, fan_out):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=(fan_in, fan_out))

    return EncoderParams(
        config=config,
        w1=uniform(config.feat_dim, config.hidden),
        b1=np.zeros(config.hidden),
        w2=uniform(config.hidden, config.query_out),
        b2=np.zeros(config.query_out),
        w_head=uniform(config.condensed_dim, config.n_voxels),
        b_head=np.zeros(config.n_voxels),
    )


@dataclass
class ForwardTrace:
    """Intermediates cached by forward, consumed by backward.

    Belongs to the exact EncoderParams object that produced it; backward
    rejects traces from other (e.g. already-updated) parameters.
    """

    params: EncoderParams
    features: np.ndarray   # (..., Q, D)
    a1: np.ndarray         # (..., Q, hidden) pre-activation
    h1: np.ndarray         # (..., Q, hidden)
    condensed: np.ndarray  # (..., Q * query_out)


def _check_features(config: EncoderConfig, f: np.ndarray, batched: bool) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    want = (config.n_queries, config.feat_dim)
    if batched:
        if f.ndim != 3 or f.shape[1:] != want:
            raise ValueError(f"expected (B, {want[0]}, {want[1]}) features, got {f.shape}")
    else:
        if f.shape != want:
            raise ValueError(f"expected {want} features, got {f.shape}")
    return f


def forward(params: EncoderParams, f: np.ndarray) -> tuple[np.ndarray, ForwardTrace]:
    """Predict the length-V voxel response for one feature tensor.

    For each query q: h_q = GELU(f_q @ w1 + b1); z_q = h_q @ w2 + b2;
    prediction = concat(z_1..z_Q) @ w_head + b_head.
    """
    f = _check_features(params.config, f, batched=False)
    a1 = f @ params.w1 + params.b1
    h1 = gelu(a1)
    z = h1 @ params.w2 + params.b2
    condensed = z.reshape(-1)
    pred = condensed @ params.w_head + params.b_head
    return pred, ForwardTrace(params, f, a1, h1, condensed)


def forward_batch(params: EncoderParams, f: np.ndarray) -> tuple[np.ndarray, ForwardTrace]:
    """Batched forward over (B, Q, D) features, returning (B, V) predictions."""
    f = _check_features(params.config, f, batched=True)
    b, q, d = f.shape
    a1 = (f.reshape(b * q, d) @ params.w1).reshape(b, q, -1) + params.b1
    h1 = gelu(a1)
    z = h1 @ params.w2 + params.b2
    condensed = z.reshape(b, -1)
    pred = condensed @ params.w_head + params.b_head
    return pred, ForwardTrace(params, f, a1, h1, condensed)


def predict(params: EncoderParams, f: np.ndarray) -> np.ndarray:
    """Batched prediction without keeping a trace."""
    return forward_batch(params, f)[0]


def backward(params: EncoderParams, trace: ForwardTrace, grad_out: np.ndarray) -> dict[str, np.ndarray]:
    """Exact gradients of prediction . grad_out w.r.t. every parameter.

    grad_out is (V,) for a single-sample trace or (B, V) for a batched one;
    batched gradients are summed over the batch.
    """
    if trace.params is not params:
        raise ValueError("stale trace: it was produced by different parameters")
    c = params.config
    grad_out = np.asarray(grad_out, dtype=np.float64)
    batched = trace.features.ndim == 3
    want = (trace.features.shape[0], c.n_voxels) if batched else (c.n_voxels,)
    if grad_out.shape != want:
        raise ValueError(f"grad_out has shape {grad_out.shape}, expected {want}")

    if not batched:
        g_b_head = grad_out
        g_w_head = np.outer(trace.condensed, grad_out)
        d_cond = params.w_head @ grad_out
        dz = d_cond.reshape(c.n_queries, c.query_out)
        g_w2 = trace.h1.T @ dz
        g_b2 = dz.sum(axis=0)
        dh1 = dz @ params.w2.T
        da1 = dh1 * gelu_grad(trace.a1)
        g_w1 = trace.features.T @ da1
        g_b1 = da1.sum(axis=0)
    else:
        b = trace.features.shape[0]
        g_b_head = grad_out.sum(axis=0)
        g_w_head = trace.condensed.T @ grad_out
        d_cond = grad_out @ params.w_head.T
        dz = d_cond.reshape(b, c.n_queries, c.query_out)
        g_w2 = trace.h1.reshape(b * c.n_queries, -1).T @ dz.reshape(b * c.n_queries, -1)
        g_b2 = dz.sum(axis=(0, 1))
        dh1 = dz @ params.w2.T
        da1 = dh1 * gelu_grad(trace.a1)
        g_w1 = trace.features.reshape(b * c.n_queries, -1).T @ da1.reshape(b * c.n_queries, -1)
        g_b1 = da1.sum(axis=(0, 1))

    return {"w1": g_w1, "b1": g_b1, "w2": g_w2, "b2": g_b2, "w_head": g_w_head, "b_head": g_b_head}


def condensed_feature(params: EncoderParams, f: np.ndarray) -> np.ndarray:
    """The concatenated pre-head vector concat(z_1..z_Q), length Q * query_out."""
    f = _check_features(params.config, f, batched=False)
    z = gelu(f @ params.w1 + params.b1) @ params.w2 + params.b2
    return z.reshape(-1)


def save_params(params: EncoderParams, path) -> None:
    """Write a parameter bundle: manifest.json plus one float64 VISF per tensor."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "schema_version": 1,
        "config": {
            "n_voxels": params.config.n_voxels,
            "n_queries": params.config.n_queries,
            "feat_dim": params.config.feat_dim,
            "hidden": params.config.hidden,
            "query_out": params.config.query_out,
        },
        "tensors": {},
    }
    for name, tensor in params.tensors().items():
        fname = f"{name}.visf"
        save_tensor(np.asarray(tensor, dtype=np.float64), path / fname)
        manifest["tensors"][name] = {"file": fname, "shape": list(tensor.shape)}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_params(path) -> EncoderParams:
    """Bit-exact inverse of save_params."""
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: cannot read manifest.json: {exc}") from exc
    try:
        config = EncoderConfig(**manifest["config"])
        entries = manifest["tensors"]
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: malformed manifest: {exc}") from exc
    tensors = {}
    for name in _TENSOR_NAMES:
        if name not in entries:
            raise CheckpointError(f"{path}: manifest missing tensor {name!r}")
        tensor = load_tensor(path / entries[name]["file"])
        if list(tensor.shape) != list(entries[name]["shape"]):
            raise CheckpointError(
                f"{path}: {name} shape {tensor.shape} does not match manifest {entries[name]['shape']}"
            )
        tensors[name] = tensor.astype(np.float64)
    try:
        return EncoderParams(config, **tensors)
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
