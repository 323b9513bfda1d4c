"""Dataset model, VISF tensor container, ROI atlas loading, and train/val/test splits."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

VISF_MAGIC = b"VISF"
VISF_VERSION = 1

SUPERCATEGORIES = ("person", "animal", "both", "other")

# dtype code -> numpy dtype (little-endian throughout)
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("u1"), 3: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 1, np.dtype("uint8"): 2, np.dtype("float64"): 3}


class VisfError(ValueError):
    """Malformed or unreadable VISF container."""


class BadMagicError(VisfError):
    pass


class UnsupportedVersionError(VisfError):
    pass


class DtypeCodeError(VisfError):
    pass


class TruncatedPayloadError(VisfError):
    pass


class AtlasError(ValueError):
    """Invalid ROI atlas file."""


def save_tensor(array: np.ndarray, path) -> None:
    """Write an array to `path` in the VISF container format.

    Layout (little-endian): magic "VISF", u32 version, u8 dtype code
    (1=float32, 2=uint8, 3=float64), u32 ndim, ndim x u64 dims, then the
    tightly packed row-major payload.
    """
    array = np.asarray(array)
    if array.size == 0:
        raise ValueError("refusing to save an empty tensor")
    code = _CODES.get(array.dtype)
    if code is None:
        raise ValueError(f"unsupported dtype {array.dtype}; use float32, uint8 or float64")
    header = VISF_MAGIC + struct.pack("<I", VISF_VERSION) + struct.pack("<B", code)
    header += struct.pack("<I", array.ndim)
    header += struct.pack(f"<{array.ndim}Q", *array.shape)
    payload = np.ascontiguousarray(array).astype(_DTYPES[code], copy=False).tobytes()
    Path(path).write_bytes(header + payload)


def load_tensor(path) -> np.ndarray:
    """Read a VISF file back into an array. Bit-exact inverse of save_tensor."""
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != VISF_MAGIC:
        raise BadMagicError(f"{path}: not a VISF file (bad magic)")
    if len(raw) < 13:
        raise TruncatedPayloadError(f"{path}: header truncated")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VISF_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported VISF version {version}")
    code = raw[8]
    dtype = _DTYPES.get(code)
    if dtype is None:
        raise DtypeCodeError(f"{path}: unknown dtype code {code}")
    (ndim,) = struct.unpack_from("<I", raw, 9)
    if ndim < 1:
        raise VisfError(f"{path}: ndim must be >= 1")
    offset = 13 + 8 * ndim
    if len(raw) < offset:
        raise TruncatedPayloadError(f"{path}: dimension list truncated")
    shape = struct.unpack_from(f"<{ndim}Q", raw, 13)
    if any(s == 0 for s in shape):
        raise VisfError(f"{path}: zero-sized dimension in {shape}")
    count = math.prod(shape)  # Python ints, immune to int64 overflow on hostile headers
    n_bytes = count * dtype.itemsize
    if len(raw) - offset < n_bytes:
        raise TruncatedPayloadError(
            f"{path}: payload has {len(raw) - offset} bytes, expected {n_bytes}"
        )
    if len(raw) - offset > n_bytes:
        raise VisfError(f"{path}: {len(raw) - offset - n_bytes} trailing bytes after payload")
    return np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(shape).copy()


@dataclass
class RoiAtlas:
    """Named visual-cortex regions mapping to voxel index sets for one hemisphere.

    Regions may overlap (anatomical vs. functional parcels share voxels).
    """

    hemisphere: str
    num_voxels: int
    regions: dict[str, np.ndarray]

    def __post_init__(self):
        if self.hemisphere not in ("left", "right"):
            raise AtlasError(f"hemisphere must be 'left' or 'right', got {self.hemisphere!r}")
        if self.num_voxels <= 0:
            raise AtlasError("num_voxels must be positive")
        clean = {}
        for name, idx in self.regions.items():
            idx = np.unique(np.asarray(idx, dtype=np.int64))
            if idx.size == 0:
                raise AtlasError(f"region {name!r} is empty")
            if idx[0] < 0 or idx[-1] >= self.num_voxels:
                raise AtlasError(
                    f"region {name!r} has voxel index out of range [0, {self.num_voxels})"
                )
            clean[name] = idx
        self.regions = clean


def _reject_duplicate_keys(pairs):
    out = {}
    for key, value in pairs:
        if key in out:
            raise AtlasError(f"duplicate region name {key!r}")
        out[key] = value
    return out


def load_atlas(path) -> RoiAtlas:
    """Load an atlas JSON: {"hemisphere": ..., "num_voxels": N, "regions": {name: [idx...]}}."""
    try:
        doc = json.loads(Path(path).read_text(), object_pairs_hook=_reject_duplicate_keys)
    except json.JSONDecodeError as exc:
        raise AtlasError(f"{path}: malformed JSON: {exc}") from exc
    for key in ("hemisphere", "num_voxels", "regions"):
        if key not in doc:
            raise AtlasError(f"{path}: missing required key {key!r}")
    regions = doc["regions"]
    if not isinstance(regions, dict):
        raise AtlasError(f"{path}: 'regions' must be an object")
    for name, idx in regions.items():
        if not isinstance(idx, list) or not all(isinstance(i, int) for i in idx):
            raise AtlasError(f"{path}: region {name!r} must be a list of integers")
    return RoiAtlas(doc["hemisphere"], int(doc["num_voxels"]), regions)


def save_atlas(atlas: RoiAtlas, path) -> None:
    doc = {
        "hemisphere": atlas.hemisphere,
        "num_voxels": atlas.num_voxels,
        "regions": {name: [int(i) for i in idx] for name, idx in atlas.regions.items()},
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def validate_noise_ceiling(nc: np.ndarray) -> np.ndarray:
    """Check a per-voxel noise-ceiling vector: percent values in [0, 100]."""
    nc = np.asarray(nc, dtype=np.float64)
    if nc.ndim != 1:
        raise ValueError(f"noise ceiling must be a vector, got shape {nc.shape}")
    if not np.all(np.isfinite(nc)):
        raise ValueError("noise ceiling contains non-finite values")
    if np.any(nc < 0) or np.any(nc > 100):
        raise ValueError("noise-ceiling values must lie in [0, 100]")
    return nc


@dataclass
class StimulusSet:
    """Ordered stimuli with per-stimulus feature tensors and voxel responses.

    All feature tensors share one (Q, D) shape and all responses share one
    length V; ids are unique.
    """

    ids: list[str]
    features: dict[str, np.ndarray]
    responses: dict[str, np.ndarray]
    supercategory: dict[str, str] | None = None

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("stimulus ids must be unique")
        if not self.ids:
            raise ValueError("stimulus set is empty")
        ref = None
        for sid in self.ids:
            if sid not in self.features or sid not in self.responses:
                raise ValueError(f"stimulus {sid!r} missing features or responses")
            f = self.features[sid]
            if f.ndim != 2:
                raise ValueError(f"feature tensor for {sid!r} must be 2-D, got {f.shape}")
            if ref is None:
                ref = f.shape
            elif f.shape != ref:
                raise ValueError(f"feature shape mismatch for {sid!r}: {f.shape} vs {ref}")
            if not np.all(np.isfinite(f)):
                raise ValueError(f"non-finite feature values for {sid!r}")
        v = None
        for sid in self.ids:
            r = self.responses[sid]
            if r.ndim != 1:
                raise ValueError(f"response for {sid!r} must be a vector")
            if v is None:
                v = r.shape[0]
            elif r.shape[0] != v:
                raise ValueError(f"response length mismatch for {sid!r}")
            if not np.all(np.isfinite(r)):
                raise ValueError(f"non-finite response values for {sid!r}")
        if self.supercategory is not None:
            for sid, label in self.supercategory.items():
                if label not in SUPERCATEGORIES:
                    raise ValueError(f"unknown supercategory {label!r} for {sid!r}")

    @property
    def n_queries(self) -> int:
        return self.features[self.ids[0]].shape[0]

    @property
    def feat_dim(self) -> int:
        return self.features[self.ids[0]].shape[1]

    @property
    def n_voxels(self) -> int:
        return self.responses[self.ids[0]].shape[0]

    def feature_matrix(self, ids) -> np.ndarray:
        """Stack features for the given ids into (n, Q, D) float64."""
        return np.stack([self.features[i] for i in ids]).astype(np.float64)

    def response_matrix(self, ids) -> np.ndarray:
        """Stack responses for the given ids into (n, V) float64."""
        return np.stack([self.responses[i] for i in ids]).astype(np.float64)


@dataclass(frozen=True)
class SplitAssignment:
    """Disjoint train/validation/test id sets produced by a seeded shuffle."""

    train: tuple[str, ...]
    validation: tuple[str, ...]
    test: tuple[str, ...]
    seed: int

    def to_json(self) -> dict:
        return {
            "train": list(self.train),
            "validation": list(self.validation),
            "test": list(self.test),
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "SplitAssignment":
        return cls(
            tuple(doc["train"]), tuple(doc["validation"]), tuple(doc["test"]), int(doc["seed"])
        )


def make_split(ids, seed: int) -> SplitAssignment:
    """Deterministically partition ids into 80/10/10 train/validation/test.

    Validation and test sizes are round(0.1 * n) each; train takes the rest,
    which keeps every fraction within one item of 80/10/10.
    """
    ids = list(ids)
    n = len(ids)
    if n < 10:
        raise ValueError(f"need at least 10 ids to split, got {n}")
    if len(set(ids)) != n:
        raise ValueError("ids must be unique")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    shuffled = [ids[i] for i in order]
    n_val = int(round(0.1 * n))
    n_test = int(round(0.1 * n))
    return SplitAssignment(
        train=tuple(shuffled[n_val + n_test:]),
        validation=tuple(shuffled[:n_val]),
        test=tuple(shuffled[n_val: n_val + n_test]),
        seed=int(seed),
    )


def load_stimulus_set(features_dir, responses_file, supercategories_file=None) -> StimulusSet:
    """Assemble a StimulusSet from a directory of per-stimulus VISF features
    plus one responses VISF of shape (T, V).

    Ids are the feature file stems; responses rows follow the ids in
    lexicographic order.
    """
    features_dir = Path(features_dir)
    paths = sorted(features_dir.glob("*.visf"))
    if not paths:
        raise ValueError(f"no .visf feature files in {features_dir}")
    ids = [p.stem for p in paths]
    features = {p.stem: load_tensor(p).astype(np.float64) for p in paths}
    resp = load_tensor(responses_file).astype(np.float64)
    if resp.ndim != 2 or resp.shape[0] != len(ids):
        raise ValueError(
            f"responses shape {resp.shape} does not match {len(ids)} stimuli"
        )
    responses = {sid: resp[t] for t, sid in enumerate(ids)}
    supercategory = None
    if supercategories_file is not None:
        supercategory = json.loads(Path(supercategories_file).read_text())
    return StimulusSet(ids, features, responses, supercategory)
