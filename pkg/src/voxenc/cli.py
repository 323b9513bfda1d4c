"""Command-line surface: synth, train, tune, eval, cam, kl, pf, embed.

Every command reads one JSON run config (flags win over config values),
writes its artifacts plus a machine-readable summary.json into the output
directory, and never mutates its inputs. Exit codes: 0 success, 1 validation
error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .data_io import (
    RoiAtlas,
    SplitAssignment,
    StimulusSet,
    load_atlas,
    load_stimulus_set,
    load_tensor,
    make_split,
    save_tensor,
    validate_noise_ceiling,
)
from .embedviz import pca2, silhouette, write_embedding_csv, write_scatter_svg
from .encoder import EncoderConfig, forward_batch, load_params, save_params
from .extractor import ToyExtractor
from .hypersearch import (
    CategoricalDim,
    ContinuousDim,
    IntegerDim,
    TrialRecord,
    run_search,
)
from .metrics import accuracy, region_accuracy
from .optimize import TrainConfig, train
from .saliency import (
    RegionTarget,
    functional_probability,
    region_similarity,
    scorecam_regions,
    scorecam_tokens,
    write_pgm,
)
from .synth import synth_dataset


class ConfigError(ValueError):
    pass


_VALIDATION_ERRORS = (ValueError, FileNotFoundError, NotADirectoryError, PermissionError)


def _load_config(args) -> dict:
    if args.config is None:
        return {}
    path = Path(args.config)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON: {exc}") from exc


def _seed(args, config) -> int:
    if args.seed is not None:
        return args.seed
    return int(config.get("seed", 0))


def _out_dir(args, config) -> Path:
    out = args.out or config.get("paths", {}).get("output_dir")
    if out is None:
        raise ConfigError("no output directory: pass --out or set paths.output_dir")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _path(config, key, must_exist=True, required=True):
    value = config.get("paths", {}).get(key)
    if value is None:
        if required:
            raise ConfigError(f"config is missing paths.{key}")
        return None
    p = Path(value)
    if must_exist and not p.exists():
        raise ConfigError(f"paths.{key} = {p} does not exist")
    return p


def _write_summary(out: Path, command: str, payload: dict, t_start: float) -> Path:
    doc = {
        "schema_version": 1,
        "command": command,
        **payload,
        "timestamp": {
            "created_utc": datetime.now(timezone.utc).isoformat(),
            "wall_time_s": time.perf_counter() - t_start,
        },
    }
    target = out / "summary.json"
    target.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return target


def _load_dataset(config, with_labels=False) -> tuple[StimulusSet, np.ndarray]:
    labels_file = _path(config, "supercategories", required=False) if with_labels else None
    stimuli = load_stimulus_set(
        _path(config, "features_dir"),
        _path(config, "responses_file"),
        labels_file,
    )
    nc = validate_noise_ceiling(load_tensor(_path(config, "nc_file")))
    if nc.shape[0] != stimuli.n_voxels:
        raise ConfigError(
            f"noise ceiling has {nc.shape[0]} voxels but responses have {stimuli.n_voxels}"
        )
    return stimuli, nc


def _encoder_config(config, stimuli: StimulusSet) -> EncoderConfig:
    enc = config.get("encoder", {})
    return EncoderConfig(
        n_voxels=stimuli.n_voxels,
        n_queries=stimuli.n_queries,
        feat_dim=stimuli.feat_dim,
        hidden=int(enc.get("hidden", 256)),
        query_out=int(enc.get("query_out", 64)),
    )


def _train_config(config, seed: int, **overrides) -> TrainConfig:
    doc = dict(config.get("train", {}))
    doc.update(overrides)
    known = {"learning_rate", "beta1", "beta2", "epsilon", "batch_size", "max_epochs", "patience"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
    return TrainConfig(seed=seed, **doc)


def _split_for(args, config, stimuli: StimulusSet, seed: int) -> SplitAssignment:
    split_file = getattr(args, "split_file", None)
    if split_file:
        return SplitAssignment.from_json(json.loads(Path(split_file).read_text()))
    return make_split(stimuli.ids, seed)


def _checkpoint_dir(args, config) -> Path:
    ckpt = getattr(args, "checkpoint", None) or config.get("paths", {}).get("checkpoint")
    if ckpt is None:
        raise ConfigError("no checkpoint: pass --checkpoint or set paths.checkpoint")
    ckpt = Path(ckpt)
    if not ckpt.exists():
        raise ConfigError(f"checkpoint {ckpt} does not exist")
    return ckpt


def _atlas(config) -> RoiAtlas:
    return load_atlas(_path(config, "atlas"))


def _region_target(atlas: RoiAtlas, name: str) -> RegionTarget:
    if name not in atlas.regions:
        raise ConfigError(f"region {name!r} not in atlas (have: {sorted(atlas.regions)})")
    return RegionTarget(name, atlas.regions[name])


def _image_ids(config, args) -> list[str]:
    images_dir = _path(config, "images_dir", required=False)
    if images_dir is None:
        features_dir = _path(config, "features_dir")
        ids = sorted(p.stem for p in features_dir.glob("*.visf"))
    else:
        ids = sorted(p.stem for p in images_dir.glob("*.visf"))
    if getattr(args, "images", None):
        missing = [i for i in args.images if i not in set(ids)]
        if missing:
            raise ConfigError(f"unknown image ids: {missing}")
        return args.images
    limit = getattr(args, "limit", None)
    return ids[:limit] if limit else ids


class _CamRunner:
    """Per-image attention maps, through the pixel path when images and a
    runnable extractor exist, otherwise through token-space masking when
    activation stacks were ingested alongside the features."""

    def __init__(self, config, params):
        self.params = params
        self.images_dir = _path(config, "images_dir", required=False)
        self.activations_dir = _path(config, "activations_dir", required=False)
        self.features_dir = _path(config, "features_dir")
        extractor_cfg = config.get("extractor", {})
        kind = extractor_cfg.get("kind", "toy")
        if self.images_dir is not None:
            if kind != "toy":
                raise ConfigError(f"unknown extractor kind {kind!r}")
            self.extractor = ToyExtractor(int(extractor_cfg.get("seed", 0)))
        elif self.activations_dir is None:
            raise ConfigError(
                "attention maps need images plus a runnable extractor, or ingested "
                "activation stacks (paths.activations_dir) for token-space masking"
            )

    def maps_for(self, image_id: str, targets) -> dict:
        if self.images_dir is not None:
            image = load_tensor(self.images_dir / f"{image_id}.visf").astype(np.float64)
            return scorecam_regions(image, self.params, targets, self.extractor)
        features = load_tensor(self.features_dir / f"{image_id}.visf").astype(np.float64)
        activations = load_tensor(self.activations_dir / f"{image_id}.visf").astype(np.float64)
        return scorecam_tokens(features, activations, self.params, targets)


def cmd_synth(args) -> int:
    t0 = time.perf_counter()
    config = _load_config(args)
    seed = _seed(args, config)
    out = args.out or config.get("paths", {}).get("output_dir")
    if out is None:
        raise ConfigError("synth needs --out")
    meta = synth_dataset(
        out,
        seed=seed,
        n_stimuli=args.stimuli,
        n_voxels=args.voxels,
        noise_ratio=args.noise_ratio,
        extractor_seed=args.extractor_seed,
        with_activations=args.with_activations,
    )
    _write_summary(Path(out), "synth", {"dataset": meta}, t0)
    return 0


def cmd_train(args) -> int:
    t0 = time.perf_counter()
    config = _load_config(args)
    seed = _seed(args, config)
    out = _out_dir(args, config)
    stimuli, nc = _load_dataset(config)
    split = _split_for(args, config, stimuli, seed)
    enc_cfg = _encoder_config(config, stimuli)
    train_cfg = _train_config(config, seed)

    params, report = train(stimuli, nc, split, enc_cfg, train_cfg)

    ckpt = out / "checkpoint"
    save_params(params, ckpt)
    (out / "split.json").write_text(json.dumps(split.to_json(), indent=2, sort_keys=True) + "\n")
    (out / "train_report.json").write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    _write_summary(
        out,
        "train",
        {
            "encoder": {
                "n_voxels": enc_cfg.n_voxels,
                "n_queries": enc_cfg.n_queries,
                "feat_dim": enc_cfg.feat_dim,
                "hidden": enc_cfg.hidden,
                "query_out": enc_cfg.query_out,
            },
            "seed": seed,
            "best_epoch": report.best_epoch,
            "epochs_run": report.epochs_run,
            "best_val_accuracy": report.val_accuracy[report.best_epoch - 1],
            "train_loss": report.train_loss,
            "val_accuracy": report.val_accuracy,
            "checkpoint": "checkpoint",  # relative to the output dir, for reproducible summaries
        },
        t0,
    )
    return 0


def cmd_eval(args) -> int:
    t0 = time.perf_counter()
    config = _load_config(args)
    seed = _seed(args, config)
    out = _out_dir(args, config)
    stimuli, nc = _load_dataset(config)
    params = load_params(_checkpoint_dir(args, config))
    split = _split_for(args, config, stimuli, seed)
    ids = list(getattr(split, args.split))
    if not ids:
        raise ConfigError(f"split {args.split!r} is empty")

    feats = stimuli.feature_matrix(ids)
    ground = stimuli.response_matrix(ids)
    preds = np.concatenate(
        [forward_batch(params, feats[i: i + 32])[0] for i in range(0, feats.shape[0], 32)]
    )
    report, scores = accuracy(ground, preds, nc, nc_mode=args.nc_mode)

    per_region, omitted = {}, []
    atlas_path = config.get("paths", {}).get("atlas")
    if atlas_path:
        atlas = _atlas(config)
        per_region, omitted = region_accuracy(scores, atlas)
        lines = ["region,n_voxels,accuracy"]
        for name in sorted(per_region):
            lines.append(f"{name},{len(atlas.regions[name])},{per_region[name]!r}")
        (out / "accuracy.csv").write_text("\n".join(lines) + "\n")

    _write_summary(
        out,
        "eval",
        {
            "split": args.split,
            "n_stimuli": len(ids),
            "nc_mode": args.nc_mode,
            "overall_accuracy": report.overall,
            "n_voxels": report.n_voxels,
            "n_scored": report.n_scored,
            "n_excluded": report.n_excluded,
            "per_region_accuracy": per_region,
            "regions_omitted": omitted,
        },
        t0,
    )
    return 0


_DIM_PARSERS = {
    "continuous": lambda d: ContinuousDim(float(d["low"]), float(d["high"]), d.get("scale") == "log"),
    "int": lambda d: IntegerDim(int(d["low"]), int(d["high"])),
    "categorical": lambda d: CategoricalDim(tuple(d["choices"])),
}


def _parse_space(doc: dict) -> dict:
    space = {}
    for name, dim in doc.items():
        kind = dim.get("type")
        if kind not in _DIM_PARSERS:
            raise ConfigError(f"search dimension {name!r} has unknown type {kind!r}")
        try:
            space[name] = _DIM_PARSERS[kind](dim)
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"search dimension {name!r} is malformed: {exc}") from exc
    return space


_DEFAULT_SPACE = {
    "learning_rate": {"type": "continuous", "low": 1e-4, "high": 1e-2, "scale": "log"},
    "hidden": {"type": "int", "low": 32, "high": 128},
    "query_out": {"type": "int", "low": 8, "high": 32},
    "batch_size": {"type": "categorical", "choices": [16, 32, 64]},
}


def cmd_tune(args) -> int:
    t0 = time.perf_counter()
    config = _load_config(args)
    seed = _seed(args, config)
    out = _out_dir(args, config)
    stimuli, nc = _load_dataset(config)
    split = _split_for(args, config, stimuli, seed)
    tune_cfg = config.get("tune", {})
    budget = args.budget or int(tune_cfg.get("budget", 20))
    max_epochs = int(tune_cfg.get("max_epochs", 20))
    space = _parse_space(tune_cfg.get("space", _DEFAULT_SPACE))

    enc_base = config.get("encoder", {})

    def objective(trial_config: dict) -> float:
        enc_cfg = EncoderConfig(
            n_voxels=stimuli.n_voxels,
            n_queries=stimuli.n_queries,
            feat_dim=stimuli.feat_dim,
            hidden=int(trial_config.get("hidden", enc_base.get("hidden", 256))),
            query_out=int(trial_config.get("query_out", enc_base.get("query_out", 64))),
        )
        overrides = {
            k: v for k, v in trial_config.items() if k in ("learning_rate", "batch_size")
        }
        train_cfg = _train_config(config, seed, max_epochs=max_epochs, **overrides)
        _, report = train(stimuli, nc, split, enc_cfg, train_cfg)
        return report.val_accuracy[report.best_epoch - 1]

    history_path = out / "tune_history.jsonl"
    history = []
    if history_path.exists():
        history = [
            TrialRecord.from_json(json.loads(line))
            for line in history_path.read_text().splitlines()
            if line.strip()
        ]
    with open(history_path, "a") as fh:
        def on_trial(record: TrialRecord):
            fh.write(json.dumps(record.to_json(), sort_keys=True) + "\n")
            fh.flush()

        best, history = run_search(space, objective, budget, seed, history, on_trial)

    _write_summary(
        out,
        "tune",
        {
            "budget": budget,
            "n_trials": len(history),
            "n_failed": sum(1 for t in history if t.status == "failed"),
            "best": best.to_json(),
            "history_file": history_path.name,
        },
        t0,
    )
    return 0


def cmd_cam(args) -> int:
    t0 = time.perf_counter()
    config = _load_config(args)
    out = _out_dir(args, config)
    params = load_params(_checkpoint_dir(args, config))
    atlas = _atlas(config)
    targets = [_region_target(atlas, name) for name in args.regions]
    runner = _CamRunner(config, params)
    ids = _image_ids(config, args)
    if not ids:
        raise ConfigError("no images to analyze")

    entries = []
    for image_id in ids:
        results = runner.maps_for(image_id, targets)
        for name, result in results.items():
            stem = f"cam_{name}_{image_id}"
            save_tensor(result.attention.astype(np.float32), out / f"{stem}.visf")
            write_pgm(out / f"{stem}.pgm", result.attention)
            entries.append(
                {
                    "image": image_id,
                    "region": name,
                    "map_file": f"{stem}.visf",
                    "degenerate": bool(result.degenerate),
                }
            )
    _write_summary(out, "cam", {"regions": list(args.regions), "maps": entries}, t0)
    return 0


def cmd_kl(args) -> int:
    t0 = time.perf_counter()
    config = _load_config(args)
    out = _out_dir(args, config)
    params = load_params(_checkpoint_dir(args, config))
    atlas = _atlas(config)
    names = [args.anchor, args.near, args.far]
    targets = [_region_target(atlas, name) for name in names]
    runner = _CamRunner(config, params)
    ids = _image_ids(config, args)
    if not ids:
        raise ConfigError("no images to analyze")

    maps = {name: {} for name in names}
    for image_id in ids:
        results = runner.maps_for(image_id, targets)
        for name in names:
            maps[name][image_id] = results[name].attention
    report = region_similarity(maps, args.anchor, (args.near, args.far))
    _write_summary(out, "kl", {"similarity": report.to_json(), "images": ids}, t0)
    return 0


def cmd_pf(args) -> int:
    t0 = time.perf_counter()
    config = _load_config(args)
    out = _out_dir(args, config)
    params = load_params(_checkpoint_dir(args, config))
    atlas = _atlas(config)
    target = _region_target(atlas, args.region)
    masks_dir = _path(config, "masks_dir")
    runner = _CamRunner(config, params)
    ids = [i for i in _image_ids(config, args) if (masks_dir / f"{i}.visf").exists()]
    if not ids:
        raise ConfigError(f"no images with masks under {masks_dir}")

    attention_maps, object_masks = [], []
    for image_id in ids:
        attention_maps.append(runner.maps_for(image_id, [target])[target.name].attention)
        object_masks.append(load_tensor(masks_dir / f"{image_id}.visf"))
    result = functional_probability(attention_maps, object_masks)
    _write_summary(
        out,
        "pf",
        {
            "region": args.region,
            "n_images": len(ids),
            "p_f": result.p_f,
            "per_image": {
                i: (None if np.isnan(p) else p) for i, p in zip(ids, result.per_image)
            },
            "excluded_images": [ids[i] for i in result.excluded],
        },
        t0,
    )
    return 0


def cmd_embed(args) -> int:
    t0 = time.perf_counter()
    config = _load_config(args)
    seed = _seed(args, config)
    out = _out_dir(args, config)
    stimuli, _ = _load_dataset(config, with_labels=True)
    params = load_params(_checkpoint_dir(args, config))
    if args.split == "all":
        ids = list(stimuli.ids)
    else:
        ids = list(getattr(_split_for(args, config, stimuli, seed), args.split))
    if len(ids) < 3:
        raise ConfigError("need at least 3 stimuli to embed")

    feats = stimuli.feature_matrix(ids)
    condensed = np.concatenate(
        [forward_batch(params, feats[i: i + 32])[1].condensed for i in range(0, len(ids), 32)]
    )
    labels = None
    if stimuli.supercategory:
        labels = [stimuli.supercategory.get(i, "other") for i in ids]
    result = pca2(condensed, labels)
    write_embedding_csv(out / "embedding.csv", ids, result)
    write_scatter_svg(out / "embedding.svg", result)

    sil = None
    if labels is not None and len(set(labels)) >= 2:
        sil = silhouette(result.points, labels)
    _write_summary(
        out,
        "embed",
        {
            "split": args.split,
            "n_stimuli": len(ids),
            "method": "pca2",
            "method_note": "deterministic PCA substitutes for the stochastic manifold projection",
            "feature_source": "encoder condensed (pre-head) features",
            "explained_variance": [float(v) for v in result.explained],
            "silhouette": sil,
        },
        t0,
    )
    return 0


class _Parser(argparse.ArgumentParser):
    # usage problems are validation errors: exit 1, not argparse's default 2
    def error(self, message):
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="run config JSON (flags override it)")
    common.add_argument("--seed", type=int, default=None, help="seed override")
    common.add_argument("--threads", type=int, default=None, help="BLAS thread cap")
    common.add_argument("--out", default=None, help="output directory override")

    parser = _Parser(prog="voxenc", description=__doc__)
    parser.add_argument("--version", action="version", version=f"voxenc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--stimuli", type=int, default=200)
    p.add_argument("--voxels", type=int, default=30)
    p.add_argument("--noise-ratio", type=float, default=0.25)
    p.add_argument("--extractor-seed", type=int, default=None)
    p.add_argument("--with-activations", action="store_true",
                   help="also persist activation stacks (enables token-space cam)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train an encoder")
    p.add_argument("--split-file", default=None, help="reuse a saved split.json")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--split", choices=("train", "validation", "test"), default="test")
    p.add_argument("--split-file", default=None)
    p.add_argument("--nc-mode", choices=("fraction", "percent"), default="fraction")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("tune", parents=[common], help="TPE hyperparameter search")
    p.add_argument("--budget", type=int, default=None)
    p.add_argument("--split-file", default=None)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("cam", parents=[common], help="attention maps for ROI targets")
    p.add_argument("--regions", nargs="+", required=True)
    p.add_argument("--images", nargs="*", default=None)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--checkpoint", default=None)
    p.set_defaults(func=cmd_cam)

    p = sub.add_parser("kl", parents=[common], help="KL similarity of region attention")
    p.add_argument("--anchor", required=True)
    p.add_argument("--near", required=True)
    p.add_argument("--far", required=True)
    p.add_argument("--images", nargs="*", default=None)
    p.add_argument("--limit", type=int, default=5)
    p.add_argument("--checkpoint", default=None)
    p.set_defaults(func=cmd_kl)

    p = sub.add_parser("pf", parents=[common], help="functional probability of a region")
    p.add_argument("--region", required=True)
    p.add_argument("--images", nargs="*", default=None)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--checkpoint", default=None)
    p.set_defaults(func=cmd_pf)

    p = sub.add_parser("embed", parents=[common], help="2-D embedding of condensed features")
    p.add_argument("--split", choices=("train", "validation", "test", "all"), default="all")
    p.add_argument("--split-file", default=None)
    p.add_argument("--checkpoint", default=None)
    p.set_defaults(func=cmd_embed)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.threads is not None:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                return args.func(args)
        return args.func(args)
    except _VALIDATION_ERRORS as exc:
        print(f"voxenc {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"voxenc {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
