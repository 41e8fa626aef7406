"""Command-line entry point: ``slicexai <command> [--config FILE] [--set key=value]``.

One YAML file drives a whole experiment; ``--set section.key=value`` overrides
single keys. Every artifact goes under an output root, chosen (first match) by
``--output-root``, the ``SLICEXAI_OUTPUT_ROOT`` environment variable, the
config's ``output_root`` key, or ``./runs``::

    <root>/dataset/                     phantom volumes, atlas, manifest.txt
    <root>/checkpoints/<plane>/foldK.pt
    <root>/logs/<plane>/foldK.log       per-epoch metrics log
    <root>/metrics/<plane>.txt          per-fold test metrics + mean row
    <root>/eval/<plane>_<aggregation>.txt
    <root>/xai/                         attention exports, map, heatmap, overlay
    <root>/quantify/regions.{txt,tsv}
    <root>/consistency/
    <root>/manifests/                   one JSON run manifest per command

Exit codes: 0 success, 1 other package error, 2 configuration or missing
input, 3 subject leakage, 4 diverged training.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import yaml

from . import __version__
from .errors import (
    ArchitectureMismatch,
    ConfigError,
    DivergedLoss,
    EmptyPartition,
    IncompatibleAggregation,
    InvalidSpec,
    IoFailure,
    ShapeMismatch,
    SliceXAIError,
    SubjectLeakage,
    TooFewFolds,
    TooFewSubjects,
)
from .evaluation import (
    AGGREGATIONS,
    evaluate_subject_level,
    format_metrics_table,
    predict,
)
from .model import AttentionWeights, gradcam_sequence
from .phantom import generate_phantom_dataset, read_dataset, spec_from_dict, write_dataset
from .regions import load_atlas, rank_report, region_stats
from .train import (
    EVAL_AGGREGATION,
    Checkpoint,
    FoldSplit,
    TrainConfig,
    double_transfer,
    make_folds,
    prepare_samples,
    train_model,
)
from .volume import Plane, Volume3D, load_volume, save_volume
from .xai import (
    SaliencyStack,
    binarize,
    combine_gradcam,
    consistency_report,
    mean_attention,
    minmax_normalize,
    overlay,
    read_attention,
    stack_plane,
    synthesize_map,
    write_attention,
)

log = logging.getLogger("slicexai")

ENV_OUTPUT_ROOT = "SLICEXAI_OUTPUT_ROOT"
PLANES = [p.value for p in Plane]

DEFAULTS = {
    "output_root": None,
    "dataset": None,
    "phantom": {},
    "cv": {"folds": 5, "val_fraction": 0.2},
    "planes": list(PLANES),
    "train": {},
    "eval": {"aggregation": None},
    "xai": {"mode": "attention", "percentile": 99.9, "overlay_delta": 10.0},
    "quantify": {"top_n": 20},
}

EXIT_CODES = [
    (SubjectLeakage, 3),
    (DivergedLoss, 4),
    ((ConfigError, InvalidSpec, ShapeMismatch, IoFailure, ArchitectureMismatch, EmptyPartition,
      TooFewSubjects, TooFewFolds, IncompatibleAggregation), 2),
    (SliceXAIError, 1),
]


# -- configuration -----------------------------------------------------------------------

def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def apply_override(config: dict, assignment: str) -> None:
    """Apply one ``dotted.key=value`` override; the value is parsed as YAML."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    if parts[0] not in DEFAULTS:
        raise ConfigError(f"unknown config section {parts[0]!r}")
    node = config
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{key!r}: {part!r} is not a section")
    try:
        node[parts[-1]] = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value of {key!r}: {exc}") from exc


def load_config(path: Optional[str], overrides: List[str] = ()) -> dict:
    raw: dict = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"config {path} must be a mapping of sections")
    unknown = set(raw) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    config = _merge(DEFAULTS, raw)
    for assignment in overrides:
        apply_override(config, assignment)
    for plane in config["planes"]:
        try:
            Plane.coerce(plane)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    return config


def output_root(args, config: dict) -> Path:
    root = args.output_root or os.environ.get(ENV_OUTPUT_ROOT) or config.get("output_root") \
        or "runs"
    return Path(root)


def dataset_dir(root: Path, config: dict) -> Path:
    return Path(config["dataset"]) if config.get("dataset") else root / "dataset"


def train_config(config: dict, plane: str) -> TrainConfig:
    d = dict(config["train"])
    d["plane"] = plane
    return TrainConfig.from_dict(d)


# -- run manifest ---------------------------------------------------------------------------

class RunManifest:
    """Provenance record for one command invocation, written once and never rewritten."""

    def __init__(self, command: str, config_path: Optional[str], seed: Optional[int]):
        self.record = {
            "command": command,
            "config_path": str(config_path) if config_path else None,
            "seed": seed,
            "started": datetime.now(timezone.utc).isoformat(),
            "finished": None,
            "inputs": [],
            "outputs": [],
            "code_version": __version__,
            "exit_code": None,
        }

    def add_input(self, path) -> None:
        self.record["inputs"].append(str(path))

    def add_output(self, path) -> None:
        self.record["outputs"].append(str(path))

    def write(self, directory: Path, exit_code: int) -> Path:
        self.record["finished"] = datetime.now(timezone.utc).isoformat()
        self.record["exit_code"] = exit_code
        directory.mkdir(parents=True, exist_ok=True)
        stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%f")
        base = f"{stamp}_{self.record['command']}"
        for attempt in range(1000):
            path = directory / (f"{base}.json" if attempt == 0 else f"{base}_{attempt}.json")
            try:
                with open(path, "x") as fh:
                    json.dump(self.record, fh, indent=2)
                    fh.write("\n")
                return path
            except FileExistsError:
                continue
        raise IoFailure(f"cannot find a free manifest name in {directory}")


# -- shared helpers ------------------------------------------------------------------------------

def _load_data(root: Path, config: dict, manifest: RunManifest):
    directory = dataset_dir(root, config)
    if not (directory / "manifest.txt").exists():
        raise IoFailure(f"no dataset manifest at {directory / 'manifest.txt'}; "
                        "run the phantom command first or set 'dataset'")
    manifest.add_input(directory / "manifest.txt")
    return read_dataset(directory)


def _folds(ds, config: dict) -> List[FoldSplit]:
    cv = config["cv"]
    return make_folds(ds.labels_by_subject(), k=int(cv["folds"]),
                      seed=int(config["train"].get("seed", 0)),
                      val_fraction=float(cv.get("val_fraction", 0.2)))


def _checkpoint_path(root: Path, plane: str, fold_id: int) -> Path:
    return root / "checkpoints" / plane / f"fold{fold_id}.pt"


def _available_folds(root: Path, plane: str) -> List[int]:
    directory = root / "checkpoints" / plane
    if not directory.is_dir():
        return []
    return sorted(int(p.stem[4:]) for p in directory.glob("fold*.pt") if p.stem[4:].isdigit())


def _selected_planes(args, config: dict) -> List[str]:
    planes = [args.plane] if getattr(args, "plane", None) else config["planes"]
    return [Plane.coerce(p).value for p in planes]


def _save(volume: Volume3D, path: Path, manifest: RunManifest) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    save_volume(volume, path)
    manifest.add_output(path)


# -- commands ----------------------------------------------------------------------------------

def cmd_phantom(args, config, root, manifest):
    spec = spec_from_dict(config["phantom"])
    spec.validate()
    manifest.record["seed"] = spec.seed
    ds = generate_phantom_dataset(spec)
    directory = dataset_dir(root, config)
    out = write_dataset(ds, directory)
    (directory / "phantom.yaml").write_text(yaml.safe_dump(config["phantom"], sort_keys=True))
    manifest.add_output(out)
    print(f"wrote {len(ds.samples)} scans of {len(ds.subjects)} subjects to {directory}")


def cmd_train(args, config, root, manifest):
    ds = _load_data(root, config, manifest)
    folds = _folds(ds, config)
    if args.fold is not None:
        if not 0 <= args.fold < len(folds):
            raise ConfigError(f"--fold {args.fold} outside 0..{len(folds) - 1}")
        folds = [folds[args.fold]]
    for plane in _selected_planes(args, config):
        cfg = train_config(config, plane)
        data = prepare_samples(ds.samples, plane, cfg.n_slices, cfg.slice_size)
        rows = {}
        for fold in folds:
            log_path = root / "logs" / plane / f"fold{fold.fold_id}.log"
            log_path.parent.mkdir(parents=True, exist_ok=True)
            log_path.write_text("")
            fold_cfg = TrainConfig.from_dict(cfg.to_dict())
            if cfg.transfer_source:
                source = Path(str(cfg.transfer_source).format(plane=plane, fold=fold.fold_id))
                if not source.exists():
                    raise ConfigError(f"transfer_source checkpoint {source} does not exist")
                manifest.add_input(source)
                fold_cfg.transfer_source = str(source)
                ck, _ = double_transfer(source, fold_cfg, fold, data, log_path=log_path)
            else:
                ck, _ = train_model(fold_cfg, fold, data, log_path=log_path)
            path = _checkpoint_path(root, plane, fold.fold_id)
            path.parent.mkdir(parents=True, exist_ok=True)
            ck.save(path)
            manifest.add_output(path)
            manifest.add_output(log_path)
            test = data.subset(data.indices_for(fold.test_subjects))
            rows[str(fold.fold_id)] = evaluate_subject_level(
                ck.model, test.x, test.y, EVAL_AGGREGATION[ck.model.fusion])
        table = format_metrics_table(rows)
        out = root / "metrics" / f"{plane}.txt"
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(table)
        manifest.add_output(out)
        print(f"[{plane}]\n{table}", end="")


def _fold_checkpoints(root: Path, plane: str, manifest: RunManifest) -> Dict[int, Checkpoint]:
    folds = _available_folds(root, plane)
    if not folds:
        raise IoFailure(f"no checkpoints for plane {plane} under {root / 'checkpoints' / plane}")
    out = {}
    for f in folds:
        path = _checkpoint_path(root, plane, f)
        manifest.add_input(path)
        out[f] = Checkpoint.load(path)
    return out


def cmd_eval(args, config, root, manifest):
    ds = _load_data(root, config, manifest)
    for plane in _selected_planes(args, config):
        checkpoints = _fold_checkpoints(root, plane, manifest)
        first = next(iter(checkpoints.values())).model
        aggregation = args.aggregation or config["eval"].get("aggregation") \
            or EVAL_AGGREGATION[first.fusion]
        data = prepare_samples(ds.samples, plane, first.n_slices, first.slice_size)
        rows = {}
        for f, ck in checkpoints.items():
            test = data.subset(data.indices_for(ck.provenance["test_subjects"]))
            rows[str(f)] = evaluate_subject_level(ck.model, test.x, test.y, aggregation)
        table = format_metrics_table(rows)
        out = root / "eval" / f"{plane}_{aggregation}.txt"
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(table)
        manifest.add_output(out)
        print(f"[{plane} {aggregation}]\n{table}", end="")


def _scan_indices(ds, ck: Checkpoint, subject: Optional[str]) -> List[int]:
    subjects = [subject] if subject else ck.provenance["test_subjects"]
    return [i for s in subjects for i in ds.subjects.get(s, [])]


def _owning_checkpoints(checkpoints: Dict[int, Checkpoint], subject: Optional[str]):
    """Folds whose test set should be explained: all of them, or the one testing ``subject``."""
    if subject is None:
        return checkpoints
    owners = {f: ck for f, ck in checkpoints.items()
              if subject in ck.provenance.get("test_subjects", [])}
    if not owners:
        # subject never tested (e.g. a single-fold run): fall back to the first fold
        f = min(checkpoints)
        owners = {f: checkpoints[f]}
    return owners


def _background(ds, subject: Optional[str]) -> Volume3D:
    idx = ds.subjects[subject] if subject else range(len(ds.samples))
    mean = np.mean([ds.samples[i][0].data for i in idx], axis=0)
    return Volume3D(minmax_normalize(mean).data)


def cmd_xai(args, config, root, manifest):
    ds = _load_data(root, config, manifest)
    settings = config["xai"]
    mode = args.mode or settings.get("mode", "attention")
    subject = args.subject
    if subject is not None and subject not in ds.subjects:
        raise ConfigError(f"unknown subject {subject!r}")
    per_plane = {}
    for plane in PLANES:
        if not _available_folds(root, plane):
            raise IoFailure(f"missing checkpoints for plane {plane}; "
                            "the explanation needs one trained model per plane")
        per_plane[plane] = _owning_checkpoints(_fold_checkpoints(root, plane, manifest), subject)

    out_dir = root / "xai" / (f"subject_{subject}" if subject else "")
    out_dir.mkdir(parents=True, exist_ok=True)
    shape = ds.samples[0][0].shape
    if mode == "attention":
        fold_means = _attention_means(ds, per_plane, subject, out_dir, manifest)
        plane_means = {p: mean_attention(w) for p, w in fold_means.items()}
        for plane, w in plane_means.items():
            path = out_dir / "attention" / f"{plane}_mean.txt"
            write_attention(w, path)
            manifest.add_output(path)
        amap = minmax_normalize(synthesize_map(plane_means["sagittal"], plane_means["coronal"],
                                               plane_means["axial"], grid_shape=shape))
        if all(len(w) >= 2 for w in fold_means.values()):
            for path in consistency_report(fold_means).write(out_dir / "consistency"):
                manifest.add_output(path)
    elif mode == "gradcam":
        amap = combine_gradcam(_gradcam_stack(ds, per_plane, subject, shape))
    else:
        raise ConfigError(f"unknown xai mode {mode!r}; expected 'attention' or 'gradcam'")

    heatmap = binarize(amap, float(settings.get("percentile", 99.9)))
    _save(Volume3D(amap.data), out_dir / "map.nii.gz", manifest)
    _save(Volume3D(heatmap.data.astype(np.float64)), out_dir / "heatmap.nii.gz", manifest)
    _save(overlay(_background(ds, subject), heatmap, float(settings.get("overlay_delta", 10.0))),
          out_dir / "overlay.nii.gz", manifest)
    print(f"{mode} map written to {out_dir}; heatmap selects {heatmap.count} voxels "
          f"(threshold {heatmap.threshold_value:.6g})")


def _attention_means(ds, per_plane, subject, out_dir: Path, manifest) -> Dict[str, list]:
    fold_means: Dict[str, list] = {}
    for plane, checkpoints in per_plane.items():
        fold_means[plane] = []
        for f, ck in checkpoints.items():
            model = ck.model
            if model.fusion != "attention":
                raise IncompatibleAggregation(f"{plane} fold {f} model has no attention layer")
            idx = _scan_indices(ds, ck, subject)
            data = prepare_samples([ds.samples[i] for i in idx], plane, model.n_slices,
                                   model.slice_size)
            _, _, alphas = predict(model, data.x)
            w = mean_attention([AttentionWeights(a / a.sum(), plane, s)
                                for a, s in zip(alphas, data.starts)])
            path = out_dir / "attention" / f"{plane}_fold{f}.txt"
            path.parent.mkdir(parents=True, exist_ok=True)
            write_attention(w, path)
            manifest.add_output(path)
            fold_means[plane].append(w)
    return fold_means


def _gradcam_stack(ds, per_plane, subject, shape) -> SaliencyStack:
    stacks = {}
    for plane, checkpoints in per_plane.items():
        maps = []
        for ck in checkpoints.values():
            model = ck.model
            idx = _scan_indices(ds, ck, subject)
            data = prepare_samples([ds.samples[i] for i in idx], plane, model.n_slices,
                                   model.slice_size)
            maps.extend(gradcam_sequence(model, x) for x in data.x)
        stacks[plane] = stack_plane(np.mean(maps, axis=0), plane, int(data.starts[0]), shape)
    return SaliencyStack(stacks["sagittal"], stacks["coronal"], stacks["axial"])


def cmd_quantify(args, config, root, manifest):
    xai_dir = root / "xai"
    map_path = Path(args.map) if args.map else xai_dir / "map.nii.gz"
    heat_path = Path(args.heatmap) if args.heatmap else xai_dir / "heatmap.nii.gz"
    atlas_path = Path(args.atlas) if args.atlas else dataset_dir(root, config) / "atlas.nii.gz"
    for path in (map_path, heat_path, atlas_path):
        if not path.exists():
            raise IoFailure(f"missing input {path}")
        manifest.add_input(path)
    atlas = load_atlas(atlas_path)
    top_n = int(args.top_n if args.top_n is not None else config["quantify"].get("top_n", 20))
    stats = region_stats(load_volume(map_path).data, load_volume(heat_path).data, atlas)
    report = rank_report(stats, top_n)
    out = root / "quantify"
    out.mkdir(parents=True, exist_ok=True)
    report.write(out / "regions.txt", out / "regions.tsv")
    manifest.add_output(out / "regions.txt")
    manifest.add_output(out / "regions.tsv")
    print(report.to_text(), end="")


def cmd_consistency(args, config, root, manifest):
    directory = Path(args.attention_dir) if args.attention_dir else root / "xai" / "attention"
    per_plane = {}
    for plane in PLANES:
        files = sorted(directory.glob(f"{plane}_fold*.txt"))
        for f in files:
            manifest.add_input(f)
        per_plane[plane] = [read_attention(f) for f in files]
    report = consistency_report(per_plane)
    out = root / "consistency"
    for path in report.write(out):
        manifest.add_output(path)
    for plane in PLANES:
        print(f"{plane}: max TV {report.max_distance(plane):.4f}, "
              f"argmax slices {report.argmax_indices(plane)}")


COMMANDS = {
    "phantom": cmd_phantom,
    "train": cmd_train,
    "eval": cmd_eval,
    "xai": cmd_xai,
    "quantify": cmd_quantify,
    "consistency": cmd_consistency,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override one config key, e.g. train.seed=3")
    common.add_argument("--output-root", help=f"output directory (else ${ENV_OUTPUT_ROOT})")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="slicexai", description="Slice-attention 3D classification and explanation pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("phantom", parents=[common], help="generate a synthetic dataset")
    p = sub.add_parser("train", parents=[common], help="cross-validated training per plane")
    p.add_argument("--fold", type=int, help="train only this fold")
    p.add_argument("--plane", choices=PLANES, help="train only this plane")
    p = sub.add_parser("eval", parents=[common], help="evaluate saved checkpoints")
    p.add_argument("--plane", choices=PLANES)
    p.add_argument("--aggregation", choices=AGGREGATIONS)
    p = sub.add_parser("xai", parents=[common], help="3D explanation maps from the plane models")
    p.add_argument("--mode", choices=["attention", "gradcam"])
    p.add_argument("--subject", help="explain one subject instead of the dataset mean")
    p = sub.add_parser("quantify", parents=[common], help="rank atlas regions by the heatmap")
    p.add_argument("--map")
    p.add_argument("--heatmap")
    p.add_argument("--atlas")
    p.add_argument("--top-n", type=int)
    p = sub.add_parser("consistency", parents=[common], help="fold-to-fold attention agreement")
    p.add_argument("--attention-dir")
    return parser


def exit_code_for(exc: BaseException) -> int:
    for types, code in EXIT_CODES:
        if isinstance(exc, types):
            return code
    return 1


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    manifest = RunManifest(args.command, args.config, None)
    root = None
    code = 0
    try:
        config = load_config(args.config, args.overrides)
        root = output_root(args, config)
        manifest.record["seed"] = config["train"].get("seed", 0)
        COMMANDS[args.command](args, config, root, manifest)
    except SliceXAIError as exc:
        code = exit_code_for(exc)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
    finally:
        manifest_root = root if root is not None else Path(
            args.output_root or os.environ.get(ENV_OUTPUT_ROOT) or "runs")
        try:
            manifest.write(manifest_root / "manifests", code)
        except OSError as exc:
            print(f"warning: could not write run manifest: {exc}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
