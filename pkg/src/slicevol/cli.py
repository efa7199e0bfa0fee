"""Command-line front end: generate, preprocess, train, estimate, evaluate, visualize.

Every command reads one JSON run configuration (``--config``). Missing
sections fall back to the full-scale defaults. Exit codes: 0 success,
2 configuration error, 3 data error, 4 training failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np
import torch

from . import __version__
from .estimators import TRAINING_METHOD, Method, ci_estimate, estimate_volume
from .eval import plots
from .eval.evaluation import (BASELINES, PREDICTION_HEADER, CVConfig, evaluate_models,
                              latent_pca, model_stem, train_folds, training_methods_for,
                              view_tag, write_report)
from .eval.folds import FoldSpec, make_folds
from . import io
from .phantom import DatasetConfig, LabelVolume, VolumeRanges, make_dataset, read_manifest
from .preprocess import CanonicalGrid, PreprocessConfig, SlicePair, preprocess_volume
from .vae.network import ModelConfig
from .vae.training import METHOD_HEADS, Sample, TrainConfig, TrainedModel

log = logging.getLogger("slicevol")

SCHEMA_VERSION = 1
EXIT_CONFIG, EXIT_DATA, EXIT_TRAINING = 2, 3, 4
ESTIMATION_METHODS = [m.value for m in Method]

_triple_num = {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3}
_triple_int = {"type": "array", "items": {"type": "integer"}, "minItems": 3, "maxItems": 3}
_pair = {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["schema_version"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "seed": {"type": "integer"},
        "views": {"enum": ["single", "dual"]},
        "methods": {"type": "array", "items": {"enum": ESTIMATION_METHODS + list(BASELINES)}},
        "paths": {
            "type": "object", "additionalProperties": False,
            "properties": {"data_dir": {"type": "string"}, "output_dir": {"type": "string"}},
        },
        "phantom": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "n": {"type": "integer"},
                "splenomegaly_fraction": {"type": "number", "minimum": 0, "maximum": 1},
                "grid_dims": _triple_int,
                "voxel_size_mm": _triple_num,
                "normal_mL": _pair, "normal_mean_sd": _pair,
                "splenomegaly_mL": _pair, "splenomegaly_mean_sd": _pair,
                "max_rotation_deg": {"type": "number", "minimum": 0},
                "max_bend": {"type": "number", "minimum": 0, "maximum": 1},
                "max_taper": {"type": "number", "minimum": 0, "maximum": 1},
                "max_lobulation": {"type": "number", "minimum": 0, "exclusiveMaximum": 0.5},
            },
        },
        "grid": {
            "type": "object", "additionalProperties": False,
            "properties": {"dims": _triple_int, "voxel_size_mm": _triple_num},
        },
        "preprocess": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "mode_filter_k": {"type": "integer", "minimum": 1},
                "image_size": {"type": "integer", "minimum": 1},
                "n_augment": {"type": "integer", "minimum": 0},
                "max_rotation_deg": {"type": "number", "minimum": 0},
                "export_png": {"type": "boolean"},
            },
        },
        "model_config": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "latent_dim": {"type": "integer", "minimum": 1},
                "input_views": {"enum": [1, 2]},
                "encoder_blocks": {"type": "integer", "minimum": 1},
                "decoder_blocks": {"type": "integer", "minimum": 1},
                "channel_widths": {"type": "array", "items": {"type": "integer", "minimum": 1},
                                   "minItems": 1},
                "fcn_hidden": {"type": "integer", "minimum": 1},
            },
        },
        "train_config": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "w1": {"type": "number", "minimum": 0},
                "w2": {"type": "number", "minimum": 0},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "phase1_epochs": {"type": "integer", "minimum": 0},
                "max_epochs": {"type": ["integer", "null"], "minimum": 0},
                "volume_scale": {"type": "number", "exclusiveMinimum": 0},
                "plr_lambda": {"type": "number", "minimum": 0},
                "checkpoint_every": {"type": "integer", "minimum": 1},
                "grid_search": {"type": ["object", "null"]},
            },
        },
        "folds": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "n_folds": {"type": "integer", "minimum": 2},
                "holdout": {"anyOf": [{"const": "auto"}, {"type": "integer", "minimum": 0},
                                      {"type": "null"}]},
            },
        },
        "ci_samples": {"type": "integer", "minimum": 2},
    },
}


class CLIError(Exception):
    code = 1


class ConfigError(CLIError):
    code = EXIT_CONFIG


class DataError(CLIError):
    code = EXIT_DATA


class TrainingError(CLIError):
    code = EXIT_TRAINING


@dataclass
class RunConfig:
    data_dir: Path
    output_dir: Path
    dataset: DatasetConfig
    n_cases: int
    splenomegaly_fraction: float
    preprocess: PreprocessConfig
    export_png: bool
    model_config: ModelConfig
    train_config: TrainConfig
    methods: list[str]
    views: int
    seed: int
    n_folds: int
    holdout: object
    ci_samples: int
    raw: dict = field(default_factory=dict)

    def cv_config(self) -> CVConfig:
        return CVConfig(self.model_config, self.train_config, self.views, self.ci_samples,
                        ci_seed=self.seed)


def _parse_method(name: str) -> list[str]:
    """Map an estimation or training method name to estimation method names."""
    if name in ESTIMATION_METHODS or name in BASELINES:
        return [name]
    if name in METHOD_HEADS:
        return [m.value for m, tm in TRAINING_METHOD.items() if tm == name]
    raise ConfigError(f"unknown method {name!r}; choose from "
                      f"{ESTIMATION_METHODS + list(BASELINES) + list(METHOD_HEADS)}")


def load_config(path: Optional[str], args) -> RunConfig:
    """Read, validate and materialize the run configuration; writes nothing."""
    raw = {"schema_version": SCHEMA_VERSION}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}")
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}")

    seed = args.seed if getattr(args, "seed", None) is not None else raw.get("seed", 0)
    views_name = getattr(args, "views", None) or raw.get("views", "dual")
    views = 2 if views_name == "dual" else 1
    paths = raw.get("paths", {})
    ph = dict(raw.get("phantom", {}))
    grid = raw.get("grid", {})
    pre = dict(raw.get("preprocess", {}))
    mc_raw = dict(raw.get("model_config", {}))
    if "input_views" in mc_raw and mc_raw["input_views"] != views:
        raise ConfigError(f"config mismatch: views={views_name} but "
                          f"model_config.input_views={mc_raw['input_views']}")

    try:
        ranges = VolumeRanges(**{k: tuple(ph.pop(k)) for k in list(ph)
                                 if k in VolumeRanges.__dataclass_fields__})
        n_cases = ph.pop("n", 149)
        fraction = ph.pop("splenomegaly_fraction", 36 / 149)
        for key in ("grid_dims", "voxel_size_mm"):
            if key in ph:
                ph[key] = tuple(ph[key])
        dataset = DatasetConfig(ranges=ranges, **ph)
        canon = CanonicalGrid(tuple(grid.get("dims", dataset.grid_dims)),
                              tuple(grid.get("voxel_size_mm", dataset.voxel_size_mm)))
        export_png = pre.pop("export_png", False)
        preprocess = PreprocessConfig(grid=canon, **pre)
        model_config = ModelConfig(**{**mc_raw, "input_views": views,
                                      "image_size": preprocess.image_size})
        train_config = TrainConfig(**{**raw.get("train_config", {}), "seed": seed})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}")

    method_names = getattr(args, "method", None) or raw.get(
        "methods", ["NN", "PLR", "RVAE_LR", "RVAE_FCNR", "RVAE_FCNR_CI"])
    methods: list[str] = []
    for name in method_names:
        for m in _parse_method(name):
            if m not in methods:
                methods.append(m)

    folds = raw.get("folds", {})
    data_dir = Path(paths.get("data_dir", "data"))
    output_dir = Path(paths.get("output_dir", "runs"))
    out = getattr(args, "out", None)
    if out is not None:
        if args.command in ("generate", "preprocess"):
            data_dir = Path(out)
        else:
            output_dir = Path(out)
    return RunConfig(
        data_dir=data_dir, output_dir=output_dir, dataset=dataset, n_cases=n_cases,
        splenomegaly_fraction=fraction, preprocess=preprocess, export_png=export_png,
        model_config=model_config, train_config=train_config, methods=methods, views=views,
        seed=seed, n_folds=folds.get("n_folds", 5), holdout=folds.get("holdout", "auto"),
        ci_samples=raw.get("ci_samples", 100), raw=raw)


# ----------------------------------------------------------------------------- data access

def _require_dir(path: Path, what: str) -> None:
    if not path.is_dir():
        raise DataError(f"missing {what}: {path}")


def _records(cfg: RunConfig):
    manifest = cfg.data_dir / "manifest.csv"
    if not manifest.exists():
        raise DataError(f"missing data: {manifest} (run 'generate' first)")
    try:
        return read_manifest(manifest)
    except (KeyError, ValueError) as exc:
        raise DataError(f"bad manifest: {exc}")


def _slice_paths(data_dir: Path, case_id: str) -> tuple[Path, Path]:
    base = data_dir / "slices"
    return base / f"{case_id}.slice2d", base / f"{case_id}.aug.slice2d"


def _load_sample(data_dir: Path, case_id: str, volume_mL, image_size: int,
                 with_aug: bool = True) -> Sample:
    clean_path, aug_path = _slice_paths(data_dir, case_id)
    if not clean_path.exists():
        raise DataError(f"missing data: slices for {case_id} (run 'preprocess' first)")
    clean, _ = io.read_slice2d(clean_path)
    if clean.shape[1:] != (image_size, image_size):
        raise DataError(f"config mismatch: slices for {case_id} are {clean.shape[1:]}, "
                        f"config expects {image_size}x{image_size}")
    aug = None
    if with_aug and aug_path.exists():
        flat, _ = io.read_slice2d(aug_path)
        aug = flat.reshape(-1, clean.shape[0], *clean.shape[1:])
    return Sample(case_id, volume_mL, clean, aug)


def _samples(cfg: RunConfig, records, with_aug: bool = True) -> list[Sample]:
    return [_load_sample(cfg.data_dir, r.case_id, r.volume_mL, cfg.preprocess.image_size,
                         with_aug) for r in records]


def _folds(cfg: RunConfig) -> FoldSpec:
    path = cfg.output_dir / "folds.json"
    if not path.exists():
        raise DataError("no hold-out defined: folds.json not found (run 'train' first)")
    folds = FoldSpec.load(path)
    if folds.holdout_fold is None:
        raise DataError("no hold-out defined")
    return folds


def _load_models(cfg: RunConfig, folds: FoldSpec, methods) -> dict[str, list[TrainedModel]]:
    models = {}
    for tm in training_methods_for(methods):
        fold_models = []
        for k in folds.training_folds:
            stem = model_stem(cfg.output_dir / "models", tm, cfg.views, k)
            if not stem.with_name(stem.name + ".model.json").exists():
                raise DataError(f"missing models: {stem} (run 'train' for {tm}, "
                                f"{view_tag(cfg.views)} view)")
            fold_models.append(TrainedModel.load(stem))
        models[tm] = fold_models
    return models


# ----------------------------------------------------------------------------- commands

def cmd_generate(cfg: RunConfig) -> int:
    try:
        cases = make_dataset(cfg.n_cases, cfg.splenomegaly_fraction, out_dir=cfg.data_dir,
                             seed=cfg.seed, config=cfg.dataset)
    except ValueError as exc:
        raise ConfigError(str(exc))
    n_big = sum(rec.splenomegaly for _, rec in cases)
    print(f"generated {len(cases)} cases ({n_big} splenomegaly) in {cfg.data_dir}")
    return 0


def cmd_preprocess(cfg: RunConfig) -> int:
    records = _records(cfg)
    for i, rec in enumerate(records):
        path = cfg.data_dir / "volumes" / f"{rec.case_id}.seg3d"
        if not path.exists():
            raise DataError(f"missing data: {path}")
        vol = LabelVolume.load(path)
        try:
            clean, variants = preprocess_volume(vol, cfg.preprocess, seed=cfg.seed * 100000 + i)
        except ValueError as exc:
            raise DataError(f"{rec.case_id}: {exc}")
        clean_path, aug_path = _slice_paths(cfg.data_dir, rec.case_id)
        clean.save(clean_path)
        if variants:
            stack = np.concatenate([v.stack(2) for v in variants])
            io.write_slice2d(aug_path, stack, rec.case_id)
        if cfg.export_png:
            clean.export_png(cfg.data_dir / "png" / rec.case_id)
    print(f"preprocessed {len(records)} cases into {cfg.data_dir / 'slices'}")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    records = _records(cfg)
    samples = _samples(cfg, records)
    folds = make_folds(records, cfg.n_folds, seed=cfg.seed, holdout=cfg.holdout)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    folds.save(cfg.output_dir / "folds.json")
    if folds.holdout_fold is None:
        log.warning("no hold-out fold; every fold is used for training")
    cv = cfg.cv_config()
    for tm in training_methods_for(cfg.methods):
        try:
            models = train_folds(samples, folds, tm, cv, out_dir=cfg.output_dir / "models",
                                 resume=True)
        except ValueError as exc:
            raise DataError(str(exc))
        except (RuntimeError, FloatingPointError) as exc:
            raise TrainingError(f"training {tm} failed: {exc}")
        print(f"trained {len(models)} {tm} models ({view_tag(cfg.views)} view)")
    return 0


def cmd_estimate(cfg: RunConfig) -> int:
    """Estimate every preprocessed case with every fold model; no ground truth needed."""
    _require_dir(cfg.data_dir / "slices", "data")
    folds = FoldSpec.load(cfg.output_dir / "folds.json") if (
        cfg.output_dir / "folds.json").exists() else None
    if folds is None:
        raise DataError("missing models: folds.json not found (run 'train' first)")
    methods = [m for m in cfg.methods if m not in BASELINES]
    models = _load_models(cfg, folds, methods)
    rows = []
    paths = sorted(p for p in (cfg.data_dir / "slices").glob("*.slice2d")
                   if not p.name.endswith(".aug.slice2d"))
    for case_no, path in enumerate(paths):
        pair = SlicePair.load(path)
        for m in methods:
            method = Method(m)
            for k, model in zip(folds.training_folds, models[TRAINING_METHOD[method]]):
                ci = None
                try:
                    if method is Method.RVAE_FCNR_CI:
                        est, ci = ci_estimate(model, pair, n=cfg.ci_samples,
                                              seed=cfg.seed + case_no)
                    else:
                        est = estimate_volume(model, pair, method)
                except ValueError as exc:
                    raise DataError(f"{pair.case_id}: {exc}")
                rows.append([pair.case_id, m, est.volume_mL, est.clamped,
                             None if ci is None else ci.eta, None if ci is None else ci.theta,
                             None if ci is None else ci.lower, None if ci is None else ci.upper,
                             k, view_tag(cfg.views)])
    out = cfg.output_dir / f"estimates_{view_tag(cfg.views)}.csv"
    io.write_csv(out, PREDICTION_HEADER, rows)
    print(f"wrote {len(rows)} estimates to {out}")
    return 0


def _report_dir(cfg: RunConfig) -> Path:
    return cfg.output_dir / f"report_{view_tag(cfg.views)}"


def _pca_plots(cfg, models, records, samples, out_dir) -> list[Path]:
    written = []
    for tm, fold_models in models.items():
        model = fold_models[0]
        mus = np.stack([model.encode(s.slices).mu for s in samples])
        vols = [r.volume_mL for r in records]
        try:
            coords, var = latent_pca(mus)
        except ValueError as exc:
            log.warning("skipping latent PCA for %s: %s", tm, exc)
            continue
        written.append(plots.plot_latent_pca(
            coords, vols, out_dir / f"latent_pca_{tm}.svg", var,
            title=f"{tm} latent means ({view_tag(cfg.views)} view)"))
    return written


def _scatter_plot(report_dir: Path, predictions, records, views) -> Path:
    truth = {r.case_id: r.volume_mL for r in records}
    series: dict[str, tuple[list, list]] = {}
    for row in predictions:
        t, p = series.setdefault(row["method"], ([], []))
        t.append(truth[row["case_id"]])
        p.append(float(row["volume_mL"]))
    return plots.plot_predicted_vs_true(series, report_dir / "predicted_vs_true.svg",
                                        title=f"hold-out predictions ({view_tag(views)} view)")


def cmd_evaluate(cfg: RunConfig) -> int:
    folds = _folds(cfg)
    records = _records(cfg)
    if [r.case_id for r in records] != folds.case_ids:
        raise DataError("config mismatch: manifest does not match the cases used in training")
    samples = _samples(cfg, records, with_aug=False)
    models = _load_models(cfg, folds, cfg.methods)
    report = evaluate_models(models, records, samples, folds, cfg.methods, cfg.cv_config())
    out = _report_dir(cfg)
    paths = write_report(report, out)
    _scatter_plot(out, report.predictions, records, cfg.views)
    _pca_plots(cfg, models, records, samples, out)
    for name, summary in report.methods.items():
        m = summary.mean
        extra = f"  MCIA {m['MCIA']:.2f}" if m.get("MCIA") is not None else ""
        print(f"{name:14s} MRVA {m['MRVA']:6.2f} ± {m['STD']:5.2f}{extra}")
    print(f"report written to {paths['json'].parent}")
    return 0


def cmd_visualize(cfg: RunConfig) -> int:
    folds = _folds(cfg)
    records = _records(cfg)
    samples = _samples(cfg, records, with_aug=False)
    models = _load_models(cfg, folds, cfg.methods)
    out = _report_dir(cfg)
    written = _pca_plots(cfg, models, records, samples, out)
    pred_path = out / "predictions.csv"
    if pred_path.exists():
        written.append(_scatter_plot(out, io.read_csv(pred_path), records, cfg.views))
    for s in samples[:8]:
        SlicePair.from_stack(s.slices, s.case_id).export_png(out / "slices" / s.case_id)
    print(f"wrote {len(written)} figures to {out}")
    return 0


HELP = {
    "generate": "synthesize phantom volumes and manifest.csv",
    "preprocess": "canonicalize volumes and extract slice pairs plus augmented variants",
    "train": "train one model per cross-validation fold for each needed training method",
    "estimate": "estimate volumes for every preprocessed case with every fold model",
    "evaluate": "score the hold-out fold and write report files and plots",
    "visualize": "latent PCA and prediction scatter plots, slice PNGs",
}

COMMANDS = {"generate": cmd_generate, "preprocess": cmd_preprocess, "train": cmd_train,
            "estimate": cmd_estimate, "evaluate": cmd_evaluate, "visualize": cmd_visualize}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slicevol", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--method", action="append",
                       help="estimation or training method (repeatable)")
        p.add_argument("--views", choices=("single", "dual"))
        p.add_argument("--out", help="output directory (data dir for generate/preprocess)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("SLICEVOL_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    try:
        cfg = load_config(args.config, args)
        return COMMANDS[args.command](cfg)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
