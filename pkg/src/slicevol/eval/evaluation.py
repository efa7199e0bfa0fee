"""Cross-validated training, hold-out evaluation, latent PCA and report files."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .. import io
from ..baselines import fit_measurement_regression, predict_measurement_regression
from ..estimators import TRAINING_METHOD, Method, ci_estimate, estimate_volume
from ..phantom import CaseRecord
from ..vae.network import ModelConfig
from ..vae.training import Sample, TrainConfig, TrainedModel, train
from .folds import FoldSpec
from .metrics import cia, classify, mrva, pearson_r

log = logging.getLogger(__name__)

BASELINES = {"HE_single": "single", "HE_triple": "triple"}
PREDICTION_HEADER = ("case_id", "method", "volume_mL", "clamped", "eta", "theta",
                     "ci_lower", "ci_upper", "fold", "views")
REPORT_HEADER = ("method", "views", "MRVA", "STD", "R", "MCIA", "SEN", "SPE", "ACC")
METRIC_KEYS = ("MRVA", "STD", "R", "SEN", "SPE", "ACC", "CIA")


@dataclass
class CVConfig:
    model_config: ModelConfig
    train_config: TrainConfig
    views: int = 2
    ci_samples: int = 100
    ci_seed: int = 0


@dataclass
class MethodSummary:
    method: str
    mean: dict
    per_model: list[dict]


@dataclass
class EvalReport:
    views: int
    methods: dict[str, MethodSummary]
    predictions: list[dict]
    baselines: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def metric(self, method: str, key: str = "MRVA"):
        return self.methods[method].mean.get(key)

    def to_dict(self) -> dict:
        return {"views": self.views,
                "methods": {m: {"mean": s.mean, "per_model": s.per_model}
                            for m, s in self.methods.items()},
                "baselines": self.baselines,
                "config": self.config}


def view_tag(views: int) -> str:
    return "dual" if views == 2 else "single"


def training_methods_for(methods: Sequence[str]) -> list[str]:
    needed = []
    for m in methods:
        if m in BASELINES:
            continue
        tm = TRAINING_METHOD[Method(m)]
        if tm not in needed:
            needed.append(tm)
    return needed


def model_stem(out_dir, method: str, views: int, fold: int) -> Path:
    return Path(out_dir) / f"{method}_{view_tag(views)}_fold{fold}"


def train_folds(samples: Sequence[Sample], folds: FoldSpec, method: str, cfg: CVConfig,
                out_dir=None, resume: bool = False) -> list[TrainedModel]:
    """One model per non-hold-out fold, validated on that fold.

    With ``out_dir`` every model is saved together with its training log;
    ``resume`` keeps a checkpoint per fold so an interrupted run picks up
    where it stopped.
    """
    mc = ModelConfig(**{**cfg.model_config.to_dict(), "input_views": cfg.views})
    held = set(folds.holdout_indices()) if folds.holdout_fold is not None else set()
    models = []
    for k in folds.training_folds:
        train_idx, val_idx = folds.split(k)
        assert held.isdisjoint(train_idx), "hold-out case leaked into training"
        tc = TrainConfig(**{**asdict(cfg.train_config), "seed": cfg.train_config.seed + k})
        stem = None if out_dir is None else model_stem(out_dir, method, cfg.views, k)
        ckpt = log_path = None
        if stem is not None:
            stem.parent.mkdir(parents=True, exist_ok=True)
            log_path = stem.with_name(stem.name + ".log.csv")
            if resume:
                ckpt = stem.with_name(stem.name + ".ckpt")
        log.info("training %s (%s view) on fold %d: %d train, %d val",
                 method, view_tag(cfg.views), k, len(train_idx), len(val_idx))
        model = train([samples[i] for i in train_idx], mc, tc, method,
                      val_set=[samples[i] for i in val_idx],
                      checkpoint_path=ckpt, log_path=log_path)
        if stem is not None:
            model.save(stem)
        models.append(model)
    return models


def _safe_r(truth, pred):
    try:
        return pearson_r(truth, pred)
    except ValueError:
        return None


def _score(truth: np.ndarray, pred: np.ndarray, intervals=None) -> dict:
    m, s = mrva(truth, pred)
    cls = classify(truth, pred)
    out = {"MRVA": m, "STD": s, "R": _safe_r(truth, pred),
           "SEN": cls.sen, "SPE": cls.spe, "ACC": cls.acc}
    if intervals is not None:
        out["CIA"] = cia(truth, intervals)
    return out


def _average(per_model: list[dict]) -> dict:
    mean = {}
    for key in METRIC_KEYS:
        vals = [d[key] for d in per_model if d.get(key) is not None]
        if any(key in d for d in per_model):
            mean[key] = float(np.mean(vals)) if vals else None
    if "CIA" in mean:
        mean["MCIA"] = mean.pop("CIA")
    return mean


def _prediction_row(case_id, method, volume, clamped, fold, views, ci=None) -> dict:
    return {"case_id": case_id, "method": method, "volume_mL": volume, "clamped": clamped,
            "eta": None if ci is None else ci.eta, "theta": None if ci is None else ci.theta,
            "ci_lower": None if ci is None else ci.lower,
            "ci_upper": None if ci is None else ci.upper,
            "fold": fold, "views": view_tag(views)}


def evaluate_models(models: dict[str, list[TrainedModel]], records: Sequence[CaseRecord],
                    samples: Sequence[Sample], folds: FoldSpec, methods: Sequence[str],
                    cfg: CVConfig, include_baselines: bool = True) -> EvalReport:
    """Score every requested method on the hold-out fold, once per fold model."""
    test_idx = folds.holdout_indices()
    truth = np.array([records[i].volume_mL for i in test_idx], dtype=np.float64)
    per_model: dict[str, list[dict]] = {}
    rows: list[dict] = []

    for m in methods:
        if m in BASELINES:
            continue
        method = Method(m)
        fold_models = models[TRAINING_METHOD[method]]
        for k, model in zip(folds.training_folds, fold_models):
            preds, intervals = [], []
            for case_no, i in enumerate(test_idx):
                if method is Method.RVAE_FCNR_CI:
                    est, ci = ci_estimate(model, samples[i].slices, n=cfg.ci_samples,
                                          seed=cfg.ci_seed + case_no)
                    intervals.append(ci)
                else:
                    est, ci = estimate_volume(model, samples[i].slices, method), None
                preds.append(est.volume_mL)
                rows.append(_prediction_row(records[i].case_id, m, est.volume_mL, est.clamped,
                                            k, cfg.views, ci))
            scores = _score(truth, np.array(preds), intervals or None)
            per_model.setdefault(m, []).append({"fold": k, **scores})

    baseline_coefs: dict = {}
    if include_baselines:
        for name, mode in BASELINES.items():
            for k in folds.training_folds:
                train_idx, _ = folds.split(k)
                reg = fit_measurement_regression([records[i] for i in train_idx], mode)
                baseline_coefs.setdefault(name, []).append({"fold": k, **reg.to_dict()})
                preds = []
                for i in test_idx:
                    vol, clamped = predict_measurement_regression(reg, records[i].measurements)
                    preds.append(vol)
                    rows.append(_prediction_row(records[i].case_id, name, vol, clamped, k,
                                                cfg.views))
                per_model.setdefault(name, []).append({"fold": k, **_score(truth, np.array(preds))})

    summaries = {m: MethodSummary(m, _average(v), v) for m, v in per_model.items()}
    config = {"views": cfg.views, "model_config": cfg.model_config.to_dict(),
              "train_config": asdict(cfg.train_config), "ci_samples": cfg.ci_samples,
              "ci_seed": cfg.ci_seed, "folds": folds.to_dict()}
    return EvalReport(cfg.views, summaries, rows, baseline_coefs, config)


def cross_validate(records: Sequence[CaseRecord], samples: Sequence[Sample],
                   methods: Sequence[str], cfg: CVConfig, folds: FoldSpec,
                   out_dir=None) -> tuple[EvalReport, dict[str, list[TrainedModel]]]:
    """Train every model the requested methods need, then score them on the hold-out."""
    if len(records) != len(samples):
        raise ValueError("records and samples must be aligned")
    if folds.holdout_fold is None:
        raise ValueError("no hold-out defined")
    models = {tm: train_folds(samples, folds, tm, cfg, out_dir=out_dir)
              for tm in training_methods_for(methods)}
    return evaluate_models(models, records, samples, folds, methods, cfg), models


def latent_pca(mus) -> tuple[np.ndarray, np.ndarray]:
    """Project onto the top two principal axes; returns ``(coords [n, 2], variances [2])``."""
    X = np.asarray(mus, dtype=np.float64)
    if X.ndim != 2 or len(X) < 3:
        raise ValueError("need at least 3 latent vectors")
    Xc = X - X.mean(axis=0)
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    if len(s) < 2 or s[1] <= s[0] * 1e-12:
        raise ValueError("degenerate latent cloud: rank < 2")
    variances = s[:2] ** 2 / (len(X) - 1)
    return Xc @ vt[:2].T, variances


def write_report(report: EvalReport, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"json": out / "report.json", "csv": out / "report.csv",
             "predictions": out / "predictions.csv"}
    paths["json"].write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    rows = []
    for name, summary in report.methods.items():
        mean = summary.mean
        rows.append([name, view_tag(report.views)] + [mean.get(k) for k in REPORT_HEADER[2:]])
    io.write_csv(paths["csv"], REPORT_HEADER, rows)
    io.write_csv(paths["predictions"], PREDICTION_HEADER,
                 [[r[k] for k in PREDICTION_HEADER] for r in report.predictions])
    return paths
