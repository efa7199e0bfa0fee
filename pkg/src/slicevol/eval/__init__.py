from .evaluation import (
    BASELINES,
    CVConfig,
    EvalReport,
    cross_validate,
    evaluate_models,
    latent_pca,
    train_folds,
    write_report,
)
from .folds import FoldSpec, make_folds
from .metrics import cia, classify, mrva, pearson_r, rva, splenomegaly_metrics

__all__ = [
    "BASELINES", "CVConfig", "EvalReport", "FoldSpec", "cia", "classify", "cross_validate",
    "evaluate_models", "latent_pca", "make_folds", "mrva", "pearson_r", "rva",
    "splenomegaly_metrics", "train_folds", "write_report",
]
