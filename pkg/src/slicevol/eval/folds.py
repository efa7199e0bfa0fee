"""Stratified fold assignment with a designated hold-out fold."""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from ..phantom import CaseRecord

log = logging.getLogger(__name__)


@dataclass
class FoldSpec:
    """Folds hold dataset positions, so repeated case ids stay distinguishable."""

    n_folds: int
    holdout_fold: Optional[int]
    folds: list[list[int]]
    case_ids: list[str]
    splenomegaly_counts: list[int]

    def fold_case_ids(self, k: int) -> list[str]:
        return [self.case_ids[i] for i in self.folds[k]]

    @property
    def training_folds(self) -> list[int]:
        return [k for k in range(self.n_folds) if k != self.holdout_fold]

    def holdout_indices(self) -> list[int]:
        if self.holdout_fold is None:
            raise ValueError("no hold-out defined")
        return list(self.folds[self.holdout_fold])

    def split(self, val_fold: int) -> tuple[list[int], list[int]]:
        """Training and validation positions when ``val_fold`` validates."""
        if val_fold == self.holdout_fold:
            raise ValueError("the hold-out fold cannot be a validation fold")
        train = [i for k in self.training_folds if k != val_fold for i in self.folds[k]]
        return sorted(train), list(self.folds[val_fold])

    def to_dict(self) -> dict:
        return {"n_folds": self.n_folds, "holdout_fold": self.holdout_fold,
                "folds": [list(map(int, f)) for f in self.folds],
                "case_ids": list(self.case_ids),
                "splenomegaly_counts": list(self.splenomegaly_counts)}

    @classmethod
    def from_dict(cls, d: dict) -> "FoldSpec":
        return cls(int(d["n_folds"]), d["holdout_fold"], [list(f) for f in d["folds"]],
                   list(d["case_ids"]), list(d["splenomegaly_counts"]))

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "FoldSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def make_folds(records: Sequence[CaseRecord], n_folds: int = 5, seed: int = 0,
               holdout: Union[str, int, None] = "auto") -> FoldSpec:
    """Deal shuffled positives, then shuffled negatives, round-robin over the folds.

    Continuing the round-robin from where the positives stopped keeps fold
    sizes within one of each other. ``holdout='auto'`` picks the first fold
    with the fewest enlarged cases; ``None`` leaves every fold for training.
    """
    n = len(records)
    if n_folds < 2:
        raise ValueError("need at least 2 folds")
    if n < n_folds:
        raise ValueError(f"too few cases: {n} cases for {n_folds} folds")
    rng = np.random.default_rng(seed)
    flags = np.array([r.splenomegaly for r in records])
    positives = rng.permutation(np.flatnonzero(flags))
    negatives = rng.permutation(np.flatnonzero(~flags))
    folds: list[list[int]] = [[] for _ in range(n_folds)]
    for slot, idx in enumerate(np.concatenate([positives, negatives])):
        folds[slot % n_folds].append(int(idx))
    folds = [sorted(f) for f in folds]
    counts = [int(flags[f].sum()) for f in folds]

    if holdout == "auto":
        holdout = int(np.argmin(counts))
    elif holdout is not None:
        holdout = int(holdout)
        if not 0 <= holdout < n_folds:
            raise ValueError(f"holdout fold {holdout} out of range")

    ids = [r.case_id for r in records]
    dupes = [cid for cid, c in Counter(ids).items() if c > 1]
    if dupes:
        log.warning("duplicate case ids %s; folds are assigned by position", dupes)
    return FoldSpec(n_folds, holdout, folds, ids, counts)
