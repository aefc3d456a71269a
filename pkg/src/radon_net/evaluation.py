"""Scenario-filtered pair enumeration, ROC/AUC and class score matrices."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .dataset import DatasetIndex
from . import autodiff as ad
from .model import SiameseModel, head_score

SCENARIOS = ("both_known", "both_novel", "mixed", "all")
DEFAULT_MAX_PAIRS = 20_000


class EvaluationError(ValueError):
    pass


def admits(scenario: str, split_a: str, split_b: str) -> bool:
    if scenario == "all":
        return True
    if scenario == "both_known":
        return split_a == split_b == "known"
    if scenario == "both_novel":
        return split_a == split_b == "novel"
    if scenario == "mixed":
        return {split_a, split_b} == {"known", "novel"}
    raise EvaluationError(f"unknown scenario {scenario!r}; choose from {SCENARIOS}")


def all_scenario_pairs(index: DatasetIndex, scenario: str) -> list[tuple[str, str, int]]:
    """Every admissible (domain-0 image, domain-1 image, label) triple, in index order."""
    if scenario not in SCENARIOS:
        raise EvaluationError(f"unknown scenario {scenario!r}; choose from {SCENARIOS}")
    if scenario != "all" and not index.is_split:
        raise EvaluationError(f"scenario {scenario} needs a known/novel split in the manifest")
    out = []
    for ca in index.classes:
        left = index.images(ca, 0)
        if not left:
            continue
        for cb in index.classes:
            if not admits(scenario, index.split_of(ca), index.split_of(cb)):
                continue
            label = int(ca == cb)
            for ra in left:
                for rb in index.images(cb, 1):
                    out.append((ra.image_id, rb.image_id, label))
    return out


def _subsample(rng: np.random.Generator, items: list, k: int) -> list:
    if len(items) <= k:
        return items
    keep = np.sort(rng.choice(len(items), size=k, replace=False))
    return [items[i] for i in keep]


def _balanced(pos: list, neg: list, max_pairs: int, seed: int) -> list:
    if len(pos) + len(neg) <= max_pairs:
        return pos + neg
    rng = np.random.default_rng(seed)
    if not pos:
        return _subsample(rng, neg, max_pairs)
    k = min(max_pairs // 2, len(pos), len(neg))
    return _subsample(rng, pos, k) + _subsample(rng, neg, k)


def enumerate_eval_pairs(index: DatasetIndex, scenario: str, max_pairs: int = DEFAULT_MAX_PAIRS,
                         seed: int = 0) -> list[tuple[str, str, int]]:
    """Cross-domain evaluation pairs for one scenario.

    Positives come before negatives.  When the full set exceeds
    ``max_pairs`` an equal number of each label is drawn uniformly.  The
    ``mixed`` scenario can only produce negatives.
    """
    if max_pairs < 2:
        raise EvaluationError(f"max_pairs must be >= 2, got {max_pairs}")
    pairs = all_scenario_pairs(index, scenario)
    pos = [p for p in pairs if p[2] == 1]
    neg = [p for p in pairs if p[2] == 0]
    if scenario != "mixed" and not pos:
        raise EvaluationError(f"scenario {scenario} has no admissible positive pairs")
    if not pos and not neg:
        raise EvaluationError(f"scenario {scenario} has no admissible pairs")
    return _balanced(pos, neg, max_pairs, seed)


def roc_pairs(index: DatasetIndex, scenario: str, max_pairs: int = DEFAULT_MAX_PAIRS,
              seed: int = 0) -> list[tuple[str, str, int]]:
    """Pairs that feed a scenario's ROC.

    ``mixed`` has no positives of its own, so its known-vs-novel negatives
    are scored against the true matches of every class.
    """
    if scenario != "mixed":
        return enumerate_eval_pairs(index, scenario, max_pairs, seed)
    neg = all_scenario_pairs(index, "mixed")
    pos = [p for p in all_scenario_pairs(index, "all") if p[2] == 1]
    if not neg:
        raise EvaluationError("scenario mixed has no known/novel pairs")
    if not pos:
        raise EvaluationError("scenario mixed: index has no positive pairs to score against")
    return _balanced(pos, neg, max_pairs, seed)


# ------------------------------------------------------------------ ROC


@dataclass
class RocCurve:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float
    auc_exact: Fraction = field(repr=False, default=Fraction(0))
    n_pos: int = 0
    n_neg: int = 0

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["threshold", "fpr", "tpr"])
            for t, f, p in zip(self.thresholds, self.fpr, self.tpr):
                w.writerow([repr(float(t)), repr(float(f)), repr(float(p))])
        return path


def compute_roc(scores: Sequence[float], labels: Sequence[int]) -> RocCurve:
    """ROC with one point per distinct score, swept from high to low.

    The first point (0, 0) carries threshold ``inf``.  AUC is the trapezoid
    area computed in exact integer arithmetic.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise EvaluationError(f"scores and labels must be equal-length vectors, got {s.shape} and {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise EvaluationError("labels must be 0 or 1")
    if np.isnan(s).any():
        raise EvaluationError("scores contain NaN")
    n_pos = int(y.sum())
    n_neg = int(len(y) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError("ROC needs both positive and negative labels")
    distinct, inverse = np.unique(-s, return_inverse=True)  # ascending in -s == descending in s
    tp = np.concatenate([[0], np.cumsum(np.bincount(inverse, weights=y, minlength=len(distinct)))]).astype(np.int64)
    fp = np.concatenate([[0], np.cumsum(np.bincount(inverse, weights=1 - y, minlength=len(distinct)))]).astype(np.int64)
    area2 = int(np.sum((fp[1:] - fp[:-1]) * (tp[1:] + tp[:-1]), dtype=object))
    exact = Fraction(area2, 2 * n_pos * n_neg)
    thresholds = np.concatenate([[np.inf], -distinct])
    return RocCurve(thresholds, fp / n_neg, tp / n_pos, float(exact), exact, n_pos, n_neg)


# ------------------------------------------------------------- scoring


class PairScorer:
    """Scores (image id, image id) pairs, caching branch features per image.

    Each image passes through its branch once; a pair then costs only the
    head.  Results are memoized per pair.
    """

    def __init__(self, model: SiameseModel, loader: Callable, batch_size: int = 64):
        self.model = model
        self.loader = loader
        self.batch_size = batch_size
        self._memo: dict[tuple[str, str], float] = {}
        self._feats: tuple[dict[str, np.ndarray], dict[str, np.ndarray]] = ({}, {})

    def _features(self, side: int, ids: Sequence[str]) -> None:
        cache = self._feats[side]
        branch = self.model.branch_a if side == 0 else self.model.branch_b
        todo = [i for i in dict.fromkeys(ids) if i not in cache]
        with ad.no_grad():
            for start in range(0, len(todo), self.batch_size):
                chunk = todo[start:start + self.batch_size]
                f = branch(ad.Tensor(self.loader.stack(chunk))).data
                for i, row in zip(chunk, f):
                    cache[i] = row

    def __call__(self, pairs: Sequence[tuple[str, str]]) -> np.ndarray:
        todo = list(dict.fromkeys(p for p in pairs if p not in self._memo))
        self._features(0, [p[0] for p in todo])
        self._features(1, [p[1] for p in todo])
        fa_cache, fb_cache = self._feats
        step = 4096
        with ad.no_grad():
            for start in range(0, len(todo), step):
                chunk = todo[start:start + step]
                fa = ad.Tensor(np.stack([fa_cache[p[0]] for p in chunk]))
                fb = ad.Tensor(np.stack([fb_cache[p[1]] for p in chunk]))
                for p, v in zip(chunk, head_score(self.model, fa, fb).data[:, 0]):
                    self._memo[p] = float(v)
        return np.array([self._memo[p] for p in pairs], dtype=np.float64)


@dataclass
class ScoreMatrix:
    classes: list[str]
    mean: np.ndarray
    counts: np.ndarray

    def diagonal_mean(self) -> float:
        return float(np.mean(np.diag(self.mean)))

    def off_diagonal_mean(self) -> float:
        n = len(self.classes)
        if n < 2:
            return float("nan")
        mask = ~np.eye(n, dtype=bool)
        return float(self.mean[mask].mean())

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["domain0_class\\domain1_class", *self.classes])
            for c, row in zip(self.classes, self.mean):
                w.writerow([c, *(repr(float(v)) for v in row)])
        counts_path = path.with_name(path.stem + "_counts.csv")
        with counts_path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["domain0_class\\domain1_class", *self.classes])
            for c, row in zip(self.classes, self.counts):
                w.writerow([c, *(int(v) for v in row)])
        return path


def score_matrix(model: SiameseModel, index: DatasetIndex, class_subset: Sequence[str],
                 samples_per_cell: int, seed: int, loader: Callable,
                 scorer: Optional[PairScorer] = None) -> ScoreMatrix:
    """Mean score for each (domain-0 class, domain-1 class) cell."""
    classes = list(class_subset)
    if not classes:
        raise EvaluationError("score_matrix needs at least one class")
    if samples_per_cell < 1:
        raise EvaluationError(f"samples_per_cell must be >= 1, got {samples_per_cell}")
    for c in classes:
        if c not in index.classes:
            raise EvaluationError(f"class {c!r} not in the index")
        if not index.images(c, 0) or not index.images(c, 1):
            raise EvaluationError(f"class {c!r} lacks images in one of the domains")
    rng = np.random.default_rng(seed)
    cells = []
    for ca in classes:
        for cb in classes:
            cand = [(ra.image_id, rb.image_id) for ra in index.images(ca, 0) for rb in index.images(cb, 1)]
            cells.append(_subsample(rng, cand, samples_per_cell))
    scorer = scorer or PairScorer(model, loader)
    flat = scorer([p for cell in cells for p in cell])
    n = len(classes)
    mean = np.empty((n, n))
    counts = np.empty((n, n), dtype=np.int64)
    pos = 0
    for k, cell in enumerate(cells):
        vals = flat[pos:pos + len(cell)]
        pos += len(cell)
        total = 0.0
        for v in vals:  # fixed reduction order
            total += v
        mean.flat[k] = total / len(cell)
        counts.flat[k] = len(cell)
    return ScoreMatrix(classes, mean, counts)


# ------------------------------------------------------------- evaluate


@dataclass
class EvalReport:
    seed: int
    max_pairs: int
    scenarios: dict = field(default_factory=dict)
    curves: dict = field(default_factory=dict, repr=False)

    def auc(self, scenario: str) -> float:
        return self.scenarios[scenario]["auc"]

    def to_dict(self) -> dict:
        return {"seed": self.seed, "max_pairs": self.max_pairs, "scenarios": self.scenarios}


def evaluate(model: SiameseModel, index: DatasetIndex, scenarios: Sequence[str], max_pairs: int,
             seed: int, out_dir, loader: Callable, plots: bool = True,
             scorer: Optional[PairScorer] = None) -> EvalReport:
    """ROC + AUC per scenario, written as ``roc_<scenario>.csv`` and ``summary.json``."""
    for sc in scenarios:
        if sc not in SCENARIOS:
            raise EvaluationError(f"unknown scenario {sc!r}; choose from {SCENARIOS}")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    scorer = scorer or PairScorer(model, loader)
    report = EvalReport(seed=seed, max_pairs=max_pairs)
    for sc in scenarios:
        pairs = roc_pairs(index, sc, max_pairs, seed)
        scores = scorer([(a, b) for a, b, _ in pairs])
        curve = compute_roc(scores, [lab for _, _, lab in pairs])
        report.curves[sc] = curve
        entry = {"auc": curve.auc, "n_pos": curve.n_pos, "n_neg": curve.n_neg}
        if out is not None:
            curve.write_csv(out / f"roc_{sc}.csv")
            entry["csv"] = f"roc_{sc}.csv"
        report.scenarios[sc] = entry
    if out is not None:
        (out / "summary.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n",
                                          encoding="utf-8")
        if plots:
            from .plotting import plot_roc

            for sc, curve in report.curves.items():
                plot_roc({sc: curve}, out / f"roc_{sc}.svg")
            plot_roc(report.curves, out / "roc.svg")
    return report
