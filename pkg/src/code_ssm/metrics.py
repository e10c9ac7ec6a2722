"""
Evaluation metrics for code-ssm tasks.

Retrieval MRR, classification accuracy and F1-macro, clone-detection
precision/recall/F1 and token-level type F1 with the UNK rule. All reductions
run in 64-bit with a fixed summation order so results do not depend on
sample order beyond floating-point associativity.
"""

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Optional, Sequence, Set, Tuple, Union

import numpy as np

from .exceptions import InvalidInputError, ShapeError
from .numerics import IGNORE_INDEX


logger = logging.getLogger(__name__)

TOP_TYPES = 100


@dataclass
class MetricReport:
    """Named metrics for one evaluated task."""

    task: str
    metrics: Dict[str, float] = field(default_factory=dict)
    n_samples: int = 0

    def __post_init__(self):
        for name, value in self.metrics.items():
            if not 0.0 <= value <= 1.0 + 1e-12:
                raise InvalidInputError(f"metric {name}={value} lies outside [0, 1]")

    def to_dict(self) -> Dict[str, object]:
        return {"task": self.task, "n_samples": self.n_samples,
                **{name: float(value) for name, value in self.metrics.items()}}

    def write_json(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        logger.info(f"Wrote {self.task} report to {path}: {self.metrics}")
        return path


def eval_mrr(similarity: np.ndarray, gold: Sequence[int]) -> float:
    """Mean reciprocal rank of each query's gold document.

    Rank 1 is the highest similarity; a document tied with the gold one
    outranks it only when its index is lower.
    """
    similarity = np.asarray(similarity, dtype=np.float64)
    gold = np.asarray(gold, dtype=np.int64)
    if similarity.ndim != 2 or gold.shape != (similarity.shape[0],):
        raise ShapeError(f"similarity {similarity.shape} and gold {gold.shape} do not align")
    if similarity.shape[0] == 0:
        raise InvalidInputError("no queries to rank")
    if np.any(gold < 0) or np.any(gold >= similarity.shape[1]):
        raise InvalidInputError("gold index outside the document range")

    rows = np.arange(similarity.shape[0])
    gold_scores = similarity[rows, gold][:, None]
    better = (similarity > gold_scores).sum(axis=1)
    tied_before = ((similarity == gold_scores) & (np.arange(similarity.shape[1])[None, :] < gold[:, None])).sum(axis=1)
    ranks = 1 + better + tied_before
    return float(np.sum(1.0 / ranks) / ranks.size)


def _check_pairs(preds: Sequence[int], golds: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    preds = np.asarray(preds, dtype=np.int64).reshape(-1)
    golds = np.asarray(golds, dtype=np.int64).reshape(-1)
    if preds.shape != golds.shape:
        raise ShapeError(f"{preds.size} predictions for {golds.size} gold labels")
    if preds.size == 0:
        raise InvalidInputError("no predictions to score")
    return preds, golds


def _f1(tp: float, fp: float, fn: float) -> float:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return 2 * precision * recall / (precision + recall) if precision + recall else 0.0


def eval_classification(preds: Sequence[int], golds: Sequence[int], scheme: str = "accuracy",
                        n_classes: Optional[int] = None) -> float:
    """Accuracy or F1-macro.

    F1-macro averages over every class that appears in either array (or over
    ``range(n_classes)`` when given); a class with no support and no
    predictions contributes 0.
    """
    preds, golds = _check_pairs(preds, golds)
    if scheme == "accuracy":
        return float(np.mean(preds == golds))
    if scheme != "f1_macro":
        raise InvalidInputError(f"unknown classification scheme {scheme!r}")

    classes = range(n_classes) if n_classes is not None else np.union1d(preds, golds)
    scores = []
    for cls in classes:
        tp = float(np.sum((preds == cls) & (golds == cls)))
        fp = float(np.sum((preds == cls) & (golds != cls)))
        fn = float(np.sum((preds != cls) & (golds == cls)))
        scores.append(_f1(tp, fp, fn))
    return float(np.mean(scores))


def eval_clone(preds: Sequence[int], golds: Sequence[int]) -> Tuple[float, float, float]:
    """Positive-class precision, recall and F1; precision is 0 without predicted positives."""
    preds, golds = _check_pairs(preds, golds)
    if not set(np.unique(np.concatenate([preds, golds]))) <= {0, 1}:
        raise InvalidInputError("clone detection labels must be 0 or 1")
    tp = float(np.sum((preds == 1) & (golds == 1)))
    fp = float(np.sum((preds == 1) & (golds == 0)))
    fn = float(np.sum((preds == 0) & (golds == 1)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return precision, recall, _f1(tp, fp, fn)


def top_types(gold_types: Iterable[Sequence[int]], unk_id: int, k: int = TOP_TYPES) -> Set[int]:
    """The ``k`` most frequent annotated gold types, UNK excluded; ties go to the lower id."""
    counts: Counter = Counter()
    for sequence in gold_types:
        counts.update(int(t) for t in sequence if t != IGNORE_INDEX and t != unk_id)
    ranked = sorted(counts.items(), key=lambda item: (-item[1], item[0]))
    return {type_id for type_id, _ in ranked[:k]}


def _flatten(sequences: Union[np.ndarray, Sequence[Sequence[int]]]) -> np.ndarray:
    if isinstance(sequences, np.ndarray):
        return sequences.reshape(-1).astype(np.int64)
    return np.asarray([int(t) for sequence in sequences for t in sequence], dtype=np.int64)


def eval_token_types(pred_types, gold_types, unk_id: int,
                     top_set: Optional[Set[int]] = None) -> Tuple[float, float]:
    """Micro-F1 over annotated positions and over positions whose gold type is in ``top_set``.

    Every position carries exactly one prediction, so micro precision equals
    micro recall equals the fraction correct. A prediction of ``unk_id`` is
    always wrong, including when the gold type is UNK. Positions whose gold
    value is the ignore marker are not annotated.
    """
    preds = _flatten(pred_types)
    golds = _flatten(gold_types)
    if preds.shape != golds.shape:
        raise ShapeError(f"{preds.size} predicted types for {golds.size} gold types")
    annotated = golds != IGNORE_INDEX
    correct = (preds == golds) & (preds != unk_id)

    total = int(annotated.sum())
    overall = float(correct[annotated].sum()) / total if total else 0.0
    if top_set is None:
        top_set = top_types([golds[annotated]], unk_id)
    in_top = annotated & np.isin(golds, np.asarray(sorted(top_set), dtype=np.int64))
    top_total = int(in_top.sum())
    top = float(correct[in_top].sum()) / top_total if top_total else 0.0
    return overall, top
