"""Evaluation: weighted F1, consistency rate, and the dual objective.

Both metrics compare full rendered paths: an exact path match defines a
class for F1, and a pair is consistent only when the two predictions
agree on every level. Per-level consistency rates are reported as
diagnostics alongside.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .data import LabeledExample, TitlePair
from .errors import DataError
from .model import HierarchicalModel, predict_hft_batch
from .taxonomy import CategoryPath

DEFAULT_LAMBDA = 1.0


def accuracy(golds: list[CategoryPath], preds: list[CategoryPath]) -> float:
    """Fraction of exact full-path matches."""
    if not golds or len(golds) != len(preds):
        raise DataError(f"need equal non-empty gold/pred lists, got {len(golds)}/{len(preds)}")
    return sum(g == p for g, p in zip(golds, preds)) / len(golds)


def per_class_scores(
    golds: list[CategoryPath], preds: list[CategoryPath]
) -> dict[str, dict[str, float]]:
    """Precision, recall, F1, and gold support per full-path class."""
    if not golds or len(golds) != len(preds):
        raise DataError(f"need equal non-empty gold/pred lists, got {len(golds)}/{len(preds)}")
    tp: dict[str, int] = {}
    gold_n: dict[str, int] = {}
    pred_n: dict[str, int] = {}
    for g, p in zip(golds, preds):
        gk, pk = g.render(), p.render()
        gold_n[gk] = gold_n.get(gk, 0) + 1
        pred_n[pk] = pred_n.get(pk, 0) + 1
        if gk == pk:
            tp[gk] = tp.get(gk, 0) + 1
    scores = {}
    for label in sorted(set(gold_n) | set(pred_n)):
        hits = tp.get(label, 0)
        n_pred = pred_n.get(label, 0)
        n_gold = gold_n.get(label, 0)
        precision = hits / n_pred if n_pred else 0.0
        recall = hits / n_gold if n_gold else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        scores[label] = {
            "precision": precision,
            "recall": recall,
            "f1": f1,
            "support": float(n_gold),
        }
    return scores


def weighted_f1(golds: list[CategoryPath], preds: list[CategoryPath]) -> float:
    """Gold-support-weighted mean of per-class F1 scores.

    Classes predicted but never gold have zero support and do not
    contribute to the average.
    """
    scores = per_class_scores(golds, preds)
    total = sum(s["support"] for s in scores.values())
    return sum(s["f1"] * s["support"] for s in scores.values()) / total


def dual_objective(acc: float, consistency: float, lam: float = DEFAULT_LAMBDA) -> float:
    """(1 - accuracy) + lambda * (1 - consistency)."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    return (1.0 - acc) + lam * (1.0 - consistency)


def lift(candidate: float, baseline: float) -> float:
    """Relative change (candidate - baseline) / baseline."""
    if baseline == 0:
        raise DataError("cannot compute a lift against a zero baseline")
    return (candidate - baseline) / baseline


def _pair_predictions(
    model: HierarchicalModel, pairs: list[TitlePair]
) -> tuple[list[CategoryPath], list[CategoryPath]]:
    preds = predict_hft_batch(
        model, [p.source for p in pairs] + [p.target for p in pairs]
    )
    paths = [p.path for p in preds]
    return paths[: len(pairs)], paths[len(pairs) :]


def consistency_rate(model: HierarchicalModel, pairs: list[TitlePair]) -> float:
    """Fraction of pairs whose two predictions share the full path."""
    if not pairs:
        raise DataError("consistency rate needs at least one pair")
    src, tgt = _pair_predictions(model, pairs)
    return sum(a == b for a, b in zip(src, tgt)) / len(pairs)


def per_level_consistency(
    src: list[CategoryPath], tgt: list[CategoryPath], depth: int
) -> dict[int, float]:
    """Agreement rate at each level; a path too shallow to reach a
    level counts as disagreement there."""
    rates = {}
    for level in range(1, depth + 1):
        agree = sum(
            a.depth >= level and b.depth >= level and a.levels[:level] == b.levels[:level]
            for a, b in zip(src, tgt)
        )
        rates[level] = agree / len(src)
    return rates


@dataclass
class EvalReport:
    """Full evaluation of one model; serializes to a stable JSON form."""

    f1_weighted: float
    accuracy: float
    consistency: float
    dual_objective: float
    lam: float
    n_test: int
    n_pairs: int
    per_level_consistency: dict[int, float]
    per_class: dict[str, dict[str, float]]
    lifts: dict[str, float] = field(default_factory=dict)

    def summary_line(self) -> str:
        return (
            f"F1={self.f1_weighted:.4f} acc={self.accuracy:.4f} "
            f"consistency={self.consistency:.4f} dual={self.dual_objective:.4f}"
        )

    def to_json(self) -> str:
        payload = {
            "f1_weighted": self.f1_weighted,
            "accuracy": self.accuracy,
            "consistency": self.consistency,
            "dual_objective": self.dual_objective,
            "lambda": self.lam,
            "n_test": self.n_test,
            "n_pairs": self.n_pairs,
            "per_level_consistency": {str(k): v for k, v in self.per_level_consistency.items()},
            "per_class": self.per_class,
            "lifts": self.lifts,
        }
        return json.dumps(payload, sort_keys=True, ensure_ascii=False, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        raw = json.loads(text)
        return cls(
            f1_weighted=raw["f1_weighted"],
            accuracy=raw["accuracy"],
            consistency=raw["consistency"],
            dual_objective=raw["dual_objective"],
            lam=raw["lambda"],
            n_test=raw["n_test"],
            n_pairs=raw["n_pairs"],
            per_level_consistency={int(k): v for k, v in raw["per_level_consistency"].items()},
            per_class=raw["per_class"],
            lifts=raw.get("lifts", {}),
        )


def evaluate_model(
    model: HierarchicalModel,
    test: list[LabeledExample],
    pairs: list[TitlePair],
    lam: float = DEFAULT_LAMBDA,
    baseline: EvalReport | None = None,
) -> EvalReport:
    """Evaluate accuracy on labeled data and consistency on pairs.

    Args:
        model: model under test.
        test: held-out labeled examples (accuracy, F1).
        pairs: same-item title pairs (consistency).
        lam: weight of the consistency term in the dual objective.
        baseline: when given, relative lifts are included.
    """
    if not test:
        raise DataError("evaluation needs a non-empty labeled test set")
    if not pairs:
        raise DataError("evaluation needs a non-empty pair set")
    golds = [ex.category for ex in test]
    preds = [p.path for p in predict_hft_batch(model, [ex.title for ex in test])]
    src, tgt = _pair_predictions(model, pairs)
    consistency = sum(a == b for a, b in zip(src, tgt)) / len(pairs)
    acc = accuracy(golds, preds)
    f1 = weighted_f1(golds, preds)
    report = EvalReport(
        f1_weighted=f1,
        accuracy=acc,
        consistency=consistency,
        dual_objective=dual_objective(acc, consistency, lam),
        lam=lam,
        n_test=len(test),
        n_pairs=len(pairs),
        per_level_consistency=per_level_consistency(src, tgt, model.depth),
        per_class=per_class_scores(golds, preds),
    )
    if baseline is not None:
        report.lifts = {
            "f1_weighted": lift(f1, baseline.f1_weighted),
            "consistency": lift(consistency, baseline.consistency),
        }
    return report
