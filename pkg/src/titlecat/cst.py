"""Self-training on clustered catalogs.

A base model labels every title of a group; one rule collapses those
predictions into a single group pseudo-label, and every title in the
group joins the augmentation set under that one label. Uniformity
within the group is the point: the final model is pushed to answer the
same way for every version of an item.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Literal

from .data import (
    DEFAULT_TV_TOLERANCE,
    ItemGroup,
    LabeledExample,
    SubsampleResult,
    l1_histogram,
    subsample_by_l1,
)
from .errors import DataError
from .model import (
    HierarchicalModel,
    Hyperparams,
    Prediction,
    predict_hft_batch,
    train_hft,
)
from .text import normalize_tokenize

logger = logging.getLogger(__name__)

GroupLabelRule = Literal["max_confidence", "majority_vote"]
DuMode = Literal["complete", "sub_sampled"]


def _rule_pick(predictions: list[Prediction], rule: str) -> Prediction:
    """Collapse per-title predictions into one group pseudo-label."""
    if rule == "max_confidence":
        best = predictions[0]
        for pred in predictions[1:]:
            if pred.confidence > best.confidence or (
                pred.confidence == best.confidence
                and pred.path.render() < best.path.render()
            ):
                best = pred
        return best
    if rule == "majority_vote":
        votes: dict[str, list[Prediction]] = {}
        for pred in predictions:
            votes.setdefault(pred.path.render(), []).append(pred)

        def rank(item: tuple[str, list[Prediction]]):
            rendered, preds = item
            mean_conf = sum(p.confidence for p in preds) / len(preds)
            # Most votes, then higher mean confidence, then smaller path.
            return (-len(preds), -mean_conf, rendered)

        rendered, preds = min(votes.items(), key=rank)
        return max(preds, key=lambda p: p.confidence)
    raise ValueError(f"unknown group label rule {rule!r}")


def assign_group_pseudo_labels(
    groups: list[ItemGroup], model: HierarchicalModel, rule: str = "max_confidence"
) -> list[Prediction]:
    """Pseudo-label every group with one batched prediction pass."""
    titles = [t for g in groups for t in g.titles]
    preds = predict_hft_batch(model, titles)
    out = []
    pos = 0
    for group in groups:
        k = len(group.titles)
        out.append(_rule_pick(preds[pos : pos + k], rule))
        pos += k
    return out


def assign_group_pseudo_label(
    group: ItemGroup, model: HierarchicalModel, rule: str = "max_confidence"
) -> Prediction:
    """Pseudo-label one group of same-item titles."""
    return assign_group_pseudo_labels([group], model, rule)[0]


@dataclass(frozen=True)
class CstConfig:
    mode: DuMode = "complete"
    rule: GroupLabelRule = "max_confidence"
    min_confidence: float | None = None
    tolerance: float = DEFAULT_TV_TOLERANCE
    hp: Hyperparams = field(default_factory=Hyperparams)
    seed: int = 0
    threads: int = 1


@dataclass
class CstResult:
    model: HierarchicalModel
    base_model: HierarchicalModel
    d_aug: list[LabeledExample]
    manifest: dict


def run_cst(
    dl: list[LabeledExample],
    du: list[ItemGroup],
    config: CstConfig,
    base_model: HierarchicalModel | None = None,
) -> CstResult:
    """Train a model on labeled data plus pseudo-labeled group titles.

    Args:
        dl: labeled examples.
        du: clustered unlabeled groups.
        config: mode, rule, optional confidence floor, hyperparameters.
        base_model: reuse a model already trained on ``dl`` with
            ``config.seed`` (bit-equivalent to training it here).

    Returns:
        CstResult with the final model, the base model, the
        augmentation rows, and a manifest of counts and timings.
    """
    if config.mode not in ("complete", "sub_sampled"):
        raise DataError(f"unknown du mode {config.mode!r}")
    timings: dict[str, float] = {}
    t0 = time.perf_counter()
    if base_model is None:
        base_model = train_hft(
            [(normalize_tokenize(ex.title), ex.category) for ex in dl],
            config.hp, config.seed, threads=config.threads,
        )
        timings["train_base"] = time.perf_counter() - t0

    subsample_info: SubsampleResult | None = None
    du_used = du
    if config.mode == "sub_sampled" and du:
        t0 = time.perf_counter()
        subsample_info = subsample_by_l1(
            du, l1_histogram(dl), base_model,
            tolerance=config.tolerance, seed=config.seed, rule=config.rule,
        )
        du_used = subsample_info.groups
        timings["subsample"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    d_aug: list[LabeledExample] = []
    skipped_floor = 0
    if du_used:
        pseudo = assign_group_pseudo_labels(du_used, base_model, rule=config.rule)
        for group, pred in zip(du_used, pseudo):
            if config.min_confidence is not None and pred.confidence < config.min_confidence:
                skipped_floor += 1
                continue
            for title in group.titles:
                d_aug.append(LabeledExample(title=title, category=pred.path))
    timings["pseudo_label"] = time.perf_counter() - t0

    if not d_aug:
        logger.warning("CST augmentation set is empty; model equals the baseline")

    t0 = time.perf_counter()
    examples = [(normalize_tokenize(ex.title), ex.category) for ex in dl + d_aug]
    model = train_hft(examples, config.hp, config.seed, threads=config.threads)
    timings["train_final"] = time.perf_counter() - t0

    manifest = {
        "mode": config.mode,
        "rule": config.rule,
        "min_confidence": config.min_confidence,
        "groups_in": len(du),
        "groups_used": len(du_used),
        "groups_below_floor": skipped_floor,
        "augmented_examples": len(d_aug),
        "labeled_examples": len(dl),
        "subsample": None if subsample_info is None else {
            "achieved_tv": subsample_info.achieved_tv,
            "tolerance": config.tolerance,
            "bin_counts": subsample_info.bin_counts,
            "estimated_bins": subsample_info.estimated_bins,
        },
        "seed": config.seed,
        "hp": config.hp.to_dict(),
        "timings_s": {k: round(v, 3) for k, v in timings.items()},
    }
    return CstResult(model=model, base_model=base_model, d_aug=d_aug, manifest=manifest)
