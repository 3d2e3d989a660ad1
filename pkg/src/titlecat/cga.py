"""Generative augmentation from version-pair diffs.

Learns how catalog titles get rewritten between versions of the same
item (span substitutions extracted from pair diffs), generates variants
of labeled titles with the substitutions, keeps the variants that stay
close to their source under a similarity score, and retrains on the
union. Variants always carry the gold label of their source title.
"""

from __future__ import annotations

import logging
import math
import random
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Protocol, Sequence

import numpy as np

from .data import DEFAULT_PAIR_CAP, ItemGroup, LabeledExample, TitlePair, build_pairs
from .errors import EmptyDataError
from .model import (
    FlatModel,
    HierarchicalModel,
    Hyperparams,
    embed_title,
    train_flat,
    train_hft,
)
from .taxonomy import CategoryPath
from .text import TokenSeq, detokenize, normalize_tokenize

logger = logging.getLogger(__name__)

LEFT_SENTINEL = "<s>"
RIGHT_SENTINEL = "</s>"
MAX_SPAN_TOKENS = 3

Span = tuple[str, ...]


class PerturbationModel(Protocol):
    """Anything that can learn title rewrites and propose new ones."""

    def train(self, pairs: list[TitlePair]) -> None: ...

    def generate(self, title: str, n: int, seed: int) -> list[str]: ...


# ====== Diff extraction ======


def _lcs_matches(src: TokenSeq, tgt: TokenSeq) -> list[tuple[int, int]]:
    """Index pairs of one longest common subsequence of two token tuples."""
    lo = 0
    while lo < len(src) and lo < len(tgt) and src[lo] == tgt[lo]:
        lo += 1
    hi = 0
    while (
        hi < len(src) - lo
        and hi < len(tgt) - lo
        and src[len(src) - 1 - hi] == tgt[len(tgt) - 1 - hi]
    ):
        hi += 1
    mid_src = src[lo : len(src) - hi]
    mid_tgt = tgt[lo : len(tgt) - hi]

    n, m = len(mid_src), len(mid_tgt)
    lengths = np.zeros((n + 1, m + 1), dtype=np.int32)
    for i in range(n - 1, -1, -1):
        for j in range(m - 1, -1, -1):
            if mid_src[i] == mid_tgt[j]:
                lengths[i, j] = lengths[i + 1, j + 1] + 1
            else:
                lengths[i, j] = max(lengths[i + 1, j], lengths[i, j + 1])
    matches = [(k, k) for k in range(lo)]
    i = j = 0
    while i < n and j < m:
        if mid_src[i] == mid_tgt[j]:
            matches.append((lo + i, lo + j))
            i += 1
            j += 1
        elif lengths[i + 1, j] >= lengths[i, j + 1]:
            i += 1
        else:
            j += 1
    matches.extend(
        (len(src) - hi + k, len(tgt) - hi + k) for k in range(hi)
    )
    return matches


def _replaced_regions(
    src: TokenSeq, tgt: TokenSeq
) -> list[tuple[Span, Span, str, str]] | None:
    """Maximal replaced regions with their flanking common tokens.

    Returns None when the two sequences share no token at all. Regions
    where one side is empty (pure insertions or deletions) are not
    substitutions and are omitted.
    """
    matches = _lcs_matches(src, tgt)
    if not matches:
        return None
    regions = []
    bounds = [(-1, -1)] + matches + [(len(src), len(tgt))]
    for (pi, pj), (ni, nj) in zip(bounds, bounds[1:]):
        src_span = src[pi + 1 : ni]
        tgt_span = tgt[pj + 1 : nj]
        if not src_span or not tgt_span:
            continue
        left = src[pi] if pi >= 0 else LEFT_SENTINEL
        right = src[ni] if ni < len(src) else RIGHT_SENTINEL
        regions.append((src_span, tgt_span, left, right))
    return regions


# ====== Substitution model ======


@dataclass
class SubstitutionModel:
    """Counted span substitutions extracted from title-pair diffs.

    ``span_table`` maps each observed source span to the spans it was
    rewritten into; ``context_table`` maps the common tokens flanking a
    rewrite (with sentinels at title edges) to the replacement spans
    observed between them.
    """

    span_table: dict[Span, Counter] = field(default_factory=dict)
    context_table: dict[tuple[str, str], Counter] = field(default_factory=dict)
    trained_pairs: int = 0
    skipped_no_overlap: int = 0
    skipped_identical: int = 0

    def train(self, pairs: list[TitlePair]) -> None:
        """Fold pair diffs into the substitution tables."""
        for pair in pairs:
            src = normalize_tokenize(pair.source)
            tgt = normalize_tokenize(pair.target)
            if src == tgt:
                self.skipped_identical += 1
                continue
            regions = _replaced_regions(src, tgt)
            if regions is None:
                self.skipped_no_overlap += 1
                continue
            self.trained_pairs += 1
            for src_span, tgt_span, left, right in regions:
                if len(src_span) > MAX_SPAN_TOKENS or len(tgt_span) > MAX_SPAN_TOKENS:
                    continue
                self.span_table.setdefault(src_span, Counter())[tgt_span] += 1
                self.context_table.setdefault((left, right), Counter())[tgt_span] += 1

    def _sample_replacement(
        self, pool: Counter | None, occurrence: Span, rng: random.Random
    ) -> Span | None:
        """Count-weighted draw from a table entry, never the occurrence itself."""
        if not pool:
            return None
        items = sorted((s, c) for s, c in pool.items() if s != occurrence)
        if not items:
            return None
        spans = [s for s, _ in items]
        weights = [c for _, c in items]
        return rng.choices(spans, weights=weights, k=1)[0]

    def generate(self, title: str, n: int, seed: int) -> list[str]:
        """Up to ``n`` distinct rewritten titles, never the input itself."""
        if n < 1:
            raise ValueError(f"n must be at least 1, got {n}")
        tokens = normalize_tokenize(title)
        occurrences = sorted(
            (i, length)
            for length in range(1, MAX_SPAN_TOKENS + 1)
            for i in range(len(tokens) - length + 1)
            if tokens[i : i + length] in self.span_table
        )
        if not occurrences:
            return []
        rng = random.Random(seed)
        out: list[str] = []
        seen = {detokenize(tokens)}
        for _ in range(n):
            i, length = occurrences[rng.randrange(len(occurrences))]
            span = tokens[i : i + length]
            left = tokens[i - 1] if i > 0 else LEFT_SENTINEL
            right = tokens[i + length] if i + length < len(tokens) else RIGHT_SENTINEL
            replacement = self._sample_replacement(
                self.context_table.get((left, right)), span, rng
            )
            if replacement is None:
                replacement = self._sample_replacement(
                    self.span_table.get(span), span, rng
                )
            if replacement is None:
                continue
            text = detokenize(tokens[:i] + replacement + tokens[i + length :])
            if text in seen:
                continue
            seen.add(text)
            out.append(text)
        return out


def train_substitution_model(pairs: list[TitlePair]) -> SubstitutionModel:
    """Build the substitution tables from ordered title pairs."""
    if not pairs:
        raise EmptyDataError("no title pairs to train on")
    model = SubstitutionModel()
    model.train(pairs)
    return model


# ====== Similarity scores ======


def bleu(candidate: TokenSeq, reference: TokenSeq, max_n: int = 4) -> float:
    """Sentence similarity in [0, 1] from clipped n-gram precisions.

    Geometric mean of modified precisions for orders 1..max_n; orders
    with zero matches (n >= 2) are smoothed by adding one to both the
    match count and the candidate n-gram count; no unigram matches score
    0 outright. Candidates shorter than the reference are scaled by
    exp(1 - |reference| / |candidate|).
    """
    if max_n < 1:
        raise ValueError(f"max_n must be at least 1, got {max_n}")
    if not reference:
        raise ValueError("reference must be non-empty")
    if not candidate:
        return 0.0
    log_sum = 0.0
    for n in range(1, max_n + 1):
        cand_grams = Counter(
            candidate[i : i + n] for i in range(len(candidate) - n + 1)
        )
        ref_grams = Counter(
            reference[i : i + n] for i in range(len(reference) - n + 1)
        )
        matched = sum(min(c, ref_grams[g]) for g, c in cand_grams.items())
        total = max(len(candidate) - n + 1, 0)
        if matched == 0:
            if n == 1:
                return 0.0
            matched, total = matched + 1, total + 1
        log_sum += math.log(matched / total)
    score = math.exp(log_sum / max_n)
    if len(candidate) < len(reference):
        score *= math.exp(1.0 - len(reference) / len(candidate))
    return score


def cosine_score(embedder: FlatModel, first: str, second: str) -> float:
    """Cosine similarity of title embeddings, clamped to [0, 1]."""
    v1 = embed_title(embedder, normalize_tokenize(first))
    v2 = embed_title(embedder, normalize_tokenize(second))
    n1 = float(np.linalg.norm(v1))
    n2 = float(np.linalg.norm(v2))
    if n1 == 0.0 or n2 == 0.0:
        return 0.0
    return max(0.0, float(np.dot(v1, v2)) / (n1 * n2))


# ====== Filtering and the full run ======


@dataclass(frozen=True, slots=True)
class AugmentedRow:
    """One generated variant with its source, inherited label, and score."""

    source: str
    generated: str
    category: CategoryPath
    score: float


def filter_augmented(rows: list[AugmentedRow], threshold: float) -> list[AugmentedRow]:
    """Rows scoring at least ``threshold``; count is non-increasing in it."""
    return [row for row in rows if row.score >= threshold]


@dataclass(frozen=True)
class CgaConfig:
    """Knobs for the generate-filter-retrain pipeline."""

    n_per_sample: int = 8
    score: str = "bleu"
    threshold: float = 0.7
    target_size: int | None = None
    pair_cap: int = DEFAULT_PAIR_CAP
    hp: Hyperparams = field(default_factory=Hyperparams)
    seed: int = 0
    threads: int = 1

    def __post_init__(self) -> None:
        if self.n_per_sample < 1:
            raise ValueError(f"n_per_sample must be at least 1, got {self.n_per_sample}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"threshold must be in [0, 1], got {self.threshold}")
        if self.score not in ("bleu", "embed_cosine"):
            raise ValueError(f"unknown score {self.score!r}")
        if self.target_size is not None and self.target_size < 1:
            raise ValueError(f"target_size must be at least 1, got {self.target_size}")


@dataclass
class CgaResult:
    model: HierarchicalModel
    d_aug: list[AugmentedRow]
    manifest: dict


def _row_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _score_histogram(scores: list[float], width: float = 0.05) -> dict[str, int]:
    hist: Counter = Counter()
    for s in scores:
        hist[f"{math.floor(round(s / width, 9)) * width:.2f}"] += 1
    return dict(sorted(hist.items()))


def run_cga(
    dl: list[LabeledExample],
    du: list[ItemGroup],
    config: CgaConfig,
    external_generations: Mapping[str, Sequence[str]] | None = None,
) -> CgaResult:
    """Generate, score, filter, and retrain.

    Builds ordered pairs from the groups, learns the substitution model,
    rewrites each labeled title ``n_per_sample`` times, keeps rewrites
    scoring at least ``threshold`` against their source (optionally
    sub-sampled to ``target_size``), and trains the final model on the
    labeled data plus the kept rows.

    Args:
        dl: labeled examples; each is a generation source.
        du: clustered unlabeled groups (ignored when
            ``external_generations`` is given).
        config: generation, scoring, and training knobs.
        external_generations: optional mapping of source title to
            pre-generated variants, replacing pair building, model
            training, and generation.

    Returns:
        CgaResult with the final model, the kept rows, and a manifest of
        per-stage counts plus the score histogram.
    """
    if not dl:
        raise EmptyDataError("no labeled examples")
    timings: dict[str, float] = {}
    pair_count: int | None = None
    skipped_no_overlap: int | None = None
    skipped_identical: int | None = None

    t0 = time.perf_counter()
    if external_generations is None:
        pairs = build_pairs(du, cap=config.pair_cap, seed=config.seed)
        sub = train_substitution_model(pairs)
        pair_count = len(pairs)
        skipped_no_overlap = sub.skipped_no_overlap
        skipped_identical = sub.skipped_identical
        timings["train_perturbation"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        generations = [
            sub.generate(ex.title, config.n_per_sample, _row_seed(config.seed, i))
            for i, ex in enumerate(dl)
        ]
        timings["generate"] = time.perf_counter() - t0
    else:
        generations = [list(external_generations.get(ex.title, ())) for ex in dl]

    t0 = time.perf_counter()
    embedder: FlatModel | None = None
    if config.score == "embed_cosine":
        embedder = train_flat(
            [(normalize_tokenize(ex.title), ex.category) for ex in dl],
            1, config.hp, config.seed, threads=config.threads,
        )
    rows: list[AugmentedRow] = []
    for ex, variants in zip(dl, generations):
        source_tokens = normalize_tokenize(ex.title)
        for text in variants:
            if config.score == "bleu":
                s = bleu(normalize_tokenize(text), source_tokens)
            else:
                s = cosine_score(embedder, text, ex.title)
            rows.append(
                AugmentedRow(source=ex.title, generated=text, category=ex.category, score=s)
            )
    timings["score"] = time.perf_counter() - t0

    kept = filter_augmented(rows, config.threshold)
    subsampled_to: int | None = None
    if config.target_size is not None and len(kept) > config.target_size:
        rng = random.Random(config.seed)
        chosen = sorted(rng.sample(range(len(kept)), config.target_size))
        kept = [kept[i] for i in chosen]
        subsampled_to = len(kept)

    if not kept:
        logger.warning("CGA augmentation set is empty; model equals the baseline")

    t0 = time.perf_counter()
    examples = [(normalize_tokenize(ex.title), ex.category) for ex in dl]
    examples.extend(
        (normalize_tokenize(row.generated), row.category) for row in kept
    )
    model = train_hft(examples, config.hp, config.seed, threads=config.threads)
    timings["train_final"] = time.perf_counter() - t0

    manifest = {
        "score": config.score,
        "threshold": config.threshold,
        "n_per_sample": config.n_per_sample,
        "target_size": config.target_size,
        "external": external_generations is not None,
        "pairs": pair_count,
        "pairs_skipped_no_overlap": skipped_no_overlap,
        "pairs_skipped_identical": skipped_identical,
        "sources": len(dl),
        "sources_with_variants": sum(1 for v in generations if v),
        "generated": sum(len(v) for v in generations),
        "kept": sum(1 for r in rows if r.score >= config.threshold),
        "subsampled_to": subsampled_to,
        "augmented_examples": len(kept),
        "labeled_examples": len(dl),
        "score_histogram": _score_histogram([r.score for r in rows]),
        "seed": config.seed,
        "hp": config.hp.to_dict(),
        "timings_s": {k: round(v, 3) for k, v in timings.items()},
    }
    return CgaResult(model=model, d_aug=kept, manifest=manifest)
