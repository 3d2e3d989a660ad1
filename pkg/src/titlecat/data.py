"""Dataset types and JSONL file formats.

Three row shapes, one JSON object per line:

* labeled:   ``{"title": ..., "category": "L1 > L2 > L3 > L4"}``
* clustered: ``{"group_id": ..., "titles": [...]}``
* pairs:     ``{"source": ..., "target": ..., "group_id": ...}``

Loaders are strict and name the offending line; savers emit a canonical
compact form, so load followed by save reproduces a canonical file
byte for byte.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass

from .errors import DataError, DataFormatError
from .taxonomy import CategoryPath, parse_path, truncate

DEFAULT_PAIR_CAP = 12
DEFAULT_TV_TOLERANCE = 0.05


@dataclass(frozen=True)
class LabeledExample:
    title: str
    category: CategoryPath


@dataclass(frozen=True)
class ItemGroup:
    """Distinct titles believed to describe versions of one item."""

    group_id: str | int
    titles: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(self.titles) < 2:
            raise DataError(
                f"group {self.group_id!r} has {len(self.titles)} distinct titles, need >= 2"
            )


@dataclass(frozen=True)
class TitlePair:
    source: str
    target: str
    group_id: str | int

    def __post_init__(self) -> None:
        if self.source == self.target:
            raise DataError(f"group {self.group_id!r}: pair with identical source and target")


# ====== JSONL io ======


def _parse_line(path: str, lineno: int, line: str) -> dict:
    if not line.strip():
        raise DataFormatError(f"{path}:{lineno}: blank line")
    try:
        row = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}:{lineno}: invalid JSON: {exc.msg}") from exc
    if not isinstance(row, dict):
        raise DataFormatError(f"{path}:{lineno}: expected a JSON object")
    return row


def _require_str(path: str, lineno: int, row: dict, key: str) -> str:
    value = row.get(key)
    if not isinstance(value, str) or not value.strip():
        raise DataFormatError(f"{path}:{lineno}: {key!r} must be a non-empty string")
    return value


def load_labeled(path: str) -> list[LabeledExample]:
    """Load labeled examples, validating titles and category paths."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            row = _parse_line(path, lineno, line)
            title = _require_str(path, lineno, row, "title")
            category = _require_str(path, lineno, row, "category")
            try:
                parsed = parse_path(category)
            except DataError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from exc
            rows.append(LabeledExample(title=title, category=parsed))
    return rows


def save_labeled(path: str, rows: list[LabeledExample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(
                {"title": row.title, "category": row.category.render()},
                ensure_ascii=False, separators=(",", ":"),
            ))
            fh.write("\n")


def load_clustered(path: str) -> list[ItemGroup]:
    """Load item groups.

    Exact duplicate titles within a group are collapsed (keeping first
    occurrence); a group left with fewer than 2 distinct titles or a
    repeated group_id is an error.
    """
    groups = []
    seen_ids: set[str | int] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            row = _parse_line(path, lineno, line)
            group_id = row.get("group_id")
            if not isinstance(group_id, (str, int)) or isinstance(group_id, bool):
                raise DataFormatError(f"{path}:{lineno}: 'group_id' must be a string or integer")
            if group_id in seen_ids:
                raise DataFormatError(f"{path}:{lineno}: duplicate group_id {group_id!r}")
            seen_ids.add(group_id)
            titles = row.get("titles")
            if not isinstance(titles, list) or not all(isinstance(t, str) and t.strip() for t in titles):
                raise DataFormatError(f"{path}:{lineno}: 'titles' must be a list of non-empty strings")
            distinct = list(dict.fromkeys(titles))
            if len(distinct) < 2:
                raise DataFormatError(
                    f"{path}:{lineno}: group {group_id!r} has fewer than 2 distinct titles"
                )
            groups.append(ItemGroup(group_id=group_id, titles=tuple(distinct)))
    return groups


def save_clustered(path: str, groups: list[ItemGroup]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for group in groups:
            fh.write(json.dumps(
                {"group_id": group.group_id, "titles": list(group.titles)},
                ensure_ascii=False, separators=(",", ":"),
            ))
            fh.write("\n")


def load_pairs(path: str) -> list[TitlePair]:
    pairs = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            row = _parse_line(path, lineno, line)
            source = _require_str(path, lineno, row, "source")
            target = _require_str(path, lineno, row, "target")
            group_id = row.get("group_id")
            if not isinstance(group_id, (str, int)) or isinstance(group_id, bool):
                raise DataFormatError(f"{path}:{lineno}: 'group_id' must be a string or integer")
            if source == target:
                raise DataFormatError(f"{path}:{lineno}: source equals target")
            pairs.append(TitlePair(source=source, target=target, group_id=group_id))
    return pairs


def save_pairs(path: str, pairs: list[TitlePair]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for pair in pairs:
            fh.write(json.dumps(
                {"source": pair.source, "target": pair.target, "group_id": pair.group_id},
                ensure_ascii=False, separators=(",", ":"),
            ))
            fh.write("\n")


# ====== Pair construction ======


def build_pairs(groups: list[ItemGroup], cap: int = DEFAULT_PAIR_CAP,
                seed: int = 0) -> list[TitlePair]:
    """All ordered within-group pairs, capped per group.

    A group with k titles yields k*(k-1) ordered pairs; groups over the
    cap contribute a seeded uniform sample of ``cap`` pairs instead, so
    the total is sum(min(k*(k-1), cap)).
    """
    if cap < 1:
        raise ValueError(f"cap must be >= 1, got {cap}")
    rng = random.Random(seed)
    pairs: list[TitlePair] = []
    for group in groups:
        ordered = [
            (a, b)
            for a in group.titles
            for b in group.titles
            if a != b
        ]
        if len(ordered) > cap:
            ordered = rng.sample(ordered, cap)
        pairs.extend(
            TitlePair(source=a, target=b, group_id=group.group_id) for a, b in ordered
        )
    return pairs


def split_consistency_test(
    groups: list[ItemGroup], n_groups: int, seed: int = 0
) -> tuple[list[TitlePair], list[ItemGroup]]:
    """Hold out one unordered title pair from each of ``n_groups`` groups.

    Returns the test pairs and the remaining groups; held-out groups are
    removed entirely so no training variant sees them.
    """
    if n_groups < 0:
        raise ValueError(f"n_groups must be >= 0, got {n_groups}")
    if n_groups > len(groups):
        raise DataError(f"cannot hold out {n_groups} of {len(groups)} groups")
    rng = random.Random(seed)
    chosen = sorted(rng.sample(range(len(groups)), n_groups))
    chosen_set = set(chosen)
    pairs = []
    for gi in chosen:
        group = groups[gi]
        a, b = sorted(rng.sample(range(len(group.titles)), 2))
        pairs.append(TitlePair(source=group.titles[a], target=group.titles[b],
                               group_id=group.group_id))
    remaining = [g for i, g in enumerate(groups) if i not in chosen_set]
    return pairs, remaining


# ====== Distribution-matched sub-sampling ======


@dataclass
class SubsampleResult:
    groups: list[ItemGroup]
    achieved_tv: float
    bin_counts: dict[str, int]
    estimated_bins: dict[str, int]


def l1_histogram(examples: list[LabeledExample]) -> dict[str, float]:
    """Normalized level-1 label histogram of a labeled dataset."""
    counts: dict[str, int] = {}
    for ex in examples:
        key = truncate(ex.category, 1).render()
        counts[key] = counts.get(key, 0) + 1
    total = sum(counts.values())
    return {k: v / total for k, v in counts.items()}


def _min_tv(target: dict[str, float], avail: dict[str, int], m: int) -> float:
    return sum(max(0.0, t - avail.get(k, 0) / m) for k, t in target.items())


def subsample_by_l1(
    groups: list[ItemGroup],
    target_hist: dict[str, float],
    fbase,
    tolerance: float = DEFAULT_TV_TOLERANCE,
    seed: int = 0,
    rule: str = "max_confidence",
) -> SubsampleResult:
    """Select the most groups whose estimated L1 histogram matches a target.

    Each group's L1 bin is the level-1 truncation of its pseudo-label
    under ``fbase``. Selection maximizes the group count subject to the
    total-variation distance between the selected bins and the target
    staying within ``tolerance``. When a bin holds more groups than its
    share allows, the lowest-confidence groups are dropped first, so the
    kept subset is also the most reliably pseudo-labeled one; ``seed``
    only breaks exact confidence ties.
    """
    from .cst import assign_group_pseudo_labels

    if not groups:
        raise DataError("cannot sub-sample an empty group list")
    total_target = sum(target_hist.values())
    if total_target <= 0:
        raise DataError("target histogram has no mass")
    target = {k: v / total_target for k, v in target_hist.items()}

    labels = assign_group_pseudo_labels(groups, fbase, rule=rule)
    bins: dict[str, list[int]] = {}
    for i, pred in enumerate(labels):
        bins.setdefault(truncate(pred.path, 1).render(), []).append(i)
    avail = {k: len(v) for k, v in bins.items()}

    # Groups whose estimated bin has no target mass can never help.
    usable = {k: n for k, n in avail.items() if target.get(k, 0) > 0}
    lo, hi = 1, sum(usable.values())
    if hi == 0 or _min_tv(target, usable, 1) > tolerance:
        raise DataError(
            f"cannot match target histogram within tolerance {tolerance}"
        )
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if _min_tv(target, usable, mid) <= tolerance:
            lo = mid
        else:
            hi = mid - 1
    m = lo

    rng = random.Random(seed)
    while m >= 1:
        counts: dict[str, int] = {}
        for k in sorted(target):
            counts[k] = min(usable.get(k, 0), int(target[k] * m))
        rem = m - sum(counts.values())
        while rem > 0:
            candidates = [k for k in sorted(target) if counts.get(k, 0) < usable.get(k, 0)]
            if not candidates:
                break
            best = min(candidates, key=lambda k: (counts[k] + 1) / m - target[k])
            counts[best] += 1
            rem -= 1
        selected_m = sum(counts.values())
        achieved = 0.5 * (
            sum(abs(counts.get(k, 0) / selected_m - t) for k, t in target.items())
            + sum(counts.get(k, 0) / selected_m for k in counts if k not in target)
        )
        if achieved <= tolerance:
            break
        m -= 1
    else:
        raise DataError(f"cannot match target histogram within tolerance {tolerance}")

    chosen: list[int] = []
    for k in sorted(counts):
        if counts[k] > 0:
            members = list(bins[k])
            rng.shuffle(members)
            members.sort(key=lambda i: labels[i].confidence, reverse=True)
            chosen.extend(members[: counts[k]])
    chosen_set = set(chosen)
    selected = [g for i, g in enumerate(groups) if i in chosen_set]
    return SubsampleResult(
        groups=selected,
        achieved_tv=achieved,
        bin_counts=dict(sorted(counts.items())),
        estimated_bins=dict(sorted(avail.items())),
    )
