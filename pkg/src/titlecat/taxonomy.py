"""Category paths and the taxonomy built from them.

A category is addressed by a path of up to four level names rendered as
``"Animals & Pet Supplies > Pet Supplies > Dog Supplies > Dog Treats"``.
The separator is the three-character string ``" > "``; level names may
contain any other text, including a bare ``">"``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import MalformedPathError

PATH_SEPARATOR = " > "
MAX_DEPTH = 4


@dataclass(frozen=True, slots=True)
class CategoryPath:
    """An ordered tuple of 1 to 4 category level names."""

    levels: tuple[str, ...]

    def __post_init__(self) -> None:
        if not 1 <= len(self.levels) <= MAX_DEPTH:
            raise MalformedPathError(
                f"path must have 1 to {MAX_DEPTH} levels, got {len(self.levels)}"
            )
        for i, name in enumerate(self.levels):
            if not name or name != name.strip():
                raise MalformedPathError(
                    f"level {i + 1} is empty or untrimmed: {name!r}"
                )
            if PATH_SEPARATOR in name:
                raise MalformedPathError(
                    f"level {i + 1} contains the path separator: {name!r}"
                )

    @property
    def depth(self) -> int:
        return len(self.levels)

    def render(self) -> str:
        """Render the path back to its canonical string form."""
        return PATH_SEPARATOR.join(self.levels)

    def __str__(self) -> str:
        return self.render()


def parse_path(text: str) -> CategoryPath:
    """Parse a rendered category path.

    Args:
        text: a string such as ``"Apparel > Tops > T-Shirts"``.

    Returns:
        The parsed CategoryPath.

    Raises:
        MalformedPathError: empty input, more than 4 segments, or an
            empty segment; the message names the offending segment.
    """
    if not text or not text.strip():
        raise MalformedPathError("empty category path")
    segments = [s.strip() for s in text.split(PATH_SEPARATOR)]
    if len(segments) > MAX_DEPTH:
        raise MalformedPathError(
            f"path has {len(segments)} segments, maximum is {MAX_DEPTH}: {text!r}"
        )
    for i, segment in enumerate(segments):
        if not segment:
            raise MalformedPathError(f"segment {i + 1} of {text!r} is empty")
    return CategoryPath(tuple(segments))


def truncate(path: CategoryPath, level: int) -> CategoryPath:
    """Return the first ``min(level, depth)`` names of the path.

    Args:
        path: the path to shorten.
        level: requested depth, must be >= 1.
    """
    if level < 1:
        raise ValueError(f"level must be >= 1, got {level}")
    if level >= path.depth:
        return path
    return CategoryPath(path.levels[:level])


def agrees_to_level(first: CategoryPath, second: CategoryPath, level: int) -> bool:
    """True iff both paths reach ``level`` and their truncations match."""
    if first.depth < level or second.depth < level:
        return False
    return first.levels[:level] == second.levels[:level]


# ====== Taxonomy ======


@dataclass
class Taxonomy:
    """The prefix-closed set of category paths seen in a dataset.

    Each level keeps a dense label index: ids are assigned by
    lexicographic sort of the rendered truncations, so two taxonomies
    built from the same paths agree on every id.
    """

    _paths: set[CategoryPath] = field(default_factory=set)
    _level_labels: dict[int, list[str]] = field(default_factory=dict)
    _level_ids: dict[int, dict[str, int]] = field(default_factory=dict)

    @classmethod
    def from_paths(cls, paths: list[CategoryPath]) -> "Taxonomy":
        tax = cls()
        closed: set[CategoryPath] = set()
        for path in paths:
            for level in range(1, path.depth + 1):
                closed.add(truncate(path, level))
        tax._paths = closed
        by_level: dict[int, set[str]] = {}
        for path in closed:
            by_level.setdefault(path.depth, set()).add(path.render())
        for level, rendered in by_level.items():
            labels = sorted(rendered)
            tax._level_labels[level] = labels
            tax._level_ids[level] = {label: i for i, label in enumerate(labels)}
        return tax

    @property
    def depth(self) -> int:
        return max(self._level_labels) if self._level_labels else 0

    def __contains__(self, path: CategoryPath) -> bool:
        return path in self._paths

    def __len__(self) -> int:
        return len(self._paths)

    def level_labels(self, level: int) -> list[str]:
        """Rendered truncations at ``level`` in id order."""
        return list(self._level_labels.get(level, []))

    def label_id(self, level: int, path: CategoryPath) -> int:
        """Dense id of ``path`` truncated to ``level``."""
        rendered = truncate(path, level).render()
        ids = self._level_ids.get(level)
        if ids is None or rendered not in ids:
            raise KeyError(f"no label {rendered!r} at level {level}")
        return ids[rendered]
