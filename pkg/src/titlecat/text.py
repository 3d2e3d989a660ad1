"""Title normalization, n-gram features, and attribute masking.

Tokenization is deliberately light: lowercase, split on whitespace, then
split around a small set of punctuation characters while keeping
hyphenated and decimal tokens (``"1.2-oz"``) intact. The same tokens
feed the classifier features and the pair-diff tables, so anything
smarter than this must stay reversible by a plain space join.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources

from .errors import LexiconFormatError

TokenSeq = tuple[str, ...]

# Split around , / ( ) " ' always, and around "." unless it sits between
# two digits (keeps decimals such as "1.2-oz" whole).
_PUNCT_SPLIT = re.compile(r"""[,/()"']|(?<!\d)\.|\.(?!\d)""")

FNV_OFFSET_BASIS = 0x811C9DC5
FNV_PRIME = 0x01000193


def normalize_tokenize(title: str) -> TokenSeq:
    """Lowercase and tokenize a title.

    Args:
        title: raw title text.

    Returns:
        Tuple of tokens; empty fragments are dropped, so the result may
        be empty for punctuation-only input.
    """
    tokens: list[str] = []
    for chunk in title.lower().split():
        for fragment in _PUNCT_SPLIT.split(chunk):
            if fragment:
                tokens.append(fragment)
    return tuple(tokens)


def detokenize(tokens: TokenSeq) -> str:
    """Join tokens back into title text with single spaces."""
    return " ".join(tokens)


def extract_ngrams(tokens: TokenSeq, max_n: int) -> list[str]:
    """Unigrams followed by space-joined word n-grams for n = 2..max_n."""
    if max_n < 1:
        raise ValueError(f"max_n must be >= 1, got {max_n}")
    features = list(tokens)
    for n in range(2, max_n + 1):
        for i in range(len(tokens) - n + 1):
            features.append(" ".join(tokens[i : i + n]))
    return features


def fnv1a32(data: bytes) -> int:
    """32-bit FNV-1a hash of ``data``."""
    h = FNV_OFFSET_BASIS
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & 0xFFFFFFFF
    return h


def feature_index(feature: str, vocab: dict[str, int], buckets: int) -> int:
    """Map a feature string to a row of the embedding matrix.

    Unigrams present in the training vocabulary use their dense id; all
    other features (word n-grams and out-of-vocabulary unigrams) are
    hashed into ``buckets`` rows appended after the vocabulary.
    """
    idx = vocab.get(feature)
    if idx is not None:
        return idx
    return len(vocab) + fnv1a32(feature.encode("utf-8")) % buckets


# ====== Attribute lexicons ======


@dataclass(frozen=True)
class AttributeLexicon:
    """Named kinds of attribute words, e.g. ``color`` and ``size``.

    Masking is single-token: a token equal to a lexicon word is replaced
    by the kind's mask token, so the token count never changes.
    """

    kinds: dict[str, frozenset[str]]

    def __post_init__(self) -> None:
        seen: dict[str, str] = {}
        for kind, words in self.kinds.items():
            if not kind:
                raise LexiconFormatError("empty kind name")
            for word in words:
                other = seen.get(word)
                if other is not None and other != kind:
                    raise LexiconFormatError(
                        f"word {word!r} appears under both {other!r} and {kind!r}"
                    )
                seen[word] = kind

    @staticmethod
    def mask_token(kind: str) -> str:
        return f"<{kind}>"

    def kind_of(self, token: str) -> str | None:
        """The kind a token belongs to, or None."""
        for kind, words in self.kinds.items():
            if token in words:
                return kind
        return None

    def words(self, kind: str) -> frozenset[str]:
        return self.kinds[kind]


def parse_lexicon(text: str) -> AttributeLexicon:
    """Parse lexicon file content.

    Format: ``[kind]`` section headers, one lowercase word per line,
    ``#`` starts a comment, blank lines are ignored.

    Raises:
        LexiconFormatError: with the 1-based line number on a word
            outside any section or an empty section header.
    """
    kinds: dict[str, set[str]] = {}
    current: str | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip().lower()
            if not name:
                raise LexiconFormatError(f"line {lineno}: empty kind name")
            current = name
            kinds.setdefault(name, set())
            continue
        if current is None:
            raise LexiconFormatError(
                f"line {lineno}: word {line!r} appears before any [kind] header"
            )
        kinds[current].add(line.lower())
    return AttributeLexicon({k: frozenset(v) for k, v in kinds.items()})


def load_lexicon(path: str) -> AttributeLexicon:
    """Load an attribute lexicon from a text file."""
    with open(path, "r", encoding="utf-8") as fh:
        return parse_lexicon(fh.read())


def default_lexicon() -> AttributeLexicon:
    """The starter color/size lexicon shipped with the package."""
    text = (
        resources.files("titlecat")
        .joinpath("lexicons/colors_sizes.txt")
        .read_text(encoding="utf-8")
    )
    return parse_lexicon(text)


def mask_attributes(tokens: TokenSeq, lexicon: AttributeLexicon) -> TokenSeq:
    """Replace lexicon words with their kind's mask token."""
    masked = []
    for token in tokens:
        kind = lexicon.kind_of(token)
        masked.append(AttributeLexicon.mask_token(kind) if kind else token)
    return tuple(masked)
