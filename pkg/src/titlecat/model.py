"""Flat linear classifiers and the level-wise hierarchical model.

Each flat model is a FastText-style bag of n-gram embeddings: the title
embedding is the mean of its feature embeddings and a linear layer with
softmax produces the label distribution. The hierarchical model trains
one flat model per taxonomy level on the same examples with labels
truncated to that level, and at inference accepts the deepest level
whose prediction still agrees with the previous one.

Training is plain SGD with a linearly decaying learning rate. With
``threads=1`` it is fully deterministic for a given seed; with more
threads workers apply updates to shared parameters without locking
(torn updates are tolerated and results vary run to run).
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import (
    DataFormatError,
    DegenerateTrainingError,
    EmptyDataError,
    TrainingError,
)
from .taxonomy import CategoryPath, parse_path, truncate
from .text import (
    AttributeLexicon,
    TokenSeq,
    extract_ngrams,
    feature_index,
    mask_attributes,
    normalize_tokenize,
)

MODEL_MAGIC = "HFTM1"


@dataclass(frozen=True)
class Hyperparams:
    """Shared training settings, recorded in every model file."""

    dim: int = 64
    lr0: float = 0.5
    epochs: int = 8
    max_n: int = 2
    buckets: int = 2_000_000

    def __post_init__(self) -> None:
        if self.dim < 1 or self.epochs < 1 or self.max_n < 1 or self.buckets < 1:
            raise ValueError(f"invalid hyperparameters: {self}")
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "lr0": self.lr0,
            "epochs": self.epochs,
            "max_n": self.max_n,
            "buckets": self.buckets,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Hyperparams":
        return cls(**data)


@dataclass(frozen=True)
class Prediction:
    """A hierarchical prediction.

    ``decided_level`` is the deepest level whose flat prediction was
    accepted; ``confidence`` is that level's softmax probability for the
    returned path.
    """

    path: CategoryPath
    confidence: float
    decided_level: int


# ====== SGD kernels ======


@njit(cache=True, nogil=True)
def _sgd_epoch(emb, out_w, feat_idx, feat_cnt, offsets, feat_total, labels,
               order, lr0, t_start, total_updates):
    """One pass over ``order``; returns (summed loss, examples counted)."""
    d = emb.shape[1]
    c = out_w.shape[0]
    h = np.zeros(d, dtype=np.float64)
    gh = np.zeros(d, dtype=np.float64)
    z = np.zeros(c, dtype=np.float64)
    p = np.zeros(c, dtype=np.float64)
    loss = 0.0
    n_counted = 0
    t = t_start
    for oi in range(order.shape[0]):
        i = order[oi]
        lr = lr0 * (1.0 - t / total_updates)
        t += 1
        start = offsets[i]
        end = offsets[i + 1]
        if end == start:
            continue
        total = feat_total[i]
        for j in range(d):
            h[j] = 0.0
        for k in range(start, end):
            row = feat_idx[k]
            cnt = feat_cnt[k]
            for j in range(d):
                h[j] += emb[row, j] * cnt
        inv = 1.0 / total
        for j in range(d):
            h[j] *= inv
        zmax = -1e300
        for cl in range(c):
            acc = 0.0
            for j in range(d):
                acc += out_w[cl, j] * h[j]
            z[cl] = acc
            if acc > zmax:
                zmax = acc
        zsum = 0.0
        for cl in range(c):
            p[cl] = np.exp(z[cl] - zmax)
            zsum += p[cl]
        y = labels[i]
        loss += -np.log(p[y] / zsum)
        n_counted += 1
        for j in range(d):
            gh[j] = 0.0
        for cl in range(c):
            g = p[cl] / zsum - (1.0 if cl == y else 0.0)
            glr = lr * g
            for j in range(d):
                gh[j] += g * out_w[cl, j]
                out_w[cl, j] -= np.float32(glr * h[j])
        scale = lr * inv
        for k in range(start, end):
            row = feat_idx[k]
            f = scale * feat_cnt[k]
            for j in range(d):
                emb[row, j] -= np.float32(f * gh[j])
    return loss, n_counted


@njit(cache=True, nogil=True)
def _hidden_batch(emb, feat_idx, feat_cnt, offsets, feat_total, out):
    """Mean feature embedding per example into ``out`` (zero if empty)."""
    d = emb.shape[1]
    n = offsets.shape[0] - 1
    for i in range(n):
        start = offsets[i]
        end = offsets[i + 1]
        if end == start:
            for j in range(d):
                out[i, j] = 0.0
            continue
        inv = 1.0 / feat_total[i]
        for j in range(d):
            acc = 0.0
            for k in range(start, end):
                acc += emb[feat_idx[k], j] * feat_cnt[k]
            out[i, j] = np.float32(acc * inv)
    return out


def softmax_loss_and_grads(emb_rows: np.ndarray, counts: np.ndarray, total: float,
                           out_w: np.ndarray, label: int):
    """Cross-entropy loss and analytic gradients for one example.

    Pure float64 reference for the SGD kernel's math: the hidden vector
    is the count-weighted mean of ``emb_rows`` divided by ``total``.

    Returns:
        (loss, gradient w.r.t. emb_rows, gradient w.r.t. out_w)
    """
    h = counts @ emb_rows / total
    z = out_w @ h
    z = z - z.max()
    p = np.exp(z)
    p /= p.sum()
    loss = -np.log(p[label])
    dz = p.copy()
    dz[label] -= 1.0
    grad_out = np.outer(dz, h)
    dh = out_w.T @ dz
    grad_rows = np.outer(counts, dh) / total
    return loss, grad_rows, grad_out


# ====== Flat models ======


@dataclass
class FlatModel:
    """One level of the hierarchy: embeddings plus a linear layer."""

    level: int
    labels: list[str]
    vocab: list[str]
    hp: Hyperparams
    input_emb: np.ndarray
    output_w: np.ndarray
    loss_history: list[float] = field(default_factory=list)
    _vocab_ids: dict[str, int] = field(default_factory=dict, repr=False)
    _label_paths: list[CategoryPath] = field(default_factory=list, repr=False)
    _feat_rows: dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        if not self._vocab_ids:
            self._vocab_ids = {w: i for i, w in enumerate(self.vocab)}
        if not self._label_paths:
            self._label_paths = [parse_path(lbl) for lbl in self.labels]

    @property
    def n_labels(self) -> int:
        return len(self.labels)

    def label_path(self, label_id: int) -> CategoryPath:
        return self._label_paths[label_id]

    def _row(self, feature: str) -> int:
        row = self._feat_rows.get(feature)
        if row is None:
            row = feature_index(feature, self._vocab_ids, self.hp.buckets)
            self._feat_rows[feature] = row
        return row

    def encode(self, tokens: TokenSeq) -> tuple[np.ndarray, np.ndarray, float]:
        """Map tokens to unique embedding rows with duplicate counts."""
        features = extract_ngrams(tokens, self.hp.max_n)
        rows = np.array([self._row(f) for f in features], dtype=np.int64)
        uniq, counts = np.unique(rows, return_counts=True)
        return uniq, counts.astype(np.float32), float(len(features))

    def hidden(self, tokens: TokenSeq) -> np.ndarray:
        """Mean feature embedding of a title (zero vector if empty)."""
        uniq, counts, total = self.encode(tokens)
        if total == 0:
            return np.zeros(self.hp.dim, dtype=np.float32)
        vec = counts.astype(np.float64) @ self.input_emb[uniq].astype(np.float64)
        return (vec / total).astype(np.float32)


def embed_title(model: FlatModel, tokens: TokenSeq) -> np.ndarray:
    """Title embedding under a flat model."""
    return model.hidden(tokens)


def _encode_dataset(items: list[tuple[np.ndarray, np.ndarray, float]]):
    """Flatten per-example encodings into kernel-friendly arrays."""
    n = len(items)
    offsets = np.zeros(n + 1, dtype=np.int64)
    for i, (uniq, _, _) in enumerate(items):
        offsets[i + 1] = offsets[i] + len(uniq)
    feat_idx = np.zeros(offsets[-1], dtype=np.int64)
    feat_cnt = np.zeros(offsets[-1], dtype=np.float32)
    feat_total = np.zeros(n, dtype=np.float32)
    for i, (uniq, counts, total) in enumerate(items):
        feat_idx[offsets[i] : offsets[i + 1]] = uniq
        feat_cnt[offsets[i] : offsets[i + 1]] = counts
        feat_total[i] = total
    return feat_idx, feat_cnt, offsets, feat_total


def train_flat(
    examples: list[tuple[TokenSeq, CategoryPath]],
    level: int,
    hp: Hyperparams,
    seed: int,
    threads: int = 1,
) -> FlatModel:
    """Train one flat model on labels truncated to ``level``.

    Args:
        examples: (tokens, full path) pairs, every path at least
            ``level`` deep.
        level: taxonomy level this model predicts.
        hp: hyperparameters.
        seed: RNG seed; with ``threads=1`` the result is bit-identical
            across runs.
        threads: lock-free parallel workers (non-deterministic if > 1).

    Raises:
        EmptyDataError: no examples.
        DegenerateTrainingError: fewer than 2 distinct level labels.
    """
    if not examples:
        raise EmptyDataError(f"no examples for level {level}")
    for tokens, path in examples:
        if path.depth < level:
            raise ValueError(f"example path {path.render()!r} shallower than level {level}")
    labels = sorted({truncate(path, level).render() for _, path in examples})
    if len(labels) < 2:
        raise DegenerateTrainingError(
            f"level {level} has {len(labels)} distinct label(s), need at least 2"
        )
    vocab = sorted({tok for tokens, _ in examples for tok in tokens})
    model = FlatModel(
        level=level,
        labels=labels,
        vocab=vocab,
        hp=hp,
        input_emb=np.empty(0),
        output_w=np.empty(0),
    )
    label_ids = {lbl: i for i, lbl in enumerate(labels)}
    encodings = [model.encode(tokens) for tokens, _ in examples]
    y = np.array(
        [label_ids[truncate(path, level).render()] for _, path in examples],
        dtype=np.int64,
    )
    feat_idx, feat_cnt, offsets, feat_total = _encode_dataset(encodings)

    rng = np.random.default_rng(seed)
    rows = len(vocab) + hp.buckets
    emb = rng.random((rows, hp.dim), dtype=np.float32)
    emb *= np.float32(2.0 / hp.dim)
    emb -= np.float32(1.0 / hp.dim)
    out_w = np.zeros((len(labels), hp.dim), dtype=np.float32)

    n = len(examples)
    total_updates = float(hp.epochs * n)
    history: list[float] = []
    for epoch in range(hp.epochs):
        order = rng.permutation(n).astype(np.int64)
        t_start = epoch * n
        if threads <= 1:
            loss, counted = _sgd_epoch(
                emb, out_w, feat_idx, feat_cnt, offsets, feat_total, y,
                order, hp.lr0, t_start, total_updates,
            )
        else:
            loss, counted = _sgd_epoch_hogwild(
                emb, out_w, feat_idx, feat_cnt, offsets, feat_total, y,
                order, hp.lr0, t_start, total_updates, threads,
            )
        history.append(loss / max(counted, 1))
    if not (np.isfinite(emb).all() and np.isfinite(out_w).all()):
        raise TrainingError(f"non-finite parameters after training level {level}")
    model.input_emb = emb
    model.output_w = out_w
    model.loss_history = history
    return model


def _sgd_epoch_hogwild(emb, out_w, feat_idx, feat_cnt, offsets, feat_total,
                       y, order, lr0, t_start, total_updates, threads):
    """Split the epoch across lock-free workers sharing the parameters."""
    chunks = np.array_split(order, threads)
    results: list[tuple[float, int]] = [(0.0, 0)] * len(chunks)

    def run(ci: int, chunk: np.ndarray, chunk_t0: int) -> None:
        results[ci] = _sgd_epoch(
            emb, out_w, feat_idx, feat_cnt, offsets, feat_total, y,
            chunk, lr0, chunk_t0, total_updates,
        )

    workers = []
    pos = t_start
    for ci, chunk in enumerate(chunks):
        workers.append(threading.Thread(target=run, args=(ci, chunk, pos)))
        pos += len(chunk)
    for w in workers:
        w.start()
    for w in workers:
        w.join()
    return sum(r[0] for r in results), sum(r[1] for r in results)


def _predict_probs(model: FlatModel, batch: list[TokenSeq]) -> np.ndarray:
    """Softmax distributions for a batch of token sequences."""
    encodings = [model.encode(tokens) for tokens in batch]
    feat_idx, feat_cnt, offsets, feat_total = _encode_dataset(encodings)
    hidden = np.zeros((len(batch), model.hp.dim), dtype=np.float32)
    _hidden_batch(model.input_emb, feat_idx, feat_cnt, offsets, feat_total, hidden)
    logits = (hidden @ model.output_w.T).astype(np.float64)
    logits -= logits.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=1, keepdims=True)
    return probs


def predict_flat(model: FlatModel, tokens: TokenSeq) -> tuple[CategoryPath, np.ndarray]:
    """Predict one title; ties break toward the smaller label id."""
    probs = _predict_probs(model, [tokens])[0]
    label_id = int(np.argmax(probs))
    return model.label_path(label_id), probs


# ====== Hierarchical model ======


@dataclass
class HierarchicalModel:
    """Flat models for levels 1..m plus optional inference-time masking."""

    levels: list[FlatModel]
    hp: Hyperparams
    mask_lexicon: AttributeLexicon | None = None
    seed: int | None = None

    def __post_init__(self) -> None:
        for i, flat in enumerate(self.levels, start=1):
            if flat.level != i:
                raise ValueError(f"level {flat.level} model at position {i}")

    @property
    def depth(self) -> int:
        return len(self.levels)

    def prepare(self, title: str) -> TokenSeq:
        """Tokenize (and mask, for attribute-blind models) a title."""
        tokens = normalize_tokenize(title)
        if self.mask_lexicon is not None:
            tokens = mask_attributes(tokens, self.mask_lexicon)
        return tokens


def fold_level_predictions(per_level: list[tuple[CategoryPath, float]]) -> Prediction:
    """Combine per-level predictions by prefix agreement.

    Accept level 1; continue to level i only while the level-i path
    agrees with the accepted path on its first i-1 names; on the first
    disagreement return the previously accepted path.
    """
    if not per_level:
        raise ValueError("no per-level predictions")
    path, conf = per_level[0]
    decided = 1
    for i in range(2, len(per_level) + 1):
        deeper, deeper_conf = per_level[i - 1]
        if deeper.levels[: i - 1] != path.levels:
            break
        path, conf = deeper, deeper_conf
        decided = i
    return Prediction(path=path, confidence=float(conf), decided_level=decided)


def predict_hft_batch(model: HierarchicalModel, titles: list[str]) -> list[Prediction]:
    """Hierarchical predictions for a batch of raw titles."""
    if not titles:
        return []
    batch = [model.prepare(title) for title in titles]
    per_level: list[list[tuple[CategoryPath, float]]] = [[] for _ in titles]
    for flat in model.levels:
        probs = _predict_probs(flat, batch)
        ids = np.argmax(probs, axis=1)
        for i, label_id in enumerate(ids):
            per_level[i].append((flat.label_path(int(label_id)), probs[i, label_id]))
    return [fold_level_predictions(pl) for pl in per_level]


def predict_hft(model: HierarchicalModel, title: str) -> Prediction:
    """Hierarchical prediction for one raw title."""
    return predict_hft_batch(model, [title])[0]


def train_hft(
    examples: list[tuple[TokenSeq, CategoryPath]],
    hp: Hyperparams,
    seed: int,
    threads: int = 1,
    mask_lexicon: AttributeLexicon | None = None,
) -> HierarchicalModel:
    """Train one flat model per level.

    Level i trains on the examples whose path is at least i deep, with
    labels truncated to i. Per-level seeds are derived from ``seed`` so
    the whole model is deterministic in single-threaded mode.
    """
    if not examples:
        raise EmptyDataError("no training examples")
    depth = max(path.depth for _, path in examples)
    children = np.random.SeedSequence(seed).spawn(depth)
    levels = []
    for level in range(1, depth + 1):
        subset = [ex for ex in examples if ex[1].depth >= level]
        level_seed = int(children[level - 1].generate_state(1)[0])
        levels.append(train_flat(subset, level, hp, level_seed, threads=threads))
    return HierarchicalModel(levels=levels, hp=hp, mask_lexicon=mask_lexicon, seed=seed)


# ====== Model files ======


def save_model(model: HierarchicalModel, path: str) -> None:
    """Write the versioned model container.

    Text header (magic line, JSON line with hyperparameters, label and
    vocabulary tables) followed by little-endian float32 matrices in
    row-major order, input then output per level.
    """
    header = {
        "format": MODEL_MAGIC,
        "hp": model.hp.to_dict(),
        "seed": model.seed,
        "mask_lexicon": (
            None
            if model.mask_lexicon is None
            else {k: sorted(v) for k, v in model.mask_lexicon.kinds.items()}
        ),
        "levels": [
            {
                "level": flat.level,
                "labels": flat.labels,
                "vocab": flat.vocab,
                "loss_history": flat.loss_history,
            }
            for flat in model.levels
        ],
    }
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC.encode("ascii") + b"\n")
        fh.write(json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8"))
        fh.write(b"\n")
        for flat in model.levels:
            fh.write(np.ascontiguousarray(flat.input_emb, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(flat.output_w, dtype="<f4").tobytes())


def load_model(path: str) -> HierarchicalModel:
    """Read a model container written by :func:`save_model`."""
    with open(path, "rb") as fh:
        magic = fh.readline().rstrip(b"\n")
        if magic != MODEL_MAGIC.encode("ascii"):
            raise DataFormatError(f"{path}: bad magic {magic!r}")
        try:
            header = json.loads(fh.readline().decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DataFormatError(f"{path}: unreadable header: {exc}") from exc
        if header.get("format") != MODEL_MAGIC:
            raise DataFormatError(f"{path}: header format {header.get('format')!r}")
        hp = Hyperparams.from_dict(header["hp"])
        levels = []
        for spec in header["levels"]:
            rows = len(spec["vocab"]) + hp.buckets
            emb = np.frombuffer(fh.read(rows * hp.dim * 4), dtype="<f4")
            if emb.size != rows * hp.dim:
                raise DataFormatError(f"{path}: truncated embedding block")
            out = np.frombuffer(fh.read(len(spec["labels"]) * hp.dim * 4), dtype="<f4")
            if out.size != len(spec["labels"]) * hp.dim:
                raise DataFormatError(f"{path}: truncated output block")
            levels.append(
                FlatModel(
                    level=spec["level"],
                    labels=list(spec["labels"]),
                    vocab=list(spec["vocab"]),
                    hp=hp,
                    input_emb=emb.reshape(rows, hp.dim).copy(),
                    output_w=out.reshape(len(spec["labels"]), hp.dim).copy(),
                    loss_history=list(spec.get("loss_history", [])),
                )
            )
        lex = None
        if header.get("mask_lexicon") is not None:
            lex = AttributeLexicon(
                {k: frozenset(v) for k, v in header["mask_lexicon"].items()}
            )
        return HierarchicalModel(levels=levels, hp=hp, mask_lexicon=lex, seed=header.get("seed"))
