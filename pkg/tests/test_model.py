from __future__ import annotations

import numpy as np
import pytest

from titlecat.errors import DataFormatError, DegenerateTrainingError, EmptyDataError
from titlecat.model import (
    FlatModel,
    HierarchicalModel,
    Hyperparams,
    _sgd_epoch,
    embed_title,
    fold_level_predictions,
    load_model,
    predict_flat,
    predict_hft,
    predict_hft_batch,
    save_model,
    softmax_loss_and_grads,
    train_flat,
    train_hft,
)
from titlecat.taxonomy import parse_path
from titlecat.text import AttributeLexicon, normalize_tokenize

HP = Hyperparams(dim=16, lr0=0.5, epochs=6, max_n=2, buckets=512)


def _toy_examples() -> list[tuple[tuple[str, ...], object]]:
    rows = [
        ("soft dog bed large", "pets > beds"),
        ("chew toy for dogs", "pets > toys"),
        ("dog rope toy", "pets > toys"),
        ("plush cat bed", "pets > beds"),
        ("red cotton shirt", "apparel > tops"),
        ("blue cotton shirt", "apparel > tops"),
        ("wool winter coat", "apparel > coats"),
        ("rain coat hooded", "apparel > coats"),
    ]
    return [(normalize_tokenize(t), parse_path(c)) for t, c in rows]


# ====== Gradient math ======


def test_analytic_gradients_match_finite_differences() -> None:
    rng = np.random.default_rng(7)
    emb_rows = rng.normal(0, 0.5, (3, 4))
    counts = np.array([2.0, 1.0, 1.0])
    total = 4.0
    out_w = rng.normal(0, 0.5, (3, 4))
    label = 1
    step = 1e-4

    loss, grad_rows, grad_out = softmax_loss_and_grads(emb_rows, counts, total, out_w, label)

    def loss_at(rows: np.ndarray, w: np.ndarray) -> float:
        return softmax_loss_and_grads(rows, counts, total, w, label)[0]

    for arr, grad in ((emb_rows, grad_rows), (out_w, grad_out)):
        it = np.nditer(arr, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            plus = arr.copy()
            minus = arr.copy()
            plus[idx] += step
            minus[idx] -= step
            if arr is emb_rows:
                numeric = (loss_at(plus, out_w) - loss_at(minus, out_w)) / (2 * step)
            else:
                numeric = (loss_at(emb_rows, plus) - loss_at(emb_rows, minus)) / (2 * step)
            denom = max(abs(numeric), abs(float(grad[idx])), 1e-8)
            assert abs(numeric - float(grad[idx])) / denom <= 1e-3, idx
            it.iternext()


def test_sgd_kernel_applies_reference_gradients() -> None:
    rng = np.random.default_rng(3)
    dim, n_labels = 5, 3
    emb = rng.normal(0, 0.1, (7, dim)).astype(np.float32)
    out_w = rng.normal(0, 0.1, (n_labels, dim)).astype(np.float32)
    feat_idx = np.array([1, 4, 6], dtype=np.int64)
    feat_cnt = np.array([1.0, 1.0, 1.0], dtype=np.float32)
    offsets = np.array([0, 3], dtype=np.int64)
    feat_total = np.array([3.0], dtype=np.float32)
    labels = np.array([2], dtype=np.int64)
    order = np.array([0], dtype=np.int64)
    lr0, total_updates = 0.4, 8.0

    _, grad_rows, grad_out = softmax_loss_and_grads(
        emb[feat_idx].astype(np.float64),
        feat_cnt.astype(np.float64),
        3.0,
        out_w.astype(np.float64),
        2,
    )
    expect_emb = emb.astype(np.float64).copy()
    expect_emb[feat_idx] -= lr0 * grad_rows
    expect_out = out_w.astype(np.float64) - lr0 * grad_out

    loss, counted = _sgd_epoch(
        emb, out_w, feat_idx, feat_cnt, offsets, feat_total, labels,
        order, lr0, 0, total_updates,
    )
    assert counted == 1
    assert loss > 0
    np.testing.assert_allclose(emb, expect_emb.astype(np.float32), atol=1e-6)
    np.testing.assert_allclose(out_w, expect_out.astype(np.float32), atol=1e-6)


# ====== Flat training ======


def test_train_flat_separates_toy_data() -> None:
    examples = _toy_examples()
    model = train_flat(examples, level=2, hp=HP, seed=11)
    assert model.n_labels == 4
    for tokens, path in examples:
        predicted, probs = predict_flat(model, tokens)
        assert predicted == path
        assert probs.shape == (4,)
        assert abs(probs.sum() - 1.0) < 1e-6
    assert model.loss_history[-1] <= model.loss_history[0]
    assert np.isfinite(model.input_emb).all()


def test_train_flat_empty_and_degenerate() -> None:
    with pytest.raises(EmptyDataError):
        train_flat([], level=1, hp=HP, seed=0)
    same = [(normalize_tokenize("a b"), parse_path("x")), (normalize_tokenize("c"), parse_path("x"))]
    with pytest.raises(DegenerateTrainingError):
        train_flat(same, level=1, hp=HP, seed=0)


def test_train_flat_rejects_shallow_paths() -> None:
    examples = [
        (normalize_tokenize("a"), parse_path("x > y")),
        (normalize_tokenize("b"), parse_path("z")),
    ]
    with pytest.raises(ValueError, match="shallower"):
        train_flat(examples, level=2, hp=HP, seed=0)


def test_train_flat_deterministic_given_seed() -> None:
    examples = _toy_examples()
    first = train_flat(examples, level=1, hp=HP, seed=5)
    second = train_flat(examples, level=1, hp=HP, seed=5)
    assert np.array_equal(first.input_emb, second.input_emb)
    assert np.array_equal(first.output_w, second.output_w)
    other = train_flat(examples, level=1, hp=HP, seed=6)
    assert not np.array_equal(first.input_emb, other.input_emb)


def test_untrained_zero_weights_give_uniform_distribution() -> None:
    model = FlatModel(
        level=1,
        labels=["a", "b", "c"],
        vocab=["dog"],
        hp=HP,
        input_emb=np.zeros((1 + HP.buckets, HP.dim), dtype=np.float32),
        output_w=np.zeros((3, HP.dim), dtype=np.float32),
    )
    predicted, probs = predict_flat(model, ())
    np.testing.assert_allclose(probs, np.full(3, 1 / 3), atol=1e-9)
    assert predicted == parse_path("a")  # argmax tie -> smallest label


def test_embed_title_is_mean_of_feature_embeddings() -> None:
    hp = Hyperparams(dim=4, lr0=0.1, epochs=1, max_n=1, buckets=8)
    emb = np.arange(10 * 4, dtype=np.float32).reshape(10, 4)
    model = FlatModel(
        level=1, labels=["a", "b"], vocab=["dog", "red"], hp=hp,
        input_emb=emb, output_w=np.zeros((2, 4), dtype=np.float32),
    )
    vec = embed_title(model, ("dog", "red"))
    np.testing.assert_allclose(vec, (emb[0] + emb[1]) / 2)
    assert embed_title(model, ()).tolist() == [0.0] * 4


# ====== Agreement fold ======


def _pl(*specs: tuple[str, float]) -> list:
    return [(parse_path(p), c) for p, c in specs]


def test_fold_accepts_deepest_agreeing_level() -> None:
    pred = fold_level_predictions(
        _pl(("a", 0.9), ("a > b", 0.8), ("a > b > c", 0.7))
    )
    assert pred.path == parse_path("a > b > c")
    assert pred.decided_level == 3
    assert pred.confidence == pytest.approx(0.7)


def test_fold_stops_at_first_disagreement() -> None:
    pred = fold_level_predictions(
        _pl(("a", 0.9), ("a > b", 0.8), ("a > q > c", 0.95))
    )
    assert pred.path == parse_path("a > b")
    assert pred.decided_level == 2
    assert pred.confidence == pytest.approx(0.8)


def test_fold_disagreement_at_level_two() -> None:
    pred = fold_level_predictions(_pl(("a", 0.6), ("x > y", 0.99)))
    assert pred.path == parse_path("a")
    assert pred.decided_level == 1
    assert pred.confidence == pytest.approx(0.6)


def test_fold_requires_predictions() -> None:
    with pytest.raises(ValueError):
        fold_level_predictions([])


# ====== Hierarchical training ======


def test_train_hft_and_predict_full_paths() -> None:
    examples = _toy_examples()
    model = train_hft(examples, hp=HP, seed=4)
    assert model.depth == 2
    preds = predict_hft_batch(model, ["soft dog bed", "wool winter coat"])
    assert preds[0].path == parse_path("pets > beds")
    assert preds[1].path == parse_path("apparel > coats")
    assert all(0 < p.confidence <= 1 for p in preds)
    single = predict_hft(model, "soft dog bed")
    assert single.path == preds[0].path
    assert single.decided_level == preds[0].decided_level
    assert single.confidence == pytest.approx(preds[0].confidence)


def test_train_hft_ragged_depth_excludes_shallow_examples() -> None:
    examples = _toy_examples() + [
        (normalize_tokenize("gift card"), parse_path("gifts")),
        (normalize_tokenize("gift voucher"), parse_path("gifts")),
    ]
    model = train_hft(examples, hp=HP, seed=4)
    assert model.depth == 2
    assert "gifts" in model.levels[0].labels
    assert all(lbl.count(" > ") == 1 for lbl in model.levels[1].labels)
    assert not any(lbl.startswith("gifts") for lbl in model.levels[1].labels)


def test_masked_model_prepares_masked_tokens() -> None:
    lex = AttributeLexicon({"color": frozenset({"red", "blue"})})
    examples = _toy_examples()
    masked = [(tuple("<color>" if t in {"red", "blue"} else t for t in toks), p)
              for toks, p in examples]
    model = train_hft(masked, hp=HP, seed=4, mask_lexicon=lex)
    assert model.prepare("Red Cotton Shirt") == ("<color>", "cotton", "shirt")
    pred = predict_hft(model, "red cotton shirt")
    assert pred.path == parse_path("apparel > tops")


# ====== Model files ======


def test_save_load_round_trip(tmp_path) -> None:
    examples = _toy_examples()
    model = train_hft(examples, hp=HP, seed=9)
    path = str(tmp_path / "model.bin")
    save_model(model, path)
    loaded = load_model(path)
    assert loaded.hp == model.hp
    assert loaded.depth == model.depth
    titles = ["soft dog bed", "blue cotton shirt", "chew toy"]
    before = predict_hft_batch(model, titles)
    after = predict_hft_batch(loaded, titles)
    assert before == after


def test_model_files_byte_identical_for_equal_seeds(tmp_path) -> None:
    examples = _toy_examples()
    paths = []
    for name in ("a.bin", "b.bin"):
        model = train_hft(examples, hp=HP, seed=21)
        p = str(tmp_path / name)
        save_model(model, p)
        paths.append(p)
    first = open(paths[0], "rb").read()
    second = open(paths[1], "rb").read()
    assert first == second


def test_save_load_preserves_mask_lexicon(tmp_path) -> None:
    lex = AttributeLexicon({"color": frozenset({"red", "blue"})})
    model = train_hft(_toy_examples(), hp=HP, seed=2, mask_lexicon=lex)
    path = str(tmp_path / "m.bin")
    save_model(model, path)
    loaded = load_model(path)
    assert loaded.mask_lexicon is not None
    assert loaded.mask_lexicon.kinds == {"color": frozenset({"red", "blue"})}


def test_load_rejects_bad_magic(tmp_path) -> None:
    path = tmp_path / "junk.bin"
    path.write_bytes(b"NOPE\n{}\n")
    with pytest.raises(DataFormatError, match="magic"):
        load_model(str(path))


def test_load_rejects_truncated_file(tmp_path) -> None:
    model = train_hft(_toy_examples(), hp=HP, seed=1)
    path = tmp_path / "m.bin"
    save_model(model, str(path))
    data = path.read_bytes()
    path.write_bytes(data[: len(data) - 64])
    with pytest.raises(DataFormatError, match="truncated"):
        load_model(str(path))
