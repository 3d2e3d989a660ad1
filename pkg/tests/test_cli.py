from __future__ import annotations

import hashlib
import json
import os

import pytest

from titlecat.cli import main
from titlecat.data import load_labeled, load_pairs
from titlecat.metrics import EvalReport
from titlecat.model import load_model
from titlecat.synth import SynthConfig

FAST_HP = ["--dim", "8", "--epochs", "2", "--buckets", "512"]


def cli_config() -> SynthConfig:
    return SynthConfig(
        templates={
            "apparel > shirts": ["{color} shirt classic {size} fit"],
            "apparel > jackets": ["{color} jacket zip {size} cut"],
            "grocery > coffee": ["{flavor} coffee roast {amount} pot"],
            "grocery > tea": ["{flavor} tea leaf {amount} tin"],
        },
        attributes={
            "color": ["red", "blue", "green", "black", "white",
                      "navy", "teal", "olive", "coral", "beige"],
            "size": ["small", "medium", "large", "xl", "xxl", "petite", "tall", "xs"],
            "flavor": ["vanilla", "mocha", "caramel", "hazelnut",
                       "mango", "matcha", "pecan", "ginger"],
            "amount": ["2 pack", "4 box", "8 oz", "12 tray", "16 jar", "24 tin"],
        },
        rho=0.5,
        labeled_size=240,
        test_size=40,
        group_count=120,
        group_sizes={2: 1.0, 3: 1.0},
        l1_weights={"apparel": 0.8, "grocery": 0.2},
        seed=0,
    )


@pytest.fixture(scope="module")
def world_dir(tmp_path_factory) -> str:
    root = tmp_path_factory.mktemp("cliworld")
    config_path = root / "config.json"
    config_path.write_text(cli_config().to_json(), encoding="utf-8")
    out = str(root / "world")
    assert main(["synth", "--config", str(config_path), "--out", out]) == 0
    return out


@pytest.fixture(scope="module")
def baseline_dir(world_dir: str, tmp_path_factory) -> str:
    out = str(tmp_path_factory.mktemp("baseline"))
    code = main([
        "train-baseline", "--labeled", os.path.join(world_dir, "labeled.jsonl"),
        *FAST_HP, "--out", out,
    ])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def pairs_dir(world_dir: str, tmp_path_factory) -> str:
    out = str(tmp_path_factory.mktemp("pairs"))
    code = main([
        "build-pairs", "--clustered", os.path.join(world_dir, "groups.jsonl"),
        "--cap", "4", "--out", out,
    ])
    assert code == 0
    return out


def read_manifest(out_dir: str) -> dict:
    with open(os.path.join(out_dir, "run_manifest.json"), encoding="utf-8") as fh:
        return json.load(fh)


# ====== synth ======


def test_synth_writes_world_and_manifest(world_dir: str) -> None:
    for name in ("labeled.jsonl", "test.jsonl", "groups.jsonl",
                 "groups_gold.jsonl", "world_config.json",
                 "world_manifest.json", "run_manifest.json"):
        assert os.path.exists(os.path.join(world_dir, name))
    manifest = read_manifest(world_dir)
    assert manifest["command"] == "synth"
    assert manifest["counts"]["labeled"] == 240
    assert manifest["counts"]["groups"] == 120
    assert "total" in manifest["timings_s"]
    recorded = manifest["outputs"]["labeled"]
    with open(recorded["path"], "rb") as fh:
        assert hashlib.sha256(fh.read()).hexdigest() == recorded["sha256"]


def test_synth_preset_with_seed_override(tmp_path) -> None:
    out = str(tmp_path / "lex")
    assert main(["synth", "--preset", "lexicon", "--seed", "3", "--out", out]) == 0
    config = SynthConfig.from_json(
        open(os.path.join(out, "world_config.json"), encoding="utf-8").read()
    )
    assert config.seed == 3
    assert set(config.attributes) == {"color", "size", "style"}


def test_synth_seed_overrides_config_file(world_dir: str, tmp_path) -> None:
    out = str(tmp_path / "reseeded")
    config_path = os.path.join(world_dir, "world_config.json")
    assert main(["synth", "--config", config_path, "--seed", "9", "--out", out]) == 0
    first = load_labeled(os.path.join(world_dir, "labeled.jsonl"))
    second = load_labeled(os.path.join(out, "labeled.jsonl"))
    assert [ex.title for ex in first] != [ex.title for ex in second]


# ====== training commands ======


def test_train_baseline_outputs_loadable_model(baseline_dir: str) -> None:
    model = load_model(os.path.join(baseline_dir, "model.bin"))
    assert [level.level for level in model.levels] == [1, 2]
    assert model.mask_lexicon is None
    manifest = read_manifest(baseline_dir)
    assert manifest["counts"]["labeled_examples"] == 240
    assert "train" in manifest["timings_s"]


def test_train_cs_blind_stores_mask_lexicon(world_dir: str, tmp_path) -> None:
    lexicon_path = tmp_path / "lexicon.txt"
    lexicon_path.write_text(
        "[color]\nred\nblue\ngreen\nblack\nwhite\nnavy\nteal\nolive\ncoral\nbeige\n"
        "[size]\nsmall\nmedium\nlarge\nxl\nxxl\npetite\ntall\nxs\n",
        encoding="utf-8",
    )
    out = str(tmp_path / "csblind")
    code = main([
        "train-cs-blind", "--labeled", os.path.join(world_dir, "labeled.jsonl"),
        "--lexicon", str(lexicon_path), *FAST_HP, "--out", out,
    ])
    assert code == 0
    model = load_model(os.path.join(out, "model.bin"))
    assert model.mask_lexicon is not None
    assert model.mask_lexicon.kind_of("navy") == "color"
    assert read_manifest(out)["inputs"]["lexicon"]["path"] == str(lexicon_path)


# ====== cst ======


@pytest.mark.parametrize("mode", ["complete", "ss"])
def test_cst_modes_emit_model_and_augmentation(world_dir: str, tmp_path, mode: str) -> None:
    out = str(tmp_path / f"cst_{mode}")
    code = main([
        "cst", "--labeled", os.path.join(world_dir, "labeled.jsonl"),
        "--clustered", os.path.join(world_dir, "groups.jsonl"),
        "--mode", mode, "--eval-pairs", "30", *FAST_HP, "--out", out,
    ])
    assert code == 0
    assert load_model(os.path.join(out, "model.bin")).levels
    d_aug = load_labeled(os.path.join(out, "d_aug.jsonl"))
    assert d_aug
    pairs = load_pairs(os.path.join(out, "eval_pairs.jsonl"))
    assert len(pairs) == 30
    manifest = read_manifest(out)
    assert manifest["counts"]["groups_in"] == 120
    assert 0 < manifest["counts"]["groups_used"] <= 120
    if mode == "ss":
        assert manifest["counts"]["groups_used"] < 120


def test_cst_pairs_order_variants_differ(world_dir: str, tmp_path) -> None:
    outs = {}
    for order in ("subsample-then-split", "split-then-subsample"):
        out = str(tmp_path / order)
        code = main([
            "cst", "--labeled", os.path.join(world_dir, "labeled.jsonl"),
            "--clustered", os.path.join(world_dir, "groups.jsonl"),
            "--mode", "ss", "--eval-pairs", "25", "--pairs-order", order,
            *FAST_HP, "--out", out,
        ])
        assert code == 0
        outs[order] = load_pairs(os.path.join(out, "eval_pairs.jsonl"))
    assert all(len(pairs) == 25 for pairs in outs.values())
    # Held-out pairs come from different pools, so the draws differ.
    assert {p.group_id for p in outs["subsample-then-split"]} != {
        p.group_id for p in outs["split-then-subsample"]
    }


# ====== build-pairs / cga ======


def test_build_pairs_caps_and_orders(world_dir: str, pairs_dir: str) -> None:
    pairs = load_pairs(os.path.join(pairs_dir, "pairs.jsonl"))
    manifest = read_manifest(pairs_dir)
    assert manifest["counts"]["pairs"] == len(pairs)
    by_group: dict[str, int] = {}
    for pair in pairs:
        by_group[pair.group_id] = by_group.get(pair.group_id, 0) + 1
    assert max(by_group.values()) <= 4
    # Ordered pairs: both directions of a two-title group are present.
    two_title = [p for p in pairs if by_group[p.group_id] == 2]
    assert any(
        (p.target, p.source) in {(q.source, q.target) for q in two_title}
        for p in two_title
    )


def test_cga_clustered_round_trip(world_dir: str, tmp_path) -> None:
    out = str(tmp_path / "cga")
    code = main([
        "cga", "--labeled", os.path.join(world_dir, "labeled.jsonl"),
        "--clustered", os.path.join(world_dir, "groups.jsonl"),
        "--n", "4", "--threshold", "0.5", *FAST_HP, "--out", out,
    ])
    assert code == 0
    manifest = read_manifest(out)
    assert 0 < manifest["counts"]["kept"] <= manifest["counts"]["generated"]
    with open(os.path.join(out, "d_aug.jsonl"), encoding="utf-8") as fh:
        rows = [json.loads(line) for line in fh]
    assert rows
    for row in rows[:20]:
        assert set(row) == {"source", "generated", "category", "score"}
        assert row["score"] >= 0.5


def test_cga_external_generations(world_dir: str, tmp_path) -> None:
    labeled = load_labeled(os.path.join(world_dir, "labeled.jsonl"))
    sources = {ex.title for ex in labeled[:40]}
    gen_path = tmp_path / "generations.jsonl"
    with open(gen_path, "w", encoding="utf-8") as fh:
        for title in sorted(sources):
            tokens = title.split()
            tokens[0] = "crimson" if tokens[0] != "crimson" else "indigo"
            fh.write(json.dumps({"source": title, "generated": [" ".join(tokens)]}) + "\n")
    out = str(tmp_path / "cga_ext")
    code = main([
        "cga", "--labeled", os.path.join(world_dir, "labeled.jsonl"),
        "--external-gen", str(gen_path), "--threshold", "0.5",
        *FAST_HP, "--out", out,
    ])
    assert code == 0
    manifest = read_manifest(out)
    # Every labeled row whose title has generations contributes once.
    assert manifest["counts"]["generated"] == sum(
        ex.title in sources for ex in labeled
    )
    assert manifest["counts"]["kept"] > 0
    assert "external_gen" in manifest["inputs"]


def test_cga_requires_a_variant_source(world_dir: str, tmp_path) -> None:
    code = main([
        "cga", "--labeled", os.path.join(world_dir, "labeled.jsonl"),
        "--out", str(tmp_path / "none"),
    ])
    assert code == 1


def test_cga_rejects_malformed_external_file(world_dir: str, tmp_path) -> None:
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"source": "x", "generated": "not-a-list"}\n', encoding="utf-8")
    code = main([
        "cga", "--labeled", os.path.join(world_dir, "labeled.jsonl"),
        "--external-gen", str(bad), "--out", str(tmp_path / "out"),
    ])
    assert code == 2


# ====== evaluate ======


def test_evaluate_writes_report_and_prints_table(
    world_dir: str, baseline_dir: str, pairs_dir: str, tmp_path, capsys
) -> None:
    out = str(tmp_path / "eval")
    code = main([
        "evaluate", "--model", os.path.join(baseline_dir, "model.bin"),
        "--test", os.path.join(world_dir, "test.jsonl"),
        "--pairs", os.path.join(pairs_dir, "pairs.jsonl"),
        "--out", out,
    ])
    assert code == 0
    printed = capsys.readouterr().out
    assert "consistency" in printed and "F1" in printed
    report = EvalReport.from_json(
        open(os.path.join(out, "eval_report.json"), encoding="utf-8").read()
    )
    assert report.n_test == 40
    assert 0.0 <= report.consistency <= 1.0

    lifted = str(tmp_path / "eval_lift")
    code = main([
        "evaluate", "--model", os.path.join(baseline_dir, "model.bin"),
        "--test", os.path.join(world_dir, "test.jsonl"),
        "--pairs", os.path.join(pairs_dir, "pairs.jsonl"),
        "--baseline", os.path.join(out, "eval_report.json"),
        "--out", lifted,
    ])
    assert code == 0
    printed = capsys.readouterr().out
    assert "+0.00%" in printed  # the model lifted against itself
    relifted = EvalReport.from_json(
        open(os.path.join(lifted, "eval_report.json"), encoding="utf-8").read()
    )
    assert relifted.lifts["consistency"] == pytest.approx(0.0)


# ====== sweep ======


def test_sweep_continues_past_failing_cells(world_dir: str, tmp_path, capsys) -> None:
    grid = [
        {"name": "base", "algo": "baseline", "eval_pairs": 50},
        {"name": "broken", "algo": "warp-drive"},
    ]
    grid_path = tmp_path / "grid.json"
    grid_path.write_text(json.dumps(grid), encoding="utf-8")
    out = str(tmp_path / "sweep")
    code = main([
        "sweep", "--grid", str(grid_path), "--seeds", "0",
        "--dim", "8", "--epochs", "1", "--buckets", "512", "--out", out,
    ])
    assert code == 0
    printed = capsys.readouterr().out
    assert "broken: FAILED" in printed
    with open(os.path.join(out, "sweep_results.json"), encoding="utf-8") as fh:
        results = {r["name"]: r for r in json.load(fh)}
    assert "error" in results["broken"]
    assert results["base"]["f1_weighted"]["mean"] > 0.3
    assert results["base"]["consistency"]["std"] == 0.0  # single seed


def test_sweep_emits_threshold_curve(tmp_path) -> None:
    grid = [
        {"name": "t5", "algo": "cga", "threshold": 0.5, "eval_pairs": 40},
        {"name": "t8", "algo": "cga", "threshold": 0.8, "eval_pairs": 40},
    ]
    grid_path = tmp_path / "grid.json"
    grid_path.write_text(json.dumps(grid), encoding="utf-8")
    out = str(tmp_path / "sweep")
    code = main([
        "sweep", "--grid", str(grid_path), "--seeds", "0",
        "--dim", "8", "--epochs", "1", "--buckets", "512", "--out", out,
    ])
    assert code == 0
    csv_path = os.path.join(out, "threshold_vs_consistency.csv")
    with open(csv_path, encoding="utf-8") as fh:
        lines = fh.read().strip().splitlines()
    assert lines[0].startswith("threshold,consistency_mean")
    assert lines[1].startswith("0.5,") and lines[2].startswith("0.8,")


# ====== exit codes ======


def test_usage_errors_exit_one(tmp_path) -> None:
    assert main(["no-such-command"]) == 1
    assert main(["train-baseline", "--out", str(tmp_path)]) == 1  # missing --labeled
    assert main([]) == 1


def test_missing_files_exit_two(tmp_path) -> None:
    code = main([
        "train-baseline", "--labeled", str(tmp_path / "absent.jsonl"),
        "--out", str(tmp_path / "out"),
    ])
    assert code == 2


def test_malformed_data_exits_two(tmp_path) -> None:
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"title": 42}\n', encoding="utf-8")
    code = main([
        "train-baseline", "--labeled", str(bad), "--out", str(tmp_path / "out"),
    ])
    assert code == 2


def test_degenerate_training_exits_three(tmp_path) -> None:
    single = tmp_path / "single.jsonl"
    with open(single, "w", encoding="utf-8") as fh:
        for i in range(4):
            fh.write(json.dumps({"title": f"plain widget {i}", "category": "tools"}) + "\n")
    code = main([
        "train-baseline", "--labeled", str(single), *FAST_HP,
        "--out", str(tmp_path / "out"),
    ])
    assert code == 3
