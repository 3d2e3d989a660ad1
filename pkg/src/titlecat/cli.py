"""Command-line workflows: data generation, training, evaluation, sweeps.

Every subcommand composes through files (JSONL datasets, JSON configs
and reports, binary model files) and writes a run manifest that records
inputs, digests, counts, and timings, so any artifact can be rebuilt
from its manifest alone.

Exit codes: 0 success, 1 usage error, 2 data error, 3 training error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import replace

from .cga import CgaConfig, run_cga
from .cst import CstConfig, run_cst
from .data import (
    build_pairs,
    l1_histogram,
    load_clustered,
    load_labeled,
    load_pairs,
    save_labeled,
    save_pairs,
    split_consistency_test,
)
from .errors import DataError, TitlecatError, UsageError
from .metrics import DEFAULT_LAMBDA, EvalReport, evaluate_model
from .model import Hyperparams, load_model, save_model, train_hft
from .synth import SynthConfig, default_config, generate_world, lexicon_config
from .text import load_lexicon, normalize_tokenize

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_TRAINING = 3


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad flags; the contract says 1."""

    def error(self, message: str):  # noqa: D401 - argparse signature
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ====== Manifest plumbing ======


def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


class RunManifest:
    """Collects everything needed to reproduce one command."""

    def __init__(self, command: str, args: argparse.Namespace):
        self.doc: dict = {
            "command": command,
            "argv": {k: v for k, v in sorted(vars(args).items()) if k != "func"},
            "inputs": {},
            "outputs": {},
            "counts": {},
            "timings_s": {},
        }
        self._t0 = time.perf_counter()

    def add_input(self, name: str, path: str) -> None:
        self.doc["inputs"][name] = {"path": path, "sha256": _sha256(path)}

    def add_output(self, name: str, path: str) -> None:
        self.doc["outputs"][name] = {"path": path, "sha256": _sha256(path)}

    def count(self, name: str, value) -> None:
        self.doc["counts"][name] = value

    def time_stage(self, name: str, started: float) -> None:
        self.doc["timings_s"][name] = round(time.perf_counter() - started, 3)

    def write(self, out_dir: str, extra: dict | None = None) -> str:
        if extra:
            self.doc["stage"] = extra
        self.doc["timings_s"]["total"] = round(time.perf_counter() - self._t0, 3)
        path = os.path.join(out_dir, "run_manifest.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.doc, fh, indent=2, sort_keys=True, ensure_ascii=False)
            fh.write("\n")
        return path


def _ensure_out(args) -> str:
    out = args.out
    os.makedirs(out, exist_ok=True)
    return out


def _hp_from_args(args) -> Hyperparams:
    return Hyperparams(
        dim=args.dim, lr0=args.lr0, epochs=args.epochs,
        max_n=args.max_n, buckets=args.buckets,
    )


def _add_hp_flags(parser: argparse.ArgumentParser) -> None:
    hp = Hyperparams()
    parser.add_argument("--dim", type=int, default=hp.dim, help="embedding width")
    parser.add_argument("--lr0", type=float, default=hp.lr0, help="initial learning rate")
    parser.add_argument("--epochs", type=int, default=hp.epochs)
    parser.add_argument("--max-n", type=int, default=hp.max_n, dest="max_n",
                        help="largest word n-gram length")
    parser.add_argument("--buckets", type=int, default=hp.buckets,
                        help="hash buckets for out-of-vocabulary n-grams")


def _load_training_file(path: str):
    rows = load_labeled(path)
    return rows, [(normalize_tokenize(ex.title), ex.category) for ex in rows]


# ====== synth ======


def cmd_synth(args) -> int:
    out = _ensure_out(args)
    manifest = RunManifest("synth", args)
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            config = SynthConfig.from_json(fh.read())
        manifest.add_input("config", args.config)
        if args.seed is not None:
            config = replace(config, seed=args.seed)
    else:
        maker = {"default": default_config, "lexicon": lexicon_config}[args.preset]
        config = maker(seed=args.seed if args.seed is not None else 0)
    world = generate_world(config)
    paths = world.write(out)
    for name, path in paths.items():
        manifest.add_output(name, path)
    for key in ("labeled", "test", "groups", "unlabeled_titles", "distinct_titles"):
        manifest.count(key, world.manifest[key])
    manifest.write(out, extra=world.manifest)
    print(
        f"world: {world.manifest['labeled']} labeled / {world.manifest['test']} test / "
        f"{world.manifest['groups']} groups ({world.manifest['unlabeled_titles']} titles) -> {out}"
    )
    return EXIT_OK


# ====== train-baseline / train-cs-blind ======


def _train_simple(args, mask_lexicon=None, lexicon_path: str | None = None) -> int:
    out = _ensure_out(args)
    name = "train-cs-blind" if mask_lexicon is not None else "train-baseline"
    manifest = RunManifest(name, args)
    manifest.add_input("labeled", args.labeled)
    if lexicon_path:
        manifest.add_input("lexicon", lexicon_path)
    rows, examples = _load_training_file(args.labeled)
    manifest.count("labeled_examples", len(rows))
    t0 = time.perf_counter()
    model = train_hft(
        examples, _hp_from_args(args), seed=args.seed,
        mask_lexicon=mask_lexicon, threads=args.threads,
    )
    manifest.time_stage("train", t0)
    model_path = os.path.join(out, "model.bin")
    save_model(model, model_path)
    manifest.add_output("model", model_path)
    manifest.write(out)
    print(f"trained {name} on {len(rows)} rows -> {model_path}")
    return EXIT_OK


def cmd_train_baseline(args) -> int:
    return _train_simple(args)


def cmd_train_cs_blind(args) -> int:
    lexicon = load_lexicon(args.lexicon)
    return _train_simple(args, mask_lexicon=lexicon, lexicon_path=args.lexicon)


# ====== cst ======


def cmd_cst(args) -> int:
    out = _ensure_out(args)
    manifest = RunManifest("cst", args)
    manifest.add_input("labeled", args.labeled)
    manifest.add_input("clustered", args.clustered)
    dl = load_labeled(args.labeled)
    groups = load_clustered(args.clustered)

    mode = {"complete": "complete", "ss": "sub_sampled"}[args.mode]
    rule = {"maxconf": "max_confidence", "majority": "majority"}[args.rule]
    config = CstConfig(
        mode=mode, rule=rule, min_confidence=args.confidence_floor,
        hp=_hp_from_args(args), seed=args.seed, threads=args.threads,
    )

    # Optional held-out consistency pairs. The default carves them out of
    # the distribution-matched subset (sub-sample-then-split); the
    # alternative order splits from the full clustered file first.
    eval_pairs = None
    if args.eval_pairs > 0 and args.pairs_order == "split-then-subsample":
        eval_pairs, groups = split_consistency_test(groups, args.eval_pairs, seed=args.seed)

    result = run_cst(dl, groups, config)

    if args.eval_pairs > 0 and args.pairs_order == "subsample-then-split":
        from .data import subsample_by_l1

        pool = groups
        if mode == "sub_sampled":
            pool = subsample_by_l1(
                groups, l1_histogram(dl), result.base_model,
                tolerance=config.tolerance, seed=args.seed, rule=rule,
            ).groups
        eval_pairs, _ = split_consistency_test(pool, args.eval_pairs, seed=args.seed)

    model_path = os.path.join(out, "model.bin")
    save_model(result.model, model_path)
    aug_path = os.path.join(out, "d_aug.jsonl")
    save_labeled(aug_path, result.d_aug)
    manifest.add_output("model", model_path)
    manifest.add_output("d_aug", aug_path)
    if eval_pairs is not None:
        pairs_path = os.path.join(out, "eval_pairs.jsonl")
        save_pairs(pairs_path, eval_pairs)
        manifest.add_output("eval_pairs", pairs_path)
    for key in ("groups_in", "groups_used", "augmented_examples", "labeled_examples"):
        manifest.count(key, result.manifest[key])
    manifest.write(out, extra=result.manifest)
    print(
        f"cst[{args.mode}] used {result.manifest['groups_used']}/{result.manifest['groups_in']} "
        f"groups, {result.manifest['augmented_examples']} pseudo-labeled rows -> {model_path}"
    )
    return EXIT_OK


# ====== cga / build-pairs ======


def _read_external_generations(path: str) -> dict[str, list[str]]:
    generations: dict[str, list[str]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: not valid JSON: {exc}") from exc
            if not isinstance(row.get("source"), str) or not isinstance(row.get("generated"), list):
                raise DataError(
                    f"{path}:{lineno}: expected {{\"source\": str, \"generated\": [str,...]}}"
                )
            generations.setdefault(row["source"], []).extend(str(g) for g in row["generated"])
    if not generations:
        raise DataError(f"{path}: no generations found")
    return generations


def cmd_cga(args) -> int:
    out = _ensure_out(args)
    manifest = RunManifest("cga", args)
    manifest.add_input("labeled", args.labeled)
    dl = load_labeled(args.labeled)

    external = None
    groups = []
    if args.external_gen:
        external = _read_external_generations(args.external_gen)
        manifest.add_input("external_gen", args.external_gen)
    else:
        if not args.clustered:
            raise UsageError("cga requires --clustered unless --external-gen is given")
        manifest.add_input("clustered", args.clustered)
        groups = load_clustered(args.clustered)

    score = {"bleu": "bleu", "cosine": "embed_cosine"}[args.score]
    config = CgaConfig(
        n_per_sample=args.n, score=score, threshold=args.threshold,
        target_size=args.target_size, pair_cap=args.pair_cap,
        hp=_hp_from_args(args), seed=args.seed, threads=args.threads,
    )
    result = run_cga(dl, groups, config, external_generations=external)

    model_path = os.path.join(out, "model.bin")
    save_model(result.model, model_path)
    aug_path = os.path.join(out, "d_aug.jsonl")
    with open(aug_path, "w", encoding="utf-8") as fh:
        for row in result.d_aug:
            fh.write(json.dumps({
                "source": row.source, "generated": row.generated,
                "category": row.category.render(), "score": round(row.score, 6),
            }, ensure_ascii=False, separators=(",", ":")) + "\n")
    manifest.add_output("model", model_path)
    manifest.add_output("d_aug", aug_path)
    for key in ("generated", "kept", "augmented_examples", "labeled_examples"):
        manifest.count(key, result.manifest[key])
    manifest.write(out, extra=result.manifest)
    print(
        f"cga[{args.score} T={args.threshold}] kept {result.manifest['kept']}"
        f"/{result.manifest['generated']} generated rows -> {model_path}"
    )
    return EXIT_OK


def cmd_build_pairs(args) -> int:
    out = _ensure_out(args)
    manifest = RunManifest("build-pairs", args)
    manifest.add_input("clustered", args.clustered)
    groups = load_clustered(args.clustered)
    pairs = build_pairs(groups, cap=args.cap, seed=args.seed)
    pairs_path = os.path.join(out, "pairs.jsonl")
    save_pairs(pairs_path, pairs)
    manifest.add_output("pairs", pairs_path)
    manifest.count("groups", len(groups))
    manifest.count("pairs", len(pairs))
    manifest.write(out)
    print(f"built {len(pairs)} ordered pairs from {len(groups)} groups -> {pairs_path}")
    return EXIT_OK


# ====== evaluate ======


def _render_report(name: str, report: EvalReport) -> str:
    lift_f1 = report.lifts.get("f1_weighted")
    lift_c = report.lifts.get("consistency")
    fmt = lambda v: "      --" if v is None else f"{100 * v:+7.2f}%"  # noqa: E731
    header = (
        f"{'model':<18} {'F1':>8} {'F1 lift':>9} {'consistency':>12} {'cons lift':>9}\n"
        f"{'-' * 18} {'-' * 8} {'-' * 9} {'-' * 12} {'-' * 9}\n"
    )
    row = (
        f"{name:<18} {report.f1_weighted:8.4f} {fmt(lift_f1):>9} "
        f"{report.consistency:12.4f} {fmt(lift_c):>9}\n"
    )
    return header + row


def cmd_evaluate(args) -> int:
    out = _ensure_out(args)
    manifest = RunManifest("evaluate", args)
    manifest.add_input("model", args.model)
    manifest.add_input("test", args.test)
    manifest.add_input("pairs", args.pairs)
    model = load_model(args.model)
    test = load_labeled(args.test)
    pairs = load_pairs(args.pairs)
    baseline = None
    if args.baseline:
        manifest.add_input("baseline", args.baseline)
        with open(args.baseline, "r", encoding="utf-8") as fh:
            baseline = EvalReport.from_json(fh.read())
    report = evaluate_model(model, test, pairs, lam=args.lam, baseline=baseline)
    report_path = os.path.join(out, "eval_report.json")
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
    manifest.add_output("report", report_path)
    manifest.count("n_test", report.n_test)
    manifest.count("n_pairs", report.n_pairs)
    manifest.write(out)
    sys.stdout.write(_render_report(os.path.basename(args.model), report))
    print(report.summary_line())
    return EXIT_OK


# ====== sweep ======


def _sweep_cell(cell: dict, seed: int, hp: Hyperparams, threads: int) -> EvalReport:
    """Run one (cell, seed) pipeline on a fresh synthetic world."""
    preset = cell.get("preset", "default")
    maker = {"default": default_config, "lexicon": lexicon_config}[preset]
    world = generate_world(maker(seed=seed))
    pairs, du = split_consistency_test(
        world.groups, int(cell.get("eval_pairs", 1000)), seed=seed
    )
    dl = world.train
    algo = cell.get("algo", "baseline")
    if algo == "baseline":
        model = train_hft(
            [(normalize_tokenize(ex.title), ex.category) for ex in dl],
            hp, seed=seed, threads=threads,
        )
    elif algo == "cs-blind":
        from .text import default_lexicon

        model = train_hft(
            [(normalize_tokenize(ex.title), ex.category) for ex in dl],
            hp, seed=seed, mask_lexicon=default_lexicon(), threads=threads,
        )
    elif algo == "cst":
        mode = cell.get("mode", "complete")
        config = CstConfig(
            mode={"ss": "sub_sampled"}.get(mode, mode),
            rule=cell.get("rule", "max_confidence"),
            hp=hp, seed=seed, threads=threads,
        )
        model = run_cst(dl, du, config).model
    elif algo == "cga":
        config = CgaConfig(
            n_per_sample=int(cell.get("n", 8)), score=cell.get("score", "bleu"),
            threshold=float(cell.get("threshold", 0.7)),
            target_size=cell.get("target_size"),
            hp=hp, seed=seed, threads=threads,
        )
        model = run_cga(dl, du, config).model
    else:
        raise DataError(f"unknown sweep algo {algo!r}")
    return evaluate_model(model, world.test, pairs)


def _mean_std(values: list[float]) -> tuple[float, float]:
    mean = sum(values) / len(values)
    var = sum((v - mean) ** 2 for v in values) / len(values)
    return mean, var ** 0.5


def cmd_sweep(args) -> int:
    out = _ensure_out(args)
    manifest = RunManifest("sweep", args)
    manifest.add_input("grid", args.grid)
    with open(args.grid, "r", encoding="utf-8") as fh:
        cells = json.load(fh)
    if not isinstance(cells, list) or not cells:
        raise DataError(f"{args.grid}: sweep grid must be a non-empty JSON list")
    seeds = [int(s) for s in args.seeds.split(",") if s.strip() != ""]
    if not seeds:
        raise UsageError("--seeds must name at least one seed")

    hp = _hp_from_args(args)
    results = []
    for index, cell in enumerate(cells):
        name = cell.get("name", f"cell{index}")
        per_seed: list[EvalReport] = []
        error: str | None = None
        for seed in seeds:
            t0 = time.perf_counter()
            try:
                report = _sweep_cell(cell, seed, hp, args.threads)
            except TitlecatError as exc:
                error = f"seed {seed}: {exc}"
                logger.error("sweep cell %s failed: %s", name, error)
                break
            per_seed.append(report)
            logger.info("cell %s seed %d done in %.1fs", name, seed, time.perf_counter() - t0)
        entry: dict = {"name": name, "cell": cell, "seeds": seeds}
        if error is not None:
            entry["error"] = error
        elif per_seed:
            for metric in ("f1_weighted", "consistency", "dual_objective"):
                mean, std = _mean_std([getattr(r, metric) for r in per_seed])
                entry[metric] = {"mean": mean, "std": std}
        results.append(entry)
        if error is None and per_seed:
            print(
                f"{name}: F1 {entry['f1_weighted']['mean']:.4f}"
                f"±{entry['f1_weighted']['std']:.4f}  "
                f"consistency {entry['consistency']['mean']:.4f}"
                f"±{entry['consistency']['std']:.4f}"
            )
        else:
            print(f"{name}: FAILED ({error})")

    agg_path = os.path.join(out, "sweep_results.json")
    with open(agg_path, "w", encoding="utf-8") as fh:
        json.dump(results, fh, indent=2, sort_keys=True, ensure_ascii=False)
        fh.write("\n")
    manifest.add_output("results", agg_path)

    # Fig.-3-style curves: one CSV per swept knob found in the grid.
    for knob, stem in (("threshold", "threshold_vs_consistency"),
                       ("target_size", "size_vs_consistency")):
        rows = [r for r in results if "error" not in r and r["cell"].get(knob) is not None]
        if len(rows) < 2:
            continue
        csv_path = os.path.join(out, f"{stem}.csv")
        with open(csv_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([knob, "consistency_mean", "consistency_std",
                             "f1_mean", "f1_std"])
            for r in sorted(rows, key=lambda r: r["cell"][knob]):
                writer.writerow([
                    r["cell"][knob],
                    f"{r['consistency']['mean']:.6f}", f"{r['consistency']['std']:.6f}",
                    f"{r['f1_weighted']['mean']:.6f}", f"{r['f1_weighted']['std']:.6f}",
                ])
        manifest.add_output(stem, csv_path)

    manifest.count("cells", len(cells))
    manifest.count("failed", sum(1 for r in results if "error" in r))
    manifest.write(out)
    return EXIT_OK


# ====== parser and entry point ======


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="titlecat", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)

    def common(p: argparse.ArgumentParser, hp: bool = True) -> None:
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--out", required=True, help="output directory")
        if hp:
            _add_hp_flags(p)

    p = sub.add_parser("synth", help="generate a synthetic catalog world")
    p.add_argument("--config", help="world config JSON (overrides --preset)")
    p.add_argument("--preset", choices=("default", "lexicon"), default="default")
    p.add_argument("--seed", type=int, default=None,
                   help="overrides the preset's (or config file's) seed")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-baseline", help="train on the labeled file only")
    p.add_argument("--labeled", required=True)
    common(p)
    p.set_defaults(func=cmd_train_baseline)

    p = sub.add_parser("train-cs-blind", help="train with attribute tokens masked")
    p.add_argument("--labeled", required=True)
    p.add_argument("--lexicon", required=True, help="attribute lexicon file")
    common(p)
    p.set_defaults(func=cmd_train_cs_blind)

    p = sub.add_parser("cst", help="self-train on pseudo-labeled groups")
    p.add_argument("--labeled", required=True)
    p.add_argument("--clustered", required=True)
    p.add_argument("--mode", choices=("complete", "ss"), default="complete")
    p.add_argument("--rule", choices=("maxconf", "majority"), default="maxconf")
    p.add_argument("--confidence-floor", type=float, default=None,
                   help="skip groups whose pseudo-label confidence is below this")
    p.add_argument("--eval-pairs", type=int, default=0,
                   help="also hold out this many consistency-test pairs")
    p.add_argument("--pairs-order",
                   choices=("subsample-then-split", "split-then-subsample"),
                   default="subsample-then-split",
                   help="draw held-out pairs after (default) or before sub-sampling")
    common(p)
    p.set_defaults(func=cmd_cst)

    p = sub.add_parser("cga", help="augment with generated consistent variants")
    p.add_argument("--labeled", required=True)
    p.add_argument("--clustered", help="groups used to learn the substitution model")
    p.add_argument("--n", type=int, default=8, help="variants generated per source")
    p.add_argument("--score", choices=("bleu", "cosine"), default="bleu")
    p.add_argument("--threshold", type=float, default=0.7)
    p.add_argument("--target-size", type=int, default=None)
    p.add_argument("--pair-cap", type=int, default=12)
    p.add_argument("--external-gen",
                   help='JSONL of {"source": str, "generated": [str,...]} replacing the built-in generator')
    common(p)
    p.set_defaults(func=cmd_cga)

    p = sub.add_parser("build-pairs", help="emit ordered same-group title pairs")
    p.add_argument("--clustered", required=True)
    p.add_argument("--cap", type=int, default=12, help="max ordered pairs per group")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_pairs)

    p = sub.add_parser("evaluate", help="score a model file on test data and pairs")
    p.add_argument("--model", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--baseline", help="baseline eval_report.json for lift columns")
    p.add_argument("--lambda", type=float, default=DEFAULT_LAMBDA, dest="lam",
                   help="weight of the consistency term in the dual objective")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="run a grid of cells across seeds")
    p.add_argument("--grid", required=True, help="JSON list of cell configs")
    p.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated seeds")
    common(p)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=os.environ.get("TITLECAT_LOGLEVEL", "WARNING"),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except TitlecatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
