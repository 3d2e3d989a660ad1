"""Synthetic catalog world with a known ground-truth version function.

Titles are rendered from per-leaf templates whose attribute slots
(colors, sizes, flavors, amounts, style numbers) are filled from
configurable value lists. Labeled data draws slot values from
category-preferred sub-lists with probability ``rho`` — a controllable
spurious correlation. Unlabeled data arrives as same-item groups: a
base title plus variants produced by resampling 1-2 slots to different
same-kind values, sampled under a per-top-level-category shift. The
generator keeps every title's template recipe so tests can perturb
titles exactly, check that generated rewrites only touch slots, and
Monte-Carlo the true consistency of a model.
"""

from __future__ import annotations

import json
import math
import os
import random
import re
import time
from collections import Counter
from dataclasses import dataclass, field

from .data import ItemGroup, LabeledExample, save_clustered, save_labeled
from .errors import DataError
from .model import HierarchicalModel, predict_hft_batch
from .taxonomy import MAX_DEPTH, CategoryPath, parse_path
from .text import normalize_tokenize

_SLOT = re.compile(r"^\{([a-z_0-9]+)\}$")

GOLD_SIDECAR = "groups_gold.jsonl"


# ====== Configuration ======


def _check_token_clean(text: str, what: str) -> None:
    if normalize_tokenize(text) != tuple(text.split()):
        raise DataError(f"{what} {text!r} is not in normalized token form")


@dataclass(frozen=True)
class SynthConfig:
    """Declarative description of a synthetic catalog world.

    Attributes:
        templates: rendered leaf path -> template strings; literal
            tokens are emitted as-is, ``{kind}`` tokens are slots.
        attributes: kind -> value list; values may be multi-token and
            lists are disjoint across kinds.
        preferred: leaf path -> kind -> sub-list of that kind's values
            favored by the leaf in labeled data.
        rho: probability that a labeled title's slot draws from the
            leaf's preferred sub-list instead of the full list.
        labeled_size / test_size: row counts for the labeled sets.
        group_count: number of unlabeled same-item groups.
        group_sizes: group size -> sampling weight; sizes are >= 2.
        l1_weights: optional top-level-category weights for group
            sampling (the unlabeled source shift); None means the same
            uniform-over-leaves distribution the labeled data uses.
        group_leaf_bias: optional leaf path -> relative weight applied
            within its top-level category when sampling groups, for
            shifts that also change the within-category mix; marginals
            across top-level categories still follow ``l1_weights``.
        seed: master seed for all sampling.
    """

    templates: dict[str, list[str]]
    attributes: dict[str, list[str]]
    preferred: dict[str, dict[str, list[str]]] = field(default_factory=dict)
    rho: float = 0.9
    labeled_size: int = 5000
    test_size: int = 1500
    group_count: int = 5000
    group_sizes: dict[int, float] = field(default_factory=lambda: {2: 1.0, 3: 1.0})
    l1_weights: dict[str, float] | None = None
    group_leaf_bias: dict[str, float] | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.rho <= 1.0:
            raise DataError(f"rho must be in [0, 1], got {self.rho}")
        if min(self.labeled_size, self.test_size) < 1 or self.group_count < 1:
            raise DataError("labeled_size, test_size, and group_count must be positive")
        if not self.templates:
            raise DataError("no categories configured")
        seen_values: dict[str, str] = {}
        for kind, values in self.attributes.items():
            if len(values) < 2:
                raise DataError(f"attribute kind {kind!r} needs at least 2 values")
            if len(set(values)) != len(values):
                raise DataError(f"attribute kind {kind!r} has duplicate values")
            for value in values:
                _check_token_clean(value, f"attribute value of kind {kind!r}")
                if value in seen_values:
                    raise DataError(
                        f"value {value!r} appears under kinds "
                        f"{seen_values[value]!r} and {kind!r}"
                    )
                seen_values[value] = kind
        for leaf, templates in self.templates.items():
            path = parse_path(leaf)
            if path.render() != leaf:
                raise DataError(f"leaf path {leaf!r} is not in rendered form")
            if not templates:
                raise DataError(f"category {leaf!r} has no templates")
            for template in templates:
                slots = 0
                for token in template.split():
                    slot = _SLOT.match(token)
                    if slot:
                        if slot.group(1) not in self.attributes:
                            raise DataError(
                                f"template {template!r} references unknown kind "
                                f"{slot.group(1)!r}"
                            )
                        slots += 1
                    else:
                        _check_token_clean(token, "template literal")
                if slots == 0:
                    raise DataError(f"template {template!r} has no attribute slots")
        for leaf, by_kind in self.preferred.items():
            if leaf not in self.templates:
                raise DataError(f"preferred lists reference unknown category {leaf!r}")
            for kind, sub in by_kind.items():
                if kind not in self.attributes:
                    raise DataError(f"preferred lists reference unknown kind {kind!r}")
                if not sub or not set(sub) <= set(self.attributes[kind]):
                    raise DataError(
                        f"preferred {kind!r} values for {leaf!r} must be a "
                        "non-empty subset of the kind's values"
                    )
        for size, weight in self.group_sizes.items():
            if size < 2:
                raise DataError(f"group sizes must be at least 2, got {size}")
            if weight <= 0:
                raise DataError(f"group size weights must be positive, got {weight}")
        if not self.group_sizes:
            raise DataError("group_sizes must be non-empty")
        if self.l1_weights is not None:
            tops = {parse_path(leaf).levels[0] for leaf in self.templates}
            for name, weight in self.l1_weights.items():
                if name not in tops:
                    raise DataError(f"l1_weights references unknown category {name!r}")
                if weight < 0:
                    raise DataError("l1_weights must be non-negative")
            if sum(self.l1_weights.values()) <= 0:
                raise DataError("l1_weights must have positive total mass")
        if self.group_leaf_bias is not None:
            for leaf, weight in self.group_leaf_bias.items():
                if leaf not in self.templates:
                    raise DataError(
                        f"group_leaf_bias references unknown category {leaf!r}"
                    )
                if weight <= 0:
                    raise DataError("group_leaf_bias weights must be positive")

    def to_json(self) -> str:
        doc = {
            "templates": self.templates,
            "attributes": self.attributes,
            "preferred": self.preferred,
            "rho": self.rho,
            "labeled_size": self.labeled_size,
            "test_size": self.test_size,
            "group_count": self.group_count,
            "group_sizes": {str(k): v for k, v in self.group_sizes.items()},
            "l1_weights": self.l1_weights,
            "group_leaf_bias": self.group_leaf_bias,
            "seed": self.seed,
        }
        return json.dumps(doc, ensure_ascii=False, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SynthConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DataError(f"invalid world config JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise DataError("world config must be a JSON object")
        try:
            return cls(
                templates=doc["templates"],
                attributes=doc["attributes"],
                preferred=doc.get("preferred", {}),
                rho=doc.get("rho", 0.9),
                labeled_size=doc.get("labeled_size", 5000),
                test_size=doc.get("test_size", 1500),
                group_count=doc.get("group_count", 5000),
                group_sizes={int(k): v for k, v in doc.get("group_sizes", {"2": 1.0, "3": 1.0}).items()},
                l1_weights=doc.get("l1_weights"),
                group_leaf_bias=doc.get("group_leaf_bias"),
                seed=doc.get("seed", 0),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"invalid world config: {exc}") from exc


# ====== Title recipes ======


@dataclass(frozen=True, slots=True)
class TitleRecipe:
    """How a title was rendered: template tokens plus slot assignments."""

    template: tuple[str, ...]
    values: tuple[str, ...]

    def slot_kinds(self) -> tuple[str, ...]:
        return tuple(
            _SLOT.match(tok).group(1) for tok in self.template if _SLOT.match(tok)
        )


def _render(template: tuple[str, ...], values: tuple[str, ...]) -> str:
    out: list[str] = []
    fill = iter(values)
    for token in template:
        if _SLOT.match(token):
            out.extend(next(fill).split())
        else:
            out.append(token)
    return " ".join(out)


# ====== The generated world ======


@dataclass
class World:
    """All generated data plus the ground-truth pair oracle."""

    config: SynthConfig
    train: list[LabeledExample]
    test: list[LabeledExample]
    groups: list[ItemGroup]
    gold: dict[str, CategoryPath]
    manifest: dict
    _registry: dict[str, TitleRecipe] = field(repr=False, default_factory=dict)

    def recipe(self, title: str) -> TitleRecipe:
        try:
            return self._registry[title]
        except KeyError:
            raise DataError(f"title {title!r} was not produced by a known template")

    def apply_v(self, title: str, rng: random.Random) -> str:
        """One ground-truth version: resample 1-2 slots to new values.

        The output differs from the input in the chosen slots and
        nowhere else, so the (hidden) category is unchanged.
        """
        recipe = self.recipe(title)
        kinds = recipe.slot_kinds()
        if not kinds:
            raise DataError(f"title {title!r} has no attribute slots")
        n_edits = rng.randint(1, min(2, len(kinds)))
        chosen = rng.sample(range(len(kinds)), n_edits)
        values = list(recipe.values)
        for slot in chosen:
            pool = [v for v in self.config.attributes[kinds[slot]] if v != values[slot]]
            values[slot] = rng.choice(pool)
        variant = TitleRecipe(template=recipe.template, values=tuple(values))
        text = _render(variant.template, variant.values)
        self._registry.setdefault(text, variant)
        return text

    def differs_only_in_slots(self, source: str, candidate: str) -> bool:
        """True when ``candidate`` re-renders the source's template with
        (possibly) different same-kind slot values."""
        try:
            recipe = self.recipe(source)
        except DataError:
            return False
        tokens = normalize_tokenize(candidate)

        def match(ti: int, pos: int) -> bool:
            if ti == len(recipe.template):
                return pos == len(tokens)
            token = recipe.template[ti]
            slot = _SLOT.match(token)
            if not slot:
                if pos < len(tokens) and tokens[pos] == token:
                    return match(ti + 1, pos + 1)
                return False
            for value in self.config.attributes[slot.group(1)]:
                parts = tuple(value.split())
                if tokens[pos : pos + len(parts)] == parts:
                    if match(ti + 1, pos + len(parts)):
                        return True
            return False

        return match(0, 0)

    def oracle_consistency(
        self,
        model: HierarchicalModel,
        base_titles: list[str],
        variants_per_title: int,
        rng: random.Random,
    ) -> float:
        """Monte-Carlo agreement between predictions for titles and
        fresh ground-truth versions of them."""
        if not base_titles or variants_per_title < 1:
            raise DataError("need at least one base title and one variant each")
        variants = [
            self.apply_v(title, rng)
            for title in base_titles
            for _ in range(variants_per_title)
        ]
        base_preds = predict_hft_batch(model, base_titles)
        var_preds = predict_hft_batch(model, variants)
        agree = 0
        for i, base in enumerate(base_preds):
            for j in range(variants_per_title):
                pred = var_preds[i * variants_per_title + j]
                agree += base.path.levels == pred.path.levels
        return agree / len(variants)

    def write(self, out_dir: str) -> dict[str, str]:
        """Emit the world's JSONL files, config, sidecar, and manifest."""
        os.makedirs(out_dir, exist_ok=True)
        paths = {
            "labeled": os.path.join(out_dir, "labeled.jsonl"),
            "test": os.path.join(out_dir, "test.jsonl"),
            "groups": os.path.join(out_dir, "groups.jsonl"),
            "gold": os.path.join(out_dir, GOLD_SIDECAR),
            "config": os.path.join(out_dir, "world_config.json"),
            "manifest": os.path.join(out_dir, "world_manifest.json"),
        }
        save_labeled(paths["labeled"], self.train)
        save_labeled(paths["test"], self.test)
        save_clustered(paths["groups"], self.groups)
        with open(paths["gold"], "w", encoding="utf-8") as fh:
            for group in self.groups:
                record = {
                    "group_id": str(group.group_id),
                    "category": self.gold[group.group_id].render(),
                }
                fh.write(json.dumps(record, ensure_ascii=False, separators=(",", ":")) + "\n")
        with open(paths["config"], "w", encoding="utf-8") as fh:
            fh.write(self.config.to_json())
        with open(paths["manifest"], "w", encoding="utf-8") as fh:
            fh.write(json.dumps(self.manifest, ensure_ascii=False, sort_keys=True, indent=2) + "\n")
        return paths


# ====== Generation ======


def _sample_title(
    config: SynthConfig,
    leaf: str,
    registry: dict[str, TitleRecipe],
    rng: random.Random,
    biased: bool,
) -> str:
    template_str = rng.choice(config.templates[leaf])
    template = tuple(template_str.split())
    values = []
    for token in template:
        slot = _SLOT.match(token)
        if not slot:
            continue
        kind = slot.group(1)
        pool = config.attributes[kind]
        if biased and rng.random() < config.rho:
            pool = config.preferred.get(leaf, {}).get(kind, pool)
        values.append(rng.choice(pool))
    recipe = TitleRecipe(template=template, values=tuple(values))
    text = _render(template, recipe.values)
    registry.setdefault(text, recipe)
    return text


def generate_world(config: SynthConfig) -> World:
    """Sample the labeled sets, the grouped unlabeled set, and the oracle.

    Labeled rows draw slot values from preferred sub-lists with
    probability ``rho``; unlabeled groups draw a base title with uniform
    slot values from the (optionally shifted) category distribution and
    add distinct ground-truth versions of it.
    """
    t0 = time.perf_counter()
    leaves = sorted(config.templates)
    paths = {leaf: parse_path(leaf) for leaf in leaves}
    registry: dict[str, TitleRecipe] = {}
    rng = random.Random(config.seed)

    train: list[LabeledExample] = []
    for _ in range(config.labeled_size):
        leaf = rng.choice(leaves)
        title = _sample_title(config, leaf, registry, rng, True)
        train.append(LabeledExample(title=title, category=paths[leaf]))
    train_titles = {ex.title for ex in train}

    test: list[LabeledExample] = []
    rejected = 0
    while len(test) < config.test_size:
        leaf = rng.choice(leaves)
        title = _sample_title(config, leaf, registry, rng, True)
        if title in train_titles:
            rejected += 1
            if rejected > 200 * config.test_size:
                raise DataError(
                    "cannot sample a test set disjoint from the labeled data; "
                    "the configured title space is too small"
                )
            continue
        test.append(LabeledExample(title=title, category=paths[leaf]))

    world = World(
        config=config, train=train, test=test, groups=[], gold={},
        manifest={}, _registry=registry,
    )

    by_top: dict[str, list[str]] = {}
    for leaf in leaves:
        by_top.setdefault(paths[leaf].levels[0], []).append(leaf)
    bias = config.group_leaf_bias or {}
    leaf_weights = []
    for leaf in leaves:
        top = paths[leaf].levels[0]
        mass = 1.0 if config.l1_weights is None else config.l1_weights.get(top, 0.0)
        z = sum(bias.get(other, 1.0) for other in by_top[top])
        leaf_weights.append(mass * bias.get(leaf, 1.0) / z)
    sizes = sorted(config.group_sizes)
    size_weights = [config.group_sizes[s] for s in sizes]

    short_groups = 0
    for index in range(config.group_count):
        leaf = rng.choices(leaves, weights=leaf_weights, k=1)[0]
        base = _sample_title(config, leaf, registry, rng, False)
        want = rng.choices(sizes, weights=size_weights, k=1)[0]
        titles = [base]
        attempts = 0
        while len(titles) < want and attempts < 20 * want:
            variant = world.apply_v(base, rng)
            attempts += 1
            if variant not in titles:
                titles.append(variant)
        if len(titles) < want:
            short_groups += 1
        if len(titles) < 2:
            continue
        group_id = f"g{index:05d}"
        world.groups.append(ItemGroup(group_id=group_id, titles=tuple(titles)))
        world.gold[group_id] = paths[leaf]

    unlabeled_titles = sum(len(g.titles) for g in world.groups)
    gold_l1 = Counter(path.levels[0] for path in world.gold.values())
    train_l1 = Counter(ex.category.levels[0] for ex in train)
    world.manifest = {
        "labeled": len(train),
        "test": len(test),
        "groups": len(world.groups),
        "unlabeled_titles": unlabeled_titles,
        "mean_group_size": round(unlabeled_titles / max(len(world.groups), 1), 3),
        "leaves": len(leaves),
        "depth": max(path.depth for path in paths.values()),
        "test_rejections": rejected,
        "short_groups": short_groups,
        "distinct_titles": len(registry),
        "labeled_l1_histogram": dict(sorted(train_l1.items())),
        "group_gold_l1_histogram": dict(sorted(gold_l1.items())),
        "rho": config.rho,
        "seed": config.seed,
        "elapsed_s": round(time.perf_counter() - t0, 3),
    }
    return world


# ====== Stock worlds ======

_COLORS = [
    "red", "blue", "green", "black", "white", "navy", "teal",
    "coral", "olive", "maroon", "beige", "ivory", "charcoal", "lavender",
]
_SIZES = [
    "small", "medium", "large", "xl", "xxl", "petite", "tall", "mini", "xs", "king",
]
_MATERIALS = ["cotton", "wool", "linen", "silk", "denim", "fleece", "suede", "canvas"]
_FLAVORS = [
    "vanilla", "chocolate", "strawberry", "caramel", "hazelnut", "matcha",
    "mango", "espresso", "pecan", "cinnamon", "raspberry", "coconut",
]
_AMOUNTS = [
    "2 pack", "4 box", "6 bag", "8 oz", "12 tray",
    "16 jar", "24 tin", "150 ml", "250 can", "500 tub",
]
_STYLES = [str(n) for n in range(101, 149)]

# (top, [(mid, [(branch, [(leaf, noun), (leaf, noun)]), ...]), ...], edge kind, mid kind)
_DEFAULT_TREE = [
    ("apparel", "color", "material", [
        ("mens", "heritage performance everyday essential comfort", [
            ("tops", [("tees", "tees"), ("polos", "polos")]),
            ("outerwear", [("jackets", "jackets"), ("hoodies", "hoodies")]),
        ]),
        ("womens", "boutique signature relaxed premium studio", [
            ("tops", [("blouses", "blouses"), ("tanks", "tanks")]),
            ("outerwear", [("coats", "coats"), ("parkas", "parkas")]),
        ]),
    ]),
    ("grocery", "flavor", "amount", [
        ("snacks", "crunchy gourmet family pantry snacktime", [
            ("sweet", [("cookies", "cookies"), ("candy", "candy")]),
            ("savory", [("chips", "chips"), ("crackers", "crackers")]),
        ]),
        ("drinks", "brewed refreshing artisan morning chilled", [
            ("hot", [("coffee", "coffee"), ("tea", "tea")]),
            ("cold", [("juice", "juice"), ("soda", "soda")]),
        ]),
    ]),
    ("office", "size", "amount", [
        ("paper", "professional campus planner weekly archive", [
            ("notebooks", [("ruled", "ruled"), ("dotted", "dotted")]),
            ("sticky", [("notes", "notes"), ("flags", "flags")]),
        ]),
        ("writing", "precision smooth ergonomic workshop drafting", [
            ("pens", [("ballpoint", "ballpoint"), ("gel", "gel")]),
            ("pencils", [("wood", "wood"), ("mechanical", "mechanical")]),
        ]),
    ]),
]


def _leaf_templates(noun: str, branch: str, fillers: list[str], edge: str, mid: str) -> list[str]:
    f1, f2, f3, f4, f5 = fillers
    return [
        f"{{{edge}}} {noun} {branch} edition {f1} {{style}} {f2}",
        f"{f3} {noun} {branch} {f4} line {{style}} {{{edge}}}",
        f"{{{edge}}} {f5} {noun} {{{mid}}} {branch} {{style}} kit",
    ]


def _shared_template(branch: str, fillers: list[str], edge: str, mid: str) -> str:
    f1, f2, f3 = fillers[0], fillers[1], fillers[2]
    return f"{f1} {branch} blend {{{mid}}} {f2} {f3} {{{edge}}}"


def _build_tree_config(
    tree,
    attributes: dict[str, list[str]],
    *,
    rho: float,
    labeled_size: int,
    test_size: int,
    group_count: int,
    group_sizes: dict[int, float],
    l1_weights: dict[str, float] | None,
    group_leaf_bias: dict[str, float] | None = None,
    seed: int,
) -> SynthConfig:
    templates: dict[str, list[str]] = {}
    preferred: dict[str, dict[str, list[str]]] = {}
    branch_index = 0
    for top, edge, mid, mids in tree:
        for m2, filler_str, branches in mids:
            fillers = filler_str.split()
            for m3, leaf_pairs in branches:
                shared = _shared_template(m3, fillers, edge, mid)
                edge_values = attributes[edge]
                mid_values = attributes[mid]
                for side, (leaf, noun) in enumerate(leaf_pairs):
                    path = f"{top} > {m2} > {m3} > {leaf}"
                    # The sibling-shared shape is listed three times so about
                    # half of the sampled titles carry no leaf-specific wording.
                    templates[path] = _leaf_templates(noun, m3, fillers, edge, mid) + [shared] * 3
                    e_half = len(edge_values) // 2
                    e0 = (5 * branch_index + e_half * side) % len(edge_values)
                    edge_pref = [edge_values[(e0 + k) % len(edge_values)] for k in range(e_half)]
                    m_half = len(mid_values) // 2
                    m0 = (3 * branch_index + m_half * side) % len(mid_values)
                    mid_pref = [mid_values[(m0 + k) % len(mid_values)] for k in range(m_half)]
                    preferred[path] = {edge: edge_pref, mid: mid_pref}
                branch_index += 1
    return SynthConfig(
        templates=templates,
        attributes=attributes,
        preferred=preferred,
        rho=rho,
        labeled_size=labeled_size,
        test_size=test_size,
        group_count=group_count,
        group_sizes=group_sizes,
        l1_weights=l1_weights,
        group_leaf_bias=group_leaf_bias,
        seed=seed,
    )



def default_config(seed: int = 0, rho: float = 0.9) -> SynthConfig:
    """The desk-scale world: 24 leaves, depth 4, shifted unlabeled source.

    Sized so every pipeline (baseline, masking, self-training, generative
    augmentation) trains in seconds while leaving room for measurable
    consistency gaps: ~5k labeled rows, ~5k groups of 2-6 versions.
    """
    attributes = {
        "color": list(_COLORS),
        "size": list(_SIZES),
        "material": list(_MATERIALS),
        "flavor": list(_FLAVORS),
        "amount": list(_AMOUNTS),
        "style": list(_STYLES),
    }
    return _build_tree_config(
        _DEFAULT_TREE,
        attributes,
        rho=rho,
        labeled_size=5000,
        test_size=1500,
        group_count=5000,
        group_sizes={2: 0.22, 3: 0.26, 4: 0.24, 5: 0.18, 6: 0.10},
        l1_weights={"apparel": 0.70, "grocery": 0.20, "office": 0.10},
        group_leaf_bias={
            "apparel > mens > tops > tees": 8.0,
            "apparel > mens > tops > polos": 8.0,
        },
        seed=seed,
    )


def lexicon_config(seed: int = 0, rho: float = 0.9) -> SynthConfig:
    """A world whose version function only edits lexicon-covered slots.

    Every template slot is a color, a size, or a style number; colors
    and sizes come from the bundled attribute lexicon, so masking them
    makes same-item versions nearly indistinguishable.
    """
    tree = [
        (top, "color", "size", mids)
        for top, _, _, mids in _DEFAULT_TREE[:2]
    ]
    attributes = {
        "color": list(_COLORS),
        "size": list(_SIZES),
        "style": list(_STYLES),
    }
    return _build_tree_config(
        tree,
        attributes,
        rho=rho,
        labeled_size=2500,
        test_size=800,
        group_count=2500,
        group_sizes={2: 0.3, 3: 0.3, 4: 0.25, 5: 0.15},
        l1_weights={"apparel": 0.6, "grocery": 0.4},
        seed=seed,
    )
