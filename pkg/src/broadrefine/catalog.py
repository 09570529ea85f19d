"""Seeded synthetic product catalog and query benchmark generation."""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Iterator, Mapping, Sequence

import numpy as np

from .querylang import Constraint, ParsedQuery, parse, serialize

if TYPE_CHECKING:
    from .engine import SearchEngine

logger = logging.getLogger(__name__)

__all__ = [
    "ConfigurationError",
    "DataError",
    "CategorySchema",
    "Schema",
    "CatalogSpec",
    "Item",
    "Catalog",
    "QueryRecord",
    "reference_schema",
    "reference_catalog",
    "reference_benchmark",
    "generate_catalog",
    "inverse_augment",
    "build_query_benchmark",
    "text_tokens",
    "derive_seed",
    "REFERENCE_CATALOG_SEED",
    "REFERENCE_BENCHMARK_SEED",
]

REFERENCE_CATALOG_SEED = 2025
REFERENCE_BENCHMARK_SEED = 5

_WORD_RE = re.compile(r"[a-z0-9][a-z0-9_\-]*")

# Filler vocabulary for generated review / OCR text. None of these may collide
# with a soft-tag token, otherwise the verifier would see phantom descriptors.
_FILLER = (
    "great", "quality", "delivery", "arrived", "on", "time", "packaging", "nice",
    "value", "for", "money", "recommended", "seller", "responsive", "as", "described",
    "would", "buy", "again", "material", "feels", "good", "product", "details",
    "size", "chart", "care", "instructions", "warranty", "included", "model", "shown",
)


class ConfigurationError(ValueError):
    """Invalid generation parameters."""


class DataError(ValueError):
    """Malformed or inconsistent input data."""


def derive_seed(*parts: int) -> int:
    """Stable 63-bit seed derived from integer parts."""
    ss = np.random.SeedSequence([int(p) & 0xFFFFFFFFFFFFFFFF for p in parts])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def text_tokens(text: str) -> frozenset[str]:
    return frozenset(_WORD_RE.findall(text.lower()))


@dataclass(frozen=True)
class CategorySchema:
    attributes: Mapping[str, tuple[str, ...]]
    numeric: Mapping[str, tuple[float, float]]
    tags: tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "attributes": {k: list(v) for k, v in self.attributes.items()},
            "numeric": {k: list(v) for k, v in self.numeric.items()},
            "tags": list(self.tags),
        }


@dataclass(frozen=True)
class Schema:
    categories: Mapping[str, CategorySchema]
    regions: tuple[str, ...]

    def validate(self) -> None:
        if not self.categories:
            raise ConfigurationError("schema declares no categories")
        if not self.regions:
            raise ConfigurationError("schema declares no regions")
        for name, cat in self.categories.items():
            if not cat.attributes:
                raise ConfigurationError(f"category {name!r} has no attribute keys")
            for key, vocab in cat.attributes.items():
                if not vocab:
                    raise ConfigurationError(f"empty vocabulary for {name}.{key}")
            if not cat.tags:
                raise ConfigurationError(f"category {name!r} has an empty soft-tag vocabulary")
            for key, (lo, hi) in cat.numeric.items():
                if not lo <= hi:
                    raise ConfigurationError(f"numeric range {name}.{key} is inverted")
                if key == "price" and lo <= 0:
                    raise ConfigurationError(f"price range for {name!r} must be positive")

    def to_dict(self) -> dict:
        return {
            "categories": {k: v.to_dict() for k, v in self.categories.items()},
            "regions": list(self.regions),
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "Schema":
        try:
            cats = {
                name: CategorySchema(
                    attributes={k: tuple(v) for k, v in c["attributes"].items()},
                    numeric={k: (float(v[0]), float(v[1])) for k, v in c.get("numeric", {}).items()},
                    tags=tuple(c.get("tags", ())),
                )
                for name, c in doc["categories"].items()
            }
            return cls(categories=cats, regions=tuple(doc["regions"]))
        except (KeyError, TypeError, IndexError) as exc:
            raise DataError(f"malformed schema document: {exc}") from exc


def reference_schema() -> Schema:
    """Five categories with 5-6 attribute keys each."""
    price_sales = lambda lo, hi: {"price": (lo, hi), "sales": (0.0, 5000.0)}  # noqa: E731
    cats = {
        "blazer": CategorySchema(
            attributes={
                "material": ("linen", "wool", "cotton", "polyester", "velvet"),
                "color": ("black", "navy", "beige", "grey", "white", "olive"),
                "fit": ("slim", "regular", "loose"),
                "pattern": ("solid", "plaid", "stripe", "check"),
                "gender": ("men", "women", "unisex"),
                "season": ("summer", "winter", "all-season"),
            },
            numeric=price_sales(150.0, 1500.0),
            tags=("beach-wedding", "breathable", "formal", "lightweight", "wrinkle-free",
                  "business", "vintage", "stretchy"),
        ),
        "dress": CategorySchema(
            attributes={
                "material": ("silk", "cotton", "chiffon", "linen", "lace"),
                "color": ("red", "black", "white", "blue", "pink", "green"),
                "length": ("mini", "midi", "maxi"),
                "neckline": ("v-neck", "round", "square", "halter"),
                "sleeve": ("sleeveless", "short", "long"),
            },
            numeric=price_sales(80.0, 1200.0),
            tags=("party", "flowy", "elegant", "beach", "office", "romantic", "slimming",
                  "comfortable"),
        ),
        "sneaker": CategorySchema(
            attributes={
                "material": ("leather", "mesh", "canvas", "suede"),
                "color": ("white", "black", "grey", "red", "blue"),
                "sole": ("rubber", "foam", "eva"),
                "closure": ("lace-up", "slip-on", "velcro"),
                "usage": ("running", "casual", "basketball", "hiking"),
                "gender": ("men", "women", "unisex"),
            },
            numeric=price_sales(100.0, 1600.0),
            tags=("cushioned", "lightweight", "non-slip", "retro", "wide-fit", "durable",
                  "breathable", "minimalist"),
        ),
        "air-conditioner": CategorySchema(
            attributes={
                "type": ("portable", "window", "split"),
                "capacity": ("small", "medium", "large"),
                "energy": ("grade-1", "grade-2", "grade-3"),
                "color": ("white", "grey", "black"),
                "heating": ("yes", "no"),
            },
            numeric=price_sales(900.0, 6000.0),
            tags=("quiet", "energy-saving", "smart", "compact", "fast-cooling", "dehumidify",
                  "easy-install", "sleep-mode"),
        ),
        "backpack": CategorySchema(
            attributes={
                "material": ("nylon", "leather", "canvas", "polyester"),
                "color": ("black", "grey", "navy", "green", "khaki"),
                "capacity": ("15l", "20l", "30l", "40l"),
                "style": ("laptop", "hiking", "school", "travel"),
                "closure": ("zip", "buckle", "drawstring"),
                "waterproof": ("yes", "no"),
            },
            numeric=price_sales(60.0, 900.0),
            tags=("anti-theft", "lightweight", "ergonomic", "durable", "minimalist",
                  "usb-port", "expandable", "padded"),
        ),
    }
    return Schema(categories=cats, regions=("north", "south", "east", "west", "nationwide"))


@dataclass(frozen=True)
class Item:
    id: int
    title: str
    category: str
    attributes: Mapping[str, str]
    numeric: Mapping[str, float]
    tags: frozenset[str]
    region: str
    review_text: str = ""
    ocr_text: str = ""

    def __post_init__(self) -> None:
        if not isinstance(self.id, int) or self.id < 0:
            raise DataError(f"item id must be a non-negative integer, got {self.id!r}")
        if not self.category:
            raise DataError(f"item {self.id} has an empty category")
        price = self.numeric.get("price")
        if price is not None and not price > 0:
            raise DataError(f"item {self.id} has non-positive price {price}")
        object.__setattr__(self, "tags", frozenset(self.tags))

    @cached_property
    def descriptor_tokens(self) -> frozenset[str]:
        """Soft-descriptor evidence from tags plus review and OCR text."""
        return self.tags | text_tokens(self.review_text) | text_tokens(self.ocr_text)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "title": self.title,
            "category": self.category,
            "attributes": dict(sorted(self.attributes.items())),
            "numeric": dict(sorted(self.numeric.items())),
            "tags": sorted(self.tags),
            "region": self.region,
            "review_text": self.review_text,
            "ocr_text": self.ocr_text,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Item":
        try:
            return cls(
                id=d["id"],
                title=d["title"],
                category=d["category"],
                attributes=dict(d["attributes"]),
                numeric={k: float(v) for k, v in d["numeric"].items()},
                tags=frozenset(d["tags"]),
                region=d["region"],
                review_text=d.get("review_text", ""),
                ocr_text=d.get("ocr_text", ""),
            )
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed item record: {exc}") from exc


class Catalog:
    """Immutable, id-ordered collection of items."""

    def __init__(self, items: Iterable[Item], schema: Schema | None = None) -> None:
        self.items: tuple[Item, ...] = tuple(sorted(items, key=lambda it: it.id))
        self.schema = schema
        self._by_id = {}
        for it in self.items:
            if it.id in self._by_id:
                raise DataError(f"duplicate item id {it.id}")
            self._by_id[it.id] = it

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self) -> Iterator[Item]:
        return iter(self.items)

    def __getitem__(self, item_id: int) -> Item:
        return self._by_id[item_id]

    def __contains__(self, item_id: int) -> bool:
        return item_id in self._by_id

    def by_category(self) -> dict[str, list[Item]]:
        out: dict[str, list[Item]] = {}
        for it in self.items:
            out.setdefault(it.category, []).append(it)
        return out

    def to_jsonl(self) -> str:
        return "".join(json.dumps(it.to_dict(), sort_keys=False) + "\n" for it in self.items)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")

    @classmethod
    def read(cls, path: str | Path, schema: Schema | None = None) -> "Catalog":
        items = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    items.append(Item.from_dict(json.loads(line)))
                except (json.JSONDecodeError, DataError) as exc:
                    raise DataError(f"{path}:{lineno}: {exc}") from exc
        return cls(items, schema)


@dataclass(frozen=True)
class CatalogSpec:
    """Generation parameters.

    ``tag_rate`` is the per-tag probability that an item carries a soft tag in
    its structured metadata. ``text_rate`` is the probability that a tag the
    item lacks is nonetheless mentioned in its review or OCR text; only the
    verifier reads those fields.
    """

    num_items: int
    schema: Schema = field(default_factory=reference_schema)
    seed: int = REFERENCE_CATALOG_SEED
    tag_rate: float = 0.3
    text_rate: float = 0.35

    def validate(self) -> None:
        if not isinstance(self.num_items, int) or self.num_items < 0:
            raise ConfigurationError(f"num_items must be a non-negative integer, got {self.num_items!r}")
        if not (0.0 <= self.tag_rate <= 1.0 and 0.0 <= self.text_rate <= 1.0):
            raise ConfigurationError("tag_rate and text_rate must lie in [0, 1]")
        self.schema.validate()


def generate_catalog(spec: CatalogSpec) -> Catalog:
    """Generate ``spec.num_items`` items, deterministically for a fixed seed.

    Categories are assigned by shuffling a balanced round-robin list, so
    every category is populated once ``num_items`` reaches the category
    count. Every item carries every attribute key of its category.
    """
    spec.validate()
    schema = spec.schema
    rng = np.random.default_rng(spec.seed)
    names = list(schema.categories)
    assignment = rng.permutation(np.arange(spec.num_items) % len(names))
    items = []
    for item_id, cat_idx in enumerate(assignment.tolist()):
        category = names[cat_idx]
        cs = schema.categories[category]
        attrs = {k: vocab[int(rng.integers(len(vocab)))] for k, vocab in cs.attributes.items()}
        numeric = {}
        for key, (lo, hi) in cs.numeric.items():
            x = float(rng.uniform(lo, hi))
            numeric[key] = float(round(x)) if key == "sales" else round(x, 2)
        has_tag = rng.random(len(cs.tags)) < spec.tag_rate
        mention = rng.random(len(cs.tags)) < spec.text_rate
        where = rng.random(len(cs.tags)) < 0.5
        tags = frozenset(t for t, h in zip(cs.tags, has_tag) if h)
        review_words = list(rng.choice(_FILLER, size=6))
        ocr_words = list(rng.choice(_FILLER, size=4))
        for tag, h, m, w in zip(cs.tags, has_tag, mention, where):
            if not h and m:
                (review_words if w else ocr_words).append(tag)
        region = schema.regions[int(rng.integers(len(schema.regions)))]
        title_bits = [attrs[k] for k in list(cs.attributes)[:2]] + sorted(tags)[:1] + [category]
        items.append(
            Item(
                id=item_id,
                title=" ".join(title_bits),
                category=category,
                attributes=attrs,
                numeric=numeric,
                tags=tags,
                region=region,
                review_text=" ".join(str(w) for w in review_words),
                ocr_text=" ".join(str(w) for w in ocr_words),
            )
        )
    logger.debug("generated %d items across %d categories", len(items), len(names))
    return Catalog(items, schema)


@dataclass(frozen=True)
class QueryRecord:
    query_text: str
    gold_rewrite: str
    source_item: int

    def to_dict(self) -> dict:
        return {"query_text": self.query_text, "gold_rewrite": self.gold_rewrite,
                "source_item": self.source_item}

    @classmethod
    def from_dict(cls, d: Mapping) -> "QueryRecord":
        try:
            return cls(d["query_text"], d["gold_rewrite"], int(d["source_item"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed query record: {exc}") from exc

    @property
    def query(self) -> ParsedQuery:
        return parse(self.query_text)


def write_benchmark(records: Sequence[QueryRecord], path: str | Path) -> None:
    Path(path).write_text("".join(json.dumps(r.to_dict()) + "\n" for r in records), encoding="utf-8")


def read_benchmark(path: str | Path) -> list[QueryRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    out.append(QueryRecord.from_dict(json.loads(line)))
                except json.JSONDecodeError as exc:
                    raise DataError(f"{path}:{lineno}: {exc}") from exc
    return out


def _price_window(price: float, rng: np.random.Generator) -> tuple[float, float]:
    lo = math.floor(price * rng.uniform(0.55, 0.95) / 10) * 10
    hi = math.ceil(price * rng.uniform(1.05, 1.6) / 10) * 10
    return float(max(lo, 0)), float(hi)


def inverse_augment(item: Item, seed: int, schema: Schema | None = None, level: int = 1,
                    max_gold_attrs: int = 2) -> QueryRecord:
    """Synthesize a (conversational query, standard rewrite) pair from an item.

    The gold rewrite keeps the item's category plus a seeded subset of at most
    ``max_gold_attrs`` of its attributes. The query adds ``level`` soft
    descriptors from the category vocabulary that are absent from the gold
    rewrite, one negation the source item satisfies (when ``level >= 1``) and,
    for about half of the seeds, a price window around the item's price.
    Without a schema, descriptors and negations are drawn from the item's own
    tags and attribute values only.
    """
    rng = np.random.default_rng(seed)
    keys = sorted(item.attributes)
    k = int(rng.integers(min(max_gold_attrs, len(keys)) + 1)) if keys else 0
    chosen = sorted(rng.choice(len(keys), size=k, replace=False).tolist()) if k else []
    gold = ParsedQuery(item.category, tuple(Constraint.attr(keys[i], item.attributes[keys[i]])
                                            for i in chosen))
    extra: list[Constraint] = []
    cat_schema = schema.categories.get(item.category) if schema is not None else None
    if level >= 1:
        if "price" in item.numeric and rng.random() < 0.5:
            extra.append(Constraint.range("price", *_price_window(item.numeric["price"], rng)))
        gold_keys = {c.key for c in gold.constraints}
        neg_keys = [key for key in keys if key not in gold_keys]
        if neg_keys:
            key = neg_keys[int(rng.integers(len(neg_keys)))]
            vocab = cat_schema.attributes.get(key, ()) if cat_schema is not None else ()
            options = [v for v in vocab if v != item.attributes[key]]
            if options:
                extra.append(Constraint.neg(key, options[int(rng.integers(len(options)))]))
        vocab = list(cat_schema.tags) if cat_schema is not None else sorted(item.tags)
        if vocab:
            n_soft = min(level, len(vocab))
            picks = rng.choice(len(vocab), size=n_soft, replace=False).tolist()
            extra.extend(Constraint.soft(vocab[i]) for i in picks)
    query = ParsedQuery(item.category, gold.constraints + tuple(extra))
    return QueryRecord(serialize(query), serialize(gold), item.id)


def build_query_benchmark(catalog: Catalog, count: int, over_constraint_level: int, seed: int,
                          engine: "SearchEngine | None" = None, min_zero_fraction: float = 0.2,
                          max_gold_attrs: int = 2) -> list[QueryRecord]:
    """Seeded benchmark of conversational queries.

    For ``over_constraint_level >= 2`` at least ``min_zero_fraction`` of the
    emitted queries match no catalog item under the full constraint
    conjunction; the engine is consulted at generation time and candidates
    are rejected as needed to reach that quota.
    """
    if count < 0:
        raise ConfigurationError("count must be non-negative")
    if count == 0:
        return []
    if len(catalog) == 0:
        raise ConfigurationError("cannot build a benchmark over an empty catalog")
    if engine is None:
        from .engine import SearchEngine

        engine = SearchEngine(catalog)
    need_zero = math.ceil(min_zero_fraction * count) if over_constraint_level >= 2 else 0
    rng = np.random.default_rng(seed)
    records: list[QueryRecord] = []
    zeros = 0
    attempts = 0
    max_attempts = 200 * count
    while len(records) < count:
        attempts += 1
        if attempts > max_attempts:
            raise ConfigurationError(
                f"could not reach {need_zero} zero-result queries after {max_attempts} attempts")
        item = catalog.items[int(rng.integers(len(catalog)))]
        rec = inverse_augment(item, derive_seed(seed, attempts), catalog.schema,
                              over_constraint_level, max_gold_attrs)
        is_zero = engine.count_matches(parse(rec.query_text)) == 0
        if not is_zero and count - len(records) <= need_zero - zeros:
            continue
        zeros += is_zero
        records.append(rec)
    logger.info("benchmark: %d queries, %d with zero exact matches", len(records), zeros)
    return records


_REFERENCE_CACHE: dict = {}


def reference_catalog(num_items: int = 10_000, seed: int = REFERENCE_CATALOG_SEED) -> Catalog:
    """The 10k-item reference catalog (memoized per process)."""
    key = ("catalog", num_items, seed)
    if key not in _REFERENCE_CACHE:
        _REFERENCE_CACHE[key] = generate_catalog(CatalogSpec(num_items=num_items, seed=seed))
    return _REFERENCE_CACHE[key]


def reference_benchmark(count: int = 200, level: int = 3,
                        seed: int = REFERENCE_BENCHMARK_SEED) -> list[QueryRecord]:
    key = ("bench", count, level, seed)
    if key not in _REFERENCE_CACHE:
        _REFERENCE_CACHE[key] = build_query_benchmark(reference_catalog(), count, level, seed)
    return _REFERENCE_CACHE[key]
