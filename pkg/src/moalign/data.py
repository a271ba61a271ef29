"""Multi-modal KG data model, TSV ingestion, seed splits, negatives, synthetic pairs."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

UNTYPED = "untyped"

ENTITY_REL = "entity"
TEXT_ATTR = "text"
IMAGE_ATTR = "image"

FILE_NAMES = {
    "entity_triples": "rel_triples.tsv",
    "text_attrs": "text_attr_triples.tsv",
    "image_attrs": "image_attr_triples.tsv",
    "types": "entity_types.tsv",
}
SEEDS_FILE = "seeds.tsv"
MANIFEST_FILE = "manifest.json"


class DataError(ValueError):
    """Malformed or inconsistent KG input."""


class ParseError(DataError):
    def __init__(self, path, lineno, msg):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path, self.lineno = str(path), lineno


class DanglingReferenceError(DataError):
    def __init__(self, missing, path=None, lineno=None):
        where = f"{path}:{lineno}: " if path is not None else ""
        super().__init__(f"{where}undeclared entity {missing!r}")
        self.missing, self.path, self.lineno = missing, path, lineno


@dataclass(frozen=True, eq=True)
class MultiModalKG:
    """One multi-modal knowledge graph.

    Image values are tuples of floats so that the whole structure compares and
    hashes by value.  ``entity_types`` maps every entity to a type id string;
    entities without a declared type carry ``UNTYPED``.
    """

    entities: tuple
    relations: dict
    relational_triplets: tuple
    text_attribute_triplets: tuple
    image_attribute_triplets: tuple
    entity_types: dict
    index: dict = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.index is None:
            object.__setattr__(self, "index", {e: i for i, e in enumerate(self.entities)})

    @property
    def types(self):
        return sorted(set(self.entity_types.values()))

    @property
    def n_types(self):
        return len(set(self.entity_types.values()))

    def relations_of_kind(self, kind):
        return sorted(r for r, k in self.relations.items() if k == kind)

    def validate(self):
        """Re-check every referential invariant; raises ``DataError``."""
        ents = set(self.entities)
        if len(ents) != len(self.entities):
            raise DataError("duplicate entity ids")
        for h, r, t in self.relational_triplets:
            for e in (h, t):
                if e not in ents:
                    raise DanglingReferenceError(e)
            if self.relations.get(r) != ENTITY_REL:
                raise DataError(f"relation {r!r} is not an entity relation")
        for triples, kind in ((self.text_attribute_triplets, TEXT_ATTR),
                              (self.image_attribute_triplets, IMAGE_ATTR)):
            for e, a, v in triples:
                if e not in ents:
                    raise DanglingReferenceError(e)
                if self.relations.get(a) != kind:
                    raise DataError(f"attribute {a!r} is not a {kind} attribute")
                if kind == TEXT_ATTR and not v:
                    raise DataError(f"empty text value for {e!r}")
                if kind == IMAGE_ATTR and len(v) == 0:
                    raise DataError(f"empty image vector for {e!r}")
        if set(self.entity_types) != ents:
            raise DataError("entity_types must cover exactly the entity set")
        return self

    def neighbors(self):
        """Map entity -> list of (neighbor, relation) over both edge directions."""
        out = {e: [] for e in self.entities}
        for h, r, t in self.relational_triplets:
            out[h].append((t, r))
            out[t].append((h, r))
        return out

    def attributes(self):
        """Map entity -> (list of text triple indices, list of image triple indices)."""
        text = {e: [] for e in self.entities}
        image = {e: [] for e in self.entities}
        for k, (e, _, _) in enumerate(self.text_attribute_triplets):
            text[e].append(k)
        for k, (e, _, _) in enumerate(self.image_attribute_triplets):
            image[e].append(k)
        return text, image


def make_kg(relational, text, image, types, entities=None):
    """Assemble and validate a KG from plain triplet lists."""
    relations = {}

    def declare(r, kind):
        prev = relations.setdefault(r, kind)
        if prev != kind:
            raise DataError(f"relation {r!r} used both as {prev} and {kind}")

    for _, r, _ in relational:
        declare(r, ENTITY_REL)
    for _, a, _ in text:
        declare(a, TEXT_ATTR)
    for _, a, _ in image:
        declare(a, IMAGE_ATTR)
    if entities is None:
        entities = list(types)
    entity_types = {e: types.get(e, UNTYPED) for e in entities}
    kg = MultiModalKG(
        entities=tuple(entities),
        relations=relations,
        relational_triplets=tuple(tuple(t) for t in relational),
        text_attribute_triplets=tuple((e, a, str(v)) for e, a, v in text),
        image_attribute_triplets=tuple((e, a, tuple(float(x) for x in v)) for e, a, v in image),
        entity_types=entity_types,
    )
    return kg.validate()


# ---------------------------------------------------------------- TSV IO

def _rows(path, ncols, n_ids=2):
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) not in ncols:
                raise ParseError(path, lineno, f"expected {' or '.join(map(str, ncols))} "
                                               f"tab-separated columns, got {len(parts)}")
            if any(not p for p in parts[:n_ids]):
                raise ParseError(path, lineno, "empty id")
            yield lineno, parts


def load_kg(entity_triple_path, text_attr_path=None, image_attr_path=None, type_path=None):
    """Load one KG from the four TSV files.

    When ``type_path`` is given it declares the entity set: every id used by any
    triplet must appear there, and a line with an empty or missing type column
    marks the entity untyped.  Without a type file the entity set is whatever
    the relational triples mention, and every entity is untyped.
    """
    types, declared = {}, []
    if type_path is not None:
        for lineno, parts in _rows(type_path, (1, 2), n_ids=1):
            e = parts[0]
            if e in types:
                raise ParseError(type_path, lineno, f"duplicate type entry for {e!r}")
            types[e] = parts[1] if len(parts) == 2 and parts[1] else UNTYPED
            declared.append(e)

    relational, seen = [], {}
    for lineno, (h, r, t) in _rows(entity_triple_path, (3,)):
        if not t:
            raise ParseError(entity_triple_path, lineno, "empty tail id")
        for e in (h, t):
            if type_path is not None and e not in types:
                raise DanglingReferenceError(e, entity_triple_path, lineno)
            if e not in seen:
                seen[e] = True
        relational.append((h, r, t))
    entities = declared if type_path is not None else list(seen)
    known = set(entities)

    text = []
    if text_attr_path is not None:
        for lineno, (e, a, v) in _rows(text_attr_path, (3,)):
            if e not in known:
                raise DanglingReferenceError(e, text_attr_path, lineno)
            if not v:
                raise ParseError(text_attr_path, lineno, "empty text value")
            text.append((e, a, v))

    image = []
    if image_attr_path is not None:
        for lineno, (e, a, v) in _rows(image_attr_path, (3,)):
            if e not in known:
                raise DanglingReferenceError(e, image_attr_path, lineno)
            try:
                vec = tuple(float(x) for x in v.split())
            except ValueError as exc:
                raise ParseError(image_attr_path, lineno, f"bad real value ({exc})") from None
            if not vec:
                raise ParseError(image_attr_path, lineno, "empty image vector")
            image.append((e, a, vec))

    try:
        return make_kg(relational, text, image, types, entities=entities)
    except DataError as exc:
        if isinstance(exc, ParseError):
            raise
        raise DataError(f"{entity_triple_path}: {exc}") from None


def load_kg_dir(directory):
    d = Path(directory)
    paths = {k: d / v for k, v in FILE_NAMES.items()}
    return load_kg(
        paths["entity_triples"],
        paths["text_attrs"] if paths["text_attrs"].exists() else None,
        paths["image_attrs"] if paths["image_attrs"].exists() else None,
        paths["types"] if paths["types"].exists() else None,
    )


def save_kg(kg: MultiModalKG, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / FILE_NAMES["entity_triples"], "w", encoding="utf-8") as f:
        for h, r, t in kg.relational_triplets:
            f.write(f"{h}\t{r}\t{t}\n")
    with open(d / FILE_NAMES["text_attrs"], "w", encoding="utf-8") as f:
        for e, a, v in kg.text_attribute_triplets:
            f.write(f"{e}\t{a}\t{v}\n")
    with open(d / FILE_NAMES["image_attrs"], "w", encoding="utf-8") as f:
        for e, a, v in kg.image_attribute_triplets:
            f.write(f"{e}\t{a}\t{' '.join(repr(x) for x in v)}\n")
    with open(d / FILE_NAMES["types"], "w", encoding="utf-8") as f:
        for e in kg.entities:
            t = kg.entity_types[e]
            f.write(f"{e}\t{'' if t == UNTYPED else t}\n")


def load_seeds(path, kg1=None, kg2=None):
    pairs = [(a, b) for _, (a, b) in _rows(path, (2,))]
    seeds = AlignmentSeedSet(pairs)
    if kg1 is not None:
        for a, _ in pairs:
            if a not in kg1.index:
                raise DanglingReferenceError(a, path)
    if kg2 is not None:
        for _, b in pairs:
            if b not in kg2.index:
                raise DanglingReferenceError(b, path)
    return seeds


def save_seeds(seeds, path):
    with open(path, "w", encoding="utf-8") as f:
        for a, b in seeds:
            f.write(f"{a}\t{b}\n")


def kg_summary(kg):
    return {
        "entities": len(kg.entities),
        "relations": len(kg.relations_of_kind(ENTITY_REL)),
        "text_attributes": len(kg.relations_of_kind(TEXT_ATTR)),
        "image_attributes": len(kg.relations_of_kind(IMAGE_ATTR)),
        "relational_triplets": len(kg.relational_triplets),
        "text_attribute_triplets": len(kg.text_attribute_triplets),
        "image_attribute_triplets": len(kg.image_attribute_triplets),
        "types": kg.n_types,
    }


def write_pair(kg1, kg2, seeds, out_dir, extra=None):
    """Write both KGs, the seeds file and a manifest of set sizes."""
    out = Path(out_dir)
    save_kg(kg1, out / "kg1")
    save_kg(kg2, out / "kg2")
    save_seeds(seeds, out / SEEDS_FILE)
    manifest = {"kg1": kg_summary(kg1), "kg2": kg_summary(kg2), "seeds": len(seeds)}
    if extra:
        manifest.update(extra)
    (out / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_pair(directory):
    d = Path(directory)
    kg1, kg2 = load_kg_dir(d / "kg1"), load_kg_dir(d / "kg2")
    return kg1, kg2, load_seeds(d / SEEDS_FILE, kg1, kg2)


# ---------------------------------------------------------------- seeds

class AlignmentSeedSet(tuple):
    """Ordered one-to-one list of (kg1 entity, kg2 entity) pairs."""

    def __new__(cls, pairs=()):
        pairs = tuple((a, b) for a, b in pairs)
        left = [a for a, _ in pairs]
        right = [b for _, b in pairs]
        if len(set(left)) != len(left) or len(set(right)) != len(right):
            raise DataError("alignment seeds must be one-to-one")
        return super().__new__(cls, pairs)

    @property
    def left(self):
        return [a for a, _ in self]

    @property
    def right(self):
        return [b for _, b in self]


@dataclass(frozen=True)
class DatasetSplit:
    train: AlignmentSeedSet
    test: AlignmentSeedSet
    ratio: tuple
    split_seed: int


def split_seeds(seeds, ratio, split_seed):
    """Shuffle ``seeds`` under ``split_seed`` and cut a train prefix.

    ``ratio`` is ``(train, test)`` proportions, e.g. ``(2, 8)`` or ``(0.2, 0.8)``.
    """
    if len(seeds) == 0:
        raise DataError("cannot split an empty seed set")
    tr, te = ratio
    frac = tr / (tr + te)
    if not 0 < frac < 1:
        raise ValueError(f"train fraction must lie in (0, 1), got {frac}")
    order = np.random.default_rng(split_seed).permutation(len(seeds))
    shuffled = [seeds[i] for i in order]
    n_train = int(round(frac * len(seeds)))
    return DatasetSplit(AlignmentSeedSet(shuffled[:n_train]), AlignmentSeedSet(shuffled[n_train:]),
                        (frac, 1.0 - frac), split_seed)


def sample_negatives(pair, kg1, kg2, count_per_side, rng):
    """Uniform negatives without replacement.

    Returns ``(negatives_left, negatives_right)``: ``negatives_left`` are kg2
    entities other than ``e'`` (to contrast with ``e``), ``negatives_right`` are
    kg1 entities other than ``e`` (to contrast with ``e'``).
    """
    e, e2 = pair
    if len(kg2.entities) < count_per_side + 1 or len(kg1.entities) < count_per_side + 1:
        raise DataError(f"need at least {count_per_side + 1} entities per KG for negatives")
    return (_draw_excluding(kg2.entities, kg2.index[e2], count_per_side, rng),
            _draw_excluding(kg1.entities, kg1.index[e], count_per_side, rng))


def _draw_excluding(entities, skip, k, rng):
    picks = rng.choice(len(entities) - 1, size=k, replace=False)
    return [entities[i + (i >= skip)] for i in picks]


# ---------------------------------------------------------------- synthetic data

WORDS = [f"w{i:03d}" for i in range(400)]


def synth_paired_kgs(n_entities, n_relations=4, n_text_attrs=2, n_image_attrs=2, n_types=5,
                     noise_sigma=0.05, rng=None, image_dim=32, text_words=3,
                     edges_per_entity=2, suffix="alt"):
    """Generate two KGs with a planted one-to-one alignment.

    kg2 renames every kg1 entity through a random permutation, perturbs image
    vectors with Gaussian noise of scale ``noise_sigma``, and appends ``suffix``
    as an extra word to each text value.  Relation, attribute and type
    vocabularies are shared.
    """
    if min(n_entities, n_relations, n_text_attrs, n_image_attrs, n_types) <= 0:
        raise ValueError("synthetic KG counts must be positive")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    rng = np.random.default_rng(rng)
    n = n_entities
    ents1 = [f"a{i}" for i in range(n)]
    perm = rng.permutation(n)
    ents2 = [f"b{perm[i]}" for i in range(n)]
    rels = [f"rel{k}" for k in range(n_relations)]
    tattrs = [f"txt{k}" for k in range(n_text_attrs)]
    iattrs = [f"img{k}" for k in range(n_image_attrs)]
    type_ids = [f"type{k}" for k in range(n_types)]

    types = {i: type_ids[rng.integers(n_types)] for i in range(n)}
    edges = set()
    if n > 1:
        for i in range(n):
            for _ in range(edges_per_entity):
                j = int(rng.integers(n - 1))
                j += j >= i
                edges.add((i, rels[rng.integers(n_relations)], j))
    edges = sorted(edges, key=lambda x: (x[0], x[2], x[1]))
    text, image = [], []
    for i in range(n):
        for k, a in enumerate(tattrs):
            if k == 0 or rng.random() < 0.5:
                words = rng.choice(len(WORDS), size=text_words, replace=False)
                text.append((i, a, " ".join(WORDS[w] for w in words)))
        for k, a in enumerate(iattrs):
            if k == 0 or rng.random() < 0.5:
                image.append((i, a, rng.standard_normal(image_dim)))

    kg1 = make_kg(
        [(ents1[h], r, ents1[t]) for h, r, t in edges],
        [(ents1[i], a, v) for i, a, v in text],
        [(ents1[i], a, v) for i, a, v in image],
        {ents1[i]: types[i] for i in range(n)},
    )
    noisy = [v + noise_sigma * rng.standard_normal(v.shape) if noise_sigma > 0 else v
             for _, _, v in image]
    order2 = sorted(range(n), key=lambda i: perm[i])
    kg2 = make_kg(
        [(ents2[h], r, ents2[t]) for h, r, t in edges],
        [(ents2[i], a, f"{v} {suffix}" if suffix else v) for i, a, v in text],
        [(ents2[i], a, v) for (i, a, _), v in zip(image, noisy)],
        {ents2[i]: types[i] for i in order2},
    )
    truth = AlignmentSeedSet((ents1[i], ents2[i]) for i in range(n))
    return kg1, kg2, truth


def perturb_kg(kg, fraction, target, rng):
    """Replace ``floor(fraction*n + 0.5)`` targeted triplets' tails or values.

    ``target='neighbors'`` redraws the tail entity of relational triplets;
    ``target='attributes'`` redraws values from the pool of other values of the
    same modality (text values, image vectors).
    """
    if not 0.0 <= fraction <= 0.3:
        raise ValueError(f"perturbation fraction must lie in [0, 0.3], got {fraction}")
    rng = np.random.default_rng(rng)
    if target == "neighbors":
        triples = list(kg.relational_triplets)
        k = math.floor(fraction * len(triples) + 0.5)
        for i in sorted(rng.choice(len(triples), size=k, replace=False)):
            h, r, t = triples[i]
            pool = [e for e in kg.entities if e not in (h, t)]
            triples[i] = (h, r, pool[rng.integers(len(pool))])
        return replace(kg, relational_triplets=tuple(triples)).validate()
    if target == "attributes":
        text = list(kg.text_attribute_triplets)
        image = list(kg.image_attribute_triplets)
        slots = [("t", i) for i in range(len(text))] + [("i", i) for i in range(len(image))]
        k = math.floor(fraction * len(slots) + 0.5)
        for j in sorted(rng.choice(len(slots), size=k, replace=False)):
            kind, i = slots[j]
            rows = text if kind == "t" else image
            e, a, v = rows[i]
            pool = sorted({row[2] for row in rows if row[2] != v})
            if pool:
                rows[i] = (e, a, pool[rng.integers(len(pool))])
            elif kind == "t":
                rows[i] = (e, a, v + " x")
            else:
                rows[i] = (e, a, tuple(float(x) for x in rng.standard_normal(len(v))))
        return replace(kg, text_attribute_triplets=tuple(text),
                       image_attribute_triplets=tuple(image)).validate()
    raise ValueError(f"unknown perturbation target {target!r}")


def image_only(kg, text_value="same"):
    """Strip every non-image signal: drop relational triplets and give all text
    attributes one shared value.  Used to build ablation fixtures."""
    text = tuple((e, a, text_value) for e, a, _ in kg.text_attribute_triplets)
    return replace(kg, relational_triplets=(), text_attribute_triplets=text).validate()
