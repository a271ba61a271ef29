"""Per-entity input sequences, positional codes, image standardization and masks."""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .autograd import INIT_STD, MASK_FILL, truncated_normal
from .data import DataError


class TokenType(enum.IntEnum):
    CLS = 0
    ENTITY = 1
    RELATION = 2
    TEXT_ATTR_NAME = 3
    TEXT_ATTR_VALUE = 4
    IMAGE_ATTR_NAME = 5
    IMAGE_ATTR_VALUE = 6
    ENTITY_TYPE = 7


MODALITY = {
    TokenType.CLS: 1,
    TokenType.ENTITY: 1,
    TokenType.RELATION: 1,
    TokenType.TEXT_ATTR_NAME: 2,
    TokenType.TEXT_ATTR_VALUE: 2,
    TokenType.IMAGE_ATTR_NAME: 3,
    TokenType.IMAGE_ATTR_VALUE: 3,
    TokenType.ENTITY_TYPE: 4,
}


@dataclass
class Token:
    """One position of an input sequence.

    ``source`` identifies the KG element the token stands for, as a tagged
    tuple: ``("cls",)``, ``("entity", id)``, ``("relation", id)``,
    ``("attribute", id)``, ``("text_value", triple_index)``,
    ``("image_value", triple_index)`` or ``("type", type_id)``.
    ``content`` holds fixed features (text embedding, raw image vector); learned
    content is looked up by the encoder from ``source``.
    """

    type_tag: TokenType
    source: tuple
    modality_code: int = 0
    structure_code: int = 1
    content: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.modality_code:
            self.modality_code = MODALITY[self.type_tag]


@dataclass
class InputSequence:
    entity: str
    tokens: list
    neighbor_range: range
    text_range: range
    image_range: range
    cls_index: int | None = 0
    entity_index: int = 1
    type_index: int = -1
    neighbor_order: tuple = ()

    def __len__(self):
        return len(self.tokens)

    @property
    def modality_codes(self):
        return [t.modality_code for t in self.tokens]

    @property
    def structure_codes(self):
        return [t.structure_code for t in self.tokens]

    def to_json(self):
        return {
            "entity": self.entity,
            "tokens": [
                {"tag": t.type_tag.name, "source": list(t.source),
                 "modality": t.modality_code, "structure": t.structure_code}
                for t in self.tokens
            ],
            "neighbor_range": [self.neighbor_range.start, self.neighbor_range.stop],
            "text_range": [self.text_range.start, self.text_range.stop],
            "image_range": [self.image_range.start, self.image_range.stop],
        }


@dataclass
class MaskMatrix:
    bits: np.ndarray

    @property
    def additive(self):
        return additive_mask(self.bits)


def additive_mask(bits):
    """0 where visible, a large negative weight where masked."""
    return np.where(np.asarray(bits, dtype=bool), 0.0, MASK_FILL)


# ---------------------------------------------------------------- content features

def _stable_seed(text):
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")


def pseudo_embed_text(raw, d, lam=INIT_STD):
    """Deterministic stand-in for a pretrained text encoder.

    Each whitespace-separated word draws a truncated-normal vector from an rng
    seeded by a hash of the word; the text embedding is the mean over words,
    so texts sharing words land close together.
    """
    if not raw or not raw.strip():
        raise ValueError("cannot embed empty text")
    if d < 8:
        raise ValueError(f"text embedding dimension must be >= 8, got {d}")
    words = raw.split()
    vecs = [truncated_normal(np.random.default_rng(_stable_seed(w)), d, std=lam) for w in words]
    return np.mean(vecs, axis=0)


def patchify_image_vector(raw, patch_len):
    """Split a raw feature vector into zero-padded patches of ``patch_len``."""
    raw = np.asarray(raw, dtype=float)
    if raw.size == 0:
        raise ValueError("cannot patchify an empty image vector")
    n = -(-raw.size // patch_len)
    padded = np.zeros(n * patch_len)
    padded[: raw.size] = raw
    return padded.reshape(n, patch_len)


def flatten_patches(patches, width=None):
    """Concatenate patches in order, zero-padding to ``width`` if given."""
    flat = np.asarray(patches, dtype=float).reshape(-1)
    if width is not None:
        if flat.size > width:
            raise ValueError(f"image vector of length {flat.size} exceeds width {width}")
        flat = np.concatenate([flat, np.zeros(width - flat.size)])
    return flat


def standardize_image_embedding(v, lam=INIT_STD):
    """Rescale ``v`` to zero mean and population std ``lam``."""
    v = np.asarray(v, dtype=float)
    if v.size < 2:
        raise ValueError("standardization needs at least two entries")
    return (v - v.mean()) / max(v.std(), 1e-6) * lam


# ---------------------------------------------------------------- sequences

def assign_structure_codes(seq: InputSequence):
    """Code 1 for everything except neighbor i (2i) and its relation (2i+1)."""
    for t in seq.tokens:
        t.structure_code = 1
    nb = seq.neighbor_range
    for k, pos in enumerate(range(nb.start, nb.stop, 2)):
        i = k + 1
        seq.tokens[pos].structure_code = 2 * i
        seq.tokens[pos + 1].structure_code = 2 * i + 1
    return seq


def build_sequence(entity, kg, limits=(8, 8), rng=None, d=None, text_cache=None,
                   neighbors=None, attributes=None):
    """Lay out ``[CLS, e, (e_i, r_i)..., (a_t, v_t)..., (a_v, v_v)..., e_T]``.

    The neighbor reference order is one random permutation under ``rng``;
    truncation keeps the first ``max_neighbors`` neighbors and the first
    ``max_attributes`` attributes (text before image).  Text values carry their
    pseudo-embedding when ``d`` is given; image values carry the raw vector.
    """
    if entity not in kg.index:
        raise DataError(f"unknown entity {entity!r}")
    max_nb, max_attr = limits
    rng = np.random.default_rng(rng)
    if neighbors is None:
        neighbors = kg.neighbors()
    if attributes is None:
        attributes = kg.attributes()
    nbs = neighbors[entity]
    order = tuple(int(i) for i in rng.permutation(len(nbs)))[:max_nb]
    text_idx, image_idx = attributes[0][entity], attributes[1][entity]
    attrs = [("t", k) for k in text_idx] + [("i", k) for k in image_idx]
    attrs = attrs[:max_attr]

    tokens = [Token(TokenType.CLS, ("cls",)), Token(TokenType.ENTITY, ("entity", entity))]
    nb_start = len(tokens)
    for i in order:
        nbr, rel = nbs[i]
        tokens.append(Token(TokenType.ENTITY, ("entity", nbr)))
        tokens.append(Token(TokenType.RELATION, ("relation", rel)))
    nb_range = range(nb_start, len(tokens))
    t_start = len(tokens)
    for kind, k in attrs:
        if kind != "t":
            continue
        _, a, v = kg.text_attribute_triplets[k]
        content = None
        if d is not None:
            if text_cache is not None:
                if v not in text_cache:
                    text_cache[v] = pseudo_embed_text(v, d)
                content = text_cache[v]
            else:
                content = pseudo_embed_text(v, d)
        tokens.append(Token(TokenType.TEXT_ATTR_NAME, ("attribute", a)))
        tokens.append(Token(TokenType.TEXT_ATTR_VALUE, ("text_value", k), content=content))
    t_range = range(t_start, len(tokens))
    i_start = len(tokens)
    for kind, k in attrs:
        if kind != "i":
            continue
        _, a, v = kg.image_attribute_triplets[k]
        tokens.append(Token(TokenType.IMAGE_ATTR_NAME, ("attribute", a)))
        tokens.append(Token(TokenType.IMAGE_ATTR_VALUE, ("image_value", k),
                            content=np.asarray(v, dtype=float)))
    i_range = range(i_start, len(tokens))
    tokens.append(Token(TokenType.ENTITY_TYPE, ("type", kg.entity_types[entity])))
    seq = InputSequence(entity, tokens, nb_range, t_range, i_range,
                        type_index=len(tokens) - 1, neighbor_order=order)
    return assign_structure_codes(seq)


# ---------------------------------------------------------------- mask

def _linked_sources(kg):
    """Unordered source pairs linked by some triplet, plus the resolvable sources."""
    linked, known = set(), {("cls",)}
    for e in kg.entities:
        known.add(("entity", e))
        known.add(("type", kg.entity_types[e]))
    for h, r, t in kg.relational_triplets:
        a, b, c = ("entity", h), ("relation", r), ("entity", t)
        known.add(b)
        linked.update({frozenset((a, c)), frozenset((a, b)), frozenset((b, c))})
    for kind, triples in (("text_value", kg.text_attribute_triplets),
                          ("image_value", kg.image_attribute_triplets)):
        for k, (e, attr, _) in enumerate(triples):
            a, b, c = ("entity", e), ("attribute", attr), (kind, k)
            known.update({b, c})
            linked.update({frozenset((a, c)), frozenset((a, b)), frozenset((b, c))})
    return linked, known


class MaskBuilder:
    """Caches the triplet index of one KG so masks for many sequences are cheap."""

    def __init__(self, kg):
        self.linked, self.known = _linked_sources(kg)

    def __call__(self, seq):
        for t in seq.tokens:
            if t.source not in self.known:
                raise DataError(f"token source {t.source!r} not found in KG")
        n = len(seq.tokens)
        tags = np.array([t.type_tag for t in seq.tokens])
        bits = tags[:, None] == tags[None, :]
        for i in range(n):
            si = seq.tokens[i].source
            for j in range(i + 1, n):
                if not bits[i, j] and frozenset((si, seq.tokens[j].source)) in self.linked:
                    bits[i, j] = bits[j, i] = True
        if seq.cls_index is not None:
            bits[seq.cls_index, :] = True
            bits[:, seq.cls_index] = True
        return MaskMatrix(bits.astype(np.uint8))


def build_mask(seq, kg):
    """Visibility bits: 1 iff a triplet links the two tokens' sources (either
    direction) or both tokens share a type tag; the CLS row/column is all ones."""
    return MaskBuilder(kg)(seq)


def dump_sequences(seqs, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump([s.to_json() for s in seqs], f, indent=1)
