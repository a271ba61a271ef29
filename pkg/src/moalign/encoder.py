"""Hierarchical modifiable self-attention encoder with entity-type prefixes.

Each block runs three attention stages (neighbor, textual, visual by default)
whose queries are the entity and [CLS] states and whose keys/values are one
modality bank of the input sequence, extended with per-type prefix rows.  The
block closes with a prefix-injected feed-forward layer, a residual connection
to the block input, and layer normalization.

All stage functions work on batches of padded sequences: a leading batch axis
``B``, query rows ``R`` (entity, cls) and bank rows ``K``.  Padding columns
are masked; stages whose bank is empty for an entity leave its state untouched.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import MASK_FILL, ShapeError, Tensor
from .data import IMAGE_ATTR, TEXT_ATTR, ENTITY_REL, UNTYPED, DataError
from .encoding import (
    MaskBuilder,
    TokenType,
    _stable_seed,
    build_sequence,
    flatten_patches,
    pseudo_embed_text,
)

STAGES = ("neighbor", "textual", "visual")
_ALIASES = {"n": "neighbor", "t": "textual", "v": "visual"}


def parse_block_order(order):
    """Accept ``("neighbor", ...)``, ``"N,V,T"``, ``"NVT"`` and similar."""
    if isinstance(order, str):
        parts = [p for p in order.replace("->", ",").replace(",", " ").split()]
        if len(parts) == 1 and len(parts[0]) == 3:
            parts = list(parts[0])
        order = parts
    out = tuple(_ALIASES.get(s.lower(), s.lower()) for s in order)
    if sorted(out) != sorted(STAGES):
        raise ValueError(f"block order must be a permutation of {STAGES}, got {order!r}")
    return out


@dataclass
class EncoderConfig:
    d: int = 64
    num_heads: int = 4
    num_blocks: int = 2
    ffn_hidden: int = 256
    dropout_p: float = 0.35
    block_order: tuple = STAGES
    max_neighbors: int = 8
    max_attributes: int = 8
    patch_len: int = 8
    lam: float = 0.02
    ln_eps: float = 1e-5
    neighbor_kv: str = "entities+relations"
    shared_prefix: bool = False
    use_text: bool = True
    use_image: bool = True
    use_type_prefix: bool = True
    use_mask: bool = True
    entity_embedding: str = "shared"
    seed: int = 0

    def __post_init__(self):
        self.block_order = parse_block_order(self.block_order)
        if self.d % self.num_heads:
            raise ValueError(f"d={self.d} is not divisible by num_heads={self.num_heads}")
        if self.neighbor_kv not in ("entities+relations", "entities-only"):
            raise ValueError(f"unknown neighbor_kv mode {self.neighbor_kv!r}")
        if self.entity_embedding not in ("per-entity", "shared"):
            raise ValueError(f"unknown entity_embedding mode {self.entity_embedding!r}")
        if self.num_blocks < 1 or self.d < 2:
            raise ValueError("need at least one block and d >= 2")

    @property
    def d_head(self):
        return self.d // self.num_heads

    def to_dict(self):
        out = asdict(self)
        out["block_order"] = list(self.block_order)
        return out


# ---------------------------------------------------------------- attention

def pi_attn(Q, K_t, V_t, additive, return_weights=False):
    """Softmax((Q K_t^T + m) / sqrt(d_k)) V_t over the last two axes.

    ``additive`` broadcasts against the score matrix; prefix columns should
    carry 0.
    """
    if Q.shape[-1] != K_t.shape[-1] or K_t.shape[-2] != V_t.shape[-2]:
        raise ShapeError(f"pi_attn shapes Q{Q.shape} K{K_t.shape} V{V_t.shape}")
    additive = np.asarray(additive, dtype=float)
    if additive.shape[-1] != K_t.shape[-2]:
        raise ShapeError(f"mask has {additive.shape[-1]} columns for {K_t.shape[-2]} keys")
    scale = 1.0 / math.sqrt(Q.shape[-1])
    scores = ag.matmul(Q, ag.swap_last(K_t)) * scale
    weights = ag.softmax_rows(scores, additive * scale)
    out = ag.matmul(weights, V_t)
    return (out, weights) if return_weights else out


def _split_heads(x, n_heads):
    # (..., L, d) -> (..., H, L, d_h)
    *lead, L, d = x.shape
    x = x.reshape(*lead, L, n_heads, d // n_heads)
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return ag.transpose(x, tuple(axes))


def _merge_heads(x):
    *lead, H, L, dh = x.shape
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return ag.transpose(x, tuple(axes)).reshape(*lead, L, H * dh)


def prefix_mh_attn(queries, kv, additive, params, num_heads, prefix=None, return_weights=False):
    """Multi-head attention whose keys/values are extended with type prefixes.

    ``queries``: (B, R, d); ``kv``: (B, K, d); ``additive``: (B, R, K) mask
    weights; ``params``: dict with ``wq, wk, wv, wo`` of shape (d, d), head i
    using columns ``i*d_h:(i+1)*d_h``.  ``prefix`` is ``(p_k, p_v)`` with shape
    (n_t, d), sliced per head along features, or ``None`` to run without
    prefixes.  Every head attends over ``K + n_t`` keys.
    """
    d = queries.shape[-1]
    if kv.shape[-1] != d:
        raise ShapeError(f"query dim {d} != key/value dim {kv.shape[-1]}")
    B, R = queries.shape[0], queries.shape[1]
    K = kv.shape[1]
    additive = np.asarray(additive, dtype=float)
    if additive.shape != (B, R, K):
        raise ShapeError(f"mask shape {additive.shape} != {(B, R, K)}")
    q = _split_heads(ag.matmul(queries, params["wq"]), num_heads)
    k = _split_heads(ag.matmul(kv, params["wk"]), num_heads)
    v = _split_heads(ag.matmul(kv, params["wv"]), num_heads)
    if prefix is not None:
        p_k, p_v = prefix
        n_t = p_k.shape[0]
        if n_t == 0:
            raise ValueError("prefix bank has no rows; pass prefix=None to disable prefixes")
        if p_k.shape != (n_t, d) or p_v.shape != (n_t, d):
            raise ShapeError(f"prefix shapes {p_k.shape}, {p_v.shape} != ({n_t}, {d})")
        dh = d // num_heads
        pk = _split_heads(p_k, num_heads)  # (H, n_t, d_h)
        pv = _split_heads(p_v, num_heads)
        k = ag.concat([k, ag.broadcast_to(pk, (B, num_heads, n_t, dh))], axis=2)
        v = ag.concat([v, ag.broadcast_to(pv, (B, num_heads, n_t, dh))], axis=2)
        additive = np.concatenate([additive, np.zeros((B, R, n_t))], axis=-1)
    heads, weights = pi_attn(q, k, v, additive[:, None, :, :], return_weights=True)
    out = ag.matmul(_merge_heads(heads), params["wo"])
    return (out, weights) if return_weights else out


def attr_pair_fuse(name_tokens, value_tokens, W_pair):
    """Concatenate attribute name and value features and project 2d -> d."""
    if name_tokens.shape != value_tokens.shape:
        raise ShapeError(f"name {name_tokens.shape} and value {value_tokens.shape} differ")
    if W_pair.shape != (2 * name_tokens.shape[-1], name_tokens.shape[-1]):
        raise ShapeError(f"pair projection {W_pair.shape} does not map 2d -> d")
    return ag.matmul(ag.concat([name_tokens, value_tokens], axis=-1), W_pair)


def prefix_ffn(E, w1, w2, phi_k=None, phi_v=None, b1=None, b2=None):
    """f(E [W1; phi_k]) [W2; phi_v] with f = ReLU.

    ``w1``: (d, h), ``w2``: (h, d), ``phi_k`` / ``phi_v``: (n_t, d).  The type
    rows of ``phi_k`` become extra hidden units (keys), those of ``phi_v`` their
    output rows (values).
    """
    first, second = w1, w2
    if (phi_k is None) != (phi_v is None):
        raise ValueError("phi_k and phi_v must be given together")
    if phi_k is not None:
        if phi_k.shape != phi_v.shape or phi_k.shape[1] != w1.shape[0]:
            raise ShapeError(f"phi shapes {phi_k.shape}, {phi_v.shape} incompatible with {w1.shape}")
        first = ag.concat([w1, ag.transpose(phi_k)], axis=1)
        second = ag.concat([w2, phi_v], axis=0)
    hidden = ag.matmul(E, first)
    if b1 is not None:
        if phi_k is not None:
            b1 = ag.concat([b1, np.zeros(phi_k.shape[0])], axis=0)
        hidden = hidden + b1
    out = ag.matmul(ag.relu(hidden), second)
    return out if b2 is None else out + b2


def hierarchical_stage(state, bank, bank_bits, has_bank, params, num_heads, prefix=None,
                       dropout_p=0.0, rng=None, training=False, use_mask=True):
    """One modality stage: attend from the query states to one bank.

    ``bank_bits`` (B, R, K) holds visibility of bank columns for each query row;
    padding columns must be 0.  Rows of entities without any bank entry keep
    their incoming state exactly.
    """
    if bank is None or not np.any(has_bank):
        return state
    bits = np.asarray(bank_bits, dtype=bool)
    if not use_mask:
        # plain attention: everything real is visible, only padding stays masked
        bits = np.broadcast_to(bits.any(axis=1, keepdims=True), bits.shape)
    additive = np.where(bits, 0.0, MASK_FILL)
    out = prefix_mh_attn(state, bank, additive, params, num_heads, prefix=prefix)
    out = ag.dropout(out, dropout_p, rng, training=training)
    keep = np.asarray(has_bank, dtype=bool)[:, None, None]
    if keep.all():
        return out
    return ag.where(keep, out, state)


# ---------------------------------------------------------------- parameters

@dataclass
class Vocab:
    types: list
    relations: list
    attributes: list
    image_dim: int
    entities: list = field(default_factory=list)  # one id list per KG slot

    @classmethod
    def from_kgs(cls, kgs, patch_len=8):
        types = {UNTYPED}
        rels, attrs = set(), set()
        width = 0
        for kg in kgs:
            types.update(kg.entity_types.values())
            rels.update(kg.relations_of_kind(ENTITY_REL))
            attrs.update(kg.relations_of_kind(TEXT_ATTR))
            attrs.update(kg.relations_of_kind(IMAGE_ATTR))
            for _, _, v in kg.image_attribute_triplets:
                width = max(width, len(v))
        width = max(patch_len, -(-width // patch_len) * patch_len)
        return cls([UNTYPED] + sorted(types - {UNTYPED}), sorted(rels), sorted(attrs), width,
                   [list(kg.entities) for kg in kgs])

    @property
    def n_types(self):
        return len(self.types)

    @property
    def n_entity_rows(self):
        return sum(len(e) for e in self.entities) + 1  # last row: entity of an unseen KG

    def entity_rows(self, kg):
        """Row of each entity of ``kg`` in the per-entity table, or None if unseen."""
        key = list(kg.entities)
        offset = 0
        for ents in self.entities:
            if ents == key:
                return {e: offset + i for i, e in enumerate(ents)}
            offset += len(ents)
        return None

    def to_dict(self):
        return asdict(self)


def init_params(config: EncoderConfig, vocab: Vocab, rng=None):
    """Truncated-normal weights (std lam, cut at 2 lam), unit LN gains, zero biases.

    Prefix rows and the FFN type rows start as copies of the type embeddings.
    """
    rng = np.random.default_rng(config.seed if rng is None else rng)
    d, lam, n_t = config.d, config.lam, vocab.n_types

    def tn(*shape):
        return ag.truncated_normal(rng, shape, std=lam)

    p = {}
    p["embed.cls"] = tn(1, d)
    p["embed.entity"] = tn(1, d)
    p["embed.type"] = tn(n_t, d)
    if config.entity_embedding == "per-entity":
        p["embed.entity_id"] = tn(vocab.n_entity_rows, d)
    p["embed.relation"] = tn(len(vocab.relations) + 1, d)
    p["embed.attribute"] = tn(len(vocab.attributes) + 1, d)
    p["embed.modality"] = tn(5, d)
    p["embed.structure"] = tn(2 * config.max_neighbors + 2, d)
    p["embed.image_proj"] = tn(vocab.image_dim, d)
    p["embed.ln.gain"] = np.ones(d)
    p["embed.ln.bias"] = np.zeros(d)
    p["fuse.text"] = tn(2 * d, d)
    p["fuse.image"] = tn(2 * d, d)
    type_rows = p["embed.type"]
    for l in range(config.num_blocks):
        b = f"block{l}"
        for stage in STAGES:
            for w in ("wq", "wk", "wv", "wo"):
                p[f"{b}.{stage}.{w}"] = tn(d, d)
        if not config.shared_prefix or l == 0:
            pb = "prefix" if config.shared_prefix else f"{b}.prefix"
            p[f"{pb}.k"] = type_rows.copy()
            p[f"{pb}.v"] = type_rows.copy()
        p[f"{b}.ffn.w1"] = tn(d, config.ffn_hidden)
        p[f"{b}.ffn.b1"] = np.zeros(config.ffn_hidden)
        p[f"{b}.ffn.w2"] = tn(config.ffn_hidden, d)
        p[f"{b}.ffn.b2"] = np.zeros(d)
        p[f"{b}.ffn.phi_k"] = type_rows.copy()
        p[f"{b}.ffn.phi_v"] = type_rows.copy()
        p[f"{b}.ln.gain"] = np.ones(d)
        p[f"{b}.ln.bias"] = np.zeros(d)
    return {k: ag.parameter(v, name=k) for k, v in p.items()}


# ---------------------------------------------------------------- compiled KG views

_KIND_CLS, _KIND_ENTITY, _KIND_RELATION, _KIND_ATTR, _KIND_TEXT, _KIND_IMAGE = range(6)
_TAG_KIND = {
    TokenType.CLS: _KIND_CLS,
    TokenType.ENTITY: _KIND_ENTITY,
    TokenType.RELATION: _KIND_RELATION,
    TokenType.TEXT_ATTR_NAME: _KIND_ATTR,
    TokenType.IMAGE_ATTR_NAME: _KIND_ATTR,
    TokenType.TEXT_ATTR_VALUE: _KIND_TEXT,
    TokenType.IMAGE_ATTR_VALUE: _KIND_IMAGE,
}


def _entity_seed(seed, entity):
    return [seed, _stable_seed(entity)]


@dataclass
class CompiledSequence:
    kind: np.ndarray
    lookup: np.ndarray
    modality: np.ndarray
    structure: np.ndarray
    entity_rows: np.ndarray  # per-entity table row per token (0 for non-entity tokens)
    neighbor_cols: np.ndarray
    text_pairs: np.ndarray  # (m_t, 2) token positions (name, value)
    image_pairs: np.ndarray
    bits: np.ndarray  # full mask matrix


class KGView:
    """Sequences, masks and constant feature tables for every entity of one KG."""

    def __init__(self, kg, config: EncoderConfig, vocab: Vocab, seed=None, order_rngs=None):
        self.kg = kg
        self.config = config
        self.vocab = vocab
        seed = config.seed if seed is None else seed
        self._type_idx = {t: i for i, t in enumerate(vocab.types)}
        self._rel_idx = {r: i for i, r in enumerate(vocab.relations)}
        self._attr_idx = {a: i for i, a in enumerate(vocab.attributes)}
        self.text_values, self._text_row = [], {}
        self.image_rows = []
        self._neighbors = kg.neighbors()
        self._attributes = kg.attributes()
        self._masks = MaskBuilder(kg)
        self._text_cache = {}
        self._seed = seed
        self._compiled = {}
        self._sequences = {}
        self._order_rngs = order_rngs or {}
        self._entity_rows = vocab.entity_rows(kg)
        self._unseen_row = vocab.n_entity_rows - 1

    def sequence(self, entity):
        if entity not in self._sequences:
            rng = self._order_rngs.get(entity)
            if rng is None:
                rng = np.random.default_rng(_entity_seed(self._seed, entity))
            self._sequences[entity] = build_sequence(
                entity, self.kg, (self.config.max_neighbors, self.config.max_attributes), rng,
                neighbors=self._neighbors, attributes=self._attributes)
        return self._sequences[entity]

    def compiled(self, entity):
        if entity in self._compiled:
            return self._compiled[entity]
        seq = self.sequence(entity)
        cfg = self.config
        n = len(seq.tokens) - 1  # drop the trailing type token; it never enters a bank
        kind = np.zeros(n, dtype=np.intp)
        lookup = np.zeros(n, dtype=np.intp)
        ent_rows = np.zeros(n, dtype=np.intp)
        for i, tok in enumerate(seq.tokens[:n]):
            kind[i] = _TAG_KIND[tok.type_tag]
            src = tok.source
            if kind[i] == _KIND_ENTITY:
                lookup[i] = self._type_idx.get(self.kg.entity_types[src[1]], 0)
                rows = self._entity_rows
                ent_rows[i] = self._unseen_row if rows is None else rows[src[1]]
            elif kind[i] == _KIND_RELATION:
                lookup[i] = self._rel_idx.get(src[1], len(self.vocab.relations))
            elif kind[i] == _KIND_ATTR:
                lookup[i] = self._attr_idx.get(src[1], len(self.vocab.attributes))
            elif kind[i] == _KIND_TEXT:
                raw = self.kg.text_attribute_triplets[src[1]][2]
                if raw not in self._text_row:
                    self._text_row[raw] = len(self.text_values)
                    self.text_values.append(pseudo_embed_text(raw, cfg.d, cfg.lam))
                lookup[i] = self._text_row[raw]
            elif kind[i] == _KIND_IMAGE:
                raw = self.kg.image_attribute_triplets[src[1]][2]
                lookup[i] = len(self.image_rows)
                self.image_rows.append(flatten_patches(raw, self.vocab.image_dim))
        modality = np.array(seq.modality_codes[:n], dtype=np.intp)
        structure = np.minimum(np.array(seq.structure_codes[:n], dtype=np.intp),
                               2 * cfg.max_neighbors + 1)
        nb = np.arange(seq.neighbor_range.start, seq.neighbor_range.stop)
        if cfg.neighbor_kv == "entities-only":
            nb = nb[0::2]
        text_pairs = np.arange(seq.text_range.start, seq.text_range.stop).reshape(-1, 2)
        image_pairs = np.arange(seq.image_range.start, seq.image_range.stop).reshape(-1, 2)
        bits = self._masks(seq).bits
        c = CompiledSequence(kind, lookup, modality, structure, ent_rows, nb, text_pairs, image_pairs, bits)
        self._compiled[entity] = c
        return c

    def text_table(self):
        return np.array(self.text_values).reshape(-1, self.config.d)

    def image_table(self):
        return np.array(self.image_rows).reshape(-1, self.vocab.image_dim)


@dataclass
class Batch:
    kind: np.ndarray = field(repr=False)
    lookup: np.ndarray = field(repr=False)
    modality: np.ndarray = field(repr=False)
    structure: np.ndarray = field(repr=False)
    entity_rows: np.ndarray = field(repr=False)
    query_rows: np.ndarray = field(repr=False)  # (B, 2) global token rows (entity, cls)
    banks: dict = field(repr=False)  # stage -> (row index arrays, bits (B,2,K), has_bank)
    text_table: np.ndarray = field(repr=False)
    image_table: np.ndarray = field(repr=False)


def assemble_batch(view: KGView, entities, config: EncoderConfig):
    """Concatenate compiled sequences and build padded bank index arrays."""
    comps = [view.compiled(e) for e in entities]
    offsets = np.cumsum([0] + [len(c.kind) for c in comps])
    n_tok = offsets[-1]
    pad = n_tok  # index of the appended zero row
    kind = np.concatenate([c.kind for c in comps])
    lookup = np.concatenate([c.lookup for c in comps])
    modality = np.concatenate([c.modality for c in comps])
    structure = np.concatenate([c.structure for c in comps])
    entity_rows = np.concatenate([c.entity_rows for c in comps])
    query_rows = np.array([[o + 1, o + 0] for o in offsets[:-1]], dtype=np.intp)
    banks = {}

    def visible(c, cols):
        # rows: entity token (1), cls token (0)
        return c.bits[np.ix_([1, 0], cols)].astype(bool) if len(cols) else np.zeros((2, 0), bool)

    nb_rows, nb_bits = [], []
    for c, o in zip(comps, offsets[:-1]):
        nb_rows.append(c.neighbor_cols + o)
        nb_bits.append(visible(c, c.neighbor_cols))
    banks["neighbor"] = _bank(nb_rows, nb_bits, pad)
    for stage, attr in (("textual", "text_pairs"), ("visual", "image_pairs")):
        enabled = config.use_text if stage == "textual" else config.use_image
        rows, bits = [], []
        for c, o in zip(comps, offsets[:-1]):
            pairs = getattr(c, attr) if enabled else np.zeros((0, 2), dtype=np.intp)
            rows.append(pairs + o)
            bits.append(visible(c, pairs[:, 0]) & visible(c, pairs[:, 1]))
        banks[stage] = _bank(rows, bits, pad)
    return Batch(kind, lookup, modality, structure, entity_rows, query_rows, banks,
                 view.text_table(), view.image_table())


def _bank(rows, bits, pad):
    width = max((len(r) for r in rows), default=0)
    has = np.array([len(r) > 0 for r in rows])
    if width == 0:
        return None, None, has
    idx = np.full((len(rows), width) + rows[0].shape[1:], pad, dtype=np.intp)
    mask = np.zeros((len(rows), 2, width), dtype=bool)
    for i, (r, b) in enumerate(zip(rows, bits)):
        idx[i, : len(r)] = r
        mask[i, :, : len(r)] = b
    return idx, mask, has


# ---------------------------------------------------------------- model

class MoAlignEncoder:
    """Parameters plus the batched forward pass."""

    def __init__(self, config: EncoderConfig, vocab: Vocab, params=None):
        self.config = config
        self.vocab = vocab
        self.params = params if params is not None else init_params(config, vocab)
        self._views = {}

    @classmethod
    def for_kgs(cls, kgs, config=None):
        config = config or EncoderConfig()
        return cls(config, Vocab.from_kgs(kgs, config.patch_len))

    def view(self, kg):
        key = id(kg)
        if key not in self._views or self._views[key].kg is not kg:
            self._views[key] = KGView(kg, self.config, self.vocab)
        return self._views[key]

    def prefix(self, block):
        if not self.config.use_type_prefix:
            return None
        pb = "prefix" if self.config.shared_prefix else f"block{block}.prefix"
        return self.params[f"{pb}.k"], self.params[f"{pb}.v"]

    def embed_tokens(self, batch: Batch):
        """Layer-normalized content + modality code row + structure code row, per token."""
        p, cfg = self.params, self.config
        n = len(batch.kind)
        groups, order = [], []
        for kind in range(6):
            sel = np.flatnonzero(batch.kind == kind)
            if not len(sel):
                continue
            idx = batch.lookup[sel]
            if kind == _KIND_CLS:
                rows = ag.gather_rows(p["embed.cls"], np.zeros(len(sel), dtype=np.intp))
            elif kind == _KIND_ENTITY:
                rows = ag.gather_rows(p["embed.type"], idx) + p["embed.entity"]
                if cfg.entity_embedding == "per-entity":
                    rows = rows + ag.gather_rows(p["embed.entity_id"], batch.entity_rows[sel])
            elif kind == _KIND_RELATION:
                rows = ag.gather_rows(p["embed.relation"], idx)
            elif kind == _KIND_ATTR:
                rows = ag.gather_rows(p["embed.attribute"], idx)
            elif kind == _KIND_TEXT:
                rows = Tensor(batch.text_table[idx])
            else:
                raw = Tensor(batch.image_table[idx])
                rows = ag.standardize(ag.matmul(raw, p["embed.image_proj"]), cfg.lam)
            groups.append(rows)
            order.append(sel)
        order = np.concatenate(order)
        X = ag.concat(groups, axis=0)
        pos = np.empty(n, dtype=np.intp)
        pos[order] = np.arange(n)
        X = X + ag.gather_rows(p["embed.modality"], batch.modality[order])
        X = X + ag.gather_rows(p["embed.structure"], batch.structure[order])
        X = ag.layer_norm(X, p["embed.ln.gain"], p["embed.ln.bias"], cfg.ln_eps)
        X = ag.concat([X, np.zeros((1, cfg.d))], axis=0)
        pos = np.append(pos, n)  # padding index -> zero row
        return X, pos

    def forward(self, batch: Batch, training=False, rng=None):
        """Returns (entity states, cls states), each (B, d)."""
        cfg, p = self.config, self.params
        X, pos = self.embed_tokens(batch)
        state = ag.gather_rows(X, pos[batch.query_rows])  # (B, 2, d)
        banks = {}
        for stage, (idx, bits, has) in batch.banks.items():
            if idx is None:
                banks[stage] = (None, None, has)
                continue
            if stage == "neighbor":
                kv = ag.gather_rows(X, pos[idx])
            else:
                W = p["fuse.text"] if stage == "textual" else p["fuse.image"]
                kv = attr_pair_fuse(ag.gather_rows(X, pos[idx[..., 0]]),
                                    ag.gather_rows(X, pos[idx[..., 1]]), W)
            banks[stage] = (kv, bits, has)
        for l in range(cfg.num_blocks):
            state = self.block_forward(l, state, banks, training=training, rng=rng)
        return state[:, 0, :], state[:, 1, :]

    def block_forward(self, l, state_in, banks, training=False, rng=None):
        cfg, p = self.config, self.params
        b = f"block{l}"
        prefix = self.prefix(l)
        state = state_in
        for stage in cfg.block_order:
            kv, bits, has = banks[stage]
            params = {w: p[f"{b}.{stage}.{w}"] for w in ("wq", "wk", "wv", "wo")}
            state = hierarchical_stage(state, kv, bits, has, params, cfg.num_heads, prefix=prefix,
                                       dropout_p=cfg.dropout_p, rng=rng, training=training,
                                       use_mask=cfg.use_mask)
        phi = (p[f"{b}.ffn.phi_k"], p[f"{b}.ffn.phi_v"]) if cfg.use_type_prefix else (None, None)
        ffn = prefix_ffn(state, p[f"{b}.ffn.w1"], p[f"{b}.ffn.w2"], *phi,
                         b1=p[f"{b}.ffn.b1"], b2=p[f"{b}.ffn.b2"])
        ffn = ag.dropout(ffn, cfg.dropout_p, rng, training=training)
        return ag.layer_norm(state_in + ffn, p[f"{b}.ln.gain"], p[f"{b}.ln.bias"], cfg.ln_eps)

    def encode_batch(self, kg, entities, training=False, rng=None):
        for e in entities:
            if e not in kg.index:
                raise DataError(f"unknown entity {e!r}")
        batch = assemble_batch(self.view(kg), list(entities), self.config)
        return self.forward(batch, training=training, rng=rng)

    def encode(self, entity, kg):
        """Eval-mode (entity representation, context representation) as arrays."""
        ent, ctx = self.encode_batch(kg, [entity])
        return ent.data[0], ctx.data[0]

    def encode_all(self, kg, entities, chunk=256):
        ents, ctxs = [], []
        entities = list(entities)
        for i in range(0, len(entities), chunk):
            e, c = self.encode_batch(kg, entities[i:i + chunk])
            ents.append(e.data)
            ctxs.append(c.data)
        if not ents:
            return np.zeros((0, self.config.d)), np.zeros((0, self.config.d))
        return np.concatenate(ents), np.concatenate(ctxs)
