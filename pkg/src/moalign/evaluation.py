"""Ranking metrics (MRR, Hits@k), alignment evaluation and ablation runs."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import DataError

DIRECTIONS = ("left-to-right", "right-to-left", "averaged")
ABLATIONS = ("drop_text", "drop_image", "drop_type_prefix", "drop_context_loss",
             "replace_modifiable_with_plain")


@dataclass(frozen=True)
class RankingResult:
    query: object
    true_counterpart: object
    rank: int
    candidate_count: int

    def __post_init__(self):
        if not 1 <= self.rank <= self.candidate_count:
            raise ValueError(f"rank {self.rank} outside 1..{self.candidate_count}")


@dataclass(frozen=True)
class AlignmentMetrics:
    mrr: float
    hits_at_1: float
    hits_at_10: float
    direction: str
    n_queries: int

    def to_json(self):
        return {"mrr": self.mrr, "hits1": self.hits_at_1, "hits10": self.hits_at_10,
                "direction": self.direction, "n_queries": self.n_queries}


def _unit_rows(x):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise ValueError("cosine distance is undefined for a zero-norm vector")
    return x / n


def cosine_distance_matrix(queries, candidates):
    return 1.0 - _unit_rows(queries) @ _unit_rows(candidates).T


def ranks_from_distances(D, true_idx):
    """1-based rank of ``true_idx[i]`` in row ``i``; ties go to the lower index."""
    D = np.asarray(D)
    true_idx = np.asarray(true_idx)
    rows = np.arange(D.shape[0])
    d_true = D[rows, true_idx][:, None]
    cols = np.arange(D.shape[1])[None, :]
    better = (D < d_true) | ((D == d_true) & (cols < true_idx[:, None]))
    return better.sum(axis=1) + 1


def rank_candidates(query_repr, candidate_reprs, true_index, query=None, true_counterpart=None):
    if len(candidate_reprs) == 0:
        raise ValueError("no candidates to rank")
    if not 0 <= true_index < len(candidate_reprs):
        raise IndexError(f"true_index {true_index} out of range")
    D = cosine_distance_matrix(query_repr, candidate_reprs)
    rank = int(ranks_from_distances(D, [true_index])[0])
    return RankingResult(query, true_counterpart, rank, len(candidate_reprs))


def _ranks(results):
    if len(results) == 0:
        raise ValueError("no ranking results")
    return np.array([r.rank if isinstance(r, RankingResult) else int(r) for r in results])


def mrr(results):
    return float(np.mean(1.0 / _ranks(results)))


def hits_at_k(results, k):
    if k < 1:
        raise ValueError("k must be >= 1")
    return float(np.mean(_ranks(results) <= k))


def metrics_from_ranks(ranks, direction):
    ranks = np.asarray(ranks)
    return AlignmentMetrics(mrr(ranks), hits_at_k(ranks, 1), hits_at_k(ranks, 10), direction,
                            len(ranks))


def _directional_ranks(q_reprs, c_reprs, true_idx):
    return ranks_from_distances(cosine_distance_matrix(q_reprs, c_reprs), true_idx)


def evaluate_representations(left, right, direction="averaged", left_pool=None, right_pool=None,
                             left_true=None, right_true=None):
    """Metrics from precomputed representations.

    ``left[i]`` and ``right[i]`` are an aligned pair.  Pools default to the
    other side's test representations; extra pools are given with the index of
    each query's counterpart inside them.
    """
    n = len(left)
    if n == 0:
        raise ValueError("no test seeds")
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}")
    right_pool = right if right_pool is None else right_pool
    left_pool = left if left_pool is None else left_pool
    left_true = np.arange(n) if left_true is None else left_true
    right_true = np.arange(n) if right_true is None else right_true
    out = {}
    if direction in ("left-to-right", "averaged"):
        out["left-to-right"] = metrics_from_ranks(
            _directional_ranks(left, right_pool, left_true), "left-to-right")
    if direction in ("right-to-left", "averaged"):
        out["right-to-left"] = metrics_from_ranks(
            _directional_ranks(right, left_pool, right_true), "right-to-left")
    if direction != "averaged":
        return out[direction]
    a, b = out["left-to-right"], out["right-to-left"]
    return AlignmentMetrics((a.mrr + b.mrr) / 2, (a.hits_at_1 + b.hits_at_1) / 2,
                            (a.hits_at_10 + b.hits_at_10) / 2, "averaged", n)


def evaluate(encoder, kg1, kg2, test_seeds, direction="averaged", pool="test", exclude=None):
    """Encode the test seeds and rank every true counterpart.

    ``pool='test'`` ranks against the other side's test entities, ``'all'``
    against every entity of the other KG, ``'unseen'`` against every entity not
    listed in ``exclude`` (a pair of id sets, one per KG).
    """
    from .training import Aligner

    if isinstance(encoder, Aligner):
        encoder = encoder.encoder
    seeds = list(test_seeds)
    if not seeds:
        raise DataError("no test seeds")
    left_ids = [a for a, _ in seeds]
    right_ids = [b for _, b in seeds]
    left, _ = encoder.encode_all(kg1, left_ids)
    right, _ = encoder.encode_all(kg2, right_ids)
    if pool == "test":
        return evaluate_representations(left, right, direction)
    if pool not in ("all", "unseen"):
        raise ValueError(f"unknown candidate pool {pool!r}")
    ex1, ex2 = exclude if (pool == "unseen" and exclude) else (set(), set())
    pool1 = [e for e in kg1.entities if e not in ex1 or e in set(left_ids)]
    pool2 = [e for e in kg2.entities if e not in ex2 or e in set(right_ids)]
    idx1 = {e: i for i, e in enumerate(pool1)}
    idx2 = {e: i for i, e in enumerate(pool2)}
    extra1, _ = encoder.encode_all(kg1, pool1) if direction != "left-to-right" else (None, None)
    extra2, _ = encoder.encode_all(kg2, pool2) if direction != "right-to-left" else (None, None)
    return evaluate_representations(
        left, right, direction, left_pool=extra1, right_pool=extra2,
        left_true=np.array([idx2[b] for b in right_ids]),
        right_true=np.array([idx1[a] for a in left_ids]))


def ablation_config(config, toggle):
    """TrainConfig for one ablation variant."""
    from .training import LossWeights

    enc = config.encoder_config
    if toggle == "drop_text":
        return replace(config, encoder_config=replace(enc, use_text=False))
    if toggle == "drop_image":
        return replace(config, encoder_config=replace(enc, use_image=False))
    if toggle == "drop_type_prefix":
        return replace(config, encoder_config=replace(enc, use_type_prefix=False))
    if toggle == "replace_modifiable_with_plain":
        return replace(config, encoder_config=replace(enc, use_mask=False))
    if toggle == "drop_context_loss":
        return replace(config, loss_weights=LossWeights(config.loss_weights.alpha, 0.0))
    raise ValueError(f"unknown ablation toggle {toggle!r}; choose from {ABLATIONS}")


def run_ablation(base_config, toggles, kg1, kg2, split, direction="averaged"):
    """Train and evaluate the baseline and one variant per toggle.

    Returns rows ``{"variant", "mrr", "hits1", "hits10", "delta_mrr",
    "delta_hits1", "delta_hits10"}``; deltas are variant minus baseline.
    """
    from .training import train

    for t in toggles:
        if t not in ABLATIONS:
            raise ValueError(f"unknown ablation toggle {t!r}; choose from {ABLATIONS}")
    variants = [("baseline", base_config)] + [(t, ablation_config(base_config, t)) for t in toggles]
    rows, base = [], None
    for name, cfg in variants:
        model, _ = train(cfg, kg1, kg2, split.train)
        m = evaluate(model.encoder, kg1, kg2, split.test, direction)
        if base is None:
            base = m
        rows.append({
            "variant": name, "mrr": m.mrr, "hits1": m.hits_at_1, "hits10": m.hits_at_10,
            "delta_mrr": m.mrr - base.mrr, "delta_hits1": m.hits_at_1 - base.hits_at_1,
            "delta_hits10": m.hits_at_10 - base.hits_at_10,
        })
    return rows


def format_table(rows):
    head = f"{'variant':<32}{'MRR':>8}{'Hits@1':>8}{'Hits@10':>9}{'dMRR':>8}{'dH@1':>8}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r['variant']:<32}{r['mrr']:>8.4f}{r['hits1']:>8.4f}{r['hits10']:>9.4f}"
                     f"{r['delta_mrr']:>+8.4f}{r['delta_hits1']:>+8.4f}")
    return "\n".join(lines)
