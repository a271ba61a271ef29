import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moalign.data import DataError, image_only, split_seeds, synth_paired_kgs
from moalign.encoder import EncoderConfig
from moalign.evaluation import (
    ABLATIONS,
    RankingResult,
    ablation_config,
    evaluate,
    evaluate_representations,
    format_table,
    hits_at_k,
    mrr,
    rank_candidates,
    ranks_from_distances,
    run_ablation,
)
from moalign.training import TrainConfig

rank_lists = st.lists(st.integers(1, 200), min_size=1, max_size=60)


def brute_force_rank(query, cands, true_index):
    """Full sort of (distance, index) keys with an explicit cosine."""
    def cd(a, b):
        return 1 - float(np.dot(a, b)) / (np.linalg.norm(a) * np.linalg.norm(b))
    keys = sorted((cd(query, c), i) for i, c in enumerate(cands))
    return [i for _, i in keys].index(true_index) + 1


class LookupEncoder:
    """Maps every entity to a fixed vector; stands in for a perfectly trained model."""

    def __init__(self, table):
        self.table = table

    def encode_all(self, kg, entities):
        reps = np.stack([self.table[e] for e in entities])
        return reps, reps


# ---------------------------------------------------------------- ranking

def test_rank_identical_among_orthogonal():
    cands = np.eye(4)
    assert rank_candidates(np.array([0, 0, 1.0, 0]), cands, 2).rank == 1


def test_rank_ties_go_to_lower_index():
    cands = np.ones((5, 3))
    for t in range(5):
        assert rank_candidates(np.ones(3), cands, t).rank == t + 1


def test_rank_errors():
    with pytest.raises(ValueError):
        rank_candidates(np.ones(3), np.zeros((0, 3)), 0)
    with pytest.raises(IndexError):
        rank_candidates(np.ones(3), np.ones((2, 3)), 2)
    with pytest.raises(ValueError):
        rank_candidates(np.zeros(3), np.ones((2, 3)), 0)
    with pytest.raises(ValueError):
        RankingResult("q", "c", 4, 3)


def test_rank_random_twenty(rng):
    q, cands = rng.normal(size=4), rng.normal(size=(20, 4))
    for t in range(20):
        assert rank_candidates(q, cands, t).rank == brute_force_rank(q, cands, t)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 50), st.booleans())
def test_rank_matches_full_sort(seed, n, coarse):
    rng = np.random.default_rng(seed)
    cands = rng.normal(size=(n, 3))
    if coarse:  # duplicated candidates force exact ties
        cands = cands[rng.integers(0, max(1, n // 3), size=n)]
    q = rng.normal(size=3)
    t = int(rng.integers(n))
    assert rank_candidates(q, cands, t).rank == brute_force_rank(q, cands, t)


def test_ranks_from_distances_vectorized(rng):
    D = rng.integers(0, 4, size=(6, 9)).astype(float)
    true = rng.integers(0, 9, size=6)
    for i in range(6):
        keys = sorted((D[i, j], j) for j in range(9))
        assert ranks_from_distances(D, true)[i] == [j for _, j in keys].index(true[i]) + 1


# ---------------------------------------------------------------- metrics

def test_mrr_examples():
    assert mrr([1, 2, 10]) == pytest.approx(1.6 / 3)
    assert mrr([1, 1, 1]) == 1.0
    assert mrr([RankingResult("a", "b", 2, 5)]) == 0.5


def test_mrr_direct_recomputation(rng):
    ranks = rng.integers(1, 500, size=1000)
    assert abs(mrr(ranks) - sum(1.0 / r for r in ranks) / 1000) < 1e-12


def test_hits_examples():
    assert hits_at_k([1, 11, 5], 10) == pytest.approx(2 / 3)
    assert hits_at_k([3, 7, 2], 7) == 1.0
    with pytest.raises(ValueError):
        hits_at_k([1], 0)
    with pytest.raises(ValueError):
        mrr([])
    with pytest.raises(ValueError):
        hits_at_k([], 1)


@given(rank_lists, st.randoms())
def test_metrics_permutation_invariant(ranks, random):
    shuffled = list(ranks)
    random.shuffle(shuffled)
    assert mrr(shuffled) == pytest.approx(mrr(ranks), abs=1e-12)
    assert hits_at_k(shuffled, 10) == hits_at_k(ranks, 10)


@given(rank_lists)
def test_metric_ordering(ranks):
    h1, h10, m = hits_at_k(ranks, 1), hits_at_k(ranks, 10), mrr(ranks)
    assert h1 <= m <= 1.0
    assert h1 <= h10


# ---------------------------------------------------------------- evaluate

def test_perfect_lookup_scores_one():
    kg1, kg2, truth = synth_paired_kgs(40, rng=0)
    basis = np.random.default_rng(0).normal(size=(len(truth), 16))
    table = {}
    for i, (a, b) in enumerate(truth):
        table[a] = table[b] = basis[i]
    split = split_seeds(truth, (2, 8), 0)
    for pool in ("test", "all"):
        m = evaluate(LookupEncoder(table), kg1, kg2, split.test, pool=pool)
        assert (m.mrr, m.hits_at_1, m.hits_at_10) == (1.0, 1.0, 1.0)
        assert m.n_queries == len(split.test)


def test_symmetric_pair_directions_equal(rng):
    reps = rng.normal(size=(30, 8))
    a = evaluate_representations(reps, reps.copy(), "left-to-right")
    b = evaluate_representations(reps, reps.copy(), "right-to-left")
    avg = evaluate_representations(reps, reps.copy(), "averaged")
    assert a.to_json() | {"direction": ""} == b.to_json() | {"direction": ""}
    assert avg.mrr == a.mrr


def test_pool_all_is_harder(rng):
    kg1, kg2, truth = synth_paired_kgs(30, rng=1)
    table = {e: rng.normal(size=8) for kg in (kg1, kg2) for e in kg.entities}
    test = list(truth)[:10]
    small = evaluate(LookupEncoder(table), kg1, kg2, test, "left-to-right", pool="test")
    wide = evaluate(LookupEncoder(table), kg1, kg2, test, "left-to-right", pool="all")
    assert wide.mrr <= small.mrr


def test_evaluate_errors(small_pair):
    kg1, kg2, _ = small_pair
    with pytest.raises(DataError):
        evaluate(LookupEncoder({}), kg1, kg2, [])
    with pytest.raises(ValueError):
        evaluate_representations(np.ones((2, 3)), np.ones((2, 3)), "sideways")


def test_evaluate_deterministic(small_pair):
    from moalign.encoder import MoAlignEncoder

    kg1, kg2, truth = small_pair
    enc = MoAlignEncoder.for_kgs([kg1, kg2], EncoderConfig(d=16, num_heads=2, num_blocks=1,
                                                           ffn_hidden=32, patch_len=4))
    assert evaluate(enc, kg1, kg2, truth) == evaluate(enc, kg1, kg2, truth)


# ---------------------------------------------------------------- ablations

def _tiny():
    enc = EncoderConfig(d=16, num_heads=2, num_blocks=1, ffn_hidden=32, patch_len=4)
    return TrainConfig(epochs=2, batch_size=16, encoder_config=enc)


def test_ablation_configs():
    base = _tiny()
    assert not ablation_config(base, "drop_text").encoder_config.use_text
    assert not ablation_config(base, "drop_image").encoder_config.use_image
    assert not ablation_config(base, "drop_type_prefix").encoder_config.use_type_prefix
    assert not ablation_config(base, "replace_modifiable_with_plain").encoder_config.use_mask
    assert ablation_config(base, "drop_context_loss").loss_weights.beta == 0.0
    with pytest.raises(ValueError):
        ablation_config(base, "drop_everything")


def test_run_ablation_rows(small_pair):
    kg1, kg2, truth = small_pair
    split = split_seeds(truth, (5, 5), 0)
    rows = run_ablation(_tiny(), [], kg1, kg2, split)
    assert [r["variant"] for r in rows] == ["baseline"]
    assert rows[0]["delta_mrr"] == 0.0
    rows = run_ablation(_tiny(), list(ABLATIONS), kg1, kg2, split)
    assert [r["variant"] for r in rows] == ["baseline", *ABLATIONS]
    table = format_table(rows)
    assert len(table.splitlines()) == len(ABLATIONS) + 3
    with pytest.raises(ValueError):
        run_ablation(_tiny(), ["bogus"], kg1, kg2, split)


def test_drop_image_hurts_on_image_only_fixture():
    kg1, kg2, truth = synth_paired_kgs(60, n_types=5, noise_sigma=0.05, rng=3)
    kg1, kg2 = image_only(kg1), image_only(kg2)
    split = split_seeds(truth, (2, 8), 0)
    cfg = TrainConfig(epochs=20)
    rows = run_ablation(cfg, ["drop_image"], kg1, kg2, split)
    assert rows[1]["hits1"] < rows[0]["hits1"]
