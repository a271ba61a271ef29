import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moalign import autograd as ag
from moalign.autograd import MASK_FILL, ShapeError, Tensor, grad_check
from moalign.data import DataError, make_kg, synth_paired_kgs
from moalign.encoder import (
    EncoderConfig,
    KGView,
    MoAlignEncoder,
    Vocab,
    attr_pair_fuse,
    hierarchical_stage,
    init_params,
    parse_block_order,
    pi_attn,
    prefix_ffn,
    prefix_mh_attn,
)
from moalign.gradaudit import randomize_params
from tests.oracles import naive_attention, naive_mh


def attn_params(rng, d):
    return {k: Tensor(rng.normal(size=(d, d)) / np.sqrt(d)) for k in ("wq", "wk", "wv", "wo")}


def raw(params):
    return {k: v.data for k, v in params.items()}


# ---------------------------------------------------------------- pi_attn

def test_pi_attn_masked_second_key(rng):
    q, k, v = rng.normal(size=(1, 4)), rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
    out = pi_attn(Tensor(q), Tensor(k), Tensor(v), [[0.0, MASK_FILL]])
    np.testing.assert_allclose(out.data, v[:1], atol=1e-9)


def test_pi_attn_single_key(rng):
    v = rng.normal(size=(1, 4))
    out = pi_attn(Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(1, 4))), Tensor(v),
                  np.zeros((3, 1)))
    np.testing.assert_array_equal(out.data, np.repeat(v, 3, axis=0))


def test_pi_attn_naive_loop(rng):
    q, k, v = rng.normal(size=(2, 4)), rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    m = np.array([[0, MASK_FILL, 0], [0, 0, 0]])
    out, w = pi_attn(Tensor(q), Tensor(k), Tensor(v), m, return_weights=True)
    ref_out, ref_w = naive_attention(q, k, v, m)
    np.testing.assert_allclose(out.data, ref_out, atol=1e-12)
    np.testing.assert_allclose(w.data, ref_w, atol=1e-12)
    assert w.data[0, 1] < 1e-12


def test_pi_attn_shape_errors(rng):
    with pytest.raises(ShapeError):
        pi_attn(Tensor(np.zeros((2, 4))), Tensor(np.zeros((3, 5))), Tensor(np.zeros((3, 4))),
                np.zeros((2, 3)))
    with pytest.raises(ShapeError):
        pi_attn(Tensor(np.zeros((2, 4))), Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 4))),
                np.zeros((2, 2)))


# ---------------------------------------------------------------- prefix attention

def test_prefix_key_count(rng):
    d, H = 8, 2
    params = attn_params(rng, d)
    for n_t in (1, 3, 7):
        pk, pv = Tensor(rng.normal(size=(n_t, d))), Tensor(rng.normal(size=(n_t, d)))
        _, w = prefix_mh_attn(Tensor(rng.normal(size=(1, 2, d))), Tensor(rng.normal(size=(1, 4, d))),
                              np.zeros((1, 2, 4)), params, H, prefix=(pk, pv), return_weights=True)
        assert w.shape == (1, H, 2, 4 + n_t)


def test_prefix_empty_bank_rejected(rng):
    params = attn_params(rng, 8)
    with pytest.raises(ValueError):
        prefix_mh_attn(Tensor(np.zeros((1, 2, 8))), Tensor(np.zeros((1, 3, 8))), np.zeros((1, 2, 3)),
                       params, 2, prefix=(Tensor(np.zeros((0, 8))), Tensor(np.zeros((0, 8)))))


def test_prefix_shape_mismatch(rng):
    params = attn_params(rng, 8)
    with pytest.raises(ShapeError):
        prefix_mh_attn(Tensor(np.zeros((1, 2, 8))), Tensor(np.zeros((1, 3, 8))), np.zeros((1, 2, 3)),
                       params, 2, prefix=(Tensor(np.zeros((2, 8))), Tensor(np.zeros((2, 4)))))
    with pytest.raises(ShapeError):
        prefix_mh_attn(Tensor(np.zeros((1, 2, 8))), Tensor(np.zeros((1, 3, 6))), np.zeros((1, 2, 3)),
                       params, 2)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 4), st.integers(1, 8), st.sampled_from([1, 2, 4]),
       st.booleans())
def test_prefix_attention_matches_naive(seed, R, K, H, with_prefix):
    rng = np.random.default_rng(seed)
    d = 8
    params = attn_params(rng, d)
    q, kv = rng.normal(size=(2, R, d)), rng.normal(size=(2, K, d))
    bits = rng.random((2, R, K)) < 0.6
    bits[..., 0] = True
    additive = np.where(bits, 0.0, MASK_FILL)
    prefix = (rng.normal(size=(3, d)), rng.normal(size=(3, d))) if with_prefix else None
    out, w = prefix_mh_attn(Tensor(q), Tensor(kv), additive, params, H,
                            prefix=None if prefix is None else tuple(map(Tensor, prefix)),
                            return_weights=True)
    np.testing.assert_allclose(out.data, naive_mh(q, kv, additive, raw(params), H, prefix),
                               atol=1e-12)
    np.testing.assert_allclose(w.data.sum(-1), 1.0, atol=1e-9)
    masked = np.broadcast_to(~bits[:, None], (2, H, R, K))
    assert np.all(w.data[..., :K][masked] < 1e-12)


def test_all_kv_masked_uses_prefix_only(rng):
    d, H = 8, 2
    params = attn_params(rng, d)
    pk, pv = rng.normal(size=(2, d)), rng.normal(size=(2, d))
    q = rng.normal(size=(1, 1, d))
    out, w = prefix_mh_attn(Tensor(q), Tensor(rng.normal(size=(1, 3, d))),
                            np.full((1, 1, 3), MASK_FILL), params, H,
                            prefix=(Tensor(pk), Tensor(pv)), return_weights=True)
    assert np.all(np.isfinite(out.data))
    assert np.all(w.data[..., :3] < 1e-12)
    out2 = prefix_mh_attn(Tensor(q), Tensor(rng.normal(size=(1, 3, d))),
                          np.full((1, 1, 3), MASK_FILL), params, H, prefix=(Tensor(pk), Tensor(pv)))
    np.testing.assert_allclose(out.data, out2.data, atol=1e-12)


# ---------------------------------------------------------------- fuse and FFN

def test_attr_pair_fuse_selects_halves(rng):
    name, value = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    eye, zero = np.eye(4), np.zeros((4, 4))
    np.testing.assert_array_equal(
        attr_pair_fuse(Tensor(name), Tensor(value), Tensor(np.vstack([eye, zero]))).data, name)
    np.testing.assert_array_equal(
        attr_pair_fuse(Tensor(name), Tensor(value), Tensor(np.vstack([zero, eye]))).data, value)


def test_attr_pair_fuse_errors():
    with pytest.raises(ShapeError):
        attr_pair_fuse(Tensor(np.zeros((2, 4))), Tensor(np.zeros((3, 4))), Tensor(np.zeros((8, 4))))
    with pytest.raises(ShapeError):
        attr_pair_fuse(Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 4))), Tensor(np.zeros((4, 4))))


def test_attr_pair_fuse_gradcheck(rng):
    value = Tensor(rng.normal(size=(3, 4)))
    W = ag.parameter(rng.normal(size=(8, 4)))
    w = rng.normal(size=(3, 4))
    name = Tensor(rng.normal(size=(3, 4)))
    assert grad_check(lambda p: (attr_pair_fuse(name, value, p) * w).sum(), W) < 1e-6


def test_prefix_ffn_without_types_is_plain_ffn(rng):
    E, w1, w2 = rng.normal(size=(5, 8)), rng.normal(size=(8, 12)), rng.normal(size=(12, 8))
    b1, b2 = rng.normal(size=12), rng.normal(size=8)
    ref = np.maximum(E @ w1 + b1, 0) @ w2 + b2
    out = prefix_ffn(Tensor(E), Tensor(w1), Tensor(w2), b1=Tensor(b1), b2=Tensor(b2))
    np.testing.assert_allclose(out.data, ref, atol=1e-12)


def test_prefix_ffn_type_rows_are_extra_units(rng):
    E, w1, w2 = rng.normal(size=(5, 8)), rng.normal(size=(8, 12)), rng.normal(size=(12, 8))
    pk, pv = rng.normal(size=(3, 8)), rng.normal(size=(3, 8))
    ref = np.maximum(E @ w1, 0) @ w2 + np.maximum(E @ pk.T, 0) @ pv
    out = prefix_ffn(Tensor(E), Tensor(w1), Tensor(w2), Tensor(pk), Tensor(pv))
    np.testing.assert_allclose(out.data, ref, atol=1e-12)


def test_prefix_ffn_zero_input(rng):
    out = prefix_ffn(Tensor(np.zeros((2, 8))), Tensor(rng.normal(size=(8, 12))),
                     Tensor(rng.normal(size=(12, 8))), Tensor(rng.normal(size=(3, 8))),
                     Tensor(rng.normal(size=(3, 8))), b1=Tensor(np.zeros(12)), b2=Tensor(np.zeros(8)))
    np.testing.assert_array_equal(out.data, 0.0)


def test_prefix_ffn_gradcheck_both_weights(rng):
    E = Tensor(rng.normal(size=(4, 8)))
    w1, w2 = ag.parameter(rng.normal(size=(8, 12))), ag.parameter(rng.normal(size=(12, 8)))
    pk, pv = ag.parameter(rng.normal(size=(3, 8))), ag.parameter(rng.normal(size=(3, 8)))
    w = rng.normal(size=(4, 8))
    f = lambda _=None: (prefix_ffn(E, w1, w2, pk, pv) * w).sum()
    for p in (w1, w2, pk, pv):
        assert grad_check(f, p) < 1e-5


def test_prefix_ffn_half_prefix_rejected(rng):
    with pytest.raises(ValueError):
        prefix_ffn(Tensor(np.zeros((2, 8))), Tensor(np.zeros((8, 4))), Tensor(np.zeros((4, 8))),
                   phi_k=Tensor(np.zeros((2, 8))))


# ---------------------------------------------------------------- stages and blocks

def test_stage_hand_rolled_single_head(rng):
    d = 4
    params = attn_params(rng, d)
    state, bank = rng.normal(size=(1, 2, d)), rng.normal(size=(1, 2, d))
    out = hierarchical_stage(Tensor(state), Tensor(bank), np.ones((1, 2, 2), bool), [True],
                             params, 1)
    p = raw(params)
    ref, _ = naive_attention(state[0] @ p["wq"], bank[0] @ p["wk"], bank[0] @ p["wv"],
                             np.zeros((2, 2)))
    np.testing.assert_allclose(out.data[0], ref @ p["wo"], atol=1e-12)


def test_stage_empty_bank_is_identity(rng):
    params = attn_params(rng, 4)
    state = Tensor(rng.normal(size=(2, 2, 4)))
    assert hierarchical_stage(state, None, None, [False, False], params, 2) is state
    bank = Tensor(rng.normal(size=(2, 3, 4)))
    bits = np.ones((2, 2, 3), bool)
    bits[1] = False
    out = hierarchical_stage(state, bank, bits, [True, False], params, 2)
    np.testing.assert_array_equal(out.data[1], state.data[1])
    assert out.shape == (2, 2, 4)


def _encoder(kgs, **kw):
    cfg = EncoderConfig(d=16, num_heads=2, num_blocks=2, ffn_hidden=32, max_neighbors=4,
                        max_attributes=4, patch_len=4, **kw)
    return MoAlignEncoder.for_kgs(kgs, cfg)


def test_encode_shapes_and_determinism(small_pair):
    kg1, kg2, _ = small_pair
    enc = _encoder([kg1, kg2])
    e, c = enc.encode("a0", kg1)
    assert e.shape == c.shape == (16,)
    e2, c2 = enc.encode("a0", kg1)
    np.testing.assert_array_equal(e, e2)
    np.testing.assert_array_equal(c, c2)


def test_encode_unknown_entity(small_pair):
    kg1, kg2, _ = small_pair
    with pytest.raises(DataError):
        _encoder([kg1, kg2]).encode("ghost", kg1)


def test_batching_does_not_change_results(small_pair):
    kg1, kg2, _ = small_pair
    enc = _encoder([kg1, kg2])
    all_reps, _ = enc.encode_all(kg1, kg1.entities)
    single = np.stack([enc.encode(e, kg1)[0] for e in kg1.entities[:5]])
    np.testing.assert_allclose(all_reps[:5], single, atol=1e-12)


def test_isomorphic_entities_equal():
    kg1, kg2, truth = synth_paired_kgs(20, n_types=3, noise_sigma=0.0, rng=4, suffix=None)
    enc = _encoder([kg1, kg2])
    for kg, side in ((kg1, 0), (kg2, 1)):
        rngs = {pair[side]: np.random.default_rng(i) for i, pair in enumerate(truth)}
        enc._views[id(kg)] = KGView(kg, enc.config, enc.vocab, order_rngs=rngs)
    left = enc.encode_all(kg1, [a for a, _ in truth])
    right = enc.encode_all(kg2, [b for _, b in truth])
    np.testing.assert_allclose(left[0], right[0], atol=1e-9)
    np.testing.assert_allclose(left[1], right[1], atol=1e-9)


def test_block_order_changes_output(small_pair):
    kg1, kg2, _ = small_pair
    outs = []
    for order in ("NTV", "VTN"):
        enc = _encoder([kg1, kg2], block_order=order)
        randomize_params(enc.params, np.random.default_rng(0))
        outs.append(enc.encode_all(kg1, kg1.entities[:8])[0])
    assert np.abs(outs[0] - outs[1]).max() > 1e-6


def test_parse_block_order():
    assert parse_block_order("N,V,T") == ("neighbor", "visual", "textual")
    assert parse_block_order("tnv") == ("textual", "neighbor", "visual")
    with pytest.raises(ValueError):
        parse_block_order("NNT")


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(d=10, num_heads=4)
    with pytest.raises(ValueError):
        EncoderConfig(neighbor_kv="bogus")
    with pytest.raises(ValueError):
        EncoderConfig(entity_embedding="bogus")


def test_zero_stage_outputs_leave_residual_path(small_pair):
    kg1, kg2, _ = small_pair
    enc = _encoder([kg1, kg2])
    for k, p in enc.params.items():
        if k.endswith(".wo"):
            p.data[:] = 0.0
    state_in = Tensor(np.random.default_rng(0).normal(size=(3, 2, 16)))
    banks = {s: (None, None, np.zeros(3, bool)) for s in ("neighbor", "textual", "visual")}
    view = enc.view(kg1)
    from moalign.encoder import assemble_batch
    batch = assemble_batch(view, kg1.entities[:3], enc.config)
    X, pos = enc.embed_tokens(batch)
    for stage, (idx, bits, has) in batch.banks.items():
        if idx is not None and stage == "neighbor":
            banks[stage] = (ag.gather_rows(X, pos[idx]), bits, has)
    out = enc.block_forward(0, state_in, banks)
    p = {k: v.data for k, v in enc.params.items()}
    hidden = np.concatenate([p["block0.ffn.w1"], p["block0.ffn.phi_k"].T], axis=1)
    second = np.concatenate([p["block0.ffn.w2"], p["block0.ffn.phi_v"]], axis=0)
    ffn0 = np.maximum(np.concatenate([p["block0.ffn.b1"], np.zeros(len(p["block0.ffn.phi_k"]))]), 0) \
        @ second + p["block0.ffn.b2"]
    assert hidden.shape[1] == second.shape[0]
    x = state_in.data + ffn0
    ref = (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-5)
    np.testing.assert_allclose(out.data, ref, atol=1e-10)


def test_block_forward_gradcheck():
    kg = make_kg([("e", "r", "n1")], [("e", "name", "blue")], [],
                 {"e": "A", "n1": "B"})
    cfg = EncoderConfig(d=8, num_heads=2, num_blocks=1, ffn_hidden=16, max_neighbors=2,
                        max_attributes=2, patch_len=4, dropout_p=0.0)
    enc = MoAlignEncoder.for_kgs([kg], cfg)
    randomize_params(enc.params, np.random.default_rng(1))
    w = np.random.default_rng(2).normal(size=(1, 8))
    f = lambda _=None: ((enc.encode_batch(kg, ["e"])[0]) * w).sum()
    assert len(enc.view(kg).sequence("e")) == 7  # 6 tokens plus the trailing type token
    rng = np.random.default_rng(3)
    for k, p in sorted(enc.params.items()):
        coords = rng.choice(p.size, size=min(4, p.size), replace=False)
        assert grad_check(f, p, coords=coords) < 1e-4, k


def test_finite_norm_fuzz():
    kg1, kg2, _ = synth_paired_kgs(12, n_types=3, rng=0, image_dim=12)
    for seed in range(100):
        enc = _encoder([kg1, kg2], seed=seed)
        rng = np.random.default_rng(seed)
        randomize_params(enc.params, rng, scale=float(rng.uniform(0.01, 3.0)))
        e, c = enc.encode_all(kg1, kg1.entities[:4])
        assert np.all(np.isfinite(e)) and np.all(np.isfinite(c))


def test_prefix_rows_start_as_type_embeddings(small_pair):
    kg1, kg2, _ = small_pair
    p = _encoder([kg1, kg2]).params
    for key in ("block0.prefix.k", "block1.prefix.v", "block0.ffn.phi_k", "block1.ffn.phi_v"):
        np.testing.assert_array_equal(p[key].data, p["embed.type"].data)
        assert p[key].data is not p["embed.type"].data


def test_shared_prefix_option(small_pair):
    kg1, kg2, _ = small_pair
    p = _encoder([kg1, kg2], shared_prefix=True).params
    assert "prefix.k" in p and "block0.prefix.k" not in p


def test_text_stage_isolated_from_images(monkeypatch):
    import moalign.encoder as encoder_mod

    triples = [("e", "r", "x")]
    text = [("e", "name", "green leaf")]
    types = {"e": "T", "x": "T"}
    with_img = make_kg(triples, text, [("e", "pic", [0.5, -1.0, 2.0, 0.1])], types)
    no_img = make_kg(triples, text, [], types)
    cfg = EncoderConfig(d=8, num_heads=2, num_blocks=1, ffn_hidden=16, patch_len=4,
                        block_order="NTV")
    vocab = Vocab.from_kgs([with_img, no_img], 4)
    params = init_params(cfg, vocab)
    randomize_params(params, np.random.default_rng(0))
    stage = encoder_mod.hierarchical_stage
    seen = []

    def recording(*args, **kw):
        out = stage(*args, **kw)
        seen[-1].append(out.data.copy())
        return out
    monkeypatch.setattr(encoder_mod, "hierarchical_stage", recording)
    finals = []
    for kg in (with_img, no_img):
        seen.append([])
        finals.append(MoAlignEncoder(cfg, vocab, params).encode("e", kg)[0])
    for a, b in zip(seen[0][:2], seen[1][:2]):  # neighbor and textual stages
        np.testing.assert_array_equal(a, b)
    assert np.abs(finals[0] - finals[1]).max() > 1e-6  # the visual stage does act


def test_per_entity_mode(small_pair):
    kg1, kg2, _ = small_pair
    enc = _encoder([kg1, kg2], entity_embedding="per-entity")
    assert enc.params["embed.entity_id"].shape == (len(kg1.entities) + len(kg2.entities) + 1, 16)
    e, _ = enc.encode("a0", kg1)
    assert np.all(np.isfinite(e))
    unseen, _, _ = synth_paired_kgs(10, rng=99)
    assert enc.vocab.entity_rows(unseen) is None


def test_vocab_round_trip(small_pair):
    v = Vocab.from_kgs(small_pair[:2], 4)
    assert Vocab(**v.to_dict()) == v
    assert v.image_dim % 4 == 0
