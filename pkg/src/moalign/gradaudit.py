"""Finite-difference audit of every differentiable primitive and the full loss.

Each primitive is wrapped as ``x -> sum(w * op(x, ...))`` with a fixed random
weight ``w`` so that no case has an identically zero gradient.  The full-loss
case checks sampled coordinates of every trainable parameter of a small model
(d = 8, one block) on a three-pair batch, with dropout active under a fixed
mask.  Parameters are redrawn at unit scale first: at the default 0.02 init the
loss gradients are ~1e-10 and a central difference cannot resolve them.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor, grad_check

AUDIT_TOL = 1e-4
AUDIT_EPS = 1e-5


@dataclass
class AuditResult:
    errors: dict = field(default_factory=dict)  # case name -> max relative error
    seconds: float = 0.0

    @property
    def max_error(self):
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def worst_case(self):
        return max(self.errors, key=self.errors.get) if self.errors else None

    def passed(self, tol=AUDIT_TOL):
        return bool(self.max_error < tol)

    def to_json(self):
        return {"max_rel_error": self.max_error, "worst_case": self.worst_case,
                "seconds": self.seconds, "cases": dict(sorted(self.errors.items()))}


def _weighted(rng, op):
    """Scalar objective sum(w * op(x)) with a fixed random w of the output's shape."""
    cache = {}

    def f(x):
        y = op(x)
        if "w" not in cache:
            cache["w"] = rng.normal(size=y.shape)
        return (y * cache["w"]).sum()
    return f


def _sq(x):
    return x * x


def primitive_cases(seed=0):
    """(name, f, x) triples covering every differentiable op used by the model."""
    from .encoder import attr_pair_fuse, pi_attn, prefix_ffn, prefix_mh_attn
    from .training import cosine_distance

    rng = np.random.default_rng(seed)

    def leaf(*shape, low=None):
        data = rng.normal(size=shape)
        if low is not None:  # keep away from kinks / domain edges
            data = np.sign(data) * (np.abs(data) + low)
        return ag.parameter(data)

    def const(*shape):
        return Tensor(rng.normal(size=shape))

    W, b = const(5, 3), const(3)
    mask = rng.random((4, 6)) < 0.7
    mask[:, 0] = True
    additive = np.where(mask, 0.0, ag.MASK_FILL)
    gain, bias = const(6), const(6)
    other = const(4, 6)
    cond = rng.random((4, 6)) < 0.5
    drop_seed = int(rng.integers(2**31))
    attn = {k: const(8, 8) / np.sqrt(8) for k in ("wq", "wk", "wv", "wo")}  # unsaturated softmax
    p_k, p_v = const(3, 8), const(3, 8)
    kv, kv_add = const(2, 5, 8), np.where(rng.random((2, 3, 5)) < 0.7, 0.0, ag.MASK_FILL)
    Kt, Vt = const(5, 4), const(5, 4)
    w1, w2, b1, b2 = const(8, 12), const(12, 8), const(12), const(8)
    Wpair, value = const(16, 8), const(3, 8)
    const_q, const_e = const(2, 3, 8), const(5, 8)

    cases = [
        ("add", lambda x: ag.add(x, other), leaf(4, 6)),
        ("sub", lambda x: ag.sub(other, x), leaf(4, 6)),
        ("mul", lambda x: ag.mul(x, x), leaf(4, 6)),
        ("div", lambda x: ag.div(other, x), leaf(4, 6, low=0.5)),
        ("sqrt", lambda x: ag.sqrt(x * x + 0.5), leaf(4, 6)),
        ("exp", ag.exp, leaf(4, 6)),
        ("relu", ag.relu, leaf(4, 6, low=1e-3)),
        ("where", lambda x: ag.where(cond, x, x * x), leaf(4, 6)),
        ("sum", lambda x: ag.tsum(x * x, axis=1), leaf(4, 6)),
        ("mean", lambda x: ag.mean(x * x, axis=0, keepdims=True), leaf(4, 6)),
        ("reshape", lambda x: ag.reshape(x, (6, 4)) * ag.reshape(x, (6, 4)), leaf(4, 6)),
        ("transpose", lambda x: ag.transpose(x) * ag.transpose(x), leaf(4, 6)),
        ("broadcast_to", lambda x: _sq(ag.broadcast_to(x, (3, 4, 6))), leaf(4, 6)),
        ("swap_last", lambda x: _sq(ag.swap_last(x)), leaf(2, 4, 6)),
        ("index", lambda x: _sq(ag.index(x, (np.array([0, 2, 2]), slice(None)))), leaf(4, 6)),
        ("gather_rows", lambda x: _sq(ag.gather_rows(x, np.array([3, 0, 3, 1]))), leaf(4, 6)),
        ("concat", lambda x: ag.concat([x, x * x], axis=1), leaf(4, 6)),
        ("stack", lambda x: ag.stack([x, x * x], axis=0), leaf(4, 6)),
        ("matmul", lambda x: ag.matmul(x, W), leaf(4, 5)),
        ("matmul_batched", lambda x: ag.matmul(x, ag.swap_last(x)), leaf(2, 3, 4)),
        ("linear", lambda x: ag.linear(x, W, b), leaf(4, 5)),
        ("softmax_rows", lambda x: ag.softmax_rows(x, additive), leaf(4, 6)),
        ("layer_norm", lambda x: ag.layer_norm(x, gain, bias), leaf(4, 6)),
        ("layer_norm_gain", lambda g: ag.layer_norm(other, g, bias), leaf(6)),
        ("standardize", lambda x: ag.standardize(x, ag.INIT_STD), leaf(4, 6)),
        ("dropout", lambda x: ag.dropout(x * x, 0.35, np.random.default_rng(drop_seed)),
         leaf(4, 6)),
        ("cosine_distance", lambda x: cosine_distance(x, other), leaf(4, 6)),
        ("pi_attn", lambda x: pi_attn(x, Kt, Vt, np.zeros((3, 5))), leaf(3, 4)),
        ("prefix_mh_attn.queries",
         lambda x: prefix_mh_attn(x, kv, kv_add, attn, 2, prefix=(p_k, p_v)), leaf(2, 3, 8)),
        ("prefix_mh_attn.prefix",
         lambda x: prefix_mh_attn(const_q, kv, kv_add, attn, 2, prefix=(x, p_v)), leaf(3, 8)),
        ("attr_pair_fuse", lambda x: attr_pair_fuse(x, value, Wpair), leaf(3, 8)),
        ("prefix_ffn", lambda x: prefix_ffn(x, w1, w2, p_k, p_v, b1, b2), leaf(5, 8)),
        ("prefix_ffn.phi_k", lambda x: prefix_ffn(const_e, w1, w2, x, p_v, b1, b2), leaf(3, 8)),
    ]
    return [(name, _weighted(rng, op), x) for name, op, x in cases]


def randomize_params(params, rng, scale=0.5):
    """Redraw every parameter at O(1) scale; LayerNorm gains stay near 1."""
    for k, p in params.items():
        if k.endswith("ln.gain"):
            p.data = 1.0 + 0.1 * rng.normal(size=p.shape)
        else:
            p.data = scale * rng.normal(size=p.shape)


def full_loss_case(seed=0, n_pairs=3, d=8, num_blocks=1, dropout_p=0.35):
    """(aligner, f) where ``f()`` is the training loss on a fixed ``n_pairs`` batch."""
    from .data import synth_paired_kgs
    from .encoder import EncoderConfig
    from .training import Aligner, TrainConfig

    kg1, kg2, truth = synth_paired_kgs(3 * n_pairs + 3, n_types=3, noise_sigma=0.05, rng=seed,
                                       image_dim=12, edges_per_entity=1)
    enc = EncoderConfig(d=d, num_heads=2, num_blocks=num_blocks, ffn_hidden=2 * d,
                        dropout_p=dropout_p, max_neighbors=3, max_attributes=4, patch_len=4,
                        seed=seed)
    model = Aligner.for_kgs([kg1, kg2], TrainConfig(encoder_config=enc))
    randomize_params(model.params, np.random.default_rng([seed, 7]))
    pairs = list(truth)[:n_pairs]
    rest = list(truth)[n_pairs:]
    neg_left = [[b] for _, b in rest[:n_pairs]]
    neg_right = [[a] for a, _ in rest[n_pairs:2 * n_pairs]]

    def f(_=None):
        rng = np.random.default_rng([seed, 11])  # same dropout masks on every call
        return model.batch_loss(kg1, kg2, pairs, neg_left, neg_right, training=True, rng=rng)[0]
    return model, f


def gradient_audit(seed=0, eps=AUDIT_EPS, coords_per_param=6):
    """Run every primitive case plus the full-loss case; returns an ``AuditResult``."""
    t0 = time.perf_counter()
    result = AuditResult()
    for name, f, x in primitive_cases(seed):
        result.errors[name] = grad_check(f, x, eps)
    model, f = full_loss_case(seed)
    rng = np.random.default_rng([seed, 13])
    for k, p in sorted(model.params.items()):
        coords = rng.choice(p.size, size=min(coords_per_param, p.size), replace=False)
        result.errors[f"loss/{k}"] = grad_check(f, p, eps, coords=coords)
    result.seconds = time.perf_counter() - t0
    return result
