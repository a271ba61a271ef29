"""Alignment losses, the optimization loop and checkpoint IO."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import AlignmentSeedSet, DataError, sample_negatives
from .encoder import EncoderConfig, MoAlignEncoder, Vocab

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "moalign-checkpoint"
CHECKPOINT_VERSION = 1


class NumericAbort(FloatingPointError):
    """Raised when the training loss stops being finite."""


@dataclass
class LossWeights:
    alpha: float = 5.0
    beta: float = 2.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ValueError(f"loss weights need alpha, beta >= 0 and alpha + beta > 0, "
                             f"got {self.alpha}, {self.beta}")


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 1e-3
    negatives_per_side: int = 1
    rng_seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    encoder_config: EncoderConfig = field(default_factory=EncoderConfig)
    early_stop_patience: int = 20
    validation_fraction: float = 0.1
    learn_loss_weights: bool = False

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.negatives_per_side < 1:
            raise ValueError("epochs must be >= 0; batch_size and negatives_per_side >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")

    def to_dict(self):
        out = {f.name: getattr(self, f.name) for f in fields(self)
               if f.name not in ("loss_weights", "encoder_config")}
        out["loss_weights"] = asdict(self.loss_weights)
        out["encoder_config"] = self.encoder_config.to_dict()
        return out


_ENCODER_KEYS = {f.name for f in fields(EncoderConfig)}
_LOSS_KEYS = {"alpha", "beta"}


def _parse_value(raw):
    raw = raw.strip()
    low = raw.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def config_from_flat(values, base: TrainConfig | None = None):
    """Build a TrainConfig from a flat mapping; encoder and loss keys are top level.

    ``block_order`` accepts ``"N,T,V"``-style strings.  Unknown keys raise
    ``ValueError``.
    """
    base = base or TrainConfig()
    top, enc, loss = {}, {}, {}
    top_keys = {f.name for f in fields(TrainConfig)} - {"loss_weights", "encoder_config"}
    for k, v in values.items():
        if k in top_keys:
            top[k] = v
        elif k in _ENCODER_KEYS:
            enc[k] = v
        elif k in _LOSS_KEYS:
            loss[k] = v
        else:
            raise ValueError(f"unknown config key {k!r}")
    encoder = EncoderConfig(**{**asdict(base.encoder_config), **enc})
    weights = LossWeights(**{**asdict(base.loss_weights), **loss})
    kept = {f.name: getattr(base, f.name) for f in fields(TrainConfig)
            if f.name not in ("loss_weights", "encoder_config")}
    return TrainConfig(**{**kept, **top}, loss_weights=weights, encoder_config=encoder)


def read_config_file(path, base: TrainConfig | None = None):
    """Parse ``key = value`` lines (``#`` starts a comment) into a TrainConfig."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        k, v = line.split("=", 1)
        values[k.strip()] = _parse_value(v)
    return config_from_flat(values, base)


def config_to_flat(config: TrainConfig):
    out = {k: v for k, v in config.to_dict().items() if k not in ("loss_weights", "encoder_config")}
    out.update(config.to_dict()["loss_weights"])
    enc = config.encoder_config.to_dict()
    enc["block_order"] = ",".join(enc["block_order"])
    out.update(enc)
    return out


def write_config_file(config: TrainConfig, path):
    lines = [f"{k} = {json.dumps(v) if not isinstance(v, str) else v}"
             for k, v in config_to_flat(config).items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    loss_ea: float
    loss_con: float
    val_mrr: float | None


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    stopped_early: bool = False
    best_epoch: int | None = None
    wall_time: float = 0.0

    def to_jsonl(self):
        return "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in self.epochs)


# ---------------------------------------------------------------- losses

def cosine_distance(u, v):
    """1 - cos(u, v) over the last axis; raises on (near) zero-norm inputs."""
    u, v = ag.as_tensor(u), ag.as_tensor(v)
    nu = np.linalg.norm(u.data, axis=-1)
    nv = np.linalg.norm(v.data, axis=-1)
    if np.any(nu < 1e-12) or np.any(nv < 1e-12):
        raise ValueError("cosine distance is undefined for a zero-norm vector")
    dot = (u * v).sum(axis=-1)
    norms = ag.sqrt((u * u).sum(axis=-1)) * ag.sqrt((v * v).sum(axis=-1))
    return 1.0 - dot / norms


def _contrast(x, x2, x_neg, x2_neg):
    pos = cosine_distance(x, x2)
    if x2_neg.ndim == x.ndim + 1:  # several negatives per anchor
        left = cosine_distance(ag.reshape(x, x.shape[:-1] + (1, x.shape[-1])), x2_neg)
        right = cosine_distance(x_neg, ag.reshape(x2, x2.shape[:-1] + (1, x2.shape[-1])))
        return pos - left.mean(axis=-1) - right.mean(axis=-1)
    return pos - cosine_distance(x, x2_neg) - cosine_distance(x_neg, x2)


def loss_ea(e, e2, e_neg, e2_neg):
    """sim(e, e') - sim(e, neg e') - sim(neg e, e') with sim = cosine distance."""
    return _contrast(*map(ag.as_tensor, (e, e2, e_neg, e2_neg)))


def loss_con(o, o2, o_neg, o2_neg):
    """The same contrast over context ([CLS]) representations."""
    return _contrast(*map(ag.as_tensor, (o, o2, o_neg, o2_neg)))


def total_loss(l_ea, l_con, w):
    if isinstance(w, LossWeights):
        return l_ea * w.alpha + l_con * w.beta
    alpha, beta = w
    return l_ea * alpha + l_con * beta


# ---------------------------------------------------------------- optimizer

class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            p.data = p.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------- model wrapper

class Aligner:
    """Encoder parameters plus the loss weights they were trained with."""

    def __init__(self, encoder: MoAlignEncoder, loss_weights=None, learn_loss_weights=False):
        self.encoder = encoder
        self.loss_weights = loss_weights or LossWeights()
        self.learn_loss_weights = learn_loss_weights
        if learn_loss_weights and "loss.logits" not in encoder.params:
            w = self.loss_weights
            logits = [math.log(max(w.alpha, 1e-6)), math.log(max(w.beta, 1e-6))]
            encoder.params["loss.logits"] = ag.parameter([logits], name="loss.logits")

    @classmethod
    def for_kgs(cls, kgs, config: TrainConfig):
        enc = MoAlignEncoder.for_kgs(kgs, config.encoder_config)
        return cls(enc, config.loss_weights, config.learn_loss_weights)

    @property
    def params(self):
        return self.encoder.params

    def weights(self):
        """(alpha, beta) as used in the loss; tensors when they are learned."""
        if not self.learn_loss_weights:
            return self.loss_weights.alpha, self.loss_weights.beta
        total = self.loss_weights.alpha + self.loss_weights.beta
        mix = ag.softmax_rows(self.params["loss.logits"]) * total
        return mix[0, 0], mix[0, 1]

    def batch_loss(self, kg1, kg2, pairs, neg_left, neg_right, training=False, rng=None):
        """Summed total loss over ``pairs``; returns (loss, l_ea sum, l_con sum).

        ``neg_left[i]`` are kg2 entities contrasted with ``pairs[i][0]``;
        ``neg_right[i]`` are kg1 entities contrasted with ``pairs[i][1]``.
        """
        B, k = len(pairs), len(neg_left[0])
        left = [a for a, _ in pairs] + [n for row in neg_right for n in row]
        right = [b for _, b in pairs] + [n for row in neg_left for n in row]
        e1, o1 = self.encoder.encode_batch(kg1, left, training=training, rng=rng)
        e2, o2 = self.encoder.encode_batch(kg2, right, training=training, rng=rng)

        def split(x):
            pos = x[:B]
            neg = x[B:]
            neg = ag.reshape(neg, (B, k, x.shape[-1])) if k > 1 else neg
            return pos, neg

        (e, e_neg), (e2p, e2_neg) = split(e1), split(e2)
        (o, o_neg), (o2p, o2_neg) = split(o1), split(o2)
        l_ea = loss_ea(e, e2p, e_neg, e2_neg).sum()
        l_con = loss_con(o, o2p, o_neg, o2_neg).sum()
        return total_loss(l_ea, l_con, self.weights()), l_ea, l_con


def _draw_negatives(pairs, kg1, kg2, k, rng):
    neg_left, neg_right = [], []
    for pair in pairs:
        nl, nr = sample_negatives(pair, kg1, kg2, k, rng)
        neg_left.append(nl)
        neg_right.append(nr)
    return neg_left, neg_right


def train_epoch(model: Aligner, kg1, kg2, train_seeds, config: TrainConfig, rng, optimizer=None,
                epoch=0):
    """One pass over shuffled seeds; one optimizer step per batch.

    Returns per-pair mean (total, l_ea, l_con) over the epoch.
    """
    if len(train_seeds) == 0:
        raise DataError("no training seeds")
    optimizer = optimizer or Adam(model.params, lr=config.learning_rate)
    order = rng.permutation(len(train_seeds))
    tot = ea = con = 0.0
    for bi, start in enumerate(range(0, len(order), config.batch_size)):
        pairs = [train_seeds[i] for i in order[start:start + config.batch_size]]
        neg_left, neg_right = _draw_negatives(pairs, kg1, kg2, config.negatives_per_side, rng)
        loss, l_ea, l_con = model.batch_loss(kg1, kg2, pairs, neg_left, neg_right,
                                             training=True, rng=rng)
        if not np.isfinite(loss.data):
            raise NumericAbort(f"non-finite loss {float(loss.data)} at epoch {epoch}, "
                               f"batch {bi} (pairs {pairs[:3]}...)")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        tot += float(loss.data)
        ea += float(l_ea.data)
        con += float(l_con.data)
    n = len(train_seeds)
    return tot / n, ea / n, con / n


def eval_loss(model: Aligner, kg1, kg2, seeds, negatives_per_side=1, seed=0):
    """Eval-mode mean total loss with negatives drawn from a fixed seed."""
    rng = np.random.default_rng(seed)
    neg_left, neg_right = _draw_negatives(list(seeds), kg1, kg2, negatives_per_side, rng)
    loss, _, _ = model.batch_loss(kg1, kg2, list(seeds), neg_left, neg_right)
    return float(loss.data) / len(seeds)


def validation_split(train_seeds, fraction, seed):
    """Deterministic tail of the shuffled training seeds held out for validation."""
    seeds = list(train_seeds)
    if len(seeds) < 2 or fraction <= 0:
        return AlignmentSeedSet(seeds), AlignmentSeedSet()
    order = np.random.default_rng([seed, 1]).permutation(len(seeds))
    shuffled = [seeds[i] for i in order]
    n_val = max(1, int(round(fraction * len(seeds))))
    return AlignmentSeedSet(shuffled[:-n_val]), AlignmentSeedSet(shuffled[-n_val:])


def train(config: TrainConfig, kg1, kg2, train_seeds, model: Aligner | None = None):
    """Train with optional early stopping on validation MRR.

    Validation ranks each held-out seed among every entity of the other KG that
    is not a training seed.  The returned model carries the parameters of the
    best validation epoch (or the last epoch when there is no validation set).
    """
    from .evaluation import evaluate

    t0 = time.perf_counter()
    model = model or Aligner.for_kgs([kg1, kg2], config)
    fit, val = validation_split(train_seeds, config.validation_fraction, config.rng_seed)
    report = TrainReport()
    if config.epochs == 0:
        report.wall_time = time.perf_counter() - t0
        return model, report
    optimizer = Adam(model.params, lr=config.learning_rate)
    train_ids = ({a for a, _ in fit}, {b for _, b in fit})
    best, best_params, stale = -1.0, None, 0
    for epoch in range(1, config.epochs + 1):
        rng = np.random.default_rng([config.rng_seed, epoch])
        loss, l_ea, l_con = train_epoch(model, kg1, kg2, fit, config, rng, optimizer, epoch)
        val_mrr = None
        if len(val):
            metrics = evaluate(model.encoder, kg1, kg2, val, direction="averaged",
                               pool="unseen", exclude=train_ids)
            val_mrr = metrics.mrr
        report.epochs.append(EpochRecord(epoch, loss, l_ea, l_con, val_mrr))
        log.info("epoch %d loss %.5f ea %.5f con %.5f val_mrr %s", epoch, loss, l_ea, l_con,
                 "-" if val_mrr is None else f"{val_mrr:.4f}")
        if val_mrr is None:
            continue
        if val_mrr > best:
            best, stale, report.best_epoch = val_mrr, 0, epoch
            best_params = {k: p.data.copy() for k, p in model.params.items()}
        else:
            stale += 1
            if stale >= config.early_stop_patience:
                report.stopped_early = True
                break
    if best_params is not None:
        for k, p in model.params.items():
            p.data = best_params[k]
    report.wall_time = time.perf_counter() - t0
    return model, report


# ---------------------------------------------------------------- checkpoints

def checkpoint_dict(model: Aligner):
    enc = model.encoder
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "encoder_config": enc.config.to_dict(),
        "vocab": enc.vocab.to_dict(),
        "loss_weights": asdict(model.loss_weights),
        "learn_loss_weights": model.learn_loss_weights,
        "params": {k: {"shape": list(p.shape), "data": p.data.reshape(-1).tolist()}
                   for k, p in sorted(enc.params.items())},
    }


def save_checkpoint(model: Aligner, path):
    Path(path).write_text(json.dumps(checkpoint_dict(model), sort_keys=True) + "\n")


def model_from_dict(ck):
    if ck.get("format") != CHECKPOINT_FORMAT:
        raise DataError("not a moalign checkpoint")
    if ck.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {ck.get('version')}")
    config = EncoderConfig(**ck["encoder_config"])
    vocab = Vocab(**ck["vocab"])
    enc = MoAlignEncoder(config, vocab)
    for k, p in enc.params.items():
        if k not in ck["params"]:
            raise DataError(f"checkpoint lacks parameter {k!r}")
    for k, entry in ck["params"].items():
        if k == "loss.logits":
            continue
        if k not in enc.params:
            raise DataError(f"unexpected parameter {k!r} in checkpoint")
        shape = tuple(entry["shape"])
        if shape != enc.params[k].shape:
            raise DataError(f"parameter {k!r} has shape {shape}, config expects "
                            f"{enc.params[k].shape}")
        enc.params[k].data = np.array(entry["data"], dtype=float).reshape(shape)
    model = Aligner(enc, LossWeights(**ck["loss_weights"]), ck.get("learn_loss_weights", False))
    if "loss.logits" in ck["params"]:
        model.params["loss.logits"].data = np.array(ck["params"]["loss.logits"]["data"]).reshape(1, 2)
    return model


def load_checkpoint(path):
    return model_from_dict(json.loads(Path(path).read_text()))
