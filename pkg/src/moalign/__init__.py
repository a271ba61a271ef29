"""Multi-modal entity alignment with a hierarchical, type-prefixed transformer.

A small numpy reverse-mode autograd drives the whole model; see the submodules:

- ``autograd``: tensors, differentiable primitives, finite-difference checks
- ``data``: multi-modal KGs, TSV IO, seed splits, negatives, synthetic pairs
- ``encoding``: per-entity token sequences, positional codes, visibility masks
- ``encoder``: the attention stages, prefix injection and the block stack
- ``training``: alignment losses, Adam, the training loop and checkpoints
- ``evaluation``: ranking metrics, alignment evaluation and ablations
- ``gradaudit``: finite-difference audit of every primitive and the full loss
- ``cli``: the ``moalign`` command line
"""

from .autograd import Tensor, grad_check
from .data import (
    AlignmentSeedSet,
    DataError,
    DatasetSplit,
    MultiModalKG,
    load_kg,
    load_pair,
    perturb_kg,
    split_seeds,
    synth_paired_kgs,
    write_pair,
)
from .encoder import EncoderConfig, MoAlignEncoder
from .encoding import build_mask, build_sequence
from .evaluation import AlignmentMetrics, evaluate, run_ablation
from .gradaudit import gradient_audit
from .training import (
    Aligner,
    LossWeights,
    NumericAbort,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AlignmentMetrics", "AlignmentSeedSet", "Aligner", "DataError", "DatasetSplit",
    "EncoderConfig", "LossWeights", "MoAlignEncoder", "MultiModalKG", "NumericAbort",
    "Tensor", "TrainConfig", "build_mask", "build_sequence", "evaluate", "grad_check",
    "gradient_audit", "load_checkpoint", "load_kg", "load_pair", "perturb_kg", "run_ablation",
    "save_checkpoint", "split_seeds", "synth_paired_kgs", "train", "write_pair",
]
