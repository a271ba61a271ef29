"""Train on a synthetic pair with planted alignment, save, reload and evaluate.

Run: python3 demos/03_train_and_evaluate.py
"""

import tempfile
from pathlib import Path

from moalign.data import split_seeds, synth_paired_kgs
from moalign.encoder import EncoderConfig, MoAlignEncoder
from moalign.evaluation import evaluate
from moalign.training import TrainConfig, load_checkpoint, save_checkpoint, train

kg1, kg2, truth = synth_paired_kgs(100, n_types=5, noise_sigma=0.05, rng=0)
split = split_seeds(truth, (2, 8), 0)
print(f"kg1: {len(kg1.entities)} entities, {len(kg1.relational_triplets)} relational triplets")
print(f"seeds: {len(split.train)} train / {len(split.test)} test")

config = TrainConfig(epochs=60, encoder_config=EncoderConfig(seed=0))
untrained = MoAlignEncoder.for_kgs([kg1, kg2], config.encoder_config)
print("\nuntrained:", evaluate(untrained, kg1, kg2, split.test).to_json())

model, report = train(config, kg1, kg2, split.train)
print(f"\ntrained {len(report.epochs)} epochs (best epoch {report.best_epoch}, "
      f"stopped early: {report.stopped_early})")
for r in report.epochs[:3]:
    print(f"  epoch {r.epoch}: loss {r.loss:.4f}  val MRR {r.val_mrr:.3f}")

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "model.json"
    save_checkpoint(model, path)
    reloaded = load_checkpoint(path)
    print(f"\ncheckpoint: {path.stat().st_size / 1e6:.1f} MB")
    for direction in ("left-to-right", "right-to-left", "averaged"):
        print(f"{direction:>14}:", evaluate(reloaded, kg1, kg2, split.test, direction).to_json())
