"""Command-line entry point: synth, train, eval, ablate, gradcheck, dump-sequences.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .data import DataError, load_pair, perturb_kg, split_seeds, synth_paired_kgs, write_pair
from .encoding import dump_sequences
from .evaluation import ABLATIONS, DIRECTIONS, evaluate, format_table, run_ablation
from .gradaudit import AUDIT_TOL, gradient_audit
from .training import (
    Aligner,
    NumericAbort,
    TrainConfig,
    config_from_flat,
    load_checkpoint,
    read_config_file,
    save_checkpoint,
    train,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_globals(p, suppress):
    default = argparse.SUPPRESS if suppress else None
    p.add_argument("--seed", type=int, default=default,
                   help="master seed for data generation, splits and training")
    p.add_argument("--config", default=default, help="flat key = value TrainConfig file")
    p.add_argument("-v", "--verbose", action="store_true",
                   default=argparse.SUPPRESS if suppress else False)


def _add_data(p):
    g = p.add_argument_group("data source")
    src = g.add_mutually_exclusive_group()
    src.add_argument("--data", help="directory with kg1/, kg2/ and seeds.tsv (as written by synth)")
    src.add_argument("--synth", action="store_true", help="generate a synthetic pair in memory")
    g.add_argument("--entities", type=int, default=100)
    g.add_argument("--types", type=int, default=5)
    g.add_argument("--noise", type=float, default=0.05)
    g.add_argument("--relations", type=int, default=4)
    g.add_argument("--text-attrs", type=int, default=2)
    g.add_argument("--image-attrs", type=int, default=2)
    g.add_argument("--perturb", type=float, default=0.0,
                   help="fraction of kg2 triplets to corrupt (at most 0.3)")
    g.add_argument("--perturb-target", choices=("neighbors", "attributes"), default="attributes")
    g.add_argument("--split", default="2:8", help="train:test seed ratio (default 2:8)")


def _add_model(p):
    g = p.add_argument_group("model and optimization (override --config)")
    g.add_argument("--epochs", type=int)
    g.add_argument("--lr", type=float, dest="learning_rate")
    g.add_argument("--batch-size", type=int)
    g.add_argument("--patience", type=int, dest="early_stop_patience")
    g.add_argument("--dropout", type=float, dest="dropout_p")
    g.add_argument("--block-order", help="stage order, e.g. N,T,V or N,V,T")
    g.add_argument("--neighbor-kv", choices=("entities+relations", "entities-only"))
    g.add_argument("--shared-prefix", action="store_true", default=None,
                   help="one prefix bank shared by all blocks")
    g.add_argument("--learn-loss-weights", action="store_true", default=None,
                   help="learn the mix of the two loss terms")
    g.add_argument("--entity-embedding", choices=("shared", "per-entity"))


def build_parser():
    parser = _Parser(prog="moalign", description=__doc__.splitlines()[0])
    _add_globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic KG pair with planted alignment")
    _add_globals(p, suppress=True)
    p.add_argument("--entities", type=int, default=100)
    p.add_argument("--types", type=int, default=5)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--relations", type=int, default=4)
    p.add_argument("--text-attrs", type=int, default=2)
    p.add_argument("--image-attrs", type=int, default=2)
    p.add_argument("--perturb", type=float, default=0.0)
    p.add_argument("--perturb-target", choices=("neighbors", "attributes"), default="attributes")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train", help="train on a KG pair and report test metrics")
    _add_globals(p, suppress=True)
    _add_data(p)
    _add_model(p)
    p.add_argument("--save-to", help="checkpoint path (JSON)")
    p.add_argument("--report", help="per-epoch report path (JSON lines)")
    p.add_argument("--init-from", help="start from this checkpoint")
    p.add_argument("--direction", choices=DIRECTIONS, default="averaged")
    p.add_argument("--dump-sequences", metavar="PATH", help="also dump kg1 input sequences")

    p = sub.add_parser("eval", help="evaluate a checkpoint; prints metrics JSON")
    _add_globals(p, suppress=True)
    _add_data(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--direction", choices=DIRECTIONS, default="averaged")
    p.add_argument("--pool", choices=("test", "all"), default="test",
                   help="candidates: test-side entities (default) or every entity")
    p.add_argument("--seeds-file", help="evaluate these pairs instead of the test split")

    p = sub.add_parser("ablate", help="train baseline and variants; prints a delta table")
    _add_globals(p, suppress=True)
    _add_data(p)
    _add_model(p)
    p.add_argument("--toggles", default=",".join(ABLATIONS),
                   help=f"comma-separated subset of {', '.join(ABLATIONS)}")
    p.add_argument("--direction", choices=DIRECTIONS, default="averaged")
    p.add_argument("--json", action="store_true", help="print rows as JSON instead of a table")

    p = sub.add_parser("gradcheck", help="finite-difference audit of primitives and the loss")
    _add_globals(p, suppress=True)
    p.add_argument("--coords", type=int, default=6, help="sampled coordinates per parameter")

    p = sub.add_parser("dump-sequences", help="write input sequences as JSON")
    _add_globals(p, suppress=True)
    _add_data(p)
    p.add_argument("--kg", type=int, choices=(1, 2), default=1)
    p.add_argument("--entity", action="append", help="entity id (repeatable; default all)")
    p.add_argument("--out", help="output path (default stdout)")
    return parser


# ---------------------------------------------------------------- helpers

def _seed(args):
    return 0 if args.seed is None else args.seed


def _ratio(text):
    try:
        a, b = (float(x) for x in text.split(":"))
    except ValueError:
        raise UsageError(f"--split must look like 2:8, got {text!r}") from None
    return a, b


def _load_data(args):
    """(kg1, kg2, seeds) from --data or a fresh synthetic pair."""
    _check_perturb(args)
    if args.data:
        kg1, kg2, seeds = load_pair(args.data)
    else:
        kg1, kg2, seeds = synth_paired_kgs(
            args.entities, n_relations=args.relations, n_text_attrs=args.text_attrs,
            n_image_attrs=args.image_attrs, n_types=args.types, noise_sigma=args.noise,
            rng=_seed(args))
    if args.perturb:
        kg2 = perturb_kg(kg2, args.perturb, args.perturb_target, [_seed(args), 3])
    return kg1, kg2, seeds


def _train_config(args):
    try:
        base = read_config_file(args.config) if args.config else TrainConfig()
        flat = {}
        for key in ("epochs", "learning_rate", "batch_size", "early_stop_patience", "dropout_p",
                    "block_order", "neighbor_kv", "shared_prefix", "learn_loss_weights",
                    "entity_embedding"):
            value = getattr(args, key, None)
            if value is not None:
                flat[key] = value
        if args.seed is not None:
            flat["rng_seed"] = args.seed
            flat["seed"] = args.seed
        return config_from_flat(flat, base)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, DataError):
            raise
        raise UsageError(str(exc)) from None
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}") from None


def _print_json(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


# ---------------------------------------------------------------- commands

def _check_perturb(args):
    if args.perturb and not 0 <= args.perturb <= 0.3:
        raise UsageError("--perturb must lie in [0, 0.3]")


def cmd_synth(args):
    _check_perturb(args)
    kg1, kg2, truth = synth_paired_kgs(
        args.entities, n_relations=args.relations, n_text_attrs=args.text_attrs,
        n_image_attrs=args.image_attrs, n_types=args.types, noise_sigma=args.noise,
        rng=_seed(args))
    if args.perturb:
        kg2 = perturb_kg(kg2, args.perturb, args.perturb_target, [_seed(args), 3])
    extra = {"generator": {"entities": args.entities, "types": args.types, "noise": args.noise,
                           "relations": args.relations, "text_attrs": args.text_attrs,
                           "image_attrs": args.image_attrs, "seed": _seed(args),
                           "perturb": args.perturb, "perturb_target": args.perturb_target}}
    _print_json(write_pair(kg1, kg2, truth, args.out, extra))
    return EXIT_OK


def cmd_train(args):
    config = _train_config(args)
    kg1, kg2, seeds = _load_data(args)
    split = split_seeds(seeds, _ratio(args.split), _seed(args))
    model = None
    if args.init_from:
        model = load_checkpoint(args.init_from)
        config = replace(config, encoder_config=model.encoder.config)
    else:
        model = Aligner.for_kgs([kg1, kg2], config)
    if args.dump_sequences:
        view = model.encoder.view(kg1)
        dump_sequences([view.sequence(e) for e in kg1.entities], args.dump_sequences)
    model, report = train(config, kg1, kg2, split.train, model=model)
    if args.save_to:
        save_checkpoint(model, args.save_to)
    if args.report:
        Path(args.report).write_text(report.to_jsonl())
    metrics = evaluate(model.encoder, kg1, kg2, split.test, args.direction)
    out = metrics.to_json()
    out.update(epochs_run=len(report.epochs), best_epoch=report.best_epoch,
               stopped_early=report.stopped_early)
    _print_json(out)
    return EXIT_OK


def cmd_eval(args):
    model = load_checkpoint(args.checkpoint)
    kg1, kg2, seeds = _load_data(args)
    if args.seeds_file:
        from .data import load_seeds
        test = load_seeds(args.seeds_file, kg1, kg2)
    else:
        test = split_seeds(seeds, _ratio(args.split), _seed(args)).test
    _print_json(evaluate(model.encoder, kg1, kg2, test, args.direction, pool=args.pool).to_json())
    return EXIT_OK


def cmd_ablate(args):
    toggles = [t.strip() for t in args.toggles.split(",") if t.strip()]
    unknown = [t for t in toggles if t not in ABLATIONS]
    if unknown:
        raise UsageError(f"unknown toggles {unknown}; choose from {', '.join(ABLATIONS)}")
    config = _train_config(args)
    kg1, kg2, seeds = _load_data(args)
    split = split_seeds(seeds, _ratio(args.split), _seed(args))
    rows = run_ablation(config, toggles, kg1, kg2, split, args.direction)
    if args.json:
        _print_json(rows)
    else:
        print(format_table(rows))
    return EXIT_OK


def cmd_gradcheck(args):
    result = gradient_audit(seed=_seed(args), coords_per_param=args.coords)
    out = result.to_json()
    out["passed"] = result.passed()
    out["tolerance"] = AUDIT_TOL
    _print_json(out)
    return EXIT_OK if result.passed() else EXIT_NUMERIC


def cmd_dump_sequences(args):
    from .encoder import MoAlignEncoder

    config = _train_config(args).encoder_config
    kg1, kg2, _ = _load_data(args)
    kg = kg1 if args.kg == 1 else kg2
    view = MoAlignEncoder.for_kgs([kg1, kg2], config).view(kg)
    entities = args.entity or list(kg.entities)
    for e in entities:
        if e not in kg.index:
            raise DataError(f"unknown entity {e!r} in kg{args.kg}")
    seqs = [view.sequence(e) for e in entities]
    if args.out:
        dump_sequences(seqs, args.out)
    else:
        _print_json([s.to_json() for s in seqs])
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "dump-sequences": cmd_dump_sequences,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse usage errors and --help
        return exc.code
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"moalign: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericAbort as exc:
        print(f"moalign: numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        print(f"moalign: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
