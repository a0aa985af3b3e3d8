"""Command line: ``morphnas <subcommand> --config FILE [--seed N] [--out DIR]``."""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import kernels
from .config import ConfigError, RunConfig, load_config, rng_stream, stream_seed
from .data import AugmentationPolicy, DataError, load_cifar10, make_initial_model, make_synthetic, prepare
from .graph import GraphError, GraphFormatError, NetworkGraph
from .morph import MorphismError, apply_net_morphs, verify_preservation
from .search import (
    Ensemble, SearchConfig, ensemble_eval, final_training, nash, random_baseline, read_manifest,
    retrain_from_scratch, write_run,
)
from .train import TrainingDiverged, evaluate, sgdr_train

log = logging.getLogger("morphnas")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_DATA, EXIT_MODEL, EXIT_DIVERGED, EXIT_PRESERVATION = range(7)


class PreservationFailure(RuntimeError):
    pass


_CATEGORIES = [
    (ConfigError, "config", EXIT_CONFIG),
    (DataError, "data", EXIT_DATA),
    (FileNotFoundError, "io", EXIT_DATA),
    (GraphFormatError, "model-format", EXIT_MODEL),
    (GraphError, "model", EXIT_MODEL),
    (MorphismError, "morphism", EXIT_MODEL),
    (TrainingDiverged, "diverged", EXIT_DIVERGED),
    (PreservationFailure, "preservation", EXIT_PRESERVATION),
]


# -- config plumbing -------------------------------------------------------------

def search_config(rc: RunConfig) -> SearchConfig:
    # flips change a grating's orientation, i.e. its class
    aug = rc.aug_enabled and rc.dataset != "synthetic"
    return SearchConfig(
        n_steps=rc.n_steps, n_neigh=rc.n_neigh, n_nm=rc.n_nm, epoch_neigh=rc.epoch_neigh,
        epoch_final=rc.epoch_final, epoch_pretrain=rc.epoch_pretrain, lr_start=rc.lr_start,
        lr_end=rc.lr_end, seed=rc.seed, sgdr_enabled=rc.sgdr_enabled, batch_size=rc.batch_size,
        momentum=rc.momentum, weight_decay=rc.weight_decay,
        augmentation=AugmentationPolicy(pad=rc.aug_pad, horizontal_flip_prob=rc.aug_flip_prob,
                                        enabled=aug),
        max_channels=rc.max_channels, calibration_size=rc.calibration_size,
    )


def build_dataset(rc: RunConfig):
    data_seed = stream_seed(rc.seed, "data")
    if rc.dataset == "synthetic":
        return make_synthetic(rc.num_classes, rc.synthetic_per_class, rc.image_size, data_seed,
                              noise=rc.synthetic_noise, val_per_class=rc.synthetic_val_per_class,
                              test_per_class=rc.synthetic_test_per_class)
    train, test = load_cifar10(rc.data_dir)
    return prepare(train, test, rc.val_size, seed=data_seed)


def input_shape(rc: RunConfig):
    return (3, 32, 32) if rc.dataset == "cifar10" else (3, rc.image_size, rc.image_size)


def initial_model(rc: RunConfig):
    return make_initial_model(input_shape(rc), rc.num_classes, rc.init_channels,
                              seed=stream_seed(rc.seed, "init"))


def pretrain(model, rc: RunConfig, dataset):
    cfg = search_config(rc)
    if rc.epoch_pretrain == 0:
        return model, None
    _, report = sgdr_train(model, dataset.train,
                           replace(cfg.train_config(rc.epoch_pretrain, stream_seed(rc.seed, "pretrain")),
                                   track_val=True), dataset.val)
    return model, report


def _write(path, text):
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _start_model(args, rc, dataset):
    if getattr(args, "model", None):
        return NetworkGraph.load(args.model)
    model, report = pretrain(initial_model(rc), rc, dataset)
    if report is not None:
        _write(os.path.join(args.out, "pretrain.csv"), report.to_csv())
    return model


def _eval_line(name, model, dataset):
    vl, va = evaluate(model, dataset.val)
    tl, ta = evaluate(model, dataset.test)
    return (f"{name}: val_loss={vl:.4f} val_acc={va:.4f} test_loss={tl:.4f} "
            f"test_acc={ta:.4f} params={model.param_count()}")


# -- subcommands ------------------------------------------------------------------

def cmd_pretrain(args, rc):
    dataset = build_dataset(rc)
    model, report = pretrain(initial_model(rc), rc, dataset)
    model.save(os.path.join(args.out, "pretrained"))
    if report is not None:
        _write(os.path.join(args.out, "pretrain.csv"), report.to_csv())
    print(_eval_line("pretrained", model, dataset))


def _run_search(args, rc, baseline):
    dataset = build_dataset(rc)
    model_0 = _start_model(args, rc, dataset)
    cfg = search_config(rc)
    final, state = (random_baseline if baseline else nash)(model_0, cfg, dataset)
    write_run(args.out, rc.to_text(), state, final)
    lines = [f"steps={state.step} children_trained={len(state.history)} "
             f"epochs(total={cfg.budget.total}, lineage={cfg.budget.lineage})"]
    for i, acc in enumerate(state.best_val, 1):
        lines.append(f"step {i}: best val_acc={acc} params={state.snapshots[i - 1].param_count()}")
    lines.append(_eval_line("final", final, dataset))
    text = "\n".join(lines) + "\n"
    _write(os.path.join(args.out, "summary.txt"), text)
    print(text, end="")


def cmd_search(args, rc):
    _run_search(args, rc, baseline=False)


def cmd_random_baseline(args, rc):
    _run_search(args, rc, baseline=True)


def cmd_train_final(args, rc):
    dataset = build_dataset(rc)
    model = NetworkGraph.load(args.model)
    epochs = rc.epoch_final if args.epochs is None else args.epochs
    final = final_training(model, search_config(rc), dataset, epochs=epochs)
    final.save(os.path.join(args.out, "final"))
    print(_eval_line("final", final, dataset))


def cmd_retrain_scratch(args, rc):
    dataset = build_dataset(rc)
    model = NetworkGraph.load(args.model)
    cfg = search_config(rc)
    epochs = cfg.budget.lineage if args.epochs is None else args.epochs
    scratch = retrain_from_scratch(model, epochs, dataset, cfg)
    scratch.save(os.path.join(args.out, "scratch"))
    print(f"retrained from scratch for {epochs} epochs")
    print(_eval_line("inherited", model, dataset))
    print(_eval_line("scratch", scratch, dataset))


def cmd_ensemble(args, rc):
    dataset = build_dataset(rc)
    paths = list(args.models or [])
    if args.manifest:
        paths += read_manifest(args.manifest)
    if not paths:
        raise ConfigError("ensemble needs --models or --manifest")
    members = [NetworkGraph.load(p) for p in paths]
    cfg = search_config(rc)
    if args.finalize:
        members = [final_training(m, cfg, dataset, seed=stream_seed(rc.seed, "final", i + 1))
                   for i, m in enumerate(members)]
        for i, m in enumerate(members, 1):
            m.save(os.path.join(args.out, f"member_{i:02d}"))
    ens = Ensemble(members)
    rows = [["member", "params", "val_acc", "test_acc"]]
    for p, m in zip(paths, members):
        rows.append([os.path.basename(p), m.param_count(), f"{evaluate(m, dataset.val)[1]:.6f}",
                     f"{evaluate(m, dataset.test)[1]:.6f}"])
    rows.append(["ensemble", sum(m.param_count() for m in members),
                 f"{ensemble_eval(ens, dataset.val):.6f}", f"{ensemble_eval(ens, dataset.test):.6f}"])
    with open(os.path.join(args.out, "ensemble.csv"), "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
    for r in rows:
        print(",".join(map(str, r)))


def cmd_eval(args, rc):
    dataset = build_dataset(rc)
    print(_eval_line(os.path.basename(args.model), NetworkGraph.load(args.model), dataset))


def cmd_inspect(args, rc):
    print(NetworkGraph.load(args.model).summary())


def cmd_verify_morphisms(args, rc):
    dataset = build_dataset(rc)
    base = NetworkGraph.load(args.model) if args.model else _start_model(args, rc, dataset)
    rows, failed = [], 0
    probe = dataset.val.images[: args.samples]
    for s in range(args.seeds):
        after, applied = apply_net_morphs(
            base, rc.n_nm, rng_stream(rc.seed, "morph", 0, s),
            calibration=dataset.train.images[: rc.calibration_size], max_channels=rc.max_channels)
        rep_data = verify_preservation(base, after, tolerance=args.tolerance, inputs=probe)
        rep_rand = verify_preservation(base, after, n_samples=args.samples, tolerance=args.tolerance,
                                       seed=stream_seed(rc.seed, "verify", s))
        dev = max(rep_data.max_abs_deviation, rep_rand.max_abs_deviation)
        ok = rep_data.passed and rep_rand.passed
        failed += not ok
        rows.append([s, ";".join(map(str, applied)), f"{dev:.6e}", "pass" if ok else "FAIL"])
    with open(os.path.join(args.out, "preservation.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "morphisms", "max_abs_deviation", "result"])
        w.writerows(rows)
    worst = max(float(r[2]) for r in rows)
    print(f"{args.seeds - failed}/{args.seeds} morphism sequences preserved the function "
          f"(n_nm={rc.n_nm}, tolerance={args.tolerance:g}, worst deviation={worst:.3e})")
    print("PASS" if not failed else "FAIL")
    if failed:
        raise PreservationFailure(f"{failed} sequences exceeded tolerance {args.tolerance:g}")


# -- entry point -------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="morphnas", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s (kernels: {kernels.BACKEND})")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(fn=fn)
        return sp

    add("pretrain", cmd_pretrain, "train the initial model for epoch_pretrain epochs")
    for name, fn, h in (("search", cmd_search, "hill-climbing architecture search"),
                        ("random-baseline", cmd_random_baseline, "random networks (no selection)")):
        add(name, fn, h).add_argument("--model", help="start model prefix (default: pretrain one)")
    sp = add("train-final", cmd_train_final, "final training on train+val")
    sp.add_argument("--model", required=True)
    sp.add_argument("--epochs", type=int)
    sp = add("retrain-scratch", cmd_retrain_scratch, "re-initialize and retrain an architecture")
    sp.add_argument("--model", required=True)
    sp.add_argument("--epochs", type=int, help="default: lineage epoch budget")
    sp = add("ensemble", cmd_ensemble, "uniform-probability ensemble of saved models")
    sp.add_argument("--models", nargs="*")
    sp.add_argument("--manifest", help="ensemble.txt written by search")
    sp.add_argument("--finalize", action="store_true", help="train members on train+val first")
    add("eval", cmd_eval, "evaluate a model").add_argument("--model", required=True)
    add("inspect", cmd_inspect, "print nodes, shapes, parameter count").add_argument("--model", required=True)
    sp = add("verify-morphisms", cmd_verify_morphisms, "function-preservation property check")
    sp.add_argument("--seeds", type=int, default=100)
    sp.add_argument("--tolerance", type=float, default=1e-4)
    sp.add_argument("--samples", type=int, default=64)
    sp.add_argument("--model", help="base model prefix (default: pretrain one)")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = load_config(args.config) if args.config else RunConfig()
        if args.seed is not None:
            rc = rc.replace(seed=args.seed)
        os.makedirs(args.out, exist_ok=True)
        args.fn(args, rc)
    except Exception as exc:
        for typ, category, code in _CATEGORIES:
            if isinstance(exc, typ):
                print(f"morphnas: error[{category}]: {exc}", file=sys.stderr)
                return code
        print(f"morphnas: error[internal]: {exc!r}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
