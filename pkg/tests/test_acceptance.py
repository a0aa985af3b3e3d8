"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The search-protocol criteria (5, 6, 7, 8, 10) share one experiment on the
synthetic grating task: 3 seeds, each with a hill-climbing arm (4 neighbours),
a random arm (1 neighbour) and a constant learning-rate hill-climbing arm.
Run it alone with ``pytest tests/test_acceptance.py -v``.
"""
import time
from dataclasses import replace

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from fd_oracle import primitive_gradchecks
from morphnas.cli import main as cli_main
from morphnas.config import rng_stream, stream_seed
from morphnas.data import make_initial_model, make_synthetic
from morphnas.graph import NetworkGraph
from morphnas.morph import apply_net_morphs, verify_preservation
from morphnas.search import (
    Ensemble, SearchConfig, ensemble_predict, nash, random_baseline, retrain_from_scratch,
    snapshot_finalize,
)
from morphnas.train import cosine_lr, epoch_budget, evaluate, sgdr_train

SEEDS = (0, 1, 2)
PRETRAIN_EPOCHS = 5


def record(num, title, passed, detail):
    ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] criterion {num:>2}: {title}: {detail}")
    print(ACCEPTANCE_LINES[-1])
    assert passed, detail


def protocol_config(seed, **kw):
    cfg = SearchConfig(n_steps=3, n_neigh=4, n_nm=5, epoch_neigh=3, epoch_final=10,
                       epoch_pretrain=PRETRAIN_EPOCHS, seed=seed, max_channels=32,
                       calibration_size=256)
    return replace(cfg, **kw)


def protocol_data(seed):
    return make_synthetic(n_per_class=100, image_size=16, seed=stream_seed(seed, "data"),
                          val_per_class=50, test_per_class=100)


def pretrained_model(seed, data, channels=8):
    g = make_initial_model((3, 16, 16), channels=channels, seed=stream_seed(seed, "init"))
    cfg = protocol_config(seed)
    sgdr_train(g, data.train, cfg.train_config(PRETRAIN_EPOCHS, stream_seed(seed, "pretrain")))
    return g


@pytest.fixture(scope="module")
def experiment():
    t0 = time.perf_counter()
    runs = []
    for seed in SEEDS:
        data = protocol_data(seed)
        model_0 = pretrained_model(seed, data)
        cfg = protocol_config(seed)
        hill, hill_state = nash(model_0, cfg, data)
        rand, rand_state = random_baseline(model_0, cfg, data)
        const, const_state = nash(model_0, protocol_config(seed, sgdr_enabled=False), data)
        scratch = retrain_from_scratch(hill, cfg.budget.lineage, data, cfg)
        snap = snapshot_finalize(hill_state, data, cfg.epoch_final, cfg)
        runs.append(dict(seed=seed, data=data, model_0=model_0, hill=hill, hill_state=hill_state,
                         rand=rand, rand_state=rand_state, const=const, const_state=const_state,
                         scratch=scratch, snapshot=snap))
    return runs, time.perf_counter() - t0


def error_rate(g, data):
    return 1.0 - evaluate(g, data.test)[1]


# -- criteria ---------------------------------------------------------------------

def test_criterion_01_function_preservation():
    t0 = time.perf_counter()
    data = make_synthetic(n_per_class=100, image_size=16, seed=0, val_per_class=20, test_per_class=20)
    base = make_initial_model((3, 16, 16), channels=16, seed=0)
    sgdr_train(base, data.train, protocol_config(0).train_config(2, 0))
    worst, failures = 0.0, 0
    for trial in range(100):
        after, _ = apply_net_morphs(base, 5, rng_stream(0, "morph", 99, trial),
                                    calibration=data.train.images[:256])
        dev = max(verify_preservation(base, after, n_samples=64, seed=trial).max_abs_deviation,
                  verify_preservation(base, after, inputs=data.val.images[:64]).max_abs_deviation)
        worst = max(worst, dev)
        failures += dev > 1e-4
    secs = time.perf_counter() - t0
    record(1, "function preservation", failures == 0 and secs <= 600,
           f"100 trials of 5 morphisms, worst deviation {worst:.2e} (tol 1e-4), "
           f"{failures} failures, {secs:.0f}s (limit 600s)")


def test_criterion_02_gradients():
    t0 = time.perf_counter()
    worst, where = 0.0, None
    for seed in range(25):
        for name, err in primitive_gradchecks(seed).items():
            if err > worst:
                worst, where = err, (name, seed)
    secs = time.perf_counter() - t0
    record(2, "finite-difference gradients", worst <= 1e-3 and secs <= 300,
           f"12 primitives x 25 random shapes, worst rel. error {worst:.2e} at {where} "
           f"(tol 1e-3), {secs:.1f}s")


def test_criterion_03_cosine_schedule():
    vals = (cosine_lr(0, 100, 0.05, 0.0), cosine_lr(100, 100, 0.05, 0.0), cosine_lr(50, 100, 0.05, 0.0))
    ok = abs(vals[0] - 0.05) <= 1e-15 and vals[1] == 0.0 and abs(vals[2] - 0.025) <= 1e-15
    record(3, "cosine schedule", ok, f"lr(0)={vals[0]!r} lr(T)={vals[1]!r} lr(T/2)={vals[2]!r}")


def test_criterion_04_epoch_budget():
    b = epoch_budget(n_steps=5, n_neigh=8, epoch_neigh=17, epoch_final=100, epoch_pretrain=20)
    record(4, "epoch accounting", b.lineage == 205,
           f"20 + 17*5 + 100 = {b.lineage} (all neighbours: {b.total})")


def test_criterion_05_hill_climbing_beats_random(experiment):
    runs, secs = experiment
    hill_err = [error_rate(r["hill"], r["data"]) for r in runs]
    rand_err = [error_rate(r["rand"], r["data"]) for r in runs]
    hill_p = [r["hill"].param_count() for r in runs]
    rand_p = [r["rand"].param_count() for r in runs]
    ok = np.mean(hill_err) <= np.mean(rand_err) and np.mean(hill_p) >= np.mean(rand_p) and secs <= 7200
    record(5, "hill climbing vs random", ok,
           f"test error {np.mean(hill_err):.3f}+-{np.std(hill_err):.3f} vs {np.mean(rand_err):.3f}"
           f"+-{np.std(rand_err):.3f}; params {np.mean(hill_p):.0f} vs {np.mean(rand_p):.0f}; "
           f"experiment {secs:.0f}s (limit 7200s)")


def test_criterion_06_sgdr_ablation(experiment):
    runs, _ = experiment
    sgdr = [error_rate(r["hill"], r["data"]) for r in runs]
    const = [error_rate(r["const"], r["data"]) for r in runs]
    record(6, "SGDR vs constant LR", np.mean(const) >= np.mean(sgdr),
           f"constant-LR test error {np.mean(const):.3f} vs SGDR {np.mean(sgdr):.3f}")


def test_criterion_07_weight_inheritance(experiment):
    runs, _ = experiment
    gaps = [abs(error_rate(r["scratch"], r["data"]) - error_rate(r["hill"], r["data"])) for r in runs]
    close = sum(g <= 0.03 for g in gaps)
    record(7, "weight inheritance vs scratch", close >= 2,
           f"|scratch - inherited| test error per seed: {', '.join(f'{g * 100:.1f}pp' for g in gaps)} "
           f"({close}/3 within 3pp)")


def test_criterion_08_ensembles(experiment):
    runs, _ = experiment
    r0 = runs[0]
    x = r0["data"].test.images
    one = ensemble_predict(Ensemble([r0["hill"]]), x)
    identical = all(np.array_equal(one, ensemble_predict(Ensemble([r0["hill"]] * k), x))
                    for k in (2, 3, 5))
    wins, parts = 0, []
    for r in runs:
        ens = r["snapshot"]
        test = r["data"].test
        ens_err = 1.0 - float(np.mean(ensemble_predict(ens, test.images).argmax(1) == test.labels))
        member = np.mean([error_rate(m, r["data"]) for m in ens.members])
        wins += ens_err <= member
        parts.append(f"seed {r['seed']}: {ens_err:.3f} vs {member:.3f}")
    record(8, "ensembling", identical,
           f"k identical members bit-identical: {identical}; snapshot ensemble vs mean member "
           f"test error ({wins}/3 seeds ensemble <= members, reported only): {'; '.join(parts)}")


CLI_CONFIG = """\
n_steps = 2
n_neigh = 3
n_nm = 3
epoch_neigh = 1
epoch_final = 2
epoch_pretrain = 2
max_channels = 16
synthetic_per_class = 40
synthetic_val_per_class = 10
synthetic_test_per_class = 10
init_channels = 8
"""


def test_criterion_09_determinism(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(CLI_CONFIG)
    for name in ("a", "b"):
        assert cli_main(["search", "--config", str(cfg), "--seed", "7", "--out", str(tmp_path / name)]) == 0
    same = {f: (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
            for f in ("history.csv", "final.nmg", "final.nmt")}
    record(9, "determinism", all(same.values()),
           "two CLI search runs, byte-identical: " + ", ".join(f"{k}={v}" for k, v in same.items()))


def test_criterion_10_serialization(experiment):
    runs, _ = experiment
    probe = np.random.default_rng(2024).standard_normal((32, 3, 16, 16)).astype(np.float32)
    models = []
    for r in runs:
        models += [r["model_0"], r["hill"], r["rand"], r["const"], r["scratch"]]
        for key in ("hill_state", "rand_state", "const_state"):
            models += r[key].snapshots
        models += r["snapshot"].members
    bad = 0
    for g in models:
        back = NetworkGraph.deserialize(*g.serialize())
        bad += not np.array_equal(g.forward(probe), back.forward(probe))
    record(10, "serialization round trip", bad == 0,
           f"{len(models) - bad}/{len(models)} models give bit-identical outputs after a round trip")
