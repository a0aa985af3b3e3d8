"""Hill climbing over network morphisms, baselines, and ensembling."""
from __future__ import annotations

import csv
import io
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .config import rng_stream, stream_seed
from .data import AugmentationPolicy, Dataset, DatasetSplit
from .graph import NetworkGraph, init_params
from .morph import apply_net_morphs, verify_preservation
from .train import TrainConfig, TrainingDiverged, epoch_budget, evaluate, sgdr_train

log = logging.getLogger(__name__)

HISTORY_FIELDS = ["step", "child", "morphisms", "val_acc", "params", "chosen",
                  "preservation_dev", "status"]


@dataclass
class SearchConfig:
    n_steps: int = 5
    n_neigh: int = 8
    n_nm: int = 5
    epoch_neigh: int = 17
    epoch_final: int = 100
    epoch_pretrain: int = 20
    lr_start: float = 0.05
    lr_end: float = 0.0
    seed: int = 0
    sgdr_enabled: bool = True
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 0.0
    augmentation: AugmentationPolicy = field(
        default_factory=lambda: AugmentationPolicy(enabled=False))
    max_channels: int | None = None
    calibration_size: int = 256

    def __post_init__(self):
        if self.n_steps < 0 or self.n_neigh < 1 or self.n_nm < 1:
            raise ValueError("need n_steps >= 0, n_neigh >= 1, n_nm >= 1")

    def train_config(self, epochs, seed, constant_lr=False):
        return TrainConfig(epochs=epochs, lr_start=self.lr_start,
                           lr_end=self.lr_start if constant_lr else self.lr_end,
                           batch_size=self.batch_size, momentum=self.momentum,
                           weight_decay=self.weight_decay, seed=seed,
                           augmentation=self.augmentation)

    @property
    def budget(self):
        return epoch_budget(self.n_steps, self.n_neigh, self.epoch_neigh,
                            self.epoch_final, self.epoch_pretrain)


@dataclass
class ChildRecord:
    step: int
    child: int
    morphisms: list
    val_acc: float
    params: int
    chosen: bool = False
    preservation_dev: float = 0.0
    status: str = "ok"

    def row(self):
        return [self.step, self.child, ";".join(self.morphisms) or "keep",
                "nan" if np.isnan(self.val_acc) else f"{self.val_acc:.6f}", self.params,
                int(self.chosen), f"{self.preservation_dev:.3e}", self.status]


@dataclass
class SearchState:
    model_best: NetworkGraph
    step: int = 0
    history: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    best_val: list = field(default_factory=list)

    def history_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for rec in self.history:
            w.writerow(rec.row())
        return buf.getvalue()


def _train_child(child, dataset, cfg, seed, constant_lr):
    try:
        sgdr_train(child, dataset.train, cfg.train_config(cfg.epoch_neigh, seed, constant_lr))
    except TrainingDiverged as exc:
        log.warning("child excluded: %s", exc)
        return float("nan"), "diverged"
    return evaluate(child, dataset.val)[1], "ok"


def _calibration(dataset, cfg, step, child):
    n = len(dataset.train)
    k = min(cfg.calibration_size, n)
    idx = np.sort(rng_stream(cfg.seed, "calib", step, child).choice(n, k, replace=False))
    return dataset.train.images[idx]


def hill_climb(model_0, cfg: SearchConfig, dataset: Dataset) -> SearchState:
    """The search loop without the final training; returns the state."""
    state = SearchState(model_best=model_0.clone())
    incumbent_acc = None
    for step in range(1, cfg.n_steps + 1):
        parent = state.model_best
        morphed = cfg.n_neigh - 1 if cfg.n_neigh > 1 else 1
        children, records = [], []
        for j in range(morphed):
            child, applied = apply_net_morphs(
                parent, cfg.n_nm, rng_stream(cfg.seed, "morph", step, j),
                calibration=_calibration(dataset, cfg, step, j), max_channels=cfg.max_channels)
            dev = verify_preservation(parent, child, n_samples=32,
                                      seed=stream_seed(cfg.seed, "verify", step, j)).max_abs_deviation
            acc, status = _train_child(child, dataset, cfg, stream_seed(cfg.seed, "train", step, j),
                                       constant_lr=not cfg.sgdr_enabled)
            children.append(child)
            records.append(ChildRecord(step, j, [str(m) for m in applied], acc,
                                       child.param_count(), preservation_dev=dev, status=status))
        if cfg.n_neigh > 1:
            j = cfg.n_neigh - 1
            keep = parent.clone()
            acc, status = _train_child(keep, dataset, cfg, stream_seed(cfg.seed, "train", step, j),
                                       constant_lr=not cfg.sgdr_enabled)
            children.append(keep)
            records.append(ChildRecord(step, j, [], acc, keep.param_count(), status=status))

        chosen = None
        if cfg.n_neigh > 1:
            # the incumbent wins ties, so scan it first and require strict improvement
            order = [len(children) - 1] + list(range(len(children) - 1))
        else:
            order = [0]
        for j in order:
            acc = records[j].val_acc
            if np.isnan(acc):
                continue
            if chosen is None or acc > records[chosen].val_acc:
                chosen = j
        if chosen is not None:
            records[chosen].chosen = True
            state.model_best = children[chosen]
            incumbent_acc = records[chosen].val_acc
        else:
            log.warning("step %d: every child diverged, keeping the current best", step)
        state.history.extend(records)
        state.snapshots.append(state.model_best.clone())
        state.best_val.append(incumbent_acc)
        state.step = step
        log.info("step %d: chose child %s (val_acc=%s, params=%d)", step, chosen,
                 incumbent_acc, state.model_best.param_count())
    return state


def final_training(model, cfg: SearchConfig, dataset: Dataset, seed=None, epochs=None):
    """Cosine cycle of ``epochs`` (default ``epoch_final``) on train+val; returns a new graph."""
    epochs = cfg.epoch_final if epochs is None else epochs
    final = model.clone()
    if epochs > 0:
        seed = stream_seed(cfg.seed, "final") if seed is None else seed
        sgdr_train(final, dataset.trainval, cfg.train_config(epochs, seed))
    return final


def nash(model_0, cfg: SearchConfig, dataset: Dataset):
    """Hill climbing followed by final training; returns ``(model, state)``."""
    state = hill_climb(model_0, cfg, dataset)
    return final_training(state.model_best, cfg, dataset), state


def random_baseline(model_0, cfg: SearchConfig, dataset: Dataset):
    """Random networks: one morphed lineage, no selection, then final training."""
    from dataclasses import replace

    return nash(model_0, replace(cfg, n_neigh=1), dataset)


def reinitialize(architecture: NetworkGraph, seed) -> NetworkGraph:
    g = architecture.clone()
    rng = np.random.default_rng(seed)
    for nid in sorted(g.nodes):
        init_params(g.nodes[nid], rng)
    return g


def retrain_from_scratch(architecture, total_epochs, dataset: Dataset, cfg: SearchConfig, seed=None):
    """Fresh random weights, then one cosine cycle of ``total_epochs`` on train+val."""
    seed = stream_seed(cfg.seed, "scratch") if seed is None else seed
    g = reinitialize(architecture, seed)
    if total_epochs > 0:
        sgdr_train(g, dataset.trainval, cfg.train_config(total_epochs, seed))
    return g


# -- ensembles -------------------------------------------------------------------

@dataclass
class Ensemble:
    members: list

    def __post_init__(self):
        if not self.members:
            raise ValueError("an ensemble needs at least one member")
        ref = self.members[0]
        spec = ref.nodes[ref.input_id].attrs
        outs = ref.shape_infer()[ref.output_id]
        for m in self.members[1:]:
            if m.nodes[m.input_id].attrs != spec or m.shape_infer()[m.output_id] != outs:
                raise ValueError("ensemble members disagree on input/output shapes")

    @property
    def weights(self):
        return np.full(len(self.members), 1.0 / len(self.members))


def ensemble_predict(ensemble: Ensemble, batch, batch_size=256):
    """Uniform average of the members' class probabilities."""
    total = None
    for m in ensemble.members:
        p = np.concatenate([m.forward(batch[i:i + batch_size]) for i in range(0, len(batch), batch_size)])
        total = p.astype(np.float64) if total is None else total + p
    return (total / len(ensemble.members)).astype(np.float32)


def ensemble_eval(ensemble: Ensemble, split: DatasetSplit):
    probs = ensemble_predict(ensemble, split.images)
    return float(np.mean(probs.argmax(axis=1) == split.labels))


def snapshot_finalize(state: SearchState, dataset: Dataset, epoch_final, cfg: SearchConfig):
    """Give every per-step snapshot its own final training, then ensemble them."""
    if not state.snapshots:
        raise ValueError("search state holds no snapshots")
    members = [final_training(s, cfg, dataset, seed=stream_seed(cfg.seed, "final", i + 1),
                              epochs=epoch_final)
               for i, s in enumerate(state.snapshots)]
    return Ensemble(members)


# -- run directory ---------------------------------------------------------------

def write_run(out_dir, config_text, state: SearchState, final_model: NetworkGraph):
    """Persist a search: config, history CSV, per-step best models, final model, manifest."""
    os.makedirs(os.path.join(out_dir, "steps"), exist_ok=True)
    with open(os.path.join(out_dir, "config.txt"), "w", newline="\n") as fh:
        fh.write(config_text)
    with open(os.path.join(out_dir, "history.csv"), "w", newline="") as fh:
        fh.write(state.history_csv())
    manifest = []
    for i, snap in enumerate(state.snapshots, 1):
        rel = os.path.join("steps", f"step_{i:02d}")
        snap.save(os.path.join(out_dir, rel))
        manifest.append(rel)
    final_model.save(os.path.join(out_dir, "final"))
    with open(os.path.join(out_dir, "ensemble.txt"), "w", newline="\n") as fh:
        fh.write("".join(f"{m}\n" for m in manifest))
    return out_dir


def read_manifest(path):
    base = os.path.dirname(os.path.abspath(path))
    with open(path) as fh:
        return [os.path.join(base, ln.strip()) for ln in fh if ln.strip()]
