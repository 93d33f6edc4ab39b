"""AdamW optimization, the multitask training loop, evaluation, grid search.

Task index order everywhere in this module (losses, alphas, lambdas) is
(emotion, country, age). Exit assignments keep their own named fields.
"""

import csv
import itertools
import json
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tape, Tensor, backward
from .data import Dataset, batches
from .errors import ConfigError, DomainError, StructuralError, TrainingAborted
from .metrics import MetricsReport, mae, mean_ccc, uar
from .net import MultiExitNet, NetConfig, build_net, forward_multi, parameter_count
from .weighting import (
    LossHistory,
    UncertaintyParams,
    WeightingConfig,
    combine,
    update_history,
    uses_uncertainty,
)

TASK_ORDER = ("emotion", "country", "age")


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 32
    epochs: int = 15
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    adam_epsilon: float = 1e-8
    crop_width: int = 64
    seed: int = 0
    weighting: WeightingConfig = field(default_factory=lambda: WeightingConfig("EW", 3))
    age_standardization: Optional[tuple] = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.adam_epsilon <= 0:
            raise ConfigError(f"adam_epsilon must be > 0, got {self.adam_epsilon}")
        if self.crop_width < 1:
            raise ConfigError(f"crop_width must be >= 1, got {self.crop_width}")
        b1, b2 = self.betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ConfigError(f"betas must lie in [0,1), got {self.betas}")
        if self.weighting.num_tasks != len(TASK_ORDER):
            raise ConfigError(
                f"this trainer wires {len(TASK_ORDER)} tasks; "
                f"weighting.num_tasks is {self.weighting.num_tasks}"
            )


def adamw_step(params, grads, state, hyper):
    """One AdamW update over aligned param/grad lists; mutates params and state.

    Decoupled decay runs first (p *= 1 - lr*wd), then the bias-corrected Adam
    move. hyper keys: lr, betas, eps, weight_decay, decay_mask (per-param
    bools; False exempts a parameter from decay). A None grad skips its
    parameter entirely, decay included.
    """
    if len(params) != len(grads):
        raise StructuralError(f"{len(params)} params but {len(grads)} grads")
    lr = hyper["lr"]
    b1, b2 = hyper["betas"]
    eps = hyper["eps"]
    wd = hyper["weight_decay"]
    mask = hyper.get("decay_mask") or [True] * len(params)
    if not state:
        state["step"] = 0
        state["m"] = [np.zeros_like(p.data) for p in params]
        state["v"] = [np.zeros_like(p.data) for p in params]
    state["step"] += 1
    t = state["step"]
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        g = np.asarray(g)
        if g.shape != p.data.shape:
            raise StructuralError(
                f"grad shape {g.shape} does not match param shape {p.data.shape}"
            )
        if wd and mask[i]:
            p.data *= 1.0 - lr * wd
        m = state["m"][i]
        v = state["v"][i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


class AdamW:
    def __init__(self, named_params, lr, betas, eps, weight_decay, no_decay=()):
        self.names = [n for n, _ in named_params]
        self.params = [t for _, t in named_params]
        self.hyper = {
            "lr": lr,
            "betas": tuple(betas),
            "eps": eps,
            "weight_decay": weight_decay,
            "decay_mask": [n not in no_decay for n in self.names],
        }
        self.state = {}

    def step(self):
        grads = [t.grad for t in self.params]
        adamw_step(self.params, grads, self.state, self.hyper)

    def zero_grad(self):
        for t in self.params:
            t.grad = None


def compute_age_standardization(dataset: Dataset):
    ages = dataset.split("train").age
    mean = float(ages.mean())
    std = float(ages.std())
    if std == 0.0:
        raise DomainError("age standardization impossible: train ages are constant")
    return (mean, std)


def task_losses(preds, batch, age_standardization):
    """(emotion MSE, country cross-entropy, standardized-age MSE) scalars."""
    emo = ad.mean_all(ad.square(ad.sub(preds["emotion"], Tensor(batch.emotions))))
    cou = ad.softmax_cross_entropy(preds["country_logits"], batch.country)
    mean, std = age_standardization
    target = ((batch.age - mean) / std)[:, None]
    age = ad.mean_all(ad.square(ad.sub(preds["age"], Tensor(target))))
    return emo, cou, age


@dataclass
class EpochRecord:
    epoch: int
    loss_emotion: float
    loss_country: float
    loss_age: float
    total_loss: float
    alphas: tuple
    lambdas: tuple
    restraint: float
    val: MetricsReport


@dataclass
class TrainingLog:
    strategy: str
    seed: int
    backend: str
    age_standardization: tuple
    records: list = field(default_factory=list)
    best_epoch: int = 0


def _hmean_key(report: MetricsReport) -> float:
    return -math.inf if math.isnan(report.h_mean) else report.h_mean


def _restraint_value(s_values, phi: float) -> float:
    return abs(phi - sum(abs(s) / 2.0 for s in s_values))


def evaluate(net: MultiExitNet, dataset: Dataset, split: str, config: TrainConfig) -> MetricsReport:
    """Deterministic center-crop pass; country by argmax; age back in years."""
    age_std = config.age_standardization or compute_age_standardization(dataset)
    mean, std = age_std
    emo_p, cou_p, age_p = [], [], []
    emo_g, cou_g, age_g = [], [], []
    for batch in batches(dataset, split, config.batch_size, config.seed,
                         config.crop_width):
        preds = forward_multi(net, Tensor(batch.x))
        emo_p.append(preds["emotion"].data)
        cou_p.append(preds["country_logits"].data.argmax(axis=1))
        age_p.append(preds["age"].data[:, 0] * std + mean)
        emo_g.append(batch.emotions)
        cou_g.append(batch.country)
        age_g.append(batch.age)
    return MetricsReport.from_components(
        mean_ccc(np.concatenate(emo_p), np.concatenate(emo_g)),
        uar(np.concatenate(cou_p), np.concatenate(cou_g), 4),
        mae(np.concatenate(age_p), np.concatenate(age_g)),
    )


def train(net: MultiExitNet, dataset: Dataset, config: TrainConfig):
    """Run the configured strategy; returns (TrainingLog, best parameter state).

    Best state is the epoch snapshot with the highest validation H-Mean
    (NaN counts as worst; earlier epoch wins ties).
    """
    wcfg = config.weighting
    if net.config.input_width != config.crop_width:
        raise ConfigError(
            f"net expects input width {net.config.input_width} but crop_width is "
            f"{config.crop_width}; build the net for the cropped width"
        )
    age_std = config.age_standardization or compute_age_standardization(dataset)
    config = replace(config, age_standardization=age_std)

    unc = UncertaintyParams(wcfg.num_tasks) if uses_uncertainty(wcfg.strategy) else None
    named = net.parameters()
    no_decay = set()
    if unc is not None:
        for i, s in enumerate(unc.s):
            name = f"uncertainty.s{i}"
            named = named + [(name, s)]
            no_decay.add(name)
    opt = AdamW(named, config.learning_rate, config.betas, config.adam_epsilon,
                config.weight_decay, no_decay)

    log = TrainingLog(strategy=wcfg.strategy, seed=config.seed,
                      backend=kernels.BACKEND, age_standardization=age_std)
    history = LossHistory()
    best_key = -math.inf
    best_state = net.state()
    best_epoch = 0

    for epoch in range(1, config.epochs + 1):
        sums = np.zeros(4)
        seen = 0
        lam_epoch = [1.0] * wcfg.num_tasks
        for bi, batch in enumerate(batches(dataset, "train", config.batch_size,
                                           config.seed, config.crop_width, epoch=epoch)):
            opt.zero_grad()
            tape = Tape()
            with tape:
                preds = forward_multi(net, Tensor(batch.x))
                losses = task_losses(preds, batch, age_std)
                total, lam_epoch = combine(losses, unc, history, wcfg)
            loss_values = [l.item() for l in losses]
            total_value = total.item()
            if not math.isfinite(total_value):
                tape.release()
                err = TrainingAborted(epoch, bi, loss_values)
                err.log = log
                raise err
            backward(total)
            opt.step()
            # conv workspaces on the tape are hundreds of MB per step; free
            # them now instead of waiting on the cycle collector
            tape.release()
            b = len(batch.country)
            sums += np.array(loss_values + [total_value]) * b
            seen += b

        means = sums / seen
        s_values = unc.values() if unc is not None else [0.0] * wcfg.num_tasks
        alphas = unc.alphas() if unc is not None else [1.0] * wcfg.num_tasks
        history = update_history(history, means[:3])
        val_report = evaluate(net, dataset, "val", config)
        log.records.append(EpochRecord(
            epoch=epoch,
            loss_emotion=means[0],
            loss_country=means[1],
            loss_age=means[2],
            total_loss=means[3],
            alphas=tuple(alphas),
            lambdas=tuple(lam_epoch),
            restraint=_restraint_value(s_values, wcfg.restraint_target),
            val=val_report,
        ))
        key = _hmean_key(val_report)
        # strict > keeps the earliest of tied epochs; the best_epoch == 0 arm
        # makes epoch 1 the fallback when every epoch is degenerate (NaN)
        if key > best_key or best_epoch == 0:
            best_key = key
            best_state = net.state()
            best_epoch = epoch

    log.best_epoch = best_epoch
    return log, best_state


LOG_COLUMNS = (
    ["epoch", "loss_emotion", "loss_country", "loss_age", "total_loss"]
    + [f"alpha_{t}" for t in TASK_ORDER]
    + [f"lambda_{t}" for t in TASK_ORDER]
    + ["restraint", "val_emo_ccc", "val_cou_uar", "val_age_mae", "val_h_mean"]
)


def write_log_csv(log: TrainingLog, path):
    # repr(float(x)) round-trips exactly and stays stable across runs
    def cell(v):
        return repr(float(v))

    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(LOG_COLUMNS)
        for r in log.records:
            writer.writerow(
                [r.epoch, cell(r.loss_emotion), cell(r.loss_country), cell(r.loss_age),
                 cell(r.total_loss)]
                + [cell(a) for a in r.alphas]
                + [cell(l) for l in r.lambdas]
                + [cell(r.restraint), cell(r.val.emo_ccc), cell(r.val.cou_uar),
                   cell(r.val.age_mae), cell(r.val.h_mean)]
            )


def summarize(log: TrainingLog, net: MultiExitNet, config: TrainConfig) -> dict:
    best = log.records[log.best_epoch - 1] if log.best_epoch else None
    final = log.records[-1] if log.records else None
    return {
        "strategy": log.strategy,
        "seed": log.seed,
        "backend": log.backend,
        "epochs": len(log.records),
        "best_epoch": log.best_epoch,
        "parameter_count": parameter_count(net),
        "age_standardization": list(log.age_standardization),
        "exit_assignment": list(net.config.exit_assignment.as_tuple()),
        "best_val": best.val.as_dict() if best else None,
        "final_val": final.val.as_dict() if final else None,
    }


@dataclass
class GridResult:
    assignment: tuple
    report: Optional[MetricsReport]
    status: str


def all_assignments(ordered_only: bool = False):
    out = []
    for a, c, e in itertools.product(range(1, 6), repeat=3):
        if ordered_only and not (a <= c <= e):
            continue
        out.append((a, c, e))
    return out


def grid_search_exits(dataset: Dataset, net_config: NetConfig, train_config: TrainConfig,
                      candidates=None, ordered_only: bool = False):
    """Train one net per exit assignment (shared seed); rank by validation H-Mean.

    Ties break toward the lexicographically smaller assignment. Failed trials
    keep their error in `status` and sort after every success. Returns
    (ranked results, best assignment).
    """
    if candidates is None:
        candidates = all_assignments(ordered_only)
    candidates = [
        cand.as_tuple() if hasattr(cand, "as_tuple") else tuple(int(v) for v in cand)
        for cand in candidates
    ]
    if not candidates:
        raise ConfigError("grid search needs at least one candidate assignment")

    results = []
    for cand in candidates:
        cfg = replace(net_config, exit_assignment=cand)
        try:
            trial_net = build_net(cfg, train_config.seed)
            trial_log, _ = train(trial_net, dataset, train_config)
            best_record = trial_log.records[trial_log.best_epoch - 1]
            results.append(GridResult(cand, best_record.val, "ok"))
        except (StructuralError, DomainError, ConfigError, TrainingAborted) as e:
            results.append(GridResult(cand, None, f"failed: {e}"))

    def rank_key(r: GridResult):
        if r.status != "ok":
            return (1, 0.0, r.assignment)
        return (0, -_hmean_key(r.report), r.assignment)

    results.sort(key=rank_key)
    if results[0].status != "ok":
        raise RuntimeError("every grid-search trial failed; see per-trial statuses")
    return results, results[0].assignment
