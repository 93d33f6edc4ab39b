"""Optimizer math, the training loop, evaluation, logging, and grid search."""

import csv
import math
from dataclasses import replace
from types import SimpleNamespace

import numpy as np
import pytest

from mtlkit.autodiff import Tensor
from mtlkit.data import Batch
from mtlkit.errors import ConfigError, DomainError, StructuralError
from mtlkit.metrics import MetricsReport
from mtlkit.net import ExitAssignment, NetConfig, build_net, forward_multi, parameter_count
from mtlkit.training import (
    LOG_COLUMNS,
    AdamW,
    TrainConfig,
    TrainingAborted,
    adamw_step,
    all_assignments,
    compute_age_standardization,
    evaluate,
    grid_search_exits,
    summarize,
    task_losses,
    train,
    write_log_csv,
)
from mtlkit.weighting import WeightingConfig

TINY_NET = dict(
    input_height=32,
    input_width=32,
    block_channel_widths=(4, 4, 4, 4, 4),
    head_hidden=8,
)


def tiny_train_config(**over):
    base = dict(epochs=2, batch_size=16, crop_width=32, seed=0,
                weighting=WeightingConfig("EW", 3))
    base.update(over)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def ew_run(tiny_dataset):
    net = build_net(NetConfig(**TINY_NET), seed=0)
    cfg = tiny_train_config()
    log, best_state = train(net, tiny_dataset, cfg)
    return SimpleNamespace(net=net, cfg=cfg, log=log, best_state=best_state)


# -------------------------------------------------------------------- optimizer

def _hyper(**over):
    h = dict(lr=0.1, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)
    h.update(over)
    return h


def test_adamw_first_step_hand_value():
    p = Tensor([1.0])
    state = adamw_step([p], [np.array([1.0])], {}, _hyper())
    # bias correction makes the first step exactly lr / (1 + eps)
    assert p.data[0] == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), rel=1e-14)
    assert state["step"] == 1
    assert state["m"][0][0] == pytest.approx(0.1, rel=1e-14)
    assert state["v"][0][0] == pytest.approx(0.001, rel=1e-12)


def test_adamw_constant_gradient_steps_at_learning_rate():
    p = Tensor([5.0])
    state = {}
    for _ in range(3):
        adamw_step([p], [np.array([2.0])], state, _hyper())
    # mhat/sqrt(vhat) stays 1 for a constant gradient, so each step is ~lr
    assert p.data[0] == pytest.approx(5.0 - 3 * 0.1, rel=1e-9)


def test_adamw_decay_is_decoupled_from_gradient():
    p = Tensor([2.0])
    adamw_step([p], [np.array([0.0])], {}, _hyper(weight_decay=0.01))
    assert p.data[0] == 2.0 * (1.0 - 0.1 * 0.01)  # pure multiplicative shrink
    q = Tensor([2.0])
    adamw_step([q], [np.array([0.0])], {}, _hyper())
    assert q.data[0] == 2.0  # no decay, zero grad: untouched


def test_adamw_decay_mask_exempts_parameters():
    p, q = Tensor([1.0]), Tensor([1.0])
    adamw_step(
        [p, q],
        [np.array([0.0]), np.array([0.0])],
        {},
        _hyper(weight_decay=0.5, decay_mask=[True, False]),
    )
    assert p.data[0] == 1.0 - 0.1 * 0.5
    assert q.data[0] == 1.0


def test_adamw_none_gradient_skips_parameter_entirely():
    p = Tensor([3.0])
    state = adamw_step([p], [None], {}, _hyper(weight_decay=0.5))
    assert p.data[0] == 3.0  # not even decayed
    assert state["step"] == 1


def test_adamw_rejects_mismatches():
    p = Tensor([1.0, 2.0])
    with pytest.raises(StructuralError):
        adamw_step([p], [np.zeros(3)], {}, _hyper())
    with pytest.raises(StructuralError):
        adamw_step([p], [], {}, _hyper())


def test_adamw_wrapper_uses_tensor_grads():
    a = Tensor([1.0], requires_grad=True)
    b = Tensor([1.0], requires_grad=True)
    opt = AdamW([("a", a), ("b", b)], lr=0.1, betas=(0.9, 0.999), eps=1e-8,
                weight_decay=0.0, no_decay={"b"})
    a.grad = np.array([1.0])
    b.grad = None
    opt.step()
    assert a.data[0] == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), rel=1e-14)
    assert b.data[0] == 1.0
    opt.zero_grad()
    assert a.grad is None and b.grad is None


# ------------------------------------------------------------------ task losses

def _perfect_batch():
    rng = np.random.default_rng(6)
    emotions = rng.uniform(0.2, 0.8, (4, 10))
    country = np.array([0, 1, 2, 3])
    age = np.array([25.0, 30.0, 35.0, 28.0])
    return Batch(x=np.zeros((4, 1, 8, 8)), emotions=emotions, country=country, age=age)


def test_task_losses_zero_at_perfect_predictions():
    batch = _perfect_batch()
    std = (30.0, 5.0)
    logits = np.full((4, 4), -30.0)
    logits[np.arange(4), batch.country] = 30.0
    preds = {
        "emotion": Tensor(batch.emotions),
        "country_logits": Tensor(logits),
        "age": Tensor(((batch.age - std[0]) / std[1])[:, None]),
    }
    emo, cou, age = task_losses(preds, batch, std)
    assert emo.item() == 0.0
    assert age.item() == 0.0
    assert cou.item() == pytest.approx(0.0, abs=1e-9)


def test_task_losses_quantify_errors():
    batch = _perfect_batch()
    std = (30.0, 5.0)
    preds = {
        "emotion": Tensor(batch.emotions + 0.5),
        "country_logits": Tensor(np.zeros((4, 4))),
        "age": Tensor(((batch.age - std[0]) / std[1])[:, None] + 1.0),
    }
    emo, cou, age = task_losses(preds, batch, std)
    assert emo.item() == pytest.approx(0.25, rel=1e-14)
    assert cou.item() == pytest.approx(math.log(4.0), rel=1e-14)
    assert age.item() == pytest.approx(1.0, rel=1e-14)


def test_age_standardization_from_train_split(tiny_dataset):
    mean, std = compute_age_standardization(tiny_dataset)
    ages = tiny_dataset.split("train").age
    assert mean == pytest.approx(float(ages.mean()), abs=1e-15)
    assert std == pytest.approx(float(ages.std()), abs=1e-15)


def test_age_standardization_rejects_constant_ages():
    stub = SimpleNamespace(split=lambda name: SimpleNamespace(age=np.full(5, 30.0)))
    with pytest.raises(DomainError):
        compute_age_standardization(stub)


# ---------------------------------------------------------------- training loop

def test_train_produces_complete_log(ew_run):
    log = ew_run.log
    assert [r.epoch for r in log.records] == [1, 2]
    assert log.strategy == "EW" and log.seed == 0
    assert log.backend in ("python", "cython")
    assert log.best_epoch in (1, 2)
    for r in log.records:
        assert r.alphas == (1.0, 1.0, 1.0)  # EW never moves uncertainty
        assert r.lambdas == (1.0, 1.0, 1.0)
        assert r.restraint == 1.0  # |phi - 0| at s = 0
        assert all(math.isfinite(v) for v in (r.loss_emotion, r.loss_country,
                                              r.loss_age, r.total_loss))
        assert isinstance(r.val, MetricsReport)


def test_train_best_state_reproduces_best_val(ew_run, tiny_dataset):
    log = ew_run.log
    fresh = build_net(NetConfig(**TINY_NET), seed=99)
    fresh.load_state(ew_run.best_state)
    cfg = replace(ew_run.cfg, age_standardization=log.age_standardization)
    report = evaluate(fresh, tiny_dataset, "val", cfg)
    best = log.records[log.best_epoch - 1].val
    assert report.h_mean == best.h_mean
    assert report.age_mae == best.age_mae


def test_train_moves_uncertainty_for_uw(tiny_dataset):
    net = build_net(NetConfig(**TINY_NET), seed=1)
    log, _ = train(net, tiny_dataset, tiny_train_config(
        weighting=WeightingConfig("UW", 3), seed=1))
    assert log.strategy == "UW"
    final = log.records[-1].alphas
    assert any(a != 1.0 for a in final)
    assert all(a > 0 for a in final)


def test_train_rejects_net_crop_width_mismatch(tiny_dataset):
    net = build_net(NetConfig(**{**TINY_NET, "input_width": 64}), seed=0)
    with pytest.raises(ConfigError, match="crop_width"):
        train(net, tiny_dataset, tiny_train_config())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_aborts_on_divergence_with_partial_log(tiny_dataset):
    net = build_net(NetConfig(**TINY_NET), seed=0)
    with pytest.raises(TrainingAborted) as exc:
        train(net, tiny_dataset, tiny_train_config(epochs=5, learning_rate=1e9))
    err = exc.value
    assert err.epoch >= 1 and err.batch_index >= 0
    assert len(err.log.records) == err.epoch - 1  # completed epochs only
    assert len(err.task_losses) == 3


# ------------------------------------------------------------------- evaluation

def test_evaluate_is_deterministic(ew_run, tiny_dataset):
    a = evaluate(ew_run.net, tiny_dataset, "val", ew_run.cfg)
    b = evaluate(ew_run.net, tiny_dataset, "val", ew_run.cfg)
    assert a == b


def test_evaluate_ignores_seed_on_val_split(ew_run, tiny_dataset):
    a = evaluate(ew_run.net, tiny_dataset, "val", replace(ew_run.cfg, seed=1))
    b = evaluate(ew_run.net, tiny_dataset, "val", replace(ew_run.cfg, seed=2))
    assert a == b


def test_evaluate_works_on_test_split(ew_run, tiny_dataset):
    r = evaluate(ew_run.net, tiny_dataset, "test", ew_run.cfg)
    assert math.isfinite(r.age_mae) and r.age_mae > 0


# ---------------------------------------------------------------------- logging

def test_log_csv_layout_and_values(ew_run, tmp_path):
    path = tmp_path / "log.csv"
    write_log_csv(ew_run.log, path)
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == LOG_COLUMNS
    assert len(rows) == 1 + len(ew_run.log.records)
    for row, rec in zip(rows[1:], ew_run.log.records):
        assert int(row[0]) == rec.epoch
        assert float(row[LOG_COLUMNS.index("total_loss")]) == rec.total_loss
        got_h = float(row[LOG_COLUMNS.index("val_h_mean")])
        if math.isnan(rec.val.h_mean):
            assert math.isnan(got_h)
        else:
            assert got_h == rec.val.h_mean


def test_summary_contents(ew_run):
    s = summarize(ew_run.log, ew_run.net, ew_run.cfg)
    assert s["strategy"] == "EW" and s["seed"] == 0
    assert s["epochs"] == 2 and s["best_epoch"] == ew_run.log.best_epoch
    assert s["parameter_count"] == parameter_count(ew_run.net)
    assert s["exit_assignment"] == [1, 3, 5]
    assert len(s["age_standardization"]) == 2
    best = ew_run.log.records[ew_run.log.best_epoch - 1].val
    assert s["best_val"]["h_mean"] == best.as_dict()["h_mean"]
    assert s["final_val"]["age_mae"] == ew_run.log.records[-1].val.age_mae


# ------------------------------------------------------------------ grid search

def test_all_assignments_counts_and_order_constraint():
    full = all_assignments()
    ordered = all_assignments(ordered_only=True)
    assert len(full) == 125
    assert len(ordered) == 35
    assert all(a <= c <= e for (a, c, e) in ordered)
    assert set(ordered) <= set(full)


def test_grid_search_ranks_and_returns_best(tiny_dataset):
    results, best = grid_search_exits(
        tiny_dataset,
        NetConfig(**TINY_NET),
        tiny_train_config(epochs=1, batch_size=32),
        candidates=[(1, 1, 1), ExitAssignment(2, 2, 2)],
    )
    assert len(results) == 2
    assert {r.assignment for r in results} == {(1, 1, 1), (2, 2, 2)}
    assert all(r.status == "ok" for r in results)
    assert best == results[0].assignment
    keys = [(-r.report.h_mean if not math.isnan(r.report.h_mean) else math.inf,
             r.assignment) for r in results]
    assert keys == sorted(keys)


def test_grid_search_rejects_empty_candidates(tiny_dataset):
    with pytest.raises(ConfigError):
        grid_search_exits(tiny_dataset, NetConfig(**TINY_NET),
                          tiny_train_config(), candidates=[])


# ----------------------------------------------------------------- train config

def test_train_config_defaults_and_validation():
    cfg = TrainConfig()
    assert cfg.learning_rate == 0.001
    assert cfg.batch_size == 32
    assert cfg.epochs == 15
    assert cfg.weight_decay == 0.01
    assert cfg.betas == (0.9, 0.999)
    assert cfg.crop_width == 64
    assert cfg.weighting.strategy == "EW"
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
