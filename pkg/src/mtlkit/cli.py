"""Batch experiment front door.

Subcommands: gen-data, train, grid-search, evaluate, report. Configuration
is one JSON document per experiment; unknown keys are rejected so typos fail
fast. Exit codes: 0 success, 2 config validation, 3 I/O, 4 numerical abort.
"""

import argparse
import json
import sys
from dataclasses import fields as dc_fields
from pathlib import Path

from .data import GenConfig, generate_synthetic, load_dataset
from .errors import ConfigError, DomainError, LoadError, StructuralError, TrainingAborted
from .metrics import MetricsReport, hmean
from .net import NetConfig, build_net, load_checkpoint, save_checkpoint
from .training import (
    TrainConfig,
    evaluate,
    grid_search_exits,
    summarize,
    train,
    write_log_csv,
)
from .weighting import WeightingConfig

_TOP_KEYS = {"out_dir", "seed", "gen", "dataset", "net", "train", "evaluate"}
_WEIGHTING_KEYS = {"strategy", "restraint_target", "temperature", "clamp_epsilon"}
_EVAL_KEYS = {"checkpoint", "split"}


def _check_keys(section: dict, allowed, where: str):
    for key in section:
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in {where}; valid: {sorted(allowed)}")


def _load_doc(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as e:
        raise LoadError(f"cannot read config {p}: {e}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {p} is not valid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"config {p} must hold a JSON object")
    _check_keys(doc, _TOP_KEYS, "config")
    return doc


def _gen_config(doc: dict, seed_override) -> GenConfig:
    section = dict(doc.get("gen", {}))
    allowed = {f.name for f in dc_fields(GenConfig)}
    _check_keys(section, allowed, "'gen' section")
    if seed_override is not None:
        section["seed"] = seed_override
    elif "seed" not in section and "seed" in doc:
        section["seed"] = doc["seed"]
    try:
        return GenConfig(**section)
    except TypeError as e:
        raise ConfigError(f"bad 'gen' section: {e}") from None


def _net_config(doc: dict) -> NetConfig:
    section = dict(doc.get("net", {}))
    allowed = {f.name for f in dc_fields(NetConfig)}
    _check_keys(section, allowed, "'net' section")
    if "block_channel_widths" in section:
        section["block_channel_widths"] = tuple(section["block_channel_widths"])
    try:
        return NetConfig(**section)
    except TypeError as e:
        raise ConfigError(f"bad 'net' section: {e}") from None


def _train_config(doc: dict, seed_override) -> TrainConfig:
    section = dict(doc.get("train", {}))
    plain = {f.name for f in dc_fields(TrainConfig)} - {"weighting", "age_standardization"}
    _check_keys(section, plain | _WEIGHTING_KEYS, "'train' section")
    wkw = {"strategy": section.pop("strategy", "EW"), "num_tasks": 3}
    for key in ("restraint_target", "temperature", "clamp_epsilon"):
        if key in section:
            wkw[key] = section.pop(key)
    if "betas" in section:
        section["betas"] = tuple(section["betas"])
    if seed_override is not None:
        section["seed"] = seed_override
    elif "seed" not in section and "seed" in doc:
        section["seed"] = doc["seed"]
    try:
        return TrainConfig(weighting=WeightingConfig(**wkw), **section)
    except TypeError as e:
        raise ConfigError(f"bad 'train' section: {e}") from None


def _out_dir(args, doc) -> Path:
    out = args.out or doc.get("out_dir")
    if not out:
        raise ConfigError("no output directory: pass --out or set out_dir in the config")
    p = Path(out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _dataset_path(doc) -> Path:
    path = doc.get("dataset")
    if not path:
        raise ConfigError("config needs a 'dataset' key pointing at a manifest.csv")
    if not isinstance(path, str):
        raise ConfigError(f"'dataset' must be a manifest path string, got {type(path).__name__}")
    return Path(path)


def _echo_config(out: Path, payload: dict):
    (out / "effective_config.json").write_text(json.dumps(payload, indent=2) + "\n")


def _train_section_dict(cfg: TrainConfig) -> dict:
    return {
        "learning_rate": cfg.learning_rate,
        "batch_size": cfg.batch_size,
        "epochs": cfg.epochs,
        "weight_decay": cfg.weight_decay,
        "betas": list(cfg.betas),
        "adam_epsilon": cfg.adam_epsilon,
        "crop_width": cfg.crop_width,
        "seed": cfg.seed,
        "strategy": cfg.weighting.strategy,
        "restraint_target": cfg.weighting.restraint_target,
        "temperature": cfg.weighting.temperature,
        "clamp_epsilon": cfg.weighting.clamp_epsilon,
    }


def cmd_gen_data(args) -> int:
    doc = _load_doc(args.config)
    out = _out_dir(args, doc)
    cfg = _gen_config(doc, args.seed)
    _echo_config(out, {"out_dir": str(out), "gen": cfg.as_dict()})
    manifest = generate_synthetic(cfg, out)
    print(f"manifest: {manifest}")
    print(f"train: {cfg.n_train}  val: {cfg.n_val}  test: {cfg.n_test}")
    return 0


def cmd_train(args) -> int:
    doc = _load_doc(args.config)
    out = _out_dir(args, doc)
    net_cfg = _net_config(doc)
    train_cfg = _train_config(doc, args.seed)
    dataset = load_dataset(_dataset_path(doc))
    _echo_config(out, {
        "out_dir": str(out),
        "dataset": str(_dataset_path(doc)),
        "net": net_cfg.as_dict(),
        "train": _train_section_dict(train_cfg),
    })
    net = build_net(net_cfg, train_cfg.seed)
    try:
        log, best_state = train(net, dataset, train_cfg)
    except TrainingAborted as e:
        partial = getattr(e, "log", None)
        if partial is not None and partial.records:
            write_log_csv(partial, out / "log.csv")
        raise
    write_log_csv(log, out / "log.csv")
    net.load_state(best_state)
    save_checkpoint(net, out / "checkpoint.menc")
    summary = summarize(log, net, train_cfg)
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(log.records[-1].val.to_json())
    return 0


def cmd_grid_search(args) -> int:
    doc = _load_doc(args.config)
    out = _out_dir(args, doc)
    net_cfg = _net_config(doc)
    train_cfg = _train_config(doc, args.seed)
    dataset = load_dataset(_dataset_path(doc))
    _echo_config(out, {
        "out_dir": str(out),
        "dataset": str(_dataset_path(doc)),
        "net": net_cfg.as_dict(),
        "train": _train_section_dict(train_cfg),
    })
    results, best = grid_search_exits(dataset, net_cfg, train_cfg,
                                      ordered_only=args.ordered_only)
    with open(out / "ranking.csv", "w", newline="") as f:
        import csv
        writer = csv.writer(f)
        writer.writerow(["age_exit", "country_exit", "emotion_exit",
                         "emo_ccc", "cou_uar", "age_mae", "h_mean", "status"])
        for r in results:
            if r.status == "ok":
                writer.writerow(list(r.assignment)
                                + [repr(r.report.emo_ccc), repr(r.report.cou_uar),
                                   repr(r.report.age_mae), repr(r.report.h_mean), "ok"])
            else:
                writer.writerow(list(r.assignment) + ["", "", "", "", r.status])
    top = results[0]
    print(f"best assignment: {best}  h_mean: {top.report.h_mean:.6f}")
    return 0


def cmd_evaluate(args) -> int:
    doc = _load_doc(args.config)
    section = dict(doc.get("evaluate", {}))
    _check_keys(section, _EVAL_KEYS, "'evaluate' section")
    ckpt = section.get("checkpoint")
    if not ckpt:
        raise ConfigError("evaluate needs 'evaluate.checkpoint' in the config")
    split = section.get("split", "test")
    train_cfg = _train_config(doc, args.seed)
    dataset = load_dataset(_dataset_path(doc))
    net = load_checkpoint(ckpt)
    report = evaluate(net, dataset, split, train_cfg)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"eval_{split}.json").write_text(report.to_json() + "\n")
    print(report.to_json())
    return 0


def _report_rows(run_dirs):
    rows = []
    for d in run_dirs:
        summary_path = Path(d) / "summary.json"
        row = {"run": str(d), "strategy": "", "emo_ccc": None, "cou_uar": None,
               "age_mae": None, "h_mean": None, "status": "missing"}
        if summary_path.is_file():
            try:
                summary = json.loads(summary_path.read_text())
                report = MetricsReport.from_dict(summary["best_val"])
                row.update(strategy=summary.get("strategy", "?"),
                           emo_ccc=report.emo_ccc, cou_uar=report.cou_uar,
                           age_mae=report.age_mae, h_mean=report.h_mean)
                if report.h_mean != report.h_mean:  # NaN
                    row["status"] = "degenerate"
                elif abs(hmean(report.emo_ccc, report.cou_uar, report.age_mae)
                         - report.h_mean) > 1e-9:
                    row["status"] = "inconsistent"
                else:
                    row["status"] = "ok"
            except (ValueError, KeyError, TypeError) as e:
                row["status"] = f"unreadable: {e}"
        rows.append(row)
    best_idx = None
    best_val = -float("inf")
    for i, row in enumerate(rows):
        if row["status"] == "ok" and row["h_mean"] > best_val:
            best_val = row["h_mean"]
            best_idx = i
    return rows, best_idx


def cmd_report(args) -> int:
    rows, best_idx = _report_rows(args.run_dirs)

    def fmt(v):
        return "-" if v is None else f"{v:.3f}"

    header = ["Run", "Strategy", "Emo-CCC", "Cou-UAR", "Age-MAE", "H-Mean", ""]
    table = []
    for i, row in enumerate(rows):
        mark = "*best*" if i == best_idx else ("" if row["status"] == "ok" else row["status"])
        table.append([row["run"], row["strategy"] or "-", fmt(row["emo_ccc"]),
                      fmt(row["cou_uar"]), fmt(row["age_mae"]), fmt(row["h_mean"]), mark])
    widths = [max(len(header[c]), *(len(r[c]) for r in table)) if table else len(header[c])
              for c in range(len(header))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip()]
    for r in table:
        lines.append("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip())
    text = "\n".join(lines)
    print(text)

    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        import csv
        with open(out / "report.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["run", "strategy", "emo_ccc", "cou_uar", "age_mae",
                             "h_mean", "status", "best"])
            for i, row in enumerate(rows):
                writer.writerow([row["run"], row["strategy"],
                                 "" if row["emo_ccc"] is None else repr(row["emo_ccc"]),
                                 "" if row["cou_uar"] is None else repr(row["cou_uar"]),
                                 "" if row["age_mae"] is None else repr(row["age_mae"]),
                                 "" if row["h_mean"] is None else repr(row["h_mean"]),
                                 row["status"], "yes" if i == best_idx else ""])
        (out / "report.txt").write_text(text + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mtlkit",
        description="Multitask loss-weighting experiments on a multi-exit CNN.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("gen-data", cmd_gen_data), ("train", cmd_train),
                     ("grid-search", cmd_grid_search), ("evaluate", cmd_evaluate)):
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="experiment JSON")
        sp.add_argument("--out", help="output directory (overrides config out_dir)")
        sp.add_argument("--seed", type=int, help="seed override")
        if name == "grid-search":
            sp.add_argument("--ordered-only", action="store_true",
                            help="restrict to age_exit <= country_exit <= emotion_exit")
        sp.set_defaults(fn=fn)
    rp = sub.add_parser("report")
    rp.add_argument("run_dirs", nargs="+", help="run directories holding summary.json")
    rp.add_argument("--out", help="also write report.csv and report.txt here")
    rp.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except TrainingAborted as e:
        print(f"error: training aborted at epoch {e.epoch}: {e}", file=sys.stderr)
        return 4
    except (ConfigError, StructuralError, DomainError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (LoadError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
