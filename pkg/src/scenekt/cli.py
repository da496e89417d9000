"""Command-line entry point: gen-data, train, eval, ablate.

Every command resolves a flat JSON config file merged with flag overrides,
echoes the effective config into its output directory, and is reproducible
bit-for-bit from that echoed config.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import data as data_mod
from . import evaluation, training
from .model import ModelDims, Toggles
from .training import ABLATION_LADDER, TrainConfig


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ValueError("config file must hold a flat JSON object")
    return cfg


def _write_effective_config(out_dir: str, cfg: dict):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)


def _gen_config(args) -> data_mod.GeneratorConfig:
    file_cfg = _load_config_file(args.config)
    fields = {f.name for f in dataclasses.fields(data_mod.GeneratorConfig)}
    unknown = set(file_cfg) - fields
    if unknown:
        raise ValueError(f"unknown generator config keys: {sorted(unknown)}")
    merged = dict(file_cfg)
    if args.seed is not None:
        merged["seed"] = args.seed
    return data_mod.GeneratorConfig(**merged)


def cmd_gen_data(args) -> int:
    cfg = _gen_config(args)
    dataset = data_mod.generate(cfg)
    data_mod.save_dataset(dataset, args.out)
    _write_effective_config(args.out, dataclasses.asdict(cfg))
    hist = dataset.relation_counts("train")
    print(f"wrote {len(dataset.train)} train / {len(dataset.test)} test scenes to {args.out}")
    print(f"train triples: {int(hist.sum())} (histogram in meta.json)")
    return 0


def _train_config(args) -> TrainConfig:
    file_cfg = _load_config_file(args.config)
    fields = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(file_cfg) - fields - {"toggles"}
    if unknown:
        raise ValueError(f"unknown train config keys: {sorted(unknown)}")
    toggles_cfg = file_cfg.pop("toggles", {})
    cfg = TrainConfig(**{k: v for k, v in file_cfg.items()})
    for flag in ("seed", "epochs", "lr", "alpha", "epsilon"):
        v = getattr(args, flag, None)
        if v is not None:
            cfg = replace(cfg, **{flag: v})
    kt_on = toggles_cfg.get("kt", True) and not args.no_kt
    fc_on = toggles_cfg.get("fc", True) and not args.no_fc
    if fc_on and not kt_on:
        raise ValueError("FC enabled with KT disabled: calibration needs the coarse distribution")
    toggles = Toggles(
        so=toggles_cfg.get("so", True) and not args.no_so,
        kt=kt_on,
        fc=fc_on,
        bias=toggles_cfg.get("bias", True) and not args.no_bias,
    )
    return replace(cfg, toggles=toggles)


def _effective_train_dict(cfg: TrainConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["toggles"] = dataclasses.asdict(cfg.toggles)
    d["frozen_blocks"] = list(cfg.frozen_blocks)
    d["zero_blocks"] = list(cfg.zero_blocks)
    return d


def cmd_train(args) -> int:
    cfg = _train_config(args)
    dataset = data_mod.load_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)
    _write_effective_config(args.out, _effective_train_dict(cfg))
    log_path = os.path.join(args.out, "train_log.jsonl")
    if os.path.exists(log_path):
        os.remove(log_path)
    params, log = training.fit(dataset, cfg, log_path=log_path)
    data_mod.save_checkpoint(params, os.path.join(args.out, "checkpoint.json"))
    report = evaluation.evaluate(params, dataset.test, cfg.toggles)
    with open(os.path.join(args.out, "metrics.json"), "w") as fh:
        fh.write(report.to_json())
    with open(os.path.join(args.out, "metrics.txt"), "w") as fh:
        fh.write(report.to_text() + "\n")
    print(report.to_text())
    return 0


def cmd_eval(args) -> int:
    dataset = data_mod.load_dataset(args.data)
    params = data_mod.load_checkpoint(args.checkpoint, expect_dims=dataset.dims)
    if args.no_kt and not args.no_fc:
        raise ValueError("FC enabled with KT disabled: calibration needs the coarse distribution")
    toggles = Toggles(
        so=not args.no_so,
        kt=not args.no_kt,
        fc=not args.no_fc,
        bias=not args.no_bias,
    )
    tasks = ("predcls", "sgcls", "sgdet") if args.task == "all" else (args.task,)
    modes = evaluation.MODES if args.mode == "both" else (args.mode,)
    detections = None
    if "sgdet" in tasks:
        if args.detections is None:
            raise ValueError("task sgdet requires --detections")
        detections = evaluation.load_detections(
            args.detections, dataset.dims.d_v, dataset.dims.n_object_classes
        )
    report = evaluation.evaluate(
        params, dataset.test, toggles, tasks=tasks, modes=modes, detections=detections
    )
    if args.report == "tail":
        report.per_relation = evaluation.per_relation_report(
            params,
            dataset.test,
            toggles,
            dataset.relation_counts("train"),
            bottom_n=args.bottom,
        )
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "metrics.json"), "w") as fh:
            fh.write(report.to_json())
        with open(os.path.join(args.out, "metrics.txt"), "w") as fh:
            fh.write(report.to_text() + "\n")
    print(report.to_text())
    return 0


def cmd_ablate(args) -> int:
    if args.seeds < 1:
        raise ValueError("--seeds must be at least 1")
    cfg = _train_config(args)
    dataset = data_mod.load_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)
    _write_effective_config(args.out, _effective_train_dict(cfg) | {"seeds": args.seeds})
    per_variant: dict[str, list[float]] = {name: [] for name, _ in ABLATION_LADDER}
    rows_all = []
    for s in range(args.seeds):
        seed_cfg = replace(cfg, seed=cfg.seed + s)
        rows = training.ablate(
            dataset,
            seed_cfg,
            lambda params, toggles: evaluation.evaluate(params, dataset.test, toggles),
        )
        for row in rows:
            per_variant[row["variant"]].append(row["report"].mean_recall)
        rows_all.append({"seed": seed_cfg.seed, "rows": [
            {"variant": r["variant"], "mean_recall": r["report"].mean_recall,
             "results": json.loads(r["report"].to_json())["results"]}
            for r in rows
        ]})
    summary = [
        {
            "variant": name,
            "mean": float(np.mean(per_variant[name])),
            "std": float(np.std(per_variant[name])),
            "per_seed": per_variant[name],
        }
        for name, _ in ABLATION_LADDER
    ]
    with open(os.path.join(args.out, "ablation.json"), "w") as fh:
        json.dump({"summary": summary, "runs": rows_all}, fh, indent=2)
    print(f"{'variant':<14} {'mean':>8} {'std':>8}")
    for row in summary:
        print(f"{row['variant']:<14} {100 * row['mean']:>8.2f} {100 * row['std']:>8.2f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scenekt", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic long-tail dataset")
    g.add_argument("--config", help="generator config JSON")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--seed", type=int)
    g.set_defaults(fn=cmd_gen_data)

    def add_train_flags(sp):
        sp.add_argument("--config", help="train config JSON")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--alpha", type=float)
        sp.add_argument("--epsilon", type=float)
        sp.add_argument("--no-so", action="store_true")
        sp.add_argument("--no-kt", action="store_true")
        sp.add_argument("--no-fc", action="store_true")
        sp.add_argument("--no-bias", action="store_true")

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--out", required=True, help="run output directory")
    add_train_flags(t)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--task", choices=("predcls", "sgcls", "sgdet", "all"), default="predcls")
    e.add_argument("--mode", choices=("constrained", "unconstrained", "both"), default="both")
    e.add_argument("--detections", help="detections file (sgdet)")
    e.add_argument("--report", choices=("standard", "tail"), default="standard")
    e.add_argument("--bottom", type=int, default=10)
    e.add_argument("--out")
    e.add_argument("--no-so", action="store_true")
    e.add_argument("--no-kt", action="store_true")
    e.add_argument("--no-fc", action="store_true")
    e.add_argument("--no-bias", action="store_true")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="run the BL/SO/KT/FC ladder over seeds")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--seeds", type=int, default=1)
    add_train_flags(a)
    a.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
