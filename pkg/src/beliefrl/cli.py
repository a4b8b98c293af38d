"""Command-line surface: generate, train, evaluate, ablate, act, report.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure. Every artifact directory gets a run manifest; metric records
contain no timestamps so reruns with identical inputs produce identical
records.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import __version__
from .cohort_io import CohortError, load_cohort, save_cohort, split_episodes
from .config import (
    ConfigError,
    ExperimentConfig,
    config_hash,
    experiment_config_from_dict,
    load_yaml,
    sim_config_from_dict,
    to_dict,
)
from .evaluation import evaluate_bundle
from .model import load_checkpoint
from .ope import FQEDivergence, SupportViolation
from .serialize import FormatError
from .simulator import generate_cohort, split_cohort
from .trainer import TrainingDiverged, run_training

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _write_manifest(out_dir: Path, command: str, cfg_hash: str, seed: int, inputs: List[str], outputs: List[str]) -> None:
    manifest = {
        "command": command,
        "config_hash": cfg_hash,
        "code_version": __version__,
        "seed": seed,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "inputs": inputs,
        "outputs": outputs,
    }
    with open(out_dir / "run_manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_generate(args) -> int:
    tree = load_yaml(args.config)
    split_spec = tree.pop("splits", {"train": 0.7, "val": 0.15, "test": 0.15})
    config = sim_config_from_dict(tree)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed).validate()
    episodes = generate_cohort(config)
    names = list(split_spec)
    fractions = [split_spec[n] for n in names]
    parts = split_cohort(episodes, fractions, seed=config.seed)
    splits = {name: [ep.episode_id for ep in part] for name, part in zip(names, parts)}
    out = Path(args.out)
    save_cohort(out, episodes, config, splits)
    _write_manifest(out, "generate", config_hash(config), config.seed, [str(args.config)], ["manifest.json", "episodes.bin"])
    print(f"wrote {len(episodes)} episodes to {out} (splits: {({k: len(v) for k, v in splits.items()})})")
    return EXIT_OK


def _load_experiment(path: Optional[str]) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig().validate()
    return experiment_config_from_dict(load_yaml(path))


def cmd_train(args) -> int:
    experiment = _load_experiment(args.config)
    episodes, sim_config, splits = load_cohort(args.cohort)
    by_split = split_episodes(episodes, splits)
    train_eps = by_split.get("train")
    if not train_eps:
        raise CohortError("cohort has no train split")
    val_eps = by_split.get("val", [])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records_path = out / "metrics.jsonl"
    with open(records_path, "w", encoding="utf-8") as fh:

        def log(rec: Dict) -> None:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if not args.quiet:
                stage, epoch = rec.get("stage"), rec.get("epoch")
                extras = {k: v for k, v in rec.items() if isinstance(v, float)}
                brief = ", ".join(f"{k}={v:.4f}" for k, v in sorted(extras.items())[:4])
                print(f"stage {stage} epoch {epoch}: {brief}")

        result = run_training(train_eps, val_eps, sim_config, experiment, out_dir=str(out), log=log)
    _write_manifest(
        out, "train", config_hash(experiment), experiment.train.seed,
        [str(args.cohort), str(args.config)], sorted(p.name for p in out.glob("checkpoint_*.bin")),
    )
    print(f"training complete: {len(result.records)} epoch records, checkpoints: {sorted(result.checkpoints)}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    bundle, header = load_checkpoint(args.checkpoint)
    episodes, _, splits = load_cohort(args.cohort)
    by_split = split_episodes(episodes, splits)
    if args.split not in by_split:
        raise CohortError(f"cohort has no split named {args.split!r} (has {sorted(by_split)})")
    eval_eps = by_split[args.split]
    if not eval_eps:
        raise CohortError(f"split {args.split!r} is empty")
    report = evaluate_bundle(bundle, eval_eps, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "eval_report.jsonl", "w", encoding="utf-8") as fh:
        for rec in report.records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    with open(out / "kl_per_dim.json", "w", encoding="utf-8") as fh:
        json.dump(report.kl_per_dim, fh)
        fh.write("\n")
    _write_manifest(
        out, "evaluate", header.get("config_hash", ""), args.seed if args.seed is not None else -1,
        [str(args.checkpoint), str(args.cohort)], ["eval_report.jsonl", "kl_per_dim.json"],
    )
    for rec in report.records:
        ci = f" [{rec['ci_lower']:.4f}, {rec['ci_upper']:.4f}]" if "ci_lower" in rec else ""
        print(f"{rec['name']}: {rec['value']:.4f}{ci}")
    return EXIT_OK


def _apply_overrides(base: ExperimentConfig, overrides: Dict) -> ExperimentConfig:
    tree = to_dict(base)
    for section, kv in overrides.items():
        if section not in tree or not isinstance(kv, dict):
            raise ConfigError(f"bad override section {section!r}")
        tree[section].update(kv)
    return experiment_config_from_dict(tree)


def cmd_ablate(args) -> int:
    tree = load_yaml(args.config)
    variants: Dict[str, Dict] = tree.pop("variants", None)
    if not variants:
        raise ConfigError("ablation config needs a `variants` mapping")
    base = experiment_config_from_dict(tree.pop("base", {}))
    seeds = tree.pop("seeds", [base.train.seed])
    if tree:
        raise ConfigError(f"unknown keys in ablation config: {sorted(tree)}")
    episodes, sim_config, splits = load_cohort(args.cohort)
    by_split = split_episodes(episodes, splits)
    train_eps, test_eps = by_split["train"], by_split.get("test") or by_split.get("val")
    val_eps = by_split.get("val", [])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for name, overrides in variants.items():
        for seed in seeds:
            experiment = _apply_overrides(base, overrides or {})
            experiment.train.seed = int(seed)
            experiment.validate()
            result = run_training(train_eps, val_eps, sim_config, experiment)
            report = evaluate_bundle(result.bundle, test_eps, seed=int(seed))
            fqe = report.get("fqe")
            row = {"variant": name, "seed": int(seed), "fqe": fqe["value"],
                   "fqe_ci": [fqe["ci_lower"], fqe["ci_upper"]]}
            try:
                row["auroc"] = report.get("auroc")["value"]
            except KeyError:
                row["auroc"] = None
            rows.append(row)
            print(f"{name} seed={seed}: fqe={row['fqe']:.4f} ci=[{fqe['ci_lower']:.4f},{fqe['ci_upper']:.4f}]")
    with open(out / "ablation_table.json", "w", encoding="utf-8") as fh:
        json.dump(rows, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(out, "ablate", config_hash(base), int(seeds[0]), [str(args.cohort), str(args.config)], ["ablation_table.json"])
    return EXIT_OK


def cmd_act(args) -> int:
    import torch

    from .data import episodes_to_batch
    from .iql import select_action

    bundle, _ = load_checkpoint(args.checkpoint)
    episodes, _, _ = load_cohort(args.cohort)
    matches = [ep for ep in episodes if ep.episode_id == args.episode]
    if not matches:
        raise CohortError(f"episode {args.episode} not in cohort")
    ep = matches[0]
    if args.step >= len(ep.steps):
        raise CohortError(f"episode {args.episode} has {len(ep.steps)} steps, no step {args.step}")
    batch = episodes_to_batch([ep], bundle.stats, bundle.sim_config)
    bundle.model.eval()
    phi, mu, sigma = bundle.model.belief_predictive(batch, args.step)
    gen = torch.Generator().manual_seed(args.seed if args.seed is not None else 0)
    out = select_action(bundle.rl, bundle.model.dynamics, phi, mu, sigma,
                        n_samples=args.n_samples, mode=args.mode, generator=gen)
    payload = {
        "episode": args.episode,
        "step": args.step,
        "mode": args.mode,
        "action": int(out["action"][0]),
        "distribution": [float(p) for p in out["probs"][0]],
        "entropy_nats": float(out["entropy"][0]),
    }
    print(json.dumps(payload, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_report(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    eval_dirs = [Path(d) for d in args.eval]
    if not eval_dirs:
        raise ConfigError("report needs at least one --eval directory")
    for d in eval_dirs:
        if not d.exists():
            raise CohortError(f"no such eval directory: {d}")

    written = []
    # entropy curves from any training metrics found next to eval dirs
    curves = []
    for d in eval_dirs:
        for candidate in (d / "metrics.jsonl", d.parent / "metrics.jsonl"):
            if candidate.exists():
                entropies = []
                with open(candidate, "r", encoding="utf-8") as fh:
                    for line in fh:
                        rec = json.loads(line)
                        if "entropy" in rec:
                            entropies.append(rec["entropy"])
                if entropies:
                    curves.append((d.name, entropies))
                break
    if curves:
        fig, ax = plt.subplots(figsize=(6, 4))
        for name, ys in curves:
            ax.plot(range(len(ys)), ys, label=name)
        ax.set_xlabel("epoch")
        ax.set_ylabel("policy entropy (nats)")
        ax.set_ylim(bottom=0.0)
        ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(out / "entropy_curve.png", dpi=120)
        plt.close(fig)
        written.append("entropy_curve.png")

    # KL-per-dim bars from the first eval dir that has them
    for d in eval_dirs:
        klp = d / "kl_per_dim.json"
        if klp.exists():
            with open(klp, "r", encoding="utf-8") as fh:
                kl = json.load(fh)
            fig, ax = plt.subplots(figsize=(6, 4))
            ax.bar(range(len(kl)), kl)
            ax.axhline(0.01, linestyle="--", linewidth=1.0)
            ax.set_xlabel("latent dimension")
            ax.set_ylabel("KL (nats)")
            fig.tight_layout()
            fig.savefig(out / "kl_per_dim.png", dpi=120)
            plt.close(fig)
            written.append("kl_per_dim.png")
            break

    # FQE comparison across eval dirs
    names, vals, los, his = [], [], [], []
    for d in eval_dirs:
        rp = d / "eval_report.jsonl"
        if not rp.exists():
            raise CohortError(f"{d} has no eval_report.jsonl")
        with open(rp, "r", encoding="utf-8") as fh:
            for line in fh:
                rec = json.loads(line)
                if rec["name"] == "fqe":
                    names.append(d.name)
                    vals.append(rec["value"])
                    los.append(rec.get("ci_lower", rec["value"]))
                    his.append(rec.get("ci_upper", rec["value"]))
    if not names:
        raise CohortError("no FQE records found in eval directories")
    fig, ax = plt.subplots(figsize=(6, 4))
    x = np.arange(len(names))
    err = np.array([np.array(vals) - np.array(los), np.array(his) - np.array(vals)])
    ax.bar(x, vals, yerr=err, capsize=4)
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("FQE value")
    lo_lim = min(min(los), 0.0) - 0.05
    hi_lim = max(his) + 0.05
    ax.set_ylim(lo_lim, hi_lim)
    fig.tight_layout()
    fig.savefig(out / "fqe_comparison.png", dpi=120)
    plt.close(fig)
    written.append("fqe_comparison.png")

    table = [
        {"run": n, "fqe": v, "ci": [l, h], "fqe_axis": [lo_lim, hi_lim]}
        for n, v, l, h in zip(names, vals, los, his)
    ]
    with open(out / "summary_table.json", "w", encoding="utf-8") as fh:
        json.dump(table, fh, indent=2, sort_keys=True)
        fh.write("\n")
    written.append("summary_table.json")
    _write_manifest(out, "report", "-", -1, [str(d) for d in eval_dirs], written)
    print(f"wrote {written} to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="beliefrl", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a synthetic cohort directory")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=None)
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="run the three-stage training procedure")
    t.add_argument("--config", default=None)
    t.add_argument("--cohort", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("evaluate", help="off-policy evaluation of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--cohort", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--seed", type=int, default=None)
    e.set_defaults(fn=cmd_evaluate)

    a = sub.add_parser("ablate", help="train and evaluate a variant matrix")
    a.add_argument("--config", required=True)
    a.add_argument("--cohort", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(fn=cmd_ablate)

    act = sub.add_parser("act", help="emit the action distribution for an episode prefix")
    act.add_argument("--checkpoint", required=True)
    act.add_argument("--cohort", required=True)
    act.add_argument("--episode", type=int, required=True)
    act.add_argument("--step", type=int, required=True)
    act.add_argument("--mode", default="sample", choices=["sample", "argmax", "mean_latent"])
    act.add_argument("--n-samples", type=int, default=32)
    act.add_argument("--seed", type=int, default=None)
    act.set_defaults(fn=cmd_act)

    r = sub.add_parser("report", help="static plots and tables from eval artifacts")
    r.add_argument("--eval", nargs="+", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_report)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CohortError, FormatError, FileNotFoundError, SupportViolation) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, FQEDivergence, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
