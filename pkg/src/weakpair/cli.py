"""Command-line entry point: gen, train, eval, ablate, gradcheck, diag.

Runs are driven by an INI-style config (flat key=value sections) plus
``--set section.key=value`` overrides; unknown keys are rejected, and every
command writes its fully resolved config next to its outputs so any result
can be reproduced from the output directory alone.

Exit codes: 0 success, 1 config error, 2 runtime or numeric error, 3 I/O
error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import data as datamod
from .data import DatasetFormatError, GenConfig
from .encoders import dict_to_params
from .losses import MAPPINGS
from .metrics import EvalResult, evaluate_model
from .mining import MiningStarvationError
from .training import (CheckpointFormatError, NumericAbort, TrainConfig,
                       load_checkpoint, save_checkpoint, train)
from .verify import run_battery


class ConfigError(ValueError):
    """Bad config file, unknown key, or unparsable value."""


EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 0, 1, 2, 3

# Defaults double as the key/type schema for every section.
DEFAULTS: dict[str, dict] = {
    "gen": {
        "num_identities": 240,
        "views_per_identity": 4,
        "latent_dim": 8,
        "raw_dim_image": 48,
        "raw_dim_text": 40,
        "view_noise": 0.35,
        "annotation_mask_rate": 0.3,
        "seed": 100,
        "train_fraction": 5.0 / 6.0,
        "split_seed": 100,
    },
    "train": dataclasses.asdict(TrainConfig()),
    "eval": {"eval_seed": 7},
    "ablate": {"grid": "losses", "seeds": "1,2,3,4,5"},
    "gradcheck": {"points": 100, "eps": 1e-5, "tol": 1e-4, "seed": 0},
}


def _convert(section: str, key: str, raw: str):
    try:
        default = DEFAULTS[section][key]
    except KeyError:
        raise ConfigError(f"unknown config key {section}.{key}") from None
    kind = type(default)
    try:
        if kind is bool:
            return raw.lower() in ("1", "true", "yes")
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"{section}.{key}: {exc}") from exc


def load_config(path: str | None, overrides: list[str],
                seed: int | None = None, seed_target: str | None = None) -> dict[str, dict]:
    """Defaults, then config file, then --set overrides, then --seed."""
    resolved = {section: dict(values) for section, values in DEFAULTS.items()}
    if path is not None:
        parser = configparser.ConfigParser()
        try:
            with open(path) as handle:
                parser.read_file(handle)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        for section in parser.sections():
            if section not in resolved:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                resolved[section][key] = _convert(section, key, raw)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        section, _, key = dotted.partition(".")
        if section not in resolved:
            raise ConfigError(f"unknown config section [{section}]")
        resolved[section][key] = _convert(section, key, raw)
    if seed is not None and seed_target is not None:
        resolved[seed_target]["seed"] = seed
    return resolved


def write_resolved(resolved: dict[str, dict], out_dir: Path) -> None:
    parser = configparser.ConfigParser()
    for section, values in resolved.items():
        parser[section] = {k: repr(v) if isinstance(v, float) else str(v)
                           for k, v in values.items()}
    with open(out_dir / "resolved.cfg", "w") as handle:
        parser.write(handle)


def gen_config_from(resolved: dict[str, dict]) -> GenConfig:
    keys = ("num_identities", "views_per_identity", "latent_dim",
            "raw_dim_image", "raw_dim_text", "view_noise",
            "annotation_mask_rate", "seed")
    return GenConfig(**{k: resolved["gen"][k] for k in keys})


def train_config_from(resolved: dict[str, dict]) -> TrainConfig:
    return TrainConfig(**resolved["train"])


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def write_eval_outputs(result: EvalResult, out_dir: Path,
                       include_metrics: bool = True) -> None:
    if include_metrics:
        rows = [["recall", k, v] for k, v in sorted(result.recalls.items())]
        rows += [["map", "", result.mean_ap],
                 ["pr_auc", "", result.pr.auc],
                 ["mean_u_correct", "", result.reliability.mean_u_correct],
                 ["mean_u_incorrect", "", result.reliability.mean_u_incorrect],
                 ["margin_mean_pos", "", result.margins.mean_pos],
                 ["margin_mean_weak", "", result.margins.mean_weak],
                 ["excluded_queries", "", result.ranking.excluded]]
        write_csv(out_dir / "metrics.csv", ["metric", "param", "value"], rows)
    write_csv(out_dir / "pr_curve.csv", ["recall", "precision"],
              [[r, p] for r, p in zip(result.pr.recalls, result.pr.precisions)])
    write_csv(out_dir / "risk_coverage.csv", ["coverage", "risk"],
              [[c, r] for c, r in zip(result.risk.coverages, result.risk.risks)])
    write_csv(out_dir / "reliability.csv", ["group", "mean_uncertainty"],
              [["correct", result.reliability.mean_u_correct],
               ["incorrect", result.reliability.mean_u_incorrect]])
    for name, hist in (("margins_weak", result.margins.weak_hist),
                       ("margins_pos", result.margins.pos_hist)):
        write_csv(out_dir / f"{name}.csv", ["bin_left", "count"],
                  [[edge, int(count)] for edge, count
                   in zip(result.margins.bin_edges[:-1], hist)])


# -- commands -----------------------------------------------------------------


def cmd_gen(args) -> int:
    resolved = load_config(args.config, args.set, args.seed, "gen")
    cfg = gen_config_from(resolved)
    cfg.validate()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    full = datamod.generate(cfg)
    train_split, test_split = datamod.split(full, resolved["gen"]["train_fraction"],
                                            resolved["gen"]["split_seed"])
    datamod.write(train_split, out_dir / "train.tsv")
    datamod.write(test_split, out_dir / "test.tsv")
    write_resolved(resolved, out_dir)
    print(f"wrote {len(train_split.records)} train / {len(test_split.records)} "
          f"test records to {out_dir}")
    return EXIT_OK


def train_log_rows(log) -> tuple[list[str], list[list]]:
    header = ["step", "lr", "itc", "uitc", "itm", "gitm_txt", "gitm_img",
              "total", "mean_s_w", "mean_u_w", "u_min", "u_max", "clamps"]
    rows = []
    for rec in log.steps:
        r = rec.report
        rows.append([rec.step, rec.lr, r.itc, r.uitc, r.itm, r.gitm_txt,
                     r.gitm_img, r.total, r.mean_s_w, r.mean_u_w,
                     rec.u_min, rec.u_max, rec.clamps])
    return header, rows


def cmd_train(args) -> int:
    resolved = load_config(args.config, args.set, args.seed, "train")
    cfg = train_config_from(resolved)
    cfg.validate()
    dataset = datamod.read(args.data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt, log = train(cfg, dataset)
    save_checkpoint(ckpt, out_dir / "checkpoint.json")
    header, rows = train_log_rows(log)
    write_csv(out_dir / "train_log.csv", header, rows)
    write_resolved(resolved, out_dir)
    last = log.steps[-1].report.total if log.steps else float("nan")
    print(f"trained {ckpt.step} steps; final total loss {last:.6f}; "
          f"outputs in {out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    resolved = load_config(args.config, args.set)
    ckpt = load_checkpoint(args.checkpoint)
    dataset = datamod.read(args.data)
    if args.train_data is not None:
        train_ids = set(datamod.read(args.train_data).identities())
        overlap = train_ids & set(dataset.identities())
        if overlap:
            print(f"warning: {len(overlap)} identities appear in both the "
                  f"training and evaluation datasets", file=sys.stderr)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = evaluate_model(dict_to_params(ckpt.params), dataset,
                            ckpt.config.mapping,
                            eval_seed=resolved["eval"]["eval_seed"])
    write_eval_outputs(result, out_dir)
    write_resolved(resolved, out_dir)
    recalls = " ".join(f"R@{k}={v:.4f}" for k, v in sorted(result.recalls.items()))
    print(f"{recalls} mAP={result.mean_ap:.4f} PR-AUC={result.pr.auc:.4f}")
    return EXIT_OK


def ablation_cells(grid: str) -> list[tuple[str, dict]]:
    """Config patches for each ablation cell."""
    if grid == "losses":
        return [("baseline", {"ablation_mode": "baseline"}),
                ("uitc", {"ablation_mode": "uitc"}),
                ("uitc_gitm_neg3v4", {"ablation_mode": "uitc_gitm",
                                      "mining_mode": "neg3v4", "mining_k": 1}),
                ("uitc_gitm_neg3v6", {"ablation_mode": "uitc_gitm",
                                      "mining_mode": "neg3v6", "mining_k": 2})]
    if grid == "mappings":
        return [(f"mapping_{m}", {"ablation_mode": "uitc_gitm", "mapping": m})
                for m in MAPPINGS]
    raise ConfigError(f"unknown ablation grid {grid!r}")


def run_ablation(resolved: dict[str, dict]) -> list[list]:
    """Train and evaluate every (cell, seed); append per-cell medians.

    All cells share one generated dataset and split; a failed cell is
    recorded and the remaining cells still run.
    """
    gen_cfg = gen_config_from(resolved)
    full = datamod.generate(gen_cfg)
    train_split, test_split = datamod.split(full, resolved["gen"]["train_fraction"],
                                            resolved["gen"]["split_seed"])
    seeds = [int(s) for s in str(resolved["ablate"]["seeds"]).split(",") if s]
    if not seeds:
        raise ConfigError("ablate.seeds must name at least one seed")
    cells = ablation_cells(resolved["ablate"]["grid"])
    eval_seed = resolved["eval"]["eval_seed"]
    rows: list[list] = []
    for cell, patch in cells:
        per_seed: dict[str, list[float]] = {"r1": [], "r5": [], "r10": [], "map": []}
        for seed in seeds:
            cfg = TrainConfig(**{**resolved["train"], **patch, "seed": seed})
            try:
                cfg.validate()
                ckpt, _ = train(cfg, train_split)
                result = evaluate_model(dict_to_params(ckpt.params), test_split,
                                        cfg.mapping, eval_seed=eval_seed)
            except (ValueError, NumericAbort, MiningStarvationError) as exc:
                rows.append([cell, seed, "error", "error", "error", str(exc)])
                continue
            values = (result.recalls[1], result.recalls[5], result.recalls[10],
                      result.mean_ap)
            for key, value in zip(("r1", "r5", "r10", "map"), values):
                per_seed[key].append(value)
            rows.append([cell, seed, *values])
        if per_seed["map"]:
            rows.append([cell, "median",
                         *(float(np.median(per_seed[k])) for k in ("r1", "r5", "r10", "map"))])
    return rows


def cmd_ablate(args) -> int:
    resolved = load_config(args.config, args.set)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = run_ablation(resolved)
    write_csv(out_dir / "ablation.csv",
              ["cell", "seed", "r1", "r5", "r10", "map"], rows)
    write_resolved(resolved, out_dir)
    for row in rows:
        if row[1] == "median":
            print(f"{row[0]:22s} median R@1={row[2]:.4f} mAP={row[5]:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    resolved = load_config(args.config, args.set)
    section = resolved["gradcheck"]
    report = run_battery(points=section["points"], seed=section["seed"],
                         eps=section["eps"], tol=section["tol"])
    rows = [[r.name, r.max_rel_error, r.tol, "pass" if r.passed else "FAIL"]
            for r in report.ops + report.losses]
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_csv(out_dir / "gradcheck.csv",
                  ["check", "max_rel_error", "tol", "status"], rows)
        write_resolved(resolved, out_dir)
    for name, err, tol, status in rows:
        print(f"{status:4s} {name:22s} max_rel_error={err:.3e} (tol {tol:g})")
    if not report.passed:
        failing = ", ".join(r.name for r in report.failures())
        print(f"gradient check FAILED: {failing}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_diag(args) -> int:
    resolved = load_config(args.config, args.set)
    ckpt = load_checkpoint(args.checkpoint)
    dataset = datamod.read(args.data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = evaluate_model(dict_to_params(ckpt.params), dataset,
                            ckpt.config.mapping,
                            eval_seed=resolved["eval"]["eval_seed"])
    write_eval_outputs(result, out_dir, include_metrics=False)
    write_resolved(resolved, out_dir)
    print(f"diagnostic curves written to {out_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="weakpair",
        description="Uncertainty-aware weak-pair metric learning workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False, checkpoint=False, out_required=True):
        p.add_argument("--config", default=None, help="INI config file")
        p.add_argument("--set", action="append", default=[],
                       metavar="SECTION.KEY=VALUE", help="override one config key")
        p.add_argument("--seed", type=int, default=None,
                       help="override the command's primary seed")
        if data:
            p.add_argument("--data", required=True, help="dataset file")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="checkpoint file")
        if out_required:
            p.add_argument("--out", required=True, help="output directory")
        else:
            p.add_argument("--out", default=None, help="output directory")

    common(sub.add_parser("gen", help="generate and split a synthetic dataset"))
    common(sub.add_parser("train", help="train a model on a dataset"), data=True)
    eval_parser = sub.add_parser("eval", help="evaluate a checkpoint")
    common(eval_parser, data=True, checkpoint=True)
    eval_parser.add_argument("--train-data", default=None,
                             help="cross-check for identity leakage against "
                                  "this training dataset")
    common(sub.add_parser("ablate", help="run an ablation grid"))
    common(sub.add_parser("gradcheck", help="verify gradients"), out_required=False)
    common(sub.add_parser("diag", help="re-emit diagnostic curves"),
           data=True, checkpoint=True)
    return parser


_HANDLERS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval,
             "ablate": cmd_ablate, "gradcheck": cmd_gradcheck, "diag": cmd_diag}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except (DatasetFormatError, CheckpointFormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericAbort, MiningStarvationError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        # covers ConfigError and config/dataclass validation failures
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
