"""Command-line entry point: ``collabcp {generate,train,calibrate,eval,suite,report}``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import config as cfgmod
from . import harness, persistence
from .conformal import save_calibration
from .scenegen import make_splits

log = logging.getLogger("collabcp")


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", type=Path, help="key = value config file with [section] headers")
    p.add_argument("--out", type=Path, required=out_required, help="output directory")
    p.add_argument("--seed", type=int, help="seed for data, initialization, and attacks")
    p.add_argument("--paper-defaults", action="store_true", help="start from the published hyperparameters")


def _attack_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--fusion", choices=cfgmod.FUSION_MODES)
    p.add_argument("--pgd-eta", type=float)
    p.add_argument("--pgd-eps", type=float)
    p.add_argument("--pgd-iters", type=int)
    p.add_argument("--attackers", type=int, help="attackers per scene (M)")
    p.add_argument("--pgd-objective", choices=cfgmod.OBJECTIVES)
    p.add_argument("--attack-phase", choices=cfgmod.ATTACK_PHASES)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="collabcp", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="render train/val/test scenes to a dataset directory")
    _common(p)

    p = sub.add_parser("train", help="train one model and calibrate it on the validation split")
    _common(p)
    _attack_flags(p)
    p.add_argument("--data", type=Path, help="dataset directory (generated from the config if omitted)")
    p.add_argument("--no-uq", action="store_true", help="train without the uncertainty head")

    p = sub.add_parser("calibrate", help="recompute the conformal quantile of a checkpoint")
    p.add_argument("--model", type=Path, required=True, help="checkpoint file")
    p.add_argument("--data", type=Path, required=True, help="dataset directory; its val split is used")
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--out", type=Path, required=True, help="calibration file to write")

    p = sub.add_parser("eval", help="score a checkpoint on the test split")
    _common(p, out_required=False)
    _attack_flags(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--calibration", type=Path, help="calibration file (default: checkpoint with .cal suffix)")
    p.add_argument("--scenario", default="eval")

    p = sub.add_parser("suite", help="run a scenario suite and write its metrics CSV")
    p.add_argument("name", choices=harness.SUITES)
    _common(p)
    _attack_flags(p)
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds starting at --seed")

    p = sub.add_parser("report", help="aligned tables and long-format CSVs from suite CSVs")
    p.add_argument("csv", type=Path, nargs="+")
    p.add_argument("--out", type=Path, help="directory for .txt tables and -long.csv files")
    return parser


def resolve_config(args) -> cfgmod.ExperimentConfig:
    """Defaults, then the config file, then command-line flags."""
    cfg = cfgmod.paper_defaults() if getattr(args, "paper_defaults", False) else cfgmod.ExperimentConfig()
    if getattr(args, "config", None) is not None:
        cfg = cfgmod.load(args.config, base=cfg)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(dataset={"seed": args.seed}, training={"seed": args.seed}, attack={"seed": args.seed})
    attack = {}
    for flag, key in (("pgd_eta", "eta"), ("pgd_eps", "epsilon"), ("pgd_iters", "pgd_iters"),
                      ("attackers", "num_attackers"), ("pgd_objective", "objective"), ("attack_phase", "phase")):
        value = getattr(args, flag, None)
        if value is not None:
            attack[key] = value
    if attack:
        cfg = cfg.replace(attack=attack)
    if getattr(args, "fusion", None) is not None:
        cfg = cfg.replace(model={"fusion": args.fusion})
    if getattr(args, "no_uq", False):
        cfg = cfg.replace(model={"uq_head": False})
    return cfg.validate()


def _load_data(path: Optional[Path], cfg: cfgmod.ExperimentConfig):
    if path is None:
        return make_splits(cfg.dataset)
    data, _ = persistence.load_dataset(path)
    return data


def cmd_generate(args) -> int:
    cfg = resolve_config(args)
    data = make_splits(cfg.dataset)
    persistence.save_dataset(data, args.out, cfg)
    print(f"wrote {sum(data.sizes)} scenes ({'/'.join(map(str, data.sizes))}) to {args.out} [preset {cfg.preset}]")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    data = _load_data(args.data, cfg)
    artifact = harness.train(cfg, data)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "config.txt").write_text(cfgmod.dumps(cfg))
    path = harness.save_artifact(artifact, args.out, "model")
    q = artifact.calibration.q_hat if artifact.calibration is not None else None
    print(f"wrote {path} (epochs {cfg.training.epochs}, q_hat {q}) [preset {cfg.preset}]")
    return 0


def cmd_calibrate(args) -> int:
    artifact = harness.load_artifact(args.model)
    data, _ = persistence.load_dataset(args.data)
    result = artifact.estimator.calibrate(data.val.observations, data.val.boxes, alpha=args.alpha)
    save_calibration(result, args.out)
    print(f"q_hat = {result.q_hat!r} from {result.n_cal} scores (alpha {args.alpha})")
    return 0


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    artifact = harness.load_artifact(args.model, args.calibration)
    data, _ = persistence.load_dataset(args.data)
    attack = dataclasses.replace(cfg.attack) if cfg.attack.attacks_test else None
    row = harness.evaluate(
        artifact,
        data.test,
        attack,
        conformal=artifact.calibration is not None,
        calibrated_metrics=cfg.conformal.calibrated_metrics,
        scenario=args.scenario,
        seed=cfg.training.seed,
    )
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        target = args.out / "metrics.csv"
        persistence.write_metrics(target, [row], append=target.exists())
    print(persistence.MetricsRow.CSV_HEADER)
    print(row.to_csv())
    return 0


def cmd_suite(args) -> int:
    cfg = resolve_config(args)
    seeds = range(cfg.training.seed, cfg.training.seed + args.seeds)
    rows = harness.run_scenario_suite(args.name, cfg, args.out, seeds)
    print(f"[preset {cfg.preset}, epochs {cfg.training.epochs}, scenes {'/'.join(map(str, cfgmod.split_sizes(cfg.dataset)))}]")
    print(harness.format_table(rows, args.name), end="")
    return 0


def cmd_report(args) -> int:
    print(harness.report(args.csv, args.out), end="")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "eval": cmd_eval,
    "suite": cmd_suite,
    "report": cmd_report,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (cfgmod.ConfigError, persistence.FormatError, harness.SuiteError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
