"""Training, evaluation, and scenario suites on a shared dataset and seed protocol.

A suite trains each distinct model once per seed (models are keyed by fusion
mode, uncertainty head, and adversarial training) and evaluates it under every
scenario that needs it. All scenarios of one seed share the same test-time
attacker draws, so attacked rows are compared under the same attack.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import config as cfgmod
from . import persistence
from .conformal import CalibrationResult, empirical_coverage, load_calibration, save_calibration
from .estimator import CollaborativeDetector, EpochLog
from .metrics import MetricsRow, average_precision, kld_metric, nll_metric
from .scenegen import DatasetSplit, Split, make_splits

log = logging.getLogger(__name__)

SUITES = ("main", "ablation", "objective", "sensitivity")
_EVAL_STREAM = 7


class SuiteError(ValueError):
    pass


@dataclass(frozen=True)
class Scenario:
    """One row of a suite: which model to train and how to evaluate it."""

    label: str
    uq_head: bool
    adversarial_training: bool
    test_attack: bool
    conformal: bool
    fusion: Optional[str] = None
    objective: Optional[str] = None
    epsilon: Optional[float] = None
    pgd_iters: Optional[int] = None

    def model_key(self, cfg: cfgmod.ExperimentConfig) -> Tuple[str, bool, bool]:
        return (self.fusion or cfg.model.fusion, self.uq_head, self.adversarial_training)


BASE = "base"
DM = "dm"
DM_CP = "dm-cp-pgd-train-test"

ABLATION = (
    Scenario("base", False, False, False, False),
    Scenario("base-pgd-test", False, False, True, False),
    Scenario("dm", True, False, False, False),
    Scenario("dm-pgd-test", True, False, True, False),
    Scenario("dm-pgd-train-test", True, True, True, False),
    Scenario("dm-cp-pgd-train", True, True, False, True),
    Scenario(DM_CP, True, True, True, True),
)


def suite_scenarios(name: str, cfg: cfgmod.ExperimentConfig) -> List[Scenario]:
    if name == "ablation":
        return list(ABLATION)
    if name == "main":
        rows = []
        for fusion in cfgmod.FUSION_MODES:
            rows.append(Scenario(f"{fusion}:base-pgd-test", False, False, True, False, fusion=fusion))
            rows.append(Scenario(f"{fusion}:{DM_CP}", True, True, True, True, fusion=fusion))
        return rows
    if name == "objective":
        return [Scenario(f"{DM_CP}[{obj}]", True, True, True, True, objective=obj) for obj in cfgmod.OBJECTIVES]
    if name == "sensitivity":
        grid = [(0.1, 25), (0.5, 25), (0.9, 25), (0.5, 15), (0.5, 35)]
        return [
            Scenario(f"{DM_CP}[eps={eps} iters={k}]", True, True, True, True, epsilon=eps, pgd_iters=k)
            for eps, k in grid
        ]
    raise SuiteError(f"unknown suite {name!r}; expected one of {SUITES}")


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainedArtifact:
    estimator: CollaborativeDetector
    calibration: Optional[CalibrationResult] = None
    training_log: List[EpochLog] = field(default_factory=list)

    @property
    def params(self) -> Dict[str, np.ndarray]:
        return self.estimator.params_


def build_estimator(cfg: cfgmod.ExperimentConfig, **overrides) -> CollaborativeDetector:
    """Map an experiment config onto estimator parameters."""
    m, t, a, c = cfg.model, cfg.training, cfg.attack, cfg.conformal
    params = dict(
        fusion=m.fusion,
        grid_size=cfg.dataset.grid_size,
        out_grid=m.out_grid,
        hidden=m.hidden,
        feature_dim=m.feature_dim,
        uq_head=m.uq_head,
        learning_rate=t.learning_rate,
        epochs=t.epochs,
        batch_size=t.batch_size,
        w_reg=t.w_reg,
        w_cls=t.w_cls,
        w_uq=t.w_uq,
        adversarial_training=a.attacks_train,
        pgd_eta=a.eta,
        pgd_eps=a.epsilon,
        pgd_iters=a.pgd_iters,
        pgd_objective=a.objective,
        n_attackers=a.num_attackers,
        random_start=a.random_start,
        alpha=c.alpha,
        match_iou=c.match_iou,
        confidence_threshold=m.confidence_threshold,
        init_scale=m.init_scale,
        feature_scale=m.feature_scale,
        max_grad_norm=t.max_grad_norm or None,
        random_state=t.seed,
    )
    params.update(overrides)
    return CollaborativeDetector(**params)


def train(cfg: cfgmod.ExperimentConfig, data: Optional[DatasetSplit] = None, **overrides) -> TrainedArtifact:
    """Fit on the training split and calibrate on the validation split every epoch."""
    cfg.validate()
    data = data if data is not None else make_splits(cfg.dataset)
    est = build_estimator(cfg, **overrides)
    est.fit(data.train.observations, data.train.boxes, data.val.observations, data.val.boxes)
    return TrainedArtifact(est, est.calibration_, list(est.training_log_))


# ---------------------------------------------------------------------------
# evaluation

def evaluation_rng(seed: int, attack_seed: int) -> np.random.Generator:
    # independent of every training stream, shared by all scenarios of a seed
    return np.random.default_rng([int(seed), int(attack_seed), _EVAL_STREAM])


def evaluate(
    artifact: TrainedArtifact,
    split: Split,
    attack: Optional[cfgmod.AttackConfig] = None,
    *,
    conformal: bool = False,
    calibrated_metrics: bool = True,
    scenario: str = "default",
    seed: int = 0,
    rng: Optional[np.random.Generator] = None,
) -> MetricsRow:
    """Score one split, optionally under a test-time PGD attack.

    Rows for models without an uncertainty head carry no KLD/NLL. Coverage is
    reported only when ``conformal`` is set, and then requires a calibration.
    """
    est = artifact.estimator
    if attack is not None and attack.num_attackers == 0:
        attack = None
    if rng is None:
        rng = evaluation_rng(seed, attack.seed if attack is not None else 0)
    dets = est.predict(split.observations, split.boxes, attack, rng)
    scored = [
        (np.array([d.box for d in ds]).reshape(-1, 4), np.array([d.confidence for d in ds]))
        for ds in dets
    ]
    ap50 = average_precision(scored, split.boxes, 0.5)
    ap70 = average_precision(scored, split.boxes, 0.7)
    row = MetricsRow(scenario, ap50, ap70, seed=seed)
    if not est.uq_head:
        return row
    q_hat = None
    if conformal:
        if artifact.calibration is None:
            raise SuiteError(f"{scenario}: coverage requested but the artifact has no calibration")
        q_hat = artifact.calibration.q_hat
    mc = est.matched_coordinates(dets, split.boxes)
    if mc.residual.size == 0:
        return row
    sigma = mc.sigma
    if q_hat is not None and calibrated_metrics:
        if math.isinf(q_hat):
            row.kld = row.nll = math.inf
            sigma = None
        else:
            sigma = q_hat * sigma
    if sigma is not None:
        row.kld = kld_metric(mc.residual, sigma)
        row.nll = nll_metric(mc.residual, sigma)
    if q_hat is not None:
        row.coverage = empirical_coverage(mc.residual, mc.sigma, q_hat)
    return row


def evaluation_attack(cfg: cfgmod.ExperimentConfig, scenario: Scenario) -> cfgmod.AttackConfig:
    changes = {}
    if scenario.objective is not None:
        changes["objective"] = scenario.objective
    if scenario.epsilon is not None:
        changes["epsilon"] = scenario.epsilon
    if scenario.pgd_iters is not None:
        changes["pgd_iters"] = scenario.pgd_iters
    return dataclasses.replace(cfg.attack, **changes)


def scenario_config(cfg: cfgmod.ExperimentConfig, scenario: Scenario, seed: int) -> cfgmod.ExperimentConfig:
    """Training config for the model a scenario needs (test-time settings excluded)."""
    phase = "train" if scenario.adversarial_training else "none"
    return cfg.replace(
        dataset={"seed": seed},
        model={"fusion": scenario.fusion or cfg.model.fusion, "uq_head": scenario.uq_head},
        training={"seed": seed},
        attack={"phase": phase},
        scenario=scenario.label,
    )


# ---------------------------------------------------------------------------
# suites

def _stem(suite: str, seed: int, key: Tuple[str, bool, bool]) -> str:
    fusion, uq, adv = key
    return f"{suite}-seed{seed}-{fusion}-{'dm' if uq else 'base'}{'-adv' if adv else ''}"


def save_artifact(artifact: TrainedArtifact, out_dir, stem: str) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    persistence.save_checkpoint(out / f"{stem}.ckpt", artifact.params, artifact.estimator.get_params())
    if artifact.calibration is not None:
        save_calibration(artifact.calibration, out / f"{stem}.cal")
    lines = ["epoch,l_reg,l_cls,l_uq,total,q_hat"]
    for e in artifact.training_log:
        b = e.breakdown
        q = "" if e.q_hat is None else repr(e.q_hat)
        lines.append(f"{e.epoch},{b.l_reg!r},{b.l_cls!r},{b.l_uq!r},{b.total!r},{q}")
    (out / f"{stem}.log.csv").write_text("\n".join(lines) + "\n")
    return out / f"{stem}.ckpt"


def load_artifact(checkpoint, calibration=None) -> TrainedArtifact:
    """Rebuild a trained estimator from a checkpoint (and optional calibration file)."""
    params, meta = persistence.load_checkpoint(checkpoint)
    est = CollaborativeDetector(**estimator_params_from_meta(meta))
    est.params_ = params
    cal_path = Path(calibration) if calibration is not None else Path(checkpoint).with_suffix(".cal")
    cal = load_calibration(cal_path) if cal_path.exists() else None
    est.calibration_ = cal
    est.training_log_ = []
    return TrainedArtifact(est, cal, [])


def estimator_params_from_meta(meta: Dict[str, str]) -> Dict[str, object]:
    defaults = CollaborativeDetector().get_params()
    unknown = set(meta) - set(defaults)
    if unknown:
        raise persistence.FormatError(f"checkpoint has unknown parameters {sorted(unknown)}")
    out = {}
    for key, raw in meta.items():
        default = defaults[key]
        if raw == "None":
            out[key] = None
        elif isinstance(default, bool):
            out[key] = raw == "True"
        elif isinstance(default, int):
            out[key] = int(raw)
        elif isinstance(default, float) or default is None:
            out[key] = float(raw)
        else:
            out[key] = raw
    return out


def run_scenario_suite(
    name: str,
    cfg: cfgmod.ExperimentConfig,
    out_dir=None,
    seeds: Optional[Sequence[int]] = None,
) -> List[MetricsRow]:
    """Train and evaluate every scenario of a suite for each seed.

    With ``out_dir`` set, writes ``{name}.csv`` (appended row by row),
    ``{name}-config.txt`` echoing the full config and preset, and a checkpoint,
    calibration file, and training log after every trained model.
    """
    scenarios = suite_scenarios(name, cfg)
    cfg.validate()
    seeds = list(seeds) if seeds is not None else [cfg.training.seed]
    csv_path = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{name}-config.txt").write_text(
            f"# suite = {name}\n# seeds = {' '.join(map(str, seeds))}\n" + cfgmod.dumps(cfg)
        )
        csv_path = out / f"{name}.csv"
        persistence.write_metrics(csv_path, [])
    rows: List[MetricsRow] = []
    for seed in seeds:
        data = make_splits(dataclasses.replace(cfg.dataset, seed=seed))
        models: Dict[Tuple[str, bool, bool], TrainedArtifact] = {}
        for sc in scenarios:
            key = sc.model_key(cfg)
            if key not in models:
                log.info("seed %d: training %s", seed, key)
                models[key] = train(scenario_config(cfg, sc, seed), data)
                if out_dir is not None:
                    save_artifact(models[key], out_dir, _stem(name, seed, key))
            attack = evaluation_attack(cfg, sc) if sc.test_attack else None
            row = evaluate(
                models[key],
                data.test,
                attack,
                conformal=sc.conformal,
                calibrated_metrics=cfg.conformal.calibrated_metrics,
                scenario=sc.label,
                seed=seed,
            )
            rows.append(row)
            if csv_path is not None:
                persistence.write_metrics(csv_path, [row], append=True)
    return rows


# ---------------------------------------------------------------------------
# reporting

REPORT_COLUMNS = (("ap50", "AP@IoU=0.5"), ("ap70", "AP@IoU=0.7"), ("kld", "KLD"), ("nll", "NLL"), ("coverage", "Coverage"))


def _summary(values: List[Optional[float]], percent: bool) -> str:
    vals = [v for v in values if v is not None]
    if not vals:
        return "-"
    arr = np.asarray(vals) * (100.0 if percent else 1.0)
    if len(arr) == 1:
        return f"{arr[0]:.2f}"
    return f"{arr.mean():.2f} ± {arr.std(ddof=1):.2f}"


def format_table(rows: Iterable[MetricsRow], title: str = "") -> str:
    """Aligned text table, one line per scenario, mean ± std over seeds.

    AP and coverage are shown in percent.
    """
    by_label: Dict[str, List[MetricsRow]] = {}
    for r in rows:
        by_label.setdefault(r.scenario, []).append(r)
    header = ["Scheme"] + [name for _, name in REPORT_COLUMNS] + ["seeds"]
    body = []
    for label, group in by_label.items():
        cells = [label]
        for attr, _ in REPORT_COLUMNS:
            cells.append(_summary([getattr(r, attr) for r in group], attr in ("ap50", "ap70", "coverage")))
        cells.append(str(len(group)))
        body.append(cells)
    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]

    def line(cells):
        return "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths)))

    out = [title] if title else []
    out += [line(header), "  ".join("-" * w for w in widths)]
    out += [line(c) for c in body]
    return "\n".join(out) + "\n"


def long_format(rows: Iterable[MetricsRow]) -> str:
    """Plot-ready CSV: ``scenario,seed,metric,value`` with empty metrics skipped."""
    lines = ["scenario,seed,metric,value"]
    for r in rows:
        for attr, _ in REPORT_COLUMNS:
            v = getattr(r, attr)
            if v is not None:
                lines.append(f"{r.scenario},{r.seed},{attr},{float(v)!r}")
    return "\n".join(lines) + "\n"


def report(csv_paths: Sequence, out_dir=None) -> str:
    """Tables for each suite CSV; writes ``{stem}.txt`` and ``{stem}-long.csv`` when ``out_dir`` is set."""
    texts = []
    for path in csv_paths:
        path = Path(path)
        rows = persistence.read_metrics(path)
        title = path.stem
        echo = path.with_name(f"{path.stem}-config.txt")
        if echo.exists():
            preset = [ln for ln in echo.read_text().splitlines() if ln.startswith("preset = ")]
            if preset:
                title += f" ({preset[0].replace(' = ', ': ')})"
        text = format_table(rows, title)
        texts.append(text)
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            (out / f"{path.stem}.txt").write_text(text)
            (out / f"{path.stem}-long.csv").write_text(long_format(rows))
    return "\n".join(texts)
