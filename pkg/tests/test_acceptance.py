"""End-to-end acceptance checks; each records a one-line verdict for the summary."""

import dataclasses
import math
import time
from fractions import Fraction

import numpy as np
import pytest

from collabcp import autodiff as ad
from collabcp import detector, harness
from collabcp.attack import attacker_mask, perturb_payload
from collabcp.config import AttackConfig, DatasetConfig, ExperimentConfig, ModelConfig
from collabcp.conformal import conformal_quantile
from collabcp.losses import LossWeights, loss_cls, loss_reg, loss_uq_from_log_variance, total_loss
from collabcp.metrics import average_precision, iou, kld_metric, nll_metric
from collabcp.scenegen import generate_scene, make_splits, render_scene
from conftest import record

SEEDS = range(10)
FS = ModelConfig().feature_scale


def check(criterion, passed, detail):
    record(criterion, passed, detail)
    assert passed, detail


# -- 1. coverage guarantee ---------------------------------------------------

def test_criterion_1_coverage_guarantee():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    n_cal, n_test, reps, alpha = 99, 1000, 1000, 0.1
    cov = np.empty(reps)
    for i in range(reps):
        q = conformal_quantile(np.abs(rng.standard_normal(n_cal)), alpha)
        cov[i] = np.mean(np.abs(rng.standard_normal(n_test)) <= q)
    mean, se = cov.mean(), cov.std(ddof=1) / math.sqrt(reps)
    elapsed = time.perf_counter() - t0
    ok = 0.90 - 3 * se <= mean <= 0.91 + 3 * se and elapsed < 30
    check(1, ok, f"mean coverage {mean:.4f} (3 SE = {3 * se:.4f}), band [0.90, 0.91], {elapsed:.1f}s")


# -- 2. quantile correctness -------------------------------------------------

def sort_and_index(scores, alpha):
    s = sorted(scores.tolist())
    rank = math.ceil((len(s) + 1) * (1 - Fraction(str(alpha))))
    return s[rank - 1] if rank <= len(s) else math.inf


def test_criterion_2_quantile_matches_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    mismatches = 0
    for _ in range(1000):
        scores = rng.exponential(size=rng.integers(1, 501))
        for alpha in (0.5, 0.2, 0.1, 0.05):
            mismatches += conformal_quantile(scores, alpha) != sort_and_index(scores, alpha)
    elapsed = time.perf_counter() - t0
    check(2, mismatches == 0 and elapsed < 5, f"{mismatches} mismatches over 4000 cases, {elapsed:.1f}s")


# -- 3. PGD budget and efficacy ----------------------------------------------

def test_criterion_3_pgd_budget_and_efficacy():
    t0 = time.perf_counter()
    cfg = DatasetConfig()
    attack = AttackConfig(eta=0.1, epsilon=0.5, pgd_iters=25)
    within, raised = 0, 0
    for k in range(100):
        rng = np.random.default_rng(k)
        params = detector.init_params(16, 8, 32, 24, "intermediate", True, rng)
        scene = generate_scene(10_000 + k, cfg)
        obs = render_scene(scene, cfg, noise_seed=k).reshape(1, cfg.n_agents, -1)
        targets = detector.batch_targets([scene.boxes], 8)
        payload = detector.shared_payload(obs, params, "intermediate", FS).data
        mask = attacker_mask(1, cfg.n_agents, 2, rng)
        adv = perturb_payload(params, payload, mask, targets, attack, "intermediate", rng, FS)
        within += np.max(np.abs(adv - payload)) <= attack.epsilon
        before = loss_cls(detector.forward_from_payload(payload, params, "intermediate", FS)[0], targets["cls"])
        after = loss_cls(detector.forward_from_payload(adv, params, "intermediate", FS)[0], targets["cls"])
        raised += after.item() >= before.item()
    elapsed = time.perf_counter() - t0
    ok = within == 100 and raised >= 95 and elapsed < 60
    check(3, ok, f"budget held {within}/100, L_cls rose {raised}/100, {elapsed:.1f}s")


# -- 4. gradient correctness -------------------------------------------------

def detector_graph(seed):
    rng = np.random.default_rng(seed)
    cfg = DatasetConfig(grid_size=8)
    scene = generate_scene(seed, cfg)
    obs = render_scene(scene, cfg, noise_seed=seed).reshape(1, cfg.n_agents, -1)
    targets = detector.batch_targets([scene.boxes], 2)
    params = detector.init_params(8, 2, 4, 5, "intermediate", True, rng)
    # move off the initial point so every head carries signal
    params = {k: v + 0.3 * rng.standard_normal(v.shape) for k, v in params.items()}

    def fn(inputs, p):
        payload = detector.shared_payload(inputs["obs"], p, "intermediate", FS)
        logits, boxes, log_var = detector.forward_from_payload(payload, p, "intermediate", FS)
        total, _ = total_loss(
            loss_reg(boxes, targets["box"], targets["mask"]),
            loss_cls(logits, targets["cls"]),
            loss_uq_from_log_variance(boxes, targets["box"], log_var, targets["mask"]),
            LossWeights(1.0, 1.0, 1.0),
        )
        return {"L": total}

    return ad.Graph(fn, {"obs": obs.shape}, params), {"obs": obs}


def test_criterion_4_gradients_match_finite_differences():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        graph, inputs = detector_graph(seed)
        for leaf in graph.params:
            worst = max(worst, ad.finite_difference_check(graph, inputs, leaf, "L"))
    elapsed = time.perf_counter() - t0
    check(4, worst < 1e-4 and elapsed < 60, f"max relative error {worst:.2e} over 20 seeds, {elapsed:.1f}s")


# -- 5, 6, 7. directional results on the desk benchmark ----------------------

def ap50(art, split, attack, seed):
    return harness.evaluate(art, split, attack, seed=seed).ap50


@pytest.fixture(scope="session")
def desk_runs():
    """Clean-trained, uncertainty-head, and adversarially trained models for ten seeds."""
    t0 = time.perf_counter()
    cfg = ExperimentConfig().replace(model={"fusion": "intermediate"})
    attack = dataclasses.replace(cfg.attack)
    runs = []
    for seed in SEEDS:
        data = make_splits(dataclasses.replace(cfg.dataset, seed=seed))
        models = {}
        for name, scenario in (("base", "base-pgd-test"), ("dm", "dm-pgd-test"), ("adv", harness.DM_CP)):
            sc = next(s for s in harness.ABLATION if s.label == scenario)
            models[name] = harness.train(harness.scenario_config(cfg, sc, seed), data)
        r = {"seed": seed, "data": data, "models": models}
        for name, art in models.items():
            r[name] = ap50(art, data.test, None, seed)
            r[name + "_atk"] = ap50(art, data.test, attack, seed)
        r["cp_row"] = harness.evaluate(models["adv"], data.test, attack, conformal=True, scenario=harness.DM_CP, seed=seed)
        r["base_row"] = harness.evaluate(models["base"], data.test, attack, scenario="base-pgd-test", seed=seed)
        runs.append(r)
    return runs, time.perf_counter() - t0


@pytest.mark.slow
def test_criterion_5_attack_hurts_and_training_defends(desk_runs):
    runs, elapsed = desk_runs
    drop = sum(r["base_atk"] <= 0.8 * r["base"] for r in runs)
    defend = sum(r["adv_atk"] > r["base_atk"] for r in runs)
    detail = ", ".join(f"s{r['seed']}: {r['base']:.3f}/{r['base_atk']:.3f}/{r['adv_atk']:.3f}" for r in runs)
    ok = drop >= 8 and defend >= 8 and elapsed < 600
    check(5, ok, f"(a) drop >= 20% in {drop}/10, (b) defended > attacked base in {defend}/10, {elapsed:.0f}s "
                 f"[clean/attacked base/attacked defended: {detail}]")


@pytest.mark.slow
def test_criterion_6_component_ablation(desk_runs):
    runs, elapsed = desk_runs
    dm_vs_base = sum(r["dm_atk"] > r["base_atk"] for r in runs)
    adv_vs_dm = sum(r["adv_atk"] > r["dm_atk"] for r in runs)
    schema = all(
        r["cp_row"].kld is not None and math.isfinite(r["cp_row"].kld) and r["base_row"].kld is None
        and r["base_row"].nll is None for r in runs
    )
    detail = ", ".join(f"s{r['seed']}: {r['base_atk']:.3f}/{r['dm_atk']:.3f}/{r['adv_atk']:.3f}" for r in runs)
    ok = dm_vs_base >= 8 and adv_vs_dm >= 8 and schema
    check(6, ok, f"dm > base under attack {dm_vs_base}/10, adv > dm under attack {adv_vs_dm}/10, "
                 f"schema {'ok' if schema else 'broken'} [attacked base/dm/adv: {detail}]")


@pytest.mark.slow
def test_criterion_7_budget_sensitivity(desk_runs):
    runs, _ = desk_runs
    t0 = time.perf_counter()
    monotone, detail = 0, []
    for r in runs:
        aps = [ap50(r["models"]["adv"], r["data"].test, AttackConfig(epsilon=eps), r["seed"]) for eps in (0.1, 0.5, 0.9)]
        monotone += aps[0] >= aps[1] >= aps[2]
        detail.append("/".join(f"{a:.3f}" for a in aps))
    elapsed = time.perf_counter() - t0
    check(7, monotone >= 8 and elapsed < 600,
          f"AP non-increasing over eps 0.1/0.5/0.9 in {monotone}/10, {elapsed:.0f}s [{', '.join(detail)}]")


# -- 8. metric identities ----------------------------------------------------

def test_criterion_8_metric_identities():
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(100):
        r, s = rng.normal(size=40), rng.uniform(0.01, 10.0, size=40)
        worst = max(worst, abs(nll_metric(r, s) - kld_metric(r, s) - 0.5 * math.log(2 * math.pi)))
    gt = [np.array([[0.0, 0.0, 1.0, 1.0]])]
    hit, miss = [0.0, 0.0, 1.0, 1.0], [5.0, 5.0, 6.0, 6.0]
    ap_a = average_precision([(np.array([hit, miss]), np.array([0.9, 0.8]))], gt)
    ap_b = average_precision([(np.array([miss, hit]), np.array([0.9, 0.8]))], gt)
    third = abs(iou([0, 0, 1, 1], [0.5, 0, 1.5, 1]) - 1 / 3)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and ap_a == 1.0 and ap_b == 0.5 and third <= 1e-12 and elapsed < 5
    check(8, ok, f"NLL-KLD offset error {worst:.1e}, AP examples {ap_a}/{ap_b}, IoU error {third:.1e}, {elapsed:.2f}s")


# -- 9. determinism ----------------------------------------------------------

@pytest.mark.slow
def test_criterion_9_suite_is_byte_deterministic(desk_runs, tmp_path):
    _, c6_elapsed = desk_runs
    t0 = time.perf_counter()
    cfg = ExperimentConfig()
    harness.run_scenario_suite("ablation", cfg, tmp_path / "a")
    harness.run_scenario_suite("ablation", cfg, tmp_path / "b")
    elapsed = time.perf_counter() - t0
    a = (tmp_path / "a" / "ablation.csv").read_bytes()
    b = (tmp_path / "b" / "ablation.csv").read_bytes()
    ok = a == b and len(a.splitlines()) == 8 and elapsed <= 2 * c6_elapsed
    check(9, ok, f"CSVs {'identical' if a == b else 'differ'} ({len(a)} bytes), {elapsed:.0f}s "
                 f"(limit {2 * c6_elapsed:.0f}s)")
