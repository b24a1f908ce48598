import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from collabcp import autodiff as ad
from collabcp import detector
from collabcp.attack import attacker_mask, objective_loss, perturb_payload, pgd, pgd_perturb, select_attackers
from collabcp.config import AttackConfig, ConfigError, DatasetConfig
from collabcp.losses import loss_cls
from collabcp.scenegen import generate_scene, render_scene


def test_no_attackers():
    assert select_attackers(4, 0, np.random.default_rng(0)) == []


def test_two_agents_one_attacker():
    rng = np.random.default_rng(0)
    assert all(select_attackers(2, 1, rng) == [1] for _ in range(20))


def test_too_many_attackers():
    with pytest.raises(ConfigError):
        select_attackers(3, 3, np.random.default_rng(0))


def test_selection_frequency():
    rng = np.random.default_rng(123)
    counts = np.zeros(6)
    for _ in range(10_000):
        picks = select_attackers(6, 2, rng)
        assert len(set(picks)) == 2 and 0 not in picks
        counts[picks] += 1
    np.testing.assert_allclose(counts[1:] / 10_000, 0.4, atol=0.02)


def test_attacker_mask_rows():
    mask = attacker_mask(50, 4, 2, np.random.default_rng(1))
    assert mask.shape == (50, 4) and np.all(mask.sum(axis=1) == 2) and not mask[:, 0].any()


def linear_probe(x):
    return ad.sum(x)


def test_zero_budget_is_identity():
    x = np.random.default_rng(0).normal(size=(2, 3, 5))
    out = pgd(linear_probe, x, np.ones((2, 3, 1), bool), 0.1, 0.0, 25)
    assert out.tobytes() == x.tobytes()


def test_zero_iterations_is_identity():
    x = np.random.default_rng(0).normal(size=(2, 3, 5))
    out = pgd(linear_probe, x, np.ones((2, 3, 1), bool), 0.1, 0.5, 0)
    assert out.tobytes() == x.tobytes()


def test_linear_probe_saturates_the_box():
    x = np.random.default_rng(0).normal(size=(1, 2, 7))
    out = pgd(linear_probe, x, np.ones((1, 2, 1), bool), 0.1, 0.5, 25)
    np.testing.assert_allclose(out, x + 0.5, rtol=0, atol=1e-15)
    assert np.all(np.abs(out - x) <= 0.5)


def test_raw_payload_clamped_to_unit_range():
    x = np.full((1, 2, 4), 0.8)
    out = pgd(linear_probe, x, np.array([[[False], [True]]]), 0.1, 0.5, 25, value_range=(0.0, 1.0))
    np.testing.assert_array_equal(out[0, 1], 1.0)
    assert out[0, 0].tobytes() == x[0, 0].tobytes()


def model_and_scene(seed, fusion="intermediate"):
    cfg = DatasetConfig()
    scene = generate_scene(seed, cfg)
    obs = render_scene(scene, cfg, noise_seed=seed).reshape(1, 4, -1)
    params = detector.init_params(16, 8, 16, 12, fusion, True, np.random.default_rng(seed))
    return params, obs, detector.batch_targets([scene.boxes], 8)


@settings(max_examples=25, deadline=None)
@given(
    st.integers(0, 10**6),
    st.sampled_from(["intermediate", "early", "single"]),
    st.floats(0.0, 1.0),
    st.floats(0.01, 0.5),
    st.integers(0, 8),
    st.sampled_from(["cls", "reg", "cls+reg"]),
)
def test_budget_and_immutability(seed, fusion, eps, eta, iters, objective):
    params, obs, targets = model_and_scene(seed, fusion)
    payload = detector.shared_payload(obs, params, fusion, 10.0).data
    mask = np.array([[False, True, False, True]])
    cfg = AttackConfig(eta=eta, epsilon=eps, pgd_iters=iters, objective=objective)
    adv = perturb_payload(params, payload, mask, targets, cfg, fusion, feature_scale=10.0)
    assert np.max(np.abs(adv - payload)) <= eps
    for n in (0, 2):
        assert adv[0, n].tobytes() == payload[0, n].tobytes()
    if fusion != "intermediate":
        assert adv.min() >= 0 and adv.max() <= 1


def test_pgd_perturb_on_shared_lists():
    params, obs, targets = model_and_scene(3)
    shared = [detector.encode_observation(obs[0, n], params, n, 10.0) for n in range(4)]
    out = pgd_perturb(params, shared, [2], targets, AttackConfig(), "intermediate", 10.0)
    for n in (0, 1, 3):
        assert out[n].payload.tobytes() == shared[n].payload.tobytes()
    assert 0 < np.max(np.abs(out[2].payload - shared[2].payload)) <= 0.5
    flat = {k: v.reshape(1, -1) for k, v in targets.items()}
    clean = detector.forward_from_payload(np.stack([s.payload for s in shared])[None], params, "intermediate", 10.0)
    attacked = detector.forward_from_payload(np.stack([s.payload for s in out])[None], params, "intermediate", 10.0)
    assert loss_cls(attacked[0], flat["cls"]).item() >= loss_cls(clean[0], flat["cls"]).item()


def test_pgd_perturb_errors():
    params, obs, targets = model_and_scene(0)
    shared = [detector.encode_observation(obs[0, n], params, n) for n in range(4)]
    with pytest.raises(ValueError):
        pgd_perturb(params, shared, [1], None, AttackConfig(), "intermediate")
    with pytest.raises(IndexError):
        pgd_perturb(params, shared, [7], targets, AttackConfig(), "intermediate")


class CountingTargets(dict):
    def __init__(self, *a, **kw):
        super().__init__(*a, **kw)
        self.read = set()

    def __getitem__(self, key):
        self.read.add(key)
        return super().__getitem__(key)


def test_cls_objective_never_reads_regression_targets():
    params, obs, targets = model_and_scene(1)
    spy = CountingTargets(targets)
    payload = detector.shared_payload(obs, params, "intermediate", 10.0).data
    perturb_payload(params, payload, np.array([[False, True, True, False]]), spy, AttackConfig(pgd_iters=3),
                    "intermediate", feature_scale=10.0)
    assert spy.read == {"cls"}


def test_unknown_objective():
    with pytest.raises(ConfigError):
        objective_loss("iou", {})


def test_attack_raises_classification_loss():
    hits = 0
    for seed in range(30):
        params, obs, targets = model_and_scene(seed)
        payload = detector.shared_payload(obs, params, "intermediate", 10.0).data
        mask = attacker_mask(1, 4, 2, np.random.default_rng(seed))
        adv = perturb_payload(params, payload, mask, targets, AttackConfig(), "intermediate", feature_scale=10.0)
        before = loss_cls(detector.forward_from_payload(payload, params, "intermediate", 10.0)[0], targets["cls"]).item()
        after = loss_cls(detector.forward_from_payload(adv, params, "intermediate", 10.0)[0], targets["cls"]).item()
        hits += after >= before
    assert hits == 30
