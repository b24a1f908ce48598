"""L-infinity PGD on the information attacker agents share with the ego agent."""

from __future__ import annotations

from typing import Callable, List, Mapping, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import detector
from .config import AttackConfig, ConfigError
from .losses import loss_cls, loss_reg


def select_attackers(n_agents: int, n_attackers: int, rng: np.random.Generator) -> List[int]:
    """Draw attackers uniformly without replacement from the non-ego agents."""
    if n_attackers > n_agents - 1 or n_attackers < 0:
        raise ConfigError(f"cannot pick {n_attackers} attackers among {n_agents - 1} non-ego agents")
    if n_attackers == 0:
        return []
    return sorted(int(i) for i in rng.choice(np.arange(1, n_agents), size=n_attackers, replace=False))


def attacker_mask(n_scenes: int, n_agents: int, n_attackers: int, rng: np.random.Generator) -> np.ndarray:
    """Boolean ``(n_scenes, n_agents)`` with fresh attackers drawn per scene."""
    mask = np.zeros((n_scenes, n_agents), dtype=bool)
    for b in range(n_scenes):
        mask[b, select_attackers(n_agents, n_attackers, rng)] = True
    return mask


def pgd(
    loss_fn: Callable[[ad.Tensor], ad.Tensor],
    payload: np.ndarray,
    attack_mask: np.ndarray,
    eta: float,
    epsilon: float,
    iters: int,
    value_range: Optional[tuple] = None,
    rng: Optional[np.random.Generator] = None,
    random_start: bool = False,
) -> np.ndarray:
    """Signed-gradient ascent on ``loss_fn`` projected onto the epsilon box.

    ``attack_mask`` broadcasts against ``payload`` and selects the entries an
    attacker controls; all other entries are returned bit-identical.
    """
    clean = np.asarray(payload, dtype=np.float64)
    sel = np.broadcast_to(np.asarray(attack_mask, dtype=bool), clean.shape)
    adv = clean.copy()
    if not sel.any() or iters == 0 or epsilon == 0:
        return adv
    lo, hi = clean - epsilon, clean + epsilon
    if random_start:
        rng = rng if rng is not None else np.random.default_rng(0)
        adv = np.where(sel, _project(clean + rng.uniform(-epsilon, epsilon, clean.shape), lo, hi, value_range), clean)
    for _ in range(iters):
        leaf = ad.Tensor(adv)
        loss_fn(leaf).backward()
        g = leaf.grad if leaf.grad is not None else np.zeros_like(adv)
        step = adv + eta * np.sign(g)
        adv = np.where(sel, _project(step, lo, hi, value_range), clean)
    return _within_budget(adv, clean, epsilon)


def _project(x, lo, hi, value_range):
    x = np.minimum(np.maximum(x, lo), hi)
    if value_range is not None:
        x = np.clip(x, *value_range)
    return x


def _within_budget(adv, clean, epsilon):
    # clean +/- epsilon can round one ulp past the budget; step back toward clean
    over = np.abs(adv - clean) > epsilon
    while over.any():
        adv[over] = np.nextafter(adv[over], clean[over])
        over = np.abs(adv - clean) > epsilon
    return adv


def objective_loss(objective: str, targets: Mapping[str, np.ndarray]):
    """Build ``(logits, boxes) -> scalar`` for a PGD objective.

    The ``cls`` objective only touches ``targets["cls"]``.
    """
    if objective == "cls":
        t_cls = targets["cls"]
        return lambda logits, boxes: loss_cls(logits, t_cls)
    if objective == "reg":
        t_box, mask = targets["box"], targets["mask"]
        return lambda logits, boxes: loss_reg(boxes, t_box, mask)
    if objective == "cls+reg":
        t_cls, t_box, mask = targets["cls"], targets["box"], targets["mask"]
        return lambda logits, boxes: loss_cls(logits, t_cls) + loss_reg(boxes, t_box, mask)
    raise ConfigError(f"unknown PGD objective {objective!r}")


def perturb_payload(
    params: Mapping[str, np.ndarray],
    payload: np.ndarray,
    attack_mask: np.ndarray,
    targets: Mapping[str, np.ndarray],
    cfg: AttackConfig,
    fusion: str,
    rng: Optional[np.random.Generator] = None,
    feature_scale: float = 1.0,
) -> np.ndarray:
    """Batched attack on ``(B, N, F)`` payloads; ``attack_mask`` is ``(B, N)``."""
    objective = objective_loss(cfg.objective, targets)

    def loss_fn(p):
        logits, boxes, _ = detector.forward_from_payload(p, params, fusion, feature_scale, uncertainty=False)
        return objective(logits, boxes)

    value_range = (0.0, 1.0) if detector.payload_kind(fusion) == "raw" else None
    return pgd(
        loss_fn,
        payload,
        np.asarray(attack_mask, dtype=bool)[:, :, None],
        cfg.eta,
        cfg.epsilon,
        cfg.pgd_iters,
        value_range=value_range,
        rng=rng,
        random_start=cfg.random_start,
    )


def pgd_perturb(
    params: Mapping[str, np.ndarray],
    shared: Sequence[detector.SharedInformation],
    attacker_indices: Sequence[int],
    targets: Optional[Mapping[str, np.ndarray]],
    cfg: AttackConfig,
    fusion: str,
    feature_scale: float = 1.0,
) -> List[detector.SharedInformation]:
    """Attack one scene's shared list; returns a new list, non-attackers untouched."""
    if targets is None or (cfg.objective != "reg" and "cls" not in targets):
        raise ValueError(f"objective {cfg.objective!r} needs targets")
    ordered = sorted(shared, key=lambda s: s.agent_index)
    n = len(ordered)
    for i in attacker_indices:
        if not 0 <= i < n:
            raise IndexError(f"attacker index {i} out of range")
    payload = np.stack([s.payload for s in ordered])[None]
    mask = np.zeros((1, n), dtype=bool)
    mask[0, list(attacker_indices)] = True
    batched = {k: np.asarray(v).reshape(1, -1) for k, v in _TargetView(targets, cfg.objective).items()}
    adv = perturb_payload(params, payload, mask, batched, cfg, fusion, feature_scale=feature_scale)[0]
    return [
        detector.SharedInformation(s.kind, adv[i] if mask[0, i] else s.payload, s.agent_index)
        for i, s in enumerate(ordered)
    ]


class _TargetView:
    # exposes only the keys the objective reads
    KEYS = {"cls": ("cls",), "reg": ("box", "mask"), "cls+reg": ("cls", "box", "mask")}

    def __init__(self, targets, objective):
        self.targets, self.keys = targets, self.KEYS[objective]

    def items(self):
        return [(k, self.targets[k]) for k in self.keys]
