"""scikit-learn style estimator wrapping the toy collaborative detector.

``X`` is an array of per-scene observations ``(n_scenes, N, G, G)`` and ``y``
a list of ``(H_i, 4)`` ground-truth box arrays in world units.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from . import detector
from .attack import attacker_mask, perturb_payload
from .config import AttackConfig
from .conformal import CalibrationResult, calibrate
from .losses import LossBreakdown, LossWeights, loss_cls, loss_reg, loss_uq_from_log_variance, total_loss
from .metrics import match

log = logging.getLogger(__name__)

# independent seed streams derived from random_state
_INIT, _SHUFFLE, _TRAIN_ATTACK, _CAL_ATTACK = 0, 1, 2, 3


class TrainingError(RuntimeError):
    pass


@dataclass
class EpochLog:
    epoch: int
    breakdown: LossBreakdown
    q_hat: Optional[float]


@dataclass
class MatchedCoordinates:
    """Residuals and sigmas (world units) for ground truths matched at the IoU threshold."""

    residual: np.ndarray = field(default_factory=lambda: np.empty(0))
    sigma: np.ndarray = field(default_factory=lambda: np.empty(0))
    provenance: np.ndarray = field(default_factory=lambda: np.empty((0, 3), dtype=int))


def check_observations(X, grid_size: int) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3 and X.shape[-1] == grid_size * grid_size:
        X = X.reshape(X.shape[0], X.shape[1], grid_size, grid_size)
    elif X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[2:] != (grid_size, grid_size):
        raise ValueError(f"expected observations of shape (n, N, {grid_size}, {grid_size}), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("observations contain non-finite values")
    return X.reshape(X.shape[0], X.shape[1], -1)


def check_boxes(y, n_scenes: int) -> List[np.ndarray]:
    if y is None or len(y) != n_scenes:
        raise ValueError("need one box array per scene")
    return [np.asarray(b, dtype=np.float64).reshape(-1, 4) for b in y]


class CollaborativeDetector(BaseEstimator):
    """Collaborative detector with optional uncertainty head and adversarial training.

    Parameters
    ----------
    fusion : {"early", "intermediate", "single"}
        How the ego agent combines shared information.
    uq_head : bool
        Add the log-variance head and its Gaussian loss term.
    adversarial_training : bool
        Perturb attackers' shared information with PGD on every training batch.
    alpha : float
        Miscoverage rate for the conformal quantile recomputed each epoch.
    max_grad_norm : float or None
        Cap on each parameter tensor's gradient norm before the descent step.
    feature_scale : float
        Half-width of the shared feature range; sets the units of the attack budget.
    """

    def __init__(
        self,
        fusion: str = "intermediate",
        grid_size: int = 16,
        out_grid: int = 8,
        hidden: int = 96,
        feature_dim: int = 96,
        uq_head: bool = True,
        learning_rate: float = 6.0,
        epochs: int = 30,
        batch_size: int = 20,
        w_reg: float = 1.0,
        w_cls: float = 1.0,
        w_uq: float = 1.0,
        adversarial_training: bool = False,
        pgd_eta: float = 0.1,
        pgd_eps: float = 0.5,
        pgd_iters: int = 25,
        pgd_objective: str = "cls",
        n_attackers: int = 2,
        random_start: bool = False,
        alpha: float = 0.1,
        match_iou: float = 0.5,
        confidence_threshold: float = 0.05,
        init_scale: float = 1.0,
        feature_scale: float = 4.0,
        max_grad_norm: Optional[float] = 0.05,
        random_state: int = 0,
    ):
        self.fusion = fusion
        self.grid_size = grid_size
        self.out_grid = out_grid
        self.hidden = hidden
        self.feature_dim = feature_dim
        self.uq_head = uq_head
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.w_reg = w_reg
        self.w_cls = w_cls
        self.w_uq = w_uq
        self.adversarial_training = adversarial_training
        self.pgd_eta = pgd_eta
        self.pgd_eps = pgd_eps
        self.pgd_iters = pgd_iters
        self.pgd_objective = pgd_objective
        self.n_attackers = n_attackers
        self.random_start = random_start
        self.alpha = alpha
        self.match_iou = match_iou
        self.confidence_threshold = confidence_threshold
        self.init_scale = init_scale
        self.feature_scale = feature_scale
        self.max_grad_norm = max_grad_norm
        self.random_state = random_state

    # ------------------------------------------------------------------
    def _rng(self, stream: int) -> np.random.Generator:
        return np.random.default_rng([int(self.random_state), stream])

    def attack_config(self, **overrides) -> AttackConfig:
        cfg = AttackConfig(
            eta=self.pgd_eta,
            epsilon=self.pgd_eps,
            pgd_iters=self.pgd_iters,
            objective=self.pgd_objective,
            num_attackers=self.n_attackers,
            random_start=self.random_start,
        )
        for k, v in overrides.items():
            setattr(cfg, k, v)
        cfg.validate()
        return cfg

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.w_reg, self.w_cls, self.w_uq if self.uq_head else 0.0)

    def init_parameters(self) -> "CollaborativeDetector":
        self.params_ = detector.init_params(
            self.grid_size, self.out_grid, self.hidden, self.feature_dim,
            self.fusion, self.uq_head, self._rng(_INIT), self.init_scale,
        )
        return self

    # ------------------------------------------------------------------
    def fit(self, X, y, X_cal=None, y_cal=None):
        """Train with per-batch gradient descent; recalibrate on ``(X_cal, y_cal)`` each epoch."""
        X = check_observations(X, self.grid_size)
        y = check_boxes(y, len(X))
        if X_cal is not None:
            X_cal = check_observations(X_cal, self.grid_size)
            y_cal = check_boxes(y_cal, len(X_cal))
        n_agents = X.shape[1]
        attack_cfg = self.attack_config() if self.adversarial_training else None
        if attack_cfg is not None:
            attack_cfg.validate(n_agents)
        self.init_parameters()
        targets = detector.batch_targets(y, self.out_grid)
        shuffle_rng = self._rng(_SHUFFLE)
        attack_rng = self._rng(_TRAIN_ATTACK)
        self.training_log_: List[EpochLog] = []
        self.calibration_: Optional[CalibrationResult] = None

        for epoch in range(self.epochs):
            order = shuffle_rng.permutation(len(X))
            sums = np.zeros(4)
            for start in range(0, len(X), self.batch_size):
                idx = order[start:start + self.batch_size]
                bt = {k: v[idx] for k, v in targets.items()}
                mask = None
                if attack_cfg is not None:
                    mask = attacker_mask(len(idx), n_agents, attack_cfg.num_attackers, attack_rng)
                bd = self._step(X[idx], bt, mask, attack_cfg, attack_rng, epoch, idx)
                sums += len(idx) * np.array([bd.l_reg, bd.l_cls, bd.l_uq, bd.total])
            mean = LossBreakdown(*(sums / len(X)))
            q_hat = self._recalibrate(X_cal, y_cal)
            self.training_log_.append(EpochLog(epoch, mean, q_hat))
            log.debug("epoch %d total %.5f q_hat %s", epoch, mean.total, q_hat)
        if self.epochs == 0:
            self._recalibrate(X_cal, y_cal)
        return self

    def _step(self, obs, targets, mask, attack_cfg, attack_rng, epoch, idx) -> LossBreakdown:
        delta = 0.0
        if mask is not None:
            clean = detector.shared_payload(obs, self.params_, self.fusion, self.feature_scale).data
            adv = perturb_payload(self.params_, clean, mask, targets, attack_cfg, self.fusion, attack_rng, self.feature_scale)
            delta = adv - clean
        leaves = {k: ad.Tensor(v, name=k) for k, v in self.params_.items()}
        total, bd = self.loss(obs, targets, leaves, delta)
        if not np.isfinite(bd.total):
            raise TrainingError(f"non-finite loss at epoch {epoch}, scenes {list(idx)}")
        total.backward()
        for k, leaf in leaves.items():
            g = leaf.grad
            if g is None:
                continue
            # each tensor's step is capped separately so small heads keep pace with the encoder
            if self.max_grad_norm is not None:
                norm = float(np.linalg.norm(g))
                if norm > self.max_grad_norm:
                    g = g * (self.max_grad_norm / norm)
            self.params_[k] = self.params_[k] - self.learning_rate * g
        return bd

    def loss(self, obs, targets, params, delta=0.0):
        """Weighted total loss for a batch; ``delta`` is added to the shared payloads."""
        payload = detector.shared_payload(obs, params, self.fusion, self.feature_scale)
        if not np.isscalar(delta):
            payload = payload + delta
        logits, boxes, log_var = detector.forward_from_payload(payload, params, self.fusion, self.feature_scale)
        l_cls = loss_cls(logits, targets["cls"])
        l_reg = loss_reg(boxes, targets["box"], targets["mask"])
        if self.uq_head:
            l_uq = loss_uq_from_log_variance(boxes, targets["box"], log_var, targets["mask"])
        else:
            l_uq = ad.tensor(0.0)
        return total_loss(l_reg, l_cls, l_uq, self.weights)

    def gradients(self, X, y, delta=0.0):
        """Parameter gradients of the total loss on one batch (no update)."""
        check_is_fitted(self, "params_")
        obs = check_observations(X, self.grid_size)
        targets = detector.batch_targets(check_boxes(y, len(obs)), self.out_grid)
        leaves = {k: ad.Tensor(v, name=k) for k, v in self.params_.items()}
        total, _ = self.loss(obs, targets, leaves, delta)
        total.backward()
        return {k: (l.grad if l.grad is not None else np.zeros_like(l.data)) for k, l in leaves.items()}

    # ------------------------------------------------------------------
    def predict_outputs(self, X, y=None, attack: Optional[AttackConfig] = None, rng=None):
        """Dense outputs per scene, optionally under a white-box PGD attack (needs ``y``)."""
        check_is_fitted(self, "params_")
        obs = check_observations(X, self.grid_size)
        payload = detector.shared_payload(obs, self.params_, self.fusion, self.feature_scale).data
        if attack is not None and attack.num_attackers > 0:
            if y is None:
                raise ValueError("attacking needs ground-truth targets")
            rng = rng if rng is not None else np.random.default_rng(attack.seed)
            targets = detector.batch_targets(check_boxes(y, len(obs)), self.out_grid)
            mask = attacker_mask(len(obs), obs.shape[1], attack.num_attackers, rng)
            payload = perturb_payload(self.params_, payload, mask, targets, attack, self.fusion, rng, self.feature_scale)
        outputs = detector.forward_from_payload(payload, self.params_, self.fusion, self.feature_scale)
        return detector.to_outputs(*outputs, self.out_grid)

    def predict(self, X, y=None, attack=None, rng=None):
        """Decoded detections per scene, sorted by confidence."""
        return [
            detector.decode_detections(o, self.confidence_threshold)
            for o in self.predict_outputs(X, y, attack, rng)
        ]

    def matched_coordinates(self, detections, y) -> MatchedCoordinates:
        res, sig, prov = [], [], []
        for s, (dets, gts) in enumerate(zip(detections, y)):
            gts = np.asarray(gts).reshape(-1, 4)
            boxes = np.array([d.box for d in dets]).reshape(-1, 4)
            for d, g, _ in match(boxes, gts, self.match_iou).pairs:
                res.append(np.abs(gts[g] - dets[d].box))
                sig.append(dets[d].sigma)
                prov.extend((s, g, j) for j in range(4))
        if not res:
            return MatchedCoordinates()
        return MatchedCoordinates(np.concatenate(res), np.concatenate(sig), np.array(prov))

    def calibration_attack(self) -> Optional[AttackConfig]:
        return self.attack_config(seed=int(self._rng(_CAL_ATTACK).integers(2**31))) if self.adversarial_training else None

    def _recalibrate(self, X_cal, y_cal) -> Optional[float]:
        if X_cal is None or not self.uq_head:
            return None
        self.calibration_ = self.calibrate(X_cal, y_cal)
        return self.calibration_.q_hat

    def calibrate(self, X_cal, y_cal, attack: Optional[AttackConfig] = None, alpha: Optional[float] = None):
        """Conformal quantile from matched validation detections.

        Uses the training-time attack (if any) on the calibration scenes unless
        ``attack`` is given explicitly.
        """
        attack = attack if attack is not None else self.calibration_attack()
        dets = self.predict(X_cal, y_cal, attack)
        mc = self.matched_coordinates(dets, check_boxes(y_cal, len(dets)))
        if mc.residual.size == 0:
            return CalibrationResult(np.inf, self.alpha if alpha is None else alpha, 0, np.empty(0))
        return calibrate((mc.residual, mc.sigma), self.alpha if alpha is None else alpha)

    @property
    def q_hat_(self) -> Optional[float]:
        cal = getattr(self, "calibration_", None)
        return None if cal is None else cal.q_hat
