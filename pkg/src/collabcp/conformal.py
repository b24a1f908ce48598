"""Split conformal calibration of a learned per-coordinate scale.

Scores are normalized residuals ``|y - y_hat| / sigma``; the quantile is the
``ceil((n + 1)(1 - alpha))``-th smallest calibration score, or ``+inf``
when that rank exceeds ``n``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted


@dataclass
class CalibrationPair:
    residual: float
    sigma: float
    provenance: Tuple[int, int, int] = (0, 0, 0)  # scene, object, coordinate

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.residual < 0:
            raise ValueError("residual must be nonnegative")


@dataclass
class CalibrationResult:
    q_hat: float
    alpha: float
    n_cal: int
    scores: np.ndarray = field(repr=False, default_factory=lambda: np.empty(0))


def conformal_score(y, y_hat, sigma) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    return np.abs(np.asarray(y, dtype=np.float64) - np.asarray(y_hat, dtype=np.float64)) / sigma


def quantile_rank(n: int, alpha: float) -> int:
    """1-indexed rank ``ceil((n + 1)(1 - alpha))``, guarded against float fuzz."""
    x = (n + 1) * (1.0 - alpha)
    r = math.ceil(x)
    # (n+1)(1-alpha) that should be an integer can land a hair above it
    if r - x > 1 - 1e-9:
        r -= 1
    return r


def conformal_quantile(scores, alpha: float) -> float:
    s = np.sort(np.asarray(scores, dtype=np.float64).reshape(-1))
    if s.size == 0:
        raise ValueError("no calibration scores")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    rank = quantile_rank(s.size, alpha)
    return float(s[rank - 1]) if rank <= s.size else math.inf


def calibrate(pairs, alpha: float) -> CalibrationResult:
    """Pool scores from ``CalibrationPair`` objects (or ``(residual, sigma)`` arrays)."""
    if isinstance(pairs, tuple) and len(pairs) == 2:
        residual, sigma = (np.asarray(a, dtype=np.float64).reshape(-1) for a in pairs)
    else:
        pairs = list(pairs)
        if not pairs:
            raise ValueError("no calibration pairs")
        residual = np.array([p.residual for p in pairs])
        sigma = np.array([p.sigma for p in pairs])
    if residual.size == 0:
        raise ValueError("no calibration pairs")
    scores = np.sort(conformal_score(residual, 0.0, sigma))
    return CalibrationResult(conformal_quantile(scores, alpha), alpha, int(scores.size), scores)


def conformal_interval(y_hat, sigma, q_hat: float):
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if q_hat < 0:
        raise ValueError("q_hat must be nonnegative")
    if math.isinf(q_hat):
        return np.full_like(y_hat, -np.inf), np.full_like(y_hat, np.inf)
    half = q_hat * np.asarray(sigma, dtype=np.float64)
    return y_hat - half, y_hat + half


def empirical_coverage(residual, sigma, q_hat: float) -> float:
    """Fraction of coordinates whose score is at most ``q_hat``."""
    scores = conformal_score(residual, 0.0, sigma).reshape(-1)
    if scores.size == 0:
        raise ValueError("empty test set")
    return float(np.mean(scores <= q_hat))


def save_calibration(result: CalibrationResult, path) -> None:
    lines = [f"alpha = {result.alpha!r}", f"n_cal = {result.n_cal}", f"q_hat = {result.q_hat!r}", "scores"]
    lines += [repr(float(s)) for s in np.sort(result.scores)]
    Path(path).write_text("\n".join(lines) + "\n")


def load_calibration(path) -> CalibrationResult:
    text = Path(path).read_text().splitlines()
    head = dict(line.split(" = ", 1) for line in text[:3])
    if text[3] != "scores":
        raise ValueError(f"{path}: missing score list")
    scores = np.array([float(v) for v in text[4:] if v.strip()])
    return CalibrationResult(float(head["q_hat"]), float(head["alpha"]), int(head["n_cal"]), scores)


class SplitConformalRegressor(BaseEstimator):
    """Normalized split-conformal wrapper around externally produced ``(y_hat, sigma)``.

    Parameters
    ----------
    alpha : float, default=0.1
        Target miscoverage rate.
    per_coordinate : bool, default=False
        Calibrate one quantile per trailing coordinate instead of pooling.
    """

    def __init__(self, alpha: float = 0.1, per_coordinate: bool = False):
        self.alpha = alpha
        self.per_coordinate = per_coordinate

    def fit(self, y, y_hat, sigma):
        y, y_hat, sigma = (np.asarray(a, dtype=np.float64) for a in (y, y_hat, sigma))
        if self.per_coordinate:
            y, y_hat, sigma = (a.reshape(len(a), -1) for a in (y, y_hat, sigma))
            scores = conformal_score(y, y_hat, sigma)
            self.q_hat_ = np.array([conformal_quantile(scores[:, j], self.alpha) for j in range(scores.shape[1])])
            self.n_cal_ = scores.shape[0]
        else:
            scores = conformal_score(y, y_hat, sigma).reshape(-1)
            self.q_hat_ = conformal_quantile(scores, self.alpha)
            self.n_cal_ = scores.size
        self.scores_ = np.sort(scores, axis=0)
        return self

    def predict_interval(self, y_hat, sigma):
        check_is_fitted(self, "q_hat_")
        y_hat = np.asarray(y_hat, dtype=np.float64)
        half = np.asarray(self.q_hat_) * np.asarray(sigma, dtype=np.float64)
        return y_hat - half, y_hat + half

    def calibrated_sigma(self, sigma):
        check_is_fitted(self, "q_hat_")
        return np.asarray(self.q_hat_) * np.asarray(sigma, dtype=np.float64)

    def score(self, y, y_hat, sigma) -> float:
        """Empirical coverage on held-out data."""
        check_is_fitted(self, "q_hat_")
        s = conformal_score(y, y_hat, sigma)
        return float(np.mean(s <= np.asarray(self.q_hat_)))

    @property
    def result_(self) -> CalibrationResult:
        check_is_fitted(self, "q_hat_")
        return CalibrationResult(float(np.max(self.q_hat_)), self.alpha, int(self.n_cal_), self.scores_.reshape(-1))
