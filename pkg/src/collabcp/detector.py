"""Toy collaborative detector: per-agent encoder, fusion, and three dense heads.

Shapes (batch ``B``, agents ``N``, input grid ``G``, output grid ``C``,
feature width ``D``, box width ``P = K * J``):

* observations ``(B, N, G*G)``
* shared payloads ``(B, N, G*G)`` for raw sharing or ``(B, N, D)`` for features
* objectness logits ``(B, C*C)``, boxes and log-variances ``(B, C*C*P)``

Box regression is expressed per cell in cell units relative to the cell
center; :func:`decode_detections` maps back to world units.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np

from . import autodiff as ad

BOX_DIM = 4
THETA_PREFIXES = ("enc", "score", "cls", "reg")
OMEGA_PREFIXES = ("uq",)


@dataclass
class SharedInformation:
    kind: str  # "raw" or "feature"
    payload: np.ndarray
    agent_index: int


@dataclass
class DetectionOutput:
    objectness: np.ndarray  # (C, C) logits
    box_params: np.ndarray  # (C, C, P) cell-unit offsets
    log_variance: np.ndarray  # (C, C, P)

    @property
    def probability(self) -> np.ndarray:
        return np.exp(-np.logaddexp(0.0, -self.objectness))

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(0.5 * self.log_variance)


@dataclass
class Detection:
    box: np.ndarray  # world units, (4,)
    confidence: float
    sigma: np.ndarray  # world units, (4,)
    cell: tuple


def payload_kind(fusion: str) -> str:
    return "feature" if fusion == "intermediate" else "raw"


def init_params(
    grid_size: int,
    out_grid: int,
    hidden: int,
    feature_dim: int,
    fusion: str,
    uq_head: bool,
    rng: np.random.Generator,
    scale: float = 1.0,
) -> Dict[str, np.ndarray]:
    def dense(n_in, n_out):
        return rng.normal(0.0, scale / np.sqrt(n_in), size=(n_in, n_out)), np.zeros(n_out)

    cells = out_grid * out_grid
    params = {}
    params["enc1_W"], params["enc1_b"] = dense(grid_size * grid_size, hidden)
    params["enc2_W"], params["enc2_b"] = dense(hidden, feature_dim)
    if fusion == "intermediate":
        # scores see each feature and its squared disagreement with the ego feature
        params["score_W"], params["score_b"] = dense(2 * feature_dim, 1)
    params["cls_W"], params["cls_b"] = dense(feature_dim, cells)
    # start objectness near the base rate of occupied cells
    params["cls_b"][:] = -3.0
    params["reg_W"], params["reg_b"] = dense(feature_dim, cells * BOX_DIM)
    if uq_head:
        # same layer shapes as the regression head
        params["uq_W"], params["uq_b"] = dense(feature_dim, cells * BOX_DIM)
        params["uq_W"] *= 0.1
    return params


def split_params(params: Dict[str, np.ndarray]):
    theta = {k: v for k, v in params.items() if k.startswith(THETA_PREFIXES)}
    omega = {k: v for k, v in params.items() if k.startswith(OMEGA_PREFIXES)}
    return theta, omega


def encode(x, params, feature_scale: float = 1.0) -> ad.Tensor:
    """Two affine+sigmoid layers over the flattened grid (last axis).

    Features lie in ``(-feature_scale, feature_scale)``; the scale fixes the
    units in which a feature-space perturbation budget is measured.
    """
    # inputs and activations are centered around zero; plain GD converges much faster
    h = 2.0 * ad.sigmoid(ad.affine(ad.tensor(x) - 0.5, params["enc1_W"], params["enc1_b"])) - 1.0
    f = 2.0 * ad.sigmoid(ad.affine(h, params["enc2_W"], params["enc2_b"])) - 1.0
    return f if feature_scale == 1.0 else feature_scale * f


def attention_weights(features, params, feature_scale: float = 1.0) -> ad.Tensor:
    """Softmax over agents of a learned per-feature score; ``(B, N, 1)``.

    Agent ``n`` is scored from ``[f_n, (f_n - f_ego)^2]``, so the scoring
    layer can learn to down-weight features that disagree with the ego view.
    """
    features = ad.tensor(features)
    if feature_scale != 1.0:
        features = (1.0 / feature_scale) * features
    ego = ad.reshape(ad.take(features, 0, axis=1), (features.shape[0], 1, features.shape[2]))
    query = ad.concat([features, ad.square(features - ego)], axis=2)
    scores = ad.affine(query, params["score_W"], params["score_b"])
    return ad.softmax(scores, axis=1)


def fuse(payload, params, fusion: str, feature_scale: float = 1.0) -> ad.Tensor:
    """Fuse ``(B, N, F)`` payloads into ``(B, F)``."""
    payload = ad.tensor(payload)
    if payload.data.ndim != 3 or payload.shape[1] < 1:
        raise ad.ShapeError(f"payload must be (B, N, F) with N >= 1, got {payload.shape}")
    if fusion == "early":
        return ad.amax(payload, axis=1)
    if fusion == "intermediate":
        w = attention_weights(payload, params, feature_scale)
        return ad.sum(w * payload, axis=1)
    if fusion == "single":
        return ad.take(payload, 0, axis=1)
    raise ValueError(f"unknown fusion mode {fusion!r}")


def heads(features, params, feature_scale: float = 1.0, uncertainty: bool = True):
    features = ad.tensor(features)
    if feature_scale != 1.0:
        features = (1.0 / feature_scale) * features
    logits = ad.affine(features, params["cls_W"], params["cls_b"])
    boxes = ad.affine(features, params["reg_W"], params["reg_b"])
    if uncertainty and "uq_W" in params:
        log_var = ad.affine(features, params["uq_W"], params["uq_b"])
    else:
        log_var = ad.tensor(np.zeros(boxes.shape))
    return logits, boxes, log_var


def shared_payload(observations, params, fusion: str, feature_scale: float = 1.0):
    """What each agent transmits: its raw grid, or its encoded feature."""
    if fusion == "intermediate":
        return encode(observations, params, feature_scale)
    return ad.tensor(observations)


def forward_from_payload(payload, params, fusion: str, feature_scale: float = 1.0, uncertainty: bool = True):
    """``(logits, boxes, log_variance)``; ``uncertainty=False`` skips the variance head."""
    fused = fuse(payload, params, fusion, feature_scale)
    if fusion != "intermediate":
        return heads(encode(fused, params), params, uncertainty=uncertainty)
    return heads(fused, params, feature_scale, uncertainty)


def to_outputs(logits, boxes, log_var, out_grid: int) -> List[DetectionOutput]:
    c = out_grid
    lg = np.asarray(logits.data if isinstance(logits, ad.Tensor) else logits)
    bx = np.asarray(boxes.data if isinstance(boxes, ad.Tensor) else boxes)
    lv = np.asarray(log_var.data if isinstance(log_var, ad.Tensor) else log_var)
    return [
        DetectionOutput(lg[b].reshape(c, c), bx[b].reshape(c, c, BOX_DIM), lv[b].reshape(c, c, BOX_DIM))
        for b in range(lg.shape[0])
    ]


# ---------------------------------------------------------------------------
# single-scene API over SharedInformation lists

def encode_observation(grid: np.ndarray, params, agent_index: int = 0, feature_scale: float = 1.0) -> SharedInformation:
    x = np.asarray(grid, dtype=np.float64).reshape(1, -1)
    if x.shape[1] != params["enc1_W"].shape[0]:
        raise ad.ShapeError(f"observation has {x.shape[1]} cells, encoder expects {params['enc1_W'].shape[0]}")
    return SharedInformation("feature", encode(x, params, feature_scale).data[0], agent_index)


def raw_information(grid: np.ndarray, agent_index: int) -> SharedInformation:
    return SharedInformation("raw", np.asarray(grid, dtype=np.float64).reshape(-1), agent_index)


def fuse_shared(shared: Sequence[SharedInformation], params, fusion: str, feature_scale: float = 1.0) -> np.ndarray:
    if not shared:
        raise ValueError("no shared information to fuse")
    kinds = {s.kind for s in shared}
    if len(kinds) != 1:
        raise ValueError(f"mixed payload kinds: {sorted(kinds)}")
    kind = kinds.pop()
    if fusion == "early" and kind != "raw":
        raise ValueError("early fusion needs raw payloads")
    if fusion == "intermediate" and kind != "feature":
        raise ValueError("intermediate fusion needs feature payloads")
    ordered = sorted(shared, key=lambda s: s.agent_index)
    stacked = np.stack([s.payload for s in ordered])[None]
    return fuse(stacked, params, fusion, feature_scale).data[0]


def predict(fused: np.ndarray, params, fusion: str, out_grid: int, feature_scale: float = 1.0) -> DetectionOutput:
    x = np.asarray(fused, dtype=np.float64)[None]
    if fusion != "intermediate":
        return to_outputs(*heads(encode(x, params), params), out_grid)[0]
    if x.shape[-1] != params["cls_W"].shape[0]:
        raise ad.ShapeError("fused feature width does not match the heads")
    return to_outputs(*heads(x, params, feature_scale), out_grid)[0]


# ---------------------------------------------------------------------------
# targets and decoding

def assign_targets(boxes: np.ndarray, out_grid: int):
    """Cell-responsibility targets for one scene.

    The cell containing a box center owns it (first box wins on collision).
    Returns ``(cls (C, C), box (C, C, 4) in cell units, mask (C, C))``.
    """
    c = out_grid
    cls = np.zeros((c, c))
    box = np.zeros((c, c, BOX_DIM))
    for x0, y0, x1, y1 in np.asarray(boxes).reshape(-1, 4):
        col = min(int((x0 + x1) / 2 * c), c - 1)
        row = min(int((y0 + y1) / 2 * c), c - 1)
        if cls[row, col]:
            continue
        cx, cy = (col + 0.5) / c, (row + 0.5) / c
        cls[row, col] = 1.0
        box[row, col] = (np.array([x0, y0, x1, y1]) - [cx, cy, cx, cy]) * c
    return cls, box, cls.copy()


def batch_targets(box_lists: Sequence[np.ndarray], out_grid: int):
    cls, box, mask = zip(*(assign_targets(b, out_grid) for b in box_lists))
    n = len(box_lists)
    return {
        "cls": np.stack(cls).reshape(n, -1),
        "box": np.stack(box).reshape(n, -1),
        "mask": np.repeat(np.stack(mask).reshape(n, -1), BOX_DIM, axis=1),
    }


def decode_detections(output: DetectionOutput, confidence_threshold: float = 0.05) -> List[Detection]:
    if not 0.0 <= confidence_threshold <= 1.0:
        raise ValueError("confidence_threshold must lie in [0, 1]")
    c = output.objectness.shape[0]
    prob = output.probability
    sigma = output.sigma
    # compare logits: a rounded probability of exactly 1.0 must not pass threshold 1.0
    with np.errstate(divide="ignore"):
        cut = np.log(confidence_threshold) - np.log1p(-confidence_threshold)
    rows, cols = np.nonzero(output.objectness >= cut)
    centers = np.stack([(cols + 0.5) / c, (rows + 0.5) / c], axis=1)
    raw = np.concatenate([centers, centers], axis=1) + output.box_params[rows, cols] / c
    boxes = _ordered_corners(raw)
    dets = [
        Detection(boxes[i], float(prob[r, k]), sigma[r, k] / c, (int(r), int(k)))
        for i, (r, k) in enumerate(zip(rows, cols))
    ]
    dets.sort(key=lambda d: -d.confidence)
    return dets


def _ordered_corners(boxes: np.ndarray) -> np.ndarray:
    # an untrained head can emit inverted corners; keep a valid positive-area box
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    x0 = np.minimum(boxes[:, 0], boxes[:, 2])
    x1 = np.maximum(boxes[:, 0], boxes[:, 2])
    y0 = np.minimum(boxes[:, 1], boxes[:, 3])
    y1 = np.maximum(boxes[:, 1], boxes[:, 3])
    tiny = 1e-9
    return np.stack([x0, y0, np.maximum(x1, x0 + tiny), np.maximum(y1, y0 + tiny)], axis=1)


def operator_norm_bound(params, feature_scale: float = 1.0) -> float:
    """Lipschitz bound of :func:`encode` in the L2 norm.

    Each ``2 sigmoid - 1`` layer contributes half its weight's spectral norm.
    """
    w1 = np.linalg.norm(params["enc1_W"], 2)
    w2 = np.linalg.norm(params["enc2_W"], 2)
    return feature_scale * 0.5 * w1 * 0.5 * w2
