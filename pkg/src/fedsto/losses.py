"""Detection objectives: supervised, tiered unsupervised, CIoU, focal, orthogonality.

Everything is expressed as graph builders so training gets exact gradients;
the plain-number wrappers at the bottom build a throwaway graph.

Per-image terms are summed over grid cells and averaged over the batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .autodiff import Graph, Var, run
from .boxes import BoundingBox
from .model import CLS, OBJ, TH, TW, TX, TY, ParamSet, Part

EPS = 1e-7
REG_OBJECTNESS = 0.99


@dataclass(frozen=True)
class LossWeights:
    cls: float = 0.3
    obj: float = 0.7
    reg: float = 1.0
    orn: float = 0.01

    def __post_init__(self):
        for k in ("cls", "obj", "reg", "orn"):
            if getattr(self, k) < 0:
                raise ValueError(f"loss weight {k} must be >= 0")


@dataclass(frozen=True)
class LossBreakdown:
    cls: float
    reg: float
    obj: float
    orn: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return {"cls": self.cls, "reg": self.reg, "obj": self.obj, "orn": self.orn, "total": self.total}


@dataclass
class CellTargets:
    """Dense per-cell training targets for a batch of grids.

    ``box`` is centre form (cx, cy, w, h) in image fractions; cells outside
    ``reg_mask`` hold a dummy valid box so CIoU stays finite.
    """

    cls_mask: np.ndarray   # (N, S, S)
    cls_target: np.ndarray  # (N, S, S, K), a distribution per cell
    reg_mask: np.ndarray   # (N, S, S)
    box: np.ndarray        # (N, S, S, 4)
    obj_target: np.ndarray  # (N, S, S)

    @classmethod
    def empty(cls, n, s, k) -> "CellTargets":
        box = np.zeros((n, s, s, 4))
        box[...] = (0.5, 0.5, 0.25, 0.25)
        cls_t = np.full((n, s, s, k), 1.0 / k)
        return cls(np.zeros((n, s, s)), cls_t, np.zeros((n, s, s)), box, np.zeros((n, s, s)))


# --------------------------------------------------------------------------
# target construction
# --------------------------------------------------------------------------

def cell_of(box: BoundingBox, grid: int) -> tuple[int, int]:
    cx, cy, _, _ = box.cxcywh()
    return min(int(cy * grid), grid - 1), min(int(cx * grid), grid - 1)


def supervised_targets(annotations: Sequence[Sequence[tuple[int, BoundingBox]]], grid: int,
                       num_classes: int) -> CellTargets:
    """Assign each ground-truth box to the cell containing its centre."""
    t = CellTargets.empty(len(annotations), grid, num_classes)
    for i, anns in enumerate(annotations):
        for cls_id, box in anns:
            if not isinstance(box, BoundingBox):
                raise TypeError("annotations must carry BoundingBox instances")
            if not 0 <= cls_id < num_classes:
                raise ValueError(f"class id {cls_id} outside [0, {num_classes})")
            r, c = cell_of(box, grid)
            t.cls_mask[i, r, c] = 1.0
            t.cls_target[i, r, c] = np.eye(num_classes)[cls_id]
            t.reg_mask[i, r, c] = 1.0
            t.box[i, r, c] = box.cxcywh()
            t.obj_target[i, r, c] = 1.0
    return t


def check_tiers(pl, tau1: float, tau2: float) -> None:
    from .pseudo import BACKGROUND, RELIABLE, SOFT

    if not 0.0 <= tau1 <= tau2 <= 1.0:
        raise ValueError(f"need 0 <= tau1 <= tau2 <= 1, got {tau1}, {tau2}")
    expect = np.where(pl.score > tau2, RELIABLE, np.where(pl.score < tau1, BACKGROUND, SOFT))
    bad = np.argwhere(expect != pl.tier)
    if bad.size:
        raise ValueError(f"pseudo-label tiers inconsistent with thresholds at cells {bad[:5].tolist()}")


def unsupervised_targets(pl, tau1: float, tau2: float, reg_objectness: float = REG_OBJECTNESS) -> CellTargets:
    """Route tiered pseudo labels into per-cell targets.

    cls: reliable cells only, against the pseudo class distribution.
    reg: reliable cells, or any boxed cell whose pseudo objectness > 0.99.
    obj: every cell; 0 for background, pseudo objectness for reliable,
    the raw pseudo score for soft.
    """
    from .pseudo import RELIABLE, SOFT

    check_tiers(pl, tau1, tau2)
    tier = pl.tier if pl.tier.ndim == 3 else pl.tier[None]
    score = pl.score.reshape(tier.shape)
    objn = pl.objectness.reshape(tier.shape)
    has_box = pl.has_box.reshape(tier.shape)
    n, s, _ = tier.shape
    k = pl.class_dist.shape[-1]
    t = CellTargets.empty(n, s, k)
    reliable = tier == RELIABLE
    t.cls_mask = reliable.astype(float)
    t.cls_target = np.where(reliable[..., None], pl.class_dist.reshape(n, s, s, k), t.cls_target)
    reg = has_box & (reliable | (objn > reg_objectness))
    t.reg_mask = reg.astype(float)
    t.box = np.where(reg[..., None], pl.box.reshape(n, s, s, 4), t.box)
    t.obj_target = np.where(reliable, objn, np.where(tier == SOFT, score, 0.0))
    return t


# --------------------------------------------------------------------------
# graph builders
# --------------------------------------------------------------------------

def decoded_boxes(g: Graph, pred: Var) -> tuple[Var, Var, Var, Var]:
    """Centre-form predicted boxes (N, S, S) each, image-fraction units."""
    n, s = pred.shape[0], pred.shape[1]
    cols = np.broadcast_to(np.arange(s, dtype=float)[None, None, :], (n, s, s))
    rows = np.broadcast_to(np.arange(s, dtype=float)[None, :, None], (n, s, s))
    cx = (g.sigmoid(g.channel(pred, TX)) + g.const(cols)) * (1.0 / s)
    cy = (g.sigmoid(g.channel(pred, TY)) + g.const(rows)) * (1.0 / s)
    return cx, cy, g.sigmoid(g.channel(pred, TW)), g.sigmoid(g.channel(pred, TH))


def ciou_graph(g: Graph, p: Sequence[Var], t: np.ndarray) -> Var:
    """Elementwise ``1 - CIoU`` between predicted boxes ``p`` and constant targets ``t`` (..., 4)."""
    pcx, pcy, pw, ph = p
    t = np.asarray(t, dtype=float)
    tcx, tcy, tw, th = (g.const(t[..., i]) for i in range(4))
    half = 0.5
    px0, px1 = pcx - pw * half, pcx + pw * half
    py0, py1 = pcy - ph * half, pcy + ph * half
    tx0, tx1 = g.const(t[..., 0] - t[..., 2] / 2), g.const(t[..., 0] + t[..., 2] / 2)
    ty0, ty1 = g.const(t[..., 1] - t[..., 3] / 2), g.const(t[..., 1] + t[..., 3] / 2)
    zero = g.const(np.zeros(pcx.shape))
    iw = g.maximum(g.minimum(px1, tx1) - g.maximum(px0, tx0), zero)
    ih = g.maximum(g.minimum(py1, ty1) - g.maximum(py0, ty0), zero)
    inter = iw * ih
    union = pw * ph + g.const(t[..., 2] * t[..., 3]) - inter
    iou = inter / union
    cw = g.maximum(px1, tx1) - g.minimum(px0, tx0)
    ch = g.maximum(py1, ty1) - g.minimum(py0, ty0)
    c2 = g.square(cw) + g.square(ch)
    rho2 = g.square(pcx - tcx) + g.square(pcy - tcy)
    v = g.square(g.atan(tw / th) - g.atan(pw / ph)) * (4.0 / math.pi ** 2)
    alpha = v / (v - iou + (1.0 + EPS))
    return (1.0 - iou) + rho2 / c2 + alpha * v


def bce_graph(g: Graph, prob: Var, target: np.ndarray) -> Var:
    """Elementwise binary cross-entropy with epsilon-clamped logs."""
    t = g.const(target)
    one_minus_t = g.const(1.0 - np.asarray(target, dtype=float))
    return -(t * g.log(prob, EPS) + one_minus_t * g.log(1.0 - prob, EPS))


def focal_graph(g: Graph, logits: Var, target: np.ndarray, gamma: float) -> Var:
    """Per-row ``sum_c t_c (1 - p_c)^gamma (-log p_c)`` over the last axis."""
    probs = g.softmax(logits)
    weight = g.power(1.0 - probs, gamma)
    return g.sum(g.const(target) * weight * (-g.log(probs, EPS)), axis=-1)


def detection_terms(g: Graph, pred: Var, targets: CellTargets, cls_loss: str = "ce",
                    gamma: float = 2.0) -> dict[str, Var]:
    """Unweighted cls / reg / obj terms, each a scalar Var."""
    n = pred.shape[0]
    k = pred.shape[-1] - CLS
    logits = g.channels(pred, CLS, CLS + k)
    if cls_loss == "focal":
        per_cell_cls = focal_graph(g, logits, targets.cls_target, gamma)
    elif cls_loss == "ce":
        per_cell_cls = g.softmax_ce(logits, g.const(targets.cls_target))
    else:
        raise ValueError(f"unknown classification loss {cls_loss!r}")
    cls = g.sum(per_cell_cls * g.const(targets.cls_mask)) * (1.0 / n)
    reg = g.sum(ciou_graph(g, decoded_boxes(g, pred), targets.box) * g.const(targets.reg_mask)) * (1.0 / n)
    obj_prob = g.sigmoid(g.channel(pred, OBJ))
    obj = g.sum(bce_graph(g, obj_prob, targets.obj_target)) * (1.0 / n)
    return {"cls": cls, "reg": reg, "obj": obj}


def matricize(arr_shape: tuple[int, ...]) -> tuple[int, int]:
    return arr_shape[0], int(np.prod(arr_shape[1:]))


def orthogonality_graph(g: Graph, weights: Mapping[str, Var], iterations: int = 30) -> Var:
    """Sum of ``sigma(WᵀW - I) + sigma(WWᵀ - I)`` over rank>=2 entries, kernels flattened to (out, in*kh*kw)."""
    total = None
    for name, w in weights.items():
        if len(w.shape) < 2:
            continue
        rows, cols = matricize(w.shape)
        m = w if len(w.shape) == 2 else g.reshape(w, (rows, cols))
        gram_c = g.matmul(g.transpose(m), m) - g.const(np.eye(cols))
        gram_r = g.matmul(m, g.transpose(m)) - g.const(np.eye(rows))
        term = g.spectral_norm(gram_c, iterations) + g.spectral_norm(gram_r, iterations)
        total = term if total is None else total + term
    return total if total is not None else g.const(np.zeros(()))


def weighted_total(g: Graph, terms: Mapping[str, Var], weights: LossWeights, orn: Var | None = None) -> Var:
    total = terms["cls"] * weights.cls + terms["obj"] * weights.obj + terms["reg"] * weights.reg
    if orn is not None:
        total = total + orn * weights.orn
    return total


def breakdown(values: Mapping[str, float], weights: LossWeights) -> LossBreakdown:
    orn = float(values.get("orn", 0.0))
    total = (weights.cls * values["cls"] + weights.obj * values["obj"] + weights.reg * values["reg"]
             + weights.orn * orn)
    return LossBreakdown(float(values["cls"]), float(values["reg"]), float(values["obj"]), orn, float(total))


# --------------------------------------------------------------------------
# numeric front-ends
# --------------------------------------------------------------------------

def _batched(preds) -> np.ndarray:
    p = np.asarray(preds, dtype=np.float64)
    return p[None] if p.ndim == 3 else p


def targets_loss(preds, targets: CellTargets, weights: LossWeights = LossWeights(), cls_loss="ce",
                 gamma=2.0, with_grad=False, dtype=np.float32):
    """Evaluate the detection loss for fixed targets; optionally also d(total)/d(preds)."""
    p = _batched(preds)
    g = Graph()
    x = g.input("preds", p.shape)
    terms = detection_terms(g, x, targets, cls_loss, gamma)
    total = weighted_total(g, terms, weights)
    tr = run(g, {"preds": p}, root=total, backward=with_grad, dtype=dtype)
    br = breakdown({k: float(tr[v]) for k, v in terms.items()}, weights)
    if with_grad:
        grad = tr.gradients["preds"]
        return br, grad.reshape(np.shape(preds))
    return br


def supervised_loss(preds, annotations, weights: LossWeights = LossWeights(), **kw):
    """Supervised loss of (S, S, 5+K) or (N, S, S, 5+K) predictions against ground truth.

    ``annotations`` is a list of (class_id, BoundingBox) for a single grid, or a
    list of such lists for a batch.
    """
    p = _batched(preds)
    anns = [annotations] if np.ndim(preds) == 3 else annotations
    t = supervised_targets(anns, p.shape[1], p.shape[-1] - CLS)
    return targets_loss(preds, t, weights, **kw)


def unsupervised_loss(preds, pl, tau1: float, tau2: float, weights: LossWeights = LossWeights(), **kw):
    return targets_loss(preds, unsupervised_targets(pl, tau1, tau2), weights, **kw)


def ciou_loss(pred: BoundingBox, target: BoundingBox) -> float:
    for b in (pred, target):
        if b.area <= 0:
            raise ValueError(f"degenerate box {b}")
    g = Graph()
    pc = [g.const(np.array(v, dtype=float)) for v in pred.cxcywh()]
    out = ciou_graph(g, pc, np.array(target.cxcywh()))
    return float(run(g, {}, root=out, backward=False, dtype=np.float64).value)


def focal_loss(class_probs, target_class: int, gamma: float = 2.0) -> float:
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    p_t = float(np.asarray(class_probs, dtype=float)[target_class])
    return float(-((1.0 - p_t) ** gamma) * math.log(max(p_t, EPS)))


def cross_entropy(class_probs, target_class: int) -> float:
    return focal_loss(class_probs, target_class, 0.0)


def orthogonality_penalty(params: ParamSet | Mapping[str, np.ndarray], iterations: int = 30) -> float:
    """Penalty over the non-backbone rank>=2 entries (plain mappings are taken whole)."""
    if isinstance(params, ParamSet):
        arrays = {n: params[n] for n in params if params.part_of[n] != Part.BACKBONE}
    else:
        arrays = dict(params)
    g = Graph()
    ws = {n: g.input(n, np.shape(a)) for n, a in arrays.items()}
    out = orthogonality_graph(g, ws, iterations)
    return float(run(g, arrays, root=out, backward=False, dtype=np.float64).value)
