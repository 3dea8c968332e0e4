"""Local EMA teacher and tiered pseudo-label assignment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ArchConfig, ParamSet, decode_arrays, nms, Detection, predict
from .boxes import BoundingBox

BACKGROUND, SOFT, RELIABLE = 0, 1, 2
TIER_NAMES = {BACKGROUND: "background", SOFT: "soft", RELIABLE: "reliable"}


@dataclass(frozen=True)
class EmaState:
    params: ParamSet
    decay: float = 0.999
    last_reinit_round: int = -1

    def __post_init__(self):
        if not 0.0 <= self.decay <= 1.0:
            raise ValueError(f"EMA decay must lie in [0, 1], got {self.decay}")


def _check_shapes(a: ParamSet, b: ParamSet):
    if a.shapes() != b.shapes() or list(a.part_of.values()) != list(b.part_of.values()):
        raise ValueError("parameter sets are not shape-compatible")


def ema_update(state: EmaState, client_params: ParamSet) -> EmaState:
    """``ema <- decay * ema + (1 - decay) * client`` on every entry."""
    _check_shapes(state.params, client_params)
    a = state.decay
    new = {n: a * state.params[n].astype(np.float64) + (1.0 - a) * client_params[n].astype(np.float64)
           for n in state.params}
    return EmaState(state.params.replace(new), a, state.last_reinit_round)


def reinit_ema(state: EmaState, global_params: ParamSet, round_idx: int) -> EmaState:
    _check_shapes(state.params, global_params)
    return EmaState(global_params, state.decay, round_idx)


@dataclass
class PseudoLabelSet:
    """Per-cell pseudo labels; arrays share a leading (S, S) or (N, S, S) grid shape.

    ``box`` is centre form and only meaningful where ``has_box``.
    """

    tier: np.ndarray
    score: np.ndarray
    objectness: np.ndarray
    box: np.ndarray
    has_box: np.ndarray
    class_dist: np.ndarray

    def to_lines(self) -> list[str]:
        """Annotation text lines ``object_id x_center y_center width height score`` for boxed soft/reliable cells."""
        lines = []
        sel = self.has_box & (self.tier != BACKGROUND)
        for idx in zip(*np.nonzero(sel)):
            cx, cy, w, h = self.box[idx]
            cls = int(np.argmax(self.class_dist[idx]))
            lines.append(f"{cls} {cx:.6f} {cy:.6f} {w:.6f} {h:.6f} {float(self.score[idx]):.6f}")
        return lines


def tier_of(score, tau1: float, tau2: float) -> np.ndarray:
    score = np.asarray(score)
    return np.where(score > tau2, RELIABLE, np.where(score < tau1, BACKGROUND, SOFT)).astype(np.int8)


def labels_from_detections(dets: list[Detection], grid: int, num_classes: int, tau1: float,
                           tau2: float) -> PseudoLabelSet:
    """Map detections back to their source cells and tier every cell."""
    score = np.zeros((grid, grid))
    objn = np.zeros((grid, grid))
    box = np.zeros((grid, grid, 4))
    box[...] = (0.5, 0.5, 0.25, 0.25)
    has_box = np.zeros((grid, grid), dtype=bool)
    dist = np.full((grid, grid, num_classes), 1.0 / num_classes)
    for d in dets:
        r, c = d.cell
        score[r, c] = d.score
        objn[r, c] = d.objectness
        box[r, c] = d.box.cxcywh()
        has_box[r, c] = True
        if d.class_probs is not None:
            dist[r, c] = d.class_probs
        else:
            dist[r, c] = np.eye(num_classes)[d.class_id]
    return PseudoLabelSet(tier_of(score, tau1, tau2), score, objn, box, has_box, dist)


def labels_from_predictions(preds: np.ndarray, tau1: float, tau2: float, nms_iou: float) -> PseudoLabelSet:
    """Batched pseudo labels from raw (N, S, S, 5+K) teacher predictions.

    Cells whose detection falls below ``tau1`` or is suppressed by NMS get
    score 0, hence the background tier.
    """
    d = decode_arrays(preds)
    n, s = preds.shape[0], preds.shape[1]
    keep = d["score"] >= tau1
    for i in range(n):
        rows, cols = np.nonzero(keep[i])
        if len(rows) < 2:
            continue
        dets = [Detection(BoundingBox(*d["corners"][i, r, c]), int(d["class_id"][i, r, c]),
                          float(d["score"][i, r, c]), float(d["objectness"][i, r, c]), (int(r), int(c)))
                for r, c in zip(rows, cols)]
        kept = {x.cell for x in nms(dets, nms_iou)}
        for r, c in zip(rows, cols):
            if (int(r), int(c)) not in kept:
                keep[i, r, c] = False
    score = np.where(keep, d["score"], 0.0)
    objn = np.where(keep, d["objectness"], 0.0)
    c = d["corners"]
    box = np.stack([(c[..., 0] + c[..., 2]) / 2, (c[..., 1] + c[..., 3]) / 2,
                    c[..., 2] - c[..., 0], c[..., 3] - c[..., 1]], axis=-1)
    return PseudoLabelSet(tier_of(score, tau1, tau2), score, objn, box, keep, d["probs"])


def assign_pseudo_labels(ema: EmaState, image, tau1: float = 0.1, tau2: float = 0.6, nms_iou: float = 0.65,
                         arch: ArchConfig = ArchConfig()) -> PseudoLabelSet:
    """Teacher forward pass, decode + NMS, then per-cell tiering.

    Accepts one image or a batch; the result's arrays follow the input's rank.
    """
    if not (0.0 <= tau1 < tau2 <= 1.0):
        raise ValueError(f"need 0 <= tau1 < tau2 <= 1, got {tau1}, {tau2}")
    img = np.asarray(image, dtype=np.float32)
    single = img.ndim == 3
    preds = predict(ema.params, img[None] if single else img, arch)
    pl = labels_from_predictions(preds, tau1, tau2, nms_iou)
    if single:
        pl = PseudoLabelSet(*(getattr(pl, f)[0] for f in ("tier", "score", "objectness", "box", "has_box",
                                                          "class_dist")))
    return pl
