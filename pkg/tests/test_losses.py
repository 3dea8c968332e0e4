import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import central_diff, rel_err
from fedsto.boxes import BoundingBox
from fedsto.losses import (CellTargets, LossWeights, ciou_loss, cross_entropy, focal_loss, orthogonality_penalty,
                           supervised_loss, supervised_targets, targets_loss, unsupervised_targets)
from fedsto.model import ArchConfig, init_model
from fedsto.pseudo import BACKGROUND, RELIABLE, SOFT, PseudoLabelSet, tier_of

def textbook_ciou(p, t):
    """Scalar 1 - IoU + rho²/c² + alpha v on corner tuples; no clipping, no epsilon."""
    iw = max(0.0, min(p[2], t[2]) - max(p[0], t[0]))
    ih = max(0.0, min(p[3], t[3]) - max(p[1], t[1]))
    inter = iw * ih
    union = (p[2] - p[0]) * (p[3] - p[1]) + (t[2] - t[0]) * (t[3] - t[1]) - inter
    overlap = inter / union
    cw = max(p[2], t[2]) - min(p[0], t[0])
    ch = max(p[3], t[3]) - min(p[1], t[1])
    rho2 = ((p[0] + p[2] - t[0] - t[2]) / 2) ** 2 + ((p[1] + p[3] - t[1] - t[3]) / 2) ** 2
    v = 4 / math.pi ** 2 * (math.atan((t[2] - t[0]) / (t[3] - t[1])) - math.atan((p[2] - p[0]) / (p[3] - p[1]))) ** 2
    alpha = v / ((1 - overlap) + v) if v > 0 else 0.0
    return 1 - overlap + rho2 / (cw ** 2 + ch ** 2) + alpha * v


# Frozen from textbook_ciou.
CIOU_CASES = [
    ((0.1, 0.1, 0.5, 0.5), (0.2, 0.2, 0.6, 0.7), 0.7199820251010676),
    ((0.0, 0.0, 0.2, 0.2), (0.5, 0.5, 0.9, 0.6), 1.4932966346819314),
]


@pytest.mark.parametrize("p,t,want", CIOU_CASES)
def test_ciou_frozen_values(p, t, want):
    assert ciou_loss(BoundingBox(*p), BoundingBox(*t)) == pytest.approx(want, rel=1e-7)


def test_ciou_oracle_reproduces_frozen_values():
    for p, t, want in CIOU_CASES:
        assert textbook_ciou(p, t) == pytest.approx(want, rel=1e-12)


def test_ciou_identical_boxes_is_zero():
    b = BoundingBox(0.2, 0.3, 0.6, 0.5)
    assert ciou_loss(b, b) == pytest.approx(0.0, abs=1e-12)


box_side = st.floats(0.05, 0.45)
box_pos = st.floats(0.0, 0.5)


@given(box_pos, box_pos, box_side, box_side, box_pos, box_pos, box_side, box_side)
def test_ciou_bounds(x0, y0, w0, h0, x1, y1, w1, h1):
    a = BoundingBox(x0, y0, x0 + w0, y0 + h0)
    b = BoundingBox(x1, y1, x1 + w1, y1 + h1)
    v = ciou_loss(a, b)
    # 1 - IoU in [0, 1], distance term < 1, aspect term <= 1
    assert 0.0 <= v < 3.0


def test_focal_hand_values():
    assert focal_loss([0.5, 0.5], 0, gamma=2.0) == pytest.approx(0.25 * math.log(2))
    assert focal_loss([1.0, 0.0], 0) == 0.0
    assert focal_loss([0.0, 1.0], 0) == pytest.approx(-math.log(1e-7))
    with pytest.raises(ValueError):
        focal_loss([0.5, 0.5], 0, gamma=-1)


@given(st.floats(1e-4, 1.0), st.floats(0.0, 5.0))
def test_focal_never_exceeds_cross_entropy(p, gamma):
    probs = [p, 1 - p]
    assert focal_loss(probs, 0, gamma) <= cross_entropy(probs, 0) + 1e-12
    assert focal_loss(probs, 0, 0.0) == pytest.approx(cross_entropy(probs, 0))


def test_orthogonality_hand_values():
    q, _ = np.linalg.qr(np.random.default_rng(0).standard_normal((5, 5)))
    assert orthogonality_penalty({"neck.w": q}, iterations=200) == pytest.approx(0.0, abs=1e-9)
    assert orthogonality_penalty({"neck.w": 2 * np.eye(3)}) == pytest.approx(2 * 3.0)
    # orthonormal rows: W Wᵀ = I, but WᵀW - I has eigenvalue -1
    assert orthogonality_penalty({"head.w": np.eye(2, 3)}, iterations=200) == pytest.approx(1.0)
    assert orthogonality_penalty({"neck.b": np.ones(4)}) == 0.0


def test_orthogonality_skips_backbone_and_biases():
    p = init_model(ArchConfig(), 0)
    scaled = p.replace({n: p[n] * 3 for n in p.names("backbone")}).replace({"neck.conv.bias": np.ones(16)})
    assert orthogonality_penalty(scaled) == pytest.approx(orthogonality_penalty(p))


def _brute_supervised(preds, anns, k):
    """Per-cell loop oracle for a single grid (weights 0.3 / 0.7 / 1.0)."""
    s = preds.shape[0]
    sig = lambda z: 1 / (1 + math.exp(-z))
    cls = reg = obj = 0.0
    owner = {}
    for c, b in anns:
        cx, cy, _, _ = b.cxcywh()
        owner[(min(int(cy * s), s - 1), min(int(cx * s), s - 1))] = (c, b)
    for r in range(s):
        for col in range(s):
            p = preds[r, col]
            po = sig(p[4])
            t = 1.0 if (r, col) in owner else 0.0
            obj -= t * math.log(max(po, 1e-7)) + (1 - t) * math.log(max(1 - po, 1e-7))
            if (r, col) in owner:
                c, b = owner[(r, col)]
                z = p[5:] - p[5:].max()
                cls -= z[c] - math.log(np.exp(z).sum())
                cx, cy, w, h = (col + sig(p[0])) / s, (r + sig(p[1])) / s, sig(p[2]), sig(p[3])
                reg += textbook_ciou((cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2), b.as_array())
    return 0.3 * cls + 0.7 * obj + 1.0 * reg


def test_supervised_matches_per_cell_loop():
    rng = np.random.default_rng(7)
    preds = rng.normal(0, 0.5, (4, 4, 8))
    anns = [(0, BoundingBox(0.1, 0.1, 0.3, 0.35)), (2, BoundingBox(0.55, 0.6, 0.95, 0.9))]
    br = supervised_loss(preds, anns, dtype=np.float64)
    assert br.total == pytest.approx(_brute_supervised(preds, anns, 3), rel=1e-7)


def test_batch_is_averaged():
    rng = np.random.default_rng(8)
    preds = rng.normal(0, 0.5, (2, 4, 4, 8))
    anns = [[(1, BoundingBox(0.2, 0.2, 0.4, 0.4))], []]
    both = supervised_loss(preds, anns, dtype=np.float64).total
    each = [supervised_loss(preds[i], anns[i], dtype=np.float64).total for i in range(2)]
    assert both == pytest.approx(np.mean(each))


def test_supervised_gradient():
    rng = np.random.default_rng(9)
    preds = rng.normal(0, 0.5, (4, 4, 8))
    anns = [(1, BoundingBox(0.3, 0.3, 0.6, 0.5))]
    _, grad = supervised_loss(preds, anns, with_grad=True)
    want = central_diff(lambda p: supervised_loss(p, anns, dtype=np.float64).total, preds)
    assert rel_err(grad, want) < 1e-3


def test_focal_variant_gradient():
    rng = np.random.default_rng(10)
    preds = rng.normal(0, 0.5, (4, 4, 8))
    anns = [(2, BoundingBox(0.1, 0.5, 0.4, 0.9))]
    _, grad = supervised_loss(preds, anns, cls_loss="focal", with_grad=True)
    want = central_diff(lambda p: supervised_loss(p, anns, cls_loss="focal", dtype=np.float64).total, preds)
    assert rel_err(grad, want) < 1e-3


def test_annotation_validation():
    with pytest.raises(TypeError):
        supervised_targets([[(0, (0.1, 0.1, 0.2, 0.2))]], 4, 3)
    with pytest.raises(ValueError):
        supervised_targets([[(5, BoundingBox(0.1, 0.1, 0.2, 0.2))]], 4, 3)


def test_unknown_cls_loss():
    with pytest.raises(ValueError):
        targets_loss(np.zeros((4, 4, 8)), CellTargets.empty(1, 4, 3), cls_loss="hinge")


def test_weights_reject_negative():
    with pytest.raises(ValueError):
        LossWeights(cls=-1)


def _labels(score, objn, has_box, tau1, tau2):
    s = score.shape[-1]
    box = np.broadcast_to(np.array([0.5, 0.5, 0.2, 0.2]), score.shape + (4,)).copy()
    dist = np.broadcast_to(np.array([0.7, 0.2, 0.1]), score.shape + (3,)).copy()
    return PseudoLabelSet(tier_of(score, tau1, tau2), score, objn, box, has_box, dist)


def test_unsupervised_routing_hand_case():
    score = np.array([[0.05, 0.3, 0.9, 0.0]] * 4)
    objn = np.array([[0.05, 0.995, 0.95, 0.0]] * 4)
    has_box = np.array([[True, True, True, False]] * 4)
    t = unsupervised_targets(_labels(score, objn, has_box, 0.1, 0.6), 0.1, 0.6)
    np.testing.assert_array_equal(t.cls_mask[0, 0], [0, 0, 1, 0])
    # soft cell with objectness > 0.99 still regresses
    np.testing.assert_array_equal(t.reg_mask[0, 0], [0, 1, 1, 0])
    np.testing.assert_allclose(t.obj_target[0, 0], [0.0, 0.3, 0.95, 0.0])
    np.testing.assert_allclose(t.cls_target[0, 0, 2], [0.7, 0.2, 0.1])


def test_tier_mismatch_rejected():
    score = np.full((4, 4), 0.9)
    pl = _labels(score, score, np.ones((4, 4), bool), 0.1, 0.6)
    pl.tier[0, 0] = SOFT
    with pytest.raises(ValueError, match="inconsistent"):
        unsupervised_targets(pl, 0.1, 0.6)


def test_all_background_gives_only_objectness():
    score = np.zeros((4, 4))
    pl = _labels(score, score, np.zeros((4, 4), bool), 0.1, 0.6)
    assert (pl.tier == BACKGROUND).all() and not (pl.tier == RELIABLE).any()
    br = targets_loss(np.zeros((4, 4, 8)), unsupervised_targets(pl, 0.1, 0.6))
    assert br.cls == 0.0 and br.reg == 0.0
    assert br.obj == pytest.approx(16 * math.log(2), rel=1e-6)
