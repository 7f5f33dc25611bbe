"""Training objective and evaluation metrics.

The objective couples a per-class presence cross-entropy with focal and
dice terms on the masks (weights 20.0 and 1.0).  Per-stage masks are
supervised at token resolution against average-pooled targets; the combined
mask is supervised at full resolution.  Evaluation accumulates per-class
intersection/union counts into mean IoU, optionally grouped by class sets
for the continual protocol.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from atmseg import tensor as T
from atmseg.tensor import ContractViolation, Tensor

IGNORE_LABEL = 255
# pixels that belong to no class of the current head: they count as mask
# negatives but never as presence positives (continual-learning convention)
NEGATIVE_LABEL = -1
_EPS = 1e-12


class DataError(ValueError):
    """Labels or targets outside their documented range."""


@dataclass
class LossWeights:
    focal: float = 20.0
    dice: float = 1.0
    edge: float = 1.0
    focal_gamma: float = 2.0
    dice_smooth: float = 1.0

    def __post_init__(self):
        for name in ("focal", "dice", "edge", "focal_gamma", "dice_smooth"):
            if getattr(self, name) < 0:
                raise ContractViolation(f"loss weight {name} must be >= 0")


def presence_targets(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """1 where at least one pixel carries the class, else 0."""
    labels = np.asarray(labels)
    classed = labels[(labels != IGNORE_LABEL) & (labels != NEGATIVE_LABEL)]
    if classed.size and (classed.min() < 0 or classed.max() >= n_classes):
        raise DataError(
            f"labels outside [0, {n_classes}) (ignore={IGNORE_LABEL} allowed)"
        )
    out = np.zeros(n_classes, dtype=np.float64)
    out[np.unique(classed)] = 1.0
    return out


def classification_loss(class_probs: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-probability of the correct presence bit."""
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    n = class_probs.shape[0]
    if t.shape[0] != n:
        raise ContractViolation(f"{t.shape[0]} targets for {n} classes")
    onehot = np.stack([1.0 - t, t], axis=1)
    picked = T.tensor_sum(T.mul(class_probs, Tensor(onehot)), axis=1)
    return -T.tensor_mean(T.log(T.clamp(picked, _EPS, 1.0)))


def _focal_terms(mask: Tensor, gt: np.ndarray, gamma: float) -> Tensor:
    """Per-element focal cross-entropy (soft targets supported)."""
    g = np.asarray(gt, dtype=np.float64)
    if g.shape != mask.shape:
        raise ContractViolation(
            f"focal: mask {mask.shape} vs target {g.shape}"
        )
    p = T.clamp(mask, _EPS, 1.0 - _EPS)
    one_minus = Tensor(np.ones_like(g)) - p
    pos = T.mul(Tensor(g), T.mul(T.power(one_minus, gamma), T.log(p)))
    neg = T.mul(Tensor(1.0 - g), T.mul(T.power(p, gamma), T.log(one_minus)))
    return -(pos + neg)


def focal_loss(mask: Tensor, gt: np.ndarray, gamma: float = 2.0,
               weights: np.ndarray | None = None) -> Tensor:
    """Mean focal term; optional per-element weights (ignore handling)."""
    if gamma < 0:
        raise ContractViolation("focal: gamma must be >= 0")
    terms = _focal_terms(mask, gt, gamma)
    if weights is None:
        return T.tensor_mean(terms)
    w = np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        return T.tensor_sum(terms) * 0.0
    return T.tensor_sum(T.mul(terms, Tensor(w))) * (1.0 / total)


def dice_loss(mask: Tensor, gt: np.ndarray, smooth: float = 1.0,
              weights: np.ndarray | None = None) -> Tensor:
    """One minus the smoothed dice overlap, averaged over classes.

    ``mask`` and ``gt`` are [N, ...]; elementwise weights silence ignored
    pixels.  Perfect agreement approaches zero at rate smooth/(2|class|).
    """
    if smooth <= 0:
        raise ContractViolation("dice: smooth must be > 0")
    g = np.asarray(gt, dtype=np.float64)
    if g.shape != mask.shape:
        raise ContractViolation(f"dice: mask {mask.shape} vs target {g.shape}")
    n = mask.shape[0]
    m = int(np.prod(mask.shape[1:]))
    flat = T.reshape(mask, (n, m))
    gf = g.reshape(n, m)
    if weights is not None:
        w = np.asarray(weights, dtype=np.float64).reshape(m)
        flat = T.mul(flat, Tensor(w))
        gf = gf * w
    inter = T.tensor_sum(T.mul(flat, Tensor(gf)), axis=1)
    sums = T.tensor_sum(flat, axis=1) + Tensor(gf.sum(axis=1))
    num = inter * 2.0 + Tensor(np.full(n, smooth))
    den = sums + Tensor(np.full(n, smooth))
    ratio = T.mul(num, T.power(den, -1.0))
    return T.tensor_mean(Tensor(np.ones(n)) - ratio)


def one_hot_masks(labels: np.ndarray, n_classes: int):
    """Hard per-class masks plus a validity plane.

    Ignore pixels have validity 0; NEGATIVE_LABEL pixels stay valid with an
    all-zero row (pure negatives).
    """
    labels = np.asarray(labels)
    valid = labels != IGNORE_LABEL
    classed = labels[valid & (labels != NEGATIVE_LABEL)]
    if classed.size and classed.max() >= n_classes:
        raise DataError(f"label {classed.max()} >= {n_classes}")
    onehot = np.zeros((n_classes,) + labels.shape, dtype=np.float64)
    for c in range(n_classes):
        onehot[c][valid & (labels == c)] = 1.0
    return onehot, valid.astype(np.float64)


def pool_targets(onehot: np.ndarray, valid: np.ndarray, grid, patch_hw):
    """Average-pool hard masks onto the token grid.

    Returns [N, L] soft targets (fraction of valid pixels in the patch that
    carry the class) and an [L] weight equal to the valid-pixel fraction.
    """
    n = onehot.shape[0]
    h, w = grid
    ph, pw = patch_hw
    oh = onehot.reshape(n, h, ph, w, pw)
    vl = valid.reshape(h, ph, w, pw)
    vsum = vl.sum(axis=(1, 3))
    osum = oh.sum(axis=(2, 4))
    weight = vsum / (ph * pw)
    target = np.divide(
        osum, vsum[None], out=np.zeros((n, h, w)), where=vsum[None] > 0
    )
    return target.reshape(n, h * w), weight.reshape(h * w)


def total_loss(per_stage, stage_probs, seg, labels: np.ndarray,
               weights: LossWeights, grid, *, edge_term: Tensor | None = None):
    """Weighted sum of presence, focal, and dice terms plus stage auxiliaries.

    The combined upsampled mask is supervised at pixel resolution; every
    stage's (mask, class) pair is supervised at token resolution with unit
    auxiliary weight.  Returns (scalar loss, components dict).
    """
    labels = np.asarray(labels)
    n = seg.masks.shape[0]
    targets = presence_targets(labels, n)
    onehot, valid = one_hot_masks(labels, n)
    H, W = labels.shape
    h, w = grid
    pooled, pool_w = pool_targets(onehot, valid, grid, (H // h, W // w))
    full_w = np.broadcast_to(valid[None], onehot.shape).copy()
    token_w = np.broadcast_to(pool_w[None], pooled.shape).copy()

    comps = {}
    comps["cls"] = classification_loss(seg.class_probs, targets)
    comps["focal"] = focal_loss(seg.masks, onehot, weights.focal_gamma, full_w)
    comps["dice"] = dice_loss(seg.masks, onehot, weights.dice_smooth,
                              valid.reshape(-1))
    loss = comps["cls"] + comps["focal"] * weights.focal \
        + comps["dice"] * weights.dice

    for i, (out, probs) in enumerate(zip(per_stage, stage_probs)):
        c = classification_loss(probs, targets)
        f = focal_loss(out.mask, pooled, weights.focal_gamma, token_w)
        d = dice_loss(out.mask, pooled, weights.dice_smooth, pool_w)
        comps[f"stage{i}_cls"] = c
        comps[f"stage{i}_focal"] = f
        comps[f"stage{i}_dice"] = d
        loss = loss + c + f * weights.focal + d * weights.dice

    if edge_term is not None:
        comps["edge"] = edge_term
        loss = loss + edge_term * weights.edge
    return loss, comps


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class ConfusionAccumulator:
    """Streaming per-class intersection / union / pixel counts."""

    n_classes: int
    intersection: np.ndarray = field(default=None)
    union: np.ndarray = field(default=None)
    pixels: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.intersection is None:
            self.intersection = np.zeros(self.n_classes, dtype=np.int64)
        if self.union is None:
            self.union = np.zeros(self.n_classes, dtype=np.int64)
        if self.pixels is None:
            self.pixels = np.zeros(self.n_classes, dtype=np.int64)

    def merge(self, other: "ConfusionAccumulator") -> "ConfusionAccumulator":
        if other.n_classes != self.n_classes:
            raise ContractViolation("cannot merge accumulators of different N")
        self.intersection += other.intersection
        self.union += other.union
        self.pixels += other.pixels
        return self

    def iou(self) -> np.ndarray:
        return np.divide(
            self.intersection, self.union,
            out=np.full(self.n_classes, np.nan), where=self.union > 0,
        )

    def miou(self) -> float:
        vals = self.iou()
        ok = ~np.isnan(vals)
        return float(vals[ok].mean()) if ok.any() else float("nan")


def accumulate_confusion(pred: np.ndarray, gt: np.ndarray,
                         acc: ConfusionAccumulator) -> ConfusionAccumulator:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ContractViolation(
            f"prediction {pred.shape} vs ground truth {gt.shape}"
        )
    keep = gt != IGNORE_LABEL
    p, g = pred[keep], gt[keep]
    n = acc.n_classes
    if g.size and (g.max() >= n or p.max() >= n or g.min() < 0 or p.min() < 0):
        raise DataError(f"labels outside [0, {n})")
    for c in range(n):
        pc, gc = p == c, g == c
        acc.intersection[c] += int(np.logical_and(pc, gc).sum())
        acc.union[c] += int(np.logical_or(pc, gc).sum())
        acc.pixels[c] += int(gc.sum())
    return acc


def grouped_miou(acc: ConfusionAccumulator, groups):
    """Mean IoU inside each class group (zero-union classes skipped).

    Returns (list of per-group mIoU, overall mIoU).  Groups must not share
    class ids.
    """
    seen = set()
    for g in groups:
        g = set(g)
        if g & seen:
            raise ContractViolation("groups overlap")
        seen |= g
    vals = acc.iou()
    out = []
    for g in groups:
        ids = [c for c in g if not np.isnan(vals[c])]
        out.append(float(np.mean([vals[c] for c in ids])) if ids else float("nan"))
    return out, acc.miou()
