"""Axis-aligned box arithmetic, IoU/GIoU metrics and the box regression losses.

Boxes live in normalized scene coordinates ``(x1, y1, x2, y2)`` with the
origin at the top-left corner. Everything here runs in float64.

Two kinds of input are accepted:

* :class:`BoxN` -- a validated box (``0 <= x1 <= x2 <= 1``, same for y).
* a raw 4-vector -- any finite ``(x1, y1, x2, y2)``, used for regression
  outputs which are not guaranteed to be ordered.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class GeometryError(ValueError):
    pass


class InvalidBox(GeometryError):
    pass


class NonFiniteInput(GeometryError):
    pass


@dataclass(frozen=True)
class BoxN:
    """A validated box in normalized ``[0, 1]^2`` coordinates."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(np.isfinite(v) for v in vals):
            raise InvalidBox(f"non-finite box {vals}")
        if not (0.0 <= self.x1 <= self.x2 <= 1.0 and 0.0 <= self.y1 <= self.y2 <= 1.0):
            raise InvalidBox(f"box {vals} violates 0 <= x1 <= x2 <= 1, 0 <= y1 <= y2 <= 1")
        for name, v in zip(("x1", "y1", "x2", "y2"), vals):
            object.__setattr__(self, name, float(v))

    @classmethod
    def from_seq(cls, seq) -> "BoxN":
        x1, y1, x2, y2 = (float(v) for v in seq)
        return cls(x1, y1, x2, y2)

    def to_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    def to_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    def contains(self, other: "BoxN") -> bool:
        return (self.x1 <= other.x1 and self.y1 <= other.y1
                and other.x2 <= self.x2 and other.y2 <= self.y2)


@dataclass(frozen=True)
class LossWeights:
    """Loss mixing weights.

    ``alpha``/``beta`` mix the language-modeling loss with the box loss,
    ``gamma``/``delta`` mix L1 with GIoU inside the box loss.
    """

    alpha: float = 0.2
    beta: float = 0.8
    gamma: float = 0.2
    delta: float = 0.8

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "delta"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {name}={v!r} must be finite and >= 0")


def _as_raw(b) -> np.ndarray:
    if isinstance(b, BoxN):
        return b.to_array()
    arr = np.asarray(b, dtype=np.float64)
    if arr.shape[-1] != 4:
        raise ValueError(f"expected a 4-vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteInput(f"non-finite box coordinates {arr}")
    return arr


def area(b: BoxN) -> float:
    return (b.x2 - b.x1) * (b.y2 - b.y1)


def enclosing(bp: BoxN, bg: BoxN) -> BoxN:
    """Smallest box containing both inputs."""
    return BoxN(min(bp.x1, bg.x1), min(bp.y1, bg.y1), max(bp.x2, bg.x2), max(bp.y2, bg.y2))


def _overlap_terms(p: np.ndarray, g: np.ndarray) -> dict:
    # Predicted extents are clamped at zero so an unordered prediction has
    # zero area instead of a signed one.
    pw = np.maximum(p[..., 2] - p[..., 0], 0.0)
    ph = np.maximum(p[..., 3] - p[..., 1], 0.0)
    gw = np.maximum(g[..., 2] - g[..., 0], 0.0)
    gh = np.maximum(g[..., 3] - g[..., 1], 0.0)
    iw_raw = np.minimum(p[..., 2], g[..., 2]) - np.maximum(p[..., 0], g[..., 0])
    ih_raw = np.minimum(p[..., 3], g[..., 3]) - np.maximum(p[..., 1], g[..., 1])
    iw = np.maximum(iw_raw, 0.0)
    ih = np.maximum(ih_raw, 0.0)
    inter = iw * ih
    union = pw * ph + gw * gh - inter
    cw = np.maximum(p[..., 2], g[..., 2]) - np.minimum(p[..., 0], g[..., 0])
    ch = np.maximum(p[..., 3], g[..., 3]) - np.minimum(p[..., 1], g[..., 1])
    cw = np.maximum(cw, 0.0)
    ch = np.maximum(ch, 0.0)
    encl = cw * ch
    with np.errstate(divide="ignore", invalid="ignore"):
        iou_v = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
        giou_v = np.where(encl > 0,
                          iou_v - (encl - union) / np.where(encl > 0, encl, 1.0),
                          iou_v)
    return dict(pw=pw, ph=ph, iw_raw=iw_raw, ih_raw=ih_raw, iw=iw, ih=ih, inter=inter,
                union=union, cw=cw, ch=ch, encl=encl, iou=iou_v, giou=giou_v)


def iou(bp: BoxN, bg: BoxN) -> float:
    """Intersection over union; 0 when both boxes are degenerate."""
    return float(_overlap_terms(bp.to_array(), bg.to_array())["iou"])


def giou(bp: BoxN, bg: BoxN) -> float:
    """Generalized IoU: ``IoU - (|C| - |U|) / |C|`` with ``C`` the enclosing box.

    Falls back to plain IoU when the enclosing box has zero area.
    """
    return float(_overlap_terms(bp.to_array(), bg.to_array())["giou"])


def l1_loss(bp, bg: BoxN) -> float:
    p = _as_raw(bp)
    return float(np.abs(p - bg.to_array()).sum())


def giou_loss(bp, bg: BoxN) -> float:
    return float(1.0 - _overlap_terms(_as_raw(bp), bg.to_array())["giou"])


def arl(bp, bg: BoxN, w: LossWeights = LossWeights()) -> float:
    """Box regression loss ``gamma * L1 + delta * (1 - GIoU)``."""
    return w.gamma * l1_loss(bp, bg) + w.delta * giou_loss(bp, bg)


def _tie_step(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """d max(a, b) / da with ties split evenly."""
    return np.where(a > b, 1.0, np.where(a == b, 0.5, 0.0))


def arl_with_grad(pred: np.ndarray, gold: np.ndarray, w: LossWeights = LossWeights()):
    """Batched box loss and its gradient with respect to ``pred``.

    Args:
        pred: ``(..., 4)`` raw predicted boxes (may be unordered).
        gold: ``(..., 4)`` gold boxes, assumed valid.
        w: loss weights; only ``gamma`` and ``delta`` are used.

    Returns:
        ``(loss, grad, parts)`` where ``loss`` has shape ``pred.shape[:-1]``,
        ``grad`` has the shape of ``pred``, and ``parts`` holds the unweighted
        ``l1`` and ``giou_loss`` terms.

    Non-smooth points use fixed conventions: ``sign(0) = 0`` for L1; ties
    inside min/max split the derivative evenly between both arguments;
    intersection/extent clamps pass the derivative through when the
    unclamped value is ``>= 0`` (touching edges count as overlapping) and
    block it otherwise.
    """
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gold, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise NonFiniteInput("non-finite predicted box")
    t = _overlap_terms(p, g)
    diff = p - g
    l1 = np.abs(diff).sum(axis=-1)
    gl = 1.0 - t["giou"]
    loss = w.gamma * l1 + w.delta * gl

    # d iw / d(px1, px2): intersection uses max of left edges, min of right edges
    act_w = (t["iw_raw"] >= 0).astype(np.float64)
    act_h = (t["ih_raw"] >= 0).astype(np.float64)
    d_iw_x1 = -act_w * _tie_step(p[..., 0], g[..., 0])
    d_iw_x2 = act_w * _tie_step(g[..., 2], p[..., 2])
    d_ih_y1 = -act_h * _tie_step(p[..., 1], g[..., 1])
    d_ih_y2 = act_h * _tie_step(g[..., 3], p[..., 3])
    d_inter = np.stack([d_iw_x1 * t["ih"], d_ih_y1 * t["iw"],
                        d_iw_x2 * t["ih"], d_ih_y2 * t["iw"]], axis=-1)

    act_pw = (p[..., 2] - p[..., 0] >= 0).astype(np.float64)
    act_ph = (p[..., 3] - p[..., 1] >= 0).astype(np.float64)
    d_ap = np.stack([-act_pw * t["ph"], -act_ph * t["pw"],
                     act_pw * t["ph"], act_ph * t["pw"]], axis=-1)
    d_union = d_ap - d_inter

    d_cw_x1 = -_tie_step(g[..., 0], p[..., 0])
    d_cw_x2 = _tie_step(p[..., 2], g[..., 2])
    d_ch_y1 = -_tie_step(g[..., 1], p[..., 1])
    d_ch_y2 = _tie_step(p[..., 3], g[..., 3])
    d_encl = np.stack([d_cw_x1 * t["ch"], d_ch_y1 * t["cw"],
                       d_cw_x2 * t["ch"], d_ch_y2 * t["cw"]], axis=-1)

    union = t["union"][..., None]
    inter = t["inter"][..., None]
    encl = t["encl"][..., None]
    safe_u = np.where(union > 0, union, 1.0)
    safe_c = np.where(encl > 0, encl, 1.0)
    d_iou = np.where(union > 0, (d_inter * union - inter * d_union) / safe_u**2, 0.0)
    d_giou = np.where(encl > 0, d_iou + d_union / safe_c - union * d_encl / safe_c**2, d_iou)

    grad = w.gamma * np.sign(diff) - w.delta * d_giou
    return loss, grad, {"l1": l1, "giou_loss": gl}


def grad_arl(bp, bg: BoxN, w: LossWeights = LossWeights()) -> np.ndarray:
    """Gradient of :func:`arl` with respect to the raw predicted 4-vector."""
    p = _as_raw(bp)
    _, grad, _ = arl_with_grad(p, bg.to_array(), w)
    return grad


def raster_overlap(bp, bg, resolution: int = 1000) -> tuple[float, float]:
    """Brute-force IoU and GIoU penalty by counting covered grid cells.

    A cell belongs to a box when its center lies in ``[x1, x2) x [y1, y2)``.
    The enclosing box is taken as the cell bounding box of the union mask.

    Returns:
        ``(iou, penalty)`` where ``penalty = (|C| - |U|) / |C|``.
    """
    a = _as_raw(bp)
    b = _as_raw(bg)
    centers = (np.arange(resolution) + 0.5) / resolution

    def axes(box):
        mx = (centers >= box[0]) & (centers < box[2])
        my = (centers >= box[1]) & (centers < box[3])
        if not (mx.any() and my.any()):
            mx[:] = my[:] = False
        return mx, my

    (ax, ay), (bx, by) = axes(a), axes(b)
    ma = ay[:, None] & ax[None, :]
    mb = by[:, None] & bx[None, :]
    n_inter = np.count_nonzero(ma & mb)
    n_union = np.count_nonzero(ma | mb)
    if n_union == 0:
        return 0.0, 0.0
    # rows/columns touched by the union mask
    rows = np.flatnonzero(ay | by)
    cols = np.flatnonzero(ax | bx)
    n_encl = (rows[-1] - rows[0] + 1) * (cols[-1] - cols[0] + 1)
    return n_inter / n_union, (n_encl - n_union) / n_encl
