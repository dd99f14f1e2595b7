"""Training objectives: feature distillation, occupancy, temporal consistency, total."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor

L2_EPS = 1e-12  # inside sqrt for the literal (non-squared) distance mode


@dataclass(frozen=True)
class LossWeights:
    w_occ: float = 0.05
    lam: float = 1.0
    w_temp: float = 0.0

    def __post_init__(self):
        if min(self.w_occ, self.lam, self.w_temp) < 0:
            raise ValueError(f"loss weights must be non-negative: {self}")


@dataclass
class LossBreakdown:
    distill: float
    occ_bce: float
    occ_intensity: float
    temporal: float
    total: float
    counts: dict = field(default_factory=dict)
    total_tensor: Tensor | None = field(default=None, repr=False)

    def row(self) -> dict:
        return {"distill": self.distill, "occ_bce": self.occ_bce, "occ_intensity": self.occ_intensity,
                "temporal": self.temporal, "total": self.total}


def _zero() -> Tensor:
    return Tensor(np.asarray(0.0))


def _row_sq_dist(a, b) -> Tensor:
    d = ag.sub(ag.l2_normalize_rows(a), ag.l2_normalize_rows(b))
    return ag.sum_lastdim(ag.mul(d, d))


def _row_distance(a, b, norm: str) -> Tensor:
    sq = _row_sq_dist(a, b)
    if norm == "l2sq":
        return sq
    if norm == "l2":
        return ag.sqrt(sq, L2_EPS)
    raise ValueError(f"unknown distill_norm {norm!r}")


def distillation_loss(student, teacher, norm: str = "l2sq") -> Tensor:
    """Mean over matched rows of the (squared) distance between l2-normalised rows.

    Row i of ``student`` is paired with row i of ``teacher``. With ``l2sq`` this
    equals mean(2 - 2 cos). No rows gives 0.
    """
    student, teacher = ag.as_tensor(student), ag.as_tensor(teacher)
    if student.shape != teacher.shape:
        raise ag.ShapeError(f"distillation_loss: {student.shape} vs {teacher.shape}")
    if student.shape[0] == 0:
        return _zero()
    return ag.mean(_row_distance(student, teacher, norm))


def multiview_distillation_loss(student, teacher, view_ids: np.ndarray, norm: str = "l2sq",
                                per_view: bool = True) -> Tensor:
    """Distillation over several camera views stacked row-wise.

    ``view_ids[i]`` names the view of row i. ``per_view`` averages inside each
    view first and then across views; otherwise one global mean.
    """
    student, teacher = ag.as_tensor(student), ag.as_tensor(teacher)
    view_ids = np.asarray(view_ids)
    if student.shape[0] == 0:
        return _zero()
    dist = _row_distance(student, teacher, norm)
    if not per_view:
        return ag.mean(dist)
    _, inverse, counts = np.unique(view_ids, return_inverse=True, return_counts=True)
    weights = 1.0 / (counts[inverse] * len(counts))
    return ag.sum(ag.mul(dist, Tensor(weights)))


def occupancy_loss(out, qs) -> tuple[Tensor, Tensor]:
    """(BCE over all queries, intensity MSE over occupied queries).

    ``out`` is either the decoder's (Q, 2) output or a ``(logits, intensity)`` pair.
    """
    if isinstance(out, tuple):
        logits, intensity = ag.as_tensor(out[0]), ag.as_tensor(out[1])
    else:
        logits, intensity = ag.take_column(out, 0), ag.take_column(out, 1)
    q = qs.num_queries
    if logits.shape != (q,) or intensity.shape != (q,):
        raise ag.ShapeError(f"occupancy_loss: {logits.shape}/{intensity.shape} for {q} queries")
    if q == 0:
        return _zero(), _zero()
    bce = ag.bce_with_logits(logits, Tensor(qs.occupancy_label))
    occ = np.flatnonzero(qs.occupancy_label == 1)
    if len(occ) == 0:
        return bce, _zero()
    inten = ag.mse(ag.gather_rows(intensity, occ), Tensor(qs.intensity_target[occ]))
    return bce, inten


def temporal_loss(feats_a, feats_b) -> Tensor:
    """Mean squared distance between normalised backbone features of paired points."""
    feats_a, feats_b = ag.as_tensor(feats_a), ag.as_tensor(feats_b)
    if feats_a.shape != feats_b.shape:
        raise ag.ShapeError(f"temporal_loss: {feats_a.shape} vs {feats_b.shape}")
    if feats_a.shape[0] == 0:
        return _zero()
    return ag.mean(_row_sq_dist(feats_a, feats_b))


def total_loss(distill, occ_bce=None, occ_intensity=None, temporal=None,
               weights: LossWeights = LossWeights(), counts: dict | None = None) -> LossBreakdown:
    """total = distill + w_occ * (bce + lam * intensity) + w_temp * temporal."""
    if not isinstance(weights, LossWeights):
        weights = LossWeights(**weights)
    parts = [ag.as_tensor(x) if x is not None else _zero() for x in (distill, occ_bce, occ_intensity, temporal)]
    d, b, i, t = parts
    total = d
    if weights.w_occ:
        occ = ag.add(b, ag.multiply_scalar(i, weights.lam)) if weights.lam else b
        total = ag.add(total, ag.multiply_scalar(occ, weights.w_occ))
    if weights.w_temp:
        total = ag.add(total, ag.multiply_scalar(t, weights.w_temp))
    return LossBreakdown(d.item(), b.item(), i.item(), t.item(), total.item(), dict(counts or {}), total)


def stack_views(views: Sequence, row_of: np.ndarray | None = None):
    """Concatenate view pairings into (rows, teacher, view_ids)."""
    rows, teach, vid = [], [], []
    for k, v in enumerate(views):
        if len(v.point_index) == 0:
            continue
        rows.append(v.point_index if row_of is None else row_of[v.point_index])
        teach.append(v.teacher)
        vid.append(np.full(len(v.point_index), k))
    if not rows:
        return np.zeros(0, np.int64), np.zeros((0, 0)), np.zeros(0, np.int64)
    return np.concatenate(rows), np.concatenate(teach), np.concatenate(vid)
