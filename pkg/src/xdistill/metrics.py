"""Feature-informativeness diagnostics and segmentation scores."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

RANKME_EPS = 1e-7


def jacobi_singular_values(A: np.ndarray, tol: float = 1e-15, max_sweeps: int = 60) -> np.ndarray:
    """Singular values of a small dense matrix by one-sided (Hestenes) Jacobi.

    Columns are orthogonalised by plane rotations until every pair is
    orthogonal to ``tol``; the column norms are then the singular values.
    Returned in descending order.
    """
    U = np.array(A, dtype=np.float64, copy=True)
    n = U.shape[1]
    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                up, uq = U[:, p], U[:, q]
                alpha = up @ up
                beta = uq @ uq
                gamma = up @ uq
                if gamma == 0.0 or abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                new_p = c * up - s * uq
                U[:, q] = s * up + c * uq
                U[:, p] = new_p
        if not rotated:
            break
    return np.sort(np.linalg.norm(U, axis=0))[::-1]


def singular_values(X: np.ndarray) -> np.ndarray:
    """Singular values of an (N, D) matrix, descending, length min(N, D)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.size == 0:
        raise ValueError(f"expected a non-empty 2-D matrix, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("features contain non-finite values")
    if X.shape[0] < X.shape[1]:
        X = X.T
    # the triangular factor has the same singular values and is only D x D
    R = np.linalg.qr(X, mode="r") if X.shape[0] > X.shape[1] else X
    return jacobi_singular_values(R)


@dataclass
class RankReport:
    rankme: float
    numerical_rank: int
    singular_values: list
    feature_count: int
    feature_dim: int

    def to_dict(self) -> dict:
        return asdict(self)


def rankme_from_singular_values(s: np.ndarray, eps: float = RANKME_EPS) -> float:
    s = np.asarray(s, dtype=np.float64)
    total = s.sum()
    if total <= 0:
        return 1.0
    p = s / total + eps
    return float(np.exp(-np.sum(p * np.log(p))))


def numerical_rank_from_singular_values(s: np.ndarray, rel_tol: float = 1e-6) -> int:
    if not 0 < rel_tol < 1:
        raise ValueError("rel_tol must lie in (0, 1)")
    s = np.asarray(s)
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.sum(s > rel_tol * s[0]))


def rankme(features: np.ndarray, eps: float = RANKME_EPS, rel_tol: float = 1e-6) -> RankReport:
    """exp(entropy) of the l1-normalised singular-value distribution, plus matrix rank."""
    X = np.asarray(features, dtype=np.float64)
    s = singular_values(X)
    return RankReport(rankme_from_singular_values(s, eps), numerical_rank_from_singular_values(s, rel_tol),
                      s.tolist(), int(X.shape[0]), int(X.shape[1]))


def numerical_rank(features: np.ndarray, rel_tol: float = 1e-6) -> int:
    return numerical_rank_from_singular_values(singular_values(features), rel_tol)


@dataclass
class SegReport:
    per_class_iou: list
    miou: float
    confusion: list
    accuracy: float

    def to_dict(self) -> dict:
        return asdict(self)


def confusion_matrix(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise ValueError("pred and truth lengths differ")
    for name, a in (("pred", pred), ("truth", truth)):
        if a.size and (a.min() < 0 or a.max() >= num_classes):
            raise ValueError(f"{name} contains class ids outside [0, {num_classes})")
    # rows = truth, columns = prediction
    return np.bincount(truth * num_classes + pred, minlength=num_classes**2).reshape(num_classes, num_classes)


def segmentation_report(pred, truth, num_classes: int) -> SegReport:
    """Per-class IoU and mIoU; classes absent from both truth and prediction are skipped."""
    cm = confusion_matrix(pred, truth, num_classes)
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = tp + fp + fn
    iou = np.divide(tp, denom, out=np.zeros(num_classes), where=denom > 0)
    present = denom > 0
    miou = float(iou[present].mean()) if present.any() else 0.0
    acc = float(tp.sum() / cm.sum()) if cm.sum() else 0.0
    return SegReport(iou.tolist(), miou, cm.tolist(), acc)
