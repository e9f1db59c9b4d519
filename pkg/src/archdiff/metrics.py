"""Evaluation metrics: ADD, PA-ADD, CSA, rotation error and arch-curve
Fréchet distance, plus the cumulative pointwise-distance distribution."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.interpolate import make_interp_spline

from .geometry import (
    GeometryError,
    JawModel,
    ToothLabel,
    TransformParams,
    geometric_center,
    so3_exp,
)

ARCH_CURVE_SAMPLES = 100


@dataclass
class MetricsReport:
    """Aggregate metrics over an evaluated corpus (mm / degrees)."""

    add: float
    pa_add: float
    csa: float
    me_rot: float
    fd_cur: float
    per_record: List[Dict[str, float]] = field(default_factory=list)
    degenerate_registration: bool = False

    def summary(self) -> Dict[str, float]:
        return {
            "add": self.add,
            "pa_add": self.pa_add,
            "csa": self.csa,
            "me_rot": self.me_rot,
            "fd_cur": self.fd_cur,
        }


@dataclass(frozen=True)
class ArchCurve:
    """Interpolating cubic B-spline through ordered per-tooth landmarks."""

    landmarks: np.ndarray  # (n, 3) ordered along the arch
    samples: np.ndarray  # (S, 3) uniform-parameter samples on the spline
    params: np.ndarray  # (n,) chord-length parameter of each landmark
    spline: object  # the underlying vector-valued BSpline


def spline_through(landmarks: np.ndarray, n_samples: int) -> ArchCurve:
    """Chord-length-parameterized cubic interpolating B-spline."""
    landmarks = np.asarray(landmarks, dtype=np.float64)
    if len(landmarks) < 4:
        raise GeometryError("cubic interpolation needs at least 4 landmarks")
    chords = np.linalg.norm(np.diff(landmarks, axis=0), axis=1)
    if (chords == 0.0).any():
        raise GeometryError("coincident adjacent landmarks")
    t = np.concatenate([[0.0], np.cumsum(chords)])
    spline = make_interp_spline(t, landmarks, k=3)
    u = np.linspace(t[0], t[-1], n_samples)
    return ArchCurve(landmarks=landmarks, samples=spline(u), params=t, spline=spline)


def _paired_vertices(pred: JawModel, gt: JawModel) -> Tuple[np.ndarray, np.ndarray]:
    if set(pred.teeth) != set(gt.teeth):
        missing = set(pred.teeth) ^ set(gt.teeth)
        raise GeometryError(f"label sets differ: {sorted(l.code for l in missing)}")
    for k in pred.labels:
        if len(pred.teeth[k].vertices) != len(gt.teeth[k].vertices):
            raise GeometryError(f"vertex count mismatch for tooth {k.code}")
    return pred.all_vertices(), gt.all_vertices()


def add_metric(pred: JawModel, gt: JawModel) -> float:
    """Mean distance over corresponding vertices (correspondence by index)."""
    a, b = _paired_vertices(pred, gt)
    return float(np.linalg.norm(a - b, axis=1).mean())


def kabsch(source: np.ndarray, target: np.ndarray) -> Tuple[np.ndarray, np.ndarray, bool]:
    """Least-squares rigid transform (R, t) mapping source onto target.

    Falls back to translation-only alignment when the centered covariance is
    rank-deficient; the flag in the return value reports the fallback.
    """
    mu_s, mu_t = source.mean(axis=0), target.mean(axis=0)
    H = (source - mu_s).T @ (target - mu_t)
    if np.linalg.matrix_rank(H) < 3:
        return np.eye(3), mu_t - mu_s, True
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    t = mu_t - R @ mu_s
    return R, t, False


def pa_add_metric(pred: JawModel, gt: JawModel) -> Tuple[float, bool]:
    """ADD after one global rigid registration of all pred vertices onto gt.

    Returns (value, degenerate_flag); the flag marks the translation-only
    fallback used on rank-deficient input.
    """
    a, b = _paired_vertices(pred, gt)
    R, t, degenerate = kabsch(a, b)
    aligned = a @ R.T + t
    return float(np.linalg.norm(aligned - b, axis=1).mean()), degenerate


def csa_metric(pred: TransformParams, gt: TransformParams) -> float:
    """Mean cosine similarity between per-tooth 6-DoF parameter vectors.

    Two zero vectors agree perfectly (both say "do not move") and score 1;
    a one-sided zero scores 0.
    """
    if set(pred.per_tooth) != set(gt.per_tooth):
        raise GeometryError("label sets differ")
    sims = []
    for k in pred.labels:
        x, y = pred.per_tooth[k], gt.per_tooth[k]
        nx, ny = np.linalg.norm(x), np.linalg.norm(y)
        if nx == 0.0 and ny == 0.0:
            sims.append(1.0)
        elif nx == 0.0 or ny == 0.0:
            sims.append(0.0)
        else:
            sims.append(float(x @ y / (nx * ny)))
    return float(np.mean(sims))


def me_rot_metric(pred: TransformParams, gt: TransformParams) -> float:
    """Mean geodesic rotation error in degrees."""
    if set(pred.per_tooth) != set(gt.per_tooth):
        raise GeometryError("label sets differ")
    errs = []
    for k in pred.labels:
        Rp = so3_exp(pred.per_tooth[k][3:])
        Rg = so3_exp(gt.per_tooth[k][3:])
        cos_angle = np.clip((np.trace(Rp @ Rg.T) - 1.0) / 2.0, -1.0, 1.0)
        errs.append(np.degrees(np.arccos(cos_angle)))
    return float(np.mean(errs))


# ---------------------------------------------------------------------------
# Arch curves and the Fréchet distance


def arch_order(labels: Sequence[ToothLabel], jaw: str) -> List[ToothLabel]:
    """Quadrant-aware traversal order along one arch (back - front - back)."""
    if jaw not in ("upper", "lower"):
        raise GeometryError(f"jaw must be 'upper' or 'lower', got {jaw!r}")
    want_upper = jaw == "upper"
    quads = sorted({l.quadrant for l in labels if l.is_upper == want_upper})
    present = [l for l in labels if l.is_upper == want_upper]
    if not quads:
        return []
    first = [l for l in present if l.quadrant == quads[0]]
    second = [l for l in present if l.quadrant == quads[-1]] if len(quads) > 1 else []
    return sorted(first, key=lambda l: -l.position) + sorted(
        second, key=lambda l: l.position
    )


def arch_curve(model: JawModel, jaw: str, n_samples: int = ARCH_CURVE_SAMPLES) -> ArchCurve:
    """Cubic interpolating B-spline (chord-length parameterized) through the
    per-tooth geometric centers of one jaw."""
    order = arch_order(model.labels, jaw)
    if len(order) < 4:
        raise GeometryError(
            f"need at least 4 teeth in the {jaw} jaw for a cubic arch curve, "
            f"got {len(order)}"
        )
    landmarks = np.array([geometric_center(model.teeth[k]) for k in order])
    return spline_through(landmarks, n_samples)


def discrete_frechet(p: np.ndarray, q: np.ndarray) -> float:
    """Discrete Fréchet distance between two polylines (iterative DP)."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    d = np.linalg.norm(p[:, None, :] - q[None, :, :], axis=2)
    n, m = d.shape
    ca = np.empty((n, m))
    ca[0, 0] = d[0, 0]
    for j in range(1, m):
        ca[0, j] = max(ca[0, j - 1], d[0, j])
    for i in range(1, n):
        ca[i, 0] = max(ca[i - 1, 0], d[i, 0])
        for j in range(1, m):
            ca[i, j] = max(min(ca[i - 1, j], ca[i - 1, j - 1], ca[i, j - 1]), d[i, j])
    return float(ca[-1, -1])


def fd_cur_metric(pred: JawModel, gt: JawModel, n_samples: int = ARCH_CURVE_SAMPLES) -> float:
    """Fréchet distance between pred/gt arch curves, averaged over both jaws."""
    values = []
    for jaw in ("upper", "lower"):
        pc = arch_curve(pred, jaw, n_samples)
        gc = arch_curve(gt, jaw, n_samples)
        values.append(discrete_frechet(pc.samples, gc.samples))
    return float(np.mean(values))


def distance_histogram(
    mean_distances: Sequence[float], bin_edges: Sequence[float]
) -> np.ndarray:
    """Fraction of records whose mean pointwise distance falls within each
    threshold; cumulative, hence monotone non-decreasing."""
    dists = np.asarray(mean_distances, dtype=np.float64)
    if dists.size == 0:
        raise GeometryError("empty record set")
    edges = np.asarray(bin_edges, dtype=np.float64)
    if edges.ndim != 1 or len(edges) == 0 or (np.diff(edges) <= 0).any():
        raise GeometryError("bin edges must be strictly increasing")
    return np.array([(dists <= e).mean() for e in edges])


def evaluate_record(
    pred: JawModel,
    gt: JawModel,
    pred_params: Optional[TransformParams] = None,
    gt_params: Optional[TransformParams] = None,
) -> Dict[str, float]:
    """All five metrics for a single prediction/ground-truth pair."""
    pa, degenerate = pa_add_metric(pred, gt)
    out = {
        "add": add_metric(pred, gt),
        "pa_add": pa,
        "fd_cur": fd_cur_metric(pred, gt),
        "degenerate_registration": float(degenerate),
    }
    if pred_params is not None and gt_params is not None:
        out["csa"] = csa_metric(pred_params, gt_params)
        out["me_rot"] = me_rot_metric(pred_params, gt_params)
    return out


def aggregate_reports(per_record: List[Dict[str, float]]) -> MetricsReport:
    if not per_record:
        raise GeometryError("no per-record reports to aggregate")

    def mean_of(key):
        vals = [r[key] for r in per_record if key in r]
        return float(np.mean(vals)) if vals else float("nan")

    return MetricsReport(
        add=mean_of("add"),
        pa_add=mean_of("pa_add"),
        csa=mean_of("csa"),
        me_rot=mean_of("me_rot"),
        fd_cur=mean_of("fd_cur"),
        per_record=per_record,
        degenerate_registration=any(
            r.get("degenerate_registration", 0.0) > 0 for r in per_record
        ),
    )
