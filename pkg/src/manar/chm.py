"""Convex hull membership via linear-programming feasibility.

``y`` is inside the hull of the rows of ``V`` (to absolute tolerance ``eps``)
iff some ``lam >= 0`` with ``sum(lam) = 1`` satisfies
``|V^T lam - y|_inf <= eps``.  The box is written with bounded slacks
``u in [0, 2 eps]``::

    sum(lam)          = 1
    V^T lam - u       = y - eps
    u + w             = 2 eps
    lam, u, w        >= 0

and decided with a phase-1 simplex (artificial variables, Bland's rule).
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .config import ManarConfig
from .layer import ManarLayerWeights, manar_layer_forward
from .tensor import Tensor, float64_mode, no_grad

log = logging.getLogger(__name__)

DEFAULT_EPS = 1e-6


@dataclass
class ChmQuery:
    y: np.ndarray
    V: np.ndarray
    eps: float = DEFAULT_EPS


@dataclass
class ChmResult:
    inside: bool
    certificate: Optional[np.ndarray] = None
    infeasibility: float = 0.0
    pivots: int = 0


class SimplexError(RuntimeError):
    pass


def _phase_one(A: np.ndarray, b: np.ndarray, basis_hint: dict, tol: float = 1e-11, max_iter: int = 50_000):
    """Minimize the sum of artificials for ``A x = b, x >= 0``.

    ``basis_hint`` maps a row to a column that is already a unit column
    there (slacks), so that row needs no artificial.  Returns the solution
    vector, the final objective and the pivot count.
    """
    rows, cols = A.shape
    A = A.copy()
    b = b.copy()
    neg = b < 0
    A[neg] *= -1.0
    b[neg] *= -1.0
    art_rows = [r for r in range(rows) if r not in basis_hint]
    n_art = len(art_rows)
    tab = np.zeros((rows, cols + n_art + 1))
    tab[:, :cols] = A
    tab[:, -1] = b
    basis = [0] * rows
    for r, c in basis_hint.items():
        basis[r] = c
    for k, r in enumerate(art_rows):
        tab[r, cols + k] = 1.0
        basis[r] = cols + k
    cost = np.zeros(cols + n_art)
    cost[cols:] = 1.0
    # reduced costs: c_j - c_B B^-1 A_j ; objective value kept in z[-1]
    z = np.concatenate([cost, [0.0]])
    for r in art_rows:
        z -= tab[r]
    pivots = 0
    while True:
        candidates = np.nonzero(z[:-1] < -tol)[0]
        if candidates.size == 0:
            break
        j = int(candidates[0])
        col = tab[:, j]
        pos = col > tol
        if not pos.any():
            raise SimplexError("phase-1 objective unbounded (cannot happen for a feasibility LP)")
        ratios = np.full(rows, np.inf)
        ratios[pos] = tab[pos, -1] / col[pos]
        best = ratios.min()
        # ties only within roundoff: a looser band lets other basics go negative
        ties = np.nonzero(ratios <= best + 1e-13 * max(1.0, abs(best)))[0]
        r = int(min(ties, key=lambda i: basis[i]))
        piv = tab[r] / tab[r, j]
        tab -= np.outer(tab[:, j], piv)
        tab[r] = piv
        z -= z[j] * tab[r]
        basis[r] = j
        pivots += 1
        if pivots > max_iter:
            raise SimplexError("simplex iteration limit reached")
    x = np.zeros(cols + n_art)
    for r, c in enumerate(basis):
        x[c] = tab[r, -1]
    return x[:cols], float(-z[-1]), pivots


def verify_certificate(lam: np.ndarray, V: np.ndarray, y: np.ndarray, eps: float) -> bool:
    """Direct substitution check of a convex-combination certificate."""
    lam = np.asarray(lam, dtype=np.float64)
    if np.any(lam < 0) or abs(lam.sum() - 1.0) > eps:
        return False
    return bool(np.max(np.abs(np.asarray(V, dtype=np.float64).T @ lam - np.asarray(y, dtype=np.float64))) <= eps)


def chm_test(q: ChmQuery) -> ChmResult:
    """Decide whether ``q.y`` lies in the convex hull of the rows of ``q.V``."""
    y = np.asarray(q.y, dtype=np.float64).reshape(-1)
    V = np.asarray(q.V, dtype=np.float64)
    if V.ndim != 2 or V.shape[0] < 1 or V.shape[1] != y.size:
        raise ValueError(f"CHM needs V of shape (n, {y.size}), got {V.shape}")
    if not (np.isfinite(V).all() and np.isfinite(y).all()):
        raise ValueError("CHM inputs must be finite (NaN/Inf found)")
    if not q.eps > 0:
        raise ValueError(f"CHM tolerance must be positive, got {q.eps}")
    n, dim = V.shape
    unit = max(1.0, float(np.abs(V).max()), float(np.abs(y).max()))
    # the LP box is slightly tighter than eps so roundoff cannot break verification
    Vs, ys, es = V / unit, y / unit, q.eps * (1.0 - 1e-3) / unit

    # columns: lam (n) | u (dim) | w (dim)
    rows = 1 + 2 * dim
    A = np.zeros((rows, n + 2 * dim))
    b = np.zeros(rows)
    A[0, :n] = 1.0
    b[0] = 1.0
    A[1:1 + dim, :n] = Vs.T
    A[1:1 + dim, n:n + dim] = -np.eye(dim)
    b[1:1 + dim] = ys - es
    A[1 + dim:, n:n + dim] = np.eye(dim)
    A[1 + dim:, n + dim:] = np.eye(dim)
    b[1 + dim:] = 2 * es
    hint = {1 + dim + k: n + dim + k for k in range(dim)}

    x, infeas, pivots = _phase_one(A, b, hint)
    lam = np.clip(x[:n], 0.0, None)
    feasible = infeas <= 1e-12 * rows
    if feasible and verify_certificate(lam, V, y, q.eps):
        return ChmResult(True, lam, infeas, pivots)
    if feasible:
        log.debug("phase-1 feasible but certificate failed verification; reporting outside")
    return ChmResult(False, None, infeas, pivots)


def bounding_box_separation(y, V) -> Optional[tuple[int, float, float]]:
    """A coordinate where ``y`` leaves the bounding box of ``V``.

    Returns ``(coordinate, y_value, nearest_box_bound)`` or ``None``.  Any
    hit is a separating hyperplane proving ``y`` outside the hull.
    """
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    V = np.asarray(V, dtype=np.float64)
    hi, lo = V.max(axis=0), V.min(axis=0)
    gap = np.maximum(y - hi, lo - y)
    c = int(np.argmax(gap))
    if gap[c] <= 0:
        return None
    return c, float(y[c]), float(hi[c] if y[c] > hi[c] else lo[c])


# -- exact planar oracle ----------------------------------------------------


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def hull_2d(points: np.ndarray) -> np.ndarray:
    """Counter-clockwise hull vertices (monotone chain)."""
    pts = sorted(map(tuple, np.asarray(points, dtype=np.float64)))
    pts = [p for i, p in enumerate(pts) if i == 0 or p != pts[i - 1]]
    if len(pts) <= 2:
        return np.array(pts)
    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def _segment_distance(p, a, b) -> float:
    ab = b - a
    denom = float(ab @ ab)
    t = 0.0 if denom == 0 else min(1.0, max(0.0, float((p - a) @ ab) / denom))
    return float(np.linalg.norm(p - (a + t * ab)))


def hull_2d_signed_distance(y, points) -> float:
    """Distance from ``y`` to the hull boundary; negative inside, positive outside."""
    p = np.asarray(y, dtype=np.float64)
    hull = hull_2d(points)
    if len(hull) == 1:
        return float(np.linalg.norm(p - hull[0]))
    edges = [(hull[i], hull[(i + 1) % len(hull)]) for i in range(len(hull))]
    dist = min(_segment_distance(p, a, b) for a, b in edges)
    if len(hull) == 2:
        return dist
    inside = all(_cross(a, b, p) >= 0 for a, b in edges)
    return -dist if inside else dist


# -- layer reports ----------------------------------------------------------


@dataclass
class LayerReport:
    layer_index: int
    samples: int
    outside_count: int

    @property
    def outside_fraction(self) -> float:
        return self.outside_count / self.samples if self.samples else 0.0


def sample_head_outputs(trace, samples: int, rng: np.random.Generator) -> list[tuple[int, int, int]]:
    B, h, n, _ = trace.head_out.shape
    total = B * h * n
    if samples > total:
        log.warning("requested %d samples but only %d head outputs exist; clamping", samples, total)
        samples = total
    flat = np.sort(rng.choice(total, size=samples, replace=False))
    return [(int(i // (h * n)), int(i // n % h), int(i % n)) for i in flat]


def report_from_traces(traces: Sequence, samples: int, eps: float = DEFAULT_EPS, seed: int = 0) -> list[LayerReport]:
    """Outside-hull fraction per layer.

    Each sampled pre-projection head output is tested against all value rows
    of its own head and sequence.
    """
    rng = np.random.default_rng(seed)
    reports = []
    for li, tr in enumerate(traces):
        picks = sample_head_outputs(tr, samples, rng)
        outside = 0
        for b, hh, t in picks:
            res = chm_test(ChmQuery(tr.head_out[b, hh, t], tr.values[b, hh], eps))
            outside += not res.inside
        reports.append(LayerReport(li, len(picks), outside))
    return reports


def chm_layer_report(model, batch, samples: int, eps: float = DEFAULT_EPS, seed: int = 0) -> list[LayerReport]:
    """Run ``model.layer_traces(batch)`` and report per-layer outside fractions."""
    return report_from_traces(model.layer_traces(batch), samples, eps, seed)


CSV_COLUMNS = ("layer_index", "samples", "outside_count", "outside_fraction")


def write_report_csv(reports: Sequence[LayerReport], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in reports:
            writer.writerow([r.layer_index, r.samples, r.outside_count, repr(r.outside_fraction)])


def margin_ok(distance: float, eps: float) -> bool:
    """Queries closer than ``10 eps`` to the boundary are indeterminate."""
    return math.fabs(distance) > 10 * eps


# -- constructed witness ----------------------------------------------------


@dataclass
class WitnessReport:
    inside: bool
    infeasibility: float
    separation: Optional[tuple[int, float, float]]
    output: np.ndarray
    values: np.ndarray

    @property
    def outside_verified(self) -> bool:
        return (not self.inside) and self.infeasibility > 0 and self.separation is not None


def build_witness(n: int = 6, seed: int = 0):
    """A one-head MANAR layer whose token 0 output leaves the value hull.

    Every memory cell holds the same concept: aligned query/key halves (the
    self term dominates the integration softmax) and a large value half, so
    the ACR sits far from every token value.  Token queries are aligned with
    the ACR keys, so the broadcasting softmax puts almost all weight on the
    ACR slot.  Returns ``(cfg, weights, X)`` in 64-bit.
    """
    cfg = ManarConfig(D=4, h=1, M=4, m=1, l=1, k_top=1)
    rng = np.random.default_rng(seed)
    with float64_mode():
        w = ManarLayerWeights.init(cfg, rng, np.float64)
    d = cfg.d
    cell = np.concatenate([10.0 * np.eye(d)[0], 10.0 * np.eye(d)[0], 1000.0 * np.ones(d)])
    w.memory.mu.data = np.tile(cell, (cfg.M, 1))
    w.W_kM.data = np.zeros_like(w.W_kM.data)
    w.W_k.data = np.zeros_like(w.W_k.data)
    w.W_q.data = np.zeros_like(w.W_q.data)
    w.W_q.data[0, 0, :] = 3.0
    w.W_kr.data = 0.01 * np.eye(d)
    X = rng.uniform(-0.5, 0.5, size=(n, cfg.D))
    X[:, 0] = 1.0
    return cfg, w, Tensor(X)


def witness_report(eps: float = DEFAULT_EPS, seed: int = 0) -> WitnessReport:
    """Run the constructed witness and test token 0 of head 0."""
    cfg, w, X = build_witness(seed=seed)
    with float64_mode(), no_grad():
        _, trace = manar_layer_forward(X, w, cfg)
    y = trace.head_out[0, 0, 0]
    V = trace.values[0, 0]
    res = chm_test(ChmQuery(y, V, eps))
    return WitnessReport(res.inside, res.infeasibility, bounding_box_separation(y, V), y, V)
