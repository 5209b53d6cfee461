"""Entropic optimal transport between feature clouds.

Costs are plain Euclidean distances, optionally plus a constant penalty on
label-mismatched pairs. The solver is log-domain Sinkhorn: with penalties
around 1e4 a naive exp(-C/eps) underflows entire rows, so log-sum-exp
stabilization is required, not a nicety. Gradients with respect to the
target points use the envelope approximation: the converged plan is frozen
and only the cost entries are differentiated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist


@dataclass
class EmpiricalMeasure:
    """Weighted point cloud; weights default to uniform."""

    points: np.ndarray
    labels: np.ndarray | None = None
    weights: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2:
            raise ValueError("points must be a (n, d) matrix")
        n = self.points.shape[0]
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if self.labels.shape != (n,):
                raise ValueError("labels length must match point count")
        if self.weights is None:
            self.weights = np.full(n, 1.0 / n)
        else:
            self.weights = np.asarray(self.weights, dtype=np.float64)
            if self.weights.shape != (n,):
                raise ValueError("weights length must match point count")
            if np.any(self.weights < 0):
                raise ValueError("weights must be nonnegative")
            if abs(self.weights.sum() - 1.0) > 1e-12:
                raise ValueError("weights must sum to 1 within 1e-12")

    @property
    def n(self) -> int:
        return self.points.shape[0]


@dataclass
class CostMatrix:
    values: np.ndarray
    lambda_used: float = 0.0
    labeled: bool = False
    # mean of the Euclidean part only; the solver's regularization scale.
    # Penalty terms must not inflate it: they encode structure, not geometry.
    base_mean: float | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass
class TransportPlan:
    pi: np.ndarray
    value: float  # unregularized objective sum(pi * C)
    iterations: int
    marginal_violation: float
    converged: bool


@dataclass(frozen=True)
class SinkhornConfig:
    epsilon_rel: float = 0.05
    max_iters: int = 1000
    marginal_tol: float = 1e-6

    def __post_init__(self):
        if self.epsilon_rel <= 0:
            raise ValueError("epsilon_rel must be positive")
        if self.marginal_tol <= 0:
            raise ValueError("marginal_tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")


def cost_base(z_s: np.ndarray, z_t: np.ndarray) -> CostMatrix:
    """Pairwise Euclidean distances, source rows by target columns."""
    a = np.asarray(z_s, dtype=np.float64)
    b = np.asarray(z_t, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"incompatible point shapes {a.shape} and {b.shape}")
    values = cdist(a, b)
    return CostMatrix(values, lambda_used=0.0, labeled=False,
                      base_mean=float(values.mean()))


def cost_labeled(z_s: np.ndarray, y_s: np.ndarray, z_t: np.ndarray,
                 y_hat_t: np.ndarray, lam: float) -> CostMatrix:
    """Euclidean distance plus lam on every label-mismatched pair.

    lam=0 returns values bitwise equal to cost_base.
    """
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    base = cost_base(z_s, z_t)
    ys = np.asarray(y_s)
    yt = np.asarray(y_hat_t)
    if ys.shape != (base.shape[0],) or yt.shape != (base.shape[1],):
        raise ValueError("label counts must match point counts")
    values = base.values
    if lam > 0:
        values = values + lam * (ys[:, None] != yt[None, :])
    return CostMatrix(values, lambda_used=float(lam), labeled=True,
                      base_mean=base.base_mean)


def _aitken_jump(u, v, prev_u, prev_v, du1, dv1):
    """Secant extrapolation of the dual potentials.

    The iteration's tail contracts linearly along a single dominant mode;
    once consecutive difference vectors line up, jump to the predicted
    fixed point. A misjudged jump is harmless because later iterations
    contract back toward the same fixed point, and stopping always demands
    a measured marginal violation below tolerance.
    """
    if prev_u is None:
        return u, v, u.copy(), v.copy(), None, None
    du2 = u - prev_u
    dv2 = v - prev_v
    new_du1, new_dv1 = du2, dv2
    finite = (du1 is not None and np.isfinite(du2).all() and np.isfinite(dv2).all()
              and np.isfinite(du1).all() and np.isfinite(dv1).all())
    if finite:
        d1 = np.concatenate([du1, dv1])
        d2 = np.concatenate([du2, dv2])
        denom = d1 @ d1
        if denom > 0:
            rho = (d1 @ d2) / denom
            resid = np.linalg.norm(d2 - rho * d1)
            if 0.0 < rho < 1.0 and resid < 0.01 * np.linalg.norm(d2):
                gain = min(rho / (1.0 - rho), 1e7)  # cap keeps exp() in range
                u = u + du2 * gain
                v = v + dv2 * gain
                new_du1 = new_dv1 = None  # difference history invalid after a jump
    return u, v, u.copy(), v.copy(), new_du1, new_dv1


def sinkhorn(a: np.ndarray, b: np.ndarray, cost: CostMatrix,
             cfg: SinkhornConfig = SinkhornConfig()) -> TransportPlan:
    """Log-domain Sinkhorn with eps = epsilon_rel * (mean Euclidean cost).

    The regularization scale follows the geometric part of the cost: a
    label-penalized matrix keeps the eps of its unpenalized counterpart, so
    a large lambda shapes the plan's support without also blurring the
    within-class geometry. Stops when both marginal violations drop below
    marginal_tol. Non-convergence (stall or max_iters) is recoverable and
    reported through `converged`/`marginal_violation`; the returned plan is
    then the lowest-violation iterate seen, which routes the feasible share
    of the mass when the requested marginals cannot be met on the kernel's
    support. NaN in the dual potentials is a hard error.
    """
    C = np.asarray(cost.values, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m, n = C.shape
    if a.shape != (m,) or b.shape != (n,):
        raise ValueError("marginal lengths must match the cost matrix")
    for w in (a, b):
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("marginals must lie on the probability simplex")
    if not np.all(np.isfinite(C)):
        raise ValueError("cost matrix must be finite")

    mean_c = C.mean()
    if mean_c == 0.0:
        # all-zero cost: any feasible plan is optimal, product coupling converges
        pi = np.outer(a, b)
        return TransportPlan(pi, 0.0, 0, 0.0, True)

    scale = cost.base_mean if cost.base_mean is not None else mean_c
    if scale <= 0.0:
        # zero geometry but penalized structure: fall back to the full mean
        scale = mean_c
    eps = cfg.epsilon_rel * scale
    mr = -C / eps
    with np.errstate(divide="ignore"):  # zero weights become -inf, handled below
        log_a = np.log(a)
        log_b = np.log(b)
    u = np.zeros(m)
    v = np.zeros(n)
    # scratch buffers; the inlined log-sum-exp avoids per-call scipy overhead,
    # which dominates at the small sizes the oracle comparisons run at
    work = np.empty_like(mr)
    it = 0
    check_every = 10
    extrap_every = 50
    prev_u = prev_v = du1 = dv1 = None
    # Best iterate seen so far. When the marginals are infeasible on the
    # kernel's numerical support (huge label penalties + imbalanced label
    # frequencies), the duals oscillate instead of converging; the minimum
    # violation iterate is the transport of the mass that can actually be
    # routed, whereas the final iterate is an arbitrary point of the
    # oscillation. Convergent runs are unaffected: their best iterate is the
    # converged one.
    best_u, best_v, best_viol = u, v, np.inf
    stall = 0
    # Early stall exit is only sound when cross-label kernel entries are
    # numerically dead (exp(-lambda/eps) indistinguishable from zero), which
    # is the one regime where the requested marginals can be unreachable.
    # Feasible instances may legitimately improve slower than any stall
    # threshold, so they always get the full iteration budget.
    may_stall = cost.labeled and cost.lambda_used / eps > 50.0
    for it in range(1, cfg.max_iters + 1):
        np.add(mr, v[None, :], out=work)
        rmax = work.max(axis=1)
        np.exp(work - rmax[:, None], out=work)
        u = log_a - (np.log(work.sum(axis=1)) + rmax)
        np.add(mr, u[:, None], out=work)
        cmax = work.max(axis=0)
        np.exp(work - cmax[None, :], out=work)
        v = log_b - (np.log(work.sum(axis=0)) + cmax)
        if it % check_every == 0 or it == cfg.max_iters:
            if np.isnan(u).any() or np.isnan(v).any():
                raise FloatingPointError("sinkhorn potentials became NaN")
            # entries of a feasible plan never exceed min(a_i, b_j) < 1, so
            # capping the exponent at 0 leaves converged plans untouched and
            # keeps pre-convergence materializations finite
            pi = np.exp(np.minimum(mr + u[:, None] + v[None, :], 0.0))
            violation = max(np.abs(pi.sum(axis=1) - a).max(),
                            np.abs(pi.sum(axis=0) - b).max())
            if violation < cfg.marginal_tol:
                return TransportPlan(pi, float((pi * C).sum()), it, float(violation), True)
            if violation < best_viol * (1.0 - 1e-4):
                best_u, best_v, best_viol = u, v, violation
                stall = 0
            elif may_stall:
                stall += 1
                if stall >= 10:  # ~100 iterations without progress: stalled
                    break
        if it % extrap_every == 0:
            u, v, prev_u, prev_v, du1, dv1 = _aitken_jump(u, v, prev_u, prev_v, du1, dv1)
    pi = np.exp(np.minimum(mr + best_u[:, None] + best_v[None, :], 0.0))
    viol = max(np.abs(pi.sum(axis=1) - a).max(), np.abs(pi.sum(axis=0) - b).max())
    return TransportPlan(pi, float((pi * C).sum()), it, float(viol), False)


def exact_ot_uniform(cost: CostMatrix | np.ndarray) -> tuple[float, np.ndarray]:
    """Exact OT for equal-size uniform measures via optimal assignment.

    Returns (value, permutation) with value = mean of the matched entries.
    Small-scale oracle only: n above 64 is rejected.
    """
    C = cost.values if isinstance(cost, CostMatrix) else np.asarray(cost, dtype=np.float64)
    m, n = C.shape
    if m != n:
        raise ValueError("exact oracle needs equal-size measures")
    if n > 64:
        raise ValueError("exact oracle is limited to n <= 64")
    rows, cols = linear_sum_assignment(C)
    perm = np.empty(n, dtype=np.int64)
    perm[rows] = cols
    return float(C[rows, cols].mean()), perm


def ot_grad_targets(plan: TransportPlan, z_s: np.ndarray, z_t: np.ndarray) -> np.ndarray:
    """Envelope gradient of sum(pi * C) w.r.t. the target points.

    g_j = sum_i pi_ij (z_t[j] - z_s[i]) / ||z_t[j] - z_s[i]||, with zero
    contribution at zero distance (subgradient choice at the kink). The
    label penalty is piecewise constant, so it contributes nothing.
    """
    zs = np.asarray(z_s, dtype=np.float64)
    zt = np.asarray(z_t, dtype=np.float64)
    pi = plan.pi
    if pi.shape != (zs.shape[0], zt.shape[0]):
        raise ValueError("plan shape does not match the point clouds")
    d = cdist(zs, zt)
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(d > 0, pi / d, 0.0)
    col = w.sum(axis=0)  # (n,)
    return zt * col[:, None] - w.T @ zs


def plan_value_frozen(pi: np.ndarray, z_s: np.ndarray, z_t: np.ndarray) -> float:
    """Objective sum(pi * Euclidean cost) for a fixed coupling; used to
    check the envelope gradient by finite differences."""
    return float((pi * cdist(z_s, z_t)).sum())
