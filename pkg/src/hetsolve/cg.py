"""Preconditioned conjugate gradients, single-case and fused multi-case."""

from dataclasses import dataclass, field

import numpy as np

from ._validation import check_multivector, check_vector


@dataclass
class SolveReport:
    iterations: int
    initial_relative_residual: float
    final_relative_residual: float
    converged: bool
    residual_history: list = field(default_factory=list, repr=False)


def _dot(a, b):
    # np.add.reduce sums contiguous data pairwise in fixed blocks: reproducible
    return float(np.add.reduce(a * b))


def _norm(a):
    return np.sqrt(_dot(a, a))


def _check_scalar(value, what, iteration, nonzero=False):
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite {what} at CG iteration {iteration}")
    if nonzero and value == 0.0:
        raise FloatingPointError(f"CG breakdown: {what} is zero at iteration {iteration}")


def pcg_solve(apply_A, precond, f, x0, eps=1e-8, max_iter=1000):
    """Solve ``A x = f`` from initial guess ``x0``.

    Stops once ``||r|| / ||f|| < eps`` for the recurrence residual and the
    same holds for a freshly computed ``f - A x``; if the fresh residual
    fails the test it replaces the recurrence residual and iteration goes on.
    On hitting ``max_iter`` the iterate with the smallest residual seen is
    returned with ``converged=False``.
    """
    f = np.asarray(f, dtype=float)
    n = f.shape[0]
    x = check_vector(x0, n, "x0").copy()
    fnorm = _norm(f)
    if fnorm == 0.0:
        return np.zeros(n), SolveReport(0, 0.0, 0.0, True, [0.0])

    r = f - apply_A(x)
    rel = _norm(r) / fnorm
    _check_scalar(rel, "initial residual", 0)
    report = SolveReport(0, rel, rel, False, [rel])
    best_x, best_rel = x.copy(), rel
    p = None
    rho_b = 1.0
    it = 0
    while True:
        if rel < eps:
            r_true = f - apply_A(x)
            rel_true = _norm(r_true) / fnorm
            if rel_true < eps:
                report.final_relative_residual = rel_true
                report.converged = True
                break
            r, rel = r_true, rel_true
        if it >= max_iter:
            r_true = f - apply_A(best_x)
            x = best_x
            report.final_relative_residual = _norm(r_true) / fnorm
            break
        z = precond(r)
        rho_a = _dot(z, r)
        _check_scalar(rho_a, "(z, r)", it)
        if p is None:
            p = z.copy()
        else:
            p = z + (rho_a / rho_b) * p
        q = apply_A(p)
        pq = _dot(p, q)
        _check_scalar(pq, "(p, q)", it, nonzero=True)
        alpha = rho_a / pq
        rho_b = rho_a
        r = r - alpha * q
        x = x + alpha * p
        it += 1
        rel = _norm(r) / fnorm
        report.residual_history.append(rel)
        if rel < best_rel:
            best_rel = rel
            best_x = x.copy()
    report.iterations = it
    return x, report


def pcg_solve_multi(apply_A_multi, precond, F, X0, eps=1e-8, max_iter=1000):
    """Solve ``A x_k = f_k`` for every column ``k`` of ``F`` with one shared operator sweep.

    Each lane carries its own scalars and residual; converged lanes are
    frozen while the rest keep iterating, and the operator is still applied
    to all lanes. Returns the (n, r) solution and one :class:`SolveReport`
    per lane.
    """
    F = np.asarray(F, dtype=float)
    n, lanes = F.shape
    X = check_multivector(X0, n, "X0").copy()
    fnorm = np.array([_norm(F[:, k]) for k in range(lanes)])
    R = F - apply_A_multi(X)
    reports = []
    rel = np.zeros(lanes)
    active = np.ones(lanes, dtype=bool)
    for k in range(lanes):
        if fnorm[k] == 0.0:
            X[:, k] = 0.0
            reports.append(SolveReport(0, 0.0, 0.0, True, [0.0]))
            active[k] = False
            continue
        rel[k] = _norm(R[:, k]) / fnorm[k]
        _check_scalar(rel[k], "initial residual", 0)
        reports.append(SolveReport(0, rel[k], rel[k], False, [rel[k]]))
    best_X = X.copy()
    best_rel = rel.copy()
    P = np.zeros_like(X)
    started = np.zeros(lanes, dtype=bool)
    rho_b = np.ones(lanes)
    its = np.zeros(lanes, dtype=np.int64)

    while True:
        candidates = active & (rel < eps)
        if candidates.any():
            R_true = F - apply_A_multi(X)
            for k in np.flatnonzero(candidates):
                rel_true = _norm(R_true[:, k]) / fnorm[k]
                if rel_true < eps:
                    reports[k].final_relative_residual = rel_true
                    reports[k].converged = True
                    active[k] = False
                else:
                    R[:, k] = R_true[:, k]
                    rel[k] = rel_true
        exhausted = active & (its >= max_iter)
        if exhausted.any():
            R_best = F - apply_A_multi(best_X)
            for k in np.flatnonzero(exhausted):
                X[:, k] = best_X[:, k]
                reports[k].final_relative_residual = _norm(R_best[:, k]) / fnorm[k]
                active[k] = False
        if not active.any():
            break

        Z = precond(R)
        idx = np.flatnonzero(active)
        for k in idx:
            rho_a = _dot(Z[:, k], R[:, k])
            _check_scalar(rho_a, f"(z, r) in lane {k}", its[k])
            if started[k]:
                P[:, k] = Z[:, k] + (rho_a / rho_b[k]) * P[:, k]
            else:
                P[:, k] = Z[:, k]
                started[k] = True
            rho_b[k] = rho_a
        Q = apply_A_multi(P)
        for k in idx:
            pq = _dot(P[:, k], Q[:, k])
            _check_scalar(pq, f"(p, q) in lane {k}", its[k], nonzero=True)
            alpha = rho_b[k] / pq
            R[:, k] = R[:, k] - alpha * Q[:, k]
            X[:, k] = X[:, k] + alpha * P[:, k]
            its[k] += 1
            rel[k] = _norm(R[:, k]) / fnorm[k]
            reports[k].residual_history.append(rel[k])
            if rel[k] < best_rel[k]:
                best_rel[k] = rel[k]
                best_X[:, k] = X[:, k]

    for k in range(lanes):
        reports[k].iterations = int(its[k])
    return X, reports
