"""Initial-guess predictors for the time-stepping solver.

The baseline is a four-step Adams-Bashforth extrapolation of displacement.
The data-driven guess corrects it with a per-region linear map learned from
recent Adams-Bashforth errors: for each region, pairs (previous error,
current error) are orthonormalised with modified Gram-Schmidt and the map is
applied to the latest error to predict the next one.
"""

from collections import deque
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

AB4_WEIGHTS = np.array([-9.0, 37.0, -59.0, 55.0]) / 24.0


def adams_bashforth(u_prev, v_hist, dt):
    """Extrapolate displacement from ``u_prev`` and velocities at it-4..it-1 (oldest first)."""
    if len(v_hist) < 4:
        raise ValueError("Adams-Bashforth needs four velocity snapshots")
    v4 = list(v_hist)[-4:]
    u = np.array(u_prev, dtype=float, copy=True)
    for w, v in zip(AB4_WEIGHTS, v4):
        u += (dt * w) * v
    return u


def mgs_orthonormalize(X, drop_tol=1e-12):
    """Modified Gram-Schmidt on the columns of ``X`` (dim, s).

    Returns ``P`` (dim, k) with orthonormal columns and ``U`` (s, k) upper
    triangular (in original column order) such that ``P = X @ U``. A column
    whose remainder falls below ``drop_tol`` times its original norm is
    dropped. Each column is swept twice against the kept basis so that
    ``P.T @ P`` stays at round-off level for nearly dependent inputs.
    """
    X = np.asarray(X, dtype=float)
    dim, s = X.shape
    P = np.empty((dim, s))
    U = np.zeros((s, s))
    kept = []
    for j in range(s):
        v = X[:, j].copy()
        u = np.zeros(s)
        u[j] = 1.0
        norm0 = np.linalg.norm(v)
        for _ in range(2):
            for i, col in enumerate(kept):
                h = P[:, i] @ v
                v -= h * P[:, i]
                u -= h * U[:, col]
        nrm = np.linalg.norm(v)
        if norm0 == 0.0 or nrm <= drop_tol * norm0:
            continue
        i = len(kept)
        P[:, i] = v / nrm
        U[:, j] = u / nrm
        kept.append(j)
    return P[:, : len(kept)], U[:, kept]


def od_predict(P, U, Y, x_query):
    """Estimate the output for ``x_query`` as ``Y @ U @ (P.T @ x_query)``."""
    if P.shape[1] == 0:
        return np.zeros(Y.shape[0])
    c = P.T @ x_query
    return Y @ (U @ c)


class ODPredictor(RegressorMixin, BaseEstimator):
    """Linear map fitted from input/output snapshot pairs by orthogonal decomposition.

    Rows of ``X`` and ``Y`` are snapshots (samples); columns are DOFs.

    Parameters
    ----------
    drop_tol : float
        Relative remainder below which a snapshot is treated as dependent.
    """

    def __init__(self, drop_tol=1e-12):
        self.drop_tol = drop_tol

    def fit(self, X, Y):
        X = check_array(X)
        Y = check_array(Y)
        if X.shape[0] != Y.shape[0]:
            raise ValueError("X and Y need the same number of snapshots")
        P, U = mgs_orthonormalize(X.T, self.drop_tol)
        self.basis_ = P
        self.transform_ = U
        self.outputs_ = Y.T.copy()
        self.n_features_in_ = X.shape[1]
        self.rank_ = P.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "basis_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return np.stack([od_predict(self.basis_, self.transform_, self.outputs_, x) for x in X])


class HistoryBuffer:
    """Recent Adams-Bashforth errors of one case, kept as a ring of full vectors.

    Consecutive errors form the training pairs: pair ``j`` is
    (error at step j-1, error at step j). Regions read slices of the same
    vectors, so per-region restriction always follows the partition.
    """

    def __init__(self, n_dofs, s_max):
        self.n_dofs = n_dofs
        self.s_max = s_max
        self._data = np.zeros((s_max + 1, n_dofs))
        self._steps = np.full(s_max + 1, -1, dtype=np.int64)
        self._count = 0

    @property
    def occupancy(self):
        """Number of stored (input, output) pairs."""
        return max(0, min(self._count, self.s_max + 1) - 1)

    @property
    def latest_step(self):
        return int(self._steps[(self._count - 1) % (self.s_max + 1)]) if self._count else -1

    def latest(self):
        if self._count == 0:
            raise IndexError("history is empty")
        return self._data[(self._count - 1) % (self.s_max + 1)]

    def push(self, error, step):
        slot = self._count % (self.s_max + 1)
        self._data[slot] = error
        self._steps[slot] = step
        self._count += 1

    def pairs(self, s, dofs=None):
        """Inputs and outputs of the newest ``s`` pairs as (dim, s) arrays, newest first."""
        if s > self.occupancy:
            raise ValueError(f"only {self.occupancy} pairs stored, {s} requested")
        slots = [(self._count - 1 - k) % (self.s_max + 1) for k in range(s + 1)]
        block = self._data[slots] if dofs is None else self._data[slots][:, dofs]
        return block[1:].T, block[:-1].T

    def steps(self):
        n = min(self._count, self.s_max + 1)
        slots = [(self._count - n + k) % (self.s_max + 1) for k in range(n)]
        return self._steps[slots].tolist()


def update_history(history, u_true, u_adams, step):
    """Record the Adams-Bashforth error of ``step``; the oldest pair is evicted when full."""
    history.push(np.asarray(u_true) - np.asarray(u_adams), step)
    return history


def region_dofs(regions):
    return [np.sort((3 * np.asarray(r)[:, None] + np.arange(3)).ravel()) for r in regions]


def predict_correction(history, s, dof_regions, drop_tol=1e-12, executor=None):
    """Predicted next Adams-Bashforth error, assembled region by region."""
    query = history.latest()
    out = np.zeros(history.n_dofs)

    def one(dofs):
        X, Y = history.pairs(s, dofs)
        P, U = mgs_orthonormalize(X, drop_tol)
        return od_predict(P, U, Y, query[dofs])

    if executor is None:
        results = [one(d) for d in dof_regions]
    else:
        results = list(executor.map(one, dof_regions))
    for dofs, y in zip(dof_regions, results):
        out[dofs] = y
    return out


def data_driven_initial_guess(u_prev, v_hist, dt, history, s, dof_regions,
                              drop_tol=1e-12, executor=None):
    """Initial guess and its Adams-Bashforth part, as ``(u_bar, u_adams)``.

    Falls back to Adams-Bashforth alone while fewer than ``s`` pairs are
    stored, and to ``u_prev`` while fewer than four velocities exist.
    """
    if len(v_hist) >= 4:
        u_adams = adams_bashforth(u_prev, v_hist, dt)
    else:
        u_adams = np.array(u_prev, dtype=float, copy=True)
    if history is None or s < 1 or history.occupancy < s:
        return u_adams.copy(), u_adams
    return u_adams + predict_correction(history, s, dof_regions, drop_tol, executor), u_adams


@dataclass
class SController:
    """Keeps predictor and solver phase times balanced by moving s one step at a time.

    Timings since the last change of s are averaged; s grows when the
    predictor is faster than ``theta_low`` times the solver and shrinks
    when it is slower than ``theta_high`` times the solver.
    """

    s_min: int = 8
    s_max: int = 32
    s: int = None
    theta_low: float = 0.8
    theta_high: float = 1.1
    window: int = 3
    _samples: deque = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if not 1 <= self.s_min <= self.s_max:
            raise ValueError("need 1 <= s_min <= s_max")
        if not 0 < self.theta_low <= self.theta_high:
            raise ValueError("need 0 < theta_low <= theta_high")
        if self.s is None:
            self.s = self.s_min
        self.s = int(min(max(self.s, self.s_min), self.s_max))
        self._samples = deque(maxlen=self.window)

    def smoothed(self):
        if not self._samples:
            return 0.0, 0.0
        pred, solve = zip(*self._samples)
        return float(np.mean(pred)), float(np.mean(solve))


def adjust_s(ctrl, predictor_elapsed, solver_elapsed):
    if predictor_elapsed < 0 or solver_elapsed < 0:
        raise ValueError("timings must be non-negative")
    ctrl._samples.append((predictor_elapsed, solver_elapsed))
    pred, solve = ctrl.smoothed()
    new = ctrl.s
    if pred < ctrl.theta_low * solve:
        new = ctrl.s + 1
    elif pred > ctrl.theta_high * solve:
        new = ctrl.s - 1
    new = min(max(new, ctrl.s_min), ctrl.s_max)
    if new != ctrl.s:
        ctrl.s = new
        ctrl._samples.clear()
    return ctrl.s
