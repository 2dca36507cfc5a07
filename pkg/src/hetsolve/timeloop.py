"""Newmark time integration and the sequential (single-lane) runners.

The average-acceleration scheme (beta = 1/4, gamma = 1/2) is used:

    ((4/dt^2) M + (2/dt) C + K) u' = f' + M((4/dt^2) u + (4/dt) v + a) + C((2/dt) u + v)
    v' = (2/dt)(u' - u) - v
    a' = (4/dt^2)(u' - u) - (4/dt) v - a
"""

import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from typing import NamedTuple, Optional

import numpy as np

from ._validation import check_int, check_positive
from .cg import pcg_solve, pcg_solve_multi
from .ebe import ebe_apply, ebe_diagonal_blocks, ebe_matvec, ebe_matvec_multi
from .elasticity import Material, build_element_operators, newmark_coefficients
from .mesh import BoxMeshSpec, generate_box_mesh, partition_predictor_regions
from .predictor import (HistoryBuffer, SController, adams_bashforth, adjust_s,
                        data_driven_initial_guess, region_dofs, update_history)
from .sparse import (apply_block_jacobi, assemble_blocks, assemble_system,
                     block_jacobi_from_diagonal, build_block_jacobi)

BACKENDS = ("crs", "ebe", "ebe-multi")
PREDICTORS = ("none", "ab4", "data-driven")


@dataclass
class RunConfig:
    dt: float = 0.005
    nt: int = 200
    eps: float = 1e-8
    max_iter: int = 2000
    backend: str = "ebe-multi"
    predictor: str = "data-driven"
    r: int = 4
    seed: int = 0
    s_min: int = 8
    s_max: int = 32
    s_fixed: Optional[int] = None
    s_timing: str = "wall"
    theta_low: float = 0.8
    theta_high: float = 1.1
    region_size: int = 512
    host_workers: int = 1
    drop_tol: float = 1e-12
    model_speed_ratio: float = 8.0
    track_adams_residual: bool = True

    def __post_init__(self):
        check_positive(self.dt, "dt")
        check_int(self.nt, "nt", minimum=1)
        if not 0.0 < self.eps < 1.0:
            raise ValueError(f"eps must lie in (0, 1), got {self.eps!r}")
        check_int(self.max_iter, "max_iter", minimum=1)
        check_int(self.r, "r", minimum=1)
        if self.backend not in BACKENDS:
            raise ValueError(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        if self.predictor not in PREDICTORS:
            raise ValueError(f"predictor must be one of {PREDICTORS}, got {self.predictor!r}")
        if self.s_timing not in ("wall", "model"):
            raise ValueError(f"s_timing must be 'wall' or 'model', got {self.s_timing!r}")
        if not 1 <= self.s_min <= self.s_max:
            raise ValueError("need 1 <= s_min <= s_max")
        if self.s_fixed is not None and not 1 <= self.s_fixed <= self.s_max:
            raise ValueError("s_fixed must lie in [1, s_max]")
        check_int(self.region_size, "region_size", minimum=1)
        check_int(self.host_workers, "host_workers", minimum=1)

    def replace(self, **changes):
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return RunConfig(**values)


class Impulse(NamedTuple):
    node: int
    step: int
    direction: tuple
    amplitude: float


def force_vector(impulses, step, n_dofs):
    f = np.zeros(n_dofs)
    for imp in impulses:
        if imp.step == step:
            f[3 * imp.node: 3 * imp.node + 3] += imp.amplitude * np.asarray(imp.direction)
    return f


# ---------------------------------------------------------------- backends


class MatrixBackend:
    """Backend over explicit matrices (dense or scipy); for small systems and oracles."""

    name = "matrix"

    def __init__(self, M, C, K, dt, constrained_dofs=()):
        cm, cc = newmark_coefficients(dt)
        self.M, self.C = M, C
        A = cm * M + cc * C + K
        self.constrained = np.asarray(constrained_dofs, dtype=np.int64)
        A = np.array(A.toarray() if hasattr(A, "toarray") else A, dtype=float)
        A[self.constrained, :] = 0.0
        A[:, self.constrained] = 0.0
        A[self.constrained, self.constrained] = 1.0
        self.A = A
        self.n_dofs = A.shape[0]
        self._inv_diag = 1.0 / np.diag(A)
        self.matvec_flops = 2.0 * A.size

    def apply_A(self, x):
        return self.A @ x

    def precond(self, r):
        return r * (self._inv_diag if r.ndim == 1 else self._inv_diag[:, None])

    def apply_M(self, x):
        return self.M @ x

    def apply_C(self, x):
        return self.C @ x


class CRSBackend:
    """Assembled 3x3 block-CSR system with block-Jacobi preconditioning."""

    name = "crs"

    def __init__(self, problem):
        ops = problem.ops
        self.A = assemble_system(problem.mesh, ops, problem.dt)
        self.Mg = assemble_blocks(ops.node_map, ops.M, ops.n_nodes)
        self.Cg = assemble_blocks(ops.node_map, ops.damping(), ops.n_nodes)
        self.B = build_block_jacobi(self.A)
        self.constrained = ops.constrained_dofs
        self.n_dofs = ops.n_dofs
        # 9 values + 1 column index per block, plus x gathers and y writes
        self.matvec_flops = 18.0 * self.A.n_blocks

    def apply_A(self, x):
        return self.A.to_scipy() @ x

    def precond(self, r):
        return apply_block_jacobi(self.B, r)

    def apply_M(self, x):
        return self.Mg.to_scipy() @ x

    def apply_C(self, x):
        return self.Cg.to_scipy() @ x


class EBEBackend:
    """Matrix-free backend; system, mass and damping products all go element by element."""

    name = "ebe"

    def __init__(self, problem):
        self.ops = problem.ops
        self.dt = problem.dt
        self.B = block_jacobi_from_diagonal(ebe_diagonal_blocks(self.ops, self.dt))
        self.constrained = self.ops.constrained_dofs
        self.n_dofs = self.ops.n_dofs
        # forming A_e (2 x 900) and applying it (2 x 900) per element
        self.matvec_flops = 3600.0 * self.ops.n_elements

    def apply_A(self, x):
        if x.ndim == 2:
            return ebe_matvec_multi(self.ops, self.dt, x)
        return ebe_matvec(self.ops, self.dt, x)

    def precond(self, r):
        return apply_block_jacobi(self.B, r)

    def apply_M(self, x):
        return ebe_apply(self.ops, 1.0, 0.0, x)

    def apply_C(self, x):
        return ebe_apply(self.ops, self.ops.alpha, self.ops.beta, x)


@dataclass
class Problem:
    """Mesh, element operators and lazily built backends for one time step size."""

    mesh: object
    ops: object
    dt: float
    regions: list
    _backends: dict = field(default_factory=dict, repr=False)

    @property
    def n_dofs(self):
        return self.ops.n_dofs

    @property
    def dof_regions(self):
        if not hasattr(self, "_dof_regions"):
            self._dof_regions = region_dofs(self.regions)
        return self._dof_regions

    def backend(self, name):
        key = "crs" if name == "crs" else "ebe"
        if key not in self._backends:
            self._backends[key] = CRSBackend(self) if key == "crs" else EBEBackend(self)
        return self._backends[key]


def build_problem(mesh_spec, materials, dt, region_size=512):
    mesh = generate_box_mesh(mesh_spec)
    ops = build_element_operators(mesh, materials)
    regions = partition_predictor_regions(mesh, region_size)
    return Problem(mesh, ops, dt, regions)


def desk_materials(beta=1e-3):
    """Stiff bedrock (vs 700 m/s) under a soft sediment layer (vs 200 m/s)."""
    return [Material.from_wave_speed(2000.0, 700.0, 0.3, 0.0, beta),
            Material.from_wave_speed(1800.0, 200.0, 0.35, 0.0, beta)]


def desk_problem(div=(8, 8, 4), dt=0.005, region_size=512, interface=30.0, beta=1e-3):
    """200 x 200 x 50 m layered box: the reference problem for the desk-scale runs."""
    spec = BoxMeshSpec(200.0, 200.0, 50.0, *div, layer_interface=interface)
    return build_problem(spec, desk_materials(beta), dt, region_size)


# ---------------------------------------------------------------- state


@dataclass
class CaseState:
    u: np.ndarray
    v: np.ndarray
    a: np.ndarray
    f: np.ndarray
    it: int = 0
    source: list = field(default_factory=list)
    v_hist: deque = field(default_factory=lambda: deque(maxlen=4))
    history: Optional[HistoryBuffer] = None

    @classmethod
    def at_rest(cls, n_dofs, source=(), s_max=None):
        z = np.zeros(n_dofs)
        state = cls(z.copy(), z.copy(), z.copy(), z.copy(), 0, list(source))
        state.v_hist.append(state.v.copy())
        if s_max is not None:
            state.history = HistoryBuffer(n_dofs, s_max)
        return state


def newmark_rhs(state, backend, dt):
    """Right-hand side for step ``state.it + 1`` using ``state.f`` as the new force."""
    cm, cc = newmark_coefficients(dt)
    w_mass = cm * state.u + (4.0 / dt) * state.v + state.a
    w_damp = cc * state.u + state.v
    b = state.f + backend.apply_M(w_mass) + backend.apply_C(w_damp)
    b[backend.constrained] = 0.0
    return b


def newmark_update(state, u_new, dt):
    du = u_new - state.u
    v_new = (2.0 / dt) * du - state.v
    a_new = (4.0 / dt**2) * du - (4.0 / dt) * state.v - state.a
    state.u = np.array(u_new, dtype=float, copy=True)
    state.v = v_new
    state.a = a_new
    state.it += 1
    state.v_hist.append(v_new.copy())
    return state


# ---------------------------------------------------------------- reports


@dataclass
class StepReport:
    case: int
    step: int
    lane: int
    s: int
    iterations: int
    initial_residual: float
    final_residual: float
    adams_residual: float
    converged: bool
    predictor_ms: float
    solver_ms: float
    predictor_cost: float
    solver_cost: float
    step_ms: float = float("nan")

    TIMING_FIELDS = ("predictor_ms", "solver_ms", "step_ms")


def predictor_model_cost(s, dof_regions, n_dofs):
    """Deterministic predictor cost in Gflop: two Gram-Schmidt sweeps plus the apply."""
    if s < 1:
        return 8.0 * n_dofs * 1e-9
    dims = sum(len(d) for d in dof_regions)
    return (4.0 * s * s + 6.0 * s) * dims * 1e-9 + 8.0 * n_dofs * 1e-9


def solver_model_cost(iterations, backend, speed_ratio):
    return (iterations + 2) * backend.matvec_flops * 1e-9 / speed_ratio


class Predictor:
    """Produces initial guesses for one case and owns its s-controller."""

    def __init__(self, config, problem, executor=None):
        self.config = config
        self.problem = problem
        self.executor = executor
        self.ctrl = SController(config.s_min, config.s_max, s=config.s_min,
                                theta_low=config.theta_low, theta_high=config.theta_high)
        self.fell_back = True

    def current_s(self, step, s_trace=None):
        if self.config.predictor != "data-driven":
            return 0
        if s_trace is not None:
            return int(s_trace[step])
        if self.config.s_fixed is not None:
            return self.config.s_fixed
        return self.ctrl.s

    def guess(self, state, s):
        """Returns (initial guess, Adams-Bashforth part or None)."""
        cfg = self.config
        if cfg.predictor == "none":
            return state.u.copy(), None
        if cfg.predictor == "ab4":
            if len(state.v_hist) >= 4:
                return adams_bashforth(state.u, state.v_hist, self.problem.dt), None
            return state.u.copy(), None
        self.fell_back = state.history is None or state.history.occupancy < s
        if not self.fell_back:
            if state.history.latest_step != state.it:
                raise RuntimeError(
                    f"predictor lag violated: history ends at {state.history.latest_step},"
                    f" state at {state.it}")
        return data_driven_initial_guess(state.u, state.v_hist, self.problem.dt, state.history,
                                         s, self.problem.dof_regions, cfg.drop_tol, self.executor)

    def feed(self, pred_elapsed, solve_elapsed, pred_cost, solve_cost):
        cfg = self.config
        # timings of Adams-Bashforth fallbacks say nothing about the cost of s
        if cfg.predictor != "data-driven" or cfg.s_fixed is not None or self.fell_back:
            return self.ctrl.s
        if cfg.s_timing == "model":
            return adjust_s(self.ctrl, pred_cost, solve_cost)
        return adjust_s(self.ctrl, pred_elapsed, solve_elapsed)


@dataclass
class RunResult:
    reports: list
    solutions: dict = field(default_factory=dict)
    waveforms: dict = field(default_factory=dict)
    s_trace: dict = field(default_factory=dict)
    timeline: list = field(default_factory=list)
    transfers: list = field(default_factory=list)

    def reports_for(self, case):
        return [r for r in self.reports if r.case == case]


def _relative_residual(backend, b, x):
    bn = np.linalg.norm(b)
    if bn == 0.0:
        return 0.0
    return float(np.linalg.norm(b - backend.apply_A(x)) / bn)


def run_single_lane(config, problem, sources, record_solutions=False, capture_nodes=None,
                    s_trace=None, case_ids=None):
    """Sequential predictor -> solve -> update loop over ``config.nt`` steps.

    ``sources`` holds one impulse list per case. With the ``ebe-multi``
    backend all cases are solved together by the fused solver; otherwise each
    case is solved on its own. ``s_trace`` (case -> per-step s) replays a
    recorded history-length schedule instead of running the controller.
    """
    sources = list(sources)
    n_cases = len(sources)
    case_ids = list(range(n_cases)) if case_ids is None else list(case_ids)
    backend = problem.backend(config.backend)
    dt, n = problem.dt, problem.n_dofs
    s_max = config.s_max if config.predictor == "data-driven" else None
    states = [CaseState.at_rest(n, src, s_max) for src in sources]
    pool = ThreadPoolExecutor(config.host_workers) if config.host_workers > 1 else None
    predictors = [Predictor(config, problem, pool) for _ in states]
    result = RunResult([])
    for cid in case_ids:
        result.s_trace[cid] = {}
        if record_solutions:
            result.solutions[cid] = np.empty((config.nt, n))
        if capture_nodes is not None:
            result.waveforms[cid] = np.empty((config.nt, 3 * len(capture_nodes)))
    cap_dofs = None if capture_nodes is None else region_dofs([capture_nodes])[0]

    try:
        for it in range(1, config.nt + 1):
            guesses, adams, s_used, pred_ms, pred_cost = [], [], [], [], []
            for k, (state, pred) in enumerate(zip(states, predictors)):
                trace = None if s_trace is None else s_trace[case_ids[k]]
                s = pred.current_s(it, trace)
                t0 = time.perf_counter()
                g, ua = pred.guess(state, s)
                pred_ms.append(1e3 * (time.perf_counter() - t0))
                pred_cost.append(predictor_model_cost(s, problem.dof_regions, n)
                                 if config.predictor == "data-driven" else 0.0)
                guesses.append(g)
                adams.append(ua)
                s_used.append(s)
                state.f = force_vector(state.source, it, n)

            rhs = [newmark_rhs(state, backend, dt) for state in states]
            solve_ms = [0.0] * n_cases
            if config.backend == "ebe-multi":
                t0 = time.perf_counter()
                X, reps = pcg_solve_multi(backend.apply_A, backend.precond, np.column_stack(rhs),
                                          np.column_stack(guesses), config.eps, config.max_iter)
                elapsed = 1e3 * (time.perf_counter() - t0)
                sols = [X[:, k].copy() for k in range(n_cases)]
                solve_ms = [elapsed / n_cases] * n_cases
            else:
                sols, reps = [], []
                for k in range(n_cases):
                    t0 = time.perf_counter()
                    x, rep = pcg_solve(backend.apply_A, backend.precond, rhs[k], guesses[k],
                                       config.eps, config.max_iter)
                    solve_ms[k] = 1e3 * (time.perf_counter() - t0)
                    sols.append(x)
                    reps.append(rep)

            for k, (state, pred) in enumerate(zip(states, predictors)):
                rep = reps[k]
                if not rep.converged:
                    raise RuntimeError(
                        f"solver did not converge for case {case_ids[k]} at step {it}: "
                        f"relative residual {rep.final_relative_residual:.3e}")
                ab_res = np.nan
                if adams[k] is not None and config.track_adams_residual:
                    ab_res = _relative_residual(backend, rhs[k], adams[k])
                cost = solver_model_cost(rep.iterations, backend, config.model_speed_ratio)
                result.reports.append(StepReport(
                    case_ids[k], it, 0, s_used[k], rep.iterations,
                    rep.initial_relative_residual, rep.final_relative_residual, ab_res,
                    rep.converged, pred_ms[k], solve_ms[k], pred_cost[k], cost,
                    pred_ms[k] + solve_ms[k]))
                result.s_trace[case_ids[k]][it] = s_used[k]
                newmark_update(state, sols[k], dt)
                if state.history is not None:
                    update_history(state.history, state.u, adams[k], it)
                pred.feed(pred_ms[k], solve_ms[k], pred_cost[k], cost)
                if record_solutions:
                    result.solutions[case_ids[k]][it - 1] = state.u
                if cap_dofs is not None:
                    result.waveforms[case_ids[k]][it - 1] = state.u[cap_dofs]
    finally:
        if pool is not None:
            pool.shutdown()
    return result
