"""Two-lane pipeline that overlaps prediction with solving.

Each lane owns ``r`` cases. Per time step the lanes pass four barriers:

    P1  lane 0 predicts step it on the host pool | lane 1 solves step it
    T1  lane 0 stages guesses host->accelerator  | lane 1 stages results back
    P2  lane 0 solves step it                    | lane 1 predicts step it+1
    T2  lane 0 stages results back               | lane 1 stages guesses over

Solving requires the accelerator token, which only one lane may hold at a
time. Lanes exchange nothing except through their staging buffers and the
shared phase-time table, both touched only between barriers.
"""

import csv
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .cg import pcg_solve, pcg_solve_multi
from .predictor import region_dofs
from .timeloop import (CaseState, Predictor, RunResult, StepReport, force_vector,
                       newmark_rhs, newmark_update, predictor_model_cost,
                       solver_model_cost, update_history)

VALUE_SIZE = np.dtype(np.float64).itemsize


@dataclass
class ExecutorRole:
    role: str
    workers: int = 1
    token: object = None


class AcceleratorToken:
    """Exclusive right to run solver kernels; every hold interval is recorded."""

    def __init__(self):
        self._lock = threading.Lock()
        self.intervals = []

    @contextmanager
    def hold(self, lane, step):
        if not self._lock.acquire(blocking=False):
            raise RuntimeError(f"accelerator token already held (lane {lane}, step {step})")
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.intervals.append((lane, step, t0, time.perf_counter()))
            self._lock.release()


@dataclass
class StagingBuffer:
    data: np.ndarray
    tag: int = -1
    based_on: int = -1


@dataclass
class TransferLedger:
    entries: list = field(default_factory=list)

    def total_bytes(self):
        return sum(e["bytes"] for e in self.entries)

    def bytes_per_step(self, lane=None):
        out = {}
        for e in self.entries:
            if lane is None or e["lane"] == lane:
                out[e["step"]] = out.get(e["step"], 0) + e["bytes"]
        return out


def transfer_stage(src, dst, direction, ledger, step=-1, lane=-1):
    """Copy ``src`` into ``dst`` (byte-exact), carry its tags, and meter the copy."""
    t0 = time.perf_counter()
    np.copyto(dst.data, src.data)
    dst.tag, dst.based_on = src.tag, src.based_on
    entry = {"step": step, "lane": lane, "direction": direction,
             "bytes": int(src.data.nbytes), "seconds": time.perf_counter() - t0}
    ledger.entries.append(entry)
    return entry


def expected_bytes_per_step(r, n_dofs):
    """Guesses in plus results out, per lane and step."""
    return 2 * r * n_dofs * VALUE_SIZE


@dataclass
class LaneState:
    lane: int
    cases: list
    device: list
    host: list
    predictor: Predictor
    host_guess: StagingBuffer
    device_guess: StagingBuffer
    device_result: StagingBuffer
    host_result: StagingBuffer
    pending_adams: dict = field(default_factory=dict)
    pending_s: dict = field(default_factory=dict)


class PipelineError(RuntimeError):
    pass


def run_pipeline(config, problem, lane0_sources, lane1_sources, record_solutions=False,
                 capture_nodes=None, barrier_timeout=600.0):
    """Run ``2 r`` cases as two overlapped lanes; see the module docstring for phases.

    Returns a :class:`RunResult` with per-case reports, the s schedule per
    case, the phase timeline, transfer records, token intervals and the
    predictor-lag tags checked at each solve.
    """
    r = config.r
    if len(lane0_sources) != r or len(lane1_sources) != r:
        raise ValueError(f"each lane needs exactly r={r} cases")
    n, dt, nt = problem.n_dofs, problem.dt, config.nt
    backend = problem.backend(config.backend)
    s_max = config.s_max if config.predictor == "data-driven" else None
    host = ExecutorRole("host-pool", config.host_workers)
    pool = ThreadPoolExecutor(host.workers) if host.workers > 1 else None
    accel = ExecutorRole("accelerator", 1, AcceleratorToken())
    ledger = TransferLedger()
    result = RunResult([])
    result.lag_checks = []
    cap_dofs = None if capture_nodes is None else region_dofs([capture_nodes])[0]

    lanes = []
    for lane_id, sources in enumerate((lane0_sources, lane1_sources)):
        cases = [lane_id * r + k for k in range(r)]
        buf = lambda: StagingBuffer(np.zeros((n, r)))  # noqa: E731
        lanes.append(LaneState(
            lane_id, cases,
            [CaseState.at_rest(n, src) for src in sources],
            [CaseState.at_rest(n, src, s_max) for src in sources],
            Predictor(config, problem, pool), buf(), buf(), buf(), buf()))
        for c in cases:
            result.s_trace[c] = {}
            if record_solutions:
                result.solutions[c] = np.empty((nt, n))
            if cap_dofs is not None:
                result.waveforms[c] = np.empty((nt, cap_dofs.size))

    phase_times = {}
    timeline = []
    t_origin = time.perf_counter()
    report_lock = threading.Lock()

    seq = [0, 0]

    def mark(step, lane, phase, t0, t1, nbytes=0):
        # seq orders a lane's records by program order, independent of timing
        seq[lane] += 1
        timeline.append({"step": step, "lane": lane, "phase": phase, "seq": seq[lane],
                         "start": t0 - t_origin, "end": t1 - t_origin, "bytes": nbytes})

    def ingest(L, step):
        """Host side: take solved displacements of ``step`` into the mirrors and history."""
        buf = L.host_result
        if buf.tag != step:
            raise PipelineError(f"lane {L.lane}: expected results of step {step}, got {buf.tag}")
        adams = L.pending_adams.pop(step)
        for k, st in enumerate(L.host):
            newmark_update(st, buf.data[:, k], dt)
            if st.history is not None:
                update_history(st.history, st.u, adams[k], step)

    def predict(L, step, partner):
        t0 = time.perf_counter()
        if step > 1:
            ingest(L, step - 1)
            # the partner solve that ran alongside our previous prediction
            paired = step - 1 if L.lane == 0 else step - 2
            key_pred, key_solve = (L.lane, "predict", step - 1), (partner, "solve", paired)
            if key_pred in phase_times and key_solve in phase_times:
                pt, pc = phase_times[key_pred]
                stime, scost = phase_times[key_solve]
                L.predictor.feed(pt, stime, pc, scost)
        s = L.predictor.current_s(step)
        adams = []
        for k, st in enumerate(L.host):
            if st.it != step - 1:
                raise PipelineError(f"lane {L.lane}: host state at {st.it} while predicting {step}")
            g, ua = L.predictor.guess(st, s)
            L.host_guess.data[:, k] = g
            adams.append(ua)
        L.host_guess.tag = step
        L.host_guess.based_on = L.host[0].it
        L.pending_adams[step] = adams
        L.pending_s[step] = s
        t1 = time.perf_counter()
        cost = (predictor_model_cost(s, problem.dof_regions, n) * r
                if config.predictor == "data-driven" else 0.0)
        phase_times[(L.lane, "predict", step)] = (1e3 * (t1 - t0), cost)
        mark(step, L.lane, "predict", t0, t1)

    def solve(L, step):
        with accel.token.hold(L.lane, step):
            t0 = time.perf_counter()
            g = L.device_guess
            ok = g.tag == step and g.based_on == step - 1
            result.lag_checks.append((L.lane, step, g.tag, g.based_on, ok))
            if not ok:
                raise PipelineError(
                    f"lane {L.lane}: guess tagged {g.tag} (from state {g.based_on}) at step {step}")
            rhs = []
            for st in L.device:
                st.f = force_vector(st.source, step, n)
                rhs.append(newmark_rhs(st, backend, dt))
            if config.backend == "ebe-multi":
                X, reps = pcg_solve_multi(backend.apply_A, backend.precond, np.column_stack(rhs),
                                          g.data, config.eps, config.max_iter)
            else:
                X, reps = np.empty((n, r)), []
                for k in range(r):
                    X[:, k], rep = pcg_solve(backend.apply_A, backend.precond, rhs[k],
                                             g.data[:, k], config.eps, config.max_iter)
                    reps.append(rep)
            for k, (st, rep) in enumerate(zip(L.device, reps)):
                if not rep.converged:
                    raise PipelineError(f"solver did not converge: case {L.cases[k]}, step {step}")
                newmark_update(st, X[:, k], dt)
                L.device_result.data[:, k] = st.u
            L.device_result.tag = step
            L.device_result.based_on = step
            t1 = time.perf_counter()
        iters = max(rep.iterations for rep in reps)
        cost = solver_model_cost(iters, backend, config.model_speed_ratio) * r
        phase_times[(L.lane, "solve", step)] = (1e3 * (t1 - t0), cost)
        mark(step, L.lane, "solve", t0, t1)
        s = L.pending_s.pop(step)
        pt, pc = phase_times.get((L.lane, "predict", step), (0.0, 0.0))
        with report_lock:
            for k, (st, rep) in enumerate(zip(L.device, reps)):
                c = L.cases[k]
                result.reports.append(StepReport(
                    c, step, L.lane, s, rep.iterations, rep.initial_relative_residual,
                    rep.final_relative_residual, np.nan, rep.converged, pt / r,
                    1e3 * (t1 - t0) / r, pc / r,
                    solver_model_cost(rep.iterations, backend, config.model_speed_ratio)))
                result.s_trace[c][step] = s
                if record_solutions:
                    result.solutions[c][step - 1] = st.u
                if cap_dofs is not None:
                    result.waveforms[c][step - 1] = st.u[cap_dofs]

    def stage(L, src, dst, direction, step):
        t0 = time.perf_counter()
        entry = transfer_stage(src, dst, direction, ledger, step, L.lane)
        mark(step, L.lane, direction, t0, time.perf_counter(), entry["bytes"])

    barrier = threading.Barrier(2, timeout=barrier_timeout)
    errors = []
    step_start = {}

    def sync():
        try:
            barrier.wait()
        except threading.BrokenBarrierError:
            raise PipelineError("lane desynchronised (barrier broken or timed out)") from None

    def lane_main(L):
        other = 1 - L.lane
        try:
            if L.lane == 1:
                predict(L, 1, other)
                stage(L, L.host_guess, L.device_guess, "h2d", 1)
            for it in range(1, nt + 1):
                sync()
                if L.lane == 0:
                    step_start[it] = time.perf_counter()
                    predict(L, it, other)
                else:
                    solve(L, it)
                sync()
                if L.lane == 0:
                    stage(L, L.host_guess, L.device_guess, "h2d", it)
                else:
                    stage(L, L.device_result, L.host_result, "d2h", it)
                sync()
                if L.lane == 0:
                    solve(L, it)
                elif it < nt:
                    predict(L, it + 1, other)
                else:
                    ingest(L, it)
                sync()
                if L.lane == 0:
                    stage(L, L.device_result, L.host_result, "d2h", it)
                elif it < nt:
                    stage(L, L.host_guess, L.device_guess, "h2d", it + 1)
            sync()
            if L.lane == 0:
                step_start[nt + 1] = time.perf_counter()
                ingest(L, nt)
        except BaseException as exc:  # propagate to the caller after both lanes stop
            errors.append(exc)
            barrier.abort()

    threads = [threading.Thread(target=lane_main, args=(L,), name=f"lane{L.lane}") for L in lanes]
    try:
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    finally:
        if pool is not None:
            pool.shutdown()
    if errors:
        first = next((e for e in errors if not isinstance(e, PipelineError)), errors[0])
        raise first

    for rep in result.reports:
        # one barrier-to-barrier iteration covers a step of all 2r cases
        rep.step_ms = 1e3 * (step_start[rep.step + 1] - step_start[rep.step]) / (2 * r)
    result.reports.sort(key=lambda rep: (rep.step, rep.case))
    result.timeline = sorted(timeline, key=lambda row: (row["start"], row["lane"]))
    result.transfers = ledger.entries
    result.token_intervals = list(accel.token.intervals)
    result.controller_trace = _controller_trace(result)
    return result


def _controller_trace(result):
    """Each lane's prediction time beside the partner solve that ran in the same phase."""
    spans = {(rec["lane"], rec["phase"], rec["step"]): 1e3 * (rec["end"] - rec["start"])
             for rec in result.timeline}
    s_of = {}
    for rep in result.reports:
        s_of[(rep.lane, rep.step)] = rep.s
    rows = []
    for (lane, step), s in sorted(s_of.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        partner_step = step if lane == 0 else step - 1
        rows.append({"step": step, "lane": lane, "s": s,
                     "predictor_ms": spans.get((lane, "predict", step), 0.0),
                     "solver_ms": spans.get((1 - lane, "solve", partner_step), 0.0)})
    return rows


def balance_fraction(trace, warmup=0, tolerance=0.5):
    """Share of trace rows past ``warmup`` with |pred - solve| / max <= ``tolerance``."""
    rows = [r for r in trace if r["step"] > warmup]
    if not rows:
        return float("nan")
    ok = 0
    for r in rows:
        hi = max(r["predictor_ms"], r["solver_ms"])
        if hi > 0 and abs(r["predictor_ms"] - r["solver_ms"]) / hi <= tolerance:
            ok += 1
    return ok / len(rows)


def token_intervals_disjoint(intervals):
    spans = sorted((t0, t1) for _, _, t0, t1 in intervals)
    return all(b0 >= a1 for (_, a1), (b0, _) in zip(spans, spans[1:]))


def phase_timeline(result):
    """Per-step predictor, solver and transfer time (ms) with their overlap fraction.

    Pipeline runs are summarised from the recorded phase timeline; sequential
    runs from the step reports, where transfers are absent.
    """
    steps = {}

    def row(step):
        return steps.setdefault(step, {"step": step, "predictor_ms": 0.0, "solver_ms": 0.0,
                                       "transfer_ms": 0.0})

    if result.timeline:
        names = {"predict": "predictor_ms", "solve": "solver_ms",
                 "h2d": "transfer_ms", "d2h": "transfer_ms"}
        for rec in result.timeline:
            row(rec["step"])[names[rec["phase"]]] += 1e3 * (rec["end"] - rec["start"])
    else:
        for rep in result.reports:
            rw = row(rep.step)
            rw["predictor_ms"] += rep.predictor_ms
            rw["solver_ms"] += rep.solver_ms
    out = []
    for step in sorted(steps):
        rw = steps[step]
        hi = max(rw["predictor_ms"], rw["solver_ms"])
        lo = min(rw["predictor_ms"], rw["solver_ms"])
        rw["overlap"] = lo / hi if hi > 0 else 0.0
        out.append(rw)
    return out


def write_timeline_csv(result, path):
    """Rows ordered by (step, lane, program order) so only start/end depend on timing."""
    rows = sorted(result.timeline, key=lambda rec: (rec["step"], rec["lane"], rec["seq"]))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "lane", "phase", "start", "end", "bytes"])
        for rec in rows:
            w.writerow([rec["step"], rec["lane"], rec["phase"],
                        f"{rec['start']:.9f}", f"{rec['end']:.9f}", rec["bytes"]])
