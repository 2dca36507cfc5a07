"""Random-impulse ensembles and dominant-frequency maps by frequency domain decomposition."""

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import csd
from scipy.spatial import cKDTree

from ._validation import check_int
from .pipeline import run_pipeline
from .timeloop import Impulse, run_single_lane


@dataclass
class SourceSchedule:
    cases: list
    seed: int

    def __len__(self):
        return len(self.cases)


def make_source_schedule(mesh, n_sources, seed, n_cases=1, max_step=50,
                         amplitude=(0.5e6, 1.5e6)):
    """``n_cases`` impulse lists, each with ``n_sources`` random surface impulses.

    Nodes come from the surface set, directions are uniform on the sphere,
    amplitudes (N) uniform in ``amplitude`` and steps uniform in 1..max_step.
    """
    check_int(n_sources, "n_sources", minimum=0)
    check_int(n_cases, "n_cases", minimum=0)
    check_int(max_step, "max_step", minimum=1)
    rng = np.random.default_rng(seed)
    surface = np.asarray(mesh.surface_nodes)
    cases = []
    for _ in range(n_cases):
        nodes = rng.choice(surface, size=n_sources)
        steps = rng.integers(1, max_step + 1, size=n_sources)
        dirs = rng.standard_normal((n_sources, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        amps = rng.uniform(amplitude[0], amplitude[1], size=n_sources)
        cases.append([Impulse(int(n), int(s), tuple(float(c) for c in d), float(a))
                      for n, s, d, a in zip(nodes, steps, dirs, amps)])
    return SourceSchedule(cases, seed)


@dataclass
class SpectralResult:
    frequencies: np.ndarray
    singular_values: np.ndarray
    dominant_frequency: float
    confidence: float
    has_peak: bool


def fdd_dominant_frequency(waveforms, dt, segment=1024, overlap=0.5):
    """Dominant frequency of a channel group (channels x steps).

    The cross power spectral density matrix is estimated with Hann-windowed,
    overlapping segments; its first singular value per frequency line forms
    the spectrum whose peak (DC excluded, ties to the lower line) is returned.
    Confidence is the peak over the median of the spectrum.
    """
    x = np.atleast_2d(np.asarray(waveforms, dtype=float))
    channels, steps = x.shape
    if channels < 1:
        raise ValueError("need at least one channel")
    if segment < 256 or segment & (segment - 1):
        raise ValueError(f"segment must be a power of two >= 256, got {segment}")
    if steps < 2 * segment:
        raise ValueError(f"need at least {2 * segment} steps for segment {segment}, got {steps}")
    if not 0.0 <= overlap < 1.0:
        raise ValueError("overlap must lie in [0, 1)")
    freqs, G = csd(x[:, None, :], x[None, :, :], fs=1.0 / dt, window="hann",
                   nperseg=segment, noverlap=int(segment * overlap), axis=-1)
    sv = np.linalg.svd(np.moveaxis(G, -1, 0), compute_uv=False)[:, 0]
    k = peak_line(sv)
    if k < 0:
        return SpectralResult(freqs, sv, float("nan"), 0.0, False)
    med = float(np.median(sv[1:]))
    confidence = float(sv[k] / med) if med > 0 else float("inf")
    return SpectralResult(freqs, sv, float(freqs[k]), confidence, True)


def peak_line(spectrum):
    """Index of the largest non-DC line (first one on ties), or -1 if all are zero."""
    body = np.asarray(spectrum)[1:]
    if not np.any(body > 0):
        return -1
    return 1 + int(np.argmax(body))


def surface_groups(mesh, points, k=4):
    """Each sample point's node followed by its ``k`` nearest surface neighbours."""
    surface = np.asarray(mesh.surface_nodes)
    xy = mesh.node_coords[surface, :2]
    tree = cKDTree(xy)
    kk = min(k + 1, surface.size)
    _, idx = tree.query(mesh.node_coords[np.asarray(points), :2], k=kk)
    return surface[np.atleast_2d(idx)]


def default_sample_points(mesh, n_points):
    """``n_points`` surface nodes spread along a deterministic stride."""
    surface = np.asarray(mesh.surface_nodes)
    n_points = min(n_points, surface.size)
    pick = np.linspace(0, surface.size - 1, n_points).round().astype(int)
    return surface[pick]


def center_surface_node(mesh):
    surface = np.asarray(mesh.surface_nodes)
    xy = mesh.node_coords[surface, :2]
    mid = 0.5 * (xy.min(axis=0) + xy.max(axis=0))
    return int(surface[np.argmin(np.linalg.norm(xy - mid, axis=1))])


@dataclass
class EnsembleResult:
    points: np.ndarray
    coords: np.ndarray
    frequency: np.ndarray
    confidence: np.ndarray
    per_case: dict = field(default_factory=dict)
    reports: list = field(default_factory=list)

    def iteration_table(self):
        """Mean CG iterations and solver time per step across all cases."""
        steps = sorted({r.step for r in self.reports})
        rows = []
        for s in steps:
            reps = [r for r in self.reports if r.step == s]
            rows.append({"step": s, "cases": len(reps),
                         "mean_iterations": float(np.mean([r.iterations for r in reps])),
                         "mean_solver_ms": float(np.mean([r.solver_ms for r in reps]))})
        return rows


def run_ensemble(config, problem, schedule, points=None, k=4, segment=256, overlap=0.5,
                 pipeline=True):
    """Simulate every case of ``schedule`` and map dominant frequencies at ``points``.

    Full batches of ``2 r`` cases go through the two-lane pipeline; any
    remainder is run sequentially. Each point's frequency is averaged over
    the cases where a peak was found.
    """
    mesh = problem.mesh
    if points is None:
        points = default_sample_points(mesh, 16)
    points = np.asarray(points, dtype=np.int64)
    groups = surface_groups(mesh, points, k)
    capture = np.unique(groups)
    slot = {int(n): i for i, n in enumerate(capture)}
    r = config.r
    cases = list(schedule.cases)
    waves, reports = {}, []
    start = 0
    while start < len(cases):
        if pipeline and len(cases) - start >= 2 * r:
            res = run_pipeline(config, problem, cases[start:start + r],
                               cases[start + r:start + 2 * r], capture_nodes=capture)
            ids = range(2 * r)
            start_next = start + 2 * r
        else:
            batch = cases[start:]
            res = run_single_lane(config, problem, batch, capture_nodes=capture)
            ids = range(len(batch))
            start_next = len(cases)
        for i in ids:
            waves[start + i] = res.waveforms[i]
        for rep in res.reports:
            rep.case += start
            reports.append(rep)
        start = start_next

    per_case = {}
    freq = np.full((len(cases), points.size), np.nan)
    conf = np.zeros((len(cases), points.size))
    for c, w in waves.items():
        results = []
        for p, group in enumerate(groups):
            cols = np.concatenate([3 * slot[int(n)] + np.arange(3) for n in group])
            sr = fdd_dominant_frequency(w[:, cols].T, problem.dt, segment, overlap)
            results.append(sr)
            if sr.has_peak:
                freq[c, p] = sr.dominant_frequency
                conf[c, p] = sr.confidence
        per_case[c] = results
    with np.errstate(all="ignore"):
        counts = np.sum(~np.isnan(freq), axis=0)
        mean_f = np.where(counts > 0, np.nansum(freq, axis=0) / np.maximum(counts, 1), np.nan)
    mean_c = conf.mean(axis=0) if len(cases) else np.zeros(points.size)
    return EnsembleResult(points, mesh.node_coords[points], mean_f, mean_c, per_case, reports)


def write_frequency_csv(result, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "frequency", "confidence"])
        for (x, y, _), f, c in zip(result.coords, result.frequency, result.confidence):
            w.writerow([repr(float(x)), repr(float(y)), repr(float(f)), repr(float(c))])


def write_waveforms(path, waveforms, dt, nodes):
    """Columnar text: a ``dt`` header line, a column-name line, then one row per step."""
    names = [f"n{int(n)}_{c}" for n in nodes for c in "xyz"]
    waveforms = np.asarray(waveforms, dtype=float)
    if waveforms.shape[1] != len(names):
        raise ValueError(f"expected {len(names)} columns, got {waveforms.shape[1]}")
    with open(path, "w") as fh:
        fh.write(f"# dt {dt!r}\n")
        fh.write("step " + " ".join(names) + "\n")
        for i, row in enumerate(waveforms, start=1):
            fh.write(f"{i} " + " ".join(repr(float(v)) for v in row) + "\n")


def read_waveforms(path):
    """Returns (waveforms steps x channels, dt, column names)."""
    with open(path) as fh:
        first = fh.readline().split()
        if len(first) != 3 or first[:2] != ["#", "dt"]:
            raise ValueError(f"{path}: line 1 must be '# dt <value>'")
        dt = float(first[2])
        names = fh.readline().split()
        if not names or names[0] != "step":
            raise ValueError(f"{path}: line 2 must start with 'step'")
        data = np.loadtxt(fh, ndmin=2)
    if data.size and data.shape[1] != len(names):
        raise ValueError(f"{path}: {data.shape[1]} columns, header names {len(names)}")
    values = data[:, 1:] if data.size else np.empty((0, len(names) - 1))
    return values, dt, names[1:]
