import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.signal import welch

from hetsolve.ensemble import (center_surface_node, fdd_dominant_frequency,
                               make_source_schedule, peak_line, read_waveforms, run_ensemble,
                               surface_groups, write_frequency_csv, write_waveforms)
from hetsolve.timeloop import RunConfig, desk_problem, run_single_lane

DT = 0.005


def sine(freq=2.0, steps=4096, phase=0.0):
    return np.sin(2 * np.pi * freq * DT * np.arange(steps) + phase)


def test_schedule_properties(small_problem):
    assert make_source_schedule(small_problem.mesh, 0, 1, n_cases=3).cases == [[], [], []]
    a = make_source_schedule(small_problem.mesh, 30, 11, n_cases=2)
    b = make_source_schedule(small_problem.mesh, 30, 11, n_cases=2)
    assert a.cases == b.cases and a.seed == 11
    surface = set(small_problem.mesh.surface_nodes.tolist())
    for case in a.cases:
        for imp in case:
            assert imp.node in surface
            assert abs(np.linalg.norm(imp.direction) - 1.0) <= 1e-12
            assert 1 <= imp.step <= 50


def test_sine_recovered_within_one_bin():
    res = fdd_dominant_frequency(np.vstack([sine(), sine(phase=0.3)]), DT, 1024)
    bin_width = res.frequencies[1] - res.frequencies[0]
    assert res.has_peak and abs(res.dominant_frequency - 2.0) <= bin_width
    assert 0 < res.dominant_frequency <= 1 / (2 * DT)


def test_identical_channels_double_the_psd():
    x = sine() + 0.1 * np.random.default_rng(0).standard_normal(4096)
    one = fdd_dominant_frequency(x, DT, 1024)
    two = fdd_dominant_frequency(np.vstack([x, x]), DT, 1024)
    body = slice(1, None)
    assert np.allclose(two.singular_values[body], 2 * one.singular_values[body], rtol=1e-10, atol=0)


@given(st.floats(1e-6, 1e6), st.integers(0, 1000))
def test_argmax_invariant_to_scaling(scale, seed):
    rng = np.random.default_rng(seed)
    x = np.vstack([sine(3.0, 2048), sine(5.0, 2048)]) + rng.standard_normal((2, 2048))
    a = fdd_dominant_frequency(x, DT, 256)
    b = fdd_dominant_frequency(scale * x, DT, 256)
    assert a.dominant_frequency == b.dominant_frequency


def test_noisy_sine_recovered_on_most_seeds():
    hits = 0
    seeds = range(40)
    for seed in seeds:
        rng = np.random.default_rng(seed)
        s = sine()
        noise = rng.standard_normal(s.size) * np.sqrt(s.var() / 10.0)
        res = fdd_dominant_frequency(s + noise, DT, 1024)
        hits += abs(res.dominant_frequency - 2.0) <= res.frequencies[1]
    assert hits >= 0.95 * len(seeds)


def test_parseval_for_chosen_window():
    x = np.random.default_rng(3).standard_normal(16384)
    f, p = welch(x, fs=1 / DT, window="hann", nperseg=1024, noverlap=512)
    assert p.sum() * (f[1] - f[0]) == pytest.approx(x.var(), rel=0.02)
    res = fdd_dominant_frequency(x, DT, 1024)
    assert np.allclose(res.singular_values, p, rtol=1e-10)


def test_zero_input_flagged():
    res = fdd_dominant_frequency(np.zeros((3, 1024)), DT, 256)
    assert not res.has_peak and np.isnan(res.dominant_frequency) and res.confidence == 0.0


def test_tie_goes_to_lower_frequency():
    assert peak_line(np.array([9.0, 1.0, 3.0, 2.0, 3.0])) == 2
    assert peak_line(np.array([5.0, 0.0, 0.0])) == -1


@pytest.mark.parametrize("kw", [dict(segment=300), dict(segment=128), dict(segment=4096)])
def test_bad_segment_rejected(kw):
    with pytest.raises(ValueError):
        fdd_dominant_frequency(sine(), DT, **kw)


def test_waveform_text_round_trip(tmp_path, rng):
    w = rng.standard_normal((20, 6))
    path = tmp_path / "w.txt"
    write_waveforms(path, w, DT, [3, 8])
    back, dt, names = read_waveforms(path)
    assert np.array_equal(back, w) and dt == DT
    assert names == ["n3_x", "n3_y", "n3_z", "n8_x", "n8_y", "n8_z"]


def test_groups_are_nearest_surface_neighbours(small_problem):
    mesh = small_problem.mesh
    c = center_surface_node(mesh)
    g = surface_groups(mesh, [c], k=4)[0]
    assert g[0] == c and len(set(g)) == 5
    d = np.linalg.norm(mesh.node_coords[g, :2] - mesh.node_coords[c, :2], axis=1)
    others = np.setdiff1d(mesh.surface_nodes, g)
    dmin = np.linalg.norm(mesh.node_coords[others, :2] - mesh.node_coords[c, :2], axis=1).min()
    assert d.max() <= dmin + 1e-9


@pytest.fixture(scope="module")
def layered_run(small_problem):
    schedule = make_source_schedule(small_problem.mesh, 20, 3, n_cases=1)
    cfg = RunConfig(nt=512, r=1, backend="ebe", predictor="ab4")
    point = center_surface_node(small_problem.mesh)
    return cfg, schedule, point, run_ensemble(cfg, small_problem, schedule, [point], segment=256)


def test_single_case_equals_composition(small_problem, layered_run):
    cfg, schedule, point, ens = layered_run
    group = surface_groups(small_problem.mesh, [point])[0]
    res = run_single_lane(cfg, small_problem, schedule.cases, capture_nodes=np.sort(group))
    order = np.argsort(np.argsort(group))
    cols = np.concatenate([3 * order[i] + np.arange(3) for i in range(len(group))])
    manual = fdd_dominant_frequency(res.waveforms[0][:, cols].T, DT, 256)
    assert ens.frequency[0] == manual.dominant_frequency
    assert np.array_equal(ens.per_case[0][0].singular_values, manual.singular_values)
    assert ens.iteration_table()[0]["cases"] == 1


def test_soft_layer_lowers_dominant_frequency(layered_run):
    cfg, schedule, point, layered = layered_run
    stiff = desk_problem((4, 4, 2), interface=50.0)
    homogeneous = run_ensemble(cfg, stiff, schedule, [point], segment=256)
    assert layered.frequency[0] < homogeneous.frequency[0]


def test_ensemble_batches_and_csv(small_problem, tmp_path):
    schedule = make_source_schedule(small_problem.mesh, 5, 4, n_cases=3)
    cfg = RunConfig(nt=512, r=1, backend="ebe-multi", predictor="ab4")
    points = small_problem.mesh.surface_nodes[:2]
    ens = run_ensemble(cfg, small_problem, schedule, points, k=2, segment=256)
    assert sorted(ens.per_case) == [0, 1, 2]
    assert sorted({r.case for r in ens.reports}) == [0, 1, 2]
    path = tmp_path / "freq.csv"
    write_frequency_csv(ens, path)
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["x", "y", "frequency", "confidence"] and len(rows) == 2
    assert float(rows[0]["frequency"]) == pytest.approx(ens.frequency[0])
