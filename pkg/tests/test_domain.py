import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmdpt.domain import (FrameSchedule, InstanceConfig, InstanceError, RunConfig,
                          interpolate_user_distributions, load_config, load_trace,
                          pmf_from_throughput_samples, sample_arrival_probabilities,
                          synthetic_instance, anchor_pmfs, validate_instance, write_trace)


def _cfg(M=4, N=4, B=20, p=0.5, pmfs=None, mandatory=True):
    if pmfs is None:
        pmfs = np.full((1, M, N, 5), 0.2)
    return InstanceConfig(M, N, B if B <= M else M, 15, pmfs.shape[-1] - 1,
                          np.full(M, p), FrameSchedule(pmfs), mandatory)


def test_validate_ok():
    cfg = _cfg()
    assert validate_instance(cfg) is cfg


def test_validate_rejects_off_simplex_row():
    pmfs = np.full((1, 4, 4, 5), 0.2)
    pmfs[0, 1, 2] = [0.1, 0.2, 0.2, 0.2, 0.2]
    with pytest.raises(InstanceError, match="simplex"):
        _cfg(pmfs=pmfs)


def test_validate_mandatory_budget():
    cfg = InstanceConfig(100, 4, 20, 15, 4, np.full(100, 0.9),
                         FrameSchedule(np.full((1, 100, 4, 5), 0.2)))
    with pytest.raises(InstanceError, match="infeasible"):
        validate_instance(cfg)
    # the literal mode has no such requirement
    loose = InstanceConfig(100, 4, 20, 15, 4, np.full(100, 0.9),
                           FrameSchedule(np.full((1, 100, 4, 5), 0.2)), mandatory=False)
    assert validate_instance(loose) is loose


def test_validate_dimension_mismatch():
    cfg = InstanceConfig(3, 4, 2, 15, 4, np.full(3, 0.5), FrameSchedule(np.full((1, 4, 4, 5), 0.2)))
    with pytest.raises(InstanceError, match="shape"):
        validate_instance(cfg)


def test_throughput_all_below_packet():
    assert np.array_equal(pmf_from_throughput_samples([1, 20, 99.9], 100, 4), [1, 0, 0, 0, 0])


def test_throughput_counting_example():
    pmf = pmf_from_throughput_samples([50, 150, 150, 250], 100, 4)
    assert np.allclose(pmf, [0.25, 0.5, 0.25, 0, 0], atol=0)


def test_throughput_single_bin():
    assert np.array_equal(pmf_from_throughput_samples([350], 100, 4), [0, 0, 0, 1, 0])


def test_throughput_overflow_goes_to_dmax():
    assert np.array_equal(pmf_from_throughput_samples([1e6], 100, 4), [0, 0, 0, 0, 1])


@pytest.mark.parametrize("samples,Q", [([], 100), ([10.0], 0), ([10.0], -1)])
def test_throughput_errors(samples, Q):
    with pytest.raises(InstanceError):
        pmf_from_throughput_samples(samples, Q, 4)


def test_throughput_converges_to_known_pmf():
    rng = np.random.default_rng(7)
    pmf = np.array([0.4, 0.3, 0.15, 0.1, 0.05])
    d = rng.choice(5, size=10**6, p=pmf)
    # throughput spread uniformly inside each bin
    C = (d + rng.uniform(0, 1, d.size)) * 100.0
    est = pmf_from_throughput_samples(C, 100.0, 4)
    assert 0.5 * np.abs(est - pmf).sum() < 0.01


def test_interpolation_midpoint_user_11():
    grid = interpolate_user_distributions(anchor_pmfs(), 100)
    assert grid[10, 0, 1] == pytest.approx(0.085, abs=1e-15)


def test_interpolation_exact_at_anchors():
    anchors = anchor_pmfs()
    grid = interpolate_user_distributions(anchors, 100)
    for u, pmf in anchors.items():
        assert np.array_equal(grid[u - 1], pmf)


def test_anchor_residual_mass():
    assert anchor_pmfs()[1][0, 0] == pytest.approx(0.8, abs=1e-15)


def test_interpolation_affine_between_anchors():
    grid = interpolate_user_distributions(anchor_pmfs(), 100)
    # three collinear points inside the 21 -> 41 segment
    a, b, c = grid[24], grid[29], grid[34]
    assert np.allclose(b - a, c - b, atol=1e-14)


def test_interpolation_extension_and_simplex():
    grid = interpolate_user_distributions(anchor_pmfs(), 100)
    assert np.all(grid >= 0)
    assert np.allclose(grid.sum(-1), 1, atol=1e-12)
    # the 61 -> 81 step is continued past user 81
    step = (grid[80] - grid[60]) / 20
    expect = np.maximum(grid[80, :, 1:] + 10 * step[:, 1:], 0)
    assert np.allclose(grid[90, :, 1:], expect, atol=1e-14)


def test_interpolation_bad_anchors():
    a = anchor_pmfs()
    with pytest.raises(InstanceError):
        interpolate_user_distributions({21: a[21]}, 30)
    heavy = {1: np.array([[0.0, 0.5, 0.5]]), 2: np.array([[0.0, 0.1, 0.9]])}
    with pytest.raises(InstanceError, match="exceeds"):
        interpolate_user_distributions(heavy, 4)


def test_arrival_single_user():
    p = sample_arrival_probabilities(1, 0.3, np.random.default_rng(0))
    assert p.shape == (1,) and p[0] == pytest.approx(0.3, abs=1e-15)


def test_arrival_mean_and_range():
    p = sample_arrival_probabilities(100, 0.5, np.random.default_rng(1))
    assert abs(p.mean() - 0.5) < 1e-12
    assert np.all((p > 0) & (p <= 1))
    assert p.std() > 0


def test_arrival_deterministic():
    a = sample_arrival_probabilities(50, 0.5, np.random.default_rng(3))
    b = sample_arrival_probabilities(50, 0.5, np.random.default_rng(3))
    assert np.array_equal(a, b)


@pytest.mark.parametrize("mean", [0.0, 1.0, -0.2, 1.5])
def test_arrival_bad_mean(mean):
    with pytest.raises(InstanceError):
        sample_arrival_probabilities(5, mean, np.random.default_rng(0))


def test_trace_single_uniform_frame(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("frame,user,ap,p0,p1\n0,1,1,0.5,0.5\n0,1,2,0.5,0.5\n")
    fs = load_trace(path)
    assert fs.n_frames == 1 and fs.pmfs.shape == (1, 1, 2, 2)


def test_trace_off_simplex(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("frame,user,ap,p0,p1\n0,1,1,0.6,0.5\n")
    with pytest.raises(InstanceError, match="simplex"):
        load_trace(path)


def test_trace_ragged(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("frame,user,ap,p0,p1\n0,1,1,0.5,0.5\n0,2,2,0.5,0.5\n")
    with pytest.raises(InstanceError, match="ragged"):
        load_trace(path)


def test_trace_parse_error(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("frame,user,ap,p0,p1\n0,1,one,0.5,0.5\n")
    with pytest.raises(InstanceError):
        load_trace(path)


def test_trace_roundtrip(tmp_path):
    cfg = synthetic_instance(M=12, N=3, B=3, S_max=4, seed=5, n_frames=3)
    write_trace(cfg.frames, tmp_path / "trace.csv")
    back = load_trace(tmp_path / "trace.csv", cfg.frames.slots_per_frame)
    assert np.array_equal(back.pmfs, cfg.frames.pmfs)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31))
def test_trace_roundtrip_random(tmp_path_factory, F, M, N, D, seed):
    pmfs = np.random.default_rng(seed).dirichlet(np.ones(D + 1), (F, M, N))
    fs = FrameSchedule(pmfs / pmfs.sum(-1, keepdims=True))
    path = tmp_path_factory.mktemp("rt") / "trace.csv"
    write_trace(fs, path)
    assert np.array_equal(load_trace(path).pmfs, fs.pmfs)


def test_synthetic_instance_valid():
    cfg = synthetic_instance()
    assert (cfg.M, cfg.N, cfg.B, cfg.S_max, cfg.d_max) == (100, 4, 20, 15, 4)
    assert abs(cfg.p.mean() - 0.5) < 1e-12
    assert np.allclose(cfg.frames.pmfs.sum(-1), 1, atol=1e-12)


def test_frame_index():
    fs = FrameSchedule(np.full((3, 1, 1, 2), 0.5), slots_per_frame=10)
    assert [fs.frame_at(t) for t in (1, 10, 11, 30, 31, 500)] == [0, 0, 1, 2, 2, 2]


def test_load_config(tmp_path):
    cfg = synthetic_instance(M=3, N=2, B=2, S_max=3, seed=1)
    write_trace(cfg.frames, tmp_path / "trace.csv")
    (tmp_path / "inst.yaml").write_text(
        "M: 3\nN: 2\nB: 2\nS_max: 3\nd_max: 4\np: [0.2, 0.3, 0.4]\ntrace: trace.csv\nseed: 1\n")
    rc = load_config(tmp_path / "inst.yaml")
    inst = rc.instance()
    assert np.array_equal(inst.frames.pmfs, cfg.frames.pmfs)
    assert np.allclose(inst.p, [0.2, 0.3, 0.4])


def test_run_config_synthetic_default():
    inst = RunConfig(M=8, N=4, B=2, S_max=5).instance()
    assert inst.frames.pmfs.shape == (1, 8, 4, 5)
