import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conformal_sde.errors import InvalidArgument
from conformal_sde.noise import (
    NoisePath,
    TruncationLevel,
    coarsen,
    coarsen_increments,
    make_time_grid,
    sample_noise,
    sample_noise_batch,
    truncate_increment,
    truncate_increments,
    truncation_defect,
)


def test_grid_quarter_steps():
    g = make_time_grid(1.0, 4)
    assert g.step_size == 0.25
    np.testing.assert_array_equal(g.nodes, [0, 0.25, 0.5, 0.75, 1.0])
    np.testing.assert_array_equal(g.midpoints, [0.125, 0.375, 0.625, 0.875])


def test_grid_rigid_body_step():
    g = make_time_grid(10.0, 100)
    assert g.step_size == 0.1
    assert g.node(50) == 5.0
    assert g.nodes[50] == 5.0


def test_grid_dyadic_step_is_exact():
    g = make_time_grid(1.0, 2**12)
    assert g.step_size == 2.0**-12
    assert g.nodes[-1] == 1.0


@pytest.mark.parametrize("T,N", [(0.0, 4), (-1.0, 4), (1.0, 0), (1.0, 2.5), (math.inf, 3)])
def test_grid_rejects_bad_input(T, N):
    with pytest.raises(InvalidArgument):
        make_time_grid(T, N)


@given(T=st.floats(1e-3, 1e3), N=st.integers(1, 5000))
@settings(max_examples=60, deadline=None)
def test_grid_nodes_and_midpoints_are_ordered(T, N):
    g = make_time_grid(T, N)
    t = g.nodes
    assert t[0] == 0.0
    assert abs(t[-1] - T) <= 4 * np.finfo(float).eps * T
    assert np.all(np.diff(t) > 0)
    m = g.midpoints
    assert np.all(m > t[:-1]) and np.all(m < t[1:])


def test_noise_is_reproducible_and_keyed():
    g = make_time_grid(1.0, 64)
    a = sample_noise(g, 3, seed=11, sample_index=5)
    b = sample_noise(g, 3, seed=11, sample_index=5)
    assert a == b
    assert a.increments.shape == (3, 64)
    assert not np.array_equal(a.increments, sample_noise(g, 3, 11, 6).increments)
    assert not np.array_equal(a.increments, sample_noise(g, 3, 12, 5).increments)
    # channels are independent streams: channel 0 does not depend on M
    np.testing.assert_array_equal(sample_noise(g, 1, 11, 5).increments[0], a.increments[0])


def test_noise_batch_matches_single_samples():
    g = make_time_grid(1.0, 16)
    batch = sample_noise_batch(g, 2, 3, [4, 0, 9])
    for row, idx in zip(batch, [4, 0, 9]):
        np.testing.assert_array_equal(row, sample_noise(g, 2, 3, idx).increments)


def test_noise_is_immutable():
    path = sample_noise(make_time_grid(1.0, 8), 1, 0, 0)
    with pytest.raises(ValueError):
        path.increments[0, 0] = 1.0


def test_noise_path_shape_is_checked():
    with pytest.raises(InvalidArgument):
        NoisePath(make_time_grid(1.0, 4), np.zeros((2, 3)))


def test_noise_moments_over_a_million_draws():
    g = make_time_grid(1.0, 10**6)
    x = sample_noise(g, 1, seed=2024, sample_index=0).increments[0]
    tau = g.step_size
    assert abs(x.mean()) <= 4 * math.sqrt(tau / x.size)
    assert abs(x.var() / tau - 1) < 0.01


def test_truncation_examples():
    tau = math.exp(-2)
    k1 = TruncationLevel(1)
    assert truncate_increment(0.0, 0.3, TruncationLevel(2)) == 0.0
    assert truncate_increment(math.sqrt(tau), tau, k1) == math.sqrt(tau)
    assert truncate_increment(10 * math.sqrt(tau), tau, k1) == pytest.approx(2 * math.exp(-1), rel=1e-14)
    assert truncate_increment(-10 * math.sqrt(tau), tau, k1) == pytest.approx(-0.7357588823428847, rel=1e-14)


@pytest.mark.parametrize("tau", [1.0, 2.0, 0.0, -0.1])
def test_truncation_rejects_large_steps(tau):
    with pytest.raises(InvalidArgument):
        truncate_increment(0.1, tau, TruncationLevel(1))


def test_truncation_level_must_be_positive_integer():
    for k in (0, -1, 1.5):
        with pytest.raises(InvalidArgument):
            TruncationLevel(k)


@given(
    dw=st.floats(-50, 50),
    tau=st.floats(1e-8, 0.99),
    k=st.integers(1, 4),
)
def test_truncation_bound_and_sign(dw, tau, k):
    level = TruncationLevel(k)
    w = truncate_increment(dw, tau, level)
    cap = math.sqrt(tau) * math.sqrt(2 * k * abs(math.log(tau)))
    assert abs(w) <= min(abs(dw), cap) * (1 + 1e-15)
    assert w == 0 or math.copysign(1, w) == math.copysign(1, dw)


def test_vectorised_truncation_keeps_small_entries_bitwise():
    rng = np.random.default_rng(0)
    tau = 2.0**-6
    dw = rng.standard_normal(1000) * math.sqrt(tau)
    w = truncate_increments(dw, tau, TruncationLevel(1))
    untouched = np.abs(dw) <= math.sqrt(tau) * TruncationLevel(1).threshold(tau)
    np.testing.assert_array_equal(w[untouched], dw[untouched])


def test_coarsen_identity_and_block_sum():
    g = make_time_grid(1.0, 4)
    path = NoisePath(g, np.array([[1.0, 2.0, 3.0, 4.0]]))
    assert coarsen(path, 1) == path
    c = coarsen(path, 4)
    assert c.grid.steps == 1
    np.testing.assert_array_equal(c.increments, [[10.0]])


def test_coarsen_rejects_non_divisor():
    path = sample_noise(make_time_grid(1.0, 6), 1, 0, 0)
    with pytest.raises(InvalidArgument):
        coarsen(path, 4)
    with pytest.raises(InvalidArgument):
        coarsen(path, 0)


@given(
    j=st.integers(0, 6),
    i=st.integers(0, 6),
    seed=st.integers(0, 2**32),
    M=st.integers(1, 3),
)
@settings(max_examples=40, deadline=None)
def test_nested_dyadic_coarsening_is_bit_exact(j, i, seed, M):
    N = 2 ** (j + i)
    path = sample_noise(make_time_grid(1.0, N), M, seed, 0)
    once = coarsen(path, 2 ** (j + i))
    twice = coarsen(coarsen(path, 2**j), 2**i)
    np.testing.assert_array_equal(once.increments, twice.increments)


@given(factor=st.sampled_from([1, 2, 3, 4, 6, 12]), seed=st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_coarse_increments_are_block_sums(factor, seed):
    fine = sample_noise(make_time_grid(1.0, 24), 2, seed, 1).increments
    coarse = coarsen_increments(fine, factor)
    blocks = fine.reshape(2, 24 // factor, factor).sum(axis=-1)
    np.testing.assert_allclose(coarse, blocks, rtol=0, atol=1e-15)
    # the total increment over [0, T] is kept
    assert coarse.sum(axis=-1) == pytest.approx(fine.sum(axis=-1), abs=1e-14)


@pytest.mark.parametrize("k", [1, 2])
def test_truncation_defect_decays_at_the_expected_rate(k):
    taus = [2.0**-j for j in range(4, 13)]
    stats = [truncation_defect(t, TruncationLevel(k), 20000, seed=5) for t in taus]
    slope = np.polyfit(np.log(taus), np.log([s.rms for s in stats]), 1)[0]
    assert slope >= (1 + k) / 2 - 0.1
    for s in stats:
        assert -4 * s.defect_stderr <= s.second_moment_defect <= s.bound + 4 * s.defect_stderr


def test_truncation_defect_matches_plain_sampling():
    # at a coarse step the tail is common enough for plain sampling to see it
    tau, level = 2.0**-2, TruncationLevel(1)
    z = np.random.default_rng(3).standard_normal(400000)
    dw = math.sqrt(tau) * z
    plain = np.mean((dw - truncate_increments(dw, tau, level)) ** 2)
    est = truncation_defect(tau, level, 200000, seed=1)
    assert est.rms**2 == pytest.approx(plain, rel=0.05)
