import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conformal_sde.analysis import (
    TestFunction,
    casimir_norm_bound,
    dyadic_factor,
    fit_order,
    fit_order_with_error,
    invariant_drift,
    strong_error,
    strong_errors,
    weak_error,
    weak_errors,
)
from conformal_sde.discrete_gradient import Hamiltonian
from conformal_sde.errors import InsufficientData, InvalidArgument
from conformal_sde.integrators import SolverConfig, integrate_path
from conformal_sde.models import PoissonSystem
from conformal_sde.noise import TruncationLevel, make_time_grid, sample_noise

from conftest import LOTKA_VOLTERRA_Y0, PENDULUM_Y0, RIGID_BODY_Y0, model

LADDER = [2.0**-k for k in range(3, 7)]
K2 = SolverConfig(truncation=TruncationLevel(2))


# ------------------------------------------------------------ fitting


@given(C=st.floats(1e-3, 1e3), q=st.sampled_from([0.5, 1.0, 2.0]))
def test_fit_order_recovers_exact_power_laws(C, q):
    taus = [2.0**-k for k in range(2, 10)]
    assert fit_order(taus, [C * t**q for t in taus]) == pytest.approx(q, abs=1e-12)


def test_fit_order_with_jitter():
    rng = np.random.default_rng(7)
    taus = np.array([2.0**-k for k in range(3, 11)])
    for q in (0.5, 1.0):
        errs = 0.3 * taus**q * (1 + 0.05 * rng.uniform(-1, 1, taus.size))
        assert abs(fit_order(taus, errs) - q) <= 0.05


def test_fit_order_drops_zeros_with_warning():
    taus = [0.5, 0.25, 0.125, 0.0625]
    with pytest.warns(UserWarning):
        assert fit_order(taus, [0.5, 0.25, 0.0, 0.0625]) == pytest.approx(1.0)
    with pytest.raises(InsufficientData), warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fit_order(taus, [0.5, 0.0, 0.0, 0.1])
    with pytest.raises(InsufficientData):
        fit_order([0.5, 0.25], [0.1, 0.05])


def test_slope_width_propagation():
    taus = [2.0**-k for k in range(4)]
    errs = [t for t in taus]
    _, width = fit_order_with_error(taus, errs, [0.0] * 4)
    assert width == 0.0
    # equal relative stderr s at every level: width = s / ln 2 / sqrt(sum xc^2)
    _, width = fit_order_with_error(taus, errs, [0.01 * e for e in errs])
    assert width == pytest.approx(0.01 / math.log(2) / math.sqrt(5.0), rel=1e-12)


def test_dyadic_factor():
    assert dyadic_factor(2.0**-5, 2.0**-13) == 256
    assert dyadic_factor(0.1, 0.1) == 1
    for bad in (0.3, 2.0**-14):
        with pytest.raises(InvalidArgument):
            dyadic_factor(bad, 2.0**-13)


def test_test_function_ids_and_values():
    y = np.array([[0.3, -0.4, 1.2]])
    assert TestFunction.parse("sin_1").id == "sin_1"
    assert TestFunction("square", 3)(y)[0] == pytest.approx(1.44)
    assert TestFunction("coordinate", 2)(y)[0] == -0.4
    assert TestFunction("cos", 1)(y)[0] == pytest.approx(math.cos(0.3))
    for bad in ("tan_1", "sin", "sin_x"):
        with pytest.raises(InvalidArgument):
            TestFunction.parse(bad)
    with pytest.raises(InvalidArgument):
        TestFunction("sin", 0)


# ------------------------------------------------------------ estimators


def _identity_system():
    zero = Hamiltonian(value=lambda y: np.zeros(y.shape[:-1]), gradient=np.zeros_like, quadratic=True,
                       gradient_matrix=np.zeros((2, 2)))
    return PoissonSystem("identity", 2, lambda y: np.array([[0.0, 1.0], [-1.0, 0.0]]), [zero, zero])


def test_identity_dynamics_have_zero_error():
    tables = strong_errors(_identity_system(), ["conformal_exp", "euler_maruyama", "midpoint"],
                           LADDER, 2.0**-8, 20, 1.0, [0.3, 0.4], seed=0)
    for table in tables.values():
        assert table.errors == [0.0] * len(LADDER)
        assert math.isnan(table.fitted_slope)


def test_reference_level_has_zero_error():
    rb = model("rigid_body")
    ladder = [2.0**-4, 2.0**-5, 2.0**-6]
    strong = strong_error(rb, "conformal_exp", ladder, 2.0**-6, 30, 1.0, RIGID_BODY_Y0, seed=1)
    weak = weak_error(rb, "conformal_exp", ladder, 2.0**-6, 30, 1.0, RIGID_BODY_Y0, TestFunction("sin", 1), 1, K2)
    assert strong.errors[-1] == 0.0
    assert weak.errors[-1] == 0.0
    assert strong.errors[0] > 0


def test_deterministic_weak_error_equals_strong_error():
    # no noise channels: every sample is the same deterministic path
    pend = model("pendulum")
    det = PoissonSystem("det", 2, pend.structure_matrix, pend.hamiltonians[:1], damping=pend.damping)
    strong = strong_error(det, "euler_maruyama", LADDER, 2.0**-9, 4, 1.0, PENDULUM_Y0, seed=0)
    weak = [weak_error(det, "euler_maruyama", LADDER, 2.0**-9, 4, 1.0, PENDULUM_Y0, TestFunction("coordinate", j), 0)
            for j in (1, 2)]
    combined = np.hypot(weak[0].errors, weak[1].errors)
    np.testing.assert_allclose(strong.errors, combined, rtol=1e-12)
    assert all(s == 0.0 for s in weak[0].mc_stderr)


def test_tables_are_well_formed():
    table = strong_error(model("pendulum"), "midpoint", LADDER[::-1], 2.0**-8, 16, 1.0, PENDULUM_Y0, 3, K2)
    assert table.step_sizes == sorted(LADDER, reverse=True)
    assert len(table.errors) == len(table.mc_stderr) == len(table.divergent_samples) == len(LADDER)
    assert table.mode == "strong" and table.system == "pendulum" and table.samples == 16
    assert table.all_valid
    assert table.fitted_slope == pytest.approx(fit_order(table.step_sizes, table.errors))


def test_estimator_is_independent_of_chunks_and_threads():
    rb = model("rigid_body")
    args = (rb, ["conformal_exp", "midpoint"], LADDER, 2.0**-8, 40, 1.0, RIGID_BODY_Y0)
    base = strong_errors(*args, seed=5)
    for kw in ({"chunk_size": 7}, {"chunk_size": 9, "threads": 3}, {"chunk_size": 40, "threads": 2}):
        other = strong_errors(*args, seed=5, **kw)
        for s in base:
            assert other[s].errors == base[s].errors
            assert other[s].mc_stderr == base[s].mc_stderr
    tfs = [TestFunction("sin", 1), TestFunction("square", 2)]
    w1 = weak_errors(*args, test_functions=tfs, seed=5, cfg=K2)
    w2 = weak_errors(*args, test_functions=tfs, seed=5, cfg=K2, chunk_size=6, threads=4)
    for key in w1:
        assert w1[key].errors == w2[key].errors


def test_sup_norm_dominates_final_time_error():
    pend = model("pendulum")
    final = strong_error(pend, "euler_maruyama", LADDER, 2.0**-8, 30, 1.0, PENDULUM_Y0, 2, K2)
    sup = strong_error(pend, "euler_maruyama", LADDER, 2.0**-8, 30, 1.0, PENDULUM_Y0, 2, K2, sup_norm=True)
    assert all(s >= f for s, f in zip(sup.errors, final.errors))


def test_divergent_samples_invalidate_a_level():
    # explicit steps near the boundary of the orthant leave it on some paths
    table = strong_error(model("lotka_volterra"), "euler_maruyama", [2.0**-2, 2.0**-3, 2.0**-4], 2.0**-6,
                         50, 1.0, LOTKA_VOLTERRA_Y0, 0)
    assert table.divergent_samples == [3, 1, 0]
    assert table.valid == [False, False, True]
    assert math.isnan(table.errors[0]) and math.isnan(table.errors[1])
    assert table.errors[2] > 0


def test_pendulum_orders_at_small_scale():
    tables = strong_errors(model("pendulum"), ["conformal_exp", "euler_maruyama"],
                           [2.0**-k for k in range(4, 9)], 2.0**-11, 60, 1.0, PENDULUM_Y0, 1, K2)
    assert tables["conformal_exp"].fitted_slope == pytest.approx(1.0, abs=0.2)
    assert tables["euler_maruyama"].fitted_slope < tables["conformal_exp"].fitted_slope


def test_slope_is_stable_when_samples_double():
    ladder = [2.0**-k for k in range(4, 9)]
    pend = model("pendulum")
    a = strong_error(pend, "conformal_exp", ladder, 2.0**-10, 50, 1.0, PENDULUM_Y0, 9, K2)
    b = strong_error(pend, "conformal_exp", ladder, 2.0**-10, 100, 1.0, PENDULUM_Y0, 9, K2)
    assert abs(a.fitted_slope - b.fitted_slope) <= 3 * math.hypot(a.slope_stderr, b.slope_stderr)


def test_input_validation():
    pend = model("pendulum")
    with pytest.raises(InvalidArgument):
        strong_error(pend, "conformal_exp", [0.3, 0.15], 2.0**-5, 4, 1.0, PENDULUM_Y0, 0)
    with pytest.raises(InvalidArgument):
        strong_error(pend, "leapfrog", LADDER, 2.0**-8, 4, 1.0, PENDULUM_Y0, 0)
    with pytest.raises(InvalidArgument):
        strong_error(pend, "conformal_exp", LADDER, 2.0**-8, 0, 1.0, PENDULUM_Y0, 0)
    with pytest.raises(InvalidArgument):
        weak_error(pend, "conformal_exp", LADDER, 2.0**-8, 4, 1.0, PENDULUM_Y0, TestFunction("sin", 3), 0)


# ------------------------------------------------------------ invariant audits


def _rigid_body_path(scheme, **overrides):
    rb = model("rigid_body", **overrides)
    grid = make_time_grid(10.0, 100)
    return rb, integrate_path(rb, scheme, grid, sample_noise(grid, 3, 21, 0), RIGID_BODY_Y0)


def test_conformal_casimir_drift_is_tiny():
    rb, traj = _rigid_body_path("conformal_exp")
    assert invariant_drift(traj, rb.invariants[0], rb) <= 1e-9


def test_undamped_casimir_is_constant():
    rb, traj = _rigid_body_path("conformal_exp", damping="none")
    assert invariant_drift(traj, rb.invariants[0], rb) <= 1e-10


def test_euler_maruyama_breaks_the_casimir_law():
    rb, traj = _rigid_body_path("euler_maruyama")
    assert invariant_drift(traj, rb.invariants[0], rb) >= 1e-3


def test_lotka_volterra_energy_drift():
    lv = model("lotka_volterra")
    grid = make_time_grid(2.0, 200)
    traj = integrate_path(lv, "conformal_exp", grid, sample_noise(grid, 1, 4, 0), LOTKA_VOLTERRA_Y0, K2)
    assert invariant_drift(traj, lv.invariants[0], lv) <= 1e-8


def test_tables_report_path_norm_maxima():
    rb = model("rigid_body")
    table = strong_error(rb, "conformal_exp", LADDER, 2.0**-8, 20, 1.0, RIGID_BODY_Y0, seed=2)
    bound = casimir_norm_bound(rb, rb.invariants[0], RIGID_BODY_Y0, 1.0)
    assert len(table.max_norm) == len(LADDER)
    assert max(table.max_norm + [table.reference_max_norm]) <= bound
    assert min(table.max_norm) >= 1.0 - 1e-12  # |y0| = 1 is included


def test_casimir_norm_bound_value():
    rb = model("rigid_body")
    bound = casimir_norm_bound(rb, rb.invariants[0], RIGID_BODY_Y0, 1.0)
    # |gamma| = gamma on [0, 1] since cos 2t > 0 up to pi/4, then flips sign
    expected = math.exp(0.25 * math.sin(math.pi / 2) * 2 - 0.25 * math.sin(2.0))
    assert bound == pytest.approx(expected, rel=1e-10)
    with pytest.raises(InvalidArgument):
        lv = model("lotka_volterra")
        casimir_norm_bound(lv, lv.invariants[0], LOTKA_VOLTERRA_Y0, 1.0)
