from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.special import lambertw

from drflex import stability
from drflex.defaults import default_model, rack_loop
from drflex.model import DelaySystem, PIParams, assemble_full_system, assemble_inner_loop
from drflex.stability import (
    ConvergenceError,
    char_residual,
    chebyshev_diff_matrix,
    chebyshev_grid,
    discretize,
    interpolation_row,
    parameter_sweep,
    stability_index,
    write_sweep_csv,
)

FP_FLOOR = 1e-13


def scalar_delay(a: float, tau: float = 1.0) -> DelaySystem:
    """x' = -a x(t - tau)."""
    return DelaySystem.build([[0.0]], [([[-a]], tau)])


def newton_root(lam: complex, a: float = 1.0) -> complex:
    # lambda + a exp(-lambda) = 0
    for _ in range(60):
        f = lam + a * np.exp(-lam)
        lam -= f / (1.0 - a * np.exp(-lam))
    return lam


HAYES = complex(lambertw(-1.0, 0))


def test_oracles_agree_on_hayes_root():
    for start in (0.5j, -0.3 + 1.0j, 1.0 + 2.0j):
        assert newton_root(start) == pytest.approx(HAYES, abs=1e-14)
    assert HAYES.real == pytest.approx(-0.31813, abs=1e-5)
    assert HAYES.imag == pytest.approx(1.33724, abs=1e-5)


# ---------------------------------------------------------------- grid

def test_grid_three_points():
    np.testing.assert_allclose(chebyshev_grid(2, 4.0).nodes, [-4.0, -2.0, 0.0], atol=1e-15)


def test_grid_five_points():
    r = math.sqrt(2) / 2
    np.testing.assert_allclose(chebyshev_grid(4, 2.0).nodes, [-2.0, -1.0 - r, -1.0, -1.0 + r, 0.0], atol=1e-15)


@given(N=st.integers(2, 60), tau=st.floats(1e-3, 100.0))
def test_grid_endpoints_and_cosine_law(N, tau):
    g = chebyshev_grid(N, tau)
    assert g.n_points == N + 1
    assert g.nodes[0] == -tau and g.nodes[-1] == 0.0
    assert np.all(np.diff(g.nodes) > 0)
    k = np.arange(N + 1)
    np.testing.assert_allclose(g.nodes, (np.cos((N - k) * np.pi / N) - 1.0) * tau / 2.0, atol=1e-12 * tau)


@pytest.mark.parametrize("N,tau", [(1, 1.0), (2.5, 1.0), (4, 0.0), (4, -1.0), (4, math.inf)])
def test_grid_rejects_bad_input(N, tau):
    with pytest.raises(ValueError):
        chebyshev_grid(N, tau)


# ---------------------------------------------------------------- differentiation

def test_diff_matrix_on_constants_and_identity():
    g = chebyshev_grid(10, 3.0)
    D = chebyshev_diff_matrix(g)
    np.testing.assert_allclose(D @ np.ones(11), 0.0, atol=1e-12)
    np.testing.assert_allclose(D @ g.nodes, 1.0, atol=1e-12)


@pytest.mark.parametrize("N", [4, 8, 12])
def test_diff_matrix_exact_on_top_degree_monomial(N):
    g = chebyshev_grid(N, 1.0)
    D = chebyshev_diff_matrix(g)
    exact = N * g.nodes ** (N - 1)
    np.testing.assert_allclose(D @ g.nodes ** N, exact, rtol=1e-10, atol=1e-10 * np.abs(exact).max())


def test_interpolation_row_reproduces_polynomials_and_nodes():
    g = chebyshev_grid(8, 2.0)
    row = interpolation_row(g, -0.77)
    assert row.sum() == pytest.approx(1.0, abs=1e-14)
    assert row @ g.nodes ** 5 == pytest.approx((-0.77) ** 5, abs=1e-12)
    on = interpolation_row(g, g.nodes[3])
    assert on[3] == 1.0 and np.count_nonzero(on) == 1


# ---------------------------------------------------------------- discretization

def test_discretization_dimension():
    sys = assemble_full_system(default_model())
    assert discretize(sys, 12).a_n.shape == (10 * 13, 10 * 13)


def test_ode_embedding():
    disc = discretize(DelaySystem.build([[-2.0]]), 20)
    eigs = np.linalg.eigvals(disc.a_n)
    assert eigs.real.max() == pytest.approx(-2.0, abs=1e-10)


def test_modes_identical_for_on_node_delays():
    # N even: -1 is the midpoint node of [-2, 0]
    sys = DelaySystem.build([[-0.5, 0.1], [0.0, -1.0]],
                            [(np.array([[-0.3, 0.0], [0.2, -0.1]]), 1.0), (np.array([[0.0, 0.1], [0.0, -0.2]]), 2.0)])
    a = discretize(sys, 10, "nearest_node").a_n
    b = discretize(sys, 10, "interpolation_row").a_n
    np.testing.assert_array_equal(a, b)
    ra = stability_index(sys, 10, mode="nearest_node")
    rb = stability_index(sys, 10, mode="interpolation_row")
    assert abs(ra.index - rb.index) < 1e-6


def test_nearest_node_refuses_far_delay():
    sys = DelaySystem.build([[-1.0]], [([[-0.1]], 2.0), ([[-0.1]], 0.6)])
    with pytest.raises(ValueError, match="nearest node"):
        discretize(sys, 4, "nearest_node")
    discretize(sys, 4, "interpolation_row")


def test_unknown_mode_rejected():
    with pytest.raises(ValueError):
        discretize(scalar_delay(1.0), 8, "cubic")


# ---------------------------------------------------------------- stability index

def test_hayes_index():
    rep = stability_index(scalar_delay(1.0), 20)
    assert rep.converged
    assert rep.index == pytest.approx(HAYES.real, abs=1e-10)
    assert rep.rightmost.imag == pytest.approx(HAYES.imag, abs=1e-10)


def test_spectral_convergence_on_hayes():
    errs = [abs(stability_index(scalar_delay(1.0), N, refine=False).rightmost - HAYES) for N in (8, 12, 16, 20)]
    for a, b in zip(errs, errs[1:]):
        assert b <= max(a, FP_FLOOR)
    assert errs[-1] < 1e-8


def test_analytic_boundary():
    assert abs(stability_index(scalar_delay(math.pi / 2)).index) < 1e-6


def test_ode_index():
    assert stability_index(DelaySystem.build([[-2.0]])).index == pytest.approx(-2.0, abs=1e-10)


def test_converged_eigenvalues_have_small_residuals():
    sys = assemble_full_system(default_model())
    rep = stability_index(sys)
    assert rep.converged
    scale = 1.0 + sys.matrix_norm_sum()
    top = int(np.argmax(rep.refined.real))
    assert rep.residuals[top] < 1e-8 * scale
    assert rep.index == max(e.real for e in rep.all_eigs)


def test_spectrum_is_conjugate_symmetric():
    sys = assemble_full_system(default_model())
    eigs = stability_index(sys, 12, refine=False).all_eigs
    np.testing.assert_allclose(np.sort_complex(eigs), np.sort_complex(eigs.conj()), atol=1e-8)


def test_strict_mode_reports_failed_refinement(monkeypatch):
    monkeypatch.setattr(stability, "refine_root", lambda sys, lam, tol, maxiter=50: (lam, False))
    rep = stability_index(scalar_delay(1.0))
    assert not rep.converged
    with pytest.raises(ConvergenceError):
        stability_index(scalar_delay(1.0), strict=True)


# ---------------------------------------------------------------- residual

def test_residual_at_ode_eigenvalue():
    a0 = np.array([[-1.0, 2.0], [0.0, -3.0]])
    sys = DelaySystem.build(a0)
    for lam in np.linalg.eigvals(a0):
        assert char_residual(sys, lam) <= 1e-12


def test_residual_near_and_far_from_spectrum():
    sys = scalar_delay(1.0)
    assert char_residual(sys, -0.3181 + 1.3372j) < 1e-4
    assert char_residual(sys, 10.0) > 1e-7


# ---------------------------------------------------------------- sweeps

def _rack_builder(kp, ki):
    return assemble_inner_loop(rack_loop(kp, ki))


def test_single_point_sweep_matches_index():
    v = parameter_sweep(_rack_builder, [0.2], [0.05])
    assert v.shape == (1, 1)
    assert v[0, 0] == stability_index(_rack_builder(0.2, 0.05)).index


def test_rack_index_increases_with_ki():
    v = parameter_sweep(_rack_builder, [0.2], [0.2, 0.4, 0.8])[:, 0]
    assert v[0] < v[1] < v[2]


def test_outer_loop_crossing_exists():
    model = default_model()
    build = lambda kp, ki: assemble_full_system(model.with_outer(PIParams(kp, ki)))
    v = parameter_sweep(build, [0.15], [0.05, 1.0])[:, 0]
    assert v[0] < 0 < v[1]


def test_sweep_parallel_is_bit_identical():
    kp, ki = [0.1, 0.2, 0.3], [0.05, 0.1]
    a = parameter_sweep(_rack_builder, kp, ki, jobs=1)
    b = parameter_sweep(_rack_builder, kp, ki, jobs=3)
    assert a.tobytes() == b.tobytes()


def test_sweep_reports_failing_point():
    def bad(kp, ki):
        if ki > 0.1:
            raise ValueError("boom")
        return _rack_builder(kp, ki)

    with pytest.raises(RuntimeError, match=r"kp=0\.2, ki=0\.2"):
        parameter_sweep(bad, [0.2], [0.1, 0.2])


def test_sweep_validates_grids_and_metric():
    with pytest.raises(ValueError):
        parameter_sweep(_rack_builder, [0.2, 0.1], [0.05])
    with pytest.raises(ValueError):
        parameter_sweep(_rack_builder, [], [0.05])
    with pytest.raises(ValueError):
        parameter_sweep(_rack_builder, [0.2], [0.05], metric="bogus")


def test_sweep_h2_metric_and_csv(tmp_path):
    v = parameter_sweep(_rack_builder, [0.2, 0.3], [0.05], metric="h2")
    assert np.all(np.isfinite(v)) and np.all(v > 0)
    path = tmp_path / "s.csv"
    write_sweep_csv(path, [0.2, 0.3], [0.05, 0.1], np.array([[1.0, 2.0], [3.0, math.inf]]))
    lines = path.read_text().splitlines()
    assert lines[0] == "kp,ki,value"
    assert lines[1:] == ["0.200000,0.050000,1.000000", "0.300000,0.050000,2.000000",
                         "0.200000,0.100000,3.000000", "0.300000,0.100000,inf"]
