from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from drflex.analysis import margins_from_response
from drflex.defaults import default_model, rack_loop
from drflex.model import (
    DelaySystem,
    DelayTerm,
    FFPIParams,
    FirstOrderPlant,
    GroupModel,
    PIParams,
    TwoLevelModel,
    assemble_full_system,
    assemble_inner_loop,
    assemble_open_loop,
    inner_loop_frequency_response,
    open_loop_frequency_response,
)
from drflex.stability import stability_index
from drflex.testbed.dde import simulate_dde


def _group(name="g", h=1.0, T=1.0, tau=0.5, kp=0.5, ki=0.2, alpha=1.0, ff=True, h_nom=None):
    plant = FirstOrderPlant(h, T)
    pi = PIParams(kp, ki)
    ctrl = FFPIParams(pi, T, h if h_nom is None else h_nom) if ff else pi
    return GroupModel(name, plant, tau, ctrl, alpha)


# ---------------------------------------------------------------- validation

@pytest.mark.parametrize("gain,tc", [(1.0, 0.0), (1.0, -1.0), (0.0, 1.0), (math.nan, 1.0), (1.0, math.inf)])
def test_plant_rejects_bad_parameters(gain, tc):
    with pytest.raises(ValueError):
        FirstOrderPlant(gain, tc)


def test_pi_gains_nonnegative():
    with pytest.raises(ValueError):
        PIParams(-0.1, 0.0)
    with pytest.raises(ValueError):
        PIParams(0.1, math.nan)


def test_ffpi_filter_defaults_and_bounds():
    c = FFPIParams(PIParams(1, 1), 3.5, 1.0)
    assert c.t_filter == pytest.approx(0.35)
    with pytest.raises(ValueError):
        FFPIParams(PIParams(1, 1), 1.0, 1.0, t_filter=2.0)
    with pytest.raises(ValueError):
        FFPIParams(PIParams(1, 1), 1.0, 0.0)
    with pytest.raises(ValueError):
        FFPIParams(PIParams(1, 1), -1.0, 1.0)


def test_group_rejects_negative_delay_and_bad_participation():
    with pytest.raises(ValueError):
        _group(tau=-1.0)
    with pytest.raises(ValueError):
        _group(alpha=1.5)


def test_participation_must_sum_to_one():
    with pytest.raises(ValueError):
        TwoLevelModel((_group("a", alpha=0.5), _group("b", alpha=0.4)), PIParams(0.1, 0.1))
    with pytest.raises(ValueError):
        TwoLevelModel((), PIParams(0.1, 0.1))
    TwoLevelModel((_group("a", alpha=0.5), _group("b", alpha=0.5)), PIParams(0.1, 0.1))


def test_delay_system_build_merges_zero_and_equal_delays():
    a0 = [[-1.0]]
    sys = DelaySystem.build(a0, [([[0.5]], 0.0), ([[-0.2]], 1.0), ([[-0.3]], 1.0), ([[0.1]], 2.0)])
    assert sys.a0[0, 0] == pytest.approx(-0.5)
    assert sys.taus == (1.0, 2.0)
    assert sys.terms[0].a[0, 0] == pytest.approx(-0.5)
    assert sys.delay_free()[0, 0] == pytest.approx(-0.9)


def test_delay_system_rejects_bad_shapes_and_delays():
    with pytest.raises(ValueError):
        DelaySystem.build(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        DelaySystem.build(np.zeros((2, 2)), [(np.zeros((3, 3)), 1.0)])
    with pytest.raises(ValueError):
        DelaySystem.build(np.zeros((1, 1)), [(np.zeros((1, 1)), -1.0)])
    with pytest.raises(ValueError):
        DelaySystem.build([[math.inf]])


def test_delay_system_is_immutable():
    sys = DelaySystem.build([[-1.0]], [([[-0.5]], 1.0)])
    with pytest.raises(ValueError):
        sys.a0[0, 0] = 3.0


def test_delay_merging_preserves_spectrum():
    rng = np.random.default_rng(3)
    a0 = rng.normal(size=(3, 3)) - 3 * np.eye(3)
    a1, a2 = rng.normal(size=(3, 3)) * 0.3, rng.normal(size=(3, 3)) * 0.3
    split = DelaySystem.build(a0, [DelayTerm(0.7, a1), DelayTerm(0.7, a2)])
    summed = DelaySystem.build(a0, [DelayTerm(0.7, a1 + a2)])
    r1 = stability_index(split)
    r2 = stability_index(summed)
    assert r1.rightmost == pytest.approx(r2.rightmost, abs=1e-12)
    np.testing.assert_allclose(np.sort_complex(r1.all_eigs), np.sort_complex(r2.all_eigs), atol=1e-9)


# ---------------------------------------------------------------- assembly

def test_full_system_dimension():
    sys = assemble_full_system(default_model())
    assert sys.dim == 10
    assert sys.taus == (1.0, 5.0, 8.0)


def test_groups_sharing_a_delay_are_merged():
    sys = assemble_full_system(default_model().with_common_delay(3.0))
    assert sys.taus == (3.0,)


def test_zero_delay_inner_loop_matches_ode():
    g = _group(tau=0.0)
    sys = assemble_inner_loop(g)
    assert sys.terms == ()
    ode = np.linalg.eigvals(sys.a0)
    assert stability_index(sys).index == pytest.approx(ode.real.max(), abs=1e-9)


def test_delay_free_full_system_matches_polynomial_roots():
    model = default_model().with_common_delay(0.0)
    sys = assemble_full_system(model)
    # oracle: roots of the characteristic polynomial of the delay-free matrix
    roots = np.roots(np.poly(sys.delay_free()))
    rep = stability_index(sys)
    assert rep.index == pytest.approx(roots.real.max(), abs=1e-6)


def test_rack_design_point_stable_and_high_ki_unstable():
    assert stability_index(assemble_inner_loop(rack_loop(0.2, 0.05))).index < 0
    assert stability_index(assemble_inner_loop(rack_loop(0.2, 1.0))).index > 0


@pytest.mark.parametrize("ki,stable", [(0.05, True), (1.0, False)])
def test_rack_stability_agrees_with_loop_phase(ki, stable):
    # independent check: phase of the PI feedback loop at gain crossover
    g = rack_loop(0.2, ki)

    def loop(w):
        s = 1j * w
        return g.controller.response(s) * g.plant.response(s) * np.exp(-s * g.delay)

    rep = margins_from_response(loop, 1e-4, 1e3, 4000)
    assert (rep.phase_margin > 0) == stable


def test_reference_design_point_full_system_stable():
    assert stability_index(assemble_full_system(default_model())).index < 0


# ---------------------------------------------------------------- frequency response

def test_open_loop_state_space_matches_block_diagram():
    model = default_model()
    w = np.logspace(-4, 2, 100)
    block = open_loop_frequency_response(model, w)
    ss = assemble_open_loop(model).freqresp(w)
    rel = np.abs(block - ss) / np.abs(block)
    assert rel.max() < 1e-9


def test_inner_loop_state_space_matches_block_diagram():
    for g in default_model().groups:
        w = np.logspace(-3, 2, 100)
        block = inner_loop_frequency_response(g, w)
        ss = assemble_inner_loop(g).freqresp(w)
        assert (np.abs(block - ss) / np.abs(block)).max() < 1e-9


def test_open_loop_magnitude_grows_at_low_frequency():
    L = np.abs(open_loop_frequency_response(default_model(), [1e-3, 1e-5, 1e-7]))
    assert L[0] < L[1] < L[2]
    assert L[2] > 1e5


def test_open_loop_rejects_nonpositive_frequency():
    with pytest.raises(ValueError):
        open_loop_frequency_response(default_model(), [0.0, 1.0])


def test_delay_is_all_pass_on_feedforward_path():
    # feedback gains off: H = plant * lead * exp(-s tau), so the delay only rotates the phase
    def model(tau):
        g = GroupModel("g", FirstOrderPlant(1.0, 1.0), tau, FFPIParams(PIParams(0.0, 0.0), 1.0, 1.0), 1.0)
        return TwoLevelModel((g,), PIParams(0.3, 0.1))

    w = np.logspace(-2, 1, 50)
    L0 = open_loop_frequency_response(model(0.0), w)
    L1 = open_loop_frequency_response(model(2.5), w)
    np.testing.assert_allclose(np.abs(L1), np.abs(L0), rtol=1e-12)
    dphi = np.angle(L1 / L0)
    np.testing.assert_allclose(dphi, np.angle(np.exp(-1j * w * 2.5)), atol=1e-12)


# ---------------------------------------------------------------- zero steady-state error

def test_full_system_dc_gain_is_one():
    sys = assemble_full_system(default_model())
    assert sys.dc_gain() == pytest.approx(1.0, abs=1e-12)
    assert abs(sys.freqresp([1e-6])[0] - 1.0) < 1e-4


def test_full_system_step_settles_at_target():
    sys = assemble_full_system(default_model())
    tr = simulate_dde(sys, 0.0, 600.0, 0.01, u=1.0, record_every=100)
    assert not tr.diverged
    assert tr.y[-1] == pytest.approx(1.0, abs=1e-4)


def test_characterization_error_has_no_steady_state_effect():
    g = _group(h=1.2, T=5.0, tau=1.0, kp=0.5, ki=0.3, h_nom=1.0)
    assert assemble_inner_loop(g).dc_gain() == pytest.approx(1.0, abs=1e-12)


@given(
    h=st.floats(0.2, 3.0),
    T=st.floats(0.05, 30.0),
    tau=st.floats(0.0, 8.0),
    kp=st.floats(0.0, 2.0),
    ki=st.floats(0.01, 2.0),
    h_nom=st.floats(0.5, 2.0),
    ff=st.booleans(),
)
def test_inner_loop_equilibrium_tracks_reference(h, T, tau, kp, ki, h_nom, ff):
    sys = assemble_inner_loop(_group(h=h, T=T, tau=tau, kp=kp, ki=ki, ff=ff, h_nom=h_nom))
    assert sys.dc_gain() == pytest.approx(1.0, rel=1e-9)


@given(alpha=st.floats(0.05, 0.95), kp=st.floats(0.0, 1.0), ki=st.floats(0.01, 1.0))
def test_two_level_equilibrium_independent_of_gains(alpha, kp, ki):
    model = TwoLevelModel((_group("a", alpha=alpha, tau=1.0), _group("b", T=10.0, tau=3.0, alpha=1.0 - alpha)),
                          PIParams(kp, ki))
    assert assemble_full_system(model).dc_gain() == pytest.approx(1.0, rel=1e-9)
