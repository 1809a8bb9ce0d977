import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from phasegate import dynamics as dyn
from phasegate.compiler import DEFAULT_F

TWO_PI = dyn.TWO_PI
FAST = settings(max_examples=25, deadline=None)


def _unitarity(U):
    return np.max(np.abs(U.conj().T @ U - np.eye(U.shape[-1])))


@FAST
@given(st.floats(0.0, 30e3), st.floats(-200e3, 200e3), st.floats(-3.0, 3.0))
def test_address_pulse_is_unitary(rabi_hz, aux_det_hz, frame):
    p = dyn.Pulse(dyn.PulseKind.ADDRESS, 120e-6, TWO_PI * rabi_hz, 0.0, TWO_PI * 74.9e3)
    U = dyn.pulse_unitary(p, TWO_PI * aux_det_hz, frame)
    assert U.shape == (3, 3)
    assert _unitarity(U) < 1e-9


@FAST
@given(st.floats(0.1, 3.0), st.floats(-math.pi, math.pi), st.floats(-2e3, 2e3))
def test_qubit_pulse_is_unitary(area, phase, det_hz):
    T = 80e-6
    p = dyn.Pulse(dyn.PulseKind.QUBIT, T, dyn.rabi_for_area(area, T), phase, TWO_PI * det_hz)
    assert _unitarity(dyn.pulse_unitary(p)) < 1e-9


@FAST
@given(st.floats(-math.pi, math.pi), st.floats(-math.pi, math.pi))
def test_frame_shift_is_linear(a, b):
    # a frame phase rotates the drive axis: R(phi + a) = Rz(a) R(phi) Rz(-a)
    T = 80e-6
    p = dyn.Pulse(dyn.PulseKind.QUBIT, T, dyn.pi_pulse_peak_rabi(T), b)
    U = dyn.pulse_unitary(p)[:2, :2]
    Ua = dyn.pulse_unitary(p.with_phase(b + a))[:2, :2]
    rz = np.diag([1.0, np.exp(1j * a)])
    assert np.allclose(Ua, rz @ U @ rz.conj().T, atol=1e-9)


def test_pi_pulse_flips():
    T = 80e-6
    p = dyn.Pulse(dyn.PulseKind.QUBIT, T, dyn.pi_pulse_peak_rabi(T))
    U = dyn.pulse_unitary(p)
    assert abs(U[1, 0]) ** 2 == pytest.approx(1.0, abs=1e-10)


def test_blackman_fractions():
    t = np.linspace(0, 1, 200001)
    w = dyn.blackman_amplitude(t, 1.0)
    assert np.trapezoid(w, t) == pytest.approx(dyn.area_fraction(dyn.Envelope.BLACKMAN), abs=1e-8)
    assert np.trapezoid(w ** 2, t) == pytest.approx(dyn.power_fraction(dyn.Envelope.BLACKMAN), abs=1e-8)
    assert dyn.area_fraction(dyn.Envelope.BLACKMAN) == pytest.approx(0.42)


def test_integrator_converges_with_tolerance():
    p = dyn.PhaseGateParams(DEFAULT_F, 1.8, 74.9e3, TWO_PI * 8e3, 120e-6)
    a = dyn.exact_target_phase(p)
    tight = dyn.two_level_propagator(TWO_PI * 8e3, 0.0, TWO_PI * 24e3, 120e-6, tol=1e-12)
    loose = dyn.two_level_propagator(TWO_PI * 8e3, 0.0, TWO_PI * 24e3, 120e-6, tol=1e-6)
    assert np.max(np.abs(tight - loose)) < 1e-5
    assert np.isfinite(a)


def test_state_norm_preserved_through_gate():
    p = dyn.PhaseGateParams(DEFAULT_F, 1.8, 74.9e3, TWO_PI * 5e3, 120e-6)
    ev = dyn.gate_events(p)
    psi0 = dyn.AtomState.plus().vector()
    shifts = dyn.class_shifts(p, dyn.TARGET_A_CLASS)
    psi = dyn.run_events(ev, psi0, p.delta, shifts, coherent_aux=True)
    assert np.linalg.norm(psi) == pytest.approx(1.0, abs=1e-9)


def test_incoherent_aux_books_leak():
    p = dyn.PhaseGateParams(DEFAULT_F, 1.8, 74.9e3, TWO_PI * 10e3, 120e-6)
    ev = dyn.gate_events(p)
    psi0 = np.array([1, 0, 0], dtype=complex)
    psi, leak = dyn.run_events(ev, psi0, p.delta, dyn.class_shifts(p, dyn.TARGET_A_CLASS), return_leak=True)
    assert float(leak) > 0
    assert np.linalg.norm(psi) ** 2 + float(leak) == pytest.approx(1.0, abs=1e-9)


def test_perturbative_extremum_value():
    # closed-form bracket maximum, independent of the integrator
    u = np.linspace(1.01, 1.79, 200001)
    v = dyn.eq1_bracket(u, 1.8)
    assert dyn.perturbative_extremum(1.8) == pytest.approx(u[np.argmax(v)], abs=1e-4)
    assert dyn.perturbative_extremum(1.8) == pytest.approx(1.463, abs=0.005)


@pytest.mark.parametrize("om_khz", [0.5, 1.0, 2.0, 4.0])
@pytest.mark.parametrize("d_khz", [-300, -150, 200, 300, 450])
def test_perturbative_matches_exact_far_from_poles(om_khz, d_khz):
    p = dyn.PhaseGateParams(DEFAULT_F, 1.8, d_khz * 1e3, TWO_PI * om_khz * 1e3, 120e-6)
    assert dyn.eq1_phase(p) / dyn.exact_target_phase(p) == pytest.approx(1.0, abs=0.05)


@pytest.mark.xfail(strict=True, reason="finite pulse bandwidth: the 120 us Blackman spectrum is about 25 kHz "
                                       "wide, so on the branch between the resonances the second-order phase "
                                       "misses the exact one by 6-21 % even at ten linewidths of margin")
def test_perturbative_matches_exact_on_branch():
    f = DEFAULT_F
    worst = 0.0
    for u in np.linspace(1.25, 1.55, 7):
        d = u * f
        om = min(d - f, 1.8 * f - d) / 10
        p = dyn.PhaseGateParams(f, 1.8, d, TWO_PI * om, 120e-6)
        worst = max(worst, abs(dyn.eq1_phase(p) / dyn.exact_target_phase(p) - 1))
    assert worst < 0.05


def test_phase_scales_with_power():
    p1 = dyn.PhaseGateParams(DEFAULT_F, 1.8, 300e3, TWO_PI * 1e3, 120e-6)
    p2 = dyn.PhaseGateParams(DEFAULT_F, 1.8, 300e3, TWO_PI * 2e3, 120e-6)
    assert dyn.exact_target_phase(p2) / dyn.exact_target_phase(p1) == pytest.approx(4.0, rel=1e-3)


def test_operating_point_default_calibration():
    # the extremum moves with power; the default f is set at the Rz(pi/2) gate power
    from phasegate import compiler as cp

    om = cp.addressing_omega(cp.compile_rz([(1, 1, 1), (3, 3, 3)], math.pi / 2))
    op = dyn.operating_point(DEFAULT_F, 1.8, om, 120e-6)
    assert op.delta == pytest.approx(74.9e3, abs=100.0)
    assert op.curvature < 0
    low = dyn.operating_point(DEFAULT_F, 1.8, TWO_PI * 5e3, 120e-6)
    assert low.delta < op.delta


@pytest.mark.parametrize("theta", [-math.pi / 2, math.pi / 3])
def test_solve_omega_hits_theta(theta):
    # on the branch the native order gives a negative phase, the flipped order a positive one
    p = dyn.PhaseGateParams(DEFAULT_F, 1.8, 74.9e3, 0.0, 120e-6)
    order = dyn.NATIVE_ORDER if theta < 0 else dyn.FLIPPED_ORDER
    om = dyn.solve_omega(p, theta, order)
    q = dyn.PhaseGateParams(DEFAULT_F, 1.8, 74.9e3, om, 120e-6)
    got = dyn.exact_target_phase(q, dyn.gate_events(q, order=order))
    assert dyn.wrap_phase(got - theta) == pytest.approx(0.0, abs=1e-9)


def test_phase_error_fidelity_relation():
    assert dyn.phase_error_to_fidelity(0.0) == 0.0
    assert dyn.phase_error_to_fidelity(1e-2) == pytest.approx(math.sin(5e-3) ** 2, rel=1e-12)
    assert dyn.phase_error_squared(1e-2) == pytest.approx(1e-4)


@given(st.floats(-50.0, 50.0))
def test_wrap_phase_range(x):
    w = float(dyn.wrap_phase(x))
    assert -math.pi - 1e-12 <= w <= math.pi + 1e-12
    assert math.cos(w) == pytest.approx(math.cos(x), abs=1e-9)


def test_params_validation():
    with pytest.raises(ValueError):
        dyn.PhaseGateParams(DEFAULT_F, k=1.0)
    with pytest.raises(ValueError):
        dyn.PhaseGateParams(-1.0)
    with pytest.raises(ValueError):
        dyn.Pulse(dyn.PulseKind.QUBIT, 0.0, 1.0)


def test_blackman_endpoints_and_midpoint():
    assert dyn.blackman_amplitude(0.0, 2.0) == pytest.approx(0.0, abs=1e-15)
    assert dyn.blackman_amplitude(2.0, 2.0) == pytest.approx(0.0, abs=1e-15)
    assert dyn.blackman_amplitude(1.0, 2.0) == pytest.approx(1.0, abs=1e-15)


@FAST
@given(st.floats(-math.pi, math.pi), st.floats(0.2, 3.0))
def test_frame_and_pulse_phase_shift_together_cancel(chi, area):
    T = 80e-6
    p = dyn.Pulse(dyn.PulseKind.QUBIT, T, dyn.rabi_for_area(area, T), 0.3)
    U = dyn.pulse_unitary(p)
    V = dyn.pulse_unitary(p.with_phase(0.3 + chi), frame_phase=chi)
    assert np.allclose(np.abs(U) ** 2, np.abs(V) ** 2, atol=1e-12)


@FAST
@given(st.floats(1.2, 4.0), st.floats(10e3, 200e3))
def test_extremum_depends_only_on_k(k, f):
    u = dyn.perturbative_extremum(k)
    assert 1 < u < k
    # the phase maximum over delta sits at u * f whatever f is
    grid = np.linspace(1 + 1e-3 * (k - 1), k - 1e-3 * (k - 1), 4001) * f
    phi = [dyn.eq1_phase(dyn.PhaseGateParams(f, k, d, TWO_PI * 1e3, 120e-6)) for d in grid]
    assert grid[int(np.argmax(phi))] / f == pytest.approx(u, abs=(grid[1] - grid[0]) / f)


def test_step_halving_changes_phase_below_1e9():
    p = dyn.PhaseGateParams(DEFAULT_F, 1.8, 74.9e3, TWO_PI * 14.7e3, 120e-6)
    a = dyn.stage_phase(p, "cross")
    for cls in ("cross", "line"):
        rabi, dd = p.omega, TWO_PI * (p.delta - p.shift_of(cls))
        n = dyn._converged_steps(rabi, 0.0, -dd, p.T, dyn.Envelope.BLACKMAN, dyn.INTEGRATOR_TOL, 64, 1 << 16)
        U1 = dyn.two_level_propagator(rabi, 0.0, -dd, p.T)
        a1, b1, g1 = dyn._magnus_su2(rabi, 0.0, -dd, p.T, dyn.Envelope.BLACKMAN, 2 * n)
        ph = np.angle(g1 * a1) - np.angle(U1[0, 0])
        assert abs(dyn.wrap_phase(ph)) < 1e-9
    assert np.isfinite(a)


@FAST
@given(st.complex_numbers(max_magnitude=1.0), st.complex_numbers(max_magnitude=1.0))
def test_atom_state_norm_after_pulse(a, b):
    v = np.array([a, b, 0.0], dtype=complex)
    n = np.linalg.norm(v)
    if n < 1e-6:
        return
    s = dyn.AtomState.from_vector(v / n)
    p = dyn.Pulse(dyn.PulseKind.ADDRESS, 120e-6, TWO_PI * 14.7e3, 0.0, TWO_PI * 74.9e3)
    out = dyn.AtomState.from_vector(dyn.pulse_unitary(p, TWO_PI * 20e3) @ s.vector())
    assert out.norm == pytest.approx(1.0, abs=1e-10)
