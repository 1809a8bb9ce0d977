"""Single-atom dynamics for targeted phase gates.

Each atom has three levels: the qubit states |0>, |1> and an auxiliary
level |aux> that the addressing light shifts.  Everything is expressed in
the rotating frame of the microwaves.  Internally all rates are angular
(rad/s); configuration-facing values are in Hz.

Conventions
-----------
* Bloch north pole is |0>.  R_n(a) = exp(-i a n.sigma / 2).
* A resonant pulse with phase phi rotates about (cos phi, sin phi, 0).
* In the addressing frame the aux level sits at energy -(delta - shift),
  so a blue-detuned drive pushes |0> up by Omega^2 / (4 Delta) and the
  qubit phase arg(a1 / a0) grows by the same amount.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import optimize

TWO_PI = 2.0 * math.pi
BLACKMAN = (0.42, 0.5, 0.08)
INTEGRATOR_TOL = 1e-10


class Envelope(str, enum.Enum):
    BLACKMAN = "blackman"
    RECTANGULAR = "rectangular"


class PulseKind(str, enum.Enum):
    QUBIT = "qubit"  # couples |0> <-> |1>
    ADDRESS = "address"  # couples |0> <-> |aux>


def blackman_amplitude(t, T: float):
    """Blackman window with unit peak, defined on [0, T]."""
    t = np.asarray(t, dtype=float)
    if T <= 0:
        raise ValueError("pulse duration must be positive")
    if np.any(t < -1e-12 * T) or np.any(t > T * (1 + 1e-12)):
        raise ValueError("t outside [0, T]")
    a0, a1, a2 = BLACKMAN
    x = TWO_PI * t / T
    out = a0 - a1 * np.cos(x) + a2 * np.cos(2 * x)
    return out if out.ndim else float(out)


def envelope_value(env: Envelope, t, T: float):
    if env == Envelope.BLACKMAN:
        return blackman_amplitude(t, T)
    t = np.asarray(t, dtype=float)
    return np.ones_like(t) if t.ndim else 1.0


def area_fraction(env: Envelope) -> float:
    """Time average of the envelope (pulse area per peak-Rabi * T)."""
    return BLACKMAN[0] if env == Envelope.BLACKMAN else 1.0


def power_fraction(env: Envelope) -> float:
    """Time average of the squared envelope."""
    if env == Envelope.BLACKMAN:
        a0, a1, a2 = BLACKMAN
        return a0 ** 2 + 0.5 * a1 ** 2 + 0.5 * a2 ** 2
    return 1.0


def pi_pulse_peak_rabi(T: float, env: Envelope = Envelope.BLACKMAN) -> float:
    """Peak Rabi frequency (rad/s) giving pulse area pi over duration T."""
    if T <= 0:
        raise ValueError("pulse duration must be positive")
    return math.pi / (area_fraction(env) * T)


def rabi_for_area(area: float, T: float, env: Envelope = Envelope.BLACKMAN) -> float:
    return abs(area) / (area_fraction(env) * T)


# ---------------------------------------------------------------------------
# Domain types


@dataclass(frozen=True)
class AtomState:
    amp0: complex
    amp1: complex
    amp_aux: complex = 0j
    lost: bool = False
    decohered: bool = False

    @classmethod
    def ground(cls) -> "AtomState":
        return cls(1 + 0j, 0j)

    @classmethod
    def excited(cls) -> "AtomState":
        return cls(0j, 1 + 0j)

    @classmethod
    def plus(cls) -> "AtomState":
        s = 1 / math.sqrt(2)
        return cls(s + 0j, s + 0j)

    @classmethod
    def from_vector(cls, v, lost=False, decohered=False) -> "AtomState":
        v = np.asarray(v, dtype=complex)
        return cls(complex(v[0]), complex(v[1]), complex(v[2]), lost, decohered)

    def vector(self) -> np.ndarray:
        return np.array([self.amp0, self.amp1, self.amp_aux], dtype=complex)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.vector()))

    def population(self, level: int) -> float:
        return float(abs(self.vector()[level]) ** 2)


@dataclass(frozen=True)
class Pulse:
    """One shaped microwave pulse.

    ``detuning`` is the qubit detuning for QUBIT pulses and the detuning
    delta from the unshifted aux resonance for ADDRESS pulses (rad/s).
    """

    kind: PulseKind
    duration: float
    peak_rabi: float
    phase: float = 0.0
    detuning: float = 0.0
    envelope: Envelope = Envelope.BLACKMAN

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError("pulse duration must be positive")
        if self.peak_rabi < 0:
            raise ValueError("peak Rabi frequency must be non-negative")

    @property
    def area(self) -> float:
        return self.peak_rabi * area_fraction(self.envelope) * self.duration

    def with_phase(self, phase: float) -> "Pulse":
        return replace(self, phase=phase)


@dataclass(frozen=True)
class PhaseGateParams:
    """Operating parameters of the phase gate.

    f and delta in Hz, omega (peak Rabi of the addressing microwave) in
    rad/s, T in seconds.
    """

    f: float
    k: float = 1.8
    delta: float = 74.9e3
    omega: float = 0.0
    T: float = 120e-6

    def __post_init__(self):
        if not self.k > 1:
            raise ValueError("cross ratio k must exceed 1")
        if not self.f > 0:
            raise ValueError("line shift f must be positive")
        if self.T <= 0:
            raise ValueError("pulse duration must be positive")

    @property
    def on_branch(self) -> bool:
        return self.f < self.delta < self.k * self.f

    def shift_of(self, cls: str) -> float:
        return {"cross": self.k * self.f, "line": self.f, "spectator": 0.0}[cls]


# ---------------------------------------------------------------------------
# Two-level propagator (batched 4th-order Magnus, closed-form SU(2) steps)


def _compose(a2, b2, a1, b1):
    """SU(2) product (later 2) * (earlier 1) in (a, b) form."""
    return a2 * a1 - np.conj(b2) * b1, b2 * a1 + np.conj(a2) * b1


def _reduce_steps(a, b):
    """Ordered product over axis 0 by pairwise tree reduction."""
    while a.shape[0] > 1:
        if a.shape[0] % 2:
            # fold the last step into its predecessor to keep pairs aligned
            a_last, b_last = _compose(a[-1], b[-1], a[-2], b[-2])
            a = np.concatenate([a[:-2], a_last[None]])
            b = np.concatenate([b[:-2], b_last[None]])
            if a.shape[0] == 1:
                break
        a, b = _compose(a[1::2], b[1::2], a[0::2], b[0::2])
    return a[0], b[0]


def _magnus_su2(rabi, det_a, det_b, T, env: Envelope, n: int, block: int = 256):
    """Propagator of H = [[det_a, rabi b(t)/2], [rabi b(t)/2, det_b]].

    Returns (a, b, g) with U = g * [[a, -conj(b)], [b, conj(a)]].  Arrays
    broadcast over any batch shape.  The drive phase is zero here; other
    phases follow by diagonal conjugation.  Steps are exponentiated in
    closed form and multiplied by tree reduction in blocks.
    """
    rabi = np.asarray(rabi, dtype=float)
    det_a = np.asarray(det_a, dtype=float)
    det_b = np.asarray(det_b, dtype=float)
    shape = np.broadcast(rabi, det_a, det_b).shape
    c = 0.5 * (det_a + det_b)
    vz = np.broadcast_to(0.5 * (det_a - det_b), shape)
    half_rabi = 0.5 * np.broadcast_to(rabi, shape)
    h = T / n
    g1 = 0.5 - math.sqrt(3) / 6
    g2 = 0.5 + math.sqrt(3) / 6
    k3 = math.sqrt(3) / 6 * h * h
    wz = h * vz
    size = max(1, int(np.prod(shape)))
    block = max(1, min(n, max(block, (1 << 18) // size)))
    a = np.ones(shape, dtype=complex)
    b = np.zeros(shape, dtype=complex)
    ext = (slice(None),) + (None,) * len(shape)
    for j0 in range(0, n, block):
        steps = (np.arange(j0, min(n, j0 + block)) * h)
        e1 = envelope_value(env, steps + g1 * h, T)[ext]
        e2 = envelope_value(env, steps + g2 * h, T)[ext]
        wx = 0.5 * h * half_rabi * (e1 + e2)
        # commutator term: -(sqrt3/6) h^2 (v1 x v2); only the y part survives
        wy = -k3 * vz * half_rabi * (e2 - e1)
        nrm = np.sqrt(wx * wx + wy * wy + wz * wz)
        sinc = np.sinc(nrm / math.pi)
        sa = np.cos(nrm) - 1j * sinc * wz
        sb = -1j * sinc * (wx + 1j * wy)
        ra, rb = _reduce_steps(sa, sb)
        a, b = _compose(ra, rb, a, b)
    g = np.exp(-1j * c * T)
    return a, b, g


def two_level_propagator(rabi, det_a, det_b, T, env=Envelope.BLACKMAN, tol=INTEGRATOR_TOL,
                         n0: int = 64, n_max: int = 1 << 16):
    """Converged 2x2 propagator via step halving.

    Accepts the finer solution once halving the step changes no matrix
    element by more than ``tol``.  Returns an array of shape (..., 2, 2).
    """
    if env == Envelope.RECTANGULAR:
        a, b, g = _magnus_su2(rabi, det_a, det_b, T, env, 1)  # constant Hamiltonian: one step is exact
    else:
        # settle the step count on the most demanding atoms, then run the batch once
        rabi, det_a, det_b = np.broadcast_arrays(np.asarray(rabi, float), np.asarray(det_a, float),
                                                 np.asarray(det_b, float))
        dd = np.abs(det_a - det_b)
        probes = {int(np.argmax(np.abs(rabi))), int(np.argmax(dd)), int(np.argmax(np.abs(rabi) + dd))} \
            if rabi.size else set()
        n = max((_probe_steps(_round_up(abs(rabi.flat[i])), _round_up(dd.flat[i]), T, env.value, tol, n0, n_max)
                 for i in probes), default=n0)
        a, b, g = _magnus_su2(rabi, det_a, det_b, T, env, n)
    U = np.empty(np.shape(a) + (2, 2), dtype=complex)
    U[..., 0, 0] = g * a
    U[..., 0, 1] = -g * np.conj(b)
    U[..., 1, 0] = g * b
    U[..., 1, 1] = g * np.conj(a)
    return U


def _round_up(x: float) -> float:
    """Round up to two significant digits so nearby atoms share a step count."""
    if x <= 1e-6:
        return 0.0 if x <= 0 else 1e-6
    e = math.floor(math.log10(x)) - 1
    return math.ceil(x / 10 ** e) * 10 ** e


@lru_cache(maxsize=8192)
def _probe_steps(rabi: float, dd: float, T: float, env: str, tol: float, n0: int, n_max: int) -> int:
    # only the Rabi rate and the level splitting matter for convergence
    return _converged_steps(rabi, 0.5 * dd, -0.5 * dd, T, Envelope(env), tol, n0, n_max)


def _converged_steps(rabi, det_a, det_b, T, env, tol, n0, n_max) -> int:
    """Smallest power-of-two step count whose halving changes U by <= tol."""
    rate = float(np.max(np.abs(rabi)) + np.max(np.abs(np.asarray(det_a) - det_b))) if np.size(rabi) else 0.0
    n = max(n0, int(2 ** math.ceil(math.log2(max(1.0, rate * T / 2.0)))))
    prev = _magnus_su2(rabi, det_a, det_b, T, env, n)
    while n < n_max:
        n *= 2
        cur = _magnus_su2(rabi, det_a, det_b, T, env, n)
        err = max(np.max(np.abs(cur[0] - prev[0]), initial=0.0),
                  np.max(np.abs(cur[1] - prev[1]), initial=0.0))
        if err <= tol:
            break
        prev = cur
    return n


@lru_cache(maxsize=4096)
def _scalar_propagator(rabi, det_a, det_b, T, env, tol):
    return two_level_propagator(rabi, det_a, det_b, T, Envelope(env), tol)


def _drive_phase(U2, phase):
    """Apply the drive phase by conjugation with diag(1, e^{i phase})."""
    phase = np.asarray(phase, dtype=float)
    out = U2.copy()
    e = np.exp(1j * phase)
    out[..., 0, 1] = U2[..., 0, 1] * np.conj(e)
    out[..., 1, 0] = U2[..., 1, 0] * e
    return out


def pulse_unitary(pulse: Pulse, aux_detuning=0.0, frame_phase=0.0, qubit_detuning=0.0,
                  amplitude=1.0, tol: float = INTEGRATOR_TOL) -> np.ndarray:
    """Full 3x3 propagator of one pulse, batched over array arguments.

    aux_detuning: (delta - shift) in rad/s, used for the addressing coupling
    and for the free phase of |aux> during qubit pulses.
    qubit_detuning: static qubit detuning in rad/s (adds to pulse.detuning
    for QUBIT pulses).
    amplitude: multiplicative Rabi factor (amplitude noise).
    """
    aux_detuning = np.asarray(aux_detuning, dtype=float)
    qd = np.asarray(qubit_detuning, dtype=float)
    rabi = pulse.peak_rabi * np.asarray(amplitude, dtype=float)
    T = pulse.duration
    if pulse.kind == PulseKind.QUBIT:
        qd = qd + pulse.detuning
        det_a, det_b = 0.5 * qd, -0.5 * qd
        phase = pulse.phase - np.asarray(frame_phase, dtype=float)
        idx = (0, 1)
        other = 2
        other_phase = np.exp(1j * aux_detuning * T)
    else:
        det_a, det_b = 0.5 * qd, -aux_detuning
        phase = np.asarray(pulse.phase, dtype=float)
        idx = (0, 2)
        other = 1
        other_phase = np.exp(0.5j * qd * T)
    shape = np.broadcast(rabi, det_a, det_b, phase, other_phase).shape
    if shape == ():
        U2 = _scalar_propagator(float(rabi), float(det_a), float(det_b), T, pulse.envelope.value, tol)
    else:
        U2 = two_level_propagator(np.broadcast_to(rabi, shape), np.broadcast_to(det_a, shape),
                                  np.broadcast_to(det_b, shape), T, pulse.envelope, tol)
    U2 = _drive_phase(U2, phase)
    U = np.zeros(shape + (3, 3), dtype=complex)
    i, j = idx
    U[..., i, i] = U2[..., 0, 0]
    U[..., i, j] = U2[..., 0, 1]
    U[..., j, i] = U2[..., 1, 0]
    U[..., j, j] = U2[..., 1, 1]
    U[..., other, other] = np.broadcast_to(other_phase, shape)
    return U


def free_unitary(duration: float, aux_phase=0.0, qubit_detuning=0.0) -> np.ndarray:
    """Diagonal propagator for a dark interval.

    aux_phase is the accumulated integral of the aux detuning (rad).
    """
    aux_phase = np.asarray(aux_phase, dtype=float)
    qd = np.asarray(qubit_detuning, dtype=float)
    shape = np.broadcast(aux_phase, qd).shape
    U = np.zeros(shape + (3, 3), dtype=complex)
    U[..., 0, 0] = np.exp(-0.5j * qd * duration)
    U[..., 1, 1] = np.exp(0.5j * qd * duration)
    U[..., 2, 2] = np.exp(1j * aux_phase)
    return U


def evolve(state: AtomState, pulse: Pulse, aux_detuning: float = 0.0, frame_phase: float = 0.0,
           qubit_detuning: float = 0.0) -> AtomState:
    """Advance one atom through one pulse."""
    if state.lost:
        return state
    if abs(state.norm - 1.0) > 1e-9:
        raise ValueError("input state is not normalized")
    U = pulse_unitary(pulse, aux_detuning, frame_phase, qubit_detuning)
    return AtomState.from_vector(U @ state.vector(), state.lost, state.decohered)


def wrap_phase(x):
    """Wrap to (-pi, pi]."""
    x = np.asarray(x, dtype=float)
    out = math.pi - np.mod(math.pi - x, TWO_PI)
    return out if out.ndim else float(out)


def differential_phase(before: AtomState, after: AtomState) -> float:
    """Change of arg(a1 / a0), wrapped to (-pi, pi]."""
    for s in (before, after):
        if abs(s.amp0) < 1e-12 or abs(s.amp1) < 1e-12:
            raise ValueError("undefined phase: zero qubit amplitude")
    return wrap_phase(np.angle(after.amp1 / after.amp0) - np.angle(before.amp1 / before.amp0))


# ---------------------------------------------------------------------------
# Perturbative model


def eq1_bracket(u, k: float = 1.8):
    """Dimensionless bracket 1/(u-k) - 2/(u-1) + 1/u with u = delta / f."""
    u = np.asarray(u, dtype=float)
    if np.any(np.isclose(u, 0.0)) or np.any(np.isclose(u, 1.0)) or np.any(np.isclose(u, k)):
        raise ValueError("detuning sits on a resonance pole")
    return 1 / (u - k) - 2 / (u - 1) + 1 / u


def eq1_phase(p: PhaseGateParams, C: float = 0.25, env: Envelope = Envelope.BLACKMAN) -> float:
    """Second-order target phase summed over the four stages.

    Omega^2 T is taken as the envelope-integrated value omega^2 * <b^2> * T,
    frequencies are converted to angular units.
    """
    for d in (p.delta, p.delta - p.f, p.delta - p.k * p.f):
        if abs(d) < 1e-9 * max(1.0, abs(p.delta)):
            raise ValueError("detuning sits on a resonance pole")
    w = TWO_PI
    s = 1 / (w * (p.delta - p.k * p.f)) - 2 / (w * (p.delta - p.f)) + 1 / (w * p.delta)
    return C * p.omega ** 2 * power_fraction(env) * p.T * s


def perturbative_extremum(k: float = 1.8) -> float:
    """u* = delta*/f where the bracket is stationary on (1, k)."""
    if not k > 1:
        raise ValueError("k must exceed 1")
    g = lambda u: -1 / (u - k) ** 2 + 2 / (u - 1) ** 2 - 1 / u ** 2
    eps = 1e-9 * (k - 1)
    return float(optimize.brentq(g, 1 + eps, k - eps, xtol=1e-14))


def phase_error_to_fidelity(dphi) -> float:
    """Gate error sin^2(dphi / 2) of a pure phase error."""
    dphi = np.asarray(dphi, dtype=float)
    if np.any(np.abs(dphi) > math.pi + 1e-12):
        raise ValueError("|dphi| must not exceed pi")
    out = np.sin(dphi / 2) ** 2
    return out if out.ndim else float(out)


def phase_error_squared(dphi) -> float:
    """Alternative convention dphi^2 (small-angle error without the 1/4)."""
    dphi = np.asarray(dphi, dtype=float)
    out = dphi ** 2
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# Timed event sequences


@dataclass(frozen=True)
class StageTiming:
    """Per-stage light and microwave timing (seconds)."""

    ramp: float = 62e-6
    settle: float = 70e-6
    t_address: float = 120e-6
    t_pi: float = 80e-6

    @property
    def window(self) -> float:
        return 2 * self.ramp + self.settle + self.t_address

    @property
    def full_power(self) -> float:
        """Effective full-power light time per stage."""
        return self.ramp + self.settle + self.t_address

    @property
    def stage(self) -> float:
        return self.window + self.t_pi


@dataclass(frozen=True)
class Event:
    """One entry of a timed sequence.

    kind: "qubit", "address", "light" (addressing light without microwave)
    or "delay" (dark, zero light).  ``stage_key`` names the beam
    configuration active during light/address events.  ``light`` is the
    (start, end) fractional light level, linear in between.
    """

    kind: str
    start: float
    duration: float
    pulse: Pulse | None = None
    frame_phase: float = 0.0
    stage_key: str | None = None
    light: tuple[float, float] = (0.0, 0.0)
    role: str = ""
    gate: int = -1
    axis: str = ""
    ideal: Mapping[str, float] | None = None

    @property
    def end(self) -> float:
        return self.start + self.duration

    @property
    def light_dose(self) -> float:
        """Time integral of the light level (seconds at full power)."""
        return 0.5 * (self.light[0] + self.light[1]) * self.duration


def stage_events(stage_key: str, address: Pulse | None, timing: StageTiming, t0: float,
                 gate: int = -1, ideal=None) -> list[Event]:
    """Light ramp, settle, addressing pulse and ramp down for one stage."""
    ev = []
    t = t0
    ev.append(Event("light", t, timing.ramp, stage_key=stage_key, light=(0.0, 1.0), role="ramp", gate=gate))
    t += timing.ramp
    ev.append(Event("light", t, timing.settle, stage_key=stage_key, light=(1.0, 1.0), role="settle", gate=gate))
    t += timing.settle
    if address is not None and address.peak_rabi > 0:
        ev.append(Event("address", t, timing.t_address, pulse=address, stage_key=stage_key,
                        light=(1.0, 1.0), role="address", gate=gate, ideal=ideal))
    else:
        ev.append(Event("light", t, timing.t_address, stage_key=stage_key, light=(1.0, 1.0),
                        role="address", gate=gate, ideal=ideal))
    t += timing.t_address
    ev.append(Event("light", t, timing.ramp, stage_key=stage_key, light=(1.0, 0.0), role="ramp", gate=gate))
    return ev


AXIS_PHASE = {"x": 0.0, "y": math.pi / 2, "-x": math.pi, "-y": -math.pi / 2}


def echo_pulse(axis: str, timing: StageTiming) -> Pulse:
    return Pulse(PulseKind.QUBIT, timing.t_pi, pi_pulse_peak_rabi(timing.t_pi), AXIS_PHASE[axis])


def run_events(events: Sequence[Event], psi0, delta_hz: float,
               shifts_hz: Mapping[str, np.ndarray] | None = None,
               qubit_detuning=0.0, amplitude=1.0, tol: float = INTEGRATOR_TOL,
               coherent_aux: bool = False, return_leak: bool = False):
    """Propagate a batch of atoms through a timed event list.

    psi0: (..., 3) initial amplitudes.  shifts_hz maps each stage_key to the
    per-atom aux shift (Hz, broadcastable to the batch) during that stage's
    light; stages not present give zero shift.  qubit_detuning in rad/s and
    amplitude factors broadcast over the batch.  Propagators are computed
    once per distinct (pulse, shift array) and reused, so stage keys that map
    to the same array object share work.

    Unless coherent_aux is set, amplitude left in |aux> after an addressing
    pulse is removed and booked as leaked probability: the shifted aux level
    dephases between stages, so it never interferes back into the qubit.
    """
    psi = np.array(psi0, dtype=complex)
    batch = psi.shape[:-1]
    shifts_hz = shifts_hz or {}
    qd = np.broadcast_to(np.asarray(qubit_detuning, dtype=float), batch)
    amp = np.broadcast_to(np.asarray(amplitude, dtype=float), batch)
    delta = TWO_PI * delta_hz
    zero = np.zeros(batch)
    leak = np.zeros(batch)
    cache: dict = {}

    def shift_of(key):
        return shifts_hz.get(key, zero) if key is not None else zero

    def aux_det(key):
        return delta - TWO_PI * np.broadcast_to(np.asarray(shift_of(key), dtype=float), batch)

    for ev in events:
        if ev.duration == 0:
            continue
        if ev.kind == "qubit":
            base = ev.pulse.with_phase(0.0)
            ck = ("q", base)
            if ck not in cache:
                cache[ck] = pulse_unitary(base, delta, 0.0, qd, amp, tol)
            U = _drive_phase3(cache[ck], ev.pulse.phase - ev.frame_phase, (0, 1))
        elif ev.kind == "address":
            # stages sharing one shift array (same beams) share the propagator
            ck = ("a", ev.pulse, id(shift_of(ev.stage_key)))
            if ck not in cache:
                cache[ck] = pulse_unitary(ev.pulse, aux_det(ev.stage_key), 0.0, qd, amp, tol)
            U = cache[ck]
        else:
            lvl = 0.5 * (ev.light[0] + ev.light[1]) if ev.kind == "light" else 0.0
            ck = ("f", ev.duration, lvl, id(shift_of(ev.stage_key)) if lvl else None)
            if ck not in cache:
                shift = delta - aux_det(ev.stage_key) if lvl else zero
                cache[ck] = free_unitary(ev.duration, (delta - lvl * shift) * ev.duration, qd)
            U = cache[ck]
        psi = np.einsum("...ij,...j->...i", U, psi)
        if ev.kind == "address" and not coherent_aux:
            leak = leak + np.abs(psi[..., 2]) ** 2
            psi[..., 2] = 0.0
    return (psi, leak) if return_leak else psi


def _drive_phase3(U, phase, idx):
    i, j = idx
    e = np.exp(1j * np.asarray(phase, dtype=float))
    out = U.copy()
    out[..., i, j] = U[..., i, j] * np.conj(e)
    out[..., j, i] = U[..., j, i] * e
    return out


def sequence_unitary(events: Sequence[Event], delta_hz: float, shifts_hz=None, qubit_detuning=0.0,
                     amplitude=1.0, coherent_aux: bool = False) -> np.ndarray:
    """3x3 transfer matrix of an event list for one atom.

    Unitary when coherent_aux is set; otherwise the aux column and row are
    projected out after every addressing pulse.
    """
    cols = run_events(events, np.eye(3, dtype=complex), delta_hz,
                      {k: np.asarray(v) for k, v in (shifts_hz or {}).items()},
                      qubit_detuning, amplitude, coherent_aux=coherent_aux)
    return cols.T


# ---------------------------------------------------------------------------
# Exact gate phase


NATIVE_ORDER = ("crossA", "dummyX", "crossB", "dummyY")
FLIPPED_ORDER = ("dummyX", "crossA", "dummyY", "crossB")
# Class of target A under each beam configuration.
TARGET_A_CLASS = {"crossA": "cross", "dummyX": "line", "crossB": "spectator", "dummyY": "line"}
ECHO_CYCLE = ("y", "y", "-y", "-y")


def gate_events(p: PhaseGateParams, timing: StageTiming = StageTiming(), order=NATIVE_ORDER,
                echo_axes=ECHO_CYCLE, t0: float = 0.0) -> list[Event]:
    """Bare four-stage phase-gate timeline (no global pi/2 pulses)."""
    if timing.t_address != p.T:
        timing = replace(timing, t_address=p.T)
    address = Pulse(PulseKind.ADDRESS, p.T, p.omega, 0.0, TWO_PI * p.delta)
    ev: list[Event] = []
    t = t0
    for key, ax in zip(order, echo_axes):
        ev += stage_events(key, address, timing, t)
        t += timing.window
        ev.append(Event("qubit", t, timing.t_pi, pulse=echo_pulse(ax, timing), role="echo", axis=ax))
        t += timing.t_pi
    return ev


def class_shifts(p: PhaseGateParams, schedule: Mapping[str, str]) -> dict:
    return {key: np.asarray(p.shift_of(cls)) for key, cls in schedule.items()}


def stage_phase(p: PhaseGateParams, cls: str, qubit_detuning: float = 0.0) -> float:
    """Qubit phase from one addressing pulse on an atom of the given class."""
    pulse = Pulse(PulseKind.ADDRESS, p.T, p.omega, 0.0, TWO_PI * p.delta)
    U = pulse_unitary(pulse, TWO_PI * (p.delta - p.shift_of(cls)), 0.0, qubit_detuning)
    return float(np.angle(U[1, 1] / U[0, 0]))


def stage_transfer(p: PhaseGateParams, cls: str) -> float:
    """Population left in |aux> after one addressing pulse starting from |0>."""
    pulse = Pulse(PulseKind.ADDRESS, p.T, p.omega, 0.0, TWO_PI * p.delta)
    U = pulse_unitary(pulse, TWO_PI * (p.delta - p.shift_of(cls)))
    return float(abs(U[2, 0]) ** 2)


def exact_target_phase(p: PhaseGateParams, sequence=None, class_schedule: Mapping[str, str] | None = None,
                       timing: StageTiming = StageTiming()) -> float:
    """Net differential phase of a target atom through a full gate.

    sequence: event list (or object with ``.events``); defaults to the bare
    native-order gate.  class_schedule maps stage_key to the target's class.
    """
    if p.omega == 0:
        return 0.0
    if sequence is None:
        events = gate_events(p, timing)
    else:
        events = getattr(sequence, "events", sequence)
    schedule = class_schedule or TARGET_A_CLASS
    psi0 = AtomState.plus().vector()
    psi = run_events(events, psi0, p.delta, class_shifts(p, schedule))
    return differential_phase(AtomState.plus(), AtomState.from_vector(psi))


def native_phase_sum(p: PhaseGateParams) -> float:
    """Unwrapped signed sum of single-stage phases (cross - line + spec - line)."""
    return (stage_phase(p, "cross") - 2 * stage_phase(p, "line") + stage_phase(p, "spectator"))


@dataclass(frozen=True)
class OperatingPoint:
    delta: float  # Hz
    u: float  # delta / f
    phase: float  # rad at the extremum
    curvature: float  # rad per (fractional detuning)^2, 0.5 * delta^2 * phi''
    second_derivative: float  # rad / Hz^2


def operating_point(f: float, k: float, omega: float, T: float, timing: StageTiming = StageTiming(),
                    xtol: float = 1e-3) -> OperatingPoint:
    """Extremum of the exact target phase on the branch f < delta < k f.

    The phase runs away at both resonances, so the extremum is the interior
    local maximum of the (unwrapped) phase.  A coarse grid locates it, a
    bounded scalar search refines it and a central second difference gives
    the curvature.
    """
    if not k > 1:
        raise ValueError("k must exceed 1")

    def raw(d):
        return exact_target_phase(PhaseGateParams(f, k, d, omega, T), timing=timing)

    lo, hi = f * (1 + 0.05 * (k - 1)), f * (k - 0.05 * (k - 1))
    grid = np.linspace(lo, hi, 33)
    vals = np.unwrap([raw(d) for d in grid])
    # the phase climbs again towards both poles, so take the interior local
    # maximum nearest the perturbative estimate
    peaks = [j for j in range(1, len(grid) - 1) if vals[j] >= vals[j - 1] and vals[j] >= vals[j + 1]]
    if not peaks:
        raise RuntimeError("no phase extremum inside the bracket")
    guess = perturbative_extremum(k) * f
    i = min(peaks, key=lambda j: abs(grid[j] - guess))
    ref = vals[i]

    def phi(d):
        return ref + wrap_phase(raw(d) - ref)

    res = optimize.minimize_scalar(lambda d: -phi(d), bounds=(grid[i - 1], grid[i + 1]), method="bounded",
                                   options={"xatol": xtol})
    d0 = float(res.x)
    h = 2e-3 * d0
    p0, pp, pm = phi(d0), phi(d0 + h), phi(d0 - h)
    d2 = (pp - 2 * p0 + pm) / h ** 2
    return OperatingPoint(d0, d0 / f, p0, 0.5 * d0 ** 2 * d2, d2)


def solve_omega(p: PhaseGateParams, theta: float, order=NATIVE_ORDER, omega_max: float | None = None,
                timing: StageTiming = StageTiming(), tol: float = 1e-12) -> float:
    """Peak addressing Rabi frequency giving target phase theta for a stage order.

    The sign of theta must match the order's native sign.  Coarse bracket
    on the unwrapped stage sum, then a root find on the full exact phase.
    """
    if theta == 0:
        return 0.0
    sign = 1.0 if order == NATIVE_ORDER else -1.0
    hi = omega_max if omega_max is not None else TWO_PI * 60e3

    def coarse(om):
        return sign * native_phase_sum(replace(p, omega=om)) - theta

    grid = np.linspace(0.0, hi, 41)[1:]
    vals = [coarse(om) for om in grid]
    prev_o, prev_v = 0.0, -theta
    bracket = None
    for om, v in zip(grid, vals):
        if np.sign(v) != np.sign(prev_v):
            bracket = (prev_o, om)
            break
        prev_o, prev_v = om, v
    if bracket is None:
        raise ValueError("target phase unreachable below the Rabi ceiling")
    om0 = optimize.brentq(coarse, *bracket, xtol=1e-9)

    def full(om):
        q = replace(p, omega=om)
        return wrap_phase(exact_target_phase(q, gate_events(q, timing, order), TARGET_A_CLASS, timing) - theta)

    # exact phase differs from the stage sum by leakage corrections; refine
    span = 0.05 * om0
    a, b = max(1e-9, om0 - span), min(hi, om0 + span)
    fa, fb = full(a), full(b)
    while np.sign(fa) == np.sign(fb):
        span *= 2
        a, b = max(1e-9, om0 - span), min(hi, om0 + span)
        fa, fb = full(a), full(b)
        if span > om0:
            raise ValueError("could not bracket the exact phase root")
    return float(optimize.brentq(full, a, b, xtol=tol * om0, rtol=1e-14))
