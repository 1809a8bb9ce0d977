"""Batched Monte-Carlo evaluation of compiled sequences on a lattice.

Atoms are simulated as a flat batch of (shot, site) elements.  Static noise
(amplitude, per-atom detuning, per-beam shift factors) comes from the
shot's realization; scattering, T2' dephasing and leakage out of the qubit
are sampled as decoherence events that randomize the readout.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import dynamics as dyn
from .compiler import PulseSequence
from .dynamics import TWO_PI, Event
from .lattice import LatticeConfig, stage_shift_matrix
from .noise import NoiseConfig, ShotRealization, apply_spam, sample_shot, spam_detect_probability, t2_decay_factor


@dataclass
class SimResult:
    shot: np.ndarray  # position of the element's shot in the shot list
    site: np.ndarray  # lattice site index
    p1_coherent: np.ndarray  # |1> probability of the coherent part
    p1: np.ndarray  # |1> probability given sampled decoherence
    p_bright: np.ndarray  # expected bright-count probability with SPAM
    bright: np.ndarray  # sampled counts
    decohered: np.ndarray
    leak: np.ndarray
    exposure: np.ndarray  # kHz * s of aux shift under light
    p_dec: np.ndarray  # probability of a decoherence event (scatter, T2', leak)


def beam_ids(seq: PulseSequence) -> list[str]:
    return sorted({b.beam_id for beams in seq.scenes.values() for b in beams})


def realizations(noise: NoiseConfig, seed: int, shot_indices: Sequence, n_sites: int,
                 ids: Sequence[str]) -> list[ShotRealization]:
    return [sample_shot(noise, seed, s, n_sites, ids) for s in shot_indices]


def element_shifts(seq: PulseSequence, lattice: LatticeConfig, reals: Sequence[ShotRealization],
                   shot: np.ndarray, site: np.ndarray) -> dict:
    """Per-element aux shift (Hz) for every stage key."""
    pts = lattice.positions()
    out = {}
    memo: dict = {}
    for key, beams in seq.scenes.items():
        sig = tuple(beams)
        if sig in memo:
            out[key] = memo[sig]
            continue
        fac = {b.beam_id: np.array([r.f_factor.get(b.beam_id, 1.0) for r in reals]) for b in beams}
        M = stage_shift_matrix(beams, pts, seq.f, seq.k, fac,
                               lattice.spacing, lattice.neighbor_leakage)
        M = np.broadcast_to(M, (len(reals), pts.shape[0]))
        out[key] = memo[sig] = M[shot, site]
    return out


def exposure_khz_s(events: Sequence[Event], shifts: dict, n: int) -> np.ndarray:
    e = np.zeros(n)
    for ev in events:
        if ev.stage_key is not None and ev.kind in ("light", "address"):
            e = e + ev.light_dose * shifts.get(ev.stage_key, 0.0) / 1e3
    return e


def tail_events(tail: PulseSequence, frame: float) -> list[Event]:
    """Events of a resonant-only tail, shifted into the main frame."""
    out = []
    for ev in tail.events:
        if ev.kind not in ("qubit", "frame"):
            raise ValueError("tails may only hold resonant pulses")
        out.append(Event(ev.kind, ev.start, ev.duration, ev.pulse, ev.frame_phase + frame, role=ev.role))
    return out


def simulate(seq: PulseSequence, lattice: LatticeConfig, noise: NoiseConfig, seed: int,
             shot_indices: Sequence, sites_per_shot: Sequence[Sequence[int]], psi0=(0.0, 1.0, 0.0),
             tails: Sequence[PulseSequence] | None = None, tol: float = dyn.INTEGRATOR_TOL) -> list[SimResult]:
    """Run a sequence (optionally followed by alternative tails) for a batch of shots.

    sites_per_shot lists, for each shot, the lattice site indices to evolve
    (usually the occupied ones).  Returns one SimResult per tail (or one for
    the bare sequence).  Shot-level randomness depends only on (seed, shot
    index), so results do not depend on how shots are grouped.
    """
    n_sites = lattice.n_sites
    reals = realizations(noise, seed, shot_indices, n_sites, beam_ids(seq))
    shot = np.concatenate([np.full(len(s), i, dtype=int) for i, s in enumerate(sites_per_shot)]) \
        if len(sites_per_shot) else np.zeros(0, dtype=int)
    site = np.concatenate([np.asarray(s, dtype=int) for s in sites_per_shot]) \
        if len(sites_per_shot) else np.zeros(0, dtype=int)
    n = shot.size
    amp = np.array([r.amplitude_factor for r in reals])[shot] if n else np.zeros(0)
    qd = TWO_PI * np.array([r.atom_detuning for r in reals]).reshape(len(reals), n_sites)[shot, site] \
        if n else np.zeros(0)
    shifts = element_shifts(seq, lattice, reals, shot, site) if n else {}
    psi0 = np.broadcast_to(np.asarray(psi0, dtype=complex), (n, 3))
    psi, leak = dyn.run_events(seq.events, psi0, seq.delta, shifts, qd, amp, tol, return_leak=True)
    exposure = exposure_khz_s(seq.events, shifts, n)
    p_sc = np.clip(noise.scattering_coeff * exposure, 0.0, 1.0)
    finals = []
    if tails:
        for tl in tails:
            tev = tail_events(tl, seq.frame_ledger)
            finals.append((dyn.run_events(tev, psi, seq.delta, None, qd, amp, tol), tl.duration))
    else:
        finals.append((psi, 0.0))

    rng_pairs = [r.rngs() for r in reals]
    # decoherence is drawn once per element and shared by all tails
    u = np.empty(n)
    for i, (sc, _) in enumerate(rng_pairs):
        m = shot == i
        u[m] = sc.random(int(m.sum()))
    results = []
    for k, (psi_f, t_tail) in enumerate(finals):
        elapsed = seq.duration + t_tail
        p_t2 = 1.0 - t2_decay_factor(elapsed, noise)
        p_dec = 1.0 - (1.0 - p_sc) * (1.0 - p_t2) * (1.0 - np.clip(leak, 0.0, 1.0))
        dec = u < p_dec
        norm = np.maximum(1.0 - leak, 1e-300)
        p1c = np.clip(np.abs(psi_f[:, 1]) ** 2 / norm, 0.0, 1.0)
        p1 = np.where(dec, 0.5, p1c)
        p_bright = spam_detect_probability(p1, noise)
        bright = np.zeros(n, dtype=bool)
        for i, (_, sp) in enumerate(rng_pairs):
            m = shot == i
            # each tail gets its own measurement draws
            sub = np.random.default_rng(sp.integers(2 ** 63) + k) if k else sp
            bright[m] = apply_spam(p1[m], noise, sub)
        results.append(SimResult(shot, site, p1c, p1, p_bright, bright, dec, leak, exposure, p_dec))
    return results


def class_means(values: np.ndarray, shot: np.ndarray, mask: np.ndarray, n_shots: int) -> tuple[float, float, int]:
    """Mean over selected elements and standard error from per-shot means."""
    sel = values[mask]
    if sel.size == 0:
        return float("nan"), float("nan"), 0
    per = np.array([values[mask & (shot == i)].mean() for i in range(n_shots) if np.any(mask & (shot == i))])
    se = float(per.std(ddof=1) / np.sqrt(per.size)) if per.size > 1 else 0.0
    return float(sel.mean()), se, int(sel.size)


def site_operators(seq: PulseSequence, lattice: LatticeConfig, sites: Sequence[int],
                   tol: float = dyn.INTEGRATOR_TOL) -> np.ndarray:
    """Noiseless qubit-subspace operators (n, 2, 2) for the given site indices.

    Aux amplitude is projected out after each addressing pulse, so the
    blocks are unitary up to the (small) leaked norm.
    """
    sites = np.asarray(sites, dtype=int)
    pts = lattice.positions()[sites]
    memo: dict = {}
    shifts = {}
    for key, beams in seq.scenes.items():
        if tuple(beams) not in memo:
            memo[tuple(beams)] = stage_shift_matrix(beams, pts, seq.f, seq.k, None, lattice.spacing,
                                                    lattice.neighbor_leakage)
        shifts[key] = memo[tuple(beams)]
    n = sites.size
    cols = []
    for j in range(2):
        psi0 = np.zeros((n, 3), dtype=complex)
        psi0[:, j] = 1.0
        cols.append(dyn.run_events(seq.events, psi0, seq.delta, shifts, 0.0, 1.0, tol))
    U = np.stack([c[:, :2] for c in cols], axis=-1)  # U[:, i, j]
    return U


def unitary_part(U: np.ndarray) -> np.ndarray:
    """Closest unitary (polar factor) of each (2, 2) block."""
    A, _, Bh = np.linalg.svd(U)
    return A @ Bh


def rotation_angle(U: np.ndarray) -> np.ndarray:
    """Rotation angle of the unitary part of (n, 2, 2) operators, ignoring global phase.

    For W = e^{ig}(cos(a/2) - i sin(a/2) n.sigma), |W00 + W11| / 2 gives
    cos(a/2) and sqrt(|W00 - W11|^2 / 4 + |W01|^2) gives sin(a/2); atan2
    keeps full precision near a = 0.
    """
    W = unitary_part(U)
    c = np.abs(W[:, 0, 0] + W[:, 1, 1]) / 2
    s = np.sqrt(np.abs(W[:, 0, 0] - W[:, 1, 1]) ** 2 / 4 + np.abs(W[:, 0, 1]) ** 2)
    return 2 * np.arctan2(s, c)


def z_phase(U: np.ndarray) -> np.ndarray:
    """Relative phase arg(U11 / U00) of (n, 2, 2) operators."""
    return np.angle(U[:, 1, 1] / U[:, 0, 0])
