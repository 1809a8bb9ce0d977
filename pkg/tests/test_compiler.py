import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from phasegate import compiler as cp
from phasegate import dynamics as dyn
from phasegate.lattice import LatticeConfig
from phasegate.simulate import rotation_angle, site_operators, z_phase

LAT = LatticeConfig()
FULL = LAT.full()
PAIR = [(1, 1, 1), (3, 3, 3)]
SLOW = settings(max_examples=20, deadline=None)


@pytest.fixture(scope="module")
def rz_half():
    return cp.compile_rz(PAIR, math.pi / 2)


def _logical(seq, lattice, sites):
    U = site_operators(seq, lattice, sites)
    return np.einsum("ij,njk->nik", cp.rz(seq.frame_ledger), U)


def _nontargets(targets):
    t = {FULL.index(s) for s in targets}
    return np.array([i for i in range(FULL.n_sites) if i not in t])


@SLOW
@given(st.lists(st.floats(-1, 1), min_size=3, max_size=3).filter(lambda v: np.linalg.norm(v) > 1e-3),
       st.floats(-math.pi, math.pi).filter(lambda t: abs(t) > 1e-3))
def test_ideal_unitary_matches_rotation(axis, theta):
    seq = cp.compile_rotation(axis, theta, PAIR)
    assert cp.operator_distance(cp.ideal_unitary(seq, "target"), cp.rotation(axis, theta)) < 1e-8
    assert cp.operator_distance(cp.ideal_unitary(seq, "target_b"), cp.rotation(axis, theta)) < 1e-8


@pytest.mark.parametrize("theta", [0.3, 1.0, 2.0, -2.5])
def test_rx_ry_are_conjugated_rz(theta):
    for axis in ((1, 0, 0), (0, 1, 0)):
        seq = cp.compile_rotation(axis, theta, PAIR)
        assert cp.operator_distance(cp.ideal_unitary(seq), cp.rotation(axis, theta)) < 1e-8
        for role in ("line", "column", "spectator"):
            assert cp.operator_distance(cp.ideal_unitary(seq, role), np.eye(2)) < 1e-8


def test_stage_terms_map_to_signed_classes(rz_half):
    seq = rz_half
    stages = [it for it in seq.items if isinstance(it, cp.Stage)]
    om = cp.addressing_omega(seq)
    p = cp.CompileConfig().params(om)
    phi = {c: dyn.stage_phase(p, c) for c in ("cross", "line", "spectator")}
    order = [s.key for s in stages]
    assert order in (list(dyn.NATIVE_ORDER), list(dyn.FLIPPED_ORDER))
    expected = {"crossA": "cross", "dummyX": "line", "crossB": "spectator", "dummyY": "line"}
    scale = stages[0].ideal["target"] / phi[expected[order[0]]]
    assert scale == pytest.approx(1.0, abs=0.05)
    for s in stages:
        assert s.ideal["target"] == pytest.approx(scale * phi[expected[s.key]], rel=1e-12)
    signs = [1, -1, 1, -1]
    assert sum(sg * s.ideal["target"] for sg, s in zip(signs, stages)) == pytest.approx(math.pi / 2, abs=1e-12)
    for role in ("line", "column", "spectator"):
        assert sum(sg * s.ideal[role] for sg, s in zip(signs, stages)) == pytest.approx(0.0, abs=1e-12)


def test_stage_scenes_follow_dummy_rule(rz_half):
    sc = {k: {b.beam_id for b in v} for k, v in rz_half.scenes.items()}
    ax, ay = "x:z1:y1", "y:z1:x1"
    bx, by = "x:z3:y3", "y:z3:x3"
    assert sc == {"crossA": {ax, ay}, "dummyX": {ax, bx}, "crossB": {bx, by}, "dummyY": {ay, by}}


def test_echo_axes_and_count(rz_half):
    assert rz_half.echo_axes() == list(dyn.ECHO_CYCLE)
    assert dyn.ECHO_CYCLE == ("y", "y", "-y", "-y")


def test_sequence_timing(rz_half):
    t = dyn.StageTiming()
    assert rz_half.duration == pytest.approx(4 * (t.window + t.t_pi), abs=1e-12)
    assert rz_half.duration == pytest.approx(4 * (314e-6 + 80e-6), abs=1e-12)
    ev = rz_half.events
    for a, b in zip(ev, ev[1:]):
        assert b.start >= a.end - 1e-15
    for e in ev:
        if e.kind == "address":
            assert e.stage_key in rz_half.scenes


def test_noiseless_cancellation_full_lattice(rz_half):
    nt = _nontargets(PAIR)
    U = _logical(rz_half, FULL, nt)
    assert np.max(rotation_angle(U)) < 1e-6
    Ut = _logical(rz_half, FULL, [FULL.index(s) for s in PAIR])
    assert np.max(np.abs(dyn.wrap_phase(z_phase(Ut) - math.pi / 2))) < 1e-4


def test_dummy_swap_still_cancels(rz_half):
    s = dict(rz_half.scenes)
    ax, ay = s["crossA"]
    bx, by = s["crossB"]
    swapped = replace(rz_half, scenes={**s, "dummyX": (ay, by), "dummyY": (ax, bx)})
    nt = _nontargets(PAIR)
    assert np.max(rotation_angle(_logical(swapped, FULL, nt))) < 1e-6


def test_frame_pair_insertion_is_invisible():
    prep = cp.global_rotation(-math.pi / 2, math.pi / 2)
    gate = cp.compile_rz(PAIR, math.pi / 3)
    det = cp.global_rotation(0.4, math.pi / 2)
    base = cp.concat(prep, gate, det)
    items = list(base.items)
    sites = [FULL.index(s) for s in PAIR] + [0, 7, 62]
    ref = np.abs(site_operators(base, FULL, sites)) ** 2
    for pos in (1, 4, len(items) - 1):
        new = items[:pos] + [cp.Frame(math.pi), cp.Frame(math.pi)] + items[pos:]
        U = site_operators(replace(base, items=tuple(new)), FULL, sites)
        assert np.max(np.abs(np.abs(U) ** 2 - ref)) < 1e-10


def test_negative_theta_uses_flipped_order():
    pos = cp.compile_rz(PAIR, math.pi / 2)
    neg = cp.compile_rz(PAIR, -math.pi / 2)
    ko = [it.key for it in pos.items if isinstance(it, cp.Stage)]
    kn = [it.key for it in neg.items if isinstance(it, cp.Stage)]
    assert {tuple(ko), tuple(kn)} == {dyn.NATIVE_ORDER, dyn.FLIPPED_ORDER}
    assert cp.operator_distance(cp.ideal_unitary(neg), cp.rz(-math.pi / 2)) < 1e-10


def test_single_target_gets_virtual_partner():
    lat = replace(LAT, occupancy=((2, 2, 2), (0, 0, 0)))
    seq = cp.compile_rz([(2, 2, 2)], math.pi / 2, lattice=lat)
    partner = seq.gates[0].targets[1]
    assert partner not in lat.occupancy
    assert partner[2] != 2


def test_compile_errors():
    with pytest.raises(cp.CompileError):
        cp.compile_rz([(1, 1, 1), (1, 3, 1)], 1.0)
    with pytest.raises(cp.CompileError):
        cp.compile_rz([(1, 1, 1), (1, 1, 1)], 1.0)
    with pytest.raises(cp.CompileError):
        cp.compile_rz([(1, 1, 9)], 1.0)
    with pytest.raises(cp.CompileError):
        cp.compile_rotation((0, 0, 0), 1.0, PAIR)
    with pytest.raises(ValueError):
        cp.GateSpec("TargetRz", targets=((0, 0, 0),) * 3)


def test_transfer_ceiling_blocks_large_angle():
    cfg = cp.CompileConfig(transfer_budget=1e-4)
    with pytest.raises(cp.CompileError):
        cp.compile_rz(PAIR, math.pi / 2, cfg)


@pytest.mark.parametrize("label", cp.PAULI_LABELS)
def test_pauli_ideal(label):
    seq = cp.compile_pauli(label)
    assert cp.operator_distance(cp.ideal_unitary(seq), cp.pauli_matrix(label)) < 1e-12


def _rb_like(pgs, cgs):
    parts = [cp.pg_with_echoes(pgs[0], "pg0")]
    for i, (ax, sg) in enumerate(cgs, 1):
        parts.append(cp.compile_rotation((1, 0, 0) if ax == "x" else (0, 1, 0), sg * math.pi / 2, PAIR,
                                         block=f"cg{i}"))
        parts.append(cp.pg_with_echoes(pgs[i], f"pg{i}"))
    return cp.apply_phase_cycling(cp.concat(*parts))


def test_phase_cycling_pauli_echoes_cycle():
    seq = _rb_like(["X", "Y", "I", "-Z"], [("x", 1), ("y", -1), ("x", -1)])
    pg_axes = [it.axis for it in seq.items if isinstance(it, cp.Echo) and it.role in ("pg_pre", "pg_post")]
    assert pg_axes == [cp.PG_ECHO_CYCLE[i % 4] for i in range(len(pg_axes))]


def test_phase_cycling_computation_echoes():
    seq = _rb_like(["I", "I"], [("y", 1)])
    cg = [it.axis for it in seq.items if isinstance(it, cp.Echo) and it.role == "echo"]
    assert cg[1:] == list(dyn.ECHO_CYCLE[1:])
    # the first echo follows the opening pulse when the preceding PG is the identity
    opening = next(it for it in seq.items if isinstance(it, cp.Rot) and it.role == "cg_open")
    assert cg[0] == cp.axis_name(opening.phase)


def test_phase_cycling_keeps_ideal_unitary():
    pgs, cgs = ["X", "-Y", "Z", "I"], [("x", 1), ("y", 1), ("x", -1)]
    seq = _rb_like(pgs, cgs)
    U = np.eye(2)
    U = cp.pauli_matrix(pgs[0]) @ U
    for (ax, sg), pg in zip(cgs, pgs[1:]):
        U = cp.pauli_matrix(pg) @ cp.rotation((1, 0, 0) if ax == "x" else (0, 1, 0), sg * math.pi / 2) @ U
    assert cp.operator_distance(cp.ideal_unitary(seq), U) < 1e-9


def test_plain_echo_run_cycles():
    items = tuple(cp.Echo("x") for _ in range(6))
    seq = cp.apply_phase_cycling(cp.PulseSequence(items))
    assert seq.echo_axes() == ["y", "y", "-y", "-y", "y", "y"]


@settings(max_examples=50, deadline=None)
@given(st.floats(0, math.pi), st.floats(-math.pi, math.pi))
def test_detection_returns_to_one(polar, az):
    # any pure state reachable from |1> is sent back to |1> by one pulse
    psi = np.array([math.sin(polar / 2), math.cos(polar / 2) * np.exp(1j * az)])
    U = np.column_stack([[np.conj(psi[1]), -np.conj(psi[0])], psi])
    spec = cp.compile_detection(U)
    out = cp.ideal_unitary(cp.detection_sequence(spec)) @ psi
    assert abs(out[1]) ** 2 > 1 - 1e-9
    assert not spec.flagged


def test_detection_examples():
    assert cp.compile_detection(np.eye(2)).angle == 0.0
    # detection returns the state to |1>, so after Rx(pi/2) it is Rx(-pi/2)
    spec = cp.compile_detection(cp.rotation((1, 0, 0), math.pi / 2))
    assert spec.angle == pytest.approx(math.pi / 2)
    assert cp.operator_distance(spec.matrix(), cp.rotation((1, 0, 0), -math.pi / 2)) < 1e-9


def test_concat_rejects_mixed_parameters():
    a = cp.compile_rz(PAIR, 1.0)
    b = cp.compile_rz(PAIR, 1.0, cp.CompileConfig(delta=76e3))
    with pytest.raises(cp.CompileError):
        cp.concat(a, b)
    joined = cp.concat(cp.global_rotation(0.0, math.pi / 2), a)
    assert joined.delta == a.delta and len(joined.scenes) == 4


def test_json_dump(rz_half):
    import json

    recs = json.loads(rz_half.to_json())
    kinds = [r["kind"] for r in recs]
    assert kinds.count("address") == 4 and kinds.count("qubit") == 4
    assert all(len(r["beams"]) == 2 for r in recs if r["kind"] == "address")


def test_balance_free_time_equalizes_signs():
    prep = cp.global_rotation(-math.pi / 2, math.pi / 2)
    body = cp.compile_rz(PAIR, math.pi / 2)
    raw = cp.concat(prep, body, cp.global_rotation(0.0, math.pi / 2))
    seq = cp.balance_free_time(raw)
    assert any(isinstance(it, cp.Delay) for it in seq.items)
    # a static qubit detuning no longer moves the closing population
    psi0 = np.zeros((1, 3), complex)
    psi0[0, 1] = 1

    def p1(s, det_hz):
        return abs(dyn.run_events(s.events, psi0, s.delta, {}, qubit_detuning=dyn.TWO_PI * det_hz)[0, 1]) ** 2

    # first order cancels; what is left is second order in the detuning
    moved = abs(p1(seq, 50.0) - p1(seq, 0.0))
    assert moved < 5e-3 * abs(p1(raw, 50.0) - p1(raw, 0.0))
    assert abs(p1(seq, 10.0) - p1(seq, 0.0)) < 0.1 * moved
