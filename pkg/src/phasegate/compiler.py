"""Compile targeted and global gates into timed pulse sequences.

A sequence is built from a short list of items (global rotations, echo pi
pulses, frame shifts, addressing stages and delays) and assembled into
timed events on demand.  Frame shifts are bookkept in a ledger that is
subtracted from the phase of every later resonant pulse; the logical
unitary of a sequence is Rz(ledger) times the physically played product.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from functools import cached_property, lru_cache
from typing import Mapping, Sequence

import numpy as np

from . import dynamics as dyn
from .dynamics import (ECHO_CYCLE, FLIPPED_ORDER, NATIVE_ORDER, TWO_PI, Event, PhaseGateParams, Pulse, PulseKind,
                       StageTiming)
from .lattice import BeamSpec, LatticeConfig, Site, calibrate_target_intensity, shares_beam_line, target_beams

DEFAULT_F = 50981.0  # Hz, puts the exact phase extremum at 74.9 kHz
DEFAULT_DELTA = 74.9e3
PG_ECHO_CYCLE = ("y", "-y", "-y", "y")
PAULI_LABELS = ("X", "-X", "Y", "-Y", "Z", "-Z", "I")
ROLES = ("target", "target_b", "line", "column", "spectator")


class CompileError(ValueError):
    pass


class StructureError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Small rotation algebra


def rot(phase: float, area: float) -> np.ndarray:
    """R_phi(a) = exp(-i a (cos phi X + sin phi Y) / 2)."""
    c, s = math.cos(area / 2), math.sin(area / 2)
    return np.array([[c, -1j * s * np.exp(-1j * phase)], [-1j * s * np.exp(1j * phase), c]])


def rz(theta: float) -> np.ndarray:
    return np.diag([np.exp(-0.5j * theta), np.exp(0.5j * theta)])


def rotation(axis, theta: float) -> np.ndarray:
    n = np.asarray(axis, dtype=float)
    n = n / np.linalg.norm(n)
    X = np.array([[0, 1], [1, 0]])
    Y = np.array([[0, -1j], [1j, 0]])
    Z = np.diag([1, -1])
    H = n[0] * X + n[1] * Y + n[2] * Z
    return math.cos(theta / 2) * np.eye(2) - 1j * math.sin(theta / 2) * H


def operator_distance(U: np.ndarray, V: np.ndarray) -> float:
    """Spectral-norm distance minimized over a global phase."""
    ov = np.trace(V.conj().T @ U)
    ph = ov / abs(ov) if abs(ov) > 1e-15 else 1.0
    return float(np.linalg.norm(U - ph * V, 2))


def axis_name(phase: float, tol: float = 1e-9) -> str | None:
    for name, p in dyn.AXIS_PHASE.items():
        if abs(dyn.wrap_phase(phase - p)) < tol:
            return name
    return None


def negate_axis(name: str) -> str:
    return name[1:] if name.startswith("-") else "-" + name


# ---------------------------------------------------------------------------
# Sequence items


@dataclass(frozen=True)
class GateSpec:
    kind: str  # TargetRz | TargetRotation | GlobalCG | PauliPG | Detection
    axis: tuple[float, float, float] = (0.0, 0.0, 1.0)
    angle: float = 0.0
    targets: tuple[Site, ...] = ()
    label: str = ""
    flagged: bool = False

    def __post_init__(self):
        if self.kind in ("TargetRz", "TargetRotation") and len(self.targets) not in (1, 2):
            raise ValueError("targeted gates take one or two target sites")

    def matrix(self) -> np.ndarray:
        if self.kind == "PauliPG":
            return pauli_matrix(self.label)
        return rotation(self.axis, self.angle)


@dataclass(frozen=True)
class Rot:
    """Global resonant pulse of given area with a logical phase."""

    area: float
    phase: float
    role: str = "rot"
    block: str = ""


@dataclass(frozen=True)
class Echo:
    axis: str = "y"
    group: str = ""
    role: str = "echo"
    block: str = ""


@dataclass(frozen=True)
class Frame:
    theta: float
    role: str = "frame"
    block: str = ""


@dataclass(frozen=True)
class Stage:
    key: str
    address: Pulse | None
    ideal: Mapping[str, float] = field(default_factory=dict)
    block: str = ""


@dataclass(frozen=True)
class Delay:
    duration: float
    block: str = ""


def _echo_matrix(axis: str) -> np.ndarray:
    return rot(dyn.AXIS_PHASE[axis], math.pi)


@dataclass(frozen=True)
class PulseSequence:
    items: tuple = ()
    scenes: Mapping[str, tuple[BeamSpec, ...]] = field(default_factory=dict)
    timing: StageTiming = StageTiming()
    delta: float = DEFAULT_DELTA
    f: float = DEFAULT_F
    k: float = 1.8
    gates: tuple[GateSpec, ...] = ()

    # -- assembly ------------------------------------------------------------

    @cached_property
    def _assembled(self):
        return assemble(self.items, self.timing)

    @property
    def events(self) -> list[Event]:
        return self._assembled[0]

    @property
    def frame_ledger(self) -> float:
        return self._assembled[1]

    @property
    def stage_boundaries(self) -> list[int]:
        return [i for i, e in enumerate(self.events) if e.kind == "light" and e.role == "ramp" and e.light[0] == 0.0]

    @property
    def duration(self) -> float:
        ev = self.events
        return ev[-1].end if ev else 0.0

    def echo_axes(self) -> list[str]:
        return [it.axis for it in self.items if isinstance(it, Echo)]

    def then(self, *others: "PulseSequence") -> "PulseSequence":
        return concat(self, *others)

    # -- inspection ----------------------------------------------------------

    def to_records(self) -> list[dict]:
        out = []
        for e in self.events:
            rec = {"t_us": round(e.start * 1e6, 6), "kind": e.kind, "duration_us": round(e.duration * 1e6, 6),
                   "role": e.role}
            if e.pulse is not None:
                rec["rabi_hz"] = e.pulse.peak_rabi / TWO_PI
                rec["phase"] = (e.pulse.phase - e.frame_phase) if e.pulse.kind == PulseKind.QUBIT else e.pulse.phase
                rec["detuning_hz"] = e.pulse.detuning / TWO_PI
            if e.kind == "frame":
                rec["frame_phase"] = e.frame_phase
            if e.stage_key is not None:
                rec["stage"] = e.stage_key
                rec["beams"] = [b.beam_id for b in self.scenes.get(e.stage_key, ())]
            out.append(rec)
        return out

    def to_json(self, indent: int | None = 1) -> str:
        return json.dumps(self.to_records(), indent=indent)


def assemble(items: Sequence, timing: StageTiming) -> tuple[list[Event], float]:
    """Lay items out in time and track the frame ledger.

    When the echo pulses of one group multiply to a Z (rather than the
    identity), pi is added to the ledger after the group so the logical
    frame is restored.
    """
    group_size: dict[str, int] = {}
    for it in items:
        if isinstance(it, Echo) and it.group:
            group_size[it.group] = group_size.get(it.group, 0) + 1
    seen: dict[str, list[str]] = {}
    events: list[Event] = []
    t = 0.0
    L = 0.0
    for it in items:
        if isinstance(it, Rot):
            if it.area == 0:
                continue
            p = Pulse(PulseKind.QUBIT, timing.t_pi, dyn.rabi_for_area(it.area, timing.t_pi), it.phase)
            events.append(Event("qubit", t, timing.t_pi, pulse=p, frame_phase=L, role=it.role,
                                axis=axis_name(it.phase) or ""))
            t += timing.t_pi
        elif isinstance(it, Echo):
            events.append(Event("qubit", t, timing.t_pi, pulse=dyn.echo_pulse(it.axis, timing), frame_phase=L,
                                role=it.role, axis=it.axis))
            t += timing.t_pi
            if it.group:
                axes = seen.setdefault(it.group, [])
                axes.append(it.axis)
                if len(axes) == group_size[it.group]:
                    U = np.eye(2)
                    for a in axes:
                        U = _echo_matrix(a) @ U
                    if abs(U[0, 1]) < 1e-9 and abs(U[0, 0] / U[1, 1] + 1) < 1e-9:
                        L += math.pi
                        events.append(Event("frame", t, 0.0, frame_phase=L, role="echo-frame"))
        elif isinstance(it, Frame):
            L += it.theta
            events.append(Event("frame", t, 0.0, frame_phase=L, role=it.role))
        elif isinstance(it, Stage):
            events += dyn.stage_events(it.key, it.address, timing, t, ideal=dict(it.ideal))
            t += timing.window
        elif isinstance(it, Delay):
            if it.duration > 0:
                events.append(Event("delay", t, it.duration, role="delay"))
                t += it.duration
        else:
            raise StructureError(f"unknown sequence item {it!r}")
    return events, L


def _rekey(item, prefix: str):
    if isinstance(item, Stage):
        return replace(item, key=prefix + item.key, block=prefix + item.block if item.block else "")
    if isinstance(item, Echo):
        return replace(item, group=prefix + item.group if item.group else "",
                       block=prefix + item.block if item.block else "")
    if item.block:
        return replace(item, block=prefix + item.block)
    return item


def concat(*seqs: PulseSequence) -> PulseSequence:
    """Play sequences back to back; stage keys and groups stay distinct."""
    if not seqs:
        return PulseSequence()
    # parameters come from the first sequence with addressing stages
    staged = [s for s in seqs if any(isinstance(it, Stage) for it in s.items)]
    base = staged[0] if staged else seqs[0]
    for s in staged[1:]:
        if (s.timing, s.delta, s.f, s.k) != (base.timing, base.delta, base.f, base.k):
            raise CompileError("cannot join sequences compiled with different parameters")
    items: list = []
    scenes: dict = {}
    gates: list = []
    for i, s in enumerate(seqs):
        prefix = f"{i}."
        items += [_rekey(it, prefix) for it in s.items]
        scenes.update({prefix + k: v for k, v in s.scenes.items()})
        gates += list(s.gates)
    return replace(base, items=tuple(items), scenes=scenes, gates=tuple(gates))


# ---------------------------------------------------------------------------
# Targeted Rz


@dataclass(frozen=True)
class CompileConfig:
    f: float = DEFAULT_F  # Hz
    k: float = 1.8
    delta: float = DEFAULT_DELTA  # Hz
    timing: StageTiming = StageTiming()
    transfer_budget: float = 0.1  # per stage, any class
    omega_max: float | None = None  # rad/s, overrides the transfer ceiling
    lattice: LatticeConfig = LatticeConfig()
    beam: BeamSpec = BeamSpec("x", 0, 0)
    tol: float = dyn.INTEGRATOR_TOL

    def params(self, omega: float = 0.0) -> PhaseGateParams:
        return PhaseGateParams(self.f, self.k, self.delta, omega, self.timing.t_address)


@lru_cache(maxsize=64)
def omega_ceiling(p: PhaseGateParams, budget: float, omega_hi: float = TWO_PI * 60e3) -> float:
    """Largest Rabi frequency before per-stage aux transfer exceeds budget.

    Scans upward on a 250 Hz grid and bisects the first crossing.
    """
    prev = 0.0
    for om in np.arange(1, int(omega_hi / (TWO_PI * 250)) + 1) * TWO_PI * 250:
        q = replace(p, omega=float(om))
        worst = max(dyn.stage_transfer(q, c) for c in ("cross", "line", "spectator"))
        if worst > budget:
            lo, hi = prev, float(om)
            for _ in range(30):
                mid = 0.5 * (lo + hi)
                q = replace(p, omega=mid)
                if max(dyn.stage_transfer(q, c) for c in ("cross", "line", "spectator")) > budget:
                    hi = mid
                else:
                    lo = mid
            return lo
        prev = float(om)
    return omega_hi


def native_sign(p: PhaseGateParams) -> float:
    """Sign of the target phase for the native stage order at this delta."""
    probe = replace(p, omega=TWO_PI * 1e3)
    return 1.0 if dyn.native_phase_sum(probe) > 0 else -1.0


@lru_cache(maxsize=512)
def _solve(p: PhaseGateParams, theta: float, order: tuple, omega_max: float, timing: StageTiming) -> float:
    return dyn.solve_omega(p, theta, order, omega_max, timing)


def virtual_partner(target: Site, lattice: LatticeConfig) -> Site:
    """An empty site compatible with the target, or one just off the lattice.

    Without a fixed occupancy no lattice site is guaranteed empty, so the
    partner goes off the lattice.
    """
    nx, ny, nz = lattice.dims
    if lattice.occupancy is None:
        return (target[0], target[1], nz + 1)
    occ = set(lattice.occupancy)
    cands = sorted((s for s in lattice.sites() if s not in occ and s[2] != target[2]),
                   key=lambda s: (abs(s[2] - target[2]) == 1, s[2], s[1], s[0]))
    if cands:
        return cands[-1]
    # no free site in another plane: beams cross one plane outside the lattice
    return (target[0], target[1], nz + 1)


def _stage_lit(scenes: Mapping[str, Sequence[BeamSpec]], beam_id: str) -> dict:
    return {key: any(b.beam_id == beam_id for b in beams) for key, beams in scenes.items()}


def compile_rz(targets: Sequence[Site], theta: float, cfg: CompileConfig = CompileConfig(),
               lattice: LatticeConfig | None = None, block: str = "rz") -> PulseSequence:
    """Targeted Rz(theta) on one or two sites.

    Four stages (cross A, x beams, cross B, y beams, or the flipped order for
    the opposite sign), each followed by an echo pi pulse.  The addressing
    Rabi frequency is solved on the exact target phase.
    """
    lattice = lattice or cfg.lattice
    targets = [tuple(int(c) for c in s) for s in targets]
    if len(targets) not in (1, 2):
        raise CompileError("compile_rz takes one or two targets")
    for s in targets:
        if not lattice.contains(s):
            raise CompileError(f"target {s} outside the lattice")
    if len(targets) == 1:
        targets.append(virtual_partner(targets[0], lattice))
    A, B = targets
    if A == B:
        raise CompileError("targets must differ")
    if shares_beam_line(A, B):
        raise CompileError(f"targets {A} and {B} share an addressing line")
    theta = float(dyn.wrap_phase(theta))
    p0 = cfg.params()

    beams = {}
    for name, site in (("A", A), ("B", B)):
        bx, by = target_beams(site, lattice, replace(cfg.beam, peak_shift=cfg.f))
        try:
            sx, sy = calibrate_target_intensity(site, (bx, by), cfg.f, lattice.spacing)
        except ValueError as exc:
            raise CompileError(str(exc)) from exc
        beams[name + "x"] = replace(bx, scale=sx, beam_id=f"x:z{site[2]}:y{site[1]}")
        beams[name + "y"] = replace(by, scale=sy, beam_id=f"y:z{site[2]}:x{site[0]}")
    scenes = {"crossA": (beams["Ax"], beams["Ay"]), "dummyX": (beams["Ax"], beams["Bx"]),
              "crossB": (beams["Bx"], beams["By"]), "dummyY": (beams["Ay"], beams["By"])}

    sgn = native_sign(p0)
    order = NATIVE_ORDER if theta == 0 or np.sign(theta) == sgn else FLIPPED_ORDER
    ceiling = cfg.omega_max if cfg.omega_max is not None else omega_ceiling(p0, cfg.transfer_budget)
    if theta == 0:
        omega = 0.0
    else:
        try:
            omega = _solve(p0, theta, order, ceiling, cfg.timing)
        except ValueError as exc:
            raise CompileError(f"Rz({theta:.4f}) unreachable below the transfer ceiling: {exc}") from exc
    p = replace(p0, omega=omega)

    # ideal per-stage phases by role, scaled so the target sum is exactly theta
    phi = {c: (dyn.stage_phase(p, c) if omega > 0 else 0.0) for c in ("cross", "line", "spectator")}
    cls_by_role = {
        "target": {"crossA": "cross", "dummyX": "line", "crossB": "spectator", "dummyY": "line"},
        "target_b": {"crossA": "spectator", "dummyX": "line", "crossB": "cross", "dummyY": "line"},
        "line": {k: ("line" if v else "spectator") for k, v in _stage_lit(scenes, beams["Ax"].beam_id).items()},
        "column": {k: ("line" if v else "spectator") for k, v in _stage_lit(scenes, beams["Ay"].beam_id).items()},
        "spectator": {k: "spectator" for k in scenes},
    }
    signs = {key: (1.0 if i % 2 == 0 else -1.0) for i, key in enumerate(order)}
    total = sum(signs[k] * phi[cls_by_role["target"][k]] for k in order)
    scale = theta / total if omega > 0 else 0.0
    address = (Pulse(PulseKind.ADDRESS, cfg.timing.t_address, omega, 0.0, TWO_PI * cfg.delta)
               if omega > 0 else None)
    items = []
    for i, key in enumerate(order):
        ideal = {role: scale * phi[cls_by_role[role][key]] for role in ROLES}
        items.append(Stage(key, address, ideal, block=block))
        items.append(Echo(ECHO_CYCLE[i], group=block, block=block))
    spec = GateSpec("TargetRz", (0.0, 0.0, 1.0), theta, tuple(targets), label=f"omega={omega / TWO_PI:.6f}Hz")
    return PulseSequence(tuple(items), scenes, cfg.timing, cfg.delta, cfg.f, cfg.k, (spec,))


def addressing_omega(seq: PulseSequence) -> float:
    """Peak addressing Rabi frequency (rad/s) of the first stage in a sequence."""
    for it in seq.items:
        if isinstance(it, Stage):
            return it.address.peak_rabi if it.address is not None else 0.0
    return 0.0


# ---------------------------------------------------------------------------
# Rotations, Pauli gates, detection


def compile_rotation(axis, theta: float, targets: Sequence[Site], cfg: CompileConfig = CompileConfig(),
                     lattice: LatticeConfig | None = None, block: str = "cg") -> PulseSequence:
    """Targeted rotation R_axis(theta) = V Rz(theta) V^dagger.

    V rotates z onto the axis (polar a, azimuth b) about the equatorial axis
    at phase b + pi/2.  V^dagger is played first, then the Rz block, then V.
    Two delays in the negative echo periods balance the free time added by
    the opening and closing pulses (edge_weight each).
    """
    n = np.asarray(axis, dtype=float)
    nn = np.linalg.norm(n)
    if not nn > 0:
        raise CompileError("rotation axis must be nonzero")
    n = n / nn
    a = math.acos(max(-1.0, min(1.0, n[2])))
    if a < 1e-12:
        return compile_rz(targets, theta, cfg, lattice, block)
    if math.pi - a < 1e-12:
        return compile_rz(targets, -theta, cfg, lattice, block)
    b = math.atan2(n[1], n[0])
    chi = b + math.pi / 2
    inner = compile_rz(targets, theta, cfg, lattice, block)
    half = Delay(edge_weight(a, cfg.timing.t_pi) * cfg.timing.t_pi, block=block)
    body = list(inner.items)
    # items alternate Stage, Echo: insert after echo 1 and echo 3
    body = body[:2] + [half] + body[2:6] + [half] + body[6:]
    items = ([Rot(a, float(dyn.wrap_phase(chi + math.pi)), role="cg_open", block=block)] + body
             + [Rot(a, float(dyn.wrap_phase(chi)), role="cg_close", block=block)])
    spec = GateSpec("TargetRotation", tuple(n), float(dyn.wrap_phase(theta)), inner.gates[0].targets,
                    label=inner.gates[0].label)
    return replace(inner, items=tuple(items), gates=(spec,))


def pauli_matrix(label: str) -> np.ndarray:
    label = label.upper()
    if label == "I":
        return np.eye(2, dtype=complex)
    sign = -1.0 if label.startswith("-") else 1.0
    ax = {"X": (1, 0, 0), "Y": (0, 1, 0), "Z": (0, 0, 1)}[label[-1]]
    return rotation(ax, sign * math.pi)


def compile_pauli(label: str, block: str = "pg", timing: StageTiming = StageTiming()) -> PulseSequence:
    """Global Pauli gate: resonant pi pulse, frame shift or nothing."""
    lab = label.upper().replace("+", "")
    if lab not in PAULI_LABELS:
        raise ValueError(f"unknown Pauli gate {label!r}")
    items: list = []
    if lab in ("X", "-X", "Y", "-Y"):
        items.append(Rot(math.pi, dyn.AXIS_PHASE[lab.lower()], role="pg", block=block))
    elif lab in ("Z", "-Z"):
        items.append(Frame(math.pi if lab == "Z" else -math.pi, role="pg", block=block))
    return PulseSequence(tuple(items), timing=timing, gates=(GateSpec("PauliPG", label=lab),))


def global_rotation(axis_phase: float, area: float, block: str = "", role: str = "rot",
                    timing: StageTiming = StageTiming()) -> PulseSequence:
    kind = "GlobalCG"
    spec = GateSpec(kind, (math.cos(axis_phase), math.sin(axis_phase), 0.0), area)
    return PulseSequence((Rot(area, axis_phase, role=role, block=block),), timing=timing, gates=(spec,))


def pg_with_echoes(label: str, block: str, timing: StageTiming = StageTiming()) -> PulseSequence:
    """A Pauli gate wrapped in its two echo pi pulses (axes set by cycling)."""
    pg = compile_pauli(label, block, timing)
    items = (Echo("y", group=block, role="pg_pre", block=block),) + pg.items + (
        Echo("-y", group=block, role="pg_post", block=block),)
    return replace(pg, items=items)


def _block_kind(block: str) -> str:
    return block.rsplit(".", 1)[-1].rstrip("0123456789")


def apply_phase_cycling(seq: PulseSequence) -> PulseSequence:
    """Assign echo torque axes.

    Echoes around Pauli gates cycle (y, -y, -y, y) across the whole
    sequence.  Inside a computation gate the four echoes follow
    (y, y, -y, -y), except that the first one is set from the preceding
    Pauli gate: opposite to it when it shares the opening pulse's axis,
    otherwise along the opening pulse.  Any other run of echoes cycles
    (y, y, -y, -y), restarting after each interruption.
    """
    items = list(seq.items)
    out = list(items)
    # locate blocks
    blocks: dict[str, list[int]] = {}
    order: list[str] = []
    for i, it in enumerate(items):
        b = getattr(it, "block", "")
        if b not in blocks:
            blocks[b] = []
            order.append(b)
        blocks[b].append(i)
    for b, idx in blocks.items():
        if b and idx != list(range(idx[0], idx[-1] + 1)):
            raise StructureError(f"block {b!r} is not contiguous")

    pg_count = 0
    run = 0
    prev_block = None
    for b in order:
        idx = blocks[b]
        kind = _block_kind(b) if b else ""
        echoes = [i for i in idx if isinstance(items[i], Echo)]
        if kind == "pg":
            pre = [i for i in echoes if items[i].role == "pg_pre"]
            post = [i for i in echoes if items[i].role == "pg_post"]
            if len(pre) != len(post) or len(pre) > 1 or len(echoes) != len(pre) + len(post):
                raise StructureError(f"Pauli block {b!r} needs one echo on each side")
            for i in pre + post:
                out[i] = replace(items[i], axis=PG_ECHO_CYCLE[pg_count % 4])
                pg_count += 1
            run = 0
        elif kind == "cg" and any(isinstance(items[i], Rot) and items[i].role == "cg_open" for i in idx):
            opens = [i for i in idx if isinstance(items[i], Rot) and items[i].role == "cg_open"]
            if len(echoes) != 4 or len(opens) != 1:
                raise StructureError(f"computation block {b!r} needs one opening pulse and four echoes")
            axes = list(ECHO_CYCLE)
            open_ax = axis_name(items[opens[0]].phase)
            if prev_block is not None and _block_kind(prev_block) == "pg" and open_ax is not None:
                pg_ax = _pg_axis(items, blocks[prev_block])
                if pg_ax is not None and pg_ax.lstrip("-") == open_ax.lstrip("-"):
                    axes[0] = negate_axis(pg_ax)
                else:
                    axes[0] = open_ax
            for i, ax in zip(echoes, axes):
                out[i] = replace(items[i], axis=ax)
            run = 0
        else:
            for i in idx:
                if isinstance(items[i], Echo):
                    out[i] = replace(items[i], axis=ECHO_CYCLE[run % 4])
                    run += 1
                elif isinstance(items[i], (Rot, Frame)):
                    run = 0
        prev_block = b if b else prev_block
    return replace(seq, items=tuple(out))


def _pg_axis(items, idx) -> str | None:
    for i in idx:
        it = items[i]
        if isinstance(it, Rot) and it.role == "pg":
            return axis_name(it.phase)
    return None


def ideal_unitary(seq: PulseSequence, cls: str = "target") -> np.ndarray:
    """Intended qubit-subspace operator of a compiled sequence for a class.

    Resonant pulses are exact rotations at their played phase, addressing
    stages are exact Rz by their ideal phase and the final frame ledger is
    applied as Rz.  Leakage and pulse imperfections are ignored.
    """
    if cls == "line_atom":
        cls = "line"
    U = np.eye(2, dtype=complex)
    for e in seq.events:
        if e.kind == "qubit":
            U = rot(e.pulse.phase - e.frame_phase, e.pulse.area) @ U
        elif e.ideal is not None and e.role == "address":
            if cls not in e.ideal:
                raise ValueError(f"unknown class {cls!r}")
            U = rz(e.ideal[cls]) @ U
    return rz(seq.frame_ledger) @ U


def compile_detection(ideal_so_far: np.ndarray, cls: str = "target", tol: float = 1e-9) -> GateSpec:
    """Single global rotation returning the ideal state U|1> to |1>.

    Falls back to a pi pulse followed by a pi/2-type pulse (flagged) if the
    one-pulse solution misses |1> by more than tol.
    """
    psi = np.asarray(ideal_so_far, dtype=complex) @ np.array([0.0, 1.0])
    psi = psi / np.linalg.norm(psi)
    p1 = abs(psi[1]) ** 2
    if 1 - p1 < tol:
        return GateSpec("Detection", (1.0, 0.0, 0.0), 0.0, label=cls)
    theta_b = 2 * math.acos(min(1.0, abs(psi[0])))  # polar angle from |0>
    az = float(np.angle(psi[1]) - np.angle(psi[0])) if abs(psi[0]) > 1e-12 else 0.0
    area = math.pi - theta_b
    best = None
    for chi in (az + math.pi / 2, az - math.pi / 2):
        out = rot(chi, area) @ psi
        err = 1 - abs(out[1]) ** 2
        if best is None or err < best[0]:
            best = (err, chi)
    err, chi = best
    if err < tol:
        chi = float(dyn.wrap_phase(chi))
        return GateSpec("Detection", (math.cos(chi), math.sin(chi), 0.0), area, label=cls)
    return GateSpec("Detection", (1.0, 0.0, 0.0), math.pi, label=cls, flagged=True)


def detection_sequence(spec: GateSpec, timing: StageTiming = StageTiming()) -> PulseSequence:
    if spec.angle == 0:
        return PulseSequence(timing=timing, gates=(spec,))
    chi = math.atan2(spec.axis[1], spec.axis[0])
    return PulseSequence((Rot(spec.angle, chi, role="detect", block="det"),), timing=timing, gates=(spec,))


# ---------------------------------------------------------------------------
# Static refocusing


@lru_cache(maxsize=64)
def edge_weight(area: float, t_pi: float) -> float:
    """Free-evolution time, in units of t_pi, that an opening or closing pulse
    of the given area carries for a static qubit detuning.

    Read off a two-pulse Ramsey sequence: the slope of P1 against detuning
    grows linearly with the gap, and the intercept gives the pulses' share.
    A rectangular pi/2 pulse gives 2/pi; the Blackman pi/2 pulse 0.574.
    """
    rabi = dyn.rabi_for_area(area, t_pi)
    a = Pulse(PulseKind.QUBIT, t_pi, rabi, -math.pi / 2)
    b = Pulse(PulseKind.QUBIT, t_pi, rabi, 0.0)

    def slope(gap):
        qd = np.array([1.0, -1.0]) * TWO_PI * 0.5
        U = dyn.pulse_unitary(b, qubit_detuning=qd) @ dyn.free_unitary(gap, 0.0, qd) \
            @ dyn.pulse_unitary(a, qubit_detuning=qd)
        p1 = np.abs(U[:, 1, 1]) ** 2
        return (p1[0] - p1[1]) / TWO_PI

    s0, s1 = slope(0.0), slope(t_pi)
    if abs(s1 - s0) < 1e-12 * t_pi:
        return 0.5
    return float(s0 / (s1 - s0) / 2)


def balance_free_time(seq: PulseSequence) -> PulseSequence:
    """Insert a delay so free evolution between the first and last pi/2-type
    pulse carries equal time in both echo signs.

    Pi pulses flip the sign at their midpoint and so contribute nothing;
    partial pulses at the ends count their edge_weight.
    """
    items = list(seq.items)
    anchors = [i for i, it in enumerate(items) if isinstance(it, Rot) and abs(it.area - math.pi) > 1e-12]
    if len(anchors) < 2:
        return seq
    first, last = anchors[0], anchors[-1]
    w_first = edge_weight(abs(items[first].area), seq.timing.t_pi) * seq.timing.t_pi
    w_last = edge_weight(abs(items[last].area), seq.timing.t_pi) * seq.timing.t_pi
    sign = 1
    plus = minus = 0.0
    first_minus = None
    plus += w_first
    for i in range(first + 1, last):
        it = items[i]
        if isinstance(it, Echo) or (isinstance(it, Rot) and abs(it.area - math.pi) < 1e-12):
            sign = -sign
            if sign < 0 and first_minus is None:
                first_minus = i + 1
        elif isinstance(it, Rot):
            raise StructureError("partial rotation inside a refocused span")
        elif isinstance(it, Stage):
            if sign > 0:
                plus += seq.timing.window
            else:
                minus += seq.timing.window
        elif isinstance(it, Delay):
            if sign > 0:
                plus += it.duration
            else:
                minus += it.duration
    if sign > 0:
        plus += w_last
    else:
        minus += w_last
    gap = plus - minus
    if abs(gap) < 1e-15:
        return seq
    if gap > 0:
        if first_minus is None:
            return seq
        items.insert(first_minus, Delay(gap))
    else:
        items.insert(first + 1, Delay(-gap))
    return replace(seq, items=tuple(items))
