"""Monte-Carlo experiments: fringe, benchmarking, robustness, spectra,
phase curves, target patterns and echo trains.

All randomness is keyed by (seed, stream, indices...) so a shot's outcome
does not depend on chunking or worker count.  Shots are grouped into
fixed-size chunks; chunks are evaluated serially or in a process pool and
reassembled in order.
"""

from __future__ import annotations

import csv
import io
import math
from functools import lru_cache
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace
from typing import Sequence

import numpy as np

from . import compiler as cp
from . import dynamics as dyn
from .analysis import RBRecord, fidelity_from_p1, normalize_p1
from .compiler import CompileConfig, PulseSequence
from .dynamics import TWO_PI
from .lattice import LatticeConfig, Site, lit_mask, shares_beam_line
from .noise import NoiseConfig
from .simulate import simulate, site_operators, z_phase

# stream identifiers for seed splitting
S_FRINGE, S_RB, S_ROBUST, S_SPECTRUM, S_PATTERN, S_OCC, S_RB_SEQ, S_TARGETS, S_ECHO = range(1, 10)


@dataclass(frozen=True)
class Setup:
    compile: CompileConfig = CompileConfig()
    lattice: LatticeConfig = LatticeConfig()
    noise: NoiseConfig = NoiseConfig()
    seed: int = 0
    workers: int = 1
    chunk: int = 25  # shots per task; fixed so results do not depend on workers


@dataclass(frozen=True)
class FringeRecord:
    alpha: float
    cls: str
    mean_p1: float  # expected bright fraction including SPAM
    standard_error: float
    mean_p1_ideal: float  # before SPAM
    sampled_p1: float  # counted fraction
    n_atoms: int


# ---------------------------------------------------------------------------
# Shared plumbing


def rng_for(seed: int, *key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed)] + [int(k) for k in key]))


def occupied_sites(lattice: LatticeConfig, seed: int, key: Sequence[int]) -> np.ndarray:
    if lattice.occupancy is not None:
        return np.flatnonzero(lattice.occupancy_mask())
    return np.flatnonzero(rng_for(seed, S_OCC, *key).random(lattice.n_sites) < lattice.fill_probability)


SHOT_FIELDS = ("shot", "site", "p1", "p_bright", "bright", "p1_coherent", "p_dec", "leak")


def _task(args):
    seq, lattice, noise, seed, keys, sites, psi0, tails = args
    res = simulate(seq, lattice, noise, seed, keys, sites, psi0, tails)
    return [{name: getattr(r, name) for name in SHOT_FIELDS} for r in res]


def run_tasks(tasks: list, workers: int = 1) -> list:
    if workers <= 1 or len(tasks) <= 1:
        return [_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(_task, tasks))


def run_shots(setup: Setup, seq: PulseSequence, keys: list, sites: list, tails=None, psi0=(0.0, 1.0, 0.0)):
    """Simulate shots in fixed chunks.

    Returns one dict of flat arrays (SHOT_FIELDS) per tail; "shot" holds
    positions in the full key list.
    """
    tasks = []
    for c0 in range(0, len(keys), setup.chunk):
        tasks.append((seq, setup.lattice, setup.noise, setup.seed, keys[c0:c0 + setup.chunk],
                      sites[c0:c0 + setup.chunk], psi0, tails))
    outs = run_tasks(tasks, setup.workers)
    n_tail = len(tails) if tails else 1
    merged = []
    for k in range(n_tail):
        rec = {}
        for name in SHOT_FIELDS:
            parts = [o[k][name] + (c * setup.chunk if name == "shot" else 0) for c, o in enumerate(outs)]
            rec[name] = np.concatenate(parts) if parts else np.zeros(0)
        merged.append(rec)
    return merged


def _mean_se(values: np.ndarray, shot: np.ndarray, mask: np.ndarray) -> tuple[float, float, int]:
    sel = mask
    if not np.any(sel):
        return float("nan"), float("nan"), 0
    shots = np.unique(shot[sel])
    per = np.array([values[sel & (shot == s)].mean() for s in shots])
    se = float(per.std(ddof=1) / math.sqrt(per.size)) if per.size > 1 else 0.0
    return float(values[sel].mean()), se, int(sel.sum())


def pair_targets(sites: Sequence[Site], rng: np.random.Generator | None = None) -> list[tuple[Site, ...]]:
    """Group targets into pairs that do not share an addressing line.

    Greedy over the given order (shuffled when rng is given); a target with
    no compatible partner left is returned alone.
    """
    pool = [tuple(s) for s in sites]
    if rng is not None:
        pool = [pool[i] for i in rng.permutation(len(pool))]
    pairs = []
    while pool:
        a = pool.pop(0)
        j = next((i for i, b in enumerate(pool) if not shares_beam_line(a, b)), None)
        pairs.append((a,) if j is None else (a, pool.pop(j)))
    return pairs


def compile_pairs(pairs, theta: float, cfg: CompileConfig, lattice: LatticeConfig) -> list[PulseSequence]:
    return [cp.compile_rz(list(p), theta, cfg, lattice) for p in pairs]


def refocused_fringe_body(gates: Sequence[PulseSequence], timing: dyn.StageTiming) -> PulseSequence:
    """Preparation pi/2, gates in series and a free-time balancing delay.

    The preparation rotates |1> to +x; a placeholder detection pulse is used
    for balancing and then dropped (detection is applied as a tail).
    """
    prep = cp.PulseSequence((cp.Rot(math.pi / 2, -math.pi / 2, role="prep", block="prep"),), timing=timing)
    det = cp.PulseSequence((cp.Rot(math.pi / 2, 0.0, role="detect", block="det"),), timing=timing)
    body = cp.concat(*([prep] + list(gates) + [det]))
    bal = cp.balance_free_time(body)
    return replace(bal, items=bal.items[:-1])


def fringe_tail(alpha: float, timing: dyn.StageTiming) -> PulseSequence:
    """Detection pi/2 at phase pi/2 - alpha: P1 = (1 + cos(alpha + phi)) / 2."""
    return cp.PulseSequence((cp.Rot(math.pi / 2, math.pi / 2 - alpha, role="detect"),), timing=timing)


def lit_sites(seq: PulseSequence, lattice: LatticeConfig) -> np.ndarray:
    """Boolean mask of sites illuminated (above threshold) in any stage."""
    pts = lattice.positions()
    lit = np.zeros(lattice.n_sites, dtype=bool)
    for beams in {tuple(b) for b in seq.scenes.values()}:
        lit |= lit_mask(beams, pts, lattice.spacing) > 0
    return lit


def choose_targets(lattice: LatticeConfig, n: int, seed: int) -> list[Site]:
    sites = lattice.sites()
    idx = rng_for(seed, S_TARGETS).choice(len(sites), size=min(n, len(sites)), replace=False)
    return [sites[i] for i in sorted(idx)]


# ---------------------------------------------------------------------------
# Fringe


def run_fringe(setup: Setup, theta: float = math.pi / 2, targets: Sequence[Site] | None = None,
               n_targets: int = 48, alphas=None, shots: int = 100) -> list[FringeRecord]:
    """Ramsey fringe with targeted Rz(theta) on many sites in gate pairs.

    Each shot's noise realization is evaluated at every detection phase;
    readout draws are independent per phase.
    """
    lat = setup.lattice
    alphas = np.linspace(0, TWO_PI, 13)[:-1] if alphas is None else np.asarray(alphas, dtype=float)
    if targets is None:
        targets = choose_targets(lat, n_targets, setup.seed) if n_targets else []
    pairs = pair_targets(targets, rng_for(setup.seed, S_TARGETS, 1)) if len(targets) else []
    gates = compile_pairs(pairs, theta, setup.compile, lat) if theta != 0 or pairs else []
    body = refocused_fringe_body(gates, setup.compile.timing)
    keys = [(S_FRINGE, s) for s in range(shots)]
    sites = [occupied_sites(lat, setup.seed, k) for k in keys]
    tails = [fringe_tail(a, setup.compile.timing) for a in alphas]
    res = run_shots(setup, body, keys, sites, tails)
    tmask_sites = np.zeros(lat.n_sites, dtype=bool)
    for s in targets:
        tmask_sites[lat.index(tuple(s))] = True
    lit = lit_sites(body, lat) & ~tmask_sites
    out = []
    for a, r in zip(alphas, res):
        shot, site, p1, pb, bright = r["shot"], r["site"], r["p1"], r["p_bright"], r["bright"]
        classes = {"target": tmask_sites[site], "line": lit[site], "spectator": ~tmask_sites[site] & ~lit[site],
                   "nontarget": ~tmask_sites[site]}
        for cls, m in classes.items():
            mean, se, n = _mean_se(pb, shot, m)
            ideal = float(p1[m].mean()) if n else float("nan")
            samp = float(bright[m].mean()) if n else float("nan")
            out.append(FringeRecord(float(a), cls, mean, se, ideal, samp, n))
    return out


# ---------------------------------------------------------------------------
# Randomized benchmarking

CG_CHOICES = (("x", 1), ("x", -1), ("y", 1), ("y", -1))


@dataclass(frozen=True)
class RBConfig:
    lengths: tuple[int, ...] = (1, 2, 4, 6, 8, 12, 16, 24, 32)
    cg_randomizations: int = 3
    pg_randomizations: int = 3
    pg_randomizations_nontarget: int = 4
    shots_per_point: int = 100
    targets: tuple[Site, ...] = ((1, 1, 1), (3, 3, 3))

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.lengths, self.lengths[1:])):
            raise ValueError("lengths must be strictly increasing")
        if any(l < 1 for l in self.lengths):
            raise ValueError("lengths must be at least 1")


def rb_sequence(cgs: Sequence[tuple[str, int]], pgs: Sequence[str], targets, cfg: CompileConfig,
                lattice: LatticeConfig) -> PulseSequence:
    """PG0 CG1 PG1 ... CGl PGl with echo pulses around each PG, phase cycled."""
    if len(pgs) != len(cgs) + 1:
        raise ValueError("need one more Pauli gate than computation gates")
    parts = [cp.pg_with_echoes(pgs[0], "pg0", cfg.timing)]
    for i, (ax, sign) in enumerate(cgs, 1):
        axis = (1.0, 0.0, 0.0) if ax == "x" else (0.0, 1.0, 0.0)
        parts.append(_reblock(_cached_rotation(axis, sign, tuple(map(tuple, targets)), cfg, lattice), f"cg{i}"))
        parts.append(cp.pg_with_echoes(pgs[i], f"pg{i}", cfg.timing))
    seq = cp.concat(*parts)
    return cp.apply_phase_cycling(seq)


@lru_cache(maxsize=64)
def _cached_rotation(axis, sign, targets, cfg, lattice) -> PulseSequence:
    return cp.compile_rotation(axis, sign * math.pi / 2, list(targets), cfg, lattice, block="cg")


def _reblock(seq: PulseSequence, block: str) -> PulseSequence:
    items = []
    for it in seq.items:
        it = replace(it, block=block)
        if isinstance(it, cp.Echo):
            it = replace(it, group=block)
        items.append(it)
    return replace(seq, items=tuple(items))


def draw_rb(seed: int, li: int, length: int, i: int, j: int):
    cg_rng = rng_for(seed, S_RB_SEQ, li, i)
    cgs = [CG_CHOICES[c] for c in cg_rng.integers(0, 4, size=length)]
    pg_rng = rng_for(seed, S_RB_SEQ, li, i, j + 1)
    pgs = [cp.PAULI_LABELS[c] for c in pg_rng.integers(0, len(cp.PAULI_LABELS), size=length + 1)]
    return cgs, pgs


def run_rb(setup: Setup, cfg: RBConfig = RBConfig(), classes=("target", "nontarget")) -> list[RBRecord]:
    """Benchmarking decay per class.

    Target atoms are always evaluated (equivalent to post-selecting shots
    where the targets are loaded); non-target atoms follow the sampled
    occupancy.  Each (length, CG string, PG string) is one sequence.
    """
    lat = setup.lattice
    targets = [tuple(t) for t in cfg.targets]
    t_idx = [lat.index(t) for t in targets]
    want_t = "target" in classes
    want_n = any(c in classes for c in ("nontarget", "line", "spectator"))
    n_pg = max(cfg.pg_randomizations if want_t else 0, cfg.pg_randomizations_nontarget if want_n else 0)
    per_seq: dict = {}
    lit = None
    for li, l in enumerate(cfg.lengths):
        for i in range(cfg.cg_randomizations):
            for j in range(n_pg):
                cgs, pgs = draw_rb(setup.seed, li, l, i, j)
                seq = rb_sequence(cgs, pgs, targets, setup.compile, lat)
                if lit is None and seq.scenes:
                    lit = lit_sites(seq, lat)
                use_t = want_t and j < cfg.pg_randomizations
                use_n = want_n and j < cfg.pg_randomizations_nontarget
                tails = [cp.detection_sequence(cp.compile_detection(cp.ideal_unitary(seq, c), c), seq.timing)
                         for c in ("target", "spectator")]
                keys = [(S_RB, li, i, j, s) for s in range(cfg.shots_per_point)]
                sites = []
                for k in keys:
                    occ = occupied_sites(lat, setup.seed, k) if use_n else np.zeros(0, dtype=int)
                    occ = occ[~np.isin(occ, t_idx)]
                    sites.append(np.concatenate([np.asarray(t_idx if use_t else [], dtype=int), occ]))
                res = run_shots(setup, seq, keys, sites, tails)
                tmask = np.isin(res[0]["site"], t_idx)
                if use_t:
                    pb = res[0]["p_bright"]
                    per_seq.setdefault(("target", l), []).append(float(pb[tmask].mean()))
                if use_n:
                    site, pb = res[1]["site"], res[1]["p_bright"]
                    lm = lit[site] if lit is not None else np.zeros(site.size, dtype=bool)
                    for cls, m in (("nontarget", ~tmask), ("line", ~tmask & lm), ("spectator", ~tmask & ~lm)):
                        if np.any(m):
                            per_seq.setdefault((cls, l), []).append(float(pb[m].mean()))
    out = []
    for cls in ("target", "nontarget", "line", "spectator"):
        if cls not in classes and not (cls in ("line", "spectator") and "nontarget" in classes):
            continue
        for l in cfg.lengths:
            v = per_seq.get((cls, l))
            if not v:
                continue
            v = np.asarray(v)
            se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
            out.append(RBRecord(int(l), cls, float(v.mean()), se, tuple(float(x) for x in v)))
    return out


def synthetic_rb(E2: float, d_if: float, lengths: Sequence[int], n_sequences: int, trials: int,
                 seed: int = 0, cls: str = "target") -> list[RBRecord]:
    """Binomially sampled decay data for estimator checks."""
    rng = rng_for(seed, S_RB, 99)
    out = []
    for l in lengths:
        p = 0.5 + 0.5 * (1 - d_if) * (1 - 2 * E2) ** l
        v = rng.binomial(trials, p, size=n_sequences) / trials
        se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
        out.append(RBRecord(int(l), cls, float(v.mean()), se, tuple(float(x) for x in v)))
    return out


# ---------------------------------------------------------------------------
# Robustness against the addressing shift


@dataclass(frozen=True)
class RobustnessRecord:
    frac: float
    phase_offset: float  # rad, noiseless target phase minus theta
    p1: float  # expected bright fraction
    p1_norm: float
    f2: float
    f2_err: float


def run_robustness(setup: Setup, fracs=None, theta: float = math.pi / 2, shots: int = 100,
                   targets: Sequence[Site] = ((1, 1, 1), (3, 3, 3)), vary: str = "f",
                   p_max: float = 0.95, p_min: float = 0.01) -> list[RobustnessRecord]:
    """Gate fidelity when the physical shift (or the detuning) is off by a fraction.

    The gate is compiled at nominal parameters.  vary="f" scales every
    beam's shift by (1 + frac); vary="delta" scales the detuning by
    1 / (1 + frac), the same fractional change of delta / f.  Fidelity
    uses a detection phase that returns the ideal target to |1>, then
    F^2 = sqrt(normalized P1).
    """
    if vary not in ("f", "delta"):
        raise ValueError("vary must be 'f' or 'delta'")
    fracs = np.linspace(-0.1, 0.1, 21) if fracs is None else np.asarray(fracs, dtype=float)
    if np.any(np.abs(fracs) > 0.1 + 1e-12):
        raise ValueError("fractional shifts must lie within +-0.1")
    lat = setup.lattice
    targets = [tuple(t) for t in targets]
    gate = cp.compile_rz(targets, theta, setup.compile, lat)
    body0 = refocused_fringe_body([gate], setup.compile.timing)
    tail = fringe_tail(-theta, setup.compile.timing)
    t_idx = [lat.index(t) for t in targets]
    out = []
    for fi, fr in enumerate(fracs):
        if vary == "f":
            body = replace(body0, f=body0.f * (1 + fr))
        else:
            body = _with_delta(body0, body0.delta / (1 + fr))
        off = float(dyn.wrap_phase(z_phase(_gate_only(body, lat, t_idx[0]))[0] - theta))
        keys = [(S_ROBUST, fi, s) for s in range(shots)]
        sites = [np.asarray(t_idx, dtype=int) for _ in keys]
        r = run_shots(setup, body, keys, sites, [tail])[0]
        shot, pb = r["shot"], r["p_bright"]
        per = np.array([pb[shot == s].mean() for s in range(shots)])
        mean = float(per.mean())
        se = float(per.std(ddof=1) / math.sqrt(shots)) if shots > 1 else 0.0
        pn = float(np.clip(normalize_p1(mean, p_max, p_min), 0.0, 1.0)) if setup.noise.spam_enabled \
            else float(np.clip(mean, 0, 1))
        sn = se / (p_max - p_min) if setup.noise.spam_enabled else se
        fe = fidelity_from_p1(pn, sn)
        out.append(RobustnessRecord(float(fr), off, mean, pn, fe.value, fe.err_high))
    return out


def _with_delta(seq: PulseSequence, delta: float) -> PulseSequence:
    # the detuning used in propagation is the sequence's, not the pulse label
    return replace(seq, delta=delta)


def _gate_only(seq: PulseSequence, lattice: LatticeConfig, site: int) -> np.ndarray:
    """Noiseless operator of the stage/echo part of a sequence (resonant pi/2 pulses dropped)."""
    items = tuple(it for it in seq.items if not (isinstance(it, cp.Rot) and abs(it.area - math.pi) > 1e-12))
    return site_operators(replace(seq, items=items), lattice, [site])


# ---------------------------------------------------------------------------
# Spectra


@dataclass(frozen=True)
class SpectrumRecord:
    detuning: float  # Hz
    cls: str
    transfer: float
    standard_error: float


def run_spectrum(setup: Setup, detunings=None, duration: float = 400e-6, shots: int = 50,
                 classes=("spectator", "line", "cross")) -> list[SpectrumRecord]:
    """Aux transfer from |0> under one Blackman pi-area probe per detuning.

    Line atoms see f, cross atoms k f (each scaled by their beams' shift
    factors), spectators nothing; per-atom qubit detuning is included.
    """
    cfg = setup.compile
    noise = setup.noise
    detunings = np.arange(-20e3, 120e3 + 1, 250.0) if detunings is None else np.asarray(detunings, dtype=float)
    rng = rng_for(setup.seed, S_SPECTRUM)
    eps = noise.f_spread * rng.standard_normal((shots, 2))
    qd = TWO_PI * noise.inhom_broadening * rng.standard_normal(shots)
    amp = 1 + noise.amplitude_jitter * rng.standard_normal(shots)
    shift = {"spectator": np.zeros(shots), "line": cfg.f * (1 + eps[:, 0]),
             "cross": cfg.k * cfg.f * (1 + eps.mean(axis=1))}
    probe = dyn.Pulse(dyn.PulseKind.ADDRESS, duration, dyn.pi_pulse_peak_rabi(duration))
    out = []
    for cls in classes:
        d = detunings[:, None]
        U = dyn.pulse_unitary(probe, TWO_PI * (d - shift[cls][None, :]), 0.0, qd[None, :], amp[None, :])
        p = np.abs(U[..., 2, 0]) ** 2
        for di, dv in enumerate(detunings):
            se = float(p[di].std(ddof=1) / math.sqrt(shots)) if shots > 1 else 0.0
            out.append(SpectrumRecord(float(dv), cls, float(p[di].mean()), se))
    return out


# ---------------------------------------------------------------------------
# Exact phase curve


@dataclass(frozen=True)
class PhaseCurveRecord:
    delta: float  # Hz
    phase: float  # rad, unwrapped within its segment
    segment: int
    extremum: bool


def default_delta_grid(f: float, k: float, step: float = 100.0, guard: float = 3e3) -> np.ndarray:
    hi = 1.6 * k * f
    g = np.arange(guard, hi + step / 2, step)
    poles = np.array([0.0, f, k * f])
    keep = np.all(np.abs(g[:, None] - poles[None, :]) >= guard, axis=1)
    return g[keep]


def run_phase_curve(setup: Setup, deltas=None, theta: float = math.pi / 2, omega: float | None = None
                    ) -> list[PhaseCurveRecord]:
    """Exact target phase versus detuning at the gate's addressing power.

    The curve is split into segments between resonances and unwrapped in
    each; interior local extrema are flagged.
    """
    cfg = setup.compile
    if omega is None:
        gate = cp.compile_rz([(1, 1, 1), (3, 3, 3)], -abs(theta), cfg, setup.lattice)
        omega = cp.addressing_omega(gate)
    deltas = default_delta_grid(cfg.f, cfg.k) if deltas is None else np.asarray(deltas, dtype=float)
    poles = np.array([0.0, cfg.f, cfg.k * cfg.f])
    seg = np.searchsorted(poles, deltas)
    raw = np.array([dyn.exact_target_phase(dyn.PhaseGateParams(cfg.f, cfg.k, float(d), omega, cfg.timing.t_address),
                                           timing=cfg.timing) for d in deltas])
    out = []
    for s in np.unique(seg):
        m = np.flatnonzero(seg == s)
        ph = np.unwrap(raw[m])
        # consecutive points must be adjacent on the grid for an extremum to count
        for n, i in enumerate(m):
            ext = False
            if 0 < n < m.size - 1:
                d1, d2 = ph[n] - ph[n - 1], ph[n + 1] - ph[n]
                ext = d1 * d2 < 0 or (d1 == 0) != (d2 == 0)
            out.append(PhaseCurveRecord(float(deltas[i]), float(ph[n]), int(s), bool(ext)))
    return out


# ---------------------------------------------------------------------------
# Target patterns


def default_pattern() -> list[Site]:
    """32 targets on planes 0, 2 and 4; planes 1 and 3 hold none."""
    ring = [(x, y, 0) for x in range(5) for y in range(5) if x in (0, 4) or y in (0, 4)]
    ring = [s for s in ring if s[:2] not in ((0, 0), (4, 4))]
    plus = [(x, 2, 2) for x in range(5)] + [(2, y, 2) for y in range(5) if y != 2]
    cross = [(i, i, 4) for i in range(5)] + [(i, 4 - i, 4) for i in range(5) if i != 2]
    return ring + plus + cross


@dataclass(frozen=True)
class PatternRecord:
    site: Site
    target: bool
    occupied_shots: int
    bright: int
    fraction: float  # counted fraction of occupied shots
    expected: float  # mean expected bright probability


def pair_by_plane(targets: Sequence[Site]) -> list[tuple[Site, ...]]:
    """Pair targets within each plane; a leftover target gets a virtual partner."""
    pairs = []
    for z in sorted({t[2] for t in targets}):
        pairs += pair_targets([t for t in targets if t[2] == z])
    return pairs


def run_pattern(setup: Setup, targets: Sequence[Site] | None = None, theta: float = math.pi,
                shots: int = 100) -> list[PatternRecord]:
    """Rz(theta) on a site pattern, read out with detection phase pi.

    Non-targets return to |0> and targets (for theta = pi) to |1>, so the
    per-site bright counts image the pattern.
    """
    lat = setup.lattice
    targets = default_pattern() if targets is None else [tuple(t) for t in targets]
    gates = compile_pairs(pair_by_plane(targets), theta, setup.compile, lat)
    body = refocused_fringe_body(gates, setup.compile.timing)
    keys = [(S_PATTERN, s) for s in range(shots)]
    sites = [occupied_sites(lat, setup.seed, k) for k in keys]
    r = run_shots(setup, body, keys, sites, [fringe_tail(math.pi, setup.compile.timing)])[0]
    site, pb, bright = r["site"], r["p_bright"], r["bright"]
    tset = {lat.index(t) for t in targets}
    occ = np.bincount(site, minlength=lat.n_sites)
    cnt = np.bincount(site, weights=bright.astype(float), minlength=lat.n_sites)
    exp_ = np.bincount(site, weights=pb, minlength=lat.n_sites)
    out = []
    for i, s in enumerate(lat.sites()):
        n = int(occ[i])
        out.append(PatternRecord(s, i in tset, n, int(cnt[i]), float(cnt[i] / n) if n else float("nan"),
                                 float(exp_[i] / n) if n else float("nan")))
    return out


# ---------------------------------------------------------------------------
# Echo trains

ECHO_SCHEMES = {
    "cycled": ("y", "y", "-y", "-y"),
    "naive": ("y",),
    "xy": ("x", "y"),
}


def echo_axes(n: int, scheme: str) -> list[str]:
    if scheme not in ECHO_SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    if scheme == "cycled" and n % 4:
        raise ValueError("the cycled scheme needs a multiple of four pulses")
    cyc = ECHO_SCHEMES[scheme]
    return [cyc[i % len(cyc)] for i in range(n)]


def echo_train_operator(n: int, scheme: str, rabi_error: float = 0.0, detuning_hz=0.0,
                        spacing: float = 314e-6, timing: dyn.StageTiming = dyn.StageTiming()) -> np.ndarray:
    """Qubit operators (..., 2, 2) of tau/2 - (pi - tau)^n - tau/2 echo trains."""
    qd = TWO_PI * np.asarray(detuning_hz, dtype=float)
    half = dyn.free_unitary(spacing / 2, 0.0, qd)[..., :2, :2]
    full = dyn.free_unitary(spacing, 0.0, qd)[..., :2, :2]
    base = dyn.pulse_unitary(dyn.echo_pulse("x", timing), 0.0, 0.0, qd, 1.0 + rabi_error)[..., :2, :2]
    U = half
    axes = echo_axes(n, scheme)
    for i, ax in enumerate(axes):
        P = dyn._drive_phase(base, dyn.AXIS_PHASE[ax])
        U = P @ U
        U = (full if i < n - 1 else half) @ U
    return U


def bloch(psi: np.ndarray) -> np.ndarray:
    a, b = psi[..., 0], psi[..., 1]
    x = 2 * np.real(np.conj(a) * b)
    y = 2 * np.imag(np.conj(a) * b)
    z = np.abs(a) ** 2 - np.abs(b) ** 2
    return np.stack([x, y, z], axis=-1)


@dataclass(frozen=True)
class EchoRecord:
    n_pulses: int
    scheme: str
    rabi_error: float
    contrast: float


def echo_contrast(n: int, scheme: str, rabi_error: float, broadening_hz: float = 130.0, nodes: int = 48,
                  spacing: float = 314e-6) -> float:
    """Closing-fringe contrast averaged over +x and +y initial states.

    The contrast is the length of the ensemble-mean transverse Bloch vector,
    with the detuning distribution sampled by Gauss-Hermite quadrature.
    """
    if broadening_hz > 0:
        x, w = np.polynomial.hermite_e.hermegauss(nodes)
        det, w = broadening_hz * x, w / w.sum()
    else:
        det, w = np.zeros(1), np.ones(1)
    U = echo_train_operator(n, scheme, rabi_error, det, spacing)
    c = []
    for psi0 in (np.array([1, 1]) / math.sqrt(2), np.array([1, 1j]) / math.sqrt(2)):
        r = bloch(U @ psi0)
        m = (w[:, None] * r).sum(axis=0)
        c.append(math.hypot(m[0], m[1]))
    return float(np.mean(c))


def run_echo_stress(n_pulses: int = 100, rabi_errors=None, schemes=("cycled", "naive", "xy"),
                    broadening_hz: float = 130.0, spacing: float = 314e-6) -> list[EchoRecord]:
    rabi_errors = np.linspace(-0.01, 0.01, 21) if rabi_errors is None else np.asarray(rabi_errors, dtype=float)
    out = []
    for sch in schemes:
        for e in rabi_errors:
            out.append(EchoRecord(n_pulses, sch, float(e), echo_contrast(n_pulses, sch, float(e), broadening_hz,
                                                                         spacing=spacing)))
    return out


# ---------------------------------------------------------------------------
# Error budget

@dataclass(frozen=True)
class BudgetRecord:
    row: str
    cls: str
    error: float


BUDGET_CHANNELS = {"i": ("scattering_coeff",), "ii": ("f_spread",), "iii": ("amplitude_jitter",), "iv": ()}


def channel_errors(setup: Setup, theta: float = math.pi / 2, shots: int = 40,
                   targets: Sequence[Site] = ((1, 1, 1), (3, 3, 3))) -> dict:
    """Monte-Carlo error per gate with one noise channel switched on at a time.

    One Rz(theta) on the target pair between a pi/2 preparation and a
    detection that returns every class to |1>.  Leakage out of the qubit
    is present in every run, so each row reads only its own part: row i the
    non-leak decoherence probability, rows ii and iii the coherent
    infidelity, row iv the leaked probability with all noise off.
    """
    lat = setup.lattice
    targets = [tuple(t) for t in targets]
    gate = cp.compile_rz(targets, theta, setup.compile, lat)
    body = refocused_fringe_body([gate], setup.compile.timing)
    tails = [fringe_tail(-theta, setup.compile.timing), fringe_tail(0.0, setup.compile.timing)]
    t_idx = np.array([lat.index(t) for t in targets])
    lit = lit_sites(body, lat)
    out = {}
    for row, names in BUDGET_CHANNELS.items():
        noise = setup.noise.only(*names)
        s = replace(setup, noise=noise)
        keys = [(S_ROBUST, 100 + len(out), i) for i in range(shots)]
        sites = []
        for k in keys:
            occ = occupied_sites(lat, setup.seed, k)
            sites.append(np.concatenate([t_idx, occ[~np.isin(occ, t_idx)]]))
        res = run_shots(s, body, keys, sites, tails)
        err = {}
        for cls, tail_i in (("target", 0), ("line", 1), ("spectator", 1)):
            r = res[tail_i]
            is_t = np.isin(r["site"], t_idx)
            m = is_t if cls == "target" else (~is_t & lit[r["site"]]) if cls == "line" else (~is_t & ~lit[r["site"]])
            if row == "i":
                e = 1 - (1 - r["p_dec"]) / np.maximum(1 - r["leak"], 1e-300)
            elif row == "iv":
                e = r["leak"] + (1 - r["p1_coherent"])
            else:
                e = 1 - r["p1_coherent"]
            err[cls] = float(e[m].mean()) if np.any(m) else float("nan")
        out[row] = err
    return out


@dataclass(frozen=True)
class TargetErrorMeasurement:
    E2t: float
    E2s: float
    sigma2t: float
    sigma2s: float
    Et: float
    sigma_Et: float
    d_if: float


def measure_target_error(setup: Setup, rb: RBConfig = RBConfig(),
                         spectators: Sequence[Site] = ((0, 4, 0), (4, 0, 4)), n_boot: int = 100
                         ) -> TargetErrorMeasurement:
    """Target error per gate from simulated benchmarking with every channel on.

    The lattice is reduced to the targets plus a few fixed spectator atoms,
    which is enough for E_s and keeps the run short.
    """
    from .analysis import decompose_errors, fit_rb

    occ = tuple(tuple(t) for t in rb.targets) + tuple(tuple(s) for s in spectators)
    s = replace(setup, lattice=replace(setup.lattice, occupancy=occ))
    recs = run_rb(s, rb, classes=("target", "nontarget"))
    ft = fit_rb([r for r in recs if r.cls == "target"], n_boot=n_boot, seed=setup.seed)
    fs = fit_rb([r for r in recs if r.cls == "spectator"], n_boot=n_boot, seed=setup.seed)
    d = decompose_errors(ft.E2, fs.E2, fs.E2, ft.E2_sigma, fs.E2_sigma, fs.E2_sigma)
    return TargetErrorMeasurement(ft.E2, fs.E2, ft.E2_sigma, fs.E2_sigma, d.Et, d.sigma_Et, ft.d_if)


def run_budget(setup: Setup, theta: float = math.pi / 2, measured: dict | None = None, mc_shots: int = 0):
    """Model error budget (rows i-iv), optional Monte-Carlo rows and residual row v."""
    from .analysis import assemble_budget

    cfg = setup.compile
    gate = cp.compile_rz([(1, 1, 1), (3, 3, 3)], theta, cfg, setup.lattice)
    p = cfg.params(cp.addressing_omega(gate))
    budget = assemble_budget(measured, p, setup.noise, theta, timing=cfg.timing)
    mc = channel_errors(setup, theta, mc_shots) if mc_shots else None
    return budget, mc


# ---------------------------------------------------------------------------
# Output


def records_to_rows(records) -> tuple[list[str], list[list]]:
    if not records:
        return [], []
    names = [f.name for f in fields(records[0]) if f.name != "per_sequence"]
    rows = [[getattr(r, n) for n in names] for r in records]
    return names, rows


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return "%.10g" % v
    if isinstance(v, tuple):
        return " ".join(_cell(x) for x in v)
    return str(v)


def to_csv(records) -> str:
    """CSV text with floats at ten significant digits."""
    names, rows = records_to_rows(list(records))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(names)
    for r in rows:
        w.writerow([_cell(v) for v in r])
    return buf.getvalue()


def to_dat(records, x: str, y: str, group: str = "cls") -> str:
    """Whitespace table for gnuplot, one blank-line separated block per group."""
    blocks: dict = {}
    for r in records:
        blocks.setdefault(getattr(r, group, ""), []).append(f"{_cell(getattr(r, x))} {_cell(getattr(r, y))}")
    return "\n\n".join(f"# {k}\n" + "\n".join(v) for k, v in blocks.items()) + "\n"
