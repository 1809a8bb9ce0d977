"""Fits and error algebra: fringes, spectra, benchmarking decays and the
per-gate error budget."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import optimize

from . import dynamics as dyn
from .noise import NoiseConfig

NORM_MAX = 0.95
NORM_MIN = 0.01


# ---------------------------------------------------------------------------
# Fringes


@dataclass(frozen=True)
class FringeFit:
    n: float  # Bloch radius shrinkage
    theta: float  # polar angle
    phi: float  # azimuth
    residual: float  # rms of normalized data minus model
    contrast: float  # n^2 sin(theta)
    flagged: bool = False

    def model(self, alpha):
        return self.n ** 2 * (1 + math.sin(self.theta) * np.cos(np.asarray(alpha) + self.phi)) / 2


def normalize_p1(p1, p_max: float = NORM_MAX, p_min: float = NORM_MIN):
    return (np.asarray(p1, dtype=float) - p_min) / (p_max - p_min)


def fit_sinusoid(alpha, p1, p_max: float = NORM_MAX, p_min: float = NORM_MIN, normalize: bool = True) -> FringeFit:
    """Fit P1(alpha) = n^2 (1 + sin(theta) cos(alpha + phi)) / 2.

    The model is linear in (c0, c1, c2) for c0 + c1 cos(a) + c2 sin(a), so
    the unconstrained optimum is exact; a bounded refinement runs only if
    that optimum violates n <= 1 or sin(theta) <= 1.
    """
    alpha = np.asarray(alpha, dtype=float)
    y = normalize_p1(p1, p_max, p_min) if normalize else np.asarray(p1, dtype=float)
    if np.unique(np.round(np.mod(alpha, dyn.TWO_PI), 12)).size < 5:
        raise ValueError("need at least five distinct detection phases")
    X = np.column_stack([np.ones_like(alpha), np.cos(alpha), np.sin(alpha)])
    (c0, c1, c2), *_ = np.linalg.lstsq(X, y, rcond=None)
    amp = math.hypot(c1, c2)
    phi = math.atan2(-c2, c1)
    n2 = 2 * c0
    flagged = amp < 1e-9 + 1e-6 * abs(c0)
    if 0 <= n2 <= 1 and amp <= c0 + 1e-15:
        n = math.sqrt(max(n2, 0.0))
        st = amp / c0 if c0 > 0 else 0.0
        theta = math.asin(min(1.0, st))
    else:
        def resid(p):
            nn, th, ph = p
            return nn ** 2 * (1 + math.sin(th) * np.cos(alpha + ph)) / 2 - y

        best = None
        for ph0 in (phi, phi + 1.0, phi - 1.0):
            r = optimize.least_squares(resid, [min(1.0, math.sqrt(max(n2, 1e-6))), math.pi / 2, ph0],
                                       bounds=([0, 0, -10], [1, math.pi, 10]), xtol=1e-12, ftol=1e-12)
            if best is None or r.cost < best.cost:
                best = r
        n, theta, phi = best.x
        phi = math.atan2(math.sin(phi), math.cos(phi))
    fit = FringeFit(float(n), float(theta), float(phi), 0.0, float(n ** 2 * math.sin(theta)), bool(flagged))
    res = float(np.sqrt(np.mean((fit.model(alpha) - y) ** 2)))
    return FringeFit(fit.n, fit.theta, fit.phi, res, fit.contrast, fit.flagged)


@dataclass(frozen=True)
class FidelityEstimate:
    value: float
    err_low: float
    err_high: float


def fidelity_from_p1(p1: float, sigma: float = 0.0) -> FidelityEstimate:
    """F^2 = sqrt(P1) with sigma(F^2) = sigma(P1) / (2 sqrt(P1)).

    At P1 = 0 the derivative diverges; the error is then one-sided,
    sqrt(sigma) upward.
    """
    if not -1e-12 <= p1 <= 1 + 1e-12:
        raise ValueError("p1 must lie in [0, 1]")
    p1 = min(max(p1, 0.0), 1.0)
    if p1 == 0:
        return FidelityEstimate(0.0, 0.0, math.sqrt(sigma))
    s = sigma / (2 * math.sqrt(p1))
    return FidelityEstimate(math.sqrt(p1), s, s)


# ---------------------------------------------------------------------------
# Randomized benchmarking


@dataclass(frozen=True)
class RBRecord:
    length: int
    cls: str
    mean_p1: float
    standard_error: float
    per_sequence: tuple[float, ...] = ()


@dataclass(frozen=True)
class RBFit:
    E2: float
    d_if: float
    E2_sigma: float
    d_if_sigma: float
    E2_ci: tuple[float, float]
    d_if_ci: tuple[float, float]
    flagged: bool = False
    d_if_fixed: bool = False


def rb_model(l, E2, d_if):
    return 0.5 + 0.5 * (1 - d_if) * (1 - 2 * E2) ** np.asarray(l, dtype=float)


def _fit_decay(l, y, w, d_if_fixed):
    best = None
    if d_if_fixed is None:
        for E0 in (1e-4, 3e-3, 2e-2, 0.1):
            for d0 in (0.01, 0.1, 0.3):
                try:
                    p, _ = optimize.curve_fit(rb_model, l, y, p0=[E0, d0], sigma=w, bounds=([0, 0], [0.5, 1]),
                                              xtol=1e-12, ftol=1e-12, gtol=1e-12)
                except RuntimeError:
                    continue
                cost = float(np.sum(((rb_model(l, *p) - y) / w) ** 2))
                if best is None or cost < best[0]:
                    best = (cost, p)
        if best is None:
            raise RuntimeError("decay fit did not converge from any start")
        return float(best[1][0]), float(best[1][1])
    f = lambda ll, E: rb_model(ll, E, d_if_fixed)
    for E0 in (1e-4, 3e-3, 2e-2, 0.1):
        try:
            p, _ = optimize.curve_fit(f, l, y, p0=[E0], sigma=w, bounds=([0], [0.5]), xtol=1e-12, ftol=1e-12,
                                      gtol=1e-12)
        except RuntimeError:
            continue
        cost = float(np.sum(((f(l, *p) - y) / w) ** 2))
        if best is None or cost < best[0]:
            best = (cost, p)
    if best is None:
        raise RuntimeError("decay fit did not converge from any start")
    return float(best[1][0]), float(d_if_fixed)


def fit_rb(records: Sequence[RBRecord], d_if_fixed: float | None = None, n_boot: int = 200,
           seed: int = 0, weighted: bool = False) -> RBFit:
    """Least-squares fit of the benchmarking decay with bootstrap over sequences.

    Length means are fitted unweighted by default: standard errors from a
    handful of sequences are too noisy to weight by and make the bootstrap
    spread optimistic.  ``weighted=True`` uses them anyway.  The bootstrap
    resamples the per-sequence means within each length; its spread is
    scaled by sqrt(n / (n - 1)) for n sequences per length.
    """
    recs = sorted(records, key=lambda r: r.length)
    if len({r.length for r in recs}) < 3:
        raise ValueError("need at least three lengths")
    l = np.array([r.length for r in recs], dtype=float)
    y = np.array([r.mean_p1 for r in recs])
    se = np.array([r.standard_error for r in recs])
    w = se if weighted and np.all(se > 0) else np.ones_like(y)
    E2, d = _fit_decay(l, y, w, d_if_fixed)
    rng = np.random.default_rng(seed)
    boots = []
    n_seq = min((len(r.per_sequence) for r in recs), default=0)
    if n_seq > 1:
        for _ in range(n_boot):
            yb = np.array([np.mean(rng.choice(r.per_sequence, size=len(r.per_sequence), replace=True))
                           for r in recs])
            boots.append(_fit_decay(l, yb, w, d_if_fixed))
    boots = np.array(boots) if boots else np.array([[E2, d]])
    inflate = math.sqrt(n_seq / (n_seq - 1)) if n_seq > 1 else 1.0
    E_sig = inflate * float(np.std(boots[:, 0], ddof=1)) if len(boots) > 1 else 0.0
    d_sig = inflate * float(np.std(boots[:, 1], ddof=1)) if len(boots) > 1 and d_if_fixed is None else 0.0
    E_ci = (float(np.percentile(boots[:, 0], 2.5)), float(np.percentile(boots[:, 0], 97.5)))
    d_ci = (float(np.percentile(boots[:, 1], 2.5)), float(np.percentile(boots[:, 1], 97.5)))
    flagged = E_ci[0] <= 1e-12
    return RBFit(E2, d, E_sig, d_sig, E_ci, d_ci, flagged, d_if_fixed is not None)


# ---------------------------------------------------------------------------
# Error algebra


@dataclass(frozen=True)
class Decomposition:
    Et: float
    Es: float
    El: float
    sigma_Et: float = 0.0
    sigma_Es: float = 0.0
    sigma_El: float = 0.0


def decompose_errors(E2t: float, E2s: float, E2l: float, sigma2t: float = 0.0, sigma2s: float = 0.0,
                     sigma2l: float = 0.0) -> Decomposition:
    """Per-gate errors from pair errors: Es = E2s / 2, Et = E2t - Es, El = E2l - Es."""
    if min(E2t, E2s, E2l) < 0:
        raise ValueError("pair errors must be non-negative")
    Es = E2s / 2
    sEs = sigma2s / 2
    return Decomposition(E2t - Es, Es, E2l - Es, math.hypot(sigma2t, sEs), sEs, math.hypot(sigma2l, sEs))


def crosstalk_average(Es: float, El: float, n_spec: int, n_line: int) -> float:
    if n_spec + n_line <= 0:
        raise ValueError("need at least one non-target atom")
    return (n_spec * Es + n_line * El) / (n_spec + n_line)


# ---------------------------------------------------------------------------
# Spectra


@dataclass(frozen=True)
class PeakFit:
    center: float
    width: float  # Gaussian sigma
    amplitude: float
    joint: bool = False


def _gauss(x, a, c, s):
    return a * np.exp(-0.5 * ((x - c) / s) ** 2)


def fit_gaussians(detuning, transfer: Mapping[str, np.ndarray]) -> dict:
    """Independent Gaussian fit per class; joint three-peak fit on failure.

    Returns {class: PeakFit, "f_hat": line centre, "k_hat": cross / line}.
    """
    x = np.asarray(detuning, dtype=float)
    out: dict = {}
    failed = []
    for cls, y in transfer.items():
        y = np.asarray(y, dtype=float)
        i = int(np.argmax(y))
        if y[i] <= 0 or np.count_nonzero(y > 0.5 * y[i]) < 1:
            failed.append(cls)
            continue
        above = x[y > 0.5 * y[i]]
        s0 = max((above.max() - above.min()) / 2.355, np.min(np.diff(np.sort(x))) if x.size > 1 else 1.0)
        try:
            p, _ = optimize.curve_fit(_gauss, x, y, p0=[y[i], x[i], s0], maxfev=20000)
            if np.count_nonzero(np.abs(x - p[1]) < 3 * abs(p[2])) < 3:
                raise RuntimeError("too few points on the peak")
            out[cls] = PeakFit(float(p[1]), float(abs(p[2])), float(p[0]))
        except RuntimeError:
            failed.append(cls)
    if failed:
        total = sum(np.asarray(transfer[c], dtype=float) for c in transfer)
        guess = []
        for cls in transfer:
            y = np.asarray(transfer[cls], dtype=float)
            i = int(np.argmax(y))
            guess += [y[i], x[i], (x.max() - x.min()) / 50]
        model = lambda xx, *p: sum(_gauss(xx, *p[3 * j:3 * j + 3]) for j in range(len(transfer)))
        p, _ = optimize.curve_fit(model, x, total, p0=guess, maxfev=50000)
        for j, cls in enumerate(transfer):
            if cls in failed:
                out[cls] = PeakFit(float(p[3 * j + 1]), float(abs(p[3 * j + 2])), float(p[3 * j]), joint=True)
    if "line" in out:
        out["f_hat"] = out["line"].center
        if "cross" in out and out["line"].center:
            out["k_hat"] = out["cross"].center / out["line"].center
    return out


# ---------------------------------------------------------------------------
# Error budget

BUDGET_ROWS = ("i", "ii", "iii", "iv", "v")
BUDGET_LABELS = {
    "i": "Spontaneous emission",
    "ii": "Addressing shift spread",
    "iii": "Addressing microwave amplitude",
    "iv": "Off-resonant excitation",
    "v": "Other sources (residual)",
}
BUDGET_CLASSES = ("spectator", "line", "target")


@dataclass
class ErrorBudget:
    rows: dict = field(default_factory=dict)  # row -> class -> error (or None)
    measured: dict | None = None

    def table(self, scale: float = 1e4) -> str:
        head = f"{'':38s}" + "".join(f"{c:>12s}" for c in BUDGET_CLASSES)
        lines = [f"Error per gate (x1e-4)", head]
        for r in BUDGET_ROWS:
            cells = []
            for c in BUDGET_CLASSES:
                v = self.rows.get(r, {}).get(c)
                cells.append(f"{'-':>12s}" if v is None or (v == 0 and r != "v") else f"{v * scale:12.2f}")
            lines.append(f"{r + '. ' + BUDGET_LABELS[r]:38s}" + "".join(cells))
        if self.measured:
            lines.append(f"{'Measured':38s}" + "".join(
                f"{self.measured[c] * scale:12.2f}" if self.measured.get(c) is not None else f"{'-':>12s}"
                for c in BUDGET_CLASSES))
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row", "source"] + list(BUDGET_CLASSES))
        for r in BUDGET_ROWS:
            w.writerow([r, BUDGET_LABELS[r]] + [
                "" if self.rows.get(r, {}).get(c) is None else f"{self.rows[r][c]:.6e}" for c in BUDGET_CLASSES])
        if self.measured:
            w.writerow(["E", "measured"] + [
                "" if self.measured.get(c) is None else f"{self.measured[c]:.6e}" for c in BUDGET_CLASSES])
        return buf.getvalue()


def mean_sin2_half(dphi_of_eps, sigma: float, order: int = 64) -> float:
    """<sin^2(dphi(eps) / 2)> for eps ~ N(0, sigma) by Gauss-Hermite quadrature."""
    if sigma == 0:
        return float(np.sin(dphi_of_eps(0.0) / 2) ** 2)
    x, w = np.polynomial.hermite_e.hermegauss(order)
    vals = np.sin(dphi_of_eps(sigma * x) / 2) ** 2
    return float(np.sum(w * vals) / np.sum(w))


def scattering_row(f: float, k: float, timing: dyn.StageTiming, noise: NoiseConfig) -> dict:
    """Scattering probability per gate from exposure accounting.

    A line atom spends two stages under one beam, the target one stage as a
    cross atom (k f) and two as a line atom.
    """
    dose = timing.full_power
    f_khz = f / 1e3
    line = noise.scattering_coeff * f_khz * dose * 2
    target = noise.scattering_coeff * f_khz * dose * (k + 2)
    return {"spectator": 0.0, "line": float(line), "target": float(target)}


def gate_leakage(p: dyn.PhaseGateParams, timing: dyn.StageTiming = dyn.StageTiming()) -> dict:
    """Probability of ending outside the qubit after one gate, averaged over |0> and |1>.

    Runs the exact four-stage sequence with the aux amplitude removed after
    each addressing pulse.
    """
    ev = dyn.gate_events(p, timing)
    schedules = {
        "target": dyn.TARGET_A_CLASS,
        "line": {"crossA": "line", "dummyX": "line", "crossB": "spectator", "dummyY": "spectator"},
        "spectator": {k: "spectator" for k in dyn.TARGET_A_CLASS},
    }
    out = {}
    for cls, sched in schedules.items():
        psi0 = np.array([[1, 0, 0], [0, 1, 0]], dtype=complex)
        _, leak = dyn.run_events(ev, psi0, p.delta, dyn.class_shifts(p, sched), return_leak=True)
        out[cls] = float(np.mean(leak))
    return out


def assemble_budget(measured: Mapping[str, float] | None, params: dyn.PhaseGateParams, noise: NoiseConfig,
                    theta: float = math.pi / 2, curvature: float | None = None,
                    timing: dyn.StageTiming = dyn.StageTiming(), leakage: Mapping[str, float] | None = None
                    ) -> ErrorBudget:
    """Rows i-iv from the models, row v as the residual against measured errors.

    params.omega must be the addressing Rabi frequency of the gate.
    Row ii uses dphi = curvature * eps^2 for a fractional shift error eps,
    row iii dphi = theta ((1 + eps)^2 - 1) since the phase scales with the
    microwave power; both are averaged as sin^2(dphi / 2) over the Gaussian
    spread.  Row iv is the exact leakage per gate.
    """
    rows: dict = {r: {c: None for c in BUDGET_CLASSES} for r in BUDGET_ROWS}
    rows["i"].update(scattering_row(params.f, params.k, timing, noise) if noise.scattering_coeff else
                     {"spectator": 0.0, "line": 0.0, "target": 0.0})
    if curvature is None and noise.f_spread:
        curvature = dyn.operating_point(params.f, params.k, params.omega, params.T, timing).curvature
    rows["ii"]["target"] = mean_sin2_half(lambda e: (curvature or 0.0) * e ** 2, noise.f_spread) \
        if noise.f_spread else 0.0
    rows["iii"]["target"] = mean_sin2_half(lambda e: theta * ((1 + e) ** 2 - 1), noise.amplitude_jitter) \
        if noise.amplitude_jitter else 0.0
    if params.omega > 0:
        leak = dict(leakage) if leakage is not None else gate_leakage(params, timing)
    else:
        leak = {c: 0.0 for c in BUDGET_CLASSES}
    rows["iv"].update({c: leak[c] for c in BUDGET_CLASSES})
    if measured:
        for c in BUDGET_CLASSES:
            if measured.get(c) is None:
                continue
            known = sum(rows[r][c] or 0.0 for r in ("i", "ii", "iii", "iv"))
            rows["v"][c] = max(0.0, measured[c] - known)
    return ErrorBudget(rows, dict(measured) if measured else None)
