"""Fast self-checks run by ``phasegate verify``.

Each check returns a CheckResult; none needs a config file.  The set is
chosen to finish in well under two minutes on one core.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import compiler as cp
from . import dynamics as dyn
from .analysis import crosstalk_average, decompose_errors, fit_rb
from .experiments import echo_train_operator, rng_for, synthetic_rb
from .lattice import LatticeConfig
from .simulate import rotation_angle, site_operators, z_phase

RB_LENGTHS = (1, 2, 4, 8, 12, 16, 24, 32)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:28s} {self.detail} ({self.seconds:.1f} s)"


def noiseless_cancellation(tol: float = dyn.INTEGRATOR_TOL, seed: int = 1) -> CheckResult:
    """Rz(pi/2) on two targets in a 40% filled lattice, exact noiseless operators."""
    lat = LatticeConfig()
    mask = rng_for(seed, 0).random(lat.n_sites) < lat.fill_probability
    targets = [(1, 1, 1), (3, 3, 3)]
    for t in targets:
        mask[lat.index(t)] = True
    cfg = replace(cp.CompileConfig(), tol=tol)
    seq = cp.compile_rz(targets, math.pi / 2, cfg, lat)
    occ = np.flatnonzero(mask)
    U = site_operators(seq, lat, occ, tol=tol)
    U = np.einsum("ij,njk->nik", cp.rz(seq.frame_ledger), U)
    t_idx = [lat.index(t) for t in targets]
    is_t = np.isin(occ, t_idx)
    nt_err = float(np.max(rotation_angle(U[~is_t])))
    t_err = float(np.max(np.abs(dyn.wrap_phase(z_phase(U[is_t]) - math.pi / 2))))
    ok = nt_err < 1e-6 and t_err < 1e-4
    return CheckResult("noiseless cancellation", ok,
                       f"non-target max {nt_err:.2e} rad, target max {t_err:.2e} rad")


def rotation_equivalence(n: int = 100, seed: int = 2) -> CheckResult:
    """Ideal unitary of compiled rotations against the analytic rotation."""
    rng = rng_for(seed, 0)
    worst = 0.0
    lat = LatticeConfig()
    for _ in range(n):
        axis = rng.standard_normal(3)
        theta = float(rng.uniform(-math.pi, math.pi))
        seq = cp.compile_rotation(axis, theta, [(1, 1, 1), (3, 3, 3)], cp.CompileConfig(), lat)
        worst = max(worst, cp.operator_distance(cp.ideal_unitary(seq, "target"), cp.rotation(axis, theta)))
    return CheckResult("rotation equivalence", worst < 1e-8, f"max distance {worst:.2e} over {n} rotations")


def perturbative_agreement() -> CheckResult:
    """Second-order phase against the exact gate phase, far from every resonance."""
    f = cp.DEFAULT_F
    worst = 0.0
    for om in (0.5e3, 1e3, 2e3, 4e3):
        for d in (-300e3, -150e3, 200e3, 300e3, 450e3):
            p = dyn.PhaseGateParams(f, 1.8, d, dyn.TWO_PI * om, 120e-6)
            worst = max(worst, abs(dyn.eq1_phase(p) / dyn.exact_target_phase(p) - 1))
    return CheckResult("perturbative vs exact", worst < 0.05, f"max relative deviation {worst:.3f} on 20 points")


def rb_round_trip(seed: int = 3) -> CheckResult:
    recs = synthetic_rb(55e-4, 0.1128, RB_LENGTHS, 9, 100, seed)
    ft = fit_rb(recs, n_boot=100, seed=seed)
    ok_t = abs(ft.E2 - 55e-4) <= 2 * ft.E2_sigma
    recs = synthetic_rb(34e-4, 1.1e-2, RB_LENGTHS, 12, 4800, seed + 1, cls="nontarget")
    fn = fit_rb(recs, n_boot=100, seed=seed)
    ok_n = abs(fn.d_if - 1.1e-2) <= 2 * fn.d_if_sigma
    return CheckResult("benchmarking round trip", ok_t and ok_n,
                       f"E2t {ft.E2 * 1e4:.1f}({ft.E2_sigma * 1e4:.1f})e-4, "
                       f"non-target d_if {fn.d_if:.4f}({fn.d_if_sigma:.4f})")


def error_algebra() -> CheckResult:
    d = decompose_errors(55e-4, 34e-4, 63e-4)
    ct = crosstalk_average(17e-4, 46e-4, 107, 16)
    ok = abs(d.Et - 38e-4) < 1e-12 and abs(d.Es - 17e-4) < 1e-12 and abs(d.El - 46e-4) < 1e-12 \
        and round(ct * 1e4) == 21
    return CheckResult("error algebra", ok, f"E = ({d.Et * 1e4:.0f}, {d.Es * 1e4:.0f}, {d.El * 1e4:.0f})e-4, "
                                            f"crosstalk {ct * 1e4:.2f}e-4")


def echo_exactness() -> CheckResult:
    """Four cycled echoes cancel a Rabi error exactly; XY phases do not."""
    worst_c = worst_xy = 0.0
    for e in (-0.01, 3e-3, 0.02):
        for name in ("cycled", "xy"):
            U = echo_train_operator(4, name, e, 0.0)
            d = cp.operator_distance(U, np.eye(2))
            if name == "cycled":
                worst_c = max(worst_c, d)
            else:
                worst_xy = max(worst_xy, d)
    return CheckResult("echo cancellation N=4", worst_c < 1e-9 and worst_xy > 1e-6,
                       f"cycled {worst_c:.1e}, xy {worst_xy:.1e}")


CHECKS: dict[str, Callable[[], CheckResult]] = {
    "cancellation": noiseless_cancellation,
    "rotation": rotation_equivalence,
    "perturbative": perturbative_agreement,
    "rb": rb_round_trip,
    "algebra": error_algebra,
    "echo": echo_exactness,
}


def run_checks(tol: float = dyn.INTEGRATOR_TOL, names=None) -> list[CheckResult]:
    out = []
    for name, fn in CHECKS.items():
        if names and name not in names:
            continue
        t0 = time.perf_counter()
        r = fn(tol) if name == "cancellation" else fn()
        out.append(replace(r, seconds=time.perf_counter() - t0))
    return out
