"""Find the line shift f that puts the exact phase extremum at a chosen detuning.

The gate's addressing power is re-solved for every trial f, since the
extremum moves with power.

    python scripts/calibrate_f.py --delta-khz 74.9
"""

import argparse
import math
from dataclasses import replace

from scipy import optimize

from phasegate import compiler as cp
from phasegate import dynamics as dyn
from phasegate.lattice import LatticeConfig


def extremum_at(f: float, theta: float) -> float:
    cfg = replace(cp.CompileConfig(), f=f)
    seq = cp.compile_rz([(1, 1, 1), (3, 3, 3)], theta, cfg, LatticeConfig())
    om = cp.addressing_omega(seq)
    return dyn.operating_point(f, cfg.k, om, cfg.timing.t_address, cfg.timing).delta


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--delta-khz", type=float, default=74.9)
    ap.add_argument("--theta", type=float, default=math.pi / 2)
    ap.add_argument("--bracket-khz", type=float, nargs=2, default=(49.0, 53.0))
    args = ap.parse_args()
    target = args.delta_khz * 1e3
    lo, hi = (b * 1e3 for b in args.bracket_khz)
    f = optimize.brentq(lambda f: extremum_at(f, args.theta) - target, lo, hi, xtol=0.5)
    print(f"f = {f:.1f} Hz puts the extremum at {extremum_at(f, args.theta):.1f} Hz")


if __name__ == "__main__":
    main()
