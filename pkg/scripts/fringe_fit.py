"""Full-scale Ramsey fringe (24 gate pairs) and per-class sinusoid fits.

    python scripts/fringe_fit.py --shots 100 --seed 0
"""

import argparse
import math

from phasegate import dynamics as dyn
from phasegate import experiments as ex
from phasegate.analysis import fit_sinusoid


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--shots", type=int, default=100)
    ap.add_argument("--targets", type=int, default=48)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()
    theta = math.pi / 2
    recs = ex.run_fringe(ex.Setup(seed=args.seed, workers=args.workers), theta, n_targets=args.targets,
                         shots=args.shots)
    for cls, want in (("target", theta), ("line", 0.0), ("spectator", 0.0), ("nontarget", 0.0)):
        rs = [r for r in recs if r.cls == cls and r.n_atoms]
        if not rs:
            continue
        fit = fit_sinusoid([r.alpha for r in rs], [r.mean_p1 for r in rs])
        err = float(dyn.wrap_phase(fit.phi - want))
        print(f"{cls:10s} n^2 {fit.n ** 2:.4f}  sin(theta) {math.sin(fit.theta):.4f}  "
              f"phase {fit.phi:+.4f} rad (error {err * 1e3:+.1f} mrad)  atoms {sum(r.n_atoms for r in rs)}")


if __name__ == "__main__":
    main()
