"""How well could any estimator do? Position error bounds across the survey area.

Walks the reference fixture's reference points, prints the lower bound on
RMS position error at a few SNRs, then shows how a Gaussian position prior
(think: the uncertainty of where a fingerprint was really taken) tightens
the bound.

    python demos/bounds_tour.py
"""

import math

import numpy as np

from csiloc import ExperimentConfig
from csiloc.crlb import PerturbationPrior, crlb_perturbed, scene_crlb
from csiloc.errors import SingularFimError
from csiloc.experiments import make_fixture

fx = make_fixture(ExperimentConfig(seed=42))
snrs = [0.0, 10.0, 20.0, 30.0]

print("bound on RMS position error (m) per reference point")
print("rp   x     y    " + "".join(f"{s:>9.0f}dB" for s in snrs))
bounds = {}
for n, rp in enumerate(fx.grid.rp_locations):
    scene = fx.templates[0].with_target(rp)
    row = []
    for snr in snrs:
        try:
            res = scene_crlb(scene, snr)
            bounds[(n, snr)] = res
            row.append(f"{res.epsilon:11.4f}")
        except SingularFimError:
            # two paths with near-equal delay and angle: not separable
            row.append(f"{'singular':>11}")
    print(f"{n:2d}  {rp.x:.1f}  {rp.y:.1f}  " + "".join(row))

# Every +10 dB shrinks the bound by sqrt(10).
ok = [(n, r) for (n, s), r in bounds.items() if s == 20.0]
n0, r20 = ok[0]
print(f"\nratio 10 dB -> 20 dB at rp {n0}: {r20.epsilon / bounds[(n0, 10.0)].epsilon:.6f}"
      f" (1/sqrt(10) = {1 / math.sqrt(10):.6f})")

print("\nadding a position prior at 20 dB (rp %d)" % n0)
for sp in np.logspace(-2, 4, 7):
    e = crlb_perturbed(r20, PerturbationPrior(sp)).epsilon
    print(f"  sigma_p {sp:9.2e} m  ->  bound {e:.6f} m")
print(f"  no prior             ->  bound {r20.epsilon:.6f} m")
