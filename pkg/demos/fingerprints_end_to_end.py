"""Classification vs regression fingerprinting on the reference fixture.

Simulates CSI at the reference points, trains a KNN baseline, the softmax
classifier and the coordinate regressor, and compares their errors on
off-grid test points. Takes about a minute on one core and matches
``csiloc simulate/train/eval`` with the default config.

    python demos/fingerprints_end_to_end.py
"""

import numpy as np

from csiloc import ExperimentConfig
from csiloc.experiments import run_experiment

cfg = ExperimentConfig(seed=42)

res = run_experiment(cfg)
print(f"{'method':<11}{'mean (m)':>10}{'median (m)':>12}{'p90 (m)':>10}")
for m, rep in res.reports.items():
    p90 = np.quantile(rep.errors, 0.9)
    print(f"{m:<11}{rep.mean_distance_error:10.3f}{rep.median_distance_error:12.3f}{p90:10.3f}")

# The classifier can only output convex combinations of reference points,
# so test points between RPs are pulled toward the grid. The regressor
# interpolates, at the cost of a heavier tail.
hist = res.histories[("regressor", 0)]
print(f"\nregressor training loss: epoch 1 {hist[0]:.3f} -> epoch {len(hist)} {hist[-1]:.3f}")
