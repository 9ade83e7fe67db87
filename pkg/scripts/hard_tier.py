"""Hard-tier pass rate (final error < 2 cm and < 10 deg) over many seeded noisy scenes,
optionally with injected outlier and background tracks.

    python3 scripts/hard_tier.py --seeds 100 --outliers 2 --background 5
"""
import argparse
import time

import numpy as np

from tcidm.oracle import evaluate, generate, random_scene
from tcidm.pipeline import StageFlags, run_in_memory


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, default=100)
    p.add_argument("--track-sigma", type=float, default=0.001)
    p.add_argument("--depth-sigma", type=float, default=0.002)
    p.add_argument("--drop-prob", type=float, default=0.0)
    p.add_argument("--outliers", type=int, default=0)
    p.add_argument("--outlier-speed", type=float, default=0.01)
    p.add_argument("--background", type=int, default=0)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--selection", choices=["global", "ransac"], default="global")
    p.add_argument("--smooth", type=int, default=1)
    a = p.parse_args()

    flags = StageFlags(k=a.k, selection=a.selection, smoothing_window=a.smooth,
                       min_visibility_fraction=0.5 if a.drop_prob else 0.8)
    t0 = time.perf_counter()
    errs, failures = [], []
    for seed in range(a.seeds):
        spec = random_scene(seed, track_sigma=a.track_sigma, depth_sigma=a.depth_sigma,
                            drop_prob=a.drop_prob, n_outliers=a.outliers,
                            outlier_speed=a.outlier_speed, n_background=a.background)
        bundle, truth = generate(spec)
        acts, _, _, _ = run_in_memory(bundle, flags)
        m = evaluate(acts, truth)
        errs.append((m.final_translation_m, m.final_rotation_deg))
        if not m.passed:
            failures.append(seed)
    e = np.array(errs)
    print(f"passed {a.seeds - len(failures)}/{a.seeds} in {time.perf_counter() - t0:.1f} s")
    print(f"final translation: median {100 * np.median(e[:, 0]):.3f} cm, "
          f"max {100 * e[:, 0].max():.3f} cm")
    print(f"final rotation:    median {np.median(e[:, 1]):.3f} deg, max {e[:, 1].max():.3f} deg")
    if failures:
        print("failing seeds:", failures)


if __name__ == "__main__":
    main()
