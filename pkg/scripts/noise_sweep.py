"""Final TCP error versus tracker / depth noise on oracle scenes.

    python3 scripts/noise_sweep.py --seeds 30 --track 0 0.5 1 2 4 --depth 0 2
"""
import argparse
import json

import numpy as np

from tcidm.oracle import evaluate, generate, random_scene
from tcidm.pipeline import StageFlags, run_in_memory


def sweep(track_mm, depth_mm, seeds, frames, k, selection):
    flags = StageFlags(k=k, selection=selection)
    rows = []
    for ts in track_mm:
        for ds in depth_mm:
            trans, rot, passed = [], [], 0
            for seed in range(seeds):
                bundle, truth = generate(random_scene(seed, frames=frames, track_sigma=ts / 1e3,
                                                      depth_sigma=ds / 1e3))
                acts, _, _, _ = run_in_memory(bundle, flags)
                m = evaluate(acts, truth)
                trans.append(m.final_translation_m)
                rot.append(m.final_rotation_deg)
                passed += m.passed
            rows.append({"track_mm": ts, "depth_mm": ds,
                         "median_cm": 100 * float(np.median(trans)),
                         "p95_cm": 100 * float(np.percentile(trans, 95)),
                         "median_deg": float(np.median(rot)),
                         "p95_deg": float(np.percentile(rot, 95)),
                         "pass_rate": passed / seeds})
    return rows


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--track", type=float, nargs="+", default=[0, 0.5, 1, 2, 4], help="mm")
    p.add_argument("--depth", type=float, nargs="+", default=[0, 2], help="mm")
    p.add_argument("--seeds", type=int, default=30)
    p.add_argument("--frames", type=int, default=31)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--selection", choices=["global", "ransac"], default="global")
    p.add_argument("--json", help="also write rows here")
    a = p.parse_args()
    rows = sweep(a.track, a.depth, a.seeds, a.frames, a.k, a.selection)
    print(f"{'track':>6} {'depth':>6} {'med cm':>8} {'p95 cm':>8} {'med deg':>8} {'p95 deg':>8} "
          f"{'pass':>5}")
    for r in rows:
        print(f"{r['track_mm']:6.2f} {r['depth_mm']:6.2f} {r['median_cm']:8.3f} {r['p95_cm']:8.3f} "
              f"{r['median_deg']:8.3f} {r['p95_deg']:8.3f} {r['pass_rate']:5.2f}")
    if a.json:
        with open(a.json, "w") as f:
            json.dump(rows, f, indent=1)


if __name__ == "__main__":
    main()
