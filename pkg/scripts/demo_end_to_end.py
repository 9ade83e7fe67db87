"""Simulate a scene, train a gripper head on its features, run the full pipeline from the
manifest, score it and export a CSV for a replay executor.

    python3 scripts/demo_end_to_end.py --out demo_run
"""
import argparse
import json
from pathlib import Path

import numpy as np

from tcidm import fileio
from tcidm.heads import Mlp, TrainConfig, gripper_spec, train
from tcidm.oracle import evaluate, generate, random_scene, write_bundle
from tcidm.pipeline import load_manifest, run_pipeline


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="demo_run")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--track-sigma", type=float, default=0.0005)
    p.add_argument("--depth-sigma", type=float, default=0.001)
    a = p.parse_args()
    out = Path(a.out)

    # a training clip (different seed) supplies feature/aperture pairs for the head
    train_bundle, train_truth = generate(random_scene(a.seed + 1000, frames=61))
    data = [(f.values, y) for f, y in zip(train_bundle.features, train_truth.apertures)]
    dim = len(data[0][0])
    res = train(Mlp.init(gripper_spec(dim, (64, 16)), seed=a.seed), data,
                TrainConfig(epochs=400, batch_size=16))
    print(f"gripper head: final training MSE {res.final_loss:.2e}")

    bundle, truth = generate(random_scene(a.seed, track_sigma=a.track_sigma,
                                          depth_sigma=a.depth_sigma, n_outliers=2,
                                          outlier_speed=0.01, n_background=6))
    manifest = write_bundle(bundle, truth, out / "scene")
    res.model.save(out / "scene" / "gripper_head.json")
    d = json.loads(manifest.read_text())
    d["gripper_weights"] = "gripper_head.json"
    fileio.write_json(manifest, d)

    run = run_pipeline(load_manifest(manifest), out / "run")
    for w in run.report.warnings:
        print("warning:", w)
    if run.report.error:
        raise SystemExit(run.report.error)
    print(f"scale/shift: s={run.scale_shift.s:.6f} d={run.scale_shift.d:.6f} "
          f"(true {truth.s}, {truth.d})")
    m = evaluate(run.actions, truth)
    print(f"final TCP error {100 * m.final_translation_m:.3f} cm / {m.final_rotation_deg:.3f} deg "
          f"-> {'pass' if m.passed else 'fail'}")
    grip = np.array([a.gripper for a in run.actions])
    print(f"gripper MAE vs truth: {np.mean(np.abs(grip - truth.apertures[1:])):.3f}")
    n = fileio.export_actions(run.actions_path, out / "run" / "actions.csv", "csv")
    print(f"exported {n} actions to {out / 'run' / 'actions.csv'}")


if __name__ == "__main__":
    main()
