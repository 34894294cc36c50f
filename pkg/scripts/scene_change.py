"""Remove one object half-way through the run and check which maps still contain it."""
import argparse

import numpy as np

from semslam.pipeline import PipelineConfig, run_scenario
from semslam.simulator import SceneChangeEvent, make_scenario


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--object", type=int, default=0, help="id of the object to remove")
    ap.add_argument("--radius", type=float, default=0.25)
    args = ap.parse_args()

    for seed in args.seeds:
        base = make_scenario(seed=seed)
        target = base.world.get(args.object)
        sc = make_scenario(seed=seed, events=[SceneChangeEvent(base.n_frames // 2, "remove", target.id)])
        for mode in ("none", "scripted"):
            result = run_scenario(sc, PipelineConfig(oracle=mode))
            d = min((np.linalg.norm(lm.position - target.pos) for lm in result.landmarks), default=np.inf)
            print(f"seed {seed} {mode:>8}: nearest landmark to removed '{target.descriptive}' "
                  f"{d:.2f} m -> {'still mapped' if d <= args.radius else 'gone'}")


if __name__ == "__main__":
    main()
