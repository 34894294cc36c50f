"""APE of the optimized trajectory against plain dead reckoning, for growing run lengths."""
import argparse

from semslam.evaluation import ape
from semslam.pipeline import PipelineConfig, run_scenario
from semslam.simulator import make_scenario


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--frames", type=int, nargs="+", default=[24, 48, 96])
    ap.add_argument("--oracle", choices=["none", "scripted"], default="scripted")
    args = ap.parse_args()

    print(f"{'frames':>6} {'seed':>4} {'slam':>7} {'odometry':>8}")
    for n in args.frames:
        for seed in args.seeds:
            sc = make_scenario(seed=seed, n_frames=n, loops=1.25 * n / 48)
            result = run_scenario(sc, PipelineConfig(oracle=args.oracle))
            gt = sc.gt_trajectory()
            print(f"{n:>6} {seed:>4} {ape(result.trajectory, gt).rmse:7.3f} {ape(sc.odometry_trajectory(), gt).rmse:8.3f}")


if __name__ == "__main__":
    main()
