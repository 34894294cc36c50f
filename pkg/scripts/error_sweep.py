"""How much oracle noise the feedback loop tolerates: F1 and false positives vs error rate."""
import argparse

import numpy as np

from semslam.evaluation import landmark_prf
from semslam.pipeline import PipelineConfig, run_scenario
from semslam.simulator import make_scenario


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--rates", type=float, nargs="+", default=[0.0, 0.1, 0.2, 0.4])
    args = ap.parse_args()

    print(f"{'error':>5} {'F1':>5} {'FP':>5}")
    for rate in args.rates:
        f1, fp = [], []
        for seed in args.seeds:
            sc = make_scenario(seed=seed)
            prf = landmark_prf(run_scenario(sc, PipelineConfig(oracle="scripted"), error_rate=rate).to_map(), sc.world)
            f1.append(prf.f1)
            fp.append(prf.false_pos)
        print(f"{rate:5.2f} {np.mean(f1):5.2f} {np.mean(fp):5.1f}")


if __name__ == "__main__":
    main()
