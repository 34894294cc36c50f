"""Oracle on vs off over several seeds: landmark P/R/F1, false positives and APE."""
import argparse
import json

from semslam.evaluation import ape, landmark_prf
from semslam.pipeline import PipelineConfig, run_scenario
from semslam.simulator import make_scenario


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--frames", type=int, default=48)
    ap.add_argument("--json", action="store_true")
    args = ap.parse_args()

    rows = []
    for seed in args.seeds:
        sc = make_scenario(seed=seed, n_frames=args.frames)
        for mode in ("none", "scripted"):
            result = run_scenario(sc, PipelineConfig(oracle=mode))
            prf = landmark_prf(result.to_map(), sc.world)
            rows.append({
                "seed": seed, "oracle": mode, **prf.to_dict(),
                "ape_rmse": ape(result.trajectory, sc.gt_trajectory()).rmse,
                "edits": len(result.edit_log.mutations),
            })
    if args.json:
        print(json.dumps(rows, indent=2))
        return
    print(f"{'seed':>4} {'oracle':>8} {'P':>5} {'R':>5} {'F1':>5} {'est':>4} {'FP':>4} {'APE':>7} {'edits':>5}")
    for r in rows:
        print(f"{r['seed']:>4} {r['oracle']:>8} {r['precision']:5.2f} {r['recall']:5.2f} {r['f1']:5.2f} "
              f"{r['est_count']:>4} {r['false_pos']:>4} {r['ape_rmse']:7.3f} {r['edits']:>5}")


if __name__ == "__main__":
    main()
