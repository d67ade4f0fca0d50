"""Test loss after training relative to the loss at initialization, over several seeds."""

import argparse

import numpy as np

from unroll.experiments import ExperimentConfig, setup_trial, train_config, trial_seed
from unroll.numkit import SeededRng
from unroll.train import train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--w-inf", type=float, default=None)
    ap.add_argument("--epochs", type=int, default=None)
    args = ap.parse_args()
    over = {k: v for k, v in (("w_inf", args.w_inf), ("epochs", args.epochs)) if v is not None}
    cfg = ExperimentConfig(scenario="orthogonal", N=64, n=32, s=4, L=16, **over)
    point = cfg.points()[0]
    ratios = []
    for t in range(args.seeds):
        seed = trial_seed(cfg.seed, point, t)
        st = setup_trial(cfg, point, seed)
        _, hist = train(st.arch, st.spec, st.train.Y, st.train.X, st.test.Y, st.test.X,
                        train_config(cfg, SeededRng(seed).spawn(1).seed))
        ratios.append(hist.test_l2[-1] / hist.test_l2[0])
        print(f"trial {t}: test_l2 {hist.test_l2[0]:.4f} -> {hist.test_l2[-1]:.4f} "
              f"(ratio {ratios[-1]:.3f})")
    print(f"median ratio {np.median(ratios):.3f}")


if __name__ == "__main__":
    main()
