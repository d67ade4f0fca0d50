"""Generalization gap versus measurements and depth, and the bound versus sample size.

    python scripts/trends.py --out runs/trends --threads 4
"""

import argparse
import os
from pathlib import Path

import numpy as np

from unroll.bounds import bound_report
from unroll.cli import main as cli_main
from unroll.data import read_results_csv
from unroll.experiments import ExperimentConfig, setup_trial, trial_seed
from unroll.numkit import frobenius_norm

HERE = Path(__file__).resolve().parent


def ge_table(rows):
    ge = {}
    for r in rows:
        ge.setdefault((r["L"], r["n"]), []).append(r["ge_abs"])
    Ls = sorted({k[0] for k in ge})
    ns = sorted({k[1] for k in ge})
    print("mean |GE| (rows: L, columns: n)")
    print("L".rjust(4) + "".join(f"{n:>12}" for n in ns))
    for L in Ls:
        print(f"{L:>4}" + "".join(f"{np.mean(ge[(L, n)]):>12.5f}" for n in ns))


def bound_vs_m(ms=(500, 2000, 8000), repeats=10):
    cfg = ExperimentConfig(scenario="orthogonal", N=40, n=20, s=4, L=10, m_train=max(ms))
    print("class bound versus m (N=40, n=20, L=10)")
    for m in ms:
        vals = []
        for t in range(repeats):
            point = (40, 20, 4, 10, m)
            st = setup_trial(cfg, point, trial_seed(cfg.seed, point, t))
            vals.append(bound_report(st.arch, st.spec, frobenius_norm(st.train.Y),
                                     st.train.m, 0.0).full_bound)
        print(f"  m={m:<6} bound={np.mean(vals):.5g}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path, default=HERE / "configs" / "trend.json")
    ap.add_argument("--out", type=Path, default=Path("runs/trends"))
    ap.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    args = ap.parse_args()
    rc = cli_main(["experiment", "--config", str(args.config), "--out", str(args.out),
                   "--threads", str(args.threads)])
    if rc:
        raise SystemExit(rc)
    ge_table(read_results_csv(args.out / "results.csv"))
    bound_vs_m()


if __name__ == "__main__":
    main()
