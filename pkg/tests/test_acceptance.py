"""Acceptance gate: one check per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` to see the report lines.
"""

import dataclasses
import math
import os
import time

import numpy as np
import pytest

from oracles import coordinate_descent_lasso, lasso_objective
from unroll.bounds import (
    bound_report, klmoq, psi_integral_check, z_sequence, z_sequence_sum,
)
from unroll.cli import build_parser, load_experiment_config, main
from unroll.data import normalize_measurement, read_results_csv
from unroll.experiments import (
    ExperimentConfig, apply_full_scale, grad_suite, output_audit_suite,
    perturbation_audit_suite, psi_suite, setup_trial, train_config, trial_seed,
)
from unroll.model import Architecture, DenseDict, Params, forward, ista_reference, l1_objective
from unroll.numkit import SeededRng, frobenius_norm, psi, random_gaussian_matrix, random_orthogonal
from unroll.train import train

WORKERS = max(1, os.cpu_count() or 1)


def report(n, name, ok, detail, seconds):
    status = "PASS" if ok else "FAIL"
    print(f"\n[{status}] criterion {n}: {name} | {detail} | {seconds:.1f}s")


def test_1_gradient_correctness():
    t0 = time.perf_counter()
    res = grad_suite(seed=0, count=100, tolerance=1e-5)
    dt = time.perf_counter() - t0
    ok = not res.violations and res.worst < 1e-5 and dt < 60
    report(1, "gradient correctness", ok,
           f"cases={res.cases} violations={len(res.violations)} worst_rel_err={res.worst:.3g}", dt)
    assert not res.violations
    assert res.worst < 1e-5
    assert dt < 60


def test_2_ista_equivalence():
    t0 = time.perf_counter()
    worst_fwd, worst_gap, monotone = 0.0, -math.inf, True
    for seed in range(50):
        r = SeededRng(seed)
        N = 4 + seed % 9            # 4..12
        n = 2 + seed % (N - 1)
        A = normalize_measurement(random_gaussian_matrix(r, n, N))
        Phi = random_orthogonal(r, N)
        y = random_gaussian_matrix(r, n, 1).ravel()
        L, tau, lam = 1 + seed % 20, 1.0, 0.05
        arch = Architecture(L, (N,) * (L + 2), (0,) * (L + 1), (DenseDict(A, N, N),), 1e9)
        cache = forward(arch, Params([Phi], np.full(L, tau), np.full(L, lam)), y[:, None])
        z = ista_reference(A, Phi, tau, lam, y, L)
        worst_fwd = max(worst_fwd, float(np.max(np.abs(cache.Z[L][:, 0] - z))))
        if seed % 5 == 0:
            z_ista = ista_reference(A, Phi, tau, lam, y, 5000)
            z_cd = coordinate_descent_lasso(A @ Phi, y, lam)
            gap = l1_objective(z_ista, A, Phi, y, lam) - lasso_objective(A @ Phi, y, lam, z_cd)
            worst_gap = max(worst_gap, gap)
            zk = np.zeros(N)
            prev = l1_objective(zk, A, Phi, y, lam)
            for _ in range(300):
                zk = ista_reference(A, Phi, tau, lam, y, 1, z0=zk)
                cur = l1_objective(zk, A, Phi, y, lam)
                monotone &= cur <= prev + 1e-13
                prev = cur
    dt = time.perf_counter() - t0
    ok = worst_fwd <= 1e-12 and worst_gap <= 1e-6 and monotone
    report(2, "ISTA oracle equivalence", ok,
           f"max|fwd-ista|={worst_fwd:.2g} max_objective_gap={worst_gap:.2g} monotone={monotone}", dt)
    assert worst_fwd <= 1e-12
    assert worst_gap <= 1e-6
    assert monotone


def test_3_bound_audits():
    t0 = time.perf_counter()
    out = output_audit_suite(seed=0, count=1000)
    pert = perturbation_audit_suite(seed=0, count=1000)
    dt = time.perf_counter() - t0
    ok = not out.violations and not pert.violations and dt < 300
    report(3, "output and perturbation bound audits", ok,
           f"output {len(out.violations)}/{out.cases} (worst {out.worst:.3f}), "
           f"perturbation {len(pert.violations)}/{pert.cases} (worst {pert.worst:.3f})", dt)
    assert not out.violations
    assert not pert.violations
    assert dt < 300


def test_4_psi_machinery():
    t0 = time.perf_counter()
    res = psi_suite(20)
    zero = psi(0.0) == 0.0
    cap_ok = all(psi(t) <= math.sqrt(math.log(math.e * (1 + t))) for t in np.logspace(-2, 2, 401))
    axis = np.logspace(-3, 3, 20)
    integ_ok = all(psi_integral_check(float(a), float(b)).integral
                   <= a * psi(b / a) * (1 + 1e-9) for a in axis for b in axis)
    dt = time.perf_counter() - t0
    ok = zero and cap_ok and integ_ok and not res.violations
    report(4, "psi machinery", ok,
           f"psi(0)=0:{zero} cap:{cap_ok} integral 20x20:{integ_ok} suite_violations={len(res.violations)}",
           dt)
    assert zero and cap_ok and integ_ok
    assert not res.violations


def test_5_bound_constants():
    t0 = time.perf_counter()
    unit = klmoq(1.0, 1.0, 1.0, 1.0, 1.0, 1, 1.0, 1, 1)
    z_err = 0.0
    for alpha in (0.3, 0.9, 1.0, 1.2, 2.5):
        for L in (1, 3, 8, 20):
            a, b = z_sequence(alpha, 0.6, 1.4, L), z_sequence_sum(alpha, 0.6, 1.4, L)
            z_err = max(z_err, max(abs(x - y) / max(abs(y), 1e-300) for x, y in zip(a, b)))
    ineq = True
    for L in range(1, 65):
        for tau, b, d in ((1.0, 1.0, 1.0), (0.5, 1.4, 1.4), (0.2, 2.2, 2.5)):
            if tau * b * b > 1:
                continue
            for m, b_in in ((1, 1.0), (2000, 0.8)):
                K, _, _, Q = klmoq(1.0, tau, 0.05, b, d, L, math.sqrt(m) * b_in, m, 16)
                ineq &= K <= tau * L * L * math.sqrt(m) * b_in * (1 + 1e-12)
                ineq &= Q <= L * (L + 1) * tau * b * d * math.sqrt(m) * b_in * (1 + 1e-12)
    dt = time.perf_counter() - t0
    ok = unit == (1.0, 2.0, 1.0, 2.0) and z_err <= 1e-12 and ineq
    report(5, "bound constants", ok, f"unit={unit} z_rel_err={z_err:.2g} inequalities={ineq}", dt)
    assert unit == (1.0, 2.0, 1.0, 2.0)
    assert z_err <= 1e-12
    assert ineq


def test_6_trends(tmp_path):
    t0 = time.perf_counter()
    cfg = tmp_path / "trend.json"
    cfg.write_text('{"scenario": "orthogonal", "N": 40, "n": [10, 20, 30], "s": 4, '
                   '"L": [5, 10, 15], "m_train": 2000, "repeats": 10}')
    rc = main(["experiment", "--config", str(cfg), "--out", str(tmp_path / "out"),
               "--threads", str(WORKERS)])
    assert rc == 0
    rows = read_results_csv(tmp_path / "out" / "results.csv")
    ge = {}
    for r in rows:
        ge.setdefault((r["L"], r["n"]), []).append(r["ge_abs"])
    trend_a, lines = True, []
    for L in (5, 10, 15):
        means = [float(np.mean(ge[(L, n)])) for n in (10, 20, 30)]
        lines.append(f"L={L}: " + " -> ".join(f"{v:.4f}" for v in means))
        trend_a &= means[0] > means[1] > means[2]

    # bound versus sample size at fixed geometry, averaged over seeds
    base = ExperimentConfig(scenario="orthogonal", N=40, n=20, s=4, L=10, m_train=8000)
    bnd = []
    for m in (500, 2000, 8000):
        vals = []
        for t in range(10):
            point = (40, 20, 4, 10, m)
            st = setup_trial(base, point, trial_seed(base.seed, point, t))
            rep = bound_report(st.arch, st.spec, frobenius_norm(st.train.Y), st.train.m, 0.0)
            vals.append(rep.full_bound)
        bnd.append(float(np.mean(vals)))
    trend_b = bnd[0] > bnd[1] > bnd[2]
    dt = time.perf_counter() - t0
    ok = trend_a and trend_b and dt < 1800
    report(6, "trend reproduction", ok,
           f"GE in n: {'; '.join(lines)} | bound in m: "
           + " -> ".join(f"{v:.4g}" for v in bnd), dt)
    assert trend_a, lines
    assert trend_b, bnd
    assert dt < 1800


def test_7_training_efficacy():
    t0 = time.perf_counter()
    cfg = ExperimentConfig(scenario="orthogonal", N=64, n=32, s=4, L=16)
    point = cfg.points()[0]
    ratios = []
    for t in range(10):
        seed = trial_seed(cfg.seed, point, t)
        st = setup_trial(cfg, point, seed)
        _, hist = train(st.arch, st.spec, st.train.Y, st.train.X, st.test.Y, st.test.X,
                        train_config(cfg, SeededRng(seed).spawn(1).seed))
        ratios.append(hist.test_l2[-1] / hist.test_l2[0])
    med = float(np.median(ratios))
    dt = time.perf_counter() - t0
    ok = med < 0.5 and dt < 600
    report(7, "training efficacy", ok,
           f"median test_l2 trained/init={med:.3f} (range {min(ratios):.3f}..{max(ratios):.3f})", dt)
    assert med < 0.5
    assert dt < 600


def test_8_protocol_fidelity():
    t0 = time.perf_counter()
    d = ExperimentConfig().to_dict()
    args = build_parser().parse_args(["experiment", "--paper-scale"])
    big = load_experiment_config(args).to_dict()
    conv = load_experiment_config(build_parser().parse_args(["experiment", "--paper-scale"]))
    conv = dataclasses.replace(conv, scenario="convolutional")
    ok = (d["lr"] == 0.01 and d["epochs"] == 10 and big["m_train"] == [10000]
          and big["m_test"] == 50000 and big["N"] == [120] and conv.kernel_len == 7
          and big["lr"] == 0.01 and big["epochs"] == 10)
    dt = time.perf_counter() - t0
    report(8, "protocol fidelity", ok,
           f"lr={d['lr']} epochs={d['epochs']} paper-scale m_train={big['m_train']} "
           f"m_test={big['m_test']} N={big['N']} kernel_len={conv.kernel_len}", dt)
    assert ok


def test_9_determinism(tmp_path):
    t0 = time.perf_counter()
    cfg = tmp_path / "det.json"
    cfg.write_text('{"scenario": "alternating", "N": 16, "n": [6, 10], "s": 3, "L": [3, 4], '
                   '"m_train": 200, "m_test": 200, "epochs": 2, "repeats": 2}')
    outs = []
    for name, threads in (("a", 1), ("b", 1), ("c", max(2, WORKERS))):
        rc = main(["experiment", "--config", str(cfg), "--seed", "2024", "--out",
                   str(tmp_path / name), "--threads", str(threads)])
        assert rc == 0
        outs.append(tuple((tmp_path / name / f).read_bytes()
                          for f in ("results.csv", "summary.csv")))
    ok = outs[0] == outs[1] == outs[2]
    dt = time.perf_counter() - t0
    report(9, "determinism", ok, "repeat run and threaded run byte-identical" if ok
           else "CSV bytes differ", dt)
    assert ok
