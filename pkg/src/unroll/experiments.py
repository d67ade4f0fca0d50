"""Scenario wiring, per-trial runners and verification suites used by the CLI."""

from __future__ import annotations

import dataclasses
import hashlib
import itertools
import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import bounds
from .data import (
    CONVOLUTIONAL, GAUSSIAN, ORTHOGONAL, Dataset, SyntheticSpec, gen_synthetic, load_idx,
    mnist_dataset, mnist_dir, normalize_measurement,
)
from .model import Architecture, ConvDict, DenseDict, HypothesisClassSpec, Params, forward
from .numkit import SeededRng, frobenius_norm, psi, random_gaussian_matrix, random_orthogonal
from .train import CheckFailed, TrainConfig, grad_check, l2_loss, train

log = logging.getLogger(__name__)

SCENARIOS = ("orthogonal", "overcomplete", "non_orthogonal", "alternating", "convolutional",
             "learned_thresholds", "mnist")

# data law per synthetic scenario
_DICT_KIND = {
    "orthogonal": ORTHOGONAL,
    "learned_thresholds": ORTHOGONAL,
    "alternating": ORTHOGONAL,
    "non_orthogonal": GAUSSIAN,
    "overcomplete": GAUSSIAN,
    "convolutional": CONVOLUTIONAL,
}

FULL_SCALE = {"m_train": [10000], "m_test": 50000, "N": [120]}
MNIST_PIXELS = 784


class ConfigError(ValueError):
    pass


def _as_list(v):
    return list(v) if isinstance(v, (list, tuple)) else [v]


@dataclass
class ExperimentConfig:
    """Grid, training, hypothesis-class and bookkeeping knobs of one run.

    Grid axes (N, n, s, L, m_train) accept a scalar or a list. ``None`` for
    ``p``, ``train_lambda``, ``ortho_weight`` and ``r2`` means "scenario
    default"; ``None`` for ``b_in`` / ``b_out`` means "measure on the train
    split". ``y_fro`` and ``m_bound`` override the data-derived ||Y||_F and
    sample count used by the ``bound`` subcommand.
    """

    scenario: str = "orthogonal"
    N: list = field(default_factory=lambda: [64])
    n: list = field(default_factory=lambda: [32])
    s: list = field(default_factory=lambda: [4])
    L: list = field(default_factory=lambda: [16])
    m_train: list = field(default_factory=lambda: [2000])
    m_test: int = 5000
    p: int = None
    kernel_len: int = 7
    lr: float = 0.01
    epochs: int = 10
    batch_size: int = 128
    train_tau: bool = False
    train_lambda: bool = None
    ortho_weight: float = None
    w_inf: float = 1.4
    tau0: float = 1.0
    r1: float = 0.0
    lambda0: float = 0.05
    r2: float = None
    delta: float = 0.05
    b_in: float = None
    b_out: float = None
    repeats: int = 10
    seed: int = 0
    record_runtime: bool = False
    y_fro: float = None
    m_bound: int = None

    def __post_init__(self):
        for axis in ("N", "n", "s", "L", "m_train"):
            vals = _as_list(getattr(self, axis))
            if not vals:
                raise ConfigError(f"grid axis {axis} is empty")
            if any(not isinstance(v, int) or isinstance(v, bool) or v < 1 for v in vals):
                raise ConfigError(f"grid axis {axis} must hold positive integers")
            setattr(self, axis, vals)
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}; choose from {SCENARIOS}")
        if self.repeats < 1:
            raise ConfigError("repeats must be at least 1")
        if not 0 < self.delta < 1:
            raise ConfigError("delta must lie in (0, 1)")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.epochs < 0 or self.batch_size < 1 or self.m_test < 1:
            raise ConfigError("epochs >= 0, batch_size >= 1 and m_test >= 1 required")
        if not (self.w_inf > 0 and self.tau0 > 0 and self.lambda0 > 0):
            raise ConfigError("w_inf, tau0 and lambda0 must be positive")
        if self.r1 < 0 or not self.r1 < self.tau0:
            raise ConfigError("need 0 <= r1 < tau0")
        if self.r2 is not None and (self.r2 < 0 or not self.r2 < self.lambda0):
            raise ConfigError("need 0 <= r2 < lambda0")
        if self.kernel_len < 1:
            raise ConfigError("kernel_len must be positive")
        if not self.points():
            raise ConfigError("grid has no point with n <= N")

    # scenario defaults -----------------------------------------------------

    @property
    def eff_ortho_weight(self) -> float:
        if self.ortho_weight is not None:
            return self.ortho_weight
        return 0.1 if self.scenario in ("orthogonal", "alternating") else 0.0

    @property
    def eff_train_lambda(self) -> bool:
        if self.train_lambda is not None:
            return self.train_lambda
        return self.scenario == "learned_thresholds"

    @property
    def eff_r2(self) -> float:
        if self.r2 is not None:
            return self.r2
        return 0.04 if self.scenario == "learned_thresholds" else 0.0

    def eff_p(self, N: int) -> int:
        if self.scenario != "overcomplete":
            return N
        return self.p if self.p is not None else 2 * N

    def points(self) -> list:
        """Grid points (N, n, s, L, m_train) with n <= N and s <= p, in declaration order."""
        Ns = [MNIST_PIXELS] if self.scenario == "mnist" else self.N
        out = []
        for N, n, s, L, m in itertools.product(Ns, self.n, self.s, self.L, self.m_train):
            if n <= N and s <= self.eff_p(N):
                out.append((N, n, s, L, m))
        return out

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def config_from_dict(cls, d: dict):
    """Build dataclass ``cls`` from ``d``, rejecting unknown keys."""
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    try:
        return cls(**d)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def apply_full_scale(cfg: ExperimentConfig) -> ExperimentConfig:
    return dataclasses.replace(cfg, **FULL_SCALE)


def trial_seed(seed: int, point: tuple, trial: int) -> int:
    """seed XOR a stable 64-bit hash of (grid point, trial)."""
    key = json.dumps([list(point), trial]).encode()
    h = int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")
    return (int(seed) ^ h) & ((1 << 64) - 1)


# ---------------------------------------------------------------------------
# scenario builders
# ---------------------------------------------------------------------------

def build_architecture(scenario: str, A: np.ndarray, N: int, p: int, L: int,
                       kernel_len: int, b_out: float) -> Architecture:
    if scenario == "convolutional":
        space = ConvDict(A, kernel_len, N)
        return Architecture(L, (N,) * (L + 2), (0,) * (L + 1), (space,), b_out)
    if scenario == "alternating":
        spaces = (DenseDict(A, N, N), DenseDict(A, N, N))
        # odd layers use the first dictionary, even layers (including L+1 when even) the second
        schedule = tuple(0 if l % 2 == 1 else 1 for l in range(1, L + 2))
        return Architecture(L, (N,) * (L + 2), schedule, spaces, b_out)
    space = DenseDict(A, N, p)
    return Architecture(L, (p,) * (L + 1) + (N,), (0,) * (L + 1), (space,), b_out)


def class_spec(cfg: ExperimentConfig, L: int, b_in: float, b_out: float) -> HypothesisClassSpec:
    return HypothesisClassSpec(
        w_inf=cfg.w_inf, tau0=np.full(L, cfg.tau0), r1=cfg.r1,
        lambda0=np.full(L, cfg.lambda0), r2=cfg.eff_r2, b_in=b_in, b_out=b_out, delta=cfg.delta)


def train_config(cfg: ExperimentConfig, seed: int) -> TrainConfig:
    return TrainConfig(learning_rate=cfg.lr, epochs=cfg.epochs, batch_size=cfg.batch_size,
                       train_tau=cfg.train_tau, train_lambda=cfg.eff_train_lambda,
                       ortho_weight=cfg.eff_ortho_weight, seed=seed)


def load_data(cfg: ExperimentConfig, point: tuple, seed: int):
    """(train, test) datasets for one grid point."""
    N, n, s, L, m_train = point
    if cfg.scenario == "mnist":
        d = mnist_dir()
        rng = SeededRng(seed)
        A = normalize_measurement(random_gaussian_matrix(rng, n, MNIST_PIXELS))
        tr = mnist_dataset(load_idx(d / "train-images-idx3-ubyte"), A, m_train)
        te = mnist_dataset(load_idx(d / "t10k-images-idx3-ubyte"), A, cfg.m_test)
        return tr, te
    spec = SyntheticSpec(N=N, n=n, s=s, m_train=m_train, m_test=cfg.m_test,
                         dict_kind=_DICT_KIND[cfg.scenario], seed=seed, p=cfg.eff_p(N),
                         kernel_len=cfg.kernel_len)
    return gen_synthetic(spec).split(m_train)


@dataclass
class TrialSetup:
    arch: Architecture
    spec: HypothesisClassSpec
    train: Dataset
    test: Dataset


def setup_trial(cfg: ExperimentConfig, point: tuple, seed: int) -> TrialSetup:
    N, n, s, L, m_train = point
    tr, te = load_data(cfg, point, seed)
    b_in = cfg.b_in if cfg.b_in is not None else tr.b_in()
    b_out = cfg.b_out if cfg.b_out is not None else max(b_in, tr.x_max())
    arch = build_architecture(cfg.scenario, tr.A, N, cfg.eff_p(N), L, cfg.kernel_len, b_out)
    return TrialSetup(arch, class_spec(cfg, L, b_in, b_out), tr, te)


def run_trial(task) -> dict:
    """Generate data, train, measure GE and evaluate the bounds for one (point, trial)."""
    cfg_dict, point, trial = task
    cfg = ExperimentConfig(**cfg_dict)
    t0 = time.perf_counter()
    seed = trial_seed(cfg.seed, point, trial)
    st = setup_trial(cfg, point, seed)
    tseed = SeededRng(seed).spawn(1).seed
    params, hist = train(st.arch, st.spec, st.train.Y, st.train.X, st.test.Y, st.test.X,
                         train_config(cfg, tseed))
    y_fro = frobenius_norm(st.train.Y)
    rep = bounds.bound_report(st.arch, st.spec, y_fro, st.train.m, 0.0, params)
    N, n, s, L, m_train = point
    train_l2, test_l2 = hist.train_l2[-1], hist.test_l2[-1]
    return {
        "scenario": cfg.scenario, "N": N, "n": n, "s": s, "p": cfg.eff_p(N),
        "kernel_len": cfg.kernel_len if cfg.scenario == "convolutional" else None,
        "L": L, "J": st.arch.J, "K": st.arch.K, "m_train": st.train.m, "m_test": st.test.m,
        "seed": seed, "trial": trial, "epochs": cfg.epochs, "lr": cfg.lr,
        "r1": cfg.r1, "r2": cfg.eff_r2,
        "train_mse": hist.train_mse[-1], "test_mse": hist.test_mse[-1],
        "train_l2": train_l2, "test_l2": test_l2,
        "ge_signed": test_l2 - train_l2, "ge_abs": abs(train_l2 - test_l2),
        "alpha": rep.alpha, "alpha_mode": rep.alpha_mode, "b_inf": rep.b_inf,
        "d_inf": rep.d_inf, "w_inf": rep.w_inf, "y_fro": y_fro,
        "KL": rep.k_l, "ML": rep.m_l, "OL": rep.o_l, "QL": rep.q_l,
        "rad_bound": rep.rad_bound, "bound_thm1": rep.full_bound,
        "bound_cor1": rep.corollary_bound,
        "runtime_s": time.perf_counter() - t0 if cfg.record_runtime else 0.0,
    }


def experiment_tasks(cfg: ExperimentConfig) -> list:
    d = cfg.to_dict()
    return [(d, pt, t) for pt in cfg.points() for t in range(cfg.repeats)]


SUMMARY_METRICS = ("train_l2", "test_l2", "ge_signed", "ge_abs", "rad_bound", "bound_thm1",
                   "bound_cor1")
SUMMARY_KEYS = ("scenario", "N", "n", "s", "p", "L", "m_train", "m_test")
SUMMARY_COLUMNS = list(SUMMARY_KEYS) + ["repeats"] + [
    f"{m}_{stat}" for m in SUMMARY_METRICS for stat in ("mean", "std")]


def summarize(rows: list) -> list:
    """Mean and (population) standard deviation per grid point, in first-seen order."""
    groups = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in SUMMARY_KEYS), []).append(r)
    out = []
    for key, rs in groups.items():
        row = dict(zip(SUMMARY_KEYS, key))
        row["repeats"] = len(rs)
        for m in SUMMARY_METRICS:
            vals = [r[m] for r in rs if r[m] is not None]
            row[f"{m}_mean"] = float(np.mean(vals)) if vals else None
            row[f"{m}_std"] = float(np.std(vals)) if vals else None
        out.append(row)
    return out


# ---------------------------------------------------------------------------
# verification suites
# ---------------------------------------------------------------------------

@dataclass
class VerifyConfig:
    seed: int = 0
    grad_configs: int = 100
    grad_tolerance: float = 1e-5
    output_audits: int = 1000
    perturbation_audits: int = 1000
    psi_grid: int = 20
    inflate_lhs: float = 1.0   # harness self-test hook; 1.0 in real runs

    def __post_init__(self):
        if min(self.grad_configs, self.output_audits, self.perturbation_audits) < 0:
            raise ConfigError("suite sizes must be nonnegative")
        if self.psi_grid < 1:
            raise ConfigError("psi_grid must be positive")
        if not self.grad_tolerance > 0 or not self.inflate_lhs > 0:
            raise ConfigError("grad_tolerance and inflate_lhs must be positive")


GRAD_KINDS = ("dense", "overcomplete", "alternating", "conv", "pooled", "untied")


def _uniform(rng: SeededRng, lo: float, hi: float) -> float:
    return lo + (hi - lo) * float(rng.uniform(1)[0])


def _choice(rng: SeededRng, n: int) -> int:
    return int(rng.integers([n])[0])


def random_small_arch(rng: SeededRng, kind: str, b_out: float = None, L: int = None):
    """Small random architecture of the given kind plus measurements ``Y`` and targets ``X``."""
    N = 4 + _choice(rng, 4)
    n = 2 + _choice(rng, N - 2)
    L = L if L is not None else 1 + _choice(rng, 4)
    m = 3 + _choice(rng, 4)
    A = normalize_measurement(random_gaussian_matrix(rng, n, N))
    pooling = None
    if kind == "overcomplete":
        p = N + 1 + _choice(rng, 3)
        spaces = (DenseDict(A, N, p),)
        widths = (p,) * (L + 1) + (N,)
        schedule = (0,) * (L + 1)
    elif kind == "alternating":
        spaces = (DenseDict(A, N, N), DenseDict(A, N, N))
        widths = (N,) * (L + 2)
        schedule = tuple(0 if l % 2 == 1 else 1 for l in range(1, L + 2))
    elif kind == "conv":
        spaces = (ConvDict(A, 2 + _choice(rng, N - 2), N),)
        widths = (N,) * (L + 2)
        schedule = (0,) * (L + 1)
    elif kind == "untied":
        spaces = tuple(DenseDict(A, N, N) for _ in range(L + 1))
        widths = (N,) * (L + 2)
        schedule = tuple(range(L + 1))
    else:
        spaces = (DenseDict(A, N, N),)
        widths = (N,) * (L + 2)
        schedule = (0,) * (L + 1)
        if kind == "pooled":
            pooling = tuple(0.9 * random_orthogonal(rng, N) for _ in range(L))
    X = random_gaussian_matrix(rng, N, m)
    Y = A @ X
    if b_out is None:
        b_out = _uniform(rng, 0.3, 1.5)
    arch = Architecture(L, widths, schedule, spaces, b_out, pooling)
    return arch, Y, X


def random_params(rng: SeededRng, arch: Architecture, scale_lo=0.3, scale_hi=1.5) -> Params:
    W = []
    for sp in arch.spaces:
        w = rng.normal(sp.size).reshape(sp.shape)
        W.append(w * (_uniform(rng, scale_lo, scale_hi) / sp.block_norm(w)))
    tau = np.array([_uniform(rng, 0.2, 1.5) for _ in range(arch.L)])
    lam = np.array([_uniform(rng, 0.01, 0.3) for _ in range(arch.L)])
    return Params(W, tau, lam)


@dataclass
class SuiteResult:
    name: str
    cases: int
    violations: list
    worst: float
    seconds: float

    def to_dict(self):
        return dataclasses.asdict(self)


def grad_suite(seed: int, count: int, tolerance: float) -> SuiteResult:
    """Finite-difference gradient checks over every map kind, loss and trainable-flag combination."""
    t0 = time.perf_counter()
    viol, worst = [], 0.0
    for i in range(count):
        kind = GRAD_KINDS[i % len(GRAD_KINDS)]
        loss = ("mse", "l2")[(i // len(GRAD_KINDS)) % 2]
        flags = (i // (2 * len(GRAD_KINDS))) % 4
        train_tau, train_lam = bool(flags & 1), bool(flags & 2)

        def make(rng, kind=kind):
            arch, Y, X = random_small_arch(rng, kind)
            # scale the clip radius against actual output norms so both clip branches occur
            params = random_params(rng, arch)
            V = forward(arch, params, Y).V
            med = float(np.median(np.linalg.norm(V, axis=0)))
            arch.b_out = max(med, 1e-3)
            return arch, params, Y, X

        case_seed = seed * 1000003 + i
        try:
            rep = grad_check(make, case_seed, tolerance, loss, include_tau=train_tau,
                             include_lam=train_lam)
            worst = max(worst, rep.max_rel_err)
        except CheckFailed as e:
            viol.append({"case": i, "kind": kind, "loss": loss, "seed": case_seed,
                         "detail": str(e)})
            worst = max(worst, math.inf)
    return SuiteResult("gradient", count, viol, worst, time.perf_counter() - t0)


AUDIT_KINDS = ("dense", "alternating", "conv")


def output_audit_suite(seed: int, count: int, inflate_lhs: float = 1.0) -> SuiteResult:
    t0 = time.perf_counter()
    viol, worst = [], 0.0
    for i in range(count):
        kind = AUDIT_KINDS[i % len(AUDIT_KINDS)]
        rng = SeededRng(seed).spawn(2 * i + 1)
        arch, Y, _ = random_small_arch(rng, kind, b_out=1.0, L=1 + _choice(rng, 6))
        params = random_params(rng, arch)
        rep = bounds.verify_output_bound(arch, params, Y)
        ratio = rep.max_ratio * inflate_lhs
        worst = max(worst, ratio)
        if rep.violations or ratio > 1 + bounds.SLACK:
            viol.append({"case": i, "kind": kind, "ratio": ratio})
    return SuiteResult("output_bound", count, viol, worst, time.perf_counter() - t0)


def perturbation_audit_suite(seed: int, count: int, inflate_lhs: float = 1.0) -> SuiteResult:
    t0 = time.perf_counter()
    viol, worst = [], 0.0
    for i in range(count):
        kind = AUDIT_KINDS[i % len(AUDIT_KINDS)]
        rng = SeededRng(seed).spawn(2 * i + 2)
        arch, Y, _ = random_small_arch(rng, kind, L=1 + _choice(rng, 6))
        p1 = random_params(rng, arch)
        # perturbation magnitudes from tiny to order one
        eps = 10.0 ** _uniform(rng, -6, 0)
        p2 = random_params(rng, arch)
        W = [a + eps * (b - a) for a, b in zip(p1.W, p2.W)]
        tau = np.maximum(p1.tau + eps * (p2.tau - p1.tau), 1e-3)
        lam = np.maximum(p1.lam + eps * (p2.lam - p1.lam), 1e-3)
        p2 = Params(W, tau, lam)
        rep = bounds.verify_perturbation_bound(arch, p1, p2, Y, inflate_lhs)
        worst = max(worst, rep.max_ratio)
        if rep.violations:
            viol.append({"case": i, "kind": kind, "ratio": rep.max_ratio})
    return SuiteResult("perturbation_bound", count, viol, worst, time.perf_counter() - t0)


def psi_suite(grid: int) -> SuiteResult:
    """Psi(0) = 0, Psi(t) <= sqrt(log(e(1+t))) over four decades, and the entropy-integral check."""
    t0 = time.perf_counter()
    viol, worst = [], 0.0
    if psi(0.0) != 0.0:
        viol.append({"check": "psi(0)", "value": psi(0.0)})
    for t in np.logspace(-2, 2, 200):
        cap = math.sqrt(math.log(math.e * (1 + t)))
        worst = max(worst, psi(t) / cap)
        if psi(t) > cap * (1 + 1e-12):
            viol.append({"check": "psi_cap", "t": float(t)})
    axis = np.logspace(-3, 3, grid)
    for a in axis:
        for b in axis:
            rep = bounds.psi_integral_check(float(a), float(b))
            worst = max(worst, rep.integral / rep.bound)
            if not rep.ok:
                viol.append({"check": "integral", "a": float(a), "b": float(b),
                             "ratio": rep.integral / rep.bound})
    return SuiteResult("psi", 1 + 200 + grid * grid, viol, worst, time.perf_counter() - t0)


def run_verify(vc: VerifyConfig) -> list:
    return [
        grad_suite(vc.seed, vc.grad_configs, vc.grad_tolerance),
        output_audit_suite(vc.seed, vc.output_audits, vc.inflate_lhs),
        perturbation_audit_suite(vc.seed, vc.perturbation_audits, vc.inflate_lhs),
        psi_suite(vc.psi_grid),
    ]
