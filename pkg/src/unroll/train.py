"""Losses, exact reverse-mode gradients, Adam with projection, gradient checking."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .model import (
    Architecture,
    DimensionMismatch,
    ForwardCache,
    HypothesisClassSpec,
    Params,
    forward,
)
from .numkit import (
    NonConvergence,
    SeededRng,
    random_gaussian_matrix,
    spectral_norm,
)

log = logging.getLogger(__name__)


class CheckFailed(AssertionError):
    def __init__(self, message, worst):
        super().__init__(message)
        self.worst = worst


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _check_same(H, X):
    if H.shape != X.shape:
        raise DimensionMismatch(f"prediction shape {H.shape} != target shape {X.shape}")


def l2_loss(H, X) -> float:
    """Mean unsquared reconstruction error (1/m) sum_i ||h_i - x_i||_2."""
    H, X = np.asarray(H), np.asarray(X)
    _check_same(H, X)
    return float(np.mean(np.linalg.norm(H - X, axis=0)))


def mse_loss(H, X) -> float:
    """Mean squared reconstruction error (1/m) sum_i ||h_i - x_i||_2^2."""
    H, X = np.asarray(H), np.asarray(X)
    _check_same(H, X)
    return float(np.mean(np.sum((H - X) ** 2, axis=0)))


def _loss_grad(kind: str, H, X):
    m = H.shape[1]
    D = H - X
    if kind == "mse":
        return 2.0 * D / m
    if kind == "l2":
        nrm = np.linalg.norm(D, axis=0)
        safe = np.where(nrm > 0, nrm, 1.0)
        return np.where(nrm > 0, D / safe, 0.0) / m
    raise ValueError(f"unknown loss kind {kind!r}")


LOSSES = {"mse": mse_loss, "l2": l2_loss}


def _ortho_eig(Phi):
    """Extreme eigenpair of the symmetric matrix I - Phi^T Phi.

    A dense symmetric solve is exact here; power iteration stalls on the
    near-tied extreme eigenvalues that an almost orthogonal Phi produces.
    """
    Phi = np.asarray(Phi, dtype=np.float64)
    if Phi.ndim != 2 or Phi.shape[0] != Phi.shape[1]:
        raise DimensionMismatch("orthogonality penalty needs a square matrix")
    evals, evecs = np.linalg.eigh(np.eye(Phi.shape[1]) - Phi.T @ Phi)
    k = int(np.argmax(np.abs(evals)))
    return float(evals[k]), evecs[:, k]


def ortho_penalty(Phi) -> float:
    """||I - Phi^T Phi||_{2->2}."""
    return abs(_ortho_eig(Phi)[0])


def ortho_penalty_grad(Phi) -> np.ndarray:
    """Subgradient of :func:`ortho_penalty` from the dominant eigenpair of I - Phi^T Phi."""
    mu, v = _ortho_eig(Phi)
    if mu == 0.0:
        return np.zeros_like(np.asarray(Phi, dtype=np.float64))
    sign = 1.0 if mu > 0 else -1.0
    return -2.0 * sign * np.outer(np.asarray(Phi) @ v, v)


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

@dataclass
class Gradients:
    dW: list
    dtau: np.ndarray
    dlam: np.ndarray

    def flat(self) -> np.ndarray:
        return np.concatenate([w.ravel() for w in self.dW] + [self.dtau, self.dlam])


def backward(arch: Architecture, params: Params, X, cache: ForwardCache,
             loss: str = "mse") -> Gradients:
    """Gradients of the batch loss w.r.t. every leaf of ``params``.

    Soft thresholding uses derivative 1{|u| > tau lam} (0 at the kink) and
    d S_t(u) / dt = -sign(u) 1{|u| > t}. The output clip uses its exact
    radial-projection Jacobian. Blocks shared by several layers accumulate.
    """
    X = np.asarray(X, dtype=np.float64)
    _check_same(cache.H, X)
    L = arch.L
    dB = [None] * (L + 1)
    dtau = np.zeros(L)
    dlam = np.zeros(L)

    gH = _loss_grad(loss, cache.H, X)
    V = cache.V
    norms = np.linalg.norm(V, axis=0)
    outside = norms > arch.b_out
    gV = gH.copy()
    if np.any(outside):
        vo = V[:, outside]
        no = norms[outside]
        go = gH[:, outside]
        proj = np.sum(vo * go, axis=0) / no ** 2
        gV[:, outside] = (arch.b_out / no) * (go - vo * proj)

    B_final = cache.B[L]
    dB[L] = gV @ cache.Z[L].T
    gZ = B_final.T @ gV

    for l in range(L, 0, -1):
        B = cache.B[l - 1]
        P = arch.pooling[l - 1]
        tau, lam = params.tau[l - 1], params.lam[l - 1]
        U, R, Zp = cache.U[l - 1], cache.R[l - 1], cache.Z[l - 1]
        gA = gZ if P is None else P.T @ gZ
        active = np.abs(U) > tau * lam
        gU = np.where(active, gA, 0.0)
        g_theta = -float(np.sum(np.sign(U) * gU))
        BgU = B @ gU
        dtau[l - 1] = lam * g_theta + float(np.sum(R * BgU))
        dlam[l - 1] = tau * g_theta
        dB[l - 1] = tau * (R @ gU.T - BgU @ Zp.T)
        gZ = gU - tau * (B.T @ BgU)

    dW = [np.zeros(sp.shape) for sp in arch.spaces]
    for l in range(1, L + 2):
        j = arch.schedule[l - 1]
        dW[j] = dW[j] + arch.spaces[j].grad_block(dB[l - 1], final=(l == L + 1))
    return Gradients(dW, dtau, dlam)


def loss_and_grad(arch, params, Y, X, loss="mse", ortho_weight=0.0, ortho_blocks=()):
    cache = forward(arch, params, Y)
    value = LOSSES[loss](cache.H, X)
    g = backward(arch, params, X, cache, loss)
    for j in ortho_blocks:
        value += ortho_weight * ortho_penalty(params.W[j])
        g.dW[j] = g.dW[j] + ortho_weight * ortho_penalty_grad(params.W[j])
    return value, g, cache


def square_dense_blocks(arch: Architecture):
    return [j for j, sp in enumerate(arch.spaces)
            if sp.norm_tag == "spectral" and sp.shape[0] == sp.shape[1]]


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    learning_rate: float = 1e-2
    epochs: int = 10
    batch_size: int = 128
    train_tau: bool = False
    train_lambda: bool = False
    ortho_weight: float = 0.1
    seed: int = 0
    full_batch_below: int = 512

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.ortho_weight < 0:
            raise ValueError("ortho_weight must be nonnegative")


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Params) -> "AdamState":
        leaves = _leaves(params)
        return cls([np.zeros_like(x) for x in leaves], [np.zeros_like(x) for x in leaves])


def _leaves(params: Params):
    return list(params.W) + [params.tau, params.lam]


def adam_step(state: AdamState, params: Params, grads: Gradients, config: TrainConfig):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``.

    Stepsizes and thresholds are only updated when the matching
    ``train_tau`` / ``train_lambda`` flag is set.
    """
    t = state.t + 1
    b1, b2, eps, lr = state.beta1, state.beta2, state.eps, config.learning_rate
    leaves = _leaves(params)
    glist = list(grads.dW) + [grads.dtau, grads.dlam]
    J = len(params.W)
    trainable = [True] * J + [config.train_tau, config.train_lambda]
    new_leaves, new_m, new_v = [], [], []
    for x, g, m, v, on in zip(leaves, glist, state.m, state.v, trainable):
        if not on:
            new_leaves.append(x.copy())
            new_m.append(m)
            new_v.append(v)
            continue
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_leaves.append(x - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    tau, lam = new_leaves[J], new_leaves[J + 1]
    # keep the Params constructor's positivity check satisfiable before projection
    tau = np.maximum(tau, 1e-12)
    lam = np.maximum(lam, 1e-12)
    new_params = Params(new_leaves[:J], tau, lam)
    return new_params, AdamState(new_m, new_v, t, b1, b2, eps)


def project_params(params: Params, spec: HypothesisClassSpec, arch: Architecture) -> Params:
    """Clamp tau / lam into their boxes and rescale blocks into the W_inf ball."""
    tau = np.clip(params.tau, spec.tau0 - spec.r1, spec.tau0 + spec.r1)
    lam = np.clip(params.lam, spec.lambda0 - spec.r2, spec.lambda0 + spec.r2)
    W = []
    for w, sp in zip(params.W, arch.spaces):
        nrm = sp.block_norm(w)
        W.append(w * (spec.w_inf / nrm) if nrm > spec.w_inf else w.copy())
    return Params(W, tau, lam)


def init_params(arch: Architecture, spec: HypothesisClassSpec, rng: SeededRng) -> Params:
    """Gaussian blocks scaled to norm min(W_inf, 0.9 / max(1, ||A||)); tau = tau0, lam = lambda0."""
    W = []
    for sp in arch.spaces:
        a_norm = spectral_norm(sp.A)
        target = min(spec.w_inf, 0.9 / max(1.0, a_norm))
        if len(sp.shape) == 2:
            w = random_gaussian_matrix(rng, *sp.shape)
        else:
            w = rng.normal(sp.shape[0])
        W.append(w * (target / sp.block_norm(w)))
    return Params(W, spec.tau0.copy(), spec.lambda0.copy())


@dataclass
class History:
    train_mse: list = field(default_factory=list)
    test_mse: list = field(default_factory=list)
    train_l2: list = field(default_factory=list)
    test_l2: list = field(default_factory=list)

    def record(self, arch, params, Ytr, Xtr, Yte, Xte):
        Htr = forward(arch, params, Ytr).H
        Hte = forward(arch, params, Yte).H
        self.train_mse.append(mse_loss(Htr, Xtr))
        self.test_mse.append(mse_loss(Hte, Xte))
        self.train_l2.append(l2_loss(Htr, Xtr))
        self.test_l2.append(l2_loss(Hte, Xte))

    def rows(self):
        return [
            {"epoch": e, "train_mse": a, "test_mse": b, "train_l2": c, "test_l2": d}
            for e, (a, b, c, d) in enumerate(zip(self.train_mse, self.test_mse,
                                                   self.train_l2, self.test_l2))
        ]


def train(arch: Architecture, spec: HypothesisClassSpec, Ytr, Xtr, Yte, Xte,
          config: TrainConfig, params: Params = None):
    """Minibatch Adam on mse + ortho_weight * ortho penalty, projecting after every step.

    History entry 0 holds the losses at initialization, entry e those after
    epoch e. Returns ``(params, history)``.
    """
    rng = SeededRng(config.seed)
    if params is None:
        params = init_params(arch, spec, rng)
    params = project_params(params, spec, arch)
    ortho = square_dense_blocks(arch) if config.ortho_weight > 0 else []
    history = History()
    history.record(arch, params, Ytr, Xtr, Yte, Xte)
    m = Ytr.shape[1]
    bs = m if m <= config.full_batch_below else config.batch_size
    state = AdamState.zeros_like(params)
    for epoch in range(config.epochs):
        order = _permutation(rng, m) if bs < m else np.arange(m)
        for start in range(0, m, bs):
            idx = order[start:start + bs]
            _, g, _ = loss_and_grad(arch, params, Ytr[:, idx], Xtr[:, idx], "mse",
                                    config.ortho_weight, ortho)
            params, state = adam_step(state, params, g, config)
            params = project_params(params, spec, arch)
        history.record(arch, params, Ytr, Xtr, Yte, Xte)
        log.debug("epoch %d train_mse %.6g test_mse %.6g", epoch + 1,
                  history.train_mse[-1], history.test_mse[-1])
    return params, history


def _permutation(rng: SeededRng, m: int) -> np.ndarray:
    """Fisher-Yates shuffle driven by ``rng``."""
    perm = np.arange(m)
    js = rng.integers(np.arange(m, 0, -1))
    for i in range(m - 1):
        j = i + js[i]
        perm[i], perm[j] = perm[j], perm[i]
    return perm


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

def _set_leaf(params: Params, leaf: int, idx, value: float) -> Params:
    p = params.copy()
    J = len(p.W)
    if leaf < J:
        p.W[leaf][idx] = value
    elif leaf == J:
        p.tau[idx] = value
    else:
        p.lam[idx] = value
    return p


def _get_leaf(params: Params, leaf: int):
    J = len(params.W)
    return params.W[leaf] if leaf < J else (params.tau if leaf == J else params.lam)


def min_kink_margin(arch: Architecture, params: Params, cache: ForwardCache, X=None,
                    loss: str = "mse") -> float:
    """Smallest distance of the forward pass to a nondifferentiable point."""
    margins = []
    for l in range(1, arch.L + 1):
        th = params.tau[l - 1] * params.lam[l - 1]
        margins.append(float(np.min(np.abs(np.abs(cache.U[l - 1]) - th))))
    margins.append(float(np.min(np.abs(np.linalg.norm(cache.V, axis=0) - arch.b_out))))
    if loss == "l2" and X is not None:
        margins.append(float(np.min(np.linalg.norm(cache.H - X, axis=0))))
    return min(margins)


def numeric_gradient(arch, params, Y, X, leaf, idx, loss="mse", step=1e-6) -> float:
    x0 = float(_get_leaf(params, leaf)[idx])
    fp = LOSSES[loss](forward(arch, _set_leaf(params, leaf, idx, x0 + step), Y).H, X)
    fm = LOSSES[loss](forward(arch, _set_leaf(params, leaf, idx, x0 - step), Y).H, X)
    return (fp - fm) / (2 * step)


def relative_error(a: float, b: float, floor: float = 1e-3) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst: tuple
    checked: int
    resamples: int


def compare_gradients(arch, params, Y, X, loss="mse", rng: SeededRng = None,
                      per_leaf: int = 8, step: float = 1e-6,
                      include_tau: bool = True, include_lam: bool = True) -> GradCheckReport:
    """Backward vs central differences on a random subset of every leaf."""
    cache = forward(arch, params, Y)
    g = backward(arch, params, X, cache, loss)
    rng = rng or SeededRng(0)
    J = arch.J
    leaves = list(range(J)) + ([J] if include_tau else []) + ([J + 1] if include_lam else [])
    worst, worst_at, n = 0.0, None, 0
    for leaf in leaves:
        arr = _get_leaf(params, leaf)
        garr = g.dW[leaf] if leaf < J else (g.dtau if leaf == J else g.dlam)
        flat_idx = np.arange(arr.size)
        if arr.size > per_leaf:
            picks = rng.integers(np.full(per_leaf, arr.size))
            flat_idx = np.unique(picks)
        for f in flat_idx:
            idx = np.unravel_index(int(f), arr.shape)
            num = numeric_gradient(arch, params, Y, X, leaf, idx, loss, step)
            ana = float(garr[idx])
            err = relative_error(ana, num)
            n += 1
            if err > worst or worst_at is None:
                worst, worst_at = err, (leaf, idx, ana, num)
    return GradCheckReport(worst, worst_at, n, 0)


def grad_check(make_instance, seed: int, tolerance: float, loss: str = "mse",
               margin: float = 1e-4, max_resample: int = 200, include_tau: bool = True,
               include_lam: bool = True) -> GradCheckReport:
    """Sample instances from ``make_instance(rng)`` until none sits near a kink, then compare.

    ``make_instance`` returns ``(arch, params, Y, X)``. Raises
    :class:`CheckFailed` when the worst relative error exceeds ``tolerance``.
    """
    if not tolerance > 0:
        raise ValueError("tolerance must be positive")
    rng = SeededRng(seed)
    for attempt in range(max_resample):
        arch, params, Y, X = make_instance(rng)
        cache = forward(arch, params, Y)
        if min_kink_margin(arch, params, cache, X, loss) >= margin:
            break
    else:
        raise RuntimeError("could not find a kink-free instance")
    rep = compare_gradients(arch, params, Y, X, loss, rng, include_tau=include_tau,
                            include_lam=include_lam)
    rep.resamples = attempt
    if rep.max_rel_err >= tolerance:
        raise CheckFailed(f"gradient mismatch {rep.max_rel_err:.3g} at {rep.worst}", rep.worst)
    return rep


__all__ = [
    "AdamState", "CheckFailed", "GradCheckReport", "Gradients", "History", "NonConvergence",
    "TrainConfig", "adam_step", "backward", "compare_gradients", "grad_check", "init_params",
    "l2_loss", "loss_and_grad", "mse_loss", "ortho_penalty", "ortho_penalty_grad",
    "project_params", "train",
]
