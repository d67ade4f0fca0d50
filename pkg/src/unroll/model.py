"""Unrolled thresholding networks.

A network with ``L`` layers maps measurements ``y`` to

    h(y) = clip(B_{L+1} f_L(... f_1(0, y) ..., y))

where each layer is

    f_l(z, y) = P_l S_{tau_l lam_l}[(I - tau_l B_l^T B_l) z + tau_l B_l^T y]

and ``B_l = B_l(w^(j(l)))`` is built from one of ``J`` parameter blocks.
Columns of a matrix ``Y`` are processed as a batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numkit import (
    clip_columns,
    frobenius_norm,
    soft_threshold_map,
    robust_spectral_norm,
    spectral_norm,
)


class DimensionMismatch(ValueError):
    pass


# ---------------------------------------------------------------------------
# parameter-space map kinds
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DenseDict:
    """Matrix dictionary ``Phi`` (rows x cols).

    Interior layers use ``B(Phi) = A @ Phi``; the final transform uses ``Phi``.
    Blocks are measured with the spectral norm.
    """

    A: np.ndarray
    rows: int
    cols: int

    norm_tag = "spectral"

    @property
    def shape(self):
        return (self.rows, self.cols)

    @property
    def size(self) -> int:
        return self.rows * self.cols

    def matrix(self, w: np.ndarray, final: bool) -> np.ndarray:
        return w if final else self.A @ w

    def grad_block(self, dB: np.ndarray, final: bool) -> np.ndarray:
        return dB if final else self.A.T @ dB

    def block_norm(self, w: np.ndarray) -> float:
        return robust_spectral_norm(w)

    def lipschitz(self, final: bool) -> float:
        return 1.0 if final else spectral_norm(self.A)

    def out_dims(self, final: bool):
        """(rows, cols) of B_l for this kind."""
        return (self.rows, self.cols) if final else (self.A.shape[0], self.cols)


def circulant(w: np.ndarray, N: int) -> np.ndarray:
    """N x N circular-convolution operator of the zero-padded kernel ``w``.

    ``T[i, j] = w_pad[(i - j) mod N]`` so that ``(T z)_i = sum_j w_pad[i-j] z_j``.
    """
    k = w.shape[0]
    if k > N:
        raise DimensionMismatch(f"kernel length {k} exceeds signal length {N}")
    idx = (np.arange(N)[:, None] - np.arange(N)[None, :]) % N
    pad = np.zeros(N)
    pad[:k] = w
    return pad[idx]


@dataclass(frozen=True, eq=False)
class ConvDict:
    """Single-channel circular convolution with a length-``kernel_len`` kernel.

    Interior layers use ``B(w) = A @ T(w)``; the final transform uses ``T(w)``.
    Kernels are measured with the Euclidean norm.
    """

    A: np.ndarray
    kernel_len: int
    signal_len: int

    norm_tag = "euclidean"

    @property
    def shape(self):
        return (self.kernel_len,)

    @property
    def size(self) -> int:
        return self.kernel_len

    def matrix(self, w: np.ndarray, final: bool) -> np.ndarray:
        T = circulant(w, self.signal_len)
        return T if final else self.A @ T

    def grad_block(self, dB: np.ndarray, final: bool) -> np.ndarray:
        dT = dB if final else self.A.T @ dB
        N = self.signal_len
        idx = (np.arange(N)[:, None] - np.arange(N)[None, :]) % N
        acc = np.bincount(idx.ravel(), weights=dT.ravel(), minlength=N)
        return acc[: self.kernel_len]

    def block_norm(self, w: np.ndarray) -> float:
        return float(np.linalg.norm(w))

    def lipschitz(self, final: bool) -> float:
        # ||T(w)|| <= ||w||_1 <= sqrt(k) ||w||_2
        root_k = float(np.sqrt(self.kernel_len))
        return root_k if final else spectral_norm(self.A) * root_k

    def out_dims(self, final: bool):
        N = self.signal_len
        return (N, N) if final else (self.A.shape[0], N)


# ---------------------------------------------------------------------------
# architecture and parameters
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class Architecture:
    """Layer count, widths n_0..n_{L+1}, sharing schedule and map kinds.

    ``schedule[l-1]`` is the 0-based parameter space used by layer ``l`` for
    l = 1..L+1 (the last entry drives the final transform). ``pooling[l-1]``
    is ``None`` (identity) or a fixed matrix with spectral norm <= 1.
    ``widths[0]`` is the coefficient dimension fed into the first layer (the
    column count of B_1); ``n`` is the measurement dimension.
    """

    L: int
    widths: tuple
    schedule: tuple
    spaces: tuple
    b_out: float
    pooling: tuple = None
    n: int = field(init=False)

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.schedule = tuple(int(j) for j in self.schedule)
        self.spaces = tuple(self.spaces)
        if self.pooling is None:
            self.pooling = (None,) * self.L
        self.pooling = tuple(self.pooling)
        self.validate()

    @property
    def J(self) -> int:
        return len(self.spaces)

    @property
    def K(self) -> int:
        return sum(s.size for s in self.spaces)

    def validate(self):
        L = self.L
        if L < 1:
            raise DimensionMismatch("need at least one layer")
        if len(self.widths) != L + 2:
            raise DimensionMismatch("widths must list n_0..n_{L+1}")
        if len(self.schedule) != L + 1:
            raise DimensionMismatch("schedule must cover layers 1..L+1")
        if len(self.pooling) != L:
            raise DimensionMismatch("one pooling entry per layer")
        used = set(self.schedule)
        if used != set(range(self.J)):
            raise DimensionMismatch("every parameter space must be used by some layer")
        ns = set()
        for l in range(1, L + 2):
            final = l == L + 1
            rows, cols = self.spaces[self.schedule[l - 1]].out_dims(final)
            if cols != self.widths[l - 1]:
                raise DimensionMismatch(f"B_{l} has {cols} columns, expected n_{l-1}={self.widths[l-1]}")
            if final:
                if rows != self.widths[L + 1]:
                    raise DimensionMismatch("final transform does not produce n_{L+1} rows")
            else:
                ns.add(rows)
        if len(ns) != 1:
            raise DimensionMismatch("all interior layers must share the measurement dimension")
        self.n = ns.pop()
        for l, P in enumerate(self.pooling, start=1):
            if P is None:
                if self.widths[l] != self.widths[l - 1]:
                    raise DimensionMismatch(f"identity pooling at layer {l} needs n_{l} = n_{l-1}")
            else:
                if P.shape != (self.widths[l], self.widths[l - 1]):
                    raise DimensionMismatch(f"pooling matrix at layer {l} has wrong shape")
                if robust_spectral_norm(P) > 1 + 1e-10:
                    raise ValueError(f"pooling matrix at layer {l} is not 1-Lipschitz")
        if not self.b_out > 0:
            raise ValueError("b_out must be positive")

    def layers_of_space(self, j: int):
        return [l for l in range(1, self.L + 2) if self.schedule[l - 1] == j]


@dataclass(eq=False)
class Params:
    """Weights ``W`` (one block per space), stepsizes ``tau`` and thresholds ``lam``."""

    W: list
    tau: np.ndarray
    lam: np.ndarray

    def __post_init__(self):
        self.W = [np.array(w, dtype=np.float64) for w in self.W]
        self.tau = np.array(self.tau, dtype=np.float64).reshape(-1)
        self.lam = np.array(self.lam, dtype=np.float64).reshape(-1)
        if np.any(self.tau <= 0) or np.any(self.lam <= 0):
            raise ValueError("stepsizes and thresholds must be positive")

    def copy(self) -> "Params":
        return Params([w.copy() for w in self.W], self.tau.copy(), self.lam.copy())

    def check(self, arch: Architecture):
        if len(self.W) != arch.J:
            raise DimensionMismatch(f"expected {arch.J} weight blocks, got {len(self.W)}")
        for w, sp in zip(self.W, arch.spaces):
            if w.shape != sp.shape:
                raise DimensionMismatch(f"block shape {w.shape} != {sp.shape}")
        if self.tau.shape != (arch.L,) or self.lam.shape != (arch.L,):
            raise DimensionMismatch("tau and lam must have length L")

    def to_dict(self) -> dict:
        return {
            "W": [w.tolist() for w in self.W],
            "tau": self.tau.tolist(),
            "lam": self.lam.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Params":
        return cls(d["W"], d["tau"], d["lam"])


@dataclass(eq=False)
class HypothesisClassSpec:
    """Box and norm-ball constraints describing the hypothesis class."""

    w_inf: float
    tau0: np.ndarray
    r1: float
    lambda0: np.ndarray
    r2: float
    b_in: float
    b_out: float
    delta: float = 0.05
    enforce_tauB2_le_1: bool = False

    def __post_init__(self):
        self.tau0 = np.array(self.tau0, dtype=np.float64).reshape(-1)
        self.lambda0 = np.array(self.lambda0, dtype=np.float64).reshape(-1)
        if not self.w_inf > 0:
            raise ValueError("w_inf must be positive")
        if self.r1 < 0 or self.r2 < 0:
            raise ValueError("box radii must be nonnegative")
        if not self.r1 < self.tau0.min():
            raise ValueError("r1 must be smaller than every tau0 entry")
        if not self.r2 < self.lambda0.min():
            raise ValueError("r2 must be smaller than every lambda0 entry")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if not (self.b_in > 0 and self.b_out > 0):
            raise ValueError("b_in and b_out must be positive")

    @property
    def tau_inf(self) -> float:
        return float(np.max(self.tau0 + self.r1))

    @property
    def lambda_inf(self) -> float:
        return float(np.max(self.lambda0 + self.r2))


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

def materialize_B(arch: Architecture, params: Params, l: int) -> np.ndarray:
    """Explicit matrix of B_l for 1 <= l <= L+1."""
    if not 1 <= l <= arch.L + 1:
        raise DimensionMismatch(f"layer index {l} outside 1..{arch.L + 1}")
    j = arch.schedule[l - 1]
    return arch.spaces[j].matrix(params.W[j], final=(l == arch.L + 1))


def all_B(arch: Architecture, params: Params) -> list:
    """[B_1, ..., B_{L+1}] (each block materialized once per layer)."""
    return [materialize_B(arch, params, l) for l in range(1, arch.L + 2)]


def _layer(B, P, tau, lam, Z, Y):
    R = Y - B @ Z
    U = Z + tau * (B.T @ R)
    A = soft_threshold_map(U, tau * lam)
    out = A if P is None else P @ A
    return out, U, R


def layer_forward(arch: Architecture, params: Params, l: int, z, y) -> np.ndarray:
    """Output of layer ``l`` (1..L) for input ``z`` and measurement ``y``."""
    if not 1 <= l <= arch.L:
        raise DimensionMismatch(f"layer index {l} outside 1..{arch.L}")
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if z.shape[0] != arch.widths[l - 1] or y.shape[0] != arch.n:
        raise DimensionMismatch("input shapes do not match the architecture")
    B = materialize_B(arch, params, l)
    out, _, _ = _layer(B, arch.pooling[l - 1], params.tau[l - 1], params.lam[l - 1], z, y)
    return out


@dataclass
class ForwardCache:
    """Everything backprop and the bound verifiers need from one pass."""

    Y: np.ndarray
    B: list           # B_1 .. B_{L+1}
    Z: list           # f^0 = 0, f^1, ..., f^L
    U: list           # pre-activations of layers 1..L
    R: list           # residuals Y - B_l f^{l-1}
    V: np.ndarray     # B_{L+1} f^L
    H: np.ndarray     # clipped output

    @property
    def intermediates(self):
        return self.Z[1:]


def forward(arch: Architecture, params: Params, Y) -> ForwardCache:
    """Run the decoder on every column of ``Y`` (n x m)."""
    params.check(arch)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if Y.shape[0] != arch.n:
        raise DimensionMismatch(f"Y has {Y.shape[0]} rows, expected n={arch.n}")
    m = Y.shape[1]
    Bs = all_B(arch, params)
    Z = [np.zeros((arch.widths[0], m))]
    U, R = [], []
    for l in range(1, arch.L + 1):
        out, u, r = _layer(Bs[l - 1], arch.pooling[l - 1], params.tau[l - 1],
                           params.lam[l - 1], Z[-1], Y)
        Z.append(out)
        U.append(u)
        R.append(r)
    V = Bs[arch.L] @ Z[-1]
    H = clip_columns(V, arch.b_out)
    return ForwardCache(Y=Y, B=Bs, Z=Z, U=U, R=R, V=V, H=H)


def decode(arch: Architecture, params: Params, Y) -> np.ndarray:
    return forward(arch, params, Y).H


# ---------------------------------------------------------------------------
# classical ISTA
# ---------------------------------------------------------------------------

def ista_reference(A, Phi, tau: float, lam: float, y, iters: int, z0=None) -> np.ndarray:
    """Plain shared-weight ISTA: z <- S_{tau lam}[z + tau D^T (y - D z)], D = A Phi.

    Starts from ``z0`` (zero when omitted).
    """
    if tau <= 0 or lam <= 0:
        raise ValueError("tau and lam must be positive")
    D = np.asarray(A) @ np.asarray(Phi)
    y = np.asarray(y, dtype=np.float64)
    z = np.zeros((D.shape[1],) + y.shape[1:]) if z0 is None else np.array(z0, dtype=np.float64)
    for _ in range(iters):
        z = soft_threshold_map(z + tau * (D.T @ (y - D @ z)), tau * lam)
    return z


def l1_objective(z, A, Phi, y, lam: float) -> float:
    """0.5 ||A Phi z - y||^2 + lam ||z||_1."""
    r = np.asarray(A) @ (np.asarray(Phi) @ z) - y
    return 0.5 * float(np.sum(r * r)) + lam * float(np.sum(np.abs(z)))


def param_class_norm(params: Params, spaces) -> float:
    """max_j ||w^(j)||^(j) with each block measured in its own norm."""
    if hasattr(spaces, "spaces"):
        spaces = spaces.spaces
    return max(sp.block_norm(w) for sp, w in zip(spaces, params.W))


def output_norms(cache: ForwardCache):
    """Frobenius norms of f^1..f^L."""
    return [frobenius_norm(z) for z in cache.Z[1:]]
