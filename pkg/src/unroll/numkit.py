"""Dense numerics used throughout the package.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. All randomness
flows through :class:`SeededRng`, a counter-based SplitMix64 stream, so that
experiments are bit-reproducible across platforms and independent of numpy's
own generators.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "NonConvergence",
    "SeededRng",
    "soft_threshold",
    "soft_threshold_map",
    "clip_to_ball",
    "clip_columns",
    "psi",
    "spectral_norm",
    "robust_spectral_norm",
    "dominant_singular_pair",
    "frobenius_norm",
    "random_gaussian_matrix",
    "random_orthogonal",
]


class NonConvergence(RuntimeError):
    """Raised when power iteration misses its tolerance within the cap."""


# ---------------------------------------------------------------------------
# RNG
# ---------------------------------------------------------------------------

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _splitmix64(x: np.ndarray) -> np.ndarray:
    z = x.copy()
    z ^= z >> np.uint64(30)
    z *= _MIX1
    z ^= z >> np.uint64(27)
    z *= _MIX2
    z ^= z >> np.uint64(31)
    return z


class SeededRng:
    """Counter-based SplitMix64 generator.

    The i-th 64-bit output (i = 0, 1, ...) is ``mix64(seed + (i + 1) * gamma)``
    with gamma = 0x9E3779B97F4A7C15 and the standard SplitMix64 finalizer.
    Because output i depends only on (seed, i), blocks are generated with
    vectorized uint64 arithmetic and the stream is identical no matter how
    draws are chunked.

    Uniform doubles use the top 53 bits: ``(u >> 11) * 2**-53`` in [0, 1).
    Normals use the polar Box-Muller method; candidate pair k consumes
    uniforms 2k and 2k+1 and each accepted pair yields two normals. An unused
    second normal is kept for the next call, so the normal stream does not
    depend on how requests are chunked.
    """

    algorithm = "splitmix64-counter/polar-box-muller"

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.counter = 0
        self._spare = None

    def next_u64(self, size: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + 1 + size, dtype=np.uint64)
        self.counter += size
        with np.errstate(over="ignore"):
            x = np.uint64(self.seed) + idx * _GAMMA
            return _splitmix64(x)

    def uniform(self, size: int) -> np.ndarray:
        u = self.next_u64(size)
        return (u >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)

    def integers(self, highs) -> np.ndarray:
        """One draw in ``[0, high)`` for every entry of ``highs``."""
        highs = np.asarray(highs, dtype=np.int64)
        u = self.uniform(highs.size).reshape(highs.shape)
        return np.minimum((u * highs).astype(np.int64), highs - 1)

    def normal(self, size: int) -> np.ndarray:
        out = np.empty(size, dtype=np.float64)
        filled = 0
        if size and self._spare is not None:
            out[0] = self._spare
            self._spare = None
            filled = 1
        while filled < size:
            pairs_needed = (size - filled + 1) // 2
            # acceptance rate is pi/4; overdraw so one round usually suffices
            batch = max(4, int(pairs_needed * 1.3) + 4)
            start = self.counter
            u = self.uniform(2 * batch).reshape(batch, 2) * 2.0 - 1.0
            s = u[:, 0] ** 2 + u[:, 1] ** 2
            ok = (s > 0.0) & (s < 1.0)
            accepted = np.flatnonzero(ok)
            take = accepted[:pairs_needed]
            if take.size:
                last = int(take[-1])
                # rewind: only the candidates up to the last used one are consumed
                self.counter = start + 2 * (last + 1)
            else:
                continue
            v = u[take]
            st = s[take]
            f = np.sqrt(-2.0 * np.log(st) / st)
            z = np.empty(2 * take.size)
            z[0::2] = v[:, 0] * f
            z[1::2] = v[:, 1] * f
            n = min(z.size, size - filled)
            out[filled:filled + n] = z[:n]
            if n < z.size:
                self._spare = float(z[n])
            filled += n
        return out

    def spawn(self, key: int) -> "SeededRng":
        """Independent stream keyed by ``key`` (used for per-trial RNGs)."""
        mixed = _splitmix64(np.array([(self.seed ^ (int(key) * 0x2545F4914F6CDD1D)) & _MASK64],
                                     dtype=np.uint64))
        return SeededRng(int(mixed[0]))


# ---------------------------------------------------------------------------
# scalar / entrywise primitives
# ---------------------------------------------------------------------------

def soft_threshold(x: float, theta: float) -> float:
    if abs(x) <= theta:
        return 0.0
    return math.copysign(abs(x) - theta, x)


def soft_threshold_map(M, theta):
    """Entrywise soft thresholding; ``theta`` may broadcast against ``M``."""
    M = np.asarray(M, dtype=np.float64)
    return np.sign(M) * np.maximum(np.abs(M) - theta, 0.0)


def clip_to_ball(v, b_out: float) -> np.ndarray:
    """Radial projection of ``v`` onto the l2 ball of radius ``b_out``."""
    v = np.asarray(v, dtype=np.float64)
    nrm = float(np.linalg.norm(v))
    if nrm <= b_out:
        return v.copy()
    return v * (b_out / nrm)


def clip_columns(V: np.ndarray, b_out: float) -> np.ndarray:
    """:func:`clip_to_ball` applied to every column of ``V``."""
    norms = np.linalg.norm(V, axis=0)
    scale = np.where(norms > b_out, b_out / np.where(norms > 0, norms, 1.0), 1.0)
    return V * scale


def psi(t: float) -> float:
    """sqrt(log(1+t) + t*(log(1+t) - log t)), continuously extended by psi(0) = 0."""
    if t < 0:
        raise ValueError("psi is defined for t >= 0")
    if t < 1e-300:
        return 0.0
    l1 = math.log1p(t)
    return math.sqrt(l1 + t * (l1 - math.log(t)))


# ---------------------------------------------------------------------------
# norms
# ---------------------------------------------------------------------------

def frobenius_norm(M) -> float:
    return float(np.sqrt(np.sum(np.square(M))))


def dominant_singular_pair(M, tol: float = 1e-12, max_iter: int = 5000):
    """Power iteration on M^T M.

    Returns ``(sigma, v)`` with ``sigma = ||M||_2`` and ``v`` the unit right
    singular vector. The start vector is all-ones plus ``1e-6 * i / n`` so the
    result is deterministic.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.size == 0:
        raise ValueError("spectral norm of an empty matrix")
    n = M.shape[1]
    v = np.ones(n) + 1e-6 * np.arange(n) / n
    v /= np.linalg.norm(v)
    G = M.T @ M
    rq = 0.0
    for _ in range(max_iter):
        w = G @ v
        new_rq = float(v @ w)
        nw = math.sqrt(float(w @ w))
        if nw == 0.0:
            # start vector in the null space: M v = 0 exactly
            if not M.any():
                return 0.0, v
            # deterministic restart off the null space
            v = np.cos(np.arange(n) + 1.0)
            v /= np.linalg.norm(v)
            continue
        v = w / nw
        if abs(new_rq - rq) <= tol * max(new_rq, 1e-300):
            rq = float(v @ (G @ v))
            return math.sqrt(max(rq, 0.0)), v
        rq = new_rq
    raise NonConvergence(f"power iteration did not reach tol={tol} in {max_iter} steps")


def spectral_norm(M, tol: float = 1e-12, max_iter: int = 5000) -> float:
    return dominant_singular_pair(M, tol, max_iter)[0]


def robust_spectral_norm(M) -> float:
    """Power iteration, falling back to LAPACK's SVD when it stalls.

    Near-orthogonal dictionaries and contractions ``I - tau B^T B`` routinely
    have top singular values within 1e-3 of each other, where the plain
    iteration needs more than the step cap.
    """
    try:
        return spectral_norm(M)
    except NonConvergence:
        return float(np.linalg.norm(np.asarray(M, dtype=np.float64), 2))


# ---------------------------------------------------------------------------
# random matrices
# ---------------------------------------------------------------------------

def random_gaussian_matrix(rng: SeededRng, rows: int, cols: int) -> np.ndarray:
    """i.i.d. N(0, 1) entries, filled in row-major order from ``rng``."""
    if rows < 1 or cols < 1:
        raise ValueError("rows and cols must be positive")
    return rng.normal(rows * cols).reshape(rows, cols)


def random_orthogonal(rng: SeededRng, N: int) -> np.ndarray:
    """Q factor of a Gaussian matrix with the R diagonal forced positive."""
    G = random_gaussian_matrix(rng, N, N)
    Q, R = np.linalg.qr(G)
    d = np.sign(np.diag(R))
    d[d == 0] = 1.0
    return Q * d
