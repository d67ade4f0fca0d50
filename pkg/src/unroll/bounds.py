"""Generalization-bound constants and numeric verifiers of the supporting inequalities."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import integrate

from .model import Architecture, ConvDict, DenseDict, HypothesisClassSpec, Params, all_B, forward
from .numkit import frobenius_norm, psi, robust_spectral_norm

ANALYTIC = "AnalyticClassBound"
POINTWISE = "PointwiseLowerBound"


class UnsupportedClass(ValueError):
    pass


class PreconditionViolated(ValueError):
    pass


class QuadratureFailure(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# class constants
# ---------------------------------------------------------------------------

@dataclass
class ClassConstants:
    b_inf: float
    w_inf: float
    d_l: list
    d_inf: float
    tau_inf: float
    lambda_inf: float
    alpha: float
    alpha_mode: str
    alpha_pointwise: float = None


def pointwise_alpha(arch: Architecture, params: Params, Bs=None) -> float:
    """max_l ||I - tau_l B_l^T B_l|| at one parameter point."""
    Bs = Bs if Bs is not None else all_B(arch, params)
    vals = []
    for l in range(1, arch.L + 1):
        B = Bs[l - 1]
        vals.append(robust_spectral_norm(np.eye(B.shape[1]) - params.tau[l - 1] * (B.T @ B)))
    return max(vals)


def class_constants(arch: Architecture, spec: HypothesisClassSpec, params: Params = None) -> ClassConstants:
    """Analytic class-level constants for the declared map kinds.

    D_l is the Lipschitz constant of B_l in the block norm. With linear maps
    B_inf = W_inf * max_l D_l. alpha uses the spectrum bound
    sigma(I - tau B^T B) in [1 - tau ||B||^2, 1], giving
    alpha <= max(1, tau_inf B_inf^2 - 1); this is exact whenever some B_l has
    fewer rows than columns.
    """
    d_l = []
    for l in range(1, arch.L + 2):
        sp = arch.spaces[arch.schedule[l - 1]]
        if not isinstance(sp, (DenseDict, ConvDict)):
            raise UnsupportedClass(f"no analytic constants for {type(sp).__name__}")
        d_l.append(sp.lipschitz(final=(l == arch.L + 1)))
    d_inf = max(d_l)
    b_inf = spec.w_inf * d_inf
    tau_inf = spec.tau_inf
    alpha = max(1.0, tau_inf * b_inf ** 2 - 1.0)
    c = ClassConstants(b_inf=b_inf, w_inf=spec.w_inf, d_l=d_l, d_inf=d_inf, tau_inf=tau_inf,
                       lambda_inf=spec.lambda_inf, alpha=alpha, alpha_mode=ANALYTIC)
    if params is not None:
        c.alpha_pointwise = pointwise_alpha(arch, params)
    return c


# ---------------------------------------------------------------------------
# constants of the bound
# ---------------------------------------------------------------------------

def z_sequence(alpha: float, tau_inf: float, b_inf: float, L: int) -> list:
    """Z_0 = 0, Z_l = tau_inf B_inf sum_{k=1}^l alpha^k (closed form)."""
    out = [0.0]
    for l in range(1, L + 1):
        if alpha == 1.0:
            s = float(l)
        else:
            s = alpha * (1.0 - alpha ** l) / (1.0 - alpha)
        out.append(tau_inf * b_inf * s)
    return out


def z_sequence_sum(alpha, tau_inf, b_inf, L) -> list:
    return [tau_inf * b_inf * sum(alpha ** k for k in range(1, l + 1)) for l in range(L + 1)]


def klmoq(alpha, tau_inf, lambda_inf, b_inf, d_inf, L, y_fro, m, n_inf):
    """(K_L, M_L, O_L, Q_L) as explicit sums over the layers."""
    if L < 1:
        raise ValueError("L must be at least 1")
    Z = z_sequence(alpha, tau_inf, b_inf, L)
    root = math.sqrt(n_inf * m)
    K = M = O = 0.0
    for l in range(1, L + 1):
        w = alpha ** (L - l)
        K += tau_inf * y_fro * (1 + 2 * b_inf * Z[l - 1]) * w
        M += (lambda_inf * root + b_inf * y_fro * (b_inf * Z[l - 1] + 1)) * w
        O += tau_inf * root * w
    Q = (b_inf * K + y_fro * Z[L]) * d_inf
    return K, M, O, Q


def layer_terms(alpha, tau_inf, lambda_inf, b_inf, L, y_fro, m, n_inf):
    """Per-layer increments (beta_l, kappa_l, phi_l) of the K/M/O recurrences."""
    Z = z_sequence(alpha, tau_inf, b_inf, L)
    root = math.sqrt(n_inf * m)
    beta = [tau_inf * y_fro * (1 + 2 * b_inf * Z[l - 1]) for l in range(1, L + 1)]
    kappa = [lambda_inf * root + b_inf * y_fro * (b_inf * Z[l - 1] + 1) for l in range(1, L + 1)]
    phi = [tau_inf * root] * L
    return beta, kappa, phi


def rademacher_bound(b_out, K, L, m, w_inf, q_l, o_l, m_l, r1, r2) -> float:
    """Dudley-integral bound on the Rademacher complexity of the decoder class."""
    sm = math.sqrt(m)
    return 2 * math.sqrt(2) * b_out * (
        math.sqrt(K / m) * psi(16 * w_inf * q_l / (sm * b_out))
        + math.sqrt(L / m) * psi(8 * r2 * o_l / (sm * b_out))
        + math.sqrt(L / m) * psi(8 * r1 * m_l / (sm * b_out))
    )


def generalization_bound(lemp, rad, b_in, b_out, delta, m) -> float:
    """lemp + 2 sqrt(2) rad + 4 (b_in + b_out) sqrt(2 log(4/delta) / m)."""
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    if m < 1:
        raise ValueError("m must be positive")
    return lemp + 2 * math.sqrt(2) * rad + 4 * (b_in + b_out) * math.sqrt(2 * math.log(4 / delta) / m)


def corollary_rademacher(K, L, m, n_inf, tau_inf, lambda_inf, b_inf, w_inf, d_inf,
                         b_in, b_out, r1, r2) -> float:
    """Closed-form Rademacher bound valid when tau_inf B_inf^2 <= 1."""
    if tau_inf * b_inf ** 2 > 1 + 1e-12:
        raise PreconditionViolated(
            f"tau_inf * B_inf^2 = {tau_inf * b_inf ** 2:.6g} exceeds 1")
    sm = math.sqrt(m)
    first = math.sqrt(K / m * math.log(math.e * (1 + 16 * L * (L + 1) * tau_inf * b_inf * w_inf
                                                 * d_inf * b_in / b_out)))
    second = math.sqrt(L / m) * psi(8 * r2 * L * tau_inf * math.sqrt(n_inf * m) / (sm * b_out))
    third_arg = 8 * r1 * L * (lambda_inf ** 2 * n_inf * sm
                              + b_in * (b_inf * lambda_inf * math.sqrt(n_inf * m) + (L - 1) / 2)) / b_out
    third = math.sqrt(L / m) * psi(third_arg)
    return 2 * math.sqrt(2) * b_out * (first + second + third)


def corollary_bound(arch: Architecture, spec: HypothesisClassSpec, constants: ClassConstants,
                    m: int, n_inf: int) -> float:
    return corollary_rademacher(arch.K, arch.L, m, n_inf, constants.tau_inf, constants.lambda_inf,
                                constants.b_inf, constants.w_inf, constants.d_inf,
                                spec.b_in, spec.b_out, spec.r1, spec.r2)


def n_infinity(arch: Architecture) -> int:
    """Largest width among n_0..n_L (every pre-activation dimension is covered)."""
    return max(arch.widths[: arch.L + 1])


@dataclass
class BoundReport:
    z: list
    k_l: float
    m_l: float
    o_l: float
    q_l: float
    rad_bound: float
    full_bound: float
    corollary_bound: float
    corollary_rad: float
    alpha: float
    alpha_mode: str
    alpha_pointwise: float
    b_inf: float
    d_inf: float
    w_inf: float
    tau_inf: float
    lambda_inf: float
    lemp: float
    m: int
    n_inf: int
    K: int
    L: int
    y_fro: float
    b_in: float
    b_out: float
    delta: float
    r1: float
    r2: float
    corollary_note: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def bound_report(arch: Architecture, spec: HypothesisClassSpec, y_fro: float, m: int,
                 lemp: float = 0.0, params: Params = None) -> BoundReport:
    """Evaluate every constant of the main bound and, when it applies, the closed form."""
    c = class_constants(arch, spec, params)
    n_inf = n_infinity(arch)
    K_L, M_L, O_L, Q_L = klmoq(c.alpha, c.tau_inf, c.lambda_inf, c.b_inf, c.d_inf, arch.L,
                               y_fro, m, n_inf)
    rad = rademacher_bound(spec.b_out, arch.K, arch.L, m, c.w_inf, Q_L, O_L, M_L, spec.r1, spec.r2)
    full = generalization_bound(lemp, rad, spec.b_in, spec.b_out, spec.delta, m)
    cor_bound = cor_rad = None
    note = ""
    if c.tau_inf * c.b_inf ** 2 <= 1 + 1e-12:
        cor_rad = corollary_bound(arch, spec, c, m, n_inf)
        cor_bound = generalization_bound(lemp, cor_rad, spec.b_in, spec.b_out, spec.delta, m)
    else:
        note = f"tau_inf*B_inf^2={c.tau_inf * c.b_inf ** 2:.6g} > 1; closed form not applicable"
    return BoundReport(
        z=z_sequence(c.alpha, c.tau_inf, c.b_inf, arch.L), k_l=K_L, m_l=M_L, o_l=O_L, q_l=Q_L,
        rad_bound=rad, full_bound=full, corollary_bound=cor_bound, corollary_rad=cor_rad,
        alpha=c.alpha, alpha_mode=c.alpha_mode, alpha_pointwise=c.alpha_pointwise,
        b_inf=c.b_inf, d_inf=c.d_inf, w_inf=c.w_inf, tau_inf=c.tau_inf, lambda_inf=c.lambda_inf,
        lemp=lemp, m=m, n_inf=n_inf, K=arch.K, L=arch.L, y_fro=y_fro, b_in=spec.b_in,
        b_out=spec.b_out, delta=spec.delta, r1=spec.r1, r2=spec.r2, corollary_note=note)


# ---------------------------------------------------------------------------
# verifiers
# ---------------------------------------------------------------------------

# relative slack absorbing floating-point rounding in LHS <= RHS comparisons
SLACK = 1e-9


@dataclass
class OutputBoundReport:
    violations: int
    max_ratio: float
    lhs: list = field(default_factory=list)
    rhs_fine: list = field(default_factory=list)
    rhs_coarse: list = field(default_factory=list)


def _ratio(lhs, rhs):
    if lhs == 0.0:
        return 0.0
    return lhs / rhs if rhs > 0 else math.inf


def verify_output_bound(arch: Architecture, params: Params, Y) -> OutputBoundReport:
    """Check ||f^l(Y)||_F against the layerwise bound and its coarse Z_l form.

    The layerwise bound is sum_k ||tau_k B_k^T Y||_F prod_{i=k+1}^{l} ||I - tau_i B_i^T B_i||.
    The coarse form ||Y||_F Z_l uses the pointwise tau_inf, B_inf and
    alpha' = max(1, pointwise alpha).
    """
    cache = forward(arch, params, Y)
    Bs = cache.B
    L = arch.L
    y_fro = frobenius_norm(cache.Y)
    contraction = [robust_spectral_norm(np.eye(Bs[i].shape[1]) - params.tau[i] * (Bs[i].T @ Bs[i]))
                   for i in range(L)]
    drive = [frobenius_norm(params.tau[k] * (Bs[k].T @ cache.Y)) for k in range(L)]
    b_inf = max(robust_spectral_norm(B) for B in Bs)
    alpha = max(1.0, max(contraction))
    Z = z_sequence(alpha, float(np.max(params.tau)), b_inf, L)
    rep = OutputBoundReport(0, 0.0)
    for l in range(1, L + 1):
        lhs = frobenius_norm(cache.Z[l])
        fine = 0.0
        for k in range(1, l + 1):
            prod = 1.0
            for i in range(k + 1, l + 1):
                prod *= contraction[i - 1]
            fine += drive[k - 1] * prod
        coarse = y_fro * Z[l]
        rep.lhs.append(lhs)
        rep.rhs_fine.append(fine)
        rep.rhs_coarse.append(coarse)
        for rhs in (fine, coarse):
            rep.max_ratio = max(rep.max_ratio, _ratio(lhs, rhs))
            if lhs > rhs * (1 + SLACK) + 1e-300:
                rep.violations += 1
    return rep


@dataclass
class PerturbationReport:
    violations: int
    lhs_f: float
    rhs_f: float
    lhs_h: float
    rhs_h: float
    max_ratio: float


def verify_perturbation_bound(arch: Architecture, p1: Params, p2: Params, Y,
                              inflate_lhs: float = 1.0) -> PerturbationReport:
    """Check the parameter-perturbation bounds for f^L and for the full decoder.

    Constants use the suprema over the two points (tau_inf, lambda_inf,
    B_inf over all L+1 maps, alpha' = max(1, max_l ||I - tau_l B_l^T B_l||)).
    The decoder bound is the one obtained by chaining the clip's
    1-Lipschitzness: ||f^L_1|| ||dB_{L+1}|| + B_inf ||f^L_1 - f^L_2||.
    ``inflate_lhs`` exists only to self-test the harness.
    """
    c1 = forward(arch, p1, Y)
    c2 = forward(arch, p2, Y)
    L = arch.L
    Yf = frobenius_norm(c1.Y)
    m = c1.Y.shape[1]
    tau_inf = float(max(p1.tau.max(), p2.tau.max()))
    lam_inf = float(max(p1.lam.max(), p2.lam.max()))
    b_inf = max(robust_spectral_norm(B) for B in c1.B + c2.B)
    alpha = 1.0
    for cache, p in ((c1, p1), (c2, p2)):
        for l in range(L):
            B = cache.B[l]
            alpha = max(alpha, robust_spectral_norm(np.eye(B.shape[1]) - p.tau[l] * (B.T @ B)))
    n_inf = n_infinity(arch)
    K_L, M_L, O_L, _ = klmoq(alpha, tau_inf, lam_inf, b_inf, 1.0, L, Yf, m, n_inf)
    Z = z_sequence(alpha, tau_inf, b_inf, L)
    dB = [robust_spectral_norm(c1.B[l] - c2.B[l]) for l in range(L + 1)]
    dtau = float(np.max(np.abs(p1.tau - p2.tau)))
    dlam = float(np.max(np.abs(p1.lam - p2.lam)))
    lhs_f = inflate_lhs * frobenius_norm(c1.Z[L] - c2.Z[L])
    rhs_f = K_L * max(dB[:L]) + M_L * dtau + O_L * dlam
    lhs_h = inflate_lhs * frobenius_norm(c1.H - c2.H)
    rhs_h = Yf * Z[L] * dB[L] + b_inf * rhs_f
    viol = 0
    for lhs, rhs in ((lhs_f, rhs_f), (lhs_h, rhs_h)):
        if lhs > rhs * (1 + SLACK) + 1e-300:
            viol += 1
    return PerturbationReport(viol, lhs_f, rhs_f, lhs_h, rhs_h,
                              max(_ratio(lhs_f, rhs_f), _ratio(lhs_h, rhs_h)))


@dataclass
class PsiIntegralReport:
    a: float
    b: float
    integral: float
    bound: float
    ok: bool


def psi_integral_check(a: float, b: float, tol: float = 1e-10) -> PsiIntegralReport:
    """Quadrature of int_0^a sqrt(log(1 + b/t)) dt against a * psi(b/a)."""
    if not a > 0 or b < 0:
        raise ValueError("need a > 0 and b >= 0")
    bound = a * psi(b / a)
    if b == 0:
        return PsiIntegralReport(a, b, 0.0, bound, True)
    # substitute t = a s^2 to remove the integrable log singularity at 0
    f = lambda s: 2 * a * s * math.sqrt(math.log1p(b / (a * s * s))) if s > 0 else 0.0
    val, err = integrate.quad(f, 0.0, 1.0, epsabs=0.0, epsrel=tol, limit=500)
    if not math.isfinite(val) or err > max(tol * abs(val), 1e-13):
        raise QuadratureFailure(f"quadrature error estimate {err:.3g} for a={a}, b={b}")
    return PsiIntegralReport(a, b, val, bound, val <= bound * (1 + 1e-9))
