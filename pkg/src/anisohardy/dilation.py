"""Expansive dilation matrices, ellipsoid gauges and step quasi-norms.

Everything downstream (cube grids, weights, frames, area functions) is
driven by a single expansive matrix A per factor.  This module validates
the matrix, computes its spectral brackets, builds the covering-ellipsoid
gauge via a Lyapunov-type series, and exposes the step quasi-norm induced
by the dilated ellipsoid family B_k = A^k Delta.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg


class SingularMatrixError(ValueError):
    """Matrix is singular (or numerically indistinguishable from it)."""


class NotExpansiveError(ValueError):
    """Some eigenvalue modulus is <= 1."""


class ConstructionFailedError(RuntimeError):
    """Ellipsoid gauge construction or verification failed."""


#: level-search window for the step quasi-norm
LEVEL_MIN = -64
LEVEL_MAX = 64

#: numerical rank / diagonalizability threshold on the eigenvector matrix
_DIAG_COND_LIMIT = 1e8


@dataclass(frozen=True)
class ExpansiveDilation:
    """A validated expansive matrix together with its spectral brackets.

    lambda_minus/lambda_plus bracket the eigenvalue moduli (strictly, with a
    relative epsilon margin, when the matrix is not diagonalizable) and
    zeta_{+/-} = ln(lambda_{+/-}) / ln(b) with b = |det A|.
    """

    matrix: np.ndarray
    dim: int
    det_abs: float
    lambda_minus: float
    lambda_plus: float
    zeta_minus: float
    zeta_plus: float
    diagonalizable: bool
    epsilon_bracket: float

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    def power(self, j: int) -> np.ndarray:
        """A^j for integer j (cached, filled iteratively from the origin)."""
        cache = _power_cache(self)
        if j not in cache:
            if j > 0:
                start = max(i for i in cache if 0 <= i <= j)
                cur = cache[start]
                for i in range(start + 1, j + 1):
                    cur = cur @ self.matrix
                    cache[i] = cur
            else:
                start = min(i for i in cache if j <= i <= 0)
                cur = cache[start]
                inv = cache[-1]
                for i in range(start - 1, j - 1, -1):
                    cur = cur @ inv
                    cache[i] = cur
        return cache[j]


def _power_cache(dil: ExpansiveDilation) -> dict:
    cache = getattr(dil, "_powers", None)
    if cache is None:
        cache = {0: np.eye(dil.dim), 1: np.asarray(dil.matrix)}
        cache[-1] = np.linalg.inv(dil.matrix)
        object.__setattr__(dil, "_powers", cache)
    return cache


def validate_expansive(matrix, epsilon_bracket: float = 0.05) -> ExpansiveDilation:
    """Validate a candidate dilation matrix and compute its spectral data.

    Raises SingularMatrixError / NotExpansiveError.  For non-diagonalizable
    input the moduli bracket is widened by a relative epsilon margin
    (shrunk if needed so the lower edge stays > 1).
    """
    A = np.atleast_2d(np.asarray(matrix, dtype=float))
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"dilation matrix must be square, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError("dilation matrix has non-finite entries")
    n = A.shape[0]
    det = np.linalg.det(A)
    if not np.isfinite(det) or abs(det) < 1e-12 * max(1.0, np.abs(A).max()) ** n:
        raise SingularMatrixError(f"matrix determinant {det} is numerically singular")

    eigvals, eigvecs = np.linalg.eig(A)
    moduli = np.abs(eigvals)
    if moduli.min() <= 1.0:
        raise NotExpansiveError(
            f"eigenvalue moduli {sorted(moduli)} must all exceed 1"
        )

    # numerical diagonalizability: condition of the eigenvector matrix
    try:
        cond = np.linalg.cond(eigvecs)
    except np.linalg.LinAlgError:
        cond = np.inf
    diagonalizable = bool(np.isfinite(cond) and cond < _DIAG_COND_LIMIT)

    lam_lo = float(moduli.min())
    lam_hi = float(moduli.max())
    if not diagonalizable:
        # keep the lower bracket strictly above 1
        eps_lo = min(epsilon_bracket, 0.5 * (1.0 - 1.0 / lam_lo))
        lam_lo = lam_lo * (1.0 - eps_lo)
        lam_hi = lam_hi * (1.0 + epsilon_bracket)

    b = abs(det)
    return ExpansiveDilation(
        matrix=A,
        dim=n,
        det_abs=float(b),
        lambda_minus=lam_lo,
        lambda_plus=lam_hi,
        zeta_minus=math.log(lam_lo) / math.log(b),
        zeta_plus=math.log(lam_hi) / math.log(b),
        diagonalizable=diagonalizable,
        epsilon_bracket=float(epsilon_bracket),
    )


def _unit_ball_volume(n: int) -> float:
    return math.pi ** (n / 2.0) / math.gamma(n / 2.0 + 1.0)


def _gen_eig_max(M: np.ndarray, P: np.ndarray) -> float:
    """Largest generalized eigenvalue of M x = lambda P x (both symmetric, P>0)."""
    vals = scipy.linalg.eigh(M, P, eigvals_only=True)
    return float(vals[-1])


@dataclass(frozen=True)
class EllipsoidGauge:
    """Ellipsoid gauge Delta = {x : x^T P x < radius}, |Delta| = 1.

    growth_r certifies Delta subset r*Delta subset A*Delta; sigma is the
    smallest positive integer with 2*B_0 contained in A^sigma B_0.
    """

    dilation: ExpansiveDilation
    quadratic_form: np.ndarray
    radius: float
    growth_r: float
    sigma: int

    def __post_init__(self):
        P = np.asarray(self.quadratic_form, dtype=float)
        P.setflags(write=False)
        object.__setattr__(self, "quadratic_form", P)
        object.__setattr__(self, "_forms", {0: P})

    @property
    def det_abs(self) -> float:
        return self.dilation.det_abs

    def ball_form(self, k: int) -> np.ndarray:
        """Quadratic form M_k with B_k = {x : x^T M_k x < radius}."""
        forms = getattr(self, "_forms")
        if k not in forms:
            Ak = self.dilation.power(-k)
            forms[k] = Ak.T @ self.quadratic_form @ Ak
        return forms[k]

    def ball_contains(self, k: int, x: np.ndarray,
                      rtol: float = 0.0) -> np.ndarray:
        """Open-ellipsoid membership of points x (shape (..., n)) in B_k.

        rtol shrinks the acceptance threshold relatively; the gauge form
        carries ~1e-12 rounding, so callers that must classify points lying
        exactly on ball boundaries deterministically pass rtol ~ 1e-9.
        """
        x = np.asarray(x, dtype=float)
        M = self.ball_form(k)
        q = np.einsum("...i,ij,...j->...", x, M, x)
        return q < self.radius * (1.0 - rtol)

    def levels(self, x: np.ndarray, lo: int = LEVEL_MIN, hi: int = LEVEL_MAX,
               rtol: float = 0.0):
        """Vectorized quasi-norm levels: smallest m with x in B_m, minus 1.

        Returns (levels, clamped) int/bool arrays; points equal to 0 get
        level lo-1 (their quasi-norm value is 0 by convention).
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        npts = x.shape[0]
        member_prev = np.zeros(npts, dtype=bool)
        lev = np.full(npts, hi + 1, dtype=np.int64)  # hi+1 == "never entered"
        # monotone membership: sweep upward, record first entry level
        for m in range(lo, hi + 1):
            member = self.ball_contains(m, x, rtol=rtol)
            newly = member & ~member_prev & (lev == hi + 1)
            lev[newly] = m
            member_prev = member
            if member.all() and m >= lo:
                # all inside from here on; anything still unset entered earlier
                break
        zero = np.all(x == 0.0, axis=-1)
        clamped = (lev == hi + 1) | ((lev == lo) & ~zero)
        lev = np.where(lev == hi + 1, hi + 1, lev) - 1  # quasi-norm level = entry - 1
        lev[zero] = lo - 1
        return lev, clamped


@dataclass(frozen=True)
class QuasiNormValue:
    level: int | None
    value: float
    clamped: bool = False


def build_ellipsoid(dilation: ExpansiveDilation, *, tail_tol: float = 1e-12,
                    check_samples: int = 1000) -> EllipsoidGauge:
    """Construct the ellipsoid gauge for an expansive dilation.

    P is the truncated series sum_j r0^{2j} (A^{-j})^T (A^{-j}) with
    r0 = (1+lambda_minus)/2, rescaled so |Delta| = 1.  The growth factor r
    is located by bisection on the generalized-eigenvalue containment
    predicate; sigma by direct search on the same predicate family.
    """
    A = np.asarray(dilation.matrix)
    n = dilation.dim
    r0 = 0.5 * (1.0 + dilation.lambda_minus)

    Ainv = np.linalg.inv(A)
    P = np.zeros((n, n))
    M = np.eye(n)  # A^{-j} accumulating
    scale = 1.0
    prev_norm = None
    for j in range(10000):
        term = scale * (M.T @ M)
        P += term
        tnorm = float(np.linalg.norm(term, 2))
        if prev_norm is not None and tnorm < prev_norm:
            ratio = tnorm / prev_norm
            if tnorm * ratio / (1.0 - ratio) < tail_tol:
                break
        prev_norm = tnorm
        M = M @ Ainv
        scale *= r0 * r0
    else:
        raise ConstructionFailedError("Lyapunov series did not reach tail tolerance")

    # rescale so the unit-level set has volume exactly 1
    omega = _unit_ball_volume(n)
    t = (omega ** 2 / np.linalg.det(P)) ** (1.0 / n)
    P = t * P
    radius = 1.0

    # largest admissible growth r: bisection on r*Delta subset A*Delta
    M1 = Ainv.T @ P @ Ainv
    lam = _gen_eig_max(M1, P)

    def admissible(r):
        return r * r * lam <= 1.0 + 1e-14

    lo, hi = 1.0, 2.0
    while admissible(hi):
        hi *= 2.0
        if hi > 1e6:
            raise ConstructionFailedError("growth bisection upper bound runaway")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if admissible(mid):
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-13:
            break
    growth_r = lo
    if growth_r <= 1.0 + 1e-9:
        raise ConstructionFailedError(f"no admissible growth factor > 1 (r={growth_r})")

    # sigma: smallest positive integer with 2*B_0 subset A^sigma B_0;
    # containment with equality counts (open sets of equal gauge).
    sigma = None
    Ak = np.eye(n)
    for s in range(1, 65):
        Ak = Ak @ Ainv
        Ms = Ak.T @ P @ Ak
        if 4.0 * _gen_eig_max(Ms, P) <= 1.0 + 1e-12:
            sigma = s
            break
    if sigma is None:
        raise ConstructionFailedError("no sigma <= 64 with 2*B_0 inside A^sigma B_0")

    gauge = EllipsoidGauge(dilation=dilation, quadratic_form=P, radius=radius,
                           growth_r=growth_r, sigma=sigma)

    # sampled verification of the chain Delta ⊂ rDelta ⊂ ADelta and sigma
    rng = np.random.default_rng(0)
    u = rng.standard_normal((check_samples, n))
    L = np.linalg.cholesky(P)
    y = u / np.linalg.norm(u, axis=1, keepdims=True) * math.sqrt(radius)
    bound = np.linalg.solve(L.T, y.T).T  # points with x^T P x = radius
    rx = growth_r * bound
    qa = np.einsum("...i,ij,...j->...", rx @ Ainv.T, P, rx @ Ainv.T)
    if (qa > radius * (1.0 + 1e-9)).any():
        raise ConstructionFailedError("sampled boundary escapes A*Delta")
    two = 2.0 * bound
    As = dilation.power(-sigma)
    qs = np.einsum("...i,ij,...j->...", two @ As.T, P, two @ As.T)
    if (qs > radius * (1.0 + 1e-9)).any():
        raise ConstructionFailedError("sampled 2*B_0 escapes A^sigma B_0")
    if sigma > 1:
        As1 = dilation.power(-(sigma - 1))
        qs1 = np.einsum("...i,ij,...j->...", two @ As1.T, P, two @ As1.T)
        if not (qs1 > radius).any():
            raise ConstructionFailedError("sigma not minimal on sampled boundary")
    return gauge


def step_quasi_norm(gauge: EllipsoidGauge, x) -> QuasiNormValue:
    """rho(x) = b^k for x in B_{k+1} \\ B_k; rho(0) = 0.

    Total on the level window [LEVEL_MIN, LEVEL_MAX]: outside it the value
    is clamped to the window edge and flagged.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != gauge.dilation.dim:
        raise ValueError(f"point has dim {x.shape[0]}, gauge has {gauge.dilation.dim}")
    if np.all(x == 0.0):
        return QuasiNormValue(level=None, value=0.0, clamped=False)
    b = gauge.det_abs
    lo, hi = LEVEL_MIN, LEVEL_MAX
    if not gauge.ball_contains(hi, x[None, :])[0]:
        return QuasiNormValue(level=hi, value=float(b) ** hi, clamped=True)
    if gauge.ball_contains(lo, x[None, :])[0]:
        return QuasiNormValue(level=lo - 1, value=float(b) ** (lo - 1), clamped=True)
    # smallest m in (lo, hi] with x in B_m, via monotone bisection
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if gauge.ball_contains(mid, x[None, :])[0]:
            hi = mid
        else:
            lo = mid
    k = hi - 1
    return QuasiNormValue(level=k, value=float(b) ** k, clamped=False)


def quasi_norm_field(gauge: EllipsoidGauge, points: np.ndarray,
                     lo: int = -48, hi: int = 48) -> np.ndarray:
    """Vectorized rho over an array of points (..., n)."""
    pts = np.asarray(points, dtype=float)
    flat = pts.reshape(-1, pts.shape[-1])
    lev, _ = gauge.levels(flat, lo=lo, hi=hi)
    b = gauge.det_abs
    vals = np.where(lev < lo, 0.0, np.power(float(b), lev.astype(float)))
    return vals.reshape(pts.shape[:-1])


def norm_comparisons(gauge: EllipsoidGauge, sample_count: int = 2000,
                     seed: int = 0, scale_range: tuple[int, int] = (-8, 8)) -> dict:
    """Fit the constants comparing |x| with rho(x)^{zeta} and |A^j x| with
    b^{j zeta}|x|, over log-uniform multiscale samples.

    Returns a dict of fitted constants plus a stability flag: the fit is
    marked unstable if per-scale-band constants grow monotonically by more
    than a factor 10 across four consecutive bands.
    """
    dil = gauge.dilation
    n = dil.dim
    rng = np.random.default_rng(seed)
    j_lo, j_hi = scale_range
    per = max(8, sample_count // (j_hi - j_lo + 1))
    b = dil.det_abs
    zm, zp = dil.zeta_minus, dil.zeta_plus

    xs, rhos, bands = [], [], []
    for j in range(j_lo, j_hi + 1):
        u = rng.standard_normal((per, n))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        # radii spread across one shell
        rad = rng.uniform(0.3, 1.0, size=(per, 1))
        base = u * rad
        pts = base @ dil.power(j).T
        xs.append(pts)
        bands.append(np.full(per, j))
    xs = np.concatenate(xs)
    bands = np.concatenate(bands)
    rhos = quasi_norm_field(gauge, xs)
    euc = np.linalg.norm(xs, axis=1)
    ok = (rhos > 0) & (euc > 0)
    xs, rhos, euc, bands = xs[ok], rhos[ok], euc[ok], bands[ok]

    def fit_two_sided(mask, lower_pow, upper_pow):
        if not mask.any():
            return 1.0
        r, e = rhos[mask], euc[mask]
        c_lo = np.max(np.power(r, lower_pow) / e)
        c_hi = np.max(e / np.power(r, upper_pow))
        return float(max(c_lo, c_hi, 1.0))

    large = rhos >= 1.0
    small = rhos <= 1.0
    c_coarse = fit_two_sided(large, zm, zp)   # rho >= 1: rho^z- <= C|x|, |x| <= C rho^z+
    c_fine = fit_two_sided(small, zp, zm)     # rho <= 1: exponents swap

    # |A^j x| vs b^{j zeta} |x|
    c_dil = 1.0
    u = rng.standard_normal((256, n))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    base_norm = np.linalg.norm(u, axis=1)
    for j in range(j_lo, j_hi + 1):
        img = u @ dil.power(j).T
        ratio = np.linalg.norm(img, axis=1) / base_norm
        if j >= 0:
            lo_b, hi_b = b ** (j * zm), b ** (j * zp)
        else:
            lo_b, hi_b = b ** (j * zp), b ** (j * zm)
        c_dil = max(c_dil, float(np.max(lo_b / ratio)), float(np.max(ratio / hi_b)))

    # per-band stability of the coarse/fine fits
    band_cs = []
    for j in range(j_lo, j_hi + 1):
        m = bands == j
        if not m.any():
            continue
        big, sml = m & large, m & small
        band_cs.append(max(fit_two_sided(big, zm, zp), fit_two_sided(sml, zp, zm)))
    unstable = False
    for i in range(len(band_cs) - 4):
        window = band_cs[i:i + 5]
        if all(window[t + 1] > window[t] for t in range(4)) and window[4] > 10 * window[0]:
            unstable = True
    return {
        "coarse_scale": c_coarse,
        "fine_scale": c_fine,
        "dilation_growth": c_dil,
        "band_constants": band_cs,
        "stable": not unstable,
    }


# ---------------------------------------------------------------------------
# descriptors / reports

def dilation_from_descriptor(desc) -> ExpansiveDilation:
    """Build from a JSON descriptor {"matrix": [[...]], "epsilon_bracket": eps}."""
    if isinstance(desc, str):
        desc = json.loads(desc)
    if "matrix" not in desc:
        raise ValueError("descriptor missing 'matrix'")
    eps = desc.get("epsilon_bracket", 0.05)
    return validate_expansive(np.asarray(desc["matrix"], dtype=float), eps)


def geometry_report(gauge: EllipsoidGauge, comparisons: dict | None = None) -> dict:
    """JSON-ready report: b, spectral brackets, sigma, growth r, fit constants."""
    dil = gauge.dilation
    rep = {
        "b": dil.det_abs,
        "lambda": [dil.lambda_minus, dil.lambda_plus],
        "zeta": [dil.zeta_minus, dil.zeta_plus],
        "sigma": gauge.sigma,
        "r": gauge.growth_r,
        "diagonalizable": dil.diagonalizable,
        "fitted_constants": comparisons or {},
    }
    return rep
