"""Muckenhoupt-style weight classes for one dilation and for products.

A weight is a nonnegative density sampled on a grid.  For a single
dilation the class-p constant takes a supremum over every grid-centered
dilated ball of (ball average of w) times (ball average of w^{-1/(p-1)})
to the (p-1), with the p = 1 branch replacing the dual average by the
essential sup of 1/w over the ball.  Product weights are measured
slice-wise: every one-parameter slice in each direction must carry a
uniformly bounded one-parameter constant, and the recorded constant is
the larger of the two directional suprema.

The critical index is probed rather than solved for: a weight passes a
probe exponent when its constant is finite and does not blow up under
one dyadic grid refinement.  Refinement is the only way a sampled grid
can distinguish a genuinely infinite constant from a large finite one,
so closed-form densities (constant, power) re-evaluate on the refined
grid while tabulated densities fall back to finiteness alone.

Doubling reports fit the smallest bracket constant C making

    C^{-1} b^{(m-k)/p}  <=  w(x + B_m) / w(x + B_k)  <=  C b^{(m-k)p}

hold over sampled centers x and level pairs k <= m, and analogously per
factor for product weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.ndimage as ndi

from .dilation import EllipsoidGauge, quasi_norm_field
from .fields import (Field, GridSpec, NegativeWeightError, ball_mask,
                     load_field, lp_norm, resolvable_levels)
from .maximal import _ball_average, _footprint, strong_maximal


class DegenerateWeightError(ValueError):
    """Density is identically zero, negative, or not finite."""


# ---------------------------------------------------------------------------
# weight containers
# ---------------------------------------------------------------------------

def _check_density(values: np.ndarray) -> np.ndarray:
    if np.iscomplexobj(values):
        if np.abs(values.imag).max() > 0:
            raise NegativeWeightError("weight density must be real")
        values = values.real
    if not np.all(np.isfinite(values)):
        raise DegenerateWeightError("weight density has non-finite entries")
    if np.any(values < 0):
        raise NegativeWeightError("weight density has negative entries")
    if not np.any(values > 0):
        raise DegenerateWeightError("weight density is identically zero")
    return np.asarray(values, dtype=float)


@dataclass
class Weight:
    """Nonnegative density on a single-factor grid plus a closed-form tag.

    descriptor kinds: {"kind": "constant"} | {"kind": "power", "alpha": a}
    | {"kind": "table", "file": path} | {"kind": "custom"}.
    """

    density: Field
    descriptor: dict = field(default_factory=lambda: {"kind": "custom"})

    def __post_init__(self):
        vals = _check_density(self.density.values)
        self.density = Field(spec=self.density.spec, values=vals)

    @property
    def spec(self) -> GridSpec:
        return self.density.spec

    @property
    def values(self) -> np.ndarray:
        """Real view of the density samples."""
        return self.density.values.real


@dataclass
class ProductWeight:
    """Nonnegative density on a two-factor grid with slice access.

    The matrix view flattens factor-1 axes into rows and factor-2 axes
    into columns, so ``slice1(i)`` is the factor-2 profile at the i-th
    factor-1 cell and ``slice2(j)`` the factor-1 profile at the j-th
    factor-2 cell.
    """

    density: Field
    descriptor: dict = field(default_factory=lambda: {"kind": "custom"})

    def __post_init__(self):
        if len(self.density.spec.dims) != 2:
            raise ValueError("ProductWeight needs a two-factor grid")
        vals = _check_density(self.density.values)
        self.density = Field(spec=self.density.spec, values=vals)
        self._matrix = None

    @property
    def spec(self) -> GridSpec:
        return self.density.spec

    @property
    def values(self) -> np.ndarray:
        """Real view of the density samples."""
        return self.density.values.real

    @property
    def matrix(self) -> np.ndarray:
        if self._matrix is None:
            spec = self.spec
            n1 = int(np.prod([spec.samples[a] for a in spec.factor_axes(0)]))
            self._matrix = self.values.reshape(n1, -1)
        return self._matrix

    def slice1(self, i: int) -> np.ndarray:
        """w(x1, .) at the i-th flattened factor-1 cell."""
        return self.matrix[i]

    def slice2(self, j: int) -> np.ndarray:
        """w(., x2) at the j-th flattened factor-2 cell."""
        return self.matrix[:, j]


def constant_weight(spec: GridSpec) -> Weight:
    return Weight(density=Field(spec=spec, values=np.ones(spec.shape)),
                  descriptor={"kind": "constant"})


def power_weight(gauge: EllipsoidGauge, spec: GridSpec, alpha: float,
                 oversample: int = 16) -> Weight:
    """w = rho^alpha on cell centers, origin cell averaged by oversampling.

    rho vanishes at the origin, so for negative alpha the cell containing
    0 holds a singularity; its value is the cell average of rho^alpha
    over ``oversample`` sub-points per axis (sub-centers never hit 0
    exactly for even counts).  Exponents alpha <= -1 are accepted: the
    grid density is finite everywhere, and the non-integrable continuum
    singularity shows up as a constant that diverges under refinement.
    """
    pts = spec.points()
    rho = quasi_norm_field(gauge, pts)
    with np.errstate(divide="ignore"):
        vals = np.where(rho > 0, rho, 1.0) ** alpha
        vals[rho == 0.0] = np.inf if alpha < 0 else 0.0
    if alpha == 0.0:
        vals[...] = 1.0
    # locate cells containing the origin and replace by sub-cell averages
    sing = ~np.isfinite(vals) if alpha < 0 else (vals == 0.0)
    if np.any(sing):
        h = np.asarray(spec.spacing)
        n = spec.ndim_total
        offs = (np.arange(oversample) + 0.5) / oversample - 0.5
        grids = np.meshgrid(*([offs] * n), indexing="ij")
        sub = np.stack([g.reshape(-1) for g in grids], axis=-1) * h
        for idx in np.argwhere(sing):
            center = pts[tuple(idx)]
            rv = quasi_norm_field(gauge, center + sub)
            vals[tuple(idx)] = float(np.mean(rv ** alpha))
    return Weight(density=Field(spec=spec, values=vals),
                  descriptor={"kind": "power", "alpha": float(alpha)})


def table_weight(spec: GridSpec, path: str) -> Weight:
    f = load_field(path)
    if f.spec.shape != spec.shape:
        raise ValueError("tabulated weight does not match the grid")
    return Weight(density=Field(spec=spec, values=np.abs(f.values)),
                  descriptor={"kind": "table", "file": str(path)})


def weight_from_descriptor(desc: dict, gauge: EllipsoidGauge,
                           spec: GridSpec) -> Weight:
    kind = desc.get("kind")
    if kind == "constant":
        return constant_weight(spec)
    if kind == "power":
        return power_weight(gauge, spec, float(desc["alpha"]))
    if kind == "table":
        return table_weight(spec, desc["file"])
    raise ValueError(f"unknown weight descriptor kind: {kind!r}")


def separable_product_weight(w1: Weight, w2: Weight,
                             spec: GridSpec) -> ProductWeight:
    """Outer product of two factor weights on the given product grid."""
    if len(spec.dims) != 2:
        raise ValueError("separable product needs a two-factor grid")
    s1, s2 = spec.factor_spec(0), spec.factor_spec(1)
    if w1.spec.shape != s1.shape or w2.spec.shape != s2.shape:
        raise ValueError("factor weights do not match the product grid factors")
    v1 = w1.values.reshape(-1)
    v2 = w2.values.reshape(-1)
    vals = np.outer(v1, v2).reshape(spec.shape)
    return ProductWeight(
        density=Field(spec=spec, values=vals),
        descriptor={"kind": "separable", "factor1": w1.descriptor,
                    "factor2": w2.descriptor})


def weight_measure(w, mask: np.ndarray) -> float:
    """w(E) = sum of density * cell volume over the cell set E.

    Correctly-rounded summation, so measures of disjoint sets add up to
    the measure of the union to within one ulp regardless of how the
    cells are split between the sets.
    """
    dens = w.density if isinstance(w, (Weight, ProductWeight)) else w
    vals = dens.values if isinstance(dens, Field) else np.asarray(dens)
    if np.iscomplexobj(vals):
        vals = vals.real
    spec = dens.spec if isinstance(dens, Field) else None
    cv = spec.cell_volume if spec is not None else 1.0
    return math.fsum(vals[mask].tolist()) * cv


# ---------------------------------------------------------------------------
# class-p constants
# ---------------------------------------------------------------------------

@dataclass
class MuckenhouptReport:
    """Outcome of a class-p sweep: the constant and where it is attained."""

    p: float
    constant_estimate: float
    witness: dict
    q_w_estimate: float | None = None

    def __post_init__(self):
        if np.isfinite(self.constant_estimate) and \
                self.constant_estimate < 1.0 - 1e-9:
            raise ValueError(
                f"class constant must be >= 1, got {self.constant_estimate}")


def _dual_density(vals: np.ndarray, p: float) -> np.ndarray:
    """w^{-1/(p-1)} with zeros mapped to +inf (degenerate dual mass)."""
    with np.errstate(divide="ignore"):
        out = np.where(vals > 0, vals, 1.0) ** (-1.0 / (p - 1.0))
        out[vals == 0.0] = np.inf
    return out


def _ball_min(vals: np.ndarray, mask: np.ndarray, spec: GridSpec) -> np.ndarray:
    fp = _footprint(mask, spec)
    if vals.ndim == 1:
        return ndi.minimum_filter1d(vals, size=fp.shape[0], mode="wrap")
    return ndi.minimum_filter(vals, footprint=fp, mode="wrap")


def ap_constant(w: Weight, p: float, gauge: EllipsoidGauge,
                ball_levels: list[int] | None = None) -> MuckenhouptReport:
    """Sweep every grid-centered dilated ball for the class-p quantity.

    The p = 1 branch pairs the ball average of w with the sup of 1/w over
    the same ball; a vanishing density inside any swept ball makes the
    dual factor infinite and the constant is reported as +inf rather
    than raised.
    """
    if p < 1.0:
        raise ValueError(f"class exponent must be >= 1, got {p}")
    spec = w.spec
    if ball_levels is None:
        lo, hi = resolvable_levels(gauge, spec)
        ball_levels = list(range(lo, hi + 1))
    vals = w.values
    has_zero = bool(np.any(vals == 0.0))
    best = -np.inf
    witness: dict = {}
    for k in ball_levels:
        mask = ball_mask(gauge, spec, k)
        avg_w = _ball_average(vals, mask, spec)
        if p == 1.0:
            mn = _ball_min(vals, mask, spec)
            with np.errstate(divide="ignore"):
                quant = np.where(mn > 0, avg_w / np.where(mn > 0, mn, 1.0),
                                 np.inf)
        else:
            if has_zero:
                quant = np.full(spec.shape, np.inf)
            else:
                # peaked duals leave ~1e-13-relative negative FFT residue
                avg_dual = np.maximum(
                    _ball_average(_dual_density(vals, p), mask, spec), 0.0)
                quant = avg_w * avg_dual ** (p - 1.0)
        top = float(quant.max())
        if top > best:
            best = top
            at = np.unravel_index(int(np.argmax(quant)), spec.shape)
            witness = {"level": k, "center_index": tuple(int(i) for i in at)}
    # FFT averages carry ~1e-13 relative rounding; never report below 1
    if np.isfinite(best):
        best = max(best, 1.0)
    return MuckenhouptReport(p=float(p), constant_estimate=best,
                             witness=witness)


def _factor_ball_average(vals: np.ndarray, mask: np.ndarray,
                         axes: tuple[int, ...]) -> np.ndarray:
    """Ball average along one factor's axes, all slices at once."""
    cnt = float(mask.sum())
    F = np.fft.fftn(vals, axes=axes)
    M = np.fft.fftn(np.fft.ifftshift(mask.astype(float)))
    shape = [1] * vals.ndim
    for ax, s in zip(axes, mask.shape):
        shape[ax] = s
    F *= np.conj(M).reshape(shape)
    return np.fft.ifftn(F, axes=axes).real / cnt


def product_ap_constant(w: ProductWeight, p: float,
                        gauges: tuple[EllipsoidGauge, EllipsoidGauge],
                        ) -> MuckenhouptReport:
    """Slice-uniform class-p constant over both directions.

    Every slice in each direction is swept simultaneously (the ball
    average along one factor's axes is a separable correlation), so the
    essential sup over slices is a genuine max over all of them.
    """
    if p <= 1.0:
        raise ValueError(f"product class needs p > 1, got {p}")
    spec = w.spec
    vals = w.values
    has_zero = bool(np.any(vals == 0.0))
    best = -np.inf
    witness: dict = {}
    for direction in (0, 1):
        g = gauges[direction]
        fspec = spec.factor_spec(direction)
        axes = spec.factor_axes(direction)
        lo, hi = resolvable_levels(g, fspec)
        for k in range(lo, hi + 1):
            mask = ball_mask(g, fspec, k)
            if has_zero:
                quant = np.full(spec.shape, np.inf)
            else:
                avg_w = _factor_ball_average(vals, mask, axes)
                avg_d = np.maximum(
                    _factor_ball_average(_dual_density(vals, p), mask, axes),
                    0.0)
                quant = avg_w * avg_d ** (p - 1.0)
            top = float(quant.max())
            if top > best:
                best = top
                at = np.unravel_index(int(np.argmax(quant)), spec.shape)
                witness = {"direction": direction + 1, "level": k,
                           "center_index": tuple(int(i) for i in at)}
    if np.isfinite(best):
        best = max(best, 1.0)
    return MuckenhouptReport(p=float(p), constant_estimate=best,
                             witness=witness)


# ---------------------------------------------------------------------------
# critical index
# ---------------------------------------------------------------------------

def _refined_spec(spec: GridSpec) -> GridSpec:
    return GridSpec(dims=spec.dims, box=spec.box,
                    samples=tuple(2 * s for s in spec.samples))


def _closed_form(desc: dict, gauge: EllipsoidGauge,
                 spec: GridSpec) -> Weight | None:
    kind = desc.get("kind")
    if kind == "constant":
        return constant_weight(spec)
    if kind == "power":
        return power_weight(gauge, spec, float(desc["alpha"]))
    return None


def _rebuild_on(w, gauges, spec):
    """Re-evaluate a closed-form weight on another grid, or None."""
    desc = w.descriptor
    if isinstance(w, ProductWeight):
        if desc.get("kind") != "separable":
            return None
        f1 = _closed_form(desc["factor1"], gauges[0], spec.factor_spec(0))
        f2 = _closed_form(desc["factor2"], gauges[1], spec.factor_spec(1))
        if f1 is None or f2 is None:
            return None
        return separable_product_weight(f1, f2, spec)
    return _closed_form(desc, gauges[0], spec)


def critical_index(w, gauges, probe_ps: list[float], *,
                   growth_tol: float = 1.25) -> float:
    """Smallest probed exponent whose constant is finite and stable.

    A probe passes when the constant is finite and, for closed-form
    densities, grows by at most ``growth_tol ** min(1, p-1)`` when the
    grid is refined dyadically once — the exponent matters because the
    dual average enters the constant raised to (p-1), which tempers a
    genuine divergence at small p.  Class monotonicity makes passing
    probes an upper tail, so the answer is the smallest passing probe —
    reported as 1.0 when even the smallest probe passes, and +inf when
    none does.
    """
    probes = sorted(float(p) for p in probe_ps)
    if not probes or probes[0] <= 1.0 or probes[-1] > 8.0:
        raise ValueError("probe exponents must lie in (1, 8]")
    product = isinstance(w, ProductWeight)
    if not product and not isinstance(gauges, (tuple, list)):
        gauges = (gauges,)
    fine_spec = _refined_spec(w.spec)
    w_fine = _rebuild_on(w, gauges, fine_spec)

    def constant_of(weight, p):
        if product:
            return product_ap_constant(weight, p, tuple(gauges))
        return ap_constant(weight, p, gauges[0])

    def passes(p: float) -> bool:
        base = constant_of(w, p).constant_estimate
        if not np.isfinite(base):
            return False
        if w_fine is None:
            return True
        fine = constant_of(w_fine, p).constant_estimate
        tol = growth_tol ** min(1.0, p - 1.0)
        return np.isfinite(fine) and fine <= tol * max(base, 1.0)

    first_pass = None
    for p in probes:
        if passes(p):
            first_pass = p
            break
    if first_pass is None:
        return math.inf
    return 1.0 if first_pass == probes[0] else first_pass


# ---------------------------------------------------------------------------
# doubling reports
# ---------------------------------------------------------------------------

@dataclass
class DoublingReport:
    """Fitted bracket constant for ball-measure growth at exponent p."""

    p: float
    fitted_c: float
    worst_lower: dict
    worst_upper: dict
    levels: list[int]
    sample_count: int


def _ball_sums(vals: np.ndarray, gauge: EllipsoidGauge, spec: GridSpec,
               levels: list[int]) -> dict[int, np.ndarray]:
    out = {}
    for k in levels:
        mask = ball_mask(gauge, spec, k)
        cnt = int(mask.sum())
        out[k] = _ball_average(vals, mask, spec) * cnt * spec.cell_volume
    return out


def doubling_report(w: Weight, gauge: EllipsoidGauge, p: float,
                    sample_stride: int = 8,
                    levels: list[int] | None = None) -> DoublingReport:
    """Fit C in  C^{-1} b^{(m-k)/p} <= w(x+B_m)/w(x+B_k) <= C b^{(m-k)p}.

    Sampled centers are every ``sample_stride``-th grid point; the fitted
    constant is the smallest C making both sides hold over all sampled
    (x, k <= m), and the worst witnesses record where each side binds.
    """
    spec = w.spec
    if levels is None:
        lo, hi = resolvable_levels(gauge, spec)
        levels = list(range(lo, hi + 1))
    b = gauge.det_abs
    sums = _ball_sums(w.values, gauge, spec, levels)
    sel = tuple(slice(None, None, sample_stride) for _ in spec.shape)
    c_fit = 1.0
    worst_lower = {"excess": 1.0}
    worst_upper = {"excess": 1.0}
    n_samp = int(np.prod(sums[levels[0]][sel].shape))
    for ik, k in enumerate(levels):
        wk = sums[k][sel]
        for m in levels[ik:]:
            wm = sums[m][sel]
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where(wk > 0, wm / np.where(wk > 0, wk, 1.0), np.inf)
            # lower violation: C >= b^{(m-k)/p} / ratio
            low = float(b) ** ((m - k) / p) / ratio
            up = ratio / float(b) ** ((m - k) * p)
            for excess, side in ((low, worst_lower), (up, worst_upper)):
                top = float(np.max(excess))
                if top > side["excess"]:
                    at = np.unravel_index(int(np.argmax(excess)), excess.shape)
                    side.update(excess=top, k=k, m=m,
                                center_index=tuple(int(i) * sample_stride
                                                   for i in at))
            c_fit = max(c_fit, float(np.max(low)), float(np.max(up)))
    return DoublingReport(p=float(p), fitted_c=c_fit, worst_lower=worst_lower,
                          worst_upper=worst_upper, levels=list(levels),
                          sample_count=n_samp)


def product_doubling_report(w: ProductWeight,
                            gauges: tuple[EllipsoidGauge, EllipsoidGauge],
                            p: float, sample_stride: int = 16,
                            levels_per_factor: int = 4) -> DoublingReport:
    """Two-factor bracket fit over per-factor level pairs k_i <= l_i."""
    spec = w.spec
    vals = w.values
    levs = []
    for i in (0, 1):
        lo, hi = resolvable_levels(gauges[i], spec.factor_spec(i))
        take = min(levels_per_factor, hi - lo + 1)
        levs.append(list(range(lo, lo + take)))
    b1, b2 = (g.det_abs for g in gauges)
    cv = spec.cell_volume
    sums: dict[tuple[int, int], np.ndarray] = {}
    for k1 in levs[0]:
        m1 = ball_mask(gauges[0], spec.factor_spec(0), k1)
        part = _factor_ball_average(vals, m1, spec.factor_axes(0)) * m1.sum()
        for k2 in levs[1]:
            m2 = ball_mask(gauges[1], spec.factor_spec(1), k2)
            sums[(k1, k2)] = (_factor_ball_average(part, m2, spec.factor_axes(1))
                              * m2.sum() * cv)
    sel = tuple(slice(None, None, sample_stride) for _ in spec.shape)
    c_fit = 1.0
    worst_lower = {"excess": 1.0}
    worst_upper = {"excess": 1.0}
    n_samp = int(np.prod(sums[(levs[0][0], levs[1][0])][sel].shape))
    for i1, k1 in enumerate(levs[0]):
        for l1 in levs[0][i1:]:
            for i2, k2 in enumerate(levs[1]):
                for l2 in levs[1][i2:]:
                    wk = sums[(k1, k2)][sel]
                    wl = sums[(l1, l2)][sel]
                    with np.errstate(divide="ignore", invalid="ignore"):
                        ratio = np.where(wk > 0, wl / np.where(wk > 0, wk, 1.0),
                                         np.inf)
                    scale = float(b1) ** (l1 - k1) * float(b2) ** (l2 - k2)
                    low = scale ** (1.0 / p) / ratio
                    up = ratio / scale ** p
                    for excess, side in ((low, worst_lower), (up, worst_upper)):
                        top = float(np.max(excess))
                        if top > side["excess"]:
                            side.update(excess=top, k=(k1, k2), m=(l1, l2))
                    c_fit = max(c_fit, float(np.max(low)), float(np.max(up)))
    return DoublingReport(p=float(p), fitted_c=c_fit, worst_lower=worst_lower,
                          worst_upper=worst_upper,
                          levels=[levs[0], levs[1]], sample_count=n_samp)


# ---------------------------------------------------------------------------
# strong maximal boundedness witness
# ---------------------------------------------------------------------------

def _random_band_limited(spec: GridSpec, rng: np.random.Generator,
                         band: float = 0.25) -> Field:
    """Real field with spectrum supported on a low-frequency box."""
    shape = spec.shape
    spectrum = np.zeros(shape, dtype=complex)
    cut = [max(1, int(band * s / 2)) for s in shape]
    sl = tuple(np.r_[0:c, s - c:s] for c, s in zip(cut, shape))
    idx = np.ix_(*sl)
    re = rng.standard_normal([2 * c for c in cut])
    im = rng.standard_normal([2 * c for c in cut])
    spectrum[idx] = re + 1j * im
    vals = np.fft.ifftn(spectrum).real
    vals /= max(np.abs(vals).max(), 1e-30)
    return Field(spec=spec, values=vals)


def strong_maximal_witness(w: ProductWeight,
                           gauges: tuple[EllipsoidGauge, EllipsoidGauge],
                           p: float, *, count: int = 20, q: float = 2.0,
                           tuple_size: int = 5, seed: int = 0) -> dict:
    """Record operator-norm witnesses for the strong maximal function.

    Returns the largest weighted L^p ratio over ``count`` random
    band-limited inputs, and the vector-valued analogue computed over
    ``tuple_size``-tuples aggregated with exponent q.
    """
    rng = np.random.default_rng(seed)
    spec = w.spec
    wd = w.density
    scalar = 0.0
    for _ in range(count):
        f = _random_band_limited(spec, rng)
        mf = strong_maximal(f, gauges)
        num = lp_norm(mf, p, weight=wd)
        den = lp_norm(f, p, weight=wd)
        scalar = max(scalar, num / den)
    vector = 0.0
    tuples = max(1, count // tuple_size)
    for _ in range(tuples):
        fs = [_random_band_limited(spec, rng) for _ in range(tuple_size)]
        ms = [strong_maximal(f, gauges) for f in fs]
        agg_in = sum(np.abs(f.values) ** q for f in fs) ** (1.0 / q)
        agg_out = sum(np.abs(m.values) ** q for m in ms) ** (1.0 / q)
        num = lp_norm(Field(spec=spec, values=agg_out), p, weight=wd)
        den = lp_norm(Field(spec=spec, values=agg_in), p, weight=wd)
        vector = max(vector, num / den)
    return {"p": float(p), "q": float(q), "count": count,
            "tuple_count": tuples, "scalar_constant": scalar,
            "vector_constant": vector}
