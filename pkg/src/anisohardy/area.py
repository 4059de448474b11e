"""Anisotropic Lusin area functions, single-parameter and product.

The square function at scale k averages |f * phi_k|^2 over the translated
ball B_k and sums across scales.  On the periodic grid the average is taken
over the *measured* ball (the cells the mask actually contains) rather than
the ideal mass b^k: with that normalization Fubini cancels exactly, so
||S f||_2^2 = sum_k ||f * phi_k||_2^2 holds to rounding and the spectral
(Plancherel) route gives an independent oracle.

Kernels are anything this package can realize per-scale on the dual side: a
partition of unity (its bands), the square roots of those bands (which make
sum_k |m_k|^2 telescope to one — the specially normalized profile for exact
L^2 identities), either side of a compactly supported frame pair, or a raw
compactly supported Field (transformed semi-analytically so off-lattice
dual points are honest evaluations).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .dilation import EllipsoidGauge
from .fields import Field, GridSpec, ball_mask, lp_norm
from .frames import (
    AnnulusMismatchError,
    FramePair,
    PartitionOfUnity,
    ProductFrame,
    _dual_points,
)
from .maximal import _ball_average

__all__ = [
    "EquivalenceReport",
    "EquivalenceRow",
    "NonvanishingMeanError",
    "SqrtBands",
    "area_bound_constant",
    "equivalence_report",
    "equivalence_to_csv",
    "lusin_area",
    "out_of_band_fraction",
    "product_lusin_area",
]


class NonvanishingMeanError(ValueError):
    """The kernel's transform does not vanish at the origin."""


@dataclass(frozen=True)
class SqrtBands:
    """Kernel whose level multipliers are square roots of partition bands.

    Because the bands telescope to one on covered frequencies, the squared
    multipliers of this kernel sum to exactly one there — the normalization
    under which the discrete L^2 area identity is an equality, not a bound.
    """

    partition: PartitionOfUnity

    @property
    def levels(self) -> tuple[int, int]:
        return self.partition.levels


@dataclass(frozen=True)
class _FieldTransform:
    """Continuous-transform proxy of a compactly supported grid kernel.

    phi_hat(xi) = sum over support cells of phi(x) e^{-i x.xi} * cellvol,
    evaluable at arbitrary (off-lattice) dual points.
    """

    points: np.ndarray
    weights: np.ndarray

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        flat = pts.reshape(-1, pts.shape[-1])
        out = np.zeros(flat.shape[0], dtype=complex)
        block = max(1, int(2**22 // max(1, self.points.shape[0])))
        for start in range(0, flat.shape[0], block):
            chunk = flat[start:start + block]
            out[start:start + block] = (
                np.exp(-1j * (chunk @ self.points.T)) @ self.weights)
        return out.reshape(pts.shape[:-1])


def _field_kernel_transform(kernel: Field,
                            require_mean: bool = True) -> _FieldTransform:
    spec = kernel.spec
    vals = kernel.values
    support = np.argwhere(vals != 0.0)
    if support.size == 0:
        raise ValueError("kernel field is identically zero")
    pts = np.stack(
        [spec.axis_coords(j)[support[:, j]] for j in range(spec.ndim_total)],
        axis=-1,
    )
    weights = vals[tuple(support.T)] * spec.cell_volume
    mean = complex(np.sum(weights))
    scale = float(np.sum(np.abs(weights)))
    if require_mean and abs(mean) > 1e-12 * scale:
        raise NonvanishingMeanError(
            f"kernel mean {abs(mean):.3e} exceeds 1e-12 of its L1 mass {scale:.3e}")
    return _FieldTransform(points=pts, weights=weights)


def _kernel_levels(kernel) -> tuple[int, int]:
    levels = getattr(kernel, "levels", None)
    if levels is None:
        raise ValueError(
            "a raw kernel field carries no scale window; pass scale_range")
    return levels


def _kernel_gauge(kernel, gauge: EllipsoidGauge | None) -> EllipsoidGauge:
    if gauge is not None:
        return gauge
    found = getattr(kernel, "gauge", None)
    if found is None:
        raise ValueError(
            "this kernel carries no primal gauge; pass one explicitly")
    return found


def _psi_multiplier(pair: FramePair, j: int, spec: GridSpec) -> np.ndarray:
    """psi_hat((A*)^j xi) on the grid, guarded by the division threshold."""
    band = pair.partition.multiplier(j, spec)
    mask = band > 0.0
    out = np.zeros(spec.shape)
    if mask.any():
        pts = _dual_points(spec)[mask] @ pair.partition.dual_power(j).T
        th = pair.transform(pts)
        low = float(th.min())
        if low < pair.threshold:
            raise AnnulusMismatchError(
                f"level {j} reaches theta_hat = {low:.3e}, below the "
                f"division threshold {pair.threshold:.3e}")
        out[mask] = band[mask] / th
    return out


def _level_multipliers(kernel, spec: GridSpec, levels: tuple[int, int],
                       side: str) -> list[np.ndarray]:
    lo, hi = levels
    if isinstance(kernel, PartitionOfUnity):
        return [kernel.multiplier(j, spec) for j in range(lo, hi + 1)]
    if isinstance(kernel, SqrtBands):
        return [np.sqrt(np.maximum(kernel.partition.multiplier(j, spec), 0.0))
                for j in range(lo, hi + 1)]
    if isinstance(kernel, FramePair):
        if side == "theta":
            pts = _dual_points(spec)
            return [kernel.transform(pts @ kernel.partition.dual_power(j).T)
                    for j in range(lo, hi + 1)]
        if side == "psi":
            return [_psi_multiplier(kernel, j, spec) for j in range(lo, hi + 1)]
        raise ValueError(f"unknown frame side {side!r}; use 'theta' or 'psi'")
    raise TypeError(f"unsupported kernel type {type(kernel).__name__}")


def _field_multipliers(kernel: Field, gauge: EllipsoidGauge, spec: GridSpec,
                       levels: tuple[int, int]) -> list[np.ndarray]:
    from .frames import _dual_gauge

    transform = _field_kernel_transform(kernel)
    dual = _dual_gauge(gauge.dilation)
    pts = _dual_points(spec)
    lo, hi = levels
    return [transform(pts @ dual.dilation.power(j).T) for j in range(lo, hi + 1)]


def _multipliers_for(kernel, gauge: EllipsoidGauge, spec: GridSpec,
                     levels: tuple[int, int], side: str) -> list[np.ndarray]:
    if isinstance(kernel, Field):
        return _field_multipliers(kernel, gauge, spec, levels)
    return _level_multipliers(kernel, spec, levels, side)


def lusin_area(
    f: Field,
    kernel,
    gauge: EllipsoidGauge | None = None,
    scale_range: tuple[int, int] | None = None,
    *,
    side: str = "psi",
) -> Field:
    """Square function S f(x) = {sum_k mean_{B_k} |f * phi_k(x - y)|^2}^{1/2}.

    `kernel` is a PartitionOfUnity, SqrtBands, FramePair (choose `side`), or
    a compactly supported Field (then `scale_range` is required and its mean
    must vanish).  The per-scale average runs over the measured discrete
    ball; see the module docstring for why.  The scale window defaults to
    the kernel's own level window.
    """
    spec = f.spec
    gauge = _kernel_gauge(kernel, gauge)
    levels = _kernel_levels(kernel) if scale_range is None else scale_range
    lo, hi = int(levels[0]), int(levels[1])
    if hi < lo:
        raise ValueError("scale range is empty")
    mults = _multipliers_for(kernel, gauge, spec, (lo, hi), side)
    fhat = np.fft.fftn(f.values)
    total = np.zeros(spec.shape)
    for j, m in zip(range(lo, hi + 1), mults):
        g = np.fft.ifftn(fhat * m)
        mask = ball_mask(gauge, spec, j)
        total += _ball_average(np.abs(g) ** 2, mask, spec)
    return Field(spec, np.sqrt(np.maximum(total, 0.0)))


def product_lusin_area(
    f: Field,
    system,
    gauges: tuple[EllipsoidGauge, EllipsoidGauge] | None = None,
    scale_ranges=None,
    *,
    side: str = "psi",
) -> Field:
    """Product square function: the double sum over scale pairs (k1, k2).

    `system` is a ProductFrame or a pair of single-factor kernels; `gauges`
    defaults to the frame pairs' own gauges.  Each term averages
    |f * phi_{k1,k2}|^2 over the product ball B_{k1} x B_{k2} (measured
    masses), and the result factorizes exactly on separable inputs.
    """
    spec = f.spec
    if len(spec.dims) != 2:
        raise ValueError("product area needs a two-factor grid")
    if isinstance(system, ProductFrame):
        kernels = (system.pair1, system.pair2)
    else:
        kernels = tuple(system)
        if len(kernels) != 2:
            raise ValueError("system must supply exactly two factor kernels")
    g1 = _kernel_gauge(kernels[0], None if gauges is None else gauges[0])
    g2 = _kernel_gauge(kernels[1], None if gauges is None else gauges[1])
    fs1, fs2 = spec.factor_spec(0), spec.factor_spec(1)
    if scale_ranges is None:
        lv1, lv2 = _kernel_levels(kernels[0]), _kernel_levels(kernels[1])
    else:
        lv1, lv2 = scale_ranges
    lv1 = (int(lv1[0]), int(lv1[1]))
    lv2 = (int(lv2[0]), int(lv2[1]))
    m1s = _multipliers_for(kernels[0], g1, fs1, lv1, side)
    m2s = _multipliers_for(kernels[1], g2, fs2, lv2, side)

    def mask_data(gauge, fspec, levels):
        out = []
        for j in range(levels[0], levels[1] + 1):
            mask = ball_mask(gauge, fspec, j)
            cnt = int(mask.sum())
            out.append((np.fft.fftn(np.fft.ifftshift(mask.astype(float))), cnt))
        return out

    b1s = mask_data(g1, fs1, lv1)
    b2s = mask_data(g2, fs2, lv2)
    nd2 = fs2.ndim_total
    shape1 = fs1.shape + (1,) * nd2
    fhat = np.fft.fftn(f.values)
    total = np.zeros(spec.shape)
    for m1, (M1, c1) in zip(m1s, b1s):
        m1b = m1.reshape(shape1)
        M1b = M1.reshape(shape1)
        for m2, (M2, c2) in zip(m2s, b2s):
            g = np.fft.ifftn(fhat * (m1b * m2))
            sq = np.abs(g) ** 2
            corr = np.fft.ifftn(np.fft.fftn(sq) * np.conj(M1b * M2)).real
            total += corr / (c1 * c2)
    return Field(spec, np.sqrt(np.maximum(total, 0.0)))


def area_bound_constant(kernel, spec: GridSpec,
                        levels: tuple[int, int] | None = None,
                        *, gauge: EllipsoidGauge | None = None,
                        side: str = "psi") -> float:
    """sup over the dual grid of {sum_k |phi_hat((A*)^k xi)|^2}^{1/2}.

    The discrete analogue of the L^2 boundedness constant of the square
    function; for SqrtBands kernels it equals 1 on covered frequencies.
    """
    if levels is None:
        levels = _kernel_levels(kernel)
    if isinstance(kernel, Field):
        gauge = _kernel_gauge(kernel, gauge)
        mults = _field_multipliers(kernel, gauge, spec, levels)
    else:
        mults = _level_multipliers(kernel, spec, levels, side)
    total = np.zeros(spec.shape)
    for m in mults:
        total += np.abs(m) ** 2
    return float(math.sqrt(total.max()))


def out_of_band_fraction(f: Field, system) -> float:
    """Fraction of spectral energy outside the system's covered frequencies.

    The zero frequency counts as uncovered (every band kills it), so a
    field with nonzero mean always reports a positive fraction.
    """
    if isinstance(system, ProductFrame):
        c1 = system.pair1.partition.covered_mask()
        c2 = system.pair2.partition.covered_mask()
        covered = np.multiply.outer(c1, c2)
    elif isinstance(system, (FramePair, SqrtBands)):
        part = system.partition
        covered = part.covered_mask()
    elif isinstance(system, PartitionOfUnity):
        covered = system.covered_mask()
    else:
        raise TypeError(f"unsupported system type {type(system).__name__}")
    power = np.abs(np.fft.fftn(f.values)) ** 2
    total = float(power.sum())
    if total == 0.0:
        return 0.0
    return float(power[~covered].sum()) / total


# ---------------------------------------------------------------------------
# norm-equivalence experiments
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EquivalenceRow:
    f_id: str
    p: float
    weight_id: str
    norm_f: float
    norm_sf: float
    ratio: float


@dataclass
class EquivalenceReport:
    """Family-relative two-sided stability of ||S f|| / ||f|| in L^p_w.

    The spread max/min is what desk scale can certify; no global constant
    is claimed.
    """

    p: float
    weight_id: str
    rows: list[EquivalenceRow]

    @property
    def min_ratio(self) -> float:
        return min(r.ratio for r in self.rows)

    @property
    def max_ratio(self) -> float:
        return max(r.ratio for r in self.rows)

    @property
    def spread(self) -> float:
        return self.max_ratio / self.min_ratio


def _weight_id(weight) -> str:
    if weight is None:
        return "const1"
    desc = weight.descriptor
    kind = desc.get("kind", "custom")
    if kind == "power":
        return f"power({desc.get('alpha')})"
    if kind == "separable":
        inner = [d.get("kind", "custom") for d in
                 (desc.get("factor1", {}), desc.get("factor2", {}))]
        return f"separable({inner[0]},{inner[1]})"
    return kind


def equivalence_report(
    family: list[Field],
    system,
    p: float,
    weight=None,
    *,
    side: str = "psi",
    gauge: EllipsoidGauge | None = None,
    gauges: tuple[EllipsoidGauge, EllipsoidGauge] | None = None,
    ids: list[str] | None = None,
) -> EquivalenceReport:
    """Per-field ratios ||S f||_{L^p_w} / ||f||_{L^p_w} over a family.

    `system` selects the square function: a ProductFrame or kernel pair
    runs the product area, anything else the one-parameter one.  The weight
    (if any) must already have passed its Muckenhoupt check at this p —
    that is the caller's contract, matching how the equivalence theorems
    are stated.
    """
    if not 1.0 < p < math.inf:
        raise ValueError("norm equivalence is stated for p in (1, inf)")
    if not family:
        raise ValueError("family is empty")
    wvals = None if weight is None else weight.values
    wid = _weight_id(weight)
    product = isinstance(system, ProductFrame) or (
        isinstance(system, (tuple, list)) and len(system) == 2)
    rows: list[EquivalenceRow] = []
    for i, f in enumerate(family):
        name = ids[i] if ids is not None else f"f{i}"
        if product:
            sf = product_lusin_area(f, system, gauges=gauges, side=side)
        else:
            sf = lusin_area(f, system, gauge, side=side)
        nf = lp_norm(f, p, weight=wvals)
        ns = lp_norm(sf, p, weight=wvals)
        if nf == 0.0:
            raise ValueError(f"family member {name} has zero norm")
        rows.append(EquivalenceRow(f_id=name, p=float(p), weight_id=wid,
                                   norm_f=nf, norm_sf=ns, ratio=ns / nf))
    return EquivalenceReport(p=float(p), weight_id=wid, rows=rows)


def equivalence_to_csv(report: EquivalenceReport, path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["f_id", "p", "weight_id", "norm_f", "norm_Sf", "ratio"])
        for r in report.rows:
            writer.writerow([r.f_id, r.p, r.weight_id,
                             repr(r.norm_f), repr(r.norm_sf), repr(r.ratio)])
