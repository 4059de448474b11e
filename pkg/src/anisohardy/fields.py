"""Sampled fields on periodic boxes, spectral transforms and convolution.

The computational substrate: every function lives on a uniform grid over a
periodic box [-L, L)^d (per-axis L), d split across one or two tensor
factors.  Convolution is circular via FFT and carries the cell volume, so
it approximates the continuous convolution of box-supported functions.
Spectra are stored with the continuous-transform phase (grids start at -L,
not 0), which makes kernel synthesis and Plancherel checks direct.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .dilation import EllipsoidGauge


class SpecMismatchError(ValueError):
    """Operands live on different grids."""


class NegativeWeightError(ValueError):
    """Weight density has negative entries."""


class UnresolvableScaleError(ValueError):
    """Requested dilation level cannot be represented on the grid."""


@dataclass(frozen=True)
class GridSpec:
    """Uniform periodic grid.

    dims: tensor-factor dimensions, e.g. (1, 1) for a product of two lines,
    (2,) for a single 2-D factor.  box and samples are per *axis* (total
    axes = sum(dims)); each axis spans [-box[j], box[j]) with samples[j]
    equispaced points.  samples must be powers of two, at least 16.
    """

    dims: tuple[int, ...]
    box: tuple[float, ...]
    samples: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "box", tuple(float(b) for b in self.box))
        object.__setattr__(self, "samples", tuple(int(s) for s in self.samples))
        d = sum(self.dims)
        if len(self.box) != d or len(self.samples) != d:
            raise ValueError(
                f"box/samples must have one entry per axis ({d}), got "
                f"{len(self.box)}/{len(self.samples)}")
        for s in self.samples:
            if s < 16 or (s & (s - 1)) != 0:
                raise ValueError(f"samples per axis must be a power of two >= 16, got {s}")
        for b in self.box:
            if not (b > 0):
                raise ValueError("box half-widths must be positive")

    @property
    def ndim_total(self) -> int:
        return sum(self.dims)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.samples

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(2.0 * b / s for b, s in zip(self.box, self.samples))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    def axis_coords(self, j: int) -> np.ndarray:
        h = self.spacing[j]
        return -self.box[j] + h * np.arange(self.samples[j])

    def axes(self) -> list[np.ndarray]:
        return [self.axis_coords(j) for j in range(self.ndim_total)]

    def axis_freqs(self, j: int) -> np.ndarray:
        """Angular dual frequencies of axis j (fftfreq order)."""
        return 2.0 * np.pi * np.fft.fftfreq(self.samples[j], d=self.spacing[j])

    def points(self) -> np.ndarray:
        """All grid points, shape self.shape + (ndim_total,)."""
        grids = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack(grids, axis=-1)

    def factor_axes(self, i: int) -> tuple[int, ...]:
        off = sum(self.dims[:i])
        return tuple(range(off, off + self.dims[i]))

    def factor_spec(self, i: int) -> "GridSpec":
        ax = self.factor_axes(i)
        return GridSpec(dims=(self.dims[i],),
                        box=tuple(self.box[j] for j in ax),
                        samples=tuple(self.samples[j] for j in ax))


@dataclass
class Field:
    """Complex samples on a GridSpec."""

    spec: GridSpec
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.complex128)
        if v.shape != self.spec.shape:
            raise ValueError(f"values shape {v.shape} != grid shape {self.spec.shape}")
        if not np.all(np.isfinite(v.view(np.float64))):
            raise ValueError("field has non-finite entries")
        self.values = v

    def copy(self) -> "Field":
        return Field(self.spec, self.values.copy())


@dataclass
class SpectralField:
    """Continuous-transform values on the dual lattice (fftfreq order)."""

    spec: GridSpec
    coefficients: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coefficients, dtype=np.complex128)
        if c.shape != self.spec.shape:
            raise ValueError(f"coefficients shape {c.shape} != grid shape {self.spec.shape}")
        self.coefficients = c


def _phase(spec: GridSpec) -> np.ndarray:
    """exp(i sum_j L_j xi_j) over the dual lattice (the -L grid offset)."""
    out = np.ones(spec.shape, dtype=np.complex128)
    for j in range(spec.ndim_total):
        ph = np.exp(1j * spec.box[j] * spec.axis_freqs(j))
        shape = [1] * spec.ndim_total
        shape[j] = spec.samples[j]
        out = out * ph.reshape(shape)
    return out


def to_spectrum(f: Field) -> SpectralField:
    coeffs = np.fft.fftn(f.values) * f.spec.cell_volume * _phase(f.spec)
    return SpectralField(f.spec, coeffs)


def from_spectrum(s: SpectralField) -> Field:
    vals = np.fft.ifftn(s.coefficients / (_phase(s.spec) * s.spec.cell_volume))
    return Field(s.spec, vals)


def convolve(f: Field, g: Field) -> Field:
    """Periodic convolution carrying the cell volume (Riemann-sum weights)."""
    if f.spec != g.spec:
        raise SpecMismatchError(f"grids differ: {f.spec} vs {g.spec}")
    F = np.fft.fftn(f.values)
    G = np.fft.fftn(g.values)
    phase = _phase(f.spec)
    vals = np.fft.ifftn(F * G * phase) * f.spec.cell_volume
    return Field(f.spec, vals)


def multiply_spectrum(f: Field, multiplier: np.ndarray) -> Field:
    """Apply a Fourier multiplier given on the dual lattice (fftfreq order)."""
    if multiplier.shape != f.spec.shape:
        raise SpecMismatchError("multiplier shape does not match grid")
    return Field(f.spec, np.fft.ifftn(np.fft.fftn(f.values) * multiplier))


def lp_norm(f: Field, p: float, weight: "Field | np.ndarray | None" = None) -> float:
    """L^p_w quasi-norm as a Riemann sum; p = inf gives the (unweighted) sup."""
    vals = np.abs(f.values)
    if p == np.inf or p == float("inf"):
        return float(vals.max())
    if p <= 0:
        raise ValueError(f"p must be positive, got {p}")
    if weight is None:
        wv = 1.0
    else:
        wv = weight.values if isinstance(weight, Field) else np.asarray(weight)
        if np.iscomplexobj(wv):
            if np.abs(wv.imag).max() > 0:
                raise NegativeWeightError("weight must be real-valued")
            wv = wv.real
        if (wv < 0).any():
            raise NegativeWeightError("weight has negative entries")
    total = float(np.sum(vals ** p * wv) * f.spec.cell_volume)
    return total ** (1.0 / p)


# ---------------------------------------------------------------------------
# ellipsoid masks and dilated kernels

def ball_halfwidths(gauge: EllipsoidGauge, k: int) -> np.ndarray:
    """Per-axis half-extents of the ellipsoid B_k."""
    dil = gauge.dilation
    Ak = dil.power(k)
    Pinv = np.linalg.inv(gauge.quadratic_form)
    cov = Ak @ Pinv @ Ak.T
    return np.sqrt(gauge.radius * np.diag(cov))


def ball_mask(gauge: EllipsoidGauge, spec: GridSpec, k: int,
              center: np.ndarray | None = None) -> np.ndarray:
    """Boolean mask of grid cells with center in center + B_k (wrapped)."""
    if sum(spec.dims) != gauge.dilation.dim or len(spec.dims) != 1:
        raise ValueError("ball_mask expects a single-factor grid matching the gauge")
    pts = spec.points()
    if center is not None:
        c = np.asarray(center, dtype=float)
        diff = pts - c
        for j in range(spec.ndim_total):
            L = spec.box[j]
            diff[..., j] = (diff[..., j] + L) % (2 * L) - L
        pts = diff
    M = gauge.ball_form(k)
    q = np.einsum("...i,ij,...j->...", pts, M, pts)
    return q < gauge.radius


def resolvable_levels(gauge: EllipsoidGauge, spec: GridSpec) -> tuple[int, int]:
    """Inclusive level range where B_k spans >= 4 and <= N/4 cells per axis."""
    lo = None
    hi = None
    for k in range(-60, 61):
        hw = ball_halfwidths(gauge, k)
        cells = 2.0 * hw / np.asarray(spec.spacing)
        ok = np.all(cells >= 4.0) and np.all(cells <= np.asarray(spec.samples) / 4.0)
        if ok and lo is None:
            lo = k
        if ok:
            hi = k
        if lo is not None and not ok:
            break
    if lo is None:
        raise UnresolvableScaleError("no level of this gauge is resolvable on the grid")
    return lo, hi


class SpaceKernel:
    """Analytic space-side kernel profile: fn maps points (..., d) to values."""

    def __init__(self, fn, support_level: int = 0):
        self.fn = fn
        self.support_level = support_level


class SpectralKernel:
    """Analytic frequency-side profile: fn maps frequencies (..., d) to values."""

    def __init__(self, fn):
        self.fn = fn


def synthesize_dilated_kernel(base, gauge: EllipsoidGauge, k: int,
                              spec: GridSpec) -> Field:
    """phi_k(x) = b^{-k} phi(A^{-k} x) realized on the grid.

    Raises UnresolvableScaleError when B_k spans fewer than 4 or more than
    N/4 cells along some axis.  Space profiles are evaluated analytically at
    the dilated points; spectral profiles at the dilated dual lattice.
    """
    lo, hi = resolvable_levels(gauge, spec)
    if not (lo <= k <= hi):
        raise UnresolvableScaleError(
            f"level {k} outside resolvable range [{lo}, {hi}] on this grid")
    dil = gauge.dilation
    b = dil.det_abs
    if isinstance(base, SpaceKernel):
        pts = spec.points()
        back = dil.power(-k)
        vals = base.fn(pts @ back.T) * (float(b) ** (-k))
        return Field(spec, vals)
    if isinstance(base, SpectralKernel):
        freqs = np.meshgrid(*[spec.axis_freqs(j) for j in range(spec.ndim_total)],
                            indexing="ij")
        xi = np.stack(freqs, axis=-1)
        fwd = dil.power(k)
        coeffs = base.fn(xi @ fwd)          # (A^T)^k xi = xi @ A^k
        return from_spectrum(SpectralField(spec, np.asarray(coeffs, dtype=np.complex128)))
    raise TypeError(f"unsupported kernel profile type {type(base)!r}")


# ---------------------------------------------------------------------------
# file format: one-line JSON header + raw interleaved little-endian float64

def save_field(f: Field, path: str) -> None:
    header = {
        "dims": list(f.spec.dims),
        "box": list(f.spec.box),
        "samples": list(f.spec.samples),
        "dtype": "f64-complex-interleaved",
        "byte_order": "little",
    }
    inter = np.empty(f.values.size * 2, dtype="<f8")
    flat = f.values.ravel()
    inter[0::2] = flat.real
    inter[1::2] = flat.imag
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(inter.tobytes())


def load_field(path: str) -> Field:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        payload = fh.read()
    if header.get("dtype") != "f64-complex-interleaved":
        raise ValueError(f"unsupported dtype {header.get('dtype')!r}")
    if header.get("byte_order") != "little":
        raise ValueError("unsupported byte order")
    spec = GridSpec(dims=tuple(header["dims"]), box=tuple(header["box"]),
                    samples=tuple(header["samples"]))
    inter = np.frombuffer(payload, dtype="<f8")
    vals = (inter[0::2] + 1j * inter[1::2]).reshape(spec.shape)
    return Field(spec, vals)
