"""Maximal operators over the dilated ball family, and the dyadic
Calderon-Zygmund decomposition.

All averages use the measured (cell-count) ball mass, so indicator test
cases come out exact on the grid.  Ball sweeps run over grid-centered
balls at every grid center; the sup over "balls containing x" is realized
as a morphological max-filter with the symmetric ball footprint.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.ndimage as ndi

from .dilation import EllipsoidGauge, quasi_norm_field
from .fields import Field, GridSpec, ball_mask, convolve


class EmptyDictionaryError(ValueError):
    """Grand maximal dictionary has no members."""


# ---------------------------------------------------------------------------
# footprint helpers

def _center_index(spec: GridSpec) -> tuple[int, ...]:
    return tuple(s // 2 for s in spec.samples)


def _footprint(mask: np.ndarray, spec: GridSpec) -> np.ndarray:
    """Crop a coordinate-grid ball mask to a centered odd-sized footprint."""
    c = _center_index(spec)
    slices = []
    for ax, ci in enumerate(c):
        idx = np.nonzero(mask.any(axis=tuple(a for a in range(mask.ndim) if a != ax)))[0]
        w = max(ci - idx.min(), idx.max() - ci) if idx.size else 0
        slices.append((ci - w, ci + w + 1))
    out = mask[tuple(slice(a, b) for a, b in slices)]
    return out


def _ball_average(absf: np.ndarray, mask: np.ndarray, spec: GridSpec) -> np.ndarray:
    """Average of absf over x + B_k for every center x (FFT correlation)."""
    cnt = int(mask.sum())
    F = np.fft.fftn(absf)
    M = np.fft.fftn(np.fft.ifftshift(mask.astype(float)))
    avg = np.fft.ifftn(F * np.conj(M)).real / cnt
    # mask symmetric => correlation == convolution; conj keeps it explicit
    return avg


def _containing_sup(avg: np.ndarray, mask: np.ndarray, spec: GridSpec) -> np.ndarray:
    """sup over y with x in y+B_k of avg(y); ball symmetric => max-filter."""
    fp = _footprint(mask, spec)
    if avg.ndim == 1:
        return ndi.maximum_filter1d(avg, size=fp.shape[0], mode="wrap")
    return ndi.maximum_filter(avg, footprint=fp, mode="wrap")


def sweep_levels(gauge: EllipsoidGauge, spec: GridSpec,
                 lo: int = -40, hi: int = 40) -> list[int]:
    """Levels whose ball mask is nonempty and at most the whole grid."""
    out = []
    total = int(np.prod(spec.samples))
    for k in range(lo, hi + 1):
        m = ball_mask(gauge, spec, k)
        c = int(m.sum())
        if c == 0:
            continue
        out.append(k)
        if c >= total:
            break
    return out


# ---------------------------------------------------------------------------
# maximal operators

def hardy_littlewood(f: Field, gauge: EllipsoidGauge,
                     levels: list[int] | None = None) -> Field:
    """M f(x) = sup over swept balls containing x of the ball average of |f|."""
    spec = f.spec
    if levels is None:
        levels = sweep_levels(gauge, spec)
    absf = np.abs(f.values)
    out = np.zeros(spec.shape)
    for k in levels:
        mask = ball_mask(gauge, spec, k)
        if not mask.any():
            continue
        avg = _ball_average(absf, mask, spec)
        out = np.maximum(out, _containing_sup(avg, mask, spec))
    return Field(spec, out)


def _interval_halfcells(gauge: EllipsoidGauge, spec1d: GridSpec, k: int) -> int:
    """Half-width in cells of the level-k interval on a 1-D factor grid."""
    mask = ball_mask(gauge, spec1d, k)
    idx = np.nonzero(mask)[0]
    if idx.size == 0:
        return -1
    c = spec1d.samples[0] // 2
    return int(max(c - idx.min(), idx.max() - c))


def strong_maximal(f: Field, gauges: tuple[EllipsoidGauge, EllipsoidGauge],
                   levels: tuple[list[int], list[int]] | None = None) -> Field:
    """Product (strong) maximal function over product balls B1_k1 x B2_k2.

    Fast separable path for 1-D x 1-D product grids; generic factors fall
    back to a dense footprint loop.
    """
    spec = f.spec
    if len(spec.dims) != 2:
        raise ValueError("strong_maximal expects a two-factor product grid")
    g1, g2 = gauges
    s1, s2 = spec.factor_spec(0), spec.factor_spec(1)
    if levels is None:
        levels = (sweep_levels(g1, s1), sweep_levels(g2, s2))
    lv1, lv2 = levels
    absf = np.abs(f.values)

    if spec.dims == (1, 1):
        # interval x interval: the product ball is an index rectangle, so
        # both the average and the containing-sup separate along the axes
        h1 = {k: _interval_halfcells(g1, s1, k) for k in lv1}
        h2 = {k: _interval_halfcells(g2, s2, k) for k in lv2}
        out = np.zeros(spec.shape)
        for k1 in lv1:
            w1 = h1[k1]
            if w1 < 0:
                continue
            a1 = ndi.uniform_filter1d(absf, size=2 * w1 + 1, axis=0, mode="wrap")
            for k2 in lv2:
                w2 = h2[k2]
                if w2 < 0:
                    continue
                a12 = ndi.uniform_filter1d(a1, size=2 * w2 + 1, axis=1, mode="wrap")
                m = ndi.maximum_filter1d(a12, size=2 * w2 + 1, axis=1, mode="wrap")
                m = ndi.maximum_filter1d(m, size=2 * w1 + 1, axis=0, mode="wrap")
                np.maximum(out, m, out=out)
        return Field(spec, out)

    # generic slow path
    axes1 = spec.factor_axes(0)
    axes2 = spec.factor_axes(1)
    out = np.zeros(spec.shape)
    for k1 in lv1:
        mk1 = ball_mask(g1, s1, k1)
        for k2 in lv2:
            mk2 = ball_mask(g2, s2, k2)
            mask = np.tensordot(mk1.astype(float), mk2.astype(float), axes=0) > 0
            avg = _ball_average(absf, mask, spec)
            np.maximum(out, _containing_sup(avg, mask, spec), out=out)
    return Field(spec, out)


def dyadic_maximal(f: Field, tree) -> Field:
    """M_d f = sup over tree levels of the containing-cube average of |f|."""
    absf = np.abs(f.values).ravel()
    out = np.zeros(absf.shape)
    for level in tree.levels:
        assign = tree.assignment[level].ravel()
        counts = np.bincount(assign)
        sums = np.bincount(assign, weights=absf)
        avg = sums / counts
        np.maximum(out, avg[assign], out=out)
    return Field(f.spec, out.reshape(f.spec.shape))


def sharp_maximal(f: Field, gauge: EllipsoidGauge,
                  levels: list[int] | None = None,
                  max_offsets: int = 4096) -> Field:
    """M# f(x) = sup over balls containing x of avg |f - ball mean|."""
    spec = f.spec
    if levels is None:
        levels = sweep_levels(gauge, spec)
    vals = f.values
    out = np.zeros(spec.shape)
    for k in levels:
        mask = ball_mask(gauge, spec, k)
        cnt = int(mask.sum())
        if cnt == 0 or cnt > max_offsets:
            continue
        mean = np.fft.ifftn(np.fft.fftn(vals) * np.conj(
            np.fft.fftn(np.fft.ifftshift(mask.astype(float))))) / cnt
        c = _center_index(spec)
        offsets = np.argwhere(mask) - np.asarray(c)
        osc = np.zeros(spec.shape)
        for off in offsets:
            shifted = np.roll(vals, shift=tuple(-off), axis=tuple(range(vals.ndim)))
            osc += np.abs(shifted - mean)
        osc /= cnt
        np.maximum(out, _containing_sup(osc, mask, spec), out=out)
    return Field(spec, out)


def oscillation_two_sided(f: Field, gauge: EllipsoidGauge,
                          levels: list[int] | None = None,
                          center_stride: int = 16) -> dict:
    """Per-ball check that the best-constant oscillation brackets the
    mean oscillation: inf_a avg|f-a| <= avg|f - mean| <= 2 inf_a avg|f-a|.

    The inf over the constant a is located by golden-section search (the
    objective is convex in a).  Centers are subsampled for cost; the sup
    versions inherit the same two-sided bounds ball by ball.
    """
    spec = f.spec
    if levels is None:
        levels = sweep_levels(gauge, spec)
    vals = f.values.real
    gold = (np.sqrt(5.0) - 1.0) / 2.0
    flat = [np.arange(s)[::center_stride] for s in spec.samples]
    centers = np.stack(np.meshgrid(*flat, indexing="ij"), axis=-1).reshape(-1, len(spec.samples))
    pts = spec.points()
    ratio_lo, ratio_hi = np.inf, 0.0
    n_balls = 0
    for cidx in centers:
        x0 = pts[tuple(cidx)]
        for k in levels:
            mask = ball_mask(gauge, spec, k, center=x0)
            cnt = int(mask.sum())
            if cnt < 2:
                continue
            ball_vals = vals[mask]
            mean_osc = float(np.mean(np.abs(ball_vals - ball_vals.mean())))
            a, b = float(ball_vals.min()), float(ball_vals.max())
            for _ in range(60):
                c1 = b - gold * (b - a)
                c2 = a + gold * (b - a)
                if np.mean(np.abs(ball_vals - c1)) <= np.mean(np.abs(ball_vals - c2)):
                    b = c2
                else:
                    a = c1
            inf_osc = float(np.mean(np.abs(ball_vals - 0.5 * (a + b))))
            if mean_osc > 1e-14 and inf_osc > 1e-14:
                r = mean_osc / inf_osc
                ratio_lo = min(ratio_lo, r)
                ratio_hi = max(ratio_hi, r)
                n_balls += 1
    return {"ratio_min": ratio_lo, "ratio_max": ratio_hi, "balls": n_balls,
            "lower_ok": ratio_lo >= 1.0 - 1e-9, "upper_ok": ratio_hi <= 2.0 + 1e-9}


# ---------------------------------------------------------------------------
# grand maximal over a normalized test-function dictionary

@dataclass
class TestFunctionDictionary:
    """Per-factor families of normalized smooth test kernels.

    Members are discrete derivatives of a Gaussian-type bump, rescaled so
    the computed decay-derivative seminorm is at most 1; the certificate
    (the computed seminorm per member) ships with the dictionary.
    """

    orders: tuple[int, int]          # N per factor
    members: tuple[list, list]       # per factor: list of analytic callables
    certificates: tuple[list, list]  # per factor: computed seminorms (<= 1)

    def __post_init__(self):
        if not self.members[0] or not self.members[1]:
            raise EmptyDictionaryError("dictionary must have members for both factors")


def _bump_family(count: int) -> list:
    """Gaussian-type bumps of varying width and discrete derivative order.

    Member i is the (i // 4)-th central finite difference (lag 0.05) of a
    Gaussian of width widths[i % 4]; analytic in x so it can be dilated to
    any scale without interpolation.
    """
    from math import comb

    members = []
    widths = [0.35, 0.6, 1.0, 1.6]
    lag = 0.05
    for i in range(count):
        w = widths[i % len(widths)]
        order = i // len(widths)

        def fn(x, w=w, order=order, lag=lag):
            x = np.asarray(x, dtype=float)[..., 0]
            if order == 0:
                return np.exp(-0.5 * (x / w) ** 2)
            acc = np.zeros_like(x)
            for j in range(order + 1):
                shift = (order / 2.0 - j) * lag
                acc += (-1.0) ** j * comb(order, j) * np.exp(-0.5 * ((x + shift) / w) ** 2)
            return acc / lag ** order
        members.append(fn)
    return members


def _seminorm(fn, gauge: EllipsoidGauge, spec1d: GridSpec, N: int) -> float:
    """sup_x max_{order<=N} |D^order phi(x)| (1 + rho(x))^N on the factor grid."""
    pts = spec1d.points()
    vals = np.asarray(fn(pts), dtype=float)
    rho = quasi_norm_field(gauge, pts)
    weight = (1.0 + rho) ** N
    h = spec1d.spacing[0]
    cur = vals
    best = float(np.max(np.abs(cur) * weight))
    for _ in range(N):
        cur = np.gradient(cur, h)
        best = max(best, float(np.max(np.abs(cur) * weight)))
    return best


def build_dictionary(gauges: tuple[EllipsoidGauge, EllipsoidGauge],
                     factor_specs: tuple[GridSpec, GridSpec],
                     orders: tuple[int, int] = (2, 2),
                     members_per_factor: int = 8) -> TestFunctionDictionary:
    """Normalized dictionary with computed seminorm certificates."""
    members, certs = [], []
    for i in range(2):
        fams = _bump_family(members_per_factor)
        norm_members, norm_certs = [], []
        for fn in fams:
            s = _seminorm(fn, gauges[i], factor_specs[i], orders[i])
            if s <= 0 or not np.isfinite(s):
                continue

            def scaled(x, fn=fn, s=s):
                return np.asarray(fn(x)) / s
            norm_members.append(scaled)
            norm_certs.append(_seminorm(scaled, gauges[i], factor_specs[i], orders[i]))
        members.append(norm_members)
        certs.append(norm_certs)
    return TestFunctionDictionary(orders=tuple(orders),
                                  members=(members[0], members[1]),
                                  certificates=(certs[0], certs[1]))


def grand_maximal(f: Field, dictionary: TestFunctionDictionary,
                  gauges: tuple[EllipsoidGauge, EllipsoidGauge],
                  level_range: tuple[int, int] = (-3, 3)) -> Field:
    """M_N f = sup over dictionary members and scale pairs of |f * phi_{k1,k2}|."""
    spec = f.spec
    if len(spec.dims) != 2 or spec.dims != (1, 1):
        raise ValueError("grand_maximal implemented for 1-D x 1-D product grids")
    s1, s2 = spec.factor_spec(0), spec.factor_spec(1)
    x1 = s1.points()
    x2 = s2.points()
    lo, hi = level_range
    fhat = np.fft.fftn(f.values)
    out = np.zeros(spec.shape)
    mult1 = {}
    mult2 = {}
    for k in range(lo, hi + 1):
        back1 = gauges[0].dilation.power(-k)
        back2 = gauges[1].dilation.power(-k)
        b1 = gauges[0].det_abs ** (-k)
        b2 = gauges[1].det_abs ** (-k)
        mult1[k] = [np.fft.fft(np.fft.ifftshift(
            np.asarray(m(x1 @ back1.T)) * b1)) * s1.cell_volume
            for m in dictionary.members[0]]
        mult2[k] = [np.fft.fft(np.fft.ifftshift(
            np.asarray(m(x2 @ back2.T)) * b2)) * s2.cell_volume
            for m in dictionary.members[1]]
    for k1 in range(lo, hi + 1):
        for m1 in mult1[k1]:
            for k2 in range(lo, hi + 1):
                for m2 in mult2[k2]:
                    conv = np.fft.ifftn(fhat * np.outer(m1, m2))
                    np.maximum(out, np.abs(conv), out=out)
    return Field(spec, out)


# ---------------------------------------------------------------------------
# dyadic Calderon-Zygmund decomposition

@dataclass
class CZCube:
    level: int
    cube_id: int
    average: float
    parent_average: float
    cell_count: int


@dataclass
class CZDecomposition:
    good: Field
    bad: Field                     # sum of the per-cube mean-zero parts
    cubes: list[CZCube]
    selected_mask: np.ndarray      # union of selected cubes (bool, grid shape)
    lam: float
    bad_per_cube: dict = field(default_factory=dict)  # (level, id) -> Field values on cells


def cz_decompose(f: Field, lam: float, tree, weight=None) -> CZDecomposition:
    """Stopping-time decomposition at threshold lam over the cube tree.

    Selected cubes are the maximal (coarsest) cubes with |f|-average > lam;
    requires the coarsest-level averages to stay <= lam (raise otherwise,
    since then no parent with small average exists).
    """
    vals = f.values
    absf = np.abs(vals).ravel()
    levels = list(tree.levels)
    coarse_assign = tree.assignment[levels[0]].ravel()
    coarse_avg = np.bincount(coarse_assign, weights=absf) / np.bincount(coarse_assign)
    if (coarse_avg > lam).any():
        raise ValueError(
            f"threshold {lam} below a coarsest-level average "
            f"(max {coarse_avg.max():.6g}); no stopping parent exists")

    covered = np.zeros(absf.shape, dtype=bool)
    cubes: list[CZCube] = []
    bad = np.zeros(vals.shape, dtype=np.complex128)
    bad_per_cube = {}
    prev_avg_cell = coarse_avg[coarse_assign]
    for li, level in enumerate(levels):
        assign = tree.assignment[level].ravel()
        counts = np.bincount(assign)
        sums = np.bincount(assign, weights=absf)
        avg = sums / counts
        if li > 0:
            hot = np.nonzero(avg > lam)[0]
            for q in hot:
                cells = assign == q
                if covered[cells].any():
                    continue
                covered |= cells
                pavg = float(prev_avg_cell[cells][0])
                cmask = cells.reshape(vals.shape)
                mean = complex(vals[cmask].mean())
                piece = np.zeros(vals.shape, dtype=np.complex128)
                piece[cmask] = vals[cmask] - mean
                bad += piece
                bad_per_cube[(level, int(q))] = piece[cmask]
                cubes.append(CZCube(level=level, cube_id=int(q),
                                    average=float(avg[q]), parent_average=pavg,
                                    cell_count=int(counts[q])))
        prev_avg_cell = avg[assign]
    good = Field(f.spec, vals - bad)
    return CZDecomposition(good=good, bad=Field(f.spec, bad), cubes=cubes,
                           selected_mask=covered.reshape(vals.shape), lam=lam,
                           bad_per_cube=bad_per_cube)


def verify_cz(dec: CZDecomposition, f: Field, tree) -> dict:
    """The five decomposition postconditions, evaluated exactly on the grid."""
    md = dyadic_maximal(f, tree).values.real
    omega = md > dec.lam
    union_exact = bool(np.array_equal(omega, dec.selected_mask))
    off = ~dec.selected_mask
    small_off = bool(np.all(np.abs(f.values)[off] <= dec.lam + 1e-12)) if off.any() else True
    ratios = [c.average / dec.lam for c in dec.cubes]
    lower_ok = all(r > 1.0 for r in ratios)
    parents_ok = all(c.parent_average <= dec.lam + 1e-12 for c in dec.cubes)
    c_upper = max(ratios) if ratios else 1.0
    recon = np.abs(dec.good.values + dec.bad.values - f.values).max()
    means = [np.abs(v.sum()) / max(np.abs(v).sum(), 1e-300) for v in dec.bad_per_cube.values()]
    good_bound = float(np.abs(dec.good.values).max())
    return {
        "union_equals_superlevel": union_exact,
        "small_off_union": small_off,
        "averages_bracketed": lower_ok and parents_ok,
        "upper_constant": float(c_upper),
        "reassembly_max_err": float(recon),
        "bad_mean_rel": float(max(means)) if means else 0.0,
        "good_sup": good_bound,
        "good_sup_over_lam": good_bound / dec.lam,
    }
