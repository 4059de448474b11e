"""Dyadic cube trees, product rectangles, and covering sums.

The factor trees realize an abstract dyadic-cube construction on a finite
grid: a greedy maximal net at every level (spacing ``b**(v*k)`` in the step
quasi-norm), growing-ball cell assignment at the finest level, and
parent-chain composition upward, so that the partition / nesting / unique
parent axioms hold exactly rather than approximately.  The two-sided ball
sandwich (every cube traps a ball around its center and is trapped by a
ball around each member point) is *fitted*: the smallest margin ``u``
making both inclusions true is measured per level and recorded.

On top of the factor trees this module provides product rectangles with
their padded shadows and scale windows, open-set expansion through the
strong maximal function, maximal-rectangle enumeration, and the two
directional covering sums with enlargement penalties.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .dilation import ConstructionFailedError, EllipsoidGauge
from .fields import Field, GridSpec, ball_halfwidths, ball_mask
from .maximal import strong_maximal


class ResolutionTooCoarseError(ValueError):
    """Requested cube levels do not fit between cell size and box size."""


# Ball membership tolerance used throughout the tree construction: the gauge
# form carries ~1e-12 relative rounding, and cube scales routinely place grid
# points exactly on ball boundaries; the shrunken-open-ball convention keeps
# their classification deterministic (boundary points count as outside).
_RTOL = 1e-9


class DivergentHError(ValueError):
    """Penalty function fails the summability test for covering sums."""


# ---------------------------------------------------------------------------
# factor trees
# ---------------------------------------------------------------------------

@dataclass
class DyadicCubeTree:
    """Hierarchy of dyadic cubes on one tensor factor.

    ``assignment[k]`` maps every grid cell to its level-``k`` cube id; the
    maps are chain-consistent across levels (child ids refine parent ids),
    so partition and nesting are exact by construction.  ``u`` is the
    fitted ball-sandwich margin over the interior levels; ``level_fit``
    keeps the per-level inner/outer margins including the boundary levels.
    """

    gauge: EllipsoidGauge
    grid: GridSpec
    levels: list[int]
    v: int
    u: int
    centers: dict[int, np.ndarray]
    center_cells: dict[int, np.ndarray]
    net_cells: dict[int, np.ndarray]
    parents: dict[int, np.ndarray]
    assignment: dict[int, np.ndarray]
    level_fit: dict[int, dict[str, int]]
    interior_levels: list[int]

    def cube_count(self, level: int) -> int:
        return len(self.center_cells[level])

    def cube_cell_counts(self, level: int) -> np.ndarray:
        return np.bincount(self.assignment[level].ravel(),
                           minlength=self.cube_count(level))

    def cells_of(self, level: int, cid: int) -> np.ndarray:
        """Flat indices of the cells belonging to one cube."""
        return np.flatnonzero(self.assignment[level].ravel() == cid)

    def parent_of(self, level: int, cid: int) -> int:
        return int(self.parents[level][cid])

    def ancestor(self, level: int, cid: int, up: int) -> int:
        for k in range(level, level - up, -1):
            cid = int(self.parents[k][cid])
        return cid

    def scale_level(self, level: int) -> int:
        """Gauge-ball level of the cube scale at tree level ``level``."""
        return self.v * level


def _ball_offsets(gauge: EllipsoidGauge, grid: GridSpec, m: int,
                  cache: dict | None = None) -> np.ndarray:
    """Integer cell offsets d with d*spacing in the open ball B_m."""
    if cache is not None and m in cache:
        return cache[m]
    h = np.asarray(grid.spacing)
    hw = ball_halfwidths(gauge, m)
    steps = np.minimum(np.floor(hw / h).astype(int),
                       np.asarray(grid.samples) - 1)
    axes = [np.arange(-s, s + 1) for s in steps]
    mesh = np.meshgrid(*axes, indexing="ij")
    offs = np.stack([g.ravel() for g in mesh], axis=-1)
    offs = offs[gauge.ball_contains(m, offs * h, rtol=_RTOL)]
    if cache is not None:
        cache[m] = offs
    return offs


def _greedy_net(grid: GridSpec, block_offs: np.ndarray) -> np.ndarray:
    """Greedy maximal net: cells in flat index order; accepting a point
    blocks its open spacing ball."""
    shape = grid.shape
    n = int(np.prod(shape))
    blocked = np.zeros(n, dtype=bool)
    accepted: list[int] = []
    shape_arr = np.asarray(shape)
    for flat in range(n):
        if blocked[flat]:
            continue
        accepted.append(flat)
        multi = np.asarray(np.unravel_index(flat, shape))
        tgt = multi + block_offs
        ok = np.all((tgt >= 0) & (tgt < shape_arr), axis=1)
        blocked[np.ravel_multi_index(tuple(tgt[ok].T), shape)] = True
    return np.asarray(accepted, dtype=np.int64)


def _grow_assignment(grid: GridSpec, gauge: EllipsoidGauge,
                     net_cells: np.ndarray, scale_m: int,
                     cache: dict, need: np.ndarray | None = None) -> np.ndarray:
    """Assign cells to the net point of smallest entry level (nearest in
    the step quasi-norm); ties go to the net point of smallest grid index."""
    shape = grid.shape
    shape_arr = np.asarray(shape)
    n = int(np.prod(shape))
    need_mask = np.ones(n, dtype=bool) if need is None else need
    assign = np.full(n, -1, dtype=np.int64)
    nets = np.stack(np.unravel_index(net_cells, shape), axis=-1)
    c = len(net_cells)
    id_of_net = np.full(n, -1, dtype=np.int64)
    id_of_net[net_cells] = np.arange(c)

    m_start = scale_m
    while m_start > scale_m - 60 and len(_ball_offsets(gauge, grid, m_start - 1, cache)) > 1:
        m_start -= 1
    remaining = int(need_mask.sum())
    for m in range(m_start, scale_m + 1):
        offs = _ball_offsets(gauge, grid, m, cache)
        tgt = nets[:, None, :] + offs[None, :, :]
        ok = np.all((tgt >= 0) & (tgt < shape_arr), axis=-1)
        src = np.broadcast_to(np.asarray(net_cells)[:, None], ok.shape)[ok]
        tflat = np.ravel_multi_index(tuple(tgt[ok].T), shape)
        sel = (assign[tflat] < 0) & need_mask[tflat]
        if sel.any():
            best = np.full(n, n, dtype=np.int64)
            np.minimum.at(best, tflat[sel], src[sel])
            newly = best < n
            assign[newly] = id_of_net[best[newly]]
            remaining -= int(newly.sum())
        if remaining == 0:
            break
    if remaining:
        raise ConstructionFailedError(
            "net is not maximal: cells left unreached at the spacing scale")
    return assign


def _hull_vertices(xy: np.ndarray) -> np.ndarray:
    if xy.shape[1] == 1:
        return xy[[int(np.argmin(xy[:, 0])), int(np.argmax(xy[:, 0]))]]
    if len(xy) <= 4:
        return xy
    try:
        return xy[ConvexHull(xy).vertices]
    except QhullError:  # degenerate (collinear) cube
        return xy


def _entry_levels(gauge: EllipsoidGauge, diffs: np.ndarray,
                  lo: int, hi: int) -> np.ndarray:
    """First entry levels of difference vectors; hi+1 marks "beyond hi"."""
    lev, _ = gauge.levels(diffs, lo=lo, hi=hi, rtol=_RTOL)
    return lev + 1  # quasi-norm level -> entry level


def _fit_outer(tree_level_assign: np.ndarray, grid: GridSpec,
               gauge: EllipsoidGauge, count: int, vk: int, cap: int) -> int:
    """Smallest margin with every member-pair difference inside B_{vk+u}."""
    pts = grid.points().reshape(-1, grid.ndim_total)
    flat = tree_level_assign.ravel()
    order = np.argsort(flat, kind="stable")
    bounds = np.searchsorted(flat[order], np.arange(count + 1))
    worst = -(10 ** 9)
    for cid in range(count):
        cells = order[bounds[cid]:bounds[cid + 1]]
        verts = _hull_vertices(pts[cells])
        diffs = (verts[:, None, :] - verts[None, :, :]).reshape(-1, verts.shape[1])
        entry = _entry_levels(gauge, diffs, lo=vk - 8, hi=vk + cap + 4)
        worst = max(worst, int(entry.max()))
    return worst - vk


def _fit_inner(tree_level_assign: np.ndarray, grid: GridSpec,
               gauge: EllipsoidGauge, center_cells: np.ndarray,
               vk: int, cap: int, cache: dict) -> int:
    """Smallest margin with the (clipped) ball B_{vk-u} around every center
    contained in its own cube."""
    shape = grid.shape
    shape_arr = np.asarray(shape)
    flat = tree_level_assign.ravel()
    c = len(center_cells)
    centers = np.stack(np.unravel_index(center_cells, shape), axis=-1)
    ids = np.arange(c)
    best_m = np.full(c, -(10 ** 9), dtype=np.int64)
    unset = np.ones(c, dtype=bool)
    for m in range(vk - 1, vk - cap - 8, -1):
        offs = _ball_offsets(gauge, grid, m, cache)
        tgt = centers[:, None, :] + offs[None, :, :]
        ok = np.all((tgt >= 0) & (tgt < shape_arr), axis=-1)
        match = np.ones(ok.shape, dtype=bool)
        tflat = np.ravel_multi_index(tuple(tgt[ok].T), shape)
        match[ok] = flat[tflat] == np.broadcast_to(ids[:, None], ok.shape)[ok]
        passed = match.all(axis=1) & unset
        best_m[passed] = m
        unset &= ~passed
        if not unset.any():
            break
    if unset.any():
        return cap + 1  # signal: margin beyond the cap
    return int((vk - best_m).max())


def build_cube_tree(gauge: EllipsoidGauge, grid: GridSpec,
                    level_range: tuple[int, int], *, v: int | None = None,
                    u_cap: int = 8,
                    allow_unresolved: bool = False) -> DyadicCubeTree:
    """Build the cube hierarchy for ``level_range`` (inclusive) on one factor.

    The scale of a level-``k`` cube is the gauge ball B_{v*k}.  ``v`` is
    -1 unless the fitted margin exceeds ``u_cap``, in which case -2 is
    tried before giving up.  Levels whose scale falls below 4 cells or
    above the box raise ResolutionTooCoarseError unless
    ``allow_unresolved`` (used for degenerate single-cell levels).
    """
    if len(grid.dims) != 1 or grid.dims[0] != gauge.dilation.dim:
        raise ValueError("cube tree needs a single-factor grid matching the gauge")
    k_lo, k_hi = int(level_range[0]), int(level_range[1])
    if k_hi < k_lo:
        raise ValueError("level range must be nondecreasing")
    candidates = (-1, -2) if v is None else (int(v),)
    failures: list[Exception] = []
    for vv in candidates:
        if vv >= 0:
            raise ValueError("v must be a negative integer")
        try:
            tree = _build_with_v(gauge, grid, k_lo, k_hi, vv, u_cap,
                                 allow_unresolved)
        except (ConstructionFailedError, ResolutionTooCoarseError) as err:
            failures.append(err)
            continue
        if tree.u <= u_cap:
            return tree
        failures.append(ConstructionFailedError(
            f"fitted margin u={tree.u} exceeds cap {u_cap} at v={vv}"))
    msg = "; ".join(f"v={vv}: {err}" for vv, err in zip(candidates, failures))
    if all(isinstance(e, ResolutionTooCoarseError) for e in failures):
        raise ResolutionTooCoarseError(msg)
    raise ConstructionFailedError(msg)


def _build_with_v(gauge: EllipsoidGauge, grid: GridSpec, k_lo: int, k_hi: int,
                  v: int, u_cap: int, allow_unresolved: bool) -> DyadicCubeTree:
    levels = list(range(k_lo, k_hi + 1))
    spacing = np.asarray(grid.spacing)
    samples = np.asarray(grid.samples)
    if not allow_unresolved:
        for k in levels:
            # net spacing equals the ball halfwidth, so a typical cube holds
            # about prod(halfwidth/spacing) grid cells
            cells = ball_halfwidths(gauge, v * k) / spacing
            if (np.prod(cells) < 4.0 * (1.0 - 1e-9)
                    or np.any(cells < 2.0 * (1.0 - 1e-9))):
                raise ResolutionTooCoarseError(
                    f"level {k}: cubes would hold fewer than 4 cells")
            if np.any(2.0 * cells > samples * (1.0 + 1e-9)):
                raise ResolutionTooCoarseError(
                    f"level {k}: cube scale exceeds the box")

    cache: dict = {}
    nets: dict[int, np.ndarray] = {}
    for k in levels:
        nets[k] = _greedy_net(grid, _ball_offsets(gauge, grid, v * k, cache))

    shape = grid.shape
    assignment: dict[int, np.ndarray] = {}
    fine = _grow_assignment(grid, gauge, nets[k_hi], v * k_hi, cache)
    assignment[k_hi] = fine.reshape(shape)

    parents: dict[int, np.ndarray] = {k_lo: np.full(len(nets[k_lo]), -1, np.int64)}
    n = int(np.prod(shape))
    for k in levels[:-1]:
        child_cells = nets[k + 1]
        need = np.zeros(n, dtype=bool)
        need[child_cells] = True
        pa = _grow_assignment(grid, gauge, nets[k], v * k, cache, need=need)
        parents[k + 1] = pa[child_cells]
    for k in reversed(levels[:-1]):
        assignment[k] = parents[k + 1][assignment[k + 1]]

    # Drop net points whose chained cell set is empty and renumber.  When
    # the per-level halfwidth ratio is below 2, a coarse net point need not
    # be the nearest coarse net of any finer net cell; it then indexes no
    # cube.  The axioms quantify over actual cubes, so empty ids just go.
    remaps: dict[int, np.ndarray] = {}
    for k in levels:
        present = np.unique(assignment[k])
        remap = np.full(len(nets[k]), -1, dtype=np.int64)
        remap[present] = np.arange(len(present))
        remaps[k] = remap
        nets[k] = nets[k][present]
        assignment[k] = remap[assignment[k]]
    for k in levels[:0:-1]:
        kept_children = np.flatnonzero(remaps[k] >= 0)
        parents[k] = remaps[k - 1][parents[k][kept_children]]
    parents[k_lo] = np.full(len(nets[k_lo]), -1, dtype=np.int64)

    # designated centers: the member cell nearest the cube's cell centroid.
    # The net point itself can drift to a cube edge (exact midpoint ties all
    # collapse the same way on aligned grids), which would ruin the inner
    # ball margin; the sandwich axiom only needs *some* designated point.
    pts = grid.points().reshape(-1, grid.ndim_total)
    center_cells: dict[int, np.ndarray] = {}
    for k in levels:
        flat = assignment[k].ravel()
        order = np.argsort(flat, kind="stable")
        bounds = np.searchsorted(flat[order], np.arange(len(nets[k]) + 1))
        chosen = np.empty(len(nets[k]), dtype=np.int64)
        for cid in range(len(nets[k])):
            cells = order[bounds[cid]:bounds[cid + 1]]
            xy = pts[cells]
            dist = ((xy - xy.mean(axis=0)) ** 2).sum(axis=1)
            chosen[cid] = cells[int(np.argmin(dist))]
        center_cells[k] = chosen
    centers = {k: pts[center_cells[k]] for k in levels}

    level_fit: dict[int, dict[str, int]] = {}
    fit_cap = u_cap + 6  # scan beyond the cap so boundary levels report truly
    for k in levels:
        outer = _fit_outer(assignment[k], grid, gauge, len(nets[k]), v * k, fit_cap)
        inner = _fit_inner(assignment[k], grid, gauge, center_cells[k],
                           v * k, fit_cap, cache)
        level_fit[k] = {"outer_u": outer, "inner_u": inner}
    interior = levels[1:-1] if len(levels) >= 3 else list(levels)
    u = max(max(level_fit[k]["outer_u"], level_fit[k]["inner_u"], 1)
            for k in interior)
    return DyadicCubeTree(gauge=gauge, grid=grid, levels=levels, v=v, u=u,
                          centers=centers, center_cells=center_cells,
                          net_cells=nets, parents=parents,
                          assignment=assignment, level_fit=level_fit,
                          interior_levels=interior)


def cube_tree_report(tree: DyadicCubeTree) -> list[dict]:
    """JSON-ready rows, one per cube: level, id, center, parent, u, v."""
    rows = []
    for k in tree.levels:
        for cid in range(tree.cube_count(k)):
            rows.append({
                "level": k,
                "id": cid,
                "center": [float(x) for x in tree.centers[k][cid]],
                "parent": int(tree.parents[k][cid]),
                "u": tree.u,
                "v": tree.v,
            })
    return rows


def dump_cube_tree(tree: DyadicCubeTree, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(cube_tree_report(tree), fh, indent=1)


# ---------------------------------------------------------------------------
# product rectangles
# ---------------------------------------------------------------------------

@dataclass(frozen=True, order=True)
class DyadicRectangle:
    """Product of one cube per factor, identified by (level, id) pairs."""

    level1: int
    id1: int
    level2: int
    id2: int


def rect_factor_masks(trees, rect: DyadicRectangle) -> tuple[np.ndarray, np.ndarray]:
    """Per-factor boolean cell masks (flattened factor grids)."""
    t1, t2 = trees
    return (t1.assignment[rect.level1].ravel() == rect.id1,
            t2.assignment[rect.level2].ravel() == rect.id2)


def rect_product_mask(trees, rect: DyadicRectangle) -> np.ndarray:
    m1, m2 = rect_factor_masks(trees, rect)
    return np.outer(m1, m2)


def rect_windows(trees, rect: DyadicRectangle) -> tuple[range, range]:
    """Scale windows t_i of the plus-set: [v*l+u+sigma, v*(l-1)+u+sigma)."""
    out = []
    for tree, lv in ((trees[0], rect.level1), (trees[1], rect.level2)):
        s = tree.gauge.sigma
        out.append(range(tree.v * lv + tree.u + s,
                         tree.v * (lv - 1) + tree.u + s))
    return out[0], out[1]


def rect_shadow_masks(trees, rect: DyadicRectangle,
                      pad: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Factor masks of the padded shadow: center + B_{v(l-1)+u+pad*sigma}.

    pad=2 gives the inner shadow, pad=3 the outer support shadow.
    """
    out = []
    for tree, lv, cid in ((trees[0], rect.level1, rect.id1),
                          (trees[1], rect.level2, rect.id2)):
        m = tree.v * (lv - 1) + tree.u + pad * tree.gauge.sigma
        mask = ball_mask(tree.gauge, tree.grid, m, center=tree.centers[lv][cid])
        out.append(mask.ravel())
    return out[0], out[1]


# ---------------------------------------------------------------------------
# open sets: expansion, maximal rectangles, covering sums
# ---------------------------------------------------------------------------

@dataclass
class ExpandedOpenSet:
    mask: np.ndarray
    c0: int
    threshold: float
    maximal: Field


def _product_spec(trees) -> GridSpec:
    g1, g2 = trees[0].grid, trees[1].grid
    return GridSpec(dims=(g1.dims[0], g2.dims[0]), box=g1.box + g2.box,
                    samples=g1.samples + g2.samples)


def expand_open_set(omega: np.ndarray, trees, c0: int | None = None,
                    levels=None) -> ExpandedOpenSet:
    """Superlevel expansion {M_s(chi_Omega) > b1^(-c0*u1) * b2^(-c0*u2)}.

    c0 defaults to the smallest integer above 2 for which the threshold is
    at most half of b1^(-2*u1)*b2^(-2*u2).
    """
    t1, t2 = trees
    b1, b2 = t1.gauge.det_abs, t2.gauge.det_abs
    u1, u2 = t1.u, t2.u
    half = 0.5 * b1 ** (-2 * u1) * b2 ** (-2 * u2)
    if c0 is None:
        c0 = 3
        while b1 ** (-c0 * u1) * b2 ** (-c0 * u2) > half:
            c0 += 1
    else:
        c0 = int(c0)
        if c0 <= 2 or b1 ** (-c0 * u1) * b2 ** (-c0 * u2) > half:
            raise ValueError("c0 must exceed 2 and meet the threshold bound")
    thr = b1 ** (-c0 * u1) * b2 ** (-c0 * u2)
    spec = _product_spec(trees)
    shape = spec.shape
    f = Field(spec, omega.reshape(shape).astype(float))
    ms = strong_maximal(f, (t1.gauge, t2.gauge), levels)
    mask = ms.values.real > thr
    return ExpandedOpenSet(mask=mask.reshape(omega.shape), c0=c0,
                           threshold=thr, maximal=ms)


def _flatten_product(omega: np.ndarray, trees) -> np.ndarray:
    n1 = int(np.prod(trees[0].grid.shape))
    n2 = int(np.prod(trees[1].grid.shape))
    return np.ascontiguousarray(omega).reshape(n1, n2)


def _group_table(a1: np.ndarray, a2: np.ndarray, c1: int, c2: int,
                 values: np.ndarray) -> np.ndarray:
    key = (a1[:, None] * c2 + a2[None, :]).ravel()
    return np.bincount(key, weights=values.ravel(),
                       minlength=c1 * c2).reshape(c1, c2)


class _PairTables:
    """Per level pair: cell counts of R, |R ∩ Omega|, and containment."""

    def __init__(self, omega: np.ndarray, trees):
        self.trees = trees
        self.om = _flatten_product(omega, trees).astype(float)
        self._cache: dict[tuple[int, int], dict] = {}

    def at(self, l1: int, l2: int) -> dict:
        if (l1, l2) not in self._cache:
            t1, t2 = self.trees
            a1 = t1.assignment[l1].ravel()
            a2 = t2.assignment[l2].ravel()
            c1, c2 = t1.cube_count(l1), t2.cube_count(l2)
            cnt = _group_table(a1, a2, c1, c2, self.om)
            area = np.outer(t1.cube_cell_counts(l1), t2.cube_cell_counts(l2))
            self._cache[(l1, l2)] = {
                "count": cnt, "area": area, "inside": cnt >= area - 0.5,
            }
        return self._cache[(l1, l2)]


def maximal_rectangles(omega: np.ndarray, trees, mode: str = "all",
                       tables: _PairTables | None = None) -> list[DyadicRectangle]:
    """Rectangles inside Omega whose one-level coarsenings all leave it.

    mode "all" requires maximality in both directions, "dir1"/"dir2" in the
    named direction only.
    """
    if mode not in ("all", "dir1", "dir2"):
        raise ValueError(f"unknown mode {mode!r}")
    t1, t2 = trees
    tb = tables if tables is not None else _PairTables(omega, trees)
    out: list[DyadicRectangle] = []
    for l1 in t1.levels:
        for l2 in t2.levels:
            inside = tb.at(l1, l2)["inside"]
            if not inside.any():
                continue
            grow1 = np.zeros_like(inside)
            grow2 = np.zeros_like(inside)
            if l1 > t1.levels[0]:
                up = tb.at(l1 - 1, l2)["inside"]
                grow1 = up[t1.parents[l1][:, None],
                           np.arange(inside.shape[1])[None, :]]
            if l2 > t2.levels[0]:
                up = tb.at(l1, l2 - 1)["inside"]
                grow2 = up[np.arange(inside.shape[0])[:, None],
                           t2.parents[l2][None, :]]
            if mode == "all":
                keep = inside & ~grow1 & ~grow2
            elif mode == "dir1":
                keep = inside & ~grow1
            else:
                keep = inside & ~grow2
            for i1, i2 in np.argwhere(keep):
                out.append(DyadicRectangle(l1, int(i1), l2, int(i2)))
    return out


def rectangles_to_csv(rects: list[DyadicRectangle], path: str) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["level1", "id1", "level2", "id2"])
        for r in sorted(rects):
            wr.writerow([r.level1, r.id1, r.level2, r.id2])


@dataclass
class OpenSetCover:
    omega: np.ndarray
    eta0: float
    m_all: list[DyadicRectangle]
    m_dir1: list[DyadicRectangle]
    m_dir2: list[DyadicRectangle]
    hat2: dict[DyadicRectangle, tuple[int, int]]
    hat1: dict[DyadicRectangle, tuple[int, int]]


def default_eta0(trees) -> float:
    t1, t2 = trees
    return (t1.gauge.det_abs ** (t1.v - 5 * t1.gauge.sigma)
            * t2.gauge.det_abs ** (t2.v - 5 * t2.gauge.sigma))


def _enlarged_factor(rect: DyadicRectangle, which: int, trees,
                     tb: _PairTables, eta0: float) -> tuple[int, int]:
    """Coarsest ancestor of the chosen factor keeping the density of Omega
    in the widened rectangle above eta0 (the factor's own level always
    qualifies because the rectangle sits inside Omega)."""
    t1, t2 = trees
    if which == 2:
        lv, cid = rect.level2, rect.id2
        tree, coarsest = t2, t2.levels[0]
    else:
        lv, cid = rect.level1, rect.id1
        tree, coarsest = t1, t1.levels[0]
    best = (lv, cid)
    cur = cid
    for l in range(lv - 1, coarsest - 1, -1):
        cur = int(tree.parents[l + 1][cur])
        if which == 2:
            tab = tb.at(rect.level1, l)
            frac = tab["count"][rect.id1, cur] / tab["area"][rect.id1, cur]
        else:
            tab = tb.at(l, rect.level2)
            frac = tab["count"][cur, rect.id2] / tab["area"][cur, rect.id2]
        if frac > eta0:
            best = (l, cur)
    return best


def build_open_set_cover(omega: np.ndarray, trees,
                         eta0: float | None = None) -> OpenSetCover:
    eta0 = default_eta0(trees) if eta0 is None else float(eta0)
    tb = _PairTables(omega, trees)
    m_all = maximal_rectangles(omega, trees, "all", tb)
    m_dir1 = maximal_rectangles(omega, trees, "dir1", tb)
    m_dir2 = maximal_rectangles(omega, trees, "dir2", tb)
    hat2 = {r: _enlarged_factor(r, 2, trees, tb, eta0) for r in m_dir1}
    hat1 = {r: _enlarged_factor(r, 1, trees, tb, eta0) for r in m_dir2}
    return OpenSetCover(omega=omega, eta0=eta0, m_all=m_all, m_dir1=m_dir1,
                        m_dir2=m_dir2, hat2=hat2, hat1=hat1)


def power_h(delta: float):
    """Increasing penalty t -> t**delta with a printable description."""
    delta = float(delta)
    if delta <= 0:
        raise ValueError("power penalty needs a positive exponent")

    def h(t):
        return t ** delta

    h.description = f"t^{delta:g}"
    return h


def _resolve_h(h):
    if h is None:
        return power_h(1.0)
    if callable(h):
        if not hasattr(h, "description"):
            h.description = "custom"
        return h
    if isinstance(h, (int, float)):
        return power_h(float(h))
    if isinstance(h, (tuple, list)) and len(h) == 2 and h[0] == "power":
        return power_h(float(h[1]))
    raise ValueError(f"cannot interpret penalty descriptor {h!r}")


def _series_check(hfn, trees) -> None:
    """Numerical summability test for sum_j j*h(C0 * d0^j)."""
    t1, t2 = trees
    b1, b2 = t1.gauge.det_abs, t2.gauge.det_abs
    c_zero = max(b1 ** (2 * t1.u - 1), b2 ** (2 * t2.u - 1))
    d_zero = max(b1 ** t1.v, b2 ** t2.v)
    js = np.arange(1, 401)
    with np.errstate(over="raise"):
        try:
            terms = js * np.asarray([hfn(c_zero * d_zero ** j) for j in js])
        except FloatingPointError as err:
            raise DivergentHError("penalty overflows the series test") from err
    total = float(terms.sum())
    tail_small = terms[-1] <= 1e-10 * max(total, 1.0)
    tail_falling = terms[-1] <= terms[-50]
    if not (tail_small and tail_falling):
        raise DivergentHError(
            f"sum_j j*h(C0*d0^j) does not settle (last term {terms[-1]:.3g})")


@dataclass
class JourneResult:
    sum_dir1: float
    sum_dir2: float
    w_omega: float
    ratio_dir1: float
    ratio_dir2: float
    eta0: float
    penalty: str
    n_dir1: int
    n_dir2: int


def journe_sum(omega: np.ndarray, trees, weight: np.ndarray | None = None,
               h=None, eta0: float | None = None) -> JourneResult:
    """Directional covering sums with enlargement penalties.

    Direction 1 sums w(R)*h(|R_2|/|R_hat_2|) over rectangles maximal in the
    first direction, where R_hat_2 widens the second factor as far as the
    Omega-density threshold eta0 allows; direction 2 mirrors the roles.
    Ratios are the sums divided by w(Omega).
    """
    hfn = _resolve_h(h)
    probe = np.asarray([hfn(t) for t in (0.25, 0.5, 1.0)])
    if not np.all(np.diff(probe) >= 0):
        raise ValueError("penalty must be nondecreasing")
    _series_check(hfn, trees)

    t1, t2 = trees
    om = _flatten_product(omega, trees).astype(bool)
    cellvol = t1.grid.cell_volume * t2.grid.cell_volume
    if weight is None:
        w = np.ones(om.shape)
    else:
        w = np.asarray(weight.values if isinstance(weight, Field) else weight)
        w = _flatten_product(w.real.astype(float), trees)
        if np.any(w < 0):
            raise ValueError("weight must be nonnegative")
    w_omega = float((w * om).sum() * cellvol)

    cover = build_open_set_cover(om, trees, eta0)
    wtb = _PairTables(w, trees)  # weighted group sums, reusing the tabulator

    def _wsum(rect: DyadicRectangle) -> float:
        return float(wtb.at(rect.level1, rect.level2)["count"][rect.id1, rect.id2]
                     * cellvol)

    n2 = {lv: t2.cube_cell_counts(lv) for lv in t2.levels}
    n1 = {lv: t1.cube_cell_counts(lv) for lv in t1.levels}
    s1 = 0.0
    for r in cover.m_dir1:
        hl, hid = cover.hat2[r]
        ratio = n2[r.level2][r.id2] / n2[hl][hid]
        s1 += _wsum(r) * hfn(ratio)
    s2 = 0.0
    for r in cover.m_dir2:
        hl, hid = cover.hat1[r]
        ratio = n1[r.level1][r.id1] / n1[hl][hid]
        s2 += _wsum(r) * hfn(ratio)

    return JourneResult(sum_dir1=s1, sum_dir2=s2, w_omega=w_omega,
                        ratio_dir1=s1 / w_omega if w_omega else float("inf"),
                        ratio_dir2=s2 / w_omega if w_omega else float("inf"),
                        eta0=cover.eta0, penalty=hfn.description,
                        n_dir1=len(cover.m_dir1), n_dir2=len(cover.m_dir2))
