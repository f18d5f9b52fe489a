"""Water levels from shoreline samples and harmonic filling of water bodies."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted, check_X_y, check_array

from .errors import InsufficientDataError, NumericalError
from .mask import MASK_LAND, GridSpec2D, Mask2D
from .rasterio import write_pfm

FOUR = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class WaterFillConfig:
    shore_band: float = 40.0        # meters from the shoreline
    threshold: float = 0.2          # RANSAC inlier distance, meters
    iterations: int = 500
    min_support: int = 50
    w_prior: float = 0.01           # multiplied by the sample count
    prior_z: float = 0.1
    height_scale: float = 100.0     # meters; standardizes the mean plane height
    solver_tol: float = 1e-6
    max_sweeps: int = 100_000
    tile_size: float = 1200.0
    tile_overlap: float = 120.0
    seed: int = 0

    def __post_init__(self):
        if self.shore_band <= 0 or self.threshold <= 0:
            raise ValueError("shore_band and threshold must be positive")
        if self.iterations < 1 or self.min_support < 3:
            raise ValueError("need >= 1 iteration and min_support >= 3")
        if self.w_prior < 0 or self.prior_z < 0 or self.height_scale <= 0:
            raise ValueError("prior weights must be >= 0 and height_scale > 0")
        if self.tile_overlap <= 0 or self.tile_size <= 2 * self.tile_overlap:
            raise ValueError("need tile_overlap > 0 and tile_size > 2 * tile_overlap")


# ---------------------------------------------------------------------------
# components and shoreline samples
# ---------------------------------------------------------------------------


def connected_components(mask: Mask2D | np.ndarray) -> tuple[np.ndarray, int]:
    """4-connected labeling of water cells; labels 1..n in raster-scan order."""
    water = mask.water if isinstance(mask, Mask2D) else np.asarray(mask, dtype=bool)
    labels, n = ndimage.label(water, structure=FOUR)
    return labels.astype(np.int32), int(n)


def shoreline_cells(component: np.ndarray, land: np.ndarray) -> np.ndarray:
    """Land cells 4-adjacent to the component."""
    grown = ndimage.binary_dilation(component, structure=FOUR)
    return grown & ~component & land


@dataclass
class ShorelineSamples:
    component: int
    points: np.ndarray          # (N, 3)
    distance: np.ndarray        # (N,) horizontal distance to the nearest shoreline cell center
    n_shore_cells: int = 0

    def __len__(self) -> int:
        return len(self.points)


def collect_shoreline_samples(component: int, labels: np.ndarray, mask: Mask2D,
                              points: np.ndarray, max_distance: float = 40.0) -> ShorelineSamples:
    """Depth points on land within ``max_distance`` of the component's shoreline."""
    comp = labels == component
    if not comp.any():
        raise ValueError(f"component {component} is empty")
    grid = mask.grid
    land = mask.label == MASK_LAND
    shore = shoreline_cells(comp, land)
    if not shore.any():
        raise InsufficientDataError(f"component {component} has no land shoreline")
    _, (ny_idx, nx_idx) = ndimage.distance_transform_edt(~shore, return_indices=True)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    ix, iy = grid.cell_of(pts[:, 0], pts[:, 1])
    inside = (ix >= 0) & (ix < grid.nx) & (iy >= 0) & (iy < grid.ny)
    pts, ix, iy = pts[inside], ix[inside], iy[inside]
    on_land = land[iy, ix]
    pts, ix, iy = pts[on_land], ix[on_land], iy[on_land]
    sy, sx = ny_idx[iy, ix], nx_idx[iy, ix]
    cx = grid.origin[0] + (sx + 0.5) * grid.cell_size
    cy = grid.origin[1] + (sy + 0.5) * grid.cell_size
    dist = np.hypot(pts[:, 0] - cx, pts[:, 1] - cy)
    keep = dist <= max_distance
    if not keep.any():
        raise InsufficientDataError(f"component {component}: no depth points within "
                                    f"{max_distance} m of its shoreline")
    return ShorelineSamples(component, pts[keep], dist[keep], int(shore.sum()))


# ---------------------------------------------------------------------------
# RANSAC level
# ---------------------------------------------------------------------------


@dataclass
class PlaneModel:
    a: float
    b: float
    c: float
    n_inliers: int
    rms: float
    n_samples: int = 0

    def __call__(self, x, y):
        return self.a * np.asarray(x) + self.b * np.asarray(y) + self.c

    def to_json(self) -> dict:
        return asdict(self)


def _planes_from_triples(p: np.ndarray):
    """Batched ``z = a x + b y + c`` through point triples ``(m, 3, 3)``."""
    A = np.concatenate([p[:, :, :2], np.ones((*p.shape[:2], 1))], axis=2)
    det = np.linalg.det(A)
    span = np.ptp(p[:, :, :2], axis=1).max(axis=1)
    ok = np.abs(det) > 1e-9 * np.maximum(span, 1e-12) ** 2
    coef = np.zeros((len(p), 3))
    if ok.any():
        coef[ok] = np.linalg.solve(A[ok], p[ok, :, 2][..., None])[..., 0]
    return coef, ok


def _lstsq_plane(pts: np.ndarray) -> np.ndarray:
    A = np.column_stack([pts[:, 0], pts[:, 1], np.ones(len(pts))])
    coef, *_ = np.linalg.lstsq(A, pts[:, 2], rcond=None)
    return coef


def _score(coef, n_in, pts, cfg: WaterFillConfig):
    a, b, c = coef[..., 0], coef[..., 1], coef[..., 2]
    cbar = a * pts[:, 0].mean() + b * pts[:, 1].mean() + c
    penalty = np.abs(a) + np.abs(b) + cfg.prior_z * np.abs(cbar) / cfg.height_scale
    return n_in - cfg.w_prior * len(pts) * penalty


def ransac_water_level(samples: ShorelineSamples | np.ndarray,
                       config: WaterFillConfig | None = None) -> PlaneModel:
    """Robust plane through shoreline altitudes with a weak horizontal prior."""
    cfg = config or WaterFillConfig()
    pts = samples.points if isinstance(samples, ShorelineSamples) else np.asarray(samples, dtype=np.float64)
    pts = pts.reshape(-1, 3)
    n = len(pts)
    if n < 3:
        raise InsufficientDataError(f"RANSAC needs >= 3 samples, got {n}")
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 19]))
    # three distinct indices per hypothesis
    i0 = rng.integers(0, n, cfg.iterations)
    i1 = (i0 + 1 + rng.integers(0, n - 1, cfg.iterations)) % n
    i2 = rng.integers(0, n - 2, cfg.iterations)
    lo, hi = np.minimum(i0, i1), np.maximum(i0, i1)
    i2 = i2 + (i2 >= lo)
    i2 = i2 + (i2 >= hi)
    coef, ok = _planes_from_triples(pts[np.stack([i0, i1, i2], axis=1)])
    if not ok.any():
        raise InsufficientDataError("all RANSAC hypotheses are degenerate (collinear support)")
    best_score, best_coef, best_in = -np.inf, None, 0
    chunk = max(1, 4_000_000 // max(n, 1))
    for s in range(0, cfg.iterations, chunk):
        c = coef[s : s + chunk]
        good = ok[s : s + chunk]
        res = np.abs(pts[None, :, 2] - (c[:, 0:1] * pts[None, :, 0] + c[:, 1:2] * pts[None, :, 1] + c[:, 2:3]))
        n_in = (res < cfg.threshold).sum(axis=1)
        score = np.where(good, _score(c, n_in, pts, cfg), -np.inf)
        k = int(np.argmax(score))
        if score[k] > best_score:
            best_score, best_coef, best_in = score[k], c[k].copy(), int(n_in[k])
    inl = np.abs(pts[:, 2] - (best_coef[0] * pts[:, 0] + best_coef[1] * pts[:, 1] + best_coef[2])) < cfg.threshold
    if best_in >= 3:
        refit = _lstsq_plane(pts[inl])
        r_inl = np.abs(pts[:, 2] - (refit[0] * pts[:, 0] + refit[1] * pts[:, 1] + refit[2])) < cfg.threshold
        # keep the hypothesis if the refit would lose support
        if r_inl.sum() >= best_in:
            best_coef, inl = refit, r_inl
    n_in = int(inl.sum())
    if n_in < min(cfg.min_support, n):
        raise InsufficientDataError(f"best plane has {n_in} inliers, below the minimum support "
                                    f"{cfg.min_support}")
    resid = pts[inl, 2] - (best_coef[0] * pts[inl, 0] + best_coef[1] * pts[inl, 1] + best_coef[2])
    rms = float(np.sqrt(np.mean(resid ** 2))) if n_in else float("nan")
    return PlaneModel(float(best_coef[0]), float(best_coef[1]), float(best_coef[2]), n_in, rms, n)


class RansacPlaneRegressor(RegressorMixin, BaseEstimator):
    """Estimator wrapper: ``X`` holds horizontal positions ``(n, 2)``, ``y`` altitudes."""

    def __init__(self, threshold=0.2, iterations=500, min_support=50, w_prior=0.01,
                 prior_z=0.1, height_scale=100.0, random_state=0):
        self.threshold = threshold
        self.iterations = iterations
        self.min_support = min_support
        self.w_prior = w_prior
        self.prior_z = prior_z
        self.height_scale = height_scale
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        if X.shape[1] != 2:
            raise ValueError(f"X must have 2 columns (x, y), got {X.shape[1]}")
        cfg = WaterFillConfig(threshold=self.threshold, iterations=self.iterations,
                              min_support=self.min_support, w_prior=self.w_prior,
                              prior_z=self.prior_z, height_scale=self.height_scale,
                              seed=int(self.random_state))
        self.plane_ = ransac_water_level(np.column_stack([X, y]), cfg)
        self.coef_ = np.array([self.plane_.a, self.plane_.b])
        self.intercept_ = self.plane_.c
        self.n_features_in_ = 2
        return self

    def predict(self, X):
        check_is_fitted(self, "plane_")
        X = check_array(X, dtype=np.float64)
        return X @ self.coef_ + self.intercept_


# ---------------------------------------------------------------------------
# Laplace fill
# ---------------------------------------------------------------------------


def laplace_fill(component: np.ndarray, boundary: np.ndarray, tol: float = 1e-6,
                 max_sweeps: int = 100_000) -> tuple[np.ndarray, float, int]:
    """Harmonic interpolation over ``component`` cells.

    ``boundary`` gives the Dirichlet value of every cell 4-adjacent to the
    component; the grid border acts as a zero-flux (mirror) edge.  Solved
    by red-black successive over-relaxation until the largest update is
    below ``tol``.  Returns ``(field, residual, sweeps)`` with ``field`` NaN
    outside the component.
    """
    comp = np.asarray(component, dtype=bool)
    out = np.full(comp.shape, np.nan)
    if not comp.any():
        return out, 0.0, 0
    ring = ndimage.binary_dilation(comp, structure=FOUR) & ~comp
    if not ring.any():
        raise InsufficientDataError("component has no boundary cells (fills the whole grid)")
    bvals = np.asarray(boundary, dtype=np.float64)[ring]
    if not np.all(np.isfinite(bvals)):
        raise ValueError("boundary values must be finite on the whole shoreline ring")
    rows, cols = np.nonzero(comp | ring)
    r0, r1, c0, c1 = rows.min(), rows.max() + 1, cols.min(), cols.max() + 1
    var = np.pad(comp[r0:r1, c0:c1], 1)
    rng_ = np.pad(ring[r0:r1, c0:c1], 1)
    exists = np.pad(np.ones((r1 - r0, c1 - c0), dtype=bool), 1)
    u = np.zeros(var.shape)
    u[rng_] = np.asarray(boundary, dtype=np.float64)[r0:r1, c0:c1][rng_[1:-1, 1:-1]]
    u[var] = bvals.mean()
    # neighbour counts (the mirror edge drops missing neighbours)
    nb = (exists[:-2, 1:-1].astype(int) + exists[2:, 1:-1] + exists[1:-1, :-2] + exists[1:-1, 2:])
    inner_var = var[1:-1, 1:-1]
    ii, jj = np.indices(inner_var.shape)
    colors = [inner_var & ((ii + jj) % 2 == k) for k in (0, 1)]
    n_max = max(inner_var.shape)
    omega = 2.0 / (1.0 + np.sin(np.pi / (n_max + 1)))
    ex = [exists[:-2, 1:-1], exists[2:, 1:-1], exists[1:-1, :-2], exists[1:-1, 2:]]
    residual = np.inf
    sweeps = 0
    while sweeps < max_sweeps:
        residual = 0.0
        for sel in colors:
            s = (np.where(ex[0], u[:-2, 1:-1], 0.0) + np.where(ex[1], u[2:, 1:-1], 0.0)
                 + np.where(ex[2], u[1:-1, :-2], 0.0) + np.where(ex[3], u[1:-1, 2:], 0.0))
            inner = u[1:-1, 1:-1]
            delta = s[sel] / nb[sel] - inner[sel]
            if delta.size:
                residual = max(residual, float(np.abs(delta).max()))
            inner[sel] += omega * delta
        sweeps += 1
        # iterate well past the contract so the error, not just the update, is small
        if residual < 0.01 * tol:
            break
    # final plain Jacobi residual of the converged field
    s = (np.where(ex[0], u[:-2, 1:-1], 0.0) + np.where(ex[1], u[2:, 1:-1], 0.0)
         + np.where(ex[2], u[1:-1, :-2], 0.0) + np.where(ex[3], u[1:-1, 2:], 0.0))
    inner = u[1:-1, 1:-1]
    residual = float(np.abs(s[inner_var] / nb[inner_var] - inner[inner_var]).max())
    if residual >= tol:
        raise NumericalError(f"Laplace fill did not converge: residual {residual:.3g} m "
                             f"after {sweeps} sweeps")
    vals = inner[inner_var]
    lo, hi = bvals.min(), bvals.max()
    slack = 10 * tol + 1e-12 * max(abs(lo), abs(hi))
    if vals.min() < lo - slack or vals.max() > hi + slack:
        raise NumericalError("maximum principle violated by the Laplace fill")
    out[r0:r1, c0:c1][comp[r0:r1, c0:c1]] = vals
    return out, residual, sweeps


# ---------------------------------------------------------------------------
# whole-mask fill and tiling
# ---------------------------------------------------------------------------


@dataclass
class HeightField:
    grid: GridSpec2D
    z: np.ndarray                  # (ny, nx), NaN off water
    components: list = field(default_factory=list)

    def save(self, stem) -> None:
        stem = Path(stem)
        write_pfm(stem.with_suffix(".pfm"), self.z.astype(np.float32))
        stem.with_suffix(".json").write_text(json.dumps(
            {"grid": self.grid.to_json(), "row_order": "y_ascending", "components": self.components},
            indent=1))


def fill_water(mask: Mask2D, points: np.ndarray, config: WaterFillConfig | None = None,
               threads: int = 1) -> HeightField:
    """Level every water component from its shoreline and fill it harmonically.

    Components without enough shoreline support are reported as unfixable
    and left unfilled.
    """
    cfg = config or WaterFillConfig()
    labels, n = connected_components(mask)
    grid = mask.grid
    X, Y = grid.centers()
    z = np.full(grid.shape, np.nan)

    def one(k):
        info = {"component": k, "cells": int(np.sum(labels == k))}
        try:
            samples = collect_shoreline_samples(k, labels, mask, points, cfg.shore_band)
            info["samples"] = len(samples)
            plane = ransac_water_level(samples, cfg)
            comp = labels == k
            field_, residual, sweeps = laplace_fill(comp, plane(X, Y), cfg.solver_tol, cfg.max_sweeps)
            info.update(plane=plane.to_json(), residual=residual, sweeps=sweeps, fixed=True)
            return info, comp, field_
        except InsufficientDataError as exc:
            info.update(fixed=False, reason=str(exc))
            return info, None, None

    ids = range(1, n + 1)
    if threads > 1 and n > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(one, ids))
    else:
        results = [one(k) for k in ids]
    infos = []
    for info, comp, field_ in results:
        if comp is not None:
            z[comp] = field_[comp]
        infos.append(info)
    return HeightField(grid, z, infos)


def _tile_starts(n: int, tile: int, step: int) -> list[int]:
    if n <= tile:
        return [0]
    starts = list(range(0, n - tile, step))
    starts.append(n - tile)
    return sorted(set(starts))


def feather_weights(length: int, start: int, total: int, overlap: int) -> np.ndarray:
    """1D linear ramp over ``overlap`` cells at edges interior to the scene."""
    i = np.arange(length)
    w = np.ones(length)
    if start > 0:
        w = np.minimum(w, (i + 0.5) / overlap)
    if start + length < total:
        w = np.minimum(w, (length - i - 0.5) / overlap)
    return w


def tile_and_feather(grid: GridSpec2D, tile_size: float, overlap: float,
                     per_tile: Callable[[tuple[slice, slice]], np.ndarray]) -> np.ndarray:
    """Run ``per_tile`` on overlapping windows and cross-fade the overlaps.

    ``per_tile`` receives ``(row_slice, col_slice)`` and returns that
    window's field (NaN where undefined).  Cells covered by a single tile
    keep that tile's value exactly.
    """
    if overlap <= 0 or tile_size <= 2 * overlap:
        raise ValueError("need overlap > 0 and tile_size > 2 * overlap")
    t = max(1, int(round(tile_size / grid.cell_size)))
    o = max(1, int(round(overlap / grid.cell_size)))
    acc = np.zeros(grid.shape)
    wsum = np.zeros(grid.shape)
    hits = np.zeros(grid.shape, dtype=np.int32)
    single = np.full(grid.shape, np.nan)
    for r in _tile_starts(grid.ny, t, t - o):
        for c in _tile_starts(grid.nx, t, t - o):
            rs, cs = slice(r, min(r + t, grid.ny)), slice(c, min(c + t, grid.nx))
            f = np.asarray(per_tile((rs, cs)), dtype=np.float64)
            wr = feather_weights(rs.stop - rs.start, r, grid.ny, o)
            wc = feather_weights(cs.stop - cs.start, c, grid.nx, o)
            w = np.outer(wr, wc)
            ok = np.isfinite(f)
            acc[rs, cs][ok] += (w * f)[ok]
            wsum[rs, cs][ok] += w[ok]
            hits[rs, cs][ok] += 1
            single[rs, cs][ok] = f[ok]
    out = np.full(grid.shape, np.nan)
    many = hits > 1
    out[many] = acc[many] / wsum[many]
    one = hits == 1
    out[one] = single[one]
    return out
