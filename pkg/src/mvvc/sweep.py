"""Plane-sweep photoconsistency and graph-cut depth maps.

Sweep planes are horizontal (``z = const``) world planes.  For a nadir
reference camera the Potts prior therefore prefers locally horizontal
surfaces.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .errors import NumericalError
from .geometry import PinholeCamera, bilinear, project_points
from .maxflow import build_csr, maxflow_arrays

__all__ = [
    "SweepConfig",
    "CostVolume",
    "DepthMap",
    "photoconsistency_score",
    "photoconsistency_scores",
    "build_cost_volume",
    "solve_depthmap",
    "potts_energy",
    "coarse_to_fine_sweep",
    "downsample",
]


@dataclass(frozen=True)
class SweepConfig:
    z_min: float = 0.0
    z_max: float = 10.0
    n_planes: int = 41
    k_drop: int = 2
    lambda_smooth: float = 0.0005
    truncation: float = 0.04        # per-view squared deviation cap
    max_cost: float = 0.04          # cost when fewer than 2 views see the point
    window: int = 1                 # box aggregation of per-pixel costs
    levels: int = 1
    band: int = 2
    max_cycles: int = 5
    xy_bounds: tuple[float, float, float, float] | None = None

    def __post_init__(self):
        if self.n_planes < 1 or not self.z_max >= self.z_min:
            raise ValueError("empty sweep range")
        if self.n_planes > 1 and self.z_max == self.z_min:
            raise ValueError("empty sweep range")
        if self.lambda_smooth < 0:
            raise ValueError("lambda_smooth must be >= 0")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError("window must be a positive odd integer")

    @property
    def planes(self) -> np.ndarray:
        if self.n_planes == 1:
            return np.array([self.z_min])
        return np.linspace(self.z_min, self.z_max, self.n_planes)

    @property
    def plane_step(self) -> float:
        return (self.z_max - self.z_min) / max(self.n_planes - 1, 1)

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class CostVolume:
    ref: PinholeCamera
    planes: np.ndarray
    costs: np.ndarray          # (H, W, P), lower is more photoconsistent
    support: np.ndarray        # (H, W, P) True where >= 2 views saw the plane point
    n_scored: int = 0

    @property
    def shape(self):
        return self.costs.shape


@dataclass
class DepthMap:
    ref: PinholeCamera
    planes: np.ndarray
    labels: np.ndarray         # (H, W) plane index
    depth: np.ndarray          # (H, W) metric depth along the optical axis, NaN if invalid
    valid: np.ndarray
    n_scored: int = 0
    energy: float = float("nan")
    ident: int = 0

    def points(self, pixels: np.ndarray | None = None) -> np.ndarray:
        """World points for ``(row, col)`` pixels (defaults to all valid pixels)."""
        if pixels is None:
            pixels = np.argwhere(self.valid)
        pixels = np.asarray(pixels)
        r, c = pixels[:, 0], pixels[:, 1]
        return self.ref.unproject(c, r, self.depth[r, c])

    def z(self) -> np.ndarray:
        return np.where(self.valid, self.planes[self.labels], np.nan)


def _plane_depth(ref: PinholeCamera, rays: np.ndarray, z: float) -> np.ndarray:
    dz = rays[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (z - ref.center[2]) / dz
    return np.where((dz < 0) & (s > 0), s, np.nan)


def photoconsistency_scores(samples: np.ndarray, valid: np.ndarray | None = None,
                            k_drop: int = 0, truncation: float = np.inf,
                            max_cost: float = 1.0) -> np.ndarray:
    """Vectorized scene-space photoconsistency over the last axis (views).

    Views are ranked by squared deviation from the mean of all valid views;
    the ``k_drop`` worst are discarded (never leaving fewer than two) and the
    cost is the truncated variance of the survivors about their own mean.
    """
    x = np.asarray(samples, dtype=np.float64)
    ok = np.ones(x.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    n_valid = ok.sum(axis=-1)
    denom = np.maximum(n_valid, 1)
    mean = np.where(ok, x, 0.0).sum(axis=-1) / denom
    dev = np.where(ok, (x - mean[..., None]) ** 2, np.inf)
    n_drop = np.clip(np.minimum(k_drop, n_valid - 2), 0, None)
    n_keep = n_valid - n_drop
    rank = np.argsort(np.argsort(dev, axis=-1, kind="stable"), axis=-1, kind="stable")
    keep = rank < n_keep[..., None]
    kcount = np.maximum(n_keep, 1)
    mean2 = np.where(keep, x, 0.0).sum(axis=-1) / kcount
    dev2 = np.minimum((x - mean2[..., None]) ** 2, truncation)
    cost = np.where(keep, dev2, 0.0).sum(axis=-1) / kcount
    return np.where(n_valid >= 2, cost, max_cost)


def photoconsistency_score(samples, valid=None, k_drop: int = 0,
                           truncation: float = np.inf, max_cost: float = 1.0) -> float:
    return float(photoconsistency_scores(np.asarray(samples)[None],
                                         None if valid is None else np.asarray(valid)[None],
                                         k_drop, truncation, max_cost)[0])


def _in_bounds(points: np.ndarray, bounds) -> np.ndarray:
    if bounds is None:
        return np.ones(points.shape[:-1], dtype=bool)
    x0, y0, x1, y1 = bounds
    return (points[..., 0] >= x0) & (points[..., 0] < x1) & (points[..., 1] >= y0) & (points[..., 1] < y1)


def build_cost_volume(ref: PinholeCamera, cameras, images, config: SweepConfig,
                      candidates: np.ndarray | None = None) -> CostVolume:
    """Photoconsistency of every (reference pixel, plane) pair.

    ``candidates`` (H, W, P) restricts evaluation; other entries get
    ``max_cost``.  ``n_scored`` counts evaluated pairs.
    """
    planes = config.planes
    if len(planes) == 0:
        raise ValueError("empty sweep range")
    h, w = ref.height, ref.width
    vv, uu = np.mgrid[0:h, 0:w]
    rays = ref.rays(uu, vv)
    raw = np.full((h, w, len(planes)), config.max_cost)
    support = np.zeros((h, w, len(planes)), dtype=bool)
    rad = config.window // 2
    if candidates is not None:
        evaluate = ndimage.maximum_filter(candidates, size=(config.window, config.window, 1),
                                          mode="nearest") if rad else candidates
    else:
        evaluate = None
    n_scored = 0
    images = [np.asarray(im, dtype=np.float64) for im in images]
    for k, z in enumerate(planes):
        if evaluate is not None:
            sel = evaluate[:, :, k]
            if not sel.any():
                continue
        else:
            sel = np.ones((h, w), dtype=bool)
        s = _plane_depth(ref, rays[sel], z)
        pts = ref.center + rays[sel] * s[:, None]
        ok_pt = np.isfinite(s) & _in_bounds(pts, config.xy_bounds)
        samples = np.zeros((len(pts), len(cameras)))
        valid = np.zeros((len(pts), len(cameras)), dtype=bool)
        for j, (cam, img) in enumerate(zip(cameras, images)):
            u, v, _, inv = project_points(cam, pts)
            m = inv & ok_pt
            samples[m, j] = bilinear(img, u[m], v[m])
            valid[:, j] = m
        raw[:, :, k][sel] = photoconsistency_scores(samples, valid, config.k_drop,
                                                    config.truncation, config.max_cost)
        support[:, :, k][sel] = valid.sum(axis=1) >= 2
        n_scored += int(sel.sum())
    costs = ndimage.uniform_filter(raw, size=(config.window, config.window, 1), mode="nearest") if rad else raw
    if candidates is not None:
        costs = np.where(candidates, costs, config.max_cost)
    return CostVolume(ref, planes, costs, support, n_scored)


def potts_energy(costs: np.ndarray, labels: np.ndarray, lam: float) -> float:
    h, w, _ = costs.shape
    data = np.take_along_axis(costs, labels[..., None], axis=2).sum()
    smooth = np.count_nonzero(labels[:, 1:] != labels[:, :-1]) + np.count_nonzero(labels[1:] != labels[:-1])
    return float(data + lam * smooth)


def _grid_pairs(h: int, w: int):
    idx = np.arange(h * w).reshape(h, w)
    tails = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
    heads = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
    return tails, heads


def alpha_expansion(costs: np.ndarray, lam: float, max_cycles: int = 5,
                    labels: np.ndarray | None = None, check: bool = True):
    """Potts alpha-expansion on a 4-connected grid.

    Returns ``(labels, energy, n_moves)``.  Every accepted move strictly
    lowers the energy; a move whose cut would raise it is a solver bug and
    raises ``NumericalError``.
    """
    costs = np.asarray(costs, dtype=np.float64)
    h, w, n_labels = costs.shape
    if labels is None:
        labels = np.argmin(costs, axis=2)
    labels = labels.astype(np.int64)
    energy = potts_energy(costs, labels, lam)
    if lam == 0 or n_labels == 1:
        return labels, energy, 0
    tails, heads = _grid_pairs(h, w)
    first, head, rev, fwd, bwd = build_csr(h * w, tails, heads)
    flat = costs.reshape(h * w, n_labels)
    n = h * w
    moves = 0
    for _ in range(max_cycles):
        improved = False
        for alpha in range(n_labels):
            f = labels.ravel()
            fp, fq = f[tails], f[heads]
            a = lam * (fp != fq)
            b = lam * (fp != alpha)
            c = lam * (alpha != fq)
            e0 = flat[np.arange(n), f]
            e1 = flat[:, alpha] + np.bincount(tails, c - a, minlength=n) - np.bincount(heads, c, minlength=n)
            cap = np.zeros(len(head))
            cap[fwd] = b + c - a
            _, sink = maxflow_arrays(first, head, rev, cap, e1 - e0)
            if not sink.any():
                continue
            new = np.where(sink, alpha, f).reshape(h, w)
            e_new = potts_energy(costs, new, lam)
            if check and e_new > energy + 1e-9 * (1 + abs(energy)):
                raise NumericalError(f"expansion move on label {alpha} raised the energy "
                                     f"({energy} -> {e_new})")
            if e_new < energy - 1e-12 * (1 + abs(energy)):
                labels, energy = new, e_new
                improved = True
                moves += 1
        if not improved:
            break
    return labels, energy, moves


def solve_depthmap(cost: CostVolume, lambda_smooth: float, max_cycles: int = 5,
                   ident: int = 0) -> DepthMap:
    """Smooth depth map minimizing data cost + Potts penalty (ties -> lower plane)."""
    if lambda_smooth < 0:
        raise ValueError("lambda_smooth must be >= 0")
    labels, energy, _ = alpha_expansion(cost.costs, lambda_smooth, max_cycles)
    return _to_depthmap(cost, labels, energy, ident)


def _to_depthmap(cost: CostVolume, labels, energy, ident, n_scored=None) -> DepthMap:
    ref = cost.ref
    vv, uu = np.mgrid[0 : ref.height, 0 : ref.width]
    rays = ref.rays(uu, vv)
    z = cost.planes[labels]
    with np.errstate(divide="ignore", invalid="ignore"):
        depth = (z - ref.center[2]) / rays[..., 2]
    seen = np.take_along_axis(cost.support, labels[..., None], axis=2)[..., 0]
    valid = seen & np.isfinite(depth) & (depth > 0)
    depth = np.where(valid, depth, np.nan)
    return DepthMap(ref, cost.planes, labels, depth, valid,
                    cost.n_scored if n_scored is None else n_scored, energy, ident)


def downsample(image: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return np.asarray(image, dtype=np.float64)
    h, w = image.shape
    hh, ww = h // factor, w // factor
    return image[: hh * factor, : ww * factor].reshape(hh, factor, ww, factor).mean(axis=(1, 3))


def coarse_to_fine_sweep(ref_index: int, cameras, images, config: SweepConfig,
                         levels: int | None = None, band: int | None = None,
                         ident: int | None = None) -> DepthMap:
    """Pyramid sweep: finer levels only score planes within ``band`` of the
    upsampled coarser labels.  ``levels == 1`` is the plain single-scale sweep.
    """
    levels = config.levels if levels is None else levels
    band = config.band if band is None else band
    if levels < 1:
        raise ValueError("levels must be >= 1")
    ident = ref_index if ident is None else ident
    total = 0
    labels = None
    prev_valid = None
    for lvl in reversed(range(levels)):
        factor = 2 ** lvl
        cams = [c.scaled(factor) for c in cameras] if factor > 1 else list(cameras)
        imgs = [downsample(im, factor) for im in images]
        ref = cams[ref_index]
        candidates = None
        if labels is not None:
            rows = np.minimum(np.arange(ref.height) // 2, labels.shape[0] - 1)
            cols = np.minimum(np.arange(ref.width) // 2, labels.shape[1] - 1)
            up = labels[np.ix_(rows, cols)]
            up_valid = prev_valid[np.ix_(rows, cols)]
            plane_idx = np.arange(config.n_planes)
            candidates = np.abs(plane_idx[None, None, :] - up[..., None]) <= band
            candidates |= ~up_valid[..., None]
        cost = build_cost_volume(ref, cams, imgs, config, candidates)
        total += cost.n_scored
        labels, energy, _ = alpha_expansion(cost.costs, config.lambda_smooth, config.max_cycles)
        prev_valid = np.take_along_axis(cost.support, labels[..., None], axis=2)[..., 0]
    return _to_depthmap(cost, labels, energy, ident, n_scored=total)
