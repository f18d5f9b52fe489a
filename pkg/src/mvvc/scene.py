"""Deterministic synthetic scenes and posed renders.

Land is Lambertian (view independent), water carries a per-view ripple field
and specular glints, trees get high-frequency texture with a small per-view
parallax jitter.  Rasters are indexed ``[iy, ix]`` with cell centers at
``origin + (ix + 1/2, iy + 1/2) * cell_size``.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .geometry import PinholeCamera, look_at

LAND, WATER, TREE = 0, 1, 2
CLASS_NAMES = {LAND: "land", WATER: "water", TREE: "tree"}


@dataclass(frozen=True)
class SceneConfig:
    extent: float = 64.0
    cell_size: float = 0.25
    n_water_bodies: int = 2
    water_fraction: tuple[float, float] = (0.1, 0.4)
    terrain_roughness: float = 0.5
    terrain_scale: float = 12.0       # correlation length of the relief, meters
    base_altitude: float = 10.0
    shore_shelf: float = 8.0          # width of the flat shoreline shelf, meters
    level_margin: float = 0.4         # rim of each basin sits this far above its water level
    n_tree_patches: int = 0
    tree_radius: float = 5.0
    tree_height: float = 4.0
    # appearance
    texture_contrast: float = 0.16
    sigma_land: float = 0.01
    # water mimics the ground texture statistics in any single view; only the
    # per-view ripple field (same spectrum as the texture) breaks cross-view agreement
    water_base: float = 0.5
    water_static: float = 0.968       # share of the ground texture still visible through water
    ripple_amplitude: float = 0.04    # std of the per-view ripple field
    glint_prob: float = 0.0
    tree_jitter: float = 0.15
    light_azimuth: float = 135.0
    light_elevation: float = 55.0

    def __post_init__(self):
        lo, hi = self.water_fraction
        if hi >= 1 or lo >= 1:
            raise ValueError("water fraction must be < 1")
        if lo < 0 or lo > hi:
            raise ValueError("water fraction band must satisfy 0 <= lo <= hi")
        if self.extent <= 0 or self.cell_size <= 0:
            raise ValueError("extent and cell size must be positive")
        if self.n_water_bodies < 0 or self.n_tree_patches < 0:
            raise ValueError("body counts must be >= 0")

    @classmethod
    def preset(cls, name: str, **overrides) -> "SceneConfig":
        presets = {
            "lake": {},
            "flat": {"n_water_bodies": 0, "terrain_roughness": 0.0},
            "land": {"n_water_bodies": 0},
            "trees": {"n_water_bodies": 0, "n_tree_patches": 3},
        }
        if name not in presets:
            raise ValueError(f"unknown scene preset {name!r}; choose from {sorted(presets)}")
        return replace(cls(), **{**presets[name], **overrides})

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class Scene:
    config: SceneConfig
    seed: int
    heightfield: np.ndarray      # (n, n) altitude, meters
    classes: np.ndarray          # (n, n) uint8 LAND/WATER/TREE
    bodies: np.ndarray           # (n, n) int32, 0 = no water, b + 1 = body b
    levels: list[float]
    texture: np.ndarray          # ground albedo in [0, 1]
    tree_texture: np.ndarray
    origin: tuple[float, float] = (0.0, 0.0)

    @property
    def cell_size(self) -> float:
        return self.config.cell_size

    @property
    def shape(self) -> tuple[int, int]:
        return self.heightfield.shape

    @property
    def extent_xy(self) -> tuple[float, float, float, float]:
        ny, nx = self.shape
        x0, y0 = self.origin
        return x0, y0, x0 + nx * self.cell_size, y0 + ny * self.cell_size

    def water_fraction(self) -> float:
        return float(np.mean(self.classes == WATER))

    def cell_index(self, x, y):
        ix = np.floor((np.asarray(x) - self.origin[0]) / self.cell_size).astype(np.int64)
        iy = np.floor((np.asarray(y) - self.origin[1]) / self.cell_size).astype(np.int64)
        return ix, iy

    def sample(self, raster: np.ndarray, x, y) -> np.ndarray:
        """Bilinear lookup of a cell-centred raster at world positions (clamped)."""
        ny, nx = raster.shape
        fx = np.clip((np.asarray(x) - self.origin[0]) / self.cell_size - 0.5, 0, nx - 1)
        fy = np.clip((np.asarray(y) - self.origin[1]) / self.cell_size - 0.5, 0, ny - 1)
        x0 = np.minimum(np.floor(fx).astype(np.int64), max(nx - 2, 0))
        y0 = np.minimum(np.floor(fy).astype(np.int64), max(ny - 2, 0))
        x1 = np.minimum(x0 + 1, nx - 1)
        y1 = np.minimum(y0 + 1, ny - 1)
        a = fx - x0
        b = fy - y0
        return ((raster[y0, x0] * (1 - a) + raster[y0, x1] * a) * (1 - b)
                + (raster[y1, x0] * (1 - a) + raster[y1, x1] * a) * b)

    def inside(self, x, y) -> np.ndarray:
        x0, y0, x1, y1 = self.extent_xy
        x = np.asarray(x)
        y = np.asarray(y)
        return (x >= x0) & (x < x1) & (y >= y0) & (y < y1)

    def z_range(self) -> tuple[float, float]:
        return float(self.heightfield.min()), float(self.heightfield.max())

    def metadata(self) -> dict:
        return {"config": self.config.to_json(), "seed": self.seed, "levels": self.levels,
                "origin": list(self.origin), "cell_size": self.cell_size,
                "shape": list(self.shape)}


@dataclass
class RenderedView:
    camera: PinholeCamera
    image: np.ndarray
    gt_depth: np.ndarray   # NaN where the ray misses the scene
    gt_class: np.ndarray   # int8, -1 where the ray misses the scene


def _smooth_noise(rng: np.random.Generator, shape, sigma_cells: float) -> np.ndarray:
    g = ndimage.gaussian_filter(rng.standard_normal(shape), sigma_cells, mode="wrap")
    return (g - g.mean()) / (g.std() + 1e-12)


def _texture_field(rng: np.random.Generator, shape) -> np.ndarray:
    """Unit-variance multi-scale noise (1, 3 and 10 cell correlation lengths)."""
    t = (0.6 * _smooth_noise(rng, shape, 1.0)
         + 0.35 * _smooth_noise(rng, shape, 3.0)
         + 0.3 * _smooth_noise(rng, shape, 10.0))
    return t / t.std()


def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3 - 2 * t)


def _blob(xx, yy, cx, cy, radius, harmonics):
    ang = np.arctan2(yy - cy, xx - cx)
    r = radius * (1 + sum(a * np.cos(k * ang + p) for k, a, p in harmonics))
    return np.hypot(xx - cx, yy - cy) / r


def generate_scene(config: SceneConfig | None = None, seed: int = 0) -> Scene:
    """Procedural terrain with lakes (and optional tree patches)."""
    cfg = config or SceneConfig()
    ss = np.random.SeedSequence([int(seed), 1001])
    r_terrain, r_water, r_tree, r_tex = (np.random.default_rng(s) for s in ss.spawn(4))
    cs = cfg.cell_size
    n = int(round(cfg.extent / cs))
    coords = (np.arange(n) + 0.5) * cs
    xx, yy = np.meshgrid(coords, coords)

    base = cfg.base_altitude + cfg.terrain_roughness * _smooth_noise(r_terrain, (n, n), cfg.terrain_scale / cs)
    height = base.copy()
    classes = np.full((n, n), LAND, dtype=np.uint8)
    bodies = np.zeros((n, n), dtype=np.int32)
    levels: list[float] = []

    if cfg.n_water_bodies > 0:
        lo, hi = cfg.water_fraction
        inner_lo, inner_hi = lo + 0.25 * (hi - lo), lo + 0.5 * (hi - lo)
        target = r_water.uniform(inner_lo, inner_hi)
        weights = r_water.uniform(0.7, 1.3, cfg.n_water_bodies)
        areas = target * cfg.extent ** 2 * weights / weights.sum()
        radii = np.sqrt(areas / np.pi)
        harmonics = [[(k, r_water.uniform(0.03, 0.12) / k ** 0.5, r_water.uniform(0, 2 * np.pi))
                      for k in (2, 3, 5)] for _ in range(cfg.n_water_bodies)]
        margin = cfg.shore_shelf + 2.0
        centers = None
        for _ in range(2000):
            cand = []
            for r in radii:
                lim = r * 1.3 + margin
                if lim * 2 >= cfg.extent:
                    break
                cand.append(r_water.uniform(lim, cfg.extent - lim, 2))
            if len(cand) != len(radii):
                radii *= 0.95
                continue
            ok = all(np.hypot(*(cand[i] - cand[j])) > 1.3 * (radii[i] + radii[j]) + cfg.shore_shelf
                     for i in range(len(cand)) for j in range(i))
            if ok:
                centers = cand
                break
            radii *= 0.995
        if centers is None:
            raise ValueError("cannot place the requested water bodies inside the scene")

        def carve(scale):
            masks = [_blob(xx, yy, c[0], c[1], r * scale, h) < 1
                     for c, r, h in zip(centers, radii, harmonics)]
            return masks, sum(m.mean() for m in masks)

        scale = 1.0
        for _ in range(6):
            masks, frac = carve(scale)
            if frac <= 0:
                break
            scale *= np.sqrt(target / frac)
        masks, frac = carve(scale)

        def too_close(masks):
            if len(masks) < 2:
                return False
            for b, m in enumerate(masks):
                others = np.logical_or.reduce([o for j, o in enumerate(masks) if j != b])
                if np.min(ndimage.distance_transform_edt(~m)[others]) * cs <= cfg.shore_shelf:
                    return True
            return False

        # bodies must stay separate components with room for their shelves
        while too_close(masks) and scale > 0.2:
            scale *= 0.95
            masks, frac = carve(scale)

        any_water = np.logical_or.reduce(masks)
        for b, m in enumerate(masks):
            dist = ndimage.distance_transform_edt(~m) * cs
            ring = (~m) & (dist <= cfg.shore_shelf)
            level = float(base[ring].min() - cfg.level_margin)
            shelf = _smoothstep(dist / cfg.shore_shelf)
            near = (dist <= cfg.shore_shelf) & ~(any_water & ~m)
            height[near] = np.minimum(height[near], level + (base[near] - level) * shelf[near])
            height[m] = level
            classes[m] = WATER
            bodies[m] = b + 1
            levels.append(level)

    if cfg.n_tree_patches > 0:
        dist_water = ndimage.distance_transform_edt(classes != WATER) * cs
        for _ in range(cfg.n_tree_patches):
            for _attempt in range(500):
                c = r_tree.uniform(cfg.tree_radius, cfg.extent - cfg.tree_radius, 2)
                rad = cfg.tree_radius * r_tree.uniform(0.7, 1.2)
                rho = _blob(xx, yy, c[0], c[1], rad,
                            [(k, r_tree.uniform(0.05, 0.15), r_tree.uniform(0, 6.3)) for k in (2, 3)])
                patch = rho < 1
                if not np.any(patch & (dist_water < 2.0)) and not np.any(patch & (classes == TREE)):
                    break
            else:
                continue
            dome = cfg.tree_height * np.sqrt(np.clip(1 - rho ** 2, 0, 1)) ** 0.5
            height[patch] += dome[patch]
            classes[patch] = TREE

    tex = np.clip(0.5 + cfg.texture_contrast * _texture_field(r_tex, (n, n)), 0.03, 0.97)
    tree_tex = np.clip(0.35 + 0.12 * _smooth_noise(r_tex, (n, n), 0.6), 0.02, 0.98)

    return Scene(cfg, int(seed), height, classes, bodies, levels, tex, tree_tex)


# ---------------------------------------------------------------------------
# cameras and rendering
# ---------------------------------------------------------------------------


def default_rig(scene: Scene, n_cameras: int = 8, altitude: float = 150.0,
                tilt_range: tuple[float, float] = (10.0, 25.0), image_size: int = 256,
                gsd: float = 0.27) -> list[PinholeCamera]:
    """Nadir-biased ring of cameras aimed at the scene center.

    ``gsd`` is the ground sample distance at the aim point, which fixes the
    focal length from the viewing distance.
    """
    x0, y0, x1, y1 = scene.extent_xy
    zmid = float(np.median(scene.heightfield))
    target = np.array([(x0 + x1) / 2, (y0 + y1) / 2, zmid])
    cams = []
    lo, hi = tilt_range
    for i in range(n_cameras):
        phi = 2 * np.pi * i / n_cameras
        frac = ((3 * i) % n_cameras) / max(n_cameras - 1, 1)
        tilt = np.deg2rad(lo + (hi - lo) * frac)
        offset = altitude * np.tan(tilt)
        center = target + np.array([offset * np.cos(phi), offset * np.sin(phi), altitude])
        dist = np.linalg.norm(center - target)
        f = dist / gsd
        cams.append(look_at(center, target, f, f, image_size, image_size))
    return cams


def intersect_heightfield(scene: Scene, cam: PinholeCamera, u=None, v=None,
                          step: float = 0.1, refine: int = 10):
    """Ray-march camera rays against the bilinear heightfield.

    Returns ``(depth, points, hit)`` with depth along the optical axis.
    """
    if u is None:
        v, u = np.mgrid[0 : cam.height, 0 : cam.width]
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    c = cam.center
    d = cam.rays(u, v)
    zmin, zmax = scene.z_range()
    zmin -= 0.01
    zmax += 0.01
    hit = np.zeros(u.size, dtype=bool)
    depth = np.full(u.size, np.nan)
    down = d[:, 2] < 0
    s_top = np.where(down, (zmax - c[2]) / np.where(down, d[:, 2], -1), np.inf)
    s_bot = np.where(down, (zmin - c[2]) / np.where(down, d[:, 2], -1), np.inf)
    s_top = np.maximum(s_top, 0)
    ds = step / np.maximum(np.abs(d[:, 2]), np.hypot(d[:, 0], d[:, 1]))

    def excess(s, idx):
        p = c + d[idx] * s[:, None]
        inside = scene.inside(p[:, 0], p[:, 1])
        h = scene.sample(scene.heightfield, p[:, 0], p[:, 1])
        return np.where(inside, p[:, 2] - h, np.inf)

    active = np.nonzero(down)[0]
    s_prev = s_top[active]
    f_prev = excess(s_prev, active)
    # rays starting below the surface (camera inside terrain) never hit
    alive = f_prev > 0
    active, s_prev, f_prev = active[alive], s_prev[alive], f_prev[alive]
    while active.size:
        s_cur = np.minimum(s_prev + ds[active], s_bot[active])
        f_cur = excess(s_cur, active)
        crossed = f_cur <= 0
        if np.any(crossed):
            idx = active[crossed]
            lo, hi = s_prev[crossed], s_cur[crossed]
            for _ in range(refine):
                mid = 0.5 * (lo + hi)
                below = excess(mid, idx) <= 0
                hi = np.where(below, mid, hi)
                lo = np.where(below, lo, mid)
            # secant on the final bracket
            flo, fhi = excess(lo, idx), excess(hi, idx)
            flo = np.where(np.isfinite(flo), flo, 0.0)
            t = np.where(flo - fhi > 0, flo / np.maximum(flo - fhi, 1e-12), 0.5)
            depth[idx] = lo + np.clip(t, 0, 1) * (hi - lo)
            hit[idx] = True
        keep = (~crossed) & (s_cur < s_bot[active])
        active, s_prev, f_prev = active[keep], s_cur[keep], f_cur[keep]
    points = c + d * np.where(hit, depth, 0.0)[:, None]
    return depth, points, hit


def _light(cfg: SceneConfig) -> np.ndarray:
    az = np.deg2rad(cfg.light_azimuth)
    el = np.deg2rad(cfg.light_elevation)
    return np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])


def _shading(scene: Scene, x, y) -> np.ndarray:
    gy, gx = np.gradient(scene.heightfield, scene.cell_size)
    nx = -scene.sample(gx, x, y)
    ny = -scene.sample(gy, x, y)
    norm = np.sqrt(nx ** 2 + ny ** 2 + 1)
    l = _light(scene.config)
    lam = (nx * l[0] + ny * l[1] + l[2]) / norm
    return 0.35 + 0.65 * np.clip(lam, 0, 1) / l[2]


def view_rng(seed: int, view_index: int) -> np.random.Generator:
    """Independent per-view stream; parallel order never changes output."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), 7, int(view_index)]))


def shade_points(scene: Scene, points: np.ndarray, classes: np.ndarray,
                 rng: np.random.Generator) -> np.ndarray:
    """Intensity of surface points as seen by one view (one RNG stream per view)."""
    cfg = scene.config
    x, y = points[:, 0], points[:, 1]
    out = np.zeros(len(points))
    ripples = _texture_field(rng, scene.shape)
    jitter = rng.normal(0, cfg.tree_jitter, 2)
    noise = rng.normal(0, cfg.sigma_land, len(points)) if cfg.sigma_land > 0 else np.zeros(len(points))
    glint = rng.random(len(points)) < cfg.glint_prob

    land = classes == LAND
    if np.any(land):
        out[land] = (scene.sample(scene.texture, x[land], y[land]) * _shading(scene, x[land], y[land])
                     + noise[land])
    water = classes == WATER
    if np.any(water):
        xw, yw = x[water], y[water]
        val = cfg.water_base + cfg.water_static * (scene.sample(scene.texture, xw, yw) - 0.5)
        val = val + cfg.ripple_amplitude * scene.sample(ripples, xw, yw)
        val = np.where(glint[water], 1.0, val)
        out[water] = val + noise[water]
    tree = classes == TREE
    if np.any(tree):
        xt, yt = x[tree] + jitter[0], y[tree] + jitter[1]
        out[tree] = scene.sample(scene.tree_texture, xt, yt) * _shading(scene, x[tree], y[tree]) + noise[tree]
    return np.clip(out, 0.0, 1.0)


def render_view(scene: Scene, cam: PinholeCamera, seed: int, index: int) -> RenderedView:
    depth, points, hit = intersect_heightfield(scene, cam)
    if not np.any(hit):
        raise ValueError(f"camera {index} does not view the scene")
    rng = view_rng(seed, index)
    ix, iy = scene.cell_index(points[:, 0], points[:, 1])
    ny, nx = scene.shape
    cls = np.full(hit.shape, -1, dtype=np.int8)
    cls[hit] = scene.classes[np.clip(iy[hit], 0, ny - 1), np.clip(ix[hit], 0, nx - 1)]
    # draw the per-view stream for every pixel so the stream layout is fixed
    img = shade_points(scene, points, np.where(hit, cls, 127), rng)
    # beyond the scene each view sees unrelated content, never a shared flat color
    void = np.random.default_rng(np.random.SeedSequence([int(seed), 11, int(index)]))
    img[~hit] = void.uniform(0.2, 0.8, int(np.count_nonzero(~hit)))
    shape = (cam.height, cam.width)
    return RenderedView(cam, img.reshape(shape), depth.reshape(shape), cls.reshape(shape))


def render_views(scene: Scene, cameras: Sequence[PinholeCamera], seed: int = 0,
                 threads: int = 1) -> list[RenderedView]:
    bad = [i for i, c in enumerate(cameras) if c.center[2] <= scene.z_range()[1]]
    if bad:
        raise ValueError(f"cameras {bad} are not above the scene")
    jobs = list(enumerate(cameras))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(lambda ic: render_view(scene, ic[1], seed, ic[0]), jobs))
    return [render_view(scene, c, seed, i) for i, c in jobs]


# ---------------------------------------------------------------------------
# weak-supervision polygons
# ---------------------------------------------------------------------------


def _pure_windows(mask: np.ndarray, side: int) -> np.ndarray:
    ii = np.pad(mask.astype(np.int64).cumsum(0).cumsum(1), ((1, 0), (1, 0)))
    s = ii[side:, side:] - ii[:-side, side:] - ii[side:, :-side] + ii[:-side, :-side]
    return s == side * side


def make_label_polygons(scene: Scene, count_per_class: int,
                        classes: Sequence[int] = (LAND, WATER), side: float | None = None,
                        margin: float = 0.5, seed: int = 0):
    """Axis-aligned square polygons that each lie inside a single class region.

    Every class gets the same polygon size and count, so class areas match.
    ``margin`` keeps polygons that far (meters) from any other class.
    Returns a list of ``(vertices (4, 2), class)`` in world meters.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 31]))
    cs = scene.cell_size
    pad = int(np.ceil(margin / cs))
    masks = {}
    for c in classes:
        m = scene.classes == c
        if pad:
            m = ndimage.binary_erosion(m, iterations=pad, border_value=1)
        masks[c] = m
        if not m.any():
            raise ValueError(f"class {CLASS_NAMES.get(c, c)} has no region large enough for a polygon")
    max_side = int(side / cs) if side else int(min(scene.shape) // 4)
    min_side = 4

    def place(c, s):
        ok = _pure_windows(masks[c], s)
        taken = np.zeros_like(masks[c])
        boxes = []
        for _ in range(count_per_class):
            free = ok & ~_window_hits(taken, s)
            cand = np.argwhere(free)
            if len(cand) == 0:
                return None
            iy, ix = cand[rng.integers(len(cand))]
            taken[iy : iy + s, ix : ix + s] = True
            boxes.append((iy, ix))
        return boxes

    s = max_side
    while s >= min_side:
        placed = {c: place(c, s) for c in classes}
        if all(v is not None for v in placed.values()):
            break
        s = int(s * 0.8) if s > 5 else s - 1
    else:
        raise ValueError("no class region large enough for the requested polygons")

    out = []
    x0, y0 = scene.origin
    for c in classes:
        for iy, ix in placed[c]:
            xa, ya = x0 + ix * cs, y0 + iy * cs
            xb, yb = xa + s * cs, ya + s * cs
            poly = np.array([[xa, ya], [xb, ya], [xb, yb], [xa, yb]])
            cells = scene.classes[iy : iy + s, ix : ix + s]
            assert np.all(cells == c), "polygon is not class-pure"
            out.append((poly, int(c)))
    return out


def _window_hits(taken: np.ndarray, side: int) -> np.ndarray:
    """True at top-left corners whose side x side window overlaps ``taken``."""
    ii = np.pad(taken.astype(np.int64).cumsum(0).cumsum(1), ((1, 0), (1, 0)))
    s = ii[side:, side:] - ii[:-side, side:] - ii[side:, :-side] + ii[:-side, :-side]
    return s > 0


def polygon_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def points_in_polygon(points: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Even-odd rule; points exactly on an edge may fall either way."""
    x, y = points[:, 0], points[:, 1]
    inside = np.zeros(len(points), dtype=bool)
    n = len(poly)
    for i in range(n):
        xa, ya = poly[i]
        xb, yb = poly[(i + 1) % n]
        crosses = (ya > y) != (yb > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = xa + (y - ya) * (xb - xa) / (yb - ya)
        inside ^= crosses & (x < xint)
    return inside


def save_polygons(path, polygons) -> None:
    Path(path).write_text(json.dumps(
        [{"class": int(c), "vertices": p.tolist()} for p, c in polygons], indent=1))


def load_polygons(path):
    data = json.loads(Path(path).read_text())
    return [(np.asarray(d["vertices"], dtype=np.float64), int(d["class"])) for d in data]
