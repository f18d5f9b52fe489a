"""Per-point class probabilities fused into a ground-plane water mask."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, InsufficientDataError
from .rasterio import read_pfm, read_pgm, write_pfm, write_pgm

EPS = 1e-6
MASK_LAND, MASK_WATER, UNOBSERVED = 0, 1, -1
PGM_VALUES = {MASK_LAND: 0, MASK_WATER: 255, UNOBSERVED: 128}


def logit(p: np.ndarray, eps: float = EPS) -> np.ndarray:
    p = np.clip(np.asarray(p, dtype=np.float64), eps, 1.0 - eps)
    return np.log(p) - np.log1p(-p)


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _check_probs(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
        raise ValueError("probabilities must lie in [0, 1]")
    return p


def fuse(probabilities: Sequence[float], eps: float = EPS) -> float:
    """Independent-evidence fusion ``prod p / (prod p + prod (1 - p))``.

    Evaluated as a sum of logits so long lists neither underflow nor depend
    on their order (inputs are summed in sorted order).
    """
    p = _check_probs(np.atleast_1d(probabilities))
    if p.size == 0:
        raise ValueError("cannot fuse an empty list of probabilities")
    return float(sigmoid(np.sum(np.sort(logit(p, eps)))))


def fuse_product(probabilities: Sequence[float]) -> float:
    """The literal product form (reference implementation, underflows for long lists)."""
    p = _check_probs(np.atleast_1d(probabilities))
    if p.size == 0:
        raise ValueError("cannot fuse an empty list of probabilities")
    a = np.prod(p)
    b = np.prod(1.0 - p)
    return float(a / (a + b))


@dataclass
class ClassifiedPointCloud:
    points: np.ndarray     # (N, 3) meters
    prob: np.ndarray       # (N,) water probability
    source: int = 0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.prob = _check_probs(np.asarray(self.prob).reshape(-1))
        if len(self.prob) != len(self.points):
            raise ValueError("one probability per point is required")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("points must be finite")

    def __len__(self) -> int:
        return len(self.prob)


@dataclass(frozen=True)
class GridSpec2D:
    origin: tuple[float, float] = (0.0, 0.0)
    cell_size: float = 0.5
    nx: int = 1
    ny: int = 1

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        if self.cell_size <= 0 or self.nx < 1 or self.ny < 1:
            raise ValueError("grid needs a positive cell size and extents")

    @classmethod
    def covering(cls, bounds, cell_size: float = 0.5) -> "GridSpec2D":
        x0, y0, x1, y1 = bounds
        return cls((x0, y0), cell_size, int(np.ceil((x1 - x0) / cell_size - 1e-9)),
                   int(np.ceil((y1 - y0) / cell_size - 1e-9)))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    def cell_of(self, x, y):
        ix = np.floor((np.asarray(x) - self.origin[0]) / self.cell_size).astype(np.int64)
        iy = np.floor((np.asarray(y) - self.origin[1]) / self.cell_size).astype(np.int64)
        return ix, iy

    def centers(self):
        """``(X, Y)`` arrays of cell centers shaped like the grid."""
        xs = self.origin[0] + (np.arange(self.nx) + 0.5) * self.cell_size
        ys = self.origin[1] + (np.arange(self.ny) + 0.5) * self.cell_size
        return np.meshgrid(xs, ys)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d) -> "GridSpec2D":
        return cls(tuple(d["origin"]), float(d["cell_size"]), int(d["nx"]), int(d["ny"]))


@dataclass
class Mask2D:
    grid: GridSpec2D
    prob: np.ndarray       # (ny, nx) fused water probability, NaN if unobserved
    label: np.ndarray      # (ny, nx) int8 MASK_LAND / MASK_WATER / UNOBSERVED
    count: np.ndarray      # (ny, nx) observations per cell
    n_outside: int = 0

    @property
    def water(self) -> np.ndarray:
        return self.label == MASK_WATER

    @property
    def observed(self) -> np.ndarray:
        return self.count > 0

    def save(self, stem) -> None:
        """``stem.pgm`` labels, ``stem.pfm`` probabilities, ``stem.json`` grid."""
        stem = Path(stem)
        img = np.full(self.label.shape, PGM_VALUES[UNOBSERVED], dtype=np.uint8)
        img[self.label == MASK_LAND] = PGM_VALUES[MASK_LAND]
        img[self.label == MASK_WATER] = PGM_VALUES[MASK_WATER]
        write_pgm(stem.with_suffix(".pgm"), img, 255)
        write_pfm(stem.with_suffix(".pfm"), self.prob.astype(np.float32))
        meta = {"grid": self.grid.to_json(), "row_order": "y_ascending",
                "values": {"land": 0, "water": 255, "unobserved": 128},
                "n_outside": self.n_outside, "n_points": int(self.count.sum()),
                "count": self.count.astype(int).tolist()}
        stem.with_suffix(".json").write_text(json.dumps(meta))

    @classmethod
    def load(cls, stem) -> "Mask2D":
        stem = Path(stem)
        try:
            meta = json.loads(stem.with_suffix(".json").read_text())
            grid = GridSpec2D.from_json(meta["grid"])
        except (OSError, KeyError, json.JSONDecodeError) as exc:
            raise FormatError(f"{stem}.json: bad mask sidecar: {exc}") from exc
        img = read_pgm(stem.with_suffix(".pgm"))
        prob = read_pfm(stem.with_suffix(".pfm")).astype(np.float64)
        label = np.full(img.shape, UNOBSERVED, dtype=np.int8)
        label[img == 0] = MASK_LAND
        label[img == 255] = MASK_WATER
        count = np.asarray(meta["count"], dtype=np.int64)
        if img.shape != grid.shape or prob.shape != grid.shape or count.shape != grid.shape:
            raise FormatError(f"{stem}: raster shapes disagree with the grid")
        return cls(grid, prob, label, count, int(meta.get("n_outside", 0)))


def build_mask(clouds: Sequence[ClassifiedPointCloud], grid: GridSpec2D,
               eps: float = EPS) -> Mask2D:
    """Fuse every point's probability into its ground column and threshold.

    A cell is WATER only if the fused probability is strictly above 0.5.
    """
    pts = np.concatenate([c.points for c in clouds]) if clouds else np.zeros((0, 3))
    prob = np.concatenate([c.prob for c in clouds]) if clouds else np.zeros(0)
    ix, iy = grid.cell_of(pts[:, 0], pts[:, 1])
    inside = (ix >= 0) & (ix < grid.nx) & (iy >= 0) & (iy < grid.ny)
    n_out = int(np.sum(~inside))
    if not inside.any():
        raise InsufficientDataError(f"none of the {len(pts)} points fall inside the mask grid")
    col = iy[inside] * grid.nx + ix[inside]
    z = logit(prob[inside], eps)
    # canonical order per column makes the float sum independent of input order
    order = np.lexsort((z, col))
    n_cells = grid.nx * grid.ny
    total = np.bincount(col[order], weights=z[order], minlength=n_cells)
    count = np.bincount(col, minlength=n_cells)
    fused = np.where(count > 0, sigmoid(total), np.nan)
    label = np.where(count == 0, UNOBSERVED, np.where(fused > 0.5, MASK_WATER, MASK_LAND))
    return Mask2D(grid, fused.reshape(grid.shape), label.astype(np.int8).reshape(grid.shape),
                  count.reshape(grid.shape), n_out)


def resample_classes(classes: np.ndarray, cell_size: float, origin, grid: GridSpec2D,
                     target_class: int) -> np.ndarray:
    """Boolean raster on ``grid``: True where ``target_class`` covers more than
    half of the cell (fine raster indexed ``[iy, ix]``)."""
    ratio = grid.cell_size / cell_size
    r = int(round(ratio))
    m = (np.asarray(classes) == target_class).astype(np.float64)
    if abs(ratio - r) < 1e-9 and r >= 1 and np.allclose(origin, grid.origin):
        ny, nx = grid.shape
        m = np.pad(m, ((0, max(0, ny * r - m.shape[0])), (0, max(0, nx * r - m.shape[1]))))
        frac = m[: ny * r, : nx * r].reshape(ny, r, nx, r).mean(axis=(1, 3))
        return frac > 0.5
    X, Y = grid.centers()
    jx = np.clip(np.floor((X - origin[0]) / cell_size).astype(int), 0, m.shape[1] - 1)
    jy = np.clip(np.floor((Y - origin[1]) / cell_size).astype(int), 0, m.shape[0] - 1)
    return m[jy, jx] > 0.5


def water_iou(mask: Mask2D, truth: np.ndarray) -> float:
    """IoU of predicted water (unobserved counts as not water) against truth."""
    pred = mask.water
    truth = np.asarray(truth, dtype=bool)
    union = np.sum(pred | truth)
    if union == 0:
        return 1.0
    return float(np.sum(pred & truth) / union)
