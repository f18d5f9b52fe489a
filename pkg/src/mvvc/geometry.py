"""Pinhole cameras, image sampling and the multi-view voxel volume.

World frame is z-up with z = altitude in meters.  Pixel ``(u, v)`` is
column ``u``, row ``v``; integer coordinates fall on pixel centers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError

__all__ = [
    "PinholeCamera",
    "VoxelGridSpec",
    "MultiViewVolume",
    "project",
    "project_points",
    "sample_image",
    "bilinear",
    "fill_multiview_volume",
    "select_views",
    "save_cameras",
    "load_cameras",
    "look_at",
]


@dataclass(frozen=True)
class PinholeCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # world -> camera
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-9, rtol=0):
            raise ValueError("rotation is not orthonormal")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def optical_axis(self) -> np.ndarray:
        """Viewing direction in world coordinates."""
        return self.rotation[2].copy()

    def angle_to_vertical(self) -> float:
        return float(np.arccos(np.clip(-self.optical_axis[2], -1.0, 1.0)))

    def rays(self, u, v) -> np.ndarray:
        """World-frame ray directions scaled so the optical-axis component is 1."""
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        dc = np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)
        return dc @ self.rotation

    def unproject(self, u, v, depth) -> np.ndarray:
        return self.center + self.rays(u, v) * np.asarray(depth, dtype=np.float64)[..., None]

    def scaled(self, factor: int) -> "PinholeCamera":
        """Camera for an image downsampled by an integer ``factor`` (box filter)."""
        return PinholeCamera(
            fx=self.fx / factor,
            fy=self.fy / factor,
            cx=(self.cx + 0.5) / factor - 0.5,
            cy=(self.cy + 0.5) / factor - 0.5,
            rotation=self.rotation,
            translation=self.translation,
            width=self.width // factor,
            height=self.height // factor,
        )

    def to_json(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "rotation": [float(x) for x in self.rotation.ravel()],
            "translation": [float(x) for x in self.translation],
        }

    @classmethod
    def from_json(cls, d: dict) -> "PinholeCamera":
        try:
            return cls(
                fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]),
                rotation=np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3),
                translation=np.asarray(d["translation"], dtype=np.float64).reshape(3),
                width=int(d["width"]), height=int(d["height"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad camera record: {exc}") from exc


def look_at(center, target, fx, fy, width, height) -> PinholeCamera:
    """Camera at ``center`` aimed at ``target``; image rows run toward -y (north up)."""
    c = np.asarray(center, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - c
    f /= np.linalg.norm(f)
    x = np.cross(f, [0.0, 1.0, 0.0])
    x /= np.linalg.norm(x)
    y = np.cross(f, x)
    r = np.stack([x, y, f])
    return PinholeCamera(fx, fy, (width - 1) / 2.0, (height - 1) / 2.0, r, -r @ c, width, height)


def project_points(cam: PinholeCamera, points: np.ndarray):
    """Vectorized projection; returns ``(u, v, depth, in_view)`` arrays."""
    p = np.asarray(points, dtype=np.float64)
    pc = p @ cam.rotation.T + cam.translation
    depth = pc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * pc[..., 0] / depth + cam.cx
        v = cam.fy * pc[..., 1] / depth + cam.cy
    in_view = (depth > 0) & (u >= 0) & (u <= cam.width - 1) & (v >= 0) & (v <= cam.height - 1)
    return u, v, depth, in_view


def project(cam: PinholeCamera, p) -> tuple[float, float, float] | None:
    """Project one point; ``None`` when it is behind the camera or off the image."""
    u, v, d, ok = project_points(cam, np.asarray(p, dtype=np.float64)[None])
    if not ok[0]:
        return None
    return float(u[0]), float(v[0]), float(d[0])


def bilinear(image: np.ndarray, u, v) -> np.ndarray:
    """Bilinear lookup for coordinates already known to be inside the image."""
    h, w = image.shape
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    u0 = np.clip(np.floor(u).astype(np.int64), 0, max(w - 2, 0))
    v0 = np.clip(np.floor(v).astype(np.int64), 0, max(h - 2, 0))
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    a = u - u0
    b = v - v0
    top = image[v0, u0] * (1 - a) + image[v0, u1] * a
    bot = image[v1, u0] * (1 - a) + image[v1, u1] * a
    return top * (1 - b) + bot * b


def sample_image(image: np.ndarray, u: float, v: float) -> float:
    h, w = image.shape
    if not (0 <= u <= w - 1 and 0 <= v <= h - 1):
        raise ValueError(f"sample ({u}, {v}) outside image of size {w}x{h}")
    return float(bilinear(image, u, v))


@dataclass(frozen=True)
class VoxelGridSpec:
    origin: tuple[float, float, float]
    cell_size: float = 0.25
    nx: int = 1
    ny: int = 1
    nz: int = 1

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        if self.cell_size <= 0:
            raise ValueError("cell size must be positive")
        if min(self.nx, self.ny, self.nz) < 1:
            raise ValueError("grid extents must be >= 1")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, self.nz)

    def centers(self, ijk: np.ndarray) -> np.ndarray:
        return np.asarray(self.origin) + (np.asarray(ijk, dtype=np.float64) + 0.5) * self.cell_size

    def cell_of(self, points: np.ndarray) -> np.ndarray:
        return np.floor((np.asarray(points) - np.asarray(self.origin)) / self.cell_size).astype(np.int64)

    def contains(self, ijk: np.ndarray) -> np.ndarray:
        ijk = np.asarray(ijk)
        return np.all((ijk >= 0) & (ijk < np.asarray(self.shape)), axis=-1)

    def z_levels(self) -> np.ndarray:
        return self.origin[2] + (np.arange(self.nz) + 0.5) * self.cell_size

    def to_json(self) -> dict:
        return {"origin": list(self.origin), "cell_size": self.cell_size,
                "nx": self.nx, "ny": self.ny, "nz": self.nz}


def select_views(cameras: Sequence[PinholeCamera], k: int = 8) -> list[int]:
    """Indices of the ``k`` cameras closest to nadir (stable on ties)."""
    angles = [c.angle_to_vertical() for c in cameras]
    order = sorted(range(len(cameras)), key=lambda i: (angles[i], i))
    return sorted(order[:k])


class MultiViewVolume:
    """Per-cell grayscale samples from ``k`` views, with validity flags.

    A volume is either dense (``samples``/``valid`` arrays of shape
    ``(nx, ny, nz, k)``) or lazy, in which case projections are computed on
    demand by :meth:`gather` only for the cells that are asked for.
    """

    def __init__(self, spec: VoxelGridSpec, cameras, images, samples=None, valid=None):
        if len(cameras) != len(images):
            raise ValueError("need one image per camera")
        if len(cameras) < 2:
            raise ValueError(f"a multi-view volume needs k >= 2 views, got {len(cameras)}")
        self.spec = spec
        self.cameras = list(cameras)
        self.images = [np.asarray(im, dtype=np.float64) for im in images]
        self.samples = samples
        self.valid = valid

    @property
    def k(self) -> int:
        return len(self.cameras)

    @property
    def dense(self) -> bool:
        return self.samples is not None

    def gather(self, ijk: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Samples and validity for integer cell indices ``(..., 3)``.

        Cells outside the grid come back invalid in every view.
        """
        ijk = np.asarray(ijk, dtype=np.int64)
        inside = self.spec.contains(ijk)
        out = np.zeros((*ijk.shape[:-1], self.k))
        ok = np.zeros((*ijk.shape[:-1], self.k), dtype=bool)
        if self.dense:
            idx = np.clip(ijk, 0, np.asarray(self.spec.shape) - 1)
            out[...] = self.samples[idx[..., 0], idx[..., 1], idx[..., 2]]
            ok[...] = self.valid[idx[..., 0], idx[..., 1], idx[..., 2]] & inside[..., None]
            out[~ok] = 0.0
            return out, ok
        centers = self.spec.centers(ijk)
        for v, (cam, img) in enumerate(zip(self.cameras, self.images)):
            u, vv, _, in_view = project_points(cam, centers)
            m = in_view & inside
            out[..., v][m] = bilinear(img, u[m], vv[m])
            ok[..., v] = m
        return out, ok


def fill_multiview_volume(spec: VoxelGridSpec, cameras, images) -> MultiViewVolume:
    """Materialize every cell of ``spec`` in every view."""
    if len(cameras) != len(images):
        raise ValueError("need one image per camera")
    if len(cameras) < 2:
        raise ValueError(f"a multi-view volume needs k >= 2 views, got {len(cameras)}")
    lazy = MultiViewVolume(spec, cameras, images)
    ijk = np.stack(np.meshgrid(np.arange(spec.nx), np.arange(spec.ny), np.arange(spec.nz),
                               indexing="ij"), axis=-1)
    samples, valid = lazy.gather(ijk)
    return MultiViewVolume(spec, cameras, images, samples=samples, valid=valid)


def save_cameras(path, cameras: Sequence[PinholeCamera]) -> None:
    Path(path).write_text(json.dumps([c.to_json() for c in cameras], indent=1))


def load_cameras(path) -> list[PinholeCamera]:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid pose JSON: {exc}") from exc
    if not isinstance(data, list):
        raise FormatError(f"{path}: pose file must hold a JSON array")
    return [PinholeCamera.from_json(d) for d in data]
