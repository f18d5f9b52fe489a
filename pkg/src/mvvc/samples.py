"""Sub-volume extraction, normalization, weakly supervised datasets and
the reshaping used by the correspondence baselines.

A sub-volume is a ``13 x 13 x 16`` tensor: 13 x 13 ground cells, and on
the third axis the two depth slices of each of the 8 views, view-major
(``channel = 2 * view + slice``).  Slice 0 is the cell holding the surface
point, slice 1 the cell directly above it.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, InsufficientDataError
from .geometry import MultiViewVolume
from .scene import LAND, WATER, points_in_polygon
from .sweep import DepthMap

PATCH = 13
HALF = PATCH // 2
N_SLICES = 2
N_VIEWS = 8
N_CHANNELS = N_SLICES * N_VIEWS
SAMPLE_SHAPE = (PATCH, PATCH, N_CHANNELS)
SAMPLE_SIZE = PATCH * PATCH * N_CHANNELS  # 2704

TRAIN, VALIDATION, TEST = 0, 1, 2


class BaselineMode(str, enum.Enum):
    UNRELATED_PATCHES = "unrelated"
    PATCH_MOSAIC = "mosaic"
    FULL_VOLUME = "full"


@dataclass
class SubVolumeSample:
    tensor: np.ndarray
    valid: np.ndarray
    label: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.tensor.shape != self.valid.shape:
            raise ValueError("tensor and validity mask shapes differ")


# ---------------------------------------------------------------------------
# extraction
# ---------------------------------------------------------------------------


def _offsets() -> np.ndarray:
    dx, dy, dz = np.meshgrid(np.arange(-HALF, HALF + 1), np.arange(-HALF, HALF + 1),
                             np.arange(N_SLICES), indexing="ij")
    return np.stack([dx, dy, dz], axis=-1)  # (13, 13, 2, 3)


def extract_points(points: np.ndarray, volume: MultiViewVolume,
                   chunk: int = 2048) -> tuple[np.ndarray, np.ndarray]:
    """Raw (unnormalized) sub-volumes around world points.

    Returns ``(values, valid)``, each ``(N, 13, 13, 2k)``.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    k = volume.k
    n = len(points)
    values = np.zeros((n, PATCH, PATCH, N_SLICES * k))
    valid = np.zeros((n, PATCH, PATCH, N_SLICES * k), dtype=bool)
    off = _offsets()
    for start in range(0, n, chunk):
        p = points[start : start + chunk]
        center = volume.spec.cell_of(p)
        ijk = center[:, None, None, None, :] + off[None]
        s, ok = volume.gather(ijk)  # (m, 13, 13, 2, k)
        m = len(p)
        values[start : start + m] = s.transpose(0, 1, 2, 4, 3).reshape(m, PATCH, PATCH, -1)
        valid[start : start + m] = ok.transpose(0, 1, 2, 4, 3).reshape(m, PATCH, PATCH, -1)
    return values, valid


def extract_subvolume(depthmap: DepthMap, pixel, volume: MultiViewVolume) -> SubVolumeSample:
    r, c = int(pixel[0]), int(pixel[1])
    if not (0 <= r < depthmap.valid.shape[0] and 0 <= c < depthmap.valid.shape[1]):
        raise IndexError(f"pixel {pixel} outside the depth map")
    if not depthmap.valid[r, c]:
        raise ValueError(f"depth map {depthmap.ident} has no valid depth at pixel {pixel}")
    point = depthmap.points(np.array([[r, c]]))[0]
    values, valid = extract_points(point[None], volume)
    return SubVolumeSample(values[0], valid[0], None,
                           {"depthmap": depthmap.ident, "pixel": (r, c), "point": point})


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def normalize_batch(values: np.ndarray, valid: np.ndarray, floor: float = 1e-6):
    """Zero-mean / unit-std over the valid entries of each sample.

    Returns ``(normalized, usable)`` where ``usable`` flags samples with at
    least two valid entries; unusable samples come back all zero.
    """
    values = np.asarray(values, dtype=np.float64)
    axes = tuple(range(1, values.ndim))
    cnt = valid.sum(axis=axes)
    denom = np.maximum(cnt, 1).reshape(-1, *([1] * (values.ndim - 1)))
    mean = np.where(valid, values, 0.0).sum(axis=axes, keepdims=True) / denom
    var = np.where(valid, (values - mean) ** 2, 0.0).sum(axis=axes, keepdims=True) / denom
    std = np.maximum(np.sqrt(var), floor)
    out = np.where(valid, (values - mean) / std, 0.0)
    usable = cnt >= 2
    out[~usable] = 0.0
    return out, usable


def normalize(sample: SubVolumeSample) -> SubVolumeSample:
    if sample.valid.sum() < 2:
        raise ValueError("cannot normalize a sub-volume with fewer than two valid entries")
    out, _ = normalize_batch(sample.tensor[None], sample.valid[None])
    return SubVolumeSample(out[0], sample.valid.copy(), sample.label, dict(sample.meta))


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------


def reshape_baseline(x: np.ndarray, mode: BaselineMode | str) -> np.ndarray:
    """Rearrange one ``(13, 13, 16)`` sample (or a batch) for a baseline.

    * unrelated -> ``(16, 13, 13)`` independent patches (batch: ``(N, 16, 13, 13)``)
    * mosaic    -> ``(52, 52)`` image, slice ``t`` at tile ``(t // 4, t % 4)``
    * full      -> unchanged
    """
    mode = BaselineMode(mode)
    if isinstance(x, SubVolumeSample):
        x = x.tensor
    x = np.asarray(x)
    batched = x.ndim == 4
    xb = x if batched else x[None]
    n, px, py, ch = xb.shape
    if mode is BaselineMode.FULL_VOLUME:
        out = xb
    elif mode is BaselineMode.UNRELATED_PATCHES:
        out = xb.transpose(0, 3, 1, 2)
    else:
        side = int(round(np.sqrt(ch)))
        if side * side != ch:
            raise ValueError(f"{ch} channels do not tile a square mosaic")
        out = (xb.reshape(n, px, py, side, side).transpose(0, 3, 1, 4, 2)
               .reshape(n, side * px, side * py))
    return out if batched else out[0]


def split_mosaic(mosaic: np.ndarray, patch: int = PATCH) -> np.ndarray:
    """Inverse of the mosaic layout: ``(52, 52)`` -> ``(13, 13, 16)``."""
    m = np.asarray(mosaic)
    side = m.shape[0] // patch
    return m.reshape(side, patch, side, patch).transpose(1, 3, 0, 2).reshape(patch, patch, side * side)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


_DS_MAGIC = b"MVVC-DS1"


@dataclass
class Dataset:
    X: np.ndarray              # (N, 13, 13, 16) normalized
    valid: np.ndarray          # (N, 13, 13, 16) bool
    y: np.ndarray              # (N,) int64 class index
    split: np.ndarray          # (N,) TRAIN / VALIDATION / TEST
    source: np.ndarray | None = None   # (N, 3) depthmap id, row, col
    points: np.ndarray | None = None   # (N, 3) world points

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, which: int) -> "Dataset":
        m = self.split == which
        return Dataset(self.X[m], self.valid[m], self.y[m], self.split[m],
                       None if self.source is None else self.source[m],
                       None if self.points is None else self.points[m])

    def class_histogram(self) -> dict[int, int]:
        labels, counts = np.unique(self.y, return_counts=True)
        return {int(l): int(c) for l, c in zip(labels, counts)}

    def split_counts(self) -> dict[str, int]:
        return {"train": int(np.sum(self.split == TRAIN)),
                "validation": int(np.sum(self.split == VALIDATION)),
                "test": int(np.sum(self.split == TEST))}

    def permute_views(self, order: Sequence[int]) -> "Dataset":
        """Reorder the view axis consistently (both slices follow their view)."""
        order = np.asarray(order)
        idx = (2 * order[:, None] + np.arange(N_SLICES)[None]).ravel()
        return Dataset(self.X[..., idx], self.valid[..., idx], self.y, self.split,
                       self.source, self.points)

    def save(self, path) -> None:
        n = len(self)
        dims = self.X.shape[1:]
        nbits = int(np.prod(dims))
        rec = np.dtype([("label", "u1"), ("split", "u1"), ("values", "<f4", (nbits,)),
                        ("valid", "u1", ((nbits + 7) // 8,))])
        arr = np.zeros(n, dtype=rec)
        arr["label"] = self.y
        arr["split"] = self.split
        arr["values"] = self.X.reshape(n, -1)
        arr["valid"] = np.packbits(self.valid.reshape(n, -1), axis=1)
        with open(path, "wb") as fh:
            fh.write(_DS_MAGIC)
            fh.write(struct.pack("<4I", n, *dims))
            fh.write(arr.tobytes())

    @classmethod
    def load(cls, path) -> "Dataset":
        data = Path(path).read_bytes()
        if data[:8] != _DS_MAGIC:
            raise FormatError(f"{path}: bad dataset magic {data[:8]!r}")
        try:
            n, d0, d1, d2 = struct.unpack_from("<4I", data, 8)
        except struct.error as exc:
            raise FormatError(f"{path}: truncated dataset header") from exc
        nbits = d0 * d1 * d2
        rec = np.dtype([("label", "u1"), ("split", "u1"), ("values", "<f4", (nbits,)),
                        ("valid", "u1", ((nbits + 7) // 8,))])
        if len(data) - 24 != n * rec.itemsize:
            raise FormatError(f"{path}: payload size does not match {n} samples")
        arr = np.frombuffer(data, dtype=rec, count=n, offset=24)
        valid = np.unpackbits(arr["valid"], axis=1, count=nbits).astype(bool)
        return cls(arr["values"].reshape(n, d0, d1, d2).astype(np.float32),
                   valid.reshape(n, d0, d1, d2), arr["label"].astype(np.int64),
                   arr["split"].astype(np.int64))


def _stack_datasets(parts: list[Dataset]) -> Dataset:
    cat = lambda name: None if any(getattr(p, name) is None for p in parts) else np.concatenate(
        [getattr(p, name) for p in parts])
    return Dataset(np.concatenate([p.X for p in parts]), np.concatenate([p.valid for p in parts]),
                   np.concatenate([p.y for p in parts]), np.concatenate([p.split for p in parts]),
                   cat("source"), cat("points"))


def build_dataset(polygons, depthmaps: Sequence[DepthMap], volume: MultiViewVolume,
                  samples_per_class: int, seed: int = 0,
                  classes: tuple[int, int] = (LAND, WATER),
                  val_fraction: float = 0.1, test_fraction: float = 0.0,
                  min_valid_fraction: float = 0.5, dtype=np.float32) -> Dataset:
    """Uniformly sample depth pixels inside pure-class polygons.

    ``classes[i]`` maps to label ``i``.  Each class gets exactly
    ``samples_per_class`` samples; the split is stratified so both classes
    contribute equally to every split.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 57]))
    pix_all, pts_all, ids_all = [], [], []
    for dm in depthmaps:
        pix = np.argwhere(dm.valid)
        pix_all.append(pix)
        pts_all.append(dm.points(pix))
        ids_all.append(np.full(len(pix), dm.ident))
    pix_all = np.concatenate(pix_all)
    pts_all = np.concatenate(pts_all)
    ids_all = np.concatenate(ids_all)

    n_test = int(round(test_fraction * samples_per_class))
    n_val = int(round(val_fraction * samples_per_class))
    parts = []
    for label, cls_id in enumerate(classes):
        inside = np.zeros(len(pts_all), dtype=bool)
        for poly, pc in polygons:
            if pc == cls_id:
                inside |= points_in_polygon(pts_all[:, :2], poly)
        cand = np.nonzero(inside)[0]
        order = rng.permutation(cand)
        keep_X, keep_V, keep_idx = [], [], []
        got = 0
        pos = 0
        while got < samples_per_class and pos < len(order):
            batch = order[pos : pos + max(256, 2 * (samples_per_class - got))]
            pos += len(batch)
            raw, ok = extract_points(pts_all[batch], volume)
            frac = ok.mean(axis=(1, 2, 3))
            normed, usable = normalize_batch(raw, ok)
            good = usable & (frac >= min_valid_fraction)
            take = np.nonzero(good)[0][: samples_per_class - got]
            keep_X.append(normed[take].astype(dtype))
            keep_V.append(ok[take])
            keep_idx.append(batch[take])
            got += len(take)
        if got < samples_per_class:
            raise InsufficientDataError(
                f"class {cls_id}: only {got} usable depth pixels inside its polygons "
                f"({len(cand)} candidates), {samples_per_class} requested")
        idx = np.concatenate(keep_idx)
        split = np.full(samples_per_class, TRAIN)
        split[:n_test] = TEST
        split[n_test : n_test + n_val] = VALIDATION
        split = rng.permutation(split)
        parts.append(Dataset(np.concatenate(keep_X), np.concatenate(keep_V),
                             np.full(samples_per_class, label, dtype=np.int64), split,
                             np.stack([ids_all[idx], pix_all[idx, 0], pix_all[idx, 1]], axis=1),
                             pts_all[idx]))
    ds = _stack_datasets(parts)
    perm = rng.permutation(len(ds))
    return Dataset(ds.X[perm], ds.valid[perm], ds.y[perm], ds.split[perm],
                   ds.source[perm], ds.points[perm])
