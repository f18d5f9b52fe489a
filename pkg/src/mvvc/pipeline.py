"""Stage implementations behind the ``mvvc`` commands.

Every stage reads its inputs from the output directory, writes its outputs
there and records both in ``manifest.json`` with content hashes.  A stage
whose configuration and inputs are unchanged is skipped.

Layout::

    scenes/s{k}/        synth: scene.json, heightfield.pfm, classes.pgm, poses.json,
                               view_{i}.pgm, gt_depth_{i}.pfm, gt_class_{i}.pgm,
                               polygons.json (training scenes)
                        sweep: depth_{i}.pfm, labels_{i}.pgm, depth_{i}.json
    dataset.bin         extract
    model_{mode}.bin    train (+ .json sidecar, curves_{mode}.csv, experiments.json)
    prob_{i}.pfm        classify (target scene s0)
    mask.pgm/.pfm/.json mask
    water.pfm/.json     fill (+ fill_report.json)
    eval_report.json    eval (+ eval_report.txt)
"""

from __future__ import annotations

import hashlib
import json
import logging
import platform
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .config import PipelineConfig
from .errors import FormatError, InsufficientDataError, MissingArtifactError
from .geometry import MultiViewVolume, VoxelGridSpec, load_cameras, save_cameras, select_views
from .mask import ClassifiedPointCloud, GridSpec2D, Mask2D, build_mask, resample_classes, water_iou
from .network import load_model, predict, save_model, train
from .rasterio import ensure_dir, read_pfm, read_pgm, write_gray, write_pfm, write_pgm
from .samples import N_CHANNELS, Dataset, build_dataset, extract_points, normalize_batch
from .scene import WATER, default_rig, generate_scene, load_polygons, make_label_polygons, render_views, save_polygons
from .sweep import DepthMap, SweepConfig, coarse_to_fine_sweep
from .waterfill import HeightField, fill_water, tile_and_feather

log = logging.getLogger("mvvc")

STAGES = ("synth", "sweep", "extract", "train", "classify", "mask", "fill", "eval")
UPSTREAM = {
    "synth": (),
    "sweep": ("synth",),
    "extract": ("synth", "sweep"),
    "train": ("extract",),
    "classify": ("synth", "sweep", "train"),
    "mask": ("synth", "sweep", "classify"),
    "fill": ("synth", "sweep", "mask"),
    "eval": ("synth", "sweep", "extract", "train", "mask", "fill"),
}
SECTIONS = {
    "synth": ("seed", "n_train_scenes", "scene", "render", "extract.polygons_per_class",
              "extract.polygon_side"),
    "sweep": ("sweep",),
    "extract": ("extract",),
    "train": ("network", "schedule", "train"),
    "classify": ("classify", "extract.min_valid_fraction"),
    "mask": ("mask",),
    "fill": ("fill",),
    "eval": (),
}
GT_MISS = 255
N_VIEWS = N_CHANNELS // 2


def file_hash(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class Workspace:
    """Output directory plus its manifest."""

    def __init__(self, root, config: PipelineConfig, threads: int = 1):
        self.root = ensure_dir(root)
        self.config = config
        self.threads = max(1, int(threads))
        self.manifest_path = self.root / "manifest.json"
        if self.manifest_path.exists():
            try:
                self.manifest = json.loads(self.manifest_path.read_text())
            except json.JSONDecodeError as exc:
                raise FormatError(f"{self.manifest_path}: corrupt manifest: {exc}") from exc
        else:
            self.manifest = {"stages": {}, "test_accesses": {}}

    def path(self, rel: str) -> Path:
        return self.root / rel

    def scene_dir(self, k: int) -> Path:
        return ensure_dir(self.root / "scenes" / f"s{k}")

    @property
    def n_scenes(self) -> int:
        return 1 + self.config.n_train_scenes

    def training_scenes(self) -> list[int]:
        return list(range(1, self.n_scenes)) or [0]

    def save_manifest(self) -> None:
        self.manifest_path.write_text(json.dumps(self.manifest, indent=1, sort_keys=True))

    # -- freshness ----------------------------------------------------------

    def _outputs_intact(self, record: dict) -> bool:
        for rel, digest in record.get("outputs", {}).items():
            p = self.root / rel
            if not p.exists() or file_hash(p) != digest:
                return False
        return True

    def require(self, stage: str) -> None:
        for up in UPSTREAM[stage]:
            rec = self.manifest["stages"].get(up)
            if rec is None or not self._outputs_intact(rec):
                raise MissingArtifactError(
                    f"stage '{stage}' needs the outputs of '{up}'; run `mvvc {up}` first", up)

    def stage_key(self, stage: str) -> str:
        h = hashlib.sha256(self.config.hash(*SECTIONS[stage]).encode() if SECTIONS[stage] else b"")
        for up in UPSTREAM[stage]:
            h.update(json.dumps(self.manifest["stages"][up]["outputs"], sort_keys=True).encode())
        return h.hexdigest()

    def fresh(self, stage: str, key: str) -> bool:
        rec = self.manifest["stages"].get(stage)
        return rec is not None and rec.get("key") == key and self._outputs_intact(rec)

    def record(self, stage: str, key: str, outputs: list[Path]) -> None:
        outs = {str(p.relative_to(self.root)): file_hash(p) for p in sorted(outputs)}
        self.manifest["stages"][stage] = {"key": key, "outputs": outs}
        self.save_manifest()


def run_stage(stage: str, ws: Workspace, force: bool = False) -> bool:
    """Run one stage unless fresh.  Returns True when work was done."""
    ws.require(stage)
    key = ws.stage_key(stage)
    if not force and ws.fresh(stage, key):
        log.info("%s: up to date, skipping", stage)
        return False
    outputs = STAGE_FUNCS[stage](ws)
    ws.record(stage, key, outputs)
    log.info("%s: wrote %d file(s)", stage, len(outputs))
    return True


# ---------------------------------------------------------------------------
# helpers shared by stages
# ---------------------------------------------------------------------------


def _scene_seed(cfg: PipelineConfig, k: int) -> int:
    return int(cfg.seed) + 7919 * k


def _pmap(ws: Workspace, fn: Callable, items) -> list:
    items = list(items)
    if ws.threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(ws.threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _load_scene_meta(ws: Workspace, k: int) -> dict:
    return json.loads((ws.scene_dir(k) / "scene.json").read_text())


def _load_views(ws: Workspace, k: int):
    d = ws.scene_dir(k)
    cams = load_cameras(d / "poses.json")
    imgs = [read_pgm(d / f"view_{i}.pgm", normalize=True) for i in range(len(cams))]
    return cams, imgs


def _sweep_config(cfg: PipelineConfig, meta: dict) -> SweepConfig:
    s = cfg.sweep
    z0 = s.z_min if s.z_min is not None else np.floor(meta["z_range"][0] / s.plane_step) * s.plane_step - s.z_margin
    z1 = s.z_max if s.z_max is not None else np.ceil(meta["z_range"][1] / s.plane_step) * s.plane_step + s.z_margin
    n = int(round((z1 - z0) / s.plane_step)) + 1
    x0, y0, x1, y1 = meta["extent_xy"]
    return SweepConfig(z_min=float(z0), z_max=float(z0 + (n - 1) * s.plane_step), n_planes=n,
                       k_drop=s.k_drop, lambda_smooth=s.lambda_smooth, truncation=s.truncation,
                       max_cost=s.max_cost, window=s.window, levels=s.levels, band=s.band,
                       max_cycles=s.max_cycles, xy_bounds=(x0, y0, x1, y1))


def _load_depthmaps(ws: Workspace, k: int) -> list[DepthMap]:
    d = ws.scene_dir(k)
    cams = load_cameras(d / "poses.json")
    out = []
    for i, cam in enumerate(cams):
        meta = json.loads((d / f"depth_{i}.json").read_text())
        depth = read_pfm(d / f"depth_{i}.pfm").astype(np.float64)
        labels = read_pgm(d / f"labels_{i}.pgm").astype(np.int64)
        planes = np.linspace(meta["z_min"], meta["z_max"], meta["n_planes"])
        valid = np.isfinite(depth)
        out.append(DepthMap(cam, planes, labels, depth, valid, meta["n_scored"], meta["energy"], i))
    return out


def _volume(ws: Workspace, k: int, cams, imgs) -> MultiViewVolume:
    meta = _load_scene_meta(ws, k)
    ex = ws.config.extract
    x0, y0, x1, y1 = meta["extent_xy"]
    z0, z1 = meta["z_range"]
    cs = ex.cell_size
    spec = VoxelGridSpec((x0, y0, z0 - ex.z_pad), cs, int(np.ceil((x1 - x0) / cs)),
                         int(np.ceil((y1 - y0) / cs)), int(np.ceil((z1 - z0 + 2 * ex.z_pad) / cs)))
    if len(cams) < N_VIEWS:
        raise InsufficientDataError(f"sub-volumes need {N_VIEWS} views, scene {k} has {len(cams)}")
    pick = select_views(cams, N_VIEWS)
    return MultiViewVolume(spec, [cams[i] for i in pick], [imgs[i] for i in pick])


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def stage_synth(ws: Workspace) -> list[Path]:
    cfg = ws.config
    r = cfg.render
    outputs = []
    for k in range(ws.n_scenes):
        seed = _scene_seed(cfg, k)
        scene = generate_scene(cfg.scene, seed)
        cams = default_rig(scene, r.n_cameras, r.altitude, tuple(r.tilt_range), r.image_size, r.gsd)
        views = render_views(scene, cams, seed, ws.threads)
        d = ws.scene_dir(k)
        meta = scene.metadata()
        meta.update(role="target" if k == 0 else "training", z_range=list(scene.z_range()),
                    extent_xy=list(scene.extent_xy), water_fraction=scene.water_fraction())
        (d / "scene.json").write_text(json.dumps(meta, indent=1))
        write_pfm(d / "heightfield.pfm", scene.heightfield)
        write_pgm(d / "classes.pgm", scene.classes, 255)
        write_pgm(d / "bodies.pgm", scene.bodies, 255 if scene.bodies.max() < 256 else 65535)
        save_cameras(d / "poses.json", cams)
        outputs += [d / "scene.json", d / "heightfield.pfm", d / "classes.pgm", d / "bodies.pgm",
                    d / "poses.json"]
        for i, v in enumerate(views):
            write_gray(d / f"view_{i}.pgm", v.image, 16)
            write_pfm(d / f"gt_depth_{i}.pfm", v.gt_depth)
            write_pgm(d / f"gt_class_{i}.pgm", np.where(v.gt_class < 0, GT_MISS, v.gt_class.astype(np.int64)), 255)
            outputs += [d / f"view_{i}.pgm", d / f"gt_depth_{i}.pfm", d / f"gt_class_{i}.pgm"]
        if k in ws.training_scenes():
            polys = make_label_polygons(scene, cfg.extract.polygons_per_class, side=cfg.extract.polygon_side,
                                        seed=seed)
            save_polygons(d / "polygons.json", polys)
            outputs.append(d / "polygons.json")
        log.info("synth: scene %d (seed %d) water %.3f, %d views", k, seed, scene.water_fraction(), len(views))
    return outputs


def stage_sweep(ws: Workspace) -> list[Path]:
    outputs = []
    for k in range(ws.n_scenes):
        meta = _load_scene_meta(ws, k)
        cams, imgs = _load_views(ws, k)
        scfg = _sweep_config(ws.config, meta)
        d = ws.scene_dir(k)

        def one(i):
            return i, coarse_to_fine_sweep(i, cams, imgs, scfg, ident=i)

        for i, dm in _pmap(ws, one, range(len(cams))):
            write_pfm(d / f"depth_{i}.pfm", np.where(dm.valid, dm.depth, np.nan))
            write_pgm(d / f"labels_{i}.pgm", dm.labels, 65535)
            (d / f"depth_{i}.json").write_text(json.dumps({
                "ident": i, "z_min": scfg.z_min, "z_max": scfg.z_max, "n_planes": scfg.n_planes,
                "n_scored": int(dm.n_scored), "energy": float(dm.energy),
                "valid_fraction": float(dm.valid.mean())}, indent=1))
            outputs += [d / f"depth_{i}.pfm", d / f"labels_{i}.pgm", d / f"depth_{i}.json"]
            log.info("sweep: scene %d view %d valid %.3f", k, i, dm.valid.mean())
    return outputs


def stage_extract(ws: Workspace) -> list[Path]:
    cfg = ws.config
    ex = cfg.extract
    scenes = ws.training_scenes()
    per = [ex.samples_per_class // len(scenes)] * len(scenes)
    for j in range(ex.samples_per_class - sum(per)):
        per[j] += 1
    parts = []
    for k, n in zip(scenes, per):
        cams, imgs = _load_views(ws, k)
        dms = _load_depthmaps(ws, k)
        polys = load_polygons(ws.scene_dir(k) / "polygons.json")
        vol = _volume(ws, k, cams, imgs)
        parts.append(build_dataset(polys, dms, vol, n, seed=_scene_seed(cfg, k),
                                   val_fraction=ex.val_fraction, test_fraction=ex.test_fraction,
                                   min_valid_fraction=ex.min_valid_fraction))
    X = np.concatenate([p.X for p in parts])
    perm = np.random.default_rng(np.random.SeedSequence([cfg.seed, 83])).permutation(len(X))
    ds = Dataset(X[perm], np.concatenate([p.valid for p in parts])[perm],
                 np.concatenate([p.y for p in parts])[perm], np.concatenate([p.split for p in parts])[perm])
    ds.save(ws.path("dataset.bin"))
    ws.path("dataset.json").write_text(json.dumps(
        {"samples": len(ds), "classes": ds.class_histogram(), "splits": ds.split_counts(),
         "scenes": scenes}, indent=1))
    log.info("extract: %d samples %s", len(ds), ds.split_counts())
    return [ws.path("dataset.bin"), ws.path("dataset.json")]


def stage_train(ws: Workspace) -> list[Path]:
    cfg = ws.config
    ds = Dataset.load(ws.path("dataset.bin"))
    dtype = np.dtype(cfg.train.precision)
    outputs = []
    summary = {}
    for mode in cfg.train.experiments:
        params, report = train(cfg.network, ds, cfg.schedule, mode, dtype=dtype,
                               steps_per_epoch=cfg.train.steps_per_epoch, evaluate_test=True,
                               log=log.info)
        ws.manifest["test_accesses"][mode] = report.test_accesses
        save_model(ws.path(f"model_{mode}.bin"), params, cfg.network, cfg.schedule, mode)
        report.to_csv(ws.path(f"curves_{mode}.csv"))
        summary[mode] = {"train_accuracy": report.train_accuracy[-1],
                         "val_accuracy": report.val_accuracy[-1],
                         "test_accuracy": report.test_accuracy, "steps": len(report.losses),
                         "final_loss": report.losses[-1], "diverged": report.diverged}
        outputs += [ws.path(f"model_{mode}.bin"), ws.path(f"model_{mode}.bin.json"),
                    ws.path(f"curves_{mode}.csv")]
        log.info("train: %s test accuracy %.4f", mode, report.test_accuracy)
    ws.path("experiments.json").write_text(json.dumps(summary, indent=1))
    outputs.append(ws.path("experiments.json"))
    return outputs


def stage_classify(ws: Workspace) -> list[Path]:
    cfg = ws.config
    params, spec, _, mode = load_model(ws.path("model_full.bin"), np.dtype(cfg.train.precision))
    cams, imgs = _load_views(ws, 0)
    dms = _load_depthmaps(ws, 0)
    vol = _volume(ws, 0, cams, imgs)
    stride = cfg.classify.stride

    def one(dm: DepthMap):
        sel = np.zeros_like(dm.valid)
        sel[::stride, ::stride] = True
        pix = np.argwhere(dm.valid & sel)
        prob = np.full(dm.valid.shape, np.nan)
        for s in range(0, len(pix), 4096):
            p = pix[s : s + 4096]
            raw, ok = extract_points(dm.points(p), vol)
            x, usable = normalize_batch(raw, ok)
            # the same coverage rule as the training samples
            usable &= ok.mean(axis=(1, 2, 3)) >= cfg.extract.min_valid_fraction
            pr = predict(params, x[usable].astype(params.dtype), spec, mode, cfg.classify.batch)
            p = p[usable]
            prob[p[:, 0], p[:, 1]] = pr.reshape(-1, 2)[:, 1]
        return dm.ident, prob

    outputs = []
    for i, prob in _pmap(ws, one, dms):
        write_pfm(ws.path(f"prob_{i}.pfm"), prob)
        outputs.append(ws.path(f"prob_{i}.pfm"))
        log.info("classify: view %d, %d points", i, int(np.isfinite(prob).sum()))
    return outputs


def _target_clouds(ws: Workspace) -> list[ClassifiedPointCloud]:
    dms = _load_depthmaps(ws, 0)
    clouds = []
    for dm in dms:
        prob = read_pfm(ws.path(f"prob_{dm.ident}.pfm")).astype(np.float64)
        pix = np.argwhere(np.isfinite(prob) & dm.valid)
        clouds.append(ClassifiedPointCloud(dm.points(pix), prob[pix[:, 0], pix[:, 1]], dm.ident))
    return clouds


def _mask_grid(ws: Workspace) -> GridSpec2D:
    meta = _load_scene_meta(ws, 0)
    return GridSpec2D.covering(meta["extent_xy"], ws.config.mask.cell_size)


def stage_mask(ws: Workspace) -> list[Path]:
    mask = build_mask(_target_clouds(ws), _mask_grid(ws))
    mask.save(ws.path("mask"))
    log.info("mask: %d water cells, %d unobserved, %d points outside",
             int(mask.water.sum()), int((~mask.observed).sum()), mask.n_outside)
    return [ws.path("mask.pgm"), ws.path("mask.pfm"), ws.path("mask.json")]


def _all_points(ws: Workspace, k: int = 0) -> np.ndarray:
    return np.concatenate([dm.points() for dm in _load_depthmaps(ws, k)])


def fill_tiled(mask: Mask2D, points: np.ndarray, cfg, threads: int = 1) -> HeightField:
    """Fill per overlapping tile and feather; a single tile is the plain fill."""
    g = mask.grid
    t = int(round(cfg.tile_size / g.cell_size))
    if g.nx <= t and g.ny <= t:
        return fill_water(mask, points, cfg, threads)
    infos = []

    def per_tile(win):
        rs, cs = win
        sub = GridSpec2D((g.origin[0] + cs.start * g.cell_size, g.origin[1] + rs.start * g.cell_size),
                         g.cell_size, cs.stop - cs.start, rs.stop - rs.start)
        m = Mask2D(sub, mask.prob[rs, cs], mask.label[rs, cs], mask.count[rs, cs])
        hf = fill_water(m, points, cfg, threads)
        infos.extend({**c, "tile": [rs.start, cs.start]} for c in hf.components)
        return hf.z

    z = tile_and_feather(g, cfg.tile_size, cfg.tile_overlap, per_tile)
    return HeightField(g, z, infos)


def stage_fill(ws: Workspace) -> list[Path]:
    mask = Mask2D.load(ws.path("mask"))
    hf = fill_tiled(mask, _all_points(ws), ws.config.fill, ws.threads)
    hf.save(ws.path("water"))
    report = {"components": len(hf.components),
              "unfixable": [c["component"] for c in hf.components if not c["fixed"]],
              "details": hf.components}
    ws.path("fill_report.json").write_text(json.dumps(report, indent=1))
    return [ws.path("water.pfm"), ws.path("water.json"), ws.path("fill_report.json")]


def stage_eval(ws: Workspace) -> list[Path]:
    report = evaluate_workspace(ws)
    ws.path("eval_report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    ws.path("eval_report.txt").write_text(format_report(report))
    return [ws.path("eval_report.json"), ws.path("eval_report.txt")]


STAGE_FUNCS = {"synth": stage_synth, "sweep": stage_sweep, "extract": stage_extract,
               "train": stage_train, "classify": stage_classify, "mask": stage_mask,
               "fill": stage_fill, "eval": stage_eval}


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def evaluate_workspace(ws: Workspace) -> dict:
    cfg = ws.config
    d = ws.scene_dir(0)
    meta = _load_scene_meta(ws, 0)
    has_gt = (d / "classes.pgm").exists()
    report = {"config_hash": cfg.hash(), "versions": {"mvvc": __version__, "python": platform.python_version(),
                                                      "numpy": np.__version__}}

    # depth accuracy against the rendered ground truth
    dms = _load_depthmaps(ws, 0)
    depth = {}
    for dm in dms:
        entry = {"valid_fraction": float(dm.valid.mean())}
        gt_path = d / f"gt_depth_{dm.ident}.pfm"
        if gt_path.exists():
            gt = read_pfm(gt_path).astype(np.float64)
            inview = np.isfinite(gt)
            step = float(dm.planes[1] - dm.planes[0]) if len(dm.planes) > 1 else 1.0
            z_est = dm.z()
            z_gt = dm.ref.unproject(*np.meshgrid(np.arange(gt.shape[1]), np.arange(gt.shape[0])),
                                    np.where(inview, gt, 0.0))[..., 2]
            err = np.abs(z_est - z_gt)
            ok = inview & dm.valid
            entry["within_one_plane"] = float(np.mean((err <= step + 1e-9)[ok])) if ok.any() else None
        depth[str(dm.ident)] = entry
    within = [e["within_one_plane"] for e in depth.values() if e.get("within_one_plane") is not None]
    report["depth"] = {"views": depth, "mean_within_one_plane": float(np.mean(within)) if within else None}

    report["samples"] = json.loads(ws.path("dataset.json").read_text())
    exps = json.loads(ws.path("experiments.json").read_text())
    order = None
    if all(m in exps for m in ("full", "mosaic", "unrelated")):
        f, m, u = (exps[k]["test_accuracy"] for k in ("full", "mosaic", "unrelated"))
        order = {"full_gt_mosaic_gt_unrelated": bool(f > m > u),
                 "gap_full_mosaic": f - m, "gap_mosaic_unrelated": m - u}
    accesses = ws.manifest.get("test_accesses", {})
    report["experiments"] = {"modes": exps, "ordering": order, "test_accesses": accesses,
                             "test_touched_once": all(accesses.get(k) == 1 for k in exps)}

    mask = Mask2D.load(ws.path("mask"))
    mrep = {"water_cells": int(mask.water.sum()), "observed_fraction": float(mask.observed.mean()),
            "points_outside": mask.n_outside}
    if has_gt:
        classes = read_pgm(d / "classes.pgm")
        truth = resample_classes(classes, meta["cell_size"], meta["origin"], mask.grid, WATER)
        mrep["iou_water"] = water_iou(mask, truth)
    report["mask"] = mrep

    water = read_pfm(ws.path("water.pfm")).astype(np.float64)
    fill = json.loads(ws.path("fill_report.json").read_text())
    wrep = {"components": fill["components"], "unfixable": fill["unfixable"]}
    if has_gt:
        bodies = read_pgm(d / "bodies.pgm")
        levels = []
        for b, level in enumerate(meta["levels"]):
            cells = resample_classes(bodies, meta["cell_size"], meta["origin"], mask.grid, b + 1)
            filled = cells & np.isfinite(water)
            entry = {"body": b, "gt_level": level, "filled_fraction": float(filled.sum() / max(cells.sum(), 1))}
            if filled.any():
                e = np.abs(water[filled] - level)
                entry.update(max_error=float(e.max()), mean_error=float(e.mean()),
                             estimated_level=float(np.median(water[filled])))
            levels.append(entry)
        wrep["levels"] = levels
        errs = [l["max_error"] for l in levels if "max_error" in l]
        wrep["max_level_error"] = max(errs) if errs else None
    report["water"] = wrep
    return report


def format_report(report: dict) -> str:
    lines = [f"config {report['config_hash'][:12]}  mvvc {report['versions']['mvvc']}", ""]
    dm = report["depth"]["mean_within_one_plane"]
    lines.append(f"depth within one plane (mean over views): {dm:.4f}" if dm is not None else "depth: no ground truth")
    s = report["samples"]
    lines.append(f"samples: {s['samples']}  splits {s['splits']}")
    lines.append("")
    lines.append(f"{'experiment':<12}{'train':>8}{'val':>8}{'test':>8}")
    for mode, r in report["experiments"]["modes"].items():
        lines.append(f"{mode:<12}{r['train_accuracy']:>8.4f}{r['val_accuracy']:>8.4f}{r['test_accuracy']:>8.4f}")
    o = report["experiments"]["ordering"]
    if o is not None:
        lines.append(f"ordering full > mosaic > unrelated: {o['full_gt_mosaic_gt_unrelated']} "
                     f"(gaps {o['gap_full_mosaic']:+.4f}, {o['gap_mosaic_unrelated']:+.4f})")
    lines.append("")
    m = report["mask"]
    if "iou_water" in m:
        lines.append(f"mask water IoU: {m['iou_water']:.4f}")
    lines.append(f"mask observed fraction: {m['observed_fraction']:.4f}")
    w = report["water"]
    lines.append(f"water components: {w['components']}  unfixable: {w['unfixable']}")
    for l in w.get("levels", []):
        if "max_error" in l:
            lines.append(f"  body {l['body']}: gt {l['gt_level']:.3f}  est {l['estimated_level']:.3f}  "
                         f"max err {l['max_error']:.3f}  filled {l['filled_fraction']:.3f}")
        else:
            lines.append(f"  body {l['body']}: not filled")
    return "\n".join(lines) + "\n"
