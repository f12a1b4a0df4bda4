"""End-to-end pipeline: mask, candidates, classification, NMS, shadow
filtering and analytics, with every stage persisted to plain files so runs
resume and individual stages can be recomputed."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import tifffile

from . import analytics, classifier, postproc
from .candidates import Anchor, extract_candidates
from .classifier import MultiBranchModel, TrainConfig
from .config import PipelineConfig
from .geometry import OrientedBox
from .raster import ImageStats, Raster, load_raster
from .roadmask import build_road_mask, load_road_mask, load_road_network, save_road_mask
from .synth import load_truth

STAGES = ("mask", "candidates", "classify", "nms", "shadow", "analytics")
STAGE_ALIASES = {"counts": "analytics", "anchors": "candidates", "shadow-filter": "shadow"}
EPOCHS = ("before", "after")


class PipelineError(RuntimeError):
    pass


def _city_dir(out: Path, city_id: str) -> Path:
    d = out / "cities" / city_id
    d.mkdir(parents=True, exist_ok=True)
    return d


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise PipelineError(
            f"stage {stage!r} needs missing artifact {path}; run the earlier stages first"
        )
    return path


def _raster_path(city, epoch: str) -> str:
    return city.raster_before if epoch == "before" else city.raster_after


def save_anchors(path, anchors) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for a in anchors:
            rec = {
                "id": a.id,
                "source": a.source,
                "box": [a.box.cx, a.box.cy, a.box.w, a.box.h, a.box.theta_deg],
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_anchors(path):
    anchors = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            cx, cy, w, h, theta = rec["box"]
            anchors.append(
                Anchor(id=int(rec["id"]), box=OrientedBox(cx, cy, w, h, theta),
                       source=int(rec["source"]))
            )
    return anchors


def train_from_config(cfg: PipelineConfig, out: Path) -> Path:
    """Train the classifier from cities that carry reference truth."""
    samples = []
    for city in cfg.cities:
        if city.truth_before is None:
            continue
        raster = load_raster(city.raster_before, band_order=cfg.bands)
        mask = build_road_mask(load_road_network(city.roads), raster)
        truth = load_truth(city.truth_before)
        samples.extend(
            classifier.make_labeled_samples(
                raster, mask, truth.boxes(), cfg.candidates
            )
        )
    if not samples:
        raise PipelineError("training requested but no city has truth_before labels")
    model = MultiBranchModel(seed=cfg.seed)
    classifier.train(model, samples, cfg.train, seed=cfg.seed)
    model_path = out / "model.bin"
    model.save(model_path)
    return model_path


def run_pipeline(cfg: PipelineConfig, stages=None, train: bool = False) -> dict:
    """Execute the selected stages for every configured city."""
    if stages is None:
        selected = list(STAGES)
    else:
        stages = [STAGE_ALIASES.get(s, s) for s in stages]
        unknown = [s for s in stages if s not in STAGES]
        if unknown:
            raise PipelineError(f"unknown stages {unknown}; valid: {STAGES}")
        selected = [s for s in STAGES if s in stages]
    if not cfg.cities:
        raise PipelineError("no cities configured")

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)

    model_path = None
    if train:
        model_path = train_from_config(cfg, out)
    elif cfg.model is not None:
        model_path = Path(cfg.model)
    elif (out / "model.bin").exists():
        model_path = out / "model.bin"

    model = None
    if "classify" in selected:
        if model_path is None or not Path(model_path).exists():
            raise PipelineError(
                "stage 'classify' needs a model checkpoint; pass --train or set pipeline.model"
            )
        model = MultiBranchModel.load(model_path)

    for city in cfg.cities:
        cdir = _city_dir(out, city.id)
        for epoch in EPOCHS:
            if "mask" in selected:
                raster = load_raster(_raster_path(city, epoch), band_order=cfg.bands)
                mask = build_road_mask(load_road_network(city.roads), raster)
                save_road_mask(cdir / f"mask_{epoch}.tif", mask)
            if "candidates" in selected:
                raster = load_raster(_raster_path(city, epoch), band_order=cfg.bands)
                mask = load_road_mask(_require(cdir / f"mask_{epoch}.tif", "candidates"))
                result = extract_candidates(raster, mask, cfg.candidates)
                with open(cdir / f"candidates_{epoch}.jsonl", "w", encoding="utf-8") as fh:
                    for c in result.candidates:
                        rec = {
                            "id": c.id,
                            "polarity": c.polarity,
                            "area_px": c.area_px,
                            "bbox": list(c.bbox),
                            "min_rect": [c.min_rect.cx, c.min_rect.cy, c.min_rect.w,
                                         c.min_rect.h, c.min_rect.theta_deg],
                        }
                        fh.write(json.dumps(rec, sort_keys=True) + "\n")
                save_anchors(cdir / f"anchors_{epoch}.jsonl", result.anchors)
            if "classify" in selected:
                raster = load_raster(_raster_path(city, epoch), band_order=cfg.bands)
                anchors = load_anchors(_require(cdir / f"anchors_{epoch}.jsonl", "classify"))
                stats = ImageStats.from_raster(raster)
                probs = classifier.score_anchors(model, raster, stats, anchors)
                with open(cdir / f"scores_{epoch}.jsonl", "w", encoding="utf-8") as fh:
                    for a, p in zip(anchors, probs):
                        fh.write(json.dumps({"anchor_id": a.id, "prob": float(p)},
                                            sort_keys=True) + "\n")
            if "nms" in selected:
                anchors = load_anchors(_require(cdir / f"anchors_{epoch}.jsonl", "nms"))
                scores_path = _require(cdir / f"scores_{epoch}.jsonl", "nms")
                probs = {}
                with open(scores_path, "r", encoding="utf-8") as fh:
                    for line in fh:
                        if line.strip():
                            rec = json.loads(line)
                            probs[int(rec["anchor_id"])] = float(rec["prob"])
                scored = [
                    postproc.ScoredAnchor(id=a.id, box=a.box, prob=probs[a.id])
                    for a in anchors
                    if probs.get(a.id, 0.0) > 0.5
                ]
                mask = load_road_mask(_require(cdir / f"mask_{epoch}.tif", "nms"))
                dets = postproc.custom_nms(scored, cfg.nms, road_mask=mask)
                postproc.save_detections(
                    cdir / f"dets_raw_{epoch}.jsonl", dets, image_id=f"{city.id}_{epoch}"
                )
        if "shadow" in selected:
            dets = {}
            masks = {}
            for epoch in EPOCHS:
                dets[epoch] = postproc.load_detections(
                    _require(cdir / f"dets_raw_{epoch}.jsonl", "shadow")
                )
                if cfg.shadow_enabled:
                    raster = load_raster(_raster_path(city, epoch), band_order=cfg.bands)
                    masks[epoch] = postproc.shadow_coverage_mask(raster, cfg.shadow)
                else:
                    raster = load_raster(_raster_path(city, epoch), band_order=cfg.bands)
                    masks[epoch] = np.zeros((raster.height, raster.width), dtype=bool)
                tifffile.imwrite(
                    cdir / f"shadow_{epoch}.tif", masks[epoch].astype(np.uint8)
                )
            kept_before, kept_after = postproc.apply_shadow_union(
                dets["before"], dets["after"], masks["before"], masks["after"]
            )
            postproc.save_detections(cdir / "dets_before.jsonl", kept_before,
                                     image_id=f"{city.id}_before")
            postproc.save_detections(cdir / "dets_after.jsonl", kept_after,
                                     image_id=f"{city.id}_after")

    summary = {}
    if "analytics" in selected:
        summary = run_analytics(cfg, out)
    return summary


def run_analytics(cfg: PipelineConfig, out: Path) -> dict:
    """Counts, change ratios, density grids and the stringency regression."""
    report = out / "report"
    report.mkdir(parents=True, exist_ok=True)
    count_rows = {}
    ratios = {}
    for city in cfg.cities:
        cdir = _city_dir(out, city.id)
        counts = {}
        grids = {}
        for epoch in EPOCHS:
            dets = postproc.load_detections(_require(cdir / f"dets_{epoch}.jsonl", "analytics"))
            counts[epoch] = analytics.count_vehicles(dets)
            raster = load_raster(_raster_path(city, epoch), band_order=cfg.bands)
            extent = (
                raster.origin_x,
                raster.origin_y - raster.height * raster.pixel_size,
                raster.origin_x + raster.width * raster.pixel_size,
                raster.origin_y,
            )
            pts = [raster.pixel_to_xy(d.box.cy, d.box.cx) for d in dets]
            grids[epoch] = analytics.density_grid(pts, extent, cfg.analytics.block_m)
        count_rows[city.id] = counts

        # shared equal-interval slicing across the epoch pair
        both = np.concatenate([grids[e].cells.ravel() for e in EPOCHS]).astype(np.float64)
        if both.max() > both.min():
            eq_breaks = analytics.equal_interval_breaks(both, cfg.analytics.equal_k)
        else:
            eq_breaks = []
        for epoch in EPOCHS:
            g = grids[epoch]
            g.slicing, g.breaks = "equal_interval", list(eq_breaks)
            analytics.write_grid_csv(report / f"grid_{city.id}_{epoch}.csv", g)
            analytics.render_grid_png(
                report / f"grid_{city.id}_{epoch}.png", g, title=f"{city.id} {epoch}"
            )
        change = analytics.DensityGrid(
            origin_x=grids["before"].origin_x,
            origin_y=grids["before"].origin_y,
            block_m=grids["before"].block_m,
            cells=grids["after"].cells - grids["before"].cells,
        )
        vals = change.cells.ravel().astype(np.float64)
        k = min(cfg.analytics.jenks_k, len(np.unique(vals)))
        if k >= 2:
            change.slicing = "jenks"
            change.breaks = analytics.jenks_breaks(vals, k)
        analytics.write_grid_csv(report / f"grid_{city.id}_change.csv", change)
        analytics.render_grid_png(
            report / f"grid_{city.id}_change.png", change,
            title=f"{city.id} change", cmap="coolwarm",
        )

        if counts["before"].total > 0:
            ratios[city.id] = {
                "total": analytics.change_ratio(counts["before"].total, counts["after"].total),
                "arterial": (
                    analytics.change_ratio(counts["before"].arterial, counts["after"].arterial)
                    if counts["before"].arterial > 0
                    else None
                ),
            }

    analytics.write_counts_csv(report / "counts.csv", count_rows)

    regression = {}
    points = []
    for city in cfg.cities:
        if city.stringency_index is None or city.id not in ratios:
            continue
        r = ratios[city.id]
        points.append((city.id, city.stringency_index, r["total"], r["arterial"]))
    with open(report / "regression.csv", "w", encoding="utf-8", newline="") as fh:
        import csv as _csv

        wr = _csv.writer(fh)
        wr.writerow(["city", "stringency_index", "total_change", "arterial_change"])
        for cid, s, t, a in points:
            wr.writerow([cid, s, f"{t:.4f}", "" if a is None else f"{a:.4f}"])
        for series, idx in (("total", 2), ("arterial", 3)):
            xs = [p[1] for p in points if p[idx] is not None]
            ys = [p[idx] for p in points if p[idx] is not None]
            try:
                fit = analytics.quad_regression(xs, ys)
                regression[series] = fit
                wr.writerow([f"fit_{series}", f"a={fit.a:.6g}", f"b={fit.b:.6g}",
                             f"c={fit.c:.6g} r2={fit.r2:.4f}"])
            except ValueError as exc:
                wr.writerow([f"fit_{series}", "skipped", str(exc), ""])

    return {"counts": count_rows, "ratios": ratios, "regression": regression}
