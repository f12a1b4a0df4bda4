"""Coverage-based detection/reference matching and precision-recall-F1."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

from .geometry import OrientedBox, box_intersection_area

COVER_MODES = ("center_cover", "contain", "iou")


@dataclass(frozen=True)
class LabeledBox:
    box: OrientedBox
    region_id: str = ""

    def __post_init__(self):
        if not self.box.area > 0:
            raise ValueError("labeled box must have positive area")


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    pairs: list = field(default_factory=list)  # (det_index, label_index)


def _covers(det_box: OrientedBox, label: LabeledBox, mode: str, inter: float) -> bool:
    if mode == "center_cover":
        return det_box.contains_point(label.box.cx, label.box.cy) and inter >= 0.5 * label.box.area
    if mode == "contain":
        return inter >= label.box.area * (1.0 - 1e-9)
    if mode == "iou":
        union = det_box.area + label.box.area - inter
        return union > 0 and inter / union >= 0.5
    raise ValueError(f"unknown match mode {mode!r}; choose from {COVER_MODES}")


def match_detections(dets, labels, mode: str = "center_cover") -> MatchResult:
    """One-to-one greedy matching by descending detection probability.

    A detection may claim a label only when the coverage test passes; among
    coverable unclaimed labels it takes the one with the largest overlap.
    """
    if mode not in COVER_MODES:
        raise ValueError(f"unknown match mode {mode!r}; choose from {COVER_MODES}")
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].prob, i))
    claimed = [False] * len(labels)
    pairs = []
    for di in order:
        det = dets[di]
        best_li, best_inter = -1, 0.0
        for li, label in enumerate(labels):
            if claimed[li]:
                continue
            inter = box_intersection_area(det.box, label.box)
            if _covers(det.box, label, mode, inter) and inter > best_inter:
                best_li, best_inter = li, inter
        if best_li >= 0:
            claimed[best_li] = True
            pairs.append((di, best_li))
    tp = len(pairs)
    return MatchResult(tp=tp, fp=len(dets) - tp, fn=len(labels) - tp, pairs=pairs)


@dataclass(frozen=True)
class PrfMetrics:
    precision: float
    recall: float
    f1: float
    degenerate: bool = False  # some denominator was zero


def prf_metrics(m: MatchResult) -> PrfMetrics:
    degenerate = False
    if m.tp + m.fp > 0:
        p = m.tp / (m.tp + m.fp)
    else:
        p, degenerate = 0.0, True
    if m.tp + m.fn > 0:
        r = m.tp / (m.tp + m.fn)
    else:
        r, degenerate = 0.0, True
    if p + r > 0:
        f1 = 2.0 * p * r / (p + r)
    else:
        f1, degenerate = 0.0, True
    return PrfMetrics(precision=p, recall=r, f1=f1, degenerate=degenerate)


def save_labels(path, labels) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for lb in labels:
            rec = {
                "box": [lb.box.cx, lb.box.cy, lb.box.w, lb.box.h, lb.box.theta_deg],
                "region_id": lb.region_id,
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_labels(path):
    labels = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            cx, cy, w, h, theta = rec["box"]
            labels.append(LabeledBox(box=OrientedBox(cx, cy, w, h, theta),
                                     region_id=str(rec.get("region_id", ""))))
    return labels


def write_region_report(path, dets, labels, mode: str = "center_cover") -> dict:
    """Per-region metrics CSV with a totals row; returns the totals."""
    regions = sorted({lb.region_id for lb in labels})
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["region", "tp", "fp", "fn", "precision", "recall", "f1"])
        total = MatchResult(tp=0, fp=0, fn=0)
        overall = match_detections(dets, labels, mode)
        label_region = [lb.region_id for lb in labels]
        matched_by_region = {}
        for di, li in overall.pairs:
            matched_by_region.setdefault(label_region[li], 0)
            matched_by_region[label_region[li]] += 1
        for region in regions:
            n_labels = sum(1 for r in label_region if r == region)
            tp = matched_by_region.get(region, 0)
            fn = n_labels - tp
            m = MatchResult(tp=tp, fp=0, fn=fn)
            met = prf_metrics(m)
            wr.writerow([region, tp, "", fn, "", f"{met.recall:.4f}", ""])
        met = prf_metrics(overall)
        wr.writerow(["total", overall.tp, overall.fp, overall.fn,
                     f"{met.precision:.4f}", f"{met.recall:.4f}", f"{met.f1:.4f}"])
        total = overall
    return {"tp": total.tp, "fp": total.fp, "fn": total.fn,
            "precision": met.precision, "recall": met.recall, "f1": met.f1}
