"""Deterministic synthetic scenes: roads, planted vehicles, vegetation,
shadows and clutter, with exact ground truth for every planted vehicle.

Everything here stands in for the commercial imagery the pipeline targets.
Scenes are seeded and reproduce bit-identically.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import OrientedBox, points_in_box
from .raster import Raster
from .roadmask import RoadClass, RoadLine, RoadMask, RoadNetwork, build_road_mask

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

BACKGROUND = (0.20, 0.22, 0.24, 0.26)  # B, G, R, NIR
# warm gray pavement: enough chroma that hue is stable against pixel noise,
# which is what the ratio-image shadow detector keys on
PAVEMENT = (0.14, 0.16, 0.18, 0.20)
VEGETATION = (0.06, 0.11, 0.05, 0.45)  # NDVI = 0.8


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class VehicleSpec:
    box: OrientedBox  # pixel coordinates
    polarity: str = "bright"


@dataclass(frozen=True)
class DistractorSpec:
    kind: str  # square | plus | disk
    cx: float
    cy: float
    size: float = 6.0
    polarity: str = "bright"


@dataclass
class SceneSpec:
    width: int = 512
    height: int = 512
    pixel_size: float = 0.5
    seed: int = 0
    roads: list = field(default_factory=list)  # RoadLine, CRS meters
    vehicles: list = field(default_factory=list)  # VehicleSpec
    distractors: list = field(default_factory=list)
    vegetation: list = field(default_factory=list)  # OrientedBox, pixels
    shadows: list = field(default_factory=list)  # OrientedBox, pixels
    noise_sigma: float = 0.02
    contrast_sigmas: float = 3.0
    shadow_factor: float = 0.6

    @property
    def origin(self):
        # top-left corner; y grows upward in CRS
        return 0.0, self.height * self.pixel_size


@dataclass(frozen=True)
class TruthVehicle:
    box: OrientedBox
    road_class: RoadClass
    polarity: str


@dataclass
class SceneTruth:
    vehicles: list

    def __len__(self):
        return len(self.vehicles)

    def boxes(self):
        return [t.box for t in self.vehicles]


def _paint_box(bands, box: OrientedBox, values) -> None:
    h, w = bands.shape[1:]
    r0 = max(0, int(math.floor(box.cy - 0.75 * (box.w + box.h))))
    r1 = min(h - 1, int(math.ceil(box.cy + 0.75 * (box.w + box.h))))
    c0 = max(0, int(math.floor(box.cx - 0.75 * (box.w + box.h))))
    c1 = min(w - 1, int(math.ceil(box.cx + 0.75 * (box.w + box.h))))
    if r0 > r1 or c0 > c1:
        return
    cols, rows = np.meshgrid(np.arange(c0, c1 + 1), np.arange(r0, r1 + 1))
    inside = points_in_box(box, cols.astype(np.float64), rows.astype(np.float64))
    rr, cc = rows[inside], cols[inside]
    for b in range(bands.shape[0]):
        bands[b, rr, cc] = values[b]


def _paint_disk(bands, cx, cy, radius, values) -> None:
    h, w = bands.shape[1:]
    r0 = max(0, int(math.floor(cy - radius - 1)))
    r1 = min(h - 1, int(math.ceil(cy + radius + 1)))
    c0 = max(0, int(math.floor(cx - radius - 1)))
    c1 = min(w - 1, int(math.ceil(cx + radius + 1)))
    cols, rows = np.meshgrid(np.arange(c0, c1 + 1), np.arange(r0, r1 + 1))
    inside = (cols - cx) ** 2 + (rows - cy) ** 2 <= radius * radius
    rr, cc = rows[inside], cols[inside]
    for b in range(bands.shape[0]):
        bands[b, rr, cc] = values[b]


def _distractor_values(base, contrast, polarity):
    sign = 1.0 if polarity == "bright" else -1.0
    return [v + sign * contrast for v in base]


def generate_scene(spec: SceneSpec):
    """Render a scene; returns (Raster, RoadNetwork, SceneTruth).

    Identical specs (same seed) produce bit-identical rasters.  Raises
    SceneError when a planted vehicle center is off the road buffers.
    """
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    bands = np.empty((4, h, w), dtype=np.float64)
    for b, v in enumerate(BACKGROUND):
        bands[b].fill(v)

    net = RoadNetwork.from_lines(spec.roads)
    origin_x, origin_y = spec.origin
    placeholder = Raster(
        bands=np.zeros((4, h, w), dtype=np.float32),
        origin_x=origin_x,
        origin_y=origin_y,
        pixel_size=spec.pixel_size,
    )
    mask = build_road_mask(net, placeholder)
    road = mask.road
    for b, v in enumerate(PAVEMENT):
        bands[b][road] = v

    for veg in spec.vegetation:
        _paint_box(bands, veg, VEGETATION)

    contrast = spec.contrast_sigmas * spec.noise_sigma
    truth = []
    for veh in spec.vehicles:
        values = _distractor_values(PAVEMENT, contrast, veh.polarity)
        _paint_box(bands, veh.box, values)
        cls = mask.class_at_pixel(veh.box.cy, veh.box.cx)
        if cls == RoadClass.NON_ROAD:
            raise SceneError(
                f"vehicle at ({veh.box.cx:.1f}, {veh.box.cy:.1f}) is off the road buffers"
            )
        truth.append(TruthVehicle(box=veh.box, road_class=cls, polarity=veh.polarity))

    for d in spec.distractors:
        values = _distractor_values(PAVEMENT, contrast, d.polarity)
        if d.kind == "square":
            _paint_box(bands, OrientedBox(d.cx, d.cy, d.size, d.size, 0.0), values)
        elif d.kind == "plus":
            _paint_box(bands, OrientedBox(d.cx, d.cy, d.size, d.size / 3.0, 0.0), values)
            _paint_box(bands, OrientedBox(d.cx, d.cy, d.size / 3.0, d.size, 0.0), values)
        elif d.kind == "disk":
            _paint_disk(bands, d.cx, d.cy, d.size / 2.0, values)
        else:
            raise SceneError(f"unknown distractor kind {d.kind!r}")

    for shadow in spec.shadows:
        sh = np.zeros((h, w), dtype=bool)
        plane = np.zeros((1, h, w))
        _paint_box(plane, shadow, [1.0])
        sh = plane[0] > 0
        bands[:, sh] *= spec.shadow_factor

    bands += rng.normal(0.0, spec.noise_sigma, size=bands.shape)
    np.maximum(bands, 0.0, out=bands)

    raster = Raster(
        bands=bands.astype(np.float32),
        origin_x=origin_x,
        origin_y=origin_y,
        pixel_size=spec.pixel_size,
    )
    return raster, net, SceneTruth(vehicles=truth)


_TAG_CYCLE = ("primary", "secondary", "residential")


def _grid_roads(width, height, pixel_size, n_h, n_v):
    """Evenly spaced horizontal and vertical roads cycling through classes."""
    origin_y = height * pixel_size
    lines = []
    tag_i = 0
    for i in range(n_h):
        row = (i + 1) * height / (n_h + 1)
        y = origin_y - (row + 0.5) * pixel_size
        pts = np.array([[0.0, y], [width * pixel_size, y]])
        lines.append(RoadLine(points=pts, highway=_TAG_CYCLE[tag_i % 3]))
        tag_i += 1
    for j in range(n_v):
        col = (j + 1) * width / (n_v + 1)
        x = (col + 0.5) * pixel_size
        pts = np.array([[x, 0.0], [x, origin_y]])
        lines.append(RoadLine(points=pts, highway=_TAG_CYCLE[tag_i % 3]))
        tag_i += 1
    return lines


def random_scene_spec(
    seed: int,
    width: int = 512,
    height: int = 512,
    n_vehicles: int = 60,
    n_distractors: int = 10,
    n_roads_h: int = 3,
    n_roads_v: int = 3,
    with_vegetation: bool = True,
    with_shadows: bool = False,
    noise_sigma: float = 0.02,
    min_spacing: float = 16.0,
    dark_fraction: float = 0.3,
) -> SceneSpec:
    """Build a scene spec with vehicles placed along a road grid.

    Placement enforces a minimum center spacing so planted objects stay
    8-connected-separate; raises SceneError if the requested count cannot
    be placed.
    """
    rng = np.random.default_rng(seed ^ 0x5CE9E)
    ps = 0.5
    roads = _grid_roads(width, height, ps, n_roads_h, n_roads_v)

    margin = 20.0
    lane = 10.0  # max lateral offset from the centerline, pixels
    placed: list = []

    def far_enough(cx, cy):
        return all((cx - px) ** 2 + (cy - py) ** 2 >= min_spacing**2 for px, py in placed)

    def sample_on_road():
        k = int(rng.integers(0, len(roads)))
        horizontal = k < n_roads_h
        t = float(rng.uniform(margin, (width if horizontal else height) - margin))
        off = float(rng.uniform(-lane, lane))
        if horizontal:
            row = (k + 1) * height / (n_roads_h + 1)
            return t, row + off, 0.0
        col = (k - n_roads_h + 1) * width / (n_roads_v + 1)
        return col + off, t, 90.0

    vehicles = []
    for _ in range(n_vehicles):
        for _try in range(300):
            cx, cy, heading = sample_on_road()
            if far_enough(cx, cy):
                break
        else:
            raise SceneError(f"could not place {n_vehicles} vehicles at spacing {min_spacing}")
        placed.append((cx, cy))
        length = float(rng.uniform(8.0, 12.0))
        width_px = float(rng.uniform(3.0, 5.0))
        theta = heading + float(rng.normal(0.0, 2.0))
        polarity = "dark" if rng.random() < dark_fraction else "bright"
        vehicles.append(
            VehicleSpec(box=OrientedBox(cx, cy, length, width_px, theta), polarity=polarity)
        )

    kinds = ("square", "plus", "disk")
    distractors = []
    for i in range(n_distractors):
        for _try in range(300):
            cx, cy, _ = sample_on_road()
            if far_enough(cx, cy):
                break
        else:
            raise SceneError("could not place distractors")
        placed.append((cx, cy))
        kind = kinds[i % len(kinds)]
        size = float(rng.uniform(6.0, 8.0)) if kind != "plus" else 9.0
        polarity = "dark" if rng.random() < dark_fraction else "bright"
        distractors.append(DistractorSpec(kind=kind, cx=cx, cy=cy, size=size, polarity=polarity))

    vegetation = []
    if with_vegetation:
        cell_h = height / (n_roads_h + 1)
        cell_w = width / (n_roads_v + 1)
        for i in range(n_roads_h + 1):
            for j in range(n_roads_v + 1):
                if rng.random() < 0.5:
                    continue
                cy = (i + 0.5) * cell_h + float(rng.uniform(-6, 6))
                cx = (j + 0.5) * cell_w + float(rng.uniform(-6, 6))
                size = float(rng.uniform(18, 30))
                vegetation.append(OrientedBox(cx, cy, size, size * 0.8, float(rng.uniform(0, 180))))

    shadows = []
    if with_shadows:
        row = 1 * height / (n_roads_h + 1)
        shadows.append(OrientedBox(width * 0.25, row, 60.0, 44.0, 0.0))

    return SceneSpec(
        width=width,
        height=height,
        pixel_size=ps,
        seed=seed,
        roads=roads,
        vehicles=vehicles,
        distractors=distractors,
        vegetation=vegetation,
        shadows=shadows,
        noise_sigma=noise_sigma,
    )


def before_after_pair(seed: int, removal_frac: float, **kwargs):
    """A before/after scene pair; the after scene keeps round((1-f) * n) vehicles."""
    before = random_scene_spec(seed, **kwargs)
    keep = round((1.0 - removal_frac) * len(before.vehicles))
    rng = np.random.default_rng(seed ^ 0xAF7E9)
    idx = sorted(rng.choice(len(before.vehicles), size=keep, replace=False))
    after = replace(
        before,
        seed=seed + 10_000,
        vehicles=[before.vehicles[i] for i in idx],
    )
    return before, after


# --- truth / spec serialization ---------------------------------------------

def save_truth(path, truth: SceneTruth) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in truth.vehicles:
            rec = {
                "box": [t.box.cx, t.box.cy, t.box.w, t.box.h, t.box.theta_deg],
                "road_class": int(t.road_class),
                "polarity": t.polarity,
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_truth(path) -> SceneTruth:
    vehicles = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            cx, cy, w, h, theta = rec["box"]
            vehicles.append(
                TruthVehicle(
                    box=OrientedBox(cx, cy, w, h, theta),
                    road_class=RoadClass(int(rec["road_class"])),
                    polarity=str(rec.get("polarity", "bright")),
                )
            )
    return SceneTruth(vehicles=vehicles)


def load_scene_spec(path) -> SceneSpec:
    """Read a scene spec from TOML.

    A ``[random]`` table delegates to random_scene_spec with the [scene]
    geometry; otherwise roads/vehicles/vegetation/shadows are explicit
    arrays of tables.
    """
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)
    scene = doc.get("scene", {})
    if "random" in doc:
        rnd = doc["random"]
        return random_scene_spec(
            seed=int(scene.get("seed", 0)),
            width=int(scene.get("width", 512)),
            height=int(scene.get("height", 512)),
            noise_sigma=float(scene.get("noise_sigma", 0.02)),
            **{k: v for k, v in rnd.items()},
        )
    spec = SceneSpec(
        width=int(scene.get("width", 512)),
        height=int(scene.get("height", 512)),
        pixel_size=float(scene.get("pixel_size", 0.5)),
        seed=int(scene.get("seed", 0)),
        noise_sigma=float(scene.get("noise_sigma", 0.02)),
        contrast_sigmas=float(scene.get("contrast_sigmas", 3.0)),
        shadow_factor=float(scene.get("shadow_factor", 0.6)),
    )
    for road in doc.get("road", []):
        spec.roads.append(RoadLine(points=np.asarray(road["points"], dtype=np.float64),
                                   highway=str(road["highway"])))
    for veh in doc.get("vehicle", []):
        spec.vehicles.append(
            VehicleSpec(
                box=OrientedBox(veh["cx"], veh["cy"], veh["w"], veh["h"],
                                float(veh.get("theta", 0.0))),
                polarity=str(veh.get("polarity", "bright")),
            )
        )
    for d in doc.get("distractor", []):
        spec.distractors.append(
            DistractorSpec(kind=str(d["kind"]), cx=d["cx"], cy=d["cy"],
                           size=float(d.get("size", 6.0)),
                           polarity=str(d.get("polarity", "bright")))
        )
    for key, target in (("vegetation", spec.vegetation), ("shadow", spec.shadows)):
        for b in doc.get(key, []):
            target.append(OrientedBox(b["cx"], b["cy"], b["w"], b["h"], float(b.get("theta", 0.0))))
    return spec
