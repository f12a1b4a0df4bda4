import numpy as np
import pytest

from vehiclescan import synth
from vehiclescan.candidates import CandidateParams, extract_candidates
from vehiclescan.geometry import OrientedBox
from vehiclescan.raster import compute_ndvi
from vehiclescan.roadmask import RoadClass, build_road_mask


def test_same_seed_bit_identical():
    spec = synth.random_scene_spec(seed=42, n_vehicles=20, width=256, height=256)
    r1, _, t1 = synth.generate_scene(spec)
    r2, _, t2 = synth.generate_scene(spec)
    assert np.array_equal(r1.bands, r2.bands)
    assert t1.boxes() == t2.boxes()


def test_truth_echoes_spec_counts_per_class():
    spec = synth.random_scene_spec(seed=7, n_vehicles=100, width=640, height=640,
                                   n_roads_h=4, n_roads_v=4)
    assert len(spec.vehicles) == 100
    raster, net, truth = synth.generate_scene(spec)
    assert len(truth) == 100
    mask = build_road_mask(net, raster)
    for t in truth.vehicles:
        assert t.road_class == mask.class_at_pixel(t.box.cy, t.box.cx)
        assert t.road_class != RoadClass.NON_ROAD
    # the grid cycles through all three road tiers
    assert {t.road_class for t in truth.vehicles} == {
        RoadClass.ARTERIAL, RoadClass.COLLECTOR, RoadClass.LOCAL
    }


def test_vehicle_off_road_rejected():
    spec = synth.random_scene_spec(seed=1, n_vehicles=5, width=256, height=256)
    spec.vehicles.append(synth.VehicleSpec(box=OrientedBox(3.0, 3.0, 10, 4, 0)))
    with pytest.raises(synth.SceneError, match="off the road"):
        synth.generate_scene(spec)


def test_vegetation_ndvi_above_threshold():
    spec = synth.random_scene_spec(seed=3, n_vehicles=10, width=256, height=256,
                                   with_vegetation=True)
    assert spec.vegetation
    raster, _, _ = synth.generate_scene(spec)
    ndvi = compute_ndvi(raster)
    veg = spec.vegetation[0]
    assert float(ndvi[int(veg.cy), int(veg.cx)]) > CandidateParams().ndvi_thresh


def test_empty_scene_yields_almost_no_candidates():
    # 0 vehicles, 0 distractors: bound of 2 false candidates per km^2
    spec = synth.random_scene_spec(seed=13, n_vehicles=0, n_distractors=0,
                                   with_vegetation=True)
    raster, net, truth = synth.generate_scene(spec)
    assert len(truth) == 0
    mask = build_road_mask(net, raster)
    res = extract_candidates(raster, mask, CandidateParams())
    area_km2 = (raster.width * raster.pixel_size) * (raster.height * raster.pixel_size) / 1e6
    assert len(res.candidates) <= max(1, round(2 * area_km2))


def test_before_after_pair_counts():
    before, after = synth.before_after_pair(seed=5, removal_frac=0.4, n_vehicles=50,
                                        width=384, height=384)
    assert len(before.vehicles) == 50
    assert len(after.vehicles) == round(0.6 * 50)
    _, _, t_before = synth.generate_scene(before)
    _, _, t_after = synth.generate_scene(after)
    assert len(t_after) == round((1 - 0.4) * len(t_before))
    # kept vehicles are a subset of the before boxes
    before_boxes = {repr(v.box) for v in before.vehicles}
    assert all(repr(v.box) in before_boxes for v in after.vehicles)


def test_shadow_darkens_bands():
    spec = synth.random_scene_spec(seed=9, n_vehicles=5, width=256, height=256,
                                   with_shadows=True)
    raster, _, _ = synth.generate_scene(spec)
    sh = spec.shadows[0]
    spec_no = synth.random_scene_spec(seed=9, n_vehicles=5, width=256, height=256,
                                      with_shadows=False)
    raster_no, _, _ = synth.generate_scene(spec_no)
    inside = raster.bands[:, int(sh.cy), int(sh.cx)]
    inside_no = raster_no.bands[:, int(sh.cy), int(sh.cx)]
    assert (inside < inside_no).all()


def test_generated_scene_geotiff_roundtrip(tmp_path):
    from vehiclescan.raster import load_raster, save_raster

    spec = synth.random_scene_spec(seed=17, n_vehicles=15, width=256, height=256)
    raster, _, _ = synth.generate_scene(spec)
    save_raster(tmp_path / "scene.tif", raster)
    back = load_raster(tmp_path / "scene.tif")
    assert np.array_equal(back.bands, raster.bands)
    assert back.pixel_size == raster.pixel_size
    assert (back.origin_x, back.origin_y) == (raster.origin_x, raster.origin_y)


def test_truth_jsonl_roundtrip(tmp_path):
    spec = synth.random_scene_spec(seed=2, n_vehicles=12, width=256, height=256)
    _, _, truth = synth.generate_scene(spec)
    synth.save_truth(tmp_path / "truth.jsonl", truth)
    back = synth.load_truth(tmp_path / "truth.jsonl")
    assert back.boxes() == truth.boxes()
    assert [t.road_class for t in back.vehicles] == [t.road_class for t in truth.vehicles]


def test_requesting_too_many_vehicles_fails_loudly():
    with pytest.raises(synth.SceneError, match="could not place"):
        synth.random_scene_spec(seed=0, n_vehicles=2000, width=128, height=128)


def test_scene_spec_toml_explicit(tmp_path):
    doc = """
[scene]
width = 128
height = 128
seed = 4

[[road]]
highway = "primary"
points = [[0.0, 32.0], [64.0, 32.0]]

[[vehicle]]
cx = 60.0
cy = 64.0
w = 10.0
h = 4.0
theta = 0.0

[[vegetation]]
cx = 30.0
cy = 20.0
w = 16.0
h = 12.0
"""
    path = tmp_path / "scene.toml"
    path.write_text(doc)
    spec = synth.load_scene_spec(path)
    assert spec.width == 128 and spec.seed == 4
    assert len(spec.roads) == 1 and len(spec.vehicles) == 1
    raster, _, truth = synth.generate_scene(spec)
    assert len(truth) == 1


def test_scene_spec_toml_random(tmp_path):
    doc = """
[scene]
width = 192
height = 192
seed = 11

[random]
n_vehicles = 8
n_distractors = 2
"""
    path = tmp_path / "scene.toml"
    path.write_text(doc)
    spec = synth.load_scene_spec(path)
    assert len(spec.vehicles) == 8
    assert spec.width == 192
