import numpy as np
import pytest
import tifffile
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import constant_raster, make_raster
from vehiclescan.geometry import OrientedBox
from vehiclescan.raster import (
    ImageStats,
    Raster,
    RasterError,
    compute_ndvi,
    extract_patch,
    load_raster,
    save_raster,
)


def unit_stats():
    return ImageStats(means=np.zeros(4), stds=np.ones(4))


# --- GeoTIFF I/O -------------------------------------------------------------

def test_load_metadata_passthrough(tmp_path, rng):
    r = make_raster(rng.random((4, 128, 128)), pixel_size=0.5, origin=(100.0, 200.0))
    save_raster(tmp_path / "x.tif", r)
    back = load_raster(tmp_path / "x.tif")
    assert back.width == 128 and back.height == 128
    assert back.pixel_size == 0.5
    assert back.origin_x == 100.0 and back.origin_y == 200.0


def test_roundtrip_bit_identical(tmp_path, rng):
    r = make_raster(rng.random((4, 37, 21)).astype(np.float32))
    save_raster(tmp_path / "x.tif", r)
    back = load_raster(tmp_path / "x.tif")
    assert np.array_equal(back.bands, r.bands)


def test_load_three_bands_rejected(tmp_path, rng):
    tifffile.imwrite(
        tmp_path / "bad.tif",
        rng.random((3, 16, 16)).astype(np.float32),
        photometric="minisblack",
        planarconfig="separate",
        extratags=[
            (33550, "d", 3, (0.5, 0.5, 0.0), True),
            (33922, "d", 6, (0, 0, 0, 0.0, 8.0, 0.0), True),
        ],
    )
    with pytest.raises(RasterError, match="expected 4 bands"):
        load_raster(tmp_path / "bad.tif")


def test_load_non_square_pixels_rejected(tmp_path, rng):
    tifffile.imwrite(
        tmp_path / "bad.tif",
        rng.random((4, 16, 16)).astype(np.float32),
        photometric="minisblack",
        planarconfig="separate",
        extratags=[
            (33550, "d", 3, (0.5, 0.6, 0.0), True),
            (33922, "d", 6, (0, 0, 0, 0.0, 8.0, 0.0), True),
        ],
    )
    with pytest.raises(RasterError, match="pixel_size"):
        load_raster(tmp_path / "bad.tif")


def test_load_missing_geo_tags_rejected(tmp_path, rng):
    tifffile.imwrite(tmp_path / "bad.tif", rng.random((4, 8, 8)).astype(np.float32),
                     photometric="minisblack", planarconfig="separate")
    with pytest.raises(RasterError, match="ModelPixelScale"):
        load_raster(tmp_path / "bad.tif")


def test_load_unreadable_file(tmp_path):
    (tmp_path / "junk.tif").write_bytes(b"not a tiff at all")
    with pytest.raises(RasterError, match="unreadable"):
        load_raster(tmp_path / "junk.tif")


def test_band_order_override(tmp_path, rng):
    data = rng.random((4, 8, 8)).astype(np.float32)
    tifffile.imwrite(
        tmp_path / "x.tif", data, photometric="minisblack",
        planarconfig="separate",
        extratags=[
            (33550, "d", 3, (0.5, 0.5, 0.0), True),
            (33922, "d", 6, (0, 0, 0, 0.0, 4.0, 0.0), True),
        ],
    )
    r = load_raster(tmp_path / "x.tif", band_order=("NIR", "R", "G", "B"))
    assert np.array_equal(r.band("NIR"), data[0])
    assert np.array_equal(r.band("B"), data[3])


def test_degenerate_band_rejected():
    r = constant_raster(0.5)
    with pytest.raises(RasterError, match="degenerate"):
        ImageStats.from_raster(r)


# --- NDVI ---------------------------------------------------------------------

def test_ndvi_equal_bands_zero():
    r = constant_raster(0.3)
    assert np.array_equal(compute_ndvi(r), np.zeros((32, 32), dtype=np.float32))


def test_ndvi_direct_value():
    bands = np.zeros((4, 4, 4), dtype=np.float32)
    bands[2] = 0.2  # R
    bands[3] = 0.8  # NIR
    r = make_raster(bands)
    assert np.allclose(compute_ndvi(r), 0.6)


def test_ndvi_matches_scalar_oracle(rng):
    bands = rng.random((4, 23, 17)).astype(np.float32)
    r = make_raster(bands)
    ndvi = compute_ndvi(r)
    for i in range(23):
        for j in range(17):
            nir, red = float(bands[3, i, j]), float(bands[2, i, j])
            expected = (nir - red) / (nir + red) if nir + red != 0 else 0.0
            assert abs(float(ndvi[i, j]) - expected) < 1e-7


@settings(max_examples=60, deadline=None)
@given(nir=st.floats(0, 10), red=st.floats(0, 10))
def test_ndvi_range_and_antisymmetry(nir, red):
    bands = np.zeros((4, 2, 2), dtype=np.float32)
    bands[3] = nir
    bands[2] = red
    v = float(compute_ndvi(make_raster(bands))[0, 0])
    assert -1.0 <= v <= 1.0
    bands2 = bands.copy()
    bands2[2], bands2[3] = bands[3], bands[2]
    assert v == pytest.approx(-float(compute_ndvi(make_raster(bands2))[0, 0]), abs=1e-6)


# --- extract_patch ------------------------------------------------------------

def test_patch_constant_raster_normalizes_to_zero():
    r = constant_raster(0.7)
    stats = ImageStats(means=np.full(4, 0.7), stds=np.ones(4))
    patch = extract_patch(r, OrientedBox(16, 16, 8, 8, 0), 8, 8, stats)
    assert patch.shape == (4, 8, 8)
    assert np.allclose(patch, 0.0, atol=1e-6)


def test_patch_zero_rotation_equals_crop(rng):
    bands = rng.random((4, 32, 32)).astype(np.float32)
    r = make_raster(bands)
    # odd extents centered on a pixel center make bilinear sampling exact
    box = OrientedBox(15.0, 12.0, 9.0, 7.0, 0.0)
    patch = extract_patch(r, box, 7, 9, unit_stats())
    crop = bands[:, 12 - 3 : 12 + 4, 15 - 4 : 15 + 5]
    assert np.allclose(patch, crop, atol=1e-6)


def test_patch_90_rotation_equals_rot90_of_crop(rng):
    bands = rng.random((4, 32, 32)).astype(np.float32)
    r = make_raster(bands)
    box = OrientedBox(15.0, 12.0, 9.0, 7.0, 90.0)
    patch = extract_patch(r, box, 7, 9, unit_stats())
    crop = bands[:, 12 - 4 : 12 + 5, 15 - 3 : 15 + 4]  # (4, 9, 7)
    expected = np.stack([np.rot90(crop[b]) for b in range(4)])
    assert np.allclose(patch, expected, atol=1e-6)


def test_patch_180_rotation_is_flip(rng):
    bands = rng.random((4, 40, 40)).astype(np.float32)
    r = make_raster(bands)
    box = OrientedBox(19.3, 21.7, 10.0, 6.0, 33.0)
    p0 = extract_patch(r, box, 12, 20, unit_stats())
    p1 = extract_patch(r, box.rotated(180.0), 12, 20, unit_stats())
    assert np.allclose(p1, p0[:, ::-1, ::-1], atol=1e-5)


def test_patch_out_of_bounds_padded_with_band_mean(rng):
    bands = rng.random((4, 16, 16)).astype(np.float32)
    r = make_raster(bands)
    stats = ImageStats.from_raster(r)
    patch = extract_patch(r, OrientedBox(1.0, 1.0, 16.0, 16.0, 0.0), 16, 16, stats)
    assert np.isfinite(patch).all()
    # the far corner samples entirely outside: normalized pad is exactly 0
    assert patch[0, 0, 15] == 0.0 or abs(patch[0, 0, 15]) < 1e-6


def test_patch_normalization_centers_large_sample(rng):
    bands = rng.normal(0.5, 0.1, size=(4, 64, 64)).astype(np.float32).clip(0)
    r = make_raster(bands)
    stats = ImageStats.from_raster(r)
    patch = extract_patch(r, OrientedBox(32, 32, 60, 60, 0), 60, 60, stats)
    assert abs(float(patch.mean())) < 0.05


def test_patch_rejects_bad_dims_and_center():
    r = constant_raster(0.4)
    with pytest.raises(ValueError, match="positive"):
        extract_patch(r, OrientedBox(8, 8, 4, 4, 0), 0, 4, unit_stats())
    with pytest.raises(ValueError, match="outside"):
        extract_patch(r, OrientedBox(99, 8, 4, 4, 0), 4, 4, unit_stats())
