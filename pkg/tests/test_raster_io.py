import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from apmkit.errors import InfeasibleError, RasterFormatError, SiteTableError
from apmkit.raster_io import (
    MultiBandImage, RasterHeader, SiteTable, crop, load_raster, load_sites, sample_background,
    save_raster, save_sites,
)

from conftest import make_image, make_sites


def test_header_validation():
    with pytest.raises(ValueError):
        RasterHeader(0, 3, 1, ("a",))
    with pytest.raises(ValueError):
        RasterHeader(3, 3, 2, ("a", "a"))
    with pytest.raises(ValueError):
        RasterHeader(3, 3, 2, ("a",))


def test_header_json_fields():
    doc = RasterHeader(4, 3, 1, ("x",)).to_json()
    assert doc["dtype"] == "f32le" and doc["layout"] == "band_sequential_row_major"
    assert doc["pixel_size_m"] == 2.0 and doc["nodata_value"] == -9999.0


def test_non_finite_valid_pixel_rejected():
    b = np.ones((1, 2, 2), dtype=np.float32)
    b[0, 1, 1] = np.nan
    with pytest.raises(ValueError):
        make_image(b)
    # fine once masked
    mask = np.ones((2, 2), bool)
    mask[1, 1] = False
    img = make_image(b, mask=mask)
    assert not img.mask[1, 1]


def test_round_trip_bit_exact(tmp_path, rng):
    bands = rng.normal(size=(3, 7, 5)).astype(np.float32)
    mask = rng.random((7, 5)) > 0.2
    img = make_image(bands, ["a", "b", "c"], mask=mask)
    p = save_raster(img, tmp_path / "r.json")
    back = load_raster(p)
    assert back.equals(img)
    payload = (tmp_path / "r.bin").read_bytes()
    assert len(payload) == 3 * 7 * 5 * 4
    save_raster(back, tmp_path / "r2.json")
    assert (tmp_path / "r2.bin").read_bytes() == payload
    assert (tmp_path / "r2.json").read_bytes() == (tmp_path / "r.json").read_bytes()


def test_hand_built_file_nodata_count(tmp_path):
    hdr = {"width": 2, "height": 2, "band_count": 1, "band_names": ["v"], "nodata_value": -1.0,
           "pixel_size_m": 2.0, "dtype": "f32le", "layout": "band_sequential_row_major"}
    (tmp_path / "h.json").write_text(json.dumps(hdr))
    (tmp_path / "h.bin").write_bytes(np.array([1, -1, 3, 4], dtype="<f4").tobytes())
    img = load_raster(tmp_path / "h.json")
    assert img.mask.sum() == 3
    assert not img.mask[0, 1]


def test_short_payload_is_size_mismatch(tmp_path):
    img = make_image(np.zeros((1, 3, 3)))
    save_raster(img, tmp_path / "r.json")
    data = (tmp_path / "r.bin").read_bytes()
    (tmp_path / "r.bin").write_bytes(data[:-4])
    with pytest.raises(RasterFormatError):
        load_raster(tmp_path / "r.json")


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_raster(tmp_path / "nope.json")


def test_crop_identity_and_offset(rng):
    img = make_image(rng.normal(size=(2, 10, 10)))
    assert crop(img, 0, 0, 10, 10).equals(img)
    c = crop(img, 2, 2, 3, 3)
    assert (c.width, c.height) == (3, 3)
    assert c.bands[1, 0, 0] == img.bands[1, 2, 2]
    with pytest.raises(ValueError):
        crop(img, 8, 0, 3, 3)


@given(st.integers(0, 5), st.integers(0, 5), st.integers(1, 6), st.integers(1, 6),
       st.integers(0, 3), st.integers(0, 3), st.integers(1, 3), st.integers(1, 3))
def test_crop_composes(x0, y0, w, h, a, b, w2, h2):
    w, h = min(w, 12 - x0), min(h, 12 - y0)
    w2, h2 = min(w2, w - a), min(h2, h - b)
    if w2 < 1 or h2 < 1:
        return
    img = make_image(np.arange(2 * 12 * 12, dtype=float).reshape(2, 12, 12))
    nested = crop(crop(img, x0, y0, w, h), a, b, w2, h2)
    assert nested.equals(crop(img, x0 + a, y0 + b, w2, h2))


def test_sites_parse_and_errors(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("id,x,y,label\na,5,7,1\nb,9,2,0\n")
    t = load_sites(p)
    assert (t.n1, t.n0) == (1, 1)
    p.write_text("id,x,y,label\na,5,7,1\na,9,2,0\n")
    with pytest.raises(SiteTableError) as e:
        load_sites(p)
    assert e.value.site_ids == ["a"]
    p.write_text("id,x,y,label\na,5,7,2\n")
    with pytest.raises(SiteTableError):
        load_sites(p)
    p.write_text("id,x,y,label\na,5,seven,1\n")
    with pytest.raises(SiteTableError):
        load_sites(p)


def test_sites_round_trip(tmp_path):
    t = make_sites([[1, 2], [3, 4]], np.array([1, 0]))
    save_sites(t, tmp_path / "s.csv")
    assert load_sites(tmp_path / "s.csv").equals(t)


def test_background_zero_distance_count():
    img = make_image(np.ones((1, 20, 20)))
    sites = make_sites([[3, 3]])
    bg = sample_background(img, sites, 25, 0.0, seed=1)
    assert len(bg) == 25 and bg.n0 == 25


def test_background_deterministic_and_distance():
    img = make_image(np.ones((1, 300, 300)))
    sites = make_sites([[150, 150], [20, 280]])
    a = sample_background(img, sites, 40, 200.0, seed=7)
    b = sample_background(img, sites, 40, 200.0, seed=7)
    assert a.equals(b)
    # 200 m at 2 m/pixel: brute-force check of every pair
    d = np.sqrt((a.x[:, None] - sites.x[None]) ** 2 + (a.y[:, None] - sites.y[None]) ** 2)
    assert d.min() >= 100
    coords = set(zip(sites.x.tolist(), sites.y.tolist()))
    assert not coords & set(zip(a.x.tolist(), a.y.tolist()))


def test_background_respects_mask_and_infeasible():
    mask = np.zeros((10, 10), bool)
    mask[:2] = True
    img = make_image(np.ones((1, 10, 10)), mask=mask)
    bg = sample_background(img, make_sites([[9, 9]], np.array([0])), 15, 0.0, seed=0)
    assert img.mask[bg.y, bg.x].all()
    with pytest.raises(InfeasibleError):
        sample_background(img, make_sites([[9, 9]], np.array([0])), 21, 0.0, seed=0)


def test_site_bounds_check():
    img = make_image(np.ones((1, 5, 5)))
    with pytest.raises(SiteTableError) as e:
        make_sites([[5, 0]]).check_bounds(img)
    assert e.value.site_ids == ["s0"]


def test_image_immutable():
    img = make_image(np.ones((1, 3, 3)))
    with pytest.raises(ValueError):
        img.bands[0, 0, 0] = 2.0
    assert isinstance(img, MultiBandImage)


def test_sitetable_subset_concat():
    t = make_sites([[0, 0], [1, 1], [2, 2]], np.array([1, 0, 1]))
    s = t.subset(np.array([True, False, True]))
    assert s.ids == ("s0", "s2")
    u = s.concat(SiteTable(("z",), [4], [4], [0]))
    assert len(u) == 3 and u.index_of("z") == 2
