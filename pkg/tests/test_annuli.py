import numpy as np
import pytest
from hypothesis import given, strategies as st

from apmkit.annuli import (
    FeatureMatrix, RadiiTable, annulus_offsets, default_radii, extract_features,
    feature_columns, load_features, load_radii, save_features, site_features,
)
from apmkit.errors import EmptyAnnulusError, SiteTableError

from conftest import make_image, make_sites


def naive_features(bands, mask, x, y, table):
    """Scan every pixel of the image and test the annulus norm directly."""
    nb, h, w = bands.shape
    med, mad = [], []
    for b in range(nb):
        mrow, arow = [], []
        for a, c in zip(table.inner, table.outer):
            vals = []
            for yy in range(h):
                for xx in range(w):
                    d = np.hypot(xx - x, yy - y)
                    if a <= d < c and mask[yy, xx]:
                        vals.append(float(bands[b, yy, xx]))
            v = np.sort(np.array(vals))
            n = len(v)
            m = v[n // 2] if n % 2 else 0.5 * (v[n // 2 - 1] + v[n // 2])
            dev = np.sort(np.abs(v - m))
            mrow.append(m)
            arow.append(dev[n // 2] if n % 2 else 0.5 * (dev[n // 2 - 1] + dev[n // 2]))
        med.append(mrow)
        mad.append(arow)
    return np.concatenate([np.array(med), np.array(mad)], axis=1).ravel()


def test_default_table_shape():
    t = default_radii()
    assert len(t) == 30
    assert t.inner[:3] == (0, 3, 6) and t.outer[:3] == (2, 5, 8)
    assert (t.inner[10], t.outer[10]) == (0, 4)
    assert (t.inner[29], t.outer[29]) == (63, 69)
    assert t.max_radius == 69


def test_offsets_match_enumeration():
    t = default_radii()
    offs = annulus_offsets(t)
    grid = [(dx, dy) for dy in range(-70, 71) for dx in range(-70, 71)]
    for k, (a, b) in enumerate(zip(t.inner, t.outer)):
        want = [(dx, dy) for dx, dy in grid if a * a <= dx * dx + dy * dy < b * b]
        assert [tuple(r) for r in offs[k]] == want
    assert len(offs[0]) == 9


@pytest.mark.parametrize("a,b", [(0, 1), (1, 2), (0.5, 1.5), (3, 3.5)])
def test_small_annuli_counts(a, b):
    (off,) = annulus_offsets(RadiiTable((a,), (b,)))
    d = np.hypot(off[:, 0], off[:, 1])
    assert ((d >= a) & (d < b)).all()
    n = sum(1 for dx in range(-4, 5) for dy in range(-4, 5) if a <= np.hypot(dx, dy) < b)
    assert len(off) == n


def test_bad_radii():
    with pytest.raises(ValueError):
        RadiiTable((2,), (2,))
    with pytest.raises(ValueError):
        RadiiTable((-1,), (2,))
    with pytest.raises(ValueError):
        RadiiTable((0, 1), (2,))


def test_radii_csv(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("index,r_in,r_out\n2,1,3.5\n1,0,2\n")
    t = load_radii(p)
    assert t.inner == (0, 1) and t.outer == (2, 3.5)
    (tmp_path / "bad.csv").write_text("a,b,c\n1,0,2\n")
    with pytest.raises(ValueError):
        load_radii(tmp_path / "bad.csv")


def test_worked_example_three_values():
    # 1x3 strip, annulus (0, 2) around the centre pixel sees {1, 2, 100}
    img = make_image(np.array([[[1.0, 2.0, 100.0]]]))
    t = RadiiTable((0,), (2,))
    f = site_features(img, 1, 0, annulus_offsets(t))
    assert f.tolist() == [2.0, 1.0]


def test_oracle_random(rng):
    t = RadiiTable((0, 1, 2.5, 4), (2, 3, 5, 7))
    for _ in range(5):
        bands = rng.integers(0, 20, size=(2, 17, 19)).astype(np.float64)
        mask = rng.random((17, 19)) > 0.15
        img = make_image(bands, mask=mask)
        x, y = int(rng.integers(0, 19)), int(rng.integers(0, 17))
        try:
            got = site_features(img, x, y, annulus_offsets(t), table=t)
        except EmptyAnnulusError:
            continue
        assert np.array_equal(got, naive_features(img.bands, mask, x, y, t))


def test_edge_clipping_and_empty_annulus():
    img = make_image(np.arange(25.0).reshape(1, 5, 5))
    t = RadiiTable((0, 10), (2, 12))
    with pytest.raises(EmptyAnnulusError) as e:
        site_features(img, 0, 0, annulus_offsets(t), site_id="abc", table=t)
    assert "abc" in str(e.value)
    t2 = RadiiTable((0,), (2,))
    # corner: only 4 offsets are in bounds -> values 0, 1, 5, 6
    assert site_features(img, 0, 0, annulus_offsets(t2)).tolist() == [3.0, 2.5]


def test_constant_image_zero_mad():
    img = make_image(np.full((2, 30, 30), 7.0))
    t = RadiiTable((0, 2, 5), (2, 5, 9))
    f = site_features(img, 15, 15, annulus_offsets(t))
    assert f.tolist() == [7.0] * 3 + [0.0] * 3 + [7.0] * 3 + [0.0] * 3


def test_column_layout(rng):
    img = make_image(rng.random((2, 40, 40)), ["u", "v"])
    t = RadiiTable((0, 2), (2, 4))
    fm = extract_features(img, make_sites([(20, 20), (10, 30)]), t)
    assert fm.columns == feature_columns(("u", "v"), 2) == (
        "u|median|1", "u|median|2", "u|mad|1", "u|mad|2",
        "v|median|1", "v|median|2", "v|mad|1", "v|mad|2")
    assert fm.shape == (2, 8)


@given(st.integers(0, 3), st.integers(-5, 5), st.integers(-5, 5))
def test_rotation_translation_invariance(k, tx, ty):
    rng = np.random.default_rng(7)
    a = rng.integers(0, 50, size=(1, 41, 41)).astype(np.float64)
    t = RadiiTable((0, 2, 4, 7), (2, 4, 7, 11))
    offs = annulus_offsets(t)
    base = site_features(make_image(a), 20, 20, offs)
    rot = np.rot90(a, k, axes=(1, 2)).copy()
    assert np.array_equal(site_features(make_image(rot), 20, 20, offs), base)
    big = np.zeros((1, 61, 61))
    big[:, 10 + ty:51 + ty, 10 + tx:51 + tx] = a
    assert np.array_equal(site_features(make_image(big), 30 + tx, 30 + ty, offs), base)


def test_extract_matches_site_features_and_parallel(rng):
    img = make_image(rng.random((3, 60, 60)))
    pts = rng.integers(5, 55, size=(8, 2))
    sites = make_sites(pts, labels=[1, 0] * 4)
    t = RadiiTable((0, 3, 6), (3, 6, 10))
    fm = extract_features(img, sites, t)
    offs = annulus_offsets(t)
    for k, (x, y) in enumerate(pts):
        assert np.array_equal(fm.values[k], site_features(img, int(x), int(y), offs))
    assert fm.equals(extract_features(img, sites, t, n_jobs=3))
    assert fm.labels.tolist() == [1, 0] * 4


def test_zero_sites(rng):
    img = make_image(rng.random((2, 10, 10)))
    fm = extract_features(img, make_sites(np.empty((0, 2), int)), RadiiTable((0,), (2,)))
    assert fm.shape == (0, 4)


def test_out_of_bounds_site(rng):
    img = make_image(rng.random((1, 10, 10)))
    with pytest.raises(SiteTableError):
        extract_features(img, make_sites([(12, 3)]), RadiiTable((0,), (2,)))


def test_feature_csv_round_trip(tmp_path, rng):
    fm = FeatureMatrix(rng.normal(size=(3, 4)) * 1e-7 + 1 / 3, ("a", "b", "c"),
                       ("x|median|1", "x|median|2", "x|mad|1", "x|mad|2"), [1, 0, 1])
    p = save_features(fm, tmp_path / "f.csv")
    assert load_features(p).equals(fm)
    nolab = FeatureMatrix(fm.values, fm.ids, fm.columns)
    assert load_features(save_features(nolab, tmp_path / "g.csv")).labels is None


def test_feature_matrix_rejects_nan():
    with pytest.raises(ValueError):
        FeatureMatrix(np.array([[np.nan]]), ("a",), ("c",))
