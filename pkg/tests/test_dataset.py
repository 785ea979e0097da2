import json

import numpy as np
import pytest

from kampnet import dataset as ds
from kampnet.hu_coding import encode_slice

SMALL = ds.PhantomSpec(seed=3, subjects=6, size=48, depth=5)


@pytest.fixture(scope="module")
def volumes():
    return ds.generate_phantoms(SMALL)


def test_phantoms_are_deterministic_and_balanced(volumes):
    again = ds.generate_phantoms(SMALL)
    for a, b in zip(volumes, again):
        np.testing.assert_array_equal(a.voxels, b.voxels)
        assert a.meta == b.meta
    labels = [v.label for v in volumes]
    assert labels.count(0) == labels.count(1) == 3


def test_phantom_geometry(volumes):
    for v in volumes:
        v.validate()
        nx, ny, nz = v.dims
        assert v.voxels.shape == (nz, ny, nx) and v.voxels.dtype == np.int16
        zs = v.meta["selected_slices"]
        assert zs == [zs[0], zs[0] + 1, zs[0] + 2] and 0 <= zs[0] and zs[2] < nz
        r = v.meta["roi"]
        assert r["w"] == r["h"] == SMALL.roi_size
        assert 0 <= r["x"] <= nx - r["w"] and 0 <= r["y"] <= ny - r["h"]
        for cx, cy, z, rad, hu in v.meta["planted"]["calcifications"]:
            assert 300 <= hu <= 1000 and z == zs[1]
            assert r["x"] <= cx <= r["x"] + r["w"] and r["y"] <= cy <= r["y"] + r["h"]


def test_calcification_mask_marks_planted_voxels():
    spec = ds.PhantomSpec(seed=0, subjects=2, size=64, depth=5, calc_prob=1.0, calc_radius=0.04)
    v = ds.make_phantom(spec, 0)
    z = v.meta["selected_slices"][1]
    mask = ds.calcification_mask(v, z)
    assert mask.any()
    hu = [c[4] for c in v.meta["planted"]["calcifications"]]
    assert np.all(np.isin(v.voxels[z][mask], np.rint(hu).astype(int)))
    assert np.all(encode_slice(v.voxels[z])[1][mask] == 255)


def test_roi_matches_full_scale_ratio():
    assert ds.PhantomSpec(size=512).roi_size == 161
    assert ds.PhantomSpec(size=128).roi_size == 40


def test_null_spec_zeroes_every_effect():
    null = ds.PhantomSpec().null()
    for k, v in vars(null).items():
        if k.endswith("_effect"):
            assert v == 0.0


def test_null_cohort_clinical_features_do_not_depend_on_label():
    vols = ds.generate_phantoms(ds.PhantomSpec(seed=0, subjects=200, size=32, depth=3).null())
    feats = np.array([[v.meta["clinical"][k] for k in ds.CLINICAL_FEATURES] for v in vols])
    y = np.array([v.label for v in vols])
    diff = feats[y == 0].mean(0) - feats[y == 1].mean(0)
    se = np.sqrt(feats[y == 0].var(0) / 100 + feats[y == 1].var(0) / 100)
    assert np.all(np.abs(diff) < 4 * se)


def test_spec_validation():
    with pytest.raises(ValueError):
        ds.PhantomSpec(subjects=7)
    with pytest.raises(ValueError):
        ds.PhantomSpec(calc_hu_effect=-1)
    with pytest.raises(ValueError):
        ds.PhantomSpec(calc_hu=(320, 900), calc_hu_effect=200)


def test_kvol_round_trip_and_layout(tmp_path, volumes):
    v = volumes[0]
    ds.save_volume(v, tmp_path / v.subject_id)
    raw = (tmp_path / f"{v.subject_id}.kvol").read_bytes()
    assert raw[:8] == b"KVOL0001"
    nx, ny, nz = v.dims
    assert len(raw) == 8 + 2 * nx * ny * nz
    # x fastest: the second stored value is voxel (z=0, y=0, x=1)
    assert int.from_bytes(raw[10:12], "little", signed=True) == v.voxels[0, 0, 1]
    back = ds.load_volume(tmp_path / v.subject_id)
    np.testing.assert_array_equal(back.voxels, v.voxels)
    assert back.meta == json.loads(json.dumps(v.meta))


def test_kvol_errors(tmp_path, volumes):
    v = volumes[1]
    stem = tmp_path / v.subject_id
    ds.save_volume(v, stem)
    kvol = stem.with_suffix(".kvol")
    good = kvol.read_bytes()
    kvol.write_bytes(good[:-2])
    with pytest.raises(ds.TruncatedPayloadError):
        ds.load_volume(stem)
    kvol.write_bytes(good + b"\0\0")
    with pytest.raises(ds.ExtentMismatchError):
        ds.load_volume(stem)
    kvol.write_bytes(b"KVOL0002" + good[8:])
    with pytest.raises(ds.MagicMismatchError):
        ds.load_volume(stem)


def test_dataset_directory_round_trip(tmp_path, volumes):
    h1 = ds.write_dataset(volumes, SMALL, tmp_path / "a")
    h2 = ds.write_dataset(ds.generate_phantoms(SMALL), SMALL, tmp_path / "b")
    assert h1 == h2
    vols, info = ds.load_dataset(tmp_path / "a")
    assert info["sha256"] == h1 and [v.subject_id for v in vols] == info["subjects"]
    rows = ds.read_clinical_csv(tmp_path / "a" / "clinical.csv")
    assert set(rows) == set(info["subjects"])


def test_prepare_subject_shapes(volumes):
    s = ds.prepare_subject(volumes[0])
    w = SMALL.roi_size
    assert s.slices.shape == (3, 3, 48, 48) and s.slices.dtype == np.uint8
    assert s.patches.shape == (3, 3, w, w)
    assert s.clinical.shape == (4,) and s.calc_masks.shape == (3, w, w)


def test_resize_matches_opencv():
    cv2 = pytest.importorskip("cv2")
    img = np.random.default_rng(0).uniform(0, 255, (14, 14))
    for size in (24, 10):
        ref = cv2.resize(img, (size, size), interpolation=cv2.INTER_LINEAR)
        np.testing.assert_allclose(ds.resize_bilinear(img, size, size), ref, atol=1e-9)


def test_crops_and_augmentation():
    img = np.arange(3 * 20 * 20, dtype=np.float64).reshape(3, 20, 20)
    assert ds.crop_box(20, 20, 0.7) == (3, 3, 14)
    rng = np.random.default_rng(0)
    for _ in range(20):
        out, (y, x, side, ratio) = ds.augment(img, rng, 16)
        assert out.shape == (3, 16, 16)
        assert 0.6 <= ratio <= 0.8 and side == int(round(ratio * 20))
        assert 0 <= y <= 20 - side and 0 <= x <= 20 - side
    a = ds.augment(img, np.random.default_rng(5), 16)[0]
    b = ds.augment(img, np.random.default_rng(5), 16)[0]
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        ds.augment(np.zeros((3, 4, 4)), rng, 8)
