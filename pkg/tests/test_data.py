import json

import cv2
import numpy as np
import pytest

from ropeinspect import data as D


def _same(a, b):
    assert a.id == b.id and a.label == b.label
    np.testing.assert_array_equal(a.color, b.color)
    np.testing.assert_array_equal(a.gt_mask, b.gt_mask)
    if a.depth is None:
        assert b.depth is None
    else:
        assert a.depth.dtype == b.depth.dtype
        np.testing.assert_array_equal(a.depth, b.depth)


def test_fixture_properties(fixture8):
    assert len(fixture8) == 8
    for i, s in enumerate(fixture8):
        frac = s.gt_mask.mean()
        assert 0.02 <= frac <= 0.30, (s.id, frac)
        assert s.label == ("abnormal" if i % 2 else "normal")
        assert s.depth[s.gt_mask == 0].max() == 0
        on = s.depth[s.gt_mask > 0]
        assert on.min() >= D.DEPTH_MIN_MM and on.max() <= D.DEPTH_MAX_MM


@pytest.mark.parametrize("seed", [0, 1, 7])
def test_fixture_mask_fraction_many(seed):
    for s in D.generate_fixture(seed, 16, 64):
        assert 0.02 <= s.gt_mask.mean() <= 0.30


def test_fixture_determinism():
    a, b = D.generate_fixture(0, 4), D.generate_fixture(0, 4)
    for x, y in zip(a, b):
        _same(x, y)
    c = D.generate_fixture(1, 4)
    assert not np.array_equal(a[0].color, c[0].color)


def test_abnormal_diff_is_local():
    normal, abnormal = D.fixture_pair(0, 3)
    np.testing.assert_array_equal(normal.gt_mask, abnormal.gt_mask)
    diff = np.any(normal.color != abnormal.color, axis=-1)
    assert diff.any()
    assert not diff[normal.gt_mask == 0].any()
    n_labels, _ = cv2.connectedComponents(cv2.dilate(diff.astype(np.uint8), np.ones((5, 5), np.uint8)))
    assert n_labels - 1 == 1
    assert diff.mean() < 0.5 * normal.gt_mask.mean()


def test_fixture_pair_matches_generator():
    gen = D.generate_fixture(3, 4)
    n, a = D.fixture_pair(3, 3)
    _same(gen[3], a)
    assert not np.array_equal(n.color, a.color)


def test_round_trip(tmp_path, fixture8):
    samples = list(fixture8[:3])
    samples.append(D.RopeSample(color=samples[0].color, depth=None, gt_mask=samples[0].gt_mask, id="nodepth"))
    m = D.save_dataset(samples, tmp_path / "a", split="test")
    loaded = D.load_seg_dataset(D.DatasetManifest.load(tmp_path / "a"))
    for x, y in zip(samples, loaded):
        _same(x, y)
    D.save_dataset(loaded, tmp_path / "b", split="test")
    again = D.load_seg_dataset(D.DatasetManifest.load(tmp_path / "b" / "manifest.json"))
    for x, y in zip(loaded, again):
        _same(x, y)
    assert m.split == "test" and len(m) == 4


def test_manifest_schema(tmp_path, fixture8):
    import jsonschema
    from ropeinspect.schemas import MANIFEST

    D.save_dataset(fixture8[:2], tmp_path)
    jsonschema.validate(json.loads((tmp_path / "manifest.json").read_text()), MANIFEST)


def test_depth_clamp_and_all_black(tmp_path):
    d = np.array([[0, 100, 300], [1500, 3000, 4000]], np.uint16)
    np.testing.assert_array_equal(D.clamp_depth(d), [[0, 0, 300], [1500, 3000, 0]])
    D.write_depth(tmp_path / "d.png", d)
    np.testing.assert_array_equal(D.read_depth(tmp_path / "d.png"), D.clamp_depth(d))
    D.write_depth(tmp_path / "z.png", np.zeros((4, 4), np.uint16))
    assert D.read_depth(tmp_path / "z.png") is None


def test_depth_invariant_on_load(tmp_path, fixture8):
    D.save_dataset(fixture8, tmp_path)
    for s in D.load_seg_dataset(D.DatasetManifest.load(tmp_path), workers=2):
        assert s.depth is None or np.all((s.depth == 0) | ((s.depth >= 300) & (s.depth <= 3000)))


def test_shape_mismatch_entry_skipped(tmp_path, fixture8, caplog):
    m = D.save_dataset(fixture8[:2], tmp_path)
    D.write_mask(tmp_path / m.entries[1].mask, np.zeros((10, 10), np.uint8))
    out = D.load_seg_dataset(D.DatasetManifest.load(tmp_path))
    assert [s.id for s in out] == [m.entries[0].id]
    assert "rejected" in caplog.text


def test_unreadable_and_missing(tmp_path, fixture8):
    m = D.save_dataset(fixture8[:2], tmp_path)
    (tmp_path / m.entries[0].color).write_bytes(b"not a png")
    with pytest.raises(D.DatasetError, match="unreadable"):
        D.load_seg_dataset(D.DatasetManifest.load(tmp_path))
    (tmp_path / m.entries[0].color).unlink()
    with pytest.raises(D.DatasetError, match="missing"):
        D.load_seg_dataset(D.DatasetManifest.load(tmp_path))
    with pytest.raises(D.DatasetError):
        D.DatasetManifest.load(tmp_path / "nope.json")


def test_detect_dataset_requires_labels(tmp_path, fixture8):
    unl = [D.RopeSample(s.color, s.depth, s.gt_mask, s.id) for s in fixture8[:2]]
    D.save_dataset(unl, tmp_path)
    with pytest.raises(D.DatasetError, match="no label"):
        D.load_detect_dataset(D.DatasetManifest.load(tmp_path))


def test_detect_dataset(tmp_path, fixture8):
    D.save_dataset(fixture8, tmp_path)
    out = D.load_detect_dataset(D.DatasetManifest.load(tmp_path), out_size=32)
    assert D.class_counts(out) == {"normal": 4, "abnormal": 4}
    assert out[0].image.shape == (32, 32, 3)


def test_foreground_box_example():
    mask = np.zeros((200, 300), np.uint8)
    mask[50:120, 100:220] = 1  # 70 x 120 box
    assert D.foreground_box(mask, 0.05) == (44, 94, 126, 226)
    with pytest.raises(ValueError, match="empty"):
        D.foreground_box(np.zeros((4, 4)))


def test_extract_foreground_zeroes_background_and_squares():
    color = np.full((40, 60, 3), 200, np.uint8)
    mask = np.zeros((40, 60), np.uint8)
    mask[10:20, 5:45] = 1
    out = D.extract_foreground(color, mask, 0.0, 40)
    assert out.shape == (40, 40, 3)
    assert out[0, 0].sum() == 0 and out[20, 20].sum() > 0


def test_extract_foreground_idempotent(fixture8):
    out = D.extract_foreground(fixture8[0].color, fixture8[0].gt_mask, 0.05, 48)
    again = D.extract_foreground(out, np.ones(out.shape[:2], np.uint8), 0.05, 48)
    np.testing.assert_array_equal(out, again)


def test_sample_validation(fixture8):
    s = fixture8[0]
    with pytest.raises(D.DatasetError):
        D.RopeSample(s.color[:10], s.depth, s.gt_mask, "x")
    with pytest.raises(D.DatasetError):
        D.RopeSample(s.color, s.depth, s.gt_mask, "x", label="broken")
