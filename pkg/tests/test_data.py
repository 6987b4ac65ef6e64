import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from fusionnet.data import (DEFAULT_RATIOS, DataError, DatasetManifest, SplitSpec, affine_warp, augment,
                            bilinear_resize, load_and_preprocess, load_images, scan_directory, split,
                            split_sizes, synthesize, write_png_dataset)


def bilinear_oracle(img, height, width):
    """Per-pixel evaluation of the pixel-centre bilinear formula."""
    h, w = img.shape[:2]
    out = np.empty((height, width) + img.shape[2:])
    for i in range(height):
        sy = min(max((i + 0.5) * h / height - 0.5, 0.0), h - 1)
        y0 = int(np.floor(sy))
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        for j in range(width):
            sx = min(max((j + 0.5) * w / width - 0.5, 0.0), w - 1)
            x0 = int(np.floor(sx))
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
            bottom = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
            out[i, j] = top * (1 - fy) + bottom * fy
    return out


def test_bilinear_two_by_two_hand_oracle():
    img = np.array([[0.0, 255.0], [255.0, 0.0]])[:, :, None]
    expected = np.array([[0, 63.75, 191.25, 255],
                         [63.75, 95.625, 159.375, 191.25],
                         [191.25, 159.375, 95.625, 63.75],
                         [255, 191.25, 63.75, 0]])
    out = bilinear_resize(img, 4, 4)[:, :, 0]
    assert np.max(np.abs(out - expected)) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(1, 12), st.integers(1, 12), st.integers(0, 10**6))
def test_bilinear_matches_formula(h, w, oh, ow, seed):
    img = np.random.default_rng(seed).uniform(0, 255, (h, w, 2))
    assert np.allclose(bilinear_resize(img, oh, ow), bilinear_oracle(img, oh, ow), rtol=0, atol=1e-9)


def test_same_size_resize_is_identity():
    img = np.random.default_rng(0).uniform(0, 255, (7, 5, 3))
    assert np.max(np.abs(bilinear_resize(img, 7, 5) - img)) <= 1e-12


@pytest.mark.parametrize("value,expected", [(0, -1.0), (255, 1.0)])
@pytest.mark.parametrize("mode", ["L", "RGB"])
def test_constant_images_map_to_endpoints(tmp_path, value, expected, mode):
    path = tmp_path / "c.png"
    Image.new(mode, (10, 6), value if mode == "L" else (value,) * 3).save(path)
    for target in ((6, 10, 1), (4, 4, 3), (224, 224, 3)):
        out = load_and_preprocess(path, target)
        assert out.shape == target
        assert np.all(out == expected)


def test_preprocess_range_and_errors(tmp_path):
    rng = np.random.default_rng(1)
    path = tmp_path / "r.png"
    Image.fromarray(rng.integers(0, 256, (9, 13), dtype=np.uint8), mode="L").save(path)
    out = load_and_preprocess(path, (20, 7, 3))
    assert out.min() >= -1 and out.max() <= 1
    assert np.array_equal(out[..., 0], out[..., 2])
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"not a png")
    with pytest.raises(DataError):
        load_and_preprocess(bad, (4, 4, 1))
    deep = tmp_path / "deep.png"
    Image.fromarray(np.zeros((4, 4), dtype=np.uint16) + 300).save(deep)
    with pytest.raises(DataError):
        load_and_preprocess(deep, (4, 4, 1))


# --------------------------------------------------------------------------
# augmentation


def test_affine_identity_and_determinism():
    img = np.random.default_rng(2).standard_normal((16, 12, 2))
    assert np.max(np.abs(affine_warp(img, 0.0, 1.0) - img)) <= 1e-12
    a, b = augment(img, 42), augment(img, 42)
    assert a.tobytes() == b.tobytes()
    assert a.shape == img.shape
    assert augment(img, 43).tobytes() != a.tobytes()


def test_zoom_grows_disk_area():
    n = 129
    rr, cc = np.mgrid[0:n, 0:n]
    c = (n - 1) / 2
    disk = (((rr - c) ** 2 + (cc - c) ** 2) <= 30 ** 2).astype(float)[:, :, None]
    zoomed = affine_warp(disk, 0.0, 1.1)
    ratio = (zoomed > 0.5).sum() / (disk > 0.5).sum()
    assert ratio == pytest.approx(1.21, rel=0.02)


# --------------------------------------------------------------------------
# synthetic data


def test_synthesize_determinism_and_arity():
    a, b = synthesize(5, seed=3), synthesize(5, seed=3)
    assert a.images.tobytes() == b.images.tobytes() and np.array_equal(a.labels, b.labels)
    one = synthesize(1)
    assert len(one.labels) == 3 and sorted(one.labels) == [0, 1, 2]
    assert np.bincount(synthesize(7, seed=1).labels).tolist() == [7, 7, 7]


def test_synthetic_class_means_separate():
    ds = synthesize(100, seed=0, noise=0.1)
    lower_left = ds.images[:, 16:, :16, 0].mean(axis=(1, 2))
    gap = lower_left[ds.labels == 0].mean() - lower_left[ds.labels == 2].mean()
    assert gap > 3 * 0.1


def test_quadrant_layout_records_evidence():
    ds = synthesize(20, seed=0, layout="quadrant")
    q0 = ds.quadrants[ds.labels == 0]
    assert set(q0) <= {0, 1, 2, 3} and len(set(q0)) > 1
    assert np.all(ds.quadrants[ds.labels == 2] == -1)
    for img, q in zip(ds.images[ds.labels == 0], q0):
        quads = [img[:16, :16], img[:16, 16:], img[16:, :16], img[16:, 16:]]
        assert int(np.argmax([x.mean() for x in quads])) == q


def test_png_round_trip(tmp_path):
    ds = synthesize(2, seed=0)
    write_png_dataset(ds, tmp_path)
    manifest = scan_directory(tmp_path)
    assert manifest.classes == ("covid", "pneumonia", "normal")
    assert manifest.class_counts() == [2, 2, 2]
    images = load_images(manifest, (32, 32, 1))
    assert images.shape == (6, 32, 32, 1)
    assert (tmp_path / "manifest.csv").exists()


# --------------------------------------------------------------------------
# splits


def _manifest(counts):
    samples = [(f"{k}/{i}.png", k) for k, n in enumerate(counts) for i in range(n)]
    return DatasetManifest("", tuple(f"c{k}" for k in range(len(counts))), samples)


def test_default_split_sizes():
    assert split_sizes(21_272, DEFAULT_RATIOS) == (12_157, 3_219, 5_896)
    parts = split(_manifest([4_296, 5_824, 11_152]))
    assert tuple(len(p) for p in parts) == (12_157, 3_219, 5_896)


def test_equal_thirds_and_determinism():
    m = _manifest([3, 3, 3])
    spec = SplitSpec((1 / 3, 1 / 3, 1 / 3), seed=4)
    parts = split(m, spec)
    assert tuple(len(p) for p in parts) == (3, 3, 3)
    again = split(m, spec)
    assert all(np.array_equal(a, b) for a, b in zip(parts, again))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(3, 200), min_size=2, max_size=4), st.integers(0, 1000))
def test_split_partitions(counts, seed):
    m = _manifest(counts)
    parts = split(m, SplitSpec(seed=seed))
    joined = np.concatenate(parts)
    assert len(joined) == len(m) and len(set(joined.tolist())) == len(m)
    labels = m.labels
    for k, n in enumerate(counts):
        for part, ratio in zip(parts, DEFAULT_RATIOS):
            assert abs(np.sum(labels[part] == k) - n * ratio) <= 1


def test_split_errors():
    with pytest.raises(DataError):
        split(_manifest([2, 5]))
    with pytest.raises(ValueError):
        SplitSpec((0.5, 0.5, 0.5))
