import numpy as np
import pytest

from minircnn import autodiff as ad
from minircnn.boxes import Box
from minircnn.data import (DatasetManifest, Annotation, load_manifest,
                           parse_annotations, prepare_input, rescale_box,
                           resize_nearest, save_manifest, split)
from minircnn.errors import (ConfigError, DataError, FormatError,
                             ValidationError)
from minircnn.ppm import load_ppm, save_ppm
from minircnn.synthetic import SyntheticSceneSpec, generate_synthetic, render_scene


# ---------------------------------------------------------------------------
# PPM codec


def _write_ppm(path, w, h, pixels: bytes):
    path.write_bytes(b"P6\n%d %d\n255\n" % (w, h) + pixels)


def test_ppm_roundtrip_bytes(tmp_path):
    rng = np.random.default_rng(0)
    raw = rng.integers(0, 256, size=6 * 4 * 3, dtype=np.uint8).tobytes()
    src = tmp_path / "img.ppm"
    _write_ppm(src, 6, 4, raw)
    img = load_ppm(src)
    assert img.shape == (3, 4, 6)
    dst = tmp_path / "out.ppm"
    save_ppm(img, dst)
    assert dst.read_bytes() == src.read_bytes()


def test_ppm_white_pixel(tmp_path):
    src = tmp_path / "w.ppm"
    _write_ppm(src, 1, 1, b"\xff\xff\xff")
    img = load_ppm(src)
    assert np.array_equal(img.data, np.ones((3, 1, 1)))


def test_ppm_wrong_magic(tmp_path):
    src = tmp_path / "bad.ppm"
    src.write_bytes(b"P5\n1 1\n255\n\x00")
    with pytest.raises(FormatError) as exc:
        load_ppm(src)
    assert exc.value.offset == 0


def test_ppm_truncated(tmp_path):
    src = tmp_path / "short.ppm"
    src.write_bytes(b"P6\n2 2\n255\n\x00\x00\x00")
    with pytest.raises(FormatError) as exc:
        load_ppm(src)
    assert "truncated" in str(exc.value)


def test_ppm_bad_maxval_and_dims(tmp_path):
    src = tmp_path / "m.ppm"
    src.write_bytes(b"P6\n1 1\n65535\n\x00\x00")
    with pytest.raises(FormatError):
        load_ppm(src)
    src.write_bytes(b"P6\n0 5\n255\n")
    with pytest.raises(FormatError):
        load_ppm(src)


def test_ppm_header_comment(tmp_path):
    src = tmp_path / "c.ppm"
    src.write_bytes(b"P6\n# a comment\n1 1\n255\n\x01\x02\x03")
    img = load_ppm(src)
    assert np.allclose(img.data.ravel(), np.array([1, 2, 3]) / 255.0)


# ---------------------------------------------------------------------------
# annotations


def _make_image(dirpath, name, w=100, h=100):
    arr = np.zeros((3, h, w))
    save_ppm(arr, dirpath / name)


def test_parse_single_record(tmp_path):
    _make_image(tmp_path, "img1.ppm")
    f = tmp_path / "ann.tsv"
    f.write_text("img1.ppm\tka\t10 10 50 60\n")
    m = parse_annotations(f)
    assert m.classes == ("ka",)
    assert len(m.annotations) == 1
    assert m.annotations[0].boxes == (("ka", Box(10, 10, 50, 60)),)


def test_parse_merges_same_image(tmp_path):
    _make_image(tmp_path, "img1.ppm")
    f = tmp_path / "ann.tsv"
    f.write_text("img1.ppm\tka\t10 10 50 60\nimg1.ppm\tkha\t1 2 3 4\n")
    m = parse_annotations(f)
    assert len(m.annotations) == 1
    assert len(m.annotations[0].boxes) == 2
    assert m.classes == ("ka", "kha")


def test_parse_inverted_box(tmp_path):
    f = tmp_path / "ann.tsv"
    f.write_text("img1.ppm\tka\t50 10 10 60\n")
    with pytest.raises(ValidationError):
        parse_annotations(f, validate_bounds=False)


def test_parse_malformed_line(tmp_path):
    f = tmp_path / "ann.tsv"
    f.write_text("img1.ppm\tka\n")
    with pytest.raises(FormatError) as exc:
        parse_annotations(f, validate_bounds=False)
    assert "line 1" in str(exc.value)


def test_parse_out_of_bounds_box(tmp_path):
    _make_image(tmp_path, "img1.ppm", w=40, h=40)
    f = tmp_path / "ann.tsv"
    f.write_text("img1.ppm\tka\t10 10 50 60\n")
    with pytest.raises(ValidationError) as exc:
        parse_annotations(f)
    assert "img1.ppm" in str(exc.value)


def test_parse_missing_image(tmp_path):
    f = tmp_path / "ann.tsv"
    f.write_text("gone.ppm\tka\t1 1 5 5\n")
    with pytest.raises(DataError):
        parse_annotations(f)


# ---------------------------------------------------------------------------
# split


def test_split_80_20():
    anns = tuple(Annotation(f"i{k}.ppm", (("c", Box(0, 0, 1, 1)),)) for k in range(100))
    m = DatasetManifest(classes=("c",), annotations=anns)
    s = split(m, 0.8, seed=3)
    assert len(s.train_records) == 80
    assert len(s.test_records) == 20


def test_split_deterministic_and_partition():
    anns = tuple(Annotation(f"i{k}.ppm", (("c", Box(0, 0, 1, 1)),)) for k in range(37))
    m = DatasetManifest(classes=("c",), annotations=anns)
    a = split(m, 0.8, seed=7)
    b = split(m, 0.8, seed=7)
    assert a.split == b.split
    c = split(m, 0.8, seed=8)
    assert a.split != c.split
    names = {r.image for r in a.train_records} | {r.image for r in a.test_records}
    assert names == {f"i{k}.ppm" for k in range(37)}


def test_split_rounding_rule():
    anns = tuple(Annotation(f"i{k}.ppm", (("c", Box(0, 0, 1, 1)),)) for k in range(5))
    m = DatasetManifest(classes=("c",), annotations=anns)
    s = split(m, 0.8, seed=0)
    assert len(s.train_records) == 4
    assert len(s.test_records) == 1


def test_split_bad_ratio():
    m = DatasetManifest(classes=(), annotations=())
    with pytest.raises(ConfigError):
        split(m, 1.0, seed=0)


# ---------------------------------------------------------------------------
# manifest round trip


def test_manifest_roundtrip(tmp_path):
    anns = (Annotation("a.ppm", (("x", Box(1, 2, 3, 4)), ("y", Box(5, 6, 9, 9)))),
            Annotation("b.ppm", (("y", Box(0, 0, 7, 7)),)))
    m = split(DatasetManifest(classes=("x", "y"), annotations=anns), 0.5, seed=1)
    path = tmp_path / "manifest.tsv"
    save_manifest(m, path)
    back = load_manifest(path)
    assert back.classes == m.classes
    assert back.annotations == m.annotations
    assert back.split == m.split
    assert back.split_seed == 1
    # re-save is byte identical
    path2 = tmp_path / "again.tsv"
    save_manifest(back, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_manifest_unsplit_roundtrip(tmp_path):
    anns = (Annotation("a.ppm", (("x", Box(1, 2, 3, 4)),)),)
    m = DatasetManifest(classes=("x",), annotations=anns)
    path = tmp_path / "manifest.tsv"
    save_manifest(m, path)
    back = load_manifest(path)
    assert back.split is None
    assert back.annotations == m.annotations


def test_manifest_rejects_garbage(tmp_path):
    path = tmp_path / "m.tsv"
    path.write_text("not a header\n")
    with pytest.raises(FormatError):
        load_manifest(path)


# ---------------------------------------------------------------------------
# prepare_input


def test_prepare_identity_size():
    rng = np.random.default_rng(1)
    img = ad.Tensor(rng.uniform(0, 1, size=(3, 32, 32)))
    out = prepare_input(img, 32, 32, stride=16)
    assert np.array_equal(out.data, (img.data - 0.5) * 2.0)
    assert out.data.min() >= -1.0 and out.data.max() <= 1.0


def test_prepare_downscale_box_rescale():
    img = np.zeros((3, 100, 200))
    out = prepare_input(img, 96, 48, stride=16)
    assert out.shape == (3, 48, 96)
    b = rescale_box(Box(20, 10, 40, 30), 100 / 200, 50 / 100)
    assert (b.xmin, b.ymin, b.xmax, b.ymax) == (10, 5, 20, 15)


def test_prepare_rejects_indivisible():
    with pytest.raises(ConfigError):
        prepare_input(np.zeros((3, 32, 32)), 30, 32, stride=16)


def test_resize_nearest_exact_downscale():
    img = np.arange(16, dtype=np.float64).reshape(1, 4, 4)
    img = np.repeat(img, 3, axis=0)
    half = resize_nearest(img, 2, 2)
    assert np.array_equal(half[0], [[0, 2], [8, 10]])


# ---------------------------------------------------------------------------
# synthetic scenes


def _shape_pixels(image: np.ndarray) -> np.ndarray:
    """Oracle: shapes are saturated colors, backgrounds are pure gray."""
    spread = image.max(axis=0) - image.min(axis=0)
    return spread > 0.05


@pytest.mark.parametrize("background", ["flat", "gradient", "noise"])
def test_synthetic_box_matches_pixel_scan(background):
    spec = SyntheticSceneSpec(background=background, shapes_per_image=(1, 1),
                              occlusion_prob=0.0)
    for seed in range(8):
        rng = np.random.default_rng(seed)
        image, placed, _ = render_scene(spec, rng)
        assert len(placed) == 1
        _, box = placed[0]
        ys, xs = np.nonzero(_shape_pixels(image))
        assert float(xs.min()) == box.xmin
        assert float(ys.min()) == box.ymin
        assert float(xs.max() + 1) == box.xmax
        assert float(ys.max() + 1) == box.ymax


def test_synthetic_box_survives_ppm_roundtrip(tmp_path):
    # quantization to 8 bits must not blur the shape/background separation
    spec = SyntheticSceneSpec(shapes_per_image=(1, 1), occlusion_prob=0.0)
    m = generate_synthetic(spec, 5, seed=11, out_dir=tmp_path)
    for ann in m.annotations:
        img = load_ppm(tmp_path / ann.image)
        ys, xs = np.nonzero(_shape_pixels(img.data))
        _, box = ann.boxes[0]
        assert (float(xs.min()), float(ys.min())) == (box.xmin, box.ymin)
        assert (float(xs.max() + 1), float(ys.max() + 1)) == (box.xmax, box.ymax)


def test_synthetic_counts_and_determinism(tmp_path):
    spec = SyntheticSceneSpec(shapes_per_image=(1, 1))
    m1 = generate_synthetic(spec, 10, seed=5, out_dir=tmp_path / "a")
    assert len(m1.annotations) == 10
    assert sum(len(a.boxes) for a in m1.annotations) == 10
    m2 = generate_synthetic(spec, 10, seed=5, out_dir=tmp_path / "b")
    for a1, a2 in zip(m1.annotations, m2.annotations):
        assert a1.boxes == a2.boxes
        f1 = (tmp_path / "a" / a1.image).read_bytes()
        f2 = (tmp_path / "b" / a2.image).read_bytes()
        assert f1 == f2


def test_synthetic_boxes_inside_image():
    spec = SyntheticSceneSpec(shapes_per_image=(1, 3), occlusion_prob=0.8)
    for seed in range(10):
        image, placed, _ = render_scene(spec, np.random.default_rng(seed))
        for _, b in placed:
            assert 0 <= b.xmin < b.xmax <= spec.width
            assert 0 <= b.ymin < b.ymax <= spec.height


def test_synthetic_config_validation():
    with pytest.raises(ConfigError):
        SyntheticSceneSpec(background="plaid")
    with pytest.raises(ConfigError):
        SyntheticSceneSpec(classes=("hexagon",))
    with pytest.raises(ConfigError):
        SyntheticSceneSpec(shapes_per_image=(3, 1))
    with pytest.raises(ConfigError):
        generate_synthetic(SyntheticSceneSpec(), 0, seed=0, out_dir=".")
