import json

import numpy as np
import pytest

from rafcn.data import (
    AMBIGUOUS_COLORS, GRID, IGNORE_LABEL, MARKER_COLORS, GeneratorConfig, _gap, generate, load_dataset,
    read_pgm, read_ppm, read_tile, render_tile, save_dataset, split_iter, tile_paths, write_pgm, write_ppm,
)
from rafcn.errors import ConfigError, DataError


def tiny(**kw):
    base = dict(num_train=12, num_val=4, num_test=6, seed=3)
    base.update(kw)
    return GeneratorConfig(**base)


@pytest.fixture(scope="module")
def ds():
    return generate(tiny(num_train=60))


# -- config ------------------------------------------------------------------------

@pytest.mark.parametrize("kw", [
    dict(tile=(30, 32)), dict(tile=(4, 32)), dict(num_classes=2), dict(num_val=0),
    dict(ambiguity_rate=1.5), dict(marker_distance=32), dict(target_cells=(3, 2)),
    dict(target_cells=(1, 9)), dict(noise=-0.1), dict(marker_cells=5), dict(marker_anchors="edges"),
    dict(decoys=-1),
])
def test_config_rejects(kw):
    with pytest.raises(ConfigError):
        GeneratorConfig(**kw)


def test_config_round_trip():
    cfg = tiny(marker_anchors="corners", target_cells=(2, 3))
    assert GeneratorConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ConfigError, match="unknown"):
        GeneratorConfig.from_dict({**cfg.to_dict(), "colour": 1})


# -- generator ---------------------------------------------------------------------

def test_split_sizes_and_shapes(ds):
    assert (len(ds.train), len(ds.val), len(ds.test)) == (60, 4, 6)
    for s in ds.train:
        assert s.image.shape == (3, 32, 32) and s.labels.shape == (32, 32)
        assert s.image.min() >= 0 and s.image.max() <= 1


def test_deterministic():
    a, b = generate(tiny()), generate(tiny())
    for x, y in zip(a.train + a.test, b.train + b.test):
        assert x.image.tobytes() == y.image.tobytes() and np.array_equal(x.labels, y.labels)
    c = generate(tiny(seed=4))
    assert any(x.image.tobytes() != y.image.tobytes() for x, y in zip(a.train, c.train))


def test_labels_and_grid(ds):
    k = ds.config.num_classes
    for s in ds.train:
        vals = set(np.unique(s.labels).tolist())
        assert vals <= set(range(k)) | {IGNORE_LABEL}
        # every label edge lies on the 4-pixel grid
        lab = s.labels
        rows = np.flatnonzero((lab[1:] != lab[:-1]).any(axis=1)) + 1
        cols = np.flatnonzero((lab[:, 1:] != lab[:, :-1]).any(axis=0)) + 1
        assert np.all(rows % GRID == 0) and np.all(cols % GRID == 0)


def test_images_are_8bit_exact(ds):
    for s in ds.train[:10]:
        assert np.array_equal(np.round(s.image * 255) / 255, s.image)


def test_target_and_marker_geometry(ds):
    cfg = ds.config
    seen_amb = 0
    for s in ds.train:
        m = s.meta
        ty, tx, th, tw = m["target_box"]
        assert np.all(s.labels[ty:ty + th, tx:tx + tw] == m["target_class"])
        assert m["target_class"] in cfg.confusable
        if m["ambiguous"]:
            seen_amb += 1
            my, mx, mh, mw = m["marker_box"]
            assert _gap(m["target_box"], m["marker_box"]) >= cfg.marker_distance
            assert np.all(s.labels[my:my + mh, mx:mx + mw] == IGNORE_LABEL)
            assert (s.labels == IGNORE_LABEL).sum() == mh * mw
            which = cfg.confusable.index(m["target_class"])
            assert np.all(s.image[:, my:my + mh, mx:mx + mw] == np.round(np.array(MARKER_COLORS[which]) * 255)[:, None, None] / 255)
        else:
            assert m["marker_box"] is None and not (s.labels == IGNORE_LABEL).any()
    assert 0 < seen_amb < len(ds.train)


def test_corner_anchors():
    ds = generate(tiny(marker_anchors="corners", ambiguity_rate=1.0, num_train=30))
    corners = {(0, 0), (0, 28), (28, 0), (28, 28)}
    for s in ds.train:
        my, mx, _, _ = s.meta["marker_box"]
        assert (my, mx) in corners


def test_marker_cells():
    ds = generate(tiny(marker_cells=2, ambiguity_rate=1.0, num_train=10))
    for s in ds.train:
        assert s.meta["marker_box"][2:] == [8, 8]


@pytest.mark.parametrize("rate,expect", [(0.0, 0), (1.0, 12)])
def test_ambiguity_rate_extremes(rate, expect):
    ds = generate(tiny(ambiguity_rate=rate))
    assert sum(s.meta["ambiguous"] for s in ds.train) == expect


def test_ambiguous_region_identical_between_classes():
    cfg = tiny(ambiguity_rate=1.0)
    for seed in range(25):
        a = render_tile(np.random.default_rng(seed), cfg, force_target=0)
        b = render_tile(np.random.default_rng(seed), cfg, force_target=1)
        assert a.meta["target_box"] == b.meta["target_box"] and a.meta["marker_box"] == b.meta["marker_box"]
        ty, tx, th, tw = a.meta["target_box"]
        region_a, region_b = a.image[:, ty:ty + th, tx:tx + tw], b.image[:, ty:ty + th, tx:tx + tw]
        assert np.array_equal(region_a, region_b)
        # the region holds the two shared grey levels in equal checkerboard proportion
        levels = np.round(np.array(AMBIGUOUS_COLORS)[:, 0] * 255) / 255
        hist_a = [np.sum(region_a[0] == v) for v in levels]
        assert hist_a == [np.sum(region_b[0] == v) for v in levels]
        assert sum(hist_a) == th * tw and abs(hist_a[0] - hist_a[1]) <= 1


def test_marker_is_the_only_difference():
    cfg = tiny(ambiguity_rate=1.0)
    for seed in range(25):
        a = render_tile(np.random.default_rng(seed), cfg, force_target=0)
        b = render_tile(np.random.default_rng(seed), cfg, force_target=1)
        my, mx, mh, mw = a.meta["marker_box"]
        mask = np.ones((32, 32), bool)
        mask[my:my + mh, mx:mx + mw] = False
        assert np.array_equal(a.image[:, mask], b.image[:, mask])
        assert not np.array_equal(a.image[:, ~mask], b.image[:, ~mask])


def test_decoys_avoid_corners_and_carry_no_label():
    cfg = tiny(decoys=6, ambiguity_rate=1.0, num_train=30)
    corners = {(0, 0), (0, 28), (28, 0), (28, 28)}
    shades = {round(MARKER_COLORS[k][0] * 255) / 255 for k in (0, 1)}
    seen = 0
    for s in generate(cfg).train:
        boxes = [s.meta["target_box"], s.meta["marker_box"]] + s.meta["decoy_boxes"]
        for i, d in enumerate(s.meta["decoy_boxes"]):
            seen += 1
            dy, dx, dh, dw = d
            assert (dy, dx) not in corners
            assert all(_gap(d, b) >= 1 for j, b in enumerate(boxes) if j != i + 2)
            assert (s.labels[dy:dy + dh, dx:dx + dw] == IGNORE_LABEL).all()
            assert len(set(s.image[0, dy:dy + dh, dx:dx + dw].ravel()) - shades) == 0
    assert seen > 30


def test_decoys_do_not_depend_on_the_class():
    cfg = tiny(decoys=4, ambiguity_rate=1.0)
    for seed in range(25):
        a = render_tile(np.random.default_rng(seed), cfg, force_target=0)
        b = render_tile(np.random.default_rng(seed), cfg, force_target=1)
        assert a.meta["decoy_boxes"] == b.meta["decoy_boxes"]
        my, mx, mh, mw = a.meta["marker_box"]
        mask = np.ones((32, 32), bool)
        mask[my:my + mh, mx:mx + mw] = False
        assert np.array_equal(a.image[:, mask], b.image[:, mask])


def test_marker_placement_failure():
    cfg = GeneratorConfig(tile=(16, 16), marker_distance=12, target_cells=(2, 2), ambiguity_rate=1.0)
    with pytest.raises(DataError, match="could not place"):
        render_tile(np.random.default_rng(0), cfg)


# -- batching ------------------------------------------------------------------------------

def test_split_iter_partition_and_partial_batch(ds):
    batches = list(split_iter(ds.train, 7, shuffle_seed=1))
    assert [len(b) for b in batches] == [7] * 8 + [4]
    ids = [id(s) for b in batches for s in b]
    assert sorted(ids) == sorted(id(s) for s in ds.train)


def test_split_iter_deterministic(ds):
    order = lambda seed: [id(s) for b in split_iter(ds.train, 5, seed) for s in b]
    assert order(3) == order(3)
    assert order(3) != order(4)
    with pytest.raises(ConfigError):
        next(split_iter(ds.train, 0, 0))


# -- netpbm ---------------------------------------------------------------------------------

def test_ppm_pgm_round_trip(tmp_path, ds):
    s = ds.train[0]
    write_ppm(tmp_path / "a.ppm", s.image)
    write_pgm(tmp_path / "a.pgm", s.labels)
    assert read_ppm(tmp_path / "a.ppm").tobytes() == s.image.tobytes()
    assert np.array_equal(read_pgm(tmp_path / "a.pgm"), s.labels)


def test_header_comments_and_maxval(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n3 1\n# two\n255\n\x00\x01\xff")
    assert read_pgm(tmp_path / "c.pgm").tolist() == [[0, 1, 255]]
    (tmp_path / "m.ppm").write_bytes(b"P6 1 1 15\n\x0f\x00\x05")
    assert np.allclose(read_ppm(tmp_path / "m.ppm")[:, 0, 0], [1.0, 0.0, 1 / 3])


@pytest.mark.parametrize("raw,match", [
    (b"P3\n1 1\n255\n\x00\x00\x00", "magic"),
    (b"P6\n1 1\n65535\n" + b"\x00" * 6, "maxval"),
    (b"P6\n2 2\n255\n" + b"\x00" * 11, "expected 12 bytes, got 11"),
    (b"P6\n2", "header ended"),
    (b"P6\nx 2\n255\n", "bad width"),
])
def test_ppm_errors(tmp_path, raw, match):
    (tmp_path / "bad.ppm").write_bytes(raw)
    with pytest.raises(DataError, match=match):
        read_ppm(tmp_path / "bad.ppm")


def test_label_out_of_range_reports_offset(tmp_path, ds):
    s = ds.train[1]
    _, lab = tile_paths(tmp_path, 0)
    write_ppm(tile_paths(tmp_path, 0)[0], s.image)
    bad = s.labels.copy()
    bad[2, 5] = 9
    write_pgm(lab, bad)
    with pytest.raises(DataError, match="label 9") as info:
        read_tile(tmp_path, 0, num_classes=6)
    header = len(b"P5\n32 32\n255\n")
    assert info.value.offset == header + 2 * 32 + 5
    assert lab.read_bytes()[info.value.offset] == 9


def test_tile_extent_mismatch(tmp_path, ds):
    write_ppm(tile_paths(tmp_path, 0)[0], ds.train[0].image)
    write_pgm(tile_paths(tmp_path, 0)[1], ds.train[0].labels)
    with pytest.raises(DataError, match="configured tile"):
        read_tile(tmp_path, 0, tile=(16, 16))


def test_dataset_round_trip(tmp_path):
    ds = generate(tiny())
    save_dataset(ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert back.config == ds.config
    for name in ("train", "val", "test"):
        for a, b in zip(ds.split(name), back.split(name)):
            assert a.image.tobytes() == b.image.tobytes() and np.array_equal(a.labels, b.labels)
    save_dataset(back, tmp_path / "e")
    for p in sorted((tmp_path / "d").rglob("*.p?m")):
        assert p.read_bytes() == (tmp_path / "e" / p.relative_to(tmp_path / "d")).read_bytes()


def test_load_dataset_requires_meta(tmp_path):
    with pytest.raises(DataError, match="meta.json"):
        load_dataset(tmp_path)
