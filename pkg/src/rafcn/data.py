"""Synthetic long-range-context tiles and netpbm tile storage.

Each tile is a few rectangles of "plain" classes that are recognisable from
their colour, plus one target rectangle belonging to one of two confusable
classes. In a plain tile the target has its own class colour. In an
ambiguous tile it gets a texture shared by both confusable classes, and its
label is given away only by a small marker patch placed far from it: a dark
marker means the first confusable class, a light marker the second. Marker
pixels carry the ignore label.

All region edges sit on a 4-pixel grid so the finest feature stride can
represent the labels exactly.
"""

from __future__ import annotations

import colorsys
import json
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, DataError

IGNORE_LABEL = 255
SPLITS = ("train", "val", "test")
GRID = 4
MARKER_COLORS = {0: (0.05, 0.05, 0.05), 1: (0.95, 0.95, 0.95)}
AMBIGUOUS_COLORS = ((0.35, 0.35, 0.35), (0.65, 0.65, 0.65))


@dataclass
class GeneratorConfig:
    tile: tuple[int, int] = (32, 32)
    num_classes: int = 4
    num_train: int = 2000
    num_val: int = 40
    num_test: int = 100
    ambiguity_rate: float = 0.5
    marker_distance: int = 8
    marker_cells: int = 1  # side length of the square marker, in grid cells
    marker_anchors: str = "corners"  # "corners": tile corners only; "grid": any grid cell far enough away
    target_cells: tuple[int, int] = (3, 4)  # side length range of the target, in grid cells
    decoys: int = 0  # marker-coloured patches drawn away from the corners; carry no label
    noise: float = 0.06
    seed: int = 0

    def __post_init__(self):
        self.tile = tuple(int(v) for v in self.tile)
        self.target_cells = tuple(int(v) for v in self.target_cells)
        self.validate()

    def validate(self) -> None:
        h, w = self.tile
        if h % GRID or w % GRID or h < 2 * GRID or w < 2 * GRID:
            raise ConfigError(f"tile {self.tile} must be a multiple of {GRID} and at least {2 * GRID}")
        if self.num_classes < 3:
            raise ConfigError("need at least 3 classes: one plain class plus the confusable pair")
        if min(self.num_train, self.num_val, self.num_test) < 1:
            raise ConfigError("split sizes must be >= 1")
        if not 0.0 <= self.ambiguity_rate <= 1.0:
            raise ConfigError(f"ambiguity_rate must lie in [0, 1], got {self.ambiguity_rate}")
        if not 0 <= self.marker_distance < min(h, w):
            raise ConfigError(f"marker_distance must be below the tile side, got {self.marker_distance}")
        if self.marker_anchors not in ("grid", "corners"):
            raise ConfigError(f"marker_anchors must be 'grid' or 'corners', got {self.marker_anchors!r}")
        if not 1 <= self.marker_cells * GRID <= min(h, w) // 2:
            raise ConfigError(f"marker_cells {self.marker_cells} does not fit the tile")
        lo, hi = self.target_cells
        if not 1 <= lo <= hi or hi * GRID > min(h, w):
            raise ConfigError(f"target_cells {self.target_cells} does not fit the tile")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")
        if self.decoys < 0:
            raise ConfigError(f"decoys must be >= 0, got {self.decoys}")

    @property
    def confusable(self) -> tuple[int, int]:
        return self.num_classes - 2, self.num_classes - 1

    def split_size(self, split: str) -> int:
        return {"train": self.num_train, "val": self.num_val, "test": self.num_test}[split]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tile"] = list(self.tile)
        d["target_cells"] = list(self.target_cells)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown generator config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Sample:
    image: np.ndarray  # 3 x H x W, values in [0, 1]
    labels: np.ndarray  # H x W int64, classes or IGNORE_LABEL
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.image.ndim != 3 or self.labels.shape != self.image.shape[1:]:
            raise DataError(f"image {self.image.shape} and labels {self.labels.shape} disagree")


@dataclass
class Dataset:
    config: GeneratorConfig
    train: list[Sample]
    val: list[Sample]
    test: list[Sample]

    def split(self, name: str) -> list[Sample]:
        if name not in SPLITS:
            raise ConfigError(f"unknown split '{name}'")
        return getattr(self, name)


def class_colors(k: int) -> np.ndarray:
    """Mean RGB per class: evenly spaced hues, alternating brightness."""
    out = np.empty((k, 3))
    for i in range(k):
        out[i] = colorsys.hsv_to_rgb(i / k, 0.75, 0.85 if i % 2 == 0 else 0.6)
    return out


def _gap(a: tuple[int, int, int, int], b: tuple[int, int, int, int]) -> int:
    """Chebyshev pixel gap between two (top, left, height, width) boxes; 0 when touching."""
    dy = max(a[0] - (b[0] + b[2]), b[0] - (a[0] + a[2]), 0)
    dx = max(a[1] - (b[1] + b[3]), b[1] - (a[1] + a[3]), 0)
    return max(dy, dx)


def render_tile(rng: np.random.Generator, cfg: GeneratorConfig, force_target: int | None = None,
                max_retries: int = 100) -> Sample:
    """Draw one tile.

    The random stream is consumed identically whatever the target class, so
    ``force_target`` can swap the confusable class of an otherwise identical
    tile (used to check that only the marker reveals the label).
    """
    h, w = cfg.tile
    gh, gw = h // GRID, w // GRID
    plain = cfg.num_classes - 2
    colors = class_colors(cfg.num_classes)

    which = int(rng.integers(2))
    if force_target is not None:
        which = int(force_target)
    target_class = cfg.confusable[which]
    ambiguous = bool(rng.random() < cfg.ambiguity_rate)
    noise = rng.normal(0.0, cfg.noise, size=(3, h, w))

    split_r = int(rng.integers(2, gh - 1)) if gh > 3 else 1
    split_c = int(rng.integers(2, gw - 1)) if gw > 3 else 1
    quad = rng.integers(plain, size=4)
    labels = np.empty((h, w), dtype=np.int64)
    labels[:split_r * GRID, :split_c * GRID] = quad[0]
    labels[:split_r * GRID, split_c * GRID:] = quad[1]
    labels[split_r * GRID:, :split_c * GRID] = quad[2]
    labels[split_r * GRID:, split_c * GRID:] = quad[3]

    lo, hi = cfg.target_cells
    marker = None
    for _ in range(max_retries):
        th, tw = (int(v) for v in rng.integers(lo, hi + 1, size=2))
        top, left = int(rng.integers(0, gh - th + 1)), int(rng.integers(0, gw - tw + 1))
        box = (top * GRID, left * GRID, th * GRID, tw * GRID)
        mc = cfg.marker_cells
        if cfg.marker_anchors == "corners":
            cells = [(r, c) for r in (0, gh - mc) for c in (0, gw - mc)]
        else:
            cells = [(r, c) for r in range(gh - mc + 1) for c in range(gw - mc + 1)]
        spots = [(r * GRID, c * GRID, mc * GRID, mc * GRID) for r, c in cells
                 if _gap(box, (r * GRID, c * GRID, mc * GRID, mc * GRID)) >= max(cfg.marker_distance, 1)]
        pick = int(rng.integers(len(spots))) if spots else -1
        if not ambiguous or spots:
            marker = spots[pick] if ambiguous else None
            break
    else:
        raise DataError(f"could not place a marker {cfg.marker_distance}px from the target "
                        f"after {max_retries} attempts")

    # Decoys are drawn before the class is painted in and take no class input, so
    # they cannot leak the label. Corners are reserved for the real marker.
    mc = cfg.marker_cells
    corners = {(r, c) for r in (0, gh - mc) for c in (0, gw - mc)}
    decoys = []
    for _ in range(cfg.decoys):
        r, c = int(rng.integers(gh - mc + 1)), int(rng.integers(gw - mc + 1))
        shade = int(rng.integers(2))
        spot = (r * GRID, c * GRID, mc * GRID, mc * GRID)
        taken = [box] + ([marker] if marker else []) + [d for d, _ in decoys]
        if (r, c) not in corners and all(_gap(spot, t) >= 1 for t in taken):
            decoys.append((spot, shade))

    image = colors[labels].transpose(2, 0, 1) + noise
    ty, tx, th_px, tw_px = box
    labels[ty:ty + th_px, tx:tx + tw_px] = target_class
    if ambiguous:
        yy, xx = np.mgrid[0:th_px, 0:tw_px]
        checker = ((yy + xx) % 2)[None]
        amb = np.asarray(AMBIGUOUS_COLORS)
        image[:, ty:ty + th_px, tx:tx + tw_px] = np.where(checker == 0, amb[0][:, None, None],
                                                          amb[1][:, None, None])
        my, mx, mh, mw = marker
        image[:, my:my + mh, mx:mx + mw] = np.asarray(MARKER_COLORS[which])[:, None, None]
        labels[my:my + mh, mx:mx + mw] = IGNORE_LABEL
    else:
        image[:, ty:ty + th_px, tx:tx + tw_px] = (colors[target_class][:, None, None]
                                                  + noise[:, ty:ty + th_px, tx:tx + tw_px])
    for (dy, dx, dh, dw), shade in decoys:
        image[:, dy:dy + dh, dx:dx + dw] = np.asarray(MARKER_COLORS[shade])[:, None, None]
        labels[dy:dy + dh, dx:dx + dw] = IGNORE_LABEL
    # quantise up front so the on-disk 8-bit copy is exact
    image = np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0
    meta = {"ambiguous": ambiguous, "target_class": target_class, "target_box": list(box),
            "marker_box": list(marker) if marker else None,
            "decoy_boxes": [list(d) for d, _ in decoys]}
    return Sample(image, labels, meta)


def generate(cfg: GeneratorConfig) -> Dataset:
    """Deterministic in ``cfg.seed``; each split draws from its own stream."""
    cfg.validate()
    splits = {}
    for i, name in enumerate(SPLITS):
        rng = np.random.default_rng([cfg.seed, i])
        splits[name] = [render_tile(rng, cfg) for _ in range(cfg.split_size(name))]
    return Dataset(cfg, **splits)


def split_iter(samples: Sequence[Sample], batch: int, shuffle_seed: int) -> Iterator[list[Sample]]:
    """Shuffled mini-batches; the last one may be short."""
    if batch < 1:
        raise ConfigError(f"batch must be >= 1, got {batch}")
    order = np.random.default_rng(shuffle_seed).permutation(len(samples))
    for start in range(0, len(order), batch):
        yield [samples[i] for i in order[start:start + batch]]


# ---------------------------------------------------------------------------
# netpbm


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _parse_header(raw: bytes, magic: bytes, path) -> tuple[int, int, int, int]:
    """Returns width, height, maxval and the offset of the first pixel byte."""
    if raw[:2] != magic:
        raise DataError(f"{path}: expected magic {magic.decode()}, got {raw[:2]!r}", offset=0)
    pos = 2
    values = []
    for name in ("width", "height", "maxval"):
        m = _TOKEN.match(raw, pos)
        if not m:
            raise DataError(f"{path}: header ended before {name}", offset=pos)
        try:
            values.append(int(m.group(1)))
        except ValueError:
            raise DataError(f"{path}: bad {name} {m.group(1)!r}", offset=m.start(1)) from None
        pos = m.end(1)
    if pos >= len(raw) or raw[pos:pos + 1] not in (b" ", b"\t", b"\n", b"\r"):
        raise DataError(f"{path}: missing whitespace after header", offset=pos)
    width, height, maxval = values
    if width < 1 or height < 1 or not 1 <= maxval <= 255:
        raise DataError(f"{path}: unsupported extents {width}x{height} or maxval {maxval}", offset=pos)
    return width, height, maxval, pos + 1


def _payload(raw: bytes, start: int, expected: int, path) -> np.ndarray:
    actual = len(raw) - start
    if actual < expected:
        raise DataError(f"{path}: truncated pixel data, expected {expected} bytes, got {actual}", offset=start)
    return np.frombuffer(raw, dtype=np.uint8, count=expected, offset=start)


def write_ppm(path, image: np.ndarray) -> None:
    """``3 x H x W`` floats in [0, 1] to binary P6 with maxval 255."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise DataError(f"PPM needs a 3 x H x W image, got {image.shape}")
    _, h, w = image.shape
    px = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + px.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    w, h, maxval, start = _parse_header(raw, b"P6", path)
    px = _payload(raw, start, w * h * 3, path).reshape(h, w, 3)
    return px.transpose(2, 0, 1).astype(np.float64) / maxval


def write_pgm(path, labels: np.ndarray) -> None:
    if labels.ndim != 2:
        raise DataError(f"PGM needs an H x W map, got {labels.shape}")
    if labels.min() < 0 or labels.max() > 255:
        raise DataError("PGM label values must lie in [0, 255]")
    h, w = labels.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + labels.astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    w, h, _, start = _parse_header(raw, b"P5", path)
    return _payload(raw, start, w * h, path).reshape(h, w).astype(np.int64)


def tile_paths(directory, index: int) -> tuple[Path, Path]:
    d = Path(directory)
    return d / f"img_{index:05d}.ppm", d / f"lab_{index:05d}.pgm"


def write_tile(sample: Sample, directory, index: int) -> None:
    img, lab = tile_paths(directory, index)
    write_ppm(img, sample.image)
    write_pgm(lab, sample.labels)


def read_tile(directory, index: int, num_classes: int | None = None,
              tile: tuple[int, int] | None = None) -> Sample:
    img_path, lab_path = tile_paths(directory, index)
    image = read_ppm(img_path)
    labels = read_pgm(lab_path)
    if image.shape[1:] != labels.shape:
        raise DataError(f"{img_path}: image {image.shape[1:]} and labels {labels.shape} disagree")
    if tile is not None and tuple(labels.shape) != tuple(tile):
        raise DataError(f"{lab_path}: extents {labels.shape} do not match configured tile {tuple(tile)}")
    if num_classes is not None:
        bad = (labels >= num_classes) & (labels != IGNORE_LABEL)
        if bad.any():
            flat = int(np.flatnonzero(bad)[0])
            header = len(lab_path.read_bytes()) - labels.size
            raise DataError(f"{lab_path}: label {int(labels.flat[flat])} outside [0, {num_classes})",
                            offset=header + flat)
    return Sample(image, labels)


def save_dataset(ds: Dataset, root) -> None:
    root = Path(root)
    for name in SPLITS:
        d = root / name
        d.mkdir(parents=True, exist_ok=True)
        for i, s in enumerate(ds.split(name)):
            write_tile(s, d, i)
    (root / "meta.json").write_text(json.dumps(ds.config.to_dict(), sort_keys=True, indent=2) + "\n")


def load_dataset(root, splits: Sequence[str] = SPLITS) -> Dataset:
    root = Path(root)
    meta = root / "meta.json"
    if not meta.exists():
        raise DataError(f"{root}: no meta.json, not a dataset directory")
    cfg = GeneratorConfig.from_dict(json.loads(meta.read_text()))
    parts = {}
    for name in SPLITS:
        if name in splits:
            parts[name] = [read_tile(root / name, i, cfg.num_classes, cfg.tile)
                           for i in range(cfg.split_size(name))]
        else:
            parts[name] = []
    return Dataset(cfg, **parts)
