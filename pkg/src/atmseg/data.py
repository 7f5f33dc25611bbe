"""Synthetic colored-shapes dataset plus binary netpbm sample I/O.

Each sample is an RGB image of filled rectangles, circles, and triangles
over a flat background, with per-class colors and additive pixel noise, and
the pixel-exact label map produced by the same paint-order rasterization.
Images persist as binary P6, labels as binary P5 (value 255 reserved as the
ignore label); generation is deterministic per seed.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from atmseg.losses import IGNORE_LABEL, DataError
from atmseg.tensor import ContractViolation, Rng


class ParseError(ValueError):
    """Malformed netpbm input; carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte {offset})")
        self.offset = offset


# distinct, easily separable colors; background first
PALETTE = np.array([
    (40, 40, 40),     # background
    (220, 60, 50),    # red
    (60, 190, 70),    # green
    (60, 90, 220),    # blue
    (230, 210, 60),   # yellow
    (200, 70, 200),   # magenta
    (70, 210, 210),   # cyan
    (240, 140, 40),   # orange
    (140, 220, 140),  # pale green
    (180, 180, 240),  # pale blue
], dtype=np.float64)


@dataclass
class DatasetSpec:
    seed: int = 0
    image_hw: tuple = (64, 64)
    n_classes: int = 5
    shapes_min: int = 1
    shapes_max: int = 3
    size_min: int = 18
    size_max: int = 40
    noise_std: float = 8.0
    train_count: int = 200
    val_count: int = 50
    class_subset: tuple = None  # foreground ids to draw from (None = all)

    def __post_init__(self):
        if self.n_classes < 2:
            raise ContractViolation("need background plus at least one class")
        if self.n_classes > len(PALETTE):
            raise ContractViolation(
                f"palette supports up to {len(PALETTE)} classes"
            )
        if self.shapes_min < 0 or self.shapes_max < self.shapes_min:
            raise ContractViolation("bad shapes-per-image range")
        if self.class_subset is not None:
            subset = tuple(int(c) for c in self.class_subset)
            if any(c < 1 or c >= self.n_classes for c in subset):
                raise ContractViolation(
                    f"class subset {subset} outside foreground range"
                )
            self.class_subset = subset


def _raster_rect(labels, cls, rng: Rng, H, W, size):
    h = int(rng.integers(size // 2, size + 1))
    w = int(rng.integers(size // 2, size + 1))
    r0 = int(rng.integers(0, max(H - h, 1)))
    c0 = int(rng.integers(0, max(W - w, 1)))
    labels[r0:r0 + h, c0:c0 + w] = cls


def _raster_circle(labels, cls, rng: Rng, H, W, size):
    rad = max(size // 2, 2)
    cy = int(rng.integers(rad, H - rad))
    cx = int(rng.integers(rad, W - rad))
    yy, xx = np.ogrid[:H, :W]
    inside = (yy - cy) ** 2 + (xx - cx) ** 2 <= rad * rad
    labels[inside] = cls


def _raster_triangle(labels, cls, rng: Rng, H, W, size):
    # three random vertices inside a size-bounded box; redraw skinny ones
    r0 = int(rng.integers(0, max(H - size, 1)))
    c0 = int(rng.integers(0, max(W - size, 1)))
    for _ in range(16):
        pts = np.stack([
            rng.integers(0, size, 2) + (r0, c0) for _ in range(3)
        ]).astype(np.int64)
        (ay, ax), (by, bx), (cy, cx) = pts
        area2 = abs((bx - ax) * (cy - ay) - (cx - ax) * (by - ay))
        if area2 >= size * size // 4:
            break
    yy, xx = np.mgrid[:H, :W]
    d1 = (yy - by) * (ax - bx) - (xx - bx) * (ay - by)
    d2 = (yy - cy) * (bx - cx) - (xx - cx) * (by - cy)
    d3 = (yy - ay) * (cx - ax) - (xx - ax) * (cy - ay)
    neg = (d1 < 0) | (d2 < 0) | (d3 < 0)
    pos = (d1 > 0) | (d2 > 0) | (d3 > 0)
    labels[~(neg & pos)] = cls


_SHAPES = (_raster_rect, _raster_circle, _raster_triangle)


def render_sample(spec: DatasetSpec, rng: Rng):
    """One (uint8 image [H, W, 3], int64 labels [H, W]) pair."""
    H, W = spec.image_hw
    labels = np.zeros((H, W), dtype=np.int64)
    fg = spec.class_subset or tuple(range(1, spec.n_classes))
    cap = min(H, W) - 2  # shapes must fit the canvas
    count = int(rng.integers(spec.shapes_min, spec.shapes_max + 1))
    for _ in range(count):
        cls = int(fg[rng.integers(0, len(fg))])
        kind = _SHAPES[rng.integers(0, len(_SHAPES))]
        size = min(int(rng.integers(spec.size_min, spec.size_max + 1)), cap)
        kind(labels, cls, rng, H, W, size)
    image = PALETTE[labels] + rng.normal((H, W, 3), spec.noise_std)
    image = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    return image, labels


_SPLIT_TAGS = {"train": 0x7261, "val": 0x7661}


def generate_dataset(spec: DatasetSpec, out_dir: str):
    """Write train/ and val/ sample pairs plus a key=value meta file."""
    rng = Rng(spec.seed)
    counts = {"train": spec.train_count, "val": spec.val_count}
    for split, n in counts.items():
        split_dir = os.path.join(out_dir, split)
        os.makedirs(split_dir, exist_ok=True)
        srng = rng.split(_SPLIT_TAGS[split])
        for i in range(n):
            image, labels = render_sample(spec, srng)
            write_sample(os.path.join(split_dir, f"sample_{i:05d}"), image, labels)
    meta = os.path.join(out_dir, "dataset.txt")
    H, W = spec.image_hw
    with open(meta, "w", encoding="utf-8") as fh:
        fh.write(f"n_classes={spec.n_classes}\n")
        fh.write(f"image={H}x{W}\n")
        fh.write(f"seed={spec.seed}\n")
        fh.write(f"train={spec.train_count}\n")
        fh.write(f"val={spec.val_count}\n")
    return out_dir


def load_split(root: str, split: str, n_classes: int):
    """All (image, labels) pairs of a split, validated against n_classes."""
    split_dir = os.path.join(root, split)
    stems = sorted(
        os.path.join(split_dir, f[:-4])
        for f in os.listdir(split_dir) if f.endswith(".ppm")
    )
    out = []
    for stem in stems:
        image, labels = read_sample(stem)
        bad = labels[(labels >= n_classes) & (labels != IGNORE_LABEL)]
        if bad.size:
            raise DataError(
                f"{stem}: label {int(bad[0])} >= {n_classes} and not ignore"
            )
        out.append((image, labels))
    return out


def dataset_meta(root: str) -> dict:
    meta = {}
    with open(os.path.join(root, "dataset.txt"), encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                k, _, v = line.partition("=")
                meta[k] = v
    return meta


# ---------------------------------------------------------------------------
# binary netpbm

def _write_pnm(path: str, magic: bytes, payload: bytes, w: int, h: int):
    header = magic + b"\n" + f"{w} {h}\n255\n".encode()
    with open(path, "wb") as fh:
        fh.write(header + payload)


def write_ppm(path: str, image: np.ndarray):
    image = np.asarray(image, dtype=np.uint8)
    h, w, c = image.shape
    if c != 3:
        raise ContractViolation(f"P6 needs 3 channels, got {c}")
    _write_pnm(path, b"P6", image.tobytes(), w, h)


def write_pgm(path: str, gray: np.ndarray):
    gray = np.asarray(gray)
    if gray.min() < 0 or gray.max() > 255:
        raise DataError("P5 values must fit a byte")
    h, w = gray.shape
    _write_pnm(path, b"P5", gray.astype(np.uint8).tobytes(), w, h)


class _PnmReader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def fail(self, message: str):
        raise ParseError(message, self.pos)

    def token(self) -> bytes:
        blob = self.blob
        # skip whitespace and '#' comments
        while self.pos < len(blob):
            ch = blob[self.pos:self.pos + 1]
            if ch.isspace():
                self.pos += 1
            elif ch == b"#":
                nl = blob.find(b"\n", self.pos)
                if nl < 0:
                    self.fail("unterminated comment")
                self.pos = nl + 1
            else:
                break
        if self.pos >= len(blob):
            self.fail("unexpected end of header")
        start = self.pos
        while self.pos < len(blob) and not blob[self.pos:self.pos + 1].isspace():
            self.pos += 1
        return blob[start:self.pos]

    def int_token(self, what: str) -> int:
        tok = self.token()
        if not tok.isdigit():
            self.pos -= len(tok)
            self.fail(f"expected integer {what}, got {tok!r}")
        return int(tok)


def _read_pnm(path: str, magic: bytes, channels: int):
    with open(path, "rb") as fh:
        blob = fh.read()
    rd = _PnmReader(blob)
    tok = rd.token()
    if tok != magic:
        rd.pos -= len(tok)
        rd.fail(f"expected magic {magic.decode()}, got {tok!r}")
    w = rd.int_token("width")
    h = rd.int_token("height")
    maxval = rd.int_token("maxval")
    if maxval != 255:
        rd.fail(f"only maxval 255 is supported, got {maxval}")
    if rd.pos >= len(blob) or not blob[rd.pos:rd.pos + 1].isspace():
        rd.fail("missing whitespace after maxval")
    rd.pos += 1
    need = w * h * channels
    data = blob[rd.pos:rd.pos + need]
    if len(data) != need:
        rd.pos = len(blob)
        rd.fail(f"truncated pixel data, need {need} bytes, have {len(data)}")
    arr = np.frombuffer(data, dtype=np.uint8)
    if channels == 1:
        return arr.reshape(h, w)
    return arr.reshape(h, w, channels)


def read_ppm(path: str) -> np.ndarray:
    return _read_pnm(path, b"P6", 3)


def read_pgm(path: str) -> np.ndarray:
    return _read_pnm(path, b"P5", 1)


def write_sample(stem: str, image: np.ndarray, labels: np.ndarray):
    write_ppm(stem + ".ppm", image)
    write_pgm(stem + ".pgm", labels)


def read_sample(stem: str):
    image = read_ppm(stem + ".ppm")
    labels = read_pgm(stem + ".pgm").astype(np.int64)
    return image, labels


def image_to_input(image: np.ndarray) -> np.ndarray:
    """uint8 [H, W, 3] -> float64 in [0, 1]."""
    return np.asarray(image, dtype=np.float64) / 255.0
