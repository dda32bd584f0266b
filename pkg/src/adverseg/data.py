"""Synthetic shape segmentation data, augmentation, one-hot encoding and PPM/PGM I/O."""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import IGNORE


class DataError(ValueError):
    pass


class FormatError(DataError):
    pass


@dataclass
class LabelMap:
    classes: np.ndarray  # [H, W] uint8, IGNORE marks excluded pixels
    num_classes: int

    def __post_init__(self):
        self.classes = np.asarray(self.classes, dtype=np.uint8)
        if self.classes.ndim != 2:
            raise DataError(f"LabelMap must be 2-d, got shape {self.classes.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.classes.shape

    def validate(self) -> "LabelMap":
        c = self.classes
        bad = (c != IGNORE) & (c >= self.num_classes)
        if bad.any():
            raise DataError(f"class id {int(c[bad].max())} >= num_classes {self.num_classes}")
        return self


@dataclass(frozen=True)
class Shape:
    kind: str  # "rectangle" or "ellipse"
    cls: int
    y0: int
    x0: int
    y1: int
    x1: int


@dataclass
class Sample:
    image: np.ndarray  # [3, H, W] float32 in [0, 1]
    labels: LabelMap
    shapes: tuple[Shape, ...] = ()

    def __post_init__(self):
        if self.image.shape[-2:] != self.labels.shape:
            raise DataError(f"image {self.image.shape} and labels {self.labels.shape} disagree")


@dataclass
class DatasetSpec:
    num_samples: int = 64
    height: int = 32
    width: int = 32
    num_classes: int = 4
    min_shapes: int = 1
    max_shapes: int = 3
    kinds: tuple[str, ...] = ("rectangle", "ellipse")
    noise_std: float = 0.1
    seed: int = 0
    border_ignore: bool = False

    def validate(self, depth: int = 0) -> "DatasetSpec":
        if self.num_classes < 2:
            raise DataError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.num_samples < 0:
            raise DataError("num_samples must be >= 0")
        if not 0 <= self.min_shapes <= self.max_shapes:
            raise DataError(f"bad shape count range [{self.min_shapes}, {self.max_shapes}]")
        if self.noise_std < 0:
            raise DataError("noise_std must be >= 0")
        if self.num_classes > 255:
            raise DataError("at most 255 classes fit in an 8-bit mask")
        unknown = set(self.kinds) - {"rectangle", "ellipse"}
        if unknown or not self.kinds:
            raise DataError(f"bad shape kinds {self.kinds}")
        f = 2 ** depth
        if self.height < 4 or self.width < 4 or self.height % f or self.width % f:
            raise DataError(f"{self.height}x{self.width} not divisible by {f}")
        return self


def class_colors(num_classes: int) -> np.ndarray:
    """Base RGB per class; background is mid grey, foreground classes spread over hue."""
    colors = np.empty((num_classes, 3), dtype=np.float64)
    colors[0] = 0.5
    for c in range(1, num_classes):
        h = (c - 1) / max(num_classes - 1, 1)
        colors[c] = _hsv_to_rgb(h, 0.8, 0.9)
    return colors


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6) % 6
    f = h * 6 - int(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i])


def shape_mask(shape: Shape, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    if shape.kind == "rectangle":
        return (yy >= shape.y0) & (yy < shape.y1) & (xx >= shape.x0) & (xx < shape.x1)
    cy, cx = (shape.y0 + shape.y1) / 2, (shape.x0 + shape.x1) / 2
    ry, rx = (shape.y1 - shape.y0) / 2, (shape.x1 - shape.x0) / 2
    return ((yy + 0.5 - cy) / ry) ** 2 + ((xx + 0.5 - cx) / rx) ** 2 <= 1.0


def _random_shape(rng: np.random.Generator, spec: DatasetSpec) -> Shape:
    h, w = spec.height, spec.width
    kind = spec.kinds[int(rng.integers(len(spec.kinds)))]
    cls = int(rng.integers(1, spec.num_classes))
    sh = int(rng.integers(max(2, h // 6), max(3, h // 2) + 1))
    sw = int(rng.integers(max(2, w // 6), max(3, w // 2) + 1))
    y0 = int(rng.integers(0, h - sh + 1))
    x0 = int(rng.integers(0, w - sw + 1))
    return Shape(kind, cls, y0, x0, y0 + sh, x0 + sw)


def render_sample(shapes: Sequence[Shape], spec: DatasetSpec, rng: np.random.Generator) -> Sample:
    h, w = spec.height, spec.width
    colors = class_colors(spec.num_classes)
    labels = np.zeros((h, w), dtype=np.uint8)
    for s in shapes:  # later shapes occlude earlier ones
        labels[shape_mask(s, h, w)] = s.cls
    image = colors[labels].transpose(2, 0, 1)
    if spec.noise_std > 0:
        image = image + rng.normal(0.0, spec.noise_std, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    if spec.border_ignore:
        labels = border_to_ignore(labels)
    return Sample(image, LabelMap(labels, spec.num_classes), tuple(shapes))


def gen_sample(spec: DatasetSpec, index: int) -> Sample:
    rng = np.random.default_rng([spec.seed, index])
    k = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
    shapes = [_random_shape(rng, spec) for _ in range(k)]
    return render_sample(shapes, spec, rng)


def gen_synthetic(spec: DatasetSpec) -> list[Sample]:
    """Deterministic dataset; sample ``i`` depends only on ``(spec, i)``."""
    spec.validate()
    return [gen_sample(spec, i) for i in range(spec.num_samples)]


def border_to_ignore(labels: np.ndarray) -> np.ndarray:
    """Mark foreground pixels touching a different class (4-neighbourhood) as IGNORE."""
    lab = labels.astype(np.int32)
    p = np.pad(lab, 1, mode="edge")
    diff = np.zeros(lab.shape, dtype=bool)
    for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        diff |= p[1 + dy : 1 + dy + lab.shape[0], 1 + dx : 1 + dx + lab.shape[1]] != lab
    out = labels.copy()
    out[diff & (lab != 0) & (lab != IGNORE)] = IGNORE
    return out


# ---------------------------------------------------------------------------
# augmentation


def resize_bilinear(img: np.ndarray, nh: int, nw: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize of ``[C, H, W]`` with edge clamping."""
    _, h, w = img.shape

    def axis(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    y0, y1, fy = axis(nh, h)
    x0, x1, fx = axis(nw, w)
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bot = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    return (top * (1 - fy)[:, None] + bot * fy[:, None]).astype(img.dtype)


def resize_nearest(labels: np.ndarray, nh: int, nw: int) -> np.ndarray:
    h, w = labels.shape
    ys = np.minimum(((np.arange(nh) + 0.5) * h / nh).astype(int), h - 1)
    xs = np.minimum(((np.arange(nw) + 0.5) * w / nw).astype(int), w - 1)
    return labels[ys][:, xs]


def augment(sample: Sample, scale_range: tuple[float, float], out_h: int, out_w: int, seed) -> Sample:
    """Shared random rescale, then crop or pad to ``out_h x out_w`` at a shared offset."""
    lo, hi = scale_range
    if not hi >= lo > 0:
        raise ValueError(f"bad scale range {scale_range}")
    rng = np.random.default_rng(seed)
    s = lo if hi == lo else float(rng.uniform(lo, hi))
    h, w = sample.labels.shape
    nh, nw = max(1, int(round(h * s))), max(1, int(round(w * s)))
    img = sample.image if (nh, nw) == (h, w) else resize_bilinear(sample.image, nh, nw)
    lab = sample.labels.classes if (nh, nw) == (h, w) else resize_nearest(sample.labels.classes, nh, nw)

    out_img = np.zeros((img.shape[0], out_h, out_w), dtype=np.float32)
    out_lab = np.full((out_h, out_w), IGNORE, dtype=np.uint8)
    # offset > 0 crops the source, offset < 0 pads the target
    oy = int(rng.integers(0, nh - out_h + 1)) if nh >= out_h else -int(rng.integers(0, out_h - nh + 1))
    ox = int(rng.integers(0, nw - out_w + 1)) if nw >= out_w else -int(rng.integers(0, out_w - nw + 1))
    sy, ty = max(oy, 0), max(-oy, 0)
    sx, tx = max(ox, 0), max(-ox, 0)
    ch, cw = min(nh - sy, out_h - ty), min(nw - sx, out_w - tx)
    out_img[:, ty : ty + ch, tx : tx + cw] = img[:, sy : sy + ch, sx : sx + cw]
    out_lab[ty : ty + ch, tx : tx + cw] = lab[sy : sy + ch, sx : sx + cw]
    return Sample(out_img, LabelMap(out_lab, sample.labels.num_classes))


# ---------------------------------------------------------------------------
# encoding


def one_hot(labels, num_classes: int | None = None) -> np.ndarray:
    """``[..., H, W]`` class ids -> ``[..., C, H, W]``; IGNORE pixels become uniform 1/C."""
    if isinstance(labels, LabelMap):
        num_classes = labels.num_classes if num_classes is None else num_classes
        labels = labels.classes
    if num_classes is None:
        raise ValueError("num_classes required for raw label arrays")
    y = np.asarray(labels)
    ignore = y == IGNORE
    if np.any(y[~ignore] >= num_classes):
        raise DataError(f"class id >= num_classes {num_classes}")
    out = (np.arange(num_classes).reshape((num_classes, 1, 1)) == np.expand_dims(y, -3)).astype(np.float32)
    if ignore.any():
        out = np.where(np.expand_dims(ignore, -3), np.float32(1.0 / num_classes), out)
    return out


# ---------------------------------------------------------------------------
# netpbm I/O

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _read_pnm(path, magic: bytes) -> tuple[int, int, memoryview]:
    buf = Path(path).read_bytes()
    tokens, pos = [], 0
    for _ in range(4):
        m = _TOKEN.match(buf, pos)
        if m is None:
            raise FormatError(f"{path}: truncated header")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != magic:
        raise FormatError(f"{path}: expected {magic!r}, got {tokens[0]!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: malformed header") from exc
    if maxval != 255 or w < 1 or h < 1:
        raise FormatError(f"{path}: only 8-bit images are supported (maxval {maxval})")
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise FormatError(f"{path}: missing header terminator")
    return w, h, memoryview(buf)[pos + 1 :]


def write_image(path, image: np.ndarray) -> None:
    img = np.asarray(getattr(image, "data", image))
    if img.ndim != 3 or img.shape[0] != 3:
        raise DataError(f"expected [3, H, W] image, got {img.shape}")
    _, h, w = img.shape
    px = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8).transpose(1, 2, 0)
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + px.tobytes())


def read_image(path) -> np.ndarray:
    w, h, payload = _read_pnm(path, b"P6")
    if len(payload) < 3 * w * h:
        raise FormatError(f"{path}: truncated pixel data")
    px = np.frombuffer(payload, dtype=np.uint8, count=3 * w * h).reshape(h, w, 3)
    return (px.transpose(2, 0, 1).astype(np.float32) / 255.0).astype(np.float32)


def write_mask(path, labels) -> None:
    lab = np.asarray(getattr(labels, "classes", labels))
    if lab.ndim != 2:
        raise DataError(f"expected [H, W] mask, got {lab.shape}")
    h, w = lab.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + lab.astype(np.uint8).tobytes())


def read_mask(path, num_classes: int) -> LabelMap:
    w, h, payload = _read_pnm(path, b"P5")
    if len(payload) < w * h:
        raise FormatError(f"{path}: truncated pixel data")
    lab = np.frombuffer(payload, dtype=np.uint8, count=w * h).reshape(h, w).copy()
    return LabelMap(lab, num_classes)


# ---------------------------------------------------------------------------
# manifests


def write_dataset(samples: Sequence[Sample], out_dir) -> Path:
    """Write ``images/*.ppm``, ``masks/*.pgm`` and ``manifest.txt``; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, s in enumerate(samples):
        ip, mp = f"images/{i:05d}.ppm", f"masks/{i:05d}.pgm"
        write_image(out / ip, s.image)
        write_mask(out / mp, s.labels)
        lines.append(f"{ip},{mp}\n")
    manifest = out / "manifest.txt"
    manifest.write_text("".join(lines))
    return manifest


def read_manifest(path) -> list[tuple[Path, Path]]:
    base = Path(path).parent
    pairs = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 2:
            raise FormatError(f"{path}:{lineno}: expected 'image_path,mask_path'")
        pairs.append((base / parts[0], base / parts[1]))
    return pairs


def load_manifest(path, num_classes: int) -> list[Sample]:
    return [Sample(read_image(i), read_mask(m, num_classes)) for i, m in read_manifest(path)]
