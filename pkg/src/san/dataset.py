"""Image/mask/label ingestion and the synthetic shapes dataset.

On-disk layout (shared by the loader and ``gen-data``)::

    root/images/<id>.ppm   P6 colour image
    root/masks/<id>.pgm    P5 class-index mask (0 background, 1..L classes, 255 void)
    root/labels.txt        one "<class index>\\t<class name>" line per class
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import Prng

VOID = 255
SHAPE_NAMES = ("disc", "square", "triangle", "cross", "diamond")


class NetpbmError(ValueError):
    pass


class DatasetError(ValueError):
    pass


@dataclass
class SaliencySample:
    image: np.ndarray  # (3, h, w) in [0, 1]
    mask: np.ndarray  # (1, h, w) with values in {0, 1}
    label: int
    id: str

    def validate(self, num_classes: int | None = None):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise DatasetError(f"{self.id}: image must be (3, h, w)")
        if self.mask.shape != (1,) + self.image.shape[1:]:
            raise DatasetError(f"{self.id}: mask shape {self.mask.shape} does not match image")
        if not np.isin(self.mask, (0, 1)).all():
            raise DatasetError(f"{self.id}: mask is not binary")
        if self.image.min() < 0 or self.image.max() > 1:
            raise DatasetError(f"{self.id}: image values outside [0, 1]")
        if self.label < 1 or (num_classes is not None and self.label > num_classes):
            raise DatasetError(f"{self.id}: label {self.label} out of range")
        return self


@dataclass
class DatasetMeta:
    num_classes: int
    class_names: list[str] = field(default_factory=list)
    split_sizes: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.num_classes < 1:
            raise DatasetError("a dataset needs at least one class")


# -- NetPBM -------------------------------------------------------------------


def _read_netpbm(path, magic: bytes) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise NetpbmError(f"{path}: malformed header")
        fields.append(data[start:pos])
    if fields[0] != magic:
        raise NetpbmError(f"{path}: expected {magic.decode()}, found {fields[0]!r}")
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise NetpbmError(f"{path}: malformed header") from exc
    if maxval != 255:
        raise NetpbmError(f"{path}: only maxval 255 is supported, got {maxval}")
    if width < 1 or height < 1:
        raise NetpbmError(f"{path}: empty image")
    pos += 1  # single whitespace byte after maxval
    channels = 3 if magic == b"P6" else 1
    size = width * height * channels
    payload = data[pos:pos + size]
    if len(payload) != size:
        raise NetpbmError(f"{path}: truncated payload ({len(payload)} of {size} bytes)")
    arr = np.frombuffer(payload, np.uint8).reshape(height, width, channels)
    return arr.transpose(2, 0, 1).copy()


def read_ppm_bytes(path) -> np.ndarray:
    """Raw (3, h, w) uint8 pixels of a binary P6 file."""
    return _read_netpbm(path, b"P6")


def read_pgm_bytes(path) -> np.ndarray:
    """Raw (1, h, w) uint8 pixels of a binary P5 file."""
    return _read_netpbm(path, b"P5")


def read_ppm(path) -> np.ndarray:
    return read_ppm_bytes(path).astype(np.float32) / 255.0


def read_pgm(path) -> np.ndarray:
    return read_pgm_bytes(path).astype(np.float32) / 255.0


def _quantize(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.min(initial=0.0) < 0 or v.max(initial=0.0) > 1:
        raise NetpbmError("values must lie in [0, 1]")
    return np.rint(v * 255).astype(np.uint8)


def _write_netpbm(path, magic: bytes, pixels: np.ndarray):
    c, h, w = pixels.shape
    header = b"%s\n%d %d\n255\n" % (magic, w, h)
    Path(path).write_bytes(header + np.ascontiguousarray(pixels.transpose(1, 2, 0)).tobytes())


def write_pgm(values: np.ndarray, path):
    """Write a map in [0, 1], shaped (h, w) or (1, h, w), as P5."""
    v = np.asarray(values)
    if v.ndim == 2:
        v = v[None]
    _write_netpbm(path, b"P5", _quantize(v))


def write_ppm(image: np.ndarray, path):
    _write_netpbm(path, b"P6", _quantize(image))


def write_pgm_bytes(pixels: np.ndarray, path):
    p = np.asarray(pixels, dtype=np.uint8)
    _write_netpbm(path, b"P5", p if p.ndim == 3 else p[None])


def write_ppm_bytes(pixels: np.ndarray, path):
    _write_netpbm(path, b"P6", np.asarray(pixels, dtype=np.uint8))


# -- VOC-style directories ------------------------------------------------------


def resize_nearest(arr: np.ndarray, size: int | tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize of a (c, h, w) array, sampling pixel centres."""
    oh, ow = (size, size) if isinstance(size, int) else size
    h, w = arr.shape[1:]
    rows = np.minimum(((np.arange(oh) + 0.5) * h / oh).astype(int), h - 1)
    cols = np.minimum(((np.arange(ow) + 0.5) * w / ow).astype(int), w - 1)
    return arr[:, rows][:, :, cols]


def read_class_names(path) -> dict[int, str]:
    names = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DatasetError(f"{path}:{lineno}: expected '<index>\\t<name>'")
        idx = int(parts[0])
        if idx < 1 or idx >= VOID:
            raise DatasetError(f"{path}:{lineno}: class index {idx} out of range")
        names[idx] = parts[1].strip()
    if not names:
        raise DatasetError(f"{path}: no classes listed")
    if sorted(names) != list(range(1, len(names) + 1)):
        raise DatasetError(f"{path}: class indices must be 1..L without gaps")
    return names


def largest_class(class_mask: np.ndarray) -> int:
    """Foreground class with the most pixels; ties go to the smaller index."""
    vals = class_mask[(class_mask != 0) & (class_mask != VOID)]
    if vals.size == 0:
        raise DatasetError("mask has no salient object")
    counts = np.bincount(vals.ravel())
    return int(np.argmax(counts))


def load_voc_style(root, resize_to: int | tuple[int, int] | None = 64):
    """Load every image/mask pair under ``root`` sorted by id."""
    root = Path(root)
    names = read_class_names(root / "labels.txt")
    meta = DatasetMeta(len(names), [names[i] for i in sorted(names)])
    image_ids = {p.stem for p in (root / "images").glob("*.ppm")}
    mask_ids = {p.stem for p in (root / "masks").glob("*.pgm")}
    if image_ids != mask_ids:
        missing = sorted(image_ids ^ mask_ids)
        raise DatasetError(f"images and masks are not paired: {missing[:5]}")
    if not image_ids:
        raise DatasetError(f"{root}: no samples found")
    samples = []
    for sid in sorted(image_ids):
        image = read_ppm(root / "images" / f"{sid}.ppm")
        cmask = read_pgm_bytes(root / "masks" / f"{sid}.pgm")
        if cmask.shape[1:] != image.shape[1:]:
            raise DatasetError(f"{sid}: mask and image sizes differ")
        bad = np.setdiff1d(np.unique(cmask), [0, VOID, *names])
        if bad.size:
            raise DatasetError(f"{sid}: unknown class index {int(bad[0])}")
        try:
            label = largest_class(cmask)
        except DatasetError as exc:
            raise DatasetError(f"{sid}: {exc}") from None
        if resize_to is not None:
            image = resize_nearest(image, resize_to)
            cmask = resize_nearest(cmask, resize_to)
        mask = ((cmask != 0) & (cmask != VOID)).astype(np.float32)
        if not mask.any():
            raise DatasetError(f"{sid}: salient object vanished after resizing")
        samples.append(SaliencySample(image, mask, label, sid).validate(meta.num_classes))
    meta.split_sizes["all"] = len(samples)
    return samples, meta


def write_voc_style(samples: list[SaliencySample], root, class_names: list[str]):
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_ppm(s.image, root / "images" / f"{s.id}.ppm")
        write_pgm_bytes((s.mask * s.label).astype(np.uint8), root / "masks" / f"{s.id}.pgm")
    lines = [f"{i}\t{name}" for i, name in enumerate(class_names, 1)]
    (root / "labels.txt").write_text("\n".join(lines) + "\n")


# -- synthetic shapes ---------------------------------------------------------


def _shape_mask(cls: int, size: int, area: float, cx: float, cy: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xx - cx, yy - cy
    if cls == 1:
        r = math.sqrt(area / math.pi)
        return dx * dx + dy * dy <= r * r
    if cls == 2:
        half = math.sqrt(area) / 2
        return (np.abs(dx) <= half) & (np.abs(dy) <= half)
    if cls == 3:
        # upright equilateral triangle centred on its bounding box
        side = math.sqrt(4 * area / math.sqrt(3))
        height = side * math.sqrt(3) / 2
        top, bottom = -height / 2, height / 2
        frac = (dy - top) / height
        return (dy >= top) & (dy <= bottom) & (np.abs(dx) <= frac * side / 2)
    if cls == 4:
        # plus sign made of two bars with aspect 3:1; area = 5 unit squares
        arm = math.sqrt(area / 5)
        return ((np.abs(dx) <= 1.5 * arm) & (np.abs(dy) <= arm / 2)) | \
               ((np.abs(dy) <= 1.5 * arm) & (np.abs(dx) <= arm / 2))
    if cls == 5:
        half_diag = math.sqrt(area / 2)
        return np.abs(dx) + np.abs(dy) <= half_diag
    raise ValueError(f"no shape for class {cls}")


def _extent(cls: int, area: float) -> float:
    """Half-width of the shape's bounding box."""
    return {1: math.sqrt(area / math.pi), 2: math.sqrt(area) / 2,
            3: math.sqrt(4 * area / math.sqrt(3)) / 2,
            4: 1.5 * math.sqrt(area / 5), 5: math.sqrt(area / 2)}[cls]


def _contrasting_colors(prng: Prng):
    base = 0.15 + 0.7 * prng.uniform(3)
    while True:
        fg = prng.uniform(3)
        if np.linalg.norm(fg - base) >= 0.6:
            return base, fg


def gen_synthetic_dataset(n: int, num_classes: int = 3, size: int = 64,
                          prng: Prng | None = None, noise: float = 0.08) -> list[SaliencySample]:
    """One flat coloured shape per image on a noise-textured background.

    Class labels map to shapes (1 disc, 2 square, 3 triangle, 4 cross,
    5 diamond) and are dealt in shuffled blocks of ``num_classes`` so every
    class is equally represented.
    """
    if not 2 <= num_classes <= len(SHAPE_NAMES):
        raise ValueError(f"num_classes must be in 2..{len(SHAPE_NAMES)}")
    prng = prng if prng is not None else Prng(0)
    labels: list[int] = []
    while len(labels) < n:
        labels += prng.shuffle(list(range(1, num_classes + 1)))
    npix = size * size
    samples = []
    for i in range(n):
        cls = labels[i]
        while True:
            area = npix * (0.07 + 0.2 * prng.random())
            ext = _extent(cls, area) + 1
            cx = ext + (size - 2 * ext) * prng.random()
            cy = ext + (size - 2 * ext) * prng.random()
            shape = _shape_mask(cls, size, area, cx, cy)
            if 0.05 <= shape.mean() <= 0.30:
                break
        base, fg = _contrasting_colors(prng)
        texture = noise * (2 * prng.uniform(3 * npix).reshape(3, size, size) - 1)
        # texture only on the background: the object is the smooth region
        img = np.where(shape[None], fg[:, None, None], base[:, None, None] + texture)
        # quantised to 8 bits so a PPM round trip is lossless
        img = (np.rint(np.clip(img, 0, 1) * 255) / 255).astype(np.float32)
        mask = shape[None].astype(np.float32)
        samples.append(SaliencySample(img, mask, cls, f"{i:05d}").validate(num_classes))
    return samples


def synthetic_class_names(num_classes: int) -> list[str]:
    return list(SHAPE_NAMES[:num_classes])
