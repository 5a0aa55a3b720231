"""Procedural face-like scenes with hierarchical labels, and their on-disk format.

Each scene is a head ellipse under a hair crescent, with two identical
eyes, a nose bar and two identical lip bars drawn in the rotated head
frame. Left/right eye and upper/lower lip share one colour, so only their
position inside the head separates them.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .hierarchy import LabelHierarchy, LabelMapSet, bundled_hierarchy, expand_sample, merge_labels

BACKGROUND, SKIN, LEFT_EYE, RIGHT_EYE, NOSE, UPPER_LIP, LOWER_LIP, HAIR = range(8)
NUM_FINE_CLASSES = 8

DEFAULT_PALETTE = {
    "background": (0.55, 0.60, 0.62),
    "skin": (0.86, 0.68, 0.55),
    "eye": (0.15, 0.20, 0.45),
    "nose": (0.76, 0.55, 0.45),
    "lip": (0.70, 0.22, 0.26),
    "hair": (0.30, 0.18, 0.08),
}

MIN_FINE_AREA = 4
MIN_COARSE_AREA = 100


@dataclass(frozen=True)
class GeoSceneSpec:
    image_size: tuple[int, int] = (64, 64)
    seed: int = 42
    count: int = 200
    # head semi-axes as fractions of the image height / width
    head_ry: float = 0.25
    head_rx: float = 0.23
    center_y: float = 0.56
    center_jitter: float = 0.06
    scale_range: tuple[float, float] = (0.85, 1.1)
    rotation_range: float = 0.25
    # part geometry in head-normalised coordinates (u, v in [-1, 1])
    eye_offset: tuple[float, float] = (0.42, -0.18)
    eye_radii: tuple[float, float] = (0.22, 0.13)
    nose_box: tuple[float, float, float, float] = (-0.10, 0.10, -0.02, 0.26)
    upper_lip_box: tuple[float, float, float, float] = (-0.38, 0.38, 0.40, 0.52)
    lower_lip_box: tuple[float, float, float, float] = (-0.38, 0.38, 0.56, 0.68)
    hair_scale: float = 1.2
    hair_shift: float = 0.25
    color_jitter: float = 0.05
    noise: float = 0.04
    palette: dict = field(default_factory=lambda: dict(DEFAULT_PALETTE))

    def check(self) -> None:
        h, w = self.image_size
        if h < 8 or w < 8:
            raise ValueError(f"image_size {self.image_size} too small")
        if self.count < 0:
            raise ValueError("count must be nonnegative")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad scale_range {self.scale_range}")
        ry, rx = self.head_ry * h * lo, self.head_rx * w * lo
        # analytic areas at the smallest scale, with a 2x margin over the pixel floor
        eye = math.pi * self.eye_radii[0] * rx * self.eye_radii[1] * ry
        nose = _box_area(self.nose_box, rx, ry)
        lips = min(_box_area(self.upper_lip_box, rx, ry), _box_area(self.lower_lip_box, rx, ry))
        smallest = min(eye, nose, lips)
        if smallest < 2 * MIN_FINE_AREA:
            raise ValueError(
                f"smallest fine part has ~{smallest:.1f} px at scale {lo}; parts need >= {MIN_FINE_AREA} px"
            )
        if math.pi * rx * ry < 2 * MIN_COARSE_AREA:
            raise ValueError(f"head too small for a {MIN_COARSE_AREA} px coarse region")
        top = self.center_y - (self.hair_scale + self.hair_shift) * self.head_ry * hi * 1.05 - self.center_jitter
        bottom = self.center_y + self.head_ry * hi * 1.05 + self.center_jitter
        side = self.hair_scale * self.head_rx * hi * 1.05 + self.center_jitter
        if top < 0 or bottom > 1 or side > 0.5:
            raise ValueError("head or hair can leave the frame; reduce scale or jitter")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["palette"] = {k: list(v) for k, v in self.palette.items()}
        return d


def _box_area(box, rx, ry) -> float:
    u0, u1, v0, v1 = box
    return (u1 - u0) * rx * (v1 - v0) * ry


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    fine: np.ndarray  # (H, W) uint16
    labels: LabelMapSet


@dataclass
class Dataset:
    images: np.ndarray  # (N, 3, H, W) float32
    fine: np.ndarray  # (N, H, W) uint16
    hierarchy: LabelHierarchy
    _levels: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return self.images.shape[0]

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.images[i], self.fine[i], expand_sample(self.fine[i], self.hierarchy))

    def __iter__(self) -> Iterator[Sample]:
        return (self[i] for i in range(len(self)))

    @property
    def image_size(self) -> tuple[int, int]:
        return self.images.shape[2], self.images.shape[3]

    def level_labels(self, level: int) -> np.ndarray:
        """(N, H, W) labels at ``level``, merged from the fine maps once and cached."""
        if level not in self._levels:
            self._levels[level] = merge_labels(self.fine.astype(np.int64), self.hierarchy, level)
        return self._levels[level]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.fine[idx], self.hierarchy)

    def split(self, n_first: int) -> tuple["Dataset", "Dataset"]:
        return self.subset(slice(0, n_first)), self.subset(slice(n_first, None))


def _rasterise(spec: GeoSceneSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    h, w = spec.image_size
    scale = rng.uniform(*spec.scale_range)
    cy = h * (spec.center_y + rng.uniform(-spec.center_jitter, spec.center_jitter))
    cx = w * (0.5 + rng.uniform(-spec.center_jitter, spec.center_jitter))
    ry = spec.head_ry * h * scale * rng.uniform(0.95, 1.05)
    rx = spec.head_rx * w * scale * rng.uniform(0.95, 1.05)
    theta = rng.uniform(-spec.rotation_range, spec.rotation_range)

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(theta), math.sin(theta)
    u = (c * dx + s * dy) / rx
    v = (-s * dx + c * dy) / ry

    lab = np.full((h, w), BACKGROUND, dtype=np.uint16)
    head = u**2 + v**2 <= 1.0
    hv = v + spec.hair_shift
    hair = (u**2 + hv**2 <= spec.hair_scale**2) & ~head & (v < 0.35)
    lab[hair] = HAIR
    lab[head] = SKIN

    ex, ey = spec.eye_offset
    erx, ery = spec.eye_radii
    jx = rng.uniform(-0.04, 0.04)
    jy = rng.uniform(-0.04, 0.04)
    for cls, sign in ((LEFT_EYE, -1.0), (RIGHT_EYE, 1.0)):
        eye = ((u - sign * ex - jx) / erx) ** 2 + ((v - ey - jy) / ery) ** 2 <= 1.0
        lab[eye & head] = cls

    def box(b, cls, dv=0.0):
        u0, u1, v0, v1 = b
        m = (u >= u0) & (u <= u1) & (v >= v0 + dv) & (v <= v1 + dv) & head
        lab[m] = cls

    box(spec.nose_box, NOSE)
    mouth_dv = rng.uniform(-0.04, 0.04)
    box(spec.upper_lip_box, UPPER_LIP, mouth_dv)
    box(spec.lower_lip_box, LOWER_LIP, mouth_dv)

    pal = spec.palette

    def jitter(rgb):
        return np.clip(np.asarray(rgb) + rng.uniform(-spec.color_jitter, spec.color_jitter, 3), 0, 1)

    colors = {BACKGROUND: jitter(pal["background"]), SKIN: jitter(pal["skin"]), HAIR: jitter(pal["hair"])}
    colors[NOSE] = jitter(pal["nose"])
    colors[LEFT_EYE] = colors[RIGHT_EYE] = jitter(pal["eye"])
    colors[UPPER_LIP] = colors[LOWER_LIP] = jitter(pal["lip"])

    table = np.stack([colors[k] for k in range(NUM_FINE_CLASSES)])
    img = table[lab].transpose(2, 0, 1)
    if spec.noise > 0:
        img = img + rng.normal(0.0, spec.noise, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32), lab


def check_part_areas(fine: np.ndarray, h: LabelHierarchy, coarse: bool = True) -> None:
    counts = np.bincount(fine.ravel().astype(np.int64), minlength=NUM_FINE_CLASSES)
    small = [k for k in range(1, NUM_FINE_CLASSES) if counts[k] < MIN_FINE_AREA]
    if small:
        raise RuntimeError(f"fine parts {small} fall below {MIN_FINE_AREA} px")
    if not coarse:
        return
    areas = np.bincount(merge_labels(fine, h, 0).ravel().astype(np.int64), minlength=h.num_classes(0))
    tiny = [k for k in range(1, h.num_classes(0)) if areas[k] < MIN_COARSE_AREA]
    if tiny:
        raise RuntimeError(f"coarse parts {tiny} fall below {MIN_COARSE_AREA} px")


def sample_seed(seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, index])


def generate(spec: GeoSceneSpec, h: LabelHierarchy | None = None) -> Dataset:
    """Deterministic dataset; sample ``i`` depends only on ``(spec, i)``."""
    h = h or bundled_hierarchy("geoscene")
    spec.check()
    if h.num_classes(h.finest) != NUM_FINE_CLASSES:
        raise ValueError(
            f"geoscene draws {NUM_FINE_CLASSES} fine classes; hierarchy finest level has {h.num_classes(h.finest)}"
        )
    hgt, wid = spec.image_size
    images = np.empty((spec.count, 3, hgt, wid), dtype=np.float32)
    fine = np.empty((spec.count, hgt, wid), dtype=np.uint16)
    for i in range(spec.count):
        rng = np.random.default_rng(sample_seed(spec.seed, i))
        images[i], fine[i] = _rasterise(spec, rng)
        check_part_areas(fine[i], h, coarse=hgt * wid >= 64 * 64)
    return Dataset(images, fine, h)


# binary container

MAGIC = b"PSDS"
VERSION = 1
_HEADER = struct.Struct("<4sIIII32s")


def record_size(h: int, w: int) -> int:
    return 3 * h * w * 4 + h * w * 2 + 4


def save_dataset(ds: Dataset, path: str | Path) -> None:
    """Little-endian: header (magic, version, count, H, W, hierarchy digest) then one CRC32-tagged record per sample."""
    n = len(ds)
    hgt, wid = ds.image_size
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, n, hgt, wid, ds.hierarchy.digest()))
        for i in range(n):
            body = ds.images[i].astype("<f4").tobytes() + ds.fine[i].astype("<u2").tobytes()
            f.write(body + struct.pack("<I", zlib.crc32(body)))


def read_dataset_header(path: str | Path) -> dict:
    """Header fields without reading the records; the hash identifies the generating hierarchy."""
    with open(path, "rb") as f:
        raw = f.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, version, n, hgt, wid, digest = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: not a dataset file (bad magic {magic!r})")
    return {"version": version, "count": n, "height": hgt, "width": wid, "hierarchy_hash": digest.hex()}


def load_dataset(path: str | Path, h: LabelHierarchy | None = None) -> Dataset:
    h = h or bundled_hierarchy("geoscene")
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, version, n, hgt, wid, digest = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise ValueError(f"{path}: not a dataset file (bad magic {magic!r})")
    if version != VERSION:
        raise ValueError(f"{path}: dataset version {version}, this reader understands {VERSION}")
    if digest != h.digest():
        raise HierarchyMismatch(digest.hex(), h.hexdigest())
    rec = record_size(hgt, wid)
    expected = _HEADER.size + n * rec
    if len(raw) != expected:
        raise ValueError(f"{path}: truncated or padded file ({len(raw)} bytes, expected {expected})")
    images = np.empty((n, 3, hgt, wid), dtype=np.float32)
    fine = np.empty((n, hgt, wid), dtype=np.uint16)
    img_bytes = 3 * hgt * wid * 4
    off = _HEADER.size
    for i in range(n):
        body = raw[off : off + rec - 4]
        (crc,) = struct.unpack_from("<I", raw, off + rec - 4)
        if zlib.crc32(body) != crc:
            raise ValueError(f"{path}: checksum failure in record {i}")
        images[i] = np.frombuffer(body[:img_bytes], dtype="<f4").reshape(3, hgt, wid)
        fine[i] = np.frombuffer(body[img_bytes:], dtype="<u2").reshape(hgt, wid)
        off += rec
    if fine.size and int(fine.max()) >= h.num_classes(h.finest):
        raise ValueError(f"{path}: labels exceed the hierarchy's {h.num_classes(h.finest)} fine classes")
    return Dataset(images, fine, h)


class HierarchyMismatch(ValueError):
    def __init__(self, found: str, expected: str):
        super().__init__(f"hierarchy hash mismatch: file has {found}, expected {expected}")
        self.found = found
        self.expected = expected


def export_png(ds: Dataset, out_dir: str | Path) -> None:
    """Write ``img/%06d.png`` and ``lbl/<level>/%06d.png`` for visual inspection."""
    from PIL import Image

    out = Path(out_dir)
    (out / "img").mkdir(parents=True, exist_ok=True)
    for k, lv in enumerate(ds.hierarchy.levels):
        (out / "lbl" / lv.name).mkdir(parents=True, exist_ok=True)
    for i in range(len(ds)):
        rgb = (np.clip(ds.images[i].transpose(1, 2, 0), 0, 1) * 255).round().astype(np.uint8)
        Image.fromarray(rgb, "RGB").save(out / "img" / f"{i:06d}.png")
        for k, lv in enumerate(ds.hierarchy.levels):
            Image.fromarray(ds.level_labels(k)[i].astype(np.uint8), "L").save(out / "lbl" / lv.name / f"{i:06d}.png")
