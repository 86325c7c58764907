"""Synthetic two-domain segmentation corpus and the VQDS file format.

Each sample is a rotated ellipse ("organ", class 1) enclosing an irregular
blob ("lesion", class 2) over a textured background.  Geometry depends only
on (seed, split, index); domain B re-renders the same geometry with a
gamma/contrast change and a smooth bias field.

VQDS layout (little-endian)::

    offset  size  field
    0       4     magic b"VQDS"
    4       2     version (uint16, currently 1)
    6       4     sample count (uint32)
    10      2     H (uint16)
    12      2     W (uint16)
    14      2     number of classes (uint16)
    16      ...   per sample: H*W float32 image, then H*W uint8 mask
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError

MAGIC = b"VQDS"
VERSION = 1
HEADER = struct.Struct("<4sHIHHH")
SPLITS = ("train", "val", "test")
_SPLIT_CODE = {"train": 0, "val": 1, "test": 2}

BACKGROUND, ORGAN, LESION = 0.15, 0.5, 0.85
MAX_RETRIES = 100


@dataclass(frozen=True)
class CorpusSpec:
    n_train: int = 200
    n_val: int = 40
    n_test: int = 40
    image_size: int = 64
    num_classes: int = 3
    domain: str = "A"
    seed: int = 0

    def validate(self, levels: int | None = None) -> None:
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ConfigError("every split needs at least one sample")
        s = self.image_size
        if s < 16 or s & (s - 1):
            raise ConfigError(f"image_size must be a power of two >= 16, got {s}")
        if self.num_classes != 3:
            raise ConfigError("the synthetic corpus has exactly 3 classes (background, organ, lesion)")
        if self.domain not in ("A", "B"):
            raise ConfigError(f"domain must be 'A' or 'B', got {self.domain!r}")
        if levels is not None and s % (2 ** (levels - 1)):
            raise ConfigError(f"image_size {s} not divisible by 2^(levels-1) = {2 ** (levels - 1)}")

    def count(self, split: str) -> int:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}[split]


@dataclass
class Corpus:
    """In-memory split: images [N,1,H,W] in [0,1], masks [N,H,W] uint8."""

    images: np.ndarray
    masks: np.ndarray
    num_classes: int
    domain: str = "A"

    def __len__(self) -> int:
        return len(self.images)

    @property
    def sample_ids(self) -> np.ndarray:
        return np.arange(len(self))


# ---------------------------------------------------------------- geometry
def _grid(size: int):
    c = np.arange(size, dtype=np.float64) + 0.5
    return np.meshgrid(c, c, indexing="ij")


def sample_geometry(rng: np.random.Generator, size: int) -> np.ndarray:
    """Label map with a nested ellipse/blob; rejects draws that break the invariants."""
    yy, xx = _grid(size)
    for _ in range(MAX_RETRIES):
        a = rng.uniform(0.20, 0.34) * size
        b = rng.uniform(0.13, 0.24) * size
        theta = rng.uniform(0.0, np.pi)
        cy, cx = rng.uniform(0.3, 0.7, size=2) * size
        ct, st = np.cos(theta), np.sin(theta)
        u = (yy - cy) * ct + (xx - cx) * st
        v = -(yy - cy) * st + (xx - cx) * ct
        organ = (u / a) ** 2 + (v / b) ** 2 <= 1.0

        # lesion centre drawn inside the inner half of the ellipse
        rho, phi0 = np.sqrt(rng.uniform(0.0, 0.25)), rng.uniform(0.0, 2 * np.pi)
        lu, lv = rho * a * np.cos(phi0), rho * b * np.sin(phi0)
        ly, lx = cy + lu * ct - lv * st, cx + lu * st + lv * ct
        r0 = rng.uniform(0.25, 0.45) * b
        h2, h3 = rng.uniform(0.0, 0.25), rng.uniform(0.0, 0.15)
        p2, p3 = rng.uniform(0.0, 2 * np.pi, size=2)
        phi = np.arctan2(yy - ly, xx - lx)
        radius = r0 * (1.0 + h2 * np.sin(2 * phi + p2) + h3 * np.cos(3 * phi + p3))
        lesion = np.hypot(yy - ly, xx - lx) <= radius

        label = np.zeros((size, size), dtype=np.uint8)
        label[organ] = 1
        label[lesion] = 2
        if _valid(label, organ, lesion):
            return label
    raise DataError(f"could not draw a valid geometry in {MAX_RETRIES} attempts")


def _valid(label: np.ndarray, organ: np.ndarray, lesion: np.ndarray) -> bool:
    if not lesion.any() or (organ & ~lesion).sum() == 0:
        return False
    frac = (label > 0).mean()
    if not 0.05 <= frac <= 0.5:
        return False
    # strictly inside: the lesion and its 4-neighbourhood stay within the organ
    grown = lesion.copy()
    grown[1:] |= lesion[:-1]
    grown[:-1] |= lesion[1:]
    grown[:, 1:] |= lesion[:, :-1]
    grown[:, :-1] |= lesion[:, 1:]
    if (grown & ~organ).any():
        return False
    # organ must not touch the image border
    return not (organ[0].any() or organ[-1].any() or organ[:, 0].any() or organ[:, -1].any())


# ---------------------------------------------------------------- appearance
def smooth_field(rng: np.random.Generator, size: int, n_waves: int = 4) -> np.ndarray:
    """Sum of a few random low-frequency cosines, scaled to [-1, 1]."""
    yy, xx = _grid(size)
    field = np.zeros((size, size))
    for _ in range(n_waves):
        fy, fx = rng.uniform(-1.5, 1.5, size=2) / size
        ph = rng.uniform(0, 2 * np.pi)
        field += np.cos(2 * np.pi * (fy * yy + fx * xx) + ph)
    m = np.abs(field).max()
    return field / m if m > 0 else field


def render(label: np.ndarray, rng: np.random.Generator, domain: str) -> np.ndarray:
    size = label.shape[0]
    img = np.choose(label, [BACKGROUND, ORGAN, LESION]).astype(np.float64)
    img += 0.04 * smooth_field(rng, size)
    img += rng.normal(0.0, 0.02, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    if domain == "B":
        bias = 0.08 * smooth_field(rng, size, n_waves=2)
        img = 0.8 * (img**1.6 - 0.5) + 0.5 + bias
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_split(spec: CorpusSpec, split: str) -> Corpus:
    n, size = spec.count(split), spec.image_size
    images = np.empty((n, 1, size, size), dtype=np.float32)
    masks = np.empty((n, size, size), dtype=np.uint8)
    code = _SPLIT_CODE[split]
    for i in range(n):
        geo_rng = np.random.default_rng([spec.seed, code, i, 0])
        app_rng = np.random.default_rng([spec.seed, code, i, 1 if spec.domain == "A" else 2])
        masks[i] = sample_geometry(geo_rng, size)
        images[i, 0] = render(masks[i], app_rng, spec.domain)
    return Corpus(images, masks, spec.num_classes, spec.domain)


def split_path(out_dir: Path | str, split: str, domain: str) -> Path:
    return Path(out_dir) / f"{split}_{domain}.vqds"


def generate_corpus(spec: CorpusSpec, out_dir: Path | str) -> dict[str, Path]:
    """Write one VQDS file per split; returns split -> path."""
    spec.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for split in SPLITS:
        path = split_path(out_dir, split, spec.domain)
        write_vqds(path, generate_split(spec, split))
        paths[split] = path
    return paths


# ---------------------------------------------------------------- file format
def encode_vqds(corpus: Corpus) -> bytes:
    n, _, h, w = corpus.images.shape
    parts = [HEADER.pack(MAGIC, VERSION, n, h, w, corpus.num_classes)]
    for i in range(n):
        parts.append(corpus.images[i, 0].astype("<f4").tobytes())
        parts.append(corpus.masks[i].astype(np.uint8).tobytes())
    return b"".join(parts)


def write_vqds(path: Path | str, corpus: Corpus) -> None:
    Path(path).write_bytes(encode_vqds(corpus))


def decode_vqds(raw: bytes, domain: str = "A") -> Corpus:
    if len(raw) < HEADER.size:
        raise FormatError("VQDS file shorter than its header")
    magic, version, n, h, w, classes = HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"bad VQDS magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported VQDS version {version}")
    per = h * w * 5
    if len(raw) != HEADER.size + n * per:
        raise FormatError(f"VQDS payload size {len(raw) - HEADER.size} does not match {n} samples of {h}x{w}")
    images = np.empty((n, 1, h, w), dtype=np.float32)
    masks = np.empty((n, h, w), dtype=np.uint8)
    off = HEADER.size
    for i in range(n):
        images[i, 0] = np.frombuffer(raw, dtype="<f4", count=h * w, offset=off).reshape(h, w)
        off += h * w * 4
        masks[i] = np.frombuffer(raw, dtype=np.uint8, count=h * w, offset=off).reshape(h, w)
        off += h * w
    if masks.size and masks.max() >= classes:
        raise FormatError("VQDS mask label exceeds declared class count")
    return Corpus(images, masks, classes, domain)


def read_vqds(path: Path | str) -> Corpus:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read corpus file {path}: {exc}") from exc
    stem = path.stem
    domain = stem.rsplit("_", 1)[-1] if "_" in stem else "A"
    return decode_vqds(raw, domain if domain in ("A", "B") else "A")
