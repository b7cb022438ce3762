"""Image, polygon-annotation, mask, and checkpoint I/O.

Images are plain 2D float arrays with intensities in [0, 1]; binary masks
are 2D uint8 arrays with values in {0, 1}. Supported raster formats are
grayscale PNG (8- or 16-bit) and binary PGM ("P5"). Checkpoints use a
small custom binary format that round-trips parameters bit-exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

CHECKPOINT_MAGIC = b"STEN1"


class SpecIOError(Exception):
    """Raised for unreadable, malformed, or inconsistent input files."""


@dataclass(frozen=True)
class ImageInfo:
    image_id: int
    file_name: str
    height: int
    width: int


@dataclass(frozen=True)
class PolygonAnn:
    """One polygon ring, vertices as (x, y) in pixel coordinates."""

    image_id: int
    vertices: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if len(self.vertices) < 3:
            raise SpecIOError(
                f"polygon for image {self.image_id} has {len(self.vertices)} "
                "vertices, need at least 3"
            )


@dataclass
class AnnotationSet:
    images: list[ImageInfo]
    annotations: list[PolygonAnn] = field(default_factory=list)

    def polygons_for(self, image_id: int) -> list[PolygonAnn]:
        return [a for a in self.annotations if a.image_id == image_id]


# ---------------------------------------------------------------------------
# grayscale rasters


def _read_pgm(path: Path) -> tuple[np.ndarray, int]:
    """Read a binary PGM (P5). Returns (raw codes, maxval)."""
    data = path.read_bytes()
    if not data.startswith(b"P5"):
        raise SpecIOError(f"{path}: not a binary PGM (missing P5 magic)")

    # Header tokens: magic, width, height, maxval. '#' starts a comment.
    pos = 2
    tokens: list[int] = []
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != ord("\n"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise SpecIOError(f"{path}: corrupt PGM header")
        try:
            tokens.append(int(data[start:pos]))
        except ValueError as exc:
            raise SpecIOError(f"{path}: corrupt PGM header") from exc
    pos += 1  # single whitespace byte after maxval

    width, height, maxval = tokens
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise SpecIOError(f"{path}: corrupt PGM header")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = height * width * dtype.itemsize
    raw = data[pos : pos + need]
    if len(raw) != need:
        raise SpecIOError(f"{path}: short read, PGM pixel data truncated")
    codes = np.frombuffer(raw, dtype=dtype).reshape(height, width)
    return codes.astype(np.uint16 if maxval > 255 else np.uint8), maxval


def _write_pgm(path: Path, codes: np.ndarray, maxval: int) -> None:
    header = f"P5\n{codes.shape[1]} {codes.shape[0]}\n{maxval}\n".encode()
    if maxval > 255:
        payload = codes.astype(">u2").tobytes()
    else:
        payload = codes.astype(np.uint8).tobytes()
    path.write_bytes(header + payload)


def _read_gray(path: str | Path) -> tuple[np.ndarray, int]:
    """Read a grayscale raster. Returns (raw integer codes, max code value)."""
    path = Path(path)
    if not path.exists():
        raise SpecIOError(f"{path}: file not found")
    if path.suffix.lower() == ".pgm":
        return _read_pgm(path)
    try:
        img = Image.open(path)
        img.load()
    except Exception as exc:
        raise SpecIOError(f"{path}: unreadable image ({exc})") from exc
    if img.mode == "L":
        return np.asarray(img, dtype=np.uint8), 255
    if img.mode in ("I;16", "I;16B", "I;16L", "I"):
        codes = np.asarray(img, dtype=np.uint32)
        if codes.max(initial=0) > 65535:
            raise SpecIOError(f"{path}: integer image exceeds 16-bit range")
        return codes.astype(np.uint16), 65535
    raise SpecIOError(
        f"{path}: unsupported mode {img.mode!r}, need 8- or 16-bit grayscale"
    )


def load_image(path: str | Path) -> np.ndarray:
    """Load a grayscale image, scaled to [0, 1] by its max code value."""
    codes, maxval = _read_gray(path)
    return codes.astype(np.float64) / float(maxval)


def save_image(image: np.ndarray, path: str | Path) -> None:
    """Save a [0, 1] image as an 8-bit grayscale PNG or PGM."""
    path = Path(path)
    codes = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255)
    codes = codes.astype(np.uint8)
    if path.suffix.lower() == ".pgm":
        _write_pgm(path, codes, 255)
    else:
        Image.fromarray(codes, mode="L").save(path, format="PNG")


# ---------------------------------------------------------------------------
# COCO-style polygon annotations


def load_coco(path: str | Path) -> AnnotationSet:
    """Parse a COCO-style document: images[] plus polygon annotations[]."""
    path = Path(path)
    if not path.exists():
        raise SpecIOError(f"{path}: file not found")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SpecIOError(f"{path}: invalid JSON ({exc})") from exc
    for key in ("images", "annotations"):
        if key not in doc:
            raise SpecIOError(f"{path}: missing {key!r} array")

    images = []
    by_id: dict[int, ImageInfo] = {}
    for entry in doc["images"]:
        info = ImageInfo(
            image_id=int(entry["id"]),
            file_name=str(entry.get("file_name", f"{entry['id']}.png")),
            height=int(entry["height"]),
            width=int(entry["width"]),
        )
        images.append(info)
        by_id[info.image_id] = info

    annotations = []
    for entry in doc["annotations"]:
        image_id = int(entry["image_id"])
        info = by_id.get(image_id)
        if info is None:
            raise SpecIOError(
                f"{path}: annotation {entry.get('id')} references unknown "
                f"image {image_id}"
            )
        for ring in entry.get("segmentation", []):
            if len(ring) % 2 != 0:
                raise SpecIOError(
                    f"{path}: annotation {entry.get('id')} has odd "
                    "coordinate count"
                )
            if len(ring) < 6:
                raise SpecIOError(
                    f"{path}: annotation {entry.get('id')} polygon has fewer "
                    "than 3 vertices"
                )
            xs = np.clip(np.asarray(ring[0::2], dtype=np.float64), 0.0, info.width)
            ys = np.clip(np.asarray(ring[1::2], dtype=np.float64), 0.0, info.height)
            annotations.append(
                PolygonAnn(image_id, tuple(zip(xs.tolist(), ys.tolist())))
            )
    return AnnotationSet(images=images, annotations=annotations)


# ---------------------------------------------------------------------------
# rasterization

# A pixel (i, j) is foreground iff its center (j + 0.5, i + 0.5) lies inside
# the polygon under the even-odd rule. The predicate below mirrors the classic
# crossing-number test so a scalar per-pixel oracle reproduces it exactly.


def _fill_polygon(vertices, height: int, width: int, out: np.ndarray) -> None:
    xs = np.asarray([v[0] for v in vertices], dtype=np.float64)
    ys = np.asarray([v[1] for v in vertices], dtype=np.float64)
    n = len(xs)

    j0 = max(int(np.floor(xs.min() - 0.5)), 0)
    j1 = min(int(np.ceil(xs.max() - 0.5)), width - 1)
    i0 = max(int(np.floor(ys.min() - 0.5)), 0)
    i1 = min(int(np.ceil(ys.max() - 0.5)), height - 1)
    if j0 > j1 or i0 > i1:
        return

    py = np.arange(i0, i1 + 1, dtype=np.float64)[:, None] + 0.5
    px = np.arange(j0, j1 + 1, dtype=np.float64)[None, :] + 0.5
    inside = np.zeros((i1 - i0 + 1, j1 - j0 + 1), dtype=bool)
    for k in range(n):
        xa, ya = xs[k], ys[k]
        xb, yb = xs[k - 1], ys[k - 1]
        if ya == yb:
            continue
        straddles = (ya > py) != (yb > py)
        crossing = px < (xb - xa) * (py - ya) / (yb - ya) + xa
        inside ^= straddles & crossing
    out[i0 : i1 + 1, j0 : j1 + 1] |= inside


def rasterize(
    polygons: list[PolygonAnn], height: int, width: int
) -> np.ndarray:
    """Rasterize polygons to a {0,1} mask; multiple polygons union."""
    if height <= 0 or width <= 0:
        raise SpecIOError(f"cannot rasterize to {height}x{width} grid")
    out = np.zeros((height, width), dtype=bool)
    for poly in polygons:
        _fill_polygon(poly.vertices, height, width, out)
    return out.astype(np.uint8)


# ---------------------------------------------------------------------------
# binary masks


def save_mask(mask: np.ndarray, path: str | Path) -> None:
    """Save a {0,1} mask as an 8-bit raster, foreground 255, background 0."""
    mask = np.asarray(mask)
    if not np.isin(mask, (0, 1)).all():
        raise SpecIOError("mask values must be strictly 0 or 1")
    save_image(mask.astype(np.float64), path)


def load_mask(path: str | Path) -> np.ndarray:
    """Load a mask raster; any code >= 128 maps to 1, else 0."""
    codes, _ = _read_gray(path)
    return (codes >= 128).astype(np.uint8)


# ---------------------------------------------------------------------------
# checkpoints
#
# Layout, all little-endian:
#   magic "STEN1"
#   u32 stages, u32 convs_per_stage, u32 in_channels, u32 out_channels
#   u32 x stages channel list
#   u32 tensor count, then per tensor: u64 element count + raw f32 data
#   u32 epoch, u64 seed


@dataclass(frozen=True)
class ArchDescriptor:
    stages: int
    channels: tuple[int, ...]
    convs_per_stage: int
    in_channels: int = 1
    out_channels: int = 1

    def __post_init__(self):
        if len(self.channels) != self.stages:
            raise SpecIOError(
                f"channel list length {len(self.channels)} != stages {self.stages}"
            )


@dataclass
class Checkpoint:
    arch: ArchDescriptor
    params: list[np.ndarray]
    epoch: int
    seed: int


def save_checkpoint(
    arch: ArchDescriptor,
    params: list[np.ndarray],
    path: str | Path,
    epoch: int = 0,
    seed: int = 0,
) -> None:
    path = Path(path)
    parts = [CHECKPOINT_MAGIC]
    parts.append(
        struct.pack(
            "<4I",
            arch.stages,
            arch.convs_per_stage,
            arch.in_channels,
            arch.out_channels,
        )
    )
    parts.append(struct.pack(f"<{arch.stages}I", *arch.channels))
    parts.append(struct.pack("<I", len(params)))
    for p in params:
        flat = np.ascontiguousarray(p, dtype="<f4").reshape(-1)
        parts.append(struct.pack("<Q", flat.size))
        parts.append(flat.tobytes())
    parts.append(struct.pack("<IQ", epoch, seed))
    path.write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, data: bytes, path: Path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise SpecIOError(f"{self.path}: short read, checkpoint truncated")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(
    path: str | Path, expected_arch: ArchDescriptor | None = None
) -> Checkpoint:
    """Load a checkpoint; parameters come back as flat float32 arrays."""
    path = Path(path)
    if not path.exists():
        raise SpecIOError(f"{path}: file not found")
    r = _Reader(path.read_bytes(), path)
    magic = r.take(len(CHECKPOINT_MAGIC))
    if magic != CHECKPOINT_MAGIC:
        raise SpecIOError(f"{path}: bad magic {magic!r}")
    stages, convs_per_stage, in_ch, out_ch = r.unpack("<4I")
    if stages == 0 or stages > 64:
        raise SpecIOError(f"{path}: implausible stage count {stages}")
    channels = r.unpack(f"<{stages}I")
    arch = ArchDescriptor(stages, channels, convs_per_stage, in_ch, out_ch)
    if expected_arch is not None and arch != expected_arch:
        raise SpecIOError(
            f"{path}: arch mismatch, checkpoint {arch} vs expected {expected_arch}"
        )
    (count,) = r.unpack("<I")
    params = []
    for _ in range(count):
        (size,) = r.unpack("<Q")
        raw = r.take(size * 4)
        params.append(np.frombuffer(raw, dtype="<f4").copy())
    epoch, seed = r.unpack("<IQ")
    return Checkpoint(arch=arch, params=params, epoch=epoch, seed=seed)
