"""PGM/PPM images, dataset manifests, synthetic data and checkpoints."""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .tensor import DimensionError, Tensor

MANIFEST_HEADER = ["case_id", "image", "mask"]
CHECKPOINT_MAGIC = b"MFAN"
CHECKPOINT_VERSION = 1
MASK_THRESHOLD = 128


class ParseError(ValueError):
    """Malformed file content; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int, path=None):
        where = f"{path}: " if path is not None else ""
        super().__init__(f"{where}{message} (at byte offset {offset})")
        self.offset = offset
        self.path = path


# ---------------------------------------------------------------------------
# PGM / PPM
# ---------------------------------------------------------------------------


def _header_fields(buf: bytes, count: int, path) -> tuple[list[int], int]:
    """Parse ``count`` whitespace-separated integers after the 2-byte magic."""
    pos = 2
    fields = []
    while len(fields) < count:
        if pos >= len(buf):
            raise ParseError("truncated header", pos, path)
        ch = buf[pos : pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            end = buf.find(b"\n", pos)
            if end < 0:
                raise ParseError("unterminated header comment", pos, path)
            pos = end + 1
        elif ch.isdigit():
            start = pos
            while pos < len(buf) and buf[pos : pos + 1].isdigit():
                pos += 1
            fields.append(int(buf[start:pos]))
        else:
            raise ParseError(f"unexpected byte {ch!r} in header", pos, path)
    if pos >= len(buf):
        raise ParseError("truncated header", pos, path)
    if not buf[pos : pos + 1].isspace():
        raise ParseError("header must end with a single whitespace byte", pos, path)
    return fields, pos + 1


def parse_pnm(buf: bytes, magic: bytes, channels: int, path=None) -> np.ndarray:
    """Decode a binary P5/P6 payload to a uint8 array of shape (h, w, channels)."""
    if buf[:2] != magic:
        raise ParseError(f"unsupported magic {buf[:2]!r}, expected {magic!r}", 0, path)
    (width, height, maxval), start = _header_fields(buf, 3, path)
    if maxval != 255:
        raise ParseError(f"unsupported maxval {maxval}, expected 255", start - 1, path)
    if width < 1 or height < 1:
        raise ParseError(f"invalid image size {width}x{height}", start - 1, path)
    need = width * height * channels
    have = len(buf) - start
    if have < need:
        raise ParseError(f"truncated payload: need {need} bytes, found {have}", start + have, path)
    if have > need:
        raise ParseError(f"{have - need} trailing bytes after payload", start + need, path)
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=start).reshape(height, width, channels)


def read_pgm(path, mask: bool = False, dtype=np.float32) -> Tensor:
    """Read a P5 image as a (1, 1, h, w) tensor.

    Intensities are scaled by 1/255; with ``mask=True`` values >= 128 map to
    1 and the rest to 0.
    """
    path = Path(path)
    raw = parse_pnm(path.read_bytes(), b"P5", 1, path)[:, :, 0]
    if mask:
        data = (raw >= MASK_THRESHOLD).astype(dtype)
    else:
        data = raw.astype(dtype) / np.dtype(dtype).type(255)
    return Tensor(data[None, None])


def _as_image2d(x) -> np.ndarray:
    a = x.data if isinstance(x, Tensor) else np.asarray(x)
    if a.ndim == 4:
        if a.shape[0] != 1 or a.shape[1] != 1:
            raise DimensionError(f"expected a single-channel image, got shape {a.shape}")
        a = a[0, 0]
    if a.ndim != 2:
        raise DimensionError(f"expected a 2-D image, got shape {a.shape}")
    return a


def to_bytes(x) -> np.ndarray:
    """[0, 1] floats to uint8 with rounding."""
    return np.clip(np.rint(np.asarray(x, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(image, path) -> None:
    a = to_bytes(_as_image2d(image))
    h, w = a.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + a.tobytes())


def write_ppm(rgb: np.ndarray, path) -> None:
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DimensionError(f"rgb must be (h, w, 3), got {rgb.shape}")
    h, w, _ = rgb.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(rgb).tobytes())


def read_ppm(path) -> np.ndarray:
    path = Path(path)
    return parse_pnm(path.read_bytes(), b"P6", 3, path).copy()


RED = (255, 0, 0)
BLUE = (0, 0, 255)
GREEN = (0, 255, 0)


def overlay_rgb(image, pred, truth) -> np.ndarray:
    """Grayscale base with true positives red, false positives blue, false negatives green."""
    img = _as_image2d(image)
    p = _as_image2d(pred) > 0.5
    t = _as_image2d(truth) > 0.5
    if not (img.shape == p.shape == t.shape):
        raise DimensionError(f"overlay: shapes differ: image {img.shape}, pred {p.shape}, truth {t.shape}")
    g = to_bytes(img)
    rgb = np.stack([g, g, g], axis=-1)
    rgb[p & t] = RED
    rgb[p & ~t] = BLUE
    rgb[~p & t] = GREEN
    return rgb


def render_overlay(image, pred, truth, path) -> None:
    write_ppm(overlay_rgb(image, pred, truth), path)


# ---------------------------------------------------------------------------
# manifests and datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Case:
    case_id: str
    image: Path
    mask: Path


@dataclass
class DatasetManifest:
    path: Path
    cases: list[Case]

    @property
    def case_ids(self) -> list[str]:
        return [c.case_id for c in self.cases]

    def __len__(self) -> int:
        return len(self.cases)


def load_manifest(path, divisor: int = 16) -> DatasetManifest:
    """Read a ``case_id,image,mask`` CSV; relative paths resolve against its directory.

    Every referenced file must exist, image and mask sizes must agree and both
    spatial dims must be multiples of ``divisor``.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != MANIFEST_HEADER:
        raise ParseError(f"manifest header must be {','.join(MANIFEST_HEADER)}", 0, path)
    cases = []
    seen = set()
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 3:
            raise ParseError(f"line {lineno}: expected 3 fields, got {len(row)}", 0, path)
        cid, img, msk = (f.strip() for f in row)
        if cid in seen:
            raise ValueError(f"{path}: duplicate case_id {cid!r} on line {lineno}")
        seen.add(cid)
        ip, mp = (path.parent / img), (path.parent / msk)
        for p in (ip, mp):
            if not p.is_file():
                raise FileNotFoundError(f"{path}: line {lineno}: missing file {p}")
        cases.append(Case(cid, ip, mp))
    for case in cases:
        ih, iw = _pnm_size(case.image)
        mh, mw = _pnm_size(case.mask)
        if (ih, iw) != (mh, mw):
            raise DimensionError(f"case {case.case_id}: image {ih}x{iw} and mask {mh}x{mw} differ")
        if ih % divisor or iw % divisor:
            raise DimensionError(f"case {case.case_id}: size {ih}x{iw} not divisible by {divisor}")
    return DatasetManifest(path, cases)


def _pnm_size(path: Path) -> tuple[int, int]:
    with path.open("rb") as fh:
        head = fh.read(256)
    if head[:2] != b"P5":
        raise ParseError(f"unsupported magic {head[:2]!r}, expected b'P5'", 0, path)
    (w, h, _), _ = _header_fields(head, 3, path)
    return h, w


def load_cases(manifest: DatasetManifest, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Stack all images and masks as (n, 1, h, w) arrays."""
    images = [read_pgm(c.image, dtype=dtype).data for c in manifest.cases]
    masks = [read_pgm(c.mask, mask=True, dtype=dtype).data for c in manifest.cases]
    return np.concatenate(images), np.concatenate(masks)


def synth_case(rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
    """One noisy soft-edged ellipse image and its exact binary mask."""
    a, b = rng.uniform(0.15, 0.35, size=2) * size
    theta = rng.uniform(0, np.pi)
    r = max(a, b)
    cy, cx = rng.uniform(r, size - r, size=2)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    u = (dx * np.cos(theta) + dy * np.sin(theta)) / a
    v = (-dx * np.sin(theta) + dy * np.cos(theta)) / b
    rho = np.sqrt(u * u + v * v)
    mask = (rho <= 1.0).astype(np.uint8)
    background = rng.uniform(0.2, 0.4)
    offset = rng.uniform(0.25, 0.4)
    edge = 1.0 / (1.0 + np.exp((rho - 1.0) * min(a, b) / 1.5))
    image = background + offset * edge + rng.normal(0.0, 0.05, size=(size, size))
    return np.clip(image, 0.0, 1.0), mask


def synth_dataset(n_cases: int, size: int, seed: int, out_dir) -> DatasetManifest:
    """Write ``n_cases`` synthetic image/mask PGM pairs plus ``manifest.csv``."""
    if n_cases < 1:
        raise ValueError(f"n_cases must be >= 1, got {n_cases}")
    if size < 16 or size % 16:
        raise DimensionError(f"size must be a positive multiple of 16, got {size}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    width = max(3, len(str(n_cases - 1)))
    cases = []
    for i in range(n_cases):
        image, mask = synth_case(rng, size)
        cid = f"case{i:0{width}d}"
        write_pgm(image, out / f"{cid}_image.pgm")
        write_pgm(mask.astype(np.float64), out / f"{cid}_mask.pgm")
        cases.append(Case(cid, out / f"{cid}_image.pgm", out / f"{cid}_mask.pgm"))
    manifest_path = out / "manifest.csv"
    with manifest_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_HEADER)
        for c in cases:
            w.writerow([c.case_id, c.image.name, c.mask.name])
    return DatasetManifest(manifest_path, cases)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(tensors: Mapping[str, object], path, config_text: str = "") -> None:
    """Write named rank-4 tensors as little-endian float32 records.

    Layout: ``MFAN``, u32 version, u32 config length + UTF-8 config text,
    u32 tensor count, then per tensor u32 name length + name, 4 x u32 dims
    and the float32 payload.
    """
    blob = config_text.encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(blob)), blob, struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        if arr.ndim != 4:
            raise DimensionError(f"checkpoint tensor {name!r} must be rank 4, got shape {arr.shape}")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb + struct.pack("<4I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], str]:
    """Return ``(tensors, config_text)``; tensors come back as float32 arrays."""
    path = Path(path)
    buf = path.read_bytes()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise ParseError(f"truncated {what}: need {n} bytes, {len(buf) - pos} left", pos, path)
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise ParseError(f"bad magic {buf[:4]!r}, expected {CHECKPOINT_MAGIC!r}", 0, path)
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", 4, path)
    (blob_len,) = struct.unpack("<I", take(4, "config length"))
    try:
        config_text = take(blob_len, "config").decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError("config blob is not UTF-8", 12, path) from exc
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        start = pos
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8", errors="strict")
        if name in tensors:
            raise ParseError(f"duplicate tensor name {name!r}", start, path)
        dims = struct.unpack("<4I", take(16, "dims"))
        if min(dims) < 1:
            raise ParseError(f"tensor {name!r} has zero-sized dims {dims}", pos - 16, path)
        size = int(np.prod(dims))
        payload = take(4 * size, f"payload of {name!r}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
    if pos != len(buf):
        raise ParseError(f"{len(buf) - pos} trailing bytes after last tensor", pos, path)
    return tensors, config_text


def config_blob(**fields) -> str:
    """Canonical JSON text for checkpoint config blobs."""
    return json.dumps(fields, sort_keys=True, separators=(",", ":"))
