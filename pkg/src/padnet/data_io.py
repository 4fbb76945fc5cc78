"""Image codecs, dataset manifests, synthetic distortions and weight files.

Images are stored as binary Netpbm (P6 colour / P5 grey, 8-bit). Weights
use a small little-endian container::

    b"PADW" | u32 version | u32 count | count x record
    record = u16 name_len | name utf-8 | u8 dtype | u8 rank | rank x u32 extent | raw data
"""
from __future__ import annotations

import csv
import io
import math
import os
import re
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import correlate1d

from .errors import FormatError, UsageError

# ----------------------------------------------------------------------------
# Netpbm images
# ----------------------------------------------------------------------------

_TOKEN = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)")


def _read_header(buf: bytes) -> Tuple[bytes, int, int, int, int]:
    pos = 0
    fields = []
    for _ in range(4):
        m = _TOKEN.match(buf, pos)
        if m is None:
            raise FormatError("truncated Netpbm header")
        fields.append(m.group(2))
        pos = m.end()
    magic = fields[0]
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise FormatError(f"malformed Netpbm header: {exc}") from None
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise FormatError("Netpbm header must end with a single whitespace byte")
    return magic, width, height, maxval, pos + 1


def load_image(path) -> np.ndarray:
    """Read an 8-bit P6 or P5 file as a float 3 x H x W array in [0, 1].

    Grey images are replicated across the three channels.
    """
    buf = Path(path).read_bytes()
    magic, width, height, maxval, offset = _read_header(buf)
    if magic not in (b"P6", b"P5"):
        raise FormatError(f"{path}: unsupported Netpbm magic {magic!r}")
    if width < 1 or height < 1 or not 0 < maxval < 256:
        raise FormatError(f"{path}: unsupported geometry/maxval {width}x{height}/{maxval}")
    channels = 3 if magic == b"P6" else 1
    count = width * height * channels
    payload = buf[offset : offset + count]
    if len(payload) != count:
        raise FormatError(f"{path}: truncated payload ({len(payload)} of {count} bytes)")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    img = pixels.transpose(2, 0, 1).astype(np.float64) / maxval
    if channels == 1:
        img = np.repeat(img, 3, axis=0)
    return img


def _to_bytes(values: np.ndarray) -> np.ndarray:
    return np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(img: np.ndarray, path) -> None:
    """Write a 3 x H x W (P6) or 1 x H x W / H x W (P5) array in [0, 1]."""
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise UsageError(f"cannot save array of shape {img.shape} as Netpbm")
    c, h, w = img.shape
    magic = b"P6" if c == 3 else b"P5"
    header = magic + b"\n%d %d\n255\n" % (w, h)
    Path(path).write_bytes(header + _to_bytes(img).transpose(1, 2, 0).tobytes())


def export_map(values, path, mode: str = "unit") -> None:
    """Write a 1 x H x W (or H x W) map as an 8-bit PGM.

    ``unit`` assumes values in [0, 1]; ``minmax`` stretches the observed range
    to 0..255 and writes mid-grey 128 for a constant map.
    """
    m = np.asarray(getattr(values, "data", values), dtype=np.float64)
    m = m.reshape(m.shape[-2:])
    if not np.isfinite(m).all():
        raise UsageError("cannot export a map with non-finite values")
    if mode == "unit":
        scaled = np.round(np.clip(m, 0.0, 1.0) * 255.0)
    elif mode == "minmax":
        lo, hi = m.min(), m.max()
        scaled = np.full(m.shape, 128.0) if hi == lo else np.round((m - lo) / (hi - lo) * 255.0)
    else:
        raise UsageError(f"unknown export mode {mode!r}")
    h, w = m.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + scaled.astype(np.uint8).tobytes())


# ----------------------------------------------------------------------------
# Weights container
# ----------------------------------------------------------------------------

MAGIC = b"PADW"
VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def save_weights(weights: Dict[str, np.ndarray], path) -> None:
    """Serialise named float arrays; names must be unique and non-empty."""
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<II", VERSION, len(weights)))
    for name, value in weights.items():
        arr = np.asarray(value)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_CODES:
            raise UsageError(f"{name}: unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        if not raw_name or len(raw_name) > 0xFFFF:
            raise UsageError(f"invalid tensor name {name!r}")
        out.write(struct.pack("<H", len(raw_name)))
        out.write(raw_name)
        out.write(struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    Path(path).write_bytes(out.getvalue())


def load_weights(path, prefix: str = "") -> "OrderedDict[str, np.ndarray]":
    """Parse a container written by :func:`save_weights`.

    The whole file is validated before anything is returned; with ``prefix``
    only the matching tensors are kept.
    """
    buf = Path(path).read_bytes()
    view = memoryview(buf)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"{path}: truncated weights file")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise FormatError(f"{path}: bad magic, not a weights container")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"{path}: unsupported container version {version}")
    result: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        try:
            name = bytes(take(name_len)).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{path}: tensor name is not utf-8") from None
        code, rank = struct.unpack("<BB", take(2))
        if code not in _CODE_DTYPES:
            raise FormatError(f"{path}: unknown dtype code {code} for {name!r}")
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        dt = _CODE_DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(take(nbytes), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        if name in result:
            raise FormatError(f"{path}: duplicate tensor name {name!r}")
        result[name] = arr
    if pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - pos} trailing bytes")
    if prefix:
        result = OrderedDict((k, v) for k, v in result.items() if k.startswith(prefix))
    return result


# ----------------------------------------------------------------------------
# Manifests
# ----------------------------------------------------------------------------

MANIFEST_COLUMNS = ("left_path", "right_path", "score", "kind", "distortion", "level", "observers")


@dataclass
class ManifestRecord:
    left_path: Path
    right_path: Optional[Path]
    score: float
    kind: str = "3d"
    distortion: str = ""
    level: str = ""
    observers: List[float] = field(default_factory=list)


@dataclass
class StereoSample:
    """Left/right 3 x H x W images in [0, 1], a subjective score, optional ratings."""

    left: np.ndarray
    right: np.ndarray
    score: float
    observers: List[float] = field(default_factory=list)
    tag: str = ""


def load_manifest(path) -> List[ManifestRecord]:
    """Read a dataset CSV; relative paths resolve against its directory."""
    path = Path(path)
    base = path.parent
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in MANIFEST_COLUMNS[:4] if c not in header]
        if missing:
            raise FormatError(f"{path}: missing column(s) {', '.join(missing)}")
        for row in reader:
            line = reader.line_num
            try:
                score = float(row["score"])
            except (TypeError, ValueError):
                raise FormatError(f"{path}: line {line}: unparsable score {row['score']!r}") from None
            if not math.isfinite(score):
                raise FormatError(f"{path}: line {line}: score must be finite")
            kind = (row.get("kind") or "3d").strip().lower()
            if kind not in ("2d", "3d"):
                raise FormatError(f"{path}: line {line}: kind must be 2d or 3d, got {kind!r}")
            left = (row.get("left_path") or "").strip()
            right = (row.get("right_path") or "").strip()
            if not left:
                raise FormatError(f"{path}: line {line}: empty left_path")
            if kind == "3d" and not right:
                raise FormatError(f"{path}: line {line}: 3d record needs right_path")
            if kind == "2d" and right:
                raise FormatError(f"{path}: line {line}: 2d record must not have right_path")
            obs_field = (row.get("observers") or "").strip()
            try:
                observers = [float(v) for v in obs_field.split(";") if v.strip()]
            except ValueError:
                raise FormatError(f"{path}: line {line}: unparsable observers {obs_field!r}") from None
            records.append(
                ManifestRecord(
                    left_path=base / left,
                    right_path=base / right if right else None,
                    score=score,
                    kind=kind,
                    distortion=(row.get("distortion") or "").strip(),
                    level=(row.get("level") or "").strip(),
                    observers=observers,
                )
            )
    return records


def write_manifest(records: Iterable[ManifestRecord], path) -> None:
    path = Path(path)
    base = path.parent
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for r in records:
            writer.writerow([
                os.path.relpath(r.left_path, base),
                os.path.relpath(r.right_path, base) if r.right_path else "",
                repr(float(r.score)),
                r.kind,
                r.distortion,
                r.level,
                ";".join(repr(float(v)) for v in r.observers),
            ])


def load_samples(records: Sequence[ManifestRecord]) -> List[StereoSample]:
    """Decode the 3d records of a manifest into in-memory stereo samples."""
    samples = []
    for r in records:
        if r.kind != "3d":
            continue
        samples.append(StereoSample(load_image(r.left_path), load_image(r.right_path), r.score,
                                    list(r.observers), f"{r.distortion}:{r.level}"))
    return samples


def load_images_2d(records: Sequence[ManifestRecord]) -> List[Tuple[np.ndarray, float]]:
    """Images and scores of the 2d records (the left view of 3d records is ignored)."""
    return [(load_image(r.left_path), r.score) for r in records if r.kind == "2d"]


# ----------------------------------------------------------------------------
# Synthetic distortions
# ----------------------------------------------------------------------------

BLUR_SIGMAS = (1.0, 2.0, 4.0, 8.0)
NOISE_SIGMAS = (0.05, 0.1, 0.2, 0.4)
MAX_LEVEL = 4


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur over the two spatial axes (reflect borders)."""
    k = gaussian_kernel(sigma)
    out = correlate1d(np.asarray(img, dtype=np.float64), k, axis=-1, mode="reflect")
    return correlate1d(out, k, axis=-2, mode="reflect")


def gaussian_noise(shape, sigma: float, rng: np.random.Generator) -> np.ndarray:
    return rng.normal(0.0, sigma, size=shape)


def distort(img: np.ndarray, kind: str, level: int, rng: np.random.Generator) -> np.ndarray:
    """Apply ``kind`` ("blur" or "noise") at ``level`` 0..4; level 0 returns the input."""
    if not 0 <= level <= MAX_LEVEL:
        raise UsageError(f"distortion level must be in 0..{MAX_LEVEL}, got {level}")
    if level == 0:
        return img
    if kind == "blur":
        return gaussian_blur(img, BLUR_SIGMAS[level - 1])
    if kind == "noise":
        return np.clip(img + gaussian_noise(img.shape, NOISE_SIGMAS[level - 1], rng), 0.0, 1.0)
    raise UsageError(f"unknown distortion kind {kind!r}")


def pseudo_mos(level_left: int, level_right: int) -> float:
    return 100.0 - 20.0 * (level_left + level_right) / 2.0


def default_variants() -> List[Tuple[str, int, int]]:
    """Symmetric levels 1-4 and one-sided levels 2 and 4 for blur and noise."""
    variants = []
    for kind in ("blur", "noise"):
        variants += [(kind, lv, lv) for lv in range(1, MAX_LEVEL + 1)]
        variants += [(kind, 0, lv) for lv in (2, 4)] + [(kind, lv, 0) for lv in (2, 4)]
    return variants


def synthesize_distortions(
    references: Sequence[Tuple[np.ndarray, np.ndarray]],
    rng: np.random.Generator,
    variants: Optional[Sequence[Tuple[str, int, int]]] = None,
    include_pristine: bool = True,
) -> List[StereoSample]:
    """Degrade each reference pair with every (kind, left level, right level) variant.

    Labels follow ``100 - 20 * mean(level_left, level_right)``; this is an
    ordering device for desk-scale experiments, not a perceptual model.
    """
    if not references:
        raise UsageError("need at least one reference stereo pair")
    variants = list(default_variants() if variants is None else variants)
    samples = []
    for idx, (left, right) in enumerate(references):
        if include_pristine:
            samples.append(StereoSample(left, right, pseudo_mos(0, 0), tag=f"ref{idx}:pristine:0-0"))
        for kind, lv_l, lv_r in variants:
            samples.append(StereoSample(
                distort(left, kind, lv_l, rng),
                distort(right, kind, lv_r, rng),
                pseudo_mos(lv_l, lv_r),
                tag=f"ref{idx}:{kind}:{lv_l}-{lv_r}",
            ))
    return samples


def synthetic_scene(height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth random colour field with a few hard-edged shapes, values in [0, 1]."""
    yy, xx = np.mgrid[0:height, 0:width] / max(height, width)
    img = np.empty((3, height, width))
    for c in range(3):
        a, b, p, q = rng.uniform(-1, 1, 4)
        f1, f2 = rng.uniform(1.0, 4.0, 2)
        img[c] = 0.5 + 0.25 * np.sin(2 * np.pi * (f1 * xx * a + f2 * yy * b) + p) + 0.1 * q
    for _ in range(4):
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        r = rng.uniform(0.08, 0.25) * min(height, width)
        mask = (yy * max(height, width) - cy) ** 2 + (xx * max(height, width) - cx) ** 2 < r * r
        img[:, mask] = rng.uniform(0, 1, size=(3, 1))
    img += 0.02 * gaussian_blur(rng.standard_normal(img.shape), 1.0)
    return np.clip(img, 0.0, 1.0)


def synthetic_stereo_pair(height: int, width: int, rng: np.random.Generator,
                          disparity: int = 4) -> Tuple[np.ndarray, np.ndarray]:
    """A scene and a horizontally shifted copy standing in for the second view."""
    scene = synthetic_scene(height, width + disparity, rng)
    return scene[:, :, disparity:].copy(), scene[:, :, :width].copy()


def find_reference_pairs(folder) -> List[Tuple[Path, Path]]:
    """Pair up ``<name>_l.<ext>`` / ``<name>_r.<ext>`` files (case-insensitive)."""
    folder = Path(folder)
    lefts = {}
    rights = {}
    for p in sorted(folder.iterdir()):
        m = re.match(r"(.+)_([lLrR])\.(ppm|pgm|pnm)$", p.name)
        if not m:
            continue
        (lefts if m.group(2).lower() == "l" else rights)[m.group(1)] = p
    pairs = [(lefts[k], rights[k]) for k in sorted(lefts) if k in rights]
    if not pairs:
        raise UsageError(f"no <name>_l / <name>_r image pairs found in {folder}")
    return pairs


def write_dataset(samples: Sequence[StereoSample], out_dir) -> Path:
    """Store samples as PPM pairs plus ``manifest.csv``; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for i, s in enumerate(samples):
        stem = f"{i:04d}_" + re.sub(r"[^A-Za-z0-9]+", "-", s.tag).strip("-")
        lp, rp = out_dir / f"{stem}_l.ppm", out_dir / f"{stem}_r.ppm"
        save_image(s.left, lp)
        save_image(s.right, rp)
        kind, _, level = s.tag.rpartition(":")
        records.append(ManifestRecord(lp, rp, s.score, "3d", kind.split(":")[-1], level, list(s.observers)))
    manifest = out_dir / "manifest.csv"
    write_manifest(records, manifest)
    return manifest
