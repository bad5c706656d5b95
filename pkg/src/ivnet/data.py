"""Raster and manifest I/O, uncertain-label policies, resize/crop.

Raster format: one ASCII header line ``IVRASTER 1 <H> <W> <C>`` followed
by H*W*C little-endian float32 values, row-major, channel-last.  Binary
8-bit PGM (P5) is accepted on input.  Manifests are UTF-8: a header
``classes:<c1>,<c2>,...`` then one ``path|l1,...,lk|t1 t2 ...`` record
per line, with label values in {1, 0, -1}.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .backbone import RasterImage
from .errors import ContractError, DataFormatError

_MAGIC = b"IVRASTER 1"


def save_raster(path: str | Path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels, dtype=np.float32)
    if pixels.ndim == 2:
        pixels = pixels[:, :, None]
    if pixels.ndim != 3:
        raise ContractError(f"raster payload must be (H, W[, C]), got {pixels.shape}")
    h, w, c = pixels.shape
    header = f"IVRASTER 1 {h} {w} {c}\n".encode("ascii")
    payload = np.ascontiguousarray(pixels, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def load_raster(path: str | Path) -> RasterImage:
    raw = Path(path).read_bytes()
    if raw.startswith(_MAGIC):
        return _load_ivraster(raw, str(path))
    if raw.startswith(b"P5"):
        return _load_pgm(raw, str(path))
    raise DataFormatError(f"{path}: magic mismatch at offset 0")


def _load_ivraster(raw: bytes, path: str) -> RasterImage:
    nl = raw.find(b"\n")
    if nl < 0:
        raise DataFormatError(f"{path}: truncated header (no newline before offset {len(raw)})")
    fields = raw[:nl].split()
    if len(fields) != 5:
        raise DataFormatError(f"{path}: malformed header {raw[:nl]!r}")
    try:
        h, w, c = int(fields[2]), int(fields[3]), int(fields[4])
    except ValueError as exc:
        raise DataFormatError(f"{path}: non-integer dimensions in header") from exc
    need = h * w * c * 4
    body = raw[nl + 1:]
    if len(body) != need:
        raise DataFormatError(
            f"{path}: truncated payload at offset {nl + 1 + len(body)} "
            f"(expected {need} bytes, got {len(body)})"
        )
    values = np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(h, w, c)
    try:
        return RasterImage.from_array(values)
    except ContractError as exc:
        raise DataFormatError(f"{path}: {exc}") from exc


def _load_pgm(raw: bytes, path: str) -> RasterImage:
    # P5 <w> <h> <maxval> then binary payload; '#' comments allowed.
    tokens: list[bytes] = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos: pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos: pos + 1] == b"#":
            eol = raw.find(b"\n", pos)
            pos = eol + 1 if eol >= 0 else len(raw)
            continue
        start = pos
        while pos < len(raw) and not raw[pos: pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataFormatError(f"{path}: truncated PGM header at offset {pos}")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        w, h, maxval = int(tokens[0]), int(tokens[1]), int(tokens[2])
    except ValueError as exc:
        raise DataFormatError(f"{path}: malformed PGM header") from exc
    if not 0 < maxval <= 255:
        raise DataFormatError(f"{path}: only 8-bit PGM supported, maxval={maxval}")
    body = raw[pos:]
    if len(body) != w * h:
        raise DataFormatError(
            f"{path}: truncated PGM payload at offset {pos + len(body)} "
            f"(expected {w * h} bytes, got {len(body)})"
        )
    values = np.frombuffer(body, dtype=np.uint8).astype(np.float64).reshape(h, w, 1)
    return RasterImage.from_array(values / maxval)


@dataclass
class ManifestRecord:
    image_path: str
    labels: np.ndarray  # (k,) ints in {1, 0, -1}
    tokens: list[int]


@dataclass
class Manifest:
    class_names: list[str]
    records: list[ManifestRecord]
    base_dir: Path

    @property
    def k(self) -> int:
        return len(self.class_names)

    def resolve(self, record: ManifestRecord) -> Path:
        return self.base_dir / record.image_path


def parse_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise DataFormatError(f"{path}: not valid UTF-8: {exc}") from exc
    lines = text.splitlines()
    if not lines or not lines[0].startswith("classes:"):
        raise DataFormatError(f"{path}:1: expected 'classes:...' header")
    class_names = [c for c in lines[0][len("classes:"):].split(",") if c]
    if not class_names:
        raise DataFormatError(f"{path}:1: empty class list")
    k = len(class_names)

    records: list[ManifestRecord] = []
    seen: set[str] = set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("|")
        if len(parts) != 3:
            raise DataFormatError(
                f"{path}:{lineno}: expected 'path|labels|tokens', got {len(parts)} fields"
            )
        img, label_str, token_str = parts
        if img in seen:
            raise DataFormatError(f"{path}:{lineno}: duplicate image path '{img}'")
        seen.add(img)
        label_fields = label_str.split(",")
        if len(label_fields) != k:
            raise DataFormatError(
                f"{path}:{lineno}: expected {k} labels, got {len(label_fields)}"
            )
        try:
            labels = np.array([int(v) for v in label_fields])
        except ValueError as exc:
            raise DataFormatError(f"{path}:{lineno}: non-integer label") from exc
        if not np.isin(labels, (1, 0, -1)).all():
            raise DataFormatError(
                f"{path}:{lineno}: label values must be in {{1, 0, -1}}"
            )
        try:
            tokens = [int(t) for t in token_str.split()] if token_str.strip() else []
        except ValueError as exc:
            raise DataFormatError(f"{path}:{lineno}: non-integer token id") from exc
        records.append(ManifestRecord(img, labels, tokens))
    return Manifest(class_names, records, path.parent)


def write_manifest(path: str | Path, manifest: Manifest) -> None:
    lines = ["classes:" + ",".join(manifest.class_names)]
    for rec in manifest.records:
        labels = ",".join(str(int(v)) for v in rec.labels)
        tokens = " ".join(str(int(t)) for t in rec.tokens)
        lines.append(f"{rec.image_path}|{labels}|{tokens}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def apply_uncertain_policy(raw: np.ndarray, policy: str) -> np.ndarray:
    """Resolve -1 (uncertain) labels: U-Ones maps them to 1, U-Zeros to 0."""
    raw = np.asarray(raw)
    if not np.isin(raw, (1, 0, -1)).all():
        raise ContractError("raw labels must be in {1, 0, -1}")
    if policy not in ("u-ones", "u-zeros"):
        raise ContractError(f"unknown uncertain-label policy '{policy}'")
    fill = 1.0 if policy == "u-ones" else 0.0
    resolved = raw.astype(np.float64)
    resolved[raw == -1] = fill
    return resolved


def bilinear_resize(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-center bilinear resampling, channel-last."""
    pixels = np.asarray(pixels, dtype=np.float64)
    squeeze = pixels.ndim == 2
    if squeeze:
        pixels = pixels[:, :, None]
    h, w, _ = pixels.shape
    if (h, w) == (out_h, out_w):
        return pixels[:, :, 0] if squeeze else pixels.copy()

    def axis_coords(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = src - lo
        return lo, hi, frac

    y0, y1, fy = axis_coords(h, out_h)
    x0, x1, fx = axis_coords(w, out_w)
    top = pixels[y0][:, x0] * (1 - fx)[None, :, None] + pixels[y0][:, x1] * fx[None, :, None]
    bot = pixels[y1][:, x0] * (1 - fx)[None, :, None] + pixels[y1][:, x1] * fx[None, :, None]
    out = top * (1 - fy)[:, None, None] + bot * fy[:, None, None]
    return out[:, :, 0] if squeeze else out


def resize_center_crop(
    img: RasterImage | np.ndarray, resize_to: int, crop_to: int
) -> RasterImage:
    """Bilinear resize to a square then take the central crop window."""
    if isinstance(img, np.ndarray):
        img = RasterImage.from_array(img)
    if crop_to > resize_to:
        raise ContractError(f"crop_to {crop_to} exceeds resize_to {resize_to}")
    resized = bilinear_resize(img.pixels, resize_to, resize_to)
    off = (resize_to - crop_to) // 2
    window = resized[off: off + crop_to, off: off + crop_to, :]
    return RasterImage.from_array(window)


@dataclass
class LoadedSplit:
    """A manifest materialized into arrays ready for training."""

    images: np.ndarray  # (n, H, W, C) float64 in [0,1]
    labels: np.ndarray  # (n, k) float 0/1 after policy resolution
    tokens: list[list[int]]
    class_names: list[str]
    paths: list[str]

    def __len__(self) -> int:
        return self.images.shape[0]


def load_split(
    manifest_path: str | Path,
    policy: str = "u-ones",
    resize_to: int = 0,
    crop_to: int = 0,
) -> LoadedSplit:
    manifest = parse_manifest(manifest_path)
    images = []
    labels = []
    tokens = []
    paths = []
    for rec in manifest.records:
        img = load_raster(manifest.resolve(rec))
        if resize_to:
            img = resize_center_crop(img, resize_to, crop_to or resize_to)
        images.append(img.pixels)
        labels.append(apply_uncertain_policy(rec.labels, policy))
        tokens.append(list(rec.tokens))
        paths.append(rec.image_path)
    return LoadedSplit(
        images=np.stack(images),
        labels=np.stack(labels),
        tokens=tokens,
        class_names=manifest.class_names,
        paths=paths,
    )
