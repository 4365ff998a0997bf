"""Image files (PNG / binary PGM / .npy) and line-delimited manifests."""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InvalidInput, ManifestError
from .phantom import SliceMeta, center_crop, normalize_to_u8

log = logging.getLogger(__name__)


def to_u8(img: np.ndarray) -> np.ndarray:
    """[0, 1] floats to 8-bit, round half up."""
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_png(path, img: np.ndarray) -> None:
    Image.fromarray(to_u8(img)).save(path, format="PNG")


def write_pgm(path, img: np.ndarray) -> None:
    data = to_u8(img)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def write_image(path, img: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        write_pgm(path, img)
    else:
        write_png(path, img)


def _read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    # header: magic, width, height, maxval separated by whitespace, comments allowed
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos].decode("ascii"))
    pos += 1
    if tokens[0] != "P5":
        raise InvalidInput(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    data = np.frombuffer(raw, dtype=dtype, count=w * h, offset=pos)
    return data.reshape(h, w).astype(np.float64)


def read_raw(path) -> np.ndarray:
    """Load the stored values of an image file without rescaling."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".npy":
        return np.asarray(np.load(path), dtype=np.float64)
    if suffix == ".pgm":
        return _read_pgm(path)
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64)


def read_image(path) -> np.ndarray:
    """Load an 8-bit image file as floats in [0, 1]."""
    return read_raw(path) / 255.0


def list_images(directory) -> list[Path]:
    d = Path(directory)
    return sorted(p for p in d.iterdir() if p.suffix.lower() in (".png", ".pgm"))


def load_image_dir(directory) -> np.ndarray:
    paths = list_images(directory)
    if not paths:
        raise InvalidInput(f"no images in {directory}")
    return np.stack([read_image(p) for p in paths])


def manifest_record(path, meta: SliceMeta, normalize=False, crop_to=None) -> dict:
    rec = {
        "path": str(path),
        "field": meta.field.value,
        "modality": meta.modality.value,
        "slice": meta.slice_index,
        "subject": meta.subject_id,
        "normalize": bool(normalize),
    }
    if crop_to is not None:
        rec["crop_to"] = list(crop_to)
    return rec


def write_manifest(path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def _load_entry(rec: dict, base: Path):
    if not isinstance(rec, dict):
        raise InvalidInput("record is not an object")
    missing = {"path", "field", "modality", "slice"} - rec.keys()
    if missing:
        raise InvalidInput(f"missing keys {sorted(missing)}")
    try:
        meta = SliceMeta(rec["field"], rec["modality"], int(rec["slice"]), str(rec.get("subject", "")))
    except ValueError as exc:
        raise InvalidInput(str(exc)) from None
    path = Path(rec["path"])
    if not path.is_absolute():
        path = base / path
    if not path.exists():
        raise InvalidInput(f"missing file {path}")
    raw = read_raw(path)
    if rec.get("normalize", False):
        img = normalize_to_u8(raw).astype(np.float64) / 255.0
    else:
        if raw.max() > 255 or raw.min() < 0:
            raise InvalidInput(f"{path}: values outside 0..255 without normalize flag")
        img = raw / 255.0
    crop = rec.get("crop_to")
    if crop is not None:
        w, h = crop
        img = center_crop(img, int(w), int(h))
    return img, meta


def ingest_manifest(path, skip_errors: bool = False):
    """Load every entry of a JSON-lines manifest.

    Relative image paths resolve against the manifest's directory. Entries
    must agree on output dimensions. By default the first bad entry raises
    :class:`ManifestError`; with ``skip_errors`` it is logged and dropped.
    """
    path = Path(path)
    out, shape = [], None
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InvalidInput(f"bad JSON: {exc}") from None
            img, meta = _load_entry(rec, path.parent)
            if shape is not None and img.shape != shape:
                raise InvalidInput(f"dimension mismatch {img.shape} vs {shape}")
        except InvalidInput as exc:
            if not skip_errors:
                raise ManifestError(lineno, str(exc)) from None
            log.warning("skipping manifest line %d: %s", lineno, exc)
            continue
        shape = img.shape
        out.append((img, meta))
    return out
