"""File formats and transect directory layout.

Layout of an input root::

    root/<transect_id>/references.csv
    root/<transect_id>/references/*.pfm, *.pgm
    root/<transect_id>/observations/<image_id>.pfm
    root/<transect_id>/detections/<image_id>.json
    root/<transect_id>/groundtruth.csv        (optional)

Disparity rasters are single-channel PFM; landmark masks are binary 8-bit
PGM (0 or 255).
"""

from __future__ import annotations

import csv
import io as _io
import json
import logging
import math
import os
import re
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from trapmetric.errors import (
    DimensionMismatch,
    InvalidCrop,
    MissingColumn,
    ParseError,
    SchemaError,
)
from trapmetric.estimation import CATEGORIES, BoundingBox, DetectionSet, DistanceEstimate

logger = logging.getLogger(__name__)

METADATA_STRIP_ROWS = 80

REFERENCE_COLUMNS = ("transect_id", "image", "disparity", "mask", "distance_m")
GROUNDTRUTH_COLUMNS = ("transect_id", "image_id", "box_index", "distance_m")
ESTIMATE_COLUMNS = (
    "transect_id", "image_id", "box_index", "x", "y", "w", "h", "confidence",
    "distance_m", "percentile", "pixels_sampled", "invalid_fraction", "flags",
)
DENSITY_COLUMNS = ("grid_m", "density_est", "density_gt")


# ---------------------------------------------------------------------------
# atomic writes
# ---------------------------------------------------------------------------


def atomic_write_bytes(path, data: bytes) -> None:
    """Write to a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# rasters
# ---------------------------------------------------------------------------


def _read_header_tokens(buf: bytes, count: int):
    """Split the first ``count`` whitespace-separated header tokens.

    Returns the tokens and the offset of the payload (one whitespace byte
    after the last token). ``#`` comments are skipped.
    """
    tokens, pos, n = [], 0, len(buf)
    while len(tokens) < count:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError("truncated header")
        tokens.append(buf[start:pos].decode("ascii", errors="replace"))
    if pos >= n or not buf[pos:pos + 1].isspace():
        raise ParseError("header not terminated by whitespace")
    return tokens, pos + 1


def decode_pfm(buf: bytes) -> np.ndarray:
    """Decode a single-channel PFM into a top-down float32 array."""
    tokens, offset = _read_header_tokens(buf, 4)
    magic, w, h, scale = tokens
    if magic != "Pf":
        raise ParseError(f"unsupported PFM magic {magic!r}; expected single-channel 'Pf'")
    try:
        width, height, scale = int(w), int(h), float(scale)
    except ValueError as exc:
        raise ParseError(f"malformed PFM header: {tokens}") from exc
    if width < 1 or height < 1 or scale == 0 or not math.isfinite(scale):
        raise ParseError(f"malformed PFM header: {tokens}")
    dtype = "<f4" if scale < 0 else ">f4"
    need = width * height * 4
    payload = buf[offset:offset + need]
    if len(payload) < need:
        raise ParseError(f"truncated PFM payload: {len(payload)} of {need} bytes")
    data = np.frombuffer(payload, dtype=dtype).reshape(height, width)
    # PFM stores rows bottom to top
    return np.flipud(data).astype(np.float32)


def encode_pfm(values) -> bytes:
    a = np.asarray(values)
    if a.ndim != 2:
        raise ValueError("PFM writer expects a 2D array")
    height, width = a.shape
    header = f"Pf\n{width} {height}\n-1.0\n".encode("ascii")
    return header + np.flipud(a).astype("<f4").tobytes()


def load_disparity(path) -> np.ndarray:
    """Load a PFM disparity map as float64 (rows top to bottom).

    Raises:
        ParseError: malformed header or short payload.
        ValueError: NaN or infinite pixels.
    """
    data = decode_pfm(Path(path).read_bytes())
    if not np.all(np.isfinite(data)):
        raise ValueError(f"{path}: disparity map contains non-finite values")
    return data.astype(np.float64)


def write_disparity(path, values) -> None:
    atomic_write_bytes(path, encode_pfm(values))


def decode_pgm_mask(buf: bytes) -> np.ndarray:
    tokens, offset = _read_header_tokens(buf, 4)
    magic, w, h, maxval = tokens
    if magic != "P5":
        raise ParseError(f"unsupported PGM magic {magic!r}; expected binary 'P5'")
    try:
        width, height, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise ParseError(f"malformed PGM header: {tokens}") from exc
    if width < 1 or height < 1 or maxval != 255:
        raise ParseError(f"mask PGM must be 8-bit with maxval 255: {tokens}")
    payload = buf[offset:offset + width * height]
    if len(payload) < width * height:
        raise ParseError("truncated PGM payload")
    data = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    if not np.all((data == 0) | (data == 255)):
        raise SchemaError("mask PGM values must be 0 or 255")
    return data == 255


def encode_pgm_mask(mask) -> bytes:
    m = np.asarray(mask, dtype=bool)
    if m.ndim != 2:
        raise ValueError("PGM writer expects a 2D array")
    height, width = m.shape
    return f"P5\n{width} {height}\n255\n".encode("ascii") + (m.astype(np.uint8) * 255).tobytes()


def load_mask(path) -> np.ndarray:
    return decode_pgm_mask(Path(path).read_bytes())


def write_mask(path, mask) -> None:
    atomic_write_bytes(path, encode_pgm_mask(mask))


def crop_metadata_strip(raster, strip_rows: int = METADATA_STRIP_ROWS, canonical_height: Optional[int] = None):
    """Drop the burnt-in metadata strip at the bottom of a raster.

    With ``canonical_height`` the crop is automatic: rasters already at that
    height pass through, rasters exactly ``strip_rows`` taller are cropped,
    anything else is a mismatch.
    """
    a = np.asarray(raster)
    height = a.shape[0]
    if canonical_height is not None:
        if height == canonical_height:
            return a
        if height != canonical_height + strip_rows:
            raise DimensionMismatch(
                f"raster height {height} is neither {canonical_height} nor "
                f"{canonical_height} + {strip_rows}"
            )
    if height <= strip_rows:
        raise InvalidCrop(f"cannot crop {strip_rows} rows from a raster of height {height}")
    return a[: height - strip_rows]


# ---------------------------------------------------------------------------
# detections
# ---------------------------------------------------------------------------


def detections_from_dict(doc) -> DetectionSet:
    if not isinstance(doc, dict) or not isinstance(doc.get("image_id"), str):
        raise SchemaError("detection document needs a string 'image_id'")
    boxes = doc.get("boxes")
    if not isinstance(boxes, list):
        raise SchemaError("detection document needs a 'boxes' list")
    parsed = []
    for i, b in enumerate(boxes):
        if not isinstance(b, dict):
            raise SchemaError(f"box {i} is not an object")
        try:
            coords = [b[k] for k in ("x", "y", "w", "h", "conf")]
            cat = b["cat"]
        except KeyError as exc:
            raise SchemaError(f"box {i} lacks field {exc}") from exc
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in coords):
            raise SchemaError(f"box {i} has non-numeric coordinates")
        if cat not in CATEGORIES:
            raise SchemaError(f"box {i} has unknown category {cat!r}")
        parsed.append(BoundingBox(*(float(v) for v in coords), category=cat))
    return DetectionSet(doc["image_id"], tuple(parsed))


def detections_to_dict(det: DetectionSet) -> dict:
    return {
        "image_id": det.image_id,
        "boxes": [
            {"x": b.x, "y": b.y, "w": b.w, "h": b.h, "conf": b.confidence, "cat": b.category}
            for b in det.boxes
        ],
    }


def load_detections(path) -> DetectionSet:
    """Parse one detector JSON document; no confidence filtering here."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    return detections_from_dict(doc)


def write_detections(path, det: DetectionSet) -> None:
    atomic_write_text(path, json.dumps(detections_to_dict(det), indent=2) + "\n")


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    # numpy scalars repr as "np.float64(...)"; go through the builtin type
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def _write_csv(path, columns: Sequence[str], rows: Iterable[Sequence]) -> None:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    atomic_write_text(path, buf.getvalue())


def _read_csv(path, columns: Sequence[str]) -> list[dict]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"{path}: not UTF-8") from exc
    reader = csv.DictReader(_io.StringIO(text))
    if reader.fieldnames is None:
        raise ParseError(f"{path}: missing header row")
    missing = [c for c in columns if c not in reader.fieldnames]
    if missing:
        raise MissingColumn(f"{path}: missing columns {missing}")
    rows = []
    for lineno, row in enumerate(reader, start=2):
        if None in row or any(row[c] is None for c in columns):
            raise ParseError(f"{path}:{lineno}: wrong number of fields")
        rows.append(row)
    return rows


def _float(v: str, where: str) -> float:
    try:
        return float(v)
    except ValueError as exc:
        raise ParseError(f"{where}: not a number: {v!r}") from exc


def _int(v: str, where: str) -> int:
    try:
        return int(v)
    except ValueError as exc:
        raise ParseError(f"{where}: not an integer: {v!r}") from exc


@dataclass(frozen=True)
class ReferenceRecord:
    transect_id: str
    image: str
    disparity: str
    mask: str
    distance_m: float


def load_reference_csv(path) -> list[ReferenceRecord]:
    out = []
    for i, row in enumerate(_read_csv(path, REFERENCE_COLUMNS), start=2):
        z = _float(row["distance_m"], f"{path}:{i}")
        if not (math.isfinite(z) and z > 0):
            raise SchemaError(f"{path}:{i}: distance must be positive")
        out.append(ReferenceRecord(row["transect_id"], row["image"], row["disparity"], row["mask"], z))
    return out


def write_reference_csv(path, records: Sequence[ReferenceRecord]) -> None:
    _write_csv(path, REFERENCE_COLUMNS,
               ((r.transect_id, r.image, r.disparity, r.mask, r.distance_m) for r in records))


@dataclass(frozen=True)
class GroundTruthRow:
    transect_id: str
    image_id: str
    box_index: int
    distance_m: float

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.transect_id, self.image_id, self.box_index)


def load_groundtruth_csv(path) -> list[GroundTruthRow]:
    """Ground-truth rows; (transect_id, image_id, box_index) must be unique."""
    out, seen = [], set()
    for i, row in enumerate(_read_csv(path, GROUNDTRUTH_COLUMNS), start=2):
        rec = GroundTruthRow(
            row["transect_id"], row["image_id"],
            _int(row["box_index"], f"{path}:{i}"), _float(row["distance_m"], f"{path}:{i}"),
        )
        if rec.key in seen:
            raise ParseError(f"{path}:{i}: duplicate ground truth key {rec.key}")
        seen.add(rec.key)
        out.append(rec)
    return out


def write_groundtruth_csv(path, rows: Sequence[GroundTruthRow]) -> None:
    rows = sorted(rows, key=lambda r: r.key)
    _write_csv(path, GROUNDTRUTH_COLUMNS, ((r.transect_id, r.image_id, r.box_index, r.distance_m) for r in rows))


def write_estimates_csv(path, estimates: Sequence[DistanceEstimate]) -> None:
    rows = []
    for e in sorted(estimates, key=lambda e: e.key):
        b = e.box
        rows.append((
            e.transect_id, e.image_id, e.box_index, b.x, b.y, b.w, b.h, b.confidence,
            e.distance_m, e.percentile_used, e.pixels_sampled, e.invalid_pixel_fraction,
            ";".join(sorted(e.flags)),
        ))
    _write_csv(path, ESTIMATE_COLUMNS, rows)


def load_estimates_csv(path) -> list[DistanceEstimate]:
    out = []
    for i, row in enumerate(_read_csv(path, ESTIMATE_COLUMNS), start=2):
        where = f"{path}:{i}"
        box = BoundingBox(
            *(_float(row[k], where) for k in ("x", "y", "w", "h", "confidence")), category="animal"
        )
        out.append(DistanceEstimate(
            image_id=row["image_id"],
            box_index=_int(row["box_index"], where),
            distance_m=_float(row["distance_m"], where),
            percentile_used=_float(row["percentile"], where),
            pixels_sampled=_int(row["pixels_sampled"], where),
            invalid_pixel_fraction=_float(row["invalid_fraction"], where),
            flags=frozenset(f for f in row["flags"].split(";") if f),
            box=box,
            transect_id=row["transect_id"],
        ))
    return out


def write_density_csv(path, grid, density_est, density_gt) -> None:
    _write_csv(path, DENSITY_COLUMNS,
               ((float(g), float(a), float(b)) for g, a, b in zip(grid, density_est, density_gt)))


def load_density_csv(path):
    rows = _read_csv(path, DENSITY_COLUMNS)
    return tuple(np.array([_float(r[c], str(path)) for r in rows]) for c in DENSITY_COLUMNS)


def _json_safe(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.generic):
        return _json_safe(obj.item())
    return obj


def write_report(path, report: dict) -> None:
    """Write a report dict as JSON; non-finite floats become null."""
    atomic_write_text(path, json.dumps(_json_safe(report), indent=2, sort_keys=True) + "\n")


def load_report(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# transect discovery
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ReferenceEntry:
    image: str
    disparity_path: Path
    mask_path: Path
    distance_m: float


@dataclass(frozen=True)
class ObservationEntry:
    image_id: str
    disparity_path: Path
    detection_path: Path
    groundtruth: tuple = ()


@dataclass
class TransectLayout:
    transect_id: str
    path: Path
    references: list = field(default_factory=list)
    observations: list = field(default_factory=list)
    groundtruth_path: Optional[Path] = None


@dataclass(frozen=True)
class SkipRecord:
    transect_id: str
    reason: str

    def to_dict(self) -> dict:
        return {"transect_id": self.transect_id, "reason": self.reason}


def _load_layout(tdir: Path) -> TransectLayout:
    tid = tdir.name
    ref_csv = tdir / "references.csv"
    if not ref_csv.is_file():
        raise SchemaError("missing references.csv")
    layout = TransectLayout(tid, tdir)
    for rec in load_reference_csv(ref_csv):
        if rec.transect_id != tid:
            raise SchemaError(f"references.csv names transect {rec.transect_id!r}")
        disp = tdir / "references" / rec.disparity
        mask = tdir / "references" / rec.mask
        for p in (disp, mask):
            if not p.is_file():
                raise SchemaError(f"missing reference file {p.relative_to(tdir)}")
        layout.references.append(ReferenceEntry(rec.image, disp, mask, rec.distance_m))

    gt_by_image: dict[str, list] = {}
    gt_csv = tdir / "groundtruth.csv"
    if gt_csv.is_file():
        layout.groundtruth_path = gt_csv
        for row in load_groundtruth_csv(gt_csv):
            gt_by_image.setdefault(row.image_id, []).append(row)

    for p in sorted((tdir / "observations").glob("*.pfm")):
        image_id = p.stem
        layout.observations.append(
            ObservationEntry(
                image_id, p, tdir / "detections" / f"{image_id}.json",
                tuple(sorted(gt_by_image.get(image_id, ()), key=lambda r: r.box_index)),
            )
        )
    return layout


def discover_transects(root) -> tuple[list[TransectLayout], list[SkipRecord]]:
    """Find transect directories under ``root`` in lexicographic order.

    Returns usable layouts plus a skip record for every subdirectory that is
    not a complete transect or has fewer than two references.
    """
    root = Path(root)
    layouts, skips = [], []
    if not root.is_dir():
        return layouts, skips
    for tdir in sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith(".")):
        tid = tdir.name
        if not ((tdir / "references").is_dir() and (tdir / "observations").is_dir()):
            skips.append(SkipRecord(tid, "missing references/ or observations/ directory"))
            continue
        try:
            layout = _load_layout(tdir)
        except (ParseError, OSError) as exc:
            skips.append(SkipRecord(tid, f"unreadable layout: {exc}"))
            continue
        if len(layout.references) < 2:
            skips.append(SkipRecord(tid, f"only {len(layout.references)} reference(s); need at least 2"))
            continue
        layouts.append(layout)
    for s in skips:
        logger.warning("skipping transect %s: %s", s.transect_id, s.reason)
    return layouts, skips


_SAFE_ID = re.compile(r"^[A-Za-z0-9_.-]+$")


def check_identifier(name: str) -> str:
    if not _SAFE_ID.match(name):
        raise SchemaError(f"identifier {name!r} may only use letters, digits, '_', '.', '-'")
    return name
