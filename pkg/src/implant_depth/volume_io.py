"""On-disk volume format: raw float32 payload plus a key=value sidecar.

A record directory holds
  volume.raw  little-endian float32 voxels, depth-major C order
  meta.txt    UTF-8 key=value lines (dimensions, spacing, annotation)

The format is deliberately dumb so any language can read it and the
write/read round trip is bit-exact.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import VolumeFormatError
from .geometry import Interval
from .phantom import CONDITIONS, ImplantAnnotation, PatientRecord, Volume

FORMAT_VERSION = 1

RAW_NAME = "volume.raw"
META_NAME = "meta.txt"

_META_KEYS = (
    "version", "id", "depth", "height", "width",
    "spacing_d", "spacing_h", "spacing_w",
    "start", "end", "pos_row", "pos_col",
    "condition", "crown_slice", "canal_slice",
)


def write_volume(record: PatientRecord, directory: str | Path) -> None:
    """Write `record` into `directory` (created if needed)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    depth, height, width = record.volume.shape
    ann = record.annotation
    values = {
        "version": str(FORMAT_VERSION),
        "id": record.id,
        "depth": str(depth),
        "height": str(height),
        "width": str(width),
        "spacing_d": repr(float(record.volume.spacing_mm[0])),
        "spacing_h": repr(float(record.volume.spacing_mm[1])),
        "spacing_w": repr(float(record.volume.spacing_mm[2])),
        "start": repr(float(ann.interval.start)),
        "end": repr(float(ann.interval.end)),
        "pos_row": repr(float(ann.axial_position[0])),
        "pos_col": repr(float(ann.axial_position[1])),
        "condition": ann.condition,
        "crown_slice": str(record.crown_slice_index),
        "canal_slice": "none" if ann.canal_slice is None
                       else repr(float(ann.canal_slice)),
    }
    lines = "".join(f"{key}={values[key]}\n" for key in _META_KEYS)
    (directory / META_NAME).write_text(lines, encoding="utf-8")
    payload = np.ascontiguousarray(record.volume.voxels, dtype="<f4")
    (directory / RAW_NAME).write_bytes(payload.tobytes())


def _parse_meta(path: Path) -> dict[str, str]:
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise VolumeFormatError(f"missing metadata file {path}") from None
    entries: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if "=" not in line:
            raise VolumeFormatError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        entries[key.strip()] = value.strip()
    return entries


def _require(entries: dict[str, str], key: str, path: Path) -> str:
    if key not in entries:
        raise VolumeFormatError(f"{path}: missing required field '{key}'")
    return entries[key]


def _parse_int(entries: dict[str, str], key: str, path: Path) -> int:
    raw = _require(entries, key, path)
    try:
        return int(raw)
    except ValueError:
        raise VolumeFormatError(f"{path}: field '{key}' is not an integer: {raw!r}") from None


def _parse_float(entries: dict[str, str], key: str, path: Path) -> float:
    raw = _require(entries, key, path)
    try:
        return float(raw)
    except ValueError:
        raise VolumeFormatError(f"{path}: field '{key}' is not a number: {raw!r}") from None


def read_volume(directory: str | Path) -> PatientRecord:
    """Read a record previously written by write_volume."""
    directory = Path(directory)
    meta_path = directory / META_NAME
    entries = _parse_meta(meta_path)

    version = _parse_int(entries, "version", meta_path)
    if version != FORMAT_VERSION:
        raise VolumeFormatError(
            f"{meta_path}: unknown format version {version} (expected {FORMAT_VERSION})"
        )
    depth = _parse_int(entries, "depth", meta_path)
    height = _parse_int(entries, "height", meta_path)
    width = _parse_int(entries, "width", meta_path)
    for key, value in (("depth", depth), ("height", height), ("width", width)):
        if value < 8:
            raise VolumeFormatError(
                f"{meta_path}: field '{key}'={value} below the minimum of 8"
            )
    spacing = (
        _parse_float(entries, "spacing_d", meta_path),
        _parse_float(entries, "spacing_h", meta_path),
        _parse_float(entries, "spacing_w", meta_path),
    )
    condition = _require(entries, "condition", meta_path)
    if condition not in CONDITIONS:
        raise VolumeFormatError(f"{meta_path}: field 'condition' has unknown value {condition!r}")
    canal_raw = _require(entries, "canal_slice", meta_path)
    canal = None if canal_raw == "none" else _parse_float(entries, "canal_slice", meta_path)

    raw_path = directory / RAW_NAME
    try:
        payload = raw_path.read_bytes()
    except FileNotFoundError:
        raise VolumeFormatError(f"missing payload file {raw_path}") from None
    expected = 4 * depth * height * width
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{raw_path}: payload size mismatch, expected {expected} bytes "
            f"for {depth}x{height}x{width} float32, found {len(payload)}"
        )
    voxels = np.frombuffer(payload, dtype="<f4").reshape(depth, height, width).copy()

    record = PatientRecord(
        id=_require(entries, "id", meta_path),
        volume=Volume(voxels=voxels, spacing_mm=spacing),
        annotation=ImplantAnnotation(
            axial_position=(
                _parse_float(entries, "pos_row", meta_path),
                _parse_float(entries, "pos_col", meta_path),
            ),
            interval=Interval(
                _parse_float(entries, "start", meta_path),
                _parse_float(entries, "end", meta_path),
            ),
            condition=condition,
            canal_slice=canal,
        ),
        crown_slice_index=_parse_int(entries, "crown_slice", meta_path),
    )
    return record
