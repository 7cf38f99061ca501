"""Reading and writing fields in the ``locflow-field-v1`` format.

A field file is a JSON header::

    {"format": "locflow-field-v1", "dimension": 4, "extents": [...],
     "spacing": [...], "origin": [...], "boundary": "periodic",
     "field_kind": "metric", "component_count": 10, "payload": "g.bin"}

followed by the node-major, row-major little-endian float64 payload in the
sibling binary file named by ``payload``.  Small fields may instead carry an
inline ``"values"`` list (same ordering).  Metric components use
lower-triangle packing.
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .grid import DEFAULT_MAX_POINTS, ChartGrid, GridError, MetricField, ScalarField

FORMAT = "locflow-field-v1"
FIELD_KINDS = ("metric", "scalar")
INLINE_LIMIT = 4096  # values; larger payloads always go to a binary file


class FieldFormatError(ValueError):
    """Malformed or unsupported field file."""


def grid_header(grid: ChartGrid) -> dict:
    return {
        "format": FORMAT,
        "dimension": grid.dimension,
        "extents": list(grid.extents),
        "spacing": [float(h) for h in grid.spacing],
        "origin": [float(o) for o in grid.origin],
        "boundary": grid.boundary,
    }


def grid_from_header(header: dict, max_points: int = DEFAULT_MAX_POINTS) -> ChartGrid:
    if header.get("format") != FORMAT:
        raise FieldFormatError(f"expected format {FORMAT!r}, got {header.get('format')!r}")
    try:
        extents = [int(n) for n in header["extents"]]
        spacing = [float(h) for h in header["spacing"]]
        boundary = header["boundary"]
        dimension = int(header["dimension"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FieldFormatError(f"incomplete field header: {exc}") from exc
    origin = header.get("origin")
    if dimension != len(extents):
        raise FieldFormatError(f"dimension {dimension} does not match {len(extents)} extents")
    return ChartGrid(tuple(extents), tuple(spacing), boundary,
                     None if origin is None else tuple(origin), max_points)


def _payload(field) -> tuple:
    if isinstance(field, MetricField):
        return "metric", field.components
    if isinstance(field, ScalarField):
        return "scalar", field.values[..., None]
    raise TypeError(f"cannot serialize {type(field).__name__}")


def write_field(field, path, inline: bool | None = None) -> Path:
    """Write ``field`` to ``path`` (the JSON header).

    The binary payload goes next to it as ``<stem>.bin`` unless ``inline``
    is requested (default: inline only for tiny fields).
    """
    path = Path(path)
    kind, values = _payload(field)
    header = grid_header(field.grid)
    header.update(field_kind=kind, component_count=int(values.shape[-1]))
    if inline is None:
        inline = values.size <= INLINE_LIMIT
    data = np.ascontiguousarray(values, dtype="<f8")
    if inline:
        header["values"] = data.ravel().tolist()
    else:
        bin_path = path.with_suffix(".bin")
        bin_path.write_bytes(data.tobytes())
        header["payload"] = bin_path.name
    path.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    return path


def read_field(path, max_points: int = DEFAULT_MAX_POINTS):
    """Load a :class:`MetricField` or :class:`ScalarField` from a header file."""
    path = Path(path)
    try:
        header = json.loads(path.read_text())
    except FileNotFoundError:
        raise FieldFormatError(f"no such file: {path}") from None
    except json.JSONDecodeError as exc:
        raise FieldFormatError(f"{path}: not valid JSON ({exc})") from exc
    grid = grid_from_header(header, max_points)
    kind = header.get("field_kind")
    if kind not in FIELD_KINDS:
        raise FieldFormatError(f"unsupported field_kind {kind!r}")
    ncomp = int(header.get("component_count", 0))
    expected = grid.dimension * (grid.dimension + 1) // 2 if kind == "metric" else 1
    if ncomp != expected:
        raise FieldFormatError(f"{kind} field needs {expected} components, header says {ncomp}")
    count = grid.npoints * ncomp
    if "values" in header:
        data = np.asarray(header["values"], dtype=float)
    elif "payload" in header:
        bin_path = path.parent / header["payload"]
        if not bin_path.is_file():
            raise FieldFormatError(f"no such file: {bin_path}")
        if os.path.getsize(bin_path) != 8 * count:
            raise FieldFormatError(f"{bin_path}: expected {8 * count} bytes")
        data = np.fromfile(bin_path, dtype="<f8")
    else:
        raise FieldFormatError("field header has neither 'values' nor 'payload'")
    if data.size != count:
        raise FieldFormatError(f"payload holds {data.size} values, expected {count}")
    data = data.reshape(grid.shape + (ncomp,)).astype(float)
    try:
        if kind == "metric":
            return MetricField(grid, data)
        return ScalarField(grid, data[..., 0])
    except GridError as exc:
        raise FieldFormatError(f"{path}: {exc}") from exc
