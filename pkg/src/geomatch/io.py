"""Point-cloud files, weight files and CSV reports."""

from __future__ import annotations

import csv
import json
import os
from pathlib import Path

import numpy as np

from .core import PointCloud, RigidTransform
from .pipeline import ModelWeights, param_shapes

WEIGHTS_FORMAT_VERSION = 1

REPORT_COLUMNS = ("pair_id", "rre_deg", "rte", "rr", "ir", "fmr_flag", "overlap", "num_corr", "runtime_s")


class ParseError(ValueError):
    """Malformed input file; the message carries the line number when known."""


class WeightsFormatError(ValueError):
    pass


# point clouds ----------------------------------------------------------------

def _parse_floats(tokens, lineno, path):
    try:
        values = [float(tok) for tok in tokens]
    except ValueError:
        raise ParseError(f"{path}:{lineno}: expected numbers, got {' '.join(tokens)!r}") from None
    if not all(np.isfinite(values)):
        raise ParseError(f"{path}:{lineno}: non-finite coordinate")
    return values


def _load_xyz(lines, path):
    pts = []
    for lineno, line in enumerate(lines, 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        tokens = stripped.split()
        if len(tokens) != 3:
            raise ParseError(f"{path}:{lineno}: expected 3 values, got {len(tokens)}")
        pts.append(_parse_floats(tokens, lineno, path))
    return pts


def _load_ply(lines, path):
    if lines[0].strip() != "ply":
        raise ParseError(f"{path}:1: missing 'ply' magic")
    elements = []  # [name, count, property names, has list property]
    lineno = 1
    for lineno, line in enumerate(lines[1:], 2):
        tokens = line.split()
        if not tokens:
            continue
        key = tokens[0]
        if key == "format":
            if len(tokens) < 2 or tokens[1] != "ascii":
                raise ParseError(f"{path}:{lineno}: only ASCII PLY is supported, got {' '.join(tokens[1:])!r}")
        elif key in ("comment", "obj_info"):
            continue
        elif key == "element":
            if len(tokens) != 3:
                raise ParseError(f"{path}:{lineno}: malformed element line")
            try:
                count = int(tokens[2])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: bad element count {tokens[2]!r}") from None
            elements.append([tokens[1], count, [], False])
        elif key == "property":
            if not elements:
                raise ParseError(f"{path}:{lineno}: property before any element")
            elements[-1][2].append(tokens[-1])
            if tokens[1] == "list":
                elements[-1][3] = True
        elif key == "end_header":
            break
        else:
            raise ParseError(f"{path}:{lineno}: unexpected header line {line.strip()!r}")
    else:
        raise ParseError(f"{path}: missing end_header")

    vertex = next((e for e in elements if e[0] == "vertex"), None)
    if vertex is None:
        raise ParseError(f"{path}: no vertex element")
    if vertex[3]:
        raise ParseError(f"{path}: list properties on vertices are not supported")
    try:
        cols = [vertex[2].index(axis) for axis in ("x", "y", "z")]
    except ValueError:
        raise ParseError(f"{path}: vertex element lacks x, y, z properties") from None

    body = [(n, line.split()) for n, line in enumerate(lines[lineno:], lineno + 1) if line.strip()]
    pos = 0
    pts = []
    for name, count, props, has_list in elements:
        if pos + count > len(body):
            raise ParseError(f"{path}: header declares {count} {name} rows, file ends early")
        for n, tokens in body[pos:pos + count]:
            if name == "vertex":
                if len(tokens) != len(props):
                    raise ParseError(f"{path}:{n}: expected {len(props)} values, got {len(tokens)}")
                values = _parse_floats(tokens, n, path)
                pts.append([values[c] for c in cols])
            elif not has_list and len(tokens) != len(props):
                raise ParseError(f"{path}:{n}: expected {len(props)} values, got {len(tokens)}")
        pos += count
    if pos != len(body):
        raise ParseError(f"{path}:{body[pos][0]}: data beyond the declared elements")
    return pts


def load_cloud(path):
    """Read an XYZ text file or an ASCII PLY file into a PointCloud."""
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw.startswith(b"ply") and b"format binary" in raw[:512]:
        raise ParseError(f"{path}: binary PLY is not supported; convert to ASCII")
    try:
        text = raw.decode("ascii")
    except UnicodeDecodeError:
        raise ParseError(f"{path}: file is not ASCII text") from None
    lines = text.splitlines()
    if lines and lines[0].strip() == "ply":
        pts = _load_ply(lines, path)
    else:
        pts = _load_xyz(lines, path)
    if len(pts) < 3:
        raise ValueError(f"{path}: need at least 3 points, found {len(pts)}")
    return PointCloud(np.asarray(pts, dtype=np.float64))


def save_cloud(cloud, path):
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    with open(path, "w", newline="\n") as fh:
        for x, y, z in pts:
            fh.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n")


def save_transform(T, path):
    with open(path, "w", newline="\n") as fh:
        for row in T.as_matrix():
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_transform(path):
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                rows.append(_parse_floats(line.split(), lineno, path))
    if len(rows) != 4 or any(len(r) != 4 for r in rows):
        raise ParseError(f"{path}: expected a 4x4 matrix")
    return RigidTransform.from_matrix(np.asarray(rows))


# weights ---------------------------------------------------------------------

def _atomic_write(path, text):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def save_weights(weights, path, metadata=None):
    entries = {
        name: {"shape": list(arr.shape), "values": [float(v) for v in arr.reshape(-1)]}
        for name, arr in weights.arrays().items()
    }
    doc = {
        "format_version": WEIGHTS_FORMAT_VERSION,
        "d": weights.d,
        "dtype": str(weights.dtype),
        "metadata": metadata or {},
        "entries": entries,
    }
    _atomic_write(path, json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_weights(path):
    """Parse and validate a weights file; nothing is returned unless it is complete."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: not a valid weights file ({exc})") from None
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise WeightsFormatError(f"{path}: missing format_version")
    if doc["format_version"] != WEIGHTS_FORMAT_VERSION:
        raise WeightsFormatError(
            f"{path}: format_version {doc['format_version']} is incompatible with {WEIGHTS_FORMAT_VERSION}"
        )
    d = int(doc["d"])
    dtype = np.dtype(doc.get("dtype", "float32"))
    entries = doc.get("entries", {})
    arrays = {}
    for name, shape in param_shapes(d).items():
        if name not in entries:
            raise WeightsFormatError(f"{path}: missing parameter {name!r}")
        entry = entries[name]
        if tuple(entry["shape"]) != shape:
            raise WeightsFormatError(
                f"{path}: parameter {name!r} has shape {tuple(entry['shape'])}, expected {shape}"
            )
        values = np.asarray(entry["values"], dtype=dtype)
        if values.size != int(np.prod(shape)):
            raise WeightsFormatError(f"{path}: parameter {name!r} has {values.size} values for shape {shape}")
        arrays[name] = values.reshape(shape)
    extra = set(entries) - set(arrays)
    if extra:
        raise WeightsFormatError(f"{path}: unknown parameters {sorted(extra)}")
    return ModelWeights.from_arrays(arrays, d, dtype)


def read_metadata(path):
    with open(path) as fh:
        return json.load(fh).get("metadata", {})


# reports ---------------------------------------------------------------------

def _fmt(value):
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.6f}"
    return str(value)


def write_report(rows, path, columns=REPORT_COLUMNS):
    """CSV with a header row; floats fixed at six decimals, booleans as 0/1."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in columns])


def read_report(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
