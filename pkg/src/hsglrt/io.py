"""Cube and spectral-library readers, band masking and result files.

Cubes use an ENVI-style text header plus a raw little-endian float32
file, in BSQ or BIL interleave. Band numbers in a :class:`BandMask` are
1-based (as band lists are usually published); everything else is
0-based.
"""

from __future__ import annotations

import csv
import io as _stdio
import json
import math
import os
import re
import subprocess
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from hsglrt.errors import DataError
from hsglrt.model import EndmemberLibrary

DEFAULT_DROPPED_BANDS = (1, 2, 3, 63, 64, 65, 66, 95, 96, 97)

_ENVI_DTYPES = {4: np.dtype("<f4")}


@dataclass(frozen=True)
class HyperCube:
    """Reflectance cube indexed ``data[row, col, band]``."""

    data: np.ndarray
    band_centers: np.ndarray | None = None
    mask_applied: bool = False

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim != 3:
            raise DataError("cube data must be rows x cols x bands")
        object.__setattr__(self, "data", data)
        if self.band_centers is not None:
            bc = np.asarray(self.band_centers, dtype=float).reshape(-1)
            if bc.size != data.shape[2]:
                raise DataError("band_centers length does not match band count")
            object.__setattr__(self, "band_centers", bc)

    @property
    def shape(self):
        return self.data.shape

    @property
    def n_bands(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class BandMask:
    dropped_band_indices: frozenset = field(
        default_factory=lambda: frozenset(DEFAULT_DROPPED_BANDS)
    )

    def __post_init__(self):
        idx = frozenset(int(i) for i in self.dropped_band_indices)
        object.__setattr__(self, "dropped_band_indices", idx)

    @classmethod
    def parse(cls, text: str) -> "BandMask":
        """Parse ``"1-3,63-66,95-97"`` style lists; ``"default"`` and ``"none"`` are accepted."""
        text = text.strip().lower()
        if text == "default":
            return cls()
        if text in ("", "none"):
            return cls(frozenset())
        out = set()
        for part in text.split(","):
            part = part.strip()
            m = re.fullmatch(r"(\d+)\s*-\s*(\d+)", part)
            if m:
                out.update(range(int(m.group(1)), int(m.group(2)) + 1))
            elif part.isdigit():
                out.add(int(part))
            else:
                raise DataError(f"bad band-mask entry {part!r}")
        return cls(frozenset(out))

    def keep_indices(self, n_bands: int) -> np.ndarray:
        bad = [i for i in self.dropped_band_indices if not 1 <= i <= n_bands]
        if bad:
            raise DataError(f"band indices {sorted(bad)} outside 1..{n_bands}")
        return np.array([b for b in range(n_bands) if b + 1 not in self.dropped_band_indices])


def apply_band_mask(obj, mask: BandMask):
    """Drop masked bands from a cube, library or spectrum (order preserved).

    A cube that already has ``mask_applied`` is returned unchanged.
    """
    if isinstance(obj, HyperCube):
        if obj.mask_applied:
            return obj
        keep = mask.keep_indices(obj.n_bands)
        bc = None if obj.band_centers is None else obj.band_centers[keep]
        return HyperCube(obj.data[:, :, keep], bc, True)
    if isinstance(obj, EndmemberLibrary):
        keep = mask.keep_indices(obj.n_bands)
        return EndmemberLibrary(obj.signatures[keep], obj.names)
    arr = np.asarray(obj, dtype=float)
    keep = mask.keep_indices(arr.shape[0])
    return arr[keep]


# ---------------------------------------------------------------------------
# ENVI-style cubes
# ---------------------------------------------------------------------------

def _read_text(path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def read_envi_header(path) -> dict:
    """Parse ``key = value`` lines; brace values may span several lines."""
    text = _read_text(path)
    lines = text.splitlines()
    if not lines or not lines[0].strip().startswith("ENVI"):
        raise DataError(f"{path}: missing ENVI signature on first line")
    header = {}
    i = 1
    while i < len(lines):
        line = lines[i]
        i += 1
        if not line.strip() or line.lstrip().startswith(";") or "=" not in line:
            continue
        key, _, val = line.partition("=")
        key, val = key.strip().lower(), val.strip()
        if val.startswith("{"):
            while not val.rstrip().endswith("}"):
                if i >= len(lines):
                    raise DataError(f"{path}: unterminated brace value for {key!r}")
                val += " " + lines[i].strip()
                i += 1
            items = [v.strip() for v in val.strip()[1:-1].split(",")]
            header[key] = [v for v in items if v]
        else:
            header[key] = val
    return header


def _header_int(header, key, path):
    try:
        return int(header[key])
    except KeyError:
        raise DataError(f"{path}: header lacks {key!r}") from None
    except ValueError:
        raise DataError(f"{path}: {key!r} is not an integer") from None


def read_cube(header_path, data_path=None) -> HyperCube:
    """Load an ENVI-style float32 BSQ/BIL cube as ``data[row, col, band]``."""
    header_path = Path(header_path)
    if data_path is None:
        data_path = header_path.with_suffix("")
        if not data_path.exists():
            data_path = header_path.with_suffix(".img")
    hdr = read_envi_header(header_path)
    samples = _header_int(hdr, "samples", header_path)
    lines = _header_int(hdr, "lines", header_path)
    bands = _header_int(hdr, "bands", header_path)
    dtype_code = _header_int(hdr, "data type", header_path)
    if dtype_code not in _ENVI_DTYPES:
        raise DataError(f"{header_path}: unsupported data type {dtype_code} (only 4 = float32)")
    byte_order = int(hdr.get("byte order", 0))
    if byte_order != 0:
        raise DataError(f"{header_path}: only little-endian (byte order = 0) is supported")
    offset = int(hdr.get("header offset", 0))
    interleave = str(hdr.get("interleave", "bsq")).lower()
    if interleave not in ("bsq", "bil"):
        raise DataError(f"{header_path}: unsupported interleave {interleave!r}")
    dtype = _ENVI_DTYPES[dtype_code]
    expected = samples * lines * bands * dtype.itemsize + offset
    try:
        actual = os.path.getsize(data_path)
    except OSError as exc:
        raise DataError(f"cannot read {data_path}: {exc}") from exc
    if actual != expected:
        raise DataError(
            f"{data_path}: {actual} bytes on disk, header implies {expected}"
        )
    try:
        raw = np.fromfile(data_path, dtype=dtype, offset=offset)
    except OSError as exc:
        raise DataError(f"cannot read {data_path}: {exc}") from exc
    if interleave == "bsq":
        cube = raw.reshape(bands, lines, samples).transpose(1, 2, 0)
    else:
        cube = raw.reshape(lines, bands, samples).transpose(0, 2, 1)
    centers = None
    if "wavelength" in hdr:
        try:
            centers = np.array([float(v) for v in hdr["wavelength"]])
        except ValueError:
            raise DataError(f"{header_path}: non-numeric wavelength list") from None
        if centers.size != bands:
            raise DataError(f"{header_path}: {centers.size} wavelengths for {bands} bands")
    return HyperCube(cube.astype(float), centers, False)


def write_cube(cube: HyperCube, header_path, data_path=None, interleave: str = "bsq"):
    """Write ``cube`` as float32 little-endian with an ENVI-style header."""
    header_path = Path(header_path)
    data_path = Path(data_path) if data_path is not None else header_path.with_suffix(".img")
    interleave = interleave.lower()
    lines, samples, bands = cube.shape
    data = cube.data.astype("<f4")
    if interleave == "bsq":
        raw = data.transpose(2, 0, 1)
    elif interleave == "bil":
        raw = data.transpose(0, 2, 1)
    else:
        raise DataError(f"unsupported interleave {interleave!r}")
    np.ascontiguousarray(raw).tofile(data_path)
    hdr = [
        "ENVI",
        f"samples = {samples}",
        f"lines = {lines}",
        f"bands = {bands}",
        "header offset = 0",
        "data type = 4",
        f"interleave = {interleave}",
        "byte order = 0",
    ]
    if cube.band_centers is not None:
        hdr.append("wavelength = {" + ", ".join(f"{w:.6g}" for w in cube.band_centers) + "}")
    header_path.write_text("\n".join(hdr) + "\n")
    return header_path, data_path


# ---------------------------------------------------------------------------
# Spectral libraries
# ---------------------------------------------------------------------------

_ATTR = re.compile(r"#\s*(\w+)\s*[:=]\s*(\S+)")


def read_spectral_library(path):
    """Read a delimited-text library: first column band index or wavelength,
    then one named column per endmember.

    Comment lines start with ``#``; ``# scale = 100`` multiplies every
    signature by 100. Comma, tab or whitespace delimiters are accepted.

    Returns
    -------
    (EndmemberLibrary, ndarray)
        The library and the first-column values.
    """
    attrs, rows = {}, []
    for line in _read_text(path).splitlines():
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith("#"):
            m = _ATTR.match(stripped)
            if m:
                attrs[m.group(1).lower()] = m.group(2)
            continue
        rows.append(stripped)
    if not rows:
        raise DataError(f"{path}: empty library")
    first = rows[0]
    if "," in first:
        split = lambda s: [c.strip() for c in next(csv.reader([s]))]  # noqa: E731
    elif "\t" in first:
        split = lambda s: [c.strip() for c in s.split("\t")]  # noqa: E731
    else:
        split = str.split
    header = split(first)
    names = header[1:]
    if not names or any(not n for n in names):
        raise DataError(f"{path}: header must name every endmember column")
    if all(_is_number(n) for n in header):
        raise DataError(f"{path}: first row must be a header with endmember names")
    if len(set(names)) != len(names):
        raise DataError(f"{path}: duplicate endmember names {names}")
    values = []
    for lineno, row in enumerate(rows[1:], start=2):
        cells = split(row)
        if len(cells) != len(header):
            raise DataError(f"{path}: row {lineno} has {len(cells)} fields, expected {len(header)}")
        try:
            values.append([float(c) for c in cells])
        except ValueError:
            raise DataError(f"{path}: non-numeric entry in row {lineno}") from None
    if not values:
        raise DataError(f"{path}: no spectral rows")
    arr = np.array(values)
    scale = float(attrs.get("scale", 1.0))
    return EndmemberLibrary(arr[:, 1:] * scale, tuple(names)), arr[:, 0]


def write_spectral_library(lib: EndmemberLibrary, path, band_axis=None, scale=None):
    band_axis = np.arange(1, lib.n_bands + 1) if band_axis is None else np.asarray(band_axis)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if scale is not None:
            fh.write(f"# scale = {scale:g}\n")
        w = csv.writer(fh)
        w.writerow(["band", *lib.names])
        for b, row in zip(band_axis, lib.signatures):
            w.writerow([_fmt(b), *(_fmt(v) for v in row)])


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    return format(float(v), ".17g")


def version_string() -> str:
    """``git describe``-style identifier of the running code."""
    from hsglrt import __version__

    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"v{__version__}-{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def json_safe(v):
    """Convert numpy values and non-finite floats into plain JSON types."""
    if isinstance(v, dict):
        return {str(k): json_safe(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [json_safe(x) for x in v]
    if isinstance(v, np.ndarray):
        return json_safe(v.tolist())
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else None
    return v


def write_records(records, path, fmt: str = "csv", metadata=None, columns=None):
    """Write a list of flat dicts as CSV or as JSON ``{"metadata", "records"}``.

    CSV floats use 17 significant digits; NaN becomes an empty cell. JSON
    floats use Python's round-trip repr; NaN becomes ``null``.
    """
    records = list(records)
    path = Path(path)
    if fmt == "csv":
        if columns is None:
            columns = list(records[0].keys()) if records else []
        buf = _stdio.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(columns)
        for rec in records:
            w.writerow([_fmt(_nan_to_none(rec.get(c))) for c in columns])
        try:
            path.write_text(buf.getvalue())
        except OSError as exc:
            raise DataError(f"cannot write {path}: {exc}") from exc
    elif fmt == "json":
        meta = dict(metadata or {})
        meta.setdefault("version", version_string())
        doc = {"metadata": json_safe(meta), "records": json_safe(records)}
        try:
            path.write_text(json.dumps(doc, indent=1, allow_nan=False))
        except OSError as exc:
            raise DataError(f"cannot write {path}: {exc}") from exc
    else:
        raise DataError(f"unknown result format {fmt!r}")
    return path


def _nan_to_none(v):
    if isinstance(v, (float, np.floating)) and not math.isfinite(float(v)):
        return None
    return v


def read_records(path, fmt: str | None = None):
    """Inverse of :func:`write_records`; returns ``(records, metadata)``.

    CSV cells are parsed as int where possible, then float; empty cells
    become NaN.
    """
    path = Path(path)
    fmt = fmt or ("json" if path.suffix.lower() == ".json" else "csv")
    if fmt == "json":
        doc = json.loads(path.read_text())
        recs = [
            {k: (math.nan if v is None else v) for k, v in rec.items()}
            for rec in doc["records"]
        ]
        return recs, doc.get("metadata", {})
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        out = [{k: _parse_cell(v) for k, v in row.items()} for row in reader]
    return out, {}


def _parse_cell(s: str):
    if s == "":
        return math.nan
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


def grid_records(grid):
    """Flatten a detection grid into per-pixel records."""
    out = []
    rows, cols = np.nonzero(grid.processed)
    for r, c in zip(rows.tolist(), cols.tolist()):
        rec = {
            "row": r,
            "col": c,
            "statistic": float(grid.statistic[r, c]),
            "decision": None if grid.threshold is None else bool(grid.decision[r, c]),
        }
        for k, name in enumerate(grid.names):
            rec[f"alpha_{name}"] = float(grid.alpha_hat[r, c, k])
        rec["valid"] = bool(grid.valid[r, c])
        out.append(rec)
    return out


def grid_columns(grid):
    return ["row", "col", "statistic", "decision", *(f"alpha_{n}" for n in grid.names), "valid"]


def write_results(grid_or_records, path, fmt: str = "csv", metadata=None):
    """Serialize a detection grid (or plain records) to CSV or JSON."""
    if hasattr(grid_or_records, "statistic"):
        grid = grid_or_records
        meta = dict(metadata or {})
        meta.setdefault("threshold", grid.threshold)
        return write_records(grid_records(grid), path, fmt, meta, grid_columns(grid))
    return write_records(grid_or_records, path, fmt, metadata)
