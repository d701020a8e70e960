"""On-disk artifacts: voxel series, masks, atlases, word tables, embeddings.

Native volume format (``.vxt``)
-------------------------------
A JSON header file ``name.vxt`` and a raw body ``name.vxt.raw``. The body is
little-endian (``f32`` by default, ``f64`` optional) ordered ``[t][voxel]``
where voxels are the mask-included voxels in x-fastest scan order (x, then y,
then z). The header carries grid geometry, the sampling interval, the mask
bits and a mask digest.
"""

from __future__ import annotations

import base64
import csv
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    DimMismatch,
    DuplicateName,
    InvalidMask,
    IoFailure,
    MalformedHeader,
    MissingColumn,
    NegativeDuration,
    NonFiniteData,
    NonMonotoneOnsets,
    SizeMismatch,
    UnsupportedDatatype,
)

VXT_VERSION = 1
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VolumeGrid:
    """Voxel grid geometry. ``affine`` is stored row-major as nested tuples."""

    dims: tuple
    voxel_size: tuple = (2.0, 2.0, 2.0)
    affine: tuple = None

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        vs = tuple(float(s) for s in self.voxel_size)
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise DimMismatch(f"dims must be three integers >= 1, got {self.dims}")
        if len(vs) != 3 or any(not s > 0 for s in vs):
            raise DimMismatch(f"voxel_size must be three positive reals, got {self.voxel_size}")
        if self.affine is None:
            aff = np.diag([vs[0], vs[1], vs[2], 1.0])
        else:
            aff = np.asarray(self.affine, dtype=float).reshape(4, 4)
        if not np.array_equal(aff[3], [0.0, 0.0, 0.0, 1.0]):
            raise DimMismatch("affine last row must be (0, 0, 0, 1)")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "voxel_size", vs)
        object.__setattr__(self, "affine", tuple(tuple(float(x) for x in row) for row in aff))

    @property
    def n_voxels(self):
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def affine_array(self):
        return np.array(self.affine)


class Mask:
    """Boolean voxel selection on a grid. ``included`` has shape ``grid.dims``."""

    def __init__(self, grid, included):
        included = np.asarray(included, dtype=bool)
        if included.shape != grid.dims:
            raise InvalidMask(f"mask shape {included.shape} does not match grid {grid.dims}")
        if not included.any():
            raise InvalidMask("mask includes no voxels")
        self.grid = grid
        self.included = included
        self.included.flags.writeable = False
        self._flat = np.flatnonzero(included.ravel(order="F"))

    @classmethod
    def full(cls, grid):
        return cls(grid, np.ones(grid.dims, dtype=bool))

    @property
    def v(self):
        return int(self._flat.size)

    @property
    def flat_indices(self):
        """x-fastest flat indices of the included voxels, in column order."""
        return self._flat

    @property
    def digest(self):
        bits = np.packbits(self.included.ravel(order="F"))
        h = hashlib.sha256()
        h.update(json.dumps(list(self.grid.dims)).encode())
        h.update(bits.tobytes())
        return h.hexdigest()

    def to_volume(self, values, fill=0.0):
        """Scatter a length-``v`` vector (or ``(n, v)`` stack) into grid volumes."""
        values = np.asarray(values)
        lead = values.shape[:-1]
        out = np.full(lead + (self.grid.n_voxels,), fill, dtype=np.result_type(values, float))
        out[..., self._flat] = values
        return out.reshape(lead + self.grid.dims[::-1]).transpose(
            tuple(range(len(lead))) + (len(lead) + 2, len(lead) + 1, len(lead))
        )

    def from_volume(self, volume):
        """Gather mask voxels from ``(..., nx, ny, nz)`` volumes."""
        volume = np.asarray(volume)
        lead = volume.shape[:-3]
        flat = volume.transpose(
            tuple(range(len(lead))) + (len(lead) + 2, len(lead) + 1, len(lead))
        ).reshape(lead + (-1,))
        return flat[..., self._flat]

    def __eq__(self, other):
        return isinstance(other, Mask) and self.grid == other.grid and self.digest == other.digest

    def __hash__(self):
        return hash(self.digest)


@dataclass(eq=False)
class VolumeSeries:
    """``T x V`` time-major voxel series under a mask. Immutable after construction."""

    grid: VolumeGrid
    mask: Mask
    tr: float
    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, copy=True)
        if data.ndim != 2:
            raise DimMismatch(f"data must be 2-D (T x V), got shape {data.shape}")
        if data.shape[1] != self.mask.v:
            raise DimMismatch(f"data has {data.shape[1]} columns but mask includes {self.mask.v} voxels")
        if data.shape[0] < 2:
            raise DimMismatch("series needs at least 2 samples")
        if self.mask.grid != self.grid:
            raise DimMismatch("mask grid differs from series grid")
        if not self.tr > 0:
            raise DimMismatch(f"tr must be positive, got {self.tr}")
        check_finite(data)
        data.flags.writeable = False
        self.data = data
        self.tr = float(self.tr)

    @property
    def n_samples(self):
        return self.data.shape[0]

    @property
    def n_voxels(self):
        return self.data.shape[1]

    def with_data(self, data):
        return VolumeSeries(self.grid, self.mask, self.tr, data)

    def volumes(self):
        """Data as ``(T, nx, ny, nz)`` with zeros outside the mask."""
        return self.mask.to_volume(self.data)


def check_finite(data):
    bad = ~np.isfinite(data)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise NonFiniteData(f"non-finite value at index {idx}", index=idx)


# ---------------------------------------------------------------------------
# native format
# ---------------------------------------------------------------------------

def _raw_path(path):
    return Path(str(path) + ".raw")


def atomic_write_bytes(path, payload):
    path = Path(path)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    try:
        with open(tmp, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def write_vxt(grid, mask, tr, data, path, dtype="f32", extra=None):
    """Low-level writer; ``data`` is ``(T, v)`` with any ``T >= 1``.

    ``extra`` is an optional JSON-serialisable dict stored under the header
    key ``extra`` (provenance such as a config digest).
    """
    if dtype not in _DTYPES:
        raise UnsupportedDatatype(f"dtype must be one of {sorted(_DTYPES)}")
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != mask.v:
        raise DimMismatch(f"data shape {data.shape} does not match mask with {mask.v} voxels")
    check_finite(data)
    body = np.ascontiguousarray(data, dtype=_DTYPES[dtype])
    if not np.isfinite(body).all():
        raise NonFiniteData(f"values overflow {dtype}")
    header = {
        "format": "vxt",
        "version": VXT_VERSION,
        "dims": list(grid.dims),
        "voxel_size": list(grid.voxel_size),
        "affine": [x for row in grid.affine for x in row],
        "tr": float(tr),
        "T": int(data.shape[0]),
        "v": int(mask.v),
        "dtype": dtype,
        "mask_digest": mask.digest,
        "mask_bits": base64.b64encode(np.packbits(mask.included.ravel(order="F")).tobytes()).decode("ascii"),
    }
    if extra:
        header["extra"] = extra
    atomic_write_bytes(_raw_path(path), body.tobytes())
    atomic_write_text(path, json.dumps(header, indent=1, sort_keys=True) + "\n")


def vxt_header(path):
    """Parsed JSON header of a ``.vxt`` file (the body is not touched)."""
    path = Path(path)
    try:
        header = json.loads(path.read_text())
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeader(f"{path}: unreadable header ({exc})") from exc
    if not isinstance(header, dict) or header.get("format") != "vxt":
        raise MalformedHeader(f"{path}: not a vxt header")
    return header


def read_vxt(path):
    """Low-level reader returning ``(grid, mask, tr, data)``."""
    path = Path(path)
    header = vxt_header(path)
    try:
        grid = VolumeGrid(header["dims"], header["voxel_size"], header["affine"])
        bits = np.frombuffer(base64.b64decode(header["mask_bits"]), dtype=np.uint8)
        flat = np.unpackbits(bits, count=grid.n_voxels).astype(bool)
        included = flat.reshape(grid.dims[::-1]).transpose(2, 1, 0)
        n_t, v, tr, dtype = int(header["T"]), int(header["v"]), float(header["tr"]), header["dtype"]
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedHeader(f"{path}: bad header field ({exc})") from exc
    mask = Mask(grid, included)
    if mask.digest != header.get("mask_digest"):
        raise MalformedHeader(f"{path}: mask digest does not match mask bits")
    if v != mask.v:
        raise MalformedHeader(f"{path}: header v={v} but mask has {mask.v} voxels")
    if dtype not in _DTYPES:
        raise UnsupportedDatatype(f"{path}: dtype {dtype!r}")
    raw = _raw_path(path)
    try:
        payload = raw.read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {raw}: {exc}") from exc
    expected = n_t * v * _DTYPES[dtype].itemsize
    if len(payload) != expected:
        raise SizeMismatch(f"{raw}: body has {len(payload)} bytes, expected {expected}")
    data = np.frombuffer(payload, dtype=_DTYPES[dtype]).reshape(n_t, v).astype(np.float64)
    check_finite(data)
    return grid, mask, tr, data


def write_volume_series(series, path, dtype="f32", extra=None):
    """Write ``series`` as ``path`` (JSON header) plus ``path.raw`` (body)."""
    write_vxt(series.grid, series.mask, series.tr, series.data, path, dtype, extra)


def read_volume_series(path):
    """Read a ``.vxt`` series. Values come back as float64."""
    return VolumeSeries(*read_vxt(path))


def file_digest(path):
    """sha256 over a file and, for ``.vxt`` headers, its raw body."""
    h = hashlib.sha256()
    path = Path(path)
    h.update(path.read_bytes())
    raw = _raw_path(path)
    if path.suffix == ".vxt" and raw.exists():
        h.update(raw.read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# masks and atlases
# ---------------------------------------------------------------------------

def write_mask(mask, path):
    full = Mask.full(mask.grid)
    write_vxt(mask.grid, full, 1.0, full.from_volume(mask.included.astype(float))[None, :], path)


def read_mask(path):
    grid, mask, _, data = read_vxt(path)
    return Mask(grid, mask.to_volume(data[0]) != 0)


@dataclass
class Atlas:
    """Named boolean parcels on a grid."""

    grid: VolumeGrid
    parcels: list = field(default_factory=list)

    def __post_init__(self):
        names = [name for name, _ in self.parcels]
        if len(set(names)) != len(names):
            raise DuplicateName(f"parcel names must be unique: {names}")
        fixed = []
        for name, voxels in self.parcels:
            voxels = np.asarray(voxels, dtype=bool)
            if voxels.shape != self.grid.dims:
                raise DimMismatch(f"parcel {name!r} shape {voxels.shape} != grid {self.grid.dims}")
            fixed.append((str(name), voxels))
        self.parcels = fixed

    @property
    def names(self):
        return [name for name, _ in self.parcels]

    def in_mask(self, mask):
        """``(n_parcels, v)`` boolean membership restricted to mask voxels."""
        return np.array([mask.from_volume(vox) for _, vox in self.parcels], dtype=bool).reshape(
            len(self.parcels), mask.v
        )


def write_atlas(atlas, path):
    """Integer label volume at ``path`` plus ``path.labels.json`` name map."""
    labels = np.zeros(atlas.grid.dims)
    for i, (name, vox) in enumerate(atlas.parcels, start=1):
        if (labels[vox] != 0).any():
            raise DimMismatch(f"parcel {name!r} overlaps another; label volumes need disjoint parcels")
        labels[vox] = i
    mask = Mask.full(atlas.grid)
    write_vxt(atlas.grid, mask, 1.0, mask.from_volume(labels)[None, :], path)
    names = {str(i): name for i, (name, _) in enumerate(atlas.parcels, start=1)}
    atomic_write_text(str(path) + ".labels.json", json.dumps(names, indent=1) + "\n")


def read_atlas(path, names_path=None):
    grid, mask, _, data = read_vxt(path)
    labels = np.rint(mask.to_volume(data[0])).astype(int)
    names_path = Path(names_path) if names_path else Path(str(path) + ".labels.json")
    try:
        names = json.loads(names_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise MalformedHeader(f"{names_path}: unreadable label map ({exc})") from exc
    parcels = [(names[key], labels == int(key)) for key in sorted(names, key=int)]
    return Atlas(grid, parcels)


# ---------------------------------------------------------------------------
# NIfTI-1 import
# ---------------------------------------------------------------------------

_NIFTI_DTYPES = {4: np.dtype("i2"), 16: np.dtype("f4"), 64: np.dtype("f8")}
_TIME_UNITS = {8: 1.0, 16: 1e-3, 24: 1e-6}


def _quaternion_affine(qb, qc, qd, qx, qy, qz, pixdim, qfac):
    qa2 = 1.0 - (qb * qb + qc * qc + qd * qd)
    qa = np.sqrt(qa2) if qa2 > 1e-7 else 0.0
    rot = np.array([
        [qa * qa + qb * qb - qc * qc - qd * qd, 2 * (qb * qc - qa * qd), 2 * (qb * qd + qa * qc)],
        [2 * (qb * qc + qa * qd), qa * qa + qc * qc - qb * qb - qd * qd, 2 * (qc * qd - qa * qb)],
        [2 * (qb * qd - qa * qc), 2 * (qc * qd + qa * qb), qa * qa + qd * qd - qc * qc - qb * qb],
    ])
    scale = np.array([pixdim[0], pixdim[1], pixdim[2] * qfac])
    aff = np.eye(4)
    aff[:3, :3] = rot * scale
    aff[:3, 3] = [qx, qy, qz]
    return aff


def _parse_nifti(path):
    payload = Path(path).read_bytes()
    if len(payload) < 348:
        raise DimMismatch(f"{path}: shorter than a NIfTI-1 header")
    for endian in "<>":
        if struct.unpack(endian + "i", payload[:4])[0] == 348:
            break
    else:
        raise BadMagic(f"{path}: sizeof_hdr is not 348")
    magic = payload[344:348]
    if magic != b"n+1\x00":
        raise BadMagic(f"{path}: magic {magic!r} is not single-file NIfTI-1")

    def unpack(fmt, offset):
        return struct.unpack_from(endian + fmt, payload, offset)

    dim = unpack("8h", 40)
    datatype = unpack("h", 70)[0]
    pixdim = unpack("8f", 76)
    vox_offset = int(unpack("f", 108)[0])
    slope, inter = unpack("2f", 112)
    xyzt_units = payload[123]
    qform_code, sform_code = unpack("2h", 252)
    quat = unpack("6f", 256)
    srow = np.array(unpack("12f", 280)).reshape(3, 4)

    if datatype not in _NIFTI_DTYPES:
        raise UnsupportedDatatype(f"{path}: NIfTI datatype {datatype}")
    ndim = dim[0]
    if ndim < 3 or ndim > 4 or any(d < 1 for d in dim[1:ndim + 1]):
        raise DimMismatch(f"{path}: unsupported dim {dim}")
    nx, ny, nz = dim[1:4]
    n_t = dim[4] if ndim == 4 else 1
    voxel_size = tuple(abs(float(p)) if p else 1.0 for p in pixdim[1:4])
    if sform_code > 0:
        affine = np.vstack([srow, [0, 0, 0, 1]])
    elif qform_code > 0:
        qfac = -1.0 if pixdim[0] < 0 else 1.0
        affine = _quaternion_affine(*quat, voxel_size, qfac)
    else:
        affine = np.diag(voxel_size + (1.0,))
    tr = float(pixdim[4]) * _TIME_UNITS.get(xyzt_units & 0x38, 1.0)

    dt = _NIFTI_DTYPES[datatype].newbyteorder(endian)
    count = nx * ny * nz * n_t
    if vox_offset < 348 or len(payload) < vox_offset + count * dt.itemsize:
        raise DimMismatch(f"{path}: body shorter than dims {dim[1:ndim + 1]} imply")
    raw = np.frombuffer(payload, dtype=dt, count=count, offset=vox_offset).astype(np.float64)
    if slope != 0.0 and np.isfinite(slope):
        raw = raw * slope + inter
    # on-disk order is x fastest, then y, z, t
    vols = raw.reshape(n_t, nz, ny, nx).transpose(0, 3, 2, 1)
    return VolumeGrid((nx, ny, nz), voxel_size, affine), tr, vols


def import_nifti(path):
    """Read an uncompressed single-file NIfTI-1 4-D image as a full-grid series."""
    grid, tr, vols = _parse_nifti(path)
    if vols.shape[0] < 2:
        raise DimMismatch(f"{path}: a series needs at least 2 volumes, got {vols.shape[0]}")
    if not tr > 0:
        raise DimMismatch(f"{path}: pixdim[4] (TR) must be positive")
    mask = Mask.full(grid)
    return VolumeSeries(grid, mask, tr, mask.from_volume(vols))


def import_nifti_volume(path):
    """First volume of a NIfTI-1 image as ``(grid, (nx, ny, nz) array)``; for masks and atlases."""
    grid, _, vols = _parse_nifti(path)
    return grid, vols[0]


# ---------------------------------------------------------------------------
# word tables and embeddings
# ---------------------------------------------------------------------------

@dataclass
class WordTable:
    tokens: list
    onsets: np.ndarray
    offsets: np.ndarray
    surprisal: np.ndarray = None
    probability: np.ndarray = None

    def __post_init__(self):
        self.onsets = np.asarray(self.onsets, dtype=float).reshape(-1)
        self.offsets = np.asarray(self.offsets, dtype=float).reshape(-1)
        self.tokens = list(self.tokens)
        n = len(self.tokens)
        if self.onsets.size != n or self.offsets.size != n:
            raise DimMismatch("tokens, onsets and offsets differ in length")
        for name in ("surprisal", "probability"):
            col = getattr(self, name)
            if col is not None:
                col = np.asarray(col, dtype=float).reshape(-1)
                if col.size != n:
                    raise DimMismatch(f"{name} column length {col.size} != {n}")
                setattr(self, name, col)
        if n > 1 and np.any(np.diff(self.onsets) < 0):
            i = int(np.flatnonzero(np.diff(self.onsets) < 0)[0]) + 1
            raise NonMonotoneOnsets(f"onset at row {i} precedes the previous row")
        if np.any(self.offsets < self.onsets):
            i = int(np.flatnonzero(self.offsets < self.onsets)[0])
            raise NegativeDuration(f"row {i} has offset before onset")

    def __len__(self):
        return len(self.tokens)

    @property
    def midpoints(self):
        return (self.onsets + self.offsets) / 2.0


def _opt_float(text):
    text = text.strip()
    if text == "" or text.lower() in ("na", "nan", "n/a"):
        return np.nan
    return float(text)


def read_word_table(path):
    """Read a TSV with columns token, onset, offset and optional surprisal/probability."""
    with open(path, newline="") as fh:
        reader = csv.DictReader((line for line in fh if not line.startswith("#")), delimiter="\t")
        columns = reader.fieldnames or []
        for col in ("token", "onset", "offset"):
            if col not in columns:
                raise MissingColumn(f"{path}: missing column {col!r}")
        rows = list(reader)
    try:
        onsets = [float(r["onset"]) for r in rows]
        offsets = [float(r["offset"]) for r in rows]
        surprisal = [_opt_float(r["surprisal"]) for r in rows] if "surprisal" in columns else None
        probability = [_opt_float(r["probability"]) for r in rows] if "probability" in columns else None
    except (TypeError, ValueError) as exc:
        raise MalformedHeader(f"{path}: non-numeric timing value ({exc})") from exc
    return WordTable([r["token"] for r in rows], onsets, offsets, surprisal, probability)


def write_word_table(words, path):
    columns = ["token", "onset", "offset"]
    if words.surprisal is not None:
        columns.append("surprisal")
    if words.probability is not None:
        columns.append("probability")
    lines = ["\t".join(columns)]
    for i, tok in enumerate(words.tokens):
        row = [tok, repr(float(words.onsets[i])), repr(float(words.offsets[i]))]
        if words.surprisal is not None:
            row.append(repr(float(words.surprisal[i])))
        if words.probability is not None:
            row.append(repr(float(words.probability[i])))
        lines.append("\t".join(row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_embeddings(matrix, path):
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[1] < 1:
        raise DimMismatch("embeddings must be an n_words x d matrix with d >= 1")
    check_finite(matrix)
    atomic_write_bytes(path, np.ascontiguousarray(matrix, dtype="<f4").tobytes())
    meta = {"n_words": int(matrix.shape[0]), "dim": int(matrix.shape[1])}
    atomic_write_text(str(path) + ".json", json.dumps(meta) + "\n")


def read_embeddings(path, words=None):
    try:
        meta = json.loads(Path(str(path) + ".json").read_text())
        n, d = int(meta["n_words"]), int(meta["dim"])
    except (OSError, KeyError, ValueError) as exc:
        raise MalformedHeader(f"{path}: bad embedding sidecar ({exc})") from exc
    payload = Path(path).read_bytes()
    if len(payload) != n * d * 4:
        raise SizeMismatch(f"{path}: {len(payload)} bytes, expected {n * d * 4}")
    matrix = np.frombuffer(payload, dtype="<f4").reshape(n, d).astype(np.float64)
    check_finite(matrix)
    if d < 1:
        raise DimMismatch(f"{path}: embedding dim must be >= 1")
    if words is not None and len(words) != n:
        raise DimMismatch(f"{path}: {n} embedding rows but word table has {len(words)} rows")
    return matrix


# ---------------------------------------------------------------------------
# generic matrices (TSV + JSON sidecar)
# ---------------------------------------------------------------------------

def format_float(x):
    return repr(float(x))


def write_matrix_tsv(matrix, path, columns, meta=None, header_lines=()):
    """Write a matrix as TSV with exact float repr and an optional JSON sidecar."""
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim != 2 or matrix.shape[1] != len(columns):
        raise DimMismatch(f"matrix shape {matrix.shape} does not match {len(columns)} columns")
    lines = [f"# {line}" for line in header_lines]
    lines.append("\t".join(columns))
    lines.extend("\t".join(format_float(x) for x in row) for row in matrix)
    atomic_write_text(path, "\n".join(lines) + "\n")
    if meta is not None:
        atomic_write_text(str(path) + ".json", json.dumps(meta, indent=1, sort_keys=True) + "\n")


def read_matrix_tsv(path):
    """Return ``(matrix, columns, meta)``; ``meta`` is ``None`` without sidecar."""
    with open(path) as fh:
        lines = [line.rstrip("\n") for line in fh if not line.startswith("#")]
    if not lines:
        raise MalformedHeader(f"{path}: empty table")
    columns = lines[0].split("\t")
    try:
        rows = [[float(x) for x in line.split("\t")] for line in lines[1:] if line]
    except ValueError as exc:
        raise MalformedHeader(f"{path}: non-numeric cell ({exc})") from exc
    matrix = np.array(rows, dtype=float).reshape(len(rows), len(columns))
    sidecar = Path(str(path) + ".json")
    meta = json.loads(sidecar.read_text()) if sidecar.exists() else None
    return matrix, columns, meta
