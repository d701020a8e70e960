import json
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from icaenc.dataio import (
    Atlas,
    Mask,
    VolumeGrid,
    VolumeSeries,
    WordTable,
    import_nifti,
    import_nifti_volume,
    read_atlas,
    read_embeddings,
    read_mask,
    read_volume_series,
    read_vxt,
    read_word_table,
    vxt_header,
    write_atlas,
    write_embeddings,
    write_mask,
    write_volume_series,
    write_vxt,
    write_word_table,
)
from icaenc.errors import (
    BadMagic,
    DimMismatch,
    DuplicateName,
    InvalidMask,
    MalformedHeader,
    MissingColumn,
    NegativeDuration,
    NonFiniteData,
    NonMonotoneOnsets,
    SizeMismatch,
    UnsupportedDatatype,
)


@st.composite
def series_strategy(draw):
    dims = tuple(draw(st.integers(1, 4)) for _ in range(3))
    grid = VolumeGrid(dims, tuple(draw(st.floats(0.5, 4.0)) for _ in range(3)))
    seed = draw(st.integers(0, 2 ** 31))
    rng = np.random.default_rng(seed)
    inc = rng.random(dims) < 0.7
    inc.flat[rng.integers(inc.size)] = True
    mask = Mask(grid, inc)
    t = draw(st.integers(2, 6))
    data = rng.standard_normal((t, mask.v)) * 10 ** draw(st.integers(-3, 3))
    return VolumeSeries(grid, mask, draw(st.floats(0.1, 5.0)), data)


@given(series_strategy())
def test_vxt_roundtrip_f64_is_bitwise(tmp_path_factory, series):
    path = tmp_path_factory.mktemp("vxt") / "x.vxt"
    write_volume_series(series, path, dtype="f64")
    back = read_volume_series(path)
    assert np.array_equal(back.data, series.data)
    assert back.grid == series.grid and back.mask == series.mask and back.tr == series.tr


@given(series_strategy())
def test_vxt_roundtrip_f32_values(tmp_path_factory, series):
    series = series.with_data(series.data.astype(np.float32))
    path = tmp_path_factory.mktemp("vxt") / "x.vxt"
    write_volume_series(series, path)
    back = read_volume_series(path)
    assert back.data.dtype == np.float64
    assert np.array_equal(back.data, series.data)


def test_scan_order_is_x_fastest(tmp_path):
    grid = VolumeGrid((3, 2, 2))
    inc = np.ones(grid.dims, bool)
    inc[1, 0, 0] = False
    mask = Mask(grid, inc)
    vol = np.zeros(grid.dims)
    for x in range(3):
        for y in range(2):
            for z in range(2):
                vol[x, y, z] = x + 10 * y + 100 * z
    flat = mask.from_volume(vol)
    expected = [x + 10 * y + 100 * z for z in range(2) for y in range(2) for x in range(3)
                if (x, y, z) != (1, 0, 0)]
    assert flat.tolist() == expected
    assert np.array_equal(mask.to_volume(flat)[inc], vol[inc])
    write_vxt(grid, mask, 1.0, flat[None, :], tmp_path / "o.vxt", "f64")
    raw = np.frombuffer((tmp_path / "o.vxt.raw").read_bytes(), "<f8")
    assert raw.tolist() == expected


def test_header_fields(tmp_path, rng):
    grid = VolumeGrid((2, 2, 2), (1.5, 2.0, 2.5))
    s = VolumeSeries(grid, Mask.full(grid), 0.8, rng.standard_normal((3, 8)))
    write_volume_series(s, tmp_path / "a.vxt", extra={"stage": "x"})
    h = vxt_header(tmp_path / "a.vxt")
    assert h["T"] == 3 and h["v"] == 8 and h["tr"] == 0.8 and h["dtype"] == "f32"
    assert h["extra"] == {"stage": "x"} and h["mask_digest"] == s.mask.digest


def test_nan_refused_before_write(tmp_path):
    grid = VolumeGrid((2, 1, 1))
    data = np.array([[1.0, np.nan], [0.0, 0.0]])
    with pytest.raises(NonFiniteData):
        write_vxt(grid, Mask.full(grid), 1.0, data, tmp_path / "n.vxt")
    assert not (tmp_path / "n.vxt").exists()
    with pytest.raises(NonFiniteData):
        VolumeSeries(grid, Mask.full(grid), 1.0, data)


def test_truncated_body_and_bad_header(tmp_path, rng):
    grid = VolumeGrid((2, 2, 1))
    write_vxt(grid, Mask.full(grid), 1.0, rng.standard_normal((3, 4)), tmp_path / "a.vxt")
    raw = tmp_path / "a.vxt.raw"
    raw.write_bytes(raw.read_bytes()[:-4])
    with pytest.raises(SizeMismatch):
        read_vxt(tmp_path / "a.vxt")
    (tmp_path / "b.vxt").write_text("{not json")
    with pytest.raises(MalformedHeader):
        read_vxt(tmp_path / "b.vxt")
    h = json.loads((tmp_path / "a.vxt").read_text())
    h["mask_digest"] = "0" * 64
    (tmp_path / "c.vxt").write_text(json.dumps(h))
    with pytest.raises(MalformedHeader):
        read_vxt(tmp_path / "c.vxt")


def test_geometry_invariants():
    with pytest.raises(DimMismatch):
        VolumeGrid((0, 2, 2))
    with pytest.raises(DimMismatch):
        VolumeGrid((2, 2, 2), (1.0, 0.0, 1.0))
    bad = np.eye(4)
    bad[3, 0] = 1.0
    with pytest.raises(DimMismatch):
        VolumeGrid((2, 2, 2), affine=bad)
    with pytest.raises(InvalidMask):
        Mask(VolumeGrid((2, 2, 2)), np.zeros((2, 2, 2)))


def test_mask_and_atlas_roundtrip(tmp_path):
    grid = VolumeGrid((4, 3, 2))
    inc = np.zeros(grid.dims, bool)
    inc[1:3, :, 1] = True
    write_mask(Mask(grid, inc), tmp_path / "m.vxt")
    assert np.array_equal(read_mask(tmp_path / "m.vxt").included, inc)
    other = np.zeros(grid.dims, bool)
    other[0] = True
    atlas = Atlas(grid, [("A", inc), ("B", other)])
    write_atlas(atlas, tmp_path / "atlas.vxt")
    back = read_atlas(tmp_path / "atlas.vxt")
    assert back.names == ["A", "B"]
    assert all(np.array_equal(a[1], b[1]) for a, b in zip(atlas.parcels, back.parcels))
    with pytest.raises(DuplicateName):
        Atlas(grid, [("A", inc), ("A", other)])


# ---------------------------------------------------------------------------
# NIfTI-1, built byte by byte
# ---------------------------------------------------------------------------

def nifti_bytes(dims=(2, 2, 2, 3), datatype=16, endian="<", magic=b"n+1\x00", tr=1.5, units=10, data=None):
    hdr = bytearray(348)
    struct.pack_into(endian + "i", hdr, 0, 348)
    dim = [len(dims)] + list(dims) + [1] * (7 - len(dims))
    struct.pack_into(endian + "8h", hdr, 40, *dim)
    bitpix = {2: 8, 4: 16, 16: 32, 64: 64}[datatype]
    struct.pack_into(endian + "hh", hdr, 70, datatype, bitpix)
    struct.pack_into(endian + "8f", hdr, 76, 1.0, 2.0, 2.0, 2.0, tr, 0, 0, 0)
    struct.pack_into(endian + "f", hdr, 108, 352.0)
    struct.pack_into(endian + "2f", hdr, 112, 0.0, 0.0)
    hdr[123] = units
    hdr[344:348] = magic
    n = int(np.prod(dims))
    if data is None:
        data = np.arange(n, dtype=float)
    dt = {2: "u1", 4: "i2", 16: "f4", 64: "f8"}[datatype]
    body = np.asarray(data).astype(np.dtype(dt).newbyteorder(endian)).tobytes()
    return bytes(hdr) + b"\x00" * 4 + body


@pytest.mark.parametrize("endian", ["<", ">"])
def test_nifti_import(tmp_path, endian):
    path = tmp_path / "img.nii"
    path.write_bytes(nifti_bytes(endian=endian))
    s = import_nifti(path)
    assert s.n_samples == 3 and s.n_voxels == 8
    assert s.tr == 1.5 and s.grid.voxel_size == (2.0, 2.0, 2.0)
    # on-disk value = x + 2y + 4z + 8t and columns are x-fastest, so row t is 8t + 0..7
    assert np.array_equal(s.data, np.arange(24, dtype=float).reshape(3, 8))
    assert s.volumes()[1, 1, 0, 1] == 8 + 1 + 4


def test_nifti_pure_function_of_bytes(tmp_path):
    path = tmp_path / "img.nii"
    path.write_bytes(nifti_bytes())
    a, b = import_nifti(path), import_nifti(path)
    assert np.array_equal(a.data, b.data) and a.grid == b.grid


def test_nifti_msec_units_and_volume(tmp_path):
    path = tmp_path / "img.nii"
    path.write_bytes(nifti_bytes(tr=2000.0, units=2 | 16))
    assert import_nifti(path).tr == 2.0
    grid, vol = import_nifti_volume(path)
    assert vol.shape == (2, 2, 2) and vol[1, 1, 1] == 7


def test_nifti_errors(tmp_path):
    path = tmp_path / "img.nii"
    path.write_bytes(nifti_bytes(magic=b"ni1\x00"))
    with pytest.raises(BadMagic):
        import_nifti(path)
    path.write_bytes(nifti_bytes(datatype=2))
    with pytest.raises(UnsupportedDatatype):
        import_nifti(path)
    path.write_bytes(nifti_bytes()[:-8])
    with pytest.raises(DimMismatch):
        import_nifti(path)
    path.write_bytes(b"\x00" * 100)
    with pytest.raises(DimMismatch):
        import_nifti(path)


# ---------------------------------------------------------------------------
# word tables and embeddings
# ---------------------------------------------------------------------------

def test_word_table_roundtrip(tmp_path):
    words = WordTable(["a", "b", "c"], [0.1, 0.5, 0.5], [0.4, 0.9, 1.2], surprisal=[1.0, np.nan, 2.5])
    write_word_table(words, tmp_path / "w.tsv")
    back = read_word_table(tmp_path / "w.tsv")
    assert back.tokens == words.tokens
    assert np.array_equal(back.onsets, words.onsets)
    assert np.array_equal(back.midpoints, (words.onsets + words.offsets) / 2)
    assert np.isnan(back.surprisal[1]) and back.surprisal[2] == 2.5


def test_word_table_errors(tmp_path):
    (tmp_path / "w.tsv").write_text("token\tonset\nA\t0.1\n")
    with pytest.raises(MissingColumn):
        read_word_table(tmp_path / "w.tsv")
    with pytest.raises(NonMonotoneOnsets):
        WordTable(["a", "b"], [1.0, 0.5], [1.2, 0.7])
    with pytest.raises(NegativeDuration):
        WordTable(["a"], [1.0], [0.9])


def test_embeddings_roundtrip_and_row_check(tmp_path, rng):
    m = rng.standard_normal((5, 3)).astype(np.float32).astype(float)
    write_embeddings(m, tmp_path / "e.f32")
    assert np.array_equal(read_embeddings(tmp_path / "e.f32"), m)
    words = WordTable(list("abcd"), [0, 1, 2, 3], [0.5, 1.5, 2.5, 3.5])
    with pytest.raises(DimMismatch):
        read_embeddings(tmp_path / "e.f32", words)
    (tmp_path / "e.f32").write_bytes(b"\x00" * 8)
    with pytest.raises(SizeMismatch):
        read_embeddings(tmp_path / "e.f32")
