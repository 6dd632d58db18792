import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from banet import formats as F
from banet.formats import FormatError
from banet.weights import WeightStore


# --------------------------------------------------------------------------- BANT

@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.lists(st.integers(1, 5), min_size=0, max_size=4))
def test_bant_round_trip_bit_exact(seed, shape):
    arr = np.random.default_rng(seed).normal(size=shape).astype(np.float32)
    back = F.decode_tensor(F.encode_tensor(arr))
    assert back.shape == arr.shape and back.tobytes() == arr.tobytes()


def test_bant_layout():
    data = F.encode_tensor(np.array([[1.0, 2.0, 3.0]], np.float32))
    assert data[:4] == b"BANT" and data[4] == 1 and data[5] == 2
    assert data[6:14] == (1).to_bytes(4, "little") + (3).to_bytes(4, "little")
    assert len(data) == 14 + 12
    assert data[14:18] == np.float32(1.0).astype("<f4").tobytes()


def test_bant_preserves_special_values(tmp_path):
    arr = np.array([np.nan, np.inf, -np.inf, -0.0, 1e-45], np.float32)
    F.save_tensor(tmp_path / "t.bant", arr)
    assert F.load_tensor(tmp_path / "t.bant").tobytes() == arr.tobytes()


@pytest.mark.parametrize("cut", [0, 3, 5, 8, 20])
def test_bant_truncated(cut):
    data = F.encode_tensor(np.ones((2, 3), np.float32))
    with pytest.raises(FormatError):
        F.decode_tensor(data[:cut])


def test_bant_bad_magic_and_version():
    data = bytearray(F.encode_tensor(np.ones(2, np.float32)))
    with pytest.raises(FormatError, match="magic"):
        F.decode_tensor(b"XANT" + bytes(data[4:]))
    data[4] = 2
    with pytest.raises(FormatError, match="version"):
        F.decode_tensor(bytes(data))


# --------------------------------------------------------------------------- BANW

def _random_store(rng, n=5):
    store = WeightStore()
    for i in range(n):
        shape = tuple(int(s) for s in rng.integers(1, 4, size=rng.integers(0, 5)))
        store.add(f"layer{i}.subé.weight", rng.normal(size=shape))
    return store


def test_banw_round_trip_order_and_bits(tmp_path):
    rng = np.random.default_rng(0)
    for _ in range(20):
        store = _random_store(rng)
        F.save_weights(tmp_path / "w.banw", store)
        back = F.load_weights(tmp_path / "w.banw")
        assert list(back) == list(store)
        for k in store:
            assert back[k].shape == store[k].shape and back[k].tobytes() == store[k].tobytes()


def test_banw_truncation_is_format_error():
    data = F.encode_weights(_random_store(np.random.default_rng(1)))
    for cut in range(0, len(data), 7):
        with pytest.raises(FormatError):
            F.decode_weights(data[:cut])


def test_banw_rejects_duplicate_names():
    with pytest.raises(FormatError, match="duplicate"):
        F.encode_weights([("a", np.ones(1)), ("a", np.ones(2))])
    good = F.encode_weights([("a", np.ones(1)), ("b", np.ones(1))])
    forged = good.replace(b"\x01\x00b", b"\x01\x00a")
    with pytest.raises(FormatError, match="duplicate"):
        F.decode_weights(forged)


def test_banw_header():
    data = F.encode_weights([("x", np.zeros((2,), np.float32))])
    assert data[:4] == b"BANW" and data[4] == 1
    assert int.from_bytes(data[5:9], "little") == 1
    assert int.from_bytes(data[9:11], "little") == 1 and data[11:12] == b"x"


# --------------------------------------------------------------------------- PPM / PGM

def test_ppm_exact_bytes():
    img = np.array([[[255, 0, 0], [0, 0, 255]]], np.uint8)
    data = F.encode_ppm(img)
    assert data == b"P6\n2 1\n255\n" + bytes([255, 0, 0, 0, 0, 255])
    assert len(data) == 17


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 9), st.integers(1, 9))
def test_ppm_pgm_round_trip(seed, h, w):
    rng = np.random.default_rng(seed)
    rgb = rng.integers(0, 256, (h, w, 3), dtype=np.uint8)
    gray = rng.integers(0, 256, (h, w), dtype=np.uint8)
    assert F.encode_ppm(F.decode_ppm(F.encode_ppm(rgb))) == F.encode_ppm(rgb)
    np.testing.assert_array_equal(F.decode_ppm(F.encode_ppm(rgb)), rgb)
    np.testing.assert_array_equal(F.decode_pgm(F.encode_pgm(gray)), gray)


def test_pnm_header_grammar_with_comments():
    data = b"P5 # comment\n# another\n2\t1 255\n" + bytes([3, 4])
    np.testing.assert_array_equal(F.decode_pgm(data), [[3, 4]])


@pytest.mark.parametrize("data, offset", [
    (b"P3\n1 1\n255\n\x00\x00\x00", 0),
    (b"P6\n1 1\n65535\n\x00\x00\x00", None),
    (b"P6\n1 x\n255\n\x00\x00\x00", 5),
    (b"P6\n2 1\n255\n\x00\x00\x00", 11),
    (b"P6\n1 1\n", 7),
])
def test_pnm_errors_carry_offsets(data, offset):
    with pytest.raises(FormatError) as info:
        F.decode_ppm(data)
    assert "byte offset" in str(info.value)
    if offset is not None:
        assert info.value.offset == offset


def test_pgm_class_range_check():
    data = F.encode_pgm(np.array([[0, 1], [6, 2]], np.uint8))
    assert F.decode_pgm(data, 7).max() == 6
    with pytest.raises(FormatError, match="K=6"):
        F.decode_pgm(data, 6)


# --------------------------------------------------------------------------- palettes

def test_isprs_palette_colors():
    pal = F.ISPRS_PALETTE
    assert pal.names == ("imp_surf", "building", "low_veg", "tree", "car", "clutter")
    assert [tuple(c) for c in pal.colors] == [(255, 255, 255), (0, 0, 255), (0, 255, 255),
                                               (0, 255, 0), (255, 255, 0), (255, 0, 0)]


def test_palette_round_trip_random_maps():
    rng = np.random.default_rng(2)
    for _ in range(20):
        labels = rng.integers(0, 6, (7, 9))
        np.testing.assert_array_equal(F.ISPRS_PALETTE.decode(F.ISPRS_PALETTE.encode(labels)), labels)


def test_single_class_single_color():
    img = F.ISPRS_PALETTE.encode(np.full((3, 3), 4))
    assert (img == [255, 255, 0]).all()


def test_palette_unknown_color():
    img = np.zeros((2, 2, 3), np.uint8)
    img[1, 0] = [1, 2, 3]
    img[...] = [255, 255, 255]
    img[1, 0] = [1, 2, 3]
    with pytest.raises(FormatError, match=r"\(1, 2, 3\).*\(1, 0\)"):
        F.ISPRS_PALETTE.decode(img)
    assert F.ISPRS_PALETTE.decode(img, ignore_label=255)[1, 0] == 255


def test_palette_text_file(tmp_path):
    F.ISPRS_PALETTE.save(tmp_path / "p.txt")
    assert (tmp_path / "p.txt").read_text().splitlines()[1] == "building 0 0 255"
    assert F.load_palette(str(tmp_path / "p.txt")) == F.ISPRS_PALETTE
    with pytest.raises(FormatError):
        F.Palette.from_text("a 1 2 3\nb 1 2 3\n")
    with pytest.raises(FormatError):
        F.Palette.from_text("a 1 2\n")


def test_default_palette_distinct_for_any_k():
    for k in range(2, 20):
        assert len(F.default_palette(k)) == k
