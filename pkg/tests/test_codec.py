import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from recgan.codec import (
    ArithmeticRowCodec,
    CodecConfig,
    CodeOverflow,
    catalog_digest,
    code_length,
    decode_matrix,
    decode_row,
    encode_row,
    encode_sparse,
    read_coded,
    required_width,
    write_coded,
)

from oracles import oracle_decode, oracle_encode


def bits(s):
    return np.array([int(c) for c in s], dtype=np.uint8)


def test_empty_category_is_all_zero():
    assert not encode_row([], 8).any()
    assert decode_row(np.zeros(8, np.uint8), 7).tolist() == [0] * 7


def test_zero_row_round_trip():
    x = [0, 0, 0, 0, 0]
    coded = encode_row(x, 16)
    assert coded.any()
    assert decode_row(coded, 5).tolist() == x


def test_frozen_bit_pattern():
    # computed with the Fraction interval-subdivision oracle
    x = [1, 0, 1, 0, 0, 0, 0, 0, 1, 0, 0, 0]
    expected = "00000000000000000000110010000101"
    assert "".join(map(str, oracle_encode(x, 32))) == expected
    assert "".join(map(str, encode_row(x, 32))) == expected


@pytest.mark.parametrize("pattern, decoded", [
    ("01000011110010001000011110011000", "0000000000"),
    ("01111100001010111000110000001010", "1111111111"),
    ("01100100000101000010011110010001", "1010000000"),
    ("00000110101010111000101101101011", "1101110001"),
    ("10001101000010100000010001001110", "0000000000"),
])
def test_frozen_decodes(pattern, decoded):
    assert "".join(map(str, decode_row(bits(pattern), 10))) == decoded


def test_oracle_equivalence_random_patterns():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        b = rng.integers(0, 2, 32)
        assert decode_row(b, 10).tolist() == oracle_decode(b.tolist(), 10)


def test_oracle_equivalence_encode():
    rng = np.random.default_rng(8)
    for _ in range(300):
        n = int(rng.integers(1, 60))
        x = (rng.random(n) < rng.random()).astype(np.uint8)
        w = required_width(n, int(x.sum()))
        assert encode_row(x, w).tolist() == oracle_encode(x.tolist(), w)


def test_overflow_is_raised_not_truncated():
    x = np.ones(64, dtype=np.uint8)
    x[::2] = 0
    with pytest.raises(CodeOverflow) as info:
        encode_row(x, 16)
    assert info.value.needed > 16


def test_overflow_reports_row_index():
    sizes = [10, 200]
    rows = [[1], list(range(0, 200, 2))]
    with pytest.raises(CodeOverflow) as info:
        encode_sparse(rows, sizes, CodecConfig(width=32))
    assert info.value.row_index == 1


def test_width_must_hold_sentinel():
    with pytest.raises(ValueError):
        CodecConfig(width=1)


def test_required_width_is_sufficient():
    rng = np.random.default_rng(3)
    for _ in range(200):
        n = int(rng.integers(1, 500))
        x = (rng.random(n) < rng.random() * 0.3).astype(np.uint8)
        assert code_length(x) + 1 <= required_width(n, int(x.sum()))


def test_width_300_adequacy_at_five_percent():
    # every row of up to 1000 items at <= 5% density fits 300 bits
    assert all(required_width(n, n // 20) <= 300 for n in range(1, 1001))
    rng = np.random.default_rng(8)
    for n in (200, 500, 1000):
        for _ in range(20):
            x = np.zeros(n, np.uint8)
            x[rng.choice(n, n // 20, replace=False)] = 1
            assert decode_row(encode_row(x, 300), n).tolist() == x.tolist()
    # far larger rows overflow loudly instead of truncating
    x = np.zeros(10_000, np.uint8)
    x[rng.choice(10_000, 500, replace=False)] = 1
    with pytest.raises(CodeOverflow):
        encode_row(x, 300)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 1), max_size=120))
def test_round_trip_property(x):
    w = required_width(len(x), sum(x))
    assert decode_row(encode_row(x, w), len(x)).tolist() == x


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 1), min_size=1, max_size=60), st.integers(0, 40))
def test_prefix_invariance(x, extra):
    w = required_width(len(x), sum(x))
    coded = encode_row(x, w)
    wider = np.concatenate([np.zeros(extra, np.uint8), coded])
    assert decode_row(wider, len(x)).tolist() == x
    assert encode_row(x, w + extra).tolist() == wider.tolist()


@settings(max_examples=300, deadline=None)
@given(st.lists(st.integers(0, 1), min_size=1, max_size=64), st.integers(0, 300))
def test_totality(pattern, n):
    out = decode_row(pattern, n)
    assert out.shape == (n,)
    assert set(out.tolist()) <= {0, 1}


def test_matrix_round_trip_and_locality():
    rng = np.random.default_rng(11)
    sizes = [int(s) for s in rng.integers(0, 40, 12)]
    cfg = CodecConfig(width=48)
    empty = encode_sparse([[] for _ in sizes], sizes, cfg)
    for i, n in enumerate(sizes):
        assert empty[i].tolist() == encode_row(np.zeros(n, np.uint8), 48).tolist()
    rows = [sorted(rng.choice(n, size=min(n, 2), replace=False).tolist()) if n else []
            for n in sizes]
    coded = encode_sparse(rows, sizes, cfg)
    decoded = decode_matrix(coded, sizes, cfg)
    assert [d.tolist() for d in decoded] == rows

    single = [[] for _ in sizes]
    first = next(i for i, n in enumerate(sizes) if n)
    single[first] = [0]
    diff = np.flatnonzero((encode_sparse(single, sizes, cfg) != empty).any(axis=1))
    assert diff.tolist() == [first]


def test_all_zero_matrix_decodes_empty():
    sizes = [5, 0, 9]
    out = decode_matrix(np.zeros((3, 16), np.uint8), sizes)
    assert all(len(r) == 0 for r in out)


def test_parallel_decode_matches_serial():
    rng = np.random.default_rng(5)
    sizes = [int(s) for s in rng.integers(1, 80, 24)]
    coded = rng.integers(0, 2, (24, 40)).astype(np.uint8)
    serial = decode_matrix(coded, sizes, workers=1)
    parallel = decode_matrix(coded, sizes, workers=2)
    assert [a.tobytes() for a in serial] == [b.tobytes() for b in parallel]


def test_coded_file_round_trip():
    rng = np.random.default_rng(1)
    r, w = 5, 13
    records = [(int(rng.integers(0, 5)), rng.integers(0, 2, (r, w)), rng.integers(0, 2, (r, w)))
               for _ in range(4)]
    digest = catalog_digest([3, 4, 5, 6, 7])
    buf = io.BytesIO()
    write_coded(buf, records, r, w, digest)
    raw = buf.getvalue()
    assert raw[:4] == b"RGC1"
    buf.seek(0)
    r2, w2, d2, segs, view, buy = read_coded(buf)
    assert (r2, w2, d2) == (r, w, digest)
    for i, (s, v, b) in enumerate(records):
        assert segs[i] == s
        assert (view[i] == v).all() and (buy[i] == b).all()


def test_coded_file_bit_layout():
    # little-endian bit packing, row-major
    mat = np.zeros((1, 9), np.uint8)
    mat[0, 0] = 1
    mat[0, 8] = 1
    buf = io.BytesIO()
    write_coded(buf, [(0, mat, mat)], 1, 9, b"\0" * 32)
    payload = buf.getvalue()[4 + 8 + 32 + 4 + 1:]
    assert payload[:2] == bytes([0b00000001, 0b00000001])


def test_transformer_interface():
    codec = ArithmeticRowCodec(width=40).fit([6, 0, 30])
    samples = [[[1, 4], [], [29]], [[], [], []]]
    coded = codec.transform(samples)
    assert coded.shape == (2, 3, 40)
    back = codec.inverse_transform(coded)
    assert [[r.tolist() for r in s] for s in back] == [[[1, 4], [], [29]], [[], [], []]]
    assert codec.get_params()["width"] == 40
