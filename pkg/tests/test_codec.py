import os
import random
import struct

import pytest
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

import oracles
from mpay import codec
from mpay.codec import BIO, FUND, LOC, AmountMinor, GeoCell
from mpay.errors import GeoRangeError, TokenFormatError

# HMAC-SHA-256(key="key", msg="abc"), computed with oracles.hmac_sha256 before
# the codec existed; the oracle itself reproduces the published
# "quick brown fox" vector below.
D1 = bytes.fromhex("9c196e32dc0175f86f4b1cb89289d6619de6bee699e4c378e68309ed97a1a6ab")
FOX = bytes.fromhex("f7bc83f430538424b13298e6aa6fb143ef4d59a14946175997479dbc2d1a3cd8")

SIGNER = Ed25519PrivateKey.from_private_bytes(bytes(range(32)))


def test_oracle_matches_published_vector():
    assert oracles.hmac_sha256(b"key", b"The quick brown fox jumps over the lazy dog") == FOX


def test_hmac32_pinned_digest():
    assert codec.hmac32(b"key", b"abc") == D1
    assert codec.hmac32(b"key", b"abc") == codec.hmac32(b"key", b"abc")


def test_hmac32_empty_and_long_keys_match_oracle():
    for key in (b"", b"x" * 64, b"y" * 65, os.urandom(200)):
        assert codec.hmac32(key, b"msg") == oracles.hmac_sha256(key, b"msg")


def test_hmac32_single_bit_flip_changes_digest():
    rnd = random.Random(1)
    for _ in range(100):
        key = rnd.randbytes(rnd.randint(1, 80))
        msg = bytearray(rnd.randbytes(rnd.randint(1, 100)))
        base = codec.hmac32(key, bytes(msg))
        assert base == oracles.hmac_sha256(key, bytes(msg))
        bit = rnd.randrange(len(msg) * 8)
        msg[bit // 8] ^= 1 << (bit % 8)
        assert codec.hmac32(key, bytes(msg)) != base


def test_ottc_baseline_definition_and_time_sensitivity():
    ot0 = bytes(32)
    assert codec.ottc_baseline(ot0, 0) == codec.hmac32(ot0, bytes(8))
    rnd = random.Random(2)
    for _ in range(1000):
        ot = rnd.randbytes(32)
        t = rnd.randrange(2**40)
        a = codec.ottc_baseline(ot, t)
        assert a == oracles.ottc(ot, t)
        assert a != codec.ottc_baseline(ot, t + 1)


def test_derive_factor_key():
    assert codec.derive_factor_key(bytes(32), 0) == codec.hmac32(bytes(32), bytes(8))
    rnd = random.Random(3)
    seen = set()
    for _ in range(1000):
        bps = rnd.randbytes(32)
        key = codec.derive_factor_key(bps, 1000)
        assert key not in seen
        seen.add(key)
        assert key != codec.derive_factor_key(bps, 1060)


def test_biometric_token_against_oracle_and_corruptions():
    rnd = random.Random(4)
    template, bps, t = rnd.randbytes(32), rnd.randbytes(32), 1_700_000_000
    bt = codec.build_biometric_token(template, t, bps)
    assert bt == oracles.biometric_token(template, t, bps)
    for i in range(32):
        bad = bytearray(template)
        bad[i] ^= 0x5A
        assert codec.build_biometric_token(bytes(bad), t, bps) != bt
    assert codec.build_biometric_token(template, t + 1, bps) != bt
    with pytest.raises(ValueError):
        codec.build_biometric_token(template[:31], t, bps)


def test_location_token_against_oracle():
    lps, t = os.urandom(32), 1_700_000_123
    cell = GeoCell(-3377, 15120)
    lt = codec.build_location_token(cell, t, lps)
    assert lt == oracles.location_token(-3377, 15120, t, lps)
    assert codec.build_location_token(cell.offset(1, 0), t, lps) != lt


def test_geocell_bounds_and_flooring():
    with pytest.raises(GeoRangeError):
        GeoCell(9000, 0)
    with pytest.raises(GeoRangeError):
        GeoCell(0, -18001)
    GeoCell(-9000, 17999)
    assert GeoCell.from_degrees(37.77, -122.42) == GeoCell(3777, -12242)
    assert GeoCell.from_degrees(-0.001, 0.0) == GeoCell(-1, 0)
    assert GeoCell.decode(GeoCell(-5, 7).encode()) == GeoCell(-5, 7)
    assert GeoCell(-5, 7).encode() == struct.pack(">ii", -5, 7)


def test_amount_encoding():
    amt = AmountMinor(1999, "USD")
    assert amt.encode() == (1999).to_bytes(8, "big") + b"USD"
    assert AmountMinor.decode(amt.encode()) == amt
    with pytest.raises(TokenFormatError) as exc:
        AmountMinor.decode(b"\0" * 8 + b"u$d")
    assert exc.value.code == "BAD_CURRENCY"
    with pytest.raises(ValueError):
        AmountMinor(-1, "USD")


def test_fund_token_sign_verify_and_all_corruptions():
    ft = codec.build_fund_token(AmountMinor(500, "EUR"), 1_700_000_000, SIGNER)
    raw = ft.encode()
    assert len(raw) == 83
    assert ft.verify(SIGNER.public_key())
    assert codec.build_fund_token(AmountMinor(500, "EUR"), 1_700_000_000, SIGNER).encode() == raw
    for i in range(83):
        bad = bytearray(raw)
        bad[i] ^= 0xFF
        try:
            decoded = codec.FundToken.decode(bytes(bad))
        except TokenFormatError:
            continue  # e.g. currency byte no longer A-Z
        assert not decoded.verify(SIGNER.public_key()), i


def _sample_entries(t, rnd=random):
    return [
        (FUND, codec.build_fund_token(AmountMinor(rnd.randrange(10**6), "USD"), t, SIGNER).encode()),
        (BIO, rnd.randbytes(32)),
        (LOC, rnd.randbytes(32)),
    ]


def test_assemble_layout_matches_oracle():
    wid, t = os.urandom(16), 1_700_000_000
    entries = _sample_entries(t)
    raw = codec.assemble_payment_token(wid, t, list(reversed(entries)))
    assert len(raw) == 186
    assert raw == oracles.token_bytes(wid, t, entries)
    assert codec.parse_payment_token(raw).tags == (FUND, BIO, LOC)


def test_empty_token_and_ordering():
    wid = bytes(16)
    raw = codec.assemble_payment_token(wid, 5, [])
    assert len(raw) == 30 and raw[29] == 0
    mixed = codec.assemble_payment_token(wid, 5, [(LOC, b"l" * 32), (FUND, _sample_entries(5)[0][1])])
    assert codec.parse_payment_token(mixed).tags == (FUND, LOC)


@pytest.mark.parametrize("entries,code", [
    ([(BIO, b"a" * 32), (BIO, b"b" * 32)], "DUPLICATE_TAG"),
    ([(0x42, b"x")], "UNKNOWN_TAG"),
    ([(0x80, b"x" * 65536)], "VALUE_TOO_LONG"),
    ([(BIO, b"short")], "BAD_LENGTH"),
])
def test_assemble_rejects(entries, code):
    with pytest.raises(TokenFormatError) as exc:
        codec.assemble_payment_token(bytes(16), 7, entries)
    assert exc.value.code == code


def test_assemble_rejects_fund_time_mismatch():
    fund = codec.build_fund_token(AmountMinor(1, "USD"), 8, SIGNER).encode()
    with pytest.raises(TokenFormatError) as exc:
        codec.assemble_payment_token(bytes(16), 7, [(FUND, fund)])
    assert exc.value.code == "TIME_MISMATCH"


def test_parse_errors():
    good = codec.assemble_payment_token(bytes(16), 9, _sample_entries(9))
    cases = {
        b"XXXX" + good[4:]: "BAD_MAGIC",
        good[:4] + b"\x02" + good[5:]: "BAD_VERSION",
        good[:-1]: "TRUNCATED",
        good + b"\0": "TRAILING_BYTES",
        good[:29] + b"\x04" + good[30:]: "COUNT_MISMATCH",
        good[:10]: "TRUNCATED",
    }
    for data, code in cases.items():
        with pytest.raises(TokenFormatError) as exc:
            codec.parse_payment_token(data)
        assert exc.value.code == code
    swapped = oracles.token_bytes(bytes(16), 9, [])[:29] + b"\x02" + \
        bytes([LOC, 0, 32]) + b"l" * 32 + bytes([BIO, 0, 32]) + b"b" * 32
    with pytest.raises(TokenFormatError) as exc:
        codec.parse_payment_token(swapped)
    assert exc.value.code == "UNORDERED_TAGS"
    dup = swapped[:30] + bytes([BIO, 0, 32]) + b"b" * 32 + bytes([BIO, 0, 32]) + b"b" * 32
    with pytest.raises(TokenFormatError) as exc:
        codec.parse_payment_token(dup)
    assert exc.value.code == "DUPLICATE_TAG"


def test_txn_id():
    raw = codec.assemble_payment_token(bytes(16), 1, [])
    assert codec.txn_id(raw) == __import__("hashlib").sha256(raw).digest()[:16]


def test_factor_names():
    assert codec.factor_tag("LOC") == LOC
    assert codec.factor_tag("0x80") == 0x80
    assert codec.factor_name(0x81) == "0x81"
    with pytest.raises(ValueError):
        codec.factor_tag("NOPE")


_FUND_CACHE = {}


def _fund_value(t, units):
    key = (t, units)
    if key not in _FUND_CACHE:
        _FUND_CACHE[key] = codec.build_fund_token(AmountMinor(units, "USD"), t, SIGNER).encode()
    return _FUND_CACHE[key]


token_strategy = st.builds(
    lambda wid, t, fund_units, bio, loc, ext: (wid, t, [e for e in (
        (FUND, _fund_value(t, fund_units)) if fund_units is not None else None,
        (BIO, bio) if bio is not None else None,
        (LOC, loc) if loc is not None else None,
        *ext.items(),
    ) if e is not None]),
    st.binary(min_size=16, max_size=16),
    st.integers(0, 2**64 - 1),
    st.one_of(st.none(), st.integers(0, 50)),
    st.one_of(st.none(), st.binary(min_size=32, max_size=32)),
    st.one_of(st.none(), st.binary(min_size=32, max_size=32)),
    st.dictionaries(st.integers(0x80, 0xFF), st.binary(max_size=40), max_size=3),
)


def _check_round_trip(wid, t, entries):
    raw = codec.assemble_payment_token(wid, t, entries)
    assert raw == oracles.token_bytes(wid, t, entries)
    parsed = codec.parse_payment_token(raw)
    assert (parsed.wallet_id, parsed.t, parsed.entries) == (wid, t, tuple(sorted(entries)))
    assert parsed.encode() == raw


@settings(max_examples=300, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(token_strategy)
def test_round_trip_shrinkable(case):
    _check_round_trip(*case)


def test_round_trip_ten_thousand_tokens():
    rnd = random.Random(6)
    for _ in range(10_000):
        t = rnd.randrange(2**64)
        entries = []
        if rnd.random() < 0.7:
            entries.append((FUND, _fund_value(t, rnd.randrange(100))))
        for tag in (BIO, LOC):
            if rnd.random() < 0.7:
                entries.append((tag, rnd.randbytes(32)))
        for tag in rnd.sample(range(0x80, 0x100), rnd.randint(0, 3)):
            entries.append((tag, rnd.randbytes(rnd.randint(0, 40))))
        _check_round_trip(rnd.randbytes(16), t, entries)


def test_parser_never_crashes_on_mutations():
    rnd = random.Random(5)
    seed_token = codec.assemble_payment_token(bytes(16), 77, _sample_entries(77, rnd))
    for _ in range(5000):
        data = bytearray(seed_token)
        for _ in range(rnd.randint(1, 4)):
            op = rnd.random()
            if op < 0.5 and data:
                data[rnd.randrange(len(data))] = rnd.randrange(256)
            elif op < 0.75:
                del data[rnd.randrange(len(data) + 1):]
            else:
                data += rnd.randbytes(rnd.randint(1, 10))
        try:
            codec.parse_payment_token(bytes(data))
        except TokenFormatError:
            pass
