"""Sharing and oblivious-matching checks, including the pinned worked example:
owner polynomials (0+2x, 1+8x) against query polynomials (0+3x, 1+7x) must
give server values 78/279/604 and interpolate to 1."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wifitrace.errors import (
    CrossServerError,
    EncodingError,
    InterpolationError,
    ShapeError,
    ThresholdError,
)
from wifitrace.field import M61
from wifitrace.model import HEX_ALPHABET
from wifitrace.sharing import (
    Share,
    decode_fragment,
    decode_share,
    decode_share_vector,
    encode_fragment,
    encode_share,
    encode_share_vector,
    encode_unary,
    fragment_wire_bytes,
    interpolate,
    make_sss,
    make_sss_with_polynomials,
    reconstruct_shares,
    share_add,
    share_mul,
    share_polynomial,
    share_scalar,
    share_vector_wire_bytes,
    string_match,
)

RNG = np.random.default_rng(1234)


# -- pinned worked example ------------------------------------------------------


def test_owner_polynomials_produce_pinned_shares():
    assert share_polynomial([0, 2], 3) == [2, 4, 6]
    assert share_polynomial([1, 8], 3) == [9, 17, 25]
    assert share_polynomial([0, 3], 3) == [3, 6, 9]
    assert share_polynomial([1, 7], 3) == [8, 15, 22]


def test_worked_example_match_values_and_reconstruction():
    # symbol Y over alphabet {X, Y}: one-hot <0, 1>
    data = make_sss_with_polynomials([[[0, 2], [1, 8]]], 3)
    query = make_sss_with_polynomials([[[0, 3], [1, 7]]], 3)
    matches = [string_match(d, q) for d, q in zip(data, query)]
    assert [m.value for m in matches] == [78, 279, 604]
    assert all(m.degree == 2 for m in matches)
    assert interpolate([(m.server_index, m.value) for m in matches]) == 1


def test_worked_example_fragment_layout():
    # per-server one-hot share vectors for Y: (3,8), (6,15), (9,22)
    query = make_sss_with_polynomials([[[0, 3], [1, 7]]], 3)
    assert [f.bits[0].tolist() for f in query] == [[3, 8], [6, 15], [9, 22]]


def test_owner_zero_row_interpolates_to_zero():
    # the shares of the 0 bit, (1,2) (2,4) (3,6), hide the secret 0
    assert interpolate([(1, 2), (2, 4), (3, 6)]) == 0


# -- share_scalar ------------------------------------------------------------------


def test_share_scalar_constant_polynomial_edge():
    shares = share_polynomial([7], 5)
    assert shares == [7] * 5


def test_share_scalar_threshold_error():
    with pytest.raises(ThresholdError):
        share_scalar(5, degree=3, n=3, rng=RNG)


@given(st.integers(0, M61 - 1), st.integers(1, 4))
@settings(max_examples=60)
def test_share_scalar_round_trip(secret, degree):
    shared = share_scalar(secret, degree, 9, rng=RNG)
    assert shared.reconstruct() == secret
    # using more points than degree+1 still reconstructs
    assert shared.reconstruct(count=9) == secret


def test_threshold_subsets_agree():
    for _ in range(1000):
        secret = int(RNG.integers(0, M61))
        shared = share_scalar(secret, 1, 9, rng=RNG)
        points = [(s.server_index, s.value) for s in shared.shares]
        values = {interpolate(list(pair)) for pair in itertools.combinations(points, 2)}
        assert values == {secret}


def test_single_share_uniformity_chi_square():
    """Any one degree-1 share of a fixed secret is uniform over a small field."""
    from scipy.stats import chi2

    p = 101
    secret = 5
    samples = 10_000
    rng = np.random.default_rng(77)
    counts = np.zeros(p)
    for _ in range(samples):
        shared = share_scalar(secret, 1, 3, p=p, rng=rng)
        counts[shared.shares[0].value] += 1
    expected = samples / p
    statistic = float(((counts - expected) ** 2 / expected).sum())
    assert statistic < chi2.ppf(0.999, p - 1)


# -- unary encoding -----------------------------------------------------------------


def test_encode_unary_examples():
    assert encode_unary(1, 2) == (0, 1)  # symbol Y over {X, Y}
    vec = encode_unary(0, 16)
    assert vec[0] == 1 and sum(vec) == 1


def test_encode_unary_identity_matrix():
    rows = [encode_unary(i, 16) for i in range(16)]
    assert np.array_equal(np.array(rows), np.eye(16, dtype=int))


def test_encode_unary_out_of_range():
    with pytest.raises(EncodingError):
        encode_unary(16, 16)
    with pytest.raises(EncodingError):
        encode_unary(-1, 16)


# -- make_sss -------------------------------------------------------------------------


def test_make_sss_shape_and_one_hot_reconstruction():
    frags = make_sss("0F3", 9, rng=RNG)
    assert len(frags) == 9
    assert frags[0].bits.shape == (3, 16)  # 48 scalars per server
    # reconstruct every bit across servers: must be the one-hot pattern
    for pos, symbol in enumerate("0F3"):
        for sym in range(16):
            points = [(f.server_index, int(f.bits[pos, sym])) for f in frags[:2]]
            assert interpolate(points) == (1 if HEX_ALPHABET[sym] == symbol else 0)


def test_make_sss_fresh_polynomials():
    collisions = 0
    for _ in range(100):
        a = make_sss("AB", 9, rng=RNG)
        b = make_sss("AB", 9, rng=RNG)
        collisions += int(np.array_equal(a[0].bits, b[0].bits))
    assert collisions == 0


def test_make_sss_rejects_foreign_symbols():
    with pytest.raises(EncodingError):
        make_sss("0G", 9, rng=RNG)


# -- string matching -----------------------------------------------------------------


def test_match_rejects_shape_and_server_mismatch():
    a = make_sss("AB", 9, rng=RNG)
    b = make_sss("ABC", 9, rng=RNG)
    with pytest.raises(ShapeError):
        string_match(a[0], b[0])
    with pytest.raises(CrossServerError):
        string_match(a[0], make_sss("AB", 9, rng=RNG)[1])


def test_match_exhaustive_single_symbols():
    for i, x in enumerate(HEX_ALPHABET):
        data = make_sss(x, 9, rng=RNG)
        for y in HEX_ALPHABET:
            query = make_sss(y, 9, rng=RNG)
            matches = [string_match(d, q) for d, q in zip(data, query)]
            assert reconstruct_shares(matches, 2) == (1 if x == y else 0)


def test_match_single_substitution_always_misses():
    value = "A7C"
    data = make_sss(value, 9, rng=RNG)
    for pos in range(3):
        for sym in HEX_ALPHABET:
            if sym == value[pos]:
                continue
            probe = value[:pos] + sym + value[pos + 1:]
            matches = [string_match(d, q) for d, q in zip(data, make_sss(probe, 9, rng=RNG))]
            assert reconstruct_shares(matches, 6) == 0


def test_degree_law_and_exact_share_budget():
    """match over l symbols has degree 2l; times a degree-1 value share, 2l+1,
    so exactly 2l+2 = 8 shares reconstruct it for l = 3."""
    value_secret = 491
    data = make_sss("1B9", 9, rng=RNG)
    query = make_sss("1B9", 9, rng=RNG)
    scalar = share_scalar(value_secret, 1, 9, rng=RNG)
    products = []
    for frag, qfrag, vshare in zip(data, query, scalar.shares):
        m = string_match(frag, qfrag)
        assert m.degree == 6
        prod = share_mul(m, vshare)
        assert prod.degree == 7
        products.append(prod)
    assert reconstruct_shares(products[:8], 7) == value_secret
    assert len(products[:8]) == 2 * 3 + 2


# -- share arithmetic -----------------------------------------------------------------


def test_share_mul_reconstructs_product():
    for _ in range(20):
        v = int(RNG.integers(0, 1 << 40))
        ones = share_scalar(1, 1, 9, rng=RNG)
        vals = share_scalar(v, 1, 9, rng=RNG)
        prods = [share_mul(a, b) for a, b in zip(ones.shares, vals.shares)]
        assert prods[0].degree == 2
        assert reconstruct_shares(prods, 2) == v
    zeros = share_scalar(0, 1, 9, rng=RNG)
    vals = share_scalar(12345, 1, 9, rng=RNG)
    prods = [share_mul(a, b) for a, b in zip(zeros.shares, vals.shares)]
    assert reconstruct_shares(prods, 2) == 0


def test_share_add_sums_bits():
    bits = [int(RNG.integers(0, 2)) for _ in range(25)]
    shared = [share_scalar(b, 1, 9, rng=RNG) for b in bits]
    acc = list(shared[0].shares)
    for s in shared[1:]:
        acc = [share_add(a, b) for a, b in zip(acc, s.shares)]
    assert acc[0].degree == 1
    assert reconstruct_shares(acc, 1) == sum(bits)


def test_cross_server_arithmetic_rejected():
    a = share_scalar(1, 1, 3, rng=RNG).shares
    with pytest.raises(CrossServerError):
        share_mul(a[0], a[1])
    with pytest.raises(CrossServerError):
        share_add(a[0], a[2])


def test_interpolate_duplicate_points_rejected():
    with pytest.raises(InterpolationError):
        interpolate([(1, 2), (1, 3)])


def test_reconstruct_too_few_shares():
    shared = share_scalar(9, 2, 9, rng=RNG)
    with pytest.raises(ThresholdError):
        reconstruct_shares(list(shared.shares[:2]), 2)


# -- wire encoding ----------------------------------------------------------------------


def test_share_wire_round_trip():
    share = Share(7, 123456789012345, 3)
    assert decode_share(encode_share(share)) == share
    vec = [Share(1, 5, 1), Share(2, 6, 1)]
    assert decode_share_vector(encode_share_vector(vec)) == vec
    assert len(encode_share_vector(vec)) == share_vector_wire_bytes(2)


def test_fragment_wire_round_trip():
    frag = make_sss("4E", 3, rng=RNG)[1]
    blob = encode_fragment(frag)
    assert len(blob) == fragment_wire_bytes(2)
    back = decode_fragment(blob)
    assert back.server_index == frag.server_index
    assert np.array_equal(back.bits, frag.bits)
