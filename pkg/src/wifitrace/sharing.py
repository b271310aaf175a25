"""Shamir sharing and oblivious string matching over a prime field.

A value is made *searchable* by writing each symbol as a one-hot vector over
the alphabet and sharing every bit with its own fresh degree-1 polynomial.
A server holding such fragments for a stored string and a queried string can
compute, per position, the dot product of the two one-hot share vectors (a
degree-2 share of 1 iff the symbols agree) and multiply across positions,
yielding a share of the equality indicator without learning either string.

Degrees compose as: dot product of two degree-1 vectors -> 2; product over
l positions -> 2l; times a degree-1 value share -> 2l+1.  Reconstruction
needs degree+1 evaluation points, hence the 2l+2 share bound.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    CrossServerError,
    EncodingError,
    ShapeError,
    ThresholdError,
)
from .field import M61, interpolate_at_zero, mul_vec, poly_eval, prod_vec, sum_vec
from .model import HEX_ALPHABET


@dataclass(frozen=True)
class Share:
    """One polynomial evaluation point: x = server_index, y = value."""

    server_index: int
    value: int
    degree: int = 1


@dataclass(frozen=True)
class SharedScalar:
    """All N shares of one hidden value; any degree+1 of them reconstruct it."""

    shares: tuple[Share, ...]
    degree: int

    def reconstruct(self, p: int = M61, count: int | None = None) -> int:
        need = self.degree + 1 if count is None else count
        if need > len(self.shares):
            raise ThresholdError(
                f"need {need} shares to reconstruct degree {self.degree}, have {len(self.shares)}"
            )
        return interpolate([(s.server_index, s.value) for s in self.shares[:need]], p)


def share_polynomial(coeffs: list[int], n: int, p: int = M61) -> list[int]:
    """Evaluate the polynomial (constant term first) at x = 1..n."""
    return [poly_eval(coeffs, x, p) for x in range(1, n + 1)]


def share_scalar(secret: int, degree: int, n: int, p: int = M61,
                 rng: np.random.Generator | None = None) -> SharedScalar:
    """Split `secret` into n Shamir shares under a fresh degree-`degree` polynomial."""
    if degree >= n:
        raise ThresholdError(f"degree {degree} needs more than {n} shares to reconstruct")
    if rng is None:
        rng = np.random.default_rng()
    coeffs = [secret % p] + [int(c) for c in rng.integers(0, p, size=degree, dtype=np.uint64)]
    values = share_polynomial(coeffs, n, p)
    return SharedScalar(
        shares=tuple(Share(i + 1, v, degree) for i, v in enumerate(values)),
        degree=degree,
    )


def share_add(a: Share, b: Share, p: int = M61) -> Share:
    if a.server_index != b.server_index:
        raise CrossServerError(
            f"cannot add shares held by servers {a.server_index} and {b.server_index}"
        )
    return Share(a.server_index, (a.value + b.value) % p, max(a.degree, b.degree))


def share_mul(a: Share, b: Share, p: int = M61) -> Share:
    if a.server_index != b.server_index:
        raise CrossServerError(
            f"cannot multiply shares held by servers {a.server_index} and {b.server_index}"
        )
    return Share(a.server_index, (a.value * b.value) % p, a.degree + b.degree)


def interpolate(points: list[tuple[int, int]], p: int = M61) -> int:
    """Lagrange evaluation at x = 0; duplicate x coordinates are rejected."""
    return interpolate_at_zero(points, p)


# -- searchable (one-hot) form -------------------------------------------------


def encode_unary(symbol: int, alphabet_size: int = len(HEX_ALPHABET)) -> tuple[int, ...]:
    """One-hot vector with a single 1 at the symbol's alphabet index."""
    if not (0 <= symbol < alphabet_size):
        raise EncodingError(f"symbol index {symbol} outside alphabet of size {alphabet_size}")
    return tuple(1 if i == symbol else 0 for i in range(alphabet_size))


def symbol_indexes(value: str, alphabet: str) -> list[int]:
    try:
        return [alphabet.index(ch) for ch in value]
    except ValueError:
        raise EncodingError(f"{value!r} contains symbols outside alphabet {alphabet!r}") from None


@dataclass(frozen=True)
class SssFragment:
    """One server's slice of a searchable shared string.

    `bits` has shape (symbol_count, alphabet_size); every entry is this
    server's share of one one-hot bit, all under degree-1 polynomials.
    Layout is position-major, matching the wire encoding.
    """

    server_index: int
    bits: np.ndarray  # uint64, shape (l, m)
    degree: int = 1

    @property
    def symbol_count(self) -> int:
        return self.bits.shape[0]

    @property
    def alphabet_size(self) -> int:
        return self.bits.shape[1]


def make_sss(value: str, n: int, p: int = M61,
             rng: np.random.Generator | None = None,
             alphabet: str = HEX_ALPHABET) -> list[SssFragment]:
    """Searchable secret shares of `value`, one fragment per server.

    Every one-hot bit gets an independent fresh polynomial, so two sharings
    of the same string are unrelated share-for-share.
    """
    if rng is None:
        rng = np.random.default_rng()
    idx = symbol_indexes(value, alphabet)
    l, m = len(idx), len(alphabet)
    secrets = np.zeros((l, m), dtype=np.uint64)
    secrets[np.arange(l), idx] = 1
    coeffs = rng.integers(0, p, size=(l, m), dtype=np.uint64)
    return _fragments_from_arrays(secrets, coeffs, n, p)


def make_sss_with_polynomials(bit_coeffs: list[list[list[int]]], n: int,
                              p: int = M61) -> list[SssFragment]:
    """Fragments from explicit per-bit polynomials (constant term = the bit).

    `bit_coeffs[pos][sym]` is the coefficient list for that bit.  Exists so
    worked examples with pinned polynomials can be reproduced exactly.
    """
    l = len(bit_coeffs)
    m = len(bit_coeffs[0])
    values = np.zeros((n, l, m), dtype=np.uint64)
    for pos in range(l):
        if len(bit_coeffs[pos]) != m:
            raise ShapeError("ragged coefficient matrix")
        for sym in range(m):
            for i, v in enumerate(share_polynomial(bit_coeffs[pos][sym], n, p)):
                values[i, pos, sym] = v
    return [SssFragment(i + 1, values[i]) for i in range(n)]


def _fragments_from_arrays(secrets: np.ndarray, coeffs: np.ndarray, n: int,
                           p: int) -> list[SssFragment]:
    # degree-1 evaluation: share_x = secret + coeff * x
    fragments = []
    for x in range(1, n + 1):
        vals = (secrets + mul_vec(coeffs, np.uint64(x), p)) % np.uint64(p)
        fragments.append(SssFragment(x, vals))
    return fragments


def string_match(data: SssFragment, query: SssFragment, p: int = M61) -> Share:
    """This server's share of the indicator [stored string == queried string].

    Per position: bit-wise multiply the two one-hot share vectors and sum
    (degree-2 share of the per-symbol match); across positions: multiply.
    """
    if data.server_index != query.server_index:
        raise CrossServerError(
            f"fragments from servers {data.server_index} and {query.server_index}"
        )
    if data.bits.shape != query.bits.shape:
        raise ShapeError(f"fragment shapes differ: {data.bits.shape} vs {query.bits.shape}")
    per_position = sum_vec(mul_vec(data.bits, query.bits, p), p, axis=-1)
    value = prod_vec(per_position, p, axis=-1)
    return Share(data.server_index, int(value), 2 * data.symbol_count)


def reconstruct_shares(shares: list[Share], degree: int, p: int = M61) -> int:
    """Reconstruct from per-server Shares produced by one computation."""
    need = degree + 1
    if len(shares) < need:
        raise ThresholdError(f"need {need} shares for degree {degree}, have {len(shares)}")
    return interpolate([(s.server_index, s.value) for s in shares[:need]], p)


# -- wire encoding --------------------------------------------------------------
#
# share:    server_index u8 | degree u8 | value u64le
# vector:   count u32le | shares...
# fragment: server_index u8 | degree u8 | symbols u8 | alphabet u8
#           | values u64le, position-major then symbol index

SHARE_WIRE_BYTES = 10
_FRAG_HEADER = struct.Struct("<BBBB")
_VEC_HEADER = struct.Struct("<I")


def encode_share(share: Share) -> bytes:
    return struct.pack("<BBQ", share.server_index, share.degree, share.value)


def decode_share(buf: bytes) -> Share:
    server_index, degree, value = struct.unpack("<BBQ", buf)
    return Share(server_index, value, degree)


def encode_share_vector(shares: list[Share]) -> bytes:
    return _VEC_HEADER.pack(len(shares)) + b"".join(encode_share(s) for s in shares)


def decode_share_vector(buf: bytes) -> list[Share]:
    (count,) = _VEC_HEADER.unpack_from(buf, 0)
    out = []
    off = _VEC_HEADER.size
    for _ in range(count):
        out.append(decode_share(buf[off : off + SHARE_WIRE_BYTES]))
        off += SHARE_WIRE_BYTES
    return out


def share_vector_wire_bytes(count: int) -> int:
    return _VEC_HEADER.size + count * SHARE_WIRE_BYTES


def encode_fragment(frag: SssFragment) -> bytes:
    l, m = frag.bits.shape
    body = frag.bits.astype("<u8").tobytes()  # position-major
    return _FRAG_HEADER.pack(frag.server_index, frag.degree, l, m) + body


def decode_fragment(buf: bytes) -> SssFragment:
    server_index, degree, l, m = _FRAG_HEADER.unpack_from(buf, 0)
    bits = np.frombuffer(buf, dtype="<u8", offset=_FRAG_HEADER.size, count=l * m)
    return SssFragment(server_index, bits.reshape(l, m).astype(np.uint64), degree)


def fragment_wire_bytes(symbol_count: int, alphabet_size: int = len(HEX_ALPHABET)) -> int:
    return _FRAG_HEADER.size + symbol_count * alphabet_size * 8
