"""Prime-field arithmetic, scalar and vectorized.

The default modulus is the Mersenne prime M61 = 2^61 - 1: single values fit
in 64-bit words and products reduce with shifts instead of division.  Scalar
helpers work on Python ints (arbitrary precision makes them trivially
correct); the vectorized helpers keep everything in numpy uint64, splitting
61x61-bit products into 32-bit halves so no intermediate ever overflows.
"""

from __future__ import annotations

import numpy as np

from .errors import InterpolationError

M61 = (1 << 61) - 1  # 2305843009213693951

_MASK32 = np.uint64(0xFFFFFFFF)
_MASK29 = np.uint64(0x1FFFFFFF)
_MASK61 = np.uint64(M61)
_U0 = np.uint64(0)
_U8 = np.uint64(8)
_U29 = np.uint64(29)
_U32 = np.uint64(32)
_U61 = np.uint64(61)

# -- scalar ops (Python int) -------------------------------------------------


def add(a: int, b: int, p: int = M61) -> int:
    return (a + b) % p


def sub(a: int, b: int, p: int = M61) -> int:
    return (a - b) % p


def mul(a: int, b: int, p: int = M61) -> int:
    return (a * b) % p


def inv(a: int, p: int = M61) -> int:
    """Multiplicative inverse via Fermat: a^(p-2) mod p."""
    if a % p == 0:
        raise ZeroDivisionError("no inverse of 0 in GF(p)")
    return pow(a, p - 2, p)


def poly_eval(coeffs: list[int], x: int, p: int = M61) -> int:
    """Horner evaluation; coeffs ordered constant term first."""
    acc = 0
    for c in reversed(coeffs):
        acc = (acc * x + c) % p
    return acc


def is_probable_prime(n: int) -> bool:
    """Deterministic Miller-Rabin for n < 3.3e24 (covers all 64-bit moduli)."""
    if n < 2:
        return False
    for q in (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37):
        if n == q:
            return True
        if n % q == 0:
            return False
    d, s = n - 1, 0
    while d % 2 == 0:
        d //= 2
        s += 1
    for a in (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37):
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(s - 1):
            x = (x * x) % n
            if x == n - 1:
                break
        else:
            return False
    return True


# -- Lagrange interpolation ---------------------------------------------------


def lagrange_weights_at_zero(xs: list[int], p: int = M61) -> list[int]:
    """Weights w_i = prod_{j!=i} (0 - x_j) / (x_i - x_j) mod p."""
    if len(set(x % p for x in xs)) != len(xs):
        raise InterpolationError(f"duplicate x coordinates in {xs}")
    weights = []
    for i, xi in enumerate(xs):
        num, den = 1, 1
        for j, xj in enumerate(xs):
            if j == i:
                continue
            num = (num * (-xj)) % p
            den = (den * (xi - xj)) % p
        weights.append((num * inv(den, p)) % p)
    return weights


def interpolate_at_zero(points: list[tuple[int, int]], p: int = M61) -> int:
    """Evaluate the interpolating polynomial of `points` at x = 0."""
    xs = [x for x, _ in points]
    ws = lagrange_weights_at_zero(xs, p)
    acc = 0
    for (_, y), w in zip(points, ws):
        acc = (acc + y * w) % p
    return acc


# -- vectorized ops (numpy uint64) --------------------------------------------


def mul_vec(a: np.ndarray, b: np.ndarray, p: int = M61) -> np.ndarray:
    """Elementwise (a * b) mod p on uint64 arrays with values < p."""
    a = np.asarray(a, dtype=np.uint64)
    b = np.asarray(b, dtype=np.uint64)
    if p == M61:
        return _mul_m61(a, b)
    if p <= 0xFFFFFFFF:
        # products of 32-bit values fit a uint64 exactly
        return (a * b) % np.uint64(p)
    # rare path: arbitrary large primes via Python ints
    aa, bb = np.broadcast_arrays(a, b)
    flat = (int(x) * int(y) % p for x, y in zip(aa.ravel().tolist(), bb.ravel().tolist()))
    return np.fromiter(flat, dtype=np.uint64, count=aa.size).reshape(aa.shape)


def _mul_m61(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # split into 32-bit halves: a*b = a1b1*2^64 + (a1b0+a0b1)*2^32 + a0b0,
    # then fold with 2^61 = 1 (mod M61), 2^64 = 8 (mod M61)
    a0 = a & _MASK32
    a1 = a >> _U32
    b0 = b & _MASK32
    b1 = b >> _U32
    hi = a1 * b1                      # < 2^58
    mid = a1 * b0 + a0 * b1           # < 2^62
    lo = a0 * b0                      # < 2^64, exact in uint64
    acc = (
        hi * _U8
        + ((mid & _MASK29) << _U32)   # mid*2^32 = (mid>>29)*2^61 + (mid&m29)*2^32
        + (mid >> _U29)
        + (lo & _MASK61)
        + (lo >> _U61)
    )                                 # < 3*2^61, no overflow
    r = (acc >> _U61) + (acc & _MASK61)
    return r - np.where(r >= _MASK61, _MASK61, _U0)


def add_vec(a: np.ndarray, b: np.ndarray, p: int = M61) -> np.ndarray:
    a = np.asarray(a, dtype=np.uint64)
    b = np.asarray(b, dtype=np.uint64)
    s = a + b  # both < p < 2^61, no overflow
    pp = np.uint64(p)
    return s - np.where(s >= pp, pp, _U0)


def sum_vec(a: np.ndarray, p: int = M61, axis: int = -1) -> np.ndarray:
    """Reduce-sum mod p along `axis` without intermediate overflow.

    Pairwise folding keeps every partial sum < 2p < 2^62.
    """
    a = np.asarray(a, dtype=np.uint64)
    a = np.moveaxis(a, axis, -1)
    pp = np.uint64(p)
    while a.shape[-1] > 1:
        n = a.shape[-1]
        m = n // 2
        s = a[..., :m] + a[..., m : 2 * m]
        s = s - np.where(s >= pp, pp, _U0)
        if n % 2:
            s0 = s[..., :1] + a[..., -1:]
            s = np.concatenate([s0 - np.where(s0 >= pp, pp, _U0), s[..., 1:]], axis=-1)
        a = s
    return a[..., 0]


def prod_vec(a: np.ndarray, p: int = M61, axis: int = -1) -> np.ndarray:
    """Reduce-product mod p along `axis` (small axes; loops positions)."""
    a = np.asarray(a, dtype=np.uint64)
    a = np.moveaxis(a, axis, -1)
    out = a[..., 0]
    for i in range(1, a.shape[-1]):
        out = mul_vec(out, a[..., i], p)
    return out


def interpolate_rows_at_zero(xs: list[int], ys: np.ndarray, p: int = M61) -> np.ndarray:
    """Interpolate many points-at-once: ys has shape (len(xs), ...).

    Returns the x=0 evaluation for each trailing position, i.e. reconstructs
    a whole response vector in one shot.
    """
    ws = lagrange_weights_at_zero(xs, p)
    ys = np.asarray(ys, dtype=np.uint64)
    acc = np.zeros(ys.shape[1:], dtype=np.uint64)
    for w, row in zip(ws, ys):
        acc = add_vec(acc, mul_vec(row, np.uint64(w), p), p)
    return acc
