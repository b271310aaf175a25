"""Deterministic, invertible attribute ciphers.

Each protected column is encrypted with AES-SIV over a canonical tuple
encoding padded to a fixed per-attribute width: equal plaintext tuples give
byte-identical ciphertexts (so equality search is byte equality), and every
ciphertext in a column has the same length (so size leaks nothing).
Randomized behaviour comes from putting a fresh nonce inside the tuple, not
from the cipher.
"""

from __future__ import annotations

import hashlib
import struct

from cryptography.hazmat.primitives.ciphers.aead import AESSIV

from .errors import EncodingError

_TAG_INT = 0x49    # 'I'
_TAG_STR = 0x53    # 'S'
_TAG_BYTES = 0x42  # 'B'

SIV_OVERHEAD = 16


def encode_fields(fields: tuple) -> bytes:
    """Self-delimiting encoding of a tuple of ints / strings / bytes."""
    if len(fields) > 255:
        raise EncodingError("too many fields")
    out = [struct.pack("<B", len(fields))]
    for f in fields:
        if isinstance(f, bool):
            raise EncodingError("bool is not an encodable field type")
        if isinstance(f, int):
            if not (0 <= f < 1 << 64):
                raise EncodingError(f"integer field {f} outside u64 range")
            out.append(struct.pack("<BQ", _TAG_INT, f))
        elif isinstance(f, str):
            raw = f.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise EncodingError("string field too long")
            out.append(struct.pack("<BH", _TAG_STR, len(raw)) + raw)
        elif isinstance(f, bytes):
            if len(f) > 0xFFFF:
                raise EncodingError("bytes field too long")
            out.append(struct.pack("<BH", _TAG_BYTES, len(f)) + f)
        else:
            raise EncodingError(f"unsupported field type {type(f).__name__}")
    return b"".join(out)


def decode_fields(buf: bytes) -> tuple:
    """Inverse of encode_fields; trailing zero padding is ignored."""
    (count,) = struct.unpack_from("<B", buf, 0)
    off = 1
    fields = []
    for _ in range(count):
        tag = buf[off]
        off += 1
        if tag == _TAG_INT:
            (v,) = struct.unpack_from("<Q", buf, off)
            off += 8
            fields.append(v)
        elif tag in (_TAG_STR, _TAG_BYTES):
            (n,) = struct.unpack_from("<H", buf, off)
            off += 2
            raw = buf[off : off + n]
            off += n
            fields.append(raw.decode("utf-8") if tag == _TAG_STR else raw)
        else:
            raise EncodingError(f"bad field tag 0x{tag:02x}")
    return tuple(fields)


def encoded_width(fields: tuple) -> int:
    return len(encode_fields(fields))


class DeterministicCipher:
    """AES-SIV over fixed-width canonical tuples.

    `width` is the padded plaintext size; every ciphertext from this
    instance is exactly width + 16 bytes.
    """

    def __init__(self, key_material: bytes, width: int):
        # SIV wants a 32/48/64-byte key; hash arbitrary-length material down
        self._siv = AESSIV(hashlib.sha256(key_material).digest())
        self.width = width
        self.ciphertext_len = width + SIV_OVERHEAD

    def encrypt(self, fields: tuple) -> bytes:
        buf = encode_fields(fields)
        if len(buf) > self.width:
            raise EncodingError(
                f"encoded tuple is {len(buf)} bytes, exceeds fixed width {self.width}"
            )
        return self._siv.encrypt(buf.ljust(self.width, b"\x00"), None)

    def decrypt(self, ciphertext: bytes) -> tuple:
        return decode_fields(self._siv.decrypt(ciphertext, None))
