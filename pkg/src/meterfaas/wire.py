"""Canonical byte encoding for every signed, hashed, or transported structure.

All protocol structures in this repo serialize through the two helpers below.
The rules are normative (signatures and hashes are computed over these bytes):

  * unsigned integers are big-endian, fixed width (u8 / u32 / u64);
  * fixed-size byte fields are written raw, length checked;
  * variable-size byte fields carry a 4-byte big-endian length prefix;
  * optional fields carry a 1-byte presence flag (0 or 1) and, when present,
    the field encoded as above;
  * fields appear in declaration order, no padding, no framing;
  * decoding must consume the input exactly; anything else is a FormatError.

The per-message field orders live with the dataclasses that own them and are
summarized in README.md ("Wire formats").
"""

from __future__ import annotations


class FormatError(ValueError):
    """Raised when bytes do not parse as the expected canonical structure."""


class Writer:
    def __init__(self) -> None:
        self._parts: list[bytes] = []

    def u8(self, value: int) -> "Writer":
        if not 0 <= value < 1 << 8:
            raise FormatError(f"u8 out of range: {value}")
        self._parts.append(value.to_bytes(1, "big"))
        return self

    def u32(self, value: int) -> "Writer":
        if not 0 <= value < 1 << 32:
            raise FormatError(f"u32 out of range: {value}")
        self._parts.append(value.to_bytes(4, "big"))
        return self

    def u64(self, value: int) -> "Writer":
        if not 0 <= value < 1 << 64:
            raise FormatError(f"u64 out of range: {value}")
        self._parts.append(value.to_bytes(8, "big"))
        return self

    def fixed(self, data: bytes, size: int) -> "Writer":
        if len(data) != size:
            raise FormatError(f"fixed field expects {size} bytes, got {len(data)}")
        self._parts.append(bytes(data))
        return self

    def var(self, data: bytes) -> "Writer":
        self.u32(len(data))
        self._parts.append(bytes(data))
        return self

    def opt_fixed(self, data: bytes | None, size: int) -> "Writer":
        if data is None:
            return self.u8(0)
        self.u8(1)
        return self.fixed(data, size)

    def opt_var(self, data: bytes | None) -> "Writer":
        if data is None:
            return self.u8(0)
        self.u8(1)
        return self.var(data)

    def done(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    def __init__(self, data: bytes) -> None:
        self._data = bytes(data)
        self._pos = 0

    def _take(self, n: int) -> bytes:
        if self._pos + n > len(self._data):
            raise FormatError("truncated input")
        out = self._data[self._pos : self._pos + n]
        self._pos += n
        return out

    def u8(self) -> int:
        return self._take(1)[0]

    def u32(self) -> int:
        return int.from_bytes(self._take(4), "big")

    def u64(self) -> int:
        return int.from_bytes(self._take(8), "big")

    def fixed(self, size: int) -> bytes:
        return self._take(size)

    def var(self) -> bytes:
        return self._take(self.u32())

    def opt_fixed(self, size: int) -> bytes | None:
        flag = self.u8()
        if flag == 0:
            return None
        if flag != 1:
            raise FormatError(f"bad presence flag {flag}")
        return self.fixed(size)

    def opt_var(self) -> bytes | None:
        flag = self.u8()
        if flag == 0:
            return None
        if flag != 1:
            raise FormatError(f"bad presence flag {flag}")
        return self.var()

    def finish(self) -> None:
        """Assert the input was consumed exactly."""
        if self._pos != len(self._data):
            raise FormatError(f"{len(self._data) - self._pos} trailing bytes")
