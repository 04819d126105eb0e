"""Integer arithmetic coding over adaptive-free frequency tables.

Classic 32-bit low/high arithmetic coder (Witten/Neal/Cleary lineage).  The
encoder and decoder walk the exact same frequency tables, so a bitstream is
decodable iff the decoder is constructed with the tables used at encode
time.  Frequencies are plain integers; cumulative totals must stay below
2^16 so that ``low``/``high`` arithmetic never overflows 64 bits.
"""

from __future__ import annotations

import io

from .errors import PayloadCorruptError

_STATE_BITS = 32
_FULL = (1 << _STATE_BITS) - 1
_HALF = 1 << (_STATE_BITS - 1)
_QUARTER = 1 << (_STATE_BITS - 2)

MAX_TOTAL = 1 << 16


class FrequencyTable:
    """Immutable symbol frequencies with cached cumulative sums."""

    def __init__(self, frequencies: list[int]):
        if not frequencies:
            raise ValueError("frequency table is empty")
        if any(f < 0 for f in frequencies):
            raise ValueError("negative frequency")
        self.frequencies = list(frequencies)
        self.cumulative = [0]
        for f in self.frequencies:
            self.cumulative.append(self.cumulative[-1] + f)
        self.total = self.cumulative[-1]
        if self.total <= 0:
            raise ValueError("total frequency must be positive")
        if self.total > MAX_TOTAL:
            raise ValueError(f"total frequency {self.total} exceeds {MAX_TOTAL}")

    def __len__(self) -> int:
        return len(self.frequencies)

    def range_of(self, symbol: int) -> tuple[int, int]:
        low, high = self.cumulative[symbol], self.cumulative[symbol + 1]
        if low == high:
            raise ValueError(f"symbol {symbol} has zero frequency")
        return low, high


class _BitWriter:
    def __init__(self):
        self._buf = io.BytesIO()
        self._acc = 0
        self._nbits = 0

    def write(self, bit: int) -> None:
        self._acc = (self._acc << 1) | bit
        self._nbits += 1
        if self._nbits == 8:
            self._buf.write(bytes([self._acc]))
            self._acc = 0
            self._nbits = 0

    def getvalue(self) -> bytes:
        if self._nbits:
            return self._buf.getvalue() + bytes([self._acc << (8 - self._nbits)])
        return self._buf.getvalue()


class _BitReader:
    """Bit reader that yields phantom zero bits past the end of data.

    The coder needs up to 32 bits beyond the last real bit to settle; any
    read beyond that margin means the stream was truncated.
    """

    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0
        self._phantom = 0

    def read(self) -> int:
        byte_idx = self._pos >> 3
        if byte_idx < len(self._data):
            bit = (self._data[byte_idx] >> (7 - (self._pos & 7))) & 1
            self._pos += 1
            return bit
        self._phantom += 1
        if self._phantom > _STATE_BITS:
            raise PayloadCorruptError(
                "arithmetic-coded stream is truncated", offset=len(self._data)
            )
        return 0


class ArithmeticEncoder:
    def __init__(self):
        self._low = 0
        self._high = _FULL
        self._pending = 0
        self._bits = _BitWriter()

    def encode(self, table: FrequencyTable, symbol: int) -> None:
        span = self._high - self._low + 1
        sym_low, sym_high = table.range_of(symbol)
        self._high = self._low + span * sym_high // table.total - 1
        self._low = self._low + span * sym_low // table.total
        while True:
            if self._high < _HALF:
                self._emit(0)
            elif self._low >= _HALF:
                self._emit(1)
                self._low -= _HALF
                self._high -= _HALF
            elif self._low >= _QUARTER and self._high < _HALF + _QUARTER:
                self._pending += 1
                self._low -= _QUARTER
                self._high -= _QUARTER
            else:
                break
            self._low <<= 1
            self._high = (self._high << 1) | 1

    def _emit(self, bit: int) -> None:
        self._bits.write(bit)
        for _ in range(self._pending):
            self._bits.write(bit ^ 1)
        self._pending = 0

    def finish(self) -> bytes:
        # one disambiguating bit puts the final interval inside [low, high)
        self._pending += 1
        self._emit(0 if self._low < _QUARTER else 1)
        return self._bits.getvalue()


class ArithmeticDecoder:
    def __init__(self, data: bytes):
        self._bits = _BitReader(data)
        self._low = 0
        self._high = _FULL
        self._code = 0
        for _ in range(_STATE_BITS):
            self._code = (self._code << 1) | self._bits.read()

    def decode(self, table: FrequencyTable) -> int:
        span = self._high - self._low + 1
        offset = ((self._code - self._low + 1) * table.total - 1) // span
        # binary search the cumulative table for the symbol containing offset
        lo, hi = 0, len(table) - 1
        while lo < hi:
            mid = (lo + hi) // 2
            if table.cumulative[mid + 1] <= offset:
                lo = mid + 1
            else:
                hi = mid
        symbol = lo
        sym_low, sym_high = table.range_of(symbol)
        self._high = self._low + span * sym_high // table.total - 1
        self._low = self._low + span * sym_low // table.total
        while True:
            if self._high < _HALF:
                pass
            elif self._low >= _HALF:
                self._low -= _HALF
                self._high -= _HALF
                self._code -= _HALF
            elif self._low >= _QUARTER and self._high < _HALF + _QUARTER:
                self._low -= _QUARTER
                self._high -= _QUARTER
                self._code -= _QUARTER
            else:
                break
            self._low <<= 1
            self._high = (self._high << 1) | 1
            self._code = (self._code << 1) | self._bits.read()
        return symbol


_BYTE_TABLE = FrequencyTable([1] * 256)


def encode_raw_u32(encoder: ArithmeticEncoder, value: int) -> None:
    """Escape hatch for out-of-table values: four uniform byte symbols."""
    for shift in (24, 16, 8, 0):
        encoder.encode(_BYTE_TABLE, (value >> shift) & 0xFF)


def decode_raw_u32(decoder: ArithmeticDecoder) -> int:
    value = 0
    for _ in range(4):
        value = (value << 8) | decoder.decode(_BYTE_TABLE)
    return value
