"""Canonical byte encoding, the one serialization used for signing, storage
and the wire.

Value domain: maps with string keys, strings, integers, booleans and lists.
Exactly one byte string encodes each value: map keys sorted by UTF-8 byte
order, no whitespace, integers in minimal base-10 form, strings as UTF-8
with the minimal escape set (backslash, double quote, and \\u00xx for
control characters). Floats and None are rejected outright; signatures and
digests travel as hex strings.

``canonical_decode`` accepts only bytes that ``canonical_encode`` could have
produced: input that parses but re-encodes differently is rejected as
NonCanonicalInput, so a decoded value is always safe to byte-compare or
re-sign.
"""

from __future__ import annotations

from typing import Union

from .errors import MalformedInput, NonCanonicalInput, UnencodableValue

Value = Union[dict, list, str, int, bool]

# Nesting bound keeps encode/decode symmetric and fuzz-safe; protocol
# structures are at most a handful of levels deep.
MAX_DEPTH = 64

_WS = b" \t\n\r"


def canonical_encode(value: Value) -> bytes:
    out = bytearray()
    _encode(value, out, 0)
    return bytes(out)


def _encode(value: Value, out: bytearray, depth: int) -> None:
    if depth > MAX_DEPTH:
        raise UnencodableValue("nesting deeper than %d levels" % MAX_DEPTH)
    if value is True:
        out += b"true"
    elif value is False:
        out += b"false"
    elif isinstance(value, bool):  # pragma: no cover - bool subclasses
        raise UnencodableValue("unsupported bool subtype")
    elif isinstance(value, int):
        out += b"%d" % value
    elif isinstance(value, str):
        _encode_str(value, out)
    elif isinstance(value, list):
        out += b"["
        for i, item in enumerate(value):
            if i:
                out += b","
            _encode(item, out, depth + 1)
        out += b"]"
    elif isinstance(value, dict):
        pairs = []
        for key in value:
            if not isinstance(key, str):
                raise UnencodableValue(
                    "map keys must be strings, got %s" % type(key).__name__
                )
            pairs.append((key.encode("utf-8", errors="strict"), key))
        pairs.sort(key=lambda kv: kv[0])
        out += b"{"
        for i, (_, key) in enumerate(pairs):
            if i:
                out += b","
            _encode_str(key, out)
            out += b":"
            _encode(value[key], out, depth + 1)
        out += b"}"
    else:
        raise UnencodableValue("cannot encode %s" % type(value).__name__)


def _encode_str(s: str, out: bytearray) -> None:
    out += b'"'
    for ch in s:
        code = ord(ch)
        if ch == '"':
            out += b'\\"'
        elif ch == "\\":
            out += b"\\\\"
        elif code < 0x20:
            out += b"\\u%04x" % code
        else:
            try:
                out += ch.encode("utf-8")
            except UnicodeEncodeError:
                raise UnencodableValue("unencodable code point %#x" % code)
    out += b'"'


def canonical_decode(data: bytes) -> Value:
    if not isinstance(data, (bytes, bytearray, memoryview)):
        raise MalformedInput("expected bytes")
    raw = bytes(data)
    parser = _Parser(raw)
    value = parser.parse_document()
    if canonical_encode(value) != raw:
        raise NonCanonicalInput("input is not in canonical form")
    return value


class _Parser:
    """Recursive-descent parser for the JSON subset above.

    Deliberately lenient about whitespace, key order, escape shorthand and
    leading zeros: those inputs parse fine and are then rejected by the
    re-encode comparison, which is what distinguishes MalformedInput from
    NonCanonicalInput.
    """

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def parse_document(self) -> Value:
        self._skip_ws()
        value = self._parse_value(0)
        self._skip_ws()
        if self.pos != len(self.data):
            raise MalformedInput("trailing bytes after value")
        return value

    def _skip_ws(self) -> None:
        while self.pos < len(self.data) and self.data[self.pos] in _WS:
            self.pos += 1

    def _peek(self) -> int:
        if self.pos >= len(self.data):
            raise MalformedInput("unexpected end of input")
        return self.data[self.pos]

    def _expect(self, byte: bytes) -> None:
        if self.pos >= len(self.data) or self.data[self.pos : self.pos + 1] != byte:
            raise MalformedInput("expected %r at offset %d" % (byte, self.pos))
        self.pos += 1

    def _parse_value(self, depth: int) -> Value:
        if depth > MAX_DEPTH:
            raise MalformedInput("nesting deeper than %d levels" % MAX_DEPTH)
        b = self._peek()
        if b == ord("{"):
            return self._parse_map(depth)
        if b == ord("["):
            return self._parse_list(depth)
        if b == ord('"'):
            return self._parse_string()
        if b == ord("t"):
            self._expect_literal(b"true")
            return True
        if b == ord("f"):
            self._expect_literal(b"false")
            return False
        if b == ord("-") or ord("0") <= b <= ord("9"):
            return self._parse_int()
        raise MalformedInput("unexpected byte %#x at offset %d" % (b, self.pos))

    def _expect_literal(self, literal: bytes) -> None:
        end = self.pos + len(literal)
        if self.data[self.pos : end] != literal:
            raise MalformedInput("bad literal at offset %d" % self.pos)
        self.pos = end

    def _parse_int(self) -> int:
        start = self.pos
        if self._peek() == ord("-"):
            self.pos += 1
        digits = 0
        while self.pos < len(self.data) and ord("0") <= self.data[self.pos] <= ord("9"):
            self.pos += 1
            digits += 1
        if digits == 0:
            raise MalformedInput("bare '-' at offset %d" % start)
        if self.pos < len(self.data) and self.data[self.pos] in b".eE":
            raise MalformedInput("fractional numbers are not in the value domain")
        return int(self.data[start : self.pos])

    def _parse_list(self, depth: int) -> list:
        self._expect(b"[")
        items: list = []
        self._skip_ws()
        if self.pos < len(self.data) and self.data[self.pos] == ord("]"):
            self.pos += 1
            return items
        while True:
            self._skip_ws()
            items.append(self._parse_value(depth + 1))
            self._skip_ws()
            b = self._peek()
            if b == ord(","):
                self.pos += 1
            elif b == ord("]"):
                self.pos += 1
                return items
            else:
                raise MalformedInput("expected ',' or ']' at offset %d" % self.pos)

    def _parse_map(self, depth: int) -> dict:
        self._expect(b"{")
        result: dict = {}
        self._skip_ws()
        if self.pos < len(self.data) and self.data[self.pos] == ord("}"):
            self.pos += 1
            return result
        while True:
            self._skip_ws()
            if self._peek() != ord('"'):
                raise MalformedInput("map key must be a string")
            key = self._parse_string()
            self._skip_ws()
            self._expect(b":")
            self._skip_ws()
            result[key] = self._parse_value(depth + 1)
            self._skip_ws()
            b = self._peek()
            if b == ord(","):
                self.pos += 1
            elif b == ord("}"):
                self.pos += 1
                return result
            else:
                raise MalformedInput("expected ',' or '}' at offset %d" % self.pos)

    def _parse_string(self) -> str:
        self._expect(b'"')
        buf = bytearray()
        pending_high: int | None = None

        def flush_surrogate() -> None:
            nonlocal pending_high
            if pending_high is not None:
                raise MalformedInput("lone high surrogate in string escape")

        while True:
            if self.pos >= len(self.data):
                raise MalformedInput("unterminated string")
            b = self.data[self.pos]
            if b == ord('"'):
                flush_surrogate()
                self.pos += 1
                try:
                    return buf.decode("utf-8")
                except UnicodeDecodeError:
                    raise MalformedInput("invalid UTF-8 in string")
            if b == ord("\\"):
                self.pos += 1
                esc = self._peek()
                self.pos += 1
                if esc == ord("u"):
                    code = self._parse_hex4()
                    if 0xD800 <= code <= 0xDBFF:
                        flush_surrogate()
                        pending_high = code
                        continue
                    if 0xDC00 <= code <= 0xDFFF:
                        if pending_high is None:
                            raise MalformedInput("lone low surrogate")
                        combined = 0x10000 + ((pending_high - 0xD800) << 10) + (
                            code - 0xDC00
                        )
                        pending_high = None
                        buf += chr(combined).encode("utf-8")
                        continue
                    flush_surrogate()
                    buf += chr(code).encode("utf-8")
                    continue
                flush_surrogate()
                simple = {
                    ord('"'): b'"',
                    ord("\\"): b"\\",
                    ord("/"): b"/",
                    ord("b"): b"\b",
                    ord("f"): b"\f",
                    ord("n"): b"\n",
                    ord("r"): b"\r",
                    ord("t"): b"\t",
                }.get(esc)
                if simple is None:
                    raise MalformedInput("bad escape at offset %d" % (self.pos - 1))
                buf += simple
                continue
            if b < 0x20:
                raise MalformedInput("raw control byte in string")
            flush_surrogate()
            buf.append(b)
            self.pos += 1

    def _parse_hex4(self) -> int:
        chunk = self.data[self.pos : self.pos + 4]
        if len(chunk) != 4:
            raise MalformedInput("truncated \\u escape")
        try:
            code = int(chunk, 16)
        except ValueError:
            raise MalformedInput("bad \\u escape")
        self.pos += 4
        return code
