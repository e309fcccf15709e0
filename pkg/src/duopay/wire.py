"""Signed message envelopes: the newline-delimited wire format both
services speak.

Every message is one canonical-encoded map per line:
``{v, type, sender_id, nonce, ts, body, sig}`` where ``sig`` is the
sender's signature over the envelope minus the sig field. Replies echo the
request nonce so the caller can correlate, and the provider caches reply
bytes by nonce so a duplicated envelope gets a byte-identical answer.
"""

from __future__ import annotations

import secrets
from dataclasses import dataclass

from .canon import canonical_decode, canonical_encode
from .errors import BadEnvelope, DuopayError, MalformedInput
from .keys import KeyRegistry

ENVELOPE_VERSION = 1

# request types
ACTIVATE = "ACTIVATE"
CREDIT_REQUEST = "CREDIT_REQUEST"
CAPTURE = "CAPTURE"
BALANCE = "BALANCE"
SETTLE_DEMAND = "SETTLE_DEMAND"

# reply types
ACTIVATE_ACK = "ACTIVATE_ACK"
AUTH_DECISION = "AUTH_DECISION"
CAPTURE_CONFIRM = "CAPTURE_CONFIRM"
BALANCE_RESULT = "BALANCE_RESULT"
SETTLE_REPORT = "SETTLE_REPORT"
ERROR = "ERROR"

REQUEST_TYPES = {ACTIVATE, CREDIT_REQUEST, CAPTURE, BALANCE, SETTLE_DEMAND}
REPLY_TYPES = {ACTIVATE_ACK, AUTH_DECISION, CAPTURE_CONFIRM, BALANCE_RESULT, SETTLE_REPORT, ERROR}

#: request types whose successful handling mutates provider state
MUTATING_TYPES = {ACTIVATE, CREDIT_REQUEST, CAPTURE, SETTLE_DEMAND}


@dataclass(frozen=True)
class Envelope:
    type: str
    sender_id: str
    nonce: str
    timestamp: int
    body: dict
    sig: bytes

    def to_wire(self) -> dict:
        return {
            "v": ENVELOPE_VERSION,
            "type": self.type,
            "sender_id": self.sender_id,
            "nonce": self.nonce,
            "ts": self.timestamp,
            "body": self.body,
            "sig": self.sig.hex(),
        }


def fresh_nonce() -> str:
    return secrets.token_hex(16)


def _signable(type_: str, sender_id: str, nonce: str, ts: int, body: dict) -> bytes:
    return canonical_encode(
        {
            "v": ENVELOPE_VERSION,
            "type": type_,
            "sender_id": sender_id,
            "nonce": nonce,
            "ts": ts,
            "body": body,
        }
    )


def build_envelope(
    type_: str,
    body: dict,
    registry: KeyRegistry,
    *,
    nonce: str | None = None,
    timestamp: int = 0,
) -> bytes:
    """Sign and encode one envelope; the result is a single line, no newline."""
    nonce = nonce if nonce is not None else fresh_nonce()
    sig = registry.sign(_signable(type_, registry.own_id, nonce, timestamp, body))
    return canonical_encode(
        {
            "v": ENVELOPE_VERSION,
            "type": type_,
            "sender_id": registry.own_id,
            "nonce": nonce,
            "ts": timestamp,
            "body": body,
            "sig": sig.hex(),
        }
    )


def peek_nonce(data: bytes) -> str | None:
    """Best-effort nonce extraction, for correlating replies without a full
    authenticity check."""
    try:
        wire = canonical_decode(data)
    except DuopayError:
        return None
    if isinstance(wire, dict) and isinstance(wire.get("nonce"), str):
        return wire["nonce"]
    return None


def decode_envelope(data: bytes, registry: KeyRegistry) -> Envelope:
    """Decode and authenticate one envelope line.

    Raises BadEnvelope for anything that cannot be trusted: unparseable
    bytes, missing fields, an unregistered sender, or a bad signature.
    """
    try:
        wire = canonical_decode(data)
    except DuopayError as exc:
        raise BadEnvelope("undecodable envelope: %s" % exc)
    if not isinstance(wire, dict) or wire.get("v") != ENVELOPE_VERSION:
        raise BadEnvelope("unsupported envelope")
    try:
        type_ = wire["type"]
        sender_id = wire["sender_id"]
        nonce = wire["nonce"]
        ts = wire["ts"]
        body = wire["body"]
        sig_hex = wire["sig"]
        if not (
            isinstance(type_, str)
            and isinstance(sender_id, str)
            and isinstance(nonce, str)
            and isinstance(ts, int)
            and not isinstance(ts, bool)
            and isinstance(body, dict)
            and isinstance(sig_hex, str)
        ):
            raise BadEnvelope("mistyped envelope field")
        sig = bytes.fromhex(sig_hex)
    except (KeyError, ValueError):
        raise BadEnvelope("missing or malformed envelope field")
    if set(wire) != {"v", "type", "sender_id", "nonce", "ts", "body", "sig"}:
        raise BadEnvelope("unexpected envelope fields")
    if not registry.knows(sender_id):
        raise BadEnvelope("unknown sender %r" % sender_id)
    if not registry.verify(sender_id, _signable(type_, sender_id, nonce, ts, body), sig):
        raise BadEnvelope("envelope signature invalid")
    return Envelope(
        type=type_, sender_id=sender_id, nonce=nonce, timestamp=ts, body=body, sig=sig
    )


def error_body(exc: DuopayError) -> dict:
    return {"code": exc.code, "message": str(exc)}


def expect_reply(envelope: Envelope, *types: str) -> dict:
    """Narrow a reply envelope to the expected types, surfacing ERROR bodies
    as exceptions."""
    if envelope.type == ERROR:
        from .errors import from_wire_error

        code = envelope.body.get("code", "internal")
        message = envelope.body.get("message", "")
        raise from_wire_error(str(code), str(message))
    if envelope.type not in types:
        raise MalformedInput("unexpected reply type %r" % envelope.type)
    return envelope.body
