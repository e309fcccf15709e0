"""Transaction records, the wire messages around them, and the payment
lifecycle state machine.

A transaction record is the payment statement both parties sign: timestamp,
amount, merchant, item and a card reference, plus routing identifiers. The
signed payload always excludes the two signature fields and the state flag,
so a record's bytes stay verifiable when it moves from CAPTURED to SETTLED.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from enum import Enum

from .canon import canonical_decode, canonical_encode
from .errors import IllegalTransition, InvalidAmount, MalformedInput
from .keys import KeyRegistry
from .money import Money

FORMAT_VERSION = 1


class TxnState(str, Enum):
    AUTHORIZED = "AUTHORIZED"
    CAPTURED = "CAPTURED"
    VOIDED = "VOIDED"
    SETTLED = "SETTLED"
    DECLINED = "DECLINED"


class LifecycleEvent(str, Enum):
    AUTHORIZE_OK = "authorize_ok"
    AUTHORIZE_FAIL = "authorize_fail"
    CAPTURE = "capture"
    VOID = "void"
    EXPIRE = "expire"
    SETTLE = "settle"


class Verdict(str, Enum):
    AVAILABLE = "AVAILABLE"
    INSUFFICIENT_FUNDS = "INSUFFICIENT_FUNDS"
    AUTH_FAILURE = "AUTH_FAILURE"
    INVALID_REQUEST = "INVALID_REQUEST"


class RecordVerdict(str, Enum):
    VALID = "valid"
    INVALID_MERCHANT_SIG = "invalid_merchant_sig"
    INVALID_PROVIDER_SIG = "invalid_provider_sig"
    MISSING_SIG = "missing_sig"


_TRANSITIONS: dict[tuple[TxnState, LifecycleEvent], TxnState] = {
    (TxnState.AUTHORIZED, LifecycleEvent.CAPTURE): TxnState.CAPTURED,
    (TxnState.AUTHORIZED, LifecycleEvent.VOID): TxnState.VOIDED,
    (TxnState.AUTHORIZED, LifecycleEvent.EXPIRE): TxnState.VOIDED,
    (TxnState.CAPTURED, LifecycleEvent.SETTLE): TxnState.SETTLED,
}

_INITIAL: dict[LifecycleEvent, TxnState] = {
    LifecycleEvent.AUTHORIZE_OK: TxnState.AUTHORIZED,
    LifecycleEvent.AUTHORIZE_FAIL: TxnState.DECLINED,
}


def next_state(state: TxnState, event: LifecycleEvent) -> TxnState:
    """Advance the lifecycle; every pair outside the transition table is an error."""
    target = _TRANSITIONS.get((state, event))
    if target is None:
        raise IllegalTransition("%s cannot accept %s" % (state.value, event.value))
    return target


def initial_state(event: LifecycleEvent) -> TxnState:
    """Entry into the lifecycle: an authorization verdict creates the state."""
    target = _INITIAL.get(event)
    if target is None:
        raise IllegalTransition("%s does not create a transaction" % event.value)
    return target


def card_ref(card_number: str) -> str:
    """One-way digest of a card number; ledgers never hold the number itself."""
    return hashlib.sha256(b"duopay-card-ref:" + card_number.encode("utf-8")).hexdigest()


def make_payment_statement(
    timestamp: int,
    amount: Money,
    merchant_id: str,
    item_id: str,
    card_reference: str,
) -> bytes:
    """Canonical bytes of the statement both parties agree on.

    Embeds exactly the time, the amount, who is being paid, for what item,
    which card (by reference) and the format version.
    """
    if amount.amount_minor <= 0:
        raise InvalidAmount("payment amount must be positive")
    return canonical_encode(
        {
            "v": FORMAT_VERSION,
            "ts": timestamp,
            "amount": amount.amount_minor,
            "merchant_id": merchant_id,
            "item_id": item_id,
            "card_ref": card_reference,
        }
    )


def decode_payment_statement(data: bytes) -> dict:
    value = canonical_decode(data)
    if not isinstance(value, dict) or value.get("v") != FORMAT_VERSION:
        raise MalformedInput("not a payment statement")
    return value


def _require(wire: dict, field: str, kind: type) -> object:
    value = wire.get(field)
    if not isinstance(value, kind) or isinstance(value, bool):
        raise MalformedInput("field %r missing or mistyped" % field)
    return value


@dataclass(frozen=True)
class TransactionRecord:
    txn_id: str
    request_id: str
    timestamp: int
    amount: Money
    merchant_id: str
    item_id: str
    card_ref: str
    provider_id: str
    state: TxnState
    merchant_sig: bytes | None = None
    provider_sig: bytes | None = None

    _SIGNED_FIELDS = (
        "txn_id",
        "request_id",
        "ts",
        "amount",
        "merchant_id",
        "item_id",
        "card_ref",
        "provider_id",
    )

    def signed_payload(self) -> bytes:
        """Canonical bytes covered by both signatures: no sigs, no state flag."""
        return canonical_encode(
            {
                "v": FORMAT_VERSION,
                "txn_id": self.txn_id,
                "request_id": self.request_id,
                "ts": self.timestamp,
                "amount": self.amount.amount_minor,
                "merchant_id": self.merchant_id,
                "item_id": self.item_id,
                "card_ref": self.card_ref,
                "provider_id": self.provider_id,
            }
        )

    def statement(self) -> bytes:
        return make_payment_statement(
            self.timestamp, self.amount, self.merchant_id, self.item_id, self.card_ref
        )

    def to_wire(self) -> dict:
        wire = {
            "v": FORMAT_VERSION,
            "txn_id": self.txn_id,
            "request_id": self.request_id,
            "ts": self.timestamp,
            "amount": self.amount.amount_minor,
            "merchant_id": self.merchant_id,
            "item_id": self.item_id,
            "card_ref": self.card_ref,
            "provider_id": self.provider_id,
            "state": self.state.value,
        }
        if self.merchant_sig is not None:
            wire["merchant_sig"] = self.merchant_sig.hex()
        if self.provider_sig is not None:
            wire["provider_sig"] = self.provider_sig.hex()
        return wire

    @classmethod
    def from_wire(cls, wire: dict) -> "TransactionRecord":
        if not isinstance(wire, dict):
            raise MalformedInput("record must be a map")
        allowed = set(cls._SIGNED_FIELDS) | {"v", "state", "merchant_sig", "provider_sig"}
        extra = set(wire) - allowed
        if extra:
            raise MalformedInput("unexpected record fields: %s" % sorted(extra))
        if wire.get("v") != FORMAT_VERSION:
            raise MalformedInput("unsupported record version")
        amount = _require(wire, "amount", int)
        try:
            state = TxnState(_require(wire, "state", str))
        except ValueError:
            raise MalformedInput("unknown record state")
        sigs: dict[str, bytes | None] = {}
        for field in ("merchant_sig", "provider_sig"):
            raw = wire.get(field)
            if raw is None:
                sigs[field] = None
            elif isinstance(raw, str):
                try:
                    sigs[field] = bytes.fromhex(raw)
                except ValueError:
                    raise MalformedInput("bad %s hex" % field)
            else:
                raise MalformedInput("bad %s" % field)
        return cls(
            txn_id=str(_require(wire, "txn_id", str)),
            request_id=str(_require(wire, "request_id", str)),
            timestamp=int(_require(wire, "ts", int)),
            amount=Money(int(amount)),
            merchant_id=str(_require(wire, "merchant_id", str)),
            item_id=str(_require(wire, "item_id", str)),
            card_ref=str(_require(wire, "card_ref", str)),
            provider_id=str(_require(wire, "provider_id", str)),
            state=state,
            merchant_sig=sigs["merchant_sig"],
            provider_sig=sigs["provider_sig"],
        )

    def with_state(self, state: TxnState) -> "TransactionRecord":
        return replace(self, state=state)

    def with_signature(self, party: str, signature: bytes) -> "TransactionRecord":
        if party == "merchant":
            return replace(self, merchant_sig=signature)
        if party == "provider":
            return replace(self, provider_sig=signature)
        raise ValueError("party must be 'merchant' or 'provider'")


def sign_record(record: TransactionRecord, signer: KeyRegistry) -> bytes:
    """Signature over the record's canonical payload (signature fields excluded)."""
    return signer.sign(record.signed_payload())


def verify_record(record: TransactionRecord, registry: KeyRegistry) -> RecordVerdict:
    """Check each present signature; captured or settled records need both."""
    payload = record.signed_payload()
    if record.merchant_sig is not None:
        if not registry.verify(record.merchant_id, payload, record.merchant_sig):
            return RecordVerdict.INVALID_MERCHANT_SIG
    if record.provider_sig is not None:
        if not registry.verify(record.provider_id, payload, record.provider_sig):
            return RecordVerdict.INVALID_PROVIDER_SIG
    if record.state in (TxnState.CAPTURED, TxnState.SETTLED):
        if record.merchant_sig is None or record.provider_sig is None:
            return RecordVerdict.MISSING_SIG
    return RecordVerdict.VALID


@dataclass(frozen=True)
class CreditRequest:
    request_id: str
    provider_id: str
    card_number: str
    secret: str
    password: str
    amount: Money
    merchant_id: str
    item_id: str
    timestamp: int

    def to_wire(self) -> dict:
        return {
            "v": FORMAT_VERSION,
            "request_id": self.request_id,
            "provider_id": self.provider_id,
            "card_number": self.card_number,
            "secret": self.secret,
            "password": self.password,
            "amount": self.amount.amount_minor,
            "merchant_id": self.merchant_id,
            "item_id": self.item_id,
            "ts": self.timestamp,
        }

    @classmethod
    def from_wire(cls, wire: dict) -> "CreditRequest":
        if not isinstance(wire, dict) or wire.get("v") != FORMAT_VERSION:
            raise MalformedInput("bad credit request")
        return cls(
            request_id=str(_require(wire, "request_id", str)),
            provider_id=str(_require(wire, "provider_id", str)),
            card_number=str(_require(wire, "card_number", str)),
            secret=str(_require(wire, "secret", str)),
            password=str(_require(wire, "password", str)),
            amount=Money(int(_require(wire, "amount", int))),
            merchant_id=str(_require(wire, "merchant_id", str)),
            item_id=str(_require(wire, "item_id", str)),
            timestamp=int(_require(wire, "ts", int)),
        )


@dataclass(frozen=True)
class AuthorizationDecision:
    request_id: str
    verdict: Verdict
    hold_id: str | None = None
    hold_expiry: int | None = None

    def __post_init__(self):
        available = self.verdict == Verdict.AVAILABLE
        if available != (self.hold_id is not None):
            raise MalformedInput("hold_id present iff verdict is AVAILABLE")

    def to_wire(self) -> dict:
        wire: dict = {
            "v": FORMAT_VERSION,
            "request_id": self.request_id,
            "verdict": self.verdict.value,
        }
        if self.hold_id is not None:
            wire["hold_id"] = self.hold_id
            wire["hold_expiry"] = self.hold_expiry
        return wire

    @classmethod
    def from_wire(cls, wire: dict) -> "AuthorizationDecision":
        if not isinstance(wire, dict) or wire.get("v") != FORMAT_VERSION:
            raise MalformedInput("bad authorization decision")
        try:
            verdict = Verdict(_require(wire, "verdict", str))
        except ValueError:
            raise MalformedInput("unknown verdict")
        hold_id = wire.get("hold_id")
        hold_expiry = wire.get("hold_expiry")
        return cls(
            request_id=str(_require(wire, "request_id", str)),
            verdict=verdict,
            hold_id=None if hold_id is None else str(hold_id),
            hold_expiry=None if hold_expiry is None else int(hold_expiry),
        )


def derive_txn_id(merchant_id: str, request_id: str) -> str:
    """Deterministic transaction id so capture retries rebuild the same record."""
    digest = hashlib.sha256(
        b"duopay-txn:" + merchant_id.encode("utf-8") + b":" + request_id.encode("utf-8")
    )
    return digest.hexdigest()[:32]
