"""Merchant service core: product catalog, checkout orchestration against
the provider, the dual-signed transaction ledger, and settlement demands.

Checkout is fail-closed: the ledger gains an entry only after a provider
countersignature has been received and verified. Any failure between
authorize and confirmed capture records nothing on this side; the hold
either expires on the provider or the capture surfaces at settlement as an
undemanded replica.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
import secrets as secrets_mod
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol

from .canon import canonical_encode
from .errors import (
    BadEnvelope,
    BadProviderSignature,
    BadReportSignature,
    DuopayError,
    MalformedDemand,
    MalformedInput,
    PaymentDeclined,
    ProviderUnreachable,
    UnknownItem,
    UnknownPeriod,
)
from .journal import Journal
from .keys import KeyRegistry
from .money import Money
from .records import (
    CreditRequest,
    AuthorizationDecision,
    RecordVerdict,
    TransactionRecord,
    TxnState,
    Verdict,
    card_ref,
    derive_txn_id,
    sign_record,
    verify_record,
)
from .settlement import SettlementDemand, SettlementReport
from . import wire

log = logging.getLogger("duopay.merchant")


@dataclass(frozen=True)
class CatalogItem:
    item_id: str
    title: str
    price: Money

    def to_wire(self) -> dict:
        return {"item_id": self.item_id, "title": self.title, "price_minor": self.price.amount_minor}


def load_catalog(path: str | Path) -> list[CatalogItem]:
    """Catalog file: a JSON list of {item_id, title, price_minor}."""
    raw = json.loads(Path(path).read_text())
    if not isinstance(raw, list):
        raise MalformedInput("catalog must be a list")
    items: list[CatalogItem] = []
    seen: set[str] = set()
    for entry in raw:
        try:
            item = CatalogItem(
                item_id=str(entry["item_id"]),
                title=str(entry["title"]),
                price=Money(int(entry["price_minor"])),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedInput("bad catalog entry: %s" % exc)
        if item.price.amount_minor < 1:
            raise MalformedInput("catalog price must be at least 1 minor unit")
        if item.item_id in seen:
            raise MalformedInput("duplicate item id %r" % item.item_id)
        seen.add(item.item_id)
        items.append(item)
    items.sort(key=lambda i: i.item_id)
    return items


def save_catalog(items: list[CatalogItem], path: str | Path) -> None:
    Path(path).write_text(json.dumps([i.to_wire() for i in items], indent=2) + "\n")


@dataclass(frozen=True)
class Receipt:
    txn_id: str
    item_id: str
    amount: Money
    timestamp: int
    status: str
    receipt_token: str

    def to_wire(self) -> dict:
        return {
            "txn_id": self.txn_id,
            "item_id": self.item_id,
            "amount_minor": self.amount.amount_minor,
            "ts": self.timestamp,
            "status": self.status,
            "receipt_token": self.receipt_token,
        }


def receipt_token(record: TransactionRecord) -> str:
    """Digest over the fully signed record; forging one means forging both
    signatures."""
    payload = canonical_encode(record.with_state(TxnState.CAPTURED).to_wire())
    return hashlib.sha256(b"duopay-receipt:" + payload).hexdigest()


class ProviderClient(Protocol):
    def send(self, data: bytes, timeout: float | None = None) -> bytes:
        """Deliver one envelope line, return the reply line.
        Raises ProviderUnreachable on timeout or connection failure."""
        ...


class DirectClient:
    """In-process client, for tests and single-process setups."""

    def __init__(self, core):
        self.core = core

    def send(self, data: bytes, timeout: float | None = None) -> bytes:
        return self.core.handle_envelope(data)


@dataclass
class MerchantConfig:
    party_id: str
    registry: KeyRegistry
    provider_id: str
    data_dir: Path
    catalog: list[CatalogItem]
    request_timeout: float = 5.0
    settle_retries: int = 5
    clock: Callable[[], int] | None = None
    rng: random.Random | None = None


class MerchantCore:
    def __init__(self, config: MerchantConfig, client: ProviderClient | None):
        self.config = config
        self.party_id = config.party_id
        self.registry = config.registry
        self.client = client
        self.clock = config.clock or (lambda: int(time.time()))
        self._rng = config.rng

        self.catalog: dict[str, CatalogItem] = {i.item_id: i for i in config.catalog}
        self.records: dict[str, TransactionRecord] = {}  # txn_id -> record
        self.order: list[str] = []  # append order of txn ids
        self.by_request: dict[str, str] = {}  # request_id -> txn_id
        self.demands: dict[str, list[str]] = {}  # period key -> txn ids demanded
        self.applied: dict[str, dict] = {}  # period key -> report wire
        self.counter = 0
        self._nonce_seq = 0

        self._ledger_lock = threading.RLock()
        self._settle_lock = threading.Lock()
        self.journal = Journal(config.data_dir, fsync=False)
        for entry in self.journal.replay():
            self._apply(entry)

    # ------------------------------------------------------------------
    # ledger persistence
    # ------------------------------------------------------------------

    def _apply(self, entry: dict) -> None:
        op = entry["op"]
        if op == "counter":
            self.counter = max(self.counter, entry["value"])
        elif op == "record":
            record = TransactionRecord.from_wire(entry["record"])
            if record.txn_id not in self.records:
                self.order.append(record.txn_id)
            self.records[record.txn_id] = record
            self.by_request[record.request_id] = record.txn_id
        elif op == "demand":
            key = self._period_key(entry["start"], entry["end"])
            self.demands[key] = list(entry["txns"])
        elif op == "settled":
            key = self._period_key(entry["start"], entry["end"])
            self.applied[key] = entry["report"]
            for txn_id in entry["report"]["matched"]:
                record = self.records.get(txn_id)
                if record is not None and record.state == TxnState.CAPTURED:
                    self.records[txn_id] = record.with_state(TxnState.SETTLED)
        else:
            raise MalformedInput("unknown ledger op %r" % op)

    def _commit(self, entry: dict) -> None:
        self.journal.append(entry)
        self._apply(entry)

    @staticmethod
    def _period_key(start: int, end: int) -> str:
        return "%d|%d" % (start, end)

    def state_digest(self) -> str:
        with self._ledger_lock:
            state = {
                "records": [self.records[t].to_wire() for t in self.order],
                "demands": self.demands,
                "applied": self.applied,
                "counter": self.counter,
            }
        return hashlib.sha256(canonical_encode(state)).hexdigest()

    def close(self) -> None:
        self.journal.close()

    # ------------------------------------------------------------------
    # catalog
    # ------------------------------------------------------------------

    def list_catalog(self) -> list[CatalogItem]:
        return sorted(self.catalog.values(), key=lambda i: i.item_id)

    # ------------------------------------------------------------------
    # checkout
    # ------------------------------------------------------------------

    def _fresh_request_id(self) -> str:
        with self._ledger_lock:
            self.counter += 1
            counter = self.counter
            self._commit({"op": "counter", "value": counter})
        salt = (
            self._rng.getrandbits(64).to_bytes(8, "big").hex()
            if self._rng is not None
            else secrets_mod.token_hex(8)
        )
        digest = hashlib.sha256(
            ("req:%s:%d:%s" % (self.party_id, counter, salt)).encode("utf-8")
        )
        return digest.hexdigest()[:32]

    def _nonce(self) -> str:
        if self._rng is None:
            return wire.fresh_nonce()
        # the persisted counter keeps seeded nonces from repeating across
        # restarts; the sequence keeps them unique within one process
        with self._ledger_lock:
            self._nonce_seq += 1
            seq = self._nonce_seq
            counter = self.counter
        material = "%s:%d:%d:%032x" % (
            self.party_id,
            counter,
            seq,
            self._rng.getrandbits(128),
        )
        return hashlib.sha256(material.encode("utf-8")).hexdigest()[:32]

    def _call(self, type_: str, body: dict, now: int) -> wire.Envelope:
        if self.client is None:
            raise ProviderUnreachable("no provider client configured")
        request = wire.build_envelope(
            type_, body, self.registry, nonce=self._nonce(), timestamp=now
        )
        reply_bytes = self.client.send(request, timeout=self.config.request_timeout)
        try:
            reply = wire.decode_envelope(reply_bytes, self.registry)
        except BadEnvelope as exc:
            log.error("unauthenticated reply from provider: %s", exc)
            raise BadProviderSignature("reply failed authentication")
        if reply.sender_id != self.config.provider_id:
            raise BadProviderSignature("reply from unexpected party %r" % reply.sender_id)
        return reply

    def checkout(
        self,
        item_id: str,
        card_number: str,
        secret: str,
        password: str,
        provider_id: str,
    ) -> Receipt:
        item = self.catalog.get(item_id)
        if item is None:
            raise UnknownItem("no such item %r" % item_id)
        if provider_id != self.config.provider_id:
            # only one provider is configured; decline without detail
            log.info("checkout with unconfigured provider %r", provider_id)
            raise PaymentDeclined("unknown_provider")

        now = self.clock()
        request = CreditRequest(
            request_id=self._fresh_request_id(),
            provider_id=provider_id,
            card_number=card_number,
            secret=secret,
            password=password,
            amount=item.price,
            merchant_id=self.party_id,
            item_id=item_id,
            timestamp=now,
        )
        reply = self._call(wire.CREDIT_REQUEST, request.to_wire(), now)
        try:
            body = wire.expect_reply(reply, wire.AUTH_DECISION)
        except DuopayError as exc:
            log.info("authorize declined: %s", exc)
            raise PaymentDeclined(exc.code)
        decision = AuthorizationDecision.from_wire(body)
        if decision.verdict == Verdict.INSUFFICIENT_FUNDS:
            raise PaymentDeclined("insufficient_funds")
        if decision.verdict == Verdict.AUTH_FAILURE:
            raise PaymentDeclined("auth_failure")
        if decision.verdict != Verdict.AVAILABLE:
            raise PaymentDeclined("invalid_request")

        record = TransactionRecord(
            txn_id=derive_txn_id(self.party_id, request.request_id),
            request_id=request.request_id,
            timestamp=now,
            amount=item.price,
            merchant_id=self.party_id,
            item_id=item_id,
            card_ref=card_ref(card_number),
            provider_id=provider_id,
            state=TxnState.AUTHORIZED,
        )
        record = record.with_signature("merchant", sign_record(record, self.registry))

        capture_body = {"hold_id": decision.hold_id, "record": record.to_wire()}
        reply = self._call(wire.CAPTURE, capture_body, now)
        try:
            body = wire.expect_reply(reply, wire.CAPTURE_CONFIRM)
        except DuopayError as exc:
            # capture refused: nothing is recorded, the hold dies on its own
            log.info("capture refused: %s", exc)
            raise PaymentDeclined(exc.code)
        confirmed = TransactionRecord.from_wire(body.get("record", {}))
        if confirmed.signed_payload() != record.signed_payload():
            raise BadProviderSignature("provider altered the record")
        if confirmed.state != TxnState.CAPTURED:
            raise BadProviderSignature("capture confirm not in CAPTURED state")
        if verify_record(confirmed, self.registry) != RecordVerdict.VALID:
            log.error("ALARM: provider countersignature failed verification")
            raise BadProviderSignature("provider countersignature invalid")

        with self._ledger_lock:
            if confirmed.txn_id not in self.records:
                self._commit({"op": "record", "record": confirmed.to_wire()})
            stored = self.records[confirmed.txn_id]
        return self._receipt_for(stored)

    def _receipt_for(self, record: TransactionRecord) -> Receipt:
        return Receipt(
            txn_id=record.txn_id,
            item_id=record.item_id,
            amount=record.amount,
            timestamp=record.timestamp,
            status=record.state.value,
            receipt_token=receipt_token(record),
        )

    def receipt(self, txn_id: str) -> Receipt | None:
        with self._ledger_lock:
            record = self.records.get(txn_id)
        if record is None or record.state not in (TxnState.CAPTURED, TxnState.SETTLED):
            return None
        return self._receipt_for(record)

    # ------------------------------------------------------------------
    # settlement
    # ------------------------------------------------------------------

    def build_demand(self, period_start: int, period_end: int) -> SettlementDemand:
        now = self.clock()
        if period_end > now:
            raise MalformedDemand("period end is in the future")
        if period_start >= period_end:
            raise MalformedDemand("empty or inverted period")
        with self._ledger_lock:
            chosen = [
                self.records[t]
                for t in self.order
                if self.records[t].state == TxnState.CAPTURED
                and period_start <= self.records[t].timestamp < period_end
            ]
            chosen.sort(key=lambda r: r.txn_id)
            demand = SettlementDemand(
                merchant_id=self.party_id,
                period_start=period_start,
                period_end=period_end,
                records=chosen,
            )
            demand.sign(self.registry)
            self._commit(
                {
                    "op": "demand",
                    "start": period_start,
                    "end": period_end,
                    "txns": [r.txn_id for r in chosen],
                }
            )
        return demand

    def apply_settlement(self, report: SettlementReport) -> dict:
        if not report.verify(self.registry, self.config.provider_id):
            raise BadReportSignature("report signature invalid")
        key = self._period_key(report.period_start, report.period_end)
        with self._ledger_lock:
            if key not in self.demands:
                raise UnknownPeriod("no outstanding demand for that period")
            already = self.applied.get(key)
            if already is not None:
                return self._summary(SettlementReport.from_wire(already), newly=0)
            newly = 0
            for txn_id in report.matched:
                record = self.records.get(txn_id)
                if record is not None and record.state == TxnState.CAPTURED:
                    newly += 1
            self._commit(
                {
                    "op": "settled",
                    "start": report.period_start,
                    "end": report.period_end,
                    "report": report.to_wire(),
                }
            )
        return self._summary(report, newly=newly)

    def _summary(self, report: SettlementReport, newly: int) -> dict:
        return {
            "period_start": report.period_start,
            "period_end": report.period_end,
            "matched": len(report.matched),
            "newly_settled": newly,
            "payout_minor": report.payout.amount_minor,
            "fee_minor": report.fee.amount_minor,
            "discrepancies": [d.to_wire() for d in report.discrepancies],
            "undemanded_count": len(report.undemanded),
            "unsettled_txns": sorted(
                {d.txn_id for d in report.discrepancies} & set(self.records)
            ),
        }

    def settle_period(self, period_start: int, period_end: int) -> dict:
        """Build the demand, send it, apply the provider's report.

        Retries with fresh envelopes on unreachable sends; the provider's
        per-period idempotency makes that safe.
        """
        with self._settle_lock:
            demand = self.build_demand(period_start, period_end)
            last_error: DuopayError | None = None
            for _ in range(max(1, self.config.settle_retries)):
                now = self.clock()
                try:
                    reply = self._call(wire.SETTLE_DEMAND, demand.to_wire(), now)
                    body = wire.expect_reply(reply, wire.SETTLE_REPORT)
                    report = SettlementReport.from_wire(body)
                    return self.apply_settlement(report)
                except ProviderUnreachable as exc:
                    last_error = exc
            raise last_error or ProviderUnreachable("settlement failed")

    # ------------------------------------------------------------------
    # views
    # ------------------------------------------------------------------

    def payout_totals(self) -> dict:
        with self._ledger_lock:
            payout = sum(r["payout"] for r in self.applied.values())
            fee = sum(r["fee"] for r in self.applied.values())
        return {"payout": payout, "fee": fee}

    def ledger_records(self) -> list[TransactionRecord]:
        with self._ledger_lock:
            return [self.records[t] for t in self.order]

    def export_ledger(self, path: str | Path) -> int:
        with self._ledger_lock:
            records = [self.records[t].to_wire() for t in self.order]
        payload = {"v": 1, "merchant_id": self.party_id, "records": records}
        Path(path).write_bytes(canonical_encode(payload) + b"\n")
        return len(records)
