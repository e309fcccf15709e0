"""Card-provider service core: the sold-cards database, credit
authorization with two-phase holds, capture with countersignature, replica
storage and settlement.

Durability: every acknowledged mutation is expressed as a journal entry,
appended and flushed before the reply leaves this module. Restart replays
the snapshot plus journal and reproduces the acknowledged state exactly;
``state_digest()`` is the check for that.

Balances: a card's ``balance`` is the value not yet captured, including any
held funds. The customer-visible figure is ``balance - sum(active holds)``.
Capture reduces the balance permanently; hold expiry just frees the hold.
For every card, ``denomination == available + active holds + captured``.

Concurrency: all mutations of one card happen under that card's lock;
different cards proceed in parallel. The journal has a single writer order.
Lock order is card lock, then journal, then the state map lock.
"""

from __future__ import annotations

import hashlib
import hmac
import logging
import random
import secrets as secrets_mod
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .cards import CardBatch, secret_digest
from .errors import (
    AlreadyActivated,
    AuthFailure,
    BadEnvelope,
    BadMerchantSignature,
    DuopayError,
    HoldExpired,
    MalformedDemand,
    MalformedInput,
    RecordMismatch,
    SecretMismatch,
    UnknownCard,
    UnknownHold,
    UnknownMerchant,
    WeakPassword,
)
from .canon import canonical_encode
from .journal import Journal
from .keys import KeyRegistry
from .money import Money
from .records import (
    AuthorizationDecision,
    CreditRequest,
    RecordVerdict,
    TransactionRecord,
    TxnState,
    Verdict,
    card_ref,
    sign_record,
    verify_record,
)
from .settlement import SettlementDemand, SettlementReport, emit_report, reconcile
from . import wire

log = logging.getLogger("duopay.provider")

MIN_PASSWORD_LEN = 4


class CardState:
    ISSUED = "ISSUED"
    ACTIVATED = "ACTIVATED"
    EXHAUSTED = "EXHAUSTED"
    BLOCKED = "BLOCKED"


@dataclass
class StoredCard:
    card_number: str
    denomination: int
    balance: int
    secret_digest: str
    state: str = CardState.ISSUED
    password_salt: str = ""
    password_hash: str = ""

    def to_wire(self) -> dict:
        return {
            "number": self.card_number,
            "denomination": self.denomination,
            "balance": self.balance,
            "secret_digest": self.secret_digest,
            "state": self.state,
            "password_salt": self.password_salt,
            "password_hash": self.password_hash,
        }

    @classmethod
    def from_wire(cls, wire_card: dict) -> "StoredCard":
        return cls(
            card_number=wire_card["number"],
            denomination=wire_card["denomination"],
            balance=wire_card["balance"],
            secret_digest=wire_card["secret_digest"],
            state=wire_card["state"],
            password_salt=wire_card["password_salt"],
            password_hash=wire_card["password_hash"],
        )


@dataclass(frozen=True)
class Hold:
    hold_id: str
    card_number: str
    amount: int
    request_id: str
    expiry: int

    def to_wire(self) -> dict:
        return {
            "hold_id": self.hold_id,
            "card_number": self.card_number,
            "amount": self.amount,
            "request_id": self.request_id,
            "expiry": self.expiry,
        }

    @classmethod
    def from_wire(cls, wire_hold: dict) -> "Hold":
        return cls(
            hold_id=wire_hold["hold_id"],
            card_number=wire_hold["card_number"],
            amount=wire_hold["amount"],
            request_id=wire_hold["request_id"],
            expiry=wire_hold["expiry"],
        )


@dataclass
class ProviderConfig:
    party_id: str
    registry: KeyRegistry
    data_dir: Path
    hold_ttl: int = 900
    fee_rate_bp: int = 100
    request_window: int = 300
    fsync: bool = True
    snapshot_every: int = 0  # entries between automatic snapshots; 0 = manual only
    clock: Callable[[], int] | None = None
    rng: random.Random | None = None


def _password_hash(salt_hex: str, password: str) -> str:
    return hashlib.sha256(bytes.fromhex(salt_hex) + password.encode("utf-8")).hexdigest()


def derive_hold_id(provider_id: str, request_id: str) -> str:
    digest = hashlib.sha256(
        b"duopay-hold:" + provider_id.encode("utf-8") + b":" + request_id.encode("utf-8")
    )
    return digest.hexdigest()[:32]


class ProviderCore:
    """In-process provider. The TCP front end wraps ``handle_envelope``."""

    def __init__(self, config: ProviderConfig):
        self.config = config
        self.party_id = config.party_id
        self.registry = config.registry
        self.clock = config.clock or (lambda: int(time.time()))
        self._rng = config.rng

        self.cards: dict[str, StoredCard] = {}
        self.holds: dict[str, Hold] = {}
        self.holds_by_card: dict[str, set[str]] = {}
        self.released: set[str] = set()
        self.consumed: dict[str, str] = {}  # hold_id -> txn_id
        self.decisions: dict[str, dict] = {}  # request_id -> decision wire
        self.replicas: dict[str, TransactionRecord] = {}
        self.captured_by_card: dict[str, int] = {}
        self.settled: dict[str, dict] = {}  # "merchant|start|end" -> report wire
        self.reply_cache: dict[str, str] = {}  # envelope nonce -> reply line

        self.invariant_violations = 0
        self._entries_since_snapshot = 0

        self._state_lock = threading.RLock()
        self._journal_lock = threading.Lock()
        self._settle_lock = threading.Lock()
        self._card_locks: dict[str, threading.Lock] = {}
        self._card_locks_guard = threading.Lock()

        self.journal = Journal(config.data_dir, fsync=config.fsync)
        snapshot = self.journal.load_snapshot()
        if snapshot is not None:
            self._load_state(snapshot)
        for entry in self.journal.replay():
            self._apply(entry)

    # ------------------------------------------------------------------
    # persistence
    # ------------------------------------------------------------------

    def _card_lock(self, card_number: str) -> threading.Lock:
        with self._card_locks_guard:
            lock = self._card_locks.get(card_number)
            if lock is None:
                lock = self._card_locks[card_number] = threading.Lock()
            return lock

    def _commit(self, entries: list[dict]) -> None:
        """Journal first, then mutate memory; flushed before any reply."""
        if not entries:
            return
        with self._journal_lock:
            self.journal.append_many(entries)
        for entry in entries:
            self._apply(entry)
        if self.config.snapshot_every:
            with self._state_lock:
                self._entries_since_snapshot += len(entries)
                due = self._entries_since_snapshot >= self.config.snapshot_every
            if due:
                self.snapshot()

    def _apply(self, entry: dict) -> None:
        with self._state_lock:
            op = entry["op"]
            if op == "card":
                card = StoredCard(
                    card_number=entry["number"],
                    denomination=entry["denomination"],
                    balance=entry["denomination"],
                    secret_digest=entry["secret_digest"],
                )
                self.cards[card.card_number] = card
            elif op == "activate":
                card = self.cards[entry["number"]]
                card.password_salt = entry["salt"]
                card.password_hash = entry["hash"]
                card.state = CardState.ACTIVATED
            elif op == "decision":
                self.decisions[entry["request_id"]] = entry["decision"]
                hold_wire = entry.get("hold")
                if hold_wire is not None:
                    hold = Hold.from_wire(hold_wire)
                    self.holds[hold.hold_id] = hold
                    self.holds_by_card.setdefault(hold.card_number, set()).add(hold.hold_id)
            elif op == "release":
                for hold_id in entry["hold_ids"]:
                    hold = self.holds.pop(hold_id, None)
                    if hold is not None:
                        self.holds_by_card.get(hold.card_number, set()).discard(hold_id)
                        self.released.add(hold_id)
            elif op == "capture":
                hold = self.holds.pop(entry["hold_id"])
                self.holds_by_card.get(hold.card_number, set()).discard(hold.hold_id)
                record = TransactionRecord.from_wire(entry["record"])
                card = self.cards[hold.card_number]
                card.balance -= hold.amount
                if card.balance == 0:
                    card.state = CardState.EXHAUSTED
                self.consumed[hold.hold_id] = record.txn_id
                self.replicas[record.txn_id] = record
                self.captured_by_card[hold.card_number] = (
                    self.captured_by_card.get(hold.card_number, 0) + hold.amount
                )
                self._check_card_invariants(card)
            elif op == "settle":
                report_wire = entry["report"]
                for txn_id in report_wire["matched"]:
                    replica = self.replicas[txn_id]
                    self.replicas[txn_id] = replica.with_state(TxnState.SETTLED)
                self.settled[entry["key"]] = report_wire
            elif op == "reply":
                self.reply_cache[entry["nonce"]] = entry["data"]
            else:
                raise MalformedInput("unknown journal op %r" % op)

    def _check_card_invariants(self, card: StoredCard) -> None:
        held = self._held_amount(card.card_number)
        if card.balance < 0 or card.balance - held < 0 or card.balance > card.denomination:
            self.invariant_violations += 1
            log.error(
                "invariant violation on card %s: balance=%d held=%d",
                card.card_number,
                card.balance,
                held,
            )

    def _held_amount(self, card_number: str) -> int:
        return sum(
            self.holds[h].amount
            for h in self.holds_by_card.get(card_number, ())
            if h in self.holds
        )

    def _state_dict(self) -> dict:
        with self._state_lock:
            return {
                "v": 1,
                "cards": {n: c.to_wire() for n, c in self.cards.items()},
                "holds": {h: hold.to_wire() for h, hold in self.holds.items()},
                "released": sorted(self.released),
                "consumed": dict(self.consumed),
                "decisions": dict(self.decisions),
                "replicas": {t: r.to_wire() for t, r in self.replicas.items()},
                "captured": dict(self.captured_by_card),
                "settled": dict(self.settled),
                "reply_cache": dict(self.reply_cache),
            }

    def _load_state(self, state: dict) -> None:
        self.cards = {n: StoredCard.from_wire(c) for n, c in state["cards"].items()}
        self.holds = {h: Hold.from_wire(w) for h, w in state["holds"].items()}
        self.holds_by_card = {}
        for hold in self.holds.values():
            self.holds_by_card.setdefault(hold.card_number, set()).add(hold.hold_id)
        self.released = set(state["released"])
        self.consumed = dict(state["consumed"])
        self.decisions = dict(state["decisions"])
        self.replicas = {
            t: TransactionRecord.from_wire(w) for t, w in state["replicas"].items()
        }
        self.captured_by_card = dict(state["captured"])
        self.settled = dict(state["settled"])
        self.reply_cache = dict(state["reply_cache"])

    def snapshot(self) -> None:
        with self._journal_lock:
            state = self._state_dict()
            self.journal.write_snapshot(state)
            with self._state_lock:
                self._entries_since_snapshot = 0

    def state_digest(self) -> str:
        return hashlib.sha256(canonical_encode(self._state_dict())).hexdigest()

    def close(self) -> None:
        self.journal.close()

    # ------------------------------------------------------------------
    # card store
    # ------------------------------------------------------------------

    def load_cards(self, batch: CardBatch) -> tuple[int, list[str]]:
        """Ingest a card batch; digests only, never plaintext secrets.
        Returns (loaded count, duplicate card numbers skipped)."""
        batch.validate()
        if batch.provider_id != self.party_id:
            raise MalformedInput(
                "batch issued for %r, not %r" % (batch.provider_id, self.party_id)
            )
        entries: list[dict] = []
        duplicates: list[str] = []
        with self._state_lock:
            for card in batch.cards:
                if card.card_number in self.cards:
                    duplicates.append(card.card_number)
                    continue
                entries.append(
                    {
                        "op": "card",
                        "number": card.card_number,
                        "denomination": batch.denomination.amount_minor,
                        "secret_digest": secret_digest(card.secret),
                    }
                )
        self._commit(entries)
        return len(entries), duplicates

    def activate_card(self, card_number: str, secret: str, new_password: str) -> dict:
        with self._card_lock(card_number):
            card = self.cards.get(card_number)
            if card is None:
                raise UnknownCard("no such card")
            if card.state != CardState.ISSUED:
                raise AlreadyActivated("card already activated")
            if not hmac.compare_digest(card.secret_digest, secret_digest(secret)):
                raise SecretMismatch("card secret does not match")
            if len(new_password) < MIN_PASSWORD_LEN:
                raise WeakPassword(
                    "password must be at least %d characters" % MIN_PASSWORD_LEN
                )
            salt = (
                self._rng.getrandbits(128).to_bytes(16, "big").hex()
                if self._rng is not None
                else secrets_mod.token_hex(16)
            )
            self._commit(
                [
                    {
                        "op": "activate",
                        "number": card_number,
                        "salt": salt,
                        "hash": _password_hash(salt, new_password),
                    }
                ]
            )
        return {"card_number": card_number, "state": CardState.ACTIVATED}

    def _credentials_ok(self, card: StoredCard, secret: str, password: str) -> bool:
        if card.state not in (CardState.ACTIVATED, CardState.EXHAUSTED):
            return False
        if not hmac.compare_digest(card.secret_digest, secret_digest(secret)):
            return False
        return hmac.compare_digest(
            card.password_hash, _password_hash(card.password_salt, password)
        )

    # ------------------------------------------------------------------
    # authorize / capture / expire
    # ------------------------------------------------------------------

    def authorize(self, request: CreditRequest, now: int | None = None) -> AuthorizationDecision:
        now = self.clock() if now is None else now

        def decide(verdict: Verdict, hold: Hold | None = None) -> AuthorizationDecision:
            return AuthorizationDecision(
                request_id=request.request_id,
                verdict=verdict,
                hold_id=hold.hold_id if hold else None,
                hold_expiry=hold.expiry if hold else None,
            )

        # malformed requests never consume the request id
        if request.amount.amount_minor <= 0:
            return decide(Verdict.INVALID_REQUEST)
        if request.provider_id != self.party_id:
            return decide(Verdict.INVALID_REQUEST)
        if abs(now - request.timestamp) > self.config.request_window:
            return decide(Verdict.INVALID_REQUEST)

        with self._card_lock(request.card_number):
            cached = self.decisions.get(request.request_id)
            if cached is not None:
                return AuthorizationDecision.from_wire(cached)

            card = self.cards.get(request.card_number)
            hold: Hold | None = None
            if card is None or card.state in (CardState.ISSUED, CardState.BLOCKED):
                verdict = Verdict.AUTH_FAILURE
            elif not self._credentials_ok(card, request.secret, request.password):
                verdict = Verdict.AUTH_FAILURE
            else:
                with self._state_lock:
                    available = card.balance - self._held_amount(card.card_number)
                if available < request.amount.amount_minor:
                    verdict = Verdict.INSUFFICIENT_FUNDS
                else:
                    verdict = Verdict.AVAILABLE
                    hold = Hold(
                        hold_id=derive_hold_id(self.party_id, request.request_id),
                        card_number=request.card_number,
                        amount=request.amount.amount_minor,
                        request_id=request.request_id,
                        expiry=now + self.config.hold_ttl,
                    )
            decision = decide(verdict, hold)
            entry: dict = {
                "op": "decision",
                "request_id": request.request_id,
                "decision": decision.to_wire(),
            }
            if hold is not None:
                entry["hold"] = hold.to_wire()
            self._commit([entry])
            return decision

    def capture(
        self,
        hold_id: str,
        record: TransactionRecord,
        now: int | None = None,
    ) -> TransactionRecord:
        """Consume a hold against its merchant-signed record; countersign and
        store the replica. Duplicate captures return the stored record."""
        now = self.clock() if now is None else now

        card_number = None
        with self._state_lock:
            hold = self.holds.get(hold_id)
            if hold is not None:
                card_number = hold.card_number
            elif hold_id in self.consumed:
                card_number = None  # replay path below, no card lock needed
            elif hold_id in self.released:
                raise HoldExpired("hold already released, balance restored")
            else:
                raise UnknownHold("no such hold")

        if card_number is None:
            return self._replay_capture(hold_id, record)

        with self._card_lock(card_number):
            # re-check under the lock; another thread may have won
            hold = self.holds.get(hold_id)
            if hold is None:
                if hold_id in self.consumed:
                    return self._replay_capture(hold_id, record)
                raise HoldExpired("hold already released, balance restored")
            if hold.expiry < now:
                self._commit([{"op": "release", "hold_ids": [hold_id]}])
                raise HoldExpired("hold expired, balance restored")

            if record.provider_id != self.party_id:
                raise RecordMismatch("record addressed to a different provider")
            if record.state != TxnState.AUTHORIZED:
                raise RecordMismatch("record must be in AUTHORIZED state")
            if record.provider_sig is not None:
                raise RecordMismatch("provider signature slot must be empty")
            if record.amount.amount_minor != hold.amount:
                raise RecordMismatch("record amount does not match hold")
            if record.request_id != hold.request_id:
                raise RecordMismatch("record request id does not match hold")
            if record.card_ref != card_ref(hold.card_number):
                raise RecordMismatch("record card reference does not match hold")
            if not self.registry.knows(record.merchant_id):
                raise BadMerchantSignature("unknown merchant")
            if record.merchant_sig is None or not self.registry.verify(
                record.merchant_id, record.signed_payload(), record.merchant_sig
            ):
                raise BadMerchantSignature("merchant signature invalid")
            with self._state_lock:
                existing = self.replicas.get(record.txn_id)
            if existing is not None:
                raise RecordMismatch("txn id already used")

            captured = record.with_state(TxnState.CAPTURED)
            captured = captured.with_signature("provider", sign_record(captured, self.registry))
            if verify_record(captured, self.registry) != RecordVerdict.VALID:
                raise RecordMismatch("countersigned record failed verification")
            self._commit(
                [{"op": "capture", "hold_id": hold_id, "record": captured.to_wire()}]
            )
            return captured

    def _replay_capture(self, hold_id: str, record: TransactionRecord) -> TransactionRecord:
        with self._state_lock:
            replica = self.replicas[self.consumed[hold_id]]
        if replica.signed_payload() != record.signed_payload():
            raise RecordMismatch("duplicate capture with a different record")
        return replica

    def expire_holds(self, now: int | None = None) -> int:
        now = self.clock() if now is None else now
        with self._state_lock:
            by_card: dict[str, list[str]] = {}
            for hold in self.holds.values():
                if hold.expiry < now:
                    by_card.setdefault(hold.card_number, []).append(hold.hold_id)
        count = 0
        for card_number, hold_ids in sorted(by_card.items()):
            with self._card_lock(card_number):
                live = [
                    h
                    for h in hold_ids
                    if h in self.holds and self.holds[h].expiry < now
                ]
                if live:
                    self._commit([{"op": "release", "hold_ids": sorted(live)}])
                    count += len(live)
        return count

    # ------------------------------------------------------------------
    # settlement and balance
    # ------------------------------------------------------------------

    @staticmethod
    def _period_key(merchant_id: str, start: int, end: int) -> str:
        return "%s|%d|%d" % (merchant_id, start, end)

    def handle_settlement(self, demand: SettlementDemand, now: int | None = None) -> SettlementReport:
        now = self.clock() if now is None else now
        if not self.registry.knows(demand.merchant_id):
            raise UnknownMerchant("merchant %r not registered" % demand.merchant_id)
        if not demand.verify(self.registry):
            raise MalformedDemand("demand signature invalid")
        if demand.period_end > now + self.config.request_window:
            raise MalformedDemand("period is not closed yet")
        key = self._period_key(demand.merchant_id, demand.period_start, demand.period_end)
        with self._settle_lock:
            with self._state_lock:
                stored = self.settled.get(key)
                if stored is not None:
                    return SettlementReport.from_wire(stored)
                replicas = dict(self.replicas)
            matched, discrepancies = reconcile(demand, replicas, self.registry)
            demanded = {r.txn_id for r in demand.records}
            undemanded = [
                txn_id
                for txn_id, rec in replicas.items()
                if rec.state == TxnState.CAPTURED
                and rec.merchant_id == demand.merchant_id
                and demand.period_start <= rec.timestamp < demand.period_end
                and txn_id not in demanded
            ]
            report = emit_report(
                matched,
                discrepancies,
                self.config.fee_rate_bp,
                self.registry,
                merchant_id=demand.merchant_id,
                period_start=demand.period_start,
                period_end=demand.period_end,
                undemanded=undemanded,
            )
            self._commit([{"op": "settle", "key": key, "report": report.to_wire()}])
            return report

    def balance_inquiry(self, card_number: str, secret: str, password: str) -> Money:
        with self._card_lock(card_number):
            card = self.cards.get(card_number)
            if card is None or not self._credentials_ok(card, secret, password):
                raise AuthFailure("authentication failed")
            with self._state_lock:
                available = card.balance - self._held_amount(card_number)
            return Money(available)

    # ------------------------------------------------------------------
    # accounting views (used by settlement reports and the simulator)
    # ------------------------------------------------------------------

    @property
    def captures_count(self) -> int:
        with self._state_lock:
            return len(self.consumed)

    def value_totals(self) -> dict:
        """Exact value buckets over the whole card base, in minor units."""
        with self._state_lock:
            issued = sum(c.denomination for c in self.cards.values())
            balances = sum(c.balance for c in self.cards.values())
            held = sum(h.amount for h in self.holds.values())
            captured = sum(self.captured_by_card.values())
            payouts = sum(r["payout"] for r in self.settled.values())
            fees = sum(r["fee"] for r in self.settled.values())
            undemanded = sum(
                r.amount.amount_minor
                for r in self.replicas.values()
                if r.state == TxnState.CAPTURED
            )
        return {
            "issued": issued,
            "balances": balances,
            "available": balances - held,
            "held": held,
            "captured": captured,
            "payouts": payouts,
            "fees": fees,
            "undemanded": undemanded,
        }

    # ------------------------------------------------------------------
    # wire front end
    # ------------------------------------------------------------------

    def handle_envelope(self, data: bytes, peer_id: str | None = None) -> bytes:
        now = self.clock()
        try:
            envelope = wire.decode_envelope(data, self.registry)
        except BadEnvelope as exc:
            nonce = wire.peek_nonce(data) or ""
            return self._error_reply(nonce, now, exc)
        with self._state_lock:
            cached = self.reply_cache.get(envelope.nonce)
        if cached is not None:
            return cached.encode("utf-8")
        if peer_id is not None and envelope.sender_id != peer_id:
            return self._error_reply(
                envelope.nonce, now, BadEnvelope("sender does not match channel peer")
            )
        try:
            reply_type, body, durable = self._dispatch(envelope, now)
        except DuopayError as exc:
            log.info("%s from %s failed: %s", envelope.type, envelope.sender_id, exc)
            return self._error_reply(envelope.nonce, now, exc, cache=True)
        reply = wire.build_envelope(
            reply_type, body, self.registry, nonce=envelope.nonce, timestamp=now
        )
        self._remember_reply(envelope.nonce, reply, durable=durable)
        return reply

    def _dispatch(self, envelope: wire.Envelope, now: int) -> tuple[str, dict, bool]:
        body = envelope.body
        if envelope.type == wire.ACTIVATE:
            ack = self.activate_card(
                str(body.get("card_number", "")),
                str(body.get("secret", "")),
                str(body.get("password", "")),
            )
            return wire.ACTIVATE_ACK, ack, True
        if envelope.type == wire.CREDIT_REQUEST:
            request = CreditRequest.from_wire(body)
            if request.merchant_id != envelope.sender_id:
                raise BadEnvelope("request merchant does not match sender")
            decision = self.authorize(request, now=now)
            durable = decision.verdict != Verdict.INVALID_REQUEST
            return wire.AUTH_DECISION, decision.to_wire(), durable
        if envelope.type == wire.CAPTURE:
            record_wire = body.get("record")
            hold_id = body.get("hold_id")
            if not isinstance(record_wire, dict) or not isinstance(hold_id, str):
                raise MalformedInput("capture body needs hold_id and record")
            record = TransactionRecord.from_wire(record_wire)
            if record.merchant_id != envelope.sender_id:
                raise BadEnvelope("record merchant does not match sender")
            captured = self.capture(hold_id, record, now=now)
            return wire.CAPTURE_CONFIRM, {"record": captured.to_wire()}, True
        if envelope.type == wire.BALANCE:
            available = self.balance_inquiry(
                str(body.get("card_number", "")),
                str(body.get("secret", "")),
                str(body.get("password", "")),
            )
            return wire.BALANCE_RESULT, {"available": available.amount_minor}, False
        if envelope.type == wire.SETTLE_DEMAND:
            try:
                demand = SettlementDemand.from_wire(body)
            except MalformedInput as exc:
                raise MalformedDemand(str(exc))
            if demand.merchant_id != envelope.sender_id:
                raise BadEnvelope("demand merchant does not match sender")
            report = self.handle_settlement(demand, now=now)
            return wire.SETTLE_REPORT, report.to_wire(), True
        raise MalformedInput("unsupported message type %r" % envelope.type)

    def _error_reply(
        self, nonce: str, now: int, exc: DuopayError, cache: bool = False
    ) -> bytes:
        reply = wire.build_envelope(
            wire.ERROR, wire.error_body(exc), self.registry, nonce=nonce, timestamp=now
        )
        if cache and nonce:
            with self._state_lock:
                self.reply_cache[nonce] = reply.decode("utf-8")
        return reply

    def _remember_reply(self, nonce: str, reply: bytes, durable: bool) -> None:
        text = reply.decode("utf-8")
        if durable:
            self._commit([{"op": "reply", "nonce": nonce, "data": text}])
        else:
            with self._state_lock:
                self.reply_cache[nonce] = text
