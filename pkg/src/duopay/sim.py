"""Deterministic end-to-end simulation with message-level fault injection.

One seeded run drives the whole framework: cards are issued and activated,
customers buy through a real merchant core against a real provider core
(journal and all), every merchant-to-provider envelope passes through a
faulty channel that can drop, duplicate or delay whole messages, holds
expire on tick boundaries, and each settlement period is demanded and
reconciled. Scripted crash points discard the provider mid-run and rebuild
it from its journal.

The run ends with an exact conservation check: issued card value must equal
remaining available balances plus held funds plus payouts plus fees plus
captured-but-undemanded value, to the minor unit.

Identical seeds give identical report bytes; wall-clock duration is kept
outside the deterministic body.
"""

from __future__ import annotations

import heapq
import logging
import random
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .canon import canonical_decode, canonical_encode
from .cards import issue_batch
from .errors import (
    BadProviderSignature,
    ConfigInvalid,
    DuopayError,
    PaymentDeclined,
    ProviderUnreachable,
)
from .keys import KeyRegistry, keypair_from_seed
from .merchant import CatalogItem, MerchantConfig, MerchantCore
from .money import Money
from .provider import ProviderConfig, ProviderCore
from .records import TxnState
from .settlement import DiscrepancyKind
from . import wire

log = logging.getLogger("duopay.sim")

DEFAULT_DENOMINATIONS = (100, 500, 1000, 2500, 5000, 10000, 25000, 50000, 100000)
SIM_PASSWORD = "sim-pass-1"
PROVIDER_ID = "sim-provider"
MERCHANT_ID = "sim-merchant"


@dataclass
class SimConfig:
    seed: int = 42
    num_cards: int = 100
    denominations: tuple[int, ...] = DEFAULT_DENOMINATIONS
    num_customers: int = 20
    num_purchases: int = 1000
    num_items: int = 25
    price_min: int = 50
    price_max: int = 2000
    drop_pct: int = 0
    duplicate_pct: int = 0
    reorder_pct: int = 0
    provider_crash_points: tuple[int, ...] = ()
    hold_ttl: int = 900
    fee_rate_bp: int = 100
    settlement_periods: int = 3
    request_timeout: int = 4
    latency: int = 1
    reorder_max_delay: int = 6
    purchase_gap: int = 1
    settle_retries: int = 12
    fsync: bool = False

    def validate(self) -> None:
        checks = [
            (isinstance(self.seed, int), "seed must be an integer"),
            (self.num_cards > 0, "num_cards must be positive"),
            (self.num_customers > 0, "num_customers must be positive"),
            (self.num_purchases >= 0, "num_purchases must be non-negative"),
            (self.num_items > 0, "num_items must be positive"),
            (0 < self.price_min <= self.price_max, "bad price range"),
            (len(self.denominations) > 0, "need at least one denomination"),
            (
                all(100 <= d <= 100_000 for d in self.denominations),
                "denominations must be within [100, 100000] minor units",
            ),
            (self.settlement_periods >= 1, "need at least one settlement period"),
            (self.hold_ttl > 0, "hold_ttl must be positive"),
            (0 <= self.fee_rate_bp <= 10_000, "fee rate out of range"),
            (self.request_timeout >= 2 * self.latency, "timeout below round trip"),
            (self.latency >= 1 and self.reorder_max_delay >= 1, "bad delay settings"),
            (self.purchase_gap >= 1, "purchase_gap must be at least one tick"),
        ]
        for pct_name in ("drop_pct", "duplicate_pct", "reorder_pct"):
            pct = getattr(self, pct_name)
            checks.append(
                (isinstance(pct, int) and 0 <= pct <= 100, "%s must be an integer percent in [0, 100]" % pct_name)
            )
        for ok, message in checks:
            if not ok:
                raise ConfigInvalid(message)

    def to_wire(self) -> dict:
        return {
            "v": 1,
            "seed": self.seed,
            "num_cards": self.num_cards,
            "denominations": list(self.denominations),
            "num_customers": self.num_customers,
            "num_purchases": self.num_purchases,
            "num_items": self.num_items,
            "price_min": self.price_min,
            "price_max": self.price_max,
            "drop_pct": self.drop_pct,
            "duplicate_pct": self.duplicate_pct,
            "reorder_pct": self.reorder_pct,
            "provider_crash_points": list(self.provider_crash_points),
            "hold_ttl": self.hold_ttl,
            "fee_rate_bp": self.fee_rate_bp,
            "settlement_periods": self.settlement_periods,
            "request_timeout": self.request_timeout,
            "latency": self.latency,
            "reorder_max_delay": self.reorder_max_delay,
            "purchase_gap": self.purchase_gap,
            "settle_retries": self.settle_retries,
            "fsync": self.fsync,
        }

    @classmethod
    def from_wire(cls, data: dict) -> "SimConfig":
        if not isinstance(data, dict) or data.get("v") != 1:
            raise ConfigInvalid("unsupported config format")
        kwargs = {k: v for k, v in data.items() if k != "v"}
        for tuple_field in ("denominations", "provider_crash_points"):
            if tuple_field in kwargs:
                kwargs[tuple_field] = tuple(kwargs[tuple_field])
        try:
            config = cls(**kwargs)
        except TypeError as exc:
            raise ConfigInvalid("unknown config field: %s" % exc)
        config.validate()
        return config

    @classmethod
    def load(cls, path: str | Path) -> "SimConfig":
        try:
            data = canonical_decode(Path(path).read_bytes().rstrip(b"\n"))
        except DuopayError as exc:
            raise ConfigInvalid("unreadable config: %s" % exc)
        return cls.from_wire(data)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(canonical_encode(self.to_wire()) + b"\n")

    def digest(self) -> str:
        import hashlib

        return hashlib.sha256(canonical_encode(self.to_wire())).hexdigest()


@dataclass
class SimReport:
    body: dict
    duration_ms: int

    def canonical_bytes(self) -> bytes:
        return canonical_encode(self.body)

    def save(self, path: str | Path) -> None:
        payload = {"v": 1, "report": self.body, "duration_ms": self.duration_ms}
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(canonical_encode(payload) + b"\n")

    @classmethod
    def load(cls, path: str | Path) -> "SimReport":
        payload = canonical_decode(Path(path).read_bytes().rstrip(b"\n"))
        return cls(body=payload["report"], duration_ms=payload["duration_ms"])


class SimClock:
    def __init__(self, start: int = 1_000_000):
        self.now = start

    def __call__(self) -> int:
        return self.now

    def advance(self, ticks: int = 1) -> int:
        self.now += ticks
        return self.now


class ProviderSlot:
    """Holds the live provider core; crash points swap it for a journal
    replay and verify the acknowledged state came back bit for bit."""

    def __init__(self, factory: Callable[[], ProviderCore], crash_points: tuple[int, ...]):
        self.factory = factory
        self.core = factory()
        self.pending_crashes = sorted(crash_points)
        self.recoveries = 0
        self.digest_mismatches = 0

    def handle(self, data: bytes) -> bytes:
        reply = self.core.handle_envelope(data)
        while self.pending_crashes and self.core.captures_count >= self.pending_crashes[0]:
            self.pending_crashes.pop(0)
            self._crash_and_recover()
        return reply

    def _crash_and_recover(self) -> None:
        digest = self.core.state_digest()
        config = self.core.config
        self.core.close()
        self.core = self.factory()
        self.recoveries += 1
        if self.core.state_digest() != digest:
            self.digest_mismatches += 1
            log.error("journal replay diverged from acknowledged state")

    def close(self) -> None:
        self.core.close()


class FaultyChannel:
    """The merchant's provider client, with deterministic message faults.

    Whole envelopes are dropped, duplicated or delayed (reordered relative
    to other in-flight deliveries) on both directions. Undelivered events
    stay queued and are drained as simulated time advances, so a capture
    whose reply was lost still lands on the provider.
    """

    def __init__(
        self,
        slot: ProviderSlot,
        clock: SimClock,
        rng: random.Random,
        *,
        drop_pct: int,
        duplicate_pct: int,
        reorder_pct: int,
        latency: int,
        reorder_max_delay: int,
        timeout: int,
    ):
        self.slot = slot
        self.clock = clock
        self.rng = rng
        self.drop_pct = drop_pct
        self.duplicate_pct = duplicate_pct
        self.reorder_pct = reorder_pct
        self.latency = latency
        self.reorder_max_delay = reorder_max_delay
        self.timeout = timeout
        self.events: list[tuple[int, int, str, bytes]] = []
        self._seq = 0
        self.request_log: list[bytes] = []
        self.stats = {"sent": 0, "dropped": 0, "duplicated": 0, "reordered": 0}

    def _schedule(self, at: int, kind: str, payload: bytes) -> None:
        self._seq += 1
        heapq.heappush(self.events, (at, self._seq, kind, payload))

    def _inject(self, payload: bytes, kind: str) -> None:
        copies = 1
        if self.rng.random() * 100 < self.duplicate_pct:
            copies = 2
            self.stats["duplicated"] += 1
        for _ in range(copies):
            if self.rng.random() * 100 < self.drop_pct:
                self.stats["dropped"] += 1
                continue
            delay = self.latency
            if self.rng.random() * 100 < self.reorder_pct:
                delay += self.rng.randint(1, self.reorder_max_delay)
                self.stats["reordered"] += 1
            self._schedule(self.clock.now + delay, kind, payload)

    def _deliver(self, kind: str, payload: bytes) -> str | None:
        """Process one due event; returns the reply nonce when a reply lands."""
        if kind == "req":
            reply = self.slot.handle(payload)
            self._inject(reply, "reply")
            return None
        return wire.peek_nonce(payload)

    def drain_until(self, deadline: int) -> None:
        while self.events and self.events[0][0] <= deadline:
            at, _, kind, payload = heapq.heappop(self.events)
            self.clock.now = max(self.clock.now, at)
            self._deliver(kind, payload)
        self.clock.now = max(self.clock.now, deadline)

    def send(self, data: bytes, timeout: float | None = None) -> bytes:
        self.stats["sent"] += 1
        self.request_log.append(data)
        wanted = wire.peek_nonce(data)
        deadline = self.clock.now + int(timeout if timeout is not None else self.timeout)
        self._inject(data, "req")
        while self.events and self.events[0][0] <= deadline:
            at, _, kind, payload = heapq.heappop(self.events)
            self.clock.now = max(self.clock.now, at)
            nonce = self._deliver(kind, payload)
            if nonce is not None and nonce == wanted:
                return payload
        self.clock.now = max(self.clock.now, deadline)
        raise ProviderUnreachable("no reply within %d ticks" % self.timeout)


class Simulation:
    """One seeded run. Use ``run()`` once; the cores stay open afterwards so
    callers can inspect or replay against them, then ``close()``."""

    def __init__(self, config: SimConfig, workdir: str | Path | None = None):
        config.validate()
        self.config = config
        self._tmp: tempfile.TemporaryDirectory | None = None
        if workdir is None:
            self._tmp = tempfile.TemporaryDirectory(prefix="duopay-sim-")
            workdir = self._tmp.name
        self.workdir = Path(workdir)
        self.clock = SimClock()

        seed = config.seed
        provider_key, provider_pub = keypair_from_seed("%d:provider" % seed)
        merchant_key, merchant_pub = keypair_from_seed("%d:merchant" % seed)
        self.provider_registry = KeyRegistry(PROVIDER_ID, provider_key, {MERCHANT_ID: merchant_pub})
        self.merchant_registry = KeyRegistry(MERCHANT_ID, merchant_key, {PROVIDER_ID: provider_pub})

        self.catalog = self._build_catalog()
        self.batches = self._build_batches()

        def provider_factory() -> ProviderCore:
            return ProviderCore(
                ProviderConfig(
                    party_id=PROVIDER_ID,
                    registry=self.provider_registry,
                    data_dir=self.workdir / "provider",
                    hold_ttl=config.hold_ttl,
                    fee_rate_bp=config.fee_rate_bp,
                    fsync=config.fsync,
                    clock=self.clock,
                    rng=random.Random("%d:provider-rng" % seed),
                )
            )

        self.slot = ProviderSlot(provider_factory, config.provider_crash_points)
        self.channel = FaultyChannel(
            self.slot,
            self.clock,
            random.Random("%d:channel" % seed),
            drop_pct=config.drop_pct,
            duplicate_pct=config.duplicate_pct,
            reorder_pct=config.reorder_pct,
            latency=config.latency,
            reorder_max_delay=config.reorder_max_delay,
            timeout=config.request_timeout,
        )
        self.merchant = MerchantCore(
            MerchantConfig(
                party_id=MERCHANT_ID,
                registry=self.merchant_registry,
                provider_id=PROVIDER_ID,
                data_dir=self.workdir / "merchant",
                catalog=self.catalog,
                request_timeout=config.request_timeout,
                settle_retries=config.settle_retries,
                clock=self.clock,
                rng=random.Random("%d:merchant-rng" % seed),
            ),
            self.channel,
        )
        self._schedule_rng = random.Random("%d:schedule" % seed)

    # ------------------------------------------------------------------

    def _build_catalog(self) -> list[CatalogItem]:
        rng = random.Random("%d:catalog" % self.config.seed)
        items = []
        for i in range(self.config.num_items):
            price = rng.randint(self.config.price_min, self.config.price_max)
            items.append(CatalogItem("item-%03d" % i, "Simulated item %d" % i, Money(price)))
        return items

    def _build_batches(self):
        config = self.config
        per_denom: dict[int, int] = {}
        for i in range(config.num_cards):
            denom = config.denominations[i % len(config.denominations)]
            per_denom[denom] = per_denom.get(denom, 0) + 1
        batches = []
        for index, (denom, count) in enumerate(sorted(per_denom.items())):
            batches.append(
                issue_batch(
                    PROVIDER_ID,
                    Money(denom),
                    count,
                    seed=b"%d:batch:%d" % (config.seed, index),
                    batch_id=index,
                )
            )
        return batches

    # ------------------------------------------------------------------

    def run(self) -> SimReport:
        started = time.monotonic()
        config = self.config
        provider = self.slot.core

        all_cards = []
        for batch in self.batches:
            provider = self.slot.core
            provider.load_cards(batch)
            all_cards.extend(batch.cards)
        # activation is customer-to-provider and does not cross the faulty
        # merchant channel
        for card in all_cards:
            self.slot.core.activate_card(card.card_number, card.secret, SIM_PASSWORD)

        customers = [[] for _ in range(config.num_customers)]
        for i, card in enumerate(all_cards):
            customers[i % config.num_customers].append(card)

        declines: dict[str, int] = {}
        receipts = 0
        periods: list[dict] = []
        discrepancy_counts = {kind.value: 0 for kind in DiscrepancyKind}

        per_period = -(-config.num_purchases // config.settlement_periods)
        period_start = self.clock.now
        done = 0
        for chunk_start in range(0, config.num_purchases, per_period or 1):
            chunk = min(per_period, config.num_purchases - chunk_start)
            for _ in range(chunk):
                customer = self._schedule_rng.randrange(config.num_customers)
                card = self._schedule_rng.choice(customers[customer])
                item = self._schedule_rng.choice(self.catalog)
                try:
                    self.merchant.checkout(
                        item.item_id, card.card_number, card.secret, SIM_PASSWORD, PROVIDER_ID
                    )
                    receipts += 1
                except PaymentDeclined as exc:
                    declines[exc.reason] = declines.get(exc.reason, 0) + 1
                except ProviderUnreachable:
                    declines["unreachable"] = declines.get("unreachable", 0) + 1
                except BadProviderSignature:
                    declines["bad_provider_signature"] = (
                        declines.get("bad_provider_signature", 0) + 1
                    )
                done += 1
                self.clock.advance(config.purchase_gap)
            self.channel.drain_until(self.clock.now)
            self.slot.core.expire_holds(self.clock.now)
            try:
                summary = self.merchant.settle_period(period_start, self.clock.now)
            except ProviderUnreachable:
                # every retry lost; captured value stays parked as undemanded
                periods.append(
                    {
                        "start": period_start,
                        "end": self.clock.now,
                        "settled": False,
                        "matched": 0,
                        "newly_settled": 0,
                        "payout_minor": 0,
                        "fee_minor": 0,
                        "discrepancies": 0,
                        "undemanded": 0,
                    }
                )
                period_start = self.clock.now
                if done >= config.num_purchases:
                    break
                continue
            for disc in summary["discrepancies"]:
                discrepancy_counts[disc["kind"]] += 1
            periods.append(
                {
                    "start": summary["period_start"],
                    "end": summary["period_end"],
                    "settled": True,
                    "matched": summary["matched"],
                    "newly_settled": summary["newly_settled"],
                    "payout_minor": summary["payout_minor"],
                    "fee_minor": summary["fee_minor"],
                    "discrepancies": len(summary["discrepancies"]),
                    "undemanded": summary["undemanded_count"],
                }
            )
            period_start = self.clock.now
            if done >= config.num_purchases:
                break

        # let every straggler land and every hold die before the final audit
        self.clock.advance(config.hold_ttl + config.reorder_max_delay + 2)
        self.channel.drain_until(self.clock.now)
        self.slot.core.expire_holds(self.clock.now)

        conservation = check_conservation(self.slot.core)
        provider = self.slot.core

        double_spend_violations = sum(
            1
            for number, card in provider.cards.items()
            if provider.captured_by_card.get(number, 0) > card.denomination
            or card.balance < 0
        )
        merchant_records = self.merchant.ledger_records()
        duplicate_txn_ids = len(merchant_records) - len({r.txn_id for r in merchant_records})
        request_ids = [r.request_id for r in merchant_records]
        duplicate_request_ids = len(request_ids) - len(set(request_ids))
        captured_total = sum(provider.captured_by_card.values())

        faults_active = config.drop_pct or config.duplicate_pct or config.reorder_pct
        total_discrepancies = sum(discrepancy_counts.values())

        final_balances = [
            provider.cards[n].balance for n in sorted(provider.cards)
        ]

        body = {
            "v": 1,
            "seed": config.seed,
            "config_digest": config.digest(),
            "purchases_attempted": config.num_purchases,
            "receipts": receipts,
            "declines": declines,
            "faults": dict(self.channel.stats),
            "issued_value": conservation["issued"],
            "remaining_value": conservation["available"],
            "held_value_final": conservation["held"],
            "captured_value": captured_total,
            "payout_total": conservation["payouts"],
            "fee_total": conservation["fees"],
            "undemanded_value": conservation["undemanded"],
            "conservation_residual": conservation["residual"],
            "discrepancies": discrepancy_counts,
            "periods": periods,
            "crash_recoveries": self.slot.recoveries,
            "crash_digest_mismatches": self.slot.digest_mismatches,
            "invariants": {
                "conservation_ok": conservation["residual"] == 0,
                "no_live_holds": conservation["held"] == 0,
                "double_spend_violations": double_spend_violations,
                "duplicate_txn_ids": duplicate_txn_ids,
                "duplicate_request_ids": duplicate_request_ids,
                "provider_invariant_violations": provider.invariant_violations,
                "honest_run_zero_discrepancies": (
                    total_discrepancies == 0 if not faults_active else True
                ),
            },
            "final_balances": final_balances,
            "provider_digest": provider.state_digest(),
            "merchant_digest": self.merchant.state_digest(),
        }
        duration_ms = int((time.monotonic() - started) * 1000)
        return SimReport(body=body, duration_ms=duration_ms)

    def close(self) -> None:
        self.slot.close()
        self.merchant.close()
        if self._tmp is not None:
            self._tmp.cleanup()

    def __enter__(self) -> "Simulation":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def check_conservation(provider: ProviderCore) -> dict:
    """Exact value audit: issued == available + held + payouts + fees +
    captured-but-unsettled, in minor units. Holds count as still-owned
    customer value; after they expire or settle the identity tightens to the
    final report form."""
    totals = provider.value_totals()
    residual = totals["issued"] - (
        totals["available"]
        + totals["held"]
        + totals["payouts"]
        + totals["fees"]
        + totals["undemanded"]
    )
    return {**totals, "residual": residual, "pass": residual == 0}


def run_simulation(config: SimConfig, workdir: str | Path | None = None) -> SimReport:
    with Simulation(config, workdir=workdir) as sim:
        return sim.run()


# ---------------------------------------------------------------------------
# multi-threaded stress mode over loopback TCP
# ---------------------------------------------------------------------------

@dataclass
class StressResult:
    workers: int
    requests: int
    captures: int
    insufficient: int
    errors: int
    final_available: int
    negative_balance_events: int
    duration_ms: int

    def to_wire(self) -> dict:
        return self.__dict__.copy()


def run_stress(
    *,
    workers: int = 32,
    card_balance: int = 1000,
    request_amount: int = 100,
    threads: int = 8,
    plaintext: bool = True,
    workdir: str | Path | None = None,
) -> StressResult:
    """Overlapping credit requests from many threads against one card,
    through the real TCP front end. Checks safety, not determinism."""
    import threading

    from .channel import ProviderTCPServer, TcpProviderClient
    from .records import (
        AuthorizationDecision,
        CreditRequest,
        TransactionRecord,
        card_ref,
        derive_txn_id,
        sign_record,
    )

    started = time.monotonic()
    tmp = None
    if workdir is None:
        tmp = tempfile.TemporaryDirectory(prefix="duopay-stress-")
        workdir = tmp.name
    workdir = Path(workdir)

    provider_key, provider_pub = keypair_from_seed("stress:provider")
    merchant_key, merchant_pub = keypair_from_seed("stress:merchant")
    provider_registry = KeyRegistry(PROVIDER_ID, provider_key, {MERCHANT_ID: merchant_pub})
    merchant_registry = KeyRegistry(MERCHANT_ID, merchant_key, {PROVIDER_ID: provider_pub})

    core = ProviderCore(
        ProviderConfig(
            party_id=PROVIDER_ID,
            registry=provider_registry,
            data_dir=workdir / "provider",
            fsync=False,
        )
    )
    batch = issue_batch(PROVIDER_ID, Money(card_balance), 1, seed=b"stress-card")
    core.load_cards(batch)
    card = batch.cards[0]
    core.activate_card(card.card_number, card.secret, SIM_PASSWORD)

    server = ProviderTCPServer(
        ("127.0.0.1", 0),
        core,
        plaintext=plaintext,
        allowlist=["127.0.0.1"],
        max_workers=threads,
    )
    server_thread = threading.Thread(target=server.serve_forever, daemon=True)
    server_thread.start()

    counters = {"captures": 0, "insufficient": 0, "errors": 0, "requests": 0}
    counters_lock = threading.Lock()

    def bump(key: str, by: int = 1) -> None:
        with counters_lock:
            counters[key] += by

    def worker(index: int) -> None:
        client = TcpProviderClient(
            ("127.0.0.1", server.port),
            merchant_registry,
            PROVIDER_ID,
            plaintext=plaintext,
            timeout=30,
        )
        attempt = 0
        while True:
            request_id = "stress-%03d-%06d" % (index, attempt)
            attempt += 1
            now = int(time.time())
            request = CreditRequest(
                request_id=request_id,
                provider_id=PROVIDER_ID,
                card_number=card.card_number,
                secret=card.secret,
                password=SIM_PASSWORD,
                amount=Money(request_amount),
                merchant_id=MERCHANT_ID,
                item_id="stress-item",
                timestamp=now,
            )
            try:
                bump("requests")
                reply = wire.decode_envelope(
                    client.send(
                        wire.build_envelope(
                            wire.CREDIT_REQUEST,
                            request.to_wire(),
                            merchant_registry,
                            timestamp=now,
                        )
                    ),
                    merchant_registry,
                )
                body = wire.expect_reply(reply, wire.AUTH_DECISION)
                decision = AuthorizationDecision.from_wire(body)
                if decision.verdict.value == "INSUFFICIENT_FUNDS":
                    bump("insufficient")
                    return
                if decision.verdict.value != "AVAILABLE":
                    bump("errors")
                    return
                record = TransactionRecord(
                    txn_id=derive_txn_id(MERCHANT_ID, request_id),
                    request_id=request_id,
                    timestamp=now,
                    amount=Money(request_amount),
                    merchant_id=MERCHANT_ID,
                    item_id="stress-item",
                    card_ref=card_ref(card.card_number),
                    provider_id=PROVIDER_ID,
                    state=TxnState.AUTHORIZED,
                )
                record = record.with_signature(
                    "merchant", sign_record(record, merchant_registry)
                )
                bump("requests")
                confirm = wire.decode_envelope(
                    client.send(
                        wire.build_envelope(
                            wire.CAPTURE,
                            {"hold_id": decision.hold_id, "record": record.to_wire()},
                            merchant_registry,
                            timestamp=now,
                        )
                    ),
                    merchant_registry,
                )
                wire.expect_reply(confirm, wire.CAPTURE_CONFIRM)
                bump("captures")
            except DuopayError as exc:
                log.info("stress worker %d stopped: %s", index, exc)
                bump("errors")
                return

    threads_list = [
        threading.Thread(target=worker, args=(i,), daemon=True) for i in range(workers)
    ]
    for t in threads_list:
        t.start()
    for t in threads_list:
        t.join()

    server.shutdown()
    server.server_close()

    final_available = core.cards[card.card_number].balance - core._held_amount(
        card.card_number
    )
    result = StressResult(
        workers=workers,
        requests=counters["requests"],
        captures=counters["captures"],
        insufficient=counters["insufficient"],
        errors=counters["errors"],
        final_available=final_available,
        negative_balance_events=core.invariant_violations,
        duration_ms=int((time.monotonic() - started) * 1000),
    )
    core.close()
    if tmp is not None:
        tmp.cleanup()
    return result
