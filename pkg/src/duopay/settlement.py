"""End-of-period settlement: reconcile a merchant's demanded records against
the provider's replicas, compute the provider's fee, and emit a signed
report.

Every demanded entry is classified exactly once. A record matches when a
replica with the same txn id exists, the signed fields are byte-identical,
both signatures verify, the replica is still CAPTURED and the timestamp
falls inside the period. Otherwise the entry gets one discrepancy, the
first failing kind in a fixed order, so classification is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping

from .canon import canonical_encode
from .errors import MalformedInput, RateOutOfRange, UnknownParty
from .keys import KeyRegistry
from .money import Money
from .records import (
    FORMAT_VERSION,
    RecordVerdict,
    TransactionRecord,
    TxnState,
    verify_record,
)


class DiscrepancyKind(str, Enum):
    MISSING_REPLICA = "MISSING_REPLICA"
    CONTENT_MISMATCH = "CONTENT_MISMATCH"
    BAD_SIGNATURE = "BAD_SIGNATURE"
    DUPLICATE_DEMAND = "DUPLICATE_DEMAND"
    ALREADY_SETTLED = "ALREADY_SETTLED"
    OUT_OF_PERIOD = "OUT_OF_PERIOD"


@dataclass(frozen=True)
class Discrepancy:
    txn_id: str
    kind: DiscrepancyKind
    detail: str

    def to_wire(self) -> dict:
        return {"txn_id": self.txn_id, "kind": self.kind.value, "detail": self.detail}

    @classmethod
    def from_wire(cls, wire: dict) -> "Discrepancy":
        try:
            return cls(
                txn_id=str(wire["txn_id"]),
                kind=DiscrepancyKind(wire["kind"]),
                detail=str(wire["detail"]),
            )
        except (KeyError, ValueError, TypeError):
            raise MalformedInput("bad discrepancy")


@dataclass
class SettlementDemand:
    merchant_id: str
    period_start: int
    period_end: int
    records: list[TransactionRecord]
    demand_sig: bytes | None = None

    def signed_payload(self) -> bytes:
        return canonical_encode(
            {
                "v": FORMAT_VERSION,
                "merchant_id": self.merchant_id,
                "period_start": self.period_start,
                "period_end": self.period_end,
                "records": [r.to_wire() for r in self.records],
            }
        )

    def to_wire(self) -> dict:
        wire = {
            "v": FORMAT_VERSION,
            "merchant_id": self.merchant_id,
            "period_start": self.period_start,
            "period_end": self.period_end,
            "records": [r.to_wire() for r in self.records],
        }
        if self.demand_sig is not None:
            wire["demand_sig"] = self.demand_sig.hex()
        return wire

    @classmethod
    def from_wire(cls, wire: dict) -> "SettlementDemand":
        if not isinstance(wire, dict) or wire.get("v") != FORMAT_VERSION:
            raise MalformedInput("bad settlement demand")
        try:
            records = [TransactionRecord.from_wire(r) for r in wire["records"]]
            sig = wire.get("demand_sig")
            return cls(
                merchant_id=str(wire["merchant_id"]),
                period_start=int(wire["period_start"]),
                period_end=int(wire["period_end"]),
                records=records,
                demand_sig=None if sig is None else bytes.fromhex(sig),
            )
        except (KeyError, TypeError, ValueError):
            raise MalformedInput("bad settlement demand")

    def sign(self, registry: KeyRegistry) -> None:
        self.demand_sig = registry.sign(self.signed_payload())

    def verify(self, registry: KeyRegistry) -> bool:
        if self.demand_sig is None:
            return False
        return registry.verify(self.merchant_id, self.signed_payload(), self.demand_sig)


@dataclass
class SettlementReport:
    merchant_id: str
    period_start: int
    period_end: int
    fee_rate_bp: int
    matched_total: Money
    fee: Money
    payout: Money
    matched: list[str]
    discrepancies: list[Discrepancy]
    undemanded: list[str] = field(default_factory=list)
    report_sig: bytes | None = None

    def signed_payload(self) -> bytes:
        return canonical_encode(self._body())

    def _body(self) -> dict:
        return {
            "v": FORMAT_VERSION,
            "merchant_id": self.merchant_id,
            "period_start": self.period_start,
            "period_end": self.period_end,
            "fee_rate_bp": self.fee_rate_bp,
            "matched_total": self.matched_total.amount_minor,
            "fee": self.fee.amount_minor,
            "payout": self.payout.amount_minor,
            "matched": list(self.matched),
            "discrepancies": [d.to_wire() for d in self.discrepancies],
            "undemanded": list(self.undemanded),
        }

    def to_wire(self) -> dict:
        wire = self._body()
        if self.report_sig is not None:
            wire["report_sig"] = self.report_sig.hex()
        return wire

    @classmethod
    def from_wire(cls, wire: dict) -> "SettlementReport":
        if not isinstance(wire, dict) or wire.get("v") != FORMAT_VERSION:
            raise MalformedInput("bad settlement report")
        try:
            sig = wire.get("report_sig")
            return cls(
                merchant_id=str(wire["merchant_id"]),
                period_start=int(wire["period_start"]),
                period_end=int(wire["period_end"]),
                fee_rate_bp=int(wire["fee_rate_bp"]),
                matched_total=Money(int(wire["matched_total"])),
                fee=Money(int(wire["fee"])),
                payout=Money(int(wire["payout"])),
                matched=[str(t) for t in wire["matched"]],
                discrepancies=[Discrepancy.from_wire(d) for d in wire["discrepancies"]],
                undemanded=[str(t) for t in wire.get("undemanded", [])],
                report_sig=None if sig is None else bytes.fromhex(sig),
            )
        except (KeyError, TypeError, ValueError):
            raise MalformedInput("bad settlement report")

    def verify(self, registry: KeyRegistry, provider_id: str) -> bool:
        if self.report_sig is None:
            return False
        return registry.verify(provider_id, self.signed_payload(), self.report_sig)


def reconcile(
    demand: SettlementDemand,
    replicas: Mapping[str, TransactionRecord],
    registry: KeyRegistry,
) -> tuple[list[TransactionRecord], list[Discrepancy]]:
    """Classify every demanded record; the caller has already checked the
    demand signature. All problems become discrepancies, never exceptions."""
    matched: list[TransactionRecord] = []
    matched_ids: set[str] = set()
    discrepancies: list[Discrepancy] = []

    def flag(txn_id: str, kind: DiscrepancyKind, detail: str) -> None:
        discrepancies.append(Discrepancy(txn_id=txn_id, kind=kind, detail=detail))

    for record in demand.records:
        txn_id = record.txn_id
        try:
            verdict = verify_record(record, registry)
        except UnknownParty as exc:
            flag(txn_id, DiscrepancyKind.BAD_SIGNATURE, "unknown signer: %s" % exc)
            continue
        if verdict != RecordVerdict.VALID or (
            record.merchant_sig is None or record.provider_sig is None
        ):
            flag(txn_id, DiscrepancyKind.BAD_SIGNATURE, verdict.value)
            continue
        replica = replicas.get(txn_id)
        if replica is None:
            flag(txn_id, DiscrepancyKind.MISSING_REPLICA, "no replica for txn")
            continue
        if replica.signed_payload() != record.signed_payload():
            flag(txn_id, DiscrepancyKind.CONTENT_MISMATCH, "signed fields differ")
            continue
        if replica.state == TxnState.SETTLED:
            flag(txn_id, DiscrepancyKind.ALREADY_SETTLED, "settled in a prior period")
            continue
        if replica.state != TxnState.CAPTURED:
            flag(txn_id, DiscrepancyKind.CONTENT_MISMATCH, "replica not captured")
            continue
        if not demand.period_start <= record.timestamp < demand.period_end:
            flag(txn_id, DiscrepancyKind.OUT_OF_PERIOD, "timestamp outside period")
            continue
        if txn_id in matched_ids:
            flag(txn_id, DiscrepancyKind.DUPLICATE_DEMAND, "txn listed more than once")
            continue
        matched_ids.add(txn_id)
        matched.append(record)

    matched.sort(key=lambda r: r.txn_id)
    return matched, discrepancies


def compute_fee(matched_total: Money, fee_rate_bp: int) -> tuple[Money, Money]:
    """Provider fee and merchant payout. Fee rounds up, in the provider's
    favor, in exact integer arithmetic: fee = ceil(total * bp / 10000)."""
    if isinstance(fee_rate_bp, bool) or not isinstance(fee_rate_bp, int):
        raise RateOutOfRange("fee rate must be an integer of basis points")
    if not 0 <= fee_rate_bp <= 10_000:
        raise RateOutOfRange("fee rate %d outside [0, 10000]" % fee_rate_bp)
    total = matched_total.amount_minor
    fee = -(-total * fee_rate_bp // 10_000)
    return Money(fee), Money(total - fee)


def emit_report(
    matched: list[TransactionRecord],
    discrepancies: list[Discrepancy],
    fee_rate_bp: int,
    signer: KeyRegistry,
    *,
    merchant_id: str,
    period_start: int,
    period_end: int,
    undemanded: list[str] | None = None,
) -> SettlementReport:
    """Deterministic signed report: records sorted by txn id, fee applied."""
    matched_total = Money(sum(r.amount.amount_minor for r in matched))
    fee, payout = compute_fee(matched_total, fee_rate_bp)
    report = SettlementReport(
        merchant_id=merchant_id,
        period_start=period_start,
        period_end=period_end,
        fee_rate_bp=fee_rate_bp,
        matched_total=matched_total,
        fee=fee,
        payout=payout,
        matched=sorted(r.txn_id for r in matched),
        discrepancies=sorted(
            discrepancies, key=lambda d: (d.txn_id, d.kind.value, d.detail)
        ),
        undemanded=sorted(undemanded or []),
    )
    report.report_sig = signer.sign(report.signed_payload())
    return report
