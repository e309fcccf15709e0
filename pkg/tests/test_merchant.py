import random

import pytest

from duopay.errors import (
    BadProviderSignature,
    BadReportSignature,
    MalformedDemand,
    PaymentDeclined,
    ProviderUnreachable,
    UnknownItem,
    UnknownPeriod,
)
from duopay.merchant import (
    CatalogItem,
    DirectClient,
    MerchantConfig,
    MerchantCore,
    load_catalog,
    receipt_token,
    save_catalog,
)
from duopay.money import Money
from duopay.records import TxnState
from duopay.settlement import DiscrepancyKind, Discrepancy, SettlementReport
from duopay import wire

from conftest import MERCHANT_ID, PROVIDER_ID, activate_all, load_test_cards, make_provider

PASSWORD = "pw-1234"

CATALOG = [
    CatalogItem("sku-a", "Coffee", Money(250)),
    CatalogItem("sku-b", "Notebook", Money(900)),
    CatalogItem("sku-c", "Pen", Money(120)),
]


def make_merchant(tmp_path, keyring, clock, client, catalog=None, subdir="merch"):
    config = MerchantConfig(
        party_id=MERCHANT_ID,
        registry=keyring["merchant"],
        provider_id=PROVIDER_ID,
        data_dir=tmp_path / subdir,
        catalog=catalog if catalog is not None else list(CATALOG),
        request_timeout=2,
        clock=clock,
        rng=random.Random(99),
    )
    return MerchantCore(config, client)


@pytest.fixture
def stack(tmp_path, keyring, clock):
    provider = make_provider(tmp_path, keyring, clock)
    batch = load_test_cards(provider, denomination=5000, count=3)
    activate_all(provider, batch)
    merchant = make_merchant(tmp_path, keyring, clock, DirectClient(provider))
    yield provider, merchant, batch
    merchant.close()
    provider.close()


# --- catalog -------------------------------------------------------------------

def test_empty_catalog(tmp_path, keyring, clock):
    merchant = make_merchant(tmp_path, keyring, clock, None, catalog=[])
    assert merchant.list_catalog() == []


def test_catalog_sorted_by_item_id(stack):
    _, merchant, _ = stack
    ids = [i.item_id for i in merchant.list_catalog()]
    assert ids == sorted(ids) and len(ids) == 3


def test_catalog_file_round_trip(tmp_path):
    path = tmp_path / "catalog.json"
    save_catalog(CATALOG, path)
    loaded = load_catalog(path)
    assert loaded == sorted(CATALOG, key=lambda i: i.item_id)


# --- checkout ------------------------------------------------------------------

def test_checkout_happy_path(stack, clock):
    provider, merchant, batch = stack
    card = batch.cards[0]
    receipt = merchant.checkout("sku-a", card.card_number, card.secret, PASSWORD, PROVIDER_ID)
    assert receipt.status == "CAPTURED"
    assert receipt.amount == Money(250)
    records = merchant.ledger_records()
    assert len(records) == 1 and records[0].state == TxnState.CAPTURED
    assert provider.cards[card.card_number].balance == 4750
    # receipt token recomputable from the ledger entry
    assert receipt.receipt_token == receipt_token(records[0])
    assert merchant.receipt(receipt.txn_id) == receipt


def test_checkout_unknown_item(stack):
    _, merchant, batch = stack
    card = batch.cards[0]
    with pytest.raises(UnknownItem):
        merchant.checkout("sku-zz", card.card_number, card.secret, PASSWORD, PROVIDER_ID)


def test_checkout_insufficient_funds(tmp_path, keyring, clock):
    provider = make_provider(tmp_path, keyring, clock)
    batch = load_test_cards(provider, denomination=100)
    activate_all(provider, batch)
    merchant = make_merchant(tmp_path, keyring, clock, DirectClient(provider))
    card = batch.cards[0]
    with pytest.raises(PaymentDeclined) as exc_info:
        merchant.checkout("sku-b", card.card_number, card.secret, PASSWORD, PROVIDER_ID)
    assert exc_info.value.reason == "insufficient_funds"
    assert merchant.ledger_records() == []
    assert provider.cards[card.card_number].balance == 100


def test_checkout_auth_failure(stack):
    _, merchant, batch = stack
    card = batch.cards[0]
    with pytest.raises(PaymentDeclined) as exc_info:
        merchant.checkout("sku-a", card.card_number, card.secret, "wrong-pass", PROVIDER_ID)
    assert exc_info.value.reason == "auth_failure"
    assert merchant.ledger_records() == []


def test_checkout_provider_unreachable(tmp_path, keyring, clock):
    class DeadClient:
        def send(self, data, timeout=None):
            raise ProviderUnreachable("connection refused")

    merchant = make_merchant(tmp_path, keyring, clock, DeadClient())
    with pytest.raises(ProviderUnreachable):
        merchant.checkout("sku-a", "1", "s", PASSWORD, PROVIDER_ID)
    assert merchant.ledger_records() == []


def test_checkout_fail_closed_on_capture_timeout(stack, clock):
    """Authorize goes through, capture times out: no ledger entry, and the
    hold frees the funds after expiry."""
    provider, merchant, batch = stack

    class CaptureDropper:
        def __init__(self, core):
            self.core = core

        def send(self, data, timeout=None):
            if b'"CAPTURE"' in data:
                raise ProviderUnreachable("timed out")
            return self.core.handle_envelope(data)

    merchant.client = CaptureDropper(provider)
    card = batch.cards[0]
    with pytest.raises(ProviderUnreachable):
        merchant.checkout("sku-a", card.card_number, card.secret, PASSWORD, PROVIDER_ID)
    assert merchant.ledger_records() == []
    assert len(provider.holds) == 1
    clock.advance(901)
    provider.expire_holds()
    assert provider.cards[card.card_number].balance == 5000


def test_checkout_rejects_tampered_provider_reply(stack):
    provider, merchant, batch = stack

    class Tamperer:
        def __init__(self, core):
            self.core = core

        def send(self, data, timeout=None):
            reply = self.core.handle_envelope(data)
            return reply.replace(b'"sig":"', b'"sig":"00', 1)

    merchant.client = Tamperer(provider)
    card = batch.cards[0]
    with pytest.raises(BadProviderSignature):
        merchant.checkout("sku-a", card.card_number, card.secret, PASSWORD, PROVIDER_ID)
    assert merchant.ledger_records() == []


def test_duplicate_confirm_yields_single_ledger_entry(stack):
    provider, merchant, batch = stack
    card = batch.cards[0]
    receipt = merchant.checkout("sku-a", card.card_number, card.secret, PASSWORD, PROVIDER_ID)
    record = merchant.ledger_records()[0]
    # a duplicated confirm on the wire replays the same record append
    merchant._commit({"op": "record", "record": record.to_wire()})
    assert len(merchant.ledger_records()) == 1
    assert merchant.receipt(receipt.txn_id) == receipt


def test_request_ids_survive_restart(stack, tmp_path, keyring, clock):
    provider, merchant, batch = stack
    card = batch.cards[0]
    merchant.checkout("sku-a", card.card_number, card.secret, PASSWORD, PROVIDER_ID)
    counter_before = merchant.counter
    used = {r.request_id for r in merchant.ledger_records()}
    merchant.close()

    reborn = make_merchant(tmp_path, keyring, clock, DirectClient(provider))
    assert reborn.counter == counter_before
    reborn.checkout("sku-b", card.card_number, card.secret, PASSWORD, PROVIDER_ID)
    used |= {r.request_id for r in reborn.ledger_records()}
    assert len(used) == 2
    reborn.close()


# --- settlement ----------------------------------------------------------------

def test_build_demand_empty_period(stack, clock):
    _, merchant, _ = stack
    demand = merchant.build_demand(0, clock.now)
    assert demand.records == []
    assert demand.verify(merchant.registry)


def test_build_demand_sums_captures(stack, clock):
    provider, merchant, batch = stack
    card = batch.cards[0]
    start = clock.now
    for item_id in ("sku-a", "sku-b", "sku-c"):
        merchant.checkout(item_id, card.card_number, card.secret, PASSWORD, PROVIDER_ID)
        clock.advance(5)
    demand = merchant.build_demand(start, clock.now)
    assert len(demand.records) == 3
    assert sum(r.amount.amount_minor for r in demand.records) == 250 + 900 + 120


def test_build_demand_requires_closed_period(stack, clock):
    _, merchant, _ = stack
    with pytest.raises(MalformedDemand):
        merchant.build_demand(0, clock.now + 100)


def test_settle_period_end_to_end(stack, clock):
    provider, merchant, batch = stack
    card = batch.cards[0]
    start = clock.now
    for item_id in ("sku-a", "sku-b"):
        merchant.checkout(item_id, card.card_number, card.secret, PASSWORD, PROVIDER_ID)
        clock.advance(5)
    summary = merchant.settle_period(start, clock.now)
    assert summary["matched"] == 2
    assert summary["newly_settled"] == 2
    total = 250 + 900
    assert summary["payout_minor"] + summary["fee_minor"] == total
    assert all(r.state == TxnState.SETTLED for r in merchant.ledger_records())
    # settled records are excluded from the next demand
    clock.advance(5)
    demand = merchant.build_demand(start, clock.now)
    assert demand.records == []


def test_apply_settlement_rejects_tampered_report(stack, clock):
    provider, merchant, batch = stack
    card = batch.cards[0]
    start = clock.now
    merchant.checkout("sku-a", card.card_number, card.secret, PASSWORD, PROVIDER_ID)
    clock.advance(5)
    demand = merchant.build_demand(start, clock.now)
    report = provider.handle_settlement(demand)
    tampered = SettlementReport.from_wire(report.to_wire())
    tampered.payout = Money(tampered.payout.amount_minor + 1)
    with pytest.raises(BadReportSignature):
        merchant.apply_settlement(tampered)


def test_apply_settlement_unknown_period(stack, keyring, clock):
    provider, merchant, _ = stack
    from duopay.settlement import emit_report

    report = emit_report(
        [], [], 100, keyring["provider"], merchant_id=MERCHANT_ID, period_start=1, period_end=2
    )
    with pytest.raises(UnknownPeriod):
        merchant.apply_settlement(report)


def test_discrepant_record_stays_captured(stack, clock):
    provider, merchant, batch = stack
    card = batch.cards[0]
    start = clock.now
    merchant.checkout("sku-a", card.card_number, card.secret, PASSWORD, PROVIDER_ID)
    clock.advance(5)
    txn_id = merchant.ledger_records()[0].txn_id
    # provider loses its replica before settlement
    del provider.replicas[txn_id]
    summary = merchant.settle_period(start, clock.now)
    assert summary["matched"] == 0
    assert [d["kind"] for d in summary["discrepancies"]] == [
        DiscrepancyKind.MISSING_REPLICA.value
    ]
    assert merchant.records[txn_id].state == TxnState.CAPTURED
    assert txn_id in summary["unsettled_txns"]


def test_demand_partition_across_periods(stack, clock):
    provider, merchant, batch = stack
    card = batch.cards[0]
    t0 = clock.now
    merchant.checkout("sku-a", card.card_number, card.secret, PASSWORD, PROVIDER_ID)
    clock.advance(100)
    t1 = clock.now
    merchant.checkout("sku-b", card.card_number, card.secret, PASSWORD, PROVIDER_ID)
    clock.advance(100)
    t2 = clock.now
    d1 = merchant.build_demand(t0, t1)
    d2 = merchant.build_demand(t1, t2)
    ids1 = {r.txn_id for r in d1.records}
    ids2 = {r.txn_id for r in d2.records}
    assert ids1 and ids2 and not (ids1 & ids2)


def test_ledger_export(stack, tmp_path):
    provider, merchant, batch = stack
    card = batch.cards[0]
    merchant.checkout("sku-a", card.card_number, card.secret, PASSWORD, PROVIDER_ID)
    out = tmp_path / "ledger.cdn"
    count = merchant.export_ledger(out)
    assert count == 1
    from duopay.canon import canonical_decode

    payload = canonical_decode(out.read_bytes().rstrip(b"\n"))
    assert payload["merchant_id"] == MERCHANT_ID
    assert len(payload["records"]) == 1
