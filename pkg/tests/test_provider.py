"""Provider core tests.

The randomized schedules are checked against a single-threaded reference
ledger: a plain dict of balances and holds replayed from the same operation
sequence, written with none of the provider's machinery.
"""

import random

import pytest

from duopay.cards import issue_batch
from duopay.errors import (
    AlreadyActivated,
    AuthFailure,
    BadMerchantSignature,
    HoldExpired,
    RecordMismatch,
    SecretMismatch,
    UnknownHold,
    WeakPassword,
)
from duopay.money import Money
from duopay.provider import ProviderCore
from duopay.records import (
    CreditRequest,
    RecordVerdict,
    TransactionRecord,
    TxnState,
    Verdict,
    card_ref,
    derive_txn_id,
    sign_record,
    verify_record,
)
from duopay.settlement import SettlementDemand

from conftest import (
    KIOSK_ID,
    MERCHANT_ID,
    PROVIDER_ID,
    activate_all,
    load_test_cards,
    make_provider,
)

PASSWORD = "pw-1234"


def credit_request(card, amount, request_id, ts, item="sku-1", password=PASSWORD):
    return CreditRequest(
        request_id=request_id,
        provider_id=PROVIDER_ID,
        card_number=card.card_number,
        secret=card.secret,
        password=password,
        amount=Money(amount),
        merchant_id=MERCHANT_ID,
        item_id=item,
        timestamp=ts,
    )


def merchant_record(keyring, decision, request, ts):
    record = TransactionRecord(
        txn_id=derive_txn_id(MERCHANT_ID, request.request_id),
        request_id=request.request_id,
        timestamp=ts,
        amount=request.amount,
        merchant_id=MERCHANT_ID,
        item_id=request.item_id,
        card_ref=card_ref(request.card_number),
        provider_id=PROVIDER_ID,
        state=TxnState.AUTHORIZED,
    )
    return record.with_signature("merchant", sign_record(record, keyring["merchant"]))


def purchase(provider, keyring, card, amount, request_id, clock):
    request = credit_request(card, amount, request_id, clock.now)
    decision = provider.authorize(request)
    assert decision.verdict == Verdict.AVAILABLE, decision.verdict
    record = merchant_record(keyring, decision, request, clock.now)
    return provider.capture(decision.hold_id, record)


def conservation_holds(provider):
    for number, card in provider.cards.items():
        held = provider._held_amount(number)
        captured = provider.captured_by_card.get(number, 0)
        if card.denomination != (card.balance - held) + held + captured:
            return False
        if card.balance - held < 0:
            return False
    return True


# --- activation ---------------------------------------------------------------

def test_activate_happy_path(provider, keyring):
    batch = load_test_cards(provider)
    card = batch.cards[0]
    ack = provider.activate_card(card.card_number, card.secret, PASSWORD)
    assert ack["state"] == "ACTIVATED"
    assert provider.cards[card.card_number].state == "ACTIVATED"


def test_activate_twice_rejected(provider, keyring):
    batch = load_test_cards(provider)
    card = batch.cards[0]
    provider.activate_card(card.card_number, card.secret, PASSWORD)
    with pytest.raises(AlreadyActivated):
        provider.activate_card(card.card_number, card.secret, "other-pass")


def test_activate_wrong_secret(provider):
    batch = load_test_cards(provider)
    card = batch.cards[0]
    with pytest.raises(SecretMismatch):
        provider.activate_card(card.card_number, "A" * 26, PASSWORD)
    assert provider.cards[card.card_number].state == "ISSUED"


def test_activate_weak_password(provider):
    batch = load_test_cards(provider)
    card = batch.cards[0]
    with pytest.raises(WeakPassword):
        provider.activate_card(card.card_number, card.secret, "abc")


# --- authorize -----------------------------------------------------------------

def test_authorize_places_hold(provider, keyring, clock):
    batch = load_test_cards(provider, denomination=5000)
    activate_all(provider, batch)
    card = batch.cards[0]
    decision = provider.authorize(credit_request(card, 2000, "r-1", clock.now))
    assert decision.verdict == Verdict.AVAILABLE
    assert decision.hold_expiry == clock.now + 900
    available = provider.balance_inquiry(card.card_number, card.secret, PASSWORD)
    assert available.amount_minor == 3000
    assert conservation_holds(provider)


def test_authorize_insufficient_funds(provider, clock):
    batch = load_test_cards(provider, denomination=100)
    activate_all(provider, batch)
    card = batch.cards[0]
    decision = provider.authorize(credit_request(card, 200, "r-1", clock.now))
    assert decision.verdict == Verdict.INSUFFICIENT_FUNDS
    assert provider.balance_inquiry(card.card_number, card.secret, PASSWORD).amount_minor == 100


def test_authorize_zero_amount_invalid(provider, clock):
    batch = load_test_cards(provider)
    activate_all(provider, batch)
    request = CreditRequest(
        request_id="r-z",
        provider_id=PROVIDER_ID,
        card_number=batch.cards[0].card_number,
        secret=batch.cards[0].secret,
        password=PASSWORD,
        amount=Money(0),
        merchant_id=MERCHANT_ID,
        item_id="sku",
        timestamp=clock.now,
    )
    assert provider.authorize(request).verdict == Verdict.INVALID_REQUEST


def test_authorize_stale_timestamp_invalid(provider, clock):
    batch = load_test_cards(provider)
    activate_all(provider, batch)
    card = batch.cards[0]
    request = credit_request(card, 100, "r-stale", clock.now - 301)
    assert provider.authorize(request).verdict == Verdict.INVALID_REQUEST


def test_authorize_auth_failures_undifferentiated(provider, clock):
    batch = load_test_cards(provider)
    card = batch.cards[0]
    # unactivated card
    decision = provider.authorize(credit_request(card, 100, "r-a", clock.now))
    assert decision.verdict == Verdict.AUTH_FAILURE
    activate_all(provider, batch)
    # wrong password
    decision = provider.authorize(
        credit_request(card, 100, "r-b", clock.now, password="nope-1234")
    )
    assert decision.verdict == Verdict.AUTH_FAILURE
    # unknown card
    bogus = credit_request(card, 100, "r-c", clock.now)
    bogus = CreditRequest(**{**bogus.__dict__, "card_number": "0" * 17})
    assert provider.authorize(bogus).verdict == Verdict.AUTH_FAILURE


def test_authorize_idempotent_by_request_id(provider, clock):
    batch = load_test_cards(provider, denomination=5000)
    activate_all(provider, batch)
    card = batch.cards[0]
    first = provider.authorize(credit_request(card, 2000, "r-dup", clock.now))
    again = provider.authorize(credit_request(card, 2000, "r-dup", clock.now))
    assert first == again
    assert len(provider.holds) == 1
    available = provider.balance_inquiry(card.card_number, card.secret, PASSWORD)
    assert available.amount_minor == 3000


# --- capture --------------------------------------------------------------------

def test_capture_happy_path(provider, keyring, clock):
    batch = load_test_cards(provider, denomination=5000)
    activate_all(provider, batch)
    card = batch.cards[0]
    captured = purchase(provider, keyring, card, 2000, "r-cap", clock)
    assert captured.state == TxnState.CAPTURED
    assert verify_record(captured, keyring["provider"]) == RecordVerdict.VALID
    assert verify_record(captured, keyring["merchant"]) == RecordVerdict.VALID
    assert provider.cards[card.card_number].balance == 3000
    assert provider.replicas[captured.txn_id] == captured
    assert conservation_holds(provider)


def test_capture_after_expiry_restores_balance(provider, keyring, clock):
    batch = load_test_cards(provider, denomination=5000)
    activate_all(provider, batch)
    card = batch.cards[0]
    request = credit_request(card, 2000, "r-exp", clock.now)
    decision = provider.authorize(request)
    record = merchant_record(keyring, decision, request, clock.now)
    clock.advance(901)
    with pytest.raises(HoldExpired):
        provider.capture(decision.hold_id, record)
    assert provider.cards[card.card_number].balance == 5000
    assert provider.balance_inquiry(card.card_number, card.secret, PASSWORD).amount_minor == 5000
    # the released hold can never be captured afterwards
    with pytest.raises(HoldExpired):
        provider.capture(decision.hold_id, record)


def test_capture_record_mismatch_keeps_hold(provider, keyring, clock):
    batch = load_test_cards(provider, denomination=5000)
    activate_all(provider, batch)
    card = batch.cards[0]
    request = credit_request(card, 2000, "r-mm", clock.now)
    decision = provider.authorize(request)
    wrong = CreditRequest(**{**request.__dict__, "amount": Money(1999)})
    record = merchant_record(keyring, decision, wrong, clock.now)
    with pytest.raises(RecordMismatch):
        provider.capture(decision.hold_id, record)
    assert decision.hold_id in provider.holds


def test_capture_bad_merchant_signature(provider, keyring, clock):
    batch = load_test_cards(provider, denomination=5000)
    activate_all(provider, batch)
    card = batch.cards[0]
    request = credit_request(card, 500, "r-sig", clock.now)
    decision = provider.authorize(request)
    record = merchant_record(keyring, decision, request, clock.now)
    bad = bytearray(record.merchant_sig)
    bad[3] ^= 0x40
    record = record.with_signature("merchant", bytes(bad))
    with pytest.raises(BadMerchantSignature):
        provider.capture(decision.hold_id, record)


def test_capture_unknown_hold(provider, keyring, clock):
    batch = load_test_cards(provider)
    activate_all(provider, batch)
    request = credit_request(batch.cards[0], 100, "r-x", clock.now)
    record = merchant_record(keyring, None, request, clock.now)
    with pytest.raises(UnknownHold):
        provider.capture("f" * 32, record)


def test_duplicate_capture_byte_identical(provider, keyring, clock):
    batch = load_test_cards(provider, denomination=5000)
    activate_all(provider, batch)
    card = batch.cards[0]
    request = credit_request(card, 750, "r-2x", clock.now)
    decision = provider.authorize(request)
    record = merchant_record(keyring, decision, request, clock.now)
    first = provider.capture(decision.hold_id, record)
    second = provider.capture(decision.hold_id, record)
    assert first.to_wire() == second.to_wire()
    assert provider.cards[card.card_number].balance == 5000 - 750


def test_card_exhaustion(provider, keyring, clock):
    batch = load_test_cards(provider, denomination=100)
    activate_all(provider, batch)
    card = batch.cards[0]
    purchase(provider, keyring, card, 100, "r-all", clock)
    assert provider.cards[card.card_number].state == "EXHAUSTED"
    decision = provider.authorize(credit_request(card, 1, "r-more", clock.now))
    assert decision.verdict == Verdict.INSUFFICIENT_FUNDS


# --- expiry ----------------------------------------------------------------------

def test_expire_no_holds(provider, clock):
    assert provider.expire_holds() == 0


def test_expire_single_hold(provider, clock):
    batch = load_test_cards(provider, denomination=5000)
    activate_all(provider, batch)
    card = batch.cards[0]
    provider.authorize(credit_request(card, 2000, "r-h", clock.now))
    assert provider.expire_holds(clock.now + 900) == 0  # expiry == now is not expired
    assert provider.expire_holds(clock.now + 901) == 1
    assert provider.balance_inquiry(card.card_number, card.secret, PASSWORD).amount_minor == 5000


def test_randomized_schedule_matches_reference_ledger(provider, keyring, clock):
    """Replay a random authorize/capture/expire schedule against a reference
    ledger that tracks balances with plain dict arithmetic."""
    rng = random.Random(777)
    batch = load_test_cards(provider, denomination=3000, count=6)
    activate_all(provider, batch)
    cards = batch.cards

    ref_available = {c.card_number: 3000 for c in cards}
    ref_captured = {c.card_number: 0 for c in cards}
    ref_holds = {}  # hold_id -> (card_number, amount, expiry, request, decision)

    for i in range(400):
        action = rng.random()
        clock.advance(rng.randrange(0, 40))
        if action < 0.55:
            card = rng.choice(cards)
            amount = rng.randrange(1, 900)
            request = credit_request(card, amount, "r-%04d" % i, clock.now)
            decision = provider.authorize(request)
            if ref_available[card.card_number] >= amount:
                assert decision.verdict == Verdict.AVAILABLE
                ref_available[card.card_number] -= amount
                ref_holds[decision.hold_id] = (
                    card.card_number,
                    amount,
                    decision.hold_expiry,
                    request,
                    decision,
                )
            else:
                assert decision.verdict == Verdict.INSUFFICIENT_FUNDS
        elif action < 0.85 and ref_holds:
            hold_id = rng.choice(sorted(ref_holds))
            number, amount, expiry, request, decision = ref_holds.pop(hold_id)
            record = merchant_record(keyring, decision, request, clock.now)
            if expiry < clock.now:
                with pytest.raises(HoldExpired):
                    provider.capture(hold_id, record)
                ref_available[number] += amount
            else:
                provider.capture(hold_id, record)
                ref_captured[number] += amount
        else:
            released = provider.expire_holds(clock.now)
            expired = [h for h, v in ref_holds.items() if v[2] < clock.now]
            assert released == len(expired)
            for hold_id in expired:
                number, amount, *_ = ref_holds.pop(hold_id)
                ref_available[number] += amount
        assert conservation_holds(provider)

    provider.expire_holds(clock.now + 10_000)
    for hold_id, (number, amount, *_rest) in ref_holds.items():
        ref_available[number] += amount
    for card in cards:
        number = card.card_number
        assert provider.cards[number].balance == ref_available[number] + 0
        assert provider.captured_by_card.get(number, 0) == ref_captured[number]
        assert (
            provider.cards[number].balance - provider._held_amount(number)
            == ref_available[number]
        )
    assert provider.invariant_violations == 0


# --- settlement routing ------------------------------------------------------------

def test_settlement_empty_demand(provider, keyring, clock):
    demand = SettlementDemand(
        merchant_id=MERCHANT_ID, period_start=0, period_end=clock.now, records=[]
    )
    demand.sign(keyring["merchant"])
    report = provider.handle_settlement(demand)
    assert report.payout.amount_minor == 0
    assert report.verify(keyring["merchant"], PROVIDER_ID)


def test_settlement_unknown_merchant(provider, keyring, clock):
    from duopay.errors import UnknownMerchant
    from duopay.keys import KeyRegistry, keypair_from_seed

    priv, pub = keypair_from_seed("stranger")
    stranger = KeyRegistry("stranger", priv, {})
    demand = SettlementDemand(
        merchant_id="stranger", period_start=0, period_end=clock.now, records=[]
    )
    demand.sign(stranger)
    with pytest.raises(UnknownMerchant):
        provider.handle_settlement(demand)


def test_settlement_replay_returns_identical_report(provider, keyring, clock):
    batch = load_test_cards(provider, denomination=5000)
    activate_all(provider, batch)
    start = clock.now
    records = [
        purchase(provider, keyring, batch.cards[0], 100 * (i + 1), "r-s%d" % i, clock)
        for i in range(3)
    ]
    clock.advance(10)
    demand = SettlementDemand(
        merchant_id=MERCHANT_ID,
        period_start=start,
        period_end=clock.now,
        records=records,
    )
    demand.sign(keyring["merchant"])
    first = provider.handle_settlement(demand)
    second = provider.handle_settlement(demand)
    assert first.to_wire() == second.to_wire()
    assert first.matched_total.amount_minor == 600
    assert first.payout + first.fee == first.matched_total
    for record in records:
        assert provider.replicas[record.txn_id].state == TxnState.SETTLED


# --- durability ----------------------------------------------------------------------

def test_restart_reproduces_state(tmp_path, keyring, clock):
    core = make_provider(tmp_path, keyring, clock)
    batch = load_test_cards(core, denomination=5000)
    activate_all(core, batch)
    card = batch.cards[0]
    request = credit_request(card, 2000, "r-d", clock.now)
    decision = core.authorize(request)
    record = merchant_record(keyring, decision, request, clock.now)
    core.capture(decision.hold_id, record)
    digest = core.state_digest()
    core.close()

    reborn = make_provider(tmp_path, keyring, clock)
    assert reborn.state_digest() == digest
    assert reborn.cards[card.card_number].balance == 3000
    reborn.close()


def test_kill_after_every_acknowledged_operation(tmp_path, keyring, clock):
    """After each acknowledged mutation, a fresh replay must reproduce the
    acknowledged state bit for bit."""
    core = make_provider(tmp_path, keyring, clock)
    batch = issue_batch(PROVIDER_ID, Money(2000), 3, seed=b"dur")
    core.load_cards(batch)

    def check():
        digest = core.state_digest()
        twin = make_provider(tmp_path, keyring, clock)
        assert twin.state_digest() == digest
        twin.close()

    check()
    for i, card in enumerate(batch.cards):
        core.activate_card(card.card_number, card.secret, PASSWORD)
        check()
        request = credit_request(card, 700, "r-k%d" % i, clock.now)
        decision = core.authorize(request)
        check()
        record = merchant_record(keyring, decision, request, clock.now)
        core.capture(decision.hold_id, record)
        check()
    core.close()


def test_snapshot_compaction_preserves_state(tmp_path, keyring, clock):
    core = make_provider(tmp_path, keyring, clock)
    batch = load_test_cards(core, denomination=5000)
    activate_all(core, batch)
    purchase_digest_before = None
    card = batch.cards[0]
    request = credit_request(card, 100, "r-snap", clock.now)
    decision = core.authorize(request)
    record = merchant_record(keyring, decision, request, clock.now)
    core.capture(decision.hold_id, record)
    purchase_digest_before = core.state_digest()
    core.snapshot()
    assert core.state_digest() == purchase_digest_before
    core.close()
    reborn = make_provider(tmp_path, keyring, clock)
    assert reborn.state_digest() == purchase_digest_before
    reborn.close()


# --- wire front end --------------------------------------------------------------------

def test_wire_credit_request_and_duplicate(provider, keyring, clock):
    from duopay import wire

    batch = load_test_cards(provider, denomination=5000)
    activate_all(provider, batch)
    card = batch.cards[0]
    request = credit_request(card, 1500, "r-w", clock.now)
    envelope = wire.build_envelope(
        wire.CREDIT_REQUEST,
        request.to_wire(),
        keyring["merchant"],
        timestamp=clock.now,
    )
    reply1 = provider.handle_envelope(envelope)
    reply2 = provider.handle_envelope(envelope)
    assert reply1 == reply2
    decoded = wire.decode_envelope(reply1, keyring["merchant"])
    assert decoded.type == wire.AUTH_DECISION
    assert decoded.body["verdict"] == "AVAILABLE"
    assert len(provider.holds) == 1


def test_wire_rejects_unknown_sender(provider, keyring, clock):
    from duopay import wire
    from duopay.keys import KeyRegistry, keypair_from_seed

    priv, pub = keypair_from_seed("intruder")
    intruder = KeyRegistry("intruder", priv, {PROVIDER_ID: keyring["provider"].public_hex()})
    envelope = wire.build_envelope(
        wire.BALANCE, {"card_number": "1", "secret": "s", "password": "p"}, intruder
    )
    reply = wire.decode_envelope(provider.handle_envelope(envelope), keyring["merchant"])
    assert reply.type == wire.ERROR
    assert reply.body["code"] == "bad_envelope"


def test_wire_activation_and_balance(provider, keyring, clock):
    from duopay import wire

    batch = load_test_cards(provider, denomination=700)
    card = batch.cards[0]
    activate = wire.build_envelope(
        wire.ACTIVATE,
        {"card_number": card.card_number, "secret": card.secret, "password": PASSWORD},
        keyring["kiosk"],
        timestamp=clock.now,
    )
    ack = wire.decode_envelope(provider.handle_envelope(activate), keyring["kiosk"])
    assert ack.type == wire.ACTIVATE_ACK
    balance = wire.build_envelope(
        wire.BALANCE,
        {"card_number": card.card_number, "secret": card.secret, "password": PASSWORD},
        keyring["kiosk"],
        timestamp=clock.now,
    )
    result = wire.decode_envelope(provider.handle_envelope(balance), keyring["kiosk"])
    assert result.type == wire.BALANCE_RESULT
    assert result.body["available"] == 700


def test_load_cards_duplicate_ingest(provider):
    batch = load_test_cards(provider, count=5)
    loaded, duplicates = provider.load_cards(batch)
    assert loaded == 0
    assert len(duplicates) == 5
