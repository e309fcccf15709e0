import pytest

from duopay.cards import (
    SECRET_ALPHABET,
    SECRET_LEN,
    CardBatch,
    export_batch,
    issue_batch,
    load_batch,
    luhn_check_digit,
    luhn_valid,
    make_card_number,
    provider_prefix,
)
from duopay.errors import DenominationOutOfRange, MalformedBatchFile
from duopay.money import Money


def test_dollar_one_card():
    batch = issue_batch("cards-a", Money(100), 1, seed=b"x")
    assert len(batch.cards) == 1
    assert batch.denomination == Money(100)


def test_empty_batch():
    batch = issue_batch("cards-a", Money(500), 0, seed=b"x")
    assert batch.cards == []


def test_denomination_bounds():
    with pytest.raises(DenominationOutOfRange):
        issue_batch("cards-a", Money(99), 1, seed=b"x")
    with pytest.raises(DenominationOutOfRange):
        issue_batch("cards-a", Money(100_001), 1, seed=b"x")
    issue_batch("cards-a", Money(100), 1, seed=b"x")
    issue_batch("cards-a", Money(100_000), 1, seed=b"x")


def test_seed_determinism_and_disjoint_secrets():
    a1 = issue_batch("cards-a", Money(1000), 10_000, seed=b"seed-1")
    a2 = issue_batch("cards-a", Money(1000), 10_000, seed=b"seed-1")
    b = issue_batch("cards-a", Money(1000), 10_000, seed=b"seed-2")
    assert a1.to_wire() == a2.to_wire()
    secrets_a = {c.secret for c in a1.cards}
    secrets_b = {c.secret for c in b.cards}
    assert len(secrets_a) == 10_000
    assert not (secrets_a & secrets_b)


def test_secret_space_collision_free_100k():
    # 130-bit secrets: 10^5 draws must not collide
    seen = set()
    for i in range(10):
        batch = issue_batch("cards-a", Money(1000), 10_000, seed=b"space-%d" % i)
        for card in batch.cards:
            assert len(card.secret) == SECRET_LEN
            assert all(ch in SECRET_ALPHABET for ch in card.secret)
            seen.add(card.secret)
    assert len(seen) == 100_000


def test_check_digit_detects_every_single_digit_mutation():
    number = make_card_number("cards-a", 42, 137)
    assert luhn_valid(number)
    for pos in range(len(number)):
        for digit in "0123456789":
            if digit == number[pos]:
                continue
            mutated = number[:pos] + digit + number[pos + 1 :]
            assert not luhn_valid(mutated), (number, mutated)


def test_luhn_check_digit_known_value():
    # classic example: 7992739871 -> check digit 3
    assert luhn_check_digit("7992739871") == "3"


def test_card_numbers_embed_provider_prefix():
    batch = issue_batch("cards-a", Money(1000), 5, seed=b"x")
    prefix = provider_prefix("cards-a")
    assert all(c.card_number.startswith(prefix) for c in batch.cards)
    assert provider_prefix("cards-a") != provider_prefix("cards-b")


def test_batch_round_trip(tmp_path):
    batch = issue_batch("cards-a", Money(2500), 50, seed=b"rt")
    path = tmp_path / "batch.cdn"
    export_batch(batch, path)
    loaded = load_batch(path)
    assert loaded.to_wire() == batch.to_wire()


def test_truncated_file_rejected(tmp_path):
    batch = issue_batch("cards-a", Money(2500), 50, seed=b"rt")
    path = tmp_path / "batch.cdn"
    export_batch(batch, path)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(MalformedBatchFile):
        load_batch(path)


def test_tampered_card_number_rejected(tmp_path):
    batch = issue_batch("cards-a", Money(2500), 3, seed=b"rt")
    wire = batch.to_wire()
    number = wire["cards"][0]["number"]
    flipped = ("1" if number[-1] != "1" else "2") + number[1:]
    wire["cards"][0]["number"] = flipped[: len(number)]
    with pytest.raises(MalformedBatchFile):
        CardBatch.from_wire(wire)
