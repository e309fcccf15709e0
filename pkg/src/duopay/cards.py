"""Prepaid card issuance: fixed-format card numbers, scratch secrets and
batch files.

Card number layout: 6 digits of provider prefix, 4 digits of batch block,
6 digits of serial, 1 Luhn check digit. The prefix is derived from the
provider id, so every number self-identifies its issuer; the batch block
partitions the serial space so independently issued batches cannot collide.

The batch file holds plaintext secrets because it models the physical card
stock handed to shops. The provider's own store only ever ingests digests.
"""

from __future__ import annotations

import hashlib
import random
import secrets as secrets_mod
import time
from dataclasses import dataclass
from pathlib import Path

from .canon import canonical_decode, canonical_encode
from .errors import (
    DenominationOutOfRange,
    DuopayError,
    MalformedBatchFile,
)
from .money import Money

# Crockford-style base32: 32 symbols, no I/L/O/U, 5 bits per character.
SECRET_ALPHABET = "0123456789ABCDEFGHJKMNPQRSTVWXYZ"
SECRET_LEN = 26  # 26 * 5 = 130 bits of entropy
PREFIX_LEN = 6
BATCH_LEN = 4
SERIAL_LEN = 6
DENOM_MIN = 100      # $1 card
DENOM_MAX = 100_000  # $1000 card
MAX_BATCH_ID = 10**BATCH_LEN - 1
MAX_BATCH_SIZE = 10**SERIAL_LEN


def provider_prefix(provider_id: str) -> str:
    digest = hashlib.sha256(b"duopay-prefix:" + provider_id.encode("utf-8")).digest()
    return "%0*d" % (PREFIX_LEN, int.from_bytes(digest[:8], "big") % 10**PREFIX_LEN)


def luhn_check_digit(digits: str) -> str:
    total = 0
    for i, ch in enumerate(reversed(digits)):
        d = ord(ch) - 48
        if i % 2 == 0:
            d *= 2
            if d > 9:
                d -= 9
        total += d
    return str((10 - total % 10) % 10)


def luhn_valid(card_number: str) -> bool:
    if not card_number.isdigit() or len(card_number) < 2:
        return False
    return luhn_check_digit(card_number[:-1]) == card_number[-1]


def make_card_number(provider_id: str, batch_id: int, index: int) -> str:
    if not 0 <= batch_id <= MAX_BATCH_ID:
        raise DuopayError("batch id out of range")
    if not 0 <= index < MAX_BATCH_SIZE:
        raise DuopayError("serial index out of range")
    body = "%s%0*d%0*d" % (
        provider_prefix(provider_id),
        BATCH_LEN,
        batch_id,
        SERIAL_LEN,
        index,
    )
    return body + luhn_check_digit(body)


def card_number_matches_provider(card_number: str, provider_id: str) -> bool:
    return card_number.startswith(provider_prefix(provider_id))


@dataclass(frozen=True)
class IssuedCard:
    card_number: str
    secret: str


@dataclass
class CardBatch:
    provider_id: str
    denomination: Money
    batch_id: int
    issued_at: int
    cards: list[IssuedCard]

    def to_wire(self) -> dict:
        return {
            "v": 1,
            "provider_id": self.provider_id,
            "denomination": self.denomination.amount_minor,
            "batch_id": self.batch_id,
            "issued_at": self.issued_at,
            "cards": [
                {"number": c.card_number, "secret": c.secret} for c in self.cards
            ],
        }

    @classmethod
    def from_wire(cls, wire: dict) -> "CardBatch":
        try:
            cards = [
                IssuedCard(card_number=str(c["number"]), secret=str(c["secret"]))
                for c in wire["cards"]
            ]
            batch = cls(
                provider_id=str(wire["provider_id"]),
                denomination=Money(int(wire["denomination"])),
                batch_id=int(wire["batch_id"]),
                issued_at=int(wire["issued_at"]),
                cards=cards,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedBatchFile("bad batch structure: %s" % exc)
        if wire.get("v") != 1:
            raise MalformedBatchFile("unsupported batch version")
        batch.validate()
        return batch

    def validate(self) -> None:
        if not DENOM_MIN <= self.denomination.amount_minor <= DENOM_MAX:
            raise MalformedBatchFile("denomination out of range")
        seen: set[str] = set()
        for card in self.cards:
            if not luhn_valid(card.card_number):
                raise MalformedBatchFile("bad check digit on %s" % card.card_number)
            if not card_number_matches_provider(card.card_number, self.provider_id):
                raise MalformedBatchFile("card %s has a foreign prefix" % card.card_number)
            if card.card_number in seen:
                raise MalformedBatchFile("duplicate card number %s" % card.card_number)
            if len(card.secret) != SECRET_LEN or any(
                ch not in SECRET_ALPHABET for ch in card.secret
            ):
                raise MalformedBatchFile("malformed secret on %s" % card.card_number)
            seen.add(card.card_number)


def _generate_secret(rng: random.Random | None) -> str:
    if rng is None:
        return "".join(secrets_mod.choice(SECRET_ALPHABET) for _ in range(SECRET_LEN))
    return "".join(rng.choice(SECRET_ALPHABET) for _ in range(SECRET_LEN))


def issue_batch(
    provider_id: str,
    denomination: Money,
    count: int,
    seed: bytes | None = None,
    batch_id: int | None = None,
    issued_at: int | None = None,
) -> CardBatch:
    """Issue ``count`` cards of one denomination.

    With a seed the batch is fully reproducible (simulation use); without
    one, secrets come from the OS randomness source. The batch id defaults
    to a seed-derived (or random) block so separately issued batches land
    in disjoint serial ranges.
    """
    if not DENOM_MIN <= denomination.amount_minor <= DENOM_MAX:
        raise DenominationOutOfRange(
            "denomination %d outside [%d, %d] minor units"
            % (denomination.amount_minor, DENOM_MIN, DENOM_MAX)
        )
    if count < 0 or count > MAX_BATCH_SIZE:
        raise DuopayError("count out of range")
    rng = None
    if seed is not None:
        rng = random.Random(int.from_bytes(hashlib.sha256(b"batch:" + seed).digest(), "big"))
    if batch_id is None:
        if rng is not None:
            batch_id = rng.randrange(MAX_BATCH_ID + 1)
        else:
            batch_id = secrets_mod.randbelow(MAX_BATCH_ID + 1)
    if issued_at is None:
        issued_at = 0 if seed is not None else int(time.time())
    cards = [
        IssuedCard(
            card_number=make_card_number(provider_id, batch_id, i),
            secret=_generate_secret(rng),
        )
        for i in range(count)
    ]
    return CardBatch(
        provider_id=provider_id,
        denomination=denomination,
        batch_id=batch_id,
        issued_at=issued_at,
        cards=cards,
    )


def export_batch(batch: CardBatch, path: str | Path) -> None:
    Path(path).write_bytes(canonical_encode(batch.to_wire()) + b"\n")


def load_batch(path: str | Path) -> CardBatch:
    raw = Path(path).read_bytes()
    try:
        wire = canonical_decode(raw.rstrip(b"\n"))
    except DuopayError as exc:
        raise MalformedBatchFile("unreadable batch file: %s" % exc)
    if not isinstance(wire, dict):
        raise MalformedBatchFile("batch file must hold a map")
    return CardBatch.from_wire(wire)


def secret_digest(secret: str) -> str:
    return hashlib.sha256(b"duopay-secret:" + secret.encode("utf-8")).hexdigest()
