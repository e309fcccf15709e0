"""Exact money arithmetic in integer minor units (cents).

The protocol is single-currency; the tag exists so that mixing two
differently-tagged amounts fails loudly instead of silently adding cents.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import InvalidAmount

CURRENCY = "USD"


@dataclass(frozen=True)
class Money:
    amount_minor: int
    currency: str = CURRENCY

    def __post_init__(self):
        if isinstance(self.amount_minor, bool) or not isinstance(self.amount_minor, int):
            raise InvalidAmount("amount must be an integer count of minor units")
        if self.amount_minor < 0:
            raise InvalidAmount("amount must be non-negative")

    def _check(self, other: "Money") -> None:
        if not isinstance(other, Money):
            raise InvalidAmount("expected Money, got %s" % type(other).__name__)
        if other.currency != self.currency:
            raise InvalidAmount(
                "currency mismatch: %s vs %s" % (self.currency, other.currency)
            )

    def __add__(self, other: "Money") -> "Money":
        self._check(other)
        return Money(self.amount_minor + other.amount_minor, self.currency)

    def __sub__(self, other: "Money") -> "Money":
        self._check(other)
        return Money(self.amount_minor - other.amount_minor, self.currency)

    def __lt__(self, other: "Money") -> bool:
        self._check(other)
        return self.amount_minor < other.amount_minor

    def __le__(self, other: "Money") -> bool:
        self._check(other)
        return self.amount_minor <= other.amount_minor

    def __gt__(self, other: "Money") -> bool:
        self._check(other)
        return self.amount_minor > other.amount_minor

    def __ge__(self, other: "Money") -> bool:
        self._check(other)
        return self.amount_minor >= other.amount_minor

    def is_zero(self) -> bool:
        return self.amount_minor == 0

    def dollars(self) -> str:
        """Human-readable dollar string, e.g. 12345 -> ``$123.45``."""
        return "$%d.%02d" % divmod(self.amount_minor, 100)


def money(amount_minor: int) -> Money:
    return Money(amount_minor)
