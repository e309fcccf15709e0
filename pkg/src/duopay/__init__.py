"""Two-party prepaid card payment stack.

A card provider service sells fixed-format prepaid cards and authorizes
credit requests against them; a merchant service runs checkout, keeps a
dual-signed transaction ledger, and demands settlement at period end. No
third-party processor sits between them. A deterministic simulation harness
drives the whole flow under injected message faults and checks that value
is conserved exactly.
"""

from .canon import canonical_decode, canonical_encode
from .errors import DuopayError
from .keys import KeyRegistry, fresh_keypair, keypair_from_seed
from .money import Money
from .records import (
    AuthorizationDecision,
    CreditRequest,
    LifecycleEvent,
    RecordVerdict,
    TransactionRecord,
    TxnState,
    Verdict,
    card_ref,
    make_payment_statement,
    next_state,
    sign_record,
    verify_record,
)

__version__ = "0.1.0"

__all__ = [
    "AuthorizationDecision",
    "CreditRequest",
    "DuopayError",
    "KeyRegistry",
    "LifecycleEvent",
    "Money",
    "RecordVerdict",
    "TransactionRecord",
    "TxnState",
    "Verdict",
    "canonical_decode",
    "canonical_encode",
    "card_ref",
    "fresh_keypair",
    "keypair_from_seed",
    "make_payment_statement",
    "next_state",
    "sign_record",
    "verify_record",
]
