"""Exception types shared across the payment stack.

Anything that can cross the wire carries a stable ``code`` so a server can
map an exception to an ERROR reply and the client can map it back to the
same type.
"""

from __future__ import annotations


class DuopayError(Exception):
    code = "internal"

    def __init__(self, message: str = ""):
        super().__init__(message or self.__class__.__name__)


# --- canonical encoding -----------------------------------------------------

class UnencodableValue(DuopayError):
    code = "unencodable_value"


class MalformedInput(DuopayError):
    code = "malformed_input"


class NonCanonicalInput(DuopayError):
    code = "non_canonical_input"


# --- protocol core ----------------------------------------------------------

class InvalidAmount(DuopayError):
    code = "invalid_amount"


class MissingKey(DuopayError):
    code = "missing_key"


class UnknownParty(DuopayError):
    code = "unknown_party"


class IllegalTransition(DuopayError):
    code = "illegal_transition"


class BadEnvelope(DuopayError):
    code = "bad_envelope"


# --- provider service -------------------------------------------------------

class UnknownCard(DuopayError):
    code = "unknown_card"


class SecretMismatch(DuopayError):
    code = "secret_mismatch"


class AlreadyActivated(DuopayError):
    code = "already_activated"


class WeakPassword(DuopayError):
    code = "weak_password"


class AuthFailure(DuopayError):
    # deliberately undifferentiated: wrong secret, wrong password, unknown
    # card and unactivated card all surface as this one code
    code = "auth_failure"


class UnknownHold(DuopayError):
    code = "unknown_hold"


class HoldExpired(DuopayError):
    code = "hold_expired"


class RecordMismatch(DuopayError):
    code = "record_mismatch"


class BadMerchantSignature(DuopayError):
    code = "bad_merchant_signature"


class UnknownMerchant(DuopayError):
    code = "unknown_merchant"


class MalformedDemand(DuopayError):
    code = "malformed_demand"


# --- merchant service -------------------------------------------------------

class UnknownItem(DuopayError):
    code = "unknown_item"


class PaymentDeclined(DuopayError):
    code = "payment_declined"

    def __init__(self, reason: str, message: str = ""):
        self.reason = reason
        super().__init__(message or f"payment declined ({reason})")


class ProviderUnreachable(DuopayError):
    code = "provider_unreachable"


class BadProviderSignature(DuopayError):
    code = "bad_provider_signature"


class BadReportSignature(DuopayError):
    code = "bad_report_signature"


class UnknownPeriod(DuopayError):
    code = "unknown_period"


# --- settlement -------------------------------------------------------------

class RateOutOfRange(DuopayError):
    code = "rate_out_of_range"


# --- card tool --------------------------------------------------------------

class DenominationOutOfRange(DuopayError):
    code = "denomination_out_of_range"


class MalformedBatchFile(DuopayError):
    code = "malformed_batch_file"


class DuplicateCardNumber(DuopayError):
    code = "duplicate_card_number"


# --- simulation -------------------------------------------------------------

class ConfigInvalid(DuopayError):
    code = "config_invalid"


def _wire_errors() -> dict[str, type[DuopayError]]:
    table: dict[str, type[DuopayError]] = {}
    stack = [DuopayError]
    while stack:
        cls = stack.pop()
        for sub in cls.__subclasses__():
            table[sub.code] = sub
            stack.append(sub)
    return table


#: code -> exception class, for reconstructing server errors on the client
WIRE_ERRORS = _wire_errors()


def from_wire_error(code: str, message: str) -> DuopayError:
    cls = WIRE_ERRORS.get(code, DuopayError)
    if cls is PaymentDeclined:
        return PaymentDeclined(reason="unknown", message=message)
    return cls(message)
