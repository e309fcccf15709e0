"""Party identities: Ed25519 signing keys and the pairwise key registry.

Key exchange is out of band: each service's config file lists the public
keys of exactly the counterparties it talks to. There is no key server.
"""

from __future__ import annotations

import hashlib
import secrets

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric import ed25519

from .errors import MissingKey, UnknownParty


def keypair_from_seed(seed: bytes | str) -> tuple[str, str]:
    """Deterministic (signing_key_hex, public_key_hex) pair for tests and sims."""
    if isinstance(seed, str):
        seed = seed.encode("utf-8")
    raw = hashlib.sha256(b"duopay-keyseed:" + seed).digest()
    priv = ed25519.Ed25519PrivateKey.from_private_bytes(raw)
    return raw.hex(), _public_hex(priv.public_key())


def fresh_keypair() -> tuple[str, str]:
    """(signing_key_hex, public_key_hex) from the OS randomness source."""
    raw = secrets.token_bytes(32)
    priv = ed25519.Ed25519PrivateKey.from_private_bytes(raw)
    return raw.hex(), _public_hex(priv.public_key())


def _public_hex(pub: ed25519.Ed25519PublicKey) -> str:
    return pub.public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    ).hex()


class KeyRegistry:
    """One party's signing key plus the verification keys of its peers."""

    def __init__(self, own_id: str, signing_key_hex: str, peers: dict[str, str]):
        if not signing_key_hex:
            raise MissingKey("signing key required")
        self.own_id = own_id
        self._signing_key = ed25519.Ed25519PrivateKey.from_private_bytes(
            bytes.fromhex(signing_key_hex)
        )
        self._verify_keys: dict[str, ed25519.Ed25519PublicKey] = {}
        for party_id, pub_hex in peers.items():
            self._verify_keys[party_id] = ed25519.Ed25519PublicKey.from_public_bytes(
                bytes.fromhex(pub_hex)
            )
        # a party can always verify its own signatures
        self._verify_keys.setdefault(own_id, self._signing_key.public_key())

    @property
    def parties(self) -> list[str]:
        return sorted(self._verify_keys)

    def knows(self, party_id: str) -> bool:
        return party_id in self._verify_keys

    def sign(self, payload: bytes) -> bytes:
        return self._signing_key.sign(payload)

    def verify(self, party_id: str, payload: bytes, signature: bytes) -> bool:
        key = self._verify_keys.get(party_id)
        if key is None:
            raise UnknownParty("no public key registered for %r" % party_id)
        try:
            key.verify(signature, payload)
            return True
        except InvalidSignature:
            return False

    def public_hex(self, party_id: str | None = None) -> str:
        party_id = party_id or self.own_id
        key = self._verify_keys.get(party_id)
        if key is None:
            raise UnknownParty("no public key registered for %r" % party_id)
        return _public_hex(key)


def _main() -> None:  # pragma: no cover - convenience entry point
    signing_hex, public_hex = fresh_keypair()
    print("signing_key_hex: %s" % signing_hex)
    print("public_key_hex:  %s" % public_hex)


if __name__ == "__main__":  # pragma: no cover
    _main()
