import random

import pytest

from duopay.cards import issue_batch
from duopay.keys import KeyRegistry, keypair_from_seed
from duopay.money import Money
from duopay.provider import ProviderConfig, ProviderCore

PROVIDER_ID = "cards-a"
MERCHANT_ID = "shop-b"
KIOSK_ID = "kiosk-1"


class TickClock:
    """Deterministic integer clock for tests and simulations."""

    def __init__(self, start: int = 1_000_000):
        self.now = start

    def __call__(self) -> int:
        return self.now

    def advance(self, ticks: int = 1) -> int:
        self.now += ticks
        return self.now


@pytest.fixture
def clock():
    return TickClock()


@pytest.fixture
def keyring():
    """Registries for a provider, a merchant and an activation kiosk."""
    p_priv, p_pub = keypair_from_seed("provider-key")
    m_priv, m_pub = keypair_from_seed("merchant-key")
    k_priv, k_pub = keypair_from_seed("kiosk-key")
    provider = KeyRegistry(PROVIDER_ID, p_priv, {MERCHANT_ID: m_pub, KIOSK_ID: k_pub})
    merchant = KeyRegistry(MERCHANT_ID, m_priv, {PROVIDER_ID: p_pub})
    kiosk = KeyRegistry(KIOSK_ID, k_priv, {PROVIDER_ID: p_pub})
    return {"provider": provider, "merchant": merchant, "kiosk": kiosk}


def make_provider(tmp_path, keyring, clock, *, hold_ttl=900, fee_rate_bp=100, subdir="prov"):
    config = ProviderConfig(
        party_id=PROVIDER_ID,
        registry=keyring["provider"],
        data_dir=tmp_path / subdir,
        hold_ttl=hold_ttl,
        fee_rate_bp=fee_rate_bp,
        fsync=False,
        clock=clock,
        rng=random.Random(4242),
    )
    return ProviderCore(config)


@pytest.fixture
def provider(tmp_path, keyring, clock):
    core = make_provider(tmp_path, keyring, clock)
    yield core
    core.close()


def load_test_cards(core, denomination=5000, count=4, seed=b"test-cards"):
    batch = issue_batch(PROVIDER_ID, Money(denomination), count, seed=seed)
    core.load_cards(batch)
    return batch


def activate_all(core, batch, password="pw-1234"):
    for card in batch.cards:
        core.activate_card(card.card_number, card.secret, password)
