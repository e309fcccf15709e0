"""Demo environment scaffolding: everything needed to run a provider, a
merchant and the storefront against known cards."""

from __future__ import annotations

import json
from pathlib import Path

from .cards import export_batch, issue_batch
from .keys import KeyRegistry, keypair_from_seed
from .merchant import CatalogItem, save_catalog
from .money import Money
from .provider import ProviderConfig, ProviderCore

PROVIDER_ID = "cards-a"
MERCHANT_ID = "shop-b"
DEMO_PASSWORD = "demo-1234"

DEMO_CATALOG = [
    CatalogItem("book-001", "Field Guide to Payment Protocols", Money(1250)),
    CatalogItem("coffee-001", "Coffee Beans, 250g", Money(450)),
    CatalogItem("sticker-001", "Holographic Sticker", Money(75)),
    CatalogItem("poster-001", "Retro Computing Poster", Money(990)),
]


def make_fixtures(out_dir: Path, *, http_port: int = 8080, provider_port: int = 7402) -> dict:
    """Write keys, configs, catalog and pre-activated demo cards under
    ``out_dir``. Returns the paths of everything written."""
    out_dir.mkdir(parents=True, exist_ok=True)
    provider_key, provider_pub = keypair_from_seed("fixtures:provider")
    merchant_key, merchant_pub = keypair_from_seed("fixtures:merchant")

    catalog_path = out_dir / "catalog.json"
    save_catalog(DEMO_CATALOG, catalog_path)

    # two denominations: one card that can afford everything, one that
    # declines anything above one dollar
    rich_batch = issue_batch(PROVIDER_ID, Money(2000), 1, seed=b"fixtures-rich", batch_id=1)
    poor_batch = issue_batch(PROVIDER_ID, Money(100), 1, seed=b"fixtures-poor", batch_id=2)
    export_batch(rich_batch, out_dir / "cards-rich.cdn")
    export_batch(poor_batch, out_dir / "cards-poor.cdn")

    core = ProviderCore(
        ProviderConfig(
            party_id=PROVIDER_ID,
            registry=KeyRegistry(PROVIDER_ID, provider_key, {MERCHANT_ID: merchant_pub}),
            data_dir=out_dir / "provider-data",
        )
    )
    try:
        for batch in (rich_batch, poor_batch):
            core.load_cards(batch)
            for card in batch.cards:
                core.activate_card(card.card_number, card.secret, DEMO_PASSWORD)
    finally:
        core.close()

    demo_cards = [
        {
            "label": "funded ($20)",
            "card_number": rich_batch.cards[0].card_number,
            "secret": rich_batch.cards[0].secret,
            "password": DEMO_PASSWORD,
            "provider_id": PROVIDER_ID,
            "balance_minor": 2000,
        },
        {
            "label": "nearly empty ($1)",
            "card_number": poor_batch.cards[0].card_number,
            "secret": poor_batch.cards[0].secret,
            "password": DEMO_PASSWORD,
            "provider_id": PROVIDER_ID,
            "balance_minor": 100,
        },
    ]
    demo_cards_path = out_dir / "demo-cards.json"
    demo_cards_path.write_text(json.dumps(demo_cards, indent=2) + "\n")

    provider_config_path = out_dir / "provider.json"
    provider_config_path.write_text(
        json.dumps(
            {
                "party_id": PROVIDER_ID,
                "signing_key_hex": provider_key,
                "peers": {MERCHANT_ID: merchant_pub},
                "listen": {"host": "127.0.0.1", "port": provider_port},
                "hold_ttl": 900,
                "fee_rate_bp": 100,
                "data_dir": "provider-data",
                "transport": {"mode": "secure"},
            },
            indent=2,
        )
        + "\n"
    )

    static_dir = Path(__file__).resolve().parents[2] / "frontend" / "dist"
    merchant_config: dict = {
        "party_id": MERCHANT_ID,
        "signing_key_hex": merchant_key,
        "peers": {PROVIDER_ID: provider_pub},
        "provider_id": PROVIDER_ID,
        "provider_address": {"host": "127.0.0.1", "port": provider_port},
        "http": {"host": "127.0.0.1", "port": http_port},
        "catalog_path": "catalog.json",
        "data_dir": "merchant-data",
        "transport": {"mode": "secure"},
    }
    if static_dir.is_dir():
        merchant_config["static_dir"] = str(static_dir)
    merchant_config_path = out_dir / "merchant.json"
    merchant_config_path.write_text(json.dumps(merchant_config, indent=2) + "\n")

    return {
        "provider_config": provider_config_path,
        "merchant_config": merchant_config_path,
        "catalog": catalog_path,
        "demo_cards": demo_cards_path,
        "provider_data": out_dir / "provider-data",
    }
