"""Command line entry points: ``provider``, ``merchant``, ``cardtool``
and ``sim``."""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from .canon import canonical_decode, canonical_encode
from .cards import export_batch, issue_batch, load_batch
from .config import MerchantServiceConfig, ProviderServiceConfig
from .errors import DuopayError
from .keys import fresh_keypair, keypair_from_seed
from .money import Money
from .settlement import SettlementDemand, SettlementReport


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )


def _parse_period(text: str) -> tuple[int, int]:
    try:
        start_text, end_text = text.split("..", 1)
        start, end = int(start_text), int(end_text)
    except ValueError:
        raise click.BadParameter("expected <start>..<end> as integer seconds")
    if start >= end:
        raise click.BadParameter("period start must be before end")
    return start, end


def _fail(exc: DuopayError) -> None:
    click.echo("error (%s): %s" % (exc.code, exc), err=True)
    sys.exit(1)


def _keygen(seed: str | None) -> None:
    signing, public = keypair_from_seed(seed) if seed else fresh_keypair()
    click.echo(json.dumps({"signing_key_hex": signing, "public_key_hex": public}, indent=2))


# ---------------------------------------------------------------------------
# provider
# ---------------------------------------------------------------------------

@click.group(name="provider")
def provider_cli():
    """Card provider service: sold-cards database, credit requests,
    captures and settlement."""


@provider_cli.command("serve")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option(
    "--plaintext-allowlist",
    default=None,
    help="Comma-separated peer addresses; switches transport to plaintext test mode.",
)
@click.option("--verbose", is_flag=True)
def provider_serve(config_path, plaintext_allowlist, verbose):
    """Listen for credit requests on the configured port."""
    _setup_logging(verbose)
    from .channel import ProviderTCPServer, serve_provider_forever

    config = ProviderServiceConfig.load(config_path)
    plaintext = config.transport.plaintext
    allowlist = list(config.transport.allowlist)
    if plaintext_allowlist is not None:
        plaintext = True
        allowlist = [a.strip() for a in plaintext_allowlist.split(",") if a.strip()]
    core = config.build_core()
    server = ProviderTCPServer(
        (config.host, config.port), core, plaintext=plaintext, allowlist=allowlist
    )
    try:
        serve_provider_forever(server)
    except KeyboardInterrupt:
        click.echo("shutting down")
    finally:
        server.server_close()
        core.close()


@provider_cli.command("load-cards")
@click.argument("batch_file", type=click.Path(exists=True))
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
def provider_load_cards(batch_file, config_path):
    """Ingest an issued card batch into the sold-cards database."""
    config = ProviderServiceConfig.load(config_path)
    core = config.build_core()
    try:
        batch = load_batch(batch_file)
        loaded, duplicates = core.load_cards(batch)
    except DuopayError as exc:
        _fail(exc)
    finally:
        core.close()
    click.echo("loaded %d cards, skipped %d duplicates" % (loaded, len(duplicates)))
    for number in duplicates:
        click.echo("duplicate: %s" % number, err=True)


@provider_cli.command("expire-holds")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--now", "now_ts", type=int, default=None, help="Override the clock (epoch seconds).")
def provider_expire_holds(config_path, now_ts):
    """Release every hold past its expiry."""
    config = ProviderServiceConfig.load(config_path)
    core = config.build_core()
    try:
        released = core.expire_holds(now_ts)
    finally:
        core.close()
    click.echo("released %d holds" % released)


@provider_cli.command("settle")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--merchant", "merchant_id", required=True)
@click.option("--period", required=True, help="<start>..<end> epoch seconds, half open.")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option(
    "--demand",
    "demand_path",
    type=click.Path(exists=True),
    default=None,
    help="Settle from an exported demand file instead of a previously received one.",
)
def provider_settle(config_path, merchant_id, period, out_path, demand_path):
    """Export the signed settlement report for a period."""
    start, end = _parse_period(period)
    config = ProviderServiceConfig.load(config_path)
    core = config.build_core()
    try:
        key = "%s|%d|%d" % (merchant_id, start, end)
        stored = core.settled.get(key)
        if stored is not None:
            report = SettlementReport.from_wire(stored)
        elif demand_path is not None:
            demand_wire = canonical_decode(Path(demand_path).read_bytes().rstrip(b"\n"))
            demand = SettlementDemand.from_wire(demand_wire)
            if (demand.merchant_id, demand.period_start, demand.period_end) != (
                merchant_id,
                start,
                end,
            ):
                raise DuopayError("demand file does not match --merchant/--period")
            report = core.handle_settlement(demand)
        else:
            raise DuopayError(
                "no stored report for that period; pass --demand <file> to settle now"
            )
    except DuopayError as exc:
        _fail(exc)
    finally:
        core.close()
    Path(out_path).write_bytes(canonical_encode(report.to_wire()) + b"\n")
    click.echo(
        "period %d..%d: matched %d, payout %s, fee %s, %d discrepancies -> %s"
        % (
            start,
            end,
            len(report.matched),
            report.payout.dollars(),
            report.fee.dollars(),
            len(report.discrepancies),
            out_path,
        )
    )


@provider_cli.command("snapshot")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
def provider_snapshot(config_path):
    """Compact the journal into a snapshot."""
    config = ProviderServiceConfig.load(config_path)
    core = config.build_core()
    try:
        core.snapshot()
        digest = core.state_digest()
    finally:
        core.close()
    click.echo("snapshot written; state digest %s" % digest)


@provider_cli.command("keygen")
@click.option("--seed", default=None, help="Deterministic test key from a seed string.")
def provider_keygen(seed):
    """Generate a signing keypair (test tool)."""
    _keygen(seed)


# ---------------------------------------------------------------------------
# merchant
# ---------------------------------------------------------------------------

@click.group(name="merchant")
def merchant_cli():
    """Merchant service: catalog, checkout and the signed ledger."""


@merchant_cli.command("serve")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--verbose", is_flag=True)
def merchant_serve(config_path, verbose):
    """Serve the storefront HTTP API (and static files when configured)."""
    _setup_logging(verbose)
    from .httpd import MerchantHTTPServer

    config = MerchantServiceConfig.load(config_path)
    core = config.build_core(config.build_client())
    server = MerchantHTTPServer((config.http_host, config.http_port), core, config.static_dir)
    click.echo(
        "merchant %s serving on http://%s:%d (provider %s at %s:%d)"
        % (
            config.party_id,
            config.http_host,
            server.port,
            config.provider_id,
            config.provider_host,
            config.provider_port,
        )
    )
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        click.echo("shutting down")
    finally:
        server.server_close()
        core.close()


@merchant_cli.command("demand")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--period", required=True, help="<start>..<end> epoch seconds, half open.")
@click.option("--export", "export_path", type=click.Path(), default=None)
@click.option("--send/--no-send", default=True, help="Send to the provider and apply the report.")
def merchant_demand(config_path, period, export_path, send):
    """Build (and by default send) the settlement demand for a period."""
    start, end = _parse_period(period)
    config = MerchantServiceConfig.load(config_path)
    core = config.build_core(config.build_client() if send else None)
    try:
        if send:
            summary = core.settle_period(start, end)
            click.echo(json.dumps(summary, indent=2))
            demand_txns = summary["matched"]
        else:
            demand = core.build_demand(start, end)
            demand_txns = len(demand.records)
            if export_path:
                Path(export_path).write_bytes(canonical_encode(demand.to_wire()) + b"\n")
                click.echo("demand with %d records -> %s" % (demand_txns, export_path))
            else:
                click.echo("demand with %d records (use --export to write it)" % demand_txns)
        if send and export_path:
            demand = core.build_demand(start, end)
            Path(export_path).write_bytes(canonical_encode(demand.to_wire()) + b"\n")
    except DuopayError as exc:
        _fail(exc)
    finally:
        core.close()


@merchant_cli.group("ledger")
def merchant_ledger():
    """Ledger maintenance."""


@merchant_ledger.command("export")
@click.argument("out_path", type=click.Path())
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
def merchant_ledger_export(out_path, config_path):
    """Write every ledger record to a canonical-encoded file."""
    config = MerchantServiceConfig.load(config_path)
    core = config.build_core(None)
    try:
        count = core.export_ledger(out_path)
    finally:
        core.close()
    click.echo("exported %d records -> %s" % (count, out_path))


@merchant_cli.command("keygen")
@click.option("--seed", default=None, help="Deterministic test key from a seed string.")
def merchant_keygen(seed):
    """Generate a signing keypair (test tool)."""
    _keygen(seed)


# ---------------------------------------------------------------------------
# cardtool
# ---------------------------------------------------------------------------

@click.group(name="cardtool")
def cardtool_cli():
    """Issue and verify prepaid card batches."""


@cardtool_cli.command("issue")
@click.option("--provider", "provider_id", required=True)
@click.option("--denomination", required=True, type=int, help="Card value in minor units (100..100000).")
@click.option("--count", required=True, type=int)
@click.option("--seed", default=None, help="Hex seed for a fully reproducible batch.")
@click.option("--batch", "batch_id", type=int, default=None, help="Serial block (0..9999).")
@click.option("--out", "out_path", required=True, type=click.Path())
def cardtool_issue(provider_id, denomination, count, seed, batch_id, out_path):
    """Issue a batch of prepaid cards to a file (the card stock)."""
    try:
        seed_bytes = bytes.fromhex(seed) if seed else None
    except ValueError:
        raise click.BadParameter("--seed must be hex")
    try:
        batch = issue_batch(
            provider_id, Money(denomination), count, seed=seed_bytes, batch_id=batch_id
        )
        export_batch(batch, out_path)
    except DuopayError as exc:
        _fail(exc)
    click.echo(
        "issued %d cards of %s (batch %04d) -> %s"
        % (count, Money(denomination).dollars(), batch.batch_id, out_path)
    )


@cardtool_cli.command("verify")
@click.argument("batch_file", type=click.Path(exists=True))
def cardtool_verify(batch_file):
    """Check a batch file: format, check digits, uniqueness, denomination."""
    try:
        batch = load_batch(batch_file)
    except DuopayError as exc:
        _fail(exc)
    click.echo(
        "ok: %d cards, provider %s, denomination %s, batch %04d"
        % (len(batch.cards), batch.provider_id, batch.denomination.dollars(), batch.batch_id)
    )


# ---------------------------------------------------------------------------
# sim
# ---------------------------------------------------------------------------

@click.group(name="sim")
def sim_cli():
    """Deterministic end-to-end simulation and stress harness."""


@sim_cli.command("run")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--csv", "csv_path", type=click.Path(), default=None, help="Defaults to <out>.csv")
@click.option("--figures/--no-figures", default=True)
@click.option("--workdir", type=click.Path(), default=None, help="Keep service state here instead of a temp dir.")
def sim_run(config_path, out_path, csv_path, figures, workdir):
    """Run one seeded simulation; write the report, CSV and figures."""
    from .figures import render_report_figures, write_report_csv
    from .sim import SimConfig, run_simulation

    try:
        config = SimConfig.load(config_path)
        report = run_simulation(config, workdir=workdir)
    except DuopayError as exc:
        _fail(exc)
    out = Path(out_path)
    report.save(out)
    body = report.body
    csv_target = Path(csv_path) if csv_path else out.with_suffix(".csv")
    write_report_csv(body, csv_target)
    written = [str(out), str(csv_target)]
    if figures:
        written += [str(p) for p in render_report_figures(body, out.with_suffix(""))]
    click.echo(
        "seed %d: %d/%d purchases captured, residual %d minor units, %d ms"
        % (
            body["seed"],
            body["receipts"],
            body["purchases_attempted"],
            body["conservation_residual"],
            report.duration_ms,
        )
    )
    for path in written:
        click.echo("wrote %s" % path)
    if body["conservation_residual"] != 0:
        click.echo("CONSERVATION VIOLATED", err=True)
        sys.exit(2)


@sim_cli.command("stress")
@click.option("--threads", default=8, type=int, help="Provider-side connection worker cap.")
@click.option("--card-balance", default=1000, type=int)
@click.option("--request-amount", default=100, type=int)
@click.option("--workers", default=32, type=int, help="Concurrent submitter threads.")
@click.option("--secure/--plaintext", "secure", default=False)
def sim_stress(threads, card_balance, request_amount, workers, secure):
    """Hammer one card from many threads over loopback TCP; check safety."""
    from .sim import run_stress

    result = run_stress(
        workers=workers,
        card_balance=card_balance,
        request_amount=request_amount,
        threads=threads,
        plaintext=not secure,
    )
    click.echo(json.dumps(result.to_wire(), indent=2))
    expected = card_balance // request_amount
    ok = (
        result.captures == expected
        and result.final_available == card_balance - expected * request_amount
        and result.negative_balance_events == 0
    )
    click.echo("safety: %s" % ("ok" if ok else "VIOLATED"))
    if not ok:
        sys.exit(2)


@sim_cli.command("example-config")
@click.option("--out", "out_path", required=True, type=click.Path())
def sim_example_config(out_path):
    """Write a default simulation config to edit."""
    from .sim import SimConfig

    SimConfig(seed=42, num_purchases=1000, drop_pct=5, duplicate_pct=5, reorder_pct=5).save(out_path)
    click.echo("wrote %s" % out_path)


@sim_cli.command("fixtures")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--http-port", default=8080, type=int)
@click.option("--provider-port", default=7402, type=int)
def sim_fixtures(out_dir, http_port, provider_port):
    """Scaffold a runnable demo: keys, configs, catalog, activated cards."""
    from .fixtures import make_fixtures

    paths = make_fixtures(Path(out_dir), http_port=http_port, provider_port=provider_port)
    for name, path in paths.items():
        click.echo("%s: %s" % (name, path))
    click.echo(
        "\nstart with:\n  provider serve --config %s\n  merchant serve --config %s"
        % (paths["provider_config"], paths["merchant_config"])
    )
