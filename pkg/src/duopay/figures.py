"""Render a simulation report to PNG figures and a CSV alongside it.

Everything here works from the report body dict, so figures can be
regenerated from a saved report file without re-running the simulation.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def _dollars(minor: int) -> float:
    return minor / 100.0


def render_report_figures(body: dict, out_prefix: str | Path) -> list[Path]:
    """Write the standard figure set next to ``out_prefix``.

    Returns the paths written: value flow, purchase outcomes, per-period
    settlement and the final balance histogram.
    """
    prefix = Path(out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    # 1. where the issued value ended up
    fig, ax = plt.subplots(figsize=(7, 4.5))
    buckets = [
        ("remaining", body["remaining_value"]),
        ("payouts", body["payout_total"]),
        ("fees", body["fee_total"]),
        ("undemanded", body["undemanded_value"]),
        ("held", body["held_value_final"]),
    ]
    labels = [name for name, _ in buckets]
    values = [_dollars(v) for _, v in buckets]
    bars = ax.bar(labels, values, color=["#4878d0", "#6acc64", "#d65f5f", "#ee854a", "#956cb4"])
    ax.axhline(_dollars(body["issued_value"]), linestyle="--", color="gray", linewidth=1)
    ax.text(
        0.99,
        0.97,
        "issued %.2f, residual %d minor units" % (_dollars(body["issued_value"]), body["conservation_residual"]),
        transform=ax.transAxes,
        ha="right",
        va="top",
        fontsize=9,
    )
    ax.bar_label(bars, fmt="%.2f", fontsize=8)
    ax.set_ylabel("dollars")
    ax.set_title("Value conservation (seed %d)" % body["seed"])
    fig.tight_layout()
    path = prefix.with_name(prefix.name + "_value_flow.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    # 2. purchase outcomes
    fig, ax = plt.subplots(figsize=(7, 4.5))
    outcomes = {"receipt": body["receipts"], **body["declines"]}
    names = list(outcomes)
    counts = [outcomes[n] for n in names]
    bars = ax.bar(names, counts, color="#4878d0")
    ax.bar_label(bars, fontsize=8)
    ax.set_ylabel("purchases")
    ax.set_title("Checkout outcomes over %d attempts" % body["purchases_attempted"])
    plt.setp(ax.get_xticklabels(), rotation=20, ha="right")
    fig.tight_layout()
    path = prefix.with_name(prefix.name + "_outcomes.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    # 3. per-period settlement
    periods = body["periods"]
    if periods:
        fig, ax = plt.subplots(figsize=(7, 4.5))
        index = range(1, len(periods) + 1)
        width = 0.35
        payouts = [_dollars(p["payout_minor"]) for p in periods]
        fees = [_dollars(p["fee_minor"]) for p in periods]
        ax.bar([i - width / 2 for i in index], payouts, width, label="payout", color="#6acc64")
        ax.bar([i + width / 2 for i in index], fees, width, label="fee", color="#d65f5f")
        for i, p in zip(index, periods):
            note = "%d matched" % p["matched"]
            if p["discrepancies"]:
                note += ", %d flagged" % p["discrepancies"]
            ax.annotate(
                note,
                (i, max(payouts[i - 1], fees[i - 1])),
                textcoords="offset points",
                xytext=(0, 4),
                ha="center",
                fontsize=8,
            )
        ax.set_xticks(list(index))
        ax.set_xlabel("settlement period")
        ax.set_ylabel("dollars")
        ax.set_title("Settlement per period")
        ax.legend()
        fig.tight_layout()
        path = prefix.with_name(prefix.name + "_periods.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)

    # 4. final balance distribution
    balances = body["final_balances"]
    if balances:
        fig, ax = plt.subplots(figsize=(7, 4.5))
        ax.hist([_dollars(b) for b in balances], bins=min(30, max(5, len(balances) // 4)), color="#4878d0")
        ax.set_xlabel("final card balance (dollars)")
        ax.set_ylabel("cards")
        ax.set_title("Final balances across %d cards" % len(balances))
        fig.tight_layout()
        path = prefix.with_name(prefix.name + "_balances.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)

    return written


def write_report_csv(body: dict, path: str | Path) -> Path:
    """Flat metric/period/value rows; easy to diff and to spreadsheet."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "period", "value"])
        scalars = [
            ("seed", body["seed"]),
            ("purchases_attempted", body["purchases_attempted"]),
            ("receipts", body["receipts"]),
            ("issued_value_minor", body["issued_value"]),
            ("remaining_value_minor", body["remaining_value"]),
            ("captured_value_minor", body["captured_value"]),
            ("payout_total_minor", body["payout_total"]),
            ("fee_total_minor", body["fee_total"]),
            ("undemanded_value_minor", body["undemanded_value"]),
            ("held_value_final_minor", body["held_value_final"]),
            ("conservation_residual_minor", body["conservation_residual"]),
            ("crash_recoveries", body["crash_recoveries"]),
        ]
        for name, value in scalars:
            writer.writerow([name, "", value])
        for reason, count in sorted(body["declines"].items()):
            writer.writerow(["decline_%s" % reason, "", count])
        for fault, count in sorted(body["faults"].items()):
            writer.writerow(["fault_%s" % fault, "", count])
        for kind, count in sorted(body["discrepancies"].items()):
            writer.writerow(["discrepancy_%s" % kind, "", count])
        for i, period in enumerate(body["periods"], start=1):
            for key in (
                "start",
                "end",
                "settled",
                "matched",
                "newly_settled",
                "payout_minor",
                "fee_minor",
                "discrepancies",
                "undemanded",
            ):
                value = period[key]
                if isinstance(value, bool):
                    value = int(value)
                writer.writerow([key, i, value])
    return path
