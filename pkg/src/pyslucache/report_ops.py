from __future__ import annotations

import logging
from decimal import ROUND_HALF_UP, Decimal, InvalidOperation

import pandas as pd

from .io_ops import REPORT_VERSION

logger = logging.getLogger(__name__)

LEVEL_LABELS = {"l1": "L1", "l2": "L2", "combined": "L1+L2"}


def format_decimal(value: float | int | str | None, n: int) -> str:
    """
    Round to n decimal places (half up), drop trailing zeros but keep one after the point

    Args:
        - value (float | int | str | None): Numeric value
        - n (int): Decimal places to keep

    Returns:
        - str: Formatted number; "-" for None, NaN, infinities and non-numeric input
    """

    if n < 0:
        raise ValueError("Parameter n must be a non-negative integer representing the number of decimal places to keep.")

    try:
        if value is None or pd.isna(value):
            return "-"
        if isinstance(value, (int, float)) and abs(value) == float("inf"):
            return "-"

        quantized = Decimal(str(value)).quantize(Decimal("0." + "0" * n), rounding=ROUND_HALF_UP)
        result = str(quantized)
        if "." in result:
            result = result.rstrip("0")
            if result.endswith("."):
                result += "0"
        return result

    except (ValueError, TypeError, InvalidOperation):
        return "-"


def format_columns(df: pd.DataFrame, cols: list[str], n: int) -> pd.DataFrame:
    """Copy of df with the given columns rendered by format_decimal"""

    df_copy = df.copy()
    for column in cols:
        df_copy[column] = df_copy[column].apply(lambda x: format_decimal(x, n)).astype("string")
    return df_copy


def _level_table(summary: dict) -> pd.DataFrame:
    counts = summary["counts"]
    reached = {"l1": counts["l1_reached"], "l2": counts["l2_reached"], "combined": counts["inputs"]}
    hits = {"l1": counts["l1_hits"], "l2": counts["l2_hits"], "combined": counts["l1_hits"] + counts["l2_hits"]}
    return pd.DataFrame(
        [
            {
                "level": LEVEL_LABELS[level],
                "reached": reached[level],
                "hits": hits[level],
                "filter_rate": summary["filter_rate"][level],
                "cache_accuracy": summary["cache_accuracy"][level],
            }
            for level in ("l1", "l2", "combined")
        ]
    )


def _overall_table(report: dict) -> pd.DataFrame:
    s = report["overall"]
    rows = [
        ("setting", report["setting"]["label"]),
        ("seed", report["seed"]),
        ("inputs", s["counts"]["inputs"]),
        ("offload fraction", s["offload_fraction"]),
        ("overall accuracy", s["overall_accuracy"]),
        ("mean latency (ms)", s["mean_latency_ms"]),
        ("mean RTF", s["mean_rtf"]),
        ("mean energy (mJ)", s["mean_energy_mj"]),
    ]
    return pd.DataFrame(rows, columns=["metric", "value"])


def _speaker_table(report: dict) -> pd.DataFrame:
    rows = []
    for speaker, s in report["per_speaker"].items():
        rows.append(
            {
                "speaker": speaker,
                "inputs": s["counts"]["inputs"],
                "filter_rate": s["filter_rate"]["combined"],
                "cache_accuracy": s["cache_accuracy"]["combined"],
                "overall_accuracy": s["overall_accuracy"],
                "latency_ms": s["mean_latency_ms"],
            }
        )
    return pd.DataFrame(rows, columns=["speaker", "inputs", "filter_rate", "cache_accuracy", "overall_accuracy", "latency_ms"])


def _to_markdown(df: pd.DataFrame) -> str:
    cells = df.astype(str)
    lines = ["| " + " | ".join(cells.columns) + " |", "|" + "|".join("---" for _ in cells.columns) + "|"]
    lines += ["| " + " | ".join(row) + " |" for row in cells.itertuples(index=False)]
    return "\n".join(lines)


def render_report(report: dict, fmt: str = "text", decimals: int = 3) -> str:
    """
    Render a benchmark report as text or markdown tables: overall metrics, per-level rates, per-speaker breakdown

    Args:
        - report (dict): Output of benchmark_ops.run_benchmark (or its JSON file)
        - fmt (str): "text" or "markdown"
        - decimals (int): Decimal places of rates, latencies and energies

    Returns:
        - str: Rendered tables separated by blank lines
    """

    if fmt not in ("text", "markdown"):
        raise ValueError(f"Unsupported report format: {fmt}. Expected 'text' or 'markdown'")
    if report.get("report_version") != REPORT_VERSION:
        logger.warning(f"Report version {report.get('report_version')} differs from {REPORT_VERSION}")

    overall = _overall_table(report)
    overall["value"] = [str(v) if isinstance(v, (str, int)) else format_decimal(v, decimals) for v in overall["value"]]
    tables = [
        ("Overall", overall),
        ("Cache levels", format_columns(_level_table(report["overall"]), ["filter_rate", "cache_accuracy"], decimals)),
        ("Per speaker", format_columns(_speaker_table(report), ["filter_rate", "cache_accuracy", "overall_accuracy", "latency_ms"], decimals)),
    ]

    blocks = []
    for title, df in tables:
        if fmt == "markdown":
            blocks.append(f"### {title}\n\n{_to_markdown(df)}")
        else:
            blocks.append(f"{title}\n{df.to_string(index=False)}")
    return "\n\n".join(blocks) + "\n"


def render_ops_budget(budget: pd.DataFrame, fmt: str = "text") -> str:
    """Op counts beside the reference device figures; fractions keep 3 decimals, counts none"""

    df = budget.copy()
    df["ops"] = [format_decimal(v, 3 if v < 1 else 0) for v in df["ops"]]
    df["reference_ops"] = [format_decimal(v, 3 if v < 1 else 0) for v in df["reference_ops"]]
    if fmt == "markdown":
        return _to_markdown(df) + "\n"
    return df.to_string(index=False) + "\n"
