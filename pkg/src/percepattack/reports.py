"""Machine-readable report files with stable column orders.

Every run writes four files: summary.csv, summary.json, per_sample.csv, and
plotdata.csv (flip-rate-versus-k curves; header-only when a run has no
combined-attack data). The first line of each CSV records the seed, and both
CSV and JSON render the same payload, so their numbers always match.

Non-finite values (e.g. PSNR of an identical image pair) are emitted as null
in JSON and empty cells in CSV.
"""
from __future__ import annotations

import json
import math
from pathlib import Path

from .attacks import PIXEL_THRESHOLDS
from .bench import AGREE, DISAGREE, BenchmarkReport, TransferReport

SUMMARY_COLUMNS = (
    "metric", "attack", "bucket", "total", "flipped", "flip_rate", "mean_eps",
    "pct_gt_0.001", "pct_gt_0.01", "pct_gt_0.03",
    "rmse_mean", "rmse_std", "psnr_mean", "psnr_std",
)
PER_SAMPLE_COLUMNS = (
    "index", "bucket", "success", "prey_index", "s_prey", "s_other", "s_adv",
    "epsilon_used", "iterations_used", "first_flip_iteration",
    "rmse_255", "psnr_255", "pct_gt_0.001", "pct_gt_0.01", "pct_gt_0.03", "error",
)
PLOTDATA_COLUMNS = ("target", "k", "accurate", "flipped", "flip_rate")
TRANSFER_SUMMARY_COLUMNS = ("source", "target", "variant", "accurate", "flipped", "flip_rate")
TRANSFER_SAMPLE_COLUMNS = ("index", "stadv_rmse_255")


def _clean(value):
    """JSON-safe scalar: None for missing or non-finite floats."""
    if value is None:
        return None
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return "" if not math.isfinite(value) else repr(value)
    return str(value)


def _write_csv(path: Path, seed: int, columns, rows) -> None:
    lines = [f"# seed={seed}", ",".join(columns)]
    for row in rows:
        lines.append(",".join(_cell(row.get(col)) for col in columns))
    path.write_text("\n".join(lines) + "\n")


# -- attack benchmark ----------------------------------------------------------


def benchmark_payload(report: BenchmarkReport) -> dict:
    """The wire/JSON form of a benchmark report; single source for all files."""
    rows = []
    for bucket in (AGREE, DISAGREE):
        stats = report.buckets[bucket]
        if stats.total == 0:
            continue
        row = {
            "metric": report.metric_name,
            "attack": report.attack_name,
            "bucket": bucket,
            "total": stats.total,
            "flipped": stats.flipped,
            "flip_rate": _clean(stats.flip_rate),
            "mean_eps": _clean(stats.mean_eps),
            "rmse_mean": _clean(stats.rmse_mean),
            "rmse_std": _clean(stats.rmse_std),
            "psnr_mean": _clean(stats.psnr_mean),
            "psnr_std": _clean(stats.psnr_std),
        }
        for thr in PIXEL_THRESHOLDS:
            row[f"pct_gt_{thr}"] = _clean(stats.pct_pixels_gt.get(thr))
        rows.append(row)

    samples = []
    for rec in report.samples:
        row = {
            "index": rec.index,
            "bucket": rec.bucket,
            "success": rec.success,
            "prey_index": rec.prey_index,
            "s_prey": _clean(rec.s_prey),
            "s_other": _clean(rec.s_other),
            "s_adv": _clean(rec.s_adv),
            "epsilon_used": _clean(rec.epsilon_used),
            "iterations_used": rec.iterations_used,
            "first_flip_iteration": rec.first_flip_iteration,
            "rmse_255": _clean(rec.rmse_255),
            "psnr_255": _clean(rec.psnr_255),
            "error": rec.error,
        }
        for thr in PIXEL_THRESHOLDS:
            row[f"pct_gt_{thr}"] = _clean(rec.pct_pixels_gt.get(thr) if rec.pct_pixels_gt else None)
        samples.append(row)

    return {
        "kind": "attack_benchmark",
        "seed": report.seed,
        "metric": report.metric_name,
        "attack": report.attack_name,
        "summary": rows,
        "samples": samples,
        "plotdata": [],
    }


def write_benchmark_files(payload: dict, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = payload["seed"]
    summary_csv = out_dir / "summary.csv"
    _write_csv(summary_csv, seed, SUMMARY_COLUMNS, payload["summary"])
    per_sample = out_dir / "per_sample.csv"
    _write_csv(per_sample, seed, PER_SAMPLE_COLUMNS, payload["samples"])
    plotdata = out_dir / "plotdata.csv"
    _write_csv(plotdata, seed, PLOTDATA_COLUMNS, payload.get("plotdata", []))
    summary_json = out_dir / "summary.json"
    summary_json.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return [summary_csv, summary_json, per_sample, plotdata]


def emit_report(report: BenchmarkReport, out_dir) -> list[Path]:
    return write_benchmark_files(benchmark_payload(report), out_dir)


# -- transfer benchmark ----------------------------------------------------------


def transfer_payload(report: TransferReport) -> dict:
    rows = [
        {
            "source": report.source_name,
            "target": cell.target,
            "variant": cell.variant,
            "accurate": cell.accurate,
            "flipped": cell.flipped,
            "flip_rate": _clean(cell.flip_rate),
        }
        for cell in report.cells
    ]
    samples = [
        {"index": idx, "stadv_rmse_255": _clean(rmse)}
        for idx, rmse in zip(report.kept_indices, report.kept_rmse)
    ]
    plotdata = []
    for cell in report.cells:
        k = None
        if cell.variant == "stadv":
            k = 0
        elif cell.variant.startswith("stadv+pgd"):
            k = int(cell.variant.removeprefix("stadv+pgd"))
        if k is not None:
            plotdata.append({
                "target": cell.target,
                "k": k,
                "accurate": cell.accurate,
                "flipped": cell.flipped,
                "flip_rate": _clean(cell.flip_rate),
            })
    plotdata.sort(key=lambda row: (row["target"], row["k"]))
    return {
        "kind": "transfer_benchmark",
        "seed": report.seed,
        "source": report.source_name,
        "rmse_cap": report.rmse_cap,
        "n_total": report.n_total,
        "n_source_agree": report.n_source_agree,
        "n_stadv_success": report.n_stadv_success,
        "n_kept": report.n_kept,
        "stadv_rmse_mean": _clean(report.stadv_rmse_mean),
        "stadv_rmse_std": _clean(report.stadv_rmse_std),
        "variants": list(report.variants),
        "summary": rows,
        "samples": samples,
        "plotdata": plotdata,
    }


def write_transfer_files(payload: dict, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = payload["seed"]
    summary_csv = out_dir / "summary.csv"
    _write_csv(summary_csv, seed, TRANSFER_SUMMARY_COLUMNS, payload["summary"])
    per_sample = out_dir / "per_sample.csv"
    _write_csv(per_sample, seed, TRANSFER_SAMPLE_COLUMNS, payload["samples"])
    plotdata = out_dir / "plotdata.csv"
    _write_csv(plotdata, seed, PLOTDATA_COLUMNS, payload["plotdata"])
    summary_json = out_dir / "summary.json"
    summary_json.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return [summary_csv, summary_json, per_sample, plotdata]


def emit_transfer_report(report: TransferReport, out_dir) -> list[Path]:
    return write_transfer_files(transfer_payload(report), out_dir)
