"""JSON/CSV report emission and plot-data export.

Every report is a JSON object with a ``mode`` key. Wall-clock numbers only
ever appear under keys named ``latency``; everything else is a deterministic
function of the run configuration and seed.
"""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Iterable

from .cost import CostReport

NONDETERMINISTIC_KEYS = ("latency",)

COST_COLUMNS = ("layer", "tokens", "attn_flops", "mlp_flops", "merger_flops")
SHAPE_COLUMNS = ("layer", "tokens")
TRAIN_COLUMNS = ("step", "loss", "pml_grad_norm")
SWEEP_COLUMNS = ("fraction", "k", "variant", "tokens_out", "flops_total", "latency_median_s", "error")
GRADCHECK_COLUMNS = ("check", "max_rel_error", "coordinates", "tolerance", "passed")


def cost_document(report: CostReport, mode: str = "flops") -> dict:
    return {"mode": mode, **report.to_dict(), "nondeterministic_keys": list(NONDETERMINISTIC_KEYS)}


def sweep_document(reports: list[CostReport], metadata: dict) -> dict:
    return {
        "mode": "sweep",
        "metadata": metadata,
        "points": [r.to_dict() for r in reports],
        "nondeterministic_keys": list(NONDETERMINISTIC_KEYS),
    }


def mask_nondeterministic(doc):
    """Copy of ``doc`` with every ``latency`` entry removed, at any depth."""
    if isinstance(doc, dict):
        return {k: mask_nondeterministic(v) for k, v in doc.items() if k not in NONDETERMINISTIC_KEYS}
    if isinstance(doc, list):
        return [mask_nondeterministic(v) for v in doc]
    return doc


def _rows(doc: dict) -> tuple[tuple[str, ...], list[dict]]:
    mode = doc["mode"]
    if mode == "shapes":
        return SHAPE_COLUMNS, doc["trace"]
    if mode in ("flops", "bench"):
        return COST_COLUMNS, doc["layers"]
    if mode == "train":
        return TRAIN_COLUMNS, doc["steps"]
    if mode == "gradcheck":
        return GRADCHECK_COLUMNS, [dict(c, check=c["name"]) for c in doc["checks"]]
    if mode == "sweep":
        rows = []
        for p in doc["points"]:
            meta = p["metadata"]
            latency = p.get("latency")
            rows.append({
                "fraction": meta.get("fraction"),
                "k": meta.get("k"),
                "variant": meta.get("variant"),
                "tokens_out": p["tokens_out"],
                "flops_total": p["total_flops"],
                "latency_median_s": "" if latency is None else latency["median_s"],
                "error": p.get("error") or "",
            })
        return SWEEP_COLUMNS, rows
    raise ValueError(f"no CSV layout for report mode {mode!r}")


def to_csv(doc: dict) -> str:
    columns, rows = _rows(doc)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def to_json(doc: dict) -> str:
    return json.dumps(doc, indent=2) + "\n"


def _totals(doc: dict) -> dict:
    out = {"mode": doc["mode"], "total_flops": doc["total_flops"], "tokens_out": doc["tokens_out"]}
    if doc.get("latency") is not None:
        out["latency"] = doc["latency"]
    return out


def emit_report(report, fmt: str = "json", path=None) -> str:
    """Serialise ``report`` (a report dict or a :class:`CostReport`) and write it.

    Cost reports written as CSV get a companion ``<stem>.totals.json``. Returns
    the main serialised text; with ``path=None`` nothing is written.
    """
    doc = cost_document(report) if isinstance(report, CostReport) else report
    if fmt == "json":
        text = to_json(doc)
    elif fmt == "csv":
        text = to_csv(doc)
    else:
        raise ValueError(f"unknown report format {fmt!r} (expected json or csv)")
    if path is not None:
        path = Path(path)
        path.write_text(text)
        if fmt == "csv" and doc["mode"] in ("flops", "bench"):
            path.with_suffix(".totals.json").write_text(to_json(_totals(doc)))
    return text


def load_cost_report(path) -> CostReport:
    doc = json.loads(Path(path).read_text())
    return CostReport.from_dict(doc)


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "NaN"
    return repr(x)


def emit_plot(reports: Iterable[CostReport], stem) -> tuple[Path, Path]:
    """Write ``<stem>.dat`` (plot data) and ``<stem>.gp`` (gnuplot script).

    One row per report: depth fraction, insertion block, total FLOPs and
    median latency (``NaN`` when not measured). Output bytes depend only on
    the inputs.
    """
    reports = list(reports)
    if not reports:
        raise ValueError("emit_plot needs at least one report")
    stem = Path(stem)
    data_path, script_path = stem.with_suffix(".dat"), stem.with_suffix(".gp")
    lines = ["# index fraction k variant flops_total latency_median_s"]
    for i, rep in enumerate(reports):
        meta = rep.metadata
        latency = None if rep.latency is None else rep.latency.median_s
        lines.append(" ".join([
            str(i), _fmt(meta.get("fraction")), _fmt(meta.get("k")),
            str(meta.get("variant", "-")), str(rep.total_flops), _fmt(latency),
        ]))
    data_path.write_text("\n".join(lines) + "\n")
    script_path.write_text(
        f"""set terminal pngcairo size 900,500
set output '{stem.name}.png'
set title 'Encoder cost vs merger depth'
set xlabel 'insertion depth (fraction of L)'
set ylabel 'total FLOPs'
set y2label 'median latency (s)'
set y2tics
set ytics nomirror
set style fill solid 0.6
set boxwidth 0.4 relative
plot '{data_path.name}' using 1:5:xtic(2) with boxes title 'FLOPs', \\
     '' using 1:6 axes x1y2 with linespoints title 'latency'
"""
    )
    return data_path, script_path
