"""Turn a sweep directory into a TSV summary, figures and a trend check."""

from __future__ import annotations

import json
from pathlib import Path

from . import plotting
from .experiment import read_records

# metric -> (axis label, better direction)
FIGURE_METRICS = {
    "uniformity_fusion": ("fusion uniformity", "lower"),
    "uniformity_unimodal": ("mean unimodal uniformity", "lower"),
    "alignment": ("unimodal-fusion alignment", "lower"),
    "median_rank": ("median rank", "lower"),
    "recall@1": ("R@1", "higher"),
    "recall@5": ("R@5", "higher"),
    "recall@10": ("R@10", "higher"),
    "probe_pearson_r": ("probe Pearson r", "higher"),
    "probe_l1": ("probe L1", "lower"),
    "probe_macro_aupr": ("probe macro AUPR", "higher"),
    "probe_ce": ("probe cross-entropy", "lower"),
}
RETRIEVAL = ("median_rank", "recall@1", "recall@5", "recall@10")
ARROW = {"lower": "(lower is better)", "higher": "(higher is better)"}


def collect(records) -> dict:
    """(metric, mode) -> {sparsity: value} over final test evaluations."""
    table: dict = {}
    for r in records:
        if r.split != "test" or r.metric == "contrastive_loss" or "/" in r.metric:
            continue
        table.setdefault((r.metric, r.mode), {})[r.sparsity] = r.value
    return table


def inversions(values: list, better: str) -> int:
    """Steps that improve instead of degrade along increasing sparsity."""
    count = 0
    for a, b in zip(values, values[1:]):
        if a is None or b is None:
            continue
        if (better == "higher" and b > a) or (better == "lower" and b < a):
            count += 1
    return count


def trend_check(table: dict, start: float = 0.4, allowed: int = 1) -> list[dict]:
    """Retrieval metrics should degrade with sparsity from ``start`` on."""
    rows = []
    for (metric, mode), by_s in sorted(table.items()):
        if metric not in RETRIEVAL:
            continue
        xs = sorted(s for s in by_s if s >= start - 1e-9)
        if len(xs) < 2:
            continue
        vals = [by_s[s] for s in xs]
        inv = inversions(vals, FIGURE_METRICS[metric][1])
        rows.append({"metric": metric, "mode": mode, "sparsities": xs, "values": vals,
                     "inversions": inv, "pass": inv <= allowed})
    return rows


def write_tsv(table: dict, path) -> list[float]:
    sparsities = sorted({s for by_s in table.values() for s in by_s})
    with open(path, "w") as fh:
        fh.write("metric\tmode\t" + "\t".join(f"{s:.2f}" for s in sparsities) + "\n")
        for (metric, mode), by_s in sorted(table.items()):
            cells = ["" if by_s.get(s) is None else f"{by_s[s]:.6g}" for s in sparsities]
            fh.write(f"{metric}\t{mode}\t" + "\t".join(cells) + "\n")
    return sparsities


def report(sweep_dir, out_dir=None) -> dict:
    sweep_dir = Path(sweep_dir)
    out = Path(out_dir) if out_dir is not None else sweep_dir / "report"
    out.mkdir(parents=True, exist_ok=True)
    table = collect(read_records(sweep_dir / "metrics.jsonl"))
    write_tsv(table, out / "summary.tsv")

    figures = []
    for metric, (label, better) in FIGURE_METRICS.items():
        series = {mode: list(by_s.items()) for (m, mode), by_s in table.items() if m == metric}
        if not series:
            continue
        path = out / f"{metric.replace('@', '_at_')}.png"
        plotting.metric_vs_sparsity(series, metric, label, path, ARROW[better])
        figures.append(path.name)

    curves_by_mode: dict = {}
    for f in sorted((sweep_dir / "curves").glob("*.json")) if (sweep_dir / "curves").exists() else []:
        c = json.loads(f.read_text())
        curves_by_mode.setdefault(c["mode"], []).append(c)
    for mode, curves in curves_by_mode.items():
        path = out / f"losses_{mode}.png"
        plotting.loss_curves(curves, mode, path)
        figures.append(path.name)

    trend = trend_check(table)
    grid_path = sweep_dir / "grid.json"
    missing = json.loads(grid_path.read_text()).get("missing", []) if grid_path.exists() else []
    lines = [
        f"{'PASS' if t['pass'] else 'FAIL'}  {t['metric']:<12} {t['mode']:<6} inversions={t['inversions']} "
        + " ".join(f"{s:.1f}:{v:.4g}" for s, v in zip(t["sparsities"], t["values"]) if v is not None)
        for t in trend
    ]
    lines += [f"MISSING  {m['mode']} sparsity={m['sparsity']}: {m['reason']}" for m in missing]
    (out / "trend.txt").write_text("\n".join(lines) + "\n")
    summary = {"figures": figures, "trend": trend, "missing": missing, "tsv": "summary.tsv"}
    (out / "report.json").write_text(json.dumps(summary, indent=1))
    return summary
