"""Statistics over routing traces.

All counts use each record's top-1 expert except :func:`load_balance`,
which spreads every token over its k selected experts at weight 1/k.
Grouping defaults to token modality; any other per-token label (for
example a question category) can be passed as ``groups``.

Frequent routing pathways are found by counting whole top-1 sequences,
not by any projection of them.

Report JSON schemas::

    distribution: {"kind": "expert_modality" | "modality_expert", "layer": int,
                   "rows": [..], "cols": [..], "counts": [[int]], "values": [[float]],
                   "empty_rows": [..]}
    load_balance: {"kind": "load_balance", "layer": int, "k": int, "values": [float]}
    pathways:     {"kind": "pathways", "moe_layers": [..], "top": int,
                   "groups": {label: [{"path": [int], "count": int}]}}
"""
from __future__ import annotations

import csv
import io
import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError
from .moe import RoutingTrace
from .tokens import MODALITIES

REPORTS = ("expert_modality", "modality_expert", "load_balance", "pathways")


@dataclass
class DistributionMatrix:
    kind: str
    layer: int
    rows: tuple
    cols: tuple
    counts: np.ndarray
    values: np.ndarray
    empty_rows: tuple

    def to_dict(self):
        return {"kind": self.kind, "layer": self.layer, "rows": list(self.rows),
                "cols": list(self.cols), "counts": self.counts.astype(int).tolist(),
                "values": self.values.tolist(), "empty_rows": list(self.empty_rows)}


@dataclass
class Pathway:
    path: tuple
    count: int
    modality: str


def _layer_records(trace: RoutingTrace, layer):
    if not trace.records:
        raise DomainError("routing trace is empty")
    if layer not in trace.moe_layers:
        raise DomainError(f"layer {layer} is not a MoE layer (have {list(trace.moe_layers)})")
    return [r for r in trace.records if r.layer_index == layer]


def _group_labels(records, groups):
    if groups is None:
        labels = [r.modality for r in records]
        present = set(labels)
        return labels, tuple(m for m in MODALITIES if m in present)
    labels = [groups[r.token_index] for r in records]
    return labels, tuple(sorted(set(labels)))


def _normalise(counts):
    sums = counts.sum(axis=1, keepdims=True)
    values = np.divide(counts, sums, out=np.zeros_like(counts, dtype=np.float64), where=sums > 0)
    return values, tuple(int(i) for i in np.nonzero(sums[:, 0] == 0)[0])


def _counts(trace, layer, groups):
    recs = _layer_records(trace, layer)
    labels, names = _group_labels(recs, groups)
    col = {g: j for j, g in enumerate(names)}
    counts = np.zeros((trace.n_experts, len(names)))
    for r, g in zip(recs, labels):
        counts[r.top1, col[g]] += 1
    return counts, names


def expert_modality_distribution(trace, layer, groups=None) -> DistributionMatrix:
    """Rows are experts; each row is the group mix of the expert's top-1 tokens."""
    counts, names = _counts(trace, layer, groups)
    values, empty = _normalise(counts)
    return DistributionMatrix("expert_modality", layer, tuple(range(trace.n_experts)), names,
                              counts, values, empty)


def modality_expert_distribution(trace, layer, groups=None) -> DistributionMatrix:
    """Rows are groups; each row is normalised within that group."""
    counts, names = _counts(trace, layer, groups)
    counts = counts.T.copy()
    values, empty = _normalise(counts)
    return DistributionMatrix("modality_expert", layer, names, tuple(range(trace.n_experts)),
                              counts, values, empty)


def load_balance(trace, layer) -> np.ndarray:
    recs = _layer_records(trace, layer)
    out = np.zeros(trace.n_experts)
    for r in recs:
        for e in r.selected:
            out[e] += 1.0 / len(r.selected)
    return out / len(recs)


def all_pathways(trace, groups=None) -> dict:
    """Untruncated pathway counts per group: ``{group: Counter(path -> count)}``."""
    if not trace.records:
        raise DomainError("routing trace is empty")
    by_token = {}
    for r in trace.records:
        by_token.setdefault(r.token_index, (r.modality, {}))[1][r.layer_index] = r.top1
    out = {}
    for tok, (mod, per_layer) in sorted(by_token.items()):
        label = mod if groups is None else groups[tok]
        path = tuple(per_layer[li] for li in trace.moe_layers)
        out.setdefault(label, Counter())[path] += 1
    return out


def top_pathways(trace, n, groups=None) -> list:
    """The ``n`` most frequent top-1 sequences per group, count then path order."""
    if n < 1:
        raise DomainError("n must be >= 1")
    counts = all_pathways(trace, groups)
    order = [m for m in MODALITIES if m in counts] + sorted(g for g in counts if g not in MODALITIES)
    out = []
    for g in order:
        ranked = sorted(counts[g].items(), key=lambda kv: (-kv[1], kv[0]))[:n]
        out += [Pathway(p, c, g) for p, c in ranked]
    return out


def build_report(trace, name, layer=None, top=10, groups=None) -> dict:
    if name not in REPORTS:
        raise DomainError(f"unknown report {name!r}; valid: {', '.join(REPORTS)}")
    if name == "pathways":
        paths = top_pathways(trace, top, groups)
        grouped = {}
        for p in paths:
            grouped.setdefault(p.modality, []).append({"path": list(p.path), "count": p.count})
        return {"kind": "pathways", "moe_layers": list(trace.moe_layers), "top": top,
                "groups": grouped}
    if layer is None:
        if not trace.moe_layers:
            raise DomainError("routing trace has no MoE layers")
        layer = trace.moe_layers[0]
    if name == "load_balance":
        return {"kind": "load_balance", "layer": layer, "k": trace.k,
                "values": load_balance(trace, layer).tolist()}
    fn = expert_modality_distribution if name == "expert_modality" else modality_expert_distribution
    return fn(trace, layer, groups).to_dict()


def report_to_json(report: dict) -> str:
    return json.dumps(report, indent=2) + "\n"


def report_to_csv(report: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    kind = report["kind"]
    if kind == "load_balance":
        w.writerow(["layer", "expert", "value"])
        for e, v in enumerate(report["values"]):
            w.writerow([report["layer"], e, repr(float(v))])
    elif kind == "pathways":
        w.writerow(["group", "rank", "path", "count"])
        for g, items in report["groups"].items():
            for rank, item in enumerate(items):
                w.writerow([g, rank, "-".join(str(e) for e in item["path"]), item["count"]])
    else:
        w.writerow(["layer", "row", "col", "count", "value"])
        for i, r in enumerate(report["rows"]):
            for j, c in enumerate(report["cols"]):
                w.writerow([report["layer"], r, c, report["counts"][i][j],
                            repr(float(report["values"][i][j]))])
    return buf.getvalue()


def export(report: dict, fmt, path) -> Path:
    path = Path(path)
    if fmt == "json":
        text = report_to_json(report)
    elif fmt == "csv":
        text = report_to_csv(report)
    else:
        raise DomainError(f"unknown export format {fmt!r}")
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc
    return path
