"""Chart builders over the diagnostics CSV contracts.

Three kinds: conflict (c_g vs layer, one series per input file and matrix
selector, structural zeros drawn as gaps), entropy (H_n vs n, one series per
stream), losscurve (losses vs step). Values are plotted exactly as read;
nothing is recomputed or smoothed.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

CONFLICT_COLUMNS = (
    "layer", "selector", "branch", "s_inter", "s_base", "c_g",
    "structural_zero",
)
ENTROPY_COLUMNS = ("stream", "n", "h_bits", "tokens", "distinct_ngrams")
LOSS_COLUMNS = ("step", "lr", "loss_total", "loss_text", "loss_vis")

KINDS = ("conflict", "entropy", "losscurve")


class SchemaError(ValueError):
    """CSV does not match the documented schema."""


@dataclass
class ChartSpec:
    kind: str
    inputs: list
    out: str
    labels: list = None
    selectors: list = None  # conflict only; None plots every matrix kind
    title: str = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"unknown chart kind {self.kind!r}; expected {KINDS}")
        if not self.inputs:
            raise SchemaError("chart needs at least one input CSV")
        if self.labels is not None and len(self.labels) != len(self.inputs):
            raise SchemaError("labels must match inputs one to one")

    def labeled_inputs(self):
        labels = self.labels or [Path(p).stem for p in self.inputs]
        return list(zip(self.inputs, labels))


def read_rows(path, expected) -> list:
    path = Path(path)
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        header = reader.fieldnames or []
        missing = [c for c in expected if c not in header]
        if missing:
            raise SchemaError(
                f"{path}: missing columns {missing}; expected columns "
                f"{list(expected)}"
            )
        rows = list(reader)
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    return rows


def _maybe_float(text: str) -> float:
    return float("nan") if text in ("", None) else float(text)


def plot_conflict(spec: ChartSpec) -> dict:
    """One series per (input label, selector); structural-zero layers become
    NaN points, which matplotlib renders as gaps."""
    series = {}
    for path, label in spec.labeled_inputs():
        rows = read_rows(path, CONFLICT_COLUMNS)
        per_sel = {}
        for row in rows:
            sel = row["selector"]
            if spec.selectors is not None and sel not in spec.selectors:
                continue
            layer = int(row["layer"])
            value = _maybe_float(row["c_g"])
            per_sel.setdefault(sel, {}).setdefault(layer, []).append(value)
        for sel, by_layer in per_sel.items():
            xs = sorted(by_layer)
            ys = []
            for layer in xs:
                vals = [v for v in by_layer[layer] if not math.isnan(v)]
                ys.append(sum(vals) / len(vals) if vals else float("nan"))
            series[(label, sel)] = (xs, ys)
    if not series:
        raise SchemaError("no series left after selector filtering")
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for (label, sel), (xs, ys) in sorted(series.items()):
        ax.plot(xs, ys, marker="o", label=f"{label} / {sel}")
    ax.set_xlabel("layer")
    ax.set_ylabel("gradient conflict")
    ax.axhline(0.0, color="gray", lw=0.6)
    ax.legend(fontsize=8)
    ax.set_title(spec.title or "gradient conflict by depth")
    _save(fig, spec.out)
    return series


def plot_entropy(spec: ChartSpec) -> dict:
    """One series per stream; the y axis is floored at zero."""
    series = {}
    for path, label in spec.labeled_inputs():
        rows = read_rows(path, ENTROPY_COLUMNS)
        prefix = f"{label}:" if len(spec.inputs) > 1 else ""
        for row in rows:
            key = prefix + row["stream"]
            series.setdefault(key, {})[int(row["n"])] = float(row["h_bits"])
    fig, ax = plt.subplots(figsize=(6, 4))
    out = {}
    for key, by_n in sorted(series.items()):
        xs = sorted(by_n)
        ys = [by_n[n] for n in xs]
        out[key] = (xs, ys)
        ax.plot(xs, ys, marker="s", label=key)
    ax.set_xlabel("context length n")
    ax.set_ylabel("conditional entropy (bits)")
    ax.set_ylim(bottom=0.0)
    ax.set_xticks(sorted({x for xs, _ in out.values() for x in xs}))
    ax.legend(fontsize=8)
    ax.set_title(spec.title or "n-gram conditional entropy")
    _save(fig, spec.out)
    return out


def plot_losscurve(spec: ChartSpec) -> dict:
    """Total and per-modality losses against the training step."""
    fig, ax = plt.subplots(figsize=(7, 4))
    out = {}
    for path, label in spec.labeled_inputs():
        rows = read_rows(path, LOSS_COLUMNS)
        steps = [int(r["step"]) for r in rows]
        prefix = f"{label}:" if len(spec.inputs) > 1 else ""
        for column in ("loss_total", "loss_text", "loss_vis"):
            ys = [_maybe_float(r[column]) for r in rows]
            out[prefix + column] = (steps, ys)
            ax.plot(steps, ys, label=prefix + column)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    ax.set_title(spec.title or "training loss")
    _save(fig, spec.out)
    return out


def plot_chart(spec: ChartSpec) -> dict:
    if spec.kind == "conflict":
        return plot_conflict(spec)
    if spec.kind == "entropy":
        return plot_entropy(spec)
    return plot_losscurve(spec)


def _save(fig, out):
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=120, bbox_inches="tight")
    plt.close(fig)
