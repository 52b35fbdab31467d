"""Measurement instruments: debiased gradient conflict and n-gram entropy.

Gradient conflict per (layer, matrix, branch): the cosine between a pure-text
batch gradient and an image-pair batch gradient, debiased by the mean cosine
between gradients of random same-distribution batches, reported as
c = -(s_inter - s_base). Cells whose gradient is identically zero by routing
structure are flagged rather than scored.

Conditional n-gram entropy: plug-in estimate from circular (wrap-around)
n-gram counts, so H_n is exactly non-increasing in n on any fixed stream.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .architectures import Model
from .autodiff import Tape, backward
from .training import batch_loss, format_float

MATRIX_KINDS = ("ffn_down", "attn_o", "attn_v")
BRANCHES = ("text", "vis", "shared")


class SelectorError(ValueError):
    """Selector does not resolve to exactly one weight in the model."""


class UndefinedCosineError(ArithmeticError):
    """Cosine of a zero vector."""


@dataclass(frozen=True)
class WeightSelector:
    kind: str
    layer: int
    branch: str = "any"

    def __post_init__(self):
        if self.kind not in MATRIX_KINDS:
            raise SelectorError(f"unknown matrix kind {self.kind!r}")
        if self.branch not in BRANCHES + ("any",):
            raise SelectorError(f"unknown branch {self.branch!r}")

    def resolve(self, model: Model) -> str:
        if self.branch != "any":
            name = f"layer.{self.layer}.{self.branch}.{self.kind}"
            if name not in model.params:
                raise SelectorError(f"{name} not present in a {model.arch} model")
            return name
        hits = [
            f"layer.{self.layer}.{b}.{self.kind}"
            for b in BRANCHES
            if f"layer.{self.layer}.{b}.{self.kind}" in model.params
        ]
        if len(hits) != 1:
            raise SelectorError(
                f"selector ({self.kind}, layer {self.layer}, any) matches "
                f"{len(hits)} weights in a {model.arch} model"
            )
        return hits[0]


def enumerate_selectors(model: Model, kinds=MATRIX_KINDS) -> list:
    """Every (kind, layer, branch) actually present in the model."""
    out = []
    for layer in range(model.config.n_layers):
        for kind in kinds:
            for branch in BRANCHES:
                if f"layer.{layer}.{branch}.{kind}" in model.params:
                    out.append(WeightSelector(kind, layer, branch))
    return out


def batch_gradients(model: Model, batch: list) -> dict:
    """One forward/backward over a batch; returns copies of every parameter
    gradient (zeros where a weight was never touched). Model weights and any
    optimizer state are untouched."""
    model.zero_grad()
    with Tape():
        loss, _ = batch_loss(model, batch)
        backward(loss)
    grads = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in model.params.items()
    }
    model.zero_grad()
    return grads


def grads_for(model: Model, batch: list, selector: WeightSelector) -> np.ndarray:
    """Flattened gradient of the selected matrix for one batch."""
    name = selector.resolve(model)
    return batch_gradients(model, batch)[name].reshape(-1)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise UndefinedCosineError("cosine of a zero vector is undefined")
    if np.array_equal(a, b):
        return 1.0  # exact by definition; avoids sqrt round-off
    return float(a @ b / (na * nb))


@dataclass
class ProfileCell:
    layer: int
    selector: str
    branch: str
    s_inter: float  # None when structurally zero
    s_base: float
    c_g: float
    structural_zero: bool


@dataclass
class ConflictProfile:
    cells: list
    meta: dict = field(default_factory=dict)

    def cell(self, layer: int, selector: str, branch: str) -> ProfileCell:
        for c in self.cells:
            if (c.layer, c.selector, c.branch) == (layer, selector, branch):
                return c
        raise KeyError((layer, selector, branch))

    def to_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(
                ["layer", "selector", "branch", "s_inter", "s_base", "c_g",
                 "structural_zero"]
            )
            for c in self.cells:
                writer.writerow(
                    [
                        c.layer,
                        c.selector,
                        c.branch,
                        "" if c.s_inter is None else format_float(c.s_inter),
                        "" if c.s_base is None else format_float(c.s_base),
                        "" if c.c_g is None else format_float(c.c_g),
                        int(c.structural_zero),
                    ]
                )
        return path


def conflict_profile(
    model: Model,
    text_batch: list,
    mm_batch: list,
    rand_mm_pairs: list,
    selectors: list = None,
    meta: dict = None,
) -> ConflictProfile:
    """Debiased conflict for every requested selector.

    ``rand_mm_pairs`` is a list of (batch_a, batch_b) used for the baseline
    similarity; the baseline averages over the pairs whose cosines are
    defined. A cell is a structural zero when one of its gradients vanishes
    identically (a branch the loss cannot reach).
    """
    if selectors is None:
        selectors = enumerate_selectors(model)
    if not rand_mm_pairs:
        raise ValueError("need at least one random batch pair for the baseline")
    g_text = batch_gradients(model, text_batch)
    g_img = batch_gradients(model, mm_batch)
    pair_grads = [
        (batch_gradients(model, a), batch_gradients(model, b))
        for a, b in rand_mm_pairs
    ]
    cells = []
    for sel in selectors:
        name = sel.resolve(model)
        base_vals = []
        for ga, gb in pair_grads:
            try:
                base_vals.append(cosine(ga[name], gb[name]))
            except UndefinedCosineError:
                continue
        s_base = float(np.mean(base_vals)) if base_vals else None
        try:
            s_inter = cosine(g_text[name], g_img[name])
        except UndefinedCosineError:
            s_inter = None
        if s_inter is None or s_base is None:
            cells.append(
                ProfileCell(sel.layer, sel.kind, sel.branch, s_inter, s_base,
                            None, True)
            )
        else:
            cells.append(
                ProfileCell(sel.layer, sel.kind, sel.branch, s_inter, s_base,
                            -(s_inter - s_base), False)
            )
    return ConflictProfile(cells=cells, meta=meta or {})


# --- n-gram conditional entropy -------------------------------------------


def _block_entropy_bits(stream: np.ndarray, n: int) -> tuple:
    """Entropy of the circular n-window distribution, plus distinct count."""
    if n == 0:
        return 0.0, 0
    size = stream.size
    ext = np.concatenate([stream, stream[: n - 1]]) if n > 1 else stream
    windows = np.lib.stride_tricks.sliding_window_view(ext, n)
    vocab = int(stream.max()) + 1 if stream.size else 1
    codes = np.zeros(size, dtype=np.int64)
    for j in range(n):
        codes = codes * vocab + windows[:size, j]
    _, counts = np.unique(codes, return_counts=True)
    p = counts / size
    return float(-(p * np.log2(p)).sum()), int(counts.size)


def ngram_entropy(stream, n: int, base: float = 2.0) -> float:
    """Plug-in conditional entropy of the n-th token given the previous n-1.

    Counts use circular windows, which makes the estimate exactly
    non-increasing in n for any stream. ``base`` converts from bits.
    """
    stream = np.asarray(stream, dtype=np.int64)
    if n < 1:
        raise ValueError("n must be >= 1")
    if stream.size < n:
        raise ValueError(f"stream of {stream.size} tokens is shorter than n={n}")
    h_n, _ = _block_entropy_bits(stream, n)
    h_prev, _ = _block_entropy_bits(stream, n - 1)
    bits = h_n - h_prev
    return bits / np.log2(base)


@dataclass
class EntropyRow:
    stream: str
    n: int
    h_bits: float
    tokens: int
    distinct_ngrams: int


@dataclass
class EntropyReport:
    rows: list

    def h(self, stream: str, n: int) -> float:
        for r in self.rows:
            if r.stream == stream and r.n == n:
                return r.h_bits
        raise KeyError((stream, n))

    def distinct(self, stream: str, n: int = 1) -> int:
        for r in self.rows:
            if r.stream == stream and r.n == n:
                return r.distinct_ngrams
        raise KeyError((stream, n))

    def to_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["stream", "n", "h_bits", "tokens", "distinct_ngrams"])
            for r in self.rows:
                writer.writerow(
                    [r.stream, r.n, format_float(r.h_bits), r.tokens,
                     r.distinct_ngrams]
                )
        return path


def entropy_report(streams: dict, n_max: int) -> EntropyReport:
    """H_n for n = 1..n_max per stream; the n=1 row's distinct count doubles
    as the vocabulary-utilization counter."""
    rows = []
    for label, stream in streams.items():
        stream = np.asarray(stream, dtype=np.int64)
        if stream.size == 0:
            raise ValueError(f"stream {label!r} is empty")
        for n in range(1, n_max + 1):
            _, distinct = _block_entropy_bits(stream, n)
            rows.append(
                EntropyRow(
                    stream=label,
                    n=n,
                    h_bits=ngram_entropy(stream, n),
                    tokens=int(stream.size),
                    distinct_ngrams=distinct,
                )
            )
    return EntropyReport(rows=rows)
