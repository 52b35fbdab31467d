import csv
import math
from pathlib import Path

import pytest

from plotviz import ChartSpec, SchemaError, plot_conflict, plot_entropy
from plotviz.charts import CONFLICT_COLUMNS, plot_losscurve
from plotviz.cli import main

GOLDEN = Path(__file__).parent / "golden"


def test_golden_conflict_renders_one_series_per_arch_and_selector(tmp_path):
    out = tmp_path / "conflict.png"
    spec = ChartSpec(
        kind="conflict",
        inputs=[GOLDEN / "conflict-shared.csv", GOLDEN / "conflict-unix.csv"],
        out=out,
        labels=["shared", "unix"],
    )
    series = plot_conflict(spec)
    assert out.is_file() and out.stat().st_size > 0
    assert set(series) == {
        (arch, sel)
        for arch in ("shared", "unix")
        for sel in ("ffn_down", "attn_o", "attn_v")
    }
    print("\nACCEPTANCE PASS [plotviz-conflict] 6 series, "
          f"{out.stat().st_size} bytes")


def test_golden_conflict_single_selector_two_series(tmp_path):
    out = tmp_path / "fig.png"
    spec = ChartSpec(
        kind="conflict",
        inputs=[GOLDEN / "conflict-shared.csv", GOLDEN / "conflict-unix.csv"],
        out=out,
        labels=["shared", "unix"],
        selectors=["ffn_down"],
    )
    series = plot_conflict(spec)
    assert out.is_file()
    assert len(series) == 2


def test_structural_zeros_render_as_gaps_not_zeros(tmp_path):
    spec = ChartSpec(
        kind="conflict",
        inputs=[GOLDEN / "conflict-unix.csv"],
        out=tmp_path / "unix.png",
        labels=["unix"],
    )
    series = plot_conflict(spec)
    # the unix profile has deep separated layers where both branches are
    # structurally zero: those layers must be NaN, never 0.0
    rows = list(csv.DictReader(open(GOLDEN / "conflict-unix.csv")))
    gap_layers = {
        (r["selector"], int(r["layer"]))
        for r in rows
        if r["structural_zero"] == "1"
    }
    real_layers = {
        (r["selector"], int(r["layer"]))
        for r in rows
        if r["structural_zero"] == "0"
    }
    pure_gaps = gap_layers - real_layers
    assert pure_gaps, "golden fixture lost its structural-zero layers"
    for sel, layer in pure_gaps:
        xs, ys = series[("unix", sel)]
        assert math.isnan(ys[xs.index(layer)])


def test_values_plotted_verbatim(tmp_path):
    spec = ChartSpec(
        kind="conflict",
        inputs=[GOLDEN / "conflict-shared.csv"],
        out=tmp_path / "s.png",
        labels=["shared"],
    )
    series = plot_conflict(spec)
    rows = list(csv.DictReader(open(GOLDEN / "conflict-shared.csv")))
    for row in rows:
        xs, ys = series[("shared", row["selector"])]
        assert ys[xs.index(int(row["layer"]))] == float(row["c_g"])


def test_empty_csv_body_errors_and_writes_nothing(tmp_path):
    empty = tmp_path / "empty.csv"
    empty.write_text(",".join(CONFLICT_COLUMNS) + "\n")
    out = tmp_path / "never.png"
    with pytest.raises(SchemaError, match="no data rows"):
        plot_conflict(ChartSpec("conflict", [empty], out))
    assert not out.exists()


def test_missing_column_error_lists_expected(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("layer,selector\n0,ffn_down\n")
    with pytest.raises(SchemaError) as err:
        plot_conflict(ChartSpec("conflict", [bad], tmp_path / "x.png"))
    for col in CONFLICT_COLUMNS:
        assert col in str(err.value)


def test_entropy_golden_renders_one_series_per_stream(tmp_path):
    out = tmp_path / "entropy.png"
    series = plot_entropy(ChartSpec("entropy", [GOLDEN / "entropy.csv"], out))
    assert out.is_file()
    assert set(series) == {"text", "vq_image"}
    for xs, ys in series.values():
        assert xs == [1, 2, 3, 4]
        assert all(y >= 0 for y in ys)
    print("\nACCEPTANCE PASS [plotviz-entropy] "
          f"{len(series)} streams, file {out.name}")


def test_entropy_single_stream(tmp_path):
    src = tmp_path / "one.csv"
    src.write_text(
        "stream,n,h_bits,tokens,distinct_ngrams\n"
        "text,1,1.5,100,8\ntext,2,1.1,100,30\n"
    )
    series = plot_entropy(ChartSpec("entropy", [src], tmp_path / "o.png"))
    assert list(series) == ["text"]


def test_losscurve_golden(tmp_path):
    out = tmp_path / "loss.svg"
    series = plot_losscurve(ChartSpec("losscurve", [GOLDEN / "loss.csv"], out))
    assert out.is_file()
    assert set(series) == {"loss_total", "loss_text", "loss_vis"}


def test_unknown_kind_rejected(tmp_path):
    with pytest.raises(SchemaError):
        ChartSpec("scatter", [GOLDEN / "entropy.csv"], tmp_path / "x.png")


def test_cli_renders_and_reports(tmp_path):
    out = tmp_path / "cli.png"
    code = main([
        "conflict",
        "--in", str(GOLDEN / "conflict-shared.csv"),
        str(GOLDEN / "conflict-unix.csv"),
        "--out", str(out),
        "--label", "shared", "--label", "unix",
    ])
    assert code == 0
    assert out.is_file()


def test_cli_schema_violation_exit_code(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("nope\n1\n")
    code = main(["entropy", "--in", str(bad), "--out", str(tmp_path / "x.png")])
    assert code == 2
