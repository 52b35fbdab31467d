import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xmodal import autodiff as ad
from xmodal.architectures import Model, UniXLayout
from xmodal.autodiff import Tape, backward
from xmodal.data import DataConfig, TextSource, gen_text, make_corpus
from xmodal.diagnostics import (
    SelectorError,
    UndefinedCosineError,
    WeightSelector,
    batch_gradients,
    conflict_profile,
    cosine,
    entropy_report,
    enumerate_selectors,
    grads_for,
    ngram_entropy,
)
from xmodal.training import batch_loss
from xmodal.transformer import ModelConfig


def tiny_setup(seed=0):
    dc = DataConfig(
        image_size=8, patch_size=4, codebook_k=8, v_text=16,
        n_text=16, n_pairs=16, codebook_fit_images=12, kmeans_iters=4,
        text_len_min=4, text_len_max=8, prompt_len_min=3, prompt_len_max=5,
    )
    mc = ModelConfig(n_layers=4, d_model=16, n_heads=2, d_ff=32,
                     v_text=16, v_vis=8)
    corpus = make_corpus(dc, mc, seed=seed)
    text = [s for s in corpus.samples if s.task == "text_only"]
    pairs = [s for s in corpus.samples if s.task == "t2i"]
    return mc, corpus, text, pairs


def test_cosine_identities():
    v = np.array([1.0, 2.0, -3.0])
    assert cosine(v, v) == 1.0
    assert cosine(v, -v) == pytest.approx(-1.0, abs=1e-15)
    assert cosine(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0


def test_cosine_zero_vector_rejected():
    with pytest.raises(UndefinedCosineError):
        cosine(np.zeros(3), np.ones(3))


def test_selector_validation():
    with pytest.raises(SelectorError):
        WeightSelector("ffn_mid", 0)
    with pytest.raises(SelectorError):
        WeightSelector("attn_o", 0, "middle")


def test_selector_resolution_per_arch():
    mc = ModelConfig(n_layers=4, d_model=8, n_heads=2, d_ff=16, v_text=8, v_vis=8)
    shared = Model(mc, "shared", seed=0)
    assert WeightSelector("ffn_down", 2, "any").resolve(shared) == \
        "layer.2.shared.ffn_down"
    unix = Model(mc, "unix", layout=UniXLayout(1, 1, 4), seed=0)
    assert WeightSelector("attn_v", 0, "vis").resolve(unix) == "layer.0.vis.attn_v"
    assert WeightSelector("attn_v", 1, "any").resolve(unix) == "layer.1.shared.attn_v"
    with pytest.raises(SelectorError):
        WeightSelector("attn_v", 1, "vis").resolve(unix)  # shared middle layer
    with pytest.raises(SelectorError):
        WeightSelector("attn_v", 0, "any").resolve(unix)  # ambiguous: two branches
    moe = Model(mc, "hardmoe", seed=0)
    assert WeightSelector("attn_o", 0, "any").resolve(moe) == "layer.0.shared.attn_o"
    assert WeightSelector("ffn_down", 0, "vis").resolve(moe) == "layer.0.vis.ffn_down"


def test_enumerate_selectors_counts():
    mc = ModelConfig(n_layers=4, d_model=8, n_heads=2, d_ff=16, v_text=8, v_vis=8)
    assert len(enumerate_selectors(Model(mc, "shared", seed=0))) == 12
    unix = Model(mc, "unix", layout=UniXLayout(1, 1, 4), seed=0)
    # 2 separated layers x 3 kinds x 2 branches + 2 shared layers x 3 kinds
    assert len(enumerate_selectors(unix)) == 2 * 3 * 2 + 2 * 3


def test_grads_for_doubled_batch_matches_mean_convention():
    mc, corpus, text, pairs = tiny_setup(seed=1)
    model = Model(mc, "shared", seed=2)
    sel = WeightSelector("ffn_down", 1, "shared")
    batch = text[:2] + pairs[:2]
    g1 = grads_for(model, batch, sel)
    g2 = grads_for(model, batch + batch, sel)
    np.testing.assert_allclose(g1, g2, atol=1e-12)


def test_grads_for_text_batch_vision_branch_is_zero():
    mc, corpus, text, pairs = tiny_setup(seed=3)
    unix = Model(mc, "unix", layout=UniXLayout(1, 1, 4), seed=4)
    g = grads_for(unix, text[:4], WeightSelector("ffn_down", 0, "vis"))
    assert np.all(g == 0.0)


def test_grads_for_matches_manual_tape_slice():
    mc, corpus, text, pairs = tiny_setup(seed=5)
    model = Model(mc, "shared", seed=6)
    batch = text[:2] + pairs[:2]
    sel = WeightSelector("attn_o", 2, "shared")
    g = grads_for(model, batch, sel)
    model.zero_grad()
    with Tape():
        loss, _ = batch_loss(model, batch)
        backward(loss)
    manual = model.params["layer.2.shared.attn_o"].grad.reshape(-1)
    np.testing.assert_array_equal(g, manual)


def test_gradient_extraction_leaves_weights_untouched():
    mc, corpus, text, pairs = tiny_setup(seed=7)
    model = Model(mc, "shared", seed=8)
    before = {n: t.data.copy() for n, t in model.named_weights()}
    batch_gradients(model, text[:3] + pairs[:3])
    for n, t in model.named_weights():
        np.testing.assert_array_equal(t.data, before[n])
        assert t.grad is None


def test_conflict_profile_identical_batches():
    mc, corpus, text, pairs = tiny_setup(seed=9)
    model = Model(mc, "shared", seed=10)
    batch = text[:2] + pairs[:2]
    profile = conflict_profile(model, batch, batch, [(batch, batch)])
    for cell in profile.cells:
        assert cell.s_inter == 1.0
        assert cell.s_base == 1.0
        assert cell.c_g == 0.0
        assert not cell.structural_zero


def test_conflict_profile_identity_and_sign():
    mc, corpus, text, pairs = tiny_setup(seed=11)
    model = Model(mc, "shared", seed=12)
    rng = np.random.default_rng(13)
    mm = pairs[:4]
    pair_batches = [(pairs[4:8], pairs[8:12]), (text[:4] + pairs[:2], pairs[2:6])]
    profile = conflict_profile(model, text[:4], mm, pair_batches)
    assert len(profile.cells) == 12
    for cell in profile.cells:
        assert cell.c_g == -(cell.s_inter - cell.s_base)
        assert -1.0 <= cell.s_inter <= 1.0
        assert -1.0 <= cell.s_base <= 1.0


def test_conflict_profile_same_batch_both_roles_bounds():
    mc, corpus, text, pairs = tiny_setup(seed=14)
    model = Model(mc, "shared", seed=15)
    batch = text[:2] + pairs[:2]
    profile = conflict_profile(model, batch, batch, [(text[:4], pairs[:4])])
    for cell in profile.cells:
        assert cell.s_inter == 1.0
        assert cell.c_g == -(1.0 - cell.s_base)
        assert cell.c_g <= 0.0


def test_conflict_profile_unix_structural_zeros():
    mc, corpus, text, pairs = tiny_setup(seed=16)
    unix = Model(mc, "unix", layout=UniXLayout(1, 1, 4), seed=17)
    profile = conflict_profile(unix, text[:4], pairs[:4],
                               [(corpus.samples[:4], corpus.samples[4:8])])
    vis_cells = [c for c in profile.cells if c.branch == "vis"]
    assert vis_cells and all(c.structural_zero for c in vis_cells)
    assert all(c.c_g is None for c in vis_cells)
    shared_cells = [c for c in profile.cells if c.branch == "shared"]
    assert shared_cells and all(not c.structural_zero for c in shared_cells)


def test_profile_csv_schema(tmp_path):
    mc, corpus, text, pairs = tiny_setup(seed=18)
    model = Model(mc, "shared", seed=19)
    batch = text[:2] + pairs[:2]
    profile = conflict_profile(model, batch, batch, [(batch, batch)])
    path = profile.to_csv(tmp_path / "conflict.csv")
    rows = list(csv.DictReader(open(path)))
    assert len(rows) == 12
    assert set(rows[0].keys()) == {
        "layer", "selector", "branch", "s_inter", "s_base", "c_g",
        "structural_zero",
    }
    assert {r["selector"] for r in rows} == {"ffn_down", "attn_o", "attn_v"}


def test_ngram_entropy_constant_stream():
    stream = np.zeros(500, dtype=int)
    for n in range(1, 5):
        assert ngram_entropy(stream, n) == 0.0


def test_ngram_entropy_uniform_iid():
    rng = np.random.default_rng(20)
    stream = rng.integers(0, 16, size=100_000)
    assert ngram_entropy(stream, 1) == pytest.approx(4.0, abs=0.05)


def test_ngram_entropy_markov_matches_analytic():
    src = TextSource.with_temperature(12, 1, 0.8, seed=21)
    analytic = src.conditional_entropy_bits()
    stream = gen_text(src, 100_000, seed=22)
    assert ngram_entropy(stream, 2) == pytest.approx(analytic, abs=0.05)


def test_ngram_entropy_errors():
    with pytest.raises(ValueError):
        ngram_entropy([1, 2, 3], 0)
    with pytest.raises(ValueError):
        ngram_entropy([1, 2], 3)


def test_ngram_entropy_base_conversion():
    rng = np.random.default_rng(23)
    stream = rng.integers(0, 8, size=2000)
    bits = ngram_entropy(stream, 2, base=2.0)
    nats = ngram_entropy(stream, 2, base=np.e)
    assert nats == pytest.approx(bits * np.log(2.0), rel=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 5), min_size=4, max_size=60))
def test_ngram_entropy_non_increasing_in_n(stream):
    stream = np.asarray(stream)
    values = [ngram_entropy(stream, n) for n in range(1, 5)]
    for a, b in zip(values, values[1:]):
        assert b <= a + 1e-12
    assert values[0] >= 0.0
    assert values[0] <= np.log2(6) + 1e-12


def test_entropy_report_constant_image_stream():
    report = entropy_report({"vq_image": np.full(200, 7)}, n_max=2)
    assert report.h("vq_image", 1) == 0.0
    assert report.distinct("vq_image", 1) == 1


def test_entropy_report_rows_and_csv(tmp_path):
    rng = np.random.default_rng(24)
    streams = {
        "text": rng.integers(0, 4, size=5000),
        "vq_image": rng.integers(0, 32, size=5000),
    }
    report = entropy_report(streams, n_max=4)
    assert len(report.rows) == 8
    assert report.distinct("vq_image", 1) == 32  # utilization counter
    path = report.to_csv(tmp_path / "entropy.csv")
    rows = list(csv.DictReader(open(path)))
    assert set(rows[0].keys()) == {
        "stream", "n", "h_bits", "tokens", "distinct_ngrams"
    }
    assert len(rows) == 8


def test_entropy_report_rejects_empty_stream():
    with pytest.raises(ValueError):
        entropy_report({"text": np.empty(0, dtype=int)}, n_max=2)
