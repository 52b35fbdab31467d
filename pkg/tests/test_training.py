import numpy as np
import pytest

from xmodal import autodiff as ad
from xmodal.architectures import Model, UniXLayout
from xmodal.autodiff import NumericError, Tape, Tensor, backward
from xmodal.data import DataConfig, make_corpus
from xmodal.training import (
    OptimState,
    Schedule,
    TrainConfig,
    batch_loss,
    clip_global_norm,
    optim_step,
    sequence_loss,
    train,
)
from xmodal.transformer import ModelConfig


def tiny_corpus(seed=0, n_text=12, n_pairs=12, v_text=16, k=8):
    dc = DataConfig(
        image_size=8, patch_size=4, codebook_k=k, v_text=v_text,
        n_text=n_text, n_pairs=n_pairs, codebook_fit_images=12, kmeans_iters=4,
        text_len_min=4, text_len_max=8, prompt_len_min=3, prompt_len_max=5,
    )
    mc = ModelConfig(n_layers=2, d_model=16, n_heads=2, d_ff=32,
                     v_text=v_text, v_vis=k)
    return dc, mc, make_corpus(dc, mc, seed=seed)


class CopyModel:
    """Emits a large margin on each position's true next token."""

    arch = "shared"

    def __init__(self, vocab, margin=60.0):
        self.vocab = vocab
        self.margin = margin

    def forward_sample(self, sample):
        t = len(sample.tokens)
        logits = np.zeros((t, self.vocab))
        logits[np.arange(t - 1), sample.tokens[1:]] = self.margin
        return Tensor(logits)


def test_sequence_loss_uniform_logits_is_log_vocab():
    cfg = ModelConfig(n_layers=1, d_model=8, n_heads=2, d_ff=16,
                      v_text=40, v_vis=36)
    assert cfg.v_total == 80
    model = Model(cfg, "shared", seed=0)
    for name, t in model.named_weights():
        t.data[:] = 0.0
    dc, mc, corpus = None, None, None
    from xmodal.data import build_sequence, apply_loss_mask

    sample = apply_loss_mask(build_sequence("text_only", [1, 2, 3, 4], None, cfg), cfg)
    loss = sequence_loss(model, sample)
    assert loss.item() == pytest.approx(np.log(80), abs=1e-12)


def test_sequence_loss_memorizing_model_approaches_zero():
    cfg = ModelConfig(n_layers=1, d_model=8, n_heads=2, d_ff=16, v_text=16, v_vis=8)
    from xmodal.data import apply_loss_mask, build_sequence

    sample = apply_loss_mask(
        build_sequence("t2i", [1, 2, 3], [0, 1, 2, 3], cfg), cfg
    )
    loss = sequence_loss(CopyModel(cfg.v_total), sample)
    assert loss.item() < 1e-10


def test_batch_loss_equals_manual_position_average():
    dc, mc, corpus = tiny_corpus(seed=1)
    model = Model(mc, "shared", seed=2)
    batch = corpus.samples[:6]
    loss, stats = batch_loss(model, batch)
    total_nll = 0.0
    total_count = 0
    for s in batch:
        logits = model.forward_sample(s).data
        t = len(s.tokens)
        for i in range(t - 1):
            if s.loss_mask[i + 1]:
                row = logits[i] - logits[i].max()
                total_nll += np.log(np.exp(row).sum()) - row[s.tokens[i + 1]]
                total_count += 1
    assert loss.item() == pytest.approx(total_nll / total_count, abs=1e-12)
    assert stats["loss_total"] == pytest.approx(loss.item(), abs=1e-12)


def test_modality_split_weighted_sum_equals_total():
    dc, mc, corpus = tiny_corpus(seed=3)
    model = Model(mc, "shared", seed=4)
    text = [s for s in corpus.samples if s.task == "text_only"][:4]
    pairs = [s for s in corpus.samples if s.task != "text_only"][:4]
    batch = text + pairs
    loss, stats = batch_loss(model, batch)
    assert stats["n_text"] > 0 and stats["n_vis"] > 0
    n_t, n_v = stats["n_text"], stats["n_vis"]
    combined = (stats["loss_text"] * n_t + stats["loss_vis"] * n_v) / (n_t + n_v)
    assert combined == pytest.approx(stats["loss_total"], abs=1e-12)


def test_schedule_warmup_then_constant():
    sched = Schedule(base_lr=5e-5, warmup_ratio=0.03, total_steps=1000)
    assert sched.lr(0) == 0.0
    assert sched.lr(15) == pytest.approx(2.5e-5)
    assert sched.lr(30) == pytest.approx(5e-5)
    assert sched.lr(60) == pytest.approx(5e-5)
    assert sched.lr(999) == pytest.approx(5e-5)


def test_optim_step_zero_grad_no_decay_keeps_params():
    p = {"w": ad.param(np.array([1.0, -2.0, 3.0]))}
    state = OptimState(p)
    cfg = TrainConfig(lr=0.1, weight_decay=0.0)
    sched = Schedule(0.1, 0.0, 10)
    optim_step(p, {"w": np.zeros(3)}, state, sched, t=5, cfg=cfg)
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0, 3.0])


def test_optim_step_matches_hand_computed_two_steps():
    lr, b1, b2, eps = 0.1, 0.9, 0.95, 1e-8
    p = {"w": ad.param(np.array(2.0))}
    state = OptimState(p)
    cfg = TrainConfig(lr=lr, betas=(b1, b2), eps=eps, weight_decay=0.0)
    sched = Schedule(lr, 0.0, 10)
    grads = [np.array(0.5), np.array(-0.25)]

    # hand-computed reference
    w, m, v = 2.0, 0.0, 0.0
    for step, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * float(g)
        v = b2 * v + (1 - b2) * float(g) ** 2
        mh = m / (1 - b1**step)
        vh = v / (1 - b2**step)
        w -= lr * mh / (np.sqrt(vh) + eps)

    for t, g in enumerate(grads):
        optim_step(p, {"w": g}, state, sched, t=t, cfg=cfg)
    assert float(p["w"].data) == pytest.approx(w, abs=1e-12)


def test_optim_step_rejects_nonfinite_grad_naming_param():
    p = {"layer.0.shared.attn_q": ad.param(np.ones(2))}
    state = OptimState(p)
    cfg = TrainConfig()
    with pytest.raises(NumericError, match="layer.0.shared.attn_q"):
        optim_step(p, {"layer.0.shared.attn_q": np.array([1.0, np.nan])},
                   state, Schedule(1e-3, 0.0, 10), 0, cfg)


def test_clip_global_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    norm = clip_global_norm(grads, 1.0)
    assert norm == pytest.approx(5.0)
    assert np.sqrt(sum((g**2).sum() for g in grads.values())) == pytest.approx(1.0)
    grads2 = {"a": np.array([0.1])}
    clip_global_norm(grads2, 1.0)
    np.testing.assert_array_equal(grads2["a"], [0.1])


def test_train_zero_steps_checkpoint_equals_init(tmp_path):
    dc, mc, corpus = tiny_corpus(seed=5)
    model = Model(mc, "shared", seed=6)
    init = {name: t.data.copy() for name, t in model.named_weights()}
    result = train(model, corpus.samples, steps=0,
                   train_cfg=TrainConfig(batch_tokens=128),
                   out_dir=tmp_path, seed=7)
    from xmodal.checkpoint import load_model

    loaded = load_model(result["checkpoints"][0])
    for name, arr in init.items():
        np.testing.assert_array_equal(loaded.params[name].data, arr)


def test_train_deterministic_and_loss_improves(tmp_path):
    dc, mc, corpus = tiny_corpus(seed=8)
    cfg = TrainConfig(lr=3e-3, batch_tokens=192, warmup_ratio=0.1)
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    res_a = train(Model(mc, "shared", seed=9), corpus.samples, 30, cfg, out_a, seed=10)
    res_b = train(Model(mc, "shared", seed=9), corpus.samples, 30, cfg, out_b, seed=10)
    assert (out_a / "loss.csv").read_bytes() == (out_b / "loss.csv").read_bytes()
    ck_a, ck_b = res_a["checkpoints"][-1], res_b["checkpoints"][-1]
    for f in sorted(p.name for p in ck_a.iterdir()):
        assert (ck_a / f).read_bytes() == (ck_b / f).read_bytes(), f
    first = res_a["rows"][0]["loss_total"]
    last = np.mean([r["loss_total"] for r in res_a["rows"][-5:]])
    assert last < first


def test_masked_positions_do_not_touch_gradients():
    # a token is both an input and a (possibly masked) target; the loss must
    # be blind to target values at masked positions, so randomizing them
    # leaves every parameter gradient exactly unchanged
    dc, mc, corpus = tiny_corpus(seed=11)
    model = Model(mc, "shared", seed=12)
    sample = next(s for s in corpus.samples if s.task == "t2i")
    t = len(sample.tokens)
    mask = np.asarray(sample.loss_mask[1:], dtype=bool)
    assert (~mask).any()

    def grads_with(targets):
        model.zero_grad()
        with Tape():
            logits = model.forward_sample(sample)
            loss = ad.cross_entropy(ad.slice_rows(logits, 0, t - 1), targets, mask)
            backward(loss)
        return {n: p.grad.copy() for n, p in model.params.items()}

    base_targets = sample.tokens[1:].copy()
    rng = np.random.default_rng(13)
    randomized = base_targets.copy()
    randomized[~mask] = rng.integers(0, mc.v_total, size=int((~mask).sum()))
    g1 = grads_with(base_targets)
    g2 = grads_with(randomized)
    for name in g1:
        np.testing.assert_array_equal(g1[name], g2[name])


def test_text_only_loss_invariant_to_vision_branch_weights():
    dc, mc, corpus = tiny_corpus(seed=14)
    layout = UniXLayout(1, 1, 2)
    a = Model(mc, "unix", layout=layout, seed=15)
    b = Model(mc, "unix", layout=layout, seed=15)
    rng = np.random.default_rng(16)
    for i, lw in b.vis_layers.items():
        for _, tensor in lw.named():
            tensor.data += rng.normal(scale=0.3, size=tensor.shape)
    text_batch = [s for s in corpus.samples if s.task == "text_only"][:4]
    la, _ = batch_loss(a, text_batch)
    lb, _ = batch_loss(b, text_batch)
    assert la.item() == lb.item()


@pytest.mark.parametrize("arch", ["shared", "unix", "hardmoe", "mot", "unifork"])
def test_padded_batch_loss_matches_per_sample_losses(arch):
    # the packed forward must agree with the one-sequence-at-a-time path:
    # batch loss is the token-count-weighted mean of per-sample losses
    dc, mc, corpus = tiny_corpus(seed=21)
    model = Model(
        mc, arch,
        layout=UniXLayout(1, 1, 2) if arch == "unix" else None,
        seed=22,
    )
    batch = [
        next(s for s in corpus.samples if s.task == "text_only"),
        next(s for s in corpus.samples if s.task == "t2i"),
        next(s for s in corpus.samples if s.task == "caption"),
    ]
    loss, stats = batch_loss(model, batch)
    weighted = 0.0
    count = 0
    for s in batch:
        n = int(np.asarray(s.loss_mask[1:], dtype=bool).sum())
        weighted += sequence_loss(model, s).item() * n
        count += n
    assert loss.item() == pytest.approx(weighted / count, abs=1e-12)
    assert stats["loss_total"] == pytest.approx(loss.item(), abs=1e-12)
