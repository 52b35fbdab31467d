"""Modality-routed transformer variants over the shared building blocks.

Five architectures, all consuming (tokens, modality mask) and emitting
logits over the joint vocabulary:

* ``shared``   — every layer processes all tokens (baseline).
* ``unix``     — first N and last M layers duplicated into text/vision
                 branches with attention confined to same-modality positions;
                 the middle layers are shared.
* ``hardmoe``  — shared attention, per-token FFN expert chosen by modality.
* ``mot``      — two full stacks; q/k/v come from each token's own stack and
                 attention runs over the position-interleaved union.
* ``unifork``  — shared shallow trunk, task-selected deep branch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .transformer import (
    LayerWeights,
    ModelConfig,
    _merge_heads,
    _split_heads,
    causal_attention,
    causal_mask,
    decoder_layer,
    embed_tokens,
    gated_ffn,
    unembed,
    INIT_STD,
)

ARCH_NAMES = ("shared", "unix", "hardmoe", "mot", "unifork")

# Branch tags for the two unifork task branches in weight names and selectors:
# the understanding branch ends in text prediction, the generation branch in
# vision prediction.
UNIFORK_TASKS = {"und": "text", "gen": "vis"}
TASK_TO_UNIFORK = {"caption": "und", "text_only": "und", "t2i": "gen"}


class LayoutError(ValueError):
    """Separated-layer layout does not fit the stack."""


class RoutingError(ValueError):
    """Unknown task or architecture tag."""


@dataclass(frozen=True)
class UniXLayout:
    """(N shallow, M deep) separated layers around a shared middle."""

    n_shallow: int
    m_deep: int
    n_layers: int

    def __post_init__(self):
        if self.n_shallow < 0 or self.m_deep < 0:
            raise LayoutError("separated layer counts must be nonnegative")
        if self.n_shallow + self.m_deep > self.n_layers:
            raise LayoutError(
                f"{self.n_shallow}+{self.m_deep} separated layers exceed "
                f"{self.n_layers} total"
            )

    def is_separated(self, layer: int) -> bool:
        return layer < self.n_shallow or layer >= self.n_layers - self.m_deep

    def roles(self) -> list:
        return ["sep" if self.is_separated(i) else "shared" for i in range(self.n_layers)]

    def shared_range(self):
        return range(self.n_shallow, self.n_layers - self.m_deep)

    def to_dict(self) -> dict:
        return {"n_shallow": self.n_shallow, "m_deep": self.m_deep}


def partition_layers(layout: UniXLayout) -> list:
    """Per-layer role tags, 'sep' or 'shared'."""
    return layout.roles()


def modality_mask_for(tokens, config: ModelConfig) -> np.ndarray:
    """True where a position carries a vision token.

    Visual codeword ids and the BOI/EOI delimiters route as vision; text ids,
    BOS, and PAD route as text.
    """
    ids = np.asarray(tokens, dtype=np.int64)
    return ((ids >= config.v_text) & (ids < config.v_text + config.v_vis)) | (
        (ids == config.boi_id) | (ids == config.eoi_id)
    )


def same_modality_causal(mvis: np.ndarray) -> np.ndarray:
    """Causal mask restricted to same-modality pairs."""
    mvis = np.asarray(mvis, dtype=bool)
    t = mvis.shape[0]
    return causal_mask(t) & (mvis[:, None] == mvis[None, :])


def batched_masks(mvis: np.ndarray, valid: np.ndarray):
    """Padded-batch attention masks, shaped (B, 1, T, T) for head broadcast.

    full: causal over non-pad keys; sep: additionally same-modality. Pad
    query rows keep self-attention so no softmax row is empty; their outputs
    are never read.
    """
    b, t = mvis.shape
    tril = causal_mask(t)[None, :, :]
    eye = np.eye(t, dtype=bool)[None, :, :]
    key_ok = valid[:, None, :]
    full = (tril & key_ok) | eye
    same = mvis[:, :, None] == mvis[:, None, :]
    sep = (tril & key_ok & same) | eye
    return full[:, None], sep[:, None]


def _route_masks(tokens, mvis, valid):
    """(full, sep) masks for either a single sequence or a padded batch."""
    if tokens.ndim == 2:
        if valid is None:
            valid = np.ones_like(mvis, dtype=bool)
        return batched_masks(mvis, valid)
    return causal_mask(tokens.shape[-1]), same_modality_causal(mvis)


@dataclass
class FFNExpert:
    """The three FFN matrices of a hard-routed expert."""

    ffn_up: Tensor
    ffn_gate: Tensor
    ffn_down: Tensor

    @classmethod
    def copy_of(cls, w: LayerWeights) -> "FFNExpert":
        return cls(
            ffn_up=ad.param(w.ffn_up.data.copy()),
            ffn_gate=ad.param(w.ffn_gate.data.copy()),
            ffn_down=ad.param(w.ffn_down.data.copy()),
        )

    def named(self):
        yield "ffn_up", self.ffn_up
        yield "ffn_gate", self.ffn_gate
        yield "ffn_down", self.ffn_down


def default_fork_layer(n_layers: int) -> int:
    """Fork the deep third of the stack unless configured otherwise."""
    return n_layers - int(np.ceil(n_layers / 3))


class Model:
    """A routed transformer: config, architecture tag, and named weights.

    All architectures draw the same base weights for a given seed (embedding,
    one stack of layers, final norm, head); branch copies are made from those,
    so cross-architecture reductions are exact.
    """

    def __init__(
        self,
        config: ModelConfig,
        arch: str = "shared",
        layout: UniXLayout = None,
        fork_layer: int = None,
        seed: int = 0,
    ):
        if arch not in ARCH_NAMES:
            raise RoutingError(f"unknown architecture {arch!r}; expected {ARCH_NAMES}")
        self.config = config
        self.arch = arch
        rng = np.random.default_rng(seed)
        d, v = config.d_model, config.v_total
        self.embedding = ad.param(rng.normal(scale=INIT_STD, size=(v, d)))
        base = [LayerWeights.init(config, rng) for _ in range(config.n_layers)]
        self.norm_f = ad.param(np.ones(d))
        self.head = (
            None
            if config.tied_head
            else ad.param(rng.normal(scale=INIT_STD, size=(d, v)))
        )

        self.layout = None
        self.fork_layer = None
        if arch == "shared":
            self.layers = base
        elif arch == "unix":
            self.layout = layout or UniXLayout(0, 0, config.n_layers)
            if self.layout.n_layers != config.n_layers:
                raise LayoutError("layout layer count does not match the model")
            self.layers = base
            self.vis_layers = {
                i: base[i].copy()
                for i in range(config.n_layers)
                if self.layout.is_separated(i)
            }
        elif arch == "hardmoe":
            self.layers = base
            self.vis_experts = [FFNExpert.copy_of(w) for w in base]
        elif arch == "mot":
            self.layers = base
            self.vis_stack = [w.copy() for w in base]
        elif arch == "unifork":
            f = default_fork_layer(config.n_layers) if fork_layer is None else fork_layer
            if not 0 <= f <= config.n_layers:
                raise LayoutError(f"fork layer {f} outside [0, {config.n_layers}]")
            self.fork_layer = f
            self.layers = base[:f]
            self.und_branch = [w.copy() for w in base[f:]]
            self.gen_branch = [w.copy() for w in base[f:]]
        self.params = dict(self.named_weights())

    # -- weight naming -------------------------------------------------

    def named_weights(self):
        """(name, tensor) pairs; names are `layer.{i}.{branch}.{matrix}` plus
        `embed.weight`, `norm_f.weight`, `head.weight`."""
        yield "embed.weight", self.embedding
        cfg = self.config
        if self.arch == "shared":
            for i, w in enumerate(self.layers):
                yield from self._layer_named(i, "shared", w)
        elif self.arch == "unix":
            for i, w in enumerate(self.layers):
                if self.layout.is_separated(i):
                    yield from self._layer_named(i, "text", w)
                    yield from self._layer_named(i, "vis", self.vis_layers[i])
                else:
                    yield from self._layer_named(i, "shared", w)
        elif self.arch == "hardmoe":
            for i, w in enumerate(self.layers):
                for n, t in w.named():
                    branch = "text" if n.startswith("ffn_") else "shared"
                    yield f"layer.{i}.{branch}.{n}", t
                for n, t in self.vis_experts[i].named():
                    yield f"layer.{i}.vis.{n}", t
        elif self.arch == "mot":
            for i in range(cfg.n_layers):
                yield from self._layer_named(i, "text", self.layers[i])
                yield from self._layer_named(i, "vis", self.vis_stack[i])
        elif self.arch == "unifork":
            for i, w in enumerate(self.layers):
                yield from self._layer_named(i, "shared", w)
            for j in range(len(self.und_branch)):
                i = self.fork_layer + j
                yield from self._layer_named(i, "text", self.und_branch[j])
                yield from self._layer_named(i, "vis", self.gen_branch[j])
        yield "norm_f.weight", self.norm_f
        if self.head is not None:
            yield "head.weight", self.head

    @staticmethod
    def _layer_named(i: int, branch: str, w: LayerWeights):
        for n, t in w.named():
            yield f"layer.{i}.{branch}.{n}", t

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def total_params(self) -> int:
        return sum(t.size for t in self.params.values())

    # -- forward -------------------------------------------------------

    def forward(self, tokens, mvis=None, task: str = None, trace: list = None) -> Tensor:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.size == 0:
            raise ad.DimensionError("empty token sequence")
        if tokens.size > self.config.max_seq:
            raise ad.DimensionError(
                f"sequence length {tokens.size} exceeds max_seq {self.config.max_seq}"
            )
        if mvis is None:
            mvis = modality_mask_for(tokens, self.config)
        mvis = np.asarray(mvis, dtype=bool)
        if mvis.shape != tokens.shape:
            raise ad.DimensionError("modality mask length does not match tokens")
        return self._dispatch(tokens, mvis, task, trace, valid=None)

    def forward_batch(self, tokens, mvis, valid, task: str = None) -> Tensor:
        """Padded-batch forward: tokens/mvis/valid are (B, T); pad rows are
        excluded from attention keys and must be excluded from any loss."""
        tokens = np.asarray(tokens, dtype=np.int64)
        mvis = np.asarray(mvis, dtype=bool)
        valid = np.asarray(valid, dtype=bool)
        if tokens.ndim != 2 or mvis.shape != tokens.shape or valid.shape != tokens.shape:
            raise ad.DimensionError("forward_batch expects matching (B, T) arrays")
        if tokens.shape[1] > self.config.max_seq:
            raise ad.DimensionError(
                f"sequence length {tokens.shape[1]} exceeds max_seq "
                f"{self.config.max_seq}"
            )
        return self._dispatch(tokens, mvis, task, None, valid=valid)

    def _dispatch(self, tokens, mvis, task, trace, valid):
        if self.arch == "shared":
            return shared_stack_forward(tokens, self, trace, valid=valid)
        if self.arch == "unix":
            return unix_forward(tokens, mvis, self, trace, valid=valid)
        if self.arch == "hardmoe":
            return hardmoe_forward(tokens, mvis, self, trace, valid=valid)
        if self.arch == "mot":
            return mot_forward(tokens, mvis, self, trace, valid=valid)
        if self.arch == "unifork":
            return unifork_forward(tokens, task, self, trace, valid=valid)
        raise RoutingError(self.arch)

    def forward_sample(self, sample) -> Tensor:
        task = TASK_TO_UNIFORK.get(sample.task, sample.task) if self.arch == "unifork" else None
        return self.forward(sample.tokens, sample.modality_mask, task=task)


def _note(trace, h):
    if trace is not None:
        trace.append(h.data.copy())


def shared_stack_forward(tokens, model: Model, trace: list = None,
                         valid=None) -> Tensor:
    cfg = model.config
    tokens = np.asarray(tokens, dtype=np.int64)
    full, _ = _route_masks(tokens, np.zeros(tokens.shape, dtype=bool), valid)
    h = embed_tokens(model.embedding, tokens, cfg)
    _note(trace, h)
    for w in model.layers:
        h = decoder_layer(h, w, full, cfg)
        _note(trace, h)
    return unembed(h, model.head, model.embedding, model.norm_f, cfg)


def unix_forward(tokens, mvis: np.ndarray, model: Model, trace: list = None,
                 valid=None) -> Tensor:
    """Two-end-separated, middle-shared routing.

    In separated layers both branches run over the full sequence under a
    same-modality causal mask; each position keeps the output of its own
    modality's branch. Masked scores are hard -inf, so text states are exact
    functions of text states only (and symmetrically) inside separated blocks.
    """
    cfg = model.config
    tokens = np.asarray(tokens, dtype=np.int64)
    full, sep = _route_masks(tokens, mvis, valid)
    h = embed_tokens(model.embedding, tokens, cfg)
    _note(trace, h)
    for i, w in enumerate(model.layers):
        if model.layout.is_separated(i):
            h_text = decoder_layer(h, w, sep, cfg)
            h_vis = decoder_layer(h, model.vis_layers[i], sep, cfg)
            h = ad.select_rows(mvis, h_vis, h_text)
        else:
            h = decoder_layer(h, w, full, cfg)
        _note(trace, h)
    return unembed(h, model.head, model.embedding, model.norm_f, cfg)


def hardmoe_forward(tokens, mvis: np.ndarray, model: Model, trace: list = None,
                    valid=None) -> Tensor:
    """Shared attention; FFN expert hard-selected per position by modality."""
    cfg = model.config
    tokens = np.asarray(tokens, dtype=np.int64)
    full, _ = _route_masks(tokens, mvis, valid)
    h = embed_tokens(model.embedding, tokens, cfg)
    _note(trace, h)
    for w, expert in zip(model.layers, model.vis_experts):
        h = ad.add(h, causal_attention(ad.rmsnorm(h, w.norm_attn), w, full, cfg))
        x = ad.rmsnorm(h, w.norm_ffn)
        f_text = gated_ffn(x, w)
        f_vis = ad.matmul(
            ad.mul(ad.silu(ad.matmul(x, expert.ffn_gate)), ad.matmul(x, expert.ffn_up)),
            expert.ffn_down,
        )
        h = ad.add(h, ad.select_rows(mvis, f_vis, f_text))
        _note(trace, h)
    return unembed(h, model.head, model.embedding, model.norm_f, cfg)


def mot_forward(tokens, mvis: np.ndarray, model: Model, trace: list = None,
                valid=None) -> Tensor:
    """Paired stacks: per-position q/k/v, o-projection, FFN, and norms come
    from the position's own stack; attention scores span all positions in
    original order under the causal mask."""
    cfg = model.config
    tokens = np.asarray(tokens, dtype=np.int64)
    full, _ = _route_masks(tokens, mvis, valid)
    h = embed_tokens(model.embedding, tokens, cfg)
    _note(trace, h)

    for wt, wv in zip(model.layers, model.vis_stack):
        xt = ad.rmsnorm(h, wt.norm_attn)
        xv = ad.rmsnorm(h, wv.norm_attn)
        q = ad.select_rows(mvis, ad.matmul(xv, wv.attn_q), ad.matmul(xt, wt.attn_q))
        k = ad.select_rows(mvis, ad.matmul(xv, wv.attn_k), ad.matmul(xt, wt.attn_k))
        v = ad.select_rows(mvis, ad.matmul(xv, wv.attn_v), ad.matmul(xt, wt.attn_v))
        q = ad.rope(_split_heads(q, cfg), None, cfg.rope_base)
        k = ad.rope(_split_heads(k, cfg), None, cfg.rope_base)
        scores = ad.scale(ad.matmul(q, ad.swapaxes(k, -1, -2)),
                          1.0 / np.sqrt(cfg.head_dim))
        probs = ad.masked_softmax(scores, full)
        ctx = _merge_heads(ad.matmul(probs, _split_heads(v, cfg)), cfg)
        attn = ad.select_rows(mvis, ad.matmul(ctx, wv.attn_o), ad.matmul(ctx, wt.attn_o))
        h = ad.add(h, attn)
        f_text = gated_ffn(ad.rmsnorm(h, wt.norm_ffn), wt)
        f_vis = gated_ffn(ad.rmsnorm(h, wv.norm_ffn), wv)
        h = ad.add(h, ad.select_rows(mvis, f_vis, f_text))
        _note(trace, h)
    return unembed(h, model.head, model.embedding, model.norm_f, cfg)


def unifork_forward(tokens, task: str, model: Model, trace: list = None,
                    valid=None) -> Tensor:
    """Shared trunk, then the whole sequence through one task branch."""
    if task not in UNIFORK_TASKS:
        raise RoutingError(
            f"unknown task tag {task!r}; expected one of {sorted(UNIFORK_TASKS)}"
        )
    cfg = model.config
    tokens = np.asarray(tokens, dtype=np.int64)
    full, _ = _route_masks(tokens, np.zeros(tokens.shape, dtype=bool), valid)
    h = embed_tokens(model.embedding, tokens, cfg)
    _note(trace, h)
    for w in model.layers:
        h = decoder_layer(h, w, full, cfg)
        _note(trace, h)
    branch = model.und_branch if task == "und" else model.gen_branch
    for w in branch:
        h = decoder_layer(h, w, full, cfg)
        _note(trace, h)
    return unembed(h, model.head, model.embedding, model.norm_f, cfg)


# -- parameter accounting ----------------------------------------------


def layer_param_count(config: ModelConfig) -> int:
    d, f = config.d_model, config.d_ff
    return 4 * d * d + 3 * d * f + 2 * d


def ffn_param_count(config: ModelConfig) -> int:
    return 3 * config.d_model * config.d_ff


def base_param_count(config: ModelConfig) -> int:
    d = config.d_model
    head = 0 if config.tied_head else d * config.v_total
    return config.v_total * d + config.n_layers * layer_param_count(config) + d + head


def param_count(
    arch: str,
    config: ModelConfig,
    layout: UniXLayout = None,
    fork_layer: int = None,
) -> dict:
    """Active (touched per token) and total parameter counts, closed form.

    Every token passes exactly one branch per routed layer, so the active
    count always equals the plain shared stack's size.
    """
    base = base_param_count(config)
    if arch == "shared":
        extra = 0
    elif arch == "unix":
        layout = layout or UniXLayout(0, 0, config.n_layers)
        extra = (layout.n_shallow + layout.m_deep) * layer_param_count(config)
    elif arch == "hardmoe":
        extra = config.n_layers * ffn_param_count(config)
    elif arch == "mot":
        extra = config.n_layers * layer_param_count(config)
    elif arch == "unifork":
        f = default_fork_layer(config.n_layers) if fork_layer is None else fork_layer
        extra = (config.n_layers - f) * layer_param_count(config)
    else:
        raise RoutingError(f"unknown architecture {arch!r}")
    return {"active": base, "total": base + extra}
