"""Decoder-only transformer building blocks.

Pre-norm residual layers with rotary attention and a gated FFN, over a
joint vocabulary of text ids, visual codeword ids, and four control tokens.
Attention masking is additive (hard -inf scores), so restricted routing and
the plain shared stack run through one code path.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor

SPECIAL_TOKENS = ("BOI", "EOI", "BOS", "PAD")
INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    """Shapes of the transformer and the joint vocabulary.

    The token id space is laid out as: text ids [0, v_text), visual ids
    [v_text, v_text+v_vis), then BOI, EOI, BOS, PAD.
    """

    n_layers: int
    d_model: int
    n_heads: int
    d_ff: int
    v_text: int
    v_vis: int
    max_seq: int = 512
    rope_base: float = 10000.0
    tied_head: bool = False

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise DimensionError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def v_total(self) -> int:
        return self.v_text + self.v_vis + len(SPECIAL_TOKENS)

    @property
    def boi_id(self) -> int:
        return self.v_text + self.v_vis

    @property
    def eoi_id(self) -> int:
        return self.v_text + self.v_vis + 1

    @property
    def bos_id(self) -> int:
        return self.v_text + self.v_vis + 2

    @property
    def pad_id(self) -> int:
        return self.v_text + self.v_vis + 3

    def is_visual_id(self, token_id: int) -> bool:
        return self.v_text <= token_id < self.v_text + self.v_vis

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class LayerWeights:
    """One decoder layer: q/k/v/o projections, gated FFN, two norm gains."""

    attn_q: Tensor
    attn_k: Tensor
    attn_v: Tensor
    attn_o: Tensor
    ffn_up: Tensor
    ffn_gate: Tensor
    ffn_down: Tensor
    norm_attn: Tensor
    norm_ffn: Tensor

    MATRIX_NAMES = (
        "attn_q", "attn_k", "attn_v", "attn_o",
        "ffn_up", "ffn_gate", "ffn_down",
        "norm_attn", "norm_ffn",
    )

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator) -> "LayerWeights":
        d, f = config.d_model, config.d_ff
        return cls(
            attn_q=ad.param(rng.normal(scale=INIT_STD, size=(d, d))),
            attn_k=ad.param(rng.normal(scale=INIT_STD, size=(d, d))),
            attn_v=ad.param(rng.normal(scale=INIT_STD, size=(d, d))),
            attn_o=ad.param(rng.normal(scale=INIT_STD, size=(d, d))),
            ffn_up=ad.param(rng.normal(scale=INIT_STD, size=(d, f))),
            ffn_gate=ad.param(rng.normal(scale=INIT_STD, size=(d, f))),
            ffn_down=ad.param(rng.normal(scale=INIT_STD, size=(f, d))),
            norm_attn=ad.param(np.ones(d)),
            norm_ffn=ad.param(np.ones(d)),
        )

    def copy(self) -> "LayerWeights":
        return LayerWeights(
            **{n: ad.param(getattr(self, n).data.copy()) for n in self.MATRIX_NAMES}
        )

    def named(self):
        for n in self.MATRIX_NAMES:
            yield n, getattr(self, n)


def causal_mask(t: int) -> np.ndarray:
    """Full lower-triangular mask: position i may attend to j <= i."""
    return np.tril(np.ones((t, t), dtype=bool))


def validate_attention_mask(mask: np.ndarray):
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2 or mask.shape[0] != mask.shape[1]:
        raise DimensionError(f"attention mask must be square, got {mask.shape}")
    if np.any(mask & ~np.tril(np.ones(mask.shape, dtype=bool))):
        raise DimensionError("attention mask violates causality (j > i permitted)")
    if not np.all(np.diag(mask)):
        raise DimensionError("attention mask denies self-attention at some position")
    return mask


def embed_tokens(embedding: Tensor, tokens, config: ModelConfig) -> Tensor:
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= config.v_total):
        raise IndexError(
            f"token id out of range for vocabulary of {config.v_total}"
        )
    return ad.embed(embedding, ids)


def _split_heads(x: Tensor, config: ModelConfig) -> Tensor:
    """(..., T, d) -> (..., H, T, head_dim)."""
    shape = x.shape[:-1] + (config.n_heads, config.head_dim)
    return ad.swapaxes(ad.reshape(x, shape), -3, -2)


def _merge_heads(x: Tensor, config: ModelConfig) -> Tensor:
    """(..., H, T, head_dim) -> (..., T, d)."""
    swapped = ad.swapaxes(x, -3, -2)
    return ad.reshape(swapped, swapped.shape[:-2] + (config.d_model,))


def causal_attention(
    h: Tensor, w: LayerWeights, mask: np.ndarray, config: ModelConfig
) -> Tensor:
    """Multi-head attention with rotary q/k and hard score masking.

    ``h`` is (T, d) or batched (B, T, d); ``mask`` is (T, T), or (B, 1, T, T)
    for per-sequence masks in the batched case (validated by the caller).
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 2:
        mask = validate_attention_mask(mask)
    t = h.shape[-2]
    if mask.shape[-1] != t:
        raise DimensionError(f"mask is {mask.shape} but sequence length is {t}")
    q = ad.rope(_split_heads(ad.matmul(h, w.attn_q), config), None, config.rope_base)
    k = ad.rope(_split_heads(ad.matmul(h, w.attn_k), config), None, config.rope_base)
    v = _split_heads(ad.matmul(h, w.attn_v), config)
    scores = ad.scale(ad.matmul(q, ad.swapaxes(k, -1, -2)), 1.0 / np.sqrt(config.head_dim))
    if mask.ndim == 2 and scores.ndim == 3:
        mask = mask[None, :, :]
    probs = ad.masked_softmax(scores, mask)
    ctx = _merge_heads(ad.matmul(probs, v), config)
    return ad.matmul(ctx, w.attn_o)


def gated_ffn(x: Tensor, w: LayerWeights) -> Tensor:
    return ad.matmul(
        ad.mul(ad.silu(ad.matmul(x, w.ffn_gate)), ad.matmul(x, w.ffn_up)),
        w.ffn_down,
    )


def decoder_layer(
    h: Tensor, w: LayerWeights, mask: np.ndarray, config: ModelConfig
) -> Tensor:
    """Pre-norm residual wiring: h + attn(norm(h)), then + ffn(norm(.))."""
    h = ad.add(h, causal_attention(ad.rmsnorm(h, w.norm_attn), w, mask, config))
    return ad.add(h, gated_ffn(ad.rmsnorm(h, w.norm_ffn), w))


def unembed(h: Tensor, head: Tensor, embedding: Tensor, norm_f: Tensor,
            config: ModelConfig) -> Tensor:
    out = ad.rmsnorm(h, norm_f)
    if config.tied_head:
        return ad.matmul(out, ad.swapaxes(embedding, 0, 1))
    return ad.matmul(out, head)


def shared_forward(
    tokens,
    embedding: Tensor,
    layers: list,
    norm_f: Tensor,
    head: Tensor,
    config: ModelConfig,
    mask: np.ndarray = None,
) -> Tensor:
    """Plain modality-shared stack: embed, run every layer under the full
    causal mask (or a caller-supplied one), final norm, unembed."""
    tokens = np.asarray(tokens)
    if mask is None:
        mask = causal_mask(tokens.shape[-1])
    h = embed_tokens(embedding, tokens, config)
    for w in layers:
        h = decoder_layer(h, w, mask, config)
    return unembed(h, head, embedding, norm_f, config)
