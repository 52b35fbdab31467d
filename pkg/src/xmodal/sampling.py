"""Autoregressive generation for both tasks.

Image generation mixes conditional and unconditional logits per step
(uncond + s * (cond - uncond)), restricts sampling to the visual vocabulary
inside the image span, and decodes the resulting token grid back to pixels
through the codebook. Captioning restricts to text ids plus BOS. Contexts are
recomputed from scratch each step; at these lengths a KV cache buys nothing.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .architectures import Model, modality_mask_for
from .autodiff import DimensionError
from .data import VQCodebook, vq_decode
from .transformer import ModelConfig


class SamplerError(ValueError):
    """Sampler configuration violates its invariants."""


@dataclass(frozen=True)
class SamplerConfig:
    cfg_scale: float = 4.0
    temperature: float = 1.0
    top_k: int = 64
    max_new: int = 64

    def __post_init__(self):
        if self.cfg_scale < 0:
            raise SamplerError("cfg_scale must be >= 0")
        if self.temperature < 0:
            raise SamplerError("temperature must be >= 0 (0 samples greedily)")
        if self.top_k < 1:
            raise SamplerError("top_k must be >= 1")
        if self.max_new < 0:
            raise SamplerError("max_new must be >= 0")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def cfg_logits(cond: np.ndarray, uncond: np.ndarray, s: float) -> np.ndarray:
    cond = np.asarray(cond, dtype=np.float64)
    uncond = np.asarray(uncond, dtype=np.float64)
    if cond.shape != uncond.shape:
        raise DimensionError(
            f"cfg_logits: conditional {cond.shape} vs unconditional {uncond.shape}"
        )
    return uncond + s * (cond - uncond)


def sample_token(logits: np.ndarray, allowed: np.ndarray, sampler: SamplerConfig,
                 rng: np.random.Generator) -> int:
    """Draw one id from the permitted set, after temperature and top-k."""
    scores = np.full(logits.shape, -np.inf)
    scores[allowed] = logits[allowed]
    if sampler.temperature == 0.0:
        return int(np.argmax(scores))
    k = min(sampler.top_k, len(allowed))
    keep = np.argpartition(scores, -k)[-k:]
    z = scores[keep] / sampler.temperature
    z -= z.max()
    p = np.exp(z)
    p /= p.sum()
    return int(keep[rng.choice(len(keep), p=p)])


def _last_logits(model: Model, tokens: list, task: str = None) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64)
    return model.forward(ids, modality_mask_for(ids, model.config),
                         task=task if model.arch == "unifork" else None).data[-1]


def visual_ids(config: ModelConfig) -> np.ndarray:
    return np.arange(config.v_text, config.v_text + config.v_vis)


def text_ids_with_bos(config: ModelConfig) -> np.ndarray:
    return np.concatenate([np.arange(config.v_text), [config.bos_id]])


def generate_image(model: Model, prompt_tokens, sampler: SamplerConfig,
                   codebook: VQCodebook, grid_tokens: int, seed: int = 0):
    """Sample a full token grid under per-step guidance; returns (grid, pixels).

    The unconditional context is the generation layout with the text span
    removed (it starts at BOI). Exactly ``grid_tokens`` visual ids are drawn;
    EOI is appended after the grid is complete rather than sampled.
    """
    cfg = model.config
    side = int(round(np.sqrt(grid_tokens)))
    if side * side != grid_tokens:
        raise SamplerError(f"grid_tokens={grid_tokens} is not a square")
    prompt = list(np.asarray(prompt_tokens, dtype=np.int64).reshape(-1))
    if any(t >= cfg.v_text for t in prompt):
        raise SamplerError("prompt must contain text ids only")
    rng = np.random.default_rng(seed)
    cond = prompt + [cfg.boi_id]
    uncond = [cfg.boi_id]
    allowed = visual_ids(cfg)
    drawn = []
    for _ in range(grid_tokens):
        logits_c = _last_logits(model, cond, task="gen")
        logits_u = _last_logits(model, uncond, task="gen")
        mixed = cfg_logits(logits_c, logits_u, sampler.cfg_scale)
        tok = sample_token(mixed, allowed, sampler, rng)
        drawn.append(tok)
        cond.append(tok)
        uncond.append(tok)
    cond.append(cfg.eoi_id)
    grid = (np.asarray(drawn) - cfg.v_text).reshape(side, side)
    return grid, vq_decode(grid, codebook)


def generate_caption(model: Model, image_tokens, sampler: SamplerConfig,
                     seed: int = 0) -> np.ndarray:
    """Sample text after <BOI>[Image]<EOI> until BOS or max_new tokens."""
    cfg = model.config
    image = np.asarray(image_tokens, dtype=np.int64).reshape(-1)
    if image.size and (image.min() < 0 or image.max() >= cfg.v_vis):
        raise SamplerError("image tokens must be codebook ids")
    ctx = [cfg.boi_id] + list(image + cfg.v_text) + [cfg.eoi_id]
    allowed = text_ids_with_bos(cfg)
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(sampler.max_new):
        tok = sample_token(_last_logits(model, ctx, task="und"), allowed, sampler, rng)
        ctx.append(tok)
        if tok == cfg.bos_id:
            break
        out.append(tok)
    return np.asarray(out, dtype=np.int64)


def icl_prompt(examples, query_image_tokens, config: ModelConfig) -> np.ndarray:
    """Concatenated understanding-layout segments plus a query image with an
    empty text slot."""
    if not examples:
        raise ValueError("in-context prompting needs at least one example")
    parts = []
    for image, text in examples:
        image = np.asarray(image, dtype=np.int64).reshape(-1)
        text = np.asarray(text, dtype=np.int64).reshape(-1)
        parts.extend(
            [[config.boi_id], image + config.v_text, [config.eoi_id], text,
             [config.bos_id]]
        )
    query = np.asarray(query_image_tokens, dtype=np.int64).reshape(-1)
    parts.extend([[config.boi_id], query + config.v_text, [config.eoi_id]])
    return np.concatenate([np.asarray(p, dtype=np.int64) for p in parts])
