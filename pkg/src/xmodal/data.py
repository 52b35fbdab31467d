"""Synthetic bimodal corpus.

A low-entropy Markov text source, procedurally generated toy images, a
k-means vector-quantizing tokenizer, assembly of the two task layouts
(understanding: <BOI>[Image]<EOI>[Text]<BOS>, generation:
[Text]<BOI>[Image]<EOI><BOS>), and the ignore-instruction loss masks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .autodiff import DimensionError
from .transformer import ModelConfig


class LayoutError(ValueError):
    """Sequence parts do not fit the requested task layout."""


# --- Markov text source -----------------------------------------------


@dataclass
class TextSource:
    """Order-k Markov chain over ``vocab`` symbols.

    ``transitions`` has one row per context (base-``vocab`` encoded) and each
    row sums to one. Rows are built from a shared frequency bias plus per-row
    noise, softmaxed at a temperature, so both the marginal and the
    conditional entropy sit well below log2(vocab) at low temperatures.
    """

    vocab: int
    order: int
    transitions: np.ndarray
    temperature: float = 1.0

    def __post_init__(self):
        self._stationary = None
        n_ctx = self.vocab**self.order
        if self.transitions.shape != (n_ctx, self.vocab):
            raise DimensionError(
                f"transition table {self.transitions.shape} != ({n_ctx}, {self.vocab})"
            )
        sums = self.transitions.sum(axis=1)
        if np.abs(sums - 1.0).max() > 1e-12:
            raise ValueError("transition rows must sum to 1")

    @classmethod
    def with_temperature(cls, vocab: int, order: int, temperature: float, seed: int):
        rng = np.random.default_rng(seed)
        n_ctx = vocab**order
        shared_bias = -1.5 * np.log1p(np.arange(vocab))
        logits = shared_bias[None, :] + rng.normal(size=(n_ctx, vocab))
        z = logits / max(temperature, 1e-12)
        z -= z.max(axis=1, keepdims=True)
        rows = np.exp(z)
        rows /= rows.sum(axis=1, keepdims=True)
        return cls(vocab=vocab, order=order, transitions=rows, temperature=temperature)

    @classmethod
    def with_target_entropy(cls, vocab: int, order: int, target_bits: float, seed: int,
                            tol: float = 1e-3):
        """Bisect the temperature until the analytic conditional entropy of
        the chain hits ``target_bits``."""
        lo, hi = 1e-4, 50.0
        for _ in range(80):
            mid = np.sqrt(lo * hi)
            src = cls.with_temperature(vocab, order, mid, seed)
            h = src.conditional_entropy_bits()
            if abs(h - target_bits) < tol:
                return src
            if h < target_bits:
                lo = mid
            else:
                hi = mid
        return cls.with_temperature(vocab, order, np.sqrt(lo * hi), seed)

    def context_index(self, context) -> int:
        idx = 0
        for s in context:
            idx = idx * self.vocab + int(s)
        return idx

    def stationary_contexts(self) -> np.ndarray:
        """Stationary distribution over contexts by power iteration (cached)."""
        if self._stationary is not None:
            return self._stationary
        n_ctx = self.transitions.shape[0]
        # context (w1..wk) -> (w2..wk, w') with prob transitions[ctx, w']
        tgt = (np.arange(n_ctx)[:, None] * self.vocab
               + np.arange(self.vocab)[None, :]) % n_ctx
        pi = np.full(n_ctx, 1.0 / n_ctx)
        for _ in range(1000):
            nxt = np.zeros_like(pi)
            np.add.at(nxt, tgt.ravel(), (pi[:, None] * self.transitions).ravel())
            if np.abs(nxt - pi).max() < 1e-14:
                pi = nxt
                break
            pi = nxt
        self._stationary = pi / pi.sum()
        return self._stationary

    def conditional_entropy_bits(self) -> float:
        """Analytic H(next | context) under the stationary context law."""
        pi = self.stationary_contexts()
        rows = self.transitions
        with np.errstate(divide="ignore", invalid="ignore"):
            hrows = -np.where(rows > 0, rows * np.log2(rows), 0.0).sum(axis=1)
        return float((pi * hrows).sum())


def gen_text(source: TextSource, length: int, seed: int) -> np.ndarray:
    """Sample a Markov path of ``length`` tokens, reproducible under seed."""
    if length < source.order:
        raise ValueError(f"length {length} shorter than order {source.order}")
    rng = np.random.default_rng(seed)
    pi = source.stationary_contexts()
    ctx_idx = int(rng.choice(pi.size, p=pi))
    # decode the initial context symbols
    out = np.empty(length, dtype=np.int64)
    ctx_syms = []
    rem = ctx_idx
    for _ in range(source.order):
        ctx_syms.append(rem % source.vocab)
        rem //= source.vocab
    ctx_syms = ctx_syms[::-1]
    out[: source.order] = ctx_syms
    cdf = np.cumsum(source.transitions, axis=1)
    u = rng.random(length)
    for i in range(source.order, length):
        nxt = int(np.searchsorted(cdf[ctx_idx], u[i], side="right"))
        nxt = min(nxt, source.vocab - 1)
        out[i] = nxt
        ctx_idx = (ctx_idx * source.vocab + nxt) % cdf.shape[0]
    return out


# --- toy images ---------------------------------------------------------


@dataclass(frozen=True)
class ImageParams:
    size: int = 32
    n_shapes: int = 6
    noise: float = 0.1
    min_radius: int = 3
    max_radius: int = 12


@dataclass
class ToyImage:
    pixels: np.ndarray  # (S, S, 3) floats in [0, 1]
    params: ImageParams
    seed: int


def gen_image(seed: int, params: ImageParams) -> ToyImage:
    """Random colored shapes over a noisy constant background."""
    rng = np.random.default_rng(seed)
    s = params.size
    base = rng.uniform(0.0, 1.0, size=3)
    img = np.tile(base, (s, s, 1))
    if params.noise > 0:
        img = img + params.noise * rng.normal(size=(s, s, 3))
    yy, xx = np.mgrid[0:s, 0:s]
    for _ in range(params.n_shapes):
        color = rng.uniform(0.0, 1.0, size=3)
        kind = rng.integers(0, 2)
        if kind == 0:  # disc
            cy, cx = rng.integers(0, s, size=2)
            r = rng.integers(params.min_radius, params.max_radius + 1)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        else:  # axis-aligned rectangle
            y0, x0 = rng.integers(0, s, size=2)
            hgt = rng.integers(params.min_radius, params.max_radius + 1)
            wdt = rng.integers(params.min_radius, params.max_radius + 1)
            mask = (yy >= y0) & (yy < y0 + hgt) & (xx >= x0) & (xx < x0 + wdt)
        img = np.where(mask[:, :, None], color[None, None, :], img)
        if params.noise > 0:
            jitter = params.noise * rng.normal(size=(s, s, 3))
            img = np.where(mask[:, :, None], img + jitter, img)
    return ToyImage(pixels=np.clip(img, 0.0, 1.0), params=params, seed=seed)


def render_prompt_image(text_tokens, params: ImageParams, vocab: int,
                        noise_seed: int) -> ToyImage:
    """Deterministic scene for a text prompt: the prompt's tokens choose the
    background and a sequence of colored shapes (kind, cell, color), then a
    seeded noise field is added. Gives image-text pairs a learnable
    correspondence instead of an arbitrary pairing."""
    text = np.asarray(text_tokens, dtype=np.int64)
    rng = np.random.default_rng(noise_seed)
    s = params.size
    palette = _token_palette(vocab)
    base = palette[text[0] % vocab] if text.size else np.array([0.5, 0.5, 0.5])
    img = np.tile(base * 0.6 + 0.2, (s, s, 1))
    if params.noise > 0:
        img = img + params.noise * rng.normal(size=(s, s, 3))
    yy, xx = np.mgrid[0:s, 0:s]
    cells = 4  # 4x4 grid of shape anchors
    for i in range(1, min(text.size, 2 * params.n_shapes + 1) - 1, 2):
        tok_a, tok_b = int(text[i]), int(text[i + 1])
        cell = tok_a % (cells * cells)
        cy = (cell // cells + 0.5) * s / cells
        cx = (cell % cells + 0.5) * s / cells
        r = params.min_radius + (tok_a // (cells * cells)) % (
            params.max_radius - params.min_radius + 1
        )
        color = palette[tok_b % vocab]
        if tok_b % 2 == 0:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        else:
            mask = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
        img = np.where(mask[:, :, None], color[None, None, :], img)
        if params.noise > 0:
            jitter = params.noise * rng.normal(size=(s, s, 3))
            img = np.where(mask[:, :, None], img + jitter, img)
    return ToyImage(pixels=np.clip(img, 0.0, 1.0), params=params, seed=noise_seed)


def _token_palette(vocab: int) -> np.ndarray:
    ids = np.arange(vocab, dtype=np.float64)
    return np.stack(
        [
            (ids * 37 % vocab) / max(vocab - 1, 1),
            (ids * 11 % vocab) / max(vocab - 1, 1),
            (ids * 23 % vocab) / max(vocab - 1, 1),
        ],
        axis=1,
    )


def _pixels(image) -> np.ndarray:
    return image.pixels if isinstance(image, ToyImage) else np.asarray(image)


def write_ppm(image, path):
    """Binary P6 PPM, 8 bits per channel."""
    px = _pixels(image)
    h, w, _ = px.shape
    data = (np.clip(px, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())


# --- vector quantization ------------------------------------------------


@dataclass
class VQCodebook:
    codewords: np.ndarray  # (K, patch*patch*3)
    patch: int
    objective_trace: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.codewords.shape[0] < 2:
            raise ValueError("codebook needs at least 2 codewords")
        if not np.all(np.isfinite(self.codewords)):
            raise ValueError("codebook contains non-finite codewords")

    @property
    def k(self) -> int:
        return self.codewords.shape[0]


def patchify(image, patch: int) -> np.ndarray:
    """Raster-order (row-major) non-overlapping patches, flattened."""
    px = _pixels(image)
    s = px.shape[0]
    if s % patch != 0:
        raise DimensionError(f"image side {s} not divisible by patch {patch}")
    g = s // patch
    out = px.reshape(g, patch, g, patch, 3).transpose(0, 2, 1, 3, 4)
    return out.reshape(g * g, patch * patch * 3)


def unpatchify(patches: np.ndarray, patch: int) -> np.ndarray:
    g = int(round(np.sqrt(patches.shape[0])))
    px = patches.reshape(g, g, patch, patch, 3).transpose(0, 2, 1, 3, 4)
    return px.reshape(g * patch, g * patch, 3)


def _pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d2 = (a**2).sum(axis=1)[:, None] + (b**2).sum(axis=1)[None, :] - 2.0 * (a @ b.T)
    return np.maximum(d2, 0.0)


def fit_codebook(patches: np.ndarray, k: int, iters: int, seed: int) -> VQCodebook:
    """Lloyd's k-means with farthest-point reseeding of empty clusters.

    The recorded objective (sum of squared distances under the centroids at
    the start of each iteration) is non-increasing.
    """
    patches = np.asarray(patches, dtype=np.float64)
    n = patches.shape[0]
    if k > n:
        raise ValueError(f"k={k} exceeds {n} patches")
    rng = np.random.default_rng(seed)
    centroids = patches[rng.choice(n, size=k, replace=False)].copy()
    trace = []
    for _ in range(iters):
        d2 = _pairwise_sq_dists(patches, centroids)
        assign = np.argmin(d2, axis=1)
        min_d2 = d2[np.arange(n), assign]
        trace.append(float(min_d2.sum()))
        for c in range(k):
            members = assign == c
            if members.any():
                centroids[c] = patches[members].mean(axis=0)
        # reseed empties from the current farthest point
        for c in range(k):
            if not (assign == c).any():
                centroids[c] = patches[int(np.argmax(min_d2))]
                min_d2[int(np.argmax(min_d2))] = 0.0
    patch = int(round(np.sqrt(patches.shape[1] / 3)))
    return VQCodebook(codewords=centroids, patch=patch, objective_trace=trace)


def vq_encode(image, cb: VQCodebook) -> np.ndarray:
    """Map each patch to its nearest codeword id (ties: lowest id).

    Returns a (g, g) grid of ids in [0, K).
    """
    patches = patchify(image, cb.patch)
    d2 = _pairwise_sq_dists(patches, cb.codewords)
    ids = np.argmin(d2, axis=1)
    g = int(round(np.sqrt(patches.shape[0])))
    return ids.reshape(g, g).astype(np.int64)


def vq_decode(grid: np.ndarray, cb: VQCodebook) -> np.ndarray:
    """Rebuild an image from a token grid by codeword lookup."""
    ids = np.asarray(grid, dtype=np.int64).reshape(-1)
    return np.clip(unpatchify(cb.codewords[ids], cb.patch), 0.0, 1.0)


# --- samples and layouts -------------------------------------------------

TASKS = ("t2i", "caption", "text_only")


@dataclass
class Sample:
    tokens: np.ndarray
    modality_mask: np.ndarray
    loss_mask: np.ndarray
    task: str

    def __len__(self):
        return len(self.tokens)


def build_sequence(task: str, text_tokens, image_tokens, config: ModelConfig,
                   grid_tokens: int = None) -> Sample:
    """Assemble the task layout. ``image_tokens`` are codebook ids in [0, K)
    and are offset into the visual vocabulary range here."""
    if task not in TASKS:
        raise LayoutError(f"unknown task {task!r}")
    text = np.asarray(text_tokens, dtype=np.int64).reshape(-1)
    if text.size and (text.min() < 0 or text.max() >= config.v_text):
        raise LayoutError(f"text token outside [0, {config.v_text})")
    if task == "text_only":
        tokens = np.concatenate([text, [config.bos_id]])
        mvis = np.zeros(len(tokens), dtype=bool)
        return Sample(tokens, mvis, np.ones(len(tokens), dtype=bool), task)
    image = np.asarray(image_tokens, dtype=np.int64).reshape(-1)
    if grid_tokens is not None and image.size != grid_tokens:
        raise LayoutError(
            f"image span has {image.size} tokens, expected {grid_tokens}"
        )
    if image.size == 0:
        raise LayoutError("image tasks need a nonempty image span")
    if image.min() < 0 or image.max() >= config.v_vis:
        raise LayoutError(f"image token outside codebook range [0, {config.v_vis})")
    img_vocab = image + config.v_text
    boi, eoi, bos = config.boi_id, config.eoi_id, config.bos_id
    if task == "caption":
        tokens = np.concatenate([[boi], img_vocab, [eoi], text, [bos]])
        mvis = np.zeros(len(tokens), dtype=bool)
        mvis[: image.size + 2] = True
    else:  # t2i
        tokens = np.concatenate([text, [boi], img_vocab, [eoi], [bos]])
        mvis = np.zeros(len(tokens), dtype=bool)
        mvis[text.size : text.size + image.size + 2] = True
    return Sample(tokens, mvis, np.ones(len(tokens), dtype=bool), task)


def parse_sequence(tokens, config: ModelConfig) -> dict:
    """Recover task and spans from a built sequence."""
    ids = np.asarray(tokens, dtype=np.int64)
    boi_pos = np.where(ids == config.boi_id)[0]
    if boi_pos.size == 0:
        if ids.size == 0 or ids[-1] != config.bos_id:
            raise LayoutError("text-only sequence must end in BOS")
        return {"task": "text_only", "text": slice(0, ids.size - 1), "image": None}
    boi = int(boi_pos[0])
    eoi_pos = np.where(ids == config.eoi_id)[0]
    if eoi_pos.size == 0:
        raise LayoutError("BOI without matching EOI")
    eoi = int(eoi_pos[0])
    if ids[-1] != config.bos_id:
        raise LayoutError("sequence must end in BOS")
    image_span = slice(boi + 1, eoi)
    if boi == 0:
        return {"task": "caption", "text": slice(eoi + 1, ids.size - 1),
                "image": image_span}
    if eoi != ids.size - 2:
        raise LayoutError("generation layout must end <EOI><BOS>")
    return {"task": "t2i", "text": slice(0, boi), "image": image_span}


def apply_loss_mask(sample: Sample, config: ModelConfig) -> Sample:
    """Ignore-instruction masking: the conditioning span gets no loss.

    t2i scores the image span, EOI, and BOS; caption scores the text span and
    BOS; text-only keeps loss everywhere.
    """
    spans = parse_sequence(sample.tokens, config)
    n = len(sample.tokens)
    mask = np.zeros(n, dtype=bool)
    if sample.task == "text_only":
        mask[:] = True
    elif sample.task == "t2i":
        img = spans["image"]
        mask[img.start : img.stop + 1] = True  # image span + EOI
        mask[n - 1] = True  # BOS
    elif sample.task == "caption":
        txt = spans["text"]
        mask[txt.start : txt.stop] = True
        mask[n - 1] = True  # BOS
    else:
        raise LayoutError(f"unknown task {sample.task!r}")
    return replace(sample, loss_mask=mask)


# --- corpus ---------------------------------------------------------------


@dataclass(frozen=True)
class DataConfig:
    image_size: int = 32
    patch_size: int = 4
    codebook_k: int = 64
    v_text: int = 32
    markov_order: int = 1
    text_target_bits: float = 1.5
    text_len_min: int = 8
    text_len_max: int = 16
    prompt_len_min: int = 6
    prompt_len_max: int = 10
    n_text: int = 7500
    n_pairs: int = 1600
    reversal_rate: float = 0.2
    image_shapes: int = 6
    image_noise: float = 0.1
    min_radius: int = 3
    max_radius: int = 12
    kmeans_iters: int = 12
    codebook_fit_images: int = 200
    shard_size: int = 2000
    paired_images: str = "random"  # or "scene": derive the image from its prompt

    def __post_init__(self):
        if not 0.0 <= self.reversal_rate <= 1.0:
            raise ValueError("reversal_rate must lie in [0, 1]")
        if self.paired_images not in ("random", "scene"):
            raise ValueError("paired_images must be 'random' or 'scene'")
        if self.image_size % self.patch_size != 0:
            raise DimensionError("image size must be divisible by patch size")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def grid_tokens(self) -> int:
        return self.grid * self.grid

    @property
    def image_params(self) -> ImageParams:
        return ImageParams(
            size=self.image_size,
            n_shapes=self.image_shapes,
            noise=self.image_noise,
            min_radius=self.min_radius,
            max_radius=self.max_radius,
        )

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class Corpus:
    samples: list
    codebook: VQCodebook
    source: TextSource
    data_config: DataConfig


def make_corpus(data_cfg: DataConfig, model_cfg: ModelConfig, seed: int) -> Corpus:
    """Reproducible mixture of text-only and image-text pair samples.

    A fraction ``reversal_rate`` of the pairs is emitted as captioning
    (understanding) samples, the rest as generation samples. All samples come
    with their task's loss mask already applied.
    """
    if model_cfg.v_text != data_cfg.v_text or model_cfg.v_vis != data_cfg.codebook_k:
        raise ValueError(
            "model vocabulary does not match data config "
            f"(text {model_cfg.v_text} vs {data_cfg.v_text}, "
            f"vis {model_cfg.v_vis} vs {data_cfg.codebook_k})"
        )
    rng = np.random.default_rng(seed)
    source = TextSource.with_target_entropy(
        data_cfg.v_text, data_cfg.markov_order, data_cfg.text_target_bits,
        seed=int(rng.integers(2**31)),
    )
    def pair_image(text):
        if data_cfg.paired_images == "scene":
            return render_prompt_image(text, data_cfg.image_params,
                                       data_cfg.v_text,
                                       noise_seed=int(rng.integers(2**31)))
        return gen_image(int(rng.integers(2**31)), data_cfg.image_params)

    fit_imgs = []
    for _ in range(data_cfg.codebook_fit_images):
        plen = int(rng.integers(data_cfg.prompt_len_min, data_cfg.prompt_len_max + 1))
        fit_imgs.append(pair_image(gen_text(source, plen,
                                            seed=int(rng.integers(2**31)))))
    patches = np.concatenate([patchify(im, data_cfg.patch_size) for im in fit_imgs])
    codebook = fit_codebook(
        patches, data_cfg.codebook_k, data_cfg.kmeans_iters,
        seed=int(rng.integers(2**31)),
    )

    samples = []
    for _ in range(data_cfg.n_text):
        length = int(rng.integers(data_cfg.text_len_min, data_cfg.text_len_max + 1))
        text = gen_text(source, length, seed=int(rng.integers(2**31)))
        samples.append(build_sequence("text_only", text, None, model_cfg))
    for _ in range(data_cfg.n_pairs):
        plen = int(rng.integers(data_cfg.prompt_len_min, data_cfg.prompt_len_max + 1))
        text = gen_text(source, plen, seed=int(rng.integers(2**31)))
        image = pair_image(text)
        grid = vq_encode(image, codebook).reshape(-1)
        task = "caption" if rng.random() < data_cfg.reversal_rate else "t2i"
        samples.append(
            build_sequence(task, text, grid, model_cfg, data_cfg.grid_tokens)
        )
    samples = [apply_loss_mask(s, model_cfg) for s in samples]
    return Corpus(samples=samples, codebook=codebook, source=source,
                  data_config=data_cfg)


def corpus_streams(samples, config: ModelConfig) -> dict:
    """Token streams for entropy measurement.

    text: all text spans concatenated (text ids); vq_image: all image spans in
    raster order, rebased to codebook ids.
    """
    text_parts, image_parts = [], []
    for s in samples:
        spans = parse_sequence(s.tokens, config)
        if spans["text"] is not None:
            text_parts.append(s.tokens[spans["text"]])
        if spans["image"] is not None:
            image_parts.append(s.tokens[spans["image"]] - config.v_text)
    return {
        "text": np.concatenate(text_parts) if text_parts else np.empty(0, np.int64),
        "vq_image": (
            np.concatenate(image_parts) if image_parts else np.empty(0, np.int64)
        ),
    }


# --- shard io -------------------------------------------------------------


def sample_to_json(sample: Sample) -> str:
    return json.dumps(
        {
            "tokens": sample.tokens.tolist(),
            "mvis": np.asarray(sample.modality_mask, dtype=int).tolist(),
            "lmask": np.asarray(sample.loss_mask, dtype=int).tolist(),
            "task": sample.task,
        },
        separators=(",", ":"),
    )


def sample_from_json(line: str) -> Sample:
    obj = json.loads(line)
    return Sample(
        tokens=np.asarray(obj["tokens"], dtype=np.int64),
        modality_mask=np.asarray(obj["mvis"], dtype=bool),
        loss_mask=np.asarray(obj["lmask"], dtype=bool),
        task=obj["task"],
    )


def write_shards(samples, out_dir, shard_size: int) -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(0, max(len(samples), 1), shard_size):
        chunk = samples[i : i + shard_size]
        if not chunk and i > 0:
            break
        path = out / f"corpus-{i // shard_size:05d}.jsonl"
        path.write_text("\n".join(sample_to_json(s) for s in chunk) + "\n")
        paths.append(path)
    return paths


def read_shards(in_dir) -> list:
    samples = []
    for path in sorted(Path(in_dir).glob("corpus-*.jsonl")):
        for line in path.read_text().splitlines():
            if line.strip():
                samples.append(sample_from_json(line))
    return samples
