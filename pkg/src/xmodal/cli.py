"""Command-line entry point.

Subcommands: synth (corpus + codebook), train (checkpoints + loss curve),
conflict (gradient-conflict CSV), entropy (n-gram entropy CSV), sample
(images/captions + a JSON record). Every command is a pure function of
(config, input files, seed); reruns are byte-identical. Exit codes: 0 ok,
2 config error, 3 io error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from .architectures import LayoutError, RoutingError
from .autodiff import DimensionError, EmptyLossError, NumericError
from .checkpoint import load_model, load_raw_buffers, save_raw_buffers
from .config import ConfigError, ExperimentConfig, load_config
from .data import (
    LayoutError as DataLayoutError,
    VQCodebook,
    corpus_streams,
    gen_image,
    make_corpus,
    read_shards,
    vq_encode,
    write_ppm,
    write_shards,
)
from .diagnostics import (
    MATRIX_KINDS,
    SelectorError,
    conflict_profile,
    entropy_report,
    enumerate_selectors,
)
from .sampling import (
    SamplerError,
    generate_caption,
    generate_image,
    icl_prompt,
)
from .training import train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

CONFIG_ERRORS = (
    ConfigError,
    LayoutError,
    DataLayoutError,
    RoutingError,
    SamplerError,
    SelectorError,
    DimensionError,
    ValueError,
)
NUMERIC_ERRORS = (NumericError, EmptyLossError, ArithmeticError)


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_sidecar(out_dir: Path, cfg: ExperimentConfig, files: list,
                  name: str = "manifest.json", extra: dict = None) -> Path:
    """Manifest with the config hash and a sha256 per produced file."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config_sha256": cfg.sha256(),
        "files": {
            str(Path(f).relative_to(out_dir)): _sha256(f) for f in sorted(map(str, files))
        },
    }
    if extra:
        manifest.update(extra)
    path = out_dir / name
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def corpus_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.out) / "corpus"


def _require_corpus(cfg: ExperimentConfig):
    cdir = corpus_dir(cfg)
    if not cdir.is_dir() or not list(cdir.glob("corpus-*.jsonl")):
        raise FileNotFoundError(f"no corpus under {cdir}; run `xmodal synth` first")
    return read_shards(cdir)


def _load_codebook(cfg: ExperimentConfig) -> VQCodebook:
    buffers = load_raw_buffers(corpus_dir(cfg) / "codebook", "codebook")
    return VQCodebook(
        codewords=buffers["codewords"], patch=int(buffers["patch"][0])
    )


def cmd_synth(args, cfg: ExperimentConfig) -> int:
    corpus = make_corpus(cfg.data, cfg.model_config(), cfg.seed)
    cdir = corpus_dir(cfg)
    shards = write_shards(corpus.samples, cdir, cfg.data.shard_size)
    save_raw_buffers(
        {
            "codewords": corpus.codebook.codewords,
            "patch": np.array([corpus.codebook.patch], dtype=np.float64),
        },
        cdir / "codebook",
        "codebook",
    )
    n_tokens = int(sum(len(s) for s in corpus.samples))
    files = list(shards) + [cdir / "codebook" / "manifest.json"] + list(
        (cdir / "codebook").glob("*.bin")
    )
    write_sidecar(
        cdir, cfg, files,
        extra={"n_samples": len(corpus.samples), "n_tokens": n_tokens},
    )
    print(f"synth: {len(corpus.samples)} samples, {n_tokens} tokens, "
          f"{len(shards)} shards -> {cdir}")
    return EXIT_OK


def train_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.out) / f"train-{cfg.arch}"


def cmd_train(args, cfg: ExperimentConfig) -> int:
    samples = _require_corpus(cfg)
    model = cfg.build_model()
    tdir = train_dir(cfg)
    result = train(
        model,
        samples,
        cfg.training.steps,
        cfg.training.train_config(),
        tdir,
        checkpoint_every=cfg.training.checkpoint_every,
        seed=cfg.seed,
    )
    files = [result["log"]]
    for ckpt in result["checkpoints"]:
        files.extend(sorted(Path(ckpt).iterdir()))
    write_sidecar(tdir, cfg, files)
    last = result["rows"][-1]["loss_total"] if result["rows"] else float("nan")
    print(f"train[{cfg.arch}]: {cfg.training.steps} steps, "
          f"final loss {last:.4f} -> {tdir}")
    return EXIT_OK


def _diag_batches(cfg: ExperimentConfig, samples, rng):
    budget = cfg.diagnostics.batch_tokens

    def draw(pool):
        if not pool:
            raise ValueError("corpus lacks samples required for profiling")
        order = rng.permutation(len(pool))
        take, total = [], 0
        for i in order:
            take.append(int(i))
            total += len(pool[i])
            if total >= budget:
                break
        # index order fixes the in-batch summation order, so equal draws
        # give bit-identical gradients
        return [pool[i] for i in sorted(take)]

    text_pool = [s for s in samples if s.task == "text_only"]
    mm_pool = [s for s in samples if s.task == "t2i"]
    text_batch = draw(text_pool)
    mm_batch = draw(mm_pool)
    pairs = [(draw(samples), draw(samples)) for _ in range(cfg.diagnostics.r_pairs)]
    return text_batch, mm_batch, pairs


def cmd_conflict(args, cfg: ExperimentConfig) -> int:
    if not args.checkpoint:
        raise ConfigError("conflict requires --checkpoint")
    ckpt = Path(args.checkpoint)
    if not (ckpt / "manifest.json").is_file():
        raise FileNotFoundError(f"checkpoint {ckpt} not found")
    samples = _require_corpus(cfg)
    model = load_model(ckpt)
    rng = np.random.default_rng(cfg.seed)
    text_batch, mm_batch, pairs = _diag_batches(cfg, samples, rng)
    if cfg.diagnostics.selectors == "all":
        selectors = enumerate_selectors(model)
    else:
        kinds = tuple(k.strip() for k in cfg.diagnostics.selectors.split(","))
        bad = set(kinds) - set(MATRIX_KINDS)
        if bad:
            raise ConfigError(f"unknown selector kinds: {sorted(bad)}")
        selectors = enumerate_selectors(model, kinds=kinds)
    profile = conflict_profile(
        model, text_batch, mm_batch, pairs, selectors,
        meta={"checkpoint": str(ckpt), "r_pairs": cfg.diagnostics.r_pairs,
              "seed": cfg.seed},
    )
    out = Path(cfg.out) / f"conflict-{model.arch}-{ckpt.name}.csv"
    profile.to_csv(out)
    write_sidecar(Path(cfg.out), cfg, [out], name=out.name + ".manifest.json")
    print(f"conflict[{model.arch}]: {len(profile.cells)} cells -> {out}")
    return EXIT_OK


def cmd_entropy(args, cfg: ExperimentConfig) -> int:
    samples = _require_corpus(cfg)
    streams = corpus_streams(samples, cfg.model_config())
    report = entropy_report(streams, cfg.diagnostics.n_max)
    out = Path(cfg.out) / "entropy.csv"
    report.to_csv(out)
    write_sidecar(Path(cfg.out), cfg, [out], name="entropy.csv.manifest.json")
    print(f"entropy: {len(report.rows)} rows -> {out}")
    return EXIT_OK


def _parse_ids(text: str) -> np.ndarray:
    if not text:
        return np.empty(0, dtype=np.int64)
    return np.asarray([int(t) for t in text.split(",")], dtype=np.int64)


def cmd_sample(args, cfg: ExperimentConfig) -> int:
    if not args.checkpoint:
        raise ConfigError("sample requires --checkpoint")
    ckpt = Path(args.checkpoint)
    if not (ckpt / "manifest.json").is_file():
        raise FileNotFoundError(f"checkpoint {ckpt} not found")
    model = load_model(ckpt)
    codebook = _load_codebook(cfg)
    mcfg = cfg.model_config()
    sdir = Path(cfg.out) / "samples"
    sdir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    record = {
        "mode": args.mode,
        "seed": cfg.seed,
        "cfg_scale": cfg.sampler.cfg_scale,
        "checkpoint": str(ckpt),
    }
    files = []
    if args.mode == "t2i":
        prompt = (
            _parse_ids(args.prompt)
            if args.prompt
            else rng.integers(0, mcfg.v_text, size=6)
        )
        grid, pixels = generate_image(
            model, prompt, cfg.sampler, codebook, cfg.data.grid_tokens,
            seed=cfg.seed,
        )
        img_path = sdir / "t2i.ppm"
        grid_path = sdir / "t2i-grid.json"
        write_ppm(pixels, img_path)
        grid_path.write_text(json.dumps(grid.tolist()))
        record["prompt"] = [int(t) for t in prompt]
        files = [img_path, grid_path]
    elif args.mode == "caption":
        if args.image:
            grid = np.asarray(json.loads(Path(args.image).read_text()))
        else:
            image = gen_image(cfg.seed, cfg.data.image_params)
            grid = vq_encode(image, codebook)
        caption = generate_caption(
            model, grid.reshape(-1), cfg.sampler, seed=cfg.seed
        )
        cap_path = sdir / "caption.json"
        cap_path.write_text(json.dumps([int(t) for t in caption]))
        record["image_grid"] = np.asarray(grid).reshape(-1).tolist()
        files = [cap_path]
    elif args.mode == "icl":
        examples = []
        for i in range(2):
            image = gen_image(cfg.seed * 1000 + i, cfg.data.image_params)
            grid = vq_encode(image, codebook).reshape(-1)
            text = rng.integers(0, mcfg.v_text, size=4)
            examples.append((grid, text))
        query = vq_encode(
            gen_image(cfg.seed * 1000 + 99, cfg.data.image_params), codebook
        ).reshape(-1)
        prompt = icl_prompt(examples, query, mcfg)
        prompt_path = sdir / "icl-prompt.json"
        prompt_path.write_text(json.dumps([int(t) for t in prompt]))
        record["n_examples"] = len(examples)
        files = [prompt_path]
    else:
        raise ConfigError(f"unknown sample mode {args.mode!r}")
    record_path = sdir / "record.json"
    record_path.write_text(json.dumps(record, indent=1, sort_keys=True))
    files.append(record_path)
    write_sidecar(sdir, cfg, files)
    print(f"sample[{args.mode}] -> {sdir}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "conflict": cmd_conflict,
    "entropy": cmd_entropy,
    "sample": cmd_sample,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xmodal",
        description="bimodal transformer workbench: corpus synthesis, training, "
                    "conflict/entropy diagnostics, sampling",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="TOML experiment config")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory root")
        p.add_argument("--arch", default=None,
                       choices=["shared", "unix", "hardmoe", "mot", "unifork"])
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (TOML literal value)")
        p.add_argument("--checkpoint", default=None,
                       help="checkpoint directory (conflict/sample)")
        if name == "sample":
            p.add_argument("--mode", choices=["t2i", "caption", "icl"],
                           default="t2i")
            p.add_argument("--prompt", default=None,
                           help="comma-separated text token ids")
            p.add_argument("--image", default=None,
                           help="JSON token-grid file for captioning")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.set, seed=args.seed, out=args.out,
                          arch=args.arch)
        return COMMANDS[args.command](args, cfg)
    except NUMERIC_ERRORS as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except CONFIG_ERRORS as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
