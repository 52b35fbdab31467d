"""Next-token training over mixed samples.

Masked mean cross-entropy, adaptive-moment updates with decoupled weight
decay, a warmup-then-constant learning-rate schedule, and a deterministic
loop that logs losses split by the predicted token's modality and writes
checkpoints.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError, Tape, Tensor
from .architectures import Model, TASK_TO_UNIFORK
from .checkpoint import save_model
from .data import Sample


@dataclass(frozen=True)
class Schedule:
    """Linear warmup to ``base_lr`` over warmup_ratio * total_steps, constant
    afterwards."""

    base_lr: float
    warmup_ratio: float = 0.03
    total_steps: int = 1000

    def lr(self, step: int) -> float:
        warmup = self.warmup_ratio * self.total_steps
        if warmup <= 0 or step >= warmup:
            return self.base_lr
        return self.base_lr * step / warmup


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-5
    warmup_ratio: float = 0.03
    betas: tuple = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    batch_tokens: int = 2048

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["betas"] = list(self.betas)
        return d


class OptimState:
    """First/second moment buffers and the step counter."""

    def __init__(self, params: dict):
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.step = 0


def optim_step(params: dict, grads: dict, state: OptimState, schedule: Schedule,
               t: int, cfg: TrainConfig) -> OptimState:
    """One bias-corrected adaptive update with decoupled decay at lr(t)."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter {name!r}")
    lr = schedule.lr(t)
    state.step += 1
    b1, b2 = cfg.betas
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, tensor in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        if cfg.weight_decay:
            update = update + cfg.weight_decay * tensor.data
        tensor.data = tensor.data - lr * update
    return state


def clip_global_norm(grads: dict, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = np.sqrt(sum(float((g**2).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / total
        for g in grads.values():
            g *= factor
    return total


def sequence_loss(model: Model, sample: Sample) -> Tensor:
    """Mean masked cross-entropy of next-token prediction for one sample."""
    logits = model.forward_sample(sample)
    t = len(sample.tokens)
    return ad.cross_entropy(
        ad.slice_rows(logits, 0, t - 1),
        sample.tokens[1:],
        sample.loss_mask[1:],
    )


def _per_position_nll(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1))
    return logz - shifted[np.arange(len(targets)), targets]


def _pack(batch: list, pad_id: int):
    """Pad a list of samples into (tokens, mvis, valid, score) arrays; score
    marks token positions whose prediction is in the loss."""
    b = len(batch)
    t_max = max(len(s.tokens) for s in batch)
    tokens = np.full((b, t_max), pad_id, dtype=np.int64)
    mvis = np.zeros((b, t_max), dtype=bool)
    valid = np.zeros((b, t_max), dtype=bool)
    score = np.zeros((b, t_max), dtype=bool)
    for i, s in enumerate(batch):
        t = len(s.tokens)
        tokens[i, :t] = s.tokens
        mvis[i, :t] = s.modality_mask
        valid[i, :t] = True
        score[i, 1:t] = s.loss_mask[1:]
    return tokens, mvis, valid, score


def _group_loss(model: Model, batch: list, task: str):
    """One padded forward over a same-task group; returns the mean loss over
    its scored positions plus raw sums for the modality split."""
    cfg = model.config
    tokens, mvis, valid, score = _pack(batch, cfg.pad_id)
    b, t_max = tokens.shape
    logits = model.forward_batch(tokens, mvis, valid, task=task)
    targets = np.zeros((b, t_max), dtype=np.int64)
    targets[:, :-1] = tokens[:, 1:]
    mask = np.zeros((b, t_max), dtype=bool)
    mask[:, :-1] = score[:, 1:]
    flat_logits = ad.reshape(logits, (b * t_max, cfg.v_total))
    loss = ad.cross_entropy(flat_logits, targets.reshape(-1), mask.reshape(-1))
    # modality split of the same per-position losses, for logging
    rows = logits.data[mask]
    nll = _per_position_nll(rows, targets[mask])
    target_vis = np.zeros((b, t_max), dtype=bool)
    target_vis[:, :-1] = mvis[:, 1:]
    vis_sel = target_vis[mask]
    sums = {
        "text_sum": float(nll[~vis_sel].sum()),
        "vis_sum": float(nll[vis_sel].sum()),
        "text_n": int((~vis_sel).sum()),
        "vis_n": int(vis_sel.sum()),
    }
    return loss, int(mask.sum()), sums


def batch_loss(model: Model, batch: list) -> tuple:
    """Token-weighted mean loss over a batch, plus modality-split logging.

    Returns (scalar Tensor, stats dict). The loss averages cross-entropy over
    every unmasked target position in the batch, so each position carries the
    same weight regardless of which sample it came from. Task-routed
    architectures get one forward per task group; everything else runs as a
    single padded batch.
    """
    scorable = [s for s in batch if np.asarray(s.loss_mask[1:], dtype=bool).any()]
    if not scorable:
        raise ad.EmptyLossError("batch has no unmasked target positions")
    if model.arch == "unifork":
        groups = {}
        for s in scorable:
            groups.setdefault(TASK_TO_UNIFORK[s.task], []).append(s)
    else:
        groups = {None: scorable}
    parts = []
    totals = {"text_sum": 0.0, "vis_sum": 0.0, "text_n": 0, "vis_n": 0}
    for task, group in groups.items():
        loss_g, count_g, sums = _group_loss(model, group, task)
        parts.append((loss_g, count_g))
        for k in totals:
            totals[k] += sums[k]
    total = sum(c for _, c in parts)
    loss = None
    for part, count in parts:
        term = ad.scale(part, count / total) if len(parts) > 1 else part
        loss = term if loss is None else ad.add(loss, term)
    stats = {
        "loss_total": (totals["text_sum"] + totals["vis_sum"]) / total,
        "loss_text": totals["text_sum"] / totals["text_n"]
        if totals["text_n"] else float("nan"),
        "loss_vis": totals["vis_sum"] / totals["vis_n"]
        if totals["vis_n"] else float("nan"),
        "n_text": totals["text_n"],
        "n_vis": totals["vis_n"],
    }
    return loss, stats


def batches_by_token_budget(samples: list, budget: int, order: np.ndarray):
    """Greedy batches of at least one sample, closing once the padded
    footprint (batch size x longest sample) reaches the token budget; cycles
    through ``order`` indefinitely."""
    batch = []
    longest = 0
    while True:
        for idx in order:
            batch.append(samples[idx])
            longest = max(longest, len(samples[idx]))
            if len(batch) * longest >= budget:
                yield batch
                batch = []
                longest = 0


def train(
    model: Model,
    samples: list,
    steps: int,
    train_cfg: TrainConfig,
    out_dir,
    checkpoint_every: int = 0,
    seed: int = 0,
    log_name: str = "loss.csv",
) -> dict:
    """Deterministic training loop.

    Writes checkpoints under ``out_dir/step-NNNNNN`` and a CSV loss curve
    with columns step, lr, loss_total, loss_text, loss_vis. Returns the log
    rows and checkpoint paths.
    """
    if not samples:
        raise ValueError("corpus is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    schedule = Schedule(train_cfg.lr, train_cfg.warmup_ratio, max(steps, 1))
    state = OptimState(model.params)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(samples))
    batches = batches_by_token_budget(samples, train_cfg.batch_tokens, order)
    rows = []
    ckpts = []

    def checkpoint(step):
        path = out / f"step-{step:06d}"
        save_model(model, path)
        ckpts.append(path)

    if steps == 0:
        checkpoint(0)
    for step in range(steps):
        batch = next(batches)
        model.zero_grad()
        with Tape():
            loss, stats = batch_loss(model, batch)
            ad.backward(loss)
        grads = {
            name: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for name, t in model.params.items()
        }
        clip_global_norm(grads, train_cfg.grad_clip)
        optim_step(model.params, grads, state, schedule, step, train_cfg)
        rows.append(
            {
                "step": step,
                "lr": schedule.lr(step),
                "loss_total": stats["loss_total"],
                "loss_text": stats["loss_text"],
                "loss_vis": stats["loss_vis"],
            }
        )
        if checkpoint_every and (step + 1) % checkpoint_every == 0:
            checkpoint(step + 1)
    if steps > 0 and (not ckpts or ckpts[-1].name != f"step-{steps:06d}"):
        checkpoint(steps)
    log_path = out / log_name
    with open(log_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "lr", "loss_total", "loss_text", "loss_vis"])
        for row in rows:
            writer.writerow(
                [
                    row["step"],
                    format_float(row["lr"]),
                    format_float(row["loss_total"]),
                    format_float(row["loss_text"]),
                    format_float(row["loss_vis"]),
                ]
            )
    return {"rows": rows, "checkpoints": ckpts, "log": log_path}


def format_float(x: float) -> str:
    return f"{x:.17g}"
