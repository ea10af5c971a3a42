"""Losses, optimizer, LR schedule, and the seeded training loop.

Everything a run does is a pure function of its config: data synthesis,
shuffling, augmentation, dropout and init all draw from named sub-streams
of one seed, and the metrics file deliberately contains no wall-clock
values (its `seconds` column is a documented 0.0 placeholder; real timing
goes to summary.json). Running the same config twice must produce
byte-identical metrics and checkpoints.

metrics.csv columns: epoch, train_loss, val_loss, mean_dice,
dice_c1..dice_c{C-1}, rho_A, mean_ponder, h_halt, seconds. mean_ponder is
the epoch's training-batch average; val_loss is the label loss only (no
ponder term); rho_A is 0.0 for the non-recurrent baseline.

The cross-entropy here is the usual stable composition: subtract the row
max, exponentiate, normalize in log space. Binary seed supervision reuses
it by stacking a zero logit against the raw seed logit, which is exactly
sigmoid cross-entropy without a separate softplus path.
"""
from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import RunConfig, format_run_config
from .data import augment, generate
from .errors import ConfigError, NumericError, ShapeError
from .model import build, count_parameters, save_checkpoint
from .moe import MoELayer, update_router_bias
from .rng import RngState
from .tensor import Tensor


# ---------------------------------------------------------------------------
# losses


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - shifted.exp().sum(axis=axis, keepdims=True).log()


def _channels_last(logits: Tensor) -> Tensor:
    # (B, C, *spatial) -> (B, *spatial, C)
    perm = (0,) + tuple(range(2, logits.ndim)) + (1,)
    return logits.transpose(perm)


def cross_entropy(logits: Tensor, labels: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood over positions.

    logits are (B, C, *spatial), labels integer (B, *spatial). An optional
    per-position weight mask restricts the mean to its support (a zero-mask
    batch contributes zero loss rather than dividing by zero).
    """
    num_classes = logits.shape[1]
    if labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    flat = _channels_last(logits).reshape(-1, num_classes)
    idx = labels.reshape(-1).astype(np.int64)
    if idx.min() < 0 or idx.max() >= num_classes:
        raise ShapeError(f"labels outside [0, {num_classes}): {idx.min()}..{idx.max()}")
    onehot = np.zeros((idx.size, num_classes), dtype=T.default_dtype())
    onehot[np.arange(idx.size), idx] = 1.0
    nll = -(log_softmax(flat, axis=-1) * T.constant(onehot)).sum(axis=-1)
    if weights is None:
        return nll.mean()
    w = weights.reshape(-1).astype(T.default_dtype())
    denom = max(float(w.sum()), 1.0)
    return (nll * T.constant(w)).sum() / denom


def seed_bce(logits: Tensor, target: np.ndarray) -> Tensor:
    """Sigmoid cross-entropy on raw seed logits (B, 1, *spatial)."""
    if logits.shape[1] != 1:
        raise ShapeError(f"seed logits need one channel, got {logits.shape}")
    stacked = T.concat([T.zeros(logits.shape), logits], axis=1)
    return cross_entropy(stacked, target.reshape(stacked.shape[0:1] + stacked.shape[2:]))


def offset_l1(pred: Tensor, target: np.ndarray, fg_mask: np.ndarray) -> Tensor:
    """Mean absolute offset error over foreground voxels (zero if none)."""
    if pred.shape[1] != 3:
        raise ShapeError(f"offset maps need three channels, got {pred.shape}")
    mask = fg_mask.astype(T.default_dtype())[:, None]
    diff = (pred - T.constant(target.astype(T.default_dtype()))).abs() * T.constant(mask)
    denom = max(3.0 * float(fg_mask.sum()), 1.0)
    return diff.sum() / denom


def dice_per_class(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> np.ndarray:
    """Dice for classes 1..C-1 of one volume; both-empty counts as 1."""
    out = np.zeros(num_classes - 1)
    for c in range(1, num_classes):
        p = pred == c
        g = truth == c
        total = p.sum() + g.sum()
        out[c - 1] = 1.0 if total == 0 else 2.0 * np.logical_and(p, g).sum() / total
    return out


def mean_dice(preds, truths, num_classes: int) -> float:
    """Per-volume class-mean dice, averaged over volumes."""
    scores = [dice_per_class(p, g, num_classes).mean() for p, g in zip(preds, truths)]
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# optimizer and schedule


class AdamW:
    """Adam with decoupled weight decay.

    The decay multiplies each parameter by (1 - lr * wd) before the moment
    update, so decay strength follows the LR schedule but never enters the
    moment estimates. step() consumes and clears the accumulated gradients;
    parameters without a gradient are left untouched.
    """

    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.05):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            self._m[i] = b1 * self._m[i] + (1.0 - b1) * g
            self._v[i] = b2 * self._v[i] + (1.0 - b2) * g * g
            m_hat = self._m[i] / bc1
            v_hat = self._v[i] / bc2
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            p.grad = None


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale all gradients by a common factor so the global L2 norm is at
    most max_norm. Returns the pre-clip norm."""
    total = 0.0
    grads = [p.grad for p in params if p.grad is not None]
    for g in grads:
        total += float(np.sum(g.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float = 0.0) -> float:
    if total_steps < 1:
        raise ConfigError("total_steps must be >= 1")
    frac = min(max(step / total_steps, 0.0), 1.0)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * frac))


def data_fraction_subset(samples, fraction: float):
    """First ceil(fraction * n) items, so smaller budgets are prefixes of
    larger ones and comparisons hold the sample identity fixed."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"fraction must lie in (0, 1], got {fraction}")
    return samples[: math.ceil(fraction * len(samples))]


# ---------------------------------------------------------------------------
# batching and evaluation


def stack_batch(samples):
    images = np.stack([s.image for s in samples])[:, None]
    labels = np.stack([s.label for s in samples]).astype(np.int64)
    offsets = None
    instance = None
    if samples[0].offsets is not None:
        offsets = np.stack([s.offsets for s in samples])
        instance = np.stack([s.instance_ids for s in samples]).astype(np.int64)
    return images, labels, offsets, instance


def batch_loss(model, batch, lam: float, rng: RngState | None):
    images, labels, offsets, instance = batch
    outputs, stats = model.forward(Tensor(images), train=True, rng=rng)
    if isinstance(outputs, tuple):
        seed, offs, fdi = outputs
        fg = (instance > 0) if instance is not None else (labels > 0)
        loss = seed_bce(seed, fg.astype(np.int64))
        if offsets is not None:
            loss = loss + offset_l1(offs, offsets, fg)
        loss = loss + cross_entropy(fdi, labels, weights=fg)
    else:
        loss = cross_entropy(outputs, labels)
    loss = loss + model.ponder_loss(lam)
    return loss, stats


@dataclass
class EvalResult:
    loss: float
    mean_dice: float
    class_dice: np.ndarray  # (C-1,) column means over volumes
    mean_ponder: float
    halting_entropy: float


def _label_logits(outputs):
    return outputs[2] if isinstance(outputs, tuple) else outputs


def evaluate(model, samples, num_classes: int, batch_size: int = 8,
             loops: int | None = None) -> EvalResult:
    """Deterministic held-out metrics. The loss is the label term only; for
    the instance head that is the foreground tooth-class cross-entropy."""
    losses = []
    dice_rows = []
    iters = []
    entropies = []
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo : lo + batch_size]
        images, labels, _, instance = stack_batch(chunk)
        outputs, stats = model.forward(Tensor(images), train=False, loops=loops)
        logits = _label_logits(outputs)
        if isinstance(outputs, tuple):
            fg = (instance > 0) if instance is not None else (labels > 0)
            loss = cross_entropy(logits, labels, weights=fg)
        else:
            loss = cross_entropy(logits, labels)
        losses.append((loss.item(), len(chunk)))
        preds = np.argmax(logits.data, axis=1)
        for p, g in zip(preds, labels):
            dice_rows.append(dice_per_class(p, g, num_classes))
        iters.append(stats.iters_per_token)
        entropies.append((stats.halting_entropy, len(chunk)))
    dice_mat = np.stack(dice_rows)
    loss = sum(v * n for v, n in losses) / sum(n for _, n in losses)
    h_halt = sum(v * n for v, n in entropies) / sum(n for _, n in entropies)
    return EvalResult(
        loss=float(loss),
        mean_dice=float(dice_mat.mean(axis=1).mean()),
        class_dice=dice_mat.mean(axis=0),
        mean_ponder=float(np.concatenate(iters).mean()),
        halting_entropy=float(h_halt),
    )


# ---------------------------------------------------------------------------
# the training loop


@dataclass
class TrainResult:
    model: object
    best_dice: float
    best_epoch: int
    final_dice: float
    history: list
    out_dir: str


def metrics_header(num_classes: int) -> str:
    dice_cols = ",".join(f"dice_c{c}" for c in range(1, num_classes))
    return f"epoch,train_loss,val_loss,mean_dice,{dice_cols},rho_A,mean_ponder,h_halt,seconds"


def _fmt(value: float) -> str:
    return f"{value:.8g}"


def _moe_layers(model):
    block = getattr(model, "core", None)
    if block is not None and isinstance(getattr(block, "ffn", None), MoELayer):
        return [block.ffn]
    return []


def split_train_val(samples, val_fraction: float):
    n_val = max(1, round(len(samples) * val_fraction))
    if n_val >= len(samples):
        raise ConfigError(f"val fraction {val_fraction} leaves no training data")
    return samples[:-n_val], samples[-n_val:]


def train_run(cfg: RunConfig, out_dir, quiet: bool = True) -> TrainResult:
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    t_start = time.monotonic()
    dtype = np.float32 if cfg.precision == "f32" else np.float64
    with T.using_dtype(dtype):
        rng = RngState(cfg.seed)
        samples = generate(cfg.synth_spec())
        train_samples, val_samples = split_train_val(samples, cfg.val_fraction)
        train_samples = data_fraction_subset(train_samples, cfg.data_fraction)

        model = build(cfg.model_config(), cfg.variant, rng.spawn("init"))
        params = [p for _, p in model.named_parameters()]
        opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
        moe_layers = _moe_layers(model)
        injection = getattr(model, "injection", None)

        steps_per_epoch = max(1, len(train_samples) // cfg.batch_size)
        total_steps = cfg.epochs * steps_per_epoch
        history = []
        best_dice, best_epoch = -1.0, -1
        step = 0
        for epoch in range(cfg.epochs):
            order = rng.spawn("shuffle", epoch).permutation(len(train_samples))
            losses = []
            ponders = []
            for b in range(steps_per_epoch):
                chosen = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
                batch_samples = [
                    augment(train_samples[j], cfg.augment, rng.spawn("aug", epoch, int(j)))
                    for j in chosen
                ]
                batch = stack_batch(batch_samples)
                opt.lr = cosine_lr(step, total_steps, cfg.lr, cfg.lr_min)
                try:
                    with T.Tape() as tape:
                        loss, stats = batch_loss(
                            model, batch, cfg.ponder_lambda, rng.spawn("drop", step)
                        )
                        tape.backward(loss)
                except NumericError as err:
                    raise NumericError(f"epoch {epoch} step {step}: {err}") from err
                clip_grad_norm(params, cfg.clip_norm)
                opt.step()
                for layer in moe_layers:
                    update_router_bias(layer, layer.expert_load(), cfg.moe_bias_gamma)
                losses.append(loss.item())
                ponders.append(stats.mean_ponder)
                step += 1
            ev = evaluate(model, val_samples, cfg.num_classes, cfg.batch_size)
            row = {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)),
                "val_loss": ev.loss,
                "mean_dice": ev.mean_dice,
                "class_dice": ev.class_dice,
                "rho_A": injection.spectral_radius() if injection is not None else 0.0,
                "mean_ponder": float(np.mean(ponders)),
                "h_halt": ev.halting_entropy,
                "seconds": 0.0,  # placeholder by design; see module docstring
            }
            history.append(row)
            if not quiet:
                print(
                    f"epoch {epoch:3d}  loss {row['train_loss']:.4f}  "
                    f"dice {ev.mean_dice:.4f}  ponder {row['mean_ponder']:.2f}"
                )
            if ev.mean_dice > best_dice:
                best_dice, best_epoch = ev.mean_dice, epoch
                save_checkpoint(os.path.join(out_dir, "ckpt_best.rdvt"), model)
        save_checkpoint(os.path.join(out_dir, "ckpt_last.rdvt"), model)

        with open(os.path.join(out_dir, "metrics.csv"), "w", encoding="utf-8") as fh:
            fh.write(metrics_header(cfg.num_classes) + "\n")
            for row in history:
                cells = [str(row["epoch"]), _fmt(row["train_loss"]), _fmt(row["val_loss"]),
                         _fmt(row["mean_dice"])]
                cells += [_fmt(v) for v in row["class_dice"]]
                cells += [_fmt(row["rho_A"]), _fmt(row["mean_ponder"]), _fmt(row["h_halt"]),
                          _fmt(row["seconds"])]
                fh.write(",".join(cells) + "\n")
        summary = {
            "best_epoch": best_epoch,
            "best_val_dice": best_dice,
            "final_val_dice": history[-1]["mean_dice"],
            "epochs": cfg.epochs,
            "train_samples": len(train_samples),
            "val_samples": len(val_samples),
            "parameters": count_parameters(model).total,
            "config": format_run_config(cfg),
            "wall_seconds": time.monotonic() - t_start,
        }
        with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return TrainResult(
        model=model,
        best_dice=best_dice,
        best_epoch=best_epoch,
        final_dice=history[-1]["mean_dice"],
        history=history,
        out_dir=str(out_dir),
    )
