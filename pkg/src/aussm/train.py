"""Masked-objective training: loss, AdamW, metric, training loop and grid search."""
from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.special import log_softmax, softmax

from .blocks import ModelConfig, init_model, model_backward, model_forward
from .errors import ConfigError, ContractError, NonFiniteError
from .tasks import SplitSpec, Splits, TaskConfig, TaskSample, collate, make_splits, vocab

log = logging.getLogger(__name__)

GRID_AXES = {
    "d_model": (8, 16, 32, 64),
    "n_state": (8, 16, 32),
    "weight_decay": (0.0, 0.001, 0.01),
    "learning_rate": (1e-4, 1e-3, 1e-2),
}


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    weight_decay: float = 0.0
    batch_size: int = 256
    max_steps: int = 20_000
    patience: int = 2_000
    eval_every: int = 100
    eval_batch: int = 256
    clip_norm: float = 1.0
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    max_seconds: float | None = None
    stop_at_val: float | None = None

    def __post_init__(self):
        if not self.learning_rate > 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate must be > 0 and weight_decay >= 0")
        if min(self.batch_size, self.max_steps, self.eval_every, self.eval_batch) < 1 or self.patience < 0:
            raise ConfigError(f"invalid step/batch settings in {self}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "seeds" in d:
            d["seeds"] = tuple(d["seeds"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# loss and metric

def _check_targets(logits, targets, mask):
    logits = np.asarray(logits, dtype=float)
    targets = np.asarray(targets)
    mask = np.asarray(mask)
    if logits.shape[:-1] != targets.shape or targets.shape != mask.shape:
        raise ContractError(f"shape mismatch: logits {logits.shape}, targets {targets.shape}, mask {mask.shape}")
    if not np.isin(mask, (0, 1)).all():
        raise ContractError("mask entries must be 0 or 1")
    sel = mask.astype(bool)
    if not sel.any():
        raise ContractError("mask selects no position")
    t = targets[sel]
    if t.min() < 0 or t.max() >= logits.shape[-1]:
        raise ContractError(f"masked targets must lie in [0, {logits.shape[-1]})")
    return logits, targets, sel


def masked_cross_entropy(logits, targets, mask) -> float:
    """Mean over masked positions of -log softmax(logits)[target]."""
    logits, targets, sel = _check_targets(logits, targets, mask)
    lp = log_softmax(logits[sel], axis=-1)
    return float(-lp[np.arange(lp.shape[0]), targets[sel]].mean())


def masked_cross_entropy_grad(logits, targets, mask) -> tuple[float, np.ndarray]:
    """Loss and its gradient with respect to ``logits``."""
    logits, targets, sel = _check_targets(logits, targets, mask)
    z = logits[sel]
    t = targets[sel]
    rows = np.arange(z.shape[0])
    loss = float(-log_softmax(z, axis=-1)[rows, t].mean())
    dz = softmax(z, axis=-1)
    dz[rows, t] -= 1.0
    dlogits = np.zeros_like(logits)
    dlogits[sel] = dz / z.shape[0]
    return loss, dlogits


def scaled_accuracy(acc: float, num_classes: int) -> float:
    """(acc - chance) / (1 - chance) with chance = 1 / num_classes."""
    if num_classes < 2:
        raise ConfigError("num_classes must be >= 2")
    if not 0.0 <= acc <= 1.0:
        raise ContractError(f"accuracy must lie in [0, 1], got {acc}")
    base = 1.0 / num_classes
    return (acc - base) / (1.0 - base)


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))


def clip_grads(grads: dict, max_norm: float) -> tuple[dict, float]:
    norm = global_norm(grads)
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        return {k: g * scale for k, g in grads.items()}, norm
    return grads, norm


def adamw_step(params: dict, grads: dict, state: AdamState, lr: float, wd: float,
               betas=(0.9, 0.999), eps: float = 1e-8) -> tuple[dict, AdamState]:
    """One AdamW update with decoupled weight decay. Inputs are left unmodified."""
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteError(f"non-finite gradient in {bad}; step rejected")
    if set(grads) != set(params):
        raise ContractError("grads and params must have the same keys")
    b1, b2 = betas
    t = state.t + 1
    m, v, out = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m[k] = b1 * state.m.get(k, 0.0) + (1 - b1) * g
        v[k] = b2 * state.v.get(k, 0.0) + (1 - b2) * g * g
        mhat = m[k] / (1 - b1 ** t)
        vhat = v[k] / (1 - b2 ** t)
        out[k] = p * (1 - lr * wd) - lr * mhat / (np.sqrt(vhat) + eps)
    return out, AdamState(m, v, t)


# ---------------------------------------------------------------------------
# training loop

def model_loss_and_grad(mcfg: ModelConfig, params: dict, inp, tgt, mask) -> tuple[float, dict]:
    logits, cache = model_forward(mcfg, params, inp, _keep=True)
    loss, dlogits = masked_cross_entropy_grad(logits, tgt, mask)
    return loss, model_backward(mcfg, params, cache, dlogits)


def evaluate(mcfg: ModelConfig, params: dict, samples: list[TaskSample], batch: int = 256) -> float:
    """Per-token accuracy of greedy argmax over all masked positions."""
    pad = vocab_pad(mcfg)
    order = sorted(range(len(samples)), key=lambda i: len(samples[i]))
    correct = total = 0
    for s in range(0, len(order), batch):
        inp, tgt, mask = collate([samples[i] for i in order[s:s + batch]], pad)
        pred = model_forward(mcfg, params, inp).argmax(-1)
        sel = mask.astype(bool)
        correct += int((pred[sel] == tgt[sel]).sum())
        total += int(sel.sum())
    if total == 0:
        raise ContractError("no masked positions to evaluate")
    return correct / total


def vocab_pad(mcfg: ModelConfig) -> int:
    return mcfg.vocab_size - 1  # PAD is always the last token id


def model_config_for(task_id: str, pattern: str, d_model: int, n_state: int,
                     task_cfg: TaskConfig = TaskConfig(), **kw) -> ModelConfig:
    v = vocab(task_id, task_cfg)
    return ModelConfig(pattern, v.size, v.num_classes, d_model, n_state, **kw)


@dataclass
class TrainResult:
    task: str
    seed: int
    status: str
    steps: int
    best_step: int
    best_val_scaled: float
    test_scaled: float | None
    seconds: float
    history: list = field(default_factory=list)
    params: dict | None = field(default=None, repr=False)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("history")
        d.pop("params")
        return d


def train_task(task_id: str, mcfg: ModelConfig, tcfg: TrainConfig, seed: int = 0,
               splits: Splits | None = None, split_spec: SplitSpec | None = None,
               jsonl_path=None, evaluate_test: bool = True) -> TrainResult:
    """Train one model on one task and seed; returns the best-validation checkpoint.

    A record is appended to ``history`` (and ``jsonl_path``) at every
    evaluation. Training stops at ``max_steps``, after ``patience`` steps
    without validation improvement, when ``max_seconds`` is exceeded or when
    validation reaches ``stop_at_val``.
    """
    if splits is None:
        splits = make_splits(task_id, split_spec or SplitSpec(seed=seed))
    seq = np.random.SeedSequence(seed)
    r_init, r_batch = (np.random.default_rng(s) for s in seq.spawn(2))
    params = init_model(mcfg, r_init)
    state = AdamState()
    pad = vocab_pad(mcfg)
    n_cls = mcfg.num_classes
    history: list[dict] = []
    best = (-math.inf, 0, params)
    status = "ok"
    start = time.perf_counter()
    fh = open(jsonl_path, "a") if jsonl_path else None
    order = r_batch.permutation(len(splits.train))
    cursor = 0
    losses = []
    step = 0
    try:
        for step in range(1, tcfg.max_steps + 1):
            if cursor + tcfg.batch_size > len(order):
                order = r_batch.permutation(len(splits.train))
                cursor = 0
            idx = order[cursor:cursor + tcfg.batch_size]
            cursor += tcfg.batch_size
            inp, tgt, mask = collate([splits.train[i] for i in idx], pad)
            loss, grads = model_loss_and_grad(mcfg, params, inp, tgt, mask)
            if not math.isfinite(loss):
                status = "diverged"
                break
            grads, gnorm = clip_grads(grads, tcfg.clip_norm)
            try:
                params, state = adamw_step(params, grads, state, tcfg.learning_rate, tcfg.weight_decay)
            except NonFiniteError as exc:
                log.warning("step %d: %s", step, exc)
                status = "diverged"
                break
            losses.append(loss)
            last = step == tcfg.max_steps
            elapsed = time.perf_counter() - start
            out_of_time = tcfg.max_seconds is not None and elapsed > tcfg.max_seconds
            if step % tcfg.eval_every == 0 or last or out_of_time:
                val = scaled_accuracy(evaluate(mcfg, params, splits.val, tcfg.eval_batch), n_cls)
                rec = {"task": task_id, "seed": seed, "step": step, "loss": float(np.mean(losses)),
                       "grad_norm": gnorm, "val_scaled": val, "seconds": time.perf_counter() - start}
                losses = []
                history.append(rec)
                if fh:
                    fh.write(json.dumps(rec) + "\n")
                    fh.flush()
                log.info("%s seed=%d step=%d loss=%.4f val=%.4f", task_id, seed, step, rec["loss"], val)
                if val > best[0]:
                    best = (val, step, {k: v.copy() for k, v in params.items()})
                if tcfg.stop_at_val is not None and val >= tcfg.stop_at_val:
                    break
                if step - best[1] >= tcfg.patience:
                    break
            if out_of_time:
                break
    finally:
        if fh:
            fh.close()
    best_val, best_step, best_params = best
    test = None
    # a diverged run still has its last finite best checkpoint
    if evaluate_test and history:
        test = scaled_accuracy(evaluate(mcfg, best_params, splits.test, tcfg.eval_batch), n_cls)
    return TrainResult(task_id, seed, status, step, best_step, best_val, test,
                       time.perf_counter() - start, history, best_params)


def write_summary_csv(path, results: list[TrainResult]) -> None:
    rows = [r.summary() for r in results]
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


# ---------------------------------------------------------------------------
# grid search

@dataclass
class GridResult:
    best: dict
    table: list[dict]


def expand_grid(grid: dict) -> list[dict]:
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ConfigError("grid must have at least one value on every axis")
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def grid_search(task_id: str, grid: dict, seeds=(0, 1, 2, 3, 4),
                runner: Callable[[str, dict, int], float] | None = None,
                pattern: str = "ma", tcfg: TrainConfig = TrainConfig()) -> GridResult:
    """Exhaustive search; the best cell has the highest mean validation scaled accuracy.

    ``runner(task_id, cell, seed)`` returns a validation score; the default
    trains a model with :func:`train_task`.
    """
    cells = expand_grid(grid)
    if runner is None:
        def runner(task, cell, seed):
            cell = dict(cell)
            mcfg = model_config_for(task, cell.pop("pattern", pattern),
                                    cell.pop("d_model", 16), cell.pop("n_state", 8))
            return train_task(task, mcfg, replace(tcfg, **cell), seed, evaluate_test=False).best_val_scaled
    table = []
    for cell in cells:
        scores = [float(runner(task_id, cell, s)) for s in seeds]
        table.append({**cell, "scores": scores, "mean_val": float(np.mean(scores))})
    best = max(table, key=lambda r: r["mean_val"])
    return GridResult(best, table)
