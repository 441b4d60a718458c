"""Losses, AdamW, cosine-warmup schedule, and the stage drivers:
base pretraining, miscellaneous knowledge aggregation (mka), and
orthogonal-regularized downstream alignment (da).
"""
from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .tensor import Tensor, Rng, StateError, NonFiniteError
from .model import Model, ModelConfig, init_base
from .adapters import (AdapterConfig, attach_mka_adapters, attach_align)
from .data import Tokenizer, Sample, build_batch


class EmptyTargetError(Exception):
    pass


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# -- losses -------------------------------------------------------------------

def masked_nll_loss(logits: Tensor, tokens: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean -log p(next token) over positions flagged by mask.

    mask marks the target-span tokens themselves (target bytes + EOS); the
    prediction for token t comes from logits at t-1.
    """
    tokens = np.asarray(tokens)
    mask = np.asarray(mask, dtype=bool)
    pred_mask = np.zeros_like(mask)
    pred_mask[:, :-1] = mask[:, 1:]
    count = int(pred_mask.sum())
    if count == 0:
        raise EmptyTargetError("loss mask selects no target positions")
    tgt = np.zeros(tokens.shape, dtype=np.int64)
    tgt[:, :-1] = tokens[:, 1:]
    lp = T.take_lastdim(T.log_softmax_lastdim(logits), tgt)
    masked = lp * Tensor(pred_mask.astype(logits.dtype))
    return T.tsum(masked) * (-1.0 / count)


def orth_loss(model: Model) -> Tensor:
    """Sum over FFN slots of sum |entries of Ak^T Ad|."""
    total = None
    for slot in model.ffn_slots():
        if "ka" not in slot.adapters or "align" not in slot.adapters:
            raise StateError(f"slot {slot.name} lacks ka or align; orthogonal loss undefined")
        o = T.matmul(T.transpose(slot.adapters["ka"].A), slot.adapters["align"].A)
        term = T.tsum(T.absolute(o))
        total = term if total is None else total + term
    if total is None:
        raise StateError("model has no FFN slots")
    return total


def cosine_warmup_lr(step: int, total_steps: int, peak_lr: float,
                     warmup_ratio: float) -> float:
    """Linear 0->peak over warmup_ratio*total_steps, then cosine decay to 0."""
    warmup = warmup_ratio * total_steps
    if warmup > 0 and step < warmup:
        return peak_lr * step / warmup
    if total_steps == warmup:
        return peak_lr
    progress = (step - warmup) / (total_steps - warmup)
    return 0.5 * peak_lr * (1.0 + math.cos(math.pi * progress))


# -- optimizer ----------------------------------------------------------------

class AdamW:
    def __init__(self, named_params, lr=2e-4, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0):
        self.named_params = list(named_params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [np.zeros_like(p.data) for _, p in self.named_params]
        self._v = [np.zeros_like(p.data) for _, p in self.named_params]

    def step(self, lr: float | None = None):
        if lr is None:
            lr = self.lr
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for i, (name, p) in enumerate(self.named_params):
            if not p.requires_grad:
                continue  # frozen entries never updated
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for parameter '{name}'")
            self._m[i] = self.b1 * self._m[i] + (1.0 - self.b1) * g
            self._v[i] = self.b2 * self._v[i] + (1.0 - self.b2) * g * g
            mhat = self._m[i] / bc1
            vhat = self._v[i] / bc2
            if self.weight_decay:
                p.data = p.data * (1.0 - lr * self.weight_decay)
            p.data = p.data - (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)


# -- configs and reports ------------------------------------------------------

@dataclass
class TrainConfig:
    stage: str = "mka"              # pretrain | mka | da
    epochs: int = 1
    batch_size: int = 32
    peak_lr: float = 3e-3
    warmup_ratio: float = 0.03
    lambda_orth: float = 1.0
    seed: int = 0
    grad_clip: float | None = None
    batch_mix: str = "uniform"      # uniform | blocked (genre-blocked batches)
    pretrain_target_nll: float = 0.02
    pretrain_max_epochs: int = 40
    adapter: AdapterConfig = field(default_factory=AdapterConfig)

    def __post_init__(self):
        if self.lambda_orth < 0:
            raise ValueError("lambda_orth must be >= 0")
        if not (0 <= self.warmup_ratio < 1):
            raise ValueError("warmup_ratio must be in [0, 1)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if isinstance(self.adapter, dict):
            self.adapter = AdapterConfig(**self.adapter)


@dataclass
class StageReport:
    stage: str
    seed: int
    config_hash: str
    steps: list = field(default_factory=list)  # dicts: step, lr, nll, orth, total
    final_metrics: dict = field(default_factory=dict)
    wall_seconds: float = 0.0

    def log_lines(self) -> list[str]:
        lines = [f"step={s['step']} lr={s['lr']:.8g} nll={s['nll']:.6f} "
                 f"orth={s['orth']:.6f} total={s['total']:.6f}" for s in self.steps]
        lines.append("summary " + json.dumps(
            {"stage": self.stage, "seed": self.seed, "config_hash": self.config_hash,
             "wall_seconds": round(self.wall_seconds, 3), **self.final_metrics}))
        return lines


# -- shared loop --------------------------------------------------------------

def _order_samples(samples: list[Sample], cfg: TrainConfig, epoch: int) -> list[int]:
    rng = Rng(cfg.seed).child(f"shuffle/{cfg.stage}/epoch{epoch}")
    if cfg.batch_mix == "blocked":
        by_task: dict[str, list[int]] = {}
        for i, s in enumerate(samples):
            by_task.setdefault(s.task, []).append(i)
        out = []
        for task in sorted(by_task):
            idx = by_task[task]
            perm = rng.child(task).permutation(len(idx))
            out.extend(idx[p] for p in perm)
        return out
    return list(rng.permutation(len(samples)))


def _clip_grads(params, max_norm: float):
    total = math.sqrt(sum(float((p.grad ** 2).sum()) for _, p in params if p.grad is not None))
    if total > max_norm:
        scale = max_norm / total
        for _, p in params:
            if p.grad is not None:
                p.grad *= scale


def train_loop(model: Model, samples: list[Sample], cfg: TrainConfig,
               use_orth: bool, report: StageReport,
               opt: AdamW | None = None, total_steps: int | None = None,
               step_offset: int = 0, epoch_offset: int = 0) -> StageReport:
    tok = Tokenizer()
    params = model.registry.trainable_items()
    if not params:
        raise StateError("no trainable parameters for this stage")
    if opt is None:
        opt = AdamW(params, lr=cfg.peak_lr)
    steps_per_epoch = math.ceil(len(samples) / cfg.batch_size)
    if total_steps is None:
        total_steps = cfg.epochs * steps_per_epoch
    tensors = [p for _, p in params]
    step = step_offset
    t0 = time.time()
    for epoch in range(epoch_offset, epoch_offset + cfg.epochs):
        order = _order_samples(samples, cfg, epoch)
        for b0 in range(0, len(order), cfg.batch_size):
            batch_samples = [samples[i] for i in order[b0:b0 + cfg.batch_size]]
            batch = build_batch(batch_samples, tok, model.config.max_seq_len)
            model.registry.zero_grads()
            with T.tape():
                logits = model.forward(batch.tokens)
                nll = masked_nll_loss(logits, batch.tokens, batch.loss_mask)
                if use_orth:
                    orth = orth_loss(model)
                    total = nll + cfg.lambda_orth * orth
                    orth_v = orth.item()
                else:
                    total = nll
                    orth_v = 0.0
                T.backward(total, params=tensors)
            if cfg.grad_clip is not None:
                _clip_grads(params, cfg.grad_clip)
            lr = cosine_warmup_lr(step, total_steps, cfg.peak_lr, cfg.warmup_ratio)
            opt.step(lr)
            report.steps.append({"step": step, "lr": lr, "nll": nll.item(),
                                 "orth": orth_v, "total": total.item()})
            step += 1
    report.wall_seconds += time.time() - t0
    return report


def eval_nll(model: Model, samples: list[Sample], batch_size: int = 32) -> float:
    tok = Tokenizer()
    tot, cnt = 0.0, 0
    with T.no_grad():
        for b0 in range(0, len(samples), batch_size):
            batch = build_batch(samples[b0:b0 + batch_size], tok, model.config.max_seq_len)
            logits = model.forward(batch.tokens)
            n = int(batch.loss_mask.sum())
            tot += masked_nll_loss(logits, batch.tokens, batch.loss_mask).item() * n
            cnt += n
    return tot / cnt


# -- stage drivers ------------------------------------------------------------

def run_pretrain(cfg: TrainConfig, model_cfg: ModelConfig, corpus: list[Sample],
                 heldout: list[Sample]) -> tuple[Model, StageReport]:
    """Full-parameter training of a fresh base until held-out NLL clears the
    configured threshold; everything is frozen afterward."""
    model = init_base(model_cfg, seed=cfg.seed)
    for name in model.registry.names():
        model.registry.set_trainable(name, True)
    report = StageReport(stage="pretrain", seed=cfg.seed,
                         config_hash=config_hash({"train": asdict(cfg), "model": asdict(model_cfg)}))
    loop_cfg = TrainConfig(**{**asdict(cfg), "stage": "pretrain", "epochs": 1})
    steps_per_epoch = math.ceil(len(corpus) / cfg.batch_size)
    total_steps = cfg.pretrain_max_epochs * steps_per_epoch
    opt = AdamW(model.registry.trainable_items(), lr=cfg.peak_lr)
    for epoch in range(cfg.pretrain_max_epochs):
        train_loop(model, corpus, loop_cfg, use_orth=False, report=report,
                   opt=opt, total_steps=total_steps,
                   step_offset=epoch * steps_per_epoch, epoch_offset=epoch)
        held_nll = eval_nll(model, heldout)
        report.final_metrics["heldout_nll"] = held_nll
        report.final_metrics["epochs_run"] = epoch + 1
        if held_nll < cfg.pretrain_target_nll:
            break
    model.registry.freeze_all()
    return model, report


def run_mka(cfg: TrainConfig, base_model: Model, mixed_data: list[Sample]
            ) -> tuple[Model, StageReport]:
    """Attach ka+na (FFN) and plain LoRA (attention) to the frozen base and
    train them on the mixed-genre corpus with the NLL objective."""
    model = attach_mka_adapters(base_model, cfg.adapter, seed=cfg.seed)
    report = StageReport(stage="mka", seed=cfg.seed,
                         config_hash=config_hash({"train": asdict(cfg), "model": asdict(model.config)}))
    cfg = TrainConfig(**{**asdict(cfg), "stage": "mka"})
    train_loop(model, mixed_data, cfg, use_orth=False, report=report)
    return model, report


def run_da(cfg: TrainConfig, stripped_model: Model, align_data: list[Sample]
           ) -> tuple[Model, StageReport]:
    """Attach the zero-delta align adapter and train ka + align on alignment
    data with NLL + lambda * orthogonal loss."""
    if any("na" in s.adapters for s in stripped_model.ffn_slots()):
        raise StateError("input model still carries na adapters; strip first")
    model = attach_align(stripped_model, seed=cfg.seed)
    report = StageReport(stage="da", seed=cfg.seed,
                         config_hash=config_hash({"train": asdict(cfg), "model": asdict(model.config)}))
    cfg = TrainConfig(**{**asdict(cfg), "stage": "da"})
    train_loop(model, align_data, cfg, use_orth=True, report=report)
    return model, report
