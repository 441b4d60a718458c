"""Finite-difference verification of the full stage objectives on a tiny
model, run in float64 (central differences are unreliable in float32)."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Rng
from .model import ModelConfig, init_base
from .adapters import (AdapterConfig, attach_mka_adapters, strip_na,
                       merge_attention_lora, attach_align)
from .data import Tokenizer, Sample, build_batch
from .training import masked_nll_loss, orth_loss

CHECK_MODEL = ModelConfig(d=8, n_layers=1, n_heads=2, vocab_size=40,
                          max_seq_len=32, seed=11)
CHECK_ADAPTER = AdapterConfig(rank=2, alpha=4.0, shared_experts=2, n_experts=4, top_k=2)

_SAMPLES = [Sample(input="ab cd", target="ef", task="alignment"),
            Sample(input="ghi", target="jk", task="alignment")]


def _small_tokens():
    tok = Tokenizer()
    # squeeze byte ids into the tiny vocab
    batch = build_batch(_SAMPLES, tok, CHECK_MODEL.max_seq_len)
    tokens = batch.tokens % (CHECK_MODEL.vocab_size - 4)
    tokens[batch.tokens >= 256] = CHECK_MODEL.vocab_size - 4 + (batch.tokens[batch.tokens >= 256] - 256)
    return tokens, batch.loss_mask


def _randomize(model, seed, std=0.05):
    rng = Rng(seed).child("gradcheck")
    for name, t in model.registry.trainable_items():
        t.data = t.data + rng.child(name).normal(t.data.shape, std=std, dtype=t.data.dtype)


def build_check_model(stage: str, lam: float = 1.0):
    """Tiny float64 model with randomized adapters plus its loss closure."""
    base = init_base(CHECK_MODEL, dtype=np.float64)
    tokens, mask = _small_tokens()
    if stage == "mka":
        model = attach_mka_adapters(base, CHECK_ADAPTER, seed=5)
        _randomize(model, seed=17)

        def loss_fn():
            return masked_nll_loss(model.forward(tokens), tokens, mask)
    elif stage == "da":
        model = attach_mka_adapters(base, CHECK_ADAPTER, seed=5)
        _randomize(model, seed=17)
        model = merge_attention_lora(strip_na(model))
        model = attach_align(model, seed=23)
        _randomize(model, seed=29)

        def loss_fn():
            nll = masked_nll_loss(model.forward(tokens), tokens, mask)
            return nll + lam * orth_loss(model)
    else:
        raise ValueError(f"unknown gradcheck stage '{stage}'")
    return model, loss_fn


def max_rel_error(model, loss_fn, eps: float = 1e-5, floor: float = 1e-6) -> float:
    """Max elementwise relative error between backward() and central
    differences over every trainable parameter; near-zero entries compare
    against an absolute floor."""
    params = model.registry.trainable_items()
    tensors = [t for _, t in params]
    model.registry.zero_grads()
    with T.tape():
        loss = loss_fn()
        T.backward(loss, params=tensors)
    analytic = [t.grad.copy() for t in tensors]

    def f():
        return loss_fn().item()

    numeric = T.finite_diff_grad(f, tensors, eps=eps)
    worst = 0.0
    for ga, gn in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(ga), np.abs(gn)), floor)
        worst = max(worst, float(np.max(np.abs(ga - gn) / denom)))
    return worst


def run_gradcheck(eps: float = 1e-5) -> dict:
    out = {}
    for stage in ("mka", "da"):
        model, loss_fn = build_check_model(stage)
        out[stage] = max_rel_error(model, loss_fn, eps=eps)
    return out
