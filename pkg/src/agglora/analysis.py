"""Evaluation metrics and ablation machinery: option-likelihood accuracy,
strict-format micro-F1, routing activation statistics, forced expert pairs,
and the two-parallel-LoRA baseline."""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import tensor as T
from .tensor import StateError
from .model import Model
from .adapters import AdapterConfig, MoLoraAdapter, attach_parallel_lora, drop_one  # noqa: F401
from .data import (Tokenizer, Sample, build_batch, encode_sample, parse_brackets,
                   BOS, EOS, SEP)


class MetricError(Exception):
    pass


# -- likelihood scoring -------------------------------------------------------

def target_loglik(model: Model, samples: list[Sample], batch_size: int = 64) -> np.ndarray:
    """Total log-likelihood of each sample's target span (target bytes + EOS)."""
    tok = Tokenizer()
    out = np.zeros(len(samples))
    with T.no_grad():
        for b0 in range(0, len(samples), batch_size):
            chunk = samples[b0:b0 + batch_size]
            batch = build_batch(chunk, tok, model.config.max_seq_len)
            logits = model.forward(batch.tokens).data
            lp = logits - logits.max(axis=-1, keepdims=True)
            lp = lp - np.log(np.exp(lp).sum(axis=-1, keepdims=True))
            tgt = np.zeros(batch.tokens.shape, dtype=np.int64)
            tgt[:, :-1] = batch.tokens[:, 1:]
            pred_mask = np.zeros_like(batch.loss_mask)
            pred_mask[:, :-1] = batch.loss_mask[:, 1:]
            token_lp = np.take_along_axis(lp, tgt[..., None], axis=-1)[..., 0]
            out[b0:b0 + len(chunk)] = (token_lp * pred_mask).sum(axis=1)
    return out


def eval_mc_accuracy(model: Model, samples: list[Sample]) -> float:
    """Accuracy of argmax-likelihood option selection."""
    if not samples:
        raise MetricError("empty sample list")
    scored: list[Sample] = []
    for s in samples:
        if not s.options:
            raise MetricError("sample without options cannot be scored")
        scored.extend(Sample(input=s.input, target=o, task=s.task) for o in s.options)
    ll = target_loglik(model, scored)
    correct = 0
    pos = 0
    for s in samples:
        k = len(s.options)
        pick = int(np.argmax(ll[pos:pos + k]))
        correct += s.options[pick] == s.target
        pos += k
    return correct / len(samples)


# -- greedy decoding and format scoring ---------------------------------------

def greedy_decode(model: Model, prompt_ids: list[int], max_new: int) -> list[int]:
    ids = list(prompt_ids)
    out = []
    with T.no_grad():
        for _ in range(max_new):
            if len(ids) >= model.config.max_seq_len:
                break
            logits = model.forward(np.asarray([ids], dtype=np.int32)).data[0, -1]
            nxt = int(np.argmax(logits))
            if nxt == EOS:
                break
            ids.append(nxt)
            out.append(nxt)
    return out


def eval_format_score(model: Model, samples: list[Sample], max_new: int = 64) -> float:
    """Micro-F1 over (type, span) pairs of greedy-decoded vs gold brackets.

    Unparseable predictions contribute zero matches; they never raise.
    """
    tok = Tokenizer()
    tp = fp = fn = 0
    for s in samples:
        prompt = [BOS] + tok.tokenize(s.input) + [SEP]
        pred_ids = greedy_decode(model, prompt, max_new)
        pred = Counter(parse_brackets(tok.detokenize(pred_ids)))
        gold = Counter(parse_brackets(s.target))
        inter = sum((pred & gold).values())
        tp += inter
        fp += sum(pred.values()) - inter
        fn += sum(gold.values()) - inter
    if tp + fp + fn == 0:
        return 1.0
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


# -- routing analysis ---------------------------------------------------------

@dataclass
class ActivationMatrix:
    counts: np.ndarray  # E x E symmetric unordered pair co-selection counts

    def total(self) -> int:
        iu = np.triu_indices(self.counts.shape[0])
        return int(self.counts[iu].sum())

    def to_csv(self, path: str):
        np.savetxt(path, self.counts, fmt="%.6f", delimiter=",")

    def render(self) -> str:
        e = self.counts.shape[0]
        rows = ["\t".join(str(int(self.counts[i, j])) for j in range(e)) for i in range(e)]
        return "\n".join(rows)


@dataclass
class PairPerformanceMatrix:
    values: np.ndarray  # E x E symmetric accuracies

    def to_csv(self, path: str):
        np.savetxt(path, self.values, fmt="%.6f", delimiter=",")


def _molora_adapters(model: Model) -> list[MoLoraAdapter]:
    ads = [s.adapters["na"] for s in model.ffn_slots() if "na" in s.adapters]
    if not ads:
        raise StateError("model carries no routed na adapters (already stripped?)")
    return ads


def route_stats(model: Model, samples: list[Sample], batch_size: int = 64) -> ActivationMatrix:
    """Unordered expert-pair co-selection counts over every non-pad token of
    every adapted FFN slot."""
    ads = _molora_adapters(model)
    e = ads[0].n_experts
    counts = np.zeros((e, e), dtype=np.int64)
    tok = Tokenizer()
    with T.no_grad():
        for b0 in range(0, len(samples), batch_size):
            batch = build_batch(samples[b0:b0 + batch_size], tok, model.config.max_seq_len)
            model.forward(batch.tokens)
            valid = batch.tokens != tok.PAD  # right-padding only
            for ad in ads:
                sel = ad.last_selected[valid]  # (n_valid, K)
                k = sel.shape[-1]
                for a in range(k):
                    for b in range(a + 1, k):
                        np.add.at(counts, (sel[:, a], sel[:, b]), 1)
    counts = counts + counts.T - np.diag(np.diag(counts))
    return ActivationMatrix(counts=counts)


def forced_pair_eval(model: Model, samples: list[Sample], i: int, j: int,
                     renormalize: bool = True) -> float:
    """Accuracy with routing overridden to always select experts {i, j}."""
    ads = _molora_adapters(model)
    e = ads[0].n_experts
    if i == j:
        raise ValueError("forced pair needs two distinct experts")
    if not (0 <= i < j < e):
        raise ValueError(f"need 0 <= i < j < {e}, got ({i}, {j})")
    try:
        for ad in ads:
            ad.forced_pair = (i, j)
            ad.forced_renormalize = renormalize
        return eval_mc_accuracy(model, samples)
    finally:
        for ad in ads:
            ad.forced_pair = None


def pair_performance(model: Model, samples: list[Sample],
                     renormalize: bool = True) -> PairPerformanceMatrix:
    e = _molora_adapters(model)[0].n_experts
    values = np.zeros((e, e))
    for i in range(e):
        for j in range(i + 1, e):
            acc = forced_pair_eval(model, samples, i, j, renormalize=renormalize)
            values[i, j] = values[j, i] = acc
    return PairPerformanceMatrix(values=values)


def routing_mismatch_report(activation: ActivationMatrix,
                            performance: PairPerformanceMatrix) -> dict:
    """Spearman rank correlation between pair activation counts and forced-pair
    accuracy; measured, not asserted."""
    e = activation.counts.shape[0]
    iu = np.triu_indices(e, k=1)
    act = activation.counts[iu].astype(float)
    perf = performance.values[iu]
    rho, p = stats.spearmanr(act, perf)
    return {"n_pairs": int(len(act)), "spearman_rho": float(rho),
            "p_value": float(p),
            "most_activated_pair": [int(x) for x in np.unravel_index(
                np.argmax(np.triu(activation.counts, k=1)), activation.counts.shape)],
            "best_pair": [int(x) for x in np.unravel_index(
                np.argmax(np.triu(performance.values, k=1)), performance.values.shape)]}


def build_parallel_lora_baseline(base_model: Model, cfg: AdapterConfig,
                                 seed: int) -> Model:
    """Two always-active rank-r' FFN LoRAs (no router) plus attention LoRA."""
    return attach_parallel_lora(base_model, cfg, seed)


def write_matrix_summary(path: str, report: dict):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2)
        f.write("\n")
