"""Low-rank adapter algebra: plain LoRA, routed mixture-of-LoRA, the shared
knowledge aggregator (ka) / routed noise aggregator (na) pair, the alignment
adapter, stripping, and merge-back into base weights.

Stage order enforced here: base -> mka -> stripped (-> attention merge) -> da
-> merged.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor, Rng, StateError, ShapeError
from .model import Model, FFN_KINDS, ATTN_KINDS


class ConfigError(Exception):
    pass


@dataclass
class AdapterConfig:
    rank: int = 4           # expert / attention LoRA rank r
    alpha: float = 8.0      # scale numerator; alpha/rank kept at 2
    shared_experts: int = 2  # s; ka rank r' = s * r
    n_experts: int = 8      # E
    top_k: int = 2          # K
    renormalize_topk: bool = False  # raw softmax gate values by default

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError("rank must be >= 1")
        if not (1 <= self.top_k <= self.n_experts):
            raise ConfigError(f"top_k={self.top_k} out of range [1, {self.n_experts}]")

    @property
    def ka_rank(self) -> int:
        return self.shared_experts * self.rank


class LoraAdapter:
    """Trainable low-rank delta: scale * x @ A @ B with scale = alpha/rank."""

    def __init__(self, A: Tensor, B: Tensor, rank: int, alpha: float):
        self.A = A
        self.B = B
        self.rank = rank
        self.alpha = alpha

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def delta(self, x: Tensor) -> Tensor:
        return T.matmul(T.matmul(x, self.A), self.B) * self.scale

    def delta_weight(self) -> np.ndarray:
        return self.scale * (self.A.data @ self.B.data)

    def tensors(self) -> dict:
        return {"A": self.A, "B": self.B}

    def describe(self) -> dict:
        return {"type": "lora", "rank": self.rank, "alpha": self.alpha}


class MoLoraAdapter:
    """E rank-r LoRA experts gated per token by a softmax router, top-K selected.

    Selected gate values are used raw (not renormalized over the top-K set)
    unless renormalize is set. The selected index sets of the latest forward
    are kept for routing analysis.
    """

    def __init__(self, experts: list[LoraAdapter], router: Tensor, top_k: int,
                 renormalize: bool = False):
        if not (1 <= top_k <= len(experts)):
            raise ConfigError(f"top_k={top_k} out of range [1, {len(experts)}]")
        self.experts = experts
        self.router = router
        self.top_k = top_k
        self.renormalize = renormalize
        self.last_selected: np.ndarray | None = None  # (..., K) sorted indices
        self.forced_pair: tuple[int, int] | None = None
        # forcing a low-affinity pair with raw softmax mass measures nothing,
        # so forced pairs renormalize over the pair by default
        self.forced_renormalize = True

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    def gate_values(self, x: Tensor) -> Tensor:
        return T.softmax_lastdim(T.matmul(x, self.router))

    def delta(self, x: Tensor) -> Tensor:
        gates = self.gate_values(x)
        if self.forced_pair is not None:
            i, j = self.forced_pair
            mask = np.zeros(gates.shape, dtype=gates.data.dtype)
            mask[..., i] = 1.0
            mask[..., j] = 1.0
            sel = np.broadcast_to(np.array([i, j]), gates.shape[:-1] + (2,))
            renorm = self.forced_renormalize
        else:
            # stable argsort: ties broken toward the lower expert index
            order = np.argsort(-gates.data, axis=-1, kind="stable")
            sel = np.sort(order[..., :self.top_k], axis=-1)
            mask = np.zeros(gates.shape, dtype=gates.data.dtype)
            np.put_along_axis(mask, sel, 1.0, axis=-1)
            renorm = self.renormalize
        self.last_selected = sel
        gated = gates * Tensor(mask)
        if renorm:
            gated = gated * (T.tsum(gated, axis=-1, keepdims=True) ** -1.0)
        out = None
        for i, ex in enumerate(self.experts):
            term = ex.delta(x) * T.slice_lastdim(gated, i)
            out = term if out is None else out + term
        return out

    def tensors(self) -> dict:
        d = {"router": self.router}
        for i, ex in enumerate(self.experts):
            d[f"expert{i}.A"] = ex.A
            d[f"expert{i}.B"] = ex.B
        return d

    def describe(self) -> dict:
        return {"type": "molora", "rank": self.experts[0].rank,
                "alpha": self.experts[0].alpha, "n_experts": len(self.experts),
                "top_k": self.top_k, "renormalize": self.renormalize}


def lora_init(d_in: int, d_out: int, rank: int, alpha: float, rng: Rng,
              dtype=np.float32) -> LoraAdapter:
    """A ~ N(0, 0.02^2), B = 0 so the delta is exactly zero at creation."""
    if rank < 1:
        raise ConfigError("rank must be >= 1")
    if rank > min(d_in, d_out):
        raise ConfigError(f"rank {rank} exceeds min(d_in, d_out) = {min(d_in, d_out)}")
    A = Tensor(rng.child("A").normal((d_in, rank), std=0.02, dtype=dtype))
    B = Tensor(np.zeros((rank, d_out), dtype=dtype))
    return LoraAdapter(A, B, rank, alpha)


def molora_init(d_in: int, d_out: int, cfg: AdapterConfig, rng: Rng,
                dtype=np.float32) -> MoLoraAdapter:
    experts = [lora_init(d_in, d_out, cfg.rank, cfg.alpha, rng.child(f"expert{i}"), dtype)
               for i in range(cfg.n_experts)]
    router = Tensor(rng.child("router").normal((d_in, cfg.n_experts), std=0.02, dtype=dtype))
    return MoLoraAdapter(experts, router, cfg.top_k, renormalize=cfg.renormalize_topk)


# -- spec-level forward helpers ----------------------------------------------

def lora_forward(x: Tensor, W: Tensor, adapter: LoraAdapter) -> Tensor:
    return T.matmul(x, W) + adapter.delta(x)


def molora_forward(x: Tensor, W: Tensor, molora: MoLoraAdapter) -> Tensor:
    return T.matmul(x, W) + molora.delta(x)


def composite_forward_mka(x: Tensor, W: Tensor, ka: LoraAdapter,
                          na: MoLoraAdapter | None, align=None) -> Tensor:
    if align is not None:
        raise StateError("align adapter present during the aggregation stage")
    if na is None:
        raise StateError("aggregation-stage forward requires the routed na adapter")
    return T.matmul(x, W) + ka.delta(x) + na.delta(x)


def composite_forward_da(x: Tensor, W: Tensor, ka: LoraAdapter,
                         align: LoraAdapter | None, na=None) -> Tensor:
    if na is not None:
        raise StateError("na adapter still present during the alignment stage")
    if align is None:
        raise StateError("alignment-stage forward requires the align adapter")
    return T.matmul(x, W) + ka.delta(x) + align.delta(x)


# -- attachment / registry wiring --------------------------------------------

def _register_adapter(model: Model, slot_name: str, key: str, adapter, trainable=True):
    model.slots[slot_name].adapters[key] = adapter
    for tname, t in adapter.tensors().items():
        model.registry.add(f"{slot_name}.{key}.{tname}", t, trainable=trainable)


def _remove_adapter(model: Model, slot_name: str, key: str):
    del model.slots[slot_name].adapters[key]
    model.registry.remove_prefix(f"{slot_name}.{key}")


def attach_mka_adapters(model: Model, cfg: AdapterConfig, seed: int) -> Model:
    """ka (rank s*r) + na (E routed rank-r experts) on every FFN linear, plain
    LoRA (rank r) on every attention projection."""
    if model.stage != "base":
        raise StateError(f"aggregation adapters attach to a base model, not stage '{model.stage}'")
    rng = Rng(seed).child("adapters")
    for slot in model.ffn_slots():
        d_in, d_out = slot.W.shape
        ka = lora_init(d_in, d_out, cfg.ka_rank, cfg.alpha, rng.child(slot.name + "/ka"), model.dtype)
        na = molora_init(d_in, d_out, cfg, rng.child(slot.name + "/na"), model.dtype)
        _register_adapter(model, slot.name, "ka", ka)
        _register_adapter(model, slot.name, "na", na)
    for slot in model.attn_slots():
        d_in, d_out = slot.W.shape
        lora = lora_init(d_in, d_out, cfg.rank, cfg.alpha, rng.child(slot.name + "/attn_lora"), model.dtype)
        _register_adapter(model, slot.name, "attn_lora", lora)
    model.adapter_config = cfg
    model.stage = "mka"
    return model


def strip_na(model: Model) -> Model:
    """Drop the routed na adapters, keeping only the shared ka."""
    if model.stage != "mka" or not any("na" in s.adapters for s in model.ffn_slots()):
        raise StateError(f"strip_na needs a post-aggregation model with na attached (stage '{model.stage}')")
    for slot in model.ffn_slots():
        _remove_adapter(model, slot.name, "na")
    model.stage = "stripped"
    return model


def merge_attention_lora(model: Model) -> Model:
    """Fold attention LoRA deltas into the base weights and freeze them."""
    if not any("attn_lora" in s.adapters for s in model.attn_slots()):
        raise StateError("no attention LoRA adapters to merge")
    for slot in model.attn_slots():
        lora = slot.adapters["attn_lora"]
        slot.W.data = slot.W.data + lora.delta_weight()
        _remove_adapter(model, slot.name, "attn_lora")
        slot.W.requires_grad = False
    model.attn_merged = True
    return model


def attach_align(model: Model, seed: int) -> Model:
    """Fresh zero-delta align adapter (rank s*r) on every FFN linear; ka stays
    trainable."""
    if model.stage != "stripped":
        raise StateError(f"align attaches to a stripped model, not stage '{model.stage}'")
    if not model.attn_merged:
        raise StateError("attention LoRA must be merged back before the alignment stage")
    cfg = model.adapter_config
    rng = Rng(seed).child("align")
    for slot in model.ffn_slots():
        d_in, d_out = slot.W.shape
        align = lora_init(d_in, d_out, cfg.ka_rank, cfg.alpha, rng.child(slot.name), model.dtype)
        _register_adapter(model, slot.name, "align", align)
    model.stage = "da"
    return model


def merge_final(model: Model) -> Model:
    """W' = W + (alpha/r') Ak Bk + (alpha/r') Ad Bd on every FFN linear; the
    result carries zero adapter parameters."""
    if model.stage == "merged":
        raise StateError("model already merged")
    if any("na" in s.adapters for s in model.ffn_slots()):
        raise StateError("na adapters still attached; strip before merging")
    if model.stage != "da":
        raise StateError(f"final merge needs a post-alignment model, not stage '{model.stage}'")
    for slot in model.ffn_slots():
        ka = slot.adapters["ka"]
        align = slot.adapters["align"]
        slot.W.data = slot.W.data + ka.delta_weight() + align.delta_weight()
        _remove_adapter(model, slot.name, "ka")
        _remove_adapter(model, slot.name, "align")
    model.registry.freeze_all()
    model.stage = "merged"
    return model


# -- parallel-LoRA baseline ---------------------------------------------------

def attach_parallel_lora(model: Model, cfg: AdapterConfig, seed: int) -> Model:
    """Two independent always-active rank-r' LoRAs on every FFN linear plus the
    standard attention LoRA; the ablation baseline for the routed pair."""
    if model.stage != "base":
        raise StateError(f"baseline attaches to a base model, not stage '{model.stage}'")
    rng = Rng(seed).child("adapters")
    for slot in model.ffn_slots():
        d_in, d_out = slot.W.shape
        for key in ("lora1", "lora2"):
            ad = lora_init(d_in, d_out, cfg.ka_rank, cfg.alpha, rng.child(f"{slot.name}/{key}"), model.dtype)
            _register_adapter(model, slot.name, key, ad)
    for slot in model.attn_slots():
        d_in, d_out = slot.W.shape
        lora = lora_init(d_in, d_out, cfg.rank, cfg.alpha, rng.child(slot.name + "/attn_lora"), model.dtype)
        _register_adapter(model, slot.name, "attn_lora", lora)
    model.adapter_config = cfg
    model.stage = "mka"
    return model


class drop_one:
    """Context manager zeroing one of the parallel baseline adapters."""

    def __init__(self, model: Model, which: int):
        if which not in (1, 2):
            raise ConfigError("which must be 1 or 2")
        self.model = model
        self.key = f"lora{which}"
        self._saved: list[tuple] = []

    def __enter__(self):
        for slot in self.model.ffn_slots():
            ad = slot.adapters[self.key]
            self._saved.append((ad, ad.B.data))
            ad.B.data = np.zeros_like(ad.B.data)
        return self.model

    def __exit__(self, *exc):
        for ad, b in self._saved:
            ad.B.data = b
        return False


# -- serialization support ----------------------------------------------------

def describe_adapters(model: Model) -> dict:
    out = {}
    for name, slot in model.slots.items():
        if slot.adapters:
            out[name] = {key: ad.describe() for key, ad in slot.adapters.items()}
    return out


def rebuild_adapters(model: Model, desc: dict):
    """Recreate adapter objects (zero weights) from a description; the caller
    then loads tensor values by name."""
    for slot_name, ads in desc.items():
        slot = model.slots[slot_name]
        d_in, d_out = slot.W.shape
        for key, d in ads.items():
            if d["type"] == "lora":
                A = Tensor(np.zeros((d_in, d["rank"]), dtype=model.dtype))
                B = Tensor(np.zeros((d["rank"], d_out), dtype=model.dtype))
                ad = LoraAdapter(A, B, d["rank"], d["alpha"])
            elif d["type"] == "molora":
                experts = []
                for _ in range(d["n_experts"]):
                    A = Tensor(np.zeros((d_in, d["rank"]), dtype=model.dtype))
                    B = Tensor(np.zeros((d["rank"], d_out), dtype=model.dtype))
                    experts.append(LoraAdapter(A, B, d["rank"], d["alpha"]))
                router = Tensor(np.zeros((d_in, d["n_experts"]), dtype=model.dtype))
                ad = MoLoraAdapter(experts, router, d["top_k"], d.get("renormalize", False))
            else:
                raise StateError(f"unknown adapter type {d['type']}")
            _register_adapter(model, slot_name, key, ad, trainable=False)
