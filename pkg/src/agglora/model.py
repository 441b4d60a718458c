"""Small decoder-only transformer with SiLU-gated FFN and adapter slots.

The base model is deliberately tiny (CPU-minutes training). Every linear in
attention and FFN is routed through an AdapterSlot so low-rank adapter deltas
can be attached, stripped, and merged without touching the forward code.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor, Rng, StateError


class VocabError(Exception):
    pass


class LengthError(Exception):
    pass


NORM_EPS = 1e-6
MASK_NEG = -1e30  # large enough that score + MASK_NEG == MASK_NEG exactly

ATTN_KINDS = ("attn_q", "attn_k", "attn_v", "attn_o")
FFN_KINDS = ("ffn_gate", "ffn_up", "ffn_down")


@dataclass
class ModelConfig:
    d: int = 64
    n_layers: int = 2
    n_heads: int = 4
    vocab_size: int = 260
    max_seq_len: int = 128
    d_ff: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.d % self.n_heads != 0:
            raise ValueError(f"d={self.d} not divisible by n_heads={self.n_heads}")
        if self.vocab_size < 4:
            raise ValueError("vocab_size must reserve room for specials (>= 4)")
        if self.d_ff is None:
            d_ff = math.ceil(8 * self.d / 3)
            self.d_ff = d_ff + (d_ff % 2)
        if self.d_ff < self.d:
            raise ValueError(f"d_ff={self.d_ff} smaller than d={self.d}")


class ParameterRegistry:
    """Ordered name -> Tensor map; trainable flag lives on the tensor."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, t: Tensor, trainable: bool = False) -> Tensor:
        if name in self._params:
            raise StateError(f"duplicate parameter name: {name}")
        t.requires_grad = trainable
        self._params[name] = t
        return t

    def remove_prefix(self, prefix: str) -> list[str]:
        victims = [n for n in self._params if n == prefix or n.startswith(prefix + ".")]
        for n in victims:
            del self._params[n]
        return victims

    def remove(self, name: str):
        del self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __getitem__(self, name) -> Tensor:
        return self._params[name]

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def trainable_items(self):
        return [(n, t) for n, t in self._params.items() if t.requires_grad]

    def trainable_tensors(self) -> list[Tensor]:
        return [t for _, t in self.trainable_items()]

    def set_trainable(self, name: str, flag: bool):
        self._params[name].requires_grad = flag

    def freeze_all(self):
        for t in self._params.values():
            t.requires_grad = False

    def zero_grads(self):
        for t in self._params.values():
            t.grad = None

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self._params.values())


@dataclass
class AdapterSlot:
    """A named base linear weight with attachable adapter deltas.

    Adapters are keyed ("attn_lora", "ka", "na", "align", "lora1", "lora2")
    and contribute additively via their .delta(x).
    """

    name: str
    kind: str
    W: Tensor
    adapters: dict = field(default_factory=dict)

    def forward(self, x: Tensor) -> Tensor:
        if "na" in self.adapters and "align" in self.adapters:
            raise StateError(f"slot {self.name}: na and align attached simultaneously")
        out = T.matmul(x, self.W)
        for ad in self.adapters.values():
            out = out + ad.delta(x)
        return out


def rms_norm(x: Tensor, g: Tensor) -> Tensor:
    ms = T.tmean(x * x, axis=-1, keepdims=True)
    return x * ((ms + NORM_EPS) ** -0.5) * g


class Model:
    def __init__(self, config: ModelConfig, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        self.registry = ParameterRegistry()
        self.slots: dict[str, AdapterSlot] = {}
        self.stage = "base"
        self.attn_merged = False
        self.adapter_config = None  # set when adapters attach

    # -- construction ------------------------------------------------------

    def _add_slot(self, name: str, kind: str, w: np.ndarray):
        t = self.registry.add(name + ".W", Tensor(w))
        self.slots[name] = AdapterSlot(name=name, kind=kind, W=t)

    def slots_of_kind(self, kinds) -> list[AdapterSlot]:
        return [s for s in self.slots.values() if s.kind in kinds]

    def ffn_slots(self) -> list[AdapterSlot]:
        return self.slots_of_kind(FFN_KINDS)

    def attn_slots(self) -> list[AdapterSlot]:
        return self.slots_of_kind(ATTN_KINDS)

    # -- forward -----------------------------------------------------------

    def forward(self, tokens: np.ndarray) -> Tensor:
        """tokens: int array (batch, m) or (m,) -> logits (batch, m, vocab)."""
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        m = tokens.shape[1]
        cfg = self.config
        if m > cfg.max_seq_len:
            raise LengthError(f"sequence length {m} exceeds max_seq_len {cfg.max_seq_len}")
        if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
            raise VocabError(f"token id out of range [0, {cfg.vocab_size})")

        reg = self.registry
        x = T.embedding(reg["embed.tok"], tokens) + T.embedding(reg["embed.pos"], np.arange(m))
        for i in range(cfg.n_layers):
            h = rms_norm(x, reg[f"layer{i}.attn_norm.g"])
            x = x + self._attention(h, i, m)
            h = rms_norm(x, reg[f"layer{i}.ffn_norm.g"])
            x = x + self._ffn(h, i)
        x = rms_norm(x, reg["final_norm.g"])
        return T.matmul(x, T.transpose(reg["embed.tok"]))

    def _attention(self, x: Tensor, layer: int, m: int) -> Tensor:
        cfg = self.config
        nh, dh = cfg.n_heads, cfg.d // cfg.n_heads
        b = x.shape[0]

        def heads(t):
            return T.transpose(T.reshape(t, (b, m, nh, dh)), (0, 2, 1, 3))

        q = heads(self.slots[f"layer{layer}.attn.q"].forward(x))
        k = heads(self.slots[f"layer{layer}.attn.k"].forward(x))
        v = heads(self.slots[f"layer{layer}.attn.v"].forward(x))

        scores = T.matmul(q, T.transpose(k)) * (1.0 / math.sqrt(dh))
        mask = np.where(np.tril(np.ones((m, m), dtype=bool)), 0.0, MASK_NEG).astype(x.dtype)
        att = T.softmax_lastdim(scores + Tensor(mask))
        out = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (b, m, cfg.d))
        return self.slots[f"layer{layer}.attn.o"].forward(out)

    def _ffn(self, x: Tensor, layer: int) -> Tensor:
        gate = self.slots[f"layer{layer}.ffn.gate"].forward(x)
        up = self.slots[f"layer{layer}.ffn.up"].forward(x)
        return self.slots[f"layer{layer}.ffn.down"].forward(up * T.silu(gate))

    # -- dtype / cloning ---------------------------------------------------

    def astype(self, dtype) -> "Model":
        from .adapters import rebuild_adapters, describe_adapters
        state = self.state()
        state["tensors"] = {n: a.astype(dtype) for n, a in state["tensors"].items()}
        return Model.from_state(state, dtype=dtype)

    def clone(self) -> "Model":
        return self.astype(self.dtype)

    def state(self) -> dict:
        from dataclasses import asdict
        from .adapters import describe_adapters
        return {
            "config": asdict(self.config),
            "adapter_config": asdict(self.adapter_config) if self.adapter_config else None,
            "stage": self.stage,
            "attn_merged": self.attn_merged,
            "adapters": describe_adapters(self),
            "tensors": {n: t.data.copy() for n, t in self.registry.items()},
            "trainable": {n: bool(t.requires_grad) for n, t in self.registry.items()},
        }

    @staticmethod
    def from_state(state: dict, dtype=None) -> "Model":
        from .adapters import rebuild_adapters, AdapterConfig
        cfg = ModelConfig(**state["config"])
        if dtype is None:
            any_t = next(iter(state["tensors"].values()))
            dtype = any_t.dtype
        model = Model(cfg, dtype=dtype)
        _build_structure(model, init=False)
        model.stage = state["stage"]
        model.attn_merged = state.get("attn_merged", False)
        if state.get("adapter_config"):
            model.adapter_config = AdapterConfig(**state["adapter_config"])
        rebuild_adapters(model, state["adapters"])
        for name, arr in state["tensors"].items():
            if name not in model.registry:
                raise StateError(f"unknown tensor in state: {name}")
            t = model.registry[name]
            if t.data.shape != arr.shape:
                raise StateError(f"shape mismatch for {name}: {t.data.shape} vs {arr.shape}")
            t.data = np.asarray(arr, dtype=dtype)
        for name, flag in state["trainable"].items():
            model.registry.set_trainable(name, flag)
        return model


def _build_structure(model: Model, init: bool, rng: Rng | None = None):
    """Create registry entries and slots; Gaussian init when init=True."""
    cfg = model.config
    dtype = model.dtype

    def w(name, shape):
        if init:
            return rng.child("init/" + name).normal(shape, std=0.02, dtype=dtype)
        return np.zeros(shape, dtype=dtype)

    reg = model.registry
    reg.add("embed.tok", Tensor(w("embed.tok", (cfg.vocab_size, cfg.d))))
    reg.add("embed.pos", Tensor(w("embed.pos", (cfg.max_seq_len, cfg.d))))
    for i in range(cfg.n_layers):
        p = f"layer{i}"
        reg.add(f"{p}.attn_norm.g", Tensor(np.ones(cfg.d, dtype=dtype)))
        for proj in ("q", "k", "v", "o"):
            model._add_slot(f"{p}.attn.{proj}", f"attn_{proj}", w(f"{p}.attn.{proj}", (cfg.d, cfg.d)))
        reg.add(f"{p}.ffn_norm.g", Tensor(np.ones(cfg.d, dtype=dtype)))
        model._add_slot(f"{p}.ffn.gate", "ffn_gate", w(f"{p}.ffn.gate", (cfg.d, cfg.d_ff)))
        model._add_slot(f"{p}.ffn.up", "ffn_up", w(f"{p}.ffn.up", (cfg.d, cfg.d_ff)))
        model._add_slot(f"{p}.ffn.down", "ffn_down", w(f"{p}.ffn.down", (cfg.d_ff, cfg.d)))
    reg.add("final_norm.g", Tensor(np.ones(cfg.d, dtype=dtype)))


def init_base(config: ModelConfig, seed: int | None = None, dtype=np.float32) -> Model:
    """Fresh base model, all weights N(0, 0.02^2), everything frozen."""
    if seed is None:
        seed = config.seed
    model = Model(config, dtype=dtype)
    _build_structure(model, init=True, rng=Rng(seed))
    model.registry.freeze_all()
    return model
