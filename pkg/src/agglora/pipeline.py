"""Dataset assembly for the two-stage pipeline and an end-to-end driver.

World layout: the pretraining corpus teaches the task formats (and a disjoint
fact world); the aggregation stage sees a fresh fact world mixed with
alignment data; the alignment stage sees alignment data only. All alignment
sentences come from a single generator call, so every split is disjoint by
sentence identity.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

from .data import Sample, FactTable, gen_knowledge_task, gen_alignment_task
from .model import Model, ModelConfig
from .training import TrainConfig, StageReport, run_pretrain, run_mka, run_da
from .adapters import strip_na, merge_attention_lora, merge_final


# offsets deriving independent world seeds from one pipeline seed
_PRETRAIN_WORLD = 1_000_003
_MKA_WORLD = 2_000_003
_ALIGN_STREAM = 3_000_017


@dataclass
class DatasetSizes:
    mka_knowledge: int = 2000
    mka_alignment: int = 2000
    da_alignment: int = 2000
    eval_per_task: int = 200
    pretrain_knowledge: int = 2000
    pretrain_alignment: int = 3000
    pretrain_heldout: int = 200


@dataclass
class PipelineData:
    pretrain: list[Sample]
    pretrain_heldout: list[Sample]
    mka: list[Sample]
    da: list[Sample]
    eval_knowledge: list[Sample]
    eval_alignment: list[Sample]
    facts: FactTable


def build_datasets(seed: int, sizes: DatasetSizes | None = None) -> PipelineData:
    sz = sizes or DatasetSizes()
    pre_k, _ = gen_knowledge_task(sz.pretrain_knowledge + sz.pretrain_heldout,
                                  seed + _PRETRAIN_WORLD)
    mka_k, facts = gen_knowledge_task(sz.mka_knowledge + sz.eval_per_task,
                                      seed + _MKA_WORLD)
    n_align = (sz.pretrain_alignment + sz.pretrain_heldout + sz.mka_alignment
               + sz.da_alignment + sz.eval_per_task)
    align = gen_alignment_task(n_align, seed + _ALIGN_STREAM)
    p = 0

    def take(n):
        nonlocal p
        out = align[p:p + n]
        p += n
        return out

    pre_a = take(sz.pretrain_alignment)
    held_a = take(sz.pretrain_heldout)
    mka_a = take(sz.mka_alignment)
    da_a = take(sz.da_alignment)
    eval_a = take(sz.eval_per_task)
    return PipelineData(
        pretrain=pre_k[:sz.pretrain_knowledge] + pre_a,
        pretrain_heldout=pre_k[sz.pretrain_knowledge:] + held_a,
        mka=mka_k[:sz.mka_knowledge] + mka_a,
        da=da_a,
        eval_knowledge=mka_k[sz.mka_knowledge:],
        eval_alignment=eval_a,
        facts=facts,
    )


@dataclass
class PipelineResult:
    models: dict = field(default_factory=dict)    # stage name -> Model
    reports: dict = field(default_factory=dict)   # stage name -> StageReport
    metrics: dict = field(default_factory=dict)


def run_full_pipeline(seed: int = 0,
                      model_cfg: ModelConfig | None = None,
                      train_cfg: TrainConfig | None = None,
                      sizes: DatasetSizes | None = None,
                      data: PipelineData | None = None,
                      base_model: Model | None = None,
                      mka_epochs: int = 1,
                      da_epochs: int = 3,
                      da_peak_lr: float | None = None) -> PipelineResult:
    """pretrain -> mka -> strip -> merge-attn -> da -> merge.

    A prebuilt base_model (already pretrained, frozen) can be passed to share
    the expensive pretraining across runs.
    """
    model_cfg = model_cfg or ModelConfig(seed=seed)
    base_tc = train_cfg or TrainConfig(seed=seed)
    data = data or build_datasets(seed, sizes)
    res = PipelineResult()

    if base_model is None:
        pre_cfg = TrainConfig(**{**asdict(base_tc), "stage": "pretrain",
                                 "seed": seed, "peak_lr": 1e-3})
        base_model, rep = run_pretrain(pre_cfg, model_cfg, data.pretrain, data.pretrain_heldout)
        res.reports["pretrain"] = rep
    res.models["base"] = base_model

    mka_cfg = TrainConfig(**{**asdict(base_tc), "stage": "mka", "seed": seed,
                             "epochs": mka_epochs})
    model, rep = run_mka(mka_cfg, base_model.clone(), data.mka)
    res.models["mka"] = model
    res.reports["mka"] = rep

    model = strip_na(model.clone())
    model = merge_attention_lora(model)
    res.models["stripped"] = model

    da_cfg = TrainConfig(**{**asdict(base_tc), "stage": "da", "seed": seed,
                            "epochs": da_epochs,
                            "peak_lr": da_peak_lr if da_peak_lr is not None
                            else base_tc.peak_lr})
    model, rep = run_da(da_cfg, model.clone(), data.da)
    res.models["da"] = model
    res.reports["da"] = rep

    res.models["merged"] = merge_final(model.clone())
    return res
