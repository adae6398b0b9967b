# maskrouter/engine/training.py
"""Finetuning driver: tri-stage Adam, the four training modes, pruning and sweeps."""
from __future__ import annotations

import logging
import struct
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from maskrouter.engine import tensor as T
from maskrouter.engine.data import TaskDataset
from maskrouter.engine.masking import (
    BinaryMask,
    InitScheme,
    MaskScope,
    MaskScores,
    ScopeVariant,
    SparsityBudget,
    init_scores,
    magnitude_masks,
    popcounts,
)
from maskrouter.engine.model import Backbone, ModelConfig, TaskHead, build_backbone, build_head, forward
from maskrouter.engine.tensor import Tape, Tensor
from maskrouter.utils.errors import BudgetError, ConfigError, ContractError, DimensionError

logger = logging.getLogger("maskrouter.training")


class TrainMode(str, Enum):
    WEIGHT_FT = "weight"
    MASK_FT = "mask"
    HEAD_ONLY = "head"
    PRUNE_TWO_PHASE = "prune"


FROZEN_MODES = {TrainMode.MASK_FT, TrainMode.HEAD_ONLY}


class TriStageSchedule(BaseModel):
    model_config = ConfigDict(frozen=True)

    warmup_frac: float = Field(default=0.1, ge=0.0, le=1.0)
    hold_frac: float = Field(default=0.4, ge=0.0, le=1.0)
    decay_frac: float = Field(default=0.5, ge=0.0, le=1.0)
    init_scale: float = Field(default=0.01, gt=0.0, le=1.0)
    final_scale: float = Field(default=0.01, gt=0.0, le=1.0)

    @model_validator(mode="after")
    def _fractions_sum_to_one(self):
        total = self.warmup_frac + self.hold_frac + self.decay_frac
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"schedule fractions sum to {total}, not 1")
        return self

    def phase_steps(self, total: int) -> tuple[int, int, int]:
        warmup = min(round(self.warmup_frac * total), total)
        hold = min(round(self.hold_frac * total), total - warmup)
        return warmup, hold, total - warmup - hold


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    mode: TrainMode = TrainMode.MASK_FT
    steps: int = Field(default=2000, gt=0)
    batch_size: int = Field(default=32, gt=0)
    peak_lr: float = Field(default=2e-3, gt=0.0)
    schedule: TriStageSchedule = TriStageSchedule()
    sparsity: float = Field(default=0.1, ge=0.0, le=1.0)
    scope: MaskScope = MaskScope()
    init_scheme: InitScheme = InitScheme.ORI
    seed: int = Field(default=0, ge=0, lt=2**64)
    eval_interval: int = Field(default=100, gt=0)

    @property
    def budget(self) -> SparsityBudget:
        return SparsityBudget(sparsity=self.sparsity)

    def with_(self, **update) -> "TrainConfig":
        """Validated copy with some fields replaced"""
        try:
            return TrainConfig.model_validate({**self.model_dump(), **update})
        except ValueError as e:
            raise ConfigError(str(e)) from e


def lr_at_step(sched: TriStageSchedule, peak_lr: float, step: int, total: int) -> float:
    """Linear warmup from init_scale*peak, hold at peak, exponential decay to final_scale*peak"""
    if not 0 <= step < total:
        raise ContractError(f"step {step} outside [0, {total})")
    warmup, hold, decay = sched.phase_steps(total)
    if step < warmup:
        return peak_lr * (sched.init_scale + (1.0 - sched.init_scale) * step / warmup)
    if step < warmup + hold:
        return peak_lr
    span = decay - 1
    if span <= 0:
        return peak_lr * sched.final_scale
    return peak_lr * sched.final_scale ** ((step - warmup - hold) / span)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray | None],
              state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place; parameters without a gradient are skipped"""
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        p -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


class Adam:
    def __init__(self, params: Mapping[str, Tensor], **hyper):
        self.params = dict(params)
        self.state = AdamState(**hyper)

    def step(self, lr: float) -> None:
        adam_step({n: t.data for n, t in self.params.items()},
                  {n: t.grad for n, t in self.params.items()}, self.state, lr)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None


@dataclass
class MetricRow:
    step: int
    lr: float
    loss: float
    accuracy: float
    popcount_checksum: int


@dataclass
class TaskSlot:
    """Everything one task adds on top of the shared backbone"""

    task_id: str
    backbone: Backbone
    head: TaskHead
    budget: SparsityBudget
    scope: MaskScope
    masks: BinaryMask | None = None
    scores: MaskScores | None = None
    mode: TrainMode = TrainMode.MASK_FT

    def logits(self, tokens) -> np.ndarray:
        return forward(self.backbone, self.head, tokens, masks=self.masks).data

    def predict(self, tokens) -> np.ndarray:
        return np.argmax(self.logits(tokens), axis=1)

    def accuracy(self, data: TaskDataset) -> float:
        return accuracy(self.backbone, self.head, data, self.masks)


@dataclass
class TrainResult:
    slot: TaskSlot
    metrics: list[MetricRow]
    phase1: "TrainResult | None" = None

    @property
    def final_accuracy(self) -> float:
        return self.metrics[-1].accuracy

    def metrics_frame(self) -> pd.DataFrame:
        return pd.DataFrame([vars(row) for row in self.metrics],
                            columns=["step", "lr", "loss", "accuracy", "popcount_checksum"])


@dataclass
class PretrainResult:
    backbone: Backbone
    head: TaskHead
    metrics: list[MetricRow]


def accuracy(backbone: Backbone, head: TaskHead, data: TaskDataset, masks: BinaryMask | None = None,
             batch_size: int = 256) -> float:
    if len(data) == 0:
        return 0.0
    correct = 0
    for start in range(0, len(data), batch_size):
        logits = forward(backbone, head, data.tokens[start:start + batch_size], masks=masks).data
        correct += int(np.sum(np.argmax(logits, axis=1) == data.labels[start:start + batch_size]))
    return correct / len(data)


def popcount_checksum(masks: Mapping[str, np.ndarray] | None) -> int:
    counts = list(popcounts(masks).values()) if masks else []
    return zlib.crc32(struct.pack(f"<{len(counts)}Q", *counts)) & 0xFFFFFFFF


class _BatchSampler:
    """Reshuffled epochs of fixed-size batches from one RNG stream"""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n, self.batch_size, self.rng = n, min(batch_size, n), rng
        self.order, self.pos = rng.permutation(n), 0

    def next(self) -> np.ndarray:
        if self.pos + self.batch_size > self.n:
            self.order, self.pos = self.rng.permutation(self.n), 0
        idx = self.order[self.pos:self.pos + self.batch_size]
        self.pos += self.batch_size
        return idx


def _seed_streams(seed: int) -> tuple[np.random.Generator, int]:
    data_seq, mask_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(data_seq), int(mask_seq.generate_state(1, dtype=np.uint64)[0])


def _check_budget(masks: BinaryMask, keep: Mapping[str, int]) -> None:
    for name, count in popcounts(masks).items():
        if count != keep[name]:
            raise BudgetError(f"layer {name}: popcount {count} != keep-count {keep[name]}")


def _optimize(backbone, head, params, cfg, data, eval_data, scores, budget, masks, log_prefix):
    """Shared loop: Adam under the tri-stage schedule, periodic evaluation"""
    rng, _ = _seed_streams(cfg.seed)
    sampler = _BatchSampler(len(data), cfg.batch_size, rng)
    optimizer = Adam(params)
    keep = scores.keep_counts(budget) if scores is not None else None
    eval_data = eval_data if eval_data is not None else data
    metrics: list[MetricRow] = []
    for step in range(cfg.steps):
        lr = lr_at_step(cfg.schedule, cfg.peak_lr, step, cfg.steps)
        idx = sampler.next()
        with Tape() as tape:
            logits = forward(backbone, head, data.tokens[idx], masks=masks, scores=scores, budget=budget)
            loss = T.cross_entropy(logits, data.labels[idx])
            tape.backward(loss)
        optimizer.step(lr)
        optimizer.zero_grad()

        done = step + 1
        if done % cfg.eval_interval == 0 or done == cfg.steps:
            current = scores.binarize(budget) if scores is not None else masks
            if scores is not None:
                _check_budget(current, keep)
            acc = accuracy(backbone, head, eval_data, current)
            metrics.append(MetricRow(done, lr, loss.item(), acc, popcount_checksum(current)))
            logger.info(f"{log_prefix} step={done} lr={lr:.3e} loss={loss.item():.4f} accuracy={acc:.4f}")
    return metrics


def train(backbone: Backbone, head: TaskHead, cfg: TrainConfig, data: TaskDataset,
          eval_data: TaskDataset | None = None, *, task_id: str | None = None,
          fixed_masks: BinaryMask | None = None) -> TrainResult:
    """Train one task slot.

    MASK_FT updates scores and head, HEAD_ONLY the head, WEIGHT_FT a private
    copy of the backbone plus the head (optionally under ``fixed_masks``).
    The caller's backbone and head are never modified.
    """
    if cfg.mode is TrainMode.PRUNE_TWO_PHASE:
        return prune_two_phase(backbone, head, cfg, data, eval_data, task_id=task_id)
    if backbone.frozen != (cfg.mode in FROZEN_MODES):
        state = "frozen" if backbone.frozen else "unfrozen"
        raise ContractError(f"{cfg.mode.name} cannot train an {state} backbone")
    if head.n_classes < data.n_classes:
        raise ContractError(f"head has {head.n_classes} classes, data needs {data.n_classes}")

    task_id = task_id or data.task_id
    head = head.clone()
    budget = cfg.budget
    scores = None
    masks = fixed_masks
    if cfg.mode is TrainMode.WEIGHT_FT:
        backbone = backbone.clone(frozen=False)
        params = {**backbone.params, **head.params()}
    elif cfg.mode is TrainMode.MASK_FT:
        _, mask_seed = _seed_streams(cfg.seed)
        theta = backbone.weights(cfg.scope.resolve(backbone.cfg))
        scores = init_scores(cfg.init_scheme, theta, mask_seed)
        masks = None
        params = {**{f"scores.{n}": t for n, t in scores.tensors.items()}, **head.params()}
    else:
        masks = None
        params = head.params()

    logger.info(f"Training {task_id} mode={cfg.mode.name} steps={cfg.steps} sparsity={cfg.sparsity} "
                f"scope={cfg.scope} init={cfg.init_scheme.value}")
    metrics = _optimize(backbone, head, params, cfg, data, eval_data, scores, budget, masks,
                        f"[{task_id}/{cfg.mode.value}]")
    if scores is not None:
        masks = scores.binarize(budget)
    slot = TaskSlot(task_id, backbone, head, budget, cfg.scope, masks=masks, scores=scores, mode=cfg.mode)
    return TrainResult(slot, metrics)


def pretrain(cfg: ModelConfig, pooled_data: TaskDataset, steps: int, batch_size: int = 32,
             peak_lr: float = 2e-3, seed: int | None = None, eval_interval: int = 100) -> PretrainResult:
    """Train a fresh backbone and a pooled head on all tasks, then freeze the backbone"""
    if steps <= 0:
        raise ConfigError(f"pretraining needs a positive step count, got {steps}")
    seed = cfg.seed if seed is None else seed
    train_cfg = TrainConfig(mode=TrainMode.WEIGHT_FT, steps=steps, batch_size=batch_size,
                            peak_lr=peak_lr, seed=seed, eval_interval=eval_interval)
    backbone = build_backbone(cfg)
    head = build_head(cfg.d_model, pooled_data.n_classes, seed)
    params = {**backbone.params, **head.params()}
    metrics = _optimize(backbone, head, params, train_cfg, pooled_data, None, None, None, None, "[pretrain]")
    backbone.freeze()
    logger.info(f"Pretrained backbone: {backbone.num_parameters} params, pooled accuracy {metrics[-1].accuracy:.4f}")
    return PretrainResult(backbone, head, metrics)


def prune_two_phase(backbone: Backbone, head: TaskHead, cfg: TrainConfig, data: TaskDataset,
                    eval_data: TaskDataset | None = None, *, task_id: str | None = None) -> TrainResult:
    """Weight-finetune, freeze the result, then learn WMI-initialised masks over FFN and SA"""
    if cfg.mode is not TrainMode.PRUNE_TWO_PHASE:
        raise ContractError(f"prune_two_phase needs mode PRUNE_TWO_PHASE, got {cfg.mode.name}")
    phase1 = train(backbone.clone(frozen=False), head, cfg.with_(mode=TrainMode.WEIGHT_FT), data, eval_data,
                   task_id=task_id)
    tuned = phase1.slot.backbone.clone(frozen=True)
    phase2_cfg = cfg.with_(mode=TrainMode.MASK_FT, scope=MaskScope(variant=ScopeVariant.FFN_AND_SA),
                           init_scheme=InitScheme.WMI)
    phase2 = train(tuned, phase1.slot.head, phase2_cfg, data, eval_data, task_id=task_id)
    offset = cfg.steps
    shifted = [MetricRow(r.step + offset, r.lr, r.loss, r.accuracy, r.popcount_checksum) for r in phase2.metrics]
    phase2.slot.mode = TrainMode.PRUNE_TWO_PHASE
    return TrainResult(phase2.slot, phase1.metrics + shifted, phase1=phase1)


def one_shot_magnitude_prune(slot: TaskSlot, sparsity: float,
                             scope: MaskScope = MaskScope(variant=ScopeVariant.FFN_AND_SA)) -> TaskSlot:
    """Zero the smallest-magnitude weights per layer, with no further training"""
    budget = SparsityBudget(sparsity=sparsity)
    theta = slot.backbone.weights(scope.resolve(slot.backbone.cfg))
    return TaskSlot(slot.task_id, slot.backbone, slot.head, budget, scope,
                    masks=magnitude_masks(theta, budget), mode=TrainMode.WEIGHT_FT)


def iterative_magnitude_prune(slot: TaskSlot, cfg: TrainConfig, data: TaskDataset,
                              eval_data: TaskDataset | None = None, rounds: int = 3) -> TrainResult:
    """Prune in ``rounds`` geometric steps to cfg.sparsity, retraining surviving weights after each"""
    if rounds < 1:
        raise ConfigError(f"rounds must be >= 1, got {rounds}")
    scope = MaskScope(variant=ScopeVariant.FFN_AND_SA)
    layer_ids = scope.resolve(slot.backbone.cfg)
    backbone, head, masks = slot.backbone.clone(frozen=False), slot.head, None
    metrics: list[MetricRow] = []
    round_steps = max(1, cfg.steps // rounds)
    result = None
    for r in range(1, rounds + 1):
        sparsity = 1.0 - (1.0 - cfg.sparsity) ** (r / rounds)
        if r == rounds:
            sparsity = cfg.sparsity
        theta = backbone.weights(layer_ids)
        if masks is not None:
            theta = {n: w * masks[n] for n, w in theta.items()}
        masks = magnitude_masks(theta, SparsityBudget(sparsity=sparsity))
        round_cfg = cfg.with_(mode=TrainMode.WEIGHT_FT, steps=round_steps, sparsity=sparsity, scope=scope)
        result = train(backbone, head, round_cfg, data, eval_data, task_id=slot.task_id, fixed_masks=masks)
        backbone, head = result.slot.backbone, result.slot.head
        offset = (r - 1) * round_steps
        metrics += [MetricRow(m.step + offset, m.lr, m.loss, m.accuracy, m.popcount_checksum) for m in result.metrics]
        logger.info(f"IMP round {r}/{rounds}: sparsity={sparsity:.4f} accuracy={result.final_accuracy:.4f}")
    result.slot.budget = cfg.budget
    return TrainResult(result.slot, metrics)


# Sweeps

@dataclass
class SweepPoint:
    key: tuple
    cfg: TrainConfig


def _run_point(backbone: Backbone, point: SweepPoint, data: TaskDataset, eval_data: TaskDataset | None) -> dict:
    started = time.perf_counter()
    head = build_head(backbone.cfg.d_model, data.n_classes, point.cfg.seed)
    source = backbone.clone(frozen=False) if point.cfg.mode is TrainMode.WEIGHT_FT else backbone
    result = train(source, head, point.cfg, data, eval_data)
    slot = result.slot
    budget_ok = True
    if slot.masks:
        keep = {n: slot.budget.keep_count(m.size) for n, m in slot.masks.items()}
        budget_ok = all(popcounts(slot.masks)[n] == k for n, k in keep.items())
    return {
        "key": point.key,
        "metric": result.final_accuracy,
        "runtime_seconds": time.perf_counter() - started,
        "budget_ok": budget_ok,
        "masked_layers": len(slot.masks or {}),
    }


def run_grid(backbone: Backbone, points: Sequence[SweepPoint], data: TaskDataset,
             eval_data: TaskDataset | None = None, jobs: int = 1) -> list[dict]:
    """Train every point; results come back in point order whatever the completion order"""
    if not points:
        raise ConfigError("nothing to sweep")
    if jobs <= 1:
        return [_run_point(backbone, p, data, eval_data) for p in points]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(lambda p: _run_point(backbone, p, data, eval_data), points))


def sparsity_sweep(backbone: Backbone, cfg_template: TrainConfig, data: TaskDataset,
                   sparsities: Sequence[float], eval_data: TaskDataset | None = None, jobs: int = 1) -> pd.DataFrame:
    if not sparsities:
        raise ConfigError("sparsity sweep needs at least one sparsity")
    for s in sparsities:
        if not 0.0 <= s <= 1.0:
            raise ConfigError(f"sparsity {s} outside [0, 1]")
    points = [SweepPoint((float(s),), cfg_template.with_(sparsity=float(s))) for s in sorted(set(sparsities))]
    rows = run_grid(backbone, points, data, eval_data, jobs)
    frame = pd.DataFrame({
        "sparsity": [r["key"][0] for r in rows],
        "metric": [r["metric"] for r in rows],
        "runtime_seconds": [r["runtime_seconds"] for r in rows],
    })
    frame["best"] = False
    frame.loc[frame["metric"].idxmax(), "best"] = True
    return frame


def scope_ablation(backbone: Backbone, cfg_template: TrainConfig, data: TaskDataset,
                   scopes: Sequence[MaskScope | str], eval_data: TaskDataset | None = None,
                   jobs: int = 1) -> pd.DataFrame:
    scopes = [s if isinstance(s, MaskScope) else MaskScope.parse(s) for s in scopes]
    points = [SweepPoint((str(s),), cfg_template.with_(scope=s)) for s in scopes]
    rows = run_grid(backbone, points, data, eval_data, jobs)
    return pd.DataFrame({
        "scope": [r["key"][0] for r in rows],
        "masked_layers": [r["masked_layers"] for r in rows],
        "metric": [r["metric"] for r in rows],
        "budget_ok": [r["budget_ok"] for r in rows],
        "runtime_seconds": [r["runtime_seconds"] for r in rows],
    })


def init_ablation(backbone: Backbone, cfg_template: TrainConfig, data: TaskDataset,
                  sparsities: Sequence[float], schemes: Sequence[InitScheme | str] = tuple(InitScheme),
                  eval_data: TaskDataset | None = None, jobs: int = 1) -> pd.DataFrame:
    points = [SweepPoint((InitScheme(scheme).value, float(s)),
                         cfg_template.with_(init_scheme=InitScheme(scheme), sparsity=float(s)))
              for scheme in schemes for s in sparsities]
    rows = run_grid(backbone, points, data, eval_data, jobs)
    return pd.DataFrame({
        "init_scheme": [r["key"][0] for r in rows],
        "sparsity": [r["key"][1] for r in rows],
        "metric": [r["metric"] for r in rows],
        "runtime_seconds": [r["runtime_seconds"] for r in rows],
    })
