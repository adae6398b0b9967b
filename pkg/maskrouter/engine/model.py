# maskrouter/engine/model.py
"""Tiny pre-norm transformer encoder (the shared backbone) and per-task heads."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterator, Mapping

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from maskrouter.engine import tensor as T
from maskrouter.engine.masking import (
    BinaryMask,
    MaskScores,
    SparsityBudget,
    masked_forward_weight,
    ste_masked_weight,
)
from maskrouter.engine.tensor import Tensor
from maskrouter.utils.errors import ConfigError, ContractError, DimensionError, MaskError

if TYPE_CHECKING:
    from maskrouter.engine.data import TaskDataset

logger = logging.getLogger("maskrouter.model")

SA_MATRICES = ("wq", "wk", "wv", "wo")
FFN_MATRICES = ("w1", "w2")
LN_EPS = 1e-5


class ModelConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    vocab_size: int = Field(default=16, ge=1)
    d_model: int = Field(default=32, ge=1)
    n_heads: int = Field(default=4, ge=1)
    n_blocks: int = Field(default=4, ge=1)
    ffn_mult: int = Field(default=4, ge=1)
    max_seq_len: int = Field(default=32, ge=1)
    seed: int = Field(default=0, ge=0, lt=2**64)

    @model_validator(mode="after")
    def _heads_divide_width(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        return self

    @property
    def d_ffn(self) -> int:
        return self.ffn_mult * self.d_model

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


@dataclass(frozen=True)
class LayerSpec:
    layer_id: str
    block: int
    kind: str  # "sa" or "ffn"
    shape: tuple[int, int]

    @property
    def numel(self) -> int:
        return self.shape[0] * self.shape[1]


def maskable_layers(cfg: ModelConfig) -> list[LayerSpec]:
    """Every maskable weight matrix: per block the 4 SA matrices, then the 2 FFN ones"""
    d, f = cfg.d_model, cfg.d_ffn
    layers = []
    for b in range(cfg.n_blocks):
        for name in SA_MATRICES:
            layers.append(LayerSpec(f"blocks.{b}.sa.{name}", b, "sa", (d, d)))
        layers.append(LayerSpec(f"blocks.{b}.ffn.w1", b, "ffn", (d, f)))
        layers.append(LayerSpec(f"blocks.{b}.ffn.w2", b, "ffn", (f, d)))
    return layers


def _parameter_shapes(cfg: ModelConfig) -> Iterator[tuple[str, tuple[int, ...], int]]:
    """(name, shape, fan_in) for every backbone parameter, in checkpoint order"""
    d, f = cfg.d_model, cfg.d_ffn
    yield "token_embedding", (cfg.vocab_size, d), d
    yield "positional_embedding", (cfg.max_seq_len, d), d
    for b in range(cfg.n_blocks):
        p = f"blocks.{b}"
        yield f"{p}.ln1.gamma", (d,), 0
        yield f"{p}.ln1.beta", (d,), 0
        for name in SA_MATRICES:
            yield f"{p}.sa.{name}", (d, d), d
            yield f"{p}.sa.b{name[1]}", (d,), d
        yield f"{p}.ln2.gamma", (d,), 0
        yield f"{p}.ln2.beta", (d,), 0
        yield f"{p}.ffn.w1", (d, f), d
        yield f"{p}.ffn.b1", (f,), d
        yield f"{p}.ffn.w2", (f, d), f
        yield f"{p}.ffn.b2", (d,), f
    yield "final_norm.gamma", (d,), 0
    yield "final_norm.beta", (d,), 0


def parameter_count(cfg: ModelConfig) -> int:
    return sum(math.prod(shape) for _, shape, _ in _parameter_shapes(cfg))


class Backbone:
    """Shared encoder weights; once frozen, no op records a gradient for them"""

    def __init__(self, cfg: ModelConfig, params: Mapping[str, Tensor], frozen: bool = False):
        self.cfg = cfg
        self.params: dict[str, Tensor] = dict(params)
        self.frozen = False
        if frozen:
            self.freeze()
        else:
            self._set_requires_grad(True)

    def _set_requires_grad(self, flag: bool) -> None:
        for t in self.params.values():
            t.requires_grad = flag
            t.grad = None

    def freeze(self) -> None:
        self.frozen = True
        self._set_requires_grad(False)

    def clone(self, frozen: bool | None = None) -> "Backbone":
        frozen = self.frozen if frozen is None else frozen
        return Backbone(self.cfg, {n: t.detach() for n, t in self.params.items()}, frozen=frozen)

    def weights(self, layer_ids) -> dict[str, np.ndarray]:
        return {lid: self.params[lid].data for lid in layer_ids}

    @property
    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]


@dataclass
class TaskHead:
    W: Tensor
    b: Tensor

    @property
    def n_classes(self) -> int:
        return self.W.shape[1]

    @property
    def num_parameters(self) -> int:
        return self.W.size + self.b.size

    def params(self) -> dict[str, Tensor]:
        return {"head.W": self.W, "head.b": self.b}

    def clone(self) -> "TaskHead":
        return TaskHead(Tensor(self.W.data.copy(), requires_grad=True, name="head.W"),
                        Tensor(self.b.data.copy(), requires_grad=True, name="head.b"))


def build_backbone(cfg: ModelConfig) -> Backbone:
    """Uniform +-1/sqrt(fan_in) weights from ``cfg.seed``; layer norms start at gamma=1, beta=0"""
    if not isinstance(cfg, ModelConfig):
        try:
            cfg = ModelConfig.model_validate(cfg)
        except ValueError as e:
            raise ConfigError(str(e)) from e
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape, fan_in in _parameter_shapes(cfg):
        if name.endswith(".gamma"):
            data = np.ones(shape)
        elif name.endswith(".beta"):
            data = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(data, name=name)
    return Backbone(cfg, params)


def build_head(d_model: int, n_classes: int, seed: int) -> TaskHead:
    if n_classes < 1:
        raise ConfigError(f"a head needs at least one class, got {n_classes}")
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(d_model)
    W = rng.uniform(-bound, bound, size=(d_model, n_classes))
    b = rng.uniform(-bound, bound, size=(n_classes,))
    return TaskHead(Tensor(W, requires_grad=True, name="head.W"), Tensor(b, requires_grad=True, name="head.b"))


def _check_masks(backbone: Backbone, masks: Mapping[str, np.ndarray]) -> None:
    shapes = {spec.layer_id: spec.shape for spec in maskable_layers(backbone.cfg)}
    for layer_id, mask in masks.items():
        if layer_id not in shapes:
            raise MaskError(f"mask given for non-maskable layer {layer_id}")
        if np.shape(mask) != shapes[layer_id]:
            raise MaskError(f"mask for layer {layer_id} has shape {np.shape(mask)}, expected {shapes[layer_id]}")


def forward(
    backbone: Backbone,
    head: TaskHead,
    tokens,
    masks: BinaryMask | None = None,
    scores: MaskScores | None = None,
    budget: SparsityBudget | None = None,
) -> Tensor:
    """Logits [B, n_classes] for a [B, L] batch of token ids.

    ``masks`` applies fixed binary masks; ``scores`` + ``budget`` binarize on the
    fly and route straight-through gradients to the scores.
    """
    cfg = backbone.cfg
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2:
        raise DimensionError(f"tokens must be a [B, L] batch, got shape {tokens.shape}")
    batch, seq_len = tokens.shape
    if seq_len == 0:
        raise DimensionError("tokens must hold at least one position per sequence")
    if seq_len > cfg.max_seq_len:
        raise DimensionError(f"sequence length {seq_len} exceeds max_seq_len {cfg.max_seq_len}")
    if masks is not None:
        _check_masks(backbone, masks)
    keep = {}
    if scores is not None:
        if budget is None:
            raise ContractError("scores need a sparsity budget")
        _check_masks(backbone, scores.arrays())
        keep = scores.keep_counts(budget)

    p = backbone.params

    def weight(name: str) -> Tensor:
        if scores is not None and name in scores.tensors:
            return ste_masked_weight(p[name], scores[name], keep[name], name)
        if masks is not None and name in masks:
            return masked_forward_weight(p[name], masks[name], name)
        return p[name]

    def linear(x: Tensor, w: str, b: str) -> Tensor:
        return T.add(T.matmul(x, weight(w)), p[b])

    d, n_heads, d_head = cfg.d_model, cfg.n_heads, cfg.d_head
    positions = np.broadcast_to(np.arange(seq_len), (batch, seq_len))
    x = T.add(T.embedding(p["token_embedding"], tokens), T.embedding(p["positional_embedding"], positions))
    x = T.reshape(x, (batch * seq_len, d))

    def split_heads(t: Tensor, key: bool = False) -> Tensor:
        t = T.reshape(t, (batch, seq_len, n_heads, d_head))
        if key:
            t = T.transpose(t, (0, 2, 3, 1))
            return T.reshape(t, (batch * n_heads, d_head, seq_len))
        t = T.transpose(t, (0, 2, 1, 3))
        return T.reshape(t, (batch * n_heads, seq_len, d_head))

    for blk in range(cfg.n_blocks):
        pre = f"blocks.{blk}"
        h = T.layer_norm(x, p[f"{pre}.ln1.gamma"], p[f"{pre}.ln1.beta"], LN_EPS)
        q = split_heads(linear(h, f"{pre}.sa.wq", f"{pre}.sa.bq"))
        k = split_heads(linear(h, f"{pre}.sa.wk", f"{pre}.sa.bk"), key=True)
        v = split_heads(linear(h, f"{pre}.sa.wv", f"{pre}.sa.bv"))
        attn = T.softmax(T.scale(T.bmm(q, k), 1.0 / math.sqrt(d_head)), axis=-1)
        ctx = T.reshape(T.bmm(attn, v), (batch, n_heads, seq_len, d_head))
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (batch * seq_len, d))
        x = T.add(x, linear(ctx, f"{pre}.sa.wo", f"{pre}.sa.bo"))

        h = T.layer_norm(x, p[f"{pre}.ln2.gamma"], p[f"{pre}.ln2.beta"], LN_EPS)
        h = T.relu(linear(h, f"{pre}.ffn.w1", f"{pre}.ffn.b1"))
        x = T.add(x, linear(h, f"{pre}.ffn.w2", f"{pre}.ffn.b2"))

    x = T.layer_norm(x, p["final_norm.gamma"], p["final_norm.beta"], LN_EPS)
    pooled = T.mean(T.reshape(x, (batch, seq_len, d)), axis=1)
    return T.add(T.matmul(pooled, head.W), head.b)


def pretrain_surrogate(cfg: ModelConfig, pooled_data: "TaskDataset", steps: int, **train_kwargs) -> Backbone:
    """Train every backbone weight on the pooled task data, then freeze it"""
    from maskrouter.engine.training import pretrain

    return pretrain(cfg, pooled_data, steps, **train_kwargs).backbone
