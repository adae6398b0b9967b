# maskrouter/engine/masking.py
"""Top-k binary masks over frozen weights, learned through real-valued scores.

Each forward pass binarizes the current scores (no caching across optimizer
steps). The backward pass treats binarization as the identity, so every score,
kept or not, receives (dL/dW_eff) * theta.
"""
from __future__ import annotations

import logging
import math
from enum import Enum
from typing import TYPE_CHECKING, Mapping, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from maskrouter.engine.tensor import Tensor, apply_op
from maskrouter.utils.errors import BudgetError, ConfigError, MaskError

if TYPE_CHECKING:
    from maskrouter.engine.model import ModelConfig

logger = logging.getLogger("maskrouter.masking")

BinaryMask = dict[str, np.ndarray]


class ScopeVariant(str, Enum):
    FFN_ONLY = "ffn"
    SA_ONLY = "sa"
    FFN_AND_SA = "both"
    BLOCK_GROUPS = "groups"


class InitScheme(str, Enum):
    RI = "ri"
    WMI = "wmi"
    ORI = "ori"


class MaskScope(BaseModel):
    """Which weight matrices carry a mask.

    BLOCK_GROUPS masks the FFN matrices of the blocks whose group bit is 1;
    blocks are split into ``len(groups)`` contiguous groups.
    """

    model_config = ConfigDict(frozen=True)

    variant: ScopeVariant = ScopeVariant.FFN_ONLY
    groups: tuple[int, ...] = ()

    @model_validator(mode="before")
    @classmethod
    def _from_text(cls, value):
        if isinstance(value, str):
            return cls._parse_fields(value)
        return value

    @staticmethod
    def _parse_fields(text: str) -> dict:
        text = text.strip().lower()
        if text.startswith("groups="):
            bits = text.split("=", 1)[1]
            if not bits or any(c not in "01" for c in bits):
                raise ValueError(f"group bits must be a 0/1 string, got {bits!r}")
            return {"variant": ScopeVariant.BLOCK_GROUPS, "groups": tuple(int(c) for c in bits)}
        try:
            return {"variant": ScopeVariant(text)}
        except ValueError:
            raise ValueError(f"unknown scope {text!r} (expected ffn, sa, both or groups=BITS)") from None

    @model_validator(mode="after")
    def _check_groups(self):
        if self.variant is ScopeVariant.BLOCK_GROUPS and not self.groups:
            raise ValueError("BLOCK_GROUPS scope needs at least one group bit")
        if self.variant is not ScopeVariant.BLOCK_GROUPS and self.groups:
            raise ValueError(f"group bits only apply to BLOCK_GROUPS, not {self.variant.name}")
        return self

    @classmethod
    def parse(cls, text: str) -> "MaskScope":
        try:
            return cls.model_validate(text)
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def __str__(self) -> str:
        if self.variant is ScopeVariant.BLOCK_GROUPS:
            return "groups=" + "".join(str(b) for b in self.groups)
        return self.variant.value

    def selected_blocks(self, n_blocks: int) -> list[int]:
        if self.variant is not ScopeVariant.BLOCK_GROUPS:
            return list(range(n_blocks))
        n_groups = len(self.groups)
        size = max(1, round(n_blocks / n_groups))
        return [b for b in range(n_blocks) if self.groups[min(b // size, n_groups - 1)]]

    def resolve(self, cfg: "ModelConfig") -> list[str]:
        """Layer ids covered by this scope, in enumeration order"""
        from maskrouter.engine.model import maskable_layers

        kinds = {
            ScopeVariant.FFN_ONLY: {"ffn"},
            ScopeVariant.SA_ONLY: {"sa"},
            ScopeVariant.FFN_AND_SA: {"ffn", "sa"},
            ScopeVariant.BLOCK_GROUPS: {"ffn"},
        }[self.variant]
        blocks = set(self.selected_blocks(cfg.n_blocks))
        return [spec.layer_id for spec in maskable_layers(cfg) if spec.kind in kinds and spec.block in blocks]


class SparsityBudget(BaseModel):
    """Fraction of weights zeroed; each layer keeps round((1 - sparsity) * numel)"""

    model_config = ConfigDict(frozen=True)

    sparsity: float = Field(default=0.1, ge=0.0, le=1.0)

    def keep_count(self, numel: int) -> int:
        k = math.floor((1.0 - self.sparsity) * numel + 0.5)
        return min(max(k, 0), numel)


def topk_binarize(scores: np.ndarray, k: int) -> np.ndarray:
    """Ones at the k largest scores; equal scores go to the lower flat index"""
    scores = np.asarray(scores, dtype=np.float64)
    if not 0 <= k <= scores.size:
        raise BudgetError(f"keep-count {k} outside [0, {scores.size}]")
    order = np.argsort(-scores.reshape(-1), kind="stable")
    mask = np.zeros(scores.size, dtype=np.float64)
    mask[order[:k]] = 1.0
    return mask.reshape(scores.shape)


def masked_forward_weight(theta: Tensor, mask: np.ndarray, layer_id: str = "") -> Tensor:
    """Effective weight mask * theta for a fixed mask"""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != theta.shape:
        raise MaskError(f"mask for layer {layer_id or '?'} has shape {mask.shape}, weight has {theta.shape}")

    def _backward(g):
        theta.accumulate(g * mask)

    return apply_op(theta.data * mask, (theta,), _backward)


def ste_score_gradient(upstream: np.ndarray, theta: np.ndarray) -> np.ndarray:
    return upstream * theta


def ste_masked_weight(theta: Tensor, scores: Tensor, k: int, layer_id: str = "") -> Tensor:
    """Effective weight topk(scores, k) * theta with a straight-through score gradient"""
    if scores.shape != theta.shape:
        raise MaskError(f"scores for layer {layer_id or '?'} have shape {scores.shape}, weight has {theta.shape}")
    mask = topk_binarize(scores.data, k)

    def _backward(g):
        if scores.requires_grad:
            scores.accumulate(ste_score_gradient(g, theta.data))
        if theta.requires_grad:
            theta.accumulate(g * mask)

    return apply_op(theta.data * mask, (theta, scores), _backward)


class MaskScores:
    """Trainable real-valued scores, one tensor per masked layer"""

    def __init__(self, tensors: Mapping[str, Tensor]):
        self.tensors: dict[str, Tensor] = dict(tensors)
        for layer_id, t in self.tensors.items():
            if not np.all(np.isfinite(t.data)):
                raise MaskError(f"scores for layer {layer_id} are not finite")
            t.name = layer_id
            t.requires_grad = True

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "MaskScores":
        return cls({name: Tensor(a, requires_grad=True) for name, a in arrays.items()})

    @property
    def layers(self) -> list[str]:
        return list(self.tensors)

    def __getitem__(self, layer_id: str) -> Tensor:
        return self.tensors[layer_id]

    def __len__(self) -> int:
        return len(self.tensors)

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.tensors.items()}

    def keep_counts(self, budget: SparsityBudget) -> dict[str, int]:
        return {name: budget.keep_count(t.size) for name, t in self.tensors.items()}

    def binarize(self, budget: SparsityBudget) -> BinaryMask:
        return {name: topk_binarize(t.data, budget.keep_count(t.size)) for name, t in self.tensors.items()}

    def clone(self) -> "MaskScores":
        return MaskScores({name: Tensor(t.data.copy(), requires_grad=True) for name, t in self.tensors.items()})


def _fan_in_bound(shape: Sequence[int]) -> float:
    return 1.0 / math.sqrt(shape[0])


def init_random(shapes: Mapping[str, Sequence[int]], rng_seed: int) -> MaskScores:
    """Kaiming-style uniform scores in +-1/sqrt(fan_in), drawn layer by layer"""
    rng = np.random.default_rng(rng_seed)
    arrays = {}
    for name, shape in shapes.items():
        bound = _fan_in_bound(shape)
        arrays[name] = rng.uniform(-bound, bound, size=tuple(shape))
    return MaskScores.from_arrays(arrays)


def init_wmi(theta_per_layer: Mapping[str, np.ndarray]) -> MaskScores:
    return MaskScores.from_arrays({name: np.abs(theta) for name, theta in theta_per_layer.items()})


def order_preserving_assign(magnitudes: np.ndarray, draws: np.ndarray) -> np.ndarray:
    """Permute ``draws`` so their descending order matches that of ``magnitudes``"""
    flat_mag = np.asarray(magnitudes, dtype=np.float64).reshape(-1)
    flat_draws = np.asarray(draws, dtype=np.float64).reshape(-1)
    rank_order = np.argsort(-flat_mag, kind="stable")
    out = np.empty_like(flat_draws)
    out[rank_order] = np.sort(flat_draws)[::-1]
    return out.reshape(np.shape(magnitudes))


def init_ori(theta_per_layer: Mapping[str, np.ndarray], rng_seed: int) -> MaskScores:
    draws = init_random({name: theta.shape for name, theta in theta_per_layer.items()}, rng_seed)
    return MaskScores.from_arrays({
        name: order_preserving_assign(np.abs(theta), draws[name].data)
        for name, theta in theta_per_layer.items()
    })


def init_scores(scheme: InitScheme, theta_per_layer: Mapping[str, np.ndarray], rng_seed: int) -> MaskScores:
    scheme = InitScheme(scheme)
    if scheme is InitScheme.RI:
        return init_random({name: theta.shape for name, theta in theta_per_layer.items()}, rng_seed)
    if scheme is InitScheme.WMI:
        return init_wmi(theta_per_layer)
    return init_ori(theta_per_layer, rng_seed)


def magnitude_masks(theta_per_layer: Mapping[str, np.ndarray], budget: SparsityBudget) -> BinaryMask:
    """One-shot magnitude pruning masks: keep the k largest |theta| per layer"""
    return {
        name: topk_binarize(np.abs(theta), budget.keep_count(theta.size))
        for name, theta in theta_per_layer.items()
    }


def popcounts(masks: Mapping[str, np.ndarray]) -> dict[str, int]:
    return {name: int(np.count_nonzero(m)) for name, m in masks.items()}
