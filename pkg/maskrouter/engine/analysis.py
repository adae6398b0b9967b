# maskrouter/engine/analysis.py
"""What the masks encode: layer-wise mask similarity across tasks and its
correlation with the similarity of the tasks' symbol inventories."""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Mapping, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel
from scipy import stats

from maskrouter.utils.errors import (
    ContractError,
    DimensionError,
    InsufficientPairsError,
    MaskError,
    UndefinedCorrelationError,
)

if TYPE_CHECKING:
    from maskrouter.engine.router import MaskRegistry

logger = logging.getLogger("maskrouter.analysis")


def mask_cosine(a: np.ndarray, b: np.ndarray) -> float:
    """dot(a, b) / (|a| |b|); 0.0 when either mask is all zeros"""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"cannot compare masks of shape {a.shape} and {b.shape}")
    na, nb = np.count_nonzero(a), np.count_nonzero(b)
    if na == 0 or nb == 0:
        return 0.0
    dot = float(np.dot(a.ravel(), b.ravel()))
    if dot == na == nb:
        return 1.0
    return dot / float(np.sqrt(float(np.dot(a.ravel(), a.ravel())) * float(np.dot(b.ravel(), b.ravel()))))


def _check_pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size:
        raise DimensionError(f"correlation needs equal lengths, got {x.size} and {y.size}")
    if x.size < 2:
        raise InsufficientPairsError(f"correlation needs at least 2 points, got {x.size}")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise UndefinedCorrelationError("correlation is undefined for a constant vector")
    return x, y


def pearson(x, y) -> float:
    x, y = _check_pair(x, y)
    r, _ = stats.pearsonr(x, y)
    return float(np.clip(r, -1.0, 1.0))


def spearman(x, y) -> float:
    """Pearson of average ranks"""
    x, y = _check_pair(x, y)
    return pearson(stats.rankdata(x, method="average"), stats.rankdata(y, method="average"))


@dataclass(frozen=True)
class SimilarityMatrix:
    task_ids: tuple[str, ...]
    layers: tuple[str, ...]
    values: np.ndarray  # [layer, task, task]

    def layer(self, layer_id: str) -> np.ndarray:
        return self.values[self.layers.index(layer_id)]

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for li, layer_id in enumerate(self.layers):
            for i, a in enumerate(self.task_ids):
                for j, b in enumerate(self.task_ids):
                    rows.append({"layer": layer_id, "task_a": a, "task_b": b, "cosine": self.values[li, i, j]})
        return pd.DataFrame(rows, columns=["layer", "task_a", "task_b", "cosine"])

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        self.to_frame().to_csv(path, index=False)
        return path


def _common_layers(masks_by_task: Mapping[str, Mapping[str, np.ndarray]]) -> list[str]:
    first = next(iter(masks_by_task.values()))
    layers = [lid for lid in first if all(lid in m for m in masks_by_task.values())]
    if not layers:
        raise MaskError("tasks share no masked layer")
    return layers


def similarity_matrix(masks_by_task: Mapping[str, Mapping[str, np.ndarray]],
                      layers: Sequence[str] | None = None) -> SimilarityMatrix:
    if not masks_by_task:
        raise InsufficientPairsError("similarity needs at least one task")
    task_ids = tuple(sorted(masks_by_task))
    layers = tuple(layers) if layers is not None else tuple(_common_layers(masks_by_task))
    n = len(task_ids)
    values = np.zeros((len(layers), n, n))
    for li, layer_id in enumerate(layers):
        for i, j in itertools.combinations_with_replacement(range(n), 2):
            c = mask_cosine(masks_by_task[task_ids[i]][layer_id], masks_by_task[task_ids[j]][layer_id])
            values[li, i, j] = values[li, j, i] = c
    return SimilarityMatrix(task_ids, layers, values)


class LayerCorrelation(BaseModel):
    layer: str
    pearson: float | None
    spearman: float | None


class CorrelationReport(BaseModel):
    layer: str
    pairs: list[tuple[str, str]]
    mask_similarity: list[float]
    inventory_similarity: list[float]
    pearson: float
    spearman: float
    per_layer: list[LayerCorrelation]

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {"pair_id": f"{a}|{b}", "layer": self.layer, "mask_cos": m, "inventory_cos": v}
            for (a, b), m, v in zip(self.pairs, self.mask_similarity, self.inventory_similarity)
        ]
        rows.append({"pair_id": "summary", "layer": self.layer, "mask_cos": None, "inventory_cos": None,
                     "pearson": self.pearson, "spearman": self.spearman})
        return pd.DataFrame(rows, columns=["pair_id", "layer", "mask_cos", "inventory_cos", "pearson", "spearman"])

    def per_layer_frame(self) -> pd.DataFrame:
        return pd.DataFrame([row.model_dump() for row in self.per_layer], columns=["layer", "pearson", "spearman"])

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        self.to_frame().to_csv(path, index=False)
        return path


def _maybe(fn, x, y) -> float | None:
    try:
        return fn(x, y)
    except UndefinedCorrelationError:
        return None


def correlation_report(
    source: "MaskRegistry | Mapping[str, Mapping[str, np.ndarray]]",
    inventories: Mapping[str, np.ndarray],
    layer: int | str = 0,
) -> CorrelationReport:
    """Correlate pairwise mask cosine at ``layer`` with pairwise inventory cosine.

    ``layer`` is an index into the masked layers in enumeration order (0 is the
    first maskable layer) or a layer id. Pairs are sorted by task id so the
    result does not depend on registration order.
    """
    masks_by_task = source.masks_by_task() if hasattr(source, "masks_by_task") else dict(source)
    if len(masks_by_task) < 3:
        raise InsufficientPairsError(f"correlation needs at least 3 tasks, got {len(masks_by_task)}")
    missing = sorted(set(masks_by_task) - set(inventories))
    if missing:
        raise ContractError(f"no inventory vector for tasks {missing}")

    layers = _common_layers(masks_by_task)
    if isinstance(layer, str):
        if layer not in layers:
            raise MaskError(f"layer {layer} is not masked for every task")
        layer_id = layer
    else:
        if not -len(layers) <= layer < len(layers):
            raise MaskError(f"layer index {layer} out of range for {len(layers)} masked layers")
        layer_id = layers[layer]

    sim = similarity_matrix(masks_by_task, layers)
    pairs = list(itertools.combinations(range(len(sim.task_ids)), 2))
    inv = [mask_cosine(inventories[sim.task_ids[i]], inventories[sim.task_ids[j]]) for i, j in pairs]

    per_layer = []
    for li, lid in enumerate(sim.layers):
        m = [float(sim.values[li, i, j]) for i, j in pairs]
        per_layer.append(LayerCorrelation(layer=lid, pearson=_maybe(pearson, m, inv), spearman=_maybe(spearman, m, inv)))

    chosen = sim.layer(layer_id)
    mask_sim = [float(chosen[i, j]) for i, j in pairs]
    report = CorrelationReport(
        layer=layer_id,
        pairs=[(sim.task_ids[i], sim.task_ids[j]) for i, j in pairs],
        mask_similarity=mask_sim,
        inventory_similarity=inv,
        pearson=pearson(mask_sim, inv),
        spearman=spearman(mask_sim, inv),
        per_layer=per_layer,
    )
    logger.info(f"Correlation at {layer_id}: pearson={report.pearson:.4f} spearman={report.spearman:.4f}")
    return report
