# maskrouter/engine/router.py
"""One frozen backbone serving many tasks through per-task masks and heads."""
from __future__ import annotations

import configparser
import logging
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
from pydantic import BaseModel, Field

from maskrouter.engine.data import TaskDataset
from maskrouter.engine.masking import MaskScope, MaskScores, SparsityBudget
from maskrouter.engine.model import Backbone, build_head, maskable_layers
from maskrouter.engine.training import TaskSlot, TrainConfig, TrainMode, TrainResult, train
from maskrouter.utils import mask_io
from maskrouter.utils.errors import (
    ChecksumError,
    ContractError,
    FormatError,
    RegistryError,
    UnknownTaskError,
    UsageError,
)

logger = logging.getLogger("maskrouter.router")

DEPLOY_BITS = 32


class TaskStorage(BaseModel):
    task_id: str
    mask_bits: int
    head_bits: int
    overhead_ratio: float
    training_footprint_bits: int = 0


class StorageReport(BaseModel):
    backbone_params: int
    backbone_bits: int
    tasks: list[TaskStorage]
    total_bits: int
    independent_bits: int
    multitask_saving: float = Field(description="1 - total_bits / independent_bits")

    @property
    def max_overhead_ratio(self) -> float:
        return max(t.overhead_ratio for t in self.tasks)


def storage_from_counts(backbone_params: int, tasks: Mapping[str, tuple[int, int]],
                        score_elements: Mapping[str, int] | None = None) -> StorageReport:
    """Deployment accounting from parameter counts.

    ``tasks`` maps a task id to (masked elements, head parameters). Masks cost
    one bit per element; backbone and heads cost 32 bits per parameter.
    """
    if not tasks:
        raise RegistryError("storage report needs at least one task")
    backbone_bits = DEPLOY_BITS * backbone_params
    rows = []
    for task_id, (masked, head_params) in tasks.items():
        head_bits = DEPLOY_BITS * head_params
        rows.append(TaskStorage(
            task_id=task_id,
            mask_bits=masked,
            head_bits=head_bits,
            overhead_ratio=(masked + head_bits) / backbone_bits,
            training_footprint_bits=DEPLOY_BITS * (score_elements or {}).get(task_id, 0),
        ))
    total = backbone_bits + sum(r.mask_bits + r.head_bits for r in rows)
    independent = sum(backbone_bits + r.head_bits for r in rows)
    return StorageReport(
        backbone_params=backbone_params,
        backbone_bits=backbone_bits,
        tasks=rows,
        total_bits=total,
        independent_bits=independent,
        multitask_saving=1.0 - total / independent,
    )


@dataclass(frozen=True)
class RoutedModel:
    """Handle binding the shared backbone to one task's masks and head"""

    task_id: str
    backbone: Backbone
    slot: TaskSlot

    def logits(self, tokens) -> np.ndarray:
        return self.slot.logits(tokens)

    def predict(self, tokens) -> np.ndarray:
        return self.slot.predict(tokens)


class MaskRegistry:
    def __init__(self, backbone: Backbone):
        if not backbone.frozen:
            raise ContractError("a registry needs a frozen backbone")
        self.backbone = backbone
        self.slots: dict[str, TaskSlot] = {}
        self._lock = threading.Lock()

    def _live_slots(self) -> dict[str, TaskSlot]:
        with self._lock:
            return {tid: s for tid, s in self.slots.items() if s is not None}

    @property
    def task_ids(self) -> list[str]:
        return list(self._live_slots())

    def __len__(self) -> int:
        return len(self.task_ids)

    def __contains__(self, task_id: str) -> bool:
        return task_id in self.slots

    def register_task(self, task_id: str, cfg: TrainConfig, data: TaskDataset,
                      eval_data: TaskDataset | None = None) -> TrainResult:
        """Train a MASK_FT slot for ``task_id`` on the shared backbone"""
        if not self.backbone.frozen:
            raise ContractError("backbone was unfrozen after the registry was built")
        with self._lock:
            if task_id in self.slots:
                raise RegistryError(f"task {task_id!r} is already registered")
            self.slots[task_id] = None  # reserve the id while training
        try:
            cfg = cfg.with_(mode=TrainMode.MASK_FT)
            head = build_head(self.backbone.cfg.d_model, data.n_classes, cfg.seed)
            result = train(self.backbone, head, cfg, data, eval_data, task_id=task_id)
        except BaseException:
            with self._lock:
                del self.slots[task_id]
            raise
        with self._lock:
            self.slots[task_id] = result.slot
        logger.info(f"Registered task {task_id}: accuracy={result.final_accuracy:.4f}")
        return result

    def add_slot(self, slot: TaskSlot) -> None:
        if slot.backbone is not self.backbone:
            raise ContractError(f"slot {slot.task_id!r} is bound to a different backbone")
        with self._lock:
            if slot.task_id in self.slots:
                raise RegistryError(f"task {slot.task_id!r} is already registered")
            self.slots[slot.task_id] = slot

    def slot(self, task_id: str) -> TaskSlot:
        slot = self.slots.get(task_id)
        if slot is None:
            raise UnknownTaskError(f"unknown task {task_id!r}")
        return slot

    def switch_task(self, task_id: str) -> RoutedModel:
        return RoutedModel(task_id, self.backbone, self.slot(task_id))

    def masks_by_task(self) -> dict[str, dict[str, np.ndarray]]:
        return {tid: dict(s.masks or {}) for tid, s in self._live_slots().items()}

    def storage_report(self) -> StorageReport:
        slots = self._live_slots()
        if not slots:
            raise RegistryError("storage report needs at least one registered task")
        tasks = {tid: (sum(int(m.size) for m in (s.masks or {}).values()), s.head.num_parameters)
                 for tid, s in slots.items()}
        scores = {tid: sum(t.size for t in s.scores.tensors.values()) for tid, s in slots.items() if s.scores}
        return storage_from_counts(self.backbone.num_parameters, tasks, scores)

    def slot_bytes(self, task_id: str) -> bytes:
        """Serialized masks, scores and head of one slot, for isolation checks"""
        slot = self.slot(task_id)
        parts = [mask_io.encode_masks(slot.masks or {}), mask_io.encode_head(slot.head)]
        if slot.scores is not None:
            parts.append(mask_io.encode_scores(slot.scores.arrays(), slot.scores.keep_counts(slot.budget)))
        return b"".join(parts)


# Manifest: key = value sections, one [task:<id>] section per slot.

def save_registry(reg: MaskRegistry, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    slots = reg._live_slots()
    backbone_path = mask_io.save_backbone(reg.backbone, out / "backbone.bin")
    manifest = configparser.ConfigParser()
    manifest["registry"] = {
        "backbone": backbone_path.name,
        "backbone_crc32": f"{mask_io.file_crc(backbone_path):08x}",
        "tasks": " ".join(slots),
    }
    for task_id, slot in slots.items():
        mask_path = mask_io.save_masks(slot.masks or {}, out / f"{task_id}.masks.bin")
        head_path = mask_io.save_head(slot.head, out / f"{task_id}.head.bin")
        section = {
            "sparsity": repr(slot.budget.sparsity),
            "scope": str(slot.scope),
            "mask_file": mask_path.name,
            "head_file": head_path.name,
        }
        if slot.scores is not None:
            scores_path = mask_io.save_scores(slot.scores.arrays(), slot.scores.keep_counts(slot.budget),
                                              out / f"{task_id}.scores.bin")
            section["scores_file"] = scores_path.name
        manifest[f"task:{task_id}"] = section
    manifest_path = out / "manifest.cfg"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        manifest.write(fh)
    logger.info(f"Saved registry with {len(reg)} tasks to {manifest_path}")
    return manifest_path


def _section(manifest: configparser.ConfigParser, name: str, path: Path) -> configparser.SectionProxy:
    if name not in manifest:
        raise FormatError(f"{path}: missing [{name}] section")
    return manifest[name]


def _entry(section: configparser.SectionProxy, key: str, path: Path) -> str:
    if key not in section:
        raise FormatError(f"{path}: [{section.name}] has no {key} entry")
    return section[key]


def load_registry(manifest_path: str | Path) -> MaskRegistry:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise UsageError(f"manifest not found: {manifest_path}")
    root = manifest_path.parent
    manifest = configparser.ConfigParser()
    try:
        manifest.read(manifest_path, encoding="utf-8")
    except configparser.Error as e:
        raise FormatError(f"{manifest_path}: {e}") from e
    info = _section(manifest, "registry", manifest_path)
    backbone_path = root / _entry(info, "backbone", manifest_path)
    crc = mask_io.file_crc(backbone_path)
    if f"{crc:08x}" != info.get("backbone_crc32", "").lower():
        raise ChecksumError(f"backbone {backbone_path.name} does not match the manifest checksum")
    backbone = mask_io.load_backbone(backbone_path)
    if not backbone.frozen:
        raise ContractError("registry backbone checkpoint is not frozen")
    reg = MaskRegistry(backbone)
    shapes = {spec.layer_id: spec.shape for spec in maskable_layers(backbone.cfg)}
    for task_id in info.get("tasks", "").split():
        section = _section(manifest, f"task:{task_id}", manifest_path)
        masks = mask_io.load_masks(root / _entry(section, "mask_file", manifest_path), shapes)
        head = mask_io.load_head(root / _entry(section, "head_file", manifest_path))
        scores = None
        if "scores_file" in section:
            arrays, _ = mask_io.load_scores(root / section["scores_file"], shapes)
            scores = MaskScores.from_arrays(arrays)
        reg.add_slot(TaskSlot(
            task_id=task_id,
            backbone=backbone,
            head=head,
            budget=SparsityBudget(sparsity=float(_entry(section, "sparsity", manifest_path))),
            scope=MaskScope.parse(_entry(section, "scope", manifest_path)),
            masks=masks,
            scores=scores,
        ))
    logger.info(f"Loaded registry with {len(reg)} tasks from {manifest_path}")
    return reg
