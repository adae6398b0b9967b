# maskrouter/engine/data.py
"""Synthetic multi-task suites: per-task symbol inventories and marker-bigram classes.

Task t draws its tokens from a window of the shared vocabulary starting at
t * stride, so adjacent tasks share ``overlap`` of their inventory. Class c of a
task is signalled by planting that class's marker bigrams; background tokens
are filled so that no marker bigram ever appears by accident.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from pydantic import BaseModel, Field, model_validator

from maskrouter.utils.errors import ConfigError, FormatError, UsageError

logger = logging.getLogger("maskrouter.data")

ORACLE_MIN_ACCURACY = 0.95
MAX_FILL_ATTEMPTS = 100


class GenSpec(BaseModel):
    n_tasks: int = Field(default=3, ge=1)
    vocab_size: int = Field(default=16, ge=2)
    inventory_size: int = Field(default=8, ge=2)
    n_classes: int = Field(default=4, ge=2)
    seq_len: int = Field(default=16, ge=2)
    train_per_task: int = Field(default=200, ge=1)
    eval_per_task: int = Field(default=200, ge=1)
    seed: int = Field(default=0, ge=0)
    overlap: float = Field(default=0.5, ge=0.0, le=1.0)
    markers_per_class: int = Field(default=2, ge=1)
    plants: int = Field(default=2, ge=1)

    @model_validator(mode="after")
    def _feasible(self):
        if self.inventory_size > self.vocab_size:
            raise ValueError(f"inventory_size {self.inventory_size} exceeds vocab_size {self.vocab_size}")
        n_bigrams = self.inventory_size * (self.inventory_size - 1)
        if self.n_classes * self.markers_per_class > n_bigrams:
            raise ValueError(f"{self.n_classes * self.markers_per_class} marker bigrams do not fit "
                             f"in an inventory of {self.inventory_size} symbols")
        if 3 * self.plants - 1 > self.seq_len:
            raise ValueError(f"{self.plants} planted bigrams do not fit in sequences of length {self.seq_len}")
        return self

    @property
    def stride(self) -> int:
        return int(round((1.0 - self.overlap) * self.inventory_size))

    @classmethod
    def build(cls, **values) -> "GenSpec":
        try:
            return cls.model_validate(values)
        except ValueError as e:
            raise ConfigError(str(e)) from e


@dataclass
class TaskDataset:
    task_id: str
    inventory: tuple[int, ...]
    tokens: np.ndarray  # [n, L] int64
    labels: np.ndarray  # [n] int64
    n_classes: int
    split: str = "train"

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def validate(self) -> None:
        if self.tokens.ndim != 2 or self.tokens.shape[0] != self.labels.shape[0]:
            raise FormatError(f"{self.task_id}/{self.split}: tokens {self.tokens.shape} vs labels {self.labels.shape}")
        if not np.isin(self.tokens, self.inventory).all():
            raise FormatError(f"{self.task_id}/{self.split}: token outside the task inventory")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise FormatError(f"{self.task_id}/{self.split}: label outside [0, {self.n_classes})")


@dataclass
class TaskSuite:
    spec: GenSpec
    train: dict[str, TaskDataset]
    eval: dict[str, TaskDataset]
    inventories: dict[str, np.ndarray]
    markers: dict[str, list[list[tuple[int, int]]]] = field(default_factory=dict)

    @property
    def task_ids(self) -> list[str]:
        return list(self.train)


def task_inventory(spec: GenSpec, t: int) -> tuple[int, ...]:
    start = t * spec.stride
    return tuple(sorted({(start + j) % spec.vocab_size for j in range(spec.inventory_size)}))


def inventory_vector(inventory: Sequence[int], vocab_size: int) -> np.ndarray:
    vec = np.zeros(vocab_size, dtype=np.int64)
    vec[list(inventory)] = 1
    return vec


def _draw_markers(rng: np.random.Generator, inventory: tuple[int, ...], spec: GenSpec) -> list[list[tuple[int, int]]]:
    bigrams = [(a, b) for a in inventory for b in inventory if a != b]
    picks = rng.choice(len(bigrams), size=spec.n_classes * spec.markers_per_class, replace=False)
    chosen = [bigrams[i] for i in picks]
    m = spec.markers_per_class
    return [chosen[c * m:(c + 1) * m] for c in range(spec.n_classes)]


def _plant_starts(rng: np.random.Generator, seq_len: int, plants: int) -> list[int]:
    # non-overlapping, and never adjacent, so planted bigrams cannot fuse
    while True:
        starts = sorted(int(s) for s in rng.choice(seq_len - 1, size=plants, replace=False))
        if all(b - a >= 3 for a, b in zip(starts, starts[1:])):
            return starts


def _make_sequence(rng, inventory, marker_set, class_markers, spec) -> np.ndarray:
    inv = np.asarray(inventory)
    for _ in range(MAX_FILL_ATTEMPTS):
        seq = np.full(spec.seq_len, -1, dtype=np.int64)
        for start in _plant_starts(rng, spec.seq_len, spec.plants):
            a, b = class_markers[rng.integers(len(class_markers))]
            seq[start], seq[start + 1] = a, b
        ok = True
        for i in range(spec.seq_len):
            if seq[i] >= 0:
                continue
            prev = seq[i - 1] if i > 0 else -1
            nxt = seq[i + 1] if i + 1 < spec.seq_len else -1
            allowed = [t for t in inv if (prev, t) not in marker_set and (t, nxt) not in marker_set]
            if not allowed:
                ok = False
                break
            seq[i] = allowed[rng.integers(len(allowed))]
        if ok:
            return seq
    raise ConfigError("could not fill a sequence without accidental marker bigrams")


def _generate_split(rng, task_id, inventory, markers, n, spec, split) -> TaskDataset:
    marker_set = {bg for cls in markers for bg in cls}
    labels = rng.permutation(np.arange(n) % spec.n_classes)
    tokens = np.stack([_make_sequence(rng, inventory, marker_set, markers[c], spec) for c in labels])
    return TaskDataset(task_id, inventory, tokens, labels.astype(np.int64), spec.n_classes, split)


def bigram_oracle_predict(tokens: np.ndarray, markers: list[list[tuple[int, int]]]) -> np.ndarray:
    """Predict the class whose marker bigrams occur most often (first class on ties)"""
    tokens = np.asarray(tokens)
    counts = np.zeros((tokens.shape[0], len(markers)), dtype=np.int64)
    left, right = tokens[:, :-1], tokens[:, 1:]
    for c, cls in enumerate(markers):
        for a, b in cls:
            counts[:, c] += np.sum((left == a) & (right == b), axis=1)
    return np.argmax(counts, axis=1)


def gen_data(spec: GenSpec) -> TaskSuite:
    """Deterministic task suite from ``spec.seed``, self-checked by the bigram oracle"""
    rng = np.random.default_rng(spec.seed)
    train, evals, inventories, markers = {}, {}, {}, {}
    for t in range(spec.n_tasks):
        task_id = f"task{t}"
        inventory = task_inventory(spec, t)
        task_markers = _draw_markers(rng, inventory, spec)
        train[task_id] = _generate_split(rng, task_id, inventory, task_markers, spec.train_per_task, spec, "train")
        evals[task_id] = _generate_split(rng, task_id, inventory, task_markers, spec.eval_per_task, spec, "eval")
        accuracy = float(np.mean(bigram_oracle_predict(evals[task_id].tokens, task_markers) == evals[task_id].labels))
        if accuracy <= ORACLE_MIN_ACCURACY:
            raise ConfigError(f"{task_id}: bigram oracle accuracy {accuracy:.3f} <= {ORACLE_MIN_ACCURACY}")
        inventories[task_id] = inventory_vector(inventory, spec.vocab_size)
        markers[task_id] = task_markers
        logger.info(f"Generated {task_id}: inventory={list(inventory)} oracle_accuracy={accuracy:.3f}")
    return TaskSuite(spec, train, evals, inventories, markers)


def pool_datasets(datasets: Sequence[TaskDataset]) -> TaskDataset:
    """Union of several tasks' examples under their shared label space"""
    if not datasets:
        raise ConfigError("nothing to pool")
    inventory = tuple(sorted(set().union(*(ds.inventory for ds in datasets))))
    return TaskDataset(
        task_id="pooled",
        inventory=inventory,
        tokens=np.concatenate([ds.tokens for ds in datasets]),
        labels=np.concatenate([ds.labels for ds in datasets]),
        n_classes=max(ds.n_classes for ds in datasets),
        split=datasets[0].split,
    )


# File formats: one example per line, space-separated token ids, a tab, the label.

def write_dataset(ds: TaskDataset, path: str | Path) -> None:
    lines = [" ".join(str(int(t)) for t in row) + f"\t{int(y)}" for row, y in zip(ds.tokens, ds.labels)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_token_lines(path: str | Path) -> tuple[np.ndarray, np.ndarray | None]:
    """Token batch (and labels when every line has a tab-separated label)"""
    path = Path(path)
    if not path.exists():
        raise UsageError(f"file not found: {path}")
    rows, labels = [], []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        seq, _, label = line.partition("\t")
        try:
            rows.append([int(t) for t in seq.split()])
            if label.strip():
                labels.append(int(label))
        except ValueError:
            raise FormatError(f"{path}:{lineno}: malformed example line") from None
    if not rows:
        raise FormatError(f"{path}: no examples")
    if len({len(r) for r in rows}) > 1:
        raise FormatError(f"{path}: sequences have differing lengths")
    tokens = np.asarray(rows, dtype=np.int64).reshape(len(rows), -1)
    if labels and len(labels) != len(rows):
        raise FormatError(f"{path}: some lines are missing labels")
    return tokens, (np.asarray(labels, dtype=np.int64) if labels else None)


def write_inventories(inventories: Mapping[str, np.ndarray], path: str | Path) -> None:
    lines = [f"{task_id} " + " ".join(str(int(v)) for v in vec) for task_id, vec in inventories.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_inventories(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"file not found: {path}")
    inventories = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        try:
            vec = np.asarray([int(v) for v in parts[1:]], dtype=np.int64)
        except ValueError:
            raise FormatError(f"{path}:{lineno}: inventory entries must be 0 or 1") from None
        if vec.size == 0 or not np.isin(vec, (0, 1)).all():
            raise FormatError(f"{path}:{lineno}: inventory entries must be 0 or 1")
        inventories[parts[0]] = vec
    if len({v.size for v in inventories.values()}) > 1:
        raise FormatError(f"{path}: inventory vectors differ in length")
    return inventories


def save_suite(suite: TaskSuite, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for task_id in suite.task_ids:
        write_dataset(suite.train[task_id], out / f"{task_id}.train.txt")
        write_dataset(suite.eval[task_id], out / f"{task_id}.eval.txt")
    write_inventories(suite.inventories, out / "inventories.txt")
    meta = {
        "spec": suite.spec.model_dump(),
        "tasks": {tid: {"inventory": list(suite.train[tid].inventory), "markers": suite.markers.get(tid, [])}
                  for tid in suite.task_ids},
    }
    (out / "suite.json").write_text(json.dumps(meta, indent=2), encoding="utf-8")
    logger.info(f"Wrote {len(suite.task_ids)} tasks to {out}")
    return out


def load_suite(data_dir: str | Path) -> TaskSuite:
    root = Path(data_dir)
    meta_path = root / "suite.json"
    if not meta_path.exists():
        raise UsageError(f"{root} is not a generated data directory (missing suite.json)")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    spec = GenSpec.model_validate(meta["spec"])
    train, evals, markers = {}, {}, {}
    for task_id, info in meta["tasks"].items():
        inventory = tuple(info["inventory"])
        for split, bucket in (("train", train), ("eval", evals)):
            tokens, labels = read_token_lines(root / f"{task_id}.{split}.txt")
            if labels is None:
                raise FormatError(f"{task_id}.{split}.txt has no labels")
            bucket[task_id] = TaskDataset(task_id, inventory, tokens, labels, spec.n_classes, split)
            bucket[task_id].validate()
        markers[task_id] = [[tuple(bg) for bg in cls] for cls in info["markers"]]
    return TaskSuite(spec, train, evals, read_inventories(root / "inventories.txt"), markers)
