import math

import numpy as np
import pandas as pd
import pytest

from maskrouter.engine.analysis import (
    correlation_report,
    mask_cosine,
    pearson,
    similarity_matrix,
    spearman,
)
from maskrouter.utils.errors import (
    ContractError,
    DimensionError,
    InsufficientPairsError,
    MaskError,
    UndefinedCorrelationError,
)

MASKS = {
    "a": {"L": np.array([1, 1, 0, 0.0]), "M": np.array([1, 0.0])},
    "b": {"L": np.array([1, 0, 1, 0.0]), "M": np.array([1, 0.0])},
    "c": {"L": np.array([0, 0, 1, 1.0]), "M": np.array([1, 0.0])},
}
INVENTORIES = {tid: layers["L"] for tid, layers in MASKS.items()}


def test_cosine_examples():
    assert mask_cosine(np.array([1, 1, 0, 0]), np.array([1, 0, 1, 0])) == pytest.approx(0.5)
    assert mask_cosine(np.array([1, 0, 1]), np.array([1, 0, 1])) == 1.0
    assert mask_cosine(np.array([1, 0]), np.array([0, 1])) == 0.0
    assert mask_cosine(np.zeros(3), np.ones(3)) == 0.0


def test_cosine_shape_mismatch():
    with pytest.raises(DimensionError):
        mask_cosine(np.ones(3), np.ones(4))


def test_pearson_examples():
    assert pearson([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
    assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    assert pearson([1, 2, 3], [1, 3, 2]) == pytest.approx(0.5)


def test_spearman_uses_average_ranks_for_ties():
    assert spearman([1, 2, 3], [1, 1, 2]) == pytest.approx(math.sqrt(3) / 2)
    assert spearman([1, 2, 3, 4], [1, 4, 9, 16]) == pytest.approx(1.0)


def test_correlation_errors():
    with pytest.raises(UndefinedCorrelationError):
        pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(InsufficientPairsError):
        spearman([1], [2])
    with pytest.raises(DimensionError):
        pearson([1, 2], [1, 2, 3])


def test_similarity_matrix_is_symmetric_with_unit_diagonal():
    sim = similarity_matrix(MASKS)
    assert sim.task_ids == ("a", "b", "c")
    assert sim.layers == ("L", "M")
    np.testing.assert_allclose(sim.layer("L"), [[1.0, 0.5, 0.0], [0.5, 1.0, 0.5], [0.0, 0.5, 1.0]])
    assert list(sim.to_frame().columns) == ["layer", "task_a", "task_b", "cosine"]


def test_correlation_report_on_hand_built_tasks():
    report = correlation_report(MASKS, INVENTORIES, layer=0)
    assert report.layer == "L"
    assert report.pairs == [("a", "b"), ("a", "c"), ("b", "c")]
    assert report.mask_similarity == pytest.approx([0.5, 0.0, 0.5])
    assert report.pearson == pytest.approx(1.0)
    assert report.spearman == pytest.approx(1.0)
    # identical masks everywhere in M leave the correlation undefined
    by_layer = {row.layer: row for row in report.per_layer}
    assert by_layer["M"].pearson is None
    assert by_layer["L"].pearson == pytest.approx(1.0)


def test_correlation_report_ignores_task_order():
    shuffled = {tid: MASKS[tid] for tid in ("c", "a", "b")}
    assert correlation_report(shuffled, INVENTORIES, "L") == correlation_report(MASKS, INVENTORIES, "L")


def test_correlation_report_needs_three_tasks():
    with pytest.raises(InsufficientPairsError):
        correlation_report({k: MASKS[k] for k in ("a", "b")}, INVENTORIES)


def test_correlation_report_needs_every_inventory():
    with pytest.raises(ContractError):
        correlation_report(MASKS, {"a": INVENTORIES["a"]})


@pytest.mark.parametrize("layer", [5, "blocks.9.ffn.w1"])
def test_correlation_report_rejects_unknown_layer(layer):
    with pytest.raises(MaskError):
        correlation_report(MASKS, INVENTORIES, layer)


def test_correlation_csv(tmp_path):
    report = correlation_report(MASKS, INVENTORIES)
    frame = pd.read_csv(report.write_csv(tmp_path / "corr.csv"))
    assert list(frame.columns) == ["pair_id", "layer", "mask_cos", "inventory_cos", "pearson", "spearman"]
    assert list(frame["pair_id"]) == ["a|b", "a|c", "b|c", "summary"]
    assert frame["pearson"].iloc[-1] == pytest.approx(1.0)
    assert list(report.per_layer_frame()["layer"]) == ["L", "M"]


def test_correlation_report_from_registry(frozen_backbone, small_suite, fast_cfg):
    from maskrouter.engine.masking import InitScheme
    from maskrouter.engine.router import MaskRegistry

    reg = MaskRegistry(frozen_backbone)
    for i, task_id in enumerate(small_suite.task_ids):
        cfg = fast_cfg.with_(seed=i, init_scheme=InitScheme.RI)
        reg.register_task(task_id, cfg, small_suite.train[task_id])
    report = correlation_report(reg, small_suite.inventories, layer=0)
    assert report.layer == "blocks.0.ffn.w1"
    assert len(report.pairs) == 3
    assert -1.0 <= report.pearson <= 1.0


def test_cosine_matches_set_intersection():
    rng = np.random.default_rng(4)
    for _ in range(50):
        a, b = rng.integers(0, 2, size=(2, 40))
        on_a, on_b = set(np.flatnonzero(a)), set(np.flatnonzero(b))
        expected = len(on_a & on_b) / math.sqrt(len(on_a) * len(on_b)) if on_a and on_b else 0.0
        assert mask_cosine(a, b) == pytest.approx(expected, abs=1e-12)


def test_pearson_ignores_positive_affine_maps():
    rng = np.random.default_rng(5)
    x, y = rng.normal(size=(2, 30))
    base = pearson(x, y)
    assert pearson(3.5 * x - 2.0, 0.25 * y + 7.0) == pytest.approx(base, abs=1e-12)


def test_spearman_ignores_monotone_maps():
    rng = np.random.default_rng(6)
    x, y = rng.normal(size=(2, 30))
    base = spearman(x, y)
    assert spearman(np.exp(x), y ** 3) == pytest.approx(base, abs=1e-12)


@pytest.mark.slow
def test_mask_similarity_tracks_inventory_overlap():
    from maskrouter.engine.data import GenSpec, gen_data, pool_datasets
    from maskrouter.engine.model import ModelConfig, pretrain_surrogate
    from maskrouter.engine.router import MaskRegistry
    from maskrouter.engine.training import TrainConfig

    positive = 0
    for seed in range(5):
        suite = gen_data(GenSpec(n_tasks=5, vocab_size=20, inventory_size=10, overlap=0.8, seed=seed))
        backbone = pretrain_surrogate(ModelConfig(vocab_size=20, seed=seed),
                                      pool_datasets(list(suite.train.values())), steps=1000, seed=seed)
        reg = MaskRegistry(backbone)
        for task_id in suite.task_ids:
            reg.register_task(task_id, TrainConfig(seed=seed), suite.train[task_id])
        try:
            report = correlation_report(reg, suite.inventories, layer=0)
        except UndefinedCorrelationError:
            continue
        assert min(report.inventory_similarity) == pytest.approx(0.2)
        assert max(report.inventory_similarity) == pytest.approx(0.8)
        positive += report.pearson > 0
    assert positive >= 4
