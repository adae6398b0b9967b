import numpy as np
import pytest

from maskrouter.engine.data import (
    GenSpec,
    bigram_oracle_predict,
    gen_data,
    load_suite,
    pool_datasets,
    read_inventories,
    read_token_lines,
    save_suite,
    task_inventory,
)
from maskrouter.utils.errors import ConfigError, FormatError, UsageError


def test_generation_is_deterministic():
    spec = GenSpec(n_tasks=2, train_per_task=20, eval_per_task=20, seed=5)
    a, b = gen_data(spec), gen_data(spec)
    for task_id in a.task_ids:
        np.testing.assert_array_equal(a.train[task_id].tokens, b.train[task_id].tokens)
        np.testing.assert_array_equal(a.eval[task_id].labels, b.eval[task_id].labels)


def test_inventories_overlap_by_stride(small_suite):
    spec = small_suite.spec
    inv = small_suite.inventories
    assert all(v.sum() == spec.inventory_size for v in inv.values())
    assert int(np.dot(inv["task0"], inv["task1"])) == spec.inventory_size - spec.stride
    assert task_inventory(spec, 0) == tuple(range(spec.inventory_size))


def test_tokens_stay_inside_inventory(small_suite):
    for ds in list(small_suite.train.values()) + list(small_suite.eval.values()):
        ds.validate()
        assert set(np.unique(ds.tokens)) <= set(ds.inventory)


def test_bigram_oracle_solves_every_task(small_suite):
    for task_id in small_suite.task_ids:
        ds = small_suite.eval[task_id]
        predicted = bigram_oracle_predict(ds.tokens, small_suite.markers[task_id])
        assert np.mean(predicted == ds.labels) > 0.95


def test_infeasible_spec_is_a_config_error():
    with pytest.raises(ConfigError):
        GenSpec.build(inventory_size=32, vocab_size=16)
    with pytest.raises(ConfigError):
        GenSpec.build(seq_len=4, plants=2)


def test_pool_datasets_concatenates(small_suite):
    pooled = pool_datasets(list(small_suite.train.values()))
    assert len(pooled) == sum(len(ds) for ds in small_suite.train.values())
    assert set(pooled.inventory) == set(range(small_suite.spec.vocab_size))
    with pytest.raises(ConfigError):
        pool_datasets([])


def test_suite_round_trip(small_suite, tmp_path):
    save_suite(small_suite, tmp_path)
    loaded = load_suite(tmp_path)
    assert loaded.spec == small_suite.spec
    assert loaded.task_ids == small_suite.task_ids
    for task_id in small_suite.task_ids:
        np.testing.assert_array_equal(loaded.train[task_id].tokens, small_suite.train[task_id].tokens)
        np.testing.assert_array_equal(loaded.inventories[task_id], small_suite.inventories[task_id])
        assert loaded.markers[task_id] == [list(map(tuple, cls)) for cls in small_suite.markers[task_id]]


def test_load_suite_needs_metadata(tmp_path):
    with pytest.raises(UsageError):
        load_suite(tmp_path)


def test_read_token_lines_without_labels(tmp_path):
    path = tmp_path / "input.txt"
    path.write_text("1 2 3\n4 5 6\n", encoding="utf-8")
    tokens, labels = read_token_lines(path)
    np.testing.assert_array_equal(tokens, [[1, 2, 3], [4, 5, 6]])
    assert labels is None


@pytest.mark.parametrize("content", ["1 2 x\t0\n", "1 2\t0\n1 2 3\t1\n", "1 2\t0\n3 4\n"])
def test_read_token_lines_rejects_malformed(tmp_path, content):
    path = tmp_path / "bad.txt"
    path.write_text(content, encoding="utf-8")
    with pytest.raises(FormatError):
        read_token_lines(path)


def test_read_token_lines_rejects_empty_file(tmp_path):
    path = tmp_path / "empty.txt"
    path.write_text("\n\n", encoding="utf-8")
    with pytest.raises(FormatError, match="no examples"):
        read_token_lines(path)


def test_read_inventories_rejects_non_binary(tmp_path):
    path = tmp_path / "inv.txt"
    path.write_text("task0 1 0 2\n", encoding="utf-8")
    with pytest.raises(FormatError):
        read_inventories(path)
    with pytest.raises(UsageError):
        read_inventories(tmp_path / "absent.txt")
