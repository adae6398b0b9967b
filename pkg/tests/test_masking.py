import numpy as np
import pytest
from scipy import stats

from maskrouter.engine import tensor as T
from maskrouter.engine.masking import (
    InitScheme,
    MaskScope,
    ScopeVariant,
    SparsityBudget,
    init_ori,
    init_random,
    init_scores,
    init_wmi,
    magnitude_masks,
    masked_forward_weight,
    order_preserving_assign,
    ste_masked_weight,
    ste_score_gradient,
    topk_binarize,
)
from maskrouter.engine.model import ModelConfig
from maskrouter.engine.tensor import Tape, Tensor
from maskrouter.utils.errors import BudgetError, ConfigError, MaskError


def _oracle_topk(scores: np.ndarray, k: int) -> np.ndarray:
    flat = scores.reshape(-1)
    order = sorted(range(flat.size), key=lambda i: (-flat[i], i))
    out = np.zeros(flat.size)
    out[order[:k]] = 1.0
    return out.reshape(scores.shape)


def test_topk_examples():
    np.testing.assert_array_equal(topk_binarize(np.array([0.3, -1.0, 2.0, 0.5]), 2), [0, 0, 1, 1])
    np.testing.assert_array_equal(topk_binarize(np.array([1.0, 1.0, 1.0]), 2), [1, 1, 0])
    np.testing.assert_array_equal(topk_binarize(np.array([5.0, 4.0]), 0), [0, 0])
    np.testing.assert_array_equal(topk_binarize(np.array([5.0, 4.0]), 2), [1, 1])


def test_topk_rejects_out_of_range_budget():
    with pytest.raises(BudgetError):
        topk_binarize(np.zeros(3), 4)
    with pytest.raises(BudgetError):
        topk_binarize(np.zeros(3), -1)


def test_topk_matches_full_sort_oracle():
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        n = int(rng.integers(1, 12))
        # small integer scores force plenty of ties
        scores = rng.integers(-3, 4, size=n).astype(np.float64)
        k = int(rng.integers(0, n + 1))
        np.testing.assert_array_equal(topk_binarize(scores, k), _oracle_topk(scores, k))


@pytest.mark.parametrize("sparsity, numel, keep", [(0.1, 10, 9), (0.0, 7, 7), (1.0, 7, 0), (0.5, 5, 3), (0.25, 2, 2)])
def test_keep_count_rounds_half_up(sparsity, numel, keep):
    assert SparsityBudget(sparsity=sparsity).keep_count(numel) == keep


def test_masked_forward_zeroes_weights_and_gradients():
    theta = Tensor(np.arange(1.0, 5.0).reshape(2, 2), requires_grad=True)
    mask = np.array([[1.0, 0.0], [0.0, 1.0]])
    with Tape():
        out = masked_forward_weight(theta, mask)
        T.backward(T.sum_all(out))
    np.testing.assert_array_equal(out.data, [[1.0, 0.0], [0.0, 4.0]])
    np.testing.assert_array_equal(theta.grad, mask)


def test_masked_forward_shape_mismatch_names_layer():
    with pytest.raises(MaskError, match="blocks.0.ffn.w1"):
        masked_forward_weight(Tensor(np.ones((2, 2))), np.ones((2, 3)), "blocks.0.ffn.w1")


def test_ste_score_gradient_is_elementwise_product():
    np.testing.assert_array_equal(ste_score_gradient(np.array([2.0, -1.0]), np.array([0.5, 3.0])), [1.0, -3.0])


def test_ste_updates_masked_out_scores():
    rng = np.random.default_rng(1)
    theta = Tensor(rng.normal(size=(4, 4)))
    scores = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
    x = Tensor(rng.normal(size=(3, 4)))
    with Tape():
        T.backward(T.sum_all(T.matmul(x, ste_masked_weight(theta, scores, 5))))
    mask = topk_binarize(scores.data, 5)
    dropped = mask == 0
    assert np.all(scores.grad[dropped] != 0)
    assert theta.grad is None


def test_ste_gradient_equals_theta_times_effective_weight_gradient():
    rng = np.random.default_rng(2)
    theta_data = rng.normal(size=(4, 4))
    scores = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
    x = rng.normal(size=(3, 4))
    y = rng.normal(size=(3, 4))
    k = 7

    with Tape():
        w = ste_masked_weight(Tensor(theta_data), scores, k)
        T.backward(T.sum_all(T.mul(T.matmul(Tensor(x), w), Tensor(y))))

    def loss_of(w_eff):
        return float(np.sum((x @ w_eff) * y))

    w_eff = theta_data * topk_binarize(scores.data, k)
    fd = np.zeros_like(w_eff)
    h = 1e-5
    for idx in np.ndindex(w_eff.shape):
        up, down = w_eff.copy(), w_eff.copy()
        up[idx] += h
        down[idx] -= h
        fd[idx] = (loss_of(up) - loss_of(down)) / (2 * h)
    expected = theta_data * fd
    rel = np.linalg.norm(scores.grad - expected) / np.linalg.norm(expected)
    assert rel < 1e-5


def test_init_random_scale_follows_fan_in():
    scores = init_random({"a": (4, 3), "b": (100, 3)}, rng_seed=0)
    assert np.abs(scores["a"].data).max() <= 0.5
    assert np.abs(scores["b"].data).max() <= 0.1
    again = init_random({"a": (4, 3), "b": (100, 3)}, rng_seed=0)
    np.testing.assert_array_equal(scores["a"].data, again["a"].data)


def test_init_random_is_centred():
    draws = init_random({"w": (4, 25_000)}, rng_seed=7)["w"].data
    bound = 0.5
    stderr = bound / np.sqrt(3) / np.sqrt(draws.size)
    assert abs(draws.mean()) < 3 * stderr
    assert draws.var() == pytest.approx(bound ** 2 / 3, rel=0.02)


def test_init_wmi_is_weight_magnitude():
    theta = np.array([[-2.0, 0.5], [1.0, -0.1]])
    np.testing.assert_array_equal(init_wmi({"w": theta})["w"].data, np.abs(theta))


def test_order_preserving_assign_example():
    out = order_preserving_assign(np.array([0.1, 3.0, 2.0]), np.array([5.0, 1.0, 9.0]))
    np.testing.assert_array_equal(out, [1.0, 9.0, 5.0])


def test_ori_properties():
    rng = np.random.default_rng(4)
    theta = {"x": rng.normal(size=(8, 6)), "y": rng.normal(size=(6, 8))}
    ori = init_ori(theta, rng_seed=11)
    raw = init_random({n: t.shape for n, t in theta.items()}, rng_seed=11)
    for name, t in theta.items():
        scores = ori[name].data
        mag = np.abs(t)
        np.testing.assert_array_equal(stats.rankdata(scores), stats.rankdata(mag))
        assert stats.spearmanr(scores.ravel(), mag.ravel())[0] == pytest.approx(1.0)
        np.testing.assert_array_equal(np.sort(scores.ravel()), np.sort(raw[name].data.ravel()))
        for frac in (0.0, 0.1, 0.5, 1.0):
            k = int(round(frac * t.size))
            np.testing.assert_array_equal(topk_binarize(scores, k), topk_binarize(mag, k))


def test_init_scores_dispatch():
    theta = {"w": np.array([[1.0, -3.0], [2.0, 0.5]])}
    np.testing.assert_array_equal(init_scores(InitScheme.WMI, theta, 0)["w"].data, np.abs(theta["w"]))
    assert init_scores("ri", theta, 0)["w"].shape == (2, 2)


def test_magnitude_masks_keep_largest():
    masks = magnitude_masks({"w": np.array([[0.1, -5.0], [2.0, -0.3]])}, SparsityBudget(sparsity=0.5))
    np.testing.assert_array_equal(masks["w"], [[0, 1], [1, 0]])


def test_scope_parsing_and_resolution():
    cfg = ModelConfig(n_blocks=4)
    assert MaskScope.parse("ffn").variant is ScopeVariant.FFN_ONLY
    assert len(MaskScope.parse("both").resolve(cfg)) == 24
    assert MaskScope.parse("sa").resolve(cfg)[0] == "blocks.0.sa.wq"
    groups = MaskScope.parse("groups=0010")
    assert str(groups) == "groups=0010"
    assert groups.resolve(cfg) == ["blocks.2.ffn.w1", "blocks.2.ffn.w2"]


def test_block_groups_last_group_absorbs_remainder():
    scope = MaskScope.parse("groups=01")
    assert scope.selected_blocks(5) == [2, 3, 4]


@pytest.mark.parametrize("text", ["attn", "groups=", "groups=012"])
def test_scope_rejects_bad_text(text):
    with pytest.raises(ConfigError):
        MaskScope.parse(text)
