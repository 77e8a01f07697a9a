import pytest
import numpy as np
from hypothesis import given, settings, strategies as st

from mifo.masks import MaskDrawFunctionException, draw_mask, mask_draw_fun_dict

ts = list(mask_draw_fun_dict.keys())
rates = [0.0, 0.1, 0.5, 0.9, 1.0]


@pytest.fixture
def scores():
    return np.random.default_rng(8975).normal(0, 1, 200)


def test_none_mask_draw_fun():
    with pytest.raises(MaskDrawFunctionException):
        draw_mask(None, 10, 0.5, np.random.default_rng(1))


def test_string_not_avail_mask_draw_fun():
    with pytest.raises(MaskDrawFunctionException):
        draw_mask('something weird', 10, 0.5, np.random.default_rng(1))


def test_wrong_type_mask_draw_fun():
    with pytest.raises(ValueError):
        draw_mask([1], 10, 0.5, np.random.default_rng(1))


def test_rate_out_of_range():
    with pytest.raises(ValueError):
        draw_mask('bernoulli', 10, 1.5, np.random.default_rng(1))


def test_topk_needs_scores():
    with pytest.raises(ValueError):
        draw_mask('topk', 10, 0.5, np.random.default_rng(1))


@pytest.mark.parametrize("t", ts)
@pytest.mark.parametrize("rate", rates)
def test_extreme_and_counted(t, rate, scores):
    keep, n_dropped = draw_mask(t, len(scores), rate, np.random.default_rng(3), scores=scores)
    assert keep.dtype == bool and keep.shape == scores.shape
    assert n_dropped == (~keep).sum()
    if rate == 0.0:
        assert keep.all()
    if rate == 1.0:
        assert not keep.any()


@pytest.mark.parametrize("t", ["topk", "random"])
def test_exact_drop_count(t, scores):
    _, n_dropped = draw_mask(t, len(scores), 0.25, np.random.default_rng(3), scores=scores)
    assert n_dropped == 50


def test_topk_drops_largest_scores(scores):
    keep, _ = draw_mask('topk', len(scores), 0.1, np.random.default_rng(0), scores=scores)
    assert scores[~keep].min() >= scores[keep].max()


def test_topk_ties_go_to_earliest():
    keep, _ = draw_mask('topk', 4, 0.5, np.random.default_rng(0), scores=np.ones(4))
    np.testing.assert_array_equal(keep, [False, False, True, True])


def test_bernoulli_rate_is_close():
    keep, _ = draw_mask('bernoulli', 100_000, 0.3, np.random.default_rng(5))
    assert abs((~keep).mean() - 0.3) < 0.01


def test_callable_rule():
    keep, n_dropped = draw_mask(lambda n, rate, rng, scores: np.arange(n) % 2 == 0, 6, 0.5,
                                np.random.default_rng(0))
    assert n_dropped == 3
    np.testing.assert_array_equal(keep, [True, False, True, False, True, False])


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 300), rate=st.floats(0.0, 1.0), seed=st.integers(0, 2**31))
def test_topk_and_random_drop_floor_of_rate(n, rate, seed):
    scores = np.random.default_rng(seed).random(n)
    for t in ("topk", "random"):
        _, n_dropped = draw_mask(t, n, rate, np.random.default_rng(seed), scores=scores)
        assert n_dropped == int(np.floor(rate * n + 1e-9))
