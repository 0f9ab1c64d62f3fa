import numpy as np
import pytest

from slimbrain import numerics as nx
from slimbrain.global_mae import GlobalModel, TokenMatrix
from slimbrain.selector import (
    Selection,
    score_mutual,
    select_random,
    select_topk,
    select_uniform,
    select_variance,
    select_windows,
    variance_window_scores,
)
from slimbrain.volume import PatchGrid, PatchSeries

from oracles import mutual_scores, variance_selection


class ZeroReconstructor:
    def predict_tokens(self, tokens, masked):
        return np.zeros_like(tokens.values)


def _series(values):
    values = np.asarray(values, dtype=np.float32)
    return PatchSeries(values, PatchGrid(1, (1, 1, values.shape[0]), np.arange(values.shape[0])))


def test_zero_stub_scores_exact():
    s = score_mutual(ZeroReconstructor(), _series([[1.0, 2.0, 3.0]]), 1)
    assert s.scores.tolist() == [-6.5, -5.0, -2.5]
    assert select_topk(s, 1, 1, 3).windows.tolist() == [2]
    assert (s.scores <= 0).all()


def test_zero_stub_constant_shift_matches_closed_form():
    base = np.random.default_rng(0).normal(size=(3, 8))
    for c in (0.0, 1.5, -2.0):
        got = score_mutual(ZeroReconstructor(), _series(base + c), 2).scores
        ref = mutual_scores(lambda v, m: np.zeros_like(v), (base + c).astype(np.float32), 2)
        np.testing.assert_allclose(got, ref, atol=1e-9)


def _model64(window, seed=0):
    with nx.precision(np.float64):
        return GlobalModel(window, width=8, depth=2, heads=2, seed=seed)


def _oracle_predict(model, series, window):
    b, t = series.values.shape
    m_total = -(-t // window)

    def predict(values, masked):
        tm = TokenMatrix(
            values.astype(np.float32), np.repeat(np.arange(b), m_total), np.tile(np.arange(m_total), b),
            np.repeat(series.grid.indices, m_total), m_total, window, t,
        )
        with nx.precision(np.float64):
            return model.predict_tokens(tm, masked)

    return predict


def test_score_mutual_matches_brute_force_oracle():
    model = _model64(2, seed=1)
    series = _series(np.random.default_rng(1).normal(size=(3, 8)))  # b=3, M=4, p=2
    with nx.precision(np.float64):
        got = score_mutual(model, series, 2).scores
    ref = mutual_scores(_oracle_predict(model, series, 2), series.values, 2)
    np.testing.assert_allclose(got, ref, atol=1e-6)


def test_score_mutual_runs_exactly_m_passes():
    calls = []

    class Counting(ZeroReconstructor):
        def predict_tokens(self, tokens, masked):
            calls.append(masked.copy())
            return super().predict_tokens(tokens, masked)

    score_mutual(Counting(), _series(np.ones((2, 10))), 2)
    assert len(calls) == 5
    # pass m leaves exactly window m visible
    assert all((~c).sum() == 2 for c in calls)


def test_identical_windows_score_equal():
    model = GlobalModel(2, width=8, depth=1, heads=2, seed=0)
    row = np.tile([0.3, -1.0], 4)
    s = score_mutual(model, _series(np.stack([row, 2 * row])), 2).scores
    # positional encodings differ per window, so equality is up to the model's window sensitivity;
    # with a position-free stub it is exact
    s0 = score_mutual(ZeroReconstructor(), _series(np.stack([row, 2 * row])), 2).scores
    assert np.ptp(s0) == 0.0
    assert s.shape == (4,)


def test_score_invariant_to_patch_order():
    model = GlobalModel(2, width=8, depth=2, heads=2, seed=3)
    values = np.random.default_rng(3).normal(size=(4, 8)).astype(np.float32)
    grid = PatchGrid(1, (1, 1, 4), np.arange(4))
    a = score_mutual(model, PatchSeries(values, grid), 2).scores
    perm = np.array([2, 0, 3, 1])
    # permute rows together with their lattice positions
    b = score_mutual(model, PatchSeries(values[perm], PatchGrid(1, (1, 1, 4), grid.indices[perm])), 2).scores
    np.testing.assert_allclose(a, b, atol=1e-5)


def test_score_requires_two_windows():
    with pytest.raises(ValueError):
        score_mutual(ZeroReconstructor(), _series(np.ones((2, 3))), 5)


def test_topk_examples():
    sel = select_topk(np.arange(40.0), 8, 5, 200)
    assert sel.frames.size == 40
    assert select_topk(np.zeros(6), 3, 5, 30).windows.tolist() == [0, 1, 2]
    full = select_topk(np.random.default_rng(0).normal(size=3), 3, 3, 7)
    assert full.frames.tolist() == list(range(7))
    with pytest.raises(ValueError):
        select_topk(np.zeros(3), 4, 1, 3)


def test_topk_equals_sorted_topk_for_injective_scores():
    rng = np.random.default_rng(4)
    for _ in range(50):
        s = rng.permutation(12).astype(float)
        k = int(rng.integers(1, 13))
        expected = sorted(sorted(range(12), key=lambda i: -s[i])[:k])
        assert select_topk(s, k, 2, 24).windows.tolist() == expected


def test_selection_frames_ascending_and_tail_excluded():
    sel = Selection(np.array([3, 1]), 3, 11)
    assert sel.frames.tolist() == [3, 4, 5, 9, 10]
    with pytest.raises(ValueError):
        Selection(np.array([1, 1]), 3, 11)


def test_variance_examples():
    same = np.tile(np.random.default_rng(5).normal(size=(4, 1)), (1, 12))
    assert select_variance(same, 3, 2).windows.tolist() == [0, 1]
    # constant frames plus one window of orthogonal noise
    x = np.tile(np.array([[1.0], [2.0], [3.0], [4.0]]), (1, 12))
    x[:, 6:9] = np.random.default_rng(6).normal(size=(4, 3))
    assert select_variance(x, 3, 1).windows.tolist() == [2]


def test_variance_matches_naive_oracle():
    rng = np.random.default_rng(7)
    for trial in range(5):
        x = rng.normal(size=(4, 12))
        x[:, trial] = 0.0  # zero-variance frame
        for k in (1, 2, 3):
            assert select_variance(x, 3, k).windows.tolist() == variance_selection(x, 3, k)
    assert variance_window_scores(x, 5).shape == (3,)


def test_uniform_examples():
    assert select_uniform(40, 8, 5, 200).windows.tolist() == [0, 5, 10, 15, 20, 25, 30, 35]
    assert select_uniform(7, 1, 5, 35).windows.tolist() == [0]
    assert select_uniform(7, 7, 5, 35).windows.tolist() == list(range(7))


def test_random_examples():
    a = select_random(10, 3, 11, 5, 50)
    assert a.windows.tolist() == select_random(10, 3, 11, 5, 50).windows.tolist()
    assert select_random(10, 10, 3, 5, 50).windows.tolist() == list(range(10))


def test_random_selection_is_uniform():
    rng = np.random.default_rng(12)
    counts = np.zeros(10)
    n = 10000
    for _ in range(n):
        counts[select_random(10, 3, rng, 1, 10).windows] += 1
    p = 0.3
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) < 3 * sigma)


def test_select_windows_dispatch():
    series = _series(np.random.default_rng(8).normal(size=(3, 20)))
    assert select_windows("uniform", series, 5, 2).windows.tolist() == [0, 2]
    assert select_windows("topk", series, 5, 1, model=ZeroReconstructor()).k == 1
    with pytest.raises(ValueError):
        select_windows("topk", series, 5, 1)
    with pytest.raises(ValueError):
        select_windows("bogus", series, 5, 1)
