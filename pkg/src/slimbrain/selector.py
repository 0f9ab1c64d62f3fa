"""Temporal window selection: mutual masked reconstruction scores and baselines."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .global_mae import TokenMatrix, as_rng, tokenize_temporal
from .volume import PatchSeries

STRATEGIES = ("topk", "variance", "uniform", "random")


class TokenPredictor(Protocol):
    """Anything that reconstructs a token matrix given a boolean mask."""

    def predict_tokens(self, tokens: TokenMatrix, masked: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True, eq=False)
class WindowScore:
    scores: np.ndarray
    strategy: str = "topk"
    fingerprint: str = ""

    @property
    def n_windows(self) -> int:
        return self.scores.size


@dataclass(frozen=True, eq=False)
class Selection:
    windows: np.ndarray  # ascending window indices
    window: int
    n_frames: int
    strategy: str = "topk"
    frames: np.ndarray = field(init=False)

    def __post_init__(self):
        w = np.sort(np.asarray(self.windows, dtype=np.int64))
        if np.unique(w).size != w.size:
            raise ValueError("selected windows must be unique")
        object.__setattr__(self, "windows", w)
        frames = (w[:, None] * self.window + np.arange(self.window)[None, :]).ravel()
        object.__setattr__(self, "frames", frames[frames < self.n_frames])

    @property
    def k(self) -> int:
        return self.windows.size


def _check_k(k: int, n_windows: int):
    if not 1 <= k <= n_windows:
        raise ValueError(f"k={k} must lie in [1, {n_windows}]")


def window_mse(pred: np.ndarray, tokens: TokenMatrix) -> np.ndarray:
    """Per-window MSE over that window's tokens (all patches, all p entries)."""
    sq = ((pred.astype(np.float64) - tokens.values) ** 2).sum(axis=1)
    per = np.bincount(tokens.window_index, weights=sq, minlength=tokens.n_windows)
    return per / (tokens.n_patches * tokens.window)


def score_mutual(model: TokenPredictor, series: PatchSeries, window: int) -> WindowScore:
    """Keep one window visible, reconstruct the others; ``s_m`` is minus their mean MSE.

    Runs exactly M inference passes, one per candidate window.
    """
    tokens = tokenize_temporal(series, window)
    m_total = tokens.n_windows
    if m_total < 2:
        raise ValueError(f"mutual scoring needs at least 2 windows, got {m_total}")
    scores = np.empty(m_total)
    for m in range(m_total):
        masked = tokens.window_index != m
        errs = window_mse(model.predict_tokens(tokens, masked), tokens)
        scores[m] = -(errs.sum() - errs[m]) / (m_total - 1)
    fp = model.fingerprint() if hasattr(model, "fingerprint") else ""
    return WindowScore(scores, "topk", fp)


def select_topk(scores: WindowScore | np.ndarray, k: int, window: int, n_frames: int) -> Selection:
    s = np.asarray(scores.scores if isinstance(scores, WindowScore) else scores, dtype=np.float64)
    _check_k(k, s.size)
    # stable sort on -s keeps lower index first among ties
    order = np.argsort(-s, kind="stable")
    return Selection(order[:k], window, n_frames, "topk")


def _frame_correlation(x: np.ndarray) -> np.ndarray:
    """Pearson correlation between columns; zero-variance columns correlate 0."""
    xc = x - x.mean(axis=0, keepdims=True)
    norm = np.sqrt((xc * xc).sum(axis=0))
    ok = norm > 1e-12
    z = np.zeros_like(xc)
    z[:, ok] = xc[:, ok] / norm[ok]
    return z.T @ z


def variance_window_scores(series: PatchSeries | np.ndarray, window: int) -> np.ndarray:
    x = np.asarray(series.values if isinstance(series, PatchSeries) else series, dtype=np.float64)
    n_t = x.shape[1]
    if n_t < 2:
        raise ValueError("variance selection needs at least 2 frames")
    corr = _frame_correlation(x)
    frame_mean = (corr.sum(axis=1) - np.diag(corr)) / (n_t - 1)
    n_windows = -(-n_t // window)
    win = np.arange(n_t) // window
    return np.bincount(win, weights=frame_mean, minlength=n_windows) / np.bincount(win, minlength=n_windows)


def select_variance(series: PatchSeries | np.ndarray, window: int, k: int) -> Selection:
    """Keep the k windows whose frames are least correlated with the rest."""
    scores = variance_window_scores(series, window)
    _check_k(k, scores.size)
    order = np.argsort(scores, kind="stable")
    n_t = np.asarray(series.values if isinstance(series, PatchSeries) else series).shape[1]
    return Selection(order[:k], window, n_t, "variance")


def select_uniform(n_windows: int, k: int, window: int, n_frames: int) -> Selection:
    _check_k(k, n_windows)
    return Selection(np.arange(k) * n_windows // k, window, n_frames, "uniform")


def select_random(n_windows: int, k: int, seed, window: int, n_frames: int) -> Selection:
    _check_k(k, n_windows)
    return Selection(as_rng(seed).choice(n_windows, size=k, replace=False), window, n_frames, "random")


def select_windows(
    strategy: str,
    series: PatchSeries,
    window: int,
    k: int,
    model: TokenPredictor | None = None,
    seed=None,
) -> Selection:
    n_t = series.n_frames
    n_windows = -(-n_t // window)
    if strategy == "topk":
        if model is None:
            raise ValueError("topk selection needs a fitted global model")
        return select_topk(score_mutual(model, series, window), k, window, n_t)
    if strategy == "variance":
        return select_variance(series, window, k)
    if strategy == "uniform":
        return select_uniform(n_windows, k, window, n_t)
    if strategy == "random":
        return select_random(n_windows, k, seed, window, n_t)
    raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
