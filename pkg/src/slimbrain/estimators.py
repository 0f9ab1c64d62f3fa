"""scikit-learn style wrappers around the training loops.

All estimators follow the usual contract: hyperparameters in ``__init__``,
learned state in trailing-underscore attributes set by ``fit``, and
``transform`` returning one descriptor row per input volume.
"""

from __future__ import annotations

import copy

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin, clone
from sklearn.utils.validation import check_is_fitted

from . import pipeline as pl
from ._validation import (
    check_choice,
    check_frames,
    check_int,
    check_open_unit,
    check_series_or_volumes,
    check_volumes,
)
from .config import PipelineConfig, StageConfig, from_dict, load_config
from .global_mae import GlobalModel, global_descriptor, make_optimizer
from .hiera_jepa import build_unit_grid, describe, prepare_clip, volume_stats
from .selector import STRATEGIES, Selection, WindowScore, score_mutual, select_windows
from .volume import PatchSeries, pad_volume


def _seed(random_state) -> int:
    if random_state is None:
        return int(np.random.default_rng().integers(2**31))
    return check_int("random_state", random_state, low=0)


class GlobalMAE(TransformerMixin, BaseEstimator):
    """Masked reconstruction transformer over patch-averaged time-series tokens."""

    def __init__(
        self,
        patch=8,
        window=5,
        mask_ratio=0.75,
        width=64,
        depth=4,
        heads=4,
        clip_frames=None,
        batch_size=1,
        lr=1e-3,
        weight_decay=0.05,
        n_steps=300,
        random_state=0,
    ):
        self.patch = patch
        self.window = window
        self.mask_ratio = mask_ratio
        self.width = width
        self.depth = depth
        self.heads = heads
        self.clip_frames = clip_frames
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.n_steps = n_steps
        self.random_state = random_state

    def _config(self, seed: int) -> PipelineConfig:
        check_int("patch", self.patch)
        check_int("window", self.window)
        check_open_unit("mask_ratio", self.mask_ratio)
        check_int("n_steps", self.n_steps, low=0)
        return from_dict({
            "seed": seed,
            "global": {
                "patch": self.patch, "window": self.window, "mask_ratio": self.mask_ratio,
                "width": self.width, "depth": self.depth, "heads": self.heads,
                "clip_frames": self.clip_frames, "batch_size": self.batch_size,
                "lr": self.lr, "weight_decay": self.weight_decay, "steps": self.n_steps,
            },
        })

    def _series(self, X) -> list[PatchSeries]:
        return [x if isinstance(x, PatchSeries) else pl.series_of(x, self.config_) for x in check_series_or_volumes(X)]

    def fit(self, X, y=None):
        self.config_ = self._config(_seed(self.random_state))
        series = self._series(X)
        self.model_ = pl.build_global(self.config_)
        self.optimizer_ = make_optimizer(self.model_, self.lr, self.weight_decay)
        self.loss_curve_ = pl.train_global_loop(self.model_, self.optimizer_, series, self.config_, 0, self.n_steps)
        self.n_features_out_ = self.width
        return self

    @classmethod
    def from_model(cls, model: GlobalModel, patch: int = 8, **params) -> "GlobalMAE":
        """Wrap an already trained model (for example one loaded from a checkpoint)."""
        est = cls(patch=patch, window=model.window, width=model.width, **params)
        est.config_ = est._config(_seed(est.random_state))
        est.model_ = model
        est.loss_curve_ = []
        est.n_features_out_ = model.width
        return est

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return np.stack([global_descriptor(self.model_, s) for s in self._series(X)])

    def predict_tokens(self, tokens, masked) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.model_.predict_tokens(tokens, masked)

    def score_windows(self, x) -> WindowScore:
        check_is_fitted(self, "model_")
        return score_mutual(self.model_, self._series(x)[0], self.window)


class WindowSelector(TransformerMixin, BaseEstimator):
    """Keep ``k`` windows per volume by mutual reconstruction score or a baseline."""

    def __init__(self, strategy="topk", k=4, window=5, patch=8, global_mae=None, random_state=0):
        self.strategy = strategy
        self.k = k
        self.window = window
        self.patch = patch
        self.global_mae = global_mae
        self.random_state = random_state

    def fit(self, X=None, y=None):
        check_choice("strategy", self.strategy, STRATEGIES)
        check_int("k", self.k)
        self.global_mae_ = None
        if self.strategy == "topk":
            if self.global_mae is not None and hasattr(self.global_mae, "model_"):
                self.global_mae_ = self.global_mae
            else:
                if X is None:
                    raise ValueError("topk selection needs data to fit a global model, or a fitted global_mae")
                base = self.global_mae if self.global_mae is not None else GlobalMAE(patch=self.patch, window=self.window)
                self.global_mae_ = clone(base).fit(X)
        self.seed_ = _seed(self.random_state)
        return self

    def _cfg(self) -> PipelineConfig:
        return from_dict({"global": {"patch": self.patch, "window": self.window}, "selector": {"k": self.k, "strategy": self.strategy}})

    def select(self, x, index: int = 0) -> Selection:
        check_is_fitted(self, "seed_")
        model = self.global_mae_.model_ if self.global_mae_ is not None else None
        series = x if isinstance(x, PatchSeries) else pl.series_of(x, self._cfg())
        rng = np.random.default_rng([self.seed_, index])
        return select_windows(self.strategy, series, self.window, self.k, model=model, seed=rng)

    def transform(self, X) -> list[Selection]:
        return [self.select(x, i) for i, x in enumerate(check_series_or_volumes(X))]


class HieraJEPA(TransformerMixin, BaseEstimator):
    """Sparse hierarchical encoder trained with an EMA-teacher latent prediction loss."""

    def __init__(
        self,
        unit=12,
        merge=3,
        frames_per_token=2,
        stages=None,
        predictor_depth=2,
        predictor_heads=4,
        context_ratio=0.4,
        target_ratio=0.3,
        ema=0.996,
        lr=1e-3,
        weight_decay=0.05,
        n_steps=300,
        random_state=0,
    ):
        self.unit = unit
        self.merge = merge
        self.frames_per_token = frames_per_token
        self.stages = stages
        self.predictor_depth = predictor_depth
        self.predictor_heads = predictor_heads
        self.context_ratio = context_ratio
        self.target_ratio = target_ratio
        self.ema = ema
        self.lr = lr
        self.weight_decay = weight_decay
        self.n_steps = n_steps
        self.random_state = random_state

    def _config(self, seed: int) -> PipelineConfig:
        check_int("unit", self.unit)
        check_int("merge", self.merge)
        if self.unit % self.merge:
            raise ValueError(f"merge ({self.merge}) must divide unit ({self.unit})")
        check_open_unit("context_ratio", self.context_ratio)
        check_open_unit("target_ratio", self.target_ratio)
        check_int("n_steps", self.n_steps, low=0)
        hiera = {
            "unit": self.unit, "merge": self.merge, "frames_per_token": self.frames_per_token,
            "predictor_depth": self.predictor_depth, "predictor_heads": self.predictor_heads,
            "context_ratio": self.context_ratio, "target_ratio": self.target_ratio, "ema": self.ema,
            "lr": self.lr, "weight_decay": self.weight_decay, "steps": self.n_steps,
        }
        if self.stages is not None:
            hiera["stages"] = [
                dict(s) if isinstance(s, dict) else vars(StageConfig(*s)) if isinstance(s, tuple) else vars(s)
                for s in self.stages
            ]
        return from_dict({"seed": seed, "hiera": hiera})

    def _samples(self, X, frames) -> list[pl.PreparedSample]:
        vols = check_volumes(X)
        out = []
        for v, f in zip(vols, check_frames(frames, len(vols))):
            padded = pad_volume(v, self.unit)
            grid = build_unit_grid(padded, self.unit, self.merge, self.frames_per_token)
            clip = prepare_clip(padded, f, self.frames_per_token, stats=volume_stats(v))
            out.append(pl.PreparedSample(grid, clip, None))
        return out

    def fit(self, X, y=None, frames=None):
        """``frames`` optionally lists the frame indices to use per volume."""
        self.config_ = self._config(_seed(self.random_state))
        samples = self._samples(X, frames)
        self.state_ = pl.build_encoder(self.config_)
        self.loss_curve_ = pl.train_jepa_loop(self.state_, samples, self.config_, 0, self.n_steps)
        self.n_features_out_ = self.state_.student.out_width
        return self

    def transform(self, X, frames=None) -> np.ndarray:
        check_is_fitted(self, "state_")
        return np.stack([describe(self.state_, s.grid, s.clip) for s in self._samples(X, frames)])


class SLIMBrainEncoder(TransformerMixin, BaseEstimator):
    """Full two-stage encoder driven by a pipeline config.

    ``config`` may be a profile name, a JSON path, a dict or a
    :class:`PipelineConfig`; ``strategy`` and ``random_state`` override the
    corresponding config entries when given.
    """

    def __init__(self, config="desk", strategy=None, random_state=None):
        self.config = config
        self.strategy = strategy
        self.random_state = random_state

    def _resolve(self) -> PipelineConfig:
        if isinstance(self.config, PipelineConfig):
            cfg = copy.deepcopy(self.config)
        else:
            cfg = load_config(self.config)
        if self.strategy is not None:
            cfg.selector.strategy = check_choice("strategy", self.strategy, STRATEGIES)
        if self.random_state is not None:
            cfg.seed = check_int("random_state", self.random_state, low=0)
        return cfg

    def fit(self, X, y=None):
        cfg = self.config_ = self._resolve()
        vols = check_volumes(X)
        self.global_model_ = pl.build_global(cfg)
        opt = make_optimizer(self.global_model_, cfg.global_.lr, cfg.global_.weight_decay)
        series = [pl.series_of(v, cfg) for v in vols]
        self.global_loss_curve_ = pl.train_global_loop(self.global_model_, opt, series, cfg, 0, cfg.global_.steps)
        self.global_model_.requires_grad_(False)
        samples = [
            pl.prepare_sample(cfg, self.global_model_, v, seed=np.random.default_rng([cfg.seed, 3, i]))
            for i, v in enumerate(vols)
        ]
        self.encoder_ = pl.build_encoder(cfg)
        self.jepa_loss_curve_ = pl.train_jepa_loop(self.encoder_, samples, cfg, 0, cfg.hiera.steps)
        self.n_features_out_ = self.encoder_.student.out_width
        return self

    def select(self, X) -> list[Selection]:
        check_is_fitted(self, "encoder_")
        return [
            pl.select_frames(self.config_, self.global_model_, v, seed=np.random.default_rng([self.config_.seed, 4, i]))
            for i, v in enumerate(check_volumes(X))
        ]

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "encoder_")
        return np.stack([
            pl.extract_features(self.config_, self.global_model_, self.encoder_, v, seed=np.random.default_rng([self.config_.seed, 4, i]))
            for i, v in enumerate(check_volumes(X))
        ])
