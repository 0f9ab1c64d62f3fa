"""Input checks shared by the estimator wrappers."""

from __future__ import annotations

import os
from numbers import Integral, Real
from typing import Iterable

import numpy as np

from .volume import PatchSeries, Volume4D, load_volume


def check_volume(x) -> Volume4D:
    """Accept a Volume4D, a ``(data, mask)`` pair or a path to an SL4D file."""
    if isinstance(x, Volume4D):
        return x
    if isinstance(x, (str, os.PathLike)):
        return load_volume(x)
    if isinstance(x, tuple) and len(x) == 2:
        data, mask = x
        return Volume4D(np.asarray(data, dtype=np.float32), np.asarray(mask, dtype=bool))
    raise TypeError(f"expected a Volume4D, (data, mask) pair or SL4D path, got {type(x).__name__}")


def check_volumes(X) -> list[Volume4D]:
    if isinstance(X, (Volume4D, str, os.PathLike)):
        X = [X]
    items = [check_volume(x) for x in X]
    if not items:
        raise ValueError("expected at least one volume")
    return items


def check_series_or_volumes(X) -> list[Volume4D | PatchSeries]:
    if isinstance(X, (PatchSeries, Volume4D, str, os.PathLike)):
        X = [X]
    items = [x if isinstance(x, PatchSeries) else check_volume(x) for x in X]
    if not items:
        raise ValueError("expected at least one sample")
    return items


def check_int(name: str, value, low: int = 1) -> int:
    if isinstance(value, bool) or not isinstance(value, Integral):
        raise TypeError(f"{name} must be an integer, got {value!r}")
    if value < low:
        raise ValueError(f"{name} must be >= {low}, got {value}")
    return int(value)


def check_open_unit(name: str, value) -> float:
    if not isinstance(value, Real) or not 0.0 < float(value) < 1.0:
        raise ValueError(f"{name} must lie in (0, 1), got {value!r}")
    return float(value)


def check_choice(name: str, value, choices: Iterable[str]) -> str:
    choices = tuple(choices)
    if value not in choices:
        raise ValueError(f"{name} must be one of {choices}, got {value!r}")
    return value


def check_frames(frames, n: int) -> list:
    if frames is None:
        return [None] * n
    frames = list(frames)
    if len(frames) != n:
        raise ValueError(f"got {len(frames)} frame lists for {n} volumes")
    return frames
