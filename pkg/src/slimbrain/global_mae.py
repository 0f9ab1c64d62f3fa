"""Global branch: temporal tokens over patch series, random masking, a small
transformer encoder, a linear reconstruction head and the all-position
SimMIM loss."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import Block, LayerNorm, Linear, Module, Tensor
from .volume import PatchSeries


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True, eq=False)
class TokenMatrix:
    """``values`` is (b*M, p); token ``i*M + m`` holds frames [m*p, (m+1)*p) of patch i."""

    values: np.ndarray
    patch_index: np.ndarray
    window_index: np.ndarray
    position: np.ndarray  # lattice index of each token's patch
    n_windows: int
    window: int
    n_frames: int

    @property
    def n_tokens(self) -> int:
        return self.values.shape[0]

    @property
    def n_patches(self) -> int:
        return self.n_tokens // self.n_windows


def tokenize_temporal(series: PatchSeries | np.ndarray, window: int, positions: np.ndarray | None = None) -> TokenMatrix:
    if window < 1:
        raise ValueError("window length must be >= 1")
    if isinstance(series, PatchSeries):
        x = series.values
        if positions is None:
            positions = series.grid.indices
    else:
        x = np.asarray(series, dtype=np.float32)
    if x.ndim != 2:
        raise ValueError(f"patch series must be 2-D (b, T), got {x.shape}")
    b, n_t = x.shape
    if positions is None:
        positions = np.arange(b)
    positions = np.asarray(positions, dtype=np.int64)
    if positions.shape != (b,):
        raise ValueError(f"positions shape {positions.shape} does not match {b} patches")
    m = -(-n_t // window)
    padded = np.zeros((b, m * window), dtype=np.float32)
    padded[:, :n_t] = x
    return TokenMatrix(
        values=padded.reshape(b * m, window),
        patch_index=np.repeat(np.arange(b), m),
        window_index=np.tile(np.arange(m), b),
        position=np.repeat(positions, m),
        n_windows=m,
        window=window,
        n_frames=n_t,
    )


@dataclass(frozen=True, eq=False)
class MaskPlan:
    masked: np.ndarray  # sorted unique token indices
    n_tokens: int
    ratio: float

    def as_bool(self) -> np.ndarray:
        out = np.zeros(self.n_tokens, dtype=bool)
        out[self.masked] = True
        return out

    @classmethod
    def from_bool(cls, flags: np.ndarray) -> "MaskPlan":
        flags = np.asarray(flags, dtype=bool)
        return cls(np.flatnonzero(flags), flags.size, float(flags.mean()) if flags.size else 0.0)


def sample_mask(n_tokens: int, ratio: float, seed) -> MaskPlan:
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"mask ratio must lie in (0, 1), got {ratio}")
    count = round_half_up(ratio * n_tokens)
    if count == 0 or count == n_tokens:
        raise ValueError(f"degenerate mask plan: {count} of {n_tokens} tokens masked")
    idx = np.sort(as_rng(seed).choice(n_tokens, size=count, replace=False))
    return MaskPlan(idx, n_tokens, ratio)


class GlobalModel(Module):
    def __init__(self, window: int, width: int = 64, depth: int = 4, heads: int = 4, seed=0):
        rng = as_rng(seed)
        self.embed = Linear(window, width, rng)
        self.mask_token = Tensor(rng.normal(0.0, 0.02, size=width), requires_grad=True)
        self.blocks = [Block(width, heads, rng) for _ in range(depth)]
        self.norm = LayerNorm(width)
        self.head = Linear(width, window, rng)
        self._window = window
        self._width = width

    @property
    def window(self) -> int:
        return self._window

    @property
    def width(self) -> int:
        return self._width

    def positional(self, tokens: TokenMatrix) -> np.ndarray:
        # factorised: lattice position of the patch plus window index
        return nx.sinusoid(tokens.position, self._width) + nx.sinusoid(tokens.window_index, self._width, base=100.0)

    def predict_tokens(self, tokens: TokenMatrix, masked: np.ndarray) -> np.ndarray:
        """Inference-mode reconstruction for an explicit boolean mask."""
        with nx.no_grad():
            return reconstruct(self, encode(self, tokens, MaskPlan.from_bool(masked))).data


def encode(model: GlobalModel, tokens: TokenMatrix, plan: MaskPlan) -> Tensor:
    """Embed all tokens, swap masked rows for the mask token, add positions, run the encoder."""
    if tokens.values.shape[1] != model.window:
        raise nx.ShapeError("encode", tokens.values.shape, (tokens.n_tokens, model.window))
    if plan.n_tokens != tokens.n_tokens:
        raise ValueError(f"mask plan covers {plan.n_tokens} tokens, matrix has {tokens.n_tokens}")
    n, c = tokens.n_tokens, model.width
    x = model.embed(Tensor(tokens.values))
    masked = plan.as_bool()
    if masked.any():
        keep = Tensor(np.repeat((~masked)[:, None], c, axis=1))
        fill = Tensor(np.repeat(masked[:, None], c, axis=1))
        mask_rows = nx.broadcast_to(nx.reshape(model.mask_token, (1, c)), (n, c))
        x = x * keep + mask_rows * fill
    x = x + Tensor(model.positional(tokens))
    x = nx.reshape(x, (1, n, c))
    for block in model.blocks:
        x = block(x)
    return nx.reshape(model.norm(x), (n, c))


def reconstruct(model: GlobalModel, z: Tensor) -> Tensor:
    return model.head(z)


def simmim_loss(pred: Tensor, target: Tensor | np.ndarray) -> Tensor:
    """Mean squared error over every token entry, masked and visible."""
    return nx.mse(pred, nx.as_tensor(target))


def random_clip(series: PatchSeries, length: int | None, rng: np.random.Generator) -> PatchSeries:
    if length is None or length >= series.n_frames:
        return series
    start = int(rng.integers(0, series.n_frames - length + 1))
    return PatchSeries(series.values[:, start : start + length], series.grid)


def pretrain_global_step(
    model: GlobalModel,
    batch: Sequence[PatchSeries],
    ratio: float,
    seed,
    opt: nx.AdamW,
) -> float:
    """One tokenize -> mask -> encode -> reconstruct -> loss -> backward -> AdamW cycle."""
    if not batch:
        raise ValueError("empty batch")
    rng = as_rng(seed)
    losses = []
    for series in batch:
        tokens = tokenize_temporal(series, model.window)
        plan = sample_mask(tokens.n_tokens, ratio, rng)
        pred = reconstruct(model, encode(model, tokens, plan))
        losses.append(simmim_loss(pred, tokens.values))
    loss = losses[0]
    for extra in losses[1:]:
        loss = loss + extra
    loss = loss / len(losses)
    opt.zero_grad()
    nx.backward(loss)
    opt.step()
    return loss.item()


def make_optimizer(model: Module, lr: float = 1e-3, weight_decay: float = 0.05) -> nx.AdamW:
    return nx.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)


def global_descriptor(model: GlobalModel, series: PatchSeries) -> np.ndarray:
    """Mean encoder output over all tokens of an unmasked clip."""
    tokens = tokenize_temporal(series, model.window)
    with nx.no_grad():
        z = encode(model, tokens, MaskPlan(np.zeros(0, dtype=np.int64), tokens.n_tokens, 0.0))
    return z.data.mean(axis=0)
