"""Voxel-level hierarchical encoder over sparse mask units, trained JEPA-style.

Vocabulary used throughout:

* a *unit* is a cube of ``unit`` voxels per side; units that are entirely
  background are dropped;
* a *slot* is ``frames_per_token`` consecutive clip frames;
* a *cell* is one (foreground unit, slot) pair, stored as ``[unit_ordinal, slot]``.
  Cells are the granularity of views, of the token budget and of stage-1/2
  attention: every cell holds ``(unit // merge) ** 3`` tokens, each token a
  ``merge**3`` voxel block over one slot.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .global_mae import as_rng, round_half_up
from .numerics import Block, LayerNorm, Linear, Module, Tensor
from .volume import EmptyForegroundError, Volume4D

MODES = ("spatial", "temporal", "spatiotemporal")


class ViewError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class MaskUnitGrid:
    unit: int
    merge: int
    frames_per_token: int
    extents: tuple[int, int, int]
    units: np.ndarray  # sorted linear indices of foreground units

    @property
    def side(self) -> int:
        return self.unit // self.merge

    @property
    def tokens_per_cell(self) -> int:
        return self.side**3

    @property
    def n_candidates(self) -> int:
        return int(np.prod(self.extents))

    @property
    def n_units(self) -> int:
        return int(self.units.size)

    def unit_coords(self) -> np.ndarray:
        return np.stack(np.unravel_index(self.units, self.extents), axis=1)

    def n_slots(self, n_frames: int) -> int:
        return -(-n_frames // self.frames_per_token)

    def all_cells(self, n_slots: int) -> np.ndarray:
        u, t = np.meshgrid(np.arange(self.n_units), np.arange(n_slots), indexing="ij")
        return np.stack([u.ravel(), t.ravel()], axis=1)


def build_unit_grid(v: Volume4D | np.ndarray, unit: int, merge: int, frames_per_token: int = 2) -> MaskUnitGrid:
    mask = v.mask if isinstance(v, Volume4D) else np.asarray(v, dtype=bool)
    if unit % merge:
        raise ValueError(f"merge kernel {merge} must divide unit size {unit}")
    if any(s % unit for s in mask.shape):
        raise ValueError(f"unit size {unit} does not divide dims {mask.shape}; pad the volume first")
    if frames_per_token < 1:
        raise ValueError("frames_per_token must be >= 1")
    h, w, d = mask.shape
    fg = mask.reshape(h // unit, unit, w // unit, unit, d // unit, unit).any(axis=(1, 3, 5))
    units = np.flatnonzero(fg.ravel())
    if units.size == 0:
        raise EmptyForegroundError("no brain voxels")
    return MaskUnitGrid(unit, merge, frames_per_token, tuple(int(e) for e in fg.shape), units)


# ---------------------------------------------------------------------------
# views


@dataclass(frozen=True, eq=False)
class ViewSpec:
    context: np.ndarray  # (n, 2) cells
    target: np.ndarray  # (m, 2) cells
    mode: str
    box_start: tuple[int, ...] = ()  # (x, y, z, t) of the context block
    box_size: tuple[int, ...] = ()


def _box_sizes(extents: Sequence[int]) -> list[tuple[int, ...]]:
    """Axis-proportional box sizes in increasing order of scale."""
    breaks = sorted({j / e for e in extents for j in range(1, e + 1)})
    sizes: list[tuple[int, ...]] = []
    for lam in breaks:
        s = tuple(min(e, max(1, int(np.ceil(lam * e - 1e-9)))) for e in extents)
        if not sizes or s != sizes[-1]:
            sizes.append(s)
    return sizes


def context_block(occupancy: np.ndarray, n_context: int, rng: np.random.Generator):
    """Smallest axis-proportional box (at a random offset) holding ``n_context``
    foreground cells, trimmed to exactly that many in raster order.

    ``occupancy`` is a boolean (x, y, z, t) array. Returns (cells_xyzt, start, size).
    """
    extents = occupancy.shape
    for size in _box_sizes(extents):
        start = tuple(int(rng.integers(0, e - s + 1)) for e, s in zip(extents, size))
        sl = tuple(slice(a, a + s) for a, s in zip(start, size))
        if occupancy[sl].sum() >= n_context:
            local = np.argwhere(occupancy[sl])[:n_context]  # argwhere is C (raster) order
            return local + np.asarray(start), start, size
    raise ViewError(f"cannot place a block of {n_context} cells")


def sample_views(
    grid: MaskUnitGrid,
    n_slots: int,
    mode: str | None = None,
    seed=None,
    context_ratio: float = 0.4,
    target_ratio: float = 0.3,
) -> ViewSpec:
    rng = as_rng(seed)
    if mode is None:
        mode = MODES[int(rng.integers(len(MODES)))]
    if mode not in MODES:
        raise ValueError(f"unknown view mode {mode!r}; expected one of {MODES}")
    total = grid.n_units * n_slots
    n_ctx = round_half_up(context_ratio * total)
    if not 0 < n_ctx < total:
        raise ViewError(f"context of {n_ctx} cells out of {total} leaves no room for a target")
    cap = max(1, round_half_up(target_ratio * total))

    fg = np.zeros(grid.extents, dtype=bool)
    fg.ravel()[grid.units] = True
    occupancy = np.repeat(fg[..., None], n_slots, axis=3)
    xyzt, start, size = context_block(occupancy, n_ctx, rng)
    lin = np.ravel_multi_index(tuple(xyzt[:, :3].T), grid.extents)
    ordinal = np.searchsorted(grid.units, lin)
    context = np.stack([ordinal, xyzt[:, 3]], axis=1)

    ctx_units = np.unique(context[:, 0])
    ctx_slots = np.unique(context[:, 1])
    other_units = np.setdiff1d(np.arange(grid.n_units), ctx_units)
    other_slots = np.setdiff1d(np.arange(n_slots), ctx_slots)

    def grid_cells(units, slots):
        u, t = np.meshgrid(units, slots, indexing="ij")
        return np.stack([u.ravel(), t.ravel()], axis=1)

    if mode == "temporal":
        if other_slots.size == 0:
            raise ViewError("context spans every slot; no temporal target available")
        chosen = []
        for t in rng.permutation(other_slots):
            if chosen and (len(chosen) + 1) * ctx_units.size > cap:
                break
            chosen.append(int(t))
        target = grid_cells(ctx_units, np.sort(chosen))
    else:
        pool = grid_cells(other_units, ctx_slots if mode == "spatial" else other_slots)
        if pool.shape[0] == 0:
            raise ViewError(f"no cells available for a {mode} target")
        pick = np.sort(rng.choice(pool.shape[0], size=min(cap, pool.shape[0]), replace=False))
        target = pool[pick]
    order = np.lexsort((target[:, 1], target[:, 0]))
    return ViewSpec(context, target[order], mode, start, size)


# ---------------------------------------------------------------------------
# clips and tokens


@dataclass(frozen=True, eq=False)
class Clip:
    """Normalised foreground voxels of selected frames, grouped into slots."""

    voxels: np.ndarray  # (H, W, D, n_slots * frames_per_token), background = 0
    slot_times: np.ndarray  # mean absolute frame index of each slot
    frames_per_token: int

    @property
    def n_slots(self) -> int:
        return self.slot_times.size


def volume_stats(v: Volume4D) -> tuple[float, float]:
    fg = v.data[v.mask]
    return float(fg.mean()), float(max(fg.std(), 1e-6))


def prepare_clip(
    v: Volume4D,
    frames: Sequence[int] | None = None,
    frames_per_token: int = 2,
    stats: tuple[float, float] | None = None,
) -> Clip:
    """Gather ``frames`` (absolute indices into ``v``), normalise by foreground
    statistics of the whole volume, zero the background and pad to whole slots."""
    frames = np.arange(v.n_frames) if frames is None else np.asarray(frames, dtype=np.int64)
    if frames.size == 0:
        raise ValueError("empty frame list")
    mu, sd = stats if stats is not None else volume_stats(v)
    data = (v.data[..., frames] - np.float32(mu)) / np.float32(sd)
    data *= v.mask[..., None]
    n_slots = -(-frames.size // frames_per_token)
    pad = n_slots * frames_per_token - frames.size
    if pad:
        data = np.concatenate([data, np.zeros(data.shape[:3] + (pad,), dtype=data.dtype)], axis=3)
    times = np.asarray(frames, dtype=np.float64)
    times = np.concatenate([times, np.full(pad, times[-1])])
    return Clip(np.ascontiguousarray(data, dtype=np.float32), times.reshape(n_slots, frames_per_token).mean(axis=1), frames_per_token)


class TokenCounter:
    """Tally of tokens actually materialised by :func:`encode_view`."""

    def __init__(self):
        self.materialized = 0
        self.calls = 0

    def add(self, n: int):
        self.materialized += int(n)
        self.calls += 1


def gather_tokens(grid: MaskUnitGrid, clip: Clip, cells: np.ndarray) -> np.ndarray:
    """Token inputs for the given cells only: (n_cells, side**3, merge**3 * frames_per_token)."""
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
    u, n, s, tp = grid.unit, grid.merge, grid.side, clip.frames_per_token
    gx, gy, gz = grid.extents
    blocks = clip.voxels.reshape(gx, u, gy, u, gz, u, clip.n_slots, tp)
    ux, uy, uz = np.unravel_index(grid.units[cells[:, 0]], grid.extents)
    sel = blocks[ux, :, uy, :, uz, :, cells[:, 1], :]  # (G, u, u, u, tp)
    g = sel.shape[0]
    sel = sel.reshape(g, s, n, s, n, s, n, tp).transpose(0, 1, 3, 5, 2, 4, 6, 7)
    return np.ascontiguousarray(sel.reshape(g, s**3, n**3 * tp))


def token_positions(grid: MaskUnitGrid, clip_times: np.ndarray, cells: np.ndarray, side: int) -> np.ndarray:
    """(n_cells * side**3, 4) positions: token-centre voxel coords and absolute time."""
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
    step = grid.unit / side
    origin = grid.unit_coords()[cells[:, 0]] * grid.unit  # (G, 3)
    lattice = (np.stack(np.meshgrid(*[np.arange(side)] * 3, indexing="ij"), axis=-1).reshape(-1, 3) + 0.5) * step
    xyz = origin[:, None, :] + lattice[None, :, :]
    t = np.broadcast_to(clip_times[cells[:, 1]][:, None, None], xyz.shape[:2] + (1,))
    return np.concatenate([xyz, t], axis=-1).reshape(-1, 4)


def positional_encoding(pos: np.ndarray, width: int) -> np.ndarray:
    """Concatenated sinusoids: a quarter of the channels each for x, y, z, t."""
    if width % 8:
        raise ValueError(f"encoder width {width} must be a multiple of 8")
    q = width // 4
    parts = [nx.sinusoid(pos[:, a], q, base=100.0) for a in range(3)]
    parts.append(nx.sinusoid(pos[:, 3], q, base=1000.0))
    return np.concatenate(parts, axis=1)


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class Stage:
    depth: int
    width: int
    heads: int
    local: bool = True


DESK_STAGES = (Stage(1, 32, 2, True), Stage(1, 64, 4, True), Stage(1, 128, 4, False))


class HieraEncoder(Module):
    """Stages of pre-norm blocks; unit-local stages attend within a cell, later
    stages attend across all tokens. Between stages tokens are mean-pooled over
    2x2x2 neighbourhoods inside the cell and projected to the next width."""

    def __init__(self, token_dim: int, side: int, stages: Sequence[Stage] = DESK_STAGES, seed=0):
        rng = as_rng(seed)
        stages = tuple(Stage(**s) if isinstance(s, dict) else s for s in stages)
        if side % (2 ** (len(stages) - 1)):
            raise ValueError(f"{side} tokens per cell edge cannot be pooled {len(stages) - 1} times")
        widths = [s.width for s in stages]
        if any(b < a for a, b in zip(widths, widths[1:])):
            raise ValueError("stage widths must be non-decreasing")
        seen_global = False
        for s in stages:
            if s.local and seen_global:
                raise ValueError("unit-local stages must precede global stages")
            seen_global |= not s.local
        self.embed = Linear(token_dim, widths[0], rng)
        self.stages = [[Block(s.width, s.heads, rng) for _ in range(s.depth)] for s in stages]
        self.pools = [Linear(a, b, rng) for a, b in zip(widths, widths[1:])]
        self.norm = LayerNorm(widths[-1])
        self._stages = stages
        self._side = side

    # ``stages`` holds lists of blocks, which Module does not walk on its own
    def named_parameters(self, prefix: str = ""):
        yield from self.embed.named_parameters(prefix + "embed.")
        for i, blocks in enumerate(self.stages):
            for j, block in enumerate(blocks):
                yield from block.named_parameters(f"{prefix}stages.{i}.{j}.")
        for i, pool in enumerate(self.pools):
            yield from pool.named_parameters(f"{prefix}pools.{i}.")
        yield from self.norm.named_parameters(prefix + "norm.")

    @property
    def width(self) -> int:
        return self._stages[0].width

    @property
    def out_width(self) -> int:
        return self._stages[-1].width

    @property
    def side(self) -> int:
        return self._side

    @property
    def out_side(self) -> int:
        return self._side // 2 ** (len(self._stages) - 1)

    def forward(self, tokens: np.ndarray | Tensor, pos: np.ndarray) -> Tensor:
        """``tokens``: (G, side**3, token_dim); ``pos``: (G*side**3, 4). Returns (G*out_side**3, out_width)."""
        tokens = nx.as_tensor(tokens)
        g = tokens.shape[0]
        side = self._side
        x = self.embed(tokens)
        pe = positional_encoding(pos, self.width).reshape(g, side**3, self.width)
        x = x + Tensor(pe)
        for i, (spec, blocks) in enumerate(zip(self._stages, self.stages)):
            if i > 0:
                x = self._pool(x, side, i - 1)
                side //= 2
            n = side**3
            c = spec.width
            if not spec.local:
                x = nx.reshape(x, (1, g * n, c))
            for block in blocks:
                x = block(x)
            x = nx.reshape(x, (g, n, c))
        x = self.norm(x)
        return nx.reshape(x, (g * side**3, self.out_width))

    def _pool(self, x: Tensor, side: int, i: int) -> Tensor:
        g, _, c = x.shape
        h = side // 2
        x = nx.reshape(x, (g, h, 2, h, 2, h, 2, c))
        x = nx.transpose(x, (0, 1, 3, 5, 2, 4, 6, 7))
        x = nx.mean(nx.reshape(x, (g, h**3, 8, c)), axis=2)
        return self.pools[i](x)


class Predictor(Module):
    """Maps context features plus target position queries to target features."""

    def __init__(self, width: int, depth: int = 2, heads: int = 4, seed=0):
        rng = as_rng(seed)
        self.proj_in = Linear(width, width, rng)
        self.query = Tensor(rng.normal(0.0, 0.02, size=width), requires_grad=True)
        self.blocks = [Block(width, heads, rng) for _ in range(depth)]
        self.norm = LayerNorm(width)
        self.proj_out = Linear(width, width, rng)
        self._width = width

    def forward(self, context: Tensor, target_pos: np.ndarray) -> Tensor:
        c = self._width
        n_t = target_pos.shape[0]
        ctx = self.proj_in(context)
        q = nx.broadcast_to(nx.reshape(self.query, (1, c)), (n_t, c)) + Tensor(positional_encoding(target_pos, c))
        x = nx.reshape(nx.concat([ctx, q], axis=0), (1, ctx.shape[0] + n_t, c))
        for block in self.blocks:
            x = block(x)
        x = nx.reshape(self.norm(x), (ctx.shape[0] + n_t, c))
        return self.proj_out(nx.take(x, np.arange(ctx.shape[0], ctx.shape[0] + n_t), axis=0))


def encode_view(
    model: HieraEncoder,
    grid: MaskUnitGrid,
    clip: Clip,
    cells: np.ndarray,
    counter: TokenCounter | None = None,
) -> Tensor:
    """Encode only the listed cells; returns (n_cells * out_side**3, out_width)."""
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
    tokens = gather_tokens(grid, clip, cells)
    if counter is not None:
        counter.add(tokens.shape[0] * tokens.shape[1])
    pos = token_positions(grid, clip.slot_times, cells, grid.side)
    return model.forward(tokens, pos)


# ---------------------------------------------------------------------------
# training state


@dataclass(eq=False)
class EncoderState:
    student: HieraEncoder
    teacher: HieraEncoder
    predictor: Predictor
    tau: float = 0.996
    opt: nx.AdamW | None = None
    step: int = 0

    @classmethod
    def create(
        cls,
        grid: MaskUnitGrid,
        stages: Sequence[Stage] = DESK_STAGES,
        predictor_depth: int = 2,
        predictor_heads: int = 4,
        tau: float = 0.996,
        lr: float = 1e-3,
        weight_decay: float = 0.05,
        seed=0,
    ) -> "EncoderState":
        rng = as_rng(seed)
        token_dim = grid.merge**3 * grid.frames_per_token
        student = HieraEncoder(token_dim, grid.side, stages, seed=rng)
        teacher = copy.deepcopy(student).requires_grad_(False)
        predictor = Predictor(student.out_width, predictor_depth, predictor_heads, seed=rng)
        params = {f"student.{k}": v for k, v in student.named_parameters()}
        params.update({f"predictor.{k}": v for k, v in predictor.named_parameters()})
        opt = nx.AdamW(params, lr=lr, weight_decay=weight_decay)
        return cls(student, teacher, predictor, tau, opt)

    def trainable(self) -> dict[str, Tensor]:
        return self.opt.params if self.opt is not None else {}


def ema_update(teacher: Module | EncoderState, student: Module | None = None, tau: float | None = None):
    """``teacher <- tau * teacher + (1 - tau) * student``, in place."""
    if isinstance(teacher, EncoderState):
        state = teacher
        teacher, student = state.teacher, state.student
        tau = state.tau if tau is None else tau
    if tau is None or not 0.0 <= tau <= 1.0:
        raise ValueError(f"EMA rate must lie in [0, 1], got {tau}")
    sp = student.parameters()
    for name, tp in teacher.named_parameters():
        s = sp[name]
        if s.shape != tp.shape:
            raise nx.ShapeError(f"ema_update[{name}]", tp.shape, s.shape)
        dt = tp.data.dtype.type
        tp.data = dt(tau) * tp.data + dt(1.0 - tau) * s.data.astype(tp.data.dtype)
    return teacher


def target_positions(grid: MaskUnitGrid, clip: Clip, cells: np.ndarray, side: int) -> np.ndarray:
    return token_positions(grid, clip.slot_times, cells, side)


def jepa_loss(state: EncoderState, grid: MaskUnitGrid, clip: Clip, view: ViewSpec, counter: TokenCounter | None = None) -> Tensor:
    """Smooth-L1 between predicted and teacher features at the target cells."""
    h_c = encode_view(state.student, grid, clip, view.context, counter)
    with nx.no_grad():
        h_t = encode_view(state.teacher, grid, clip, view.target, counter)
    pred = state.predictor.forward(h_c, target_positions(grid, clip, view.target, state.student.out_side))
    return nx.smooth_l1(pred, h_t, 1.0)


def jepa_step(
    state: EncoderState,
    grid: MaskUnitGrid,
    clip: Clip,
    seed=None,
    mode: str | None = None,
    context_ratio: float = 0.4,
    target_ratio: float = 0.3,
    counter: TokenCounter | None = None,
) -> float:
    """Sample views, regress teacher features, step student + predictor, then EMA.

    With ``mode=None`` the mode is drawn uniformly; modes that cannot be
    realised for the sampled block are replaced by the next feasible one.
    """
    rng = as_rng(seed)
    modes = [mode] if mode is not None else list(rng.permutation(MODES))
    view = None
    last_err = None
    for m in modes:
        try:
            view = sample_views(grid, clip.n_slots, m, rng, context_ratio, target_ratio)
            break
        except ViewError as err:
            last_err = err
    if view is None:
        raise last_err
    state.opt.zero_grad()
    loss = jepa_loss(state, grid, clip, view, counter)
    nx.backward(loss)
    state.opt.step()
    ema_update(state)
    state.step += 1
    return loss.item()


# ---------------------------------------------------------------------------
# token budget


@dataclass(frozen=True)
class TokenBudget:
    dense: int
    sparse: int

    @property
    def ratio(self) -> float:
        return self.sparse / self.dense

    def as_dict(self) -> dict:
        return {"tokens_dense": self.dense, "tokens_sparse": self.sparse, "ratio": self.ratio}


def count_tokens(
    grid: MaskUnitGrid,
    n_slots: int,
    cells: np.ndarray | None = None,
    dense_baseline: bool = True,
) -> TokenBudget:
    """Dense = every candidate unit in every slot (or only foreground units when
    ``dense_baseline`` is False); sparse = the given cells (default: all foreground)."""
    tpc = grid.tokens_per_cell
    dense_units = grid.n_candidates if dense_baseline else grid.n_units
    n_cells = grid.n_units * n_slots if cells is None else int(np.asarray(cells).reshape(-1, 2).shape[0])
    return TokenBudget(dense_units * n_slots * tpc, n_cells * tpc)


def full_view(grid: MaskUnitGrid, n_slots: int) -> np.ndarray:
    return grid.all_cells(n_slots)


def describe(state: EncoderState, grid: MaskUnitGrid, clip: Clip, counter: TokenCounter | None = None) -> np.ndarray:
    """Mean-pooled student features over the full foreground view."""
    with nx.no_grad():
        h = encode_view(state.student, grid, clip, full_view(grid, clip.n_slots), counter)
    return h.data.mean(axis=0)
