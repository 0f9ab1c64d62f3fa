"""4D volumes, foreground patch grids, synthetic data and the SL4D file format.

SL4D layout (all integers little-endian)::

    offset 0   4 bytes   magic b"SL4D"
    offset 4   u16       format version (1)
    offset 6   4 x u32   H, W, D, T
    offset 22  ceil(H*W*D / 8) bytes   brain mask, np.packbits(bitorder="little")
                                       over the C-ordered (H, W, D) mask
    then       T blocks of H*W*D float32 (little-endian), one block per frame,
               each block C-ordered over (H, W, D)

Frames are stored contiguously so any frame range can be read with one seek.
"""

from __future__ import annotations

import dataclasses
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

MAGIC = b"SL4D"
VERSION = 1
_HEADER = struct.Struct("<4sH4I")


class VolumeFormatError(ValueError):
    pass


class EmptyForegroundError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Volume4D:
    """Intensities in (H, W, D, T) order plus a boolean (H, W, D) brain mask."""

    data: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        mask = np.ascontiguousarray(self.mask, dtype=bool)
        if data.ndim != 4:
            raise ValueError(f"volume data must be 4-D (H, W, D, T), got shape {data.shape}")
        if mask.shape != data.shape[:3]:
            raise ValueError(f"mask shape {mask.shape} does not match spatial dims {data.shape[:3]}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "mask", mask)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape[:3]

    @property
    def n_frames(self) -> int:
        return self.data.shape[3]

    def frames(self, frame_index: Sequence[int] | slice) -> "Volume4D":
        return Volume4D(self.data[..., frame_index], self.mask)

    def masked(self) -> np.ndarray:
        """Data with background voxels forced to zero."""
        return self.data * self.mask[..., None]


def pad_volume(v: Volume4D, multiple: int) -> Volume4D:
    """Zero-pad spatial dims up to the next multiple (mask=False in the pad)."""
    pads = [(0, (-s) % multiple) for s in v.dims]
    if not any(p for _, p in pads):
        return v
    return Volume4D(np.pad(v.data, pads + [(0, 0)]), np.pad(v.mask, pads))


def sphere_mask(dims: Sequence[int], radius) -> np.ndarray:
    """Ellipsoid centred in the volume; voxel centres at ``i + 0.5``."""
    radii = np.broadcast_to(np.asarray(radius, dtype=np.float64), (3,))
    if np.any(radii <= 0):
        raise ValueError("mask radius must be positive")
    axes = [(np.arange(n) + 0.5 - n / 2.0) / r for n, r in zip(dims, radii)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij", sparse=True)
    return (gx**2 + gy**2 + gz**2) <= 1.0


# ---------------------------------------------------------------------------
# spatial patches


@dataclass(frozen=True, eq=False)
class PatchGrid:
    patch: int
    extents: tuple[int, int, int]
    indices: np.ndarray  # sorted linear indices of foreground patches

    @property
    def n_candidates(self) -> int:
        return int(np.prod(self.extents))

    @property
    def n_foreground(self) -> int:
        return int(self.indices.size)

    def coords(self) -> np.ndarray:
        return np.stack(np.unravel_index(self.indices, self.extents), axis=1)


def _block_any(mask: np.ndarray, u: int) -> np.ndarray:
    h, w, d = mask.shape
    return mask.reshape(h // u, u, w // u, u, d // u, u).any(axis=(1, 3, 5))


def patchify_spatial(v: Volume4D, patch: int) -> PatchGrid:
    if patch < 1:
        raise ValueError("patch size must be positive")
    if any(s % patch for s in v.dims):
        raise ValueError(f"patch size {patch} does not divide dims {v.dims}; pad the volume first")
    fg = _block_any(v.mask, patch)
    idx = np.flatnonzero(fg.ravel())
    if idx.size == 0:
        raise EmptyForegroundError("no brain voxels")
    return PatchGrid(patch, tuple(int(e) for e in fg.shape), idx)


@dataclass(frozen=True, eq=False)
class PatchSeries:
    values: np.ndarray  # (b, T)
    grid: PatchGrid

    @property
    def n_patches(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


def zscore_rows(x: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    mu = x.mean(axis=1, keepdims=True)
    sd = np.maximum(x.std(axis=1, keepdims=True), floor)
    return (x - mu) / sd


def extract_series(v: Volume4D, grid: PatchGrid, normalize: bool = True) -> PatchSeries:
    """Per-patch mean intensity per frame, one row per foreground patch.

    The mean runs over all ``patch**3`` voxels with background taken as zero.
    """
    u = grid.patch
    gh, gw, gd = grid.extents
    n_t = v.n_frames
    out = np.empty((grid.n_foreground, n_t), dtype=np.float64)
    step = 16
    for t0 in range(0, n_t, step):
        block = v.data[..., t0 : t0 + step] * v.mask[..., None]
        nt = block.shape[-1]
        means = block.reshape(gh, u, gw, u, gd, u, nt).mean(axis=(1, 3, 5), dtype=np.float64)
        out[:, t0 : t0 + nt] = means.reshape(-1, nt)[grid.indices]
    if normalize:
        out = zscore_rows(out)
    return PatchSeries(out.astype(np.float32), grid)


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    dims: tuple[int, int, int] = (48, 48, 48)
    frames: int = 60
    radius: float | tuple[float, float, float] = 20.0
    n_sources: int = 2
    noise: float = 0.5
    bursts: tuple[tuple[int, int], ...] = ()
    burst_amplitude: float = 4.0
    label: int = 0
    n_classes: int = 2


def _blob(coords, center, width):
    d2 = sum((c - x) ** 2 for c, x in zip(coords, center))
    return np.exp(-0.5 * d2 / width**2)


def _class_center(label: int, n_classes: int, radii: np.ndarray, dims) -> np.ndarray:
    # classes sit on a ring in the axial plane, half-way to the mask edge
    ang = 2.0 * np.pi * label / n_classes
    offset = 0.5 * radii * np.array([np.cos(ang), np.sin(ang), 0.0])
    return np.asarray(dims, dtype=np.float64) / 2.0 + offset


def make_synthetic(spec: SyntheticSpec, seed: int) -> tuple[Volume4D, dict]:
    """Mixture of smooth spatial sources times latent time courses plus noise.

    Burst ranges add a class-specific spatial blob with a strong transient.
    Returns the volume and its ground truth (``label``, ``bursts``,
    ``burst_frames``, ``time_courses``).
    """
    rng = np.random.default_rng(seed)
    dims = tuple(int(d) for d in spec.dims)
    radii = np.broadcast_to(np.asarray(spec.radius, dtype=np.float64), (3,)).copy()
    if np.any(radii <= 0):
        raise ValueError("mask radius must be positive")
    if not 0 <= spec.label < spec.n_classes:
        raise ValueError(f"label {spec.label} outside [0, {spec.n_classes})")
    n_t = spec.frames
    mask = sphere_mask(dims, radii)
    coords = np.meshgrid(*[np.arange(n) + 0.5 for n in dims], indexing="ij", sparse=True)
    centre = np.asarray(dims, dtype=np.float64) / 2.0

    t = np.arange(n_t, dtype=np.float64)
    data = np.zeros(dims + (n_t,), dtype=np.float32)
    courses = []
    for _ in range(spec.n_sources):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        loc = centre + direction * radii * rng.uniform(0.0, 0.6)
        smap = _blob(coords, loc, 0.35 * radii.mean()).astype(np.float32)
        freqs = rng.uniform(0.01, 0.08, size=3)
        phases = rng.uniform(0, 2 * np.pi, size=3)
        tc = np.sin(2 * np.pi * freqs[:, None] * t[None] + phases[:, None]).sum(axis=0)
        tc = (tc - tc.mean()) / max(tc.std(), 1e-6)
        courses.append(tc)
        data += smap[..., None] * tc.astype(np.float32)[None, None, None, :]

    burst_frames: list[int] = []
    if spec.bursts:
        cmap = _blob(coords, _class_center(spec.label, spec.n_classes, radii, dims), 0.3 * radii.mean())
        cmap = cmap.astype(np.float32)
        for start, stop in spec.bursts:
            if not 0 <= start < stop <= n_t:
                raise ValueError(f"burst range {(start, stop)} outside [0, {n_t})")
            length = stop - start
            phase = rng.uniform(0, 2 * np.pi)
            shape = np.sin(np.pi * (np.arange(length) + 0.5) / length) * (1.0 + 0.3 * np.sin(phase + np.arange(length)))
            data[..., start:stop] += spec.burst_amplitude * cmap[..., None] * shape.astype(np.float32)
            burst_frames.extend(range(start, stop))

    if spec.noise > 0:
        data += (spec.noise * rng.standard_normal(size=data.shape)).astype(np.float32)
    data *= mask[..., None]
    truth = {
        "label": int(spec.label),
        "bursts": [list(map(int, b)) for b in spec.bursts],
        "burst_frames": sorted(set(burst_frames)),
        "time_courses": np.asarray(courses),
    }
    return Volume4D(data, mask), truth


def planted_burst_specs(
    base: SyntheticSpec, n: int, seed: int, window: int, n_bursts: int = 1
) -> list[SyntheticSpec]:
    """Specs with labels alternating over classes and bursts on random whole windows."""
    rng = np.random.default_rng(seed)
    n_windows = base.frames // window
    out = []
    for i in range(n):
        chosen = np.sort(rng.choice(n_windows, size=n_bursts, replace=False))
        bursts = tuple((int(w) * window, int(w + 1) * window) for w in chosen)
        out.append(dataclasses.replace(base, bursts=bursts, label=i % base.n_classes))
    return out


# ---------------------------------------------------------------------------
# SL4D I/O


def save_volume(path: str | os.PathLike, v: Volume4D) -> None:
    h, w, d = v.dims
    n_t = v.n_frames
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, h, w, d, n_t))
        fh.write(np.packbits(v.mask.ravel(), bitorder="little").tobytes())
        frames = np.moveaxis(v.data, 3, 0).astype("<f4", copy=False)
        fh.write(np.ascontiguousarray(frames).tobytes())


def _read_header(fh, path):
    raw = fh.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise VolumeFormatError(f"{path}: truncated header")
    magic, version, h, w, d, n_t = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise VolumeFormatError(f"{path}: unsupported version {version}")
    return h, w, d, n_t


def read_header(path: str | os.PathLike) -> tuple[int, int, int, int]:
    with open(path, "rb") as fh:
        return _read_header(fh, path)


def load_volume(path: str | os.PathLike, frames: tuple[int, int] | None = None) -> Volume4D:
    """Load a volume; ``frames=(start, stop)`` reads only that frame range."""
    with open(path, "rb") as fh:
        h, w, d, n_t = _read_header(fh, path)
        n_vox = h * w * d
        mask_bytes = math.ceil(n_vox / 8)
        expected = _HEADER.size + mask_bytes + 4 * n_vox * n_t
        size = os.fstat(fh.fileno()).st_size
        if size != expected:
            raise VolumeFormatError(f"{path}: expected {expected} bytes, found {size}")
        mask = np.unpackbits(np.frombuffer(fh.read(mask_bytes), dtype=np.uint8), bitorder="little")
        mask = mask[:n_vox].astype(bool).reshape(h, w, d)
        start, stop = (0, n_t) if frames is None else frames
        if not 0 <= start <= stop <= n_t:
            raise ValueError(f"frame range {(start, stop)} outside [0, {n_t}]")
        fh.seek(_HEADER.size + mask_bytes + 4 * n_vox * start)
        raw = fh.read(4 * n_vox * (stop - start))
    block = np.frombuffer(raw, dtype="<f4").reshape(stop - start, h, w, d)
    return Volume4D(np.moveaxis(block, 0, 3).astype(np.float32), mask)


def iter_synthetic(specs: Sequence[SyntheticSpec], seed: int) -> Iterator[tuple[Volume4D, dict]]:
    for i, spec in enumerate(specs):
        yield make_synthetic(spec, seed * 100003 + i)
