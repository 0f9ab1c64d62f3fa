"""Independent reference implementations used to check the library.

These avoid the library's vectorised code paths on purpose: plain loops over
voxels, patches, windows and frames.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def voxel_in_sphere(i: int, j: int, k: int, dims, radius: float) -> bool:
    # voxel centres at index + 0.5, sphere centred at dims / 2
    c = [(i + 0.5) - dims[0] / 2, (j + 0.5) - dims[1] / 2, (k + 0.5) - dims[2] / 2]
    return c[0] ** 2 + c[1] ** 2 + c[2] ** 2 <= radius**2


def count_foreground_blocks(dims, radius: float, edge: int) -> int:
    """Blocks of ``edge``^3 voxels containing at least one in-sphere voxel."""
    count = 0
    for bx, by, bz in itertools.product(*(range(d // edge) for d in dims)):
        hit = False
        for i in range(bx * edge, (bx + 1) * edge):
            for j in range(by * edge, (by + 1) * edge):
                for k in range(bz * edge, (bz + 1) * edge):
                    if voxel_in_sphere(i, j, k, dims, radius):
                        hit = True
                        break
                if hit:
                    break
            if hit:
                break
        count += hit
    return count


def patch_means(data: np.ndarray, edge: int, foreground: list[int]) -> np.ndarray:
    """Mean over every voxel of each listed patch, frame by frame."""
    h, w, d, t = data.shape
    ext = (h // edge, w // edge, d // edge)
    out = np.zeros((len(foreground), t))
    for row, idx in enumerate(foreground):
        bx, rem = divmod(idx, ext[1] * ext[2])
        by, bz = divmod(rem, ext[2])
        for f in range(t):
            total = 0.0
            for i in range(bx * edge, (bx + 1) * edge):
                for j in range(by * edge, (by + 1) * edge):
                    for k in range(bz * edge, (bz + 1) * edge):
                        total += float(data[i, j, k, f])
            out[row, f] = total / edge**3
    return out


def mutual_scores(predict, values: np.ndarray, window: int) -> list[float]:
    """Literal M-pass score: keep window m visible, reconstruct, average the
    per-window MSE of every other window, negate.

    ``predict(token_values, masked_flags)`` maps (b*M, p) tokens in
    patch-major order to reconstructions of the same shape.
    """
    b, t = values.shape
    m_total = math.ceil(t / window)
    padded = np.zeros((b, m_total * window))
    padded[:, :t] = values
    tokens = np.zeros((b * m_total, window))
    owner = []
    for i in range(b):
        for m in range(m_total):
            tokens[i * m_total + m] = padded[i, m * window : (m + 1) * window]
            owner.append(m)
    scores = []
    for m in range(m_total):
        masked = np.array([o != m for o in owner])
        pred = predict(tokens, masked)
        errors = []
        for j in range(m_total):
            if j == m:
                continue
            sq, n = 0.0, 0
            for row, o in enumerate(owner):
                if o == j:
                    for c in range(window):
                        sq += (float(pred[row, c]) - tokens[row, c]) ** 2
                        n += 1
            errors.append(sq / n)
        scores.append(-sum(errors) / len(errors))
    return scores


def variance_selection(values: np.ndarray, window: int, k: int) -> list[int]:
    """Naive O(T^2 b) lowest-mean-correlation window choice."""
    b, t = values.shape

    def corr(u, v):
        mu, mv = sum(u) / b, sum(v) / b
        cu = [x - mu for x in u]
        cv = [x - mv for x in v]
        su = math.sqrt(sum(x * x for x in cu))
        sv = math.sqrt(sum(x * x for x in cv))
        if su == 0 or sv == 0:
            return 0.0
        return sum(x * y for x, y in zip(cu, cv)) / (su * sv)

    cols = [list(values[:, f]) for f in range(t)]
    mean_corr = []
    for f in range(t):
        others = [corr(cols[f], cols[g]) for g in range(t) if g != f]
        mean_corr.append(sum(others) / len(others))
    m_total = math.ceil(t / window)
    win = []
    for m in range(m_total):
        frames = range(m * window, min(t, (m + 1) * window))
        win.append(sum(mean_corr[f] for f in frames) / len(frames))
    order = sorted(range(m_total), key=lambda m: (win[m], m))
    return sorted(order[:k])


def smooth_l1(d: float, beta: float) -> float:
    return 0.5 * d * d / beta if abs(d) < beta else abs(d) - 0.5 * beta


# Values produced by the oracles above, frozen so regressions in either side
# show up. Recomputed in test_oracles.py.
FROZEN = {
    "paper_full_sphere_b": 696,  # 96^3, radius 40, 8-voxel patches
    "paper_full_sphere_units": 56,  # 96^3, radius 40, 24-voxel units
    "desk_sphere_b": 88,  # 48^3, radius 18, 8-voxel patches
    "desk_sphere_units": 56,  # 48^3, radius 18, 12-voxel units
}
