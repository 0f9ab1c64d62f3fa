"""Recompute the frozen reference values from the loop oracles."""

import pytest

from oracles import FROZEN, count_foreground_blocks


@pytest.mark.parametrize(
    "key,dims,radius,edge",
    [
        ("paper_full_sphere_b", (96, 96, 96), 40.0, 8),
        ("paper_full_sphere_units", (96, 96, 96), 40.0, 24),
        ("desk_sphere_b", (48, 48, 48), 18.0, 8),
        ("desk_sphere_units", (48, 48, 48), 18.0, 12),
    ],
)
def test_frozen_values_recompute(key, dims, radius, edge):
    assert count_foreground_blocks(dims, radius, edge) == FROZEN[key]


def test_full_cube_counts():
    assert count_foreground_blocks((16, 16, 16), 100.0, 8) == 8
    assert count_foreground_blocks((16, 16, 16), 0.1, 8) == 0
