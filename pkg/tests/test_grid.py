import numpy as np
import pytest

from dynsparse.grid import TokenGrid


def test_size_and_dims():
    grid = TokenGrid(3, 4, 5)
    assert grid.size == 60
    assert grid.dims == (3, 4, 5)


def test_frame_major_flattening():
    grid = TokenGrid(2, 3, 4)
    # width fastest, then height, frames slowest
    assert grid.flat_index(0, 0, 0) == 0
    assert grid.flat_index(0, 0, 3) == 3
    assert grid.flat_index(0, 1, 0) == 4
    assert grid.flat_index(1, 0, 0) == 12
    assert grid.flat_index(1, 2, 3) == 23


def test_coords_roundtrip():
    grid = TokenGrid(3, 5, 7)
    for flat in range(grid.size):
        assert grid.flat_index(*grid.coords(flat)) == flat


def test_coords_array_matches_scalar():
    grid = TokenGrid(2, 4, 3)
    arr = grid.coords_array()
    for flat in range(grid.size):
        assert tuple(arr[flat]) == grid.coords(flat)


@pytest.mark.parametrize("dims", [(0, 1, 1), (1, -2, 1), (1, 1, 0)])
def test_rejects_nonpositive(dims):
    with pytest.raises(ValueError):
        TokenGrid(*dims)


def test_out_of_range_lookups():
    grid = TokenGrid(2, 2, 2)
    with pytest.raises(ValueError):
        grid.flat_index(2, 0, 0)
    with pytest.raises(ValueError):
        grid.coords(8)
