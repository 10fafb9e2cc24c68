import numpy as np
import pytest
from shapely.geometry import box

from popgrid.grid import AdminArea, Cell, GridTessellation


def square_cell(cid: str, x0_km: float, y0_km: float, side_km: float = 1.0) -> Cell:
    poly = box(x0_km * 1000, y0_km * 1000, (x0_km + side_km) * 1000, (y0_km + side_km) * 1000)
    return Cell(id=cid, polygon=poly, surface_km2=side_km * side_km)


def square_area(aid: str, x0_km: float, y0_km: float, w_km: float, h_km: float, population: float) -> AdminArea:
    poly = box(x0_km * 1000, y0_km * 1000, (x0_km + w_km) * 1000, (y0_km + h_km) * 1000)
    return AdminArea(id=aid, polygon=poly, surface_km2=w_km * h_km, population=population)


def unit_grid(nx: int, ny: int, side_km: float = 1.0) -> GridTessellation:
    cells = []
    for iy in range(ny):
        for ix in range(nx):
            cells.append(square_cell(f"c{iy * nx + ix:04d}", ix * side_km, iy * side_km, side_km))
    return GridTessellation(cells)


@pytest.fixture
def grid_2x2() -> GridTessellation:
    return unit_grid(2, 2)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)
