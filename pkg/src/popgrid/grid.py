"""Spatial tessellation, administrative areas, and census-to-grid reallocation.

Polygons live in planar meter coordinates; surfaces are km² and are stored
rather than recomputed, but checked against the polygon area at load time.
Overlaps below ``OVERLAP_FLOOR_KM2`` are treated as numerical noise.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import shapely
from shapely.geometry import Polygon
from shapely.strtree import STRtree

from .errors import GeometryError, InputError

M2_PER_KM2 = 1e6
OVERLAP_FLOOR_KM2 = 1e-9
SURFACE_RTOL = 1e-6

GRID_HEADER = ("cell_id", "wkt_polygon", "surface_km2")
ADMIN_HEADER = ("area_id", "wkt_polygon", "surface_km2", "population")


@dataclass(frozen=True)
class Cell:
    id: str
    polygon: Polygon
    surface_km2: float


@dataclass(frozen=True)
class AdminArea:
    id: str
    polygon: Polygon
    surface_km2: float
    population: float


@dataclass(frozen=True)
class PopulationDensityMap:
    """Per-cell density in inhabitants/km²; timestamp set for dynamic maps."""

    values: dict[str, float]
    timestamp: float | None = None

    def to_array(self, cell_ids: Sequence[str]) -> np.ndarray:
        try:
            return np.array([self.values[c] for c in cell_ids], dtype=float)
        except KeyError as exc:
            raise InputError(f"density map is missing cell {exc.args[0]!r}") from exc


class GridTessellation:
    """Ordered, non-overlapping cell collection; cell order is the array order
    used by every series in the pipeline."""

    def __init__(self, cells: Iterable[Cell]):
        self.cells: tuple[Cell, ...] = tuple(cells)
        self._index: dict[str, int] | None = None
        self._adjacency: tuple[tuple[int, ...], ...] | None = None

    def __len__(self) -> int:
        return len(self.cells)

    def ids(self) -> tuple[str, ...]:
        return tuple(c.id for c in self.cells)

    def surfaces(self) -> np.ndarray:
        return np.array([c.surface_km2 for c in self.cells], dtype=float)

    def index_of(self, cell_id: str) -> int:
        if self._index is None:
            index: dict[str, int] = {}
            for i, c in enumerate(self.cells):
                if c.id in index:
                    raise InputError(f"duplicate cell id {c.id!r} in tessellation")
                index[c.id] = i
            self._index = index
        try:
            return self._index[cell_id]
        except KeyError:
            raise InputError(f"unknown cell id {cell_id!r}") from None

    def adjacency(self) -> tuple[tuple[int, ...], ...]:
        """Neighbors sharing a boundary of positive length (corner contacts excluded)."""
        if self._adjacency is None:
            polys = [c.polygon for c in self.cells]
            tree = STRtree(polys)
            neighbors: list[set[int]] = [set() for _ in polys]
            for i, poly in enumerate(polys):
                for j in tree.query(poly):
                    j = int(j)
                    if j <= i:
                        continue
                    shared = poly.boundary.intersection(polys[j].boundary)
                    if shared.length > 0.0:
                        neighbors[i].add(j)
                        neighbors[j].add(i)
            self._adjacency = tuple(tuple(sorted(n)) for n in neighbors)
        return self._adjacency


@dataclass(frozen=True)
class Violation:
    kind: str  # duplicate_id | degenerate_polygon | surface_mismatch | overlap
    ids: tuple[str, ...]
    detail: str


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __str__(self) -> str:
        if self.ok:
            return "tessellation ok"
        return "\n".join(f"{v.kind}: {','.join(v.ids)} ({v.detail})" for v in self.violations)


def polygon_area_km2(polygon: Polygon) -> float:
    return polygon.area / M2_PER_KM2


def _check_polygon(owner_id: str, polygon: Polygon) -> None:
    if polygon.is_empty or not polygon.is_valid:
        raise GeometryError(f"invalid polygon for id {owner_id!r}")


def intersect_area(cell: Cell, areas: Iterable[AdminArea]) -> list[tuple[str, float]]:
    """Overlap surface (km²) of a cell with each admin area it touches.

    Overlaps at or below the noise floor are dropped; the returned order
    follows the input area order.
    """
    _check_polygon(cell.id, cell.polygon)
    out: list[tuple[str, float]] = []
    for area in areas:
        _check_polygon(area.id, area.polygon)
        overlap = cell.polygon.intersection(area.polygon).area / M2_PER_KM2
        if overlap > OVERLAP_FLOOR_KM2:
            out.append((area.id, overlap))
    return out


def census_to_grid(grid: GridTessellation, areas: Sequence[AdminArea]) -> PopulationDensityMap:
    """Redistribute area populations onto the grid assuming uniform density
    inside each admin area, yielding inhabitants/km² per cell."""
    for area in areas:
        if area.surface_km2 <= 0:
            raise InputError(f"admin area {area.id!r} has zero surface")
        if area.population < 0:
            raise InputError(f"admin area {area.id!r} has negative population")
        _check_polygon(area.id, area.polygon)

    area_polys = [a.polygon for a in areas]
    tree = STRtree(area_polys) if areas else None
    values: dict[str, float] = {}
    for cell in grid.cells:
        _check_polygon(cell.id, cell.polygon)
        if cell.surface_km2 <= 0:
            raise InputError(f"cell {cell.id!r} has zero surface")
        total = 0.0
        if tree is not None:
            for j in sorted(int(j) for j in tree.query(cell.polygon)):
                area = areas[j]
                overlap = cell.polygon.intersection(area.polygon).area / M2_PER_KM2
                if overlap > OVERLAP_FLOOR_KM2:
                    total += area.population * overlap / area.surface_km2
        values[cell.id] = total / cell.surface_km2
    return PopulationDensityMap(values=values)


def validate_tessellation(grid: GridTessellation) -> ValidationReport:
    """Report-only check of tessellation invariants: unique ids, simple
    polygons, stored surfaces matching geometry, pairwise non-overlap."""
    report = ValidationReport()

    seen: dict[str, int] = {}
    for cell in grid.cells:
        if cell.id in seen:
            if seen[cell.id] == 1:
                report.violations.append(
                    Violation("duplicate_id", (cell.id,), "cell id occurs more than once")
                )
            seen[cell.id] += 1
        else:
            seen[cell.id] = 1

    usable: list[int] = []
    for i, cell in enumerate(grid.cells):
        if cell.polygon.is_empty or not cell.polygon.is_valid or cell.polygon.area <= 0:
            report.violations.append(
                Violation("degenerate_polygon", (cell.id,), "empty, self-intersecting or zero-area")
            )
            continue
        usable.append(i)
        area = polygon_area_km2(cell.polygon)
        if cell.surface_km2 <= 0 or abs(area - cell.surface_km2) > SURFACE_RTOL * max(area, cell.surface_km2):
            report.violations.append(
                Violation(
                    "surface_mismatch",
                    (cell.id,),
                    f"stored {cell.surface_km2:.9g} km² vs polygon {area:.9g} km²",
                )
            )

    polys = [grid.cells[i].polygon for i in usable]
    if polys:
        tree = STRtree(polys)
        for a, poly in enumerate(polys):
            for b in tree.query(poly):
                b = int(b)
                if b <= a:
                    continue
                shared = poly.intersection(polys[b]).area / M2_PER_KM2
                if shared > OVERLAP_FLOOR_KM2:
                    report.violations.append(
                        Violation(
                            "overlap",
                            (grid.cells[usable[a]].id, grid.cells[usable[b]].id),
                            f"interior overlap {shared:.12g} km²",
                        )
                    )
    return report


# ---------------------------------------------------------------------------
# CSV interfaces

def _read_rows(path: str, header: tuple[str, ...]) -> Iterable[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != header:
            raise InputError(f"{path}: expected header {','.join(header)}")
        yield from reader


def _parse_polygon(owner_id: str, text: str) -> Polygon:
    try:
        geom = shapely.from_wkt(text)
    except Exception as exc:  # shapely raises a mix of error types
        raise GeometryError(f"cannot parse WKT polygon for id {owner_id!r}: {exc}") from exc
    if not isinstance(geom, Polygon):
        raise GeometryError(f"geometry for id {owner_id!r} is not a polygon")
    return geom


def load_grid_csv(path: str) -> GridTessellation:
    cells = []
    for row in _read_rows(path, GRID_HEADER):
        cid = row["cell_id"]
        poly = _parse_polygon(cid, row["wkt_polygon"])
        _check_polygon(cid, poly)
        surface = float(row["surface_km2"])
        area = polygon_area_km2(poly)
        if surface <= 0 or abs(area - surface) > SURFACE_RTOL * max(area, surface):
            raise GeometryError(
                f"cell {cid!r}: stored surface {surface} km² disagrees with polygon area {area} km²"
            )
        cells.append(Cell(id=cid, polygon=poly, surface_km2=surface))
    return GridTessellation(cells)


def write_grid_csv(path: str, grid: GridTessellation) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(GRID_HEADER)
        for cell in grid.cells:
            writer.writerow(
                [cell.id, shapely.to_wkt(cell.polygon, rounding_precision=-1), repr(float(cell.surface_km2))]
            )


def load_admin_csv(path: str) -> list[AdminArea]:
    areas = []
    for row in _read_rows(path, ADMIN_HEADER):
        aid = row["area_id"]
        poly = _parse_polygon(aid, row["wkt_polygon"])
        _check_polygon(aid, poly)
        surface = float(row["surface_km2"])
        population = float(row["population"])
        if surface <= 0:
            raise InputError(f"admin area {aid!r} has zero surface")
        if population < 0:
            raise InputError(f"admin area {aid!r} has negative population")
        areas.append(AdminArea(id=aid, polygon=poly, surface_km2=surface, population=population))
    return areas


def write_admin_csv(path: str, areas: Sequence[AdminArea]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(ADMIN_HEADER)
        for a in areas:
            writer.writerow(
                [
                    a.id,
                    shapely.to_wkt(a.polygon, rounding_precision=-1),
                    repr(float(a.surface_km2)),
                    repr(float(a.population)),
                ]
            )


def write_density_csv(path: str, density: PopulationDensityMap) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cell_id", "density_per_km2"])
        for cid, value in density.values.items():
            writer.writerow([cid, repr(float(value))])


def load_density_csv(path: str) -> PopulationDensityMap:
    values: dict[str, float] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != ("cell_id", "density_per_km2"):
            raise InputError(f"{path}: expected header cell_id,density_per_km2")
        for row in reader:
            values[row["cell_id"]] = float(row["density_per_km2"])
    return PopulationDensityMap(values=values)
