"""Uniform cell-centred grids, domain masks and configurations.

Every domain lives inside an axis-aligned box of ``n`` cells per axis.  A
cell belongs to the domain when its centre satisfies the shape predicate;
cells of the box outside the domain (and everything beyond the box) carry
the zero exterior value.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

SHAPES = ("interval", "rectangle", "disk", "annulus", "sector")


class DomainError(ValueError):
    """Raised for invalid or degenerate domain specifications."""


@dataclass(frozen=True)
class GridSpec:
    dim: int
    n: int
    h_cell: float
    origin: tuple

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise DomainError(f"dim must be 1 or 2, got {self.dim}")
        if self.n < 2:
            raise DomainError(f"need at least 2 cells per axis, got {self.n}")
        if not self.h_cell > 0:
            raise DomainError(f"cell width must be positive, got {self.h_cell}")
        if len(self.origin) != self.dim:
            raise DomainError("origin must have one coordinate per axis")

    @property
    def shape(self) -> tuple:
        return (self.n,) * self.dim

    @property
    def cell_volume(self) -> float:
        return self.h_cell ** self.dim

    def axis_centers(self, axis: int = 0) -> np.ndarray:
        """``origin + k*h``, evaluated about the box midpoint so that centres
        mirrored through it are exact negatives of each other."""
        h = self.h_cell
        mid = self.origin[axis] + 0.5 * (self.n - 1) * h
        if abs(mid) <= 1e-12 * self.n * h:
            mid = 0.0
        return mid + (np.arange(self.n) - 0.5 * (self.n - 1)) * h

    def centers(self) -> tuple:
        """Cell-centre coordinate arrays, one per axis, in ``ij`` indexing."""
        axes = [self.axis_centers(k) for k in range(self.dim)]
        return tuple(np.meshgrid(*axes, indexing="ij"))

    def polar(self) -> tuple:
        """Radius and angle in [0, 2*pi) of every cell centre (2D only)."""
        if self.dim != 2:
            raise DomainError("polar coordinates need a 2D grid")
        x, y = self.centers()
        r = np.hypot(x, y)
        theta = np.mod(np.arctan2(y, x), 2 * np.pi)
        return r, theta


@dataclass(frozen=True, eq=False)
class DomainMask:
    grid: GridSpec
    inside: np.ndarray
    shape_tag: str
    params: dict = field(default_factory=dict)

    @property
    def measure(self) -> float:
        return measure(self.inside, self.grid)

    @property
    def n_cells(self) -> int:
        return int(np.count_nonzero(self.inside))

    def indices(self) -> np.ndarray:
        """Integer indices of inside cells, in lexicographic (C) order."""
        return np.argwhere(self.inside)

    def boundary_distance(self) -> np.ndarray:
        """Euclidean distance from each inside cell centre to the nearest
        exterior cell centre (0 outside the domain)."""
        from scipy import ndimage

        padded = np.pad(self.inside, 1, constant_values=False)
        dist = ndimage.distance_transform_edt(padded) * self.grid.h_cell
        sl = tuple(slice(1, -1) for _ in range(self.grid.dim))
        return np.where(self.inside, dist[sl], 0.0)

    def to_json(self) -> dict:
        return {
            "shape_tag": self.shape_tag,
            "params": dict(self.params),
            "dim": self.grid.dim,
            "n": self.grid.n,
            "h_cell": self.grid.h_cell,
            "origin": list(self.grid.origin),
            "inside": mask_to_rle(self.inside),
        }

    @classmethod
    def from_json(cls, data: dict) -> "DomainMask":
        grid = GridSpec(data["dim"], data["n"], data["h_cell"], tuple(data["origin"]))
        inside = mask_from_rle(data["inside"])
        return cls(grid, inside, data["shape_tag"], dict(data.get("params", {})))


@dataclass(frozen=True, eq=False)
class Configuration:
    """A subset D of a domain, stored as a full-grid boolean mask."""

    mask: np.ndarray
    target_measure: float
    threshold: Optional[float] = None

    def measure(self, grid: GridSpec) -> float:
        return measure(self.mask, grid)

    @property
    def n_cells(self) -> int:
        return int(np.count_nonzero(self.mask))

    def key(self) -> bytes:
        return np.packbits(self.mask.ravel()).tobytes()


def measure(mask: np.ndarray, grid: GridSpec) -> float:
    """Lebesgue measure of a cell mask: count times cell volume."""
    return float(np.count_nonzero(mask)) * grid.cell_volume


def _centered_grid(dim: int, n: int, half_width: float) -> GridSpec:
    h = 2.0 * half_width / n
    origin = (-half_width + 0.5 * h,) * dim
    return GridSpec(dim, n, h, origin)


def build_domain(shape: str, resolution: int, **params) -> DomainMask:
    """Construct a domain mask.

    Parameters per shape: ``interval(a=-1, b=1)``, ``rectangle(width=2,
    height=2)``, ``disk(radius=1)``, ``annulus(b)`` (radii ``b < r < b+1``)
    and ``sector(b, N)`` (the annulus cut to ``0 <= theta <= pi/N``).  2D
    shapes are centred at the origin in the smallest square box covering
    them, with ``resolution`` cells per axis.
    """
    if shape not in SHAPES:
        raise DomainError(f"unknown shape {shape!r}; expected one of {SHAPES}")
    resolution = int(resolution)
    if resolution < 2:
        raise DomainError(f"{shape}: resolution must be >= 2, got {resolution}")

    if shape == "interval":
        a = float(params.get("a", -1.0))
        b = float(params.get("b", 1.0))
        if not b > a:
            raise DomainError(f"interval: need a < b, got ({a}, {b})")
        h = (b - a) / resolution
        grid = GridSpec(1, resolution, h, (a + 0.5 * h,))
        inside = np.ones(resolution, dtype=bool)
        params = {"a": a, "b": b}
    elif shape == "rectangle":
        width = float(params.get("width", 2.0))
        height = float(params.get("height", 2.0))
        if width <= 0 or height <= 0:
            raise DomainError("rectangle: width and height must be positive")
        grid = _centered_grid(2, resolution, 0.5 * max(width, height))
        x, y = grid.centers()
        inside = (np.abs(x) < 0.5 * width) & (np.abs(y) < 0.5 * height)
        params = {"width": width, "height": height}
    elif shape == "disk":
        radius = float(params.get("radius", 1.0))
        if radius <= 0:
            raise DomainError("disk: radius must be positive")
        grid = _centered_grid(2, resolution, radius)
        r, _ = grid.polar()
        inside = r < radius
        params = {"radius": radius}
    else:
        if "b" not in params:
            raise DomainError(f"{shape}: inner radius b is required")
        b = float(params["b"])
        if not b > 0:
            raise DomainError(f"{shape}: inner radius b must be positive, got {b}")
        grid = _centered_grid(2, resolution, b + 1.0)
        r, theta = grid.polar()
        inside = (r > b) & (r < b + 1.0)
        if shape == "sector":
            n_sector = int(params.get("N", 1))
            if n_sector < 1:
                raise DomainError(f"sector: N must be >= 1, got {n_sector}")
            inside &= theta <= math.pi / n_sector
            params = {"b": b, "N": n_sector}
        else:
            params = {"b": b}

    if not inside.any():
        raise DomainError(
            f"{shape}{params}: no cell centre falls inside the domain at "
            f"resolution {resolution}; refine the grid"
        )
    return DomainMask(grid, inside, shape, params)


def annulus_resolution(b: float, cells_across: int) -> int:
    """Smallest even box resolution giving ``cells_across`` cells over the
    unit annulus width."""
    n = int(math.ceil(2.0 * (b + 1.0) * cells_across))
    return n + (n % 2)


def mask_to_rle(mask: np.ndarray) -> dict:
    """Run-length encode a boolean array (C order)."""
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        return {"shape": list(mask.shape), "first": False, "runs": []}
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    return {
        "shape": list(mask.shape),
        "first": bool(flat[0]),
        "runs": np.diff(bounds).tolist(),
    }


def mask_from_rle(data: dict) -> np.ndarray:
    runs = data["runs"]
    values = np.zeros(len(runs), dtype=bool)
    values[0::2] = data["first"]
    values[1::2] = not data["first"]
    flat = np.repeat(values, runs)
    return flat.reshape(data["shape"])
