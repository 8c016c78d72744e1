"""Spatial domains, tensor grids, and control regions.

Domains are intervals or axis-aligned rectangles discretized with uniform
nodes per axis.  Fields over a grid are stored as flat arrays in row-major
node order; the boundary node set is exactly the set of nodes with a
coordinate on the domain boundary.
"""

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import GridTooCoarse


@dataclass(frozen=True)
class SpatialDomain:
    """Interval (0, L) or rectangle, with per-axis bounds and node counts."""

    kind: str
    bounds: tuple
    resolution: tuple

    def __post_init__(self):
        if self.kind not in ("interval", "rectangle"):
            raise ValueError(f"unknown domain kind {self.kind!r}")
        ndim = 1 if self.kind == "interval" else 2
        if len(self.bounds) != ndim or len(self.resolution) != ndim:
            raise ValueError("bounds/resolution arity does not match domain kind")
        for (lo, hi), n in zip(self.bounds, self.resolution):
            if not lo < hi:
                raise ValueError(f"degenerate axis bounds ({lo}, {hi})")
            if n < 8:
                raise ValueError("need at least 8 nodes per axis")

    @property
    def ndim(self):
        return len(self.bounds)

    @staticmethod
    def interval(lo=0.0, hi=1.0, nodes=65):
        return SpatialDomain("interval", ((float(lo), float(hi)),), (int(nodes),))

    @staticmethod
    def rectangle(bounds=((0.0, 1.0), (0.0, 1.0)), nodes=(33, 33)):
        bounds = tuple((float(lo), float(hi)) for lo, hi in bounds)
        return SpatialDomain("rectangle", bounds, tuple(int(n) for n in nodes))


@dataclass(frozen=True)
class Grid:
    """Uniform tensor grid over a domain; immutable after construction."""

    domain: SpatialDomain
    axes: tuple = field(init=False, default=None)
    spacing: tuple = field(init=False, default=None)

    def __post_init__(self):
        axes = tuple(
            np.linspace(lo, hi, n)
            for (lo, hi), n in zip(self.domain.bounds, self.domain.resolution)
        )
        spacing = tuple(ax[1] - ax[0] for ax in axes)
        object.__setattr__(self, "axes", axes)
        object.__setattr__(self, "spacing", spacing)

    @property
    def ndim(self):
        return self.domain.ndim

    @property
    def shape(self):
        return tuple(len(ax) for ax in self.axes)

    @property
    def n_nodes(self):
        return int(np.prod(self.shape))

    @property
    def cell_volume(self):
        return float(np.prod(self.spacing))

    @cached_property
    def nodes(self):
        """Node coordinates, shape (n_nodes, ndim), row-major ordering."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    @cached_property
    def boundary_mask(self):
        mask = np.zeros(self.shape, dtype=bool)
        for axis in range(self.ndim):
            sl = [slice(None)] * self.ndim
            sl[axis] = 0
            mask[tuple(sl)] = True
            sl[axis] = -1
            mask[tuple(sl)] = True
        return mask.ravel()

    @cached_property
    def interior_mask(self):
        return ~self.boundary_mask

    @cached_property
    def interior_idx(self):
        return np.flatnonzero(self.interior_mask)

    @cached_property
    def trapezoid_weights(self):
        """Per-node quadrature weights (trapezoid rule, tensorized)."""
        w = np.ones(1)
        for ax, h in zip(self.axes, self.spacing):
            wa = np.full(len(ax), h)
            wa[0] = wa[-1] = h / 2.0
            w = np.multiply.outer(w, wa)
        return w.ravel()

    def box_mask(self, box):
        """Boolean node mask for the open box given as per-axis (lo, hi)."""
        inside = np.ones(self.n_nodes, dtype=bool)
        for axis, (lo, hi) in enumerate(box):
            x = self.nodes[:, axis]
            inside &= (x > lo) & (x < hi)
        return inside


def make_grid(domain):
    return Grid(domain)


@dataclass(frozen=True)
class ControlRegion:
    """Control region omega with inner subregion omega0 and node indicator."""

    omega: tuple
    omega0: tuple
    indicator: np.ndarray
    grid: Grid

    @staticmethod
    def build(grid, omega, omega0):
        omega = tuple((float(lo), float(hi)) for lo, hi in omega)
        omega0 = tuple((float(lo), float(hi)) for lo, hi in omega0)
        for axis, ((dlo, dhi), (olo, ohi), (ilo, ihi)) in enumerate(
            zip(grid.domain.bounds, omega, omega0)
        ):
            h = grid.spacing[axis]
            # strict inclusion by at least one grid cell on each side
            if olo - dlo < h or dhi - ohi < h:
                raise GridTooCoarse(
                    f"axis {axis}: closure(omega) not inside the domain by >= one cell"
                )
            if ilo - olo < h or ohi - ihi < h:
                raise GridTooCoarse(
                    f"axis {axis}: closure(omega0) not inside omega by >= one cell"
                )
        indicator = grid.box_mask(omega).astype(float)
        if not indicator.any():
            raise GridTooCoarse("omega contains no grid node")
        return ControlRegion(omega, omega0, indicator, grid)

    @property
    def omega0_mask(self):
        return self.grid.box_mask(self.omega0)

    def omega_center(self):
        return tuple(0.5 * (lo + hi) for lo, hi in self.omega0)
