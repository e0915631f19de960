"""Cell-centred grids on the torus x the truncated line."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Grid:
    """Uniform finite-volume grid on [0, 1) x [-L, L].

    The x-direction is periodic, the y-direction carries no-flux faces at
    y = -L and y = L. All quantities live at cell centres.
    """

    n_x: int
    n_y: int
    L: float

    def __post_init__(self):
        if self.n_x < 8 or self.n_y < 8:
            raise ValueError(f"grid needs n_x, n_y >= 8, got ({self.n_x}, {self.n_y})")
        if not self.L > 0:
            raise ValueError(f"y half-extent must be positive, got {self.L}")

    @property
    def dx(self) -> float:
        return 1.0 / self.n_x

    @property
    def dy(self) -> float:
        return 2.0 * self.L / self.n_y

    @property
    def x(self) -> np.ndarray:
        return (np.arange(self.n_x) + 0.5) * self.dx

    @property
    def y(self) -> np.ndarray:
        return -self.L + (np.arange(self.n_y) + 0.5) * self.dy

    @property
    def cell_area(self) -> float:
        return self.dx * self.dy

    def mesh(self):
        """Return (X, Y) arrays of shape (n_x, n_y)."""
        return np.meshgrid(self.x, self.y, indexing="ij")

    def refined(self, factor: int = 2, axis: str = "both") -> "Grid":
        fx = factor if axis in ("both", "x") else 1
        fy = factor if axis in ("both", "y") else 1
        return Grid(self.n_x * fx, self.n_y * fy, self.L)
