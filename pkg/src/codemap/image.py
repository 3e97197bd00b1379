"""Dense image grids and their value semantics.

Every dense 2D quantity in the system (intensity, depth, proximity,
reprojection error, uncertainty) is stored as a row-major float32 grid
wrapped in :class:`DenseImage`. The wrapper pins width/height and a
semantics tag; validity conventions depend on the tag:

- ``depth``: values are metric depths, > 0 where valid, 0.0 is the
  invalid sentinel.
- ``proximity``: values in (0, 1] where valid, 0.0 invalid.
- ``intensity``: valid everywhere, nominal range [0, 1].
- ``rep_error``: reprojection errors in pixels, >= 0; validity is defined
  by the companion sparse depth map (0 where that map is invalid).
- ``uncertainty``: strictly positive where valid.

Pixel (u, v) addresses column u, row v, i.e. ``values[v, u]``. Integer
coordinates sit on pixel centers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SEMANTICS = ("intensity", "depth", "proximity", "rep_error", "uncertainty")

INVALID = 0.0


@dataclass(frozen=True, eq=False)
class DenseImage:
    """A fixed-size row-major float32 grid with a semantics tag."""

    width: int
    height: int
    values: np.ndarray = field(repr=False)
    semantics: str = "intensity"

    def __post_init__(self) -> None:
        if self.semantics not in SEMANTICS:
            raise ValueError(f"unknown image semantics {self.semantics!r}")
        v = np.ascontiguousarray(np.asarray(self.values, dtype=np.float32))
        if v.ndim != 2 or v.shape != (self.height, self.width):
            raise ValueError(
                f"image values have shape {np.asarray(self.values).shape}, "
                f"expected ({self.height}, {self.width})"
            )
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        object.__setattr__(self, "values", v)

    @classmethod
    def from_array(cls, values: np.ndarray, semantics: str) -> "DenseImage":
        values = np.asarray(values)
        h, w = values.shape
        return cls(width=w, height=h, values=values, semantics=semantics)

    @classmethod
    def full(cls, width: int, height: int, value: float, semantics: str) -> "DenseImage":
        return cls(width, height, np.full((height, width), value, np.float32), semantics)

    def valid_mask(self) -> np.ndarray:
        """Boolean grid of pixels considered valid under this tag."""
        if self.semantics in ("depth", "proximity", "uncertainty"):
            return self.values > 0.0
        return np.isfinite(self.values)

    def astype64(self) -> np.ndarray:
        """Float64 view of the values for numeric work."""
        return self.values.astype(np.float64)
