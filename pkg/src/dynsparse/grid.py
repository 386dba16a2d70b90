"""3D token grid and its flat-index mapping.

A latent video is a (frames, height, width) grid of tokens. All dense
tensors in this package flatten that grid frame-major: the flat index of
the token at (t, h, w) is ``(t * height + h) * width + w``, i.e. frames
vary slowest and width fastest.
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class TokenGrid:
    """Dimensions of the 3D latent token grid."""

    frames: int
    height: int
    width: int

    def __post_init__(self):
        for name in ("frames", "height", "width"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")

    @property
    def size(self) -> int:
        """Total token count S."""
        return self.frames * self.height * self.width

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.frames, self.height, self.width)

    def flat_index(self, t: int, h: int, w: int) -> int:
        """Flat index of the token at grid position (t, h, w)."""
        if not (0 <= t < self.frames and 0 <= h < self.height and 0 <= w < self.width):
            raise ValueError(f"position ({t}, {h}, {w}) outside grid {self.dims}")
        return (t * self.height + h) * self.width + w

    def coords(self, flat: int) -> tuple[int, int, int]:
        """Grid position (t, h, w) of a flat token index."""
        if not 0 <= flat < self.size:
            raise ValueError(f"flat index {flat} outside [0, {self.size})")
        t, rem = divmod(flat, self.height * self.width)
        h, w = divmod(rem, self.width)
        return (t, h, w)

    def coords_array(self) -> np.ndarray:
        """(S, 3) int array of (t, h, w) for every flat index, in flat order."""
        t, h, w = np.unravel_index(np.arange(self.size), self.dims)
        return np.stack([t, h, w], axis=1)
