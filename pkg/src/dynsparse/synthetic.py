"""Synthetic inputs: low-frequency 3D fields and random head tensors.

Smooth fields (sums of a few low-frequency 3D sinusoids plus a little
noise) stand in for encoded video latents; adjacent tokens vary slowly,
which is what gives grouping and the toy trainer nontrivial structure.
"""

import numpy as np

from .grid import TokenGrid


def smooth_field(grid: TokenGrid, rng: np.random.Generator, n_modes: int = 4,
                 noise: float = 0.05, max_freq: int = 2) -> np.ndarray:
    """One smooth scalar field over the grid, flattened to length S."""
    t, h, w = np.meshgrid(
        np.arange(grid.frames), np.arange(grid.height), np.arange(grid.width),
        indexing="ij",
    )
    field = np.zeros(grid.dims)
    for _ in range(n_modes):
        ft = rng.integers(1, max_freq + 1)
        fh = rng.integers(1, max_freq + 1)
        fw = rng.integers(1, max_freq + 1)
        ph = rng.uniform(0.0, 2.0 * np.pi, size=3)
        field += rng.normal() * (
            np.sin(2 * np.pi * ft * t / grid.frames + ph[0])
            * np.sin(2 * np.pi * fh * h / grid.height + ph[1])
            * np.sin(2 * np.pi * fw * w / grid.width + ph[2])
        )
    flat = field.reshape(-1)
    if noise:
        flat = flat + noise * rng.standard_normal(flat.shape)
    return flat


def smooth_latents(grid: TokenGrid, channels: int, n_samples: int,
                   rng: np.random.Generator, n_modes: int = 4,
                   noise: float = 0.05) -> np.ndarray:
    """(n_samples, S, channels) smooth latent pool, unit overall std."""
    data = np.stack([
        np.stack([smooth_field(grid, rng, n_modes, noise) for _ in range(channels)], axis=1)
        for _ in range(n_samples)
    ])
    return data / max(data.std(), 1e-8)


def smooth_qk(grid: TokenGrid, d: int, rng: np.random.Generator,
              n_modes: int = 6, noise: float = 0.01, scale: float = 0.6):
    """Smooth per-token Q and K: adjacent tokens get nearly equal rows.

    Single-cycle modes only, so rows drift slowly across each axis and
    neighbouring queries share most of their critical keys.
    """
    basis = np.stack(
        [smooth_field(grid, rng, 1, 0.0, max_freq=1) for _ in range(n_modes)], axis=1
    )
    q = scale * (basis @ rng.standard_normal((n_modes, d)))
    q += noise * rng.standard_normal((grid.size, d))
    k = scale * (basis @ rng.standard_normal((n_modes, d)))
    k += noise * rng.standard_normal((grid.size, d))
    return q, k


def random_heads(n_heads: int, s: int, d_k: int, rng: np.random.Generator):
    """Per-head lists of random (S, d_k) Q and K tensors."""
    qs = [rng.standard_normal((s, d_k)) for _ in range(n_heads)]
    ks = [rng.standard_normal((s, d_k)) for _ in range(n_heads)]
    return qs, ks
