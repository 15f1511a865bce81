"""Frozen prompt encoders: points, boxes, and masks become prompt tokens.

Coordinates are embedded with 2*pi-scaled random Fourier features drawn from
a frozen seeded matrix; the same matrix supplies the dense positional map of
the image token grid, so prompt geometry and grid geometry live in one space.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .seeds import rng_for


class ConfigError(ValueError):
    pass


class FourierPE:
    """Random Fourier positional features over [0, 1]^2, frozen per seed.

    Frequencies sample the Gaussian kernel's spectral measure with stratified
    angles and Rayleigh-quantile radii, which keeps the implied kernel close
    to monotone in distance even with few frequencies.
    """

    def __init__(self, d: int, seed: int, scale: float = 0.25):
        if d % 2 != 0:
            raise ConfigError(f"positional dim must be even, got {d}")
        self.d = d
        rng = rng_for(seed, "fourier")
        n = d // 2
        angles = (np.arange(n) + rng.random(n)) * np.pi / n
        u = (np.arange(n) + 0.5) / n
        radii = (scale * np.sqrt(-2.0 * np.log1p(-u)))[rng.permutation(n)]
        self.matrix = np.stack([radii * np.cos(angles), radii * np.sin(angles)])

    def embed(self, coords: np.ndarray) -> np.ndarray:
        coords = np.asarray(coords, dtype=np.float64)
        if coords.min() < 0.0 or coords.max() > 1.0:
            raise ad.ContractError(
                f"coords outside [0,1]: range [{coords.min()}, {coords.max()}]")
        z = 2.0 * np.pi * (coords @ self.matrix)
        return np.concatenate([np.sin(z), np.cos(z)], axis=-1)

    def grid_map(self, g: int) -> np.ndarray:
        """(g, g, d) positional map at cell centers."""
        centers = (np.arange(g) + 0.5) / g
        xs, ys = np.meshgrid(centers, centers)   # xs varies along axis 1
        coords = np.stack([xs.ravel(), ys.ravel()], axis=1)
        return self.embed(coords).reshape(g, g, self.d)


def fourier_pe(pe: FourierPE, coord) -> Tensor:
    """Positional embedding of one normalized (x, y) coordinate."""
    return Tensor(pe.embed(np.asarray(coord, dtype=np.float64)[None, :])[0])


@dataclass
class PromptTokens:
    tokens: Tensor   # (n_p, d)
    kind: str        # point | box | mask


class PromptEncoder:
    """Frozen encoders for point/box/mask prompts over a fixed canvas."""

    def __init__(self, d: int, canvas: int, grid: int, seed: int,
                 mask_tokens: int = 2, pe: FourierPE | None = None):
        self.d = d
        self.canvas = canvas
        self.grid = grid
        self.n_mask_tokens = mask_tokens
        self.pe = pe or FourierPE(d, seed)
        rng = rng_for(seed, "prompt-types")
        self.tensors = {
            "type_point": Tensor(rng.normal(0.0, 0.5, size=d)),
            "type_top_left": Tensor(rng.normal(0.0, 0.5, size=d)),
            "type_bottom_right": Tensor(rng.normal(0.0, 0.5, size=d)),
            "mask_w": Tensor(rng.normal(0.0, 0.5 / np.sqrt(d),
                                        size=(d, mask_tokens * d))),
            "mask_b": Tensor(rng.normal(0.0, 0.02, size=mask_tokens * d)),
        }

    def _norm_point(self, x: float, y: float):
        return np.array([(x + 0.5) / self.canvas, (y + 0.5) / self.canvas])

    def encode_point(self, point) -> PromptTokens:
        x, y = point
        if not (0 <= x < self.canvas and 0 <= y < self.canvas):
            raise ad.ContractError(f"point {point} outside canvas {self.canvas}")
        emb = (self.pe.embed(self._norm_point(x, y)[None, :])[0]
               + self.tensors["type_point"].data)
        return PromptTokens(tokens=Tensor(emb[None, :]), kind="point")

    def encode_box(self, box) -> PromptTokens:
        x0, y0, x1, y1 = box
        if x0 >= x1 or y0 >= y1:
            raise ad.ContractError(f"degenerate box {box}")
        if x0 < 0 or y0 < 0 or x1 > self.canvas or y1 > self.canvas:
            raise ad.ContractError(f"box {box} outside canvas {self.canvas}")
        corners = np.array([[x0, y0], [x1, y1]], dtype=np.float64) / self.canvas
        emb = self.pe.embed(corners)
        emb = emb + np.stack([self.tensors["type_top_left"].data,
                              self.tensors["type_bottom_right"].data])
        return PromptTokens(tokens=Tensor(emb), kind="box")

    def encode_mask(self, mask) -> PromptTokens:
        """Occupancy-weighted positional summary projected to m mask tokens."""
        m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
        if m.shape != (self.canvas, self.canvas):
            raise ad.ContractError(
                f"mask shape {m.shape} != canvas ({self.canvas}, {self.canvas})")
        cell = self.canvas // self.grid
        occ = m.reshape(self.grid, cell, self.grid, cell).mean(axis=(1, 3))
        total = occ.sum()
        if total == 0:
            raise ad.ContractError("mask prompt is empty")
        weights = (occ / total).reshape(-1)
        summary = weights @ self.pe.grid_map(self.grid).reshape(-1, self.d)
        tokens = (summary @ self.tensors["mask_w"].data
                  + self.tensors["mask_b"].data).reshape(self.n_mask_tokens, self.d)
        return PromptTokens(tokens=Tensor(tokens), kind="mask")

    def encode(self, region, prefer: str = "box") -> PromptTokens:
        if prefer == "box":
            return self.encode_box(region.box)
        if prefer == "point":
            return self.encode_point(region.point)
        if prefer == "mask":
            return self.encode_mask(region.mask)
        raise ConfigError(f"unknown prompt kind {prefer!r}")
