"""Tile plans for scenes larger than the network input, and logit stitching."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import InvalidArgument


def _origins(size: int, tile: int, stride: int) -> list[int]:
    if size <= tile:
        return [0]
    out = list(range(0, size - tile + 1, stride))
    if out[-1] + tile < size:
        out.append(size - tile)     # clamp the last tile to the edge
    return out


@dataclass(frozen=True)
class TilePlan:
    """Row-major tile origins covering an H x W scene.

    Scenes smaller than the tile along an axis are reflect-padded up to the
    tile size in :func:`extract`; ``pad`` records that per axis.
    """

    height: int
    width: int
    tile: int
    stride: int
    origins: tuple[tuple[int, int], ...]
    pad_mode: str = "reflect"

    def __len__(self) -> int:
        return len(self.origins)

    @property
    def pad(self) -> tuple[int, int]:
        return max(self.tile - self.height, 0), max(self.tile - self.width, 0)


def make_tile_plan(height: int, width: int, tile: int = 512, stride: int | None = None,
                   pad_mode: str = "reflect") -> TilePlan:
    stride = tile if stride is None else stride
    if tile <= 0 or stride <= 0:
        raise InvalidArgument(f"tile ({tile}) and stride ({stride}) must be positive")
    if stride > tile:
        raise InvalidArgument(f"stride {stride} > tile {tile} would leave gaps")
    if height <= 0 or width <= 0:
        raise InvalidArgument(f"scene size {height}x{width} must be positive")
    rows, cols = _origins(height, tile, stride), _origins(width, tile, stride)
    return TilePlan(height, width, tile, stride, tuple((r, c) for r in rows for c in cols), pad_mode)


def extract(scene: np.ndarray, plan: TilePlan, i: int) -> np.ndarray:
    """Tile `i` of an [..., H, W] array, always tile x tile in the last two axes."""
    if scene.shape[-2:] != (plan.height, plan.width):
        raise InvalidArgument(f"scene {scene.shape[-2:]} does not match plan {plan.height}x{plan.width}")
    r, c = plan.origins[i]
    t = plan.tile
    out = scene[..., r:r + t, c:c + t]
    ph, pw = t - out.shape[-2], t - out.shape[-1]
    if ph or pw:
        widths = [(0, 0)] * (out.ndim - 2) + [(0, ph), (0, pw)]
        out = np.pad(out, widths, mode=plan.pad_mode)
    return out


def stitch(tiles, plan: TilePlan) -> np.ndarray:
    """Average [K, tile, tile] logit tiles into [K, H, W] scene logits.

    Tiles are summed in plan order, so results do not depend on the order
    in which tiles were computed.
    """
    tiles = list(tiles)
    if len(tiles) != len(plan):
        raise InvalidArgument(f"got {len(tiles)} tiles for a plan of {len(plan)}")
    k = tiles[0].shape[0]
    acc = np.zeros((k, plan.height, plan.width), np.float64)
    hits = np.zeros((plan.height, plan.width), np.int64)
    for (r, c), tile in zip(plan.origins, tiles):
        if tile.shape != (k, plan.tile, plan.tile):
            raise InvalidArgument(f"tile shape {tile.shape} != {(k, plan.tile, plan.tile)}")
        h = min(plan.tile, plan.height - r)
        w = min(plan.tile, plan.width - c)
        acc[:, r:r + h, c:c + w] += tile[:, :h, :w]
        hits[r:r + h, c:c + w] += 1
    return (acc / hits).astype(tiles[0].dtype)
