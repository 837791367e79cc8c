"""Query-to-image decoder used only by the reconstruction guidance loss.

A single affine layer bridges the query vector to an 8x8 latent grid, then
an expansion path of upsampling conv blocks grows it to the photo size.
Output is bounded to [0,1]. The decoder never participates in inference and
its weights live in a droppable checkpoint section. Image quality is not a
goal; capacity stays minimal.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .errors import ConfigError, InputError


def _grid_plan(out_resolution: int) -> tuple[int, int]:
    """Halve the resolution down to a small base grid; each halving becomes
    one upsampling stage."""
    grid, stages = out_resolution, 0
    while grid % 2 == 0 and grid > 8:
        grid //= 2
        stages += 1
    if grid < 4 or grid > 8:
        raise ConfigError(f"cannot plan an upsampling path to {out_resolution}px")
    return grid, stages


class ReconDecoder(nn.Module):
    def __init__(self, dim: int, out_resolution: int, base_channels: int = 48,
                 init_seed: int = 0):
        super().__init__()
        grid, stages = _grid_plan(out_resolution)
        self.dim = dim
        self.out_resolution = out_resolution
        self.base_grid = grid
        with torch.random.fork_rng():
            torch.manual_seed(init_seed)
            self.bridge = nn.Linear(dim, base_channels * grid * grid)
            blocks = []
            ch = base_channels
            for _ in range(stages):
                nxt = max(ch // 2, 16)
                blocks += [
                    nn.Upsample(scale_factor=2, mode="nearest"),
                    nn.Conv2d(ch, nxt, kernel_size=3, padding=1),
                    nn.ReLU(),
                ]
                ch = nxt
            blocks.append(nn.Conv2d(ch, 3, kernel_size=3, padding=1))
            self.expand = nn.Sequential(*blocks)
        self.base_channels = base_channels

    def forward(self, query: torch.Tensor) -> torch.Tensor:
        """(B, d) or (d,) query -> (B, 3, H, W) image in [0, 1]."""
        squeeze = query.dim() == 1
        if squeeze:
            query = query[None]
        if query.shape[-1] != self.dim:
            raise InputError(f"decoder expects width {self.dim}, got {query.shape[-1]}")
        x = self.bridge(query).view(-1, self.base_channels, self.base_grid, self.base_grid)
        x = torch.sigmoid(self.expand(x))
        return x[0] if squeeze else x

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())
