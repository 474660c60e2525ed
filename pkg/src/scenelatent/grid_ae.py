"""3D-convolutional autoencoder over spatio-temporal grids.

The encoder stacks three conv -> batch-norm -> ReLU -> max-pool blocks that
convolve jointly over time and the two spatial axes, then flattens into a
64-wide bottleneck. The decoder mirrors the encoder with un-pooling driven by
the recorded max indices followed by transposed convolutions; the final layer
has no activation since velocity targets may be negative.
"""
from __future__ import annotations

from typing import Any, Sequence

import numpy as np
import torch
from torch import nn

from .grids import GridConfig, SpatioTemporalGrid

# (out_channels, conv kernel, pool kernel) per encoder block; stride 1 convs
# with "same" padding so pooling alone controls downsampling.
_BLOCKS = (
    (4, (5, 7, 7), (2, 2, 2)),
    (6, (3, 5, 5), (2, 2, 2)),
    (8, (3, 3, 3), (1, 2, 2)),
)


def _same_padding(kernel: Sequence[int]) -> tuple[int, ...]:
    return tuple(k // 2 for k in kernel)


def pooled_shape(cfg: GridConfig) -> tuple[int, int, int]:
    """Spatio-temporal extent after the three pooling stages."""
    t, x, y = cfg.d_t, cfg.d_x, cfg.d_y
    for _, _, pool in _BLOCKS:
        t, x, y = t // pool[0], x // pool[1], y // pool[2]
    return t, x, y


class GridAutoencoder(nn.Module):
    """Grid autoencoder with a 64-wide latent bottleneck.

    Accepts batched tensors shaped (B, d_t, d_x, d_y, n_c); the channel axis
    is moved internally to the conv layout.
    """

    def __init__(self, cfg: GridConfig | None = None, bottleneck: int = 64):
        super().__init__()
        cfg = cfg if cfg is not None else GridConfig()
        final = pooled_shape(cfg)
        if min(final) < 1:
            raise ValueError(
                f"grid {cfg.d_t}x{cfg.d_x}x{cfg.d_y} collapses to {final} after pooling"
            )
        self.cfg = cfg
        self.bottleneck = bottleneck
        self.final_shape = (_BLOCKS[-1][0], *final)
        flat = int(np.prod(self.final_shape))

        in_ch = cfg.n_c
        convs, bns, pools = [], [], []
        for out_ch, kernel, pool in _BLOCKS:
            convs.append(nn.Conv3d(in_ch, out_ch, kernel, stride=1, padding=_same_padding(kernel)))
            bns.append(nn.BatchNorm3d(out_ch))
            pools.append(nn.MaxPool3d(pool, stride=pool, return_indices=True))
            in_ch = out_ch
        self.convs = nn.ModuleList(convs)
        self.bns = nn.ModuleList(bns)
        self.pools = nn.ModuleList(pools)
        self.fc_enc = nn.Linear(flat, bottleneck)

        self.fc_dec = nn.Linear(bottleneck, flat)
        self.unpools = nn.ModuleList(
            nn.MaxUnpool3d(pool, stride=pool) for _, _, pool in reversed([b for b in _BLOCKS])
        )
        deconvs, debns = [], []
        channels = [cfg.n_c] + [b[0] for b in _BLOCKS]
        for i in range(len(_BLOCKS) - 1, -1, -1):
            out_ch, kernel, _ = _BLOCKS[i]
            deconvs.append(
                nn.ConvTranspose3d(out_ch, channels[i], kernel, stride=1, padding=_same_padding(kernel))
            )
            debns.append(nn.BatchNorm3d(channels[i]) if i > 0 else nn.Identity())
        self.deconvs = nn.ModuleList(deconvs)
        self.debns = nn.ModuleList(debns)
        self.act = nn.ReLU()

    def _check_input(self, x: torch.Tensor) -> None:
        expected = (self.cfg.d_t, self.cfg.d_x, self.cfg.d_y, self.cfg.n_c)
        if x.ndim != 5 or tuple(x.shape[1:]) != expected:
            raise ValueError(f"expected input shape (B, {', '.join(map(str, expected))}), got {tuple(x.shape)}")

    def encode(self, x: torch.Tensor):
        """Returns (z, pool_indices, pre_pool_sizes) for a (B, T, X, Y, C) batch."""
        self._check_input(x)
        h = x.permute(0, 4, 1, 2, 3).contiguous(memory_format=torch.channels_last_3d)
        indices, sizes = [], []
        for conv, bn, pool in zip(self.convs, self.bns, self.pools):
            h = self.act(bn(conv(h)))
            sizes.append(h.shape)
            h, idx = pool(h)
            indices.append(idx)
        z = self.fc_enc(h.reshape(h.shape[0], -1))
        return z, indices, sizes

    def decode(self, z: torch.Tensor, indices, sizes) -> torch.Tensor:
        h = self.fc_dec(z).reshape(z.shape[0], *self.final_shape)
        h = h.contiguous(memory_format=torch.channels_last_3d)
        last = len(self.deconvs) - 1
        for i, (unpool, deconv, debn) in enumerate(zip(self.unpools, self.deconvs, self.debns)):
            h = unpool(h, indices[-1 - i], output_size=sizes[-1 - i])
            h = deconv(h)
            if i != last:
                h = self.act(debn(h))
        return h.permute(0, 2, 3, 4, 1).contiguous()

    def forward(self, x: torch.Tensor):
        """Returns (z, reconstruction, pool_indices)."""
        z, indices, sizes = self.encode(x)
        recon = self.decode(z, indices, sizes)
        return z, recon, indices

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        z, _, _ = self.encode(x)
        return z


def _loss_values(obj: Any):
    if isinstance(obj, SpatioTemporalGrid):
        return obj.values
    return obj


def grid_loss(x: Any, x_hat: Any) -> float | torch.Tensor:
    """Sum of squared errors over all four grid axes.

    For rank-5 batched tensors the sum runs per sample, yielding a (B,)
    vector; rank-4 inputs yield a scalar. Tensor inputs keep autograd.
    """
    a, b = _loss_values(x), _loss_values(x_hat)
    shape_a = tuple(a.shape)
    shape_b = tuple(b.shape)
    if shape_a != shape_b:
        raise ValueError(f"grid shapes differ: expected {shape_a}, got {shape_b}")
    if isinstance(a, torch.Tensor) or isinstance(b, torch.Tensor):
        a = a if isinstance(a, torch.Tensor) else torch.as_tensor(np.asarray(a))
        b = b if isinstance(b, torch.Tensor) else torch.as_tensor(np.asarray(b), dtype=a.dtype)
        dims = tuple(range(a.ndim - 4, a.ndim))
        return ((a - b) ** 2).sum(dim=dims)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    axes = tuple(range(a.ndim - 4, a.ndim))
    out = ((a - b) ** 2).sum(axis=axes)
    return float(out) if out.ndim == 0 else out


def grid_forward(grid: SpatioTemporalGrid | torch.Tensor, model: GridAutoencoder):
    """Single-grid forward pass: (z, reconstruction, pool_indices)."""
    if isinstance(grid, SpatioTemporalGrid):
        x = torch.from_numpy(np.array(grid.values))
    else:
        x = grid
    x = x.to(next(model.parameters()).dtype).unsqueeze(0)
    z, recon, indices = model(x)
    return (
        z[0].detach(),
        SpatioTemporalGrid(recon[0].detach().cpu().numpy().astype(np.float32)),
        indices,
    )
