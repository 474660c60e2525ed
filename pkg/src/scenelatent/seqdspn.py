"""Sequential set autoencoder with inner-loop set decoding.

Pipeline per scenario: each frame's participant set is encoded by a small
permutation-invariant network (per-element MLP + feature-wise max pool) into
a 32-wide frame embedding; the embedding sequence is auto-encoded by a
2-layer LSTM seq2seq whose final encoder hidden state is the 64-wide scenario
latent z; each reconstructed frame embedding is decoded back into a set by
gradient descent on candidate elements and a soft mask, run for a fixed
number of differentiable inner steps.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any

import numpy as np
import torch
from torch import nn

from .scenarios import FrameSet
from .set_losses import chamfer_terms, hungarian_loss


@dataclass(frozen=True)
class DSPNConfig:
    """Hyperparameters of the set autoencoder.

    feature_scale divides (x, y, v_lon) before the set encoder so all three
    features are O(1); the inner loop and its training loss operate in this
    normalized feature space. lambda_embed is the weight of the
    embedding-consistency term of the total loss.
    """

    inner_steps: int = 25
    inner_lr: float = 0.1
    n_max: int = 3
    lambda_embed: float = 1.0
    feature_scale: tuple[float, float, float] = (7.5, 30.0, 40.0)
    set_loss: str = "chamfer"
    frame_count: int = 13
    frame_rate_hz: float = 2.5
    element_init_range: float = 1.0
    embed_width: int = 32
    hidden_width: int = 64

    def __post_init__(self):
        if self.inner_steps < 1:
            raise ValueError(f"inner_steps must be >= 1, got {self.inner_steps}")
        if self.inner_lr <= 0:
            raise ValueError(f"inner_lr must be positive, got {self.inner_lr}")
        if self.n_max < 1:
            raise ValueError(f"n_max must be >= 1, got {self.n_max}")
        if self.lambda_embed < 0:
            raise ValueError(f"lambda_embed must be non-negative, got {self.lambda_embed}")
        if any(s <= 0 for s in self.feature_scale):
            raise ValueError(f"feature_scale entries must be positive: {self.feature_scale}")
        if self.set_loss not in ("chamfer", "hungarian"):
            raise ValueError(f"set_loss must be 'chamfer' or 'hungarian', got {self.set_loss!r}")
        if self.frame_count < 1 or self.frame_rate_hz <= 0:
            raise ValueError("frame_count and frame_rate_hz must be positive")
        if self.element_init_range <= 0:
            raise ValueError("element_init_range must be positive")


@dataclass(frozen=True)
class SetPrediction:
    """Decoded set: elements in raw feature units, soft mask in [0, 1]."""

    elements: np.ndarray
    mask: np.ndarray
    dspn_embedding: np.ndarray
    inner_initial_loss: float = math.nan
    inner_final_loss: float = math.nan

    def __post_init__(self):
        elements = np.asarray(self.elements, dtype=float)
        mask = np.asarray(self.mask, dtype=float)
        if not (np.isfinite(elements).all() and np.isfinite(mask).all()):
            raise ValueError("set prediction contains non-finite values")
        if mask.min() < 0.0 or mask.max() > 1.0:
            raise ValueError(f"mask values must lie in [0,1], got [{mask.min()}, {mask.max()}]")
        object.__setattr__(self, "elements", elements)
        object.__setattr__(self, "mask", mask)

    def binarized_mask(self, threshold: float = 0.5) -> np.ndarray:
        return self.mask >= threshold


class SetEncoder(nn.Module):
    """Permutation-invariant frame-set encoder.

    encode_set consumes boolean masks and excludes invalid slots from the
    max pool (an all-invalid set maps to a learned constant); encode_soft
    scales each per-element feature vector by its mask value, making the
    encoder differentiable in the mask for the inner loop.
    """

    def __init__(self, cfg: DSPNConfig):
        super().__init__()
        self.fc1 = nn.Linear(3, 8)
        self.fc2 = nn.Linear(8, cfg.embed_width)
        self.empty_embedding = nn.Parameter(torch.zeros(cfg.embed_width))
        self.register_buffer("feature_scale", torch.tensor(cfg.feature_scale, dtype=torch.float32))
        self.act = nn.ReLU()

    def per_element(self, scaled: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(scaled)))

    def scale_elements(self, elements: torch.Tensor) -> torch.Tensor:
        return elements / self.feature_scale.to(elements.dtype)

    def encode_set(self, elements: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Embed raw-unit elements (..., n, 3) with boolean mask (..., n)."""
        mask = mask.bool()
        h = self.per_element(self.scale_elements(elements))
        h = h.masked_fill(~mask.unsqueeze(-1), float("-inf"))
        e = h.max(dim=-2).values
        any_valid = mask.any(dim=-1, keepdim=True)
        empty = self.empty_embedding.to(e.dtype).expand_as(e)
        return torch.where(any_valid, e, empty)

    def encode_soft(self, scaled_elements: torch.Tensor, soft_mask: torch.Tensor) -> torch.Tensor:
        """Embed already-scaled elements with a soft mask in [0, 1]."""
        h = self.per_element(scaled_elements)
        return (h * soft_mask.unsqueeze(-1)).max(dim=-2).values


class SequenceAutoencoder(nn.Module):
    """Seq2seq LSTM over frame embeddings; z is the encoder's last top-layer
    hidden state. The decoder starts from a zero input and feeds each output
    back autoregressively."""

    def __init__(self, cfg: DSPNConfig):
        super().__init__()
        self.encoder = nn.LSTM(cfg.embed_width, cfg.hidden_width, num_layers=2, batch_first=True)
        self.decoder = nn.LSTM(cfg.embed_width, cfg.hidden_width, num_layers=2, batch_first=True)
        self.proj = nn.Linear(cfg.hidden_width, cfg.embed_width)
        self.embed_width = cfg.embed_width

    def forward(self, e_seq: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if e_seq.ndim != 3 or e_seq.shape[1] < 1:
            raise ValueError(f"expected (B, T, {self.embed_width}) embeddings, got {tuple(e_seq.shape)}")
        _, (h, c) = self.encoder(e_seq)
        z = h[-1]
        steps = e_seq.shape[1]
        inp = e_seq.new_zeros(e_seq.shape[0], 1, self.embed_width)
        state = (h, c)
        outputs = []
        for _ in range(steps):
            out, state = self.decoder(inp, state)
            e_hat_t = self.proj(out[:, 0])
            outputs.append(e_hat_t)
            inp = e_hat_t.unsqueeze(1)
        return z, torch.stack(outputs, dim=1)


def inner_optimize(
    encoder: SetEncoder,
    e_target: torch.Tensor,
    cfg: DSPNConfig,
    init_elements: torch.Tensor,
    init_mask: torch.Tensor,
    create_graph: bool,
):
    """Unrolled gradient descent on scaled elements and mask.

    Minimizes the squared distance between encode_soft(elements, mask) and
    e_target. With create_graph=True the whole unroll stays differentiable,
    so outer training backpropagates through every inner step.

    Returns (elements, mask, final embedding, first losses, final losses);
    the loss vectors are per target row.
    """
    el = init_elements.clone().requires_grad_(True)
    m = init_mask.clone().requires_grad_(True)
    first = None
    for _ in range(cfg.inner_steps):
        e_pred = encoder.encode_soft(el, m)
        loss = ((e_pred - e_target) ** 2).sum(-1)
        if first is None:
            first = loss.detach()
        g_el, g_m = torch.autograd.grad(loss.sum(), (el, m), create_graph=create_graph)
        el = el - cfg.inner_lr * g_el
        m = (m - cfg.inner_lr * g_m).clamp(0.0, 1.0)
    e_final = encoder.encode_soft(el, m)
    final = ((e_final - e_target) ** 2).sum(-1)
    if not torch.isfinite(final).all():
        raise RuntimeError(
            f"inner-loop loss diverged: {int((~torch.isfinite(final)).sum())} non-finite rows "
            f"after {cfg.inner_steps} steps at inner_lr={cfg.inner_lr}"
        )
    if not create_graph:
        el, m, e_final, final = el.detach(), m.detach(), e_final.detach(), final.detach()
    return el, m, e_final, first, final


def draw_inner_init(
    cfg: DSPNConfig, rows: int, generator: torch.Generator, dtype=torch.float32
) -> tuple[torch.Tensor, torch.Tensor]:
    """Seeded random start for the inner loop, in scaled feature space."""
    r = cfg.element_init_range
    elements = (torch.rand(rows, cfg.n_max, 3, generator=generator, dtype=dtype) * 2 - 1) * r
    mask = torch.rand(rows, cfg.n_max, generator=generator, dtype=dtype)
    return elements, mask


class SeqDSPN(nn.Module):
    """Full sequential set autoencoder; see module docstring."""

    def __init__(self, cfg: DSPNConfig | None = None):
        super().__init__()
        self.cfg = cfg if cfg is not None else DSPNConfig()
        self.set_encoder = SetEncoder(self.cfg)
        self.seq_ae = SequenceAutoencoder(self.cfg)

    def encode_frames(self, elements: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
        """(B, T, n, 3) raw elements + (B, T, n) boolean masks -> (B, T, 32)."""
        return self.set_encoder.encode_set(elements, masks)

    def embed(self, elements: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
        """Scenario latents (B, 64); no set decoding required."""
        e = self.encode_frames(elements, masks)
        z, _ = self.seq_ae(e)
        return z

    def forward(
        self,
        elements: torch.Tensor,
        masks: torch.Tensor,
        generator: torch.Generator,
        create_graph: bool | None = None,
    ) -> dict:
        """Full pass; returns latents, both embedding sequences, decoded sets
        (scaled space) and per-frame inner-loop first/final losses."""
        if create_graph is None:
            create_graph = self.training
        b, t, n = masks.shape
        e = self.encode_frames(elements, masks)
        z, e_hat = self.seq_ae(e)
        flat_target = e_hat.reshape(b * t, -1)
        init_el, init_m = draw_inner_init(self.cfg, b * t, generator, dtype=elements.dtype)
        with torch.enable_grad():
            el, m, e_dspn, first, final = inner_optimize(
                self.set_encoder,
                flat_target if create_graph else flat_target.detach(),
                self.cfg,
                init_el,
                init_m,
                create_graph=create_graph,
            )
        return {
            "z": z,
            "e": e,
            "e_hat": e_hat,
            "pred_elements_scaled": el.reshape(b, t, n, 3),
            "pred_masks": m.reshape(b, t, n),
            "dspn_embeddings": e_dspn.reshape(b, t, -1),
            "inner_first": first.reshape(b, t),
            "inner_final": final.reshape(b, t),
        }


@dataclass
class SeqDSPNLoss:
    """Batch-mean loss breakdown; total = set_term + embed_term."""

    total: torch.Tensor
    set_term: torch.Tensor
    embed_term: torch.Tensor

    def __float__(self) -> float:
        return float(self.total)


def seqdspn_loss_parts(
    output: dict, elements: torch.Tensor, masks: torch.Tensor, cfg: DSPNConfig
) -> SeqDSPNLoss:
    """Set loss plus weighted embedding MSE, both batch-meaned.

    The set term compares decoded sets against targets in scaled feature
    space, summed over frames; the embedding term is lambda times the
    per-frame MSE between e and its seq2seq reconstruction, summed over
    frames.
    """
    scale = output_scale(cfg, elements)
    tgt_scaled = elements / scale
    if cfg.set_loss == "chamfer":
        per_frame = chamfer_terms(
            output["pred_elements_scaled"],
            output["pred_masks"],
            tgt_scaled,
            masks.to(elements.dtype),
        )
        set_term = per_frame.sum(-1).mean()
    else:
        b, t, _ = masks.shape
        total = elements.new_zeros(())
        for i in range(b):
            for j in range(t):
                total = total + hungarian_loss(
                    (output["pred_elements_scaled"][i, j], output["pred_masks"][i, j]),
                    (tgt_scaled[i, j], masks[i, j].to(elements.dtype)),
                )
        set_term = total / b
    mse_per_frame = ((output["e"] - output["e_hat"]) ** 2).mean(-1)
    embed_term = cfg.lambda_embed * mse_per_frame.sum(-1).mean()
    return SeqDSPNLoss(set_term + embed_term, set_term, embed_term)


def output_scale(cfg: DSPNConfig, like: torch.Tensor) -> torch.Tensor:
    return torch.tensor(cfg.feature_scale, dtype=like.dtype, device=like.device)


def seqdspn_loss(
    output: dict, elements: torch.Tensor, masks: torch.Tensor, cfg: DSPNConfig
) -> torch.Tensor:
    """Scalar training loss; see seqdspn_loss_parts for the breakdown."""
    return seqdspn_loss_parts(output, elements, masks, cfg).total


def dspn_decode(
    e_hat: torch.Tensor | np.ndarray,
    encoder: SetEncoder,
    cfg: DSPNConfig,
    seed: int,
) -> SetPrediction:
    """Decode one frame embedding into a set via the seeded inner loop.

    Elements come back in raw feature units; the mask is the final soft
    mask. Gradients are not retained.
    """
    if not isinstance(e_hat, torch.Tensor):
        e_hat = torch.as_tensor(np.asarray(e_hat), dtype=torch.float32)
    e_hat = e_hat.detach().reshape(1, -1)
    generator = torch.Generator().manual_seed(int(seed))
    init_el, init_m = draw_inner_init(cfg, 1, generator, dtype=e_hat.dtype)
    with torch.enable_grad():
        el, m, e_dspn, first, final = inner_optimize(
            encoder, e_hat, cfg, init_el, init_m, create_graph=False
        )
    scale = output_scale(cfg, el)
    return SetPrediction(
        elements=(el[0] * scale).detach().cpu().numpy(),
        mask=m[0].detach().cpu().numpy(),
        dspn_embedding=e_dspn[0].detach().cpu().numpy(),
        inner_initial_loss=float(first[0]),
        inner_final_loss=float(final[0]),
    )
