"""Source-side encoders: content, pitch and rhythm, summed into z_add.

Every encoder takes an optional (B, T) frame mask. Masked frames never reach
a valid frame's output: they are excluded from attention keys and pooled
means and zeroed before every convolution.
"""

from dataclasses import dataclass

import torch
from torch import nn

from .core import ModelConfig, mask_frames
from .exceptions import DimensionMismatch, DivisibilityError


class ConvModule(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.conv = nn.Conv1d(dim, dim, kernel_size=3, padding=1)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        normed = mask_frames(self.norm(x), mask)
        return self.conv(normed.transpose(1, 2)).transpose(1, 2)


class ContentBlock(nn.Module):
    """Pre-norm self-attention, convolution and feed-forward, each residual."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.attn_norm = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, dropout=0.0, batch_first=True)
        self.conv = ConvModule(dim)
        self.ff = nn.Sequential(
            nn.LayerNorm(dim),
            nn.Linear(dim, 2 * dim),
            nn.GELU(),
            nn.Linear(2 * dim, dim),
        )

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        normed = self.attn_norm(x)
        padding = None if mask is None else ~mask
        attended, _ = self.attn(normed, normed, normed, key_padding_mask=padding,
                                need_weights=False)
        x = x + attended
        x = x + self.conv(x, mask)
        return x + self.ff(x)


class ContentEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.input_proj = nn.Linear(cfg.bnf_dim, cfg.model_dim)
        self.blocks = nn.ModuleList(
            ContentBlock(cfg.model_dim, cfg.content_heads) for _ in range(cfg.content_layers)
        )

    def forward(self, bnf: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        if bnf.shape[-1] != self.input_proj.in_features:
            raise DimensionMismatch(
                f"content encoder expects {self.input_proj.in_features}-dim BNFs, "
                f"got {bnf.shape[-1]}"
            )
        x = self.input_proj(bnf)
        for block in self.blocks:
            x = block(x, mask)
        return x


class PitchEncoder(nn.Module):
    """Per-frame lift, average pooled by ``downsample`` and repeated back to full rate."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.downsample = cfg.pitch_downsample
        self.lift = nn.Linear(cfg.pitch_dim, cfg.model_dim)

    def forward(self, pitch: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        if pitch.shape[-1] != self.lift.in_features:
            raise DimensionMismatch(
                f"pitch encoder expects width {self.lift.in_features}, got {pitch.shape[-1]}"
            )
        batch, frames = pitch.shape[:2]
        if frames % self.downsample:
            raise DivisibilityError(
                f"pitch downsample {self.downsample} does not divide {frames} frames"
            )
        lifted = self.lift(pitch)
        windows = (batch, frames // self.downsample, self.downsample, lifted.shape[-1])
        if mask is None:
            pooled = lifted.reshape(windows).mean(dim=2)
        else:
            weight = mask.to(lifted.dtype).reshape(batch, -1, self.downsample, 1)
            total = (lifted.reshape(windows) * weight).sum(dim=2)
            pooled = total / weight.sum(dim=2).clamp(min=1.0)
        return pooled.repeat_interleave(self.downsample, dim=1)


class RhythmEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.convs = nn.ModuleList([
            nn.Conv1d(cfg.bnf_dim, cfg.model_dim, kernel_size=3, stride=2, padding=1),
            nn.Conv1d(cfg.model_dim, cfg.model_dim, kernel_size=3, stride=2, padding=1),
        ])
        self.act = nn.GELU()
        self.head = nn.Linear(cfg.model_dim, cfg.model_dim)

    def forward(self, bnf: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """(B, T, bnf_dim) -> (B, 1, model_dim)."""
        if bnf.shape[1] < 1:
            raise DimensionMismatch("rhythm encoder needs at least one frame")
        if bnf.shape[-1] != self.convs[0].in_channels:
            raise DimensionMismatch(
                f"rhythm encoder expects {self.convs[0].in_channels}-dim BNFs, "
                f"got {bnf.shape[-1]}"
            )
        hidden = bnf
        for conv in self.convs:
            hidden = mask_frames(hidden, mask)
            hidden = self.act(conv(hidden.transpose(1, 2))).transpose(1, 2)
            if mask is not None:
                mask = mask[:, ::conv.stride[0]]
        if mask is None:
            pooled = hidden.mean(dim=1)
        else:
            weight = mask.to(hidden.dtype)[..., None]
            pooled = (hidden * weight).sum(dim=1) / weight.sum(dim=1)
        return self.head(pooled)[:, None, :]


@dataclass
class SourceRepresentation:
    content: torch.Tensor
    pitch: torch.Tensor
    rhythm: torch.Tensor
    z_add: torch.Tensor


def combine(content: torch.Tensor, pitch: torch.Tensor,
            rhythm: torch.Tensor) -> SourceRepresentation:
    if content.shape != pitch.shape:
        raise DimensionMismatch(
            f"content {tuple(content.shape)} and pitch {tuple(pitch.shape)} differ"
        )
    if rhythm.shape[-2] != 1 or rhythm.shape[-1] != content.shape[-1]:
        raise DimensionMismatch(
            f"rhythm must be (..., 1, {content.shape[-1]}), got {tuple(rhythm.shape)}"
        )
    return SourceRepresentation(
        content=content, pitch=pitch, rhythm=rhythm, z_add=content + pitch + rhythm
    )


class SourceEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.content = ContentEncoder(cfg)
        self.pitch = PitchEncoder(cfg)
        self.rhythm = RhythmEncoder(cfg)

    def forward(self, bnf: torch.Tensor, pitch: torch.Tensor,
                mask: torch.Tensor | None = None) -> SourceRepresentation:
        return combine(self.content(bnf, mask), self.pitch(pitch, mask), self.rhythm(bnf, mask))
