"""
Multi-level temporal-channel speaker retrieval.

A prenet lifts the target mel to C channels, then each TCR block attends
over time inside segments of ``gamma_t`` frames and over channels inside
segments of ``gamma_c`` channels, both queried by the speaker x-vector.
Every block divides time by gamma_t and channels by gamma_c.

When the true lengths are known, frames past them are zeroed before every
convolution, so the retrieved rows do not depend on how far a sequence was
padded.
"""

import math
from dataclasses import dataclass, field

import torch
from torch import nn

from .core import ModelConfig, attend, frame_mask, mask_frames
from .exceptions import ConfigMismatch, DimensionMismatch, DivisibilityError


class PlaneConv(nn.Module):
    """3x3 single-map convolution over the (time, channel) plane, zero padded."""

    def __init__(self):
        super().__init__()
        self.conv = nn.Conv2d(1, 1, kernel_size=3, stride=1, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(x.unsqueeze(1)).squeeze(1)


def temporal_segmentation(h: torch.Tensor, gamma_t: int) -> torch.Tensor:
    """(..., T, C) -> (..., T/gamma_t, gamma_t, C); segment s holds rows s*gamma_t + j."""
    frames, channels = h.shape[-2:]
    if frames % gamma_t:
        raise DivisibilityError(f"gamma_t={gamma_t} does not divide {frames} frames")
    return h.reshape(*h.shape[:-2], frames // gamma_t, gamma_t, channels)


def channel_segmentation(h: torch.Tensor, gamma_c: int, gamma_tr: int) -> torch.Tensor:
    """(..., T', C) -> (..., T'/gamma_tr, C/gamma_c, gamma_c, gamma_tr).

    Element (a, b, i, j) is h[a*gamma_tr + j, b*gamma_c + i].
    """
    frames, channels = h.shape[-2:]
    if frames % gamma_tr:
        raise DivisibilityError(f"gamma_tr={gamma_tr} does not divide {frames} frames")
    if channels % gamma_c:
        raise DivisibilityError(f"gamma_c={gamma_c} does not divide {channels} channels")
    lead = h.shape[:-2]
    grid = h.reshape(*lead, frames // gamma_tr, gamma_tr, channels // gamma_c, gamma_c)
    return grid.movedim(-3, -1)


def _strips_to_sequence(strips: torch.Tensor) -> torch.Tensor:
    # (..., A, Cb, gamma_tr) -> (..., A * gamma_tr, Cb)
    laid = strips.movedim(-2, -1)
    return laid.reshape(*laid.shape[:-3], laid.shape[-3] * laid.shape[-2], laid.shape[-1])


def _downsample_mask(mask: torch.Tensor | None, factor: int) -> torch.Tensor | None:
    # a pooled row is valid when its first covered frame is
    return None if mask is None else mask[:, ::factor]


class TcrBlock(nn.Module):
    def __init__(self, cfg: ModelConfig, level: int):
        super().__init__()
        self.level = level
        self.gamma_t = cfg.gamma_t
        self.gamma_c = cfg.gamma_c
        self.gamma_tr = cfg.gamma_tr[level - 1]
        self.uniform_temporal = cfg.uniform_temporal(level)
        self.uniform_channel = cfg.uniform_channel(level)
        in_channels = cfg.level_channels(level - 1)

        self.conv = PlaneConv()
        self.temporal_query = nn.Linear(cfg.xvec_dim, in_channels)
        self.channel_query = nn.Linear(cfg.xvec_dim, self.gamma_tr)
        nn.init.zeros_(self.temporal_query.bias)
        nn.init.zeros_(self.channel_query.bias)

    def forward(self, z_prev: torch.Tensor, xvec: torch.Tensor,
                mask: torch.Tensor | None = None):
        h_c, a_t = temporal_retrieval(
            z_prev, xvec, self, self.gamma_t, uniform=self.uniform_temporal, mask=mask
        )
        z, a_c = channel_retrieval(
            h_c, xvec, self, self.gamma_c, self.gamma_tr, uniform=self.uniform_channel,
            mask=_downsample_mask(mask, self.gamma_t),
        )
        return z, a_t, a_c


def temporal_retrieval(z_prev: torch.Tensor, xvec: torch.Tensor, block: TcrBlock,
                       gamma_t: int, *, uniform: bool = False,
                       mask: torch.Tensor | None = None):
    """Attend over frames inside each gamma_t segment.

    z_prev (B, T, C), xvec (B, D) -> h_c (B, T/gamma_t, C), a_t (B, T/gamma_t, 1, gamma_t).
    ``mask`` (B, T) marks the valid rows of z_prev.
    """
    channels = z_prev.shape[-1]
    if xvec.shape[-1] != block.temporal_query.in_features:
        raise DimensionMismatch(
            f"x-vector width {xvec.shape[-1]} != {block.temporal_query.in_features}"
        )
    if channels != block.temporal_query.out_features:
        raise DimensionMismatch(
            f"block expects {block.temporal_query.out_features} channels, got {channels}"
        )
    h_t = mask_frames(block.conv(mask_frames(z_prev, mask)), mask)
    # keys: the same conv over the whole sequence, then segmented
    keys = mask_frames(block.conv(h_t), mask)
    values = temporal_segmentation(h_t, gamma_t)
    keys = temporal_segmentation(keys, gamma_t)
    query = block.temporal_query(xvec)[:, None, None, :]
    result = attend(query, keys, values, math.sqrt(channels), uniform=uniform)
    h_c = mask_frames(result.output.squeeze(-2), _downsample_mask(mask, gamma_t))
    return h_c, result.weights


def channel_retrieval(h_c: torch.Tensor, xvec: torch.Tensor, block: TcrBlock,
                      gamma_c: int, gamma_tr: int, *, uniform: bool = False,
                      mask: torch.Tensor | None = None):
    """Attend over channels inside each (temporal range, channel segment) cell.

    h_c (B, T', C) -> z (B, T', C/gamma_c), a_c (B, T'/gamma_tr, C/gamma_c, 1, gamma_c).
    """
    if xvec.shape[-1] != block.channel_query.in_features:
        raise DimensionMismatch(
            f"x-vector width {xvec.shape[-1]} != {block.channel_query.in_features}"
        )
    if block.channel_query.out_features != gamma_tr:
        raise DimensionMismatch(
            f"channel query width {block.channel_query.out_features} != gamma_tr={gamma_tr}"
        )
    cells = channel_segmentation(mask_frames(h_c, mask), gamma_c, gamma_tr)
    query = block.channel_query(xvec)[:, None, None, None, :]
    result = attend(query, cells, cells, math.sqrt(gamma_tr), uniform=uniform)
    z = mask_frames(_strips_to_sequence(result.output.squeeze(-2)), mask)
    return z, result.weights


def tcr_block_forward(z_prev: torch.Tensor, xvec: torch.Tensor, block: TcrBlock,
                      cfg: ModelConfig, level: int, mask: torch.Tensor | None = None):
    h_c, a_t = temporal_retrieval(
        z_prev, xvec, block, cfg.gamma_t, uniform=cfg.uniform_temporal(level), mask=mask
    )
    z, a_c = channel_retrieval(
        h_c, xvec, block, cfg.gamma_c, cfg.gamma_tr[level - 1],
        uniform=cfg.uniform_channel(level), mask=_downsample_mask(mask, cfg.gamma_t),
    )
    return z, a_t, a_c


@dataclass
class SpeakerRetrievalOutput:
    z0: torch.Tensor | None
    z: list[torch.Tensor] = field(default_factory=list)
    a_t: list[torch.Tensor] = field(default_factory=list)
    a_c: list[torch.Tensor] = field(default_factory=list)
    frames: int | None = None
    lengths: torch.Tensor | None = None

    @property
    def levels(self) -> int:
        return len(self.z)

    def row_mask(self, level: int, lengths: torch.Tensor) -> torch.Tensor:
        """Rows of Z_{s_level} whose first covered frame lies inside the true length."""
        rows = self.z[level - 1].shape[1]
        span = self.frames // rows
        starts = torch.arange(rows) * span
        return starts[None, :] < lengths[:, None]

    def frame_mask(self) -> torch.Tensor | None:
        return None if self.lengths is None else frame_mask(self.lengths, self.frames)

    def level_mask(self, level: int) -> torch.Tensor | None:
        return None if self.lengths is None else self.row_mask(level, self.lengths)

    def time_averaged(self, lengths: torch.Tensor | None = None) -> list[torch.Tensor]:
        averages = []
        for level, z in enumerate(self.z, start=1):
            if lengths is None:
                averages.append(z.mean(dim=1))
                continue
            mask = self.row_mask(level, lengths).to(z.dtype)[..., None]
            averages.append((z * mask).sum(dim=1) / mask.sum(dim=1))
        return averages

    def named_arrays(self) -> dict[str, torch.Tensor]:
        arrays = {}
        if self.z0 is not None:
            arrays["z0"] = self.z0
        for level, z in enumerate(self.z, start=1):
            arrays[f"z{level}"] = z
        for level, a_t in enumerate(self.a_t, start=1):
            arrays[f"a_t{level}"] = a_t
        for level, a_c in enumerate(self.a_c, start=1):
            arrays[f"a_c{level}"] = a_c
        return arrays


class Prenet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.conv = PlaneConv()
        self.lift = nn.Linear(cfg.mel_dim, cfg.prenet_channels)

    def forward(self, mel: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        return mask_frames(self.lift(self.conv(mask_frames(mel, mask))), mask)


def _check_frames(frames: int, multiple: int):
    if frames % multiple:
        raise DivisibilityError(
            f"{frames} frames is not a multiple of {multiple}; "
            f"pad with pad_to_multiple(seq, {multiple}) first"
        )


def _input_mask(lengths: torch.Tensor | None, frames: int) -> torch.Tensor | None:
    return None if lengths is None else frame_mask(lengths, frames)


class SpeakerRetrieval(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.levels = cfg.active_blocks
        self.multiple = cfg.retrieval_multiple
        self.prenet = Prenet(cfg)
        self.blocks = nn.ModuleList(
            TcrBlock(cfg, level) for level in range(1, cfg.active_blocks + 1)
        )

    def forward(self, mel: torch.Tensor, xvec: torch.Tensor,
                lengths: torch.Tensor | None = None) -> SpeakerRetrievalOutput:
        frames = mel.shape[1]
        _check_frames(frames, self.multiple)
        mask = _input_mask(lengths, frames)
        z = self.prenet(mel, mask)
        output = SpeakerRetrievalOutput(z0=z, frames=frames, lengths=lengths)
        for block in self.blocks:
            z, a_t, a_c = block(z, xvec, mask)
            mask = _downsample_mask(mask, block.gamma_t)
            output.z.append(z)
            output.a_t.append(a_t)
            output.a_c.append(a_c)
        return output


class EmbeddingSpeakerModule(nn.Module):
    """Speaker-embedding-only variant: one projected x-vector row per level."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.levels = cfg.active_blocks
        self.multiple = cfg.retrieval_multiple
        self.projections = nn.ModuleList(
            nn.Linear(cfg.xvec_dim, cfg.level_channels(level))
            for level in range(1, cfg.active_blocks + 1)
        )

    def forward(self, mel: torch.Tensor, xvec: torch.Tensor,
                lengths: torch.Tensor | None = None) -> SpeakerRetrievalOutput:
        _check_frames(mel.shape[1], self.multiple)
        return SpeakerRetrievalOutput(
            z0=None,
            z=[proj(xvec)[:, None, :] for proj in self.projections],
            frames=mel.shape[1],
            lengths=lengths,
        )


class ConvSpeakerModule(nn.Module):
    """Plain convolutional variant with no x-vector query.

    One convolution per level, each followed by mean pooling over gamma_t
    frames. The pooling is reported as uniform temporal maps so the decoder
    aligns speaker keys the same way as for the retrieval module.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.levels = cfg.active_blocks
        self.multiple = cfg.retrieval_multiple
        self.gamma_t = cfg.gamma_t
        self.prenet = Prenet(cfg)
        self.convs = nn.ModuleList(
            nn.Conv1d(cfg.level_channels(level - 1), cfg.level_channels(level),
                      kernel_size=3, padding=1)
            for level in range(1, cfg.active_blocks + 1)
        )
        self.act = nn.GELU()

    def forward(self, mel: torch.Tensor, xvec: torch.Tensor,
                lengths: torch.Tensor | None = None) -> SpeakerRetrievalOutput:
        frames = mel.shape[1]
        _check_frames(frames, self.multiple)
        mask = _input_mask(lengths, frames)
        z = self.prenet(mel, mask)
        output = SpeakerRetrievalOutput(z0=z, frames=frames, lengths=lengths)
        for conv in self.convs:
            h = mask_frames(self.act(conv(z.transpose(1, 2))).transpose(1, 2), mask)
            weights = h.new_full(
                (h.shape[0], h.shape[1] // self.gamma_t, 1, self.gamma_t), 1.0 / self.gamma_t
            )
            mask = _downsample_mask(mask, self.gamma_t)
            z = mask_frames(
                torch.matmul(weights, temporal_segmentation(h, self.gamma_t)).squeeze(-2), mask
            )
            output.z.append(z)
            output.a_t.append(weights)
        return output


SPEAKER_MODULES = {
    "tcr": SpeakerRetrieval,
    "sv": EmbeddingSpeakerModule,
    "conv": ConvSpeakerModule,
}


def build_speaker_module(cfg: ModelConfig) -> nn.Module:
    return SPEAKER_MODULES[cfg.ablation.speaker_module](cfg)


def mtcr_forward(mel: torch.Tensor, xvec: torch.Tensor, module: nn.Module,
                 cfg: ModelConfig, lengths: torch.Tensor | None = None) -> SpeakerRetrievalOutput:
    if module.levels != cfg.active_blocks:
        raise ConfigMismatch(
            f"speaker module has {module.levels} levels, config asks for {cfg.active_blocks}"
        )
    return module(mel, xvec, lengths)
