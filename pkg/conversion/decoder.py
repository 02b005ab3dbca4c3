"""
Speech decoder.

Fusion blocks run coarse to fine: the deepest retrieval level is consumed
first. Each block cross-attends from source frames (queried by state plus
source BNFs) into the target speaker's retrieved rows, keyed by speaker BNFs
pooled with the same temporal attention maps that produced those rows.
Retrieved rows past the target's true length are never attended, and source
frames past the source's true length never reach a valid frame.
"""

import math
from dataclasses import dataclass

import torch
from torch import nn

from .core import ModelConfig, attend, mask_frames
from .encoders import SourceRepresentation
from .exceptions import ConfigMismatch, DimensionMismatch, LengthMismatch
from .retrieval import PlaneConv, SpeakerRetrievalOutput, temporal_segmentation


def align_speaker_keys(bnf_spk: torch.Tensor, a_t_maps: list[torch.Tensor],
                       level: int, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Pool (B, T, bnf_dim) speaker BNFs through ``level`` temporal attention maps.

    ``mask`` (B, T) zeroes speaker frames past the true length first.
    """
    keys = mask_frames(bnf_spk, mask)
    if not a_t_maps:
        # embedding-only speaker module: one row per level
        if mask is None:
            return keys.mean(dim=1, keepdim=True)
        count = mask.sum(dim=1).to(keys.dtype)[:, None, None]
        return keys.sum(dim=1, keepdim=True) / count
    if not 1 <= level <= len(a_t_maps):
        raise LengthMismatch(f"level {level} outside 1..{len(a_t_maps)}")
    for weights in a_t_maps[:level]:
        gamma_t = weights.shape[-1]
        if keys.shape[1] != weights.shape[1] * gamma_t:
            raise LengthMismatch(
                f"speaker BNFs have {keys.shape[1]} frames but the attention map "
                f"covers {weights.shape[1] * gamma_t}"
            )
        keys = torch.matmul(weights, temporal_segmentation(keys, gamma_t)).squeeze(-2)
    return keys


class FusionBlock(nn.Module):
    def __init__(self, cfg: ModelConfig, level: int):
        super().__init__()
        self.level = level
        dim = cfg.model_dim
        self.proj_s = nn.Linear(cfg.bnf_dim, dim)
        self.proj_q = nn.Linear(dim, dim)
        self.proj_k = nn.Linear(cfg.bnf_dim, dim)
        self.proj_v = nn.Linear(cfg.level_channels(level), dim)
        self.conv = PlaneConv()
        self.act = nn.GELU()
        self.out = nn.Linear(dim, dim)

    def forward(self, state: torch.Tensor, bnf_src: torch.Tensor,
                spk_keys: torch.Tensor, z_s: torch.Tensor,
                row_mask: torch.Tensor | None = None,
                mask: torch.Tensor | None = None):
        """``row_mask`` (B, n_l) marks valid speaker rows, ``mask`` (B, T) valid source frames."""
        if spk_keys.shape[1] != z_s.shape[1]:
            raise DimensionMismatch(
                f"{spk_keys.shape[1]} speaker keys but {z_s.shape[1]} retrieved rows"
            )
        if z_s.shape[-1] != self.proj_v.in_features:
            raise DimensionMismatch(
                f"level {self.level} expects {self.proj_v.in_features} channels, "
                f"got {z_s.shape[-1]}"
            )
        if state.shape[:2] != bnf_src.shape[:2]:
            raise DimensionMismatch("decoder state and source BNFs differ in length")
        query = self.proj_q(state + self.proj_s(bnf_src))
        result = attend(
            query, self.proj_k(spk_keys), self.proj_v(z_s), math.sqrt(query.shape[-1]),
            mask=None if row_mask is None else row_mask[:, None, :],
        )
        state = state + result.output
        state = state + self.out(self.act(self.conv(mask_frames(state, mask))))
        return state, result.weights


class Postnet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        dim, mel = cfg.model_dim, cfg.mel_dim
        self.layers = nn.ModuleList([
            nn.Conv1d(mel, dim, kernel_size=5, padding=2),
            nn.Conv1d(dim, dim, kernel_size=5, padding=2),
            nn.Conv1d(dim, mel, kernel_size=5, padding=2),
        ])

    def forward(self, mel: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        x = mel
        for i, layer in enumerate(self.layers):
            x = layer(mask_frames(x, mask).transpose(1, 2)).transpose(1, 2)
            if i < len(self.layers) - 1:
                x = torch.tanh(x)
        return mel + x


@dataclass
class ConversionResult:
    mel: torch.Tensor
    mel_pre: torch.Tensor
    cross_attn: list[torch.Tensor]
    retrieval: SpeakerRetrievalOutput
    source_rep: SourceRepresentation

    @property
    def fusion_levels(self) -> list[int]:
        """Retrieval level consumed by each fusion block, in application order."""
        return list(range(len(self.cross_attn), 0, -1))

    def named_arrays(self) -> dict[str, torch.Tensor]:
        arrays = {"mel": self.mel, "mel_pre": self.mel_pre}
        for level, attn in zip(self.fusion_levels, self.cross_attn):
            arrays[f"xattn_l{level}"] = attn
        return arrays


class SpeechDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.levels = cfg.active_blocks
        self.fusion = nn.ModuleList(
            FusionBlock(cfg, level) for level in range(cfg.active_blocks, 0, -1)
        )
        self.smoother = nn.ModuleList(
            nn.TransformerEncoderLayer(
                cfg.model_dim, cfg.content_heads, dim_feedforward=2 * cfg.model_dim,
                dropout=0.0, activation="gelu", batch_first=True,
            )
            for _ in range(cfg.smoother_layers)
        )
        self.to_mel = nn.Linear(cfg.model_dim, cfg.mel_dim)
        self.postnet = Postnet(cfg)

    def forward(self, source_rep: SourceRepresentation, bnf_src: torch.Tensor,
                bnf_spk: torch.Tensor, retrieval: SpeakerRetrievalOutput,
                mask: torch.Tensor | None = None) -> ConversionResult:
        if retrieval.levels != self.levels:
            raise ConfigMismatch(
                f"retrieval has {retrieval.levels} levels, decoder expects {self.levels}"
            )
        spk_mask = retrieval.frame_mask()
        state = source_rep.z_add
        cross_attn = []
        for block in self.fusion:
            keys = align_speaker_keys(bnf_spk, retrieval.a_t, block.level, spk_mask)
            state, weights = block(state, bnf_src, keys, retrieval.z[block.level - 1],
                                   retrieval.level_mask(block.level), mask)
            cross_attn.append(weights)
        padding = None if mask is None else ~mask
        for layer in self.smoother:
            state = layer(state, src_key_padding_mask=padding)
        mel_pre = self.to_mel(state)
        return ConversionResult(
            mel=self.postnet(mel_pre, mask),
            mel_pre=mel_pre,
            cross_attn=cross_attn,
            retrieval=retrieval,
            source_rep=source_rep,
        )


def decode(source_rep: SourceRepresentation, bnf_src: torch.Tensor, bnf_spk: torch.Tensor,
           retrieval: SpeakerRetrievalOutput, decoder: SpeechDecoder,
           cfg: ModelConfig, mask: torch.Tensor | None = None) -> ConversionResult:
    if decoder.levels != cfg.active_blocks:
        raise ConfigMismatch(
            f"decoder has {decoder.levels} fusion blocks, config asks for {cfg.active_blocks}"
        )
    return decoder(source_rep, bnf_src, bnf_spk, retrieval, mask)
