import logging

import torch
from torch import nn

from .core import FeatureBatch, ModelConfig, seeded
from .decoder import ConversionResult, SpeechDecoder, decode
from .encoders import SourceEncoder, SourceRepresentation
from .exceptions import DivisibilityError
from .retrieval import SpeakerRetrievalOutput, build_speaker_module, mtcr_forward

logger = logging.getLogger(__name__)


class VoiceConverter(nn.Module):
    """Source encoders, speaker retrieval and decoder as one trainable module."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        with seeded(cfg.seed):
            self.source_encoder = SourceEncoder(cfg)
            self.speaker = build_speaker_module(cfg)
            self.decoder = SpeechDecoder(cfg)
        self.to(cfg.dtype)
        logger.debug(
            "converter built params=%d levels=%d speaker_module=%s",
            sum(p.numel() for p in self.parameters()),
            cfg.active_blocks,
            cfg.ablation.speaker_module,
        )

    def _check_padded(self, batch: FeatureBatch):
        multiple = self.cfg.temporal_multiple
        if batch.frames % multiple:
            raise DivisibilityError(
                f"{batch.frames} frames is not a multiple of {multiple}; "
                f"collate with FeatureBatch.collate(bundles, {multiple})"
            )

    def encode_source(self, source: FeatureBatch) -> SourceRepresentation:
        self._check_padded(source)
        return self.source_encoder(source.bnf, source.pitch, source.mask())

    def retrieve(self, mel: torch.Tensor, xvec: torch.Tensor,
                 lengths: torch.Tensor | None = None) -> SpeakerRetrievalOutput:
        return mtcr_forward(mel, xvec, self.speaker, self.cfg, lengths)

    def convert_with(self, source: FeatureBatch, target_mel: torch.Tensor,
                     target_bnf: torch.Tensor, xvec: torch.Tensor,
                     target_lengths: torch.Tensor | None = None) -> ConversionResult:
        """Convert ``source`` to the timbre carried by an explicit target mel/BNF/x-vector."""
        source_rep = self.encode_source(source)
        retrieval = self.retrieve(target_mel, xvec, target_lengths)
        return decode(source_rep, source.bnf, target_bnf, retrieval, self.decoder, self.cfg,
                      source.mask())

    def convert(self, source: FeatureBatch, target: FeatureBatch) -> ConversionResult:
        self._check_padded(target)
        return self.convert_with(source, target.mel, target.bnf, target.xvec, target.lengths)

    def forward(self, source: FeatureBatch, target: FeatureBatch) -> ConversionResult:
        return self.convert(source, target)
