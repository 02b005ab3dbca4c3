"""
Frozen perceptual networks and the training losses built on them.

The style, content and speaker-verification networks are seeded random
networks with gradients disabled. Gradients still flow through them into the
converter. All reductions are mean-over-elements on the valid frames of the
reference utterance.
"""

import hashlib
import logging
from dataclasses import dataclass, field

import torch
from torch import nn

from .core import FeatureBatch, ModelConfig, seeded
from .exceptions import ConfigError, ConfigMismatch, DimensionMismatch
from .retrieval import SpeakerRetrievalOutput

logger = logging.getLogger(__name__)

STYLE_LEVELS = ("h_l", "h_m", "h_h")


def _strided_width(width: int, layers: int) -> int:
    for _ in range(layers):
        width = (width - 1) // 2 + 1
    return width


@dataclass
class StyleFeatures:
    h_l: torch.Tensor
    h_m: torch.Tensor
    h_h: torch.Tensor


class StyleModel(nn.Module):
    """Reference-encoder conv stack followed by three affine layers."""

    def __init__(self, cfg: ModelConfig, channels: tuple[int, ...] = (4, 8)):
        super().__init__()
        layers, in_ch = [], 1
        for out_ch in channels:
            layers += [nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=(1, 2), padding=1),
                       nn.Tanh()]
            in_ch = out_ch
        self.convs = nn.Sequential(*layers)
        flat = in_ch * _strided_width(cfg.mel_dim, len(channels))
        self.fc1 = nn.Linear(flat, cfg.style_dim)
        self.fc2 = nn.Linear(cfg.style_dim, cfg.style_dim)
        self.fc3 = nn.Linear(cfg.style_dim, cfg.style_dim)

    def forward(self, mel: torch.Tensor) -> StyleFeatures:
        hidden = self.convs(mel.unsqueeze(1))  # (B, ch, T, F')
        hidden = hidden.permute(0, 2, 1, 3).flatten(2)
        h_l = self.fc1(hidden)
        h_m = torch.tanh(self.fc2(h_l))
        return StyleFeatures(h_l=h_l, h_m=h_m, h_h=self.fc3(h_m.mean(dim=1)))


class Highway(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.transform = nn.Linear(dim, dim)
        self.gate = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        gate = torch.sigmoid(self.gate(x))
        return gate * torch.tanh(self.transform(x)) + (1 - gate) * x


class ContentModel(nn.Module):
    """CBHG-style BNF predictor: conv bank, max pool, projections, highway, bi-GRU."""

    def __init__(self, cfg: ModelConfig, bank: tuple[int, ...] = (1, 3, 5)):
        super().__init__()
        dim = cfg.content_model_dim
        self.bank = nn.ModuleList(
            nn.Conv1d(cfg.mel_dim, dim, kernel_size=k, padding=k // 2) for k in bank
        )
        self.pool = nn.MaxPool1d(kernel_size=2, stride=1, padding=1)
        self.proj1 = nn.Conv1d(dim * len(bank), dim, kernel_size=3, padding=1)
        self.proj2 = nn.Conv1d(dim, cfg.mel_dim, kernel_size=3, padding=1)
        self.pre_highway = nn.Linear(cfg.mel_dim, dim)
        self.highway = Highway(dim)
        self.gru = nn.GRU(dim, dim, batch_first=True, bidirectional=True)
        self.out = nn.Linear(2 * dim, cfg.bnf_dim)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        x = mel.transpose(1, 2)
        frames = x.shape[-1]
        banked = torch.cat([torch.tanh(conv(x)) for conv in self.bank], dim=1)
        pooled = self.pool(banked)[..., :frames]
        projected = self.proj2(torch.tanh(self.proj1(pooled)))
        hidden = self.highway(self.pre_highway(projected.transpose(1, 2) + mel))
        recurrent, _ = self.gru(hidden)
        return self.out(recurrent)


class SpeakerVerifierStub(nn.Module):
    """Frame convolution with mean/std pooling to a fixed-width embedding."""

    def __init__(self, cfg: ModelConfig, hidden: int = 64):
        super().__init__()
        self.conv = nn.Conv1d(cfg.mel_dim, hidden, kernel_size=3, padding=1)
        self.embed = nn.Linear(2 * hidden, cfg.xvec_dim)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        hidden = torch.tanh(self.conv(mel.transpose(1, 2)))
        stats = torch.cat([hidden.mean(dim=-1), hidden.std(dim=-1, correction=0)], dim=-1)
        return self.embed(stats)


@dataclass
class FrozenModels:
    style_model: StyleModel
    content_model: ContentModel
    sv_stub: SpeakerVerifierStub

    @classmethod
    def build(cls, cfg: ModelConfig) -> "FrozenModels":
        with seeded(cfg.frozen_seed):
            frozen = cls(
                style_model=StyleModel(cfg),
                content_model=ContentModel(cfg),
                sv_stub=SpeakerVerifierStub(cfg),
            )
        for module in frozen.modules():
            module.to(cfg.dtype)
            module.eval()
            module.requires_grad_(False)
        logger.debug("frozen models built fingerprint=%s", frozen.fingerprint()[:12])
        return frozen

    def modules(self) -> tuple[nn.Module, ...]:
        return (self.style_model, self.content_model, self.sv_stub)

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        for module in self.modules():
            for name, tensor in module.state_dict().items():
                digest.update(name.encode())
                digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
        return digest.hexdigest()


def _batched(x: torch.Tensor) -> torch.Tensor:
    return x.unsqueeze(0) if x.ndim == 2 else x


def _full_lengths(x: torch.Tensor) -> torch.Tensor:
    return torch.full((x.shape[0],), x.shape[1], dtype=torch.long)


def mel_loss(pred: torch.Tensor, target: torch.Tensor,
             lengths: torch.Tensor | None = None) -> torch.Tensor:
    """Mean squared error over in-length elements; accepts (T, D) or (B, T, D)."""
    if pred.shape != target.shape:
        raise DimensionMismatch(
            f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ"
        )
    pred, target = _batched(pred), _batched(target)
    if lengths is None:
        return torch.mean((pred - target) ** 2)
    mask = (torch.arange(pred.shape[1])[None, :] < lengths[:, None]).to(pred.dtype)
    squared = ((pred - target) ** 2) * mask[..., None]
    return squared.sum() / (mask.sum() * pred.shape[-1])


def _cropped_pairs(pred_mel, ref_mel, lengths):
    if pred_mel.shape != ref_mel.shape:
        raise DimensionMismatch(
            f"mels {tuple(pred_mel.shape)} and {tuple(ref_mel.shape)} differ"
        )
    pred_mel, ref_mel = _batched(pred_mel), _batched(ref_mel)
    if lengths is None:
        lengths = _full_lengths(ref_mel)
    for b, length in enumerate(lengths.tolist()):
        yield pred_mel[b:b + 1, :length], ref_mel[b:b + 1, :length]


def style_terms(pred_mel: torch.Tensor, ref_mel: torch.Tensor, frozen: FrozenModels,
                lengths: torch.Tensor | None = None) -> dict[str, torch.Tensor]:
    """Per-level style distances, averaged over batch members."""
    sums = {level: 0.0 for level in STYLE_LEVELS}
    count = 0
    for pred, ref in _cropped_pairs(pred_mel, ref_mel, lengths):
        pred_feats = frozen.style_model(pred)
        ref_feats = frozen.style_model(ref)
        for level in STYLE_LEVELS:
            sums[level] = sums[level] + mel_loss(getattr(ref_feats, level),
                                                 getattr(pred_feats, level))
        count += 1
    return {level: value / count for level, value in sums.items()}


def style_loss(pred_mel: torch.Tensor, ref_mel: torch.Tensor, frozen: FrozenModels,
               lengths: torch.Tensor | None = None) -> torch.Tensor:
    return sum(style_terms(pred_mel, ref_mel, frozen, lengths).values())


def content_loss(pred_mel: torch.Tensor, ref_mel: torch.Tensor, frozen: FrozenModels,
                 lengths: torch.Tensor | None = None) -> torch.Tensor:
    total, count = 0.0, 0
    for pred, ref in _cropped_pairs(pred_mel, ref_mel, lengths):
        total = total + mel_loss(frozen.content_model(ref), frozen.content_model(pred))
        count += 1
    return total / count


def speaker_loss(retrieval_ref: SpeakerRetrievalOutput, retrieval_pred: SpeakerRetrievalOutput,
                 ref_lengths: torch.Tensor | None = None,
                 pred_lengths: torch.Tensor | None = None) -> torch.Tensor:
    if retrieval_ref.levels != retrieval_pred.levels:
        raise ConfigMismatch(
            f"reference has {retrieval_ref.levels} levels, prediction {retrieval_pred.levels}"
        )
    ref_avg = retrieval_ref.time_averaged(ref_lengths)
    pred_avg = retrieval_pred.time_averaged(pred_lengths)
    return sum(mel_loss(r, p) for r, p in zip(ref_avg, pred_avg))


@dataclass
class LossBreakdown:
    """Weighted loss terms. ``details`` holds unweighted diagnostics kept out of the total."""

    terms: dict[str, tuple[torch.Tensor, float]] = field(default_factory=dict)
    details: dict[str, torch.Tensor] = field(default_factory=dict)

    def add(self, name: str, value: torch.Tensor, weight: float):
        self.terms[name] = (value, float(weight))

    def merge(self, other: "LossBreakdown") -> "LossBreakdown":
        return LossBreakdown(
            terms={**self.terms, **other.terms}, details={**self.details, **other.details}
        )

    @property
    def total(self) -> torch.Tensor:
        if not self.terms:
            return torch.zeros(())
        return sum(weight * value for value, weight in self.terms.values())

    def values(self) -> dict[str, float]:
        return {name: float(value) for name, (value, _) in self.terms.items()}

    def weighted(self) -> dict[str, float]:
        return {name: weight * float(value) for name, (value, weight) in self.terms.items()}

    def as_record(self) -> dict:
        record = {"total": float(self.total), "terms": self.values()}
        if self.details:
            record["details"] = {name: float(v) for name, v in self.details.items()}
        return record


def paired_loss(X: FeatureBatch, model, frozen: FrozenModels, cfg: ModelConfig,
                reference: FeatureBatch | None = None):
    """Reconstruct X from its own streams. The mel term carries weight 1.

    ``reference`` supplies the timbre when training against another utterance
    of the same speaker.
    """
    weights, ablation = cfg.loss_weights, cfg.ablation
    result = model.convert(X, reference if reference is not None else X)
    breakdown = LossBreakdown()
    breakdown.add("pair/mel", mel_loss(result.mel, X.mel, X.lengths), 1.0)
    if not ablation.disable_speaker_loss:
        retrieval_ref = model.retrieve(X.mel, X.xvec, X.lengths)
        retrieval_pred = model.retrieve(result.mel, X.xvec, X.lengths)
        breakdown.add("pair/spk",
                      speaker_loss(retrieval_ref, retrieval_pred, X.lengths, X.lengths),
                      weights.lambda_spk)
    if not ablation.disable_style_loss:
        levels = style_terms(result.mel, X.mel, frozen, X.lengths)
        breakdown.add("pair/sty", sum(levels.values()), weights.lambda_sty)
        breakdown.details.update({f"pair/sty.{k}": v for k, v in levels.items()})
    if not ablation.disable_content_loss:
        breakdown.add("pair/con", content_loss(result.mel, X.mel, frozen, X.lengths),
                      weights.lambda_con)
    return breakdown.total, breakdown


def unpaired_loss(X: FeatureBatch, Y: FeatureBatch, model, frozen: FrozenModels,
                  cfg: ModelConfig):
    """Cycle path: Y converted to X's timbre, then converted back towards X."""
    weights, ablation = cfg.loss_weights, cfg.ablation
    breakdown = LossBreakdown()
    if ablation.disable_cycle:
        return breakdown.total, breakdown, {}

    y_x = model.convert_with(Y, X.mel, X.bnf, X.xvec, X.lengths)
    x_hat = model.convert_with(X, y_x.mel, Y.bnf, X.xvec, Y.lengths)

    breakdown.add("unpair/mel", mel_loss(x_hat.mel, X.mel, X.lengths), weights.lambda_mel)
    if not ablation.disable_speaker_loss:
        retrieval_ref = model.retrieve(X.mel, X.xvec, X.lengths)
        retrieval_pred = model.retrieve(y_x.mel, X.xvec, Y.lengths)
        breakdown.add("unpair/spk",
                      speaker_loss(retrieval_ref, retrieval_pred, X.lengths, Y.lengths),
                      weights.lambda_spk)
    if not ablation.disable_style_loss:
        breakdown.add("unpair/sty_yx", style_loss(y_x.mel, Y.mel, frozen, Y.lengths),
                      weights.lambda_sty)
        breakdown.add("unpair/sty_cycle", style_loss(x_hat.mel, X.mel, frozen, X.lengths),
                      weights.lambda_sty)
    if not ablation.disable_content_loss:
        breakdown.add("unpair/con_yx", content_loss(y_x.mel, Y.mel, frozen, Y.lengths),
                      weights.lambda_con)
        breakdown.add("unpair/con_cycle", content_loss(x_hat.mel, X.mel, frozen, X.lengths),
                      weights.lambda_con)
    return breakdown.total, breakdown, {"y_x": y_x, "x_hat": x_hat}


def total_loss(X: FeatureBatch, Y: FeatureBatch, model, frozen: FrozenModels,
               cfg: ModelConfig):
    same_speaker = cfg.ablation.paired_reference == "same_speaker"
    if same_speaker and not cfg.ablation.disable_cycle:
        raise ConfigError("paired_reference=same_speaker requires disable_cycle")
    reference = Y if same_speaker else None
    _, paired = paired_loss(X, model, frozen, cfg, reference=reference)
    _, unpaired, _ = unpaired_loss(X, Y, model, frozen, cfg)
    breakdown = paired.merge(unpaired)
    return breakdown.total, breakdown
