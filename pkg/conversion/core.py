import dataclasses
import json
import math
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from contextlib import contextmanager
from dataclasses import dataclass, field
from functools import reduce
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .exceptions import ConfigError, DimensionMismatch, EmptySequence, LengthMismatch

PRECISIONS = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class LossWeights:
    lambda_mel: float = 4.0
    lambda_sty: float = 0.1
    lambda_con: float = 0.01
    lambda_spk: float = 0.1


@dataclass(frozen=True)
class AblationConfig:
    # None means "all blocks off" / "all blocks active"
    uniform_temporal_attn: tuple[bool, ...] | None = None
    uniform_channel_attn: tuple[bool, ...] | None = None
    active_blocks: int | None = None
    disable_cycle: bool = False
    disable_style_loss: bool = False
    disable_content_loss: bool = False
    disable_speaker_loss: bool = False
    speaker_module: str = "tcr"
    paired_reference: str = "self"


@dataclass(frozen=True)
class ModelConfig:
    mel_dim: int = 80
    bnf_dim: int = 256
    pitch_dim: int = 1
    xvec_dim: int = 192
    model_dim: int = 256
    prenet_channels: int = 256
    n_tcr_blocks: int = 3
    gamma_t: int = 4
    gamma_c: int = 4
    gamma_tr: tuple[int, ...] = (16, 4, 1)
    frame_shift_ms: float = 10.0
    pitch_downsample: int = 8
    content_layers: int = 2
    content_heads: int = 4
    smoother_layers: int = 2
    style_dim: int = 128
    content_model_dim: int = 128
    loss_weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 1e-5
    lr_decay: float = 0.5
    lr_decay_steps: int = 50000
    batch_size: int = 4
    checkpoint_every: int = 500
    precision: str = "float32"
    ablation: AblationConfig = field(default_factory=AblationConfig)
    seed: int = 0
    frozen_seed: int = 1234

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        unknown = _unknown_keys(cls, data)
        nested = {"loss_weights": LossWeights, "ablation": AblationConfig}
        for key, klass in nested.items():
            if isinstance(data.get(key), dict):
                unknown += [f"{key}.{name}" for name in _unknown_keys(klass, data[key])]
        if unknown:
            raise ConfigError([f"unknown config key: {name}" for name in unknown])

        values = dict(data)
        if "gamma_tr" in values:
            values["gamma_tr"] = tuple(values["gamma_tr"])
        if "loss_weights" in values:
            values["loss_weights"] = LossWeights(**values["loss_weights"])
        if "ablation" in values:
            ablation = dict(values["ablation"])
            for key in ("uniform_temporal_attn", "uniform_channel_attn"):
                if ablation.get(key) is not None:
                    ablation[key] = tuple(ablation[key])
            values["ablation"] = AblationConfig(**ablation)
        return cls(**values)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def with_ablation(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, ablation=dataclasses.replace(self.ablation, **changes))

    def with_weights(self, **changes) -> "ModelConfig":
        return dataclasses.replace(
            self, loss_weights=dataclasses.replace(self.loss_weights, **changes)
        )

    @property
    def active_blocks(self) -> int:
        return self.ablation.active_blocks or self.n_tcr_blocks

    @property
    def dtype(self) -> torch.dtype:
        return PRECISIONS[self.precision]

    def uniform_temporal(self, level: int) -> bool:
        flags = self.ablation.uniform_temporal_attn
        return bool(flags[level - 1]) if flags else False

    def uniform_channel(self, level: int) -> bool:
        flags = self.ablation.uniform_channel_attn
        return bool(flags[level - 1]) if flags else False

    def level_channels(self, level: int) -> int:
        return self.prenet_channels // self.gamma_c**level

    @property
    def retrieval_multiple(self) -> int:
        """Length every retrieval input must be a multiple of."""
        spans = [self.gamma_t**level * self.gamma_tr[level - 1]
                 for level in range(1, self.n_tcr_blocks + 1)]
        return reduce(math.lcm, spans, 1)

    @property
    def temporal_multiple(self) -> int:
        """Length every padded sequence must be a multiple of."""
        return math.lcm(self.retrieval_multiple, self.pitch_downsample)


def _unknown_keys(klass, data: dict) -> list[str]:
    known = {f.name for f in dataclasses.fields(klass)}
    return sorted(set(data) - known)


def tiny_config(**overrides) -> ModelConfig:
    """Small double-precision configuration for gradient and determinism checks."""
    cfg = ModelConfig(
        mel_dim=6,
        bnf_dim=5,
        xvec_dim=4,
        model_dim=8,
        prenet_channels=8,
        n_tcr_blocks=2,
        gamma_t=2,
        gamma_c=2,
        gamma_tr=(2, 1),
        pitch_downsample=2,
        content_layers=1,
        content_heads=2,
        smoother_layers=1,
        style_dim=6,
        content_model_dim=6,
        lr=1e-3,
        batch_size=2,
        checkpoint_every=5,
        precision="float64",
    )
    return dataclasses.replace(cfg, **overrides)


def validate_config(cfg: ModelConfig) -> ModelConfig:
    from .forms import ModelConfigForm

    form = ModelConfigForm(data=ModelConfigForm.data_from_config(cfg))
    if not form.is_valid():
        raise ConfigError(
            [f"{name}: {message}" for name, messages in form.errors.items()
             for message in messages]
        )
    return cfg


def load_config(path) -> ModelConfig:
    path = Path(path)
    if path.suffix == ".toml":
        with path.open("rb") as fh:
            data = tomllib.load(fh)
    else:
        data = json.loads(path.read_text())
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    return validate_config(ModelConfig.from_dict(data))


@contextmanager
def seeded(seed: int):
    """Run parameter initialisation under a private torch RNG."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def pad_to_multiple(seq, multiple: int):
    """Pad the first axis up to a multiple by replicating the last row.

    Works on numpy arrays and torch tensors. Returns (padded, original_length).
    """
    length = seq.shape[0]
    if length == 0:
        raise EmptySequence("cannot pad an empty sequence")
    if multiple < 1:
        raise ValueError(f"multiple must be >= 1, got {multiple}")
    extra = -length % multiple
    if extra == 0:
        return seq, length
    if isinstance(seq, torch.Tensor):
        tail = seq[-1:].expand(extra, *seq.shape[1:])
        return torch.cat([seq, tail], dim=0), length
    tail = np.repeat(seq[-1:], extra, axis=0)
    return np.concatenate([seq, tail], axis=0), length


def pad_to_length(seq, length: int):
    if seq.shape[0] > length:
        raise LengthMismatch(f"sequence of {seq.shape[0]} frames exceeds {length}")
    padded, _ = pad_to_multiple(seq, length) if seq.shape[0] != length else (seq, length)
    return padded


@dataclass
class FeatureBundle:
    """Aligned features of one utterance (unbatched, numpy)."""

    mel: np.ndarray
    bnf: np.ndarray
    pitch: np.ndarray
    xvec: np.ndarray
    speaker_id: str
    true_length: int | None = None

    def __post_init__(self):
        if self.pitch.ndim == 1:
            self.pitch = self.pitch[:, None]
        frames = {self.mel.shape[0], self.bnf.shape[0], self.pitch.shape[0]}
        if len(frames) != 1:
            raise LengthMismatch(
                f"mel/bnf/pitch lengths differ: {self.mel.shape[0]}, "
                f"{self.bnf.shape[0]}, {self.pitch.shape[0]}"
            )
        if self.true_length is None:
            self.true_length = self.frames
        if not 1 <= self.true_length <= self.frames:
            raise LengthMismatch(
                f"true_length {self.true_length} outside 1..{self.frames}"
            )

    @property
    def frames(self) -> int:
        return self.mel.shape[0]

    def padded(self, multiple: int) -> "FeatureBundle":
        return FeatureBundle(
            mel=pad_to_multiple(self.mel, multiple)[0],
            bnf=pad_to_multiple(self.bnf, multiple)[0],
            pitch=pad_to_multiple(self.pitch, multiple)[0],
            xvec=self.xvec,
            speaker_id=self.speaker_id,
            true_length=self.true_length,
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {"mel": self.mel, "bnf": self.bnf, "pitch": self.pitch, "xvec": self.xvec}


@dataclass
class FeatureBatch:
    """Stacked, padded utterances as tensors of shape (B, T, ...)."""

    mel: torch.Tensor
    bnf: torch.Tensor
    pitch: torch.Tensor
    xvec: torch.Tensor
    lengths: torch.Tensor
    speaker_ids: tuple[str, ...]

    @classmethod
    def collate(cls, bundles: Sequence[FeatureBundle], multiple: int,
                dtype: torch.dtype = torch.float32) -> "FeatureBatch":
        if not bundles:
            raise EmptySequence("cannot collate an empty batch")
        padded = [bundle.padded(multiple) for bundle in bundles]
        frames = max(bundle.frames for bundle in padded)

        def stack(name):
            return torch.stack([
                torch.as_tensor(pad_to_length(getattr(b, name), frames), dtype=dtype)
                for b in padded
            ])

        return cls(
            mel=stack("mel"),
            bnf=stack("bnf"),
            pitch=stack("pitch"),
            xvec=torch.stack([torch.as_tensor(b.xvec, dtype=dtype) for b in padded]),
            lengths=torch.tensor([b.true_length for b in padded], dtype=torch.long),
            speaker_ids=tuple(b.speaker_id for b in padded),
        )

    @property
    def frames(self) -> int:
        return self.mel.shape[1]

    def mask(self) -> torch.Tensor:
        return frame_mask(self.lengths, self.frames)


def frame_mask(lengths: torch.Tensor, frames: int) -> torch.Tensor:
    """(B, frames) boolean mask, True on the first ``lengths[b]`` frames."""
    return torch.arange(frames)[None, :] < lengths[:, None]


@dataclass
class AttentionResult:
    output: torch.Tensor
    weights: torch.Tensor


def mask_frames(x: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    """Zero the frames of a (B, T, ...) tensor where the (B, T) mask is False."""
    if mask is None:
        return x
    return torch.where(mask.reshape(*mask.shape, *(1,) * (x.ndim - 2)), x, x.new_zeros(()))


def attend(query: torch.Tensor, keys: torch.Tensor, values: torch.Tensor,
           scale: float, *, uniform: bool = False,
           mask: torch.Tensor | None = None) -> AttentionResult:
    """Scaled dot-product attention over the second-to-last axis of keys.

    query (..., q, d), keys (..., n, d), values (..., n, e); leading axes
    broadcast. With ``uniform`` the weights are forced to 1/n. ``mask``
    broadcasts against the (..., q, n) logits; False candidates get zero
    weight and every fiber must keep at least one candidate.
    """
    if query.shape[-1] != keys.shape[-1]:
        raise DimensionMismatch(
            f"query width {query.shape[-1]} != key width {keys.shape[-1]}"
        )
    if keys.shape[-2] != values.shape[-2]:
        raise DimensionMismatch(
            f"{keys.shape[-2]} keys but {values.shape[-2]} values"
        )
    if keys.shape[-2] < 1:
        raise EmptySequence("attention over zero candidates")
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")

    logits = torch.matmul(query, keys.transpose(-1, -2)) / scale
    if mask is not None:
        mask = mask.expand_as(logits)
        logits = logits.masked_fill(~mask, float("-inf"))
    if uniform and mask is not None:
        keep = mask.to(logits.dtype)
        weights = keep / keep.sum(dim=-1, keepdim=True)
    elif uniform:
        weights = torch.full_like(logits, 1.0 / keys.shape[-2])
    else:
        shifted = logits - logits.amax(dim=-1, keepdim=True)
        exp = torch.exp(shifted)
        weights = exp / exp.sum(dim=-1, keepdim=True)
    return AttentionResult(output=torch.matmul(weights, values), weights=weights)
