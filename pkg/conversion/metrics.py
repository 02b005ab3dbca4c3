"""Objective metrics: pitch correlation, EER threshold and speaker accuracy."""

import logging
import shlex
import subprocess
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy.stats import pearsonr
from sklearn.metrics import roc_curve

from .container import write_container
from .core import FeatureBatch, FeatureBundle
from .exceptions import (
    DegenerateInput,
    EmptySet,
    LengthMismatch,
    OneClassOnly,
    VoiceLabError,
)
from .synthetic import default_pitch_bins, pitch_profile

logger = logging.getLogger(__name__)


def pearson_lf0(src_pitch, conv_pitch) -> float:
    """Pearson correlation over frames voiced in both contours (both nonzero)."""
    src = np.asarray(src_pitch, dtype=float).ravel()
    conv = np.asarray(conv_pitch, dtype=float).ravel()
    if src.shape != conv.shape:
        raise LengthMismatch(f"contours have {src.size} and {conv.size} frames")
    voiced = (src != 0) & (conv != 0)
    if voiced.sum() < 2:
        raise DegenerateInput("fewer than two frames voiced in both contours")
    src, conv = src[voiced], conv[voiced]
    if np.ptp(src) == 0 or np.ptp(conv) == 0:
        raise DegenerateInput("contour is constant on the voiced frames")
    r, _ = pearsonr(src, conv)
    return float(r)


def eer_threshold(scores: Sequence[tuple[float, bool]]) -> tuple[float, float]:
    """Threshold where false-accept and false-reject rates meet; returns (threshold, eer).

    A trial is accepted when its score is >= threshold. Between adjacent
    operating points the crossing is linearly interpolated; on an exact tie the
    threshold sits mid-plateau.
    """
    values = np.array([s for s, _ in scores], dtype=float)
    labels = np.array([bool(same) for _, same in scores], dtype=int)
    if labels.size == 0 or labels.min() == labels.max():
        raise OneClassOnly("EER needs both same-speaker and different-speaker trials")

    far, tpr, thresholds = roc_curve(labels, values, drop_intermediate=False)
    frr = 1.0 - tpr
    thresholds = thresholds.astype(float)
    thresholds[0] = np.nextafter(values.max(), np.inf)
    diff = far - frr
    diff[np.abs(diff) < 1e-12] = 0.0

    k = int(np.argmax(diff >= 0))
    if diff[k] == 0:
        end = k
        while end + 1 < len(diff) and diff[end + 1] == 0:
            end += 1
        lower = thresholds[end + 1] if end + 1 < len(thresholds) else thresholds[end]
        return float((thresholds[k] + lower) / 2), float(far[k])

    t = diff[k - 1] / (diff[k - 1] - diff[k])
    threshold = thresholds[k - 1] + t * (thresholds[k] - thresholds[k - 1])
    eer = far[k - 1] + t * (far[k] - far[k - 1])
    return float(threshold), float(eer)


def cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return torch.nn.functional.cosine_similarity(a, b, dim=-1)


@torch.no_grad()
def embed(sv_stub, mel) -> torch.Tensor:
    dtype = next(sv_stub.parameters()).dtype
    mel = torch.as_tensor(np.asarray(mel), dtype=dtype)
    return sv_stub(mel[None])[0]


def speaker_accuracy(converted_mels, target_mels, sv_stub, threshold: float) -> float:
    if len(converted_mels) == 0:
        raise EmptySet("no converted utterances to score")
    if len(converted_mels) != len(target_mels):
        raise LengthMismatch(
            f"{len(converted_mels)} converted mels but {len(target_mels)} targets"
        )
    hits = [
        float(cosine(embed(sv_stub, conv), embed(sv_stub, target))) >= threshold
        for conv, target in zip(converted_mels, target_mels)
    ]
    return sum(hits) / len(hits)


def trial_scores(embeddings: Sequence[torch.Tensor],
                 speaker_ids: Sequence[str]) -> list[tuple[float, bool]]:
    """Cosine scores of every unordered pair of distinct utterances."""
    trials = []
    for i in range(len(embeddings)):
        for j in range(i + 1, len(embeddings)):
            trials.append((float(cosine(embeddings[i], embeddings[j])),
                           speaker_ids[i] == speaker_ids[j]))
    return trials


def estimate_pitch(mel, pitch_bins: int, voicing_threshold: float = 0.2) -> np.ndarray:
    """Read the pitch band back from the last ``pitch_bins`` mel bins; 0 marks unvoiced."""
    mel = np.asarray(mel, dtype=float)
    profile = pitch_profile(pitch_bins)
    level = mel[:, -pitch_bins:] @ profile / (profile @ profile)
    return np.where(level > voicing_threshold, level, 0.0)


class ExternalWerEvaluator:
    """Runs ``command <container path>`` and reads the rate from the last stdout line."""

    def __init__(self, command: str, timeout: float = 600):
        self.command = shlex.split(command)
        self.timeout = timeout

    def __call__(self, converted: dict[str, np.ndarray]) -> float:
        with tempfile.TemporaryDirectory() as tmp:
            path = write_container(Path(tmp) / "converted.mtcr", converted)
            completed = subprocess.run(
                [*self.command, str(path)], capture_output=True, text=True,
                timeout=self.timeout,
            )
        if completed.returncode != 0:
            raise VoiceLabError(
                f"WER command exited {completed.returncode}: {completed.stderr.strip()}"
            )
        lines = completed.stdout.strip().splitlines()
        try:
            return float(lines[-1])
        except (IndexError, ValueError) as exc:
            raise VoiceLabError(f"WER command printed no rate: {completed.stdout!r}") from exc


@dataclass
class EvaluationResult:
    p_lf0: float | None
    speaker_accuracy: float
    eer: float
    eer_threshold: float
    wer: float | None
    n_pairs: int

    def as_dict(self) -> dict:
        return asdict(self)


def conversion_pairs(bundles: Sequence[FeatureBundle], n_pairs: int,
                     seed: int = 0) -> list[tuple[int, int]]:
    """(source, target) index pairs; targets come from another speaker when one exists."""
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n_pairs):
        source = int(rng.integers(len(bundles)))
        others = [i for i, b in enumerate(bundles)
                  if b.speaker_id != bundles[source].speaker_id]
        pool = others or list(range(len(bundles)))
        pairs.append((source, pool[int(rng.integers(len(pool)))]))
    return pairs


@torch.no_grad()
def evaluate(converter, corpus, frozen, n_pairs: int = 16, *, seed: int = 0,
             wer_evaluator=None) -> EvaluationResult:
    cfg = converter.cfg
    bundles = list(getattr(corpus, "bundles", corpus))
    if not bundles:
        raise EmptySet("evaluation corpus is empty")
    pitch_bins = getattr(corpus, "pitch_bins", None) or default_pitch_bins(cfg.mel_dim)
    converter.eval()

    embeddings = [embed(frozen.sv_stub, b.mel[:b.true_length]) for b in bundles]
    threshold, eer = eer_threshold(trial_scores(embeddings, [b.speaker_id for b in bundles]))

    converted, targets, correlations, named = [], [], [], {}
    for k, (src, trg) in enumerate(conversion_pairs(bundles, n_pairs, seed)):
        source, target = bundles[src], bundles[trg]
        result = converter.convert(
            FeatureBatch.collate([source], cfg.temporal_multiple, cfg.dtype),
            FeatureBatch.collate([target], cfg.temporal_multiple, cfg.dtype),
        )
        mel = result.mel[0, :source.true_length].cpu().numpy()
        converted.append(mel)
        targets.append(target.mel[:target.true_length])
        named[f"pair{k:04d}/mel"] = mel
        try:
            correlations.append(pearson_lf0(
                source.pitch[:source.true_length, 0], estimate_pitch(mel, pitch_bins)
            ))
        except DegenerateInput:
            logger.debug("skipping pitch correlation for pair %d", k)

    accuracy = speaker_accuracy(converted, targets, frozen.sv_stub, threshold)
    report = EvaluationResult(
        p_lf0=float(np.mean(correlations)) if correlations else None,
        speaker_accuracy=accuracy,
        eer=eer,
        eer_threshold=threshold,
        wer=wer_evaluator(named) if wer_evaluator else None,
        n_pairs=n_pairs,
    )
    logger.info(
        "evaluation pairs=%d accuracy=%.3f eer=%.3f p_lf0=%s",
        n_pairs, accuracy, eer, report.p_lf0,
    )
    return report
