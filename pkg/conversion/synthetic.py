"""
Synthetic feature corpus.

Every utterance is driven by a smooth content trajectory. BNFs are a shared
affine map of that trajectory and so carry no speaker information. Mels mix the
trajectory through a per-speaker timbre basis and carry a voiced pitch band in
their last ``pitch_bins`` bins. X-vectors are noisy copies of a per-speaker
anchor.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .container import read_container, write_container
from .core import FeatureBundle, ModelConfig
from .exceptions import BadRange, CorpusTooSmall

logger = logging.getLogger(__name__)

CONTENT_DIM = 8
MANIFEST = "manifest.json"
_SHARED_STREAM = 1 << 20
_ANCHOR_STREAM = 1 << 21


def default_pitch_bins(mel_dim: int) -> int:
    return max(1, mel_dim // 8)


def pitch_profile(pitch_bins: int) -> np.ndarray:
    return np.hanning(pitch_bins + 2)[1:-1]


@dataclass
class SyntheticSpeaker:
    id: str
    timbre_basis: np.ndarray
    pitch_register: tuple[float, float]
    xvec_anchor: np.ndarray


@dataclass
class SyntheticCorpus:
    seed: int
    pitch_bins: int
    speakers: list[SyntheticSpeaker] = field(default_factory=list)
    bundles: list[FeatureBundle] = field(default_factory=list)

    def by_speaker(self) -> dict[str, list[FeatureBundle]]:
        grouped: dict[str, list[FeatureBundle]] = {}
        for bundle in self.bundles:
            grouped.setdefault(bundle.speaker_id, []).append(bundle)
        return grouped

    def __len__(self) -> int:
        return len(self.bundles)


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def _anchor(seed: int, index: int, dim: int, previous: list[np.ndarray],
            max_cosine: float = 0.9) -> np.ndarray:
    attempt = 0
    while True:
        rng = np.random.default_rng([seed, _ANCHOR_STREAM, index, attempt])
        anchor = rng.normal(size=dim)
        anchor /= np.linalg.norm(anchor)
        if all(_cosine(anchor, other) < max_cosine for other in previous):
            return anchor
        attempt += 1


def _smooth(rng, frames: int, dims: int, sigma: float) -> np.ndarray:
    raw = gaussian_filter1d(rng.normal(size=(frames, dims)), sigma, axis=0, mode="nearest")
    return raw / (raw.std(axis=0, keepdims=True) + 1e-8)


def normalize_pitch(raw: np.ndarray, voiced: np.ndarray) -> np.ndarray:
    """Min-max normalise voiced frames into [0.1, 1]; unvoiced frames are 0."""
    pitch = np.zeros_like(raw)
    values = raw[voiced]
    if values.size == 0:
        return pitch
    span = values.max() - values.min()
    scaled = (values - values.min()) / span if span > 0 else np.full_like(values, 0.5)
    pitch[voiced] = 0.1 + 0.9 * scaled
    return pitch


def synth_corpus(n_speakers: int, utts_per_speaker: int, len_range=(96, 160), seed: int = 0,
                 cfg: ModelConfig | None = None, *, pitch_bins: int | None = None,
                 noise: float = 0.05, xvec_noise: float = 0.02) -> SyntheticCorpus:
    cfg = cfg or ModelConfig()
    lo, hi = len_range
    if n_speakers < 1:
        raise BadRange(f"n_speakers must be >= 1, got {n_speakers}")
    if utts_per_speaker < 1:
        raise BadRange(f"utts_per_speaker must be >= 1, got {utts_per_speaker}")
    if not 2 <= lo <= hi:
        raise BadRange(f"length range ({lo}, {hi}) must satisfy 2 <= min <= max")
    pitch_bins = pitch_bins or default_pitch_bins(cfg.mel_dim)
    if not 1 <= pitch_bins < cfg.mel_dim:
        raise BadRange(f"pitch_bins={pitch_bins} outside 1..{cfg.mel_dim - 1}")

    shared = np.random.default_rng([seed, _SHARED_STREAM])
    bnf_map = shared.normal(size=(CONTENT_DIM, cfg.bnf_dim)) / np.sqrt(CONTENT_DIM)
    bnf_bias = shared.normal(scale=0.1, size=cfg.bnf_dim)
    profile = pitch_profile(pitch_bins)
    content_bins = cfg.mel_dim - pitch_bins

    corpus = SyntheticCorpus(seed=seed, pitch_bins=pitch_bins)
    anchors: list[np.ndarray] = []
    for index in range(n_speakers):
        rng = np.random.default_rng([seed, index])
        anchor = _anchor(seed, index, cfg.xvec_dim, anchors)
        anchors.append(anchor)
        speaker = SyntheticSpeaker(
            id=f"spk{index:03d}",
            timbre_basis=rng.normal(size=(CONTENT_DIM, content_bins)) / np.sqrt(CONTENT_DIM),
            pitch_register=(float(rng.uniform(-0.3, 0.3)), float(rng.uniform(0.1, 0.3))),
            xvec_anchor=anchor,
        )
        corpus.speakers.append(speaker)

        for _ in range(utts_per_speaker):
            frames = int(rng.integers(lo, hi + 1))
            content = _smooth(rng, frames, CONTENT_DIM, sigma=3.0)
            bnf = content @ bnf_map + bnf_bias + noise * rng.normal(size=(frames, cfg.bnf_dim))

            voiced = _smooth(rng, frames, 1, sigma=4.0)[:, 0] > -0.8
            voiced[:2] = True
            mean, spread = speaker.pitch_register
            walk = np.tanh(np.cumsum(0.15 * rng.normal(size=frames)))
            raw_lf0 = mean + spread * walk

            mel = np.empty((frames, cfg.mel_dim))
            mel[:, :content_bins] = content @ speaker.timbre_basis
            mel[:, content_bins:] = (voiced * (1.0 + raw_lf0))[:, None] * profile[None, :]
            mel += noise * rng.normal(size=mel.shape)

            corpus.bundles.append(FeatureBundle(
                mel=mel,
                bnf=bnf,
                pitch=normalize_pitch(raw_lf0, voiced)[:, None],
                xvec=anchor + xvec_noise * rng.normal(size=cfg.xvec_dim),
                speaker_id=speaker.id,
            ))
    logger.info(
        "synthesised corpus speakers=%d utterances=%d seed=%d",
        n_speakers, len(corpus.bundles), seed,
    )
    return corpus


def save_bundle(path, bundle: FeatureBundle) -> Path:
    return write_container(
        path, bundle.arrays(),
        attrs={"speaker_id": bundle.speaker_id, "true_length": bundle.true_length},
    )


def load_bundle(path) -> FeatureBundle:
    arrays, attrs = read_container(path, with_attrs=True)
    return FeatureBundle(
        mel=arrays["mel"],
        bnf=arrays["bnf"],
        pitch=arrays["pitch"],
        xvec=arrays["xvec"],
        speaker_id=attrs.get("speaker_id", Path(path).stem),
        true_length=attrs.get("true_length"),
    )


def save_corpus(corpus: SyntheticCorpus, out_dir) -> Path:
    out_dir = Path(out_dir)
    (out_dir / "utterances").mkdir(parents=True, exist_ok=True)
    counters: dict[str, int] = {}
    files = []
    for bundle in corpus.bundles:
        n = counters.get(bundle.speaker_id, 0)
        counters[bundle.speaker_id] = n + 1
        name = f"utterances/{bundle.speaker_id}_{n:03d}.mtcr"
        save_bundle(out_dir / name, bundle)
        files.append(name)
    write_container(
        out_dir / "speakers.mtcr",
        {f"{s.id}/timbre_basis": s.timbre_basis for s in corpus.speakers}
        | {f"{s.id}/xvec_anchor": s.xvec_anchor for s in corpus.speakers},
        attrs={"pitch_register": {s.id: list(s.pitch_register) for s in corpus.speakers}},
    )
    manifest = {
        "seed": corpus.seed,
        "pitch_bins": corpus.pitch_bins,
        "speakers": [s.id for s in corpus.speakers],
        "utterances": files,
    }
    (out_dir / MANIFEST).write_text(json.dumps(manifest, indent=2))
    return out_dir


def load_corpus(data_dir) -> SyntheticCorpus:
    data_dir = Path(data_dir)
    manifest_path = data_dir / MANIFEST
    if not manifest_path.exists():
        raise CorpusTooSmall(f"{data_dir} has no {MANIFEST}")
    manifest = json.loads(manifest_path.read_text())
    corpus = SyntheticCorpus(seed=manifest["seed"], pitch_bins=manifest["pitch_bins"])
    speakers_path = data_dir / "speakers.mtcr"
    if speakers_path.exists():
        arrays, attrs = read_container(speakers_path, with_attrs=True)
        for speaker_id in manifest["speakers"]:
            corpus.speakers.append(SyntheticSpeaker(
                id=speaker_id,
                timbre_basis=arrays[f"{speaker_id}/timbre_basis"],
                pitch_register=tuple(attrs["pitch_register"][speaker_id]),
                xvec_anchor=arrays[f"{speaker_id}/xvec_anchor"],
            ))
    corpus.bundles = [load_bundle(data_dir / name) for name in manifest["utterances"]]
    return corpus
