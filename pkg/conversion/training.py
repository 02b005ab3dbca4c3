"""
Cycle-based training loop, checkpoints and the finite-difference gradient check.
"""

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .container import read_container, write_container
from .converter import VoiceConverter
from .core import FeatureBatch, FeatureBundle, ModelConfig
from .exceptions import ConfigMismatch, CorpusTooSmall, NonFiniteLoss, ToleranceExceeded
from .perceptual import FrozenModels, LossBreakdown, total_loss

logger = logging.getLogger(__name__)

LOSS_LOG = "loss_log.jsonl"
CHECKPOINT_DIR = "checkpoints"


def lr_schedule(step: int, cfg: ModelConfig) -> float:
    return cfg.lr * cfg.lr_decay ** (step // cfg.lr_decay_steps)


@dataclass
class TrainState:
    converter: VoiceConverter
    optimizer: torch.optim.Optimizer
    step: int = 0
    epoch: int = 0
    # batches of the current epoch already consumed
    epoch_step: int = 0

    @classmethod
    def initial(cls, cfg: ModelConfig) -> "TrainState":
        converter = VoiceConverter(cfg)
        return cls(converter=converter,
                   optimizer=torch.optim.Adam(converter.parameters(), lr=cfg.lr))


def _bundles(corpus) -> list[FeatureBundle]:
    return list(getattr(corpus, "bundles", corpus))


def check_corpus(bundles: Sequence[FeatureBundle], cfg: ModelConfig):
    if not bundles:
        raise CorpusTooSmall("corpus holds no utterances")
    speakers = {bundle.speaker_id for bundle in bundles}
    needs_other_speaker = not cfg.ablation.disable_cycle
    if needs_other_speaker and len(speakers) < 2:
        raise CorpusTooSmall(
            f"cycle training needs at least 2 speakers, corpus has {len(speakers)}"
        )


def epoch_batches(bundles: Sequence[FeatureBundle], cfg: ModelConfig,
                  epoch: int) -> list[tuple[list[int], list[int]]]:
    """Shuffled (X, Y) index batches for one epoch, bucketed by padded length.

    Y is drawn from another speaker, or from the same speaker when the paired
    path takes a same-speaker reference (only valid with the cycle disabled).
    """
    rng = np.random.default_rng([cfg.seed, epoch])
    multiple = cfg.temporal_multiple
    by_speaker: dict[str, list[int]] = {}
    for index, bundle in enumerate(bundles):
        by_speaker.setdefault(bundle.speaker_id, []).append(index)
    speakers = sorted(by_speaker)

    order = rng.permutation(len(bundles))
    padded = [-(-bundles[i].frames // multiple) * multiple for i in order]
    bucketed = [int(order[j]) for j in np.argsort(padded, kind="stable")]
    chunks = [bucketed[i:i + cfg.batch_size] for i in range(0, len(bucketed), cfg.batch_size)]
    chunks = [chunks[i] for i in rng.permutation(len(chunks))]

    same_speaker = cfg.ablation.paired_reference == "same_speaker"
    batches = []
    for xs in chunks:
        ys = []
        for x in xs:
            own = bundles[x].speaker_id
            if same_speaker:
                pool = [i for i in by_speaker[own] if i != x] or [x]
            else:
                others = [s for s in speakers if s != own]
                if not others:
                    ys.append(x)
                    continue
                pool = by_speaker[others[rng.integers(len(others))]]
            ys.append(pool[rng.integers(len(pool))])
        batches.append((xs, ys))
    return batches


def collate(bundles: Sequence[FeatureBundle], indices: Iterable[int],
            cfg: ModelConfig) -> FeatureBatch:
    return FeatureBatch.collate([bundles[i] for i in indices], cfg.temporal_multiple, cfg.dtype)


def train_step(X: FeatureBatch, Y: FeatureBatch, state: TrainState, frozen: FrozenModels,
               cfg: ModelConfig) -> tuple[TrainState, LossBreakdown]:
    lr = lr_schedule(state.step, cfg)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.zero_grad()
    total, breakdown = total_loss(X, Y, state.converter, frozen, cfg)
    for name, (value, _) in breakdown.terms.items():
        if not torch.isfinite(value):
            raise NonFiniteLoss(name, float(value))
    total.backward()
    state.optimizer.step()
    state.step += 1
    return state, breakdown


def checkpoint_path(out_dir, step: int) -> Path:
    return Path(out_dir) / CHECKPOINT_DIR / f"step_{step:06d}.ckpt"


def save_checkpoint(path, state: TrainState, cfg: ModelConfig) -> Path:
    arrays = {
        f"param/{name}": tensor.detach().cpu().numpy()
        for name, tensor in state.converter.state_dict().items()
    }
    for index, slots in state.optimizer.state_dict()["state"].items():
        for key, value in slots.items():
            arrays[f"optim/{index}/{key}"] = torch.as_tensor(value).detach().cpu().numpy()
    attrs = {
        "step": state.step,
        "epoch": state.epoch,
        "epoch_step": state.epoch_step,
        "config": cfg.to_dict(),
    }
    return write_container(path, arrays, attrs=attrs)


@dataclass
class CheckpointData:
    arrays: dict[str, np.ndarray]
    attrs: dict

    @property
    def config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.attrs["config"])


def load_checkpoint(path) -> CheckpointData:
    arrays, attrs = read_container(path, with_attrs=True)
    return CheckpointData(arrays=arrays, attrs=attrs)


def _load_parameters(converter: VoiceConverter, data: CheckpointData):
    prefix = "param/"
    state_dict = {
        name[len(prefix):]: torch.from_numpy(array)
        for name, array in data.arrays.items() if name.startswith(prefix)
    }
    converter.load_state_dict(state_dict)


def restore_converter(path, cfg: ModelConfig | None = None) -> tuple[VoiceConverter, ModelConfig]:
    data = load_checkpoint(path)
    stored = data.config
    if cfg is not None and cfg.to_dict() != stored.to_dict():
        raise ConfigMismatch(f"{path} was written with a different configuration")
    converter = VoiceConverter(stored)
    _load_parameters(converter, data)
    return converter, stored


def restore_state(path, cfg: ModelConfig) -> TrainState:
    data = load_checkpoint(path)
    if data.config.to_dict() != cfg.to_dict():
        raise ConfigMismatch(f"{path} was written with a different configuration")
    state = TrainState.initial(cfg)
    _load_parameters(state.converter, data)

    optim_state = state.optimizer.state_dict()
    slots: dict[int, dict] = {}
    for name, array in data.arrays.items():
        if not name.startswith("optim/"):
            continue
        _, index, key = name.split("/", 2)
        tensor = torch.from_numpy(array)
        if key == "step":
            tensor = tensor.to(torch.float32)
        slots.setdefault(int(index), {})[key] = tensor
    optim_state["state"] = slots
    state.optimizer.load_state_dict(optim_state)

    state.step = data.attrs["step"]
    state.epoch = data.attrs["epoch"]
    state.epoch_step = data.attrs["epoch_step"]
    return state


@dataclass
class FitResult:
    state: TrainState
    log_path: Path
    checkpoints: list[Path] = field(default_factory=list)
    records: list[dict] = field(default_factory=list)


def fit(corpus, cfg: ModelConfig, out_dir, *, epochs: int | None = None,
        max_steps: int | None = None, resume=None,
        on_step: Callable[[dict], None] | None = None,
        on_checkpoint: Callable[[int, Path], None] | None = None) -> FitResult:
    """Train until ``epochs`` full epochs or ``max_steps`` total steps, whichever comes first."""
    bundles = _bundles(corpus)
    check_corpus(bundles, cfg)
    if epochs is None and max_steps is None:
        epochs = 1

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / LOSS_LOG
    frozen = FrozenModels.build(cfg)
    fingerprint = frozen.fingerprint()

    if resume is not None:
        state = restore_state(resume, cfg)
        logger.info("resuming from %s step=%d epoch=%d", resume, state.step, state.epoch)
    else:
        state = TrainState.initial(cfg)
        log_path.write_text("")
    result = FitResult(state=state, log_path=log_path)

    def checkpoint():
        path = save_checkpoint(checkpoint_path(out_dir, state.step), state, cfg)
        result.checkpoints.append(path)
        logger.info("checkpoint written step=%d path=%s", state.step, path)
        if on_checkpoint:
            on_checkpoint(state.step, path)

    if epochs == 0:
        checkpoint()
        return result

    def done() -> bool:
        return max_steps is not None and state.step >= max_steps

    with log_path.open("a") as log:
        while not done() and (epochs is None or state.epoch < epochs):
            batches = epoch_batches(bundles, cfg, state.epoch)
            if state.epoch_step == 0:
                logger.info("epoch start epoch=%d batches=%d", state.epoch, len(batches))
            for xs, ys in batches[state.epoch_step:]:
                if done():
                    break
                X, Y = collate(bundles, xs, cfg), collate(bundles, ys, cfg)
                lr = lr_schedule(state.step, cfg)
                _, breakdown = train_step(X, Y, state, frozen, cfg)
                state.epoch_step += 1
                record = {"step": state.step, "epoch": state.epoch, "lr": lr,
                          **breakdown.as_record()}
                log.write(json.dumps(record) + "\n")
                log.flush()
                result.records.append(record)
                if on_step:
                    on_step(record)
                if state.step % cfg.checkpoint_every == 0:
                    checkpoint()
            else:
                state.epoch += 1
                state.epoch_step = 0

    if not result.checkpoints or result.checkpoints[-1] != checkpoint_path(out_dir, state.step):
        checkpoint()
    if frozen.fingerprint() != fingerprint:
        raise ConfigMismatch("frozen perceptual models changed during training")
    logger.info("training finished step=%d epoch=%d", state.step, state.epoch)
    return result


@dataclass
class GradCheckReport:
    max_rel_error: float
    group: str
    coordinate: tuple
    checked: int
    groups: int
    errors: dict[str, float] = field(default_factory=dict)


def gradcheck_batches(cfg: ModelConfig, seed: int = 0) -> tuple[FeatureBatch, FeatureBatch]:
    """Two single-utterance batches from different speakers, each one frame short of
    a padded length so the replicated tail is exercised."""
    from .synthetic import synth_corpus

    frames = 2 * cfg.temporal_multiple - 1
    corpus = synth_corpus(2, 1, len_range=(frames, frames), seed=seed, cfg=cfg)
    x, y = corpus.bundles
    return collate([x, y], [0], cfg), collate([x, y], [1], cfg)


def _sample_coordinates(named: list[tuple[str, torch.Tensor]], n_coordinates: int,
                        rng: np.random.Generator, per_group: int = 2):
    picks = []
    for name, param in named:
        count = min(per_group, param.numel())
        picks += [(name, int(i)) for i in rng.choice(param.numel(), count, replace=False)]
    sizes = np.array([param.numel() for _, param in named], dtype=float)
    while len(picks) < n_coordinates:
        group = int(rng.choice(len(named), p=sizes / sizes.sum()))
        picks.append((named[group][0], int(rng.integers(named[group][1].numel()))))
    return picks


def finite_difference_check(cfg: ModelConfig, eps: float = 1e-5, tolerance: float = 1e-3,
                            *, converter: VoiceConverter | None = None,
                            n_coordinates: int = 240, abs_floor: float = 1e-6,
                            seed: int = 0) -> GradCheckReport:
    """Compare autograd against central differences of total_loss on one (X, Y) pair."""
    cfg = dataclasses.replace(cfg, precision="float64")
    converter = converter or VoiceConverter(cfg)
    frozen = FrozenModels.build(cfg)
    X, Y = gradcheck_batches(cfg, seed)
    named = [(name, p) for name, p in converter.named_parameters() if p.requires_grad]
    total_params = sum(p.numel() for _, p in named)
    if total_params >= 10_000:
        logger.warning("gradient check on %d parameters will be slow", total_params)

    converter.zero_grad()
    total, _ = total_loss(X, Y, converter, frozen, cfg)
    total.backward()
    analytic = {name: p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
                for name, p in named}
    params = dict(named)

    def loss_value() -> float:
        with torch.no_grad():
            return float(total_loss(X, Y, converter, frozen, cfg)[0])

    rng = np.random.default_rng(seed)
    worst = (0.0, named[0][0], (0,))
    errors: dict[str, float] = {}
    picks = _sample_coordinates(named, n_coordinates, rng)
    for name, flat_index in picks:
        flat = params[name].data.view(-1)
        original = flat[flat_index].item()
        flat[flat_index] = original + eps
        plus = loss_value()
        flat[flat_index] = original - eps
        minus = loss_value()
        flat[flat_index] = original

        numeric = (plus - minus) / (2 * eps)
        exact = analytic[name].view(-1)[flat_index].item()
        rel = abs(exact - numeric) / max(abs(exact), abs(numeric), abs_floor)
        errors[name] = max(errors.get(name, 0.0), rel)
        if rel > worst[0]:
            coordinate = tuple(int(i) for i in np.unravel_index(flat_index, params[name].shape))
            worst = (rel, name, coordinate)

    report = GradCheckReport(
        max_rel_error=worst[0], group=worst[1], coordinate=worst[2],
        checked=len(picks), groups=len(named), errors=errors,
    )
    logger.info(
        "gradient check eps=%g coordinates=%d groups=%d max_rel_error=%.3e worst=%s%s",
        eps, report.checked, report.groups, report.max_rel_error, report.group,
        list(report.coordinate),
    )
    if report.max_rel_error > tolerance:
        raise ToleranceExceeded(report.group, report.coordinate, report.max_rel_error, tolerance)
    return report


def eps_sweep(cfg: ModelConfig, eps_values: Sequence[float] = (1e-4, 1e-5, 1e-6),
              **kwargs) -> dict[float, float]:
    """Max relative error per finite-difference step, same parameters and coordinates."""
    cfg = dataclasses.replace(cfg, precision="float64")
    converter = kwargs.pop("converter", None) or VoiceConverter(cfg)
    return {
        eps: finite_difference_check(cfg, eps, math.inf, converter=converter,
                                     **kwargs).max_rel_error
        for eps in eps_values
    }
