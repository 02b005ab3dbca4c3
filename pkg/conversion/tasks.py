import logging
from pathlib import Path

from celery import shared_task
from django.conf import settings
from django.utils import timezone

from .exceptions import VoiceLabError
from .models import Checkpoint, EvaluationReport, StepRecord, TrainingRun

logger = logging.getLogger(__name__)


@shared_task
def run_training(run_id: int, resume: str | None = None, evaluate: bool = True) -> None:
    from .synthetic import load_corpus
    from .training import fit

    run = TrainingRun.objects.get(pk=run_id)

    # a RUNNING run is a redelivery after a worker restart
    if run.status not in (TrainingRun.Status.QUEUED, TrainingRun.Status.RUNNING):
        return

    if not run.out_dir:
        run.out_dir = str(Path(settings.VOICELAB_RUNS_DIR) / f"run_{run.id:05d}")
    run.status = TrainingRun.Status.RUNNING
    run.updated_at = timezone.now()
    run.save(update_fields=["out_dir", "status", "updated_at"])

    latest = run.latest_checkpoint
    if resume is None and latest and Path(latest.path).exists():
        resume = latest.path

    try:
        fit(
            load_corpus(run.data_dir),
            run.model_config,
            run.out_dir,
            epochs=run.epochs,
            max_steps=run.max_steps,
            resume=resume,
            on_step=lambda record: _record_step(run, record),
            on_checkpoint=lambda step, path: _record_checkpoint(run, step, path),
        )
    except VoiceLabError as exc:
        logger.error("training run %s failed: %s", run.id, exc)
        _mark_failed(run, str(exc))
        return
    except Exception as exc:
        logger.exception("training run %s crashed", run.id)
        _mark_failed(run, f"{type(exc).__name__}: {exc}")
        raise

    run.status = TrainingRun.Status.COMPLETED
    run.updated_at = timezone.now()
    run.save(update_fields=["status", "updated_at"])

    checkpoint = run.latest_checkpoint
    if evaluate and checkpoint is not None:
        evaluate_checkpoint.delay(checkpoint.id)


def _mark_failed(run: TrainingRun, reason: str) -> None:
    run.status = TrainingRun.Status.FAILED
    run.failure_reason = reason
    run.updated_at = timezone.now()
    run.save(update_fields=["status", "failure_reason", "updated_at"])


def _record_step(run: TrainingRun, record: dict) -> None:
    if record["step"] % settings.VOICELAB_STEP_RECORD_EVERY:
        return
    StepRecord.objects.update_or_create(
        run=run,
        step=record["step"],
        defaults={
            "epoch": record["epoch"],
            "lr": record["lr"],
            "total": record["total"],
            "terms": record["terms"],
        },
    )


def _record_checkpoint(run: TrainingRun, step: int, path) -> None:
    Checkpoint.objects.update_or_create(run=run, step=step, defaults={"path": str(path)})


@shared_task
def evaluate_checkpoint(checkpoint_id: int) -> int:
    from .metrics import ExternalWerEvaluator, evaluate
    from .perceptual import FrozenModels
    from .synthetic import load_corpus
    from .training import restore_converter

    checkpoint = Checkpoint.objects.select_related("run").get(pk=checkpoint_id)
    converter, cfg = restore_converter(checkpoint.path)
    wer_command = settings.VOICELAB_WER_COMMAND

    result = evaluate(
        converter,
        load_corpus(checkpoint.run.data_dir),
        FrozenModels.build(cfg),
        n_pairs=settings.VOICELAB_EVAL_PAIRS,
        wer_evaluator=ExternalWerEvaluator(wer_command) if wer_command else None,
    )
    report = EvaluationReport.objects.create(checkpoint=checkpoint, **result.as_dict())
    return report.id
