import json
from pathlib import Path

from django.conf import settings

from ..base import VoiceLabCommand
from ...metrics import ExternalWerEvaluator, evaluate
from ...models import Checkpoint, EvaluationReport
from ...perceptual import FrozenModels
from ...synthetic import load_corpus
from ...training import restore_converter


class Command(VoiceLabCommand):
    help = "Report P_lf0, speaker accuracy and the EER threshold of a checkpoint."

    def add_arguments(self, parser):
        parser.add_argument("--ckpt", required=True)
        parser.add_argument("--data", required=True, help="Evaluation corpus directory.")
        parser.add_argument("--report", required=True, help="Output JSON report.")
        parser.add_argument("--pairs", type=int, default=settings.VOICELAB_EVAL_PAIRS,
                            help="Number of conversion pairs.")

    def execute_command(self, **options):
        converter, cfg = restore_converter(options["ckpt"])
        wer_command = settings.VOICELAB_WER_COMMAND
        result = evaluate(
            converter,
            load_corpus(options["data"]),
            FrozenModels.build(cfg),
            n_pairs=options["pairs"],
            wer_evaluator=ExternalWerEvaluator(wer_command) if wer_command else None,
        )

        report = Path(options["report"])
        report.parent.mkdir(parents=True, exist_ok=True)
        report.write_text(json.dumps(result.as_dict(), indent=2))

        checkpoint = Checkpoint.objects.filter(path=options["ckpt"]).first()
        if checkpoint is not None:
            EvaluationReport.objects.create(checkpoint=checkpoint, **result.as_dict())

        self.stdout.write(self.style.SUCCESS(
            f"accuracy={result.speaker_accuracy:.3f} eer={result.eer:.3f} "
            f"threshold={result.eer_threshold:.4f} p_lf0={result.p_lf0}"
        ))
