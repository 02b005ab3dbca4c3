from pathlib import Path

from django.core.management.base import CommandError

from ..base import VoiceLabCommand
from ...models import TrainingRun
from ...tasks import run_training


class Command(VoiceLabCommand):
    help = "Train a converter on a corpus directory, recording the run in the registry."

    def add_arguments(self, parser):
        parser.add_argument("--config", help="JSON/TOML model config; defaults apply if omitted.")
        parser.add_argument("--data", required=True, help="Corpus directory from synth_data.")
        parser.add_argument("--out", required=True, help="Run output directory.")
        parser.add_argument("--steps", type=int, help="Stop after this many optimizer steps.")
        parser.add_argument("--epochs", type=int, help="Stop after this many epochs.")
        parser.add_argument("--resume", help="Checkpoint to resume from.")
        parser.add_argument("--name", help="Run name shown on the dashboard.")

    def execute_command(self, **options):
        cfg = self.config_from(options["config"])
        steps, epochs = options["steps"], options["epochs"]
        if steps is None and epochs is None:
            epochs = 1
        run = TrainingRun.objects.create(
            name=options["name"] or Path(options["out"]).name,
            config=cfg.to_dict(),
            data_dir=options["data"],
            out_dir=options["out"],
            max_steps=steps,
            epochs=epochs,
        )
        run_training(run.id, resume=options["resume"], evaluate=False)
        run.refresh_from_db()
        if run.status == TrainingRun.Status.FAILED:
            raise CommandError(run.failure_reason)

        latest = run.latest_checkpoint
        self.stdout.write(self.style.SUCCESS(
            f"Run {run.id} finished at step {latest.step if latest else 0}; "
            f"loss log in {Path(run.out_dir) / 'loss_log.jsonl'}"
        ))
