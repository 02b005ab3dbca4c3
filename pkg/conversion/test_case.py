import json
import subprocess
import sys
import tempfile
from io import StringIO
from pathlib import Path
from unittest.mock import patch

import numpy as np
from django.conf import settings
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import Client, TestCase, override_settings
from django.urls import reverse

from conversion.container import read_container
from conversion.core import tiny_config
from conversion.models import Checkpoint, EvaluationReport, StepRecord, TrainingRun
from conversion.synthetic import save_corpus, synth_corpus
from conversion.tasks import evaluate_checkpoint, run_training


class DashboardViewTests(TestCase):
    def setUp(self) -> None:
        self.client = Client()

    def test_dashboard_empty(self) -> None:
        resp = self.client.get(reverse("conversion:dashboard"))
        self.assertEqual(resp.status_code, 200)
        self.assertContains(resp, "No training runs yet.")

    def test_dashboard_with_run_progress(self) -> None:
        run = TrainingRun.objects.create(name="tiny-run", data_dir="/data", max_steps=10)
        for step in (1, 2, 7):
            StepRecord.objects.create(run=run, step=step, epoch=0, lr=1e-3, total=1.0, terms={})
        Checkpoint.objects.create(run=run, step=5, path="/runs/step_000005.ckpt")

        resp = self.client.get(reverse("conversion:dashboard"))
        self.assertEqual(resp.status_code, 200)
        self.assertContains(resp, "tiny-run")
        self.assertEqual(resp.context["runs"][0].step_count, 7)
        self.assertEqual(resp.context["runs"][0].checkpoint_count, 1)


class RunCreateViewTests(TestCase):
    def setUp(self) -> None:
        self.client = Client()
        self.url = reverse("conversion:run_create")

    def test_get_run_form(self) -> None:
        resp = self.client.get(self.url)
        self.assertEqual(resp.status_code, 200)
        self.assertContains(resp, "New training run")

    @patch("conversion.views.run_training.delay")
    def test_create_run_queues_training(self, delay) -> None:
        data = {
            "name": "tiny",
            "data_dir": "/data/tiny",
            "config": json.dumps({"n_tcr_blocks": 2, "gamma_tr": [4, 1]}),
            "max_steps": 20,
        }
        resp = self.client.post(self.url, data)
        run = TrainingRun.objects.get(name="tiny")
        self.assertRedirects(resp, reverse("conversion:run_detail", args=[run.pk]),
                             fetch_redirect_response=False)
        delay.assert_called_once_with(run.id)
        self.assertEqual(run.config["gamma_tr"], [4, 1])
        self.assertEqual(run.model_config.n_tcr_blocks, 2)

    @patch("conversion.views.run_training.delay")
    def test_invalid_config_rejected(self, delay) -> None:
        data = {
            "name": "bad",
            "data_dir": "/data",
            "config": json.dumps({"prenet_channels": 100}),
            "max_steps": 5,
        }
        resp = self.client.post(self.url, data)
        self.assertEqual(resp.status_code, 200)
        self.assertContains(resp, "prenet_channels=100 not divisible by 64")
        delay.assert_not_called()

    def test_stopping_condition_required(self) -> None:
        resp = self.client.post(self.url, {"name": "x", "data_dir": "/data", "config": "{}"})
        self.assertEqual(resp.status_code, 200)
        self.assertContains(resp, "Set max steps, epochs, or both.")
        self.assertFalse(TrainingRun.objects.exists())


class RunDetailViewTests(TestCase):
    def test_detail_lists_checkpoints_and_reports(self) -> None:
        run = TrainingRun.objects.create(name="detail", data_dir="/data", epochs=1)
        StepRecord.objects.create(run=run, step=1, epoch=0, lr=1e-3, total=2.5, terms={})
        StepRecord.objects.create(run=run, step=2, epoch=0, lr=1e-3, total=1.5, terms={})
        checkpoint = Checkpoint.objects.create(run=run, step=2, path="/runs/step_000002.ckpt")
        EvaluationReport.objects.create(
            checkpoint=checkpoint, p_lf0=None, speaker_accuracy=0.75, eer=0.25,
            eer_threshold=0.4, wer=None, n_pairs=4,
        )
        resp = Client().get(reverse("conversion:run_detail", args=[run.pk]))
        self.assertEqual(resp.status_code, 200)
        self.assertContains(resp, "step_000002.ckpt")
        self.assertContains(resp, "0.750")
        self.assertEqual(resp.context["record_count"], 2)
        self.assertEqual(resp.context["latest_record"].step, 2)


class CorpusMixin:
    def make_workspace(self) -> None:
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.root = Path(self.tmp.name)
        self.cfg = tiny_config()
        self.data_dir = save_corpus(
            synth_corpus(2, 2, (5, 10), seed=0, cfg=self.cfg), self.root / "data"
        )


class TaskExecutionTests(CorpusMixin, TestCase):
    def setUp(self) -> None:
        self.make_workspace()
        self.settings_override = override_settings(
            VOICELAB_RUNS_DIR=str(self.root / "runs"),
            VOICELAB_STEP_RECORD_EVERY=1,
            VOICELAB_EVAL_PAIRS=4,
            VOICELAB_WER_COMMAND="",
        )
        self.settings_override.enable()
        self.addCleanup(self.settings_override.disable)

    def create_run(self, **fields) -> TrainingRun:
        defaults = {"name": "task", "config": self.cfg.to_dict(),
                    "data_dir": str(self.data_dir), "max_steps": 3}
        return TrainingRun.objects.create(**{**defaults, **fields})

    @patch("conversion.tasks.evaluate_checkpoint.delay")
    def test_run_training_records_progress(self, delay) -> None:
        run = self.create_run()
        run_training(run.id)
        run.refresh_from_db()

        self.assertEqual(run.status, TrainingRun.Status.COMPLETED)
        self.assertEqual(Path(run.out_dir), self.root / "runs" / f"run_{run.id:05d}")
        self.assertEqual(
            list(run.step_records.order_by("step").values_list("step", flat=True)), [1, 2, 3]
        )
        latest = run.latest_checkpoint
        self.assertEqual(latest.step, 3)
        self.assertTrue(Path(latest.path).exists())
        delay.assert_called_once_with(latest.id)

    def test_run_training_skips_non_queued_runs(self) -> None:
        run = self.create_run(status=TrainingRun.Status.COMPLETED)
        run_training(run.id)
        self.assertFalse(run.step_records.exists())

    def test_missing_corpus_marks_run_failed(self) -> None:
        run = self.create_run(data_dir=str(self.root / "missing"))
        run_training(run.id)
        run.refresh_from_db()
        self.assertEqual(run.status, TrainingRun.Status.FAILED)
        self.assertIn("manifest.json", run.failure_reason)

    @patch("conversion.tasks.evaluate_checkpoint.delay")
    def test_redelivered_running_run_resumes(self, delay) -> None:
        run = self.create_run(max_steps=2)
        run_training(run.id, evaluate=False)
        run.refresh_from_db()
        self.assertEqual(run.latest_checkpoint.step, 2)

        run.status = TrainingRun.Status.RUNNING
        run.max_steps = 4
        run.save(update_fields=["status", "max_steps"])
        with self.assertLogs("conversion.training", level="INFO") as logs:
            run_training(run.id)
        run.refresh_from_db()

        self.assertEqual(run.status, TrainingRun.Status.COMPLETED)
        self.assertTrue(any("resuming from" in line for line in logs.output))
        self.assertEqual(
            list(run.step_records.order_by("step").values_list("step", flat=True)), [1, 2, 3, 4]
        )
        self.assertEqual(run.latest_checkpoint.step, 4)
        log_lines = (Path(run.out_dir) / "loss_log.jsonl").read_text().splitlines()
        self.assertEqual([json.loads(line)["step"] for line in log_lines], [1, 2, 3, 4])
        delay.assert_called_once_with(run.latest_checkpoint.id)

    def test_unexpected_error_marks_run_failed(self) -> None:
        run = self.create_run()
        with patch("conversion.training.fit", side_effect=RuntimeError("out of memory")):
            with self.assertRaises(RuntimeError):
                run_training(run.id)
        run.refresh_from_db()
        self.assertEqual(run.status, TrainingRun.Status.FAILED)
        self.assertEqual(run.failure_reason, "RuntimeError: out of memory")

    def test_evaluate_checkpoint_stores_report(self) -> None:
        run = self.create_run()
        run_training(run.id, evaluate=False)
        report_id = evaluate_checkpoint(run.latest_checkpoint.id)
        report = EvaluationReport.objects.get(pk=report_id)
        self.assertEqual(report.n_pairs, 4)
        self.assertTrue(0.0 <= report.speaker_accuracy <= 1.0)
        self.assertIsNone(report.wer)


class ManagementCommandTests(CorpusMixin, TestCase):
    def setUp(self) -> None:
        self.make_workspace()
        self.config_path = self.root / "tiny.json"
        self.config_path.write_text(json.dumps(self.cfg.to_dict()))

    def call(self, *args, **options) -> str:
        out = StringIO()
        call_command(*args, stdout=out, **options)
        return out.getvalue()

    def test_synth_data_writes_corpus(self) -> None:
        out = self.root / "synth"
        message = self.call("synth_data", speakers=3, utts=2, out=str(out),
                            config=str(self.config_path), min_len=6, max_len=8)
        self.assertIn("Wrote 6 utterances of 3 speakers", message)
        manifest = json.loads((out / "manifest.json").read_text())
        self.assertEqual(len(manifest["utterances"]), 6)

    def test_train_convert_inspect_and_eval(self) -> None:
        run_dir = self.root / "run"
        self.call("train", config=str(self.config_path), data=str(self.data_dir),
                  out=str(run_dir), steps=3)
        lines = (run_dir / "loss_log.jsonl").read_text().splitlines()
        self.assertEqual(len(lines), 3)
        run = TrainingRun.objects.get()
        self.assertEqual(run.status, TrainingRun.Status.COMPLETED)
        ckpt = run.latest_checkpoint.path

        utterances = sorted((self.data_dir / "utterances").iterdir())
        converted = self.root / "converted.mtcr"
        self.call("convert", ckpt=ckpt, source=str(utterances[0]),
                  target=str(utterances[-1]), out=str(converted))
        arrays, attrs = read_container(converted, with_attrs=True)
        self.assertEqual(arrays["mel"].shape, (attrs["padded_length"], self.cfg.mel_dim))
        self.assertEqual(attrs["padded_length"] % self.cfg.temporal_multiple, 0)
        self.assertEqual(attrs["target_speaker"], "spk001")
        self.assertIn("xattn_l2", arrays)

        dumped = self.root / "attn.mtcr"
        tables = self.root / "tables"
        self.call("inspect_attn", ckpt=ckpt, utt=str(utterances[0]), out=str(dumped),
                  tables=str(tables))
        attn = read_container(dumped)
        self.assertEqual(set(attn), {"z0", "z1", "z2", "a_t1", "a_t2", "a_c1", "a_c2",
                                     "zavg1", "zavg2"})
        np.testing.assert_allclose(attn["a_t1"].sum(axis=-1), 1.0)
        frames = np.loadtxt(tables / "a_t1.csv", delimiter=",", skiprows=1)
        self.assertEqual(frames.shape[0], attn["z0"].shape[0])
        self.assertEqual(frames.shape[1], 3)
        self.assertEqual(frames[1, 1], self.cfg.frame_shift_ms)
        self.assertTrue((tables / "zavg2.csv").exists())

        report_path = self.root / "report.json"
        self.call("eval", ckpt=ckpt, data=str(self.data_dir), report=str(report_path), pairs=3)
        report = json.loads(report_path.read_text())
        self.assertEqual(report["n_pairs"], 3)
        self.assertIn("eer_threshold", report)
        self.assertEqual(EvaluationReport.objects.filter(checkpoint__run=run).count(), 1)

    def test_gradcheck_passes_on_tiny_config(self) -> None:
        message = self.call("gradcheck", coordinates=60)
        self.assertIn("gradient check passed", message)

    def test_invalid_config_reported(self) -> None:
        bad = self.root / "bad.json"
        bad.write_text(json.dumps({"prenet_channels": 100}))
        with self.assertRaises(CommandError) as ctx:
            self.call("train", config=str(bad), data=str(self.data_dir),
                      out=str(self.root / "bad"), steps=1)
        self.assertIn("not divisible by 64", str(ctx.exception))
        self.assertFalse(TrainingRun.objects.exists())

    def test_failed_training_exits_with_reason(self) -> None:
        with self.assertRaises(CommandError) as ctx:
            self.call("train", config=str(self.config_path), data=str(self.root / "nowhere"),
                      out=str(self.root / "failed"), steps=1)
        self.assertIn("manifest.json", str(ctx.exception))

    def test_usage_error_exit_code(self) -> None:
        completed = subprocess.run(
            [sys.executable, "manage.py", "synth_data"],
            cwd=settings.BASE_DIR, capture_output=True, text=True,
        )
        self.assertEqual(completed.returncode, 2)
        self.assertIn("required", completed.stderr)
