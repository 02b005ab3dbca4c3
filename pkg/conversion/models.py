from django.db import models


class TrainingRun(models.Model):
    class Status(models.TextChoices):
        QUEUED = "queued", "Queued"
        RUNNING = "running", "Running"
        COMPLETED = "completed", "Completed"
        FAILED = "failed", "Failed"

    name = models.CharField(max_length=255)
    config = models.JSONField(default=dict, help_text="ModelConfig as JSON")
    data_dir = models.CharField(max_length=500)
    out_dir = models.CharField(max_length=500, blank=True)
    max_steps = models.PositiveIntegerField(null=True, blank=True)
    epochs = models.PositiveIntegerField(null=True, blank=True)
    status = models.CharField(
        max_length=20, choices=Status.choices, default=Status.QUEUED
    )
    failure_reason = models.TextField(blank=True)
    created_at = models.DateTimeField(auto_now_add=True)
    updated_at = models.DateTimeField(auto_now=True)

    def __str__(self) -> str:
        return self.name

    @property
    def model_config(self):
        from .core import ModelConfig

        return ModelConfig.from_dict(self.config)

    @property
    def latest_checkpoint(self):
        return self.checkpoints.order_by("-step").first()


class StepRecord(models.Model):
    run = models.ForeignKey(
        TrainingRun, on_delete=models.CASCADE, related_name="step_records"
    )
    step = models.PositiveIntegerField()
    epoch = models.PositiveIntegerField()
    lr = models.FloatField()
    total = models.FloatField()
    terms = models.JSONField(default=dict)
    created_at = models.DateTimeField(auto_now_add=True)

    class Meta:
        unique_together = ("run", "step")
        indexes = [models.Index(fields=["run", "step"], name="conversion_step_run_idx")]

    def __str__(self) -> str:
        return f"{self.run} step {self.step}: {self.total:.4f}"


class Checkpoint(models.Model):
    run = models.ForeignKey(
        TrainingRun, on_delete=models.CASCADE, related_name="checkpoints"
    )
    step = models.PositiveIntegerField()
    path = models.CharField(max_length=500)
    created_at = models.DateTimeField(auto_now_add=True)

    class Meta:
        unique_together = ("run", "step")

    def __str__(self) -> str:
        return f"{self.run} @ {self.step}"


class EvaluationReport(models.Model):
    checkpoint = models.ForeignKey(
        Checkpoint, on_delete=models.CASCADE, related_name="reports"
    )
    p_lf0 = models.FloatField(null=True, blank=True)
    speaker_accuracy = models.FloatField()
    eer = models.FloatField()
    eer_threshold = models.FloatField()
    wer = models.FloatField(null=True, blank=True)
    n_pairs = models.PositiveIntegerField()
    created_at = models.DateTimeField(auto_now_add=True)

    def __str__(self) -> str:
        return f"{self.checkpoint}: acc={self.speaker_accuracy:.3f}"
