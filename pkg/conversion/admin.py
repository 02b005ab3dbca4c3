from django.contrib import admin

from .models import Checkpoint, EvaluationReport, StepRecord, TrainingRun


@admin.register(TrainingRun)
class TrainingRunAdmin(admin.ModelAdmin):
    list_display = ("name", "status", "max_steps", "epochs", "created_at")
    list_filter = ("status",)
    search_fields = ("name", "data_dir", "failure_reason")
    date_hierarchy = "created_at"


@admin.register(StepRecord)
class StepRecordAdmin(admin.ModelAdmin):
    list_display = ("run", "step", "epoch", "lr", "total")
    list_filter = ("run",)


@admin.register(Checkpoint)
class CheckpointAdmin(admin.ModelAdmin):
    list_display = ("run", "step", "path", "created_at")
    search_fields = ("run__name", "path")


@admin.register(EvaluationReport)
class EvaluationReportAdmin(admin.ModelAdmin):
    list_display = ("checkpoint", "speaker_accuracy", "eer", "p_lf0", "wer", "created_at")
    list_filter = ("checkpoint__run",)
