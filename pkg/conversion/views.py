from django.contrib import messages
from django.db.models import Count, Max
from django.shortcuts import redirect
from django.views.generic import CreateView, DetailView, ListView

from .forms import TrainingRunForm
from .models import TrainingRun
from .tasks import run_training


class DashboardView(ListView):
    template_name = "conversion/dashboard.html"
    context_object_name = "runs"

    def get_queryset(self):
        return (
            TrainingRun.objects.all()
            .annotate(
                step_count=Max("step_records__step"),
                checkpoint_count=Count("checkpoints", distinct=True),
            )
            .order_by("-created_at")
        )


class RunCreateView(CreateView):
    model = TrainingRun
    form_class = TrainingRunForm
    template_name = "conversion/run_form.html"

    def get_initial(self):
        return {"config": {}}

    def form_valid(self, form):
        run = form.save()
        messages.success(self.request, "Training run queued.")
        run_training.delay(run.id)
        return redirect("conversion:run_detail", pk=run.pk)


class RunDetailView(DetailView):
    model = TrainingRun
    template_name = "conversion/run_detail.html"
    context_object_name = "run"

    def get_context_data(self, **kwargs):
        context = super().get_context_data(**kwargs)

        records = self.object.step_records.order_by("-step")
        checkpoints = self.object.checkpoints.prefetch_related("reports").order_by("-step")

        context.update(
            {
                "records": records[:50],
                "record_count": records.count(),
                "latest_record": records.first(),
                "first_record": self.object.step_records.order_by("step").first(),
                "checkpoints": checkpoints,
            }
        )
        return context
