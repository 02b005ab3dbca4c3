from django.urls import path
from .views import DashboardView, RunCreateView, RunDetailView

app_name = "conversion"

urlpatterns = [
    path("", DashboardView.as_view(), name="dashboard"),
    path("create/", RunCreateView.as_view(), name="run_create"),
    path("<int:pk>/", RunDetailView.as_view(), name="run_detail"),
]
