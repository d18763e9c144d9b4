from typing import Optional

from django.db import models
from django.utils import timezone


class ExperimentRun(models.Model):
    KIND_CHOICES = [
        ("search", "search"),
        ("retrain", "retrain"),
        ("tournament", "tournament"),
        ("ablation", "ablation"),
    ]
    STATUS_CHOICES = [
        ("running", "running"),
        ("completed", "completed"),
        ("failed", "failed"),
        ("paused", "paused"),
    ]

    kind = models.CharField(max_length=16, choices=KIND_CHOICES)
    label = models.CharField(max_length=128, blank=True, default="")
    seed = models.IntegerField(default=0)
    run_dir = models.CharField(max_length=512, db_index=True)
    status = models.CharField(max_length=16, choices=STATUS_CHOICES, default="running")
    config = models.JSONField(blank=True, null=True)
    genotype = models.JSONField(blank=True, null=True)
    test_accuracy = models.FloatField(blank=True, null=True)
    created_at = models.DateTimeField(auto_now_add=True)
    finished_at = models.DateTimeField(blank=True, null=True)

    class Meta:
        ordering = ("-created_at",)

    def __str__(self) -> str:
        return f"{self.kind} {self.label or self.run_dir} ({self.status})"

    @classmethod
    def start(cls, kind: str, run_dir, label: str = "", seed: int = 0, config: Optional[dict] = None) -> "ExperimentRun":
        run = cls.objects.create(kind=kind, label=label, seed=seed, run_dir=str(run_dir), config=config)
        run.log("started")
        return run

    def complete(self, genotype: Optional[dict] = None, test_accuracy: Optional[float] = None) -> None:
        self.status = "completed"
        self.genotype = genotype
        self.test_accuracy = test_accuracy
        self.finished_at = timezone.now()
        self.save(update_fields=["status", "genotype", "test_accuracy", "finished_at"])
        self.log("completed", {"test_accuracy": test_accuracy})

    def fail(self, error: Exception, status: str = "failed") -> None:
        self.status = status
        self.finished_at = timezone.now()
        self.save(update_fields=["status", "finished_at"])
        self.log(status, {"error": str(error), "type": type(error).__name__})

    def log(self, action: str, details: Optional[dict] = None) -> "RunEvent":
        return RunEvent.objects.create(run=self, action=action, details=details)


class RunEvent(models.Model):
    ACTION_CHOICES = [
        ("started", "started"),
        ("regenerated", "regenerated"),
        ("completed", "completed"),
        ("failed", "failed"),
        ("paused", "paused"),
    ]

    run = models.ForeignKey(ExperimentRun, on_delete=models.CASCADE, related_name="events")
    action = models.CharField(max_length=32, choices=ACTION_CHOICES)
    created_at = models.DateTimeField(auto_now_add=True)
    details = models.JSONField(blank=True, null=True)

    class Meta:
        ordering = ("-created_at",)

    def __str__(self) -> str:
        return f"{self.action} {self.run_id} at {self.created_at.isoformat()}"
