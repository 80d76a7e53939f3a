from django.db import models
from django.utils import timezone


class Experiment(models.TextChoices):
    SINGLE_TASK = "SingleTask", "Single task"
    TRANSFER = "Transfer", "Transfer"
    SAMPLE_SWEEP = "SampleSweep", "Sample-size sweep"
    ANALYSIS = "Analysis", "Bound analysis"
    DUMP_ABSTRACTION = "DumpAbstraction", "Abstraction dump"


class ExperimentRun(models.Model):
    STATUS_CHOICES = [
        ("running", "Running"),
        ("completed", "Completed"),
        ("failed", "Failed"),
    ]

    experiment = models.CharField(max_length=20, choices=Experiment.choices)
    env_kind = models.CharField(max_length=20)
    seeds = models.JSONField(default=list)
    config = models.JSONField(default=dict)
    content_hash = models.CharField(max_length=64)
    out_dir = models.CharField(max_length=500)
    status = models.CharField(max_length=20, choices=STATUS_CHOICES, default="running")
    failed_stage = models.CharField(max_length=50, blank=True)
    started_at = models.DateTimeField(auto_now_add=True)
    finished_at = models.DateTimeField(null=True, blank=True)

    class Meta:
        ordering = ["-started_at"]
        indexes = [
            models.Index(fields=["status"], name="lab_run_status_idx"),
            models.Index(fields=["experiment", "env_kind"], name="lab_run_exp_env_idx"),
            models.Index(fields=["content_hash"], name="lab_run_hash_idx"),
        ]

    def __str__(self):
        return f"{self.experiment} on {self.env_kind} ({self.status})"

    def mark_completed(self):
        self.status = "completed"
        self.finished_at = timezone.now()
        self.save(update_fields=["status", "finished_at"])

    def mark_failed(self, stage):
        self.status = "failed"
        self.failed_stage = stage
        self.finished_at = timezone.now()
        self.save(update_fields=["status", "failed_stage", "finished_at"])

    def duration(self):
        if self.finished_at is None:
            return None
        return self.finished_at - self.started_at


class BoundReportRecord(models.Model):
    run = models.ForeignKey(
        ExperimentRun,
        on_delete=models.CASCADE,
        null=True,
        blank=True,
        related_name="bound_reports",
    )
    delta = models.FloatField()
    mean_l1 = models.FloatField()
    rademacher_estimate = models.FloatField()
    n = models.PositiveIntegerField()
    delta_prob = models.FloatField()
    theorem_bound = models.FloatField()
    theorem_bound_pinsker = models.FloatField()
    lemma_bound = models.FloatField()
    measured_value_gap = models.FloatField()
    lemma_holds = models.BooleanField()
    grid_l1 = models.FloatField()
    created_at = models.DateTimeField(auto_now_add=True)

    class Meta:
        ordering = ["-created_at"]

    def __str__(self):
        verdict = "holds" if self.lemma_holds else "violated"
        return f"Bound report n={self.n}, delta={self.delta:.4f} ({verdict})"

    @classmethod
    def from_report(cls, report, run=None):
        return cls.objects.create(run=run, **report.as_dict())
