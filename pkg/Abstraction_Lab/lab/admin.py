from django.contrib import admin
from django.utils.html import format_html

from .models import BoundReportRecord, ExperimentRun


class BoundReportInline(admin.TabularInline):
    model = BoundReportRecord
    extra = 0
    fields = ("n", "delta", "mean_l1", "theorem_bound", "lemma_bound", "measured_value_gap", "lemma_holds")
    readonly_fields = fields
    can_delete = False


@admin.register(ExperimentRun)
class ExperimentRunAdmin(admin.ModelAdmin):
    list_display = ("experiment", "env_kind", "status_indicator", "seed_count", "short_hash", "started_at", "run_time")
    list_filter = ("experiment", "env_kind", "status", "started_at")
    search_fields = ("content_hash", "out_dir", "failed_stage")
    readonly_fields = ("started_at", "finished_at", "content_hash")
    inlines = [BoundReportInline]

    fieldsets = (
        ("Run", {
            "fields": (
                ("experiment", "env_kind"),
                ("status", "failed_stage"),
                "out_dir",
            )
        }),
        ("Reproducibility", {
            "fields": ("content_hash", "seeds", "config"),
            "classes": ("collapse",)
        }),
        ("Timestamps", {
            "fields": ("started_at", "finished_at"),
        }),
    )

    def status_indicator(self, obj):
        colors = {"completed": "green", "running": "orange", "failed": "red"}
        return format_html(
            '<span style="color: {};">{}</span>', colors.get(obj.status, "gray"), obj.get_status_display()
        )
    status_indicator.short_description = "Status"

    def seed_count(self, obj):
        return len(obj.seeds)
    seed_count.short_description = "Seeds"

    def short_hash(self, obj):
        return obj.content_hash[:12]
    short_hash.short_description = "Inputs"

    def run_time(self, obj):
        return obj.duration() or "-"
    run_time.short_description = "Duration"


@admin.register(BoundReportRecord)
class BoundReportRecordAdmin(admin.ModelAdmin):
    list_display = ("created_at", "n", "delta", "mean_l1", "rademacher_estimate", "theorem_bound", "verdict")
    list_filter = ("lemma_holds", "created_at")
    readonly_fields = ("created_at",)

    def verdict(self, obj):
        if obj.lemma_holds:
            return format_html('<span style="color: green;">✓ Bound holds</span>')
        return format_html('<span style="color: red;">✗ Violated</span>')
    verdict.short_description = "Value-loss bound"
