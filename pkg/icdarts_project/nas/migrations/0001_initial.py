from django.db import migrations, models
import django.db.models.deletion


class Migration(migrations.Migration):
    initial = True

    dependencies = []

    operations = [
        migrations.CreateModel(
            name="ExperimentRun",
            fields=[
                ("id", models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name="ID")),
                ("kind", models.CharField(choices=[("search", "search"), ("retrain", "retrain"), ("tournament", "tournament"), ("ablation", "ablation")], max_length=16)),
                ("label", models.CharField(blank=True, default="", max_length=128)),
                ("seed", models.IntegerField(default=0)),
                ("run_dir", models.CharField(db_index=True, max_length=512)),
                ("status", models.CharField(choices=[("running", "running"), ("completed", "completed"), ("failed", "failed"), ("paused", "paused")], default="running", max_length=16)),
                ("config", models.JSONField(blank=True, null=True)),
                ("genotype", models.JSONField(blank=True, null=True)),
                ("test_accuracy", models.FloatField(blank=True, null=True)),
                ("created_at", models.DateTimeField(auto_now_add=True)),
                ("finished_at", models.DateTimeField(blank=True, null=True)),
            ],
            options={"ordering": ("-created_at",)},
        ),
        migrations.CreateModel(
            name="RunEvent",
            fields=[
                ("id", models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name="ID")),
                ("action", models.CharField(choices=[("started", "started"), ("regenerated", "regenerated"), ("completed", "completed"), ("failed", "failed"), ("paused", "paused")], max_length=32)),
                ("created_at", models.DateTimeField(auto_now_add=True)),
                ("details", models.JSONField(blank=True, null=True)),
                ("run", models.ForeignKey(on_delete=django.db.models.deletion.CASCADE, related_name="events", to="nas.experimentrun")),
            ],
            options={"ordering": ("-created_at",)},
        ),
    ]
