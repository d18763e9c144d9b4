from pathlib import Path

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError
from django.utils import timezone

from nas.models import ExperimentRun
from nas.services.reports import report

from ._options import command_errors


class Command(BaseCommand):
    help = "Render curves, accuracy and latency tables and genotype charts for run directories."

    def add_arguments(self, parser):
        parser.add_argument("run_dirs", nargs="*", type=Path)
        parser.add_argument("--all", action="store_true", help="Include every completed run in the registry.")
        parser.add_argument("--out", type=Path)
        parser.add_argument("--baseline", default="cdarts")
        parser.add_argument("--candidate", default="icdarts")

    def handle(self, *args, **options):
        run_dirs = list(options["run_dirs"])
        if options["all"]:
            completed = ExperimentRun.objects.filter(status="completed").exclude(kind="retrain").order_by("created_at")
            run_dirs.extend(Path(run.run_dir) for run in completed)
        run_dirs = list(dict.fromkeys(run_dirs))
        if not run_dirs:
            raise CommandError("No run directories given (pass paths or --all).", returncode=2)
        out = options["out"] or Path(settings.NAS_RUNS_DIR) / f"report_{timezone.now():%Y%m%d-%H%M%S}"
        with command_errors():
            bundle = report(run_dirs, out, options["baseline"], options["candidate"])
        if bundle.stability is not None:
            stability = bundle.stability
            self.stdout.write(
                f"Stability {stability['candidate']} vs {stability['baseline']}: {stability['verdict']} "
                f"(std {stability['candidate_std']} vs {stability['baseline_std']})"
            )
        self.stdout.write(self.style.SUCCESS(f"Report written to {bundle.out_dir} ({len(bundle.files)} files)."))
