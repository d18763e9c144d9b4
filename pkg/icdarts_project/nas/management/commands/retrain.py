from pathlib import Path

from django.core.management.base import BaseCommand

from nas.models import ExperimentRun
from nas.services.ablations import random_baseline, retrain_genotype
from nas.services.config import load_config_file
from nas.services.errors import ConfigError
from nas.services.genotypes import Genotype
from nas.services.runs import FINAL_GENOTYPE_FILE

from ._options import (
    add_common_arguments,
    add_retrain_arguments,
    command_errors,
    output_dir,
    retrain_schedule,
    search_config,
    search_config_from_run,
    with_retrain_cells,
)


class Command(BaseCommand):
    help = "Retrain a genotype (or a random baseline genotype) from scratch and measure latency."

    def add_arguments(self, parser):
        add_common_arguments(parser)
        add_retrain_arguments(parser)
        source = parser.add_mutually_exclusive_group(required=True)
        source.add_argument("--genotype", type=Path, help="Genotype JSON file or a search run directory.")
        source.add_argument("--random-genotype", dest="random_genotype", action="store_true")

    def handle(self, *args, **options):
        with command_errors():
            document = load_config_file(options.get("config"))
            base = document.get("search", {})
            genotype = None
            if options["genotype"] is not None:
                path = options["genotype"]
                if path.is_dir():
                    base = {**search_config_from_run(path), **base}
                    path = path / FINAL_GENOTYPE_FILE
                if not path.exists():
                    raise ConfigError(f"Genotype file not found: {path}")
                genotype = Genotype.load(path)
            config, _ = search_config(options, base)
            config = with_retrain_cells(config, options.get("cells"))
            schedule = retrain_schedule(options, document.get("retrain"))
            if genotype is None:
                genotype = random_baseline(config, config.seed)
        label = "random" if options["random_genotype"] else "retrain"
        out = output_dir(options, "retrain", label)
        run = ExperimentRun.start("retrain", out, label=label, seed=schedule.seed, config=schedule.to_dict())
        with command_errors(run):
            metrics = retrain_genotype(genotype, config, schedule, out)
        run.complete(genotype.to_dict(), metrics.final_test_acc)
        self.stdout.write(
            self.style.SUCCESS(
                f"Final test accuracy {metrics.final_test_acc:.4f}, latency {metrics.latency_mean:.4f} s/batch ({out})"
            )
        )
