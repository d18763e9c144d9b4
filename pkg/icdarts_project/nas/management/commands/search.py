from django.core.management.base import BaseCommand

from nas.models import ExperimentRun
from nas.services.search import run_search

from ._options import add_common_arguments, command_errors, output_dir, search_config


class Command(BaseCommand):
    help = "Run a CDARTS/ICDARTS architecture search and store the run directory."

    def add_arguments(self, parser):
        add_common_arguments(parser)
        parser.add_argument("--loss", help="Loss preset name (cdarts, icdarts, routeA1, ...).")
        parser.add_argument("--label", default="", help="Group label used by the report.")

    def handle(self, *args, **options):
        with command_errors():
            config, loss = search_config(options)
        label = options["label"] or (loss.name if loss else config.loss)
        out = output_dir(options, "search", label)
        run = ExperimentRun.start("search", out, label=label, seed=config.seed, config=config.to_dict())
        with command_errors(run):
            genotype, record = run_search(config, out, loss=loss, label=label)
            metrics = record.metrics()
            summary = record.read_json("summary.json")
        run.log("regenerated", summary)
        run.complete(genotype.to_dict(), float(metrics["eval_test_acc"].iloc[-1]))
        self.stdout.write(self.style.SUCCESS(f"Search finished: {record.path / 'genotype_final.json'}"))
