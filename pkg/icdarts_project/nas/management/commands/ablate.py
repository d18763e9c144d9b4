from dataclasses import replace

from django.core.management.base import BaseCommand

from nas.forms import AblationForm
from nas.models import ExperimentRun
from nas.services.ablations import TEMPLATE_ABLATIONS, apply_template_ablation, search_and_retrain
from nas.services.config import load_config_file
from nas.services.search import ROUTES, get_loss_preset

from ._options import (
    add_common_arguments,
    add_retrain_arguments,
    command_errors,
    output_dir,
    retrain_schedule,
    search_config,
    validated,
)


class Command(BaseCommand):
    help = "Search and retrain under a template ablation or an algorithmic ablation route stage."

    def add_arguments(self, parser):
        add_common_arguments(parser)
        add_retrain_arguments(parser)
        parser.add_argument("--template", choices=sorted(TEMPLATE_ABLATIONS))
        parser.add_argument("--literal", action="store_true", help="Use the routeA3_literal loss preset.")

    def handle(self, *args, **options):
        with command_errors():
            validated(AblationForm, options, ("template", "route", "stage", "literal"))
            document = load_config_file(options.get("config"))
            config, loss = search_config(options, document.get("search", {}))
            schedule = retrain_schedule(options, document.get("retrain"))
            if options.get("template"):
                label = options["template"]
                config = replace(config, template=apply_template_ablation(config.template, label))
            elif options.get("literal"):
                loss = get_loss_preset("routeA3_literal", config.lam, config.temperature)
                label = loss.name
            else:
                label = f"route{options['route']}{options['stage']}_{ROUTES[options['route']][options['stage']].name}"
        out = output_dir(options, "ablation", label)
        run = ExperimentRun.start("ablation", out, label=label, seed=config.seed, config=config.to_dict())
        with command_errors(run):
            genotype, metrics = search_and_retrain(config, schedule, out, loss=loss, label=label)
        run.complete(genotype.to_dict(), metrics.final_test_acc)
        self.stdout.write(self.style.SUCCESS(f"{label}: final test accuracy {metrics.final_test_acc:.4f} ({out})"))
