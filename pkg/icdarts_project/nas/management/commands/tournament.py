from django.core.management.base import BaseCommand

from nas.forms import TournamentForm
from nas.models import ExperimentRun
from nas.services.config import TournamentConfig, load_config_file, merge_options
from nas.services.errors import TournamentBudgetExhausted
from nas.services.tournament import run_tournament

from ._options import add_common_arguments, command_errors, output_dir, search_config, validated


class Command(BaseCommand):
    help = "Run the dynamic search-space tournament; rerun with the same --out to resume."

    def add_arguments(self, parser):
        add_common_arguments(parser)
        parser.add_argument("--tiers", type=int)
        parser.add_argument("--o-max", dest="o_max", type=int)
        parser.add_argument("--tier-epochs", dest="tier_epochs", type=int)
        parser.add_argument("--run-budget", dest="run_budget", type=int, help="Stop after this many runs; resumable.")

    def handle(self, *args, **options):
        with command_errors():
            document = load_config_file(options.get("config"))
            form_options = {**options, "master_space": options.get("space")}
            form = validated(TournamentForm, form_options, ("tiers", "o_max", "run_budget", "tier_epochs", "master_space"))
            search, _ = search_config({**options, "space": None}, document.get("search", {"space_id": "combined"}))
            merged = merge_options(document, form.tournament_overrides())
            merged["search"] = search
            merged["seed"] = options["seed"] if options.get("seed") is not None else merged.get("seed", search.seed)
            config = TournamentConfig.from_dict(merged)
        out = output_dir(options, "tournament")
        run = ExperimentRun.objects.filter(kind="tournament", run_dir=str(out)).first()
        if run is None:
            run = ExperimentRun.start("tournament", out, label="tournament", seed=config.seed, config=config.to_dict())
        else:
            run.status = "running"
            run.save(update_fields=["status"])
            run.log("started", {"resumed": True})
        with command_errors(run):
            try:
                final, tiers = run_tournament(config, out)
            except TournamentBudgetExhausted as exc:
                run.fail(exc, status="paused")
                self.stdout.write(self.style.WARNING(str(exc)))
                return
        run.complete(final.to_dict())
        self.stdout.write(self.style.SUCCESS(f"Tournament finished over {len(tiers)} tier(s): {out / 'genotype_final.json'}"))
