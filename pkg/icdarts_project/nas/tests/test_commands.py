import tempfile
from io import StringIO
from pathlib import Path
from types import SimpleNamespace
from unittest import mock

from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import TestCase, override_settings

from nas.models import ExperimentRun, RunEvent
from nas.services.discretizer import random_genotype
from nas.services.errors import DataError, NumericalError, TournamentBudgetExhausted
from nas.services.operations import SPACES
from nas.services.runs import RunRecord
from nas.services.training import Metrics

GENOTYPE = random_genotype(list(SPACES["3"]), 4, rng_seed=1)


def fake_run_search(config, out_dir, loss=None, label=None, **kwargs):
    record = RunRecord.create(out_dir)
    record.write_config({"label": label, "seed": config.seed})
    record.append_metrics({"epoch": 0, "search_loss": 1.0, "eval_val_acc": 0.4, "eval_test_acc": 0.45, "wall_time": 1.0})
    record.write_genotype(GENOTYPE)
    record.write_json("summary.json", {"joint_steps": 6, "regenerations": 6})
    return GENOTYPE, record


class CommandTestCase(TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.root = Path(self.tmp.name)
        self.stdout = StringIO()
        override = override_settings(NAS_RUNS_DIR=self.root / "runs")
        override.enable()
        self.addCleanup(override.disable)

    def call(self, *args):
        return call_command(*args, stdout=self.stdout, stderr=StringIO())


@mock.patch("nas.management.commands.search.run_search", side_effect=fake_run_search)
class SearchCommandTest(CommandTestCase):
    def test_registers_completed_run(self, run_search):
        self.call("search", "--seed", "3", "--loss", "cdarts", "--out", str(self.root / "s"))
        run = ExperimentRun.objects.get(kind="search")
        self.assertEqual(run.status, "completed")
        self.assertEqual(run.label, "cdarts")
        self.assertEqual(run.seed, 3)
        self.assertAlmostEqual(run.test_accuracy, 0.45)
        self.assertEqual(run.genotype, GENOTYPE.to_dict())
        actions = set(RunEvent.objects.filter(run=run).values_list("action", flat=True))
        self.assertEqual(actions, {"started", "regenerated", "completed"})
        self.assertIn("Search finished", self.stdout.getvalue())

    def test_route_preset_reaches_the_search(self, run_search):
        self.call("search", "--route", "A", "--stage", "1", "--out", str(self.root / "s"))
        self.assertEqual(run_search.call_args.kwargs["loss"].name, "routeA1")
        self.assertEqual(ExperimentRun.objects.get().label, "routeA1")

    def test_default_output_directory(self, run_search):
        self.call("search", "--seed", "2", "--label", "icdarts")
        run = ExperimentRun.objects.get()
        self.assertTrue(Path(run.run_dir).name.startswith("search_icdarts_seed2_"))
        self.assertEqual(Path(run.run_dir).parent, self.root / "runs")

    def test_config_error_exits_with_two(self, run_search):
        with self.assertRaises(CommandError) as caught:
            self.call("search", "--route", "A")
        self.assertEqual(caught.exception.returncode, 2)
        self.assertFalse(ExperimentRun.objects.exists())

    def test_numerical_error_exits_with_four(self, run_search):
        run_search.side_effect = NumericalError("loss diverged")
        with self.assertRaises(CommandError) as caught:
            self.call("search", "--out", str(self.root / "s"))
        self.assertEqual(caught.exception.returncode, 4)
        self.assertEqual(ExperimentRun.objects.get().status, "failed")


class TournamentCommandTest(CommandTestCase):
    def test_pause_then_resume_reuses_the_registry_entry(self):
        out = str(self.root / "t")
        with mock.patch(
            "nas.management.commands.tournament.run_tournament",
            side_effect=TournamentBudgetExhausted("Run budget of 2 spent"),
        ):
            self.call("tournament", "--tiers", "2", "--o-max", "4", "--run-budget", "2", "--out", out)
        run = ExperimentRun.objects.get(kind="tournament")
        self.assertEqual(run.status, "paused")
        self.assertIn("Run budget", self.stdout.getvalue())

        with mock.patch("nas.management.commands.tournament.run_tournament", return_value=(GENOTYPE, [1, 2])) as runner:
            self.call("tournament", "--tiers", "2", "--o-max", "4", "--out", out)
        config = runner.call_args.args[0]
        self.assertEqual((config.tiers, config.o_max, config.master_space), (2, 4, "combined"))
        self.assertEqual(ExperimentRun.objects.count(), 1)
        run.refresh_from_db()
        self.assertEqual(run.status, "completed")

    def test_o_max_beyond_master_space(self):
        with self.assertRaises(CommandError) as caught:
            self.call("tournament", "--space", "3", "--o-max", "50", "--out", str(self.root / "t"))
        self.assertEqual(caught.exception.returncode, 2)


class RetrainCommandTest(CommandTestCase):
    @mock.patch("nas.management.commands.retrain.retrain_genotype", return_value=Metrics(final_test_acc=0.5, latency_mean=0.01))
    def test_retrains_a_run_directory(self, retrain):
        fake_run_search(SimpleNamespace(seed=0), self.root / "search")
        RunRecord(self.root / "search").write_config({"label": "icdarts", "seed": 5, "space_id": "3"})
        self.call("retrain", "--genotype", str(self.root / "search"), "--retrain-epochs", "2", "--out", str(self.root / "r"))
        genotype, config, schedule, out = retrain.call_args.args
        self.assertEqual(genotype, GENOTYPE)
        self.assertEqual(config.seed, 5)
        self.assertEqual(schedule.epochs, 2)
        run = ExperimentRun.objects.get(kind="retrain")
        self.assertEqual((run.status, run.test_accuracy), ("completed", 0.5))

    @mock.patch("nas.management.commands.retrain.retrain_genotype", return_value=Metrics(final_test_acc=0.3, latency_mean=0.01))
    def test_random_baseline(self, retrain):
        self.call("retrain", "--random-genotype", "--seed", "2", "--out", str(self.root / "r"))
        self.assertEqual(retrain.call_args.args[0].discretizer, "random")
        self.assertEqual(ExperimentRun.objects.get().label, "random")

    def test_missing_genotype_file(self):
        with self.assertRaises(CommandError) as caught:
            self.call("retrain", "--genotype", str(self.root / "absent.json"))
        self.assertEqual(caught.exception.returncode, 2)


class AblateCommandTest(CommandTestCase):
    @mock.patch("nas.management.commands.ablate.search_and_retrain", return_value=(GENOTYPE, Metrics(final_test_acc=0.4)))
    def test_template_and_route_labels(self, search_and_retrain):
        self.call("ablate", "--template", "no_identity", "--out", str(self.root / "a"))
        config = search_and_retrain.call_args.args[0]
        self.assertIn("identity", config.template.exclude_ops)
        self.call("ablate", "--route", "B", "--stage", "2", "--out", str(self.root / "b"))
        self.assertEqual(search_and_retrain.call_args.kwargs["loss"].name, "routeB2")
        labels = set(ExperimentRun.objects.values_list("label", flat=True))
        self.assertEqual(labels, {"no_identity", "routeB2_routeB2"})

    def test_modes_are_exclusive(self):
        with self.assertRaises(CommandError) as caught:
            self.call("ablate", "--template", "no_identity", "--literal")
        self.assertEqual(caught.exception.returncode, 2)


class ReportCommandTest(CommandTestCase):
    def test_needs_run_directories(self):
        with self.assertRaises(CommandError) as caught:
            self.call("report")
        self.assertEqual(caught.exception.returncode, 2)

    def test_missing_metrics_exit_with_three(self):
        (self.root / "empty").mkdir()
        with self.assertRaises(CommandError) as caught:
            self.call("report", str(self.root / "empty"), "--out", str(self.root / "report"))
        self.assertEqual(caught.exception.returncode, DataError.exit_code)

    def test_all_collects_completed_search_runs(self):
        for seed in range(2):
            out = self.root / f"s{seed}"
            fake_run_search(SimpleNamespace(seed=seed), out, label="icdarts")
            ExperimentRun.start("search", out, label="icdarts", seed=seed).complete(GENOTYPE.to_dict(), 0.45)
        ExperimentRun.start("retrain", self.root / "ignored", label="retrain").complete()
        self.call("report", "--all", "--out", str(self.root / "report"))
        self.assertTrue((self.root / "report" / "accuracy_table.csv").exists())
        self.assertIn("Stability icdarts vs cdarts: inconclusive", self.stdout.getvalue())
