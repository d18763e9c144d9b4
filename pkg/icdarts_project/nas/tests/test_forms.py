import json
import tempfile
from pathlib import Path

from django.test import SimpleTestCase

from nas.forms import AblationForm, RetrainForm, SearchForm, TournamentForm, form_data
from nas.management.commands._options import retrain_schedule, search_config
from nas.services.config import (
    RetrainSchedule,
    SearchConfig,
    TournamentConfig,
    load_config_file,
    merge_options,
)
from nas.services.errors import ConfigError
from nas.services.operations import SPACES


class SearchFormTest(SimpleTestCase):
    def test_normalizes_case(self):
        form = SearchForm(data={"zero_config": "v3", "route": "b", "stage": 1})
        self.assertTrue(form.is_valid(), form.errors)
        self.assertEqual(form.cleaned_data["zero_config"], "V3")
        self.assertEqual(form.cleaned_data["route"], "B")

    def test_route_needs_stage(self):
        self.assertFalse(SearchForm(data={"route": "A"}).is_valid())
        self.assertFalse(SearchForm(data={"stage": 2}).is_valid())

    def test_loss_excludes_route(self):
        self.assertFalse(SearchForm(data={"route": "A", "stage": 1, "loss": "cdarts"}).is_valid())

    def test_unknown_values(self):
        self.assertFalse(SearchForm(data={"zero_config": "V9"}).is_valid())
        self.assertFalse(SearchForm(data={"space": "12"}).is_valid())
        self.assertFalse(SearchForm(data={"cells": 2}).is_valid())

    def test_overrides_leave_missing_options_unset(self):
        form = SearchForm(data={"seed": 4, "epochs": 7})
        self.assertTrue(form.is_valid(), form.errors)
        overrides = form.search_overrides()
        self.assertEqual(overrides["seed"], 4)
        self.assertEqual(overrides["search_steps"], 7)
        self.assertIsNone(overrides["space_id"])
        self.assertIsNone(overrides["template"]["n_cells_search"])


class OtherFormsTest(SimpleTestCase):
    def test_drop_path_below_one(self):
        self.assertFalse(RetrainForm(data={"drop_path": 1.0}).is_valid())
        self.assertTrue(RetrainForm(data={"drop_path": 0.2}).is_valid())

    def test_o_max_bounded_by_master_space(self):
        too_many = len(SPACES["3"]) + 1
        self.assertFalse(TournamentForm(data={"o_max": too_many, "master_space": "3"}).is_valid())
        self.assertTrue(TournamentForm(data={"o_max": too_many, "master_space": "combined"}).is_valid())

    def test_ablation_needs_exactly_one_mode(self):
        self.assertTrue(AblationForm(data={"template": "no_identity"}).is_valid())
        self.assertTrue(AblationForm(data={"route": "A", "stage": 2}).is_valid())
        self.assertTrue(AblationForm(data={"literal": True}).is_valid())
        self.assertFalse(AblationForm(data={}).is_valid())
        self.assertFalse(AblationForm(data={"template": "no_identity", "literal": True}).is_valid())

    def test_form_data_drops_absent_flags(self):
        self.assertEqual(form_data({"seed": 0, "route": None, "literal": False}, ("seed", "route", "literal")), {"seed": 0})


class ConfigTest(SimpleTestCase):
    def test_merge_skips_none_and_recurses(self):
        merged = merge_options({"seed": 1, "template": {"n_nodes": 3}}, {"seed": None, "template": {"n_cells_search": 5}})
        self.assertEqual(merged, {"seed": 1, "template": {"n_nodes": 3, "n_cells_search": 5}})
        self.assertEqual(merge_options({}, {"template": {"n_cells_search": None}}), {"template": {}})

    def test_search_config_round_trip(self):
        config = SearchConfig(zero_config="v2", space_id=4)
        self.assertEqual(config.zero_config, "V2")
        self.assertEqual(SearchConfig.from_dict(json.loads(json.dumps(config.to_dict()))), config)

    def test_tournament_config_round_trip(self):
        config = TournamentConfig(tiers=2, o_max=4, run_budget=3)
        self.assertEqual(TournamentConfig.from_dict(json.loads(json.dumps(config.to_dict()))), config)

    def test_invalid_configs(self):
        with self.assertRaises(ConfigError):
            SearchConfig.from_dict({"epochs": 3})
        with self.assertRaises(ConfigError):
            SearchConfig(search_steps=0)
        with self.assertRaises(ConfigError):
            RetrainSchedule(latency_batches=1)
        with self.assertRaises(ConfigError):
            TournamentConfig(master_space="7")

    def test_config_file(self):
        self.assertEqual(load_config_file(None), {})
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "run.json"
            path.write_text("[1, 2]")
            with self.assertRaises(ConfigError):
                load_config_file(path)
            path.write_text("{broken")
            with self.assertRaises(ConfigError):
                load_config_file(path)
            with self.assertRaises(ConfigError):
                load_config_file(Path(tmp) / "absent.json")


class CommandOptionsTest(SimpleTestCase):
    def test_flags_override_the_document(self):
        config, loss = search_config({"seed": 9, "cells": 5}, {"seed": 1, "loss": "cdarts", "template": {"n_nodes": 3}})
        self.assertEqual(config.seed, 9)
        self.assertEqual(config.loss, "cdarts")
        self.assertEqual(config.template.n_nodes, 3)
        self.assertEqual(config.template.n_cells_search, 5)
        self.assertIsNone(loss)

    def test_route_selects_a_preset(self):
        config, loss = search_config({"route": "B", "stage": 2}, {"lam": 0.5})
        self.assertEqual(loss.name, "routeB2")
        self.assertEqual(loss.lam, 0.5)

    def test_invalid_flags_raise_config_errors(self):
        with self.assertRaises(ConfigError):
            search_config({"route": "A"}, {})
        with self.assertRaises(ConfigError):
            retrain_schedule({"drop_path": 1.5})

    def test_retrain_epochs_flag(self):
        schedule = retrain_schedule({"retrain_epochs": 0, "cutout": 8}, {"batch_size": 32})
        self.assertEqual((schedule.epochs, schedule.cutout, schedule.batch_size), (0, 8, 32))
