import json
import math
import tempfile
from pathlib import Path
from unittest import skipUnless

import torch
import torch.nn.functional as F
from django.test import SimpleTestCase

from nas.services.errors import ConfigError, DataError, NumericalError, SearchError
from nas.services.search import (
    CDARTS,
    ICDARTS,
    LOSS_PRESETS,
    LossConfig,
    family_gradients,
    get_loss_preset,
    init_search_state,
    joint_step,
    pretrain_search,
    regenerate_eval_net,
    run_search,
    select_route_preset,
    soft_target_ce,
    warmup_eval,
)

from .fixtures import SLOW_TESTS, tiny_data, tiny_search_config


def batch(seed: int, n: int = 8):
    generator = torch.Generator().manual_seed(seed)
    return torch.randn(n, 3, 16, 16, generator=generator), torch.randint(0, 4, (n,), generator=generator)


class SoftTargetTest(SimpleTestCase):
    def test_hand_computed_value(self):
        f_E = torch.tensor([[math.log(2.0), 0.0]])
        f_S = torch.zeros(1, 2)
        expected = (2 / 3) * math.log(4 / 3) + (1 / 3) * math.log(2 / 3)
        self.assertAlmostEqual(float(soft_target_ce(f_S, f_E, 1.0)), expected, places=6)
        self.assertAlmostEqual(expected, 0.0566, places=4)

    def test_zero_iff_logits_agree(self):
        logits = torch.randn(5, 10, generator=torch.Generator().manual_seed(0))
        self.assertAlmostEqual(float(soft_target_ce(logits, logits.clone())), 0.0, places=6)
        self.assertGreater(float(soft_target_ce(logits, logits.flip(1))), 0.0)

    def test_temperature_scaling(self):
        generator = torch.Generator().manual_seed(1)
        f_S, f_E = torch.randn(6, 10, generator=generator), torch.randn(6, 10, generator=generator)
        for temperature in (1.0, 2.0, 4.0):
            p = F.softmax(f_E / temperature, dim=1)
            q = F.softmax(f_S / temperature, dim=1)
            expected = temperature**2 * float((p * (p.log() - q.log())).sum()) / 6
            self.assertAlmostEqual(float(soft_target_ce(f_S, f_E, temperature)), expected, places=5)

    def test_rejects_bad_inputs(self):
        with self.assertRaises(SearchError):
            soft_target_ce(torch.zeros(2, 3), torch.zeros(2, 4))
        with self.assertRaises(ConfigError):
            soft_target_ce(torch.zeros(2, 3), torch.zeros(2, 3), 0.0)
        with self.assertRaises(NumericalError):
            soft_target_ce(torch.full((2, 3), float("nan")), torch.zeros(2, 3))


class PresetTest(SimpleTestCase):
    def test_alphas_always_learn_on_val(self):
        for name, preset in LOSS_PRESETS.items():
            self.assertEqual(preset.split("alpha"), "val", name)
            self.assertEqual(preset.split("ws"), "train", name)

    def test_cdarts_and_icdarts_families(self):
        self.assertEqual(CDARTS.we_terms, ("S", "E", "SE"))
        self.assertEqual(CDARTS.split("we"), "val")
        self.assertEqual(ICDARTS.we_terms, ("E",))
        self.assertEqual(ICDARTS.ws_terms, ("S", "SE"))
        self.assertEqual(ICDARTS.split("we"), "train")

    def test_routes_end_at_icdarts(self):
        for route in ("A", "B"):
            self.assertEqual(select_route_preset(route, 0).name, "cdarts")
            self.assertEqual(select_route_preset(route.lower(), 3).name, "icdarts")
        self.assertEqual(select_route_preset("A", 2).we_terms, ("E",))
        self.assertEqual(select_route_preset("B", 1).we_split, "train")

    def test_invalid_presets(self):
        with self.assertRaises(ConfigError):
            get_loss_preset("darts")
        with self.assertRaises(ConfigError):
            select_route_preset("C", 1)
        with self.assertRaises(ConfigError):
            select_route_preset("A", 4)
        with self.assertRaises(ConfigError):
            LossConfig("broken", ("S",), ("S", "E"), ("E",))
        with self.assertRaises(ConfigError):
            CDARTS.with_hyperparameters(-1.0, 2.0)

    def test_hyperparameters_are_carried(self):
        preset = get_loss_preset("icdarts", lam=0.5, temperature=4.0)
        self.assertEqual((preset.lam, preset.temperature), (0.5, 4.0))


class IsolationTest(SimpleTestCase):
    def _state(self, preset):
        state = init_search_state(tiny_search_config(), 4, loss=preset)
        regenerate_eval_net(state)
        return state

    def _we_gradients(self, preset, lam):
        state = self._state(preset)
        x, y = batch(0)
        return family_gradients(state, preset.with_hyperparameters(lam, 2.0), "we", x, y)

    def test_cdarts_eval_weights_see_lambda(self):
        with_kd = self._we_gradients(CDARTS, 1.0)
        without_kd = self._we_gradients(CDARTS, 0.0)
        self.assertFalse(all(torch.equal(a, b) for a, b in zip(with_kd, without_kd)))

    def test_icdarts_eval_weights_ignore_lambda(self):
        with_kd = self._we_gradients(ICDARTS, 1.0)
        without_kd = self._we_gradients(ICDARTS, 0.0)
        for a, b in zip(with_kd, without_kd):
            self.assertTrue(torch.equal(a, b))

    def test_joint_step_touches_only_its_family_under_every_preset(self):
        for name, preset in LOSS_PRESETS.items():
            with self.subTest(preset=name):
                state = init_search_state(tiny_search_config(verify_isolation=True), 4, loss=preset)
                regenerate_eval_net(state)
                before = state.fingerprints()
                losses = joint_step(state, batch(1), batch(2))
                self.assertEqual(set(losses), {"alpha", "ws", "we"})
                self.assertEqual(state.step, 1)
                after = state.fingerprints()
                for family in ("alpha", "ws", "we"):
                    self.assertNotEqual(before[family], after[family], family)

    def test_fingerprints_cover_running_statistics(self):
        state = self._state(ICDARTS)
        before = state.fingerprints()
        bn = next(m for m in state.eval_net.modules() if isinstance(m, torch.nn.BatchNorm2d))
        with torch.no_grad():
            bn.running_mean.add_(1.0)
        after = state.fingerprints()
        self.assertNotEqual(before["we"], after["we"])
        self.assertEqual(before["ws"], after["ws"])

    def test_alpha_gradients_leave_network_statistics_alone(self):
        state = self._state(ICDARTS)
        buffers = [b.clone() for net in (state.search_net, state.eval_net) for b in net.buffers()]
        self.assertTrue(buffers)
        x, y = batch(6)
        family_gradients(state, ICDARTS, "alpha", x, y)
        after = [b for net in (state.search_net, state.eval_net) for b in net.buffers()]
        for old, new in zip(buffers, after):
            self.assertTrue(torch.equal(old, new))

    def test_search_weight_update_keeps_eval_statistics(self):
        state = self._state(ICDARTS)
        eval_buffers = [b.clone() for b in state.eval_net.buffers()]
        search_buffers = [b.clone() for b in state.search_net.buffers()]
        pretrain_search(state, [batch(7)], epochs=1)
        for old, new in zip(eval_buffers, state.eval_net.buffers()):
            self.assertTrue(torch.equal(old, new))
        self.assertFalse(all(torch.equal(old, new) for old, new in zip(search_buffers, state.search_net.buffers())))

    def test_joint_step_needs_eval_network(self):
        state = init_search_state(tiny_search_config(), 4)
        with self.assertRaises(SearchError):
            joint_step(state, batch(1), batch(2))

    def test_regeneration_records_history(self):
        state = self._state(ICDARTS)
        regenerate_eval_net(state)
        self.assertEqual(state.regenerations, 2)
        self.assertEqual(len(state.history), 2)


class PhaseTest(SimpleTestCase):
    def test_pretrain_moves_only_search_weights(self):
        state = init_search_state(tiny_search_config(), 4, loss=ICDARTS)
        before = state.fingerprints()
        pretrain_search(state, [batch(3), batch(4)], epochs=1)
        after = state.fingerprints()
        self.assertNotEqual(before["ws"], after["ws"])
        self.assertEqual(before["alpha"], after["alpha"])
        self.assertEqual(state.step, 0)

    def test_pretrain_rejects_bad_input(self):
        state = init_search_state(tiny_search_config(), 4)
        with self.assertRaises(ConfigError):
            pretrain_search(state, [batch(3)], epochs=-1)
        with self.assertRaises(DataError):
            pretrain_search(state, [], epochs=1)

    def test_warmup_moves_only_eval_weights(self):
        state = init_search_state(tiny_search_config(), 4, loss=CDARTS)
        regenerate_eval_net(state)
        before = state.fingerprints()
        warmup_eval(state, [batch(5)], steps=3)
        after = state.fingerprints()
        self.assertNotEqual(before["we"], after["we"])
        self.assertEqual(before["ws"], after["ws"])
        self.assertEqual(before["alpha"], after["alpha"])

    def test_warmup_needs_eval_network(self):
        state = init_search_state(tiny_search_config(), 4)
        with self.assertRaises(SearchError):
            warmup_eval(state, [batch(5)], steps=1)


class RunSearchTest(SimpleTestCase):
    def _run(self, tmp: str, name: str, seed: int = 0):
        return run_search(tiny_search_config(seed=seed), Path(tmp) / name, data=tiny_data(seed), label="unit")

    def test_writes_run_directory(self):
        with tempfile.TemporaryDirectory() as tmp:
            genotype, record = self._run(tmp, "a")
            for name in ("config.json", "metrics.csv", "genotype_final.json", "genotype_epoch_0.json", "alphas.json"):
                self.assertTrue(record.file(name).exists(), name)
            self.assertTrue((record.checkpoint_dir / "manifest.json").exists())
            config = json.loads(record.file("config.json").read_text())
            self.assertEqual(config["label"], "unit")
            summary = json.loads(record.file("summary.json").read_text())
            self.assertEqual(summary, {"joint_steps": 4, "regenerations": 2})
            self.assertEqual(list(record.metrics()["epoch"]), [0, 1])
            self.assertEqual(record.final_genotype(), genotype)

    def test_equal_seeds_give_equal_genotypes(self):
        with tempfile.TemporaryDirectory() as tmp:
            first, _ = self._run(tmp, "a", seed=3)
            second, _ = self._run(tmp, "b", seed=3)
        self.assertEqual(first.to_json(), second.to_json())

    @skipUnless(SLOW_TESTS, "set ICDARTS_SLOW_TESTS=1 to run longer searches")
    def test_longer_search_with_sparse_regeneration(self):
        config = tiny_search_config(search_steps=4, update_interval=2, steps_per_epoch=4)
        with tempfile.TemporaryDirectory() as tmp:
            _, record = run_search(config, Path(tmp) / "slow", data=tiny_data(0, 256, 64))
            summary = json.loads(record.file("summary.json").read_text())
        self.assertEqual(summary["regenerations"], 3)
        self.assertEqual(summary["joint_steps"], 5 * 4)
