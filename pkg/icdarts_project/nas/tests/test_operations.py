import json

import torch
from django.test import SimpleTestCase

from nas.services.errors import ArchitectureError, ConfigError
from nas.services.operations import (
    CATALOG,
    SPACES,
    export_space_json,
    instantiate,
    random_forward,
    resolve_space,
    zero_forward,
)


class CatalogTest(SimpleTestCase):
    def test_spaces_reference_catalog_entries(self):
        for space_id, names in SPACES.items():
            for name in names:
                self.assertIn(name, CATALOG, f"{name} of space {space_id}")

    def test_curated_spaces_share_the_starred_ops(self):
        for space_id in ("1", "2", "3", "4"):
            self.assertTrue({"identity", "max_pool_3", "avg_pool_3"} <= set(SPACES[space_id]))

    def test_space_three_is_the_darts_space(self):
        names = [s.name for s in resolve_space("3", "V1", "search")]
        self.assertEqual(len(names), 7)
        self.assertNotIn("zero", names)

    def test_resolve_space_appends_phase_slot(self):
        self.assertEqual(resolve_space("3", "V0", "search")[-1].name, "zero")
        self.assertNotIn("zero", [s.name for s in resolve_space("3", "V0", "evaluation")])
        self.assertEqual(resolve_space("3", "V3", "evaluation")[-1].name, "random")
        self.assertEqual(resolve_space("3", "V3", "retrain")[-1].name, "zero")
        self.assertEqual(resolve_space("3", "V4", "evaluation")[-1].name, "zero")

    def test_resolve_space_exclusions(self):
        names = [s.name for s in resolve_space("3", "V1", "search", exclude=("identity",))]
        self.assertNotIn("identity", names)
        with self.assertRaises(ConfigError):
            resolve_space("3", "V1", "search", exclude=("not_an_op",))
        with self.assertRaises(ConfigError):
            resolve_space("7", "V1", "search")

    def test_export_space_json(self):
        document = json.loads(export_space_json(resolve_space("4", "V1", "search")))
        self.assertEqual(document[0]["name"], "mbconv_3")
        self.assertEqual(document[0]["expansion"], 6)
        self.assertEqual(set(document[0]), {"name", "category", "kernel", "expansion"})


class InstantiateTest(SimpleTestCase):
    def test_every_op_preserves_shape_or_halves_it(self):
        x = torch.randn(2, 8, 8, 8)
        for name in CATALOG:
            for stride in (1, 2):
                op = instantiate(name, 8, 8, stride, rng_seed=1)
                out = op(x)
                self.assertEqual(tuple(out.shape), (2, 8, 8 // stride, 8 // stride), f"{name} stride {stride}")

    def test_weightless_ops_have_no_parameters_at_stride_one(self):
        for name, spec in CATALOG.items():
            op = instantiate(name, 8, 8, 1)
            params = sum(p.numel() for p in op.parameters())
            if spec.has_weights:
                self.assertGreater(params, 0, name)
            else:
                self.assertEqual(params, 0, name)

    def test_seeded_instantiation_is_reproducible(self):
        a = instantiate("sep_conv_3", 4, 4, 1, rng_seed=3)
        b = instantiate("sep_conv_3", 4, 4, 1, rng_seed=3)
        for pa, pb in zip(a.parameters(), b.parameters()):
            self.assertTrue(torch.equal(pa, pb))

    def test_rejects_bad_stride(self):
        with self.assertRaises(ArchitectureError):
            instantiate("conv_3", 4, 4, 3)

    def test_unknown_op(self):
        with self.assertRaises(ArchitectureError):
            instantiate("conv_11", 4, 4)


class SpecialForwardTest(SimpleTestCase):
    def test_zero_forward(self):
        out = zero_forward(torch.randn(2, 3, 8, 8), stride=2)
        self.assertEqual(tuple(out.shape), (2, 3, 4, 4))
        self.assertEqual(float(out.abs().sum()), 0.0)

    def test_random_forward_is_uniform_noise_in_range(self):
        generator = torch.Generator().manual_seed(0)
        out = random_forward(torch.randn(4, 3, 8, 8), 1, generator, high=0.5)
        self.assertGreaterEqual(float(out.min()), 0.0)
        self.assertLess(float(out.max()), 0.5)

    def test_random_forward_passes_zero_gradient(self):
        x = torch.randn(1, 2, 4, 4, requires_grad=True)
        random_forward(x, 1).sum().backward()
        self.assertEqual(float(x.grad.abs().sum()), 0.0)
