import torch
from django.test import SimpleTestCase
from torch.func import functional_call

from nas.services.cells import (
    AlphaTable,
    ContinuousCell,
    DiscreteCell,
    drop_path,
    edge_mixture,
    init_alphas,
    node_output,
)
from nas.services.errors import ArchitectureError, DataError
from nas.services.genotypes import Genotype, edge_group_keys
from nas.services.operations import CATALOG, SPACES, instantiate

DARTS_OPS = list(SPACES["3"])


class MixtureTest(SimpleTestCase):
    def test_mixture_matches_weighted_sum_oracle(self):
        generator = torch.Generator().manual_seed(0)
        names = [n for n in CATALOG if n != "random"]
        for case in range(100):
            picks = torch.randperm(len(names), generator=generator)[:2].tolist()
            ops = [instantiate(names[i], 4, 4, 1, rng_seed=case).eval() for i in picks]
            x = torch.randn(2, 4, 6, 6, generator=generator)
            alpha = torch.randn(2, generator=generator)
            w = torch.softmax(alpha, dim=0)
            with torch.no_grad():
                expected = w[0] * ops[0](x) + w[1] * ops[1](x)
                actual = edge_mixture(x, alpha, ops)
            self.assertTrue(torch.allclose(actual, expected, atol=1e-6), f"case {case}: {[names[i] for i in picks]}")

    def test_mixture_rejects_length_mismatch(self):
        with self.assertRaises(ArchitectureError):
            edge_mixture(torch.zeros(1, 2, 4, 4), torch.zeros(3), [torch.nn.Identity()])

    def test_gradients_match_finite_differences(self):
        torch.manual_seed(0)
        conv = instantiate("conv_3", 2, 2, 1).double()
        pool = instantiate("avg_pool_3", 2, 2, 1).double()
        identity = instantiate("identity", 2, 2, 1).double()
        x = torch.randn(1, 2, 5, 5, dtype=torch.float64)
        alpha = torch.randn(3, dtype=torch.float64, requires_grad=True)
        weight = conv.op.weight.detach().clone().requires_grad_(True)

        def loss(a, w):
            ops = [lambda t: functional_call(conv, {"op.weight": w}, (t,)), pool, identity]
            return edge_mixture(x, a, ops).pow(2).sum()

        self.assertTrue(torch.autograd.gradcheck(loss, (alpha, weight), eps=1e-5, atol=1e-8, rtol=1e-6))

    def test_node_output_sums_and_checks_shapes(self):
        a, b = torch.ones(1, 2, 3, 3), torch.full((1, 2, 3, 3), 2.0)
        self.assertTrue(torch.equal(node_output([a, b]), torch.full((1, 2, 3, 3), 3.0)))
        with self.assertRaises(ArchitectureError):
            node_output([a, torch.ones(1, 2, 4, 4)])
        with self.assertRaises(ArchitectureError):
            node_output([])

    def test_drop_path_is_identity_at_zero(self):
        x = torch.randn(4, 2, 3, 3)
        self.assertIs(drop_path(x, 0.0), x)

    def test_drop_path_zeroes_whole_samples(self):
        x = torch.ones(64, 2, 3, 3)
        out = drop_path(x, 0.5, torch.Generator().manual_seed(1))
        per_sample = out.flatten(1)
        for row in per_sample:
            self.assertTrue(bool((row == 0).all()) or bool((row == 2.0).all()))


class AlphaTableTest(SimpleTestCase):
    def test_init_is_seeded_and_small(self):
        a = init_alphas(4, DARTS_OPS, rng_seed=3)
        b = init_alphas(4, DARTS_OPS, rng_seed=3)
        self.assertEqual(a.fingerprint(), b.fingerprint())
        self.assertEqual(len(a.parameters()), len(edge_group_keys(4)))
        self.assertLess(max(float(p.abs().max()) for p in a.parameters()), 0.01)

    def test_dict_round_trip(self):
        table = init_alphas(2, DARTS_OPS, rng_seed=1)
        again = AlphaTable.from_dict(table.to_dict())
        self.assertEqual(table.fingerprint(), again.fingerprint())
        self.assertEqual(again.names("reduce", 1, 2), tuple(DARTS_OPS))

    def test_malformed_document(self):
        with self.assertRaises(DataError):
            AlphaTable.from_dict({"n_nodes": 2})

    def test_heterogeneous_pools(self):
        pools = {key: DARTS_OPS[: 2 + key[1]] for key in edge_group_keys(2)}
        table = init_alphas(2, DARTS_OPS, pools=pools)
        self.assertFalse(table.homogeneous)
        self.assertEqual(len(table.names("normal", 1, 0)), 3)


class CellTest(SimpleTestCase):
    def test_continuous_cell_concatenates_all_nodes(self):
        alphas = init_alphas(2, DARTS_OPS)
        cell = ContinuousCell("normal", alphas, 6, 6, 4)
        out = cell(torch.randn(2, 6, 8, 8), torch.randn(2, 6, 8, 8), alphas)
        self.assertEqual(tuple(out.shape), (2, 8, 8, 8))

    def test_reduce_cell_halves_resolution(self):
        alphas = init_alphas(2, DARTS_OPS)
        cell = ContinuousCell("reduce", alphas, 6, 6, 4)
        out = cell(torch.randn(2, 6, 8, 8), torch.randn(2, 6, 8, 8), alphas)
        self.assertEqual(tuple(out.shape), (2, 8, 4, 4))

    def test_continuous_cell_checks_input_channels(self):
        alphas = init_alphas(2, DARTS_OPS)
        cell = ContinuousCell("normal", alphas, 6, 6, 4)
        with self.assertRaises(ArchitectureError):
            cell(torch.randn(1, 5, 8, 8), torch.randn(1, 6, 8, 8), alphas)

    def test_alpha_gradient_reaches_every_group(self):
        alphas = init_alphas(2, DARTS_OPS)
        cell = ContinuousCell("normal", alphas, 4, 4, 4)
        cell(torch.randn(2, 4, 6, 6), torch.randn(2, 4, 6, 6), alphas).sum().backward()
        for dst, src in ((0, 0), (0, 1), (1, 0), (1, 1), (1, 2)):
            vector, _ = alphas.group("normal", dst, src)
            self.assertIsNotNone(vector.grad)

    def test_discrete_cell_uses_concat_nodes(self):
        genotype = Genotype(
            normal=((0, 0, "sep_conv_3"), (0, 1, "identity"), (1, 2, "max_pool_3"), (1, 1, "dil_conv_3")),
            reduce=((0, 0, "avg_pool_3"), (0, 1, "identity"), (1, 2, "sep_conv_5"), (1, 0, "max_pool_3")),
            concat=(0, 1),
        )
        cell = DiscreteCell(genotype, "normal", 6, 6, 4)
        self.assertEqual(tuple(cell(torch.randn(2, 6, 8, 8), torch.randn(2, 6, 8, 8)).shape), (2, 8, 8, 8))

    def test_discrete_cell_rejects_dangling_node(self):
        genotype = Genotype(normal=((1, 2, "identity"),), reduce=((1, 2, "identity"),), concat=(0, 1))
        with self.assertRaises(ArchitectureError):
            DiscreteCell(genotype, "normal", 4, 4, 4)
