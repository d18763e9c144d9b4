import tempfile
from pathlib import Path

from django.test import SimpleTestCase

from nas.services.errors import ArchitectureError, DataError
from nas.services.genotypes import Genotype, GenotypeHistory, edge_group_keys, source_label

GENOTYPE = Genotype(
    normal=((0, 0, "sep_conv_3"), (0, 1, "identity"), (1, 1, "sep_conv_5"), (1, 2, "dil_conv_3")),
    reduce=((0, 0, "max_pool_3"), (0, 1, "avg_pool_3"), (1, 0, "skip_me"), (1, 2, "max_pool_3")),
    concat=(0, 1),
    space_id="3",
    zero_config="V3",
    discretizer="idarts",
)


class GenotypeTest(SimpleTestCase):
    def test_json_round_trip_is_lossless(self):
        again = Genotype.from_json(GENOTYPE.to_json())
        self.assertEqual(again, GENOTYPE)
        self.assertEqual(again.to_json(), GENOTYPE.to_json())

    def test_file_round_trip(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = GENOTYPE.save(Path(tmp) / "g.json")
            self.assertEqual(Genotype.load(path), GENOTYPE)

    def test_rejects_edges_against_topological_order(self):
        with self.assertRaises(ArchitectureError):
            Genotype(normal=((0, 2, "identity"),), reduce=(), concat=(0,))

    def test_malformed_documents(self):
        with self.assertRaises(DataError):
            Genotype.from_json("{not json")
        with self.assertRaises(DataError):
            Genotype.from_dict({"normal": []})
        with self.assertRaises(DataError):
            Genotype.from_dict({**GENOTYPE.to_dict(), "schema_version": 99})
        with self.assertRaises(DataError):
            Genotype.load(Path("/nonexistent/genotype.json"))

    def test_replace_ops(self):
        swapped = GENOTYPE.replace_ops({"max_pool_3": "zero"})
        self.assertEqual(swapped.op_names().count("zero"), 2)
        self.assertNotIn("max_pool_3", swapped.op_names())

    def test_incoming_and_nodes(self):
        self.assertEqual(GENOTYPE.n_nodes, 2)
        self.assertEqual(GENOTYPE.incoming("normal")[1], [(1, "sep_conv_5"), (2, "dil_conv_3")])

    def test_edge_group_keys(self):
        self.assertEqual(len(edge_group_keys(4)), 2 * 14)
        self.assertEqual(source_label(0), "c_{k-2}")
        self.assertEqual(source_label(3), "n_1")


class GenotypeHistoryTest(SimpleTestCase):
    def test_append_only(self):
        history = GenotypeHistory()
        history.append(0, GENOTYPE)
        history.append(3, GENOTYPE)
        self.assertEqual(len(history), 2)
        self.assertIs(history.latest, GENOTYPE)
        with self.assertRaises(ArchitectureError):
            history.append(1, GENOTYPE)
