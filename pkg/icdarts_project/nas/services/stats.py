"""Layer-type frequencies and cell depth of a genotype."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Dict

from .genotypes import CELL_KINDS, Genotype
from .networks import NetworkTemplate


@dataclass(frozen=True)
class GenotypeStats:
    frequencies: Dict[str, int]
    depth: int
    normal_depth: int
    reduce_depth: int

    def to_dict(self) -> Dict:
        return {
            "frequencies": dict(self.frequencies),
            "depth": self.depth,
            "normal_depth": self.normal_depth,
            "reduce_depth": self.reduce_depth,
        }


def cell_counts(template: NetworkTemplate, phase: str = "evaluation") -> Dict[str, int]:
    n_cells = template.n_cells(phase)
    n_reduce = len(template.reductions(n_cells))
    return {
        "normal": n_cells - n_reduce,
        "reduce": n_reduce if template.reduce_kind == "searched_cell" else 0,
    }


def cell_depth(genotype: Genotype, kind: str) -> int:
    """Edges on the longest path from a cell input to any concatenated node."""
    incoming = genotype.incoming(kind)
    depth: Dict[int, int] = {}
    for node in sorted(incoming):
        depth[node] = max(1 if src < 2 else depth.get(src - 2, 0) + 1 for src, _ in incoming[node])
    return max((depth.get(node, 0) for node in genotype.concat), default=0)


def genotype_stats(genotype: Genotype, template: NetworkTemplate, phase: str = "evaluation") -> GenotypeStats:
    """Op counts as totals over the whole network: each cell's ops times its cell count."""
    counts = cell_counts(template, phase)
    totals: Counter = Counter()
    for kind in CELL_KINDS:
        for _, _, op in genotype.cell(kind):
            totals[op] += counts[kind]
    frequencies = {op: n for op, n in sorted(totals.items()) if n}
    normal, reduce = cell_depth(genotype, "normal"), cell_depth(genotype, "reduce")
    return GenotypeStats(frequencies, max(normal, reduce), normal, reduce)
