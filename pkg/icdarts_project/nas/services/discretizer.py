"""Continuous alphas to discrete genotypes.

Three schemes are supported:

* ``darts``  - per-edge softmax; keep the ``k`` strongest edges per node, each
  from a distinct source, with the argmax operation on each kept edge.
* ``idarts`` - one softmax over every eligible (source, op) pair entering a node;
  keep the ``k`` most probable pairs, sources may repeat.
* ``xdarts`` - the ``idarts`` pooling, but node ``n_j`` keeps as many pairs as it
  has predecessors.

All rankings break ties by (lower source index, lower op index).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Collection, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .errors import ArchitectureError, ConfigError
from .genotypes import CELL_KINDS, RANDOM_OP, SPECIAL_OPS, ZERO_OP, Edge, Genotype

if TYPE_CHECKING:
    from .cells import AlphaTable

logger = logging.getLogger(__name__)

PHASES = ("search", "evaluation", "retrain")
DISCRETIZERS = ("darts", "idarts", "xdarts")


@dataclass(frozen=True)
class ZeroConfig:
    id: str
    search_slot: Optional[str]
    eval_slot: Optional[str]
    retrain_slot: Optional[str]

    def slot(self, phase: str) -> Optional[str]:
        if phase == "search":
            return self.search_slot
        if phase == "evaluation":
            return self.eval_slot
        if phase == "retrain":
            return self.retrain_slot
        raise ConfigError(f"Unknown phase: {phase}")


ZERO_CONFIGS: Dict[str, ZeroConfig] = {
    "V0": ZeroConfig("V0", ZERO_OP, None, None),
    "V1": ZeroConfig("V1", None, None, None),
    "V2": ZeroConfig("V2", RANDOM_OP, RANDOM_OP, RANDOM_OP),
    "V3": ZeroConfig("V3", RANDOM_OP, RANDOM_OP, ZERO_OP),
    "V4": ZeroConfig("V4", RANDOM_OP, ZERO_OP, ZERO_OP),
}


def get_zero_config(config: "ZeroConfig | str") -> ZeroConfig:
    if isinstance(config, ZeroConfig):
        return config
    try:
        return ZERO_CONFIGS[str(config).upper()]
    except KeyError as exc:
        raise ConfigError(f"Unknown zero config: {config}") from exc


@dataclass(frozen=True)
class DiscretizerKind:
    kind: str = "darts"
    k: int = 2
    count_cell_inputs: bool = True

    def __post_init__(self) -> None:
        if self.kind not in DISCRETIZERS:
            raise ConfigError(f"Unknown discretizer: {self.kind}")
        if self.k < 1:
            raise ConfigError(f"Discretizer k must be positive, got {self.k}")


def eligible_names(zero_config: "ZeroConfig | str", op_names: Sequence[str]) -> List[str]:
    """Ops that may be chosen at discretization; V0 never lets ``zero`` through."""
    config = get_zero_config(zero_config)
    if config.eval_slot is None:
        return [name for name in op_names if name not in SPECIAL_OPS]
    return list(op_names)


def _node_groups(alphas: "AlphaTable", kind: str, dst: int):
    """Per source: (probabilities over the edge's full softmax, raw alpha, op names)."""
    rows = []
    for src in range(dst + 2):
        vector, names = alphas.group(kind, dst, src)
        values = vector.detach().to(torch.float64)
        rows.append((src, torch.softmax(values, dim=-1).tolist(), values.tolist(), names))
    return rows


def _mask(names: Sequence[str], eligible_ops: Optional[Collection[str]]) -> List[int]:
    if eligible_ops is None:
        return list(range(len(names)))
    allowed = set(eligible_ops)
    return [i for i, name in enumerate(names) if name in allowed]


def _genotype(cells: Dict[str, List[Edge]], n_nodes: int, discretizer: str, **meta) -> Genotype:
    return Genotype(
        normal=tuple(cells["normal"]),
        reduce=tuple(cells["reduce"]),
        concat=tuple(range(n_nodes)),
        discretizer=discretizer,
        space_id=str(meta.get("space_id", "3")),
        zero_config=get_zero_config(meta.get("zero_config", "V1")).id,
    )


def _sort_edges(edges: List[Edge], alphas: "AlphaTable", kind: str) -> List[Edge]:
    def op_index(edge: Edge) -> int:
        dst, src, op = edge
        return list(alphas.group(kind, dst, src)[1]).index(op)

    return sorted(edges, key=lambda e: (e[0], e[1], op_index(e)))


def discretize_darts(
    alphas: "AlphaTable",
    k: int = 2,
    eligible_ops: Optional[Collection[str]] = None,
    **meta,
) -> Genotype:
    cells: Dict[str, List[Edge]] = {}
    for kind in CELL_KINDS:
        edges: List[Edge] = []
        for dst in range(alphas.n_nodes):
            candidates = []
            for src, probs, _, names in _node_groups(alphas, kind, dst):
                allowed = _mask(names, eligible_ops)
                if not allowed:
                    continue
                best = min(allowed, key=lambda i: (-probs[i], i))
                candidates.append((-probs[best], src, names[best]))
            if k > len(candidates):
                raise ArchitectureError(
                    f"k={k} exceeds the {len(candidates)} candidate edges of {kind} node n_{dst}"
                )
            candidates.sort(key=lambda c: (c[0], c[1]))
            edges.extend((dst, src, op) for _, src, op in candidates[:k])
        cells[kind] = _sort_edges(edges, alphas, kind)
    return _genotype(cells, alphas.n_nodes, "darts", **meta)


def _pooled_topk(alphas: "AlphaTable", kind: str, dst: int, count: int, eligible_ops) -> List[Edge]:
    pairs: List[Tuple[int, int, str]] = []
    logits: List[float] = []
    for src, _, raw, names in _node_groups(alphas, kind, dst):
        for i in _mask(names, eligible_ops):
            pairs.append((src, i, names[i]))
            logits.append(raw[i])
    if count > len(pairs):
        raise ArchitectureError(
            f"Selection count {count} exceeds the {len(pairs)} eligible pairs of {kind} node n_{dst}"
        )
    probs = torch.softmax(torch.tensor(logits, dtype=torch.float64), dim=-1).tolist()
    order = sorted(range(len(pairs)), key=lambda p: (-probs[p], pairs[p][0], pairs[p][1]))
    return [(dst, pairs[p][0], pairs[p][2]) for p in order[:count]]


def discretize_idarts(
    alphas: "AlphaTable",
    k: int = 2,
    eligible_ops: Optional[Collection[str]] = None,
    **meta,
) -> Genotype:
    cells = {
        kind: _sort_edges(
            [e for dst in range(alphas.n_nodes) for e in _pooled_topk(alphas, kind, dst, k, eligible_ops)],
            alphas,
            kind,
        )
        for kind in CELL_KINDS
    }
    return _genotype(cells, alphas.n_nodes, "idarts", **meta)


def xdarts_count(dst: int, count_cell_inputs: bool = True) -> int:
    if count_cell_inputs:
        return dst + 2
    return max(dst, 1)


def discretize_xdarts(
    alphas: "AlphaTable",
    eligible_ops: Optional[Collection[str]] = None,
    count_cell_inputs: bool = True,
    **meta,
) -> Genotype:
    cells = {
        kind: _sort_edges(
            [
                e
                for dst in range(alphas.n_nodes)
                for e in _pooled_topk(alphas, kind, dst, xdarts_count(dst, count_cell_inputs), eligible_ops)
            ],
            alphas,
            kind,
        )
        for kind in CELL_KINDS
    }
    return _genotype(cells, alphas.n_nodes, "xdarts", **meta)


def discretize(
    alphas: "AlphaTable",
    kind: DiscretizerKind,
    eligible_ops: Optional[Collection[str]] = None,
    **meta,
) -> Genotype:
    if kind.kind == "darts":
        return discretize_darts(alphas, kind.k, eligible_ops, **meta)
    if kind.kind == "idarts":
        return discretize_idarts(alphas, kind.k, eligible_ops, **meta)
    return discretize_xdarts(alphas, eligible_ops, kind.count_cell_inputs, **meta)


def apply_zero_config(genotype: Genotype, config: "ZeroConfig | str", target_phase: str) -> Genotype:
    """Substitute the special slot for the evaluation or retrain phase."""
    config = get_zero_config(config)
    if target_phase not in ("evaluation", "retrain"):
        raise ConfigError(f"apply_zero_config targets evaluation or retrain, not {target_phase}")
    specials = [op for op in genotype.op_names() if op in SPECIAL_OPS]
    if config.search_slot != RANDOM_OP:
        if specials:
            raise ArchitectureError(
                f"{config.id} genotype contains special ops {sorted(set(specials))}; masking failed upstream"
            )
        return genotype
    slot = config.slot(target_phase)
    if slot == RANDOM_OP:
        return genotype
    logger.debug("%s: rewriting %d random edge(s) to %s for %s", config.id, specials.count(RANDOM_OP), slot, target_phase)
    return genotype.replace_ops({RANDOM_OP: slot})


def random_genotype(
    op_names: Sequence[str],
    n_nodes: int = 4,
    rng_seed: int = 0,
    k: int = 2,
    **meta,
) -> Genotype:
    """DARTS-shaped genotype with uniformly drawn sources and ops, for baselines."""
    if not op_names:
        raise ConfigError("random_genotype needs a non-empty op list")
    rng = np.random.default_rng(rng_seed)
    names = list(op_names)
    cells: Dict[str, List[Edge]] = {}
    for kind in CELL_KINDS:
        edges: List[Edge] = []
        for dst in range(n_nodes):
            if k > dst + 2:
                raise ArchitectureError(f"k={k} exceeds the {dst + 2} sources of node n_{dst}")
            for src in sorted(int(s) for s in rng.choice(dst + 2, size=k, replace=False)):
                edges.append((dst, src, names[int(rng.integers(len(names)))]))
        cells[kind] = edges
    return Genotype(
        normal=tuple(cells["normal"]),
        reduce=tuple(cells["reduce"]),
        concat=tuple(range(n_nodes)),
        discretizer="random",
        space_id=str(meta.get("space_id", "3")),
        zero_config=get_zero_config(meta.get("zero_config", "V1")).id,
    )
