"""Search cells (softmax-mixed edges), discrete cells and the alpha table."""
from __future__ import annotations

import hashlib
import logging
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn

from .errors import ArchitectureError, DataError
from .genotypes import CELL_KINDS, EdgeGroupKey, Genotype, edge_group_keys, edge_groups
from .operations import FactorizedReduce, ReLUConvBN, get_spec, instantiate, seeded_build

logger = logging.getLogger(__name__)

ALPHA_INIT_STD = 1e-3
PREPROCESS_SEED_OFFSET = 100_000


# =============================================================================
# ALPHA TABLE
# =============================================================================


class AlphaTable:
    """Architecture parameters: one trainable vector per (kind, dst, src) edge group.

    Groups may carry different op lists (tournament pools), so every vector is
    paired with the op names it weights.
    """

    def __init__(self, n_nodes: int, vectors: Mapping[EdgeGroupKey, torch.Tensor], names: Mapping[EdgeGroupKey, Sequence[str]]):
        expected = edge_group_keys(n_nodes)
        if set(vectors) != set(expected) or set(names) != set(expected):
            raise ArchitectureError(f"Alpha table for {n_nodes} nodes needs groups {expected}")
        self.n_nodes = n_nodes
        self._vectors: Dict[EdgeGroupKey, torch.Tensor] = {}
        self._names: Dict[EdgeGroupKey, Tuple[str, ...]] = {}
        for key in expected:
            vector, ops = vectors[key], tuple(names[key])
            if vector.dim() != 1 or vector.numel() != len(ops):
                raise ArchitectureError(f"Alpha group {key} has {vector.numel()} entries for {len(ops)} ops")
            if len(set(ops)) != len(ops):
                raise ArchitectureError(f"Alpha group {key} repeats an op name")
            self._vectors[key] = vector.detach().clone().requires_grad_(True)
            self._names[key] = ops

    def keys(self) -> List[EdgeGroupKey]:
        return edge_group_keys(self.n_nodes)

    def group(self, kind: str, dst: int, src: int) -> Tuple[torch.Tensor, Tuple[str, ...]]:
        key = (kind, dst, src)
        try:
            return self._vectors[key], self._names[key]
        except KeyError as exc:
            raise ArchitectureError(f"No alpha group {key}") from exc

    def names(self, kind: str, dst: int, src: int) -> Tuple[str, ...]:
        return self.group(kind, dst, src)[1]

    def parameters(self) -> List[torch.Tensor]:
        return [self._vectors[key] for key in self.keys()]

    def groups_per_kind(self) -> int:
        return len(edge_groups(self.n_nodes))

    @property
    def homogeneous(self) -> bool:
        return len(set(self._names.values())) == 1

    def weights(self, kind: str, dst: int, src: int) -> torch.Tensor:
        return torch.softmax(self._vectors[(kind, dst, src)].detach(), dim=-1)

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        for vector in self.parameters():
            digest.update(vector.detach().cpu().contiguous().numpy().tobytes())
        return digest.hexdigest()

    def to(self, dtype: torch.dtype) -> "AlphaTable":
        return AlphaTable(
            self.n_nodes,
            {key: vector.detach().to(dtype) for key, vector in self._vectors.items()},
            self._names,
        )

    def to_dict(self) -> Dict:
        groups = []
        for kind, dst, src in self.keys():
            vector, ops = self.group(kind, dst, src)
            groups.append({"kind": kind, "dst": dst, "src": src, "ops": list(ops), "alpha": vector.detach().tolist()})
        return {"n_nodes": self.n_nodes, "groups": groups}

    @classmethod
    def from_dict(cls, data: Dict) -> "AlphaTable":
        try:
            vectors, names = {}, {}
            for group in data["groups"]:
                key = (group["kind"], int(group["dst"]), int(group["src"]))
                vectors[key] = torch.tensor(group["alpha"], dtype=torch.float32)
                names[key] = group["ops"]
            return cls(int(data["n_nodes"]), vectors, names)
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"Malformed alpha document: {exc}") from exc


def init_alphas(
    n_nodes: int,
    ops: Union[int, Sequence[str]],
    rng_seed: int = 0,
    dtype: torch.dtype = torch.float32,
    pools: Optional[Mapping[EdgeGroupKey, Sequence[str]]] = None,
) -> AlphaTable:
    """Near-uniform alphas, N(0, 1e-3) per entry, seeded.

    ``ops`` is a shared op list (or a count, giving placeholder names); ``pools``
    overrides it per edge group.
    """
    if n_nodes < 1:
        raise ArchitectureError("n_nodes must be at least 1")
    shared = [f"op_{i}" for i in range(ops)] if isinstance(ops, int) else list(ops)
    generator = torch.Generator().manual_seed(int(rng_seed))
    vectors, names = {}, {}
    for key in edge_group_keys(n_nodes):
        group_ops = list(pools[key]) if pools is not None else shared
        if not group_ops:
            raise ArchitectureError(f"Edge group {key} has no candidate ops")
        noise = torch.randn(len(group_ops), generator=generator, dtype=torch.float64) * ALPHA_INIT_STD
        vectors[key] = noise.to(dtype)
        names[key] = group_ops
    return AlphaTable(n_nodes, vectors, names)


# =============================================================================
# MIXTURES
# =============================================================================


def edge_mixture(x: torch.Tensor, alpha_vec: torch.Tensor, ops: Sequence[nn.Module]) -> torch.Tensor:
    if alpha_vec.numel() != len(ops):
        raise ArchitectureError(f"{alpha_vec.numel()} alphas for {len(ops)} ops")
    weights = torch.softmax(alpha_vec, dim=-1).to(x.dtype)
    return sum(w * op(x) for w, op in zip(weights, ops))


def node_output(mixed_edge_outputs: Sequence[torch.Tensor]) -> torch.Tensor:
    if not mixed_edge_outputs:
        raise ArchitectureError("A node needs at least one incoming edge")
    shape = mixed_edge_outputs[0].shape
    for out in mixed_edge_outputs[1:]:
        if out.shape != shape:
            raise ArchitectureError(f"Edge outputs disagree on shape: {tuple(shape)} vs {tuple(out.shape)}")
    total = mixed_edge_outputs[0]
    for out in mixed_edge_outputs[1:]:
        total = total + out
    return total


def drop_path(x: torch.Tensor, drop_prob: float, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    if drop_prob <= 0.0:
        return x
    keep = 1.0 - drop_prob
    mask = torch.bernoulli(torch.full((x.shape[0], 1, 1, 1), keep, dtype=x.dtype, device=x.device), generator=generator)
    return x / keep * mask


def _preprocessors(C_pp: int, C_p: int, C: int, reduction_prev: bool, rng_seed: int) -> Tuple[nn.Module, nn.Module]:
    """Adapters from the two cell inputs to the cell width."""
    if reduction_prev:
        pre0 = seeded_build(lambda: FactorizedReduce(C_pp, C), rng_seed)
    else:
        pre0 = seeded_build(lambda: ReLUConvBN(C_pp, C, 1, 1), rng_seed)
    return pre0, seeded_build(lambda: ReLUConvBN(C_p, C, 1, 1), rng_seed + 1)


def _edge_key(dst: int, src: int) -> str:
    return f"{dst}_{src}"


# =============================================================================
# CELLS
# =============================================================================


class ContinuousCell(nn.Module):
    """A DAG of ``n_nodes`` nodes whose every edge mixes all candidate ops."""

    def __init__(
        self,
        kind: str,
        alphas: AlphaTable,
        C_pp: int,
        C_p: int,
        C: int,
        reduction_prev: bool = False,
        rng_seed: int = 0,
        *,
        generator: Optional[torch.Generator] = None,
        pool_bn: bool = True,
        random_high: float = 1.0,
        preprocess: bool = True,
    ):
        super().__init__()
        if kind not in CELL_KINDS:
            raise ArchitectureError(f"Unknown cell kind: {kind}")
        self.kind = kind
        self.n_nodes = alphas.n_nodes
        self.C_pp, self.C_p, self.C = C_pp, C_p, C
        if preprocess:
            self.pre0, self.pre1 = _preprocessors(C_pp, C_p, C, reduction_prev, int(rng_seed) + PREPROCESS_SEED_OFFSET)
        else:
            if reduction_prev or C_pp != C or C_p != C:
                raise ArchitectureError("Cells without preprocessing need matching widths and no preceding reduction")
            self.pre0, self.pre1 = nn.Identity(), nn.Identity()
        self.edges = nn.ModuleDict()
        seed = int(rng_seed)
        for dst, src in edge_groups(self.n_nodes):
            stride = 2 if kind == "reduce" and src < 2 else 1
            ops = nn.ModuleList()
            for name in alphas.names(kind, dst, src):
                ops.append(
                    instantiate(get_spec(name), C, C, stride, seed, generator=generator, pool_bn=pool_bn, random_high=random_high)
                )
                seed += 1
            self.edges[_edge_key(dst, src)] = ops

    @property
    def out_channels(self) -> int:
        return self.n_nodes * self.C

    def edge_ops(self, dst: int, src: int) -> nn.ModuleList:
        return self.edges[_edge_key(dst, src)]

    def forward(self, c_km2: torch.Tensor, c_km1: torch.Tensor, alphas: AlphaTable) -> torch.Tensor:
        return cell_forward(c_km2, c_km1, self, alphas)


def cell_forward(c_km2: torch.Tensor, c_km1: torch.Tensor, cell: ContinuousCell, alphas: AlphaTable) -> torch.Tensor:
    if c_km2.shape[1] != cell.C_pp or c_km1.shape[1] != cell.C_p:
        raise ArchitectureError(
            f"{cell.kind} cell expects ({cell.C_pp}, {cell.C_p}) input channels, got ({c_km2.shape[1]}, {c_km1.shape[1]})"
        )
    if alphas.n_nodes != cell.n_nodes:
        raise ArchitectureError(f"Alpha table has {alphas.n_nodes} nodes, cell has {cell.n_nodes}")
    states = [cell.pre0(c_km2), cell.pre1(c_km1)]
    for dst in range(cell.n_nodes):
        mixed = []
        for src in range(dst + 2):
            vector, names = alphas.group(cell.kind, dst, src)
            ops = cell.edge_ops(dst, src)
            if tuple(op.spec.name for op in ops) != names:
                raise ArchitectureError(f"{cell.kind} edge ({dst}, {src}) ops disagree with the alpha table")
            mixed.append(edge_mixture(states[src], vector, ops))
        states.append(node_output(mixed))
    return torch.cat(states[2:], dim=1)


class DiscreteCell(nn.Module):
    """One cell of a genotype: each kept edge runs a single op."""

    def __init__(
        self,
        genotype: Genotype,
        kind: str,
        C_pp: int,
        C_p: int,
        C: int,
        reduction_prev: bool = False,
        rng_seed: int = 0,
        *,
        generator: Optional[torch.Generator] = None,
        pool_bn: bool = True,
        random_high: float = 1.0,
        drop_generator: Optional[torch.Generator] = None,
    ):
        super().__init__()
        self.kind = kind
        self.n_nodes = genotype.n_nodes
        self.concat = genotype.concat
        self.C_pp, self.C_p, self.C = C_pp, C_p, C
        self.pre0, self.pre1 = _preprocessors(C_pp, C_p, C, reduction_prev, int(rng_seed) + PREPROCESS_SEED_OFFSET)
        self.drop_generator = drop_generator

        incoming = genotype.incoming(kind)
        needed = set(genotype.concat)
        for dst, src, _ in genotype.cell(kind):
            if src >= 2:
                needed.add(src - 2)
        missing = sorted(node for node in needed if node not in incoming)
        if missing:
            raise ArchitectureError(f"{kind} cell nodes {missing} are used but have no incoming edges")

        self.edges = nn.ModuleList()
        self._plan: List[Tuple[int, int]] = []
        seed = int(rng_seed)
        for dst, src, name in genotype.cell(kind):
            stride = 2 if kind == "reduce" and src < 2 else 1
            self.edges.append(
                instantiate(get_spec(name), C, C, stride, seed, generator=generator, pool_bn=pool_bn, random_high=random_high)
            )
            self._plan.append((dst, src))
            seed += 1

    @property
    def out_channels(self) -> int:
        return len(self.concat) * self.C

    def forward(self, c_km2: torch.Tensor, c_km1: torch.Tensor, drop_prob: float = 0.0) -> torch.Tensor:
        states: Dict[int, torch.Tensor] = {0: self.pre0(c_km2), 1: self.pre1(c_km1)}
        for dst in range(self.n_nodes):
            outs = []
            for (edge_dst, src), op in zip(self._plan, self.edges):
                if edge_dst != dst:
                    continue
                out = op(states[src])
                if self.training and drop_prob > 0 and op.spec.name != "identity":
                    out = drop_path(out, drop_prob, self.drop_generator)
                outs.append(out)
            if outs:
                states[dst + 2] = node_output(outs)
        return torch.cat([states[node + 2] for node in self.concat], dim=1)

