"""Discretized cell descriptions and their JSON form.

Source indices inside a cell: ``0`` is c_{k-2}, ``1`` is c_{k-1} and ``2 + i``
is intermediate node ``n_i``. Destinations are intermediate node indices.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Tuple

from .errors import ArchitectureError, DataError

SCHEMA_VERSION = 1

ZERO_OP = "zero"
RANDOM_OP = "random"
SPECIAL_OPS = frozenset({ZERO_OP, RANDOM_OP})

CELL_KINDS = ("normal", "reduce")

Edge = Tuple[int, int, str]
EdgeGroupKey = Tuple[str, int, int]


def edge_groups(n_nodes: int) -> List[Tuple[int, int]]:
    """(dst, src) pairs of one cell in evaluation order."""
    return [(dst, src) for dst in range(n_nodes) for src in range(dst + 2)]


def edge_group_keys(n_nodes: int) -> List[EdgeGroupKey]:
    return [(kind, dst, src) for kind in CELL_KINDS for dst, src in edge_groups(n_nodes)]


def source_label(src: int) -> str:
    if src == 0:
        return "c_{k-2}"
    if src == 1:
        return "c_{k-1}"
    return f"n_{src - 2}"


@dataclass(frozen=True)
class Genotype:
    normal: Tuple[Edge, ...]
    reduce: Tuple[Edge, ...]
    concat: Tuple[int, ...]
    space_id: str = "3"
    zero_config: str = "V1"
    discretizer: str = "darts"
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self) -> None:
        object.__setattr__(self, "normal", tuple(_edge(e) for e in self.normal))
        object.__setattr__(self, "reduce", tuple(_edge(e) for e in self.reduce))
        object.__setattr__(self, "concat", tuple(sorted(int(n) for n in self.concat)))
        object.__setattr__(self, "space_id", str(self.space_id))
        for kind in CELL_KINDS:
            for dst, src, op in self.cell(kind):
                if dst < 0 or src < 0 or src >= dst + 2:
                    raise ArchitectureError(
                        f"{kind} edge ({dst}, {src}, {op}) does not respect topological order"
                    )

    @property
    def n_nodes(self) -> int:
        dsts = [dst for dst, _, _ in self.normal + self.reduce]
        return max(dsts + list(self.concat)) + 1 if dsts or self.concat else 0

    def cell(self, kind: str) -> Tuple[Edge, ...]:
        if kind not in CELL_KINDS:
            raise ArchitectureError(f"Unknown cell kind: {kind}")
        return self.normal if kind == "normal" else self.reduce

    def op_names(self) -> List[str]:
        return [op for _, _, op in self.normal + self.reduce]

    def incoming(self, kind: str) -> Dict[int, List[Tuple[int, str]]]:
        nodes: Dict[int, List[Tuple[int, str]]] = {}
        for dst, src, op in self.cell(kind):
            nodes.setdefault(dst, []).append((src, op))
        return nodes

    def replace_ops(self, mapping: Dict[str, str]) -> "Genotype":
        def swap(edges: Iterable[Edge]) -> Tuple[Edge, ...]:
            return tuple((dst, src, mapping.get(op, op)) for dst, src, op in edges)

        return replace(self, normal=swap(self.normal), reduce=swap(self.reduce))

    # -------------------- Serialization --------------------
    def to_dict(self) -> Dict:
        return {
            "schema_version": self.schema_version,
            "normal": [list(e) for e in self.normal],
            "reduce": [list(e) for e in self.reduce],
            "concat": list(self.concat),
            "space_id": self.space_id,
            "zero_config": self.zero_config,
            "discretizer": self.discretizer,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: Dict) -> "Genotype":
        version = data.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise DataError(f"Unsupported genotype schema_version: {version}")
        try:
            return cls(
                normal=tuple(tuple(e) for e in data["normal"]),
                reduce=tuple(tuple(e) for e in data["reduce"]),
                concat=tuple(data["concat"]),
                space_id=str(data["space_id"]),
                zero_config=data["zero_config"],
                discretizer=data["discretizer"],
                schema_version=version,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"Malformed genotype document: {exc}") from exc

    @classmethod
    def from_json(cls, text: str) -> "Genotype":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise DataError(f"Genotype is not valid JSON: {exc}") from exc

    def save(self, path: Path) -> Path:
        path = Path(path)
        path.write_text(self.to_json() + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: Path) -> "Genotype":
        path = Path(path)
        if not path.exists():
            raise DataError(f"Genotype file not found: {path}")
        return cls.from_json(path.read_text(encoding="utf-8"))


def _edge(edge) -> Edge:
    dst, src, op = edge
    return int(dst), int(src), str(op)


@dataclass
class GenotypeHistory:
    """Append-only record of the genotypes a search produced."""

    entries: List[Tuple[int, Genotype]] = field(default_factory=list)

    def append(self, step: int, genotype: Genotype) -> None:
        if self.entries and step < self.entries[-1][0]:
            raise ArchitectureError("Genotype history is append-only")
        self.entries.append((step, genotype))

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def latest(self) -> Genotype | None:
        return self.entries[-1][1] if self.entries else None
