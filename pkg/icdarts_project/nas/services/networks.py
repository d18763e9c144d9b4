"""Search and evaluation networks assembled from cells per a template."""
from __future__ import annotations

import json
import logging
from abc import ABCMeta, abstractmethod
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .cells import AlphaTable, ContinuousCell, DiscreteCell
from .discretizer import ZeroConfig, get_zero_config
from .errors import ArchitectureError, ConfigError, DataError
from .genotypes import Genotype
from .operations import CATALOG, Pool, ReLUConvBN, resolve_space, seeded_build

logger = logging.getLogger(__name__)

STEM_KINDS = ("conv3_bn", "identity", "conv1_bn", "concat_inputs")
REDUCE_KINDS = ("searched_cell", "avg_pool", "max_pool", "conv1_s2")
MIN_AUX_SPATIAL = 4
CELL_SEED_STRIDE = 1000

CHECKPOINT_MANIFEST = "manifest.json"
CHECKPOINT_WEIGHTS = "weights.bin"


@dataclass(frozen=True)
class NetworkTemplate:
    n_cells_search: int = 8
    n_cells_eval: int = 8
    n_cells_retrain: int = 10
    init_channels: int = 16
    n_nodes: int = 4
    reduction_positions: Optional[Tuple[int, ...]] = None
    stem_kind: str = "conv3_bn"
    reduce_kind: str = "searched_cell"
    aux_heads: bool = True
    aux_weight: float = 0.4
    aux_channels: int = 64
    drop_path: float = 0.3
    stem_multiplier: int = 3
    exclude_ops: Tuple[str, ...] = ()
    pool_bn: bool = True
    random_op_high: float = 1.0
    in_channels: int = 3
    n_classes: int = 10

    def __post_init__(self) -> None:
        for name in ("n_cells_search", "n_cells_eval", "n_cells_retrain", "init_channels", "n_nodes", "aux_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.stem_kind not in STEM_KINDS:
            raise ConfigError(f"Unknown stem_kind: {self.stem_kind}")
        if self.reduce_kind not in REDUCE_KINDS:
            raise ConfigError(f"Unknown reduce_kind: {self.reduce_kind}")
        if not 0.0 <= self.drop_path < 1.0:
            raise ConfigError("drop_path must be in [0, 1)")
        if self.aux_weight < 0:
            raise ConfigError("aux_weight must be nonnegative")
        unknown = set(self.exclude_ops) - set(CATALOG)
        if unknown:
            raise ConfigError(f"Cannot exclude unknown operations: {sorted(unknown)}")
        if self.reduction_positions is not None:
            object.__setattr__(self, "reduction_positions", tuple(sorted(set(int(p) for p in self.reduction_positions))))
        object.__setattr__(self, "exclude_ops", tuple(self.exclude_ops))

    def reductions(self, n_cells: int) -> FrozenSet[int]:
        if self.reduction_positions is not None:
            return frozenset(p for p in self.reduction_positions if 0 <= p < n_cells)
        return frozenset({n_cells // 3, 2 * n_cells // 3})

    def n_cells(self, phase: str) -> int:
        if phase == "search":
            return self.n_cells_search
        if phase == "evaluation":
            return self.n_cells_eval
        if phase == "retrain":
            return self.n_cells_retrain
        raise ConfigError(f"Unknown phase: {phase}")

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["reduction_positions"] = list(self.reduction_positions) if self.reduction_positions is not None else None
        data["exclude_ops"] = list(self.exclude_ops)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "NetworkTemplate":
        data = dict(data)
        if data.get("reduction_positions") is not None:
            data["reduction_positions"] = tuple(data["reduction_positions"])
        data["exclude_ops"] = tuple(data.get("exclude_ops", ()))
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(f"Invalid network template: {exc}") from exc


# =============================================================================
# BUILDING BLOCKS
# =============================================================================


class ConcatStem(nn.Module):
    def __init__(self, copies: int):
        super().__init__()
        self.copies = copies

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.cat([x] * self.copies, dim=1)


def stem_channels(template: NetworkTemplate) -> int:
    if template.stem_kind == "identity":
        return template.in_channels
    if template.stem_kind == "concat_inputs":
        return template.in_channels * template.stem_multiplier
    return template.stem_multiplier * template.init_channels


def _stem(template: NetworkTemplate) -> nn.Module:
    C_stem = stem_channels(template)
    if template.stem_kind == "conv3_bn":
        return nn.Sequential(nn.Conv2d(template.in_channels, C_stem, 3, padding=1, bias=False), nn.BatchNorm2d(C_stem))
    if template.stem_kind == "conv1_bn":
        return nn.Sequential(nn.Conv2d(template.in_channels, C_stem, 1, bias=False), nn.BatchNorm2d(C_stem))
    if template.stem_kind == "identity":
        return nn.Identity()
    return ConcatStem(template.stem_multiplier)


class FixedReduction(nn.Module):
    """Non-searched reduction layer; halves the spatial size of ``c_{k-1}``."""

    def __init__(self, kind: str, C_p: int, C_out: int):
        super().__init__()
        self.kind = kind
        if kind == "conv1_s2":
            self.body = nn.Sequential(nn.Conv2d(C_p, C_out, 1, stride=2, bias=False), nn.BatchNorm2d(C_out))
        else:
            pool = Pool("avg" if kind == "avg_pool" else "max", 3, 2, C_p)
            self.body = nn.Sequential(pool, ReLUConvBN(C_p, C_out, relu=False))

    def forward(self, c_km2: torch.Tensor, c_km1: torch.Tensor, *args, **kwargs) -> torch.Tensor:
        return self.body(c_km1)


class AuxiliaryHead(nn.Module):
    """Combines the final normal cell with both reduction outputs."""

    def __init__(self, source_channels: Sequence[int], width: int, n_classes: int):
        super().__init__()
        self.adapters = nn.ModuleList(ReLUConvBN(C, width, 1, 1) for C in source_channels)
        self.classifier = nn.Linear(width * len(source_channels), n_classes)

    def forward(self, features: Sequence[torch.Tensor]) -> torch.Tensor:
        pooled = [F.adaptive_avg_pool2d(adapter(f), 1).flatten(1) for adapter, f in zip(self.adapters, features)]
        return self.classifier(torch.cat(pooled, dim=1))


class Network(nn.Module, metaclass=ABCMeta):
    """Stem, a stack of cells with reductions, optional aux head, pooled linear classifier.

    Subclasses supply the cells through ``make_cell`` and how they are called through ``run_cell``.
    """

    def __init__(self, template: NetworkTemplate, n_cells: int, rng_seed: int = 0):
        super().__init__()
        self.template = template
        self.n_cells = n_cells
        self.rng_seed = int(rng_seed)
        self.reduction_indices = template.reductions(n_cells)
        self.generator = torch.Generator().manual_seed(self.rng_seed)
        self.stem = seeded_build(lambda: _stem(template), self.rng_seed)
        C_stem = stem_channels(template)
        self.cells = nn.ModuleList()
        self.aux_sources: List[int] = []

        C_pp, C_p, C_curr = C_stem, C_stem, template.init_channels
        reduction_prev = False
        widths: List[int] = []
        for i in range(n_cells):
            reduction = i in self.reduction_indices
            if reduction:
                C_curr *= 2
            seed = self.rng_seed + (i + 1) * CELL_SEED_STRIDE
            if reduction and template.reduce_kind != "searched_cell":
                C_out = template.n_nodes * C_curr
                cell = seeded_build(lambda: FixedReduction(template.reduce_kind, C_p, C_out), seed)
            else:
                cell = self.make_cell("reduce" if reduction else "normal", C_pp, C_p, C_curr, reduction_prev, seed)
            self.cells.append(cell)
            C_pp, C_p = C_p, self._out_channels(cell, C_curr)
            widths.append(C_p)
            reduction_prev = reduction

        normal_indices = [i for i in range(n_cells) if i not in self.reduction_indices]
        self.aux_sources = sorted(self.reduction_indices | ({normal_indices[-1]} if normal_indices else set()))
        self.aux_head = None
        if template.aux_heads and self.aux_sources:
            self.aux_head = seeded_build(
                lambda: AuxiliaryHead([widths[i] for i in self.aux_sources], template.aux_channels, template.n_classes),
                self.rng_seed + 7,
            )
        self.classifier = seeded_build(lambda: nn.Linear(C_p, template.n_classes), self.rng_seed + 11)

    def _out_channels(self, cell: nn.Module, C_curr: int) -> int:
        if isinstance(cell, FixedReduction):
            return self.template.n_nodes * C_curr
        return cell.out_channels

    @abstractmethod
    def make_cell(self, kind: str, C_pp: int, C_p: int, C: int, reduction_prev: bool, seed: int) -> nn.Module:
        raise NotImplementedError

    @abstractmethod
    def run_cell(self, cell: nn.Module, s0: torch.Tensor, s1: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
        s0 = s1 = self.stem(x)
        features: Dict[int, torch.Tensor] = {}
        for i, cell in enumerate(self.cells):
            s0, s1 = s1, self.run_cell(cell, s0, s1)
            if i in self.aux_sources:
                features[i] = s1
        logits = self.classifier(F.adaptive_avg_pool2d(s1, 1).flatten(1))
        aux_logits = None
        if self.aux_head is not None:
            if s1.shape[-1] < MIN_AUX_SPATIAL or s1.shape[-2] < MIN_AUX_SPATIAL:
                raise ArchitectureError(
                    f"Final feature map {tuple(s1.shape[-2:])} is below the {MIN_AUX_SPATIAL}x{MIN_AUX_SPATIAL} auxiliary minimum"
                )
            aux_logits = self.aux_head([features[i] for i in self.aux_sources])
        return logits, aux_logits


class SearchNetwork(Network):
    """Continuous supernet; every cell of a kind reads the shared alpha table."""

    def __init__(self, template: NetworkTemplate, alphas: AlphaTable, rng_seed: int = 0):
        self.alphas = alphas
        super().__init__(template, template.n_cells_search, rng_seed)

    def make_cell(self, kind, C_pp, C_p, C, reduction_prev, seed):
        return ContinuousCell(
            kind,
            self.alphas,
            C_pp,
            C_p,
            C,
            reduction_prev,
            seed,
            generator=self.generator,
            pool_bn=self.template.pool_bn,
            random_high=self.template.random_op_high,
        )

    def run_cell(self, cell, s0, s1):
        return cell(s0, s1, self.alphas)


class EvalNetwork(Network):
    """Discrete network built from a genotype; drop-path applies in training mode."""

    def __init__(self, genotype: Genotype, template: NetworkTemplate, n_cells: int, rng_seed: int = 0):
        self.genotype = genotype
        self.drop_path_prob = 0.0
        super().__init__(template, n_cells, rng_seed)
        self.drop_generator = torch.Generator().manual_seed(self.rng_seed + 13)
        for cell in self.cells:
            if isinstance(cell, DiscreteCell):
                cell.drop_generator = self.drop_generator

    def make_cell(self, kind, C_pp, C_p, C, reduction_prev, seed):
        return DiscreteCell(
            self.genotype,
            kind,
            C_pp,
            C_p,
            C,
            reduction_prev,
            seed,
            generator=self.generator,
            pool_bn=self.template.pool_bn,
            random_high=self.template.random_op_high,
        )

    def run_cell(self, cell, s0, s1):
        if isinstance(cell, DiscreteCell):
            return cell(s0, s1, self.drop_path_prob)
        return cell(s0, s1)


# =============================================================================
# BUILDERS
# =============================================================================


def build_search_network(
    template: NetworkTemplate,
    space_id,
    zero_config: "ZeroConfig | str",
    alphas: AlphaTable,
    rng_seed: int = 0,
) -> SearchNetwork:
    """Supernet over the search-phase space; per-group pools must come from it."""
    allowed = {spec.name for spec in resolve_space(space_id, zero_config, "search", template.exclude_ops)}
    if alphas.n_nodes != template.n_nodes:
        raise ArchitectureError(f"Alpha table has {alphas.n_nodes} nodes, template wants {template.n_nodes}")
    for key in alphas.keys():
        names = alphas.names(*key)
        stray = [name for name in names if name not in allowed]
        if stray:
            raise ArchitectureError(
                f"Alpha group {key} has {len(names)} entries including {stray}, outside search space {space_id}"
            )
    net = SearchNetwork(template, alphas, rng_seed)
    logger.debug("Built search network: %d cells, %d weights", net.n_cells, count_parameters(net))
    return net


def build_eval_network(
    genotype: Genotype,
    template: NetworkTemplate,
    zero_config: "ZeroConfig | str",
    phase: str = "evaluation",
    rng_seed: int = 0,
    n_cells: Optional[int] = None,
) -> EvalNetwork:
    config = get_zero_config(zero_config)
    allowed = {spec.name for spec in resolve_space(genotype.space_id, config, phase, template.exclude_ops)}
    stray = sorted({op for op in genotype.op_names() if op not in allowed})
    if stray:
        raise ArchitectureError(f"Genotype uses {stray}, absent from the {phase} space of {genotype.space_id}/{config.id}")
    if genotype.n_nodes != template.n_nodes:
        raise ArchitectureError(f"Genotype has {genotype.n_nodes} nodes, template wants {template.n_nodes}")
    net = EvalNetwork(genotype, template, n_cells or template.n_cells(phase), rng_seed)
    logger.debug("Built %s network: %d cells, %d weights", phase, net.n_cells, count_parameters(net))
    return net


def forward_with_aux(net: Network, batch: torch.Tensor) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
    if batch.dim() != 4:
        raise ArchitectureError(f"Expected a (B, C, H, W) batch, got shape {tuple(batch.shape)}")
    return net(batch)


def classification_loss(
    logits: torch.Tensor,
    aux_logits: Optional[torch.Tensor],
    targets: torch.Tensor,
    aux_weight: float,
) -> torch.Tensor:
    loss = F.cross_entropy(logits, targets)
    if aux_logits is not None and aux_weight > 0:
        loss = loss + aux_weight * F.cross_entropy(aux_logits, targets)
    return loss


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def inherit_weights(target: nn.Module, source: nn.Module) -> int:
    """Copy name- and shape-compatible tensors from ``source``; returns how many."""
    source_state = source.state_dict()
    target_state = target.state_dict()
    copied = 0
    for name, tensor in target_state.items():
        other = source_state.get(name)
        if other is not None and other.shape == tensor.shape and other.dtype == tensor.dtype:
            tensor.copy_(other)
            copied += 1
    logger.debug("Inherited %d/%d tensors", copied, len(target_state))
    return copied


# =============================================================================
# CHECKPOINTS
# =============================================================================


def save_checkpoint(net: nn.Module, directory: Path, manifest: Dict) -> Path:
    """Write ``manifest.json`` plus a little-endian float32 blob of every floating tensor."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = []
    offset = 0
    with open(directory / CHECKPOINT_WEIGHTS, "wb") as fh:
        for name, tensor in net.state_dict().items():
            if not tensor.is_floating_point():
                continue
            blob = tensor.detach().cpu().numpy().astype("<f4", copy=False).tobytes(order="C")
            fh.write(blob)
            index.append({"name": name, "shape": list(tensor.shape), "offset": offset, "count": tensor.numel()})
            offset += tensor.numel()
    document = dict(manifest)
    document["index"] = index
    (directory / CHECKPOINT_MANIFEST).write_text(json.dumps(document, indent=2, sort_keys=True), encoding="utf-8")
    return directory


def load_checkpoint(net: nn.Module, directory: Path) -> Dict:
    directory = Path(directory)
    manifest_path = directory / CHECKPOINT_MANIFEST
    weights_path = directory / CHECKPOINT_WEIGHTS
    if not manifest_path.exists() or not weights_path.exists():
        raise DataError(f"Checkpoint incomplete in {directory}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    blob = np.fromfile(weights_path, dtype="<f4")
    state = net.state_dict()
    for entry in manifest["index"]:
        name = entry["name"]
        if name not in state:
            raise DataError(f"Checkpoint tensor {name} does not exist in the network")
        start, count = entry["offset"], entry["count"]
        if start + count > blob.size:
            raise DataError(f"Checkpoint blob truncated at {name}")
        values = torch.from_numpy(blob[start : start + count].copy()).reshape(entry["shape"])
        if values.shape != state[name].shape:
            raise DataError(f"Checkpoint tensor {name} has shape {tuple(values.shape)}, network wants {tuple(state[name].shape)}")
        state[name].copy_(values.to(state[name].dtype))
    return manifest
