"""Tournament over randomly drawn per-edge op pools, pruned by alpha and merged pairwise.

Tiers are numbered from the leaves (tier T, 2^(T-1) runs) to the root (tier 1,
one run). After each non-root tier every run keeps the top half of each pool,
and runs (2r, 2r+1) merge into run r of the next tier.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .cells import AlphaTable
from .config import TournamentConfig
from .datasets import ArrayDataset
from .errors import ArchitectureError, ConfigError, DataError, TournamentBudgetExhausted
from .genotypes import EdgeGroupKey, Genotype, edge_group_keys
from .operations import OpSpec, SPACES
from .runs import RunRecord
from .search import run_search
from .stats import genotype_stats

logger = logging.getLogger(__name__)

STATE_FILE = "tournament.json"

Pools = Dict[EdgeGroupKey, List[str]]


def _key_str(key: EdgeGroupKey) -> str:
    return f"{key[0]}:{key[1]}:{key[2]}"


def _key_parse(text: str) -> EdgeGroupKey:
    kind, dst, src = text.split(":")
    return kind, int(dst), int(src)


def pools_to_json(pools: Pools) -> Dict[str, List[str]]:
    return {_key_str(key): list(ops) for key, ops in pools.items()}


def pools_from_json(data: Dict[str, List[str]]) -> Pools:
    return {_key_parse(key): list(ops) for key, ops in data.items()}


def spawn_leaf_pools(
    master_space: Sequence[Union[OpSpec, str]],
    o_max: int,
    rng_seed: int = 0,
    n_runs: int = 1,
    n_nodes: int = 4,
) -> List[Pools]:
    """Independent uniform ``o_max``-subsets per leaf run and edge group, in master order."""
    names = [s.name if isinstance(s, OpSpec) else str(s) for s in master_space]
    if len(set(names)) != len(names):
        raise ConfigError("Master space repeats an op name")
    if o_max > len(names):
        raise ConfigError(f"o_max={o_max} exceeds the {len(names)} ops of the master space")
    if o_max < 1:
        raise ConfigError("o_max must be at least 1")
    rng = np.random.default_rng(rng_seed)
    leaves = []
    for _ in range(n_runs):
        pools: Pools = {}
        for key in edge_group_keys(n_nodes):
            chosen = np.sort(rng.choice(len(names), size=o_max, replace=False))
            pools[key] = [names[i] for i in chosen]
        leaves.append(pools)
    return leaves


def prune_top_half(alphas: AlphaTable, pools: Pools) -> Pools:
    """Per edge group keep the ceil(n/2) ops with the largest softmax weight; ties to the lower index."""
    survivors: Pools = {}
    for key, ops in pools.items():
        names = alphas.names(*key)
        if list(names) != list(ops):
            raise ArchitectureError(f"Alpha group {key} has {len(names)} entries for a pool of {len(ops)}")
        weights = alphas.weights(*key).tolist()
        keep = math.ceil(len(ops) / 2)
        ranked = sorted(range(len(ops)), key=lambda i: (-weights[i], i))[:keep]
        survivors[key] = [ops[i] for i in sorted(ranked)]
    return survivors


def merge_pools(left: Pools, right: Pools) -> Pools:
    if set(left) != set(right):
        raise ArchitectureError("Cannot merge pools over different edge groups")
    merged: Pools = {}
    for key, ops in left.items():
        union = list(ops)
        union.extend(op for op in right[key] if op not in union)
        merged[key] = union
    return merged


# =============================================================================
# STATE
# =============================================================================


@dataclass
class RunSlot:
    tier: int
    run: int
    seed: int
    pools: Optional[Pools] = None
    survivors: Optional[Pools] = None
    run_dir: Optional[str] = None
    genotype: Optional[Dict] = None
    stats: Optional[Dict] = None

    @property
    def complete(self) -> bool:
        return self.genotype is not None

    def to_dict(self) -> Dict:
        return {
            "tier": self.tier,
            "run": self.run,
            "seed": self.seed,
            "pools": pools_to_json(self.pools) if self.pools is not None else None,
            "survivors": pools_to_json(self.survivors) if self.survivors is not None else None,
            "run_dir": self.run_dir,
            "genotype": self.genotype,
            "stats": self.stats,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "RunSlot":
        return cls(
            tier=int(data["tier"]),
            run=int(data["run"]),
            seed=int(data["seed"]),
            pools=pools_from_json(data["pools"]) if data.get("pools") is not None else None,
            survivors=pools_from_json(data["survivors"]) if data.get("survivors") is not None else None,
            run_dir=data.get("run_dir"),
            genotype=data.get("genotype"),
            stats=data.get("stats"),
        )


@dataclass
class TierState:
    tier: int
    runs: List[RunSlot] = field(default_factory=list)

    @property
    def complete(self) -> bool:
        return all(slot.complete for slot in self.runs)


def runs_in_tier(tier: int) -> int:
    return 2 ** (tier - 1)


def build_bracket(config: TournamentConfig) -> List[TierState]:
    """Empty bracket, leaves first; run seeds come from one SeedSequence in bracket order."""
    total = sum(runs_in_tier(t) for t in range(1, config.tiers + 1))
    seeds = [int(child.generate_state(1)[0]) for child in np.random.SeedSequence(config.seed).spawn(total)]
    tiers, i = [], 0
    for tier in range(config.tiers, 0, -1):
        slots = []
        for run in range(runs_in_tier(tier)):
            slots.append(RunSlot(tier, run, seeds[i]))
            i += 1
        tiers.append(TierState(tier, slots))
    return tiers


def save_state(path: Path, config: TournamentConfig, tiers: List[TierState], final: Optional[Genotype]) -> None:
    document = {
        "config": config.to_dict(),
        "tiers": [{"tier": t.tier, "runs": [slot.to_dict() for slot in t.runs]} for t in tiers],
        "final_genotype": final.to_dict() if final is not None else None,
    }
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(document, indent=2, sort_keys=True), encoding="utf-8")
    tmp.replace(path)


def load_state(path: Path) -> Tuple[Dict, List[TierState]]:
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
        tiers = [TierState(int(t["tier"]), [RunSlot.from_dict(r) for r in t["runs"]]) for t in document["tiers"]]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"Tournament state {path} is unreadable: {exc}") from exc
    return document["config"], tiers


# =============================================================================
# DRIVER
# =============================================================================


def _bracket_fields(document: Dict) -> Dict:
    """Config fields that shape the bracket; the run budget may change between resumes."""
    return {key: value for key, value in document.items() if key != "run_budget"}


def run_tournament(
    config: TournamentConfig,
    out_dir: Path,
    data: Optional[Tuple[ArrayDataset, ArrayDataset]] = None,
) -> Tuple[Genotype, List[TierState]]:
    """Run the bracket leaf-to-root, resuming from ``tournament.json`` when present."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    state_path = out_dir / STATE_FILE
    if state_path.exists():
        saved_config, tiers = load_state(state_path)
        if _bracket_fields(saved_config) != _bracket_fields(config.to_dict()):
            raise ConfigError(f"{state_path} was written for a different tournament configuration")
        logger.info("Resuming tournament from %s", state_path)
    else:
        tiers = build_bracket(config)

    n_nodes = config.search.template.n_nodes
    leaf = tiers[0]
    if any(slot.pools is None for slot in leaf.runs):
        leaves = spawn_leaf_pools(SPACES[config.master_space], config.o_max, config.seed, len(leaf.runs), n_nodes)
        for slot, pools in zip(leaf.runs, leaves):
            slot.pools = pools
    save_state(state_path, config, tiers, None)

    executed = 0
    for depth, tier in enumerate(tiers):
        if depth > 0:
            below = tiers[depth - 1]
            for slot in tier.runs:
                if slot.pools is None:
                    left, right = below.runs[2 * slot.run], below.runs[2 * slot.run + 1]
                    slot.pools = merge_pools(left.survivors, right.survivors)
        for slot in tier.runs:
            if slot.complete:
                continue
            if config.run_budget is not None and executed >= config.run_budget:
                save_state(state_path, config, tiers, None)
                raise TournamentBudgetExhausted(
                    f"Run budget of {config.run_budget} spent; resume from {state_path}"
                )
            _execute(config, slot, out_dir, data, is_root=tier.tier == 1)
            executed += 1
            save_state(state_path, config, tiers, None)
        logger.info("Tier %d complete (%d runs)", tier.tier, len(tier.runs))

    root = tiers[-1].runs[0]
    final = Genotype.from_dict(root.genotype)
    save_state(state_path, config, tiers, final)
    final.save(out_dir / "genotype_final.json")
    return final, tiers


def _execute(
    config: TournamentConfig,
    slot: RunSlot,
    out_dir: Path,
    data: Optional[Tuple[ArrayDataset, ArrayDataset]],
    is_root: bool,
) -> None:
    run_config = config.run_search_config(slot.seed)
    run_dir = out_dir / f"tier{slot.tier}_run{slot.run}"
    logger.info("Tier %d run %d: seed %d, pool sizes %s", slot.tier, slot.run, slot.seed, sorted({len(p) for p in slot.pools.values()}))
    genotype, record = run_search(run_config, run_dir, pools=slot.pools, data=data)
    alphas = AlphaTable.from_dict(RunRecord(run_dir).read_json("alphas.json"))
    slot.run_dir = str(record.path)
    slot.survivors = None if is_root else prune_top_half(alphas, slot.pools)
    slot.stats = genotype_stats(genotype, run_config.template).to_dict()
    slot.genotype = genotype.to_dict()
