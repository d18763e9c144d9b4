"""Named template ablations and the search-then-retrain driver used by ablation and baseline runs."""
from __future__ import annotations

import logging
from dataclasses import replace
from pathlib import Path
from typing import Dict, Optional, Tuple

from .config import RetrainSchedule, SearchConfig
from .datasets import ArrayDataset, dataset_spec, load_dataset
from .discretizer import apply_zero_config, random_genotype
from .errors import ConfigError
from .genotypes import Genotype
from .networks import NetworkTemplate
from .operations import resolve_space
from .runs import RunRecord
from .search import LossConfig, data_root, run_search
from .training import Metrics, retrain_and_evaluate

logger = logging.getLogger(__name__)

TEMPLATE_ABLATIONS: Dict[str, Dict] = {
    "no_pooling": {"exclude_ops": ("max_pool_3", "max_pool_5", "avg_pool_3", "avg_pool_5")},
    "no_identity": {"exclude_ops": ("identity",)},
    "no_dil_conv": {"exclude_ops": ("dil_conv_3", "dil_conv_5")},
    "no_sep_conv": {"exclude_ops": ("sep_conv_3", "sep_conv_5")},
    "no_aux_heads": {"aux_heads": False},
    "stem_identity": {"stem_kind": "identity"},
    "stem_conv1_bn": {"stem_kind": "conv1_bn"},
    "stem_concat": {"stem_kind": "concat_inputs"},
    "reduce_avg_pool": {"reduce_kind": "avg_pool"},
    "reduce_max_pool": {"reduce_kind": "max_pool"},
    "reduce_conv1_s2": {"reduce_kind": "conv1_s2"},
}


def apply_template_ablation(template: NetworkTemplate, name: str) -> NetworkTemplate:
    try:
        overrides = dict(TEMPLATE_ABLATIONS[name])
    except KeyError as exc:
        raise ConfigError(f"Unknown template ablation: {name} (expected one of {', '.join(TEMPLATE_ABLATIONS)})") from exc
    if "exclude_ops" in overrides:
        overrides["exclude_ops"] = tuple(sorted(set(template.exclude_ops) | set(overrides["exclude_ops"])))
    return replace(template, **overrides)


def retrain_data(config: SearchConfig, data: Optional[Tuple[ArrayDataset, ArrayDataset]] = None):
    spec = dataset_spec(config.dataset, data_root(config), seed=config.seed)
    train, test = data if data is not None else load_dataset(spec)
    return spec, train, test


def retrain_genotype(
    genotype: Genotype,
    config: SearchConfig,
    schedule: RetrainSchedule,
    out_dir: Path,
    data: Optional[Tuple[ArrayDataset, ArrayDataset]] = None,
) -> Metrics:
    """Substitute the retrain-phase zero op slot, then retrain into ``out_dir``."""
    retrain = apply_zero_config(genotype, genotype.zero_config, "retrain")
    record = RunRecord.create(out_dir)
    record.write_json("retrain_genotype.json", retrain.to_dict())
    record.write_json("retrain_schedule.json", schedule.to_dict())
    return retrain_and_evaluate(retrain, config.template, retrain_data(config, data), schedule, record)


def search_and_retrain(
    config: SearchConfig,
    schedule: RetrainSchedule,
    out_dir: Path,
    loss: Optional[LossConfig] = None,
    label: Optional[str] = None,
    data: Optional[Tuple[ArrayDataset, ArrayDataset]] = None,
) -> Tuple[Genotype, Metrics]:
    genotype, record = run_search(config, out_dir, loss=loss, label=label, data=data)
    metrics = retrain_genotype(genotype, config, schedule, record.path, data)
    logger.info("%s: final retrain test accuracy %.4f", label or record.path.name, metrics.final_test_acc)
    return genotype, metrics


def random_baseline(config: SearchConfig, rng_seed: int) -> Genotype:
    """Random DARTS-shaped genotype over the evaluation-phase space of ``config``."""
    names = [s.name for s in resolve_space(config.space_id, config.zero_config, "evaluation", config.template.exclude_ops)]
    return random_genotype(
        names,
        config.template.n_nodes,
        rng_seed,
        config.k,
        space_id=config.space_id,
        zero_config=config.zero_config,
    )
