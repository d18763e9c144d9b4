import os
from dataclasses import replace

from nas.services.config import RetrainSchedule, SearchConfig
from nas.services.datasets import load_synthetic
from nas.services.networks import NetworkTemplate

SLOW_TESTS = os.environ.get("ICDARTS_SLOW_TESTS") == "1"


def tiny_template(**overrides) -> NetworkTemplate:
    template = NetworkTemplate(
        n_cells_search=3,
        n_cells_eval=3,
        n_cells_retrain=3,
        init_channels=4,
        n_nodes=2,
        aux_channels=8,
        n_classes=4,
    )
    return replace(template, **overrides)


def tiny_search_config(**overrides) -> SearchConfig:
    config = SearchConfig(
        template=tiny_template(),
        batch_size=16,
        pretrain_epochs=1,
        search_steps=1,
        warmup_steps=1,
        steps_per_epoch=2,
    )
    return replace(config, **overrides)


def tiny_schedule(**overrides) -> RetrainSchedule:
    schedule = RetrainSchedule(epochs=1, batch_size=16, steps_per_epoch=2, latency_batch_size=8, latency_batches=2)
    return replace(schedule, **overrides)


def tiny_data(seed: int = 0, n_train: int = 64, n_test: int = 32):
    return load_synthetic(seed, n_train, n_test)
