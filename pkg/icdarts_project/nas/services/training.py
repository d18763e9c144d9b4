"""Retraining a discovered genotype from scratch, and inference latency."""
from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import torch
from django.conf import settings

from .config import RetrainSchedule
from .datasets import ArrayDataset, DatasetSpec, Normalizer, channel_stats, make_loaders
from .errors import ConfigError, NumericalError
from .genotypes import Genotype
from .networks import EvalNetwork, NetworkTemplate, build_eval_network, classification_loss, count_parameters
from .runs import RunRecord
from .search import accuracy

logger = logging.getLogger(__name__)

LATENCY_WARMUP_BATCHES = 3


@dataclass
class Metrics:
    epochs: List[Dict[str, float]] = field(default_factory=list)
    final_test_acc: float = 0.0
    latency_mean: Optional[float] = None
    latency_std: Optional[float] = None
    n_parameters: int = 0

    def to_dict(self) -> Dict:
        return {
            "epochs": self.epochs,
            "final_test_acc": self.final_test_acc,
            "latency_mean_s_per_batch": self.latency_mean,
            "latency_std_s_per_batch": self.latency_std,
            "n_parameters": self.n_parameters,
        }


@torch.no_grad()
def measure_latency(
    network: torch.nn.Module,
    test_set: ArrayDataset,
    batch_size: int = 128,
    n_batches: int = 10,
    transform=None,
    device: Optional[str] = None,
) -> Tuple[float, float]:
    """Mean and sample stddev of per-batch forward time (seconds/batch), after 3 warm-up batches."""
    if n_batches < 2:
        raise ConfigError("Latency needs at least 2 timed batches")
    device = device or getattr(settings, "NAS_LATENCY_DEVICE", "cpu")
    transform = transform or Normalizer(*channel_stats(test_set))
    net = network if device == "cpu" else copy.deepcopy(network).to(device)
    was_training = net.training
    net.eval()
    images = torch.from_numpy(test_set.images)
    n = images.shape[0]
    timings = []
    for b in range(LATENCY_WARMUP_BATCHES + n_batches):
        index = (torch.arange(batch_size) + b * batch_size) % n
        batch = transform(images[index]).to(device)
        started = time.perf_counter()
        net(batch)
        if device != "cpu" and torch.cuda.is_available():
            torch.cuda.synchronize()
        elapsed = time.perf_counter() - started
        if b >= LATENCY_WARMUP_BATCHES:
            timings.append(elapsed)
    network.train(was_training)
    return float(np.mean(timings)), float(np.std(timings, ddof=1))


def _train_epoch(net: EvalNetwork, loader, optimizer, aux_weight: float, grad_clip: float) -> Tuple[float, float]:
    net.train()
    losses, correct, total = [], 0, 0
    for x, y in loader:
        logits, aux_logits = net(x)
        loss = classification_loss(logits, aux_logits, y, aux_weight)
        if not torch.isfinite(loss):
            raise NumericalError("Non-finite retrain loss", snapshot={"loss": float(loss.detach())})
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(net.parameters(), grad_clip)
        optimizer.step()
        losses.append(float(loss.detach()))
        correct += int((logits.argmax(dim=1) == y).sum())
        total += int(y.numel())
    return (sum(losses) / len(losses) if losses else float("nan")), (correct / total if total else 0.0)


def retrain_and_evaluate(
    genotype: Genotype,
    template: NetworkTemplate,
    dataset: Tuple[DatasetSpec, ArrayDataset, ArrayDataset],
    schedule: RetrainSchedule,
    record: Optional[RunRecord] = None,
) -> Metrics:
    """Train the retrain network on the full training set; report the last epoch's test accuracy."""
    spec, train, test = dataset
    if schedule.cutout is not None:
        spec = replace(spec, cutout=schedule.cutout)
    template = replace(template, n_classes=spec.n_classes, aux_weight=schedule.aux_weight, drop_path=schedule.drop_path)
    torch.manual_seed(schedule.seed)
    net = build_eval_network(genotype, template, genotype.zero_config, "retrain", rng_seed=schedule.seed)
    metrics = Metrics(n_parameters=count_parameters(net))

    metrics.latency_mean, metrics.latency_std = measure_latency(
        net, test, schedule.latency_batch_size, schedule.latency_batches
    )
    logger.info("Retrain network: %d weights, %.4f s/batch before training", metrics.n_parameters, metrics.latency_mean)

    train_loader, (test_loader,) = make_loaders(
        spec, train, [test], schedule.batch_size, schedule.seed, max_batches=schedule.steps_per_epoch
    )
    optimizer = torch.optim.SGD(net.parameters(), lr=schedule.lr, momentum=schedule.momentum, weight_decay=schedule.weight_decay)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=max(1, schedule.epochs))

    test_acc = accuracy(net, test_loader)
    for epoch in range(schedule.epochs):
        net.drop_path_prob = template.drop_path * epoch / schedule.epochs
        train_loss, train_acc = _train_epoch(net, train_loader, optimizer, template.aux_weight, schedule.grad_clip)
        scheduler.step()
        test_acc = accuracy(net, test_loader)
        metrics.epochs.append({"epoch": epoch, "train_loss": train_loss, "train_acc": train_acc, "test_acc": test_acc})
        logger.info("Retrain epoch %d: loss %.4f, train %.3f, test %.3f", epoch, train_loss, train_acc, test_acc)
    metrics.final_test_acc = test_acc

    if record is not None:
        record.write_json("retrain.json", metrics.to_dict())
        record.write_json(
            "latency.json",
            {"mean_s_per_batch": metrics.latency_mean, "std_s_per_batch": metrics.latency_std, "batch_size": schedule.latency_batch_size},
        )
        if metrics.epochs:
            pd.DataFrame(metrics.epochs).to_csv(record.file("retrain_metrics.csv"), index=False)
    return metrics
