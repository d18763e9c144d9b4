"""Flags, config merging and error mapping shared by the nas management commands."""
import logging
from contextlib import contextmanager
from dataclasses import fields, replace
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from django.conf import settings
from django.core.management.base import CommandError
from django.utils import timezone

from nas.forms import RetrainForm, SearchForm, form_data
from nas.services.config import RetrainSchedule, SearchConfig, load_config_file, merge_options
from nas.services.datasets import DATASET_NAMES
from nas.services.discretizer import DISCRETIZERS, ZERO_CONFIGS
from nas.services.errors import ConfigError, NASError
from nas.services.operations import SPACES
from nas.services.runs import CONFIG_FILE, RunRecord
from nas.services.search import LossConfig, select_route_preset

logger = logging.getLogger(__name__)

SEARCH_OPTIONS = ("seed", "dataset", "space", "zero_config", "discretizer", "loss", "route", "stage", "cells", "epochs")
RETRAIN_OPTIONS = ("seed", "retrain_epochs", "cells", "batch_size", "cutout", "drop_path")


def add_common_arguments(parser) -> None:
    parser.add_argument("--config", type=Path, help="JSON file with run configuration; flags override it.")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", type=Path, help="Output directory (default: a new directory under ICDARTS_RUNS_DIR).")
    parser.add_argument("--dataset", choices=DATASET_NAMES)
    parser.add_argument("--space", choices=sorted(SPACES))
    parser.add_argument("--zero-config", dest="zero_config", choices=sorted(ZERO_CONFIGS))
    parser.add_argument("--discretizer", choices=DISCRETIZERS)
    parser.add_argument("--route", choices=("A", "B"))
    parser.add_argument("--stage", type=int, choices=range(4))
    parser.add_argument("--cells", type=int, help="Number of cells of the network being trained.")
    parser.add_argument("--epochs", type=int, help="Search steps S_S.")


def add_retrain_arguments(parser) -> None:
    parser.add_argument("--retrain-epochs", dest="retrain_epochs", type=int)
    parser.add_argument("--batch-size", dest="batch_size", type=int)
    parser.add_argument("--cutout", type=int)
    parser.add_argument("--drop-path", dest="drop_path", type=float)


def validated(form_class, options: Dict[str, Any], names, **kwargs):
    form = form_class(data=form_data(options, names), **kwargs)
    if not form.is_valid():
        raise ConfigError(f"Invalid options: {form.errors.as_text()}")
    return form


def search_config(options: Dict[str, Any], base: Optional[Dict[str, Any]] = None) -> Tuple[SearchConfig, Optional[LossConfig]]:
    """Merge the config document with flags; a route/stage pair selects an ablation loss preset."""
    form = validated(SearchForm, options, SEARCH_OPTIONS)
    document = base if base is not None else load_config_file(options.get("config"))
    config = SearchConfig.from_dict(merge_options(document, form.search_overrides()))
    loss = None
    if form.cleaned_data.get("route"):
        loss = select_route_preset(form.cleaned_data["route"], form.cleaned_data["stage"])
        loss = loss.with_hyperparameters(config.lam, config.temperature)
    return config, loss


def retrain_schedule(options: Dict[str, Any], base: Optional[Dict[str, Any]] = None) -> RetrainSchedule:
    data = dict(options)
    data["epochs"] = options.get("retrain_epochs")
    form = validated(RetrainForm, data, ("seed", "epochs", "cells", "batch_size", "cutout", "drop_path"))
    return RetrainSchedule.from_dict(merge_options(base or {}, form.schedule_overrides()))


def with_retrain_cells(config: SearchConfig, cells: Optional[int]) -> SearchConfig:
    if cells is None:
        return config
    return replace(config, template=replace(config.template, n_cells_retrain=cells))


def search_config_from_run(run_dir: Path) -> Dict[str, Any]:
    """The ``SearchConfig`` fields of a run's config.json."""
    document = RunRecord(run_dir).read_json(CONFIG_FILE)
    names = {f.name for f in fields(SearchConfig)}
    return {key: value for key, value in document.items() if key in names}


def output_dir(options: Dict[str, Any], kind: str, label: str = "") -> Path:
    if options.get("out"):
        return Path(options["out"])
    stamp = timezone.now().strftime("%Y%m%d-%H%M%S")
    name = "_".join(part for part in (kind, label, f"seed{options.get('seed') or 0}", stamp) if part)
    return Path(settings.NAS_RUNS_DIR) / name


@contextmanager
def command_errors(run=None):
    """Map engine errors to command exit codes and mark the registry entry failed."""
    try:
        yield
    except NASError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        if run is not None:
            run.fail(exc)
        raise CommandError(str(exc), returncode=exc.exit_code) from exc
