"""Cyclic joint search: pre-training, eval-net regeneration and warm-up, joint steps.

Three disjoint weight families are trained: the alphas, the search network
weights ``w_S`` and the evaluation network weights ``w_E``. Which loss terms
(``S``, ``E`` and the soft-target term ``SE``) drive each family, and on which
split ``w_E`` trains, is a ``LossConfig``.
"""
from __future__ import annotations

import hashlib
import logging
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from django.conf import settings

from .cells import AlphaTable, init_alphas
from .config import SearchConfig
from .datasets import ArrayDataset, BatchLoader, Normalizer, channel_stats, dataset_spec, load_dataset, make_loaders, split_train_val
from .discretizer import DiscretizerKind, apply_zero_config, discretize, get_zero_config
from .errors import ConfigError, DataError, NumericalError, SearchError
from .genotypes import SPECIAL_OPS, EdgeGroupKey, Genotype, GenotypeHistory
from .networks import (
    EvalNetwork,
    SearchNetwork,
    build_eval_network,
    build_search_network,
    classification_loss,
    inherit_weights,
    save_checkpoint,
)
from .operations import CATALOG, resolve_space
from .runs import RunRecord

logger = logging.getLogger(__name__)

TERMS = ("S", "E", "SE")
FAMILIES = ("alpha", "ws", "we")
# Terms that can carry gradient into each family.
FAMILY_TERMS = {"alpha": ("S", "SE"), "ws": ("S", "SE"), "we": ("E", "SE")}
SPLITS = ("train", "val")


# =============================================================================
# LOSS PRESETS
# =============================================================================


@dataclass(frozen=True)
class LossConfig:
    name: str
    alpha_terms: Tuple[str, ...]
    ws_terms: Tuple[str, ...]
    we_terms: Tuple[str, ...]
    we_split: str = "train"
    lam: float = 1.0
    temperature: float = 2.0

    alpha_split = "val"
    ws_split = "train"

    def __post_init__(self) -> None:
        for family in FAMILIES:
            terms = self.terms(family)
            if not terms:
                raise ConfigError(f"{self.name}: {family} needs at least one loss term")
            if set(terms) - set(TERMS):
                raise ConfigError(f"{self.name}: unknown terms {sorted(set(terms) - set(TERMS))}")
        if "E" in self.ws_terms:
            raise ConfigError(f"{self.name}: w_S cannot train on the evaluation network loss")
        if self.we_split not in SPLITS:
            raise ConfigError(f"{self.name}: we_split must be train or val")
        if self.lam < 0 or self.temperature <= 0:
            raise ConfigError(f"{self.name}: lambda must be nonnegative and temperature positive")

    def terms(self, family: str) -> Tuple[str, ...]:
        if family == "alpha":
            return self.alpha_terms
        if family == "ws":
            return self.ws_terms
        if family == "we":
            return self.we_terms
        raise ConfigError(f"Unknown weight family: {family}")

    def split(self, family: str) -> str:
        return {"alpha": self.alpha_split, "ws": self.ws_split, "we": self.we_split}[family]

    def with_hyperparameters(self, lam: float, temperature: float) -> "LossConfig":
        return replace(self, lam=lam, temperature=temperature)

    def to_dict(self) -> Dict:
        data = asdict(self)
        data.update(alpha_split=self.alpha_split, ws_split=self.ws_split)
        return data


CDARTS = LossConfig("cdarts", ("S", "E", "SE"), ("S",), ("S", "E", "SE"), "val")
ICDARTS = LossConfig("icdarts", ("S", "SE"), ("S", "SE"), ("E",), "train")

ROUTE_A1 = replace(CDARTS, name="routeA1", ws_terms=("S", "SE"))
ROUTE_A2 = replace(ROUTE_A1, name="routeA2", we_terms=("E",), we_split="val")
ROUTE_A3_LITERAL = replace(ROUTE_A2, name="routeA3_literal", we_terms=("SE",), we_split="train")
ROUTE_B1 = replace(CDARTS, name="routeB1", we_terms=("E", "SE"), we_split="train")
ROUTE_B2 = replace(ROUTE_B1, name="routeB2", we_terms=("E",))

LOSS_PRESETS: Dict[str, LossConfig] = {
    preset.name: preset for preset in (CDARTS, ICDARTS, ROUTE_A1, ROUTE_A2, ROUTE_A3_LITERAL, ROUTE_B1, ROUTE_B2)
}
ROUTES = {"A": (CDARTS, ROUTE_A1, ROUTE_A2, ICDARTS), "B": (CDARTS, ROUTE_B1, ROUTE_B2, ICDARTS)}


def get_loss_preset(name: str, lam: float = 1.0, temperature: float = 2.0) -> LossConfig:
    try:
        preset = LOSS_PRESETS[name]
    except KeyError as exc:
        raise ConfigError(f"Unknown loss preset: {name} (expected one of {', '.join(LOSS_PRESETS)})") from exc
    return preset.with_hyperparameters(lam, temperature)


def select_route_preset(route: str, stage: int) -> LossConfig:
    """Cumulative loss config of an ablation route; stage 0 is CDARTS, stage 3 ICDARTS."""
    stages = ROUTES.get(str(route).upper())
    if stages is None:
        raise ConfigError(f"Unknown route: {route}")
    if not 0 <= int(stage) < len(stages):
        raise ConfigError(f"Unknown stage {stage} for route {route}")
    return stages[int(stage)]


# =============================================================================
# LOSSES
# =============================================================================


def soft_target_ce(f_S: torch.Tensor, f_E: torch.Tensor, temperature: float = 2.0) -> torch.Tensor:
    """(T^2 / N) * sum_i KL(softmax(f_E / T) || softmax(f_S / T))."""
    if f_S.shape != f_E.shape or f_S.dim() != 2:
        raise SearchError(f"Logit shapes differ or are not (N, classes): {tuple(f_S.shape)} vs {tuple(f_E.shape)}")
    if temperature <= 0:
        raise ConfigError("temperature must be positive")
    if not (torch.isfinite(f_S).all() and torch.isfinite(f_E).all()):
        raise NumericalError("Non-finite logits reached the soft-target loss")
    log_p = F.log_softmax(f_E / temperature, dim=1)
    log_q = F.log_softmax(f_S / temperature, dim=1)
    kl = (log_p.exp() * (log_p - log_q)).sum()
    return kl * temperature**2 / f_S.shape[0]


def parameter_fingerprint(params: Iterable[torch.Tensor]) -> str:
    digest = hashlib.sha256()
    for p in params:
        digest.update(p.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


# =============================================================================
# STATE
# =============================================================================


@dataclass
class SearchState:
    config: SearchConfig
    loss: LossConfig
    alphas: AlphaTable
    search_net: SearchNetwork
    alpha_opt: torch.optim.Optimizer
    ws_opt: torch.optim.Optimizer
    ws_sched: Optional[torch.optim.lr_scheduler.LRScheduler] = None
    eval_net: Optional[EvalNetwork] = None
    we_opt: Optional[torch.optim.Optimizer] = None
    genotype: Optional[Genotype] = None
    history: GenotypeHistory = field(default_factory=GenotypeHistory)
    step: int = 0
    regenerations: int = 0

    @property
    def template(self):
        return self.search_net.template

    def family_params(self, family: str) -> List[torch.Tensor]:
        if family == "alpha":
            return self.alphas.parameters()
        if family == "ws":
            return list(self.search_net.parameters())
        if family == "we":
            if self.eval_net is None:
                raise SearchError("No evaluation network has been generated yet")
            return list(self.eval_net.parameters())
        raise ConfigError(f"Unknown weight family: {family}")

    def optimizer(self, family: str) -> torch.optim.Optimizer:
        if family == "alpha":
            return self.alpha_opt
        if family == "ws":
            return self.ws_opt
        if self.we_opt is None:
            raise SearchError("No evaluation network has been generated yet")
        return self.we_opt

    def family_network(self, family: str) -> Optional[torch.nn.Module]:
        return {"alpha": None, "ws": self.search_net, "we": self.eval_net}[family]

    def foreign_networks(self, family: str) -> List[torch.nn.Module]:
        """Networks whose running statistics ``family``'s update must leave alone."""
        own = self.family_network(family)
        return [net for net in (self.search_net, self.eval_net) if net is not None and net is not own]

    def fingerprints(self) -> Dict[str, str]:
        """Hash of each family's parameters; network families include their buffers."""
        prints = {"alpha": parameter_fingerprint(self.family_params("alpha"))}
        prints["ws"] = parameter_fingerprint([*self.search_net.parameters(), *self.search_net.buffers()])
        if self.eval_net is not None:
            prints["we"] = parameter_fingerprint([*self.eval_net.parameters(), *self.eval_net.buffers()])
        return prints


@contextmanager
def preserved_buffers(modules: Sequence[torch.nn.Module]) -> Iterator[None]:
    """Restore every buffer of ``modules`` (BatchNorm running statistics) on exit."""
    saved = [(buf, buf.detach().clone()) for module in modules for buf in module.buffers()]
    try:
        yield
    finally:
        with torch.no_grad():
            for buf, value in saved:
                buf.copy_(value)


def init_search_state(
    config: SearchConfig,
    n_classes: int,
    pools: Optional[Dict[EdgeGroupKey, Sequence[str]]] = None,
    loss: Optional[LossConfig] = None,
    total_steps: int = 1,
) -> SearchState:
    template = replace(config.template, n_classes=n_classes)
    specs = resolve_space(config.space_id, config.zero_config, "search", template.exclude_ops)
    alphas = init_alphas(template.n_nodes, [s.name for s in specs], config.seed, pools=pools)
    search_net = build_search_network(template, config.space_id, config.zero_config, alphas, config.seed)
    ws_opt = torch.optim.SGD(
        search_net.parameters(), lr=config.ws_lr, momentum=config.ws_momentum, weight_decay=config.ws_weight_decay
    )
    alpha_opt = torch.optim.Adam(
        alphas.parameters(), lr=config.alpha_lr, betas=tuple(config.alpha_betas), weight_decay=config.alpha_weight_decay
    )
    ws_sched = torch.optim.lr_scheduler.CosineAnnealingLR(ws_opt, T_max=max(1, total_steps))
    loss = loss or get_loss_preset(config.loss, config.lam, config.temperature)
    return SearchState(config, loss, alphas, search_net, alpha_opt, ws_opt, ws_sched)


def _eligible_ops(config: SearchConfig):
    if get_zero_config(config.zero_config).eval_slot is None:
        return set(CATALOG) - SPECIAL_OPS
    return None


def current_genotype(state: SearchState) -> Genotype:
    """Discretize the alphas and substitute the evaluation-phase special slot."""
    config = state.config
    genotype = discretize(
        state.alphas,
        DiscretizerKind(config.discretizer, config.k, config.xdarts_count_inputs),
        _eligible_ops(config),
        space_id=config.space_id,
        zero_config=config.zero_config,
    )
    return apply_zero_config(genotype, config.zero_config, "evaluation")


def regenerate_eval_net(state: SearchState) -> EvalNetwork:
    """Discretize, build a fresh evaluation network and its optimizer."""
    config = state.config
    genotype = current_genotype(state)
    previous = state.eval_net
    eval_net = build_eval_network(
        genotype, state.template, config.zero_config, "evaluation", rng_seed=config.seed + 1 + state.regenerations
    )
    if config.we_inherit and previous is not None:
        inherit_weights(eval_net, previous)
    lr = state.ws_opt.param_groups[0]["lr"]
    state.we_opt = torch.optim.SGD(eval_net.parameters(), lr=lr, momentum=config.ws_momentum, weight_decay=config.ws_weight_decay)
    state.eval_net = eval_net
    state.genotype = genotype
    state.history.append(state.step, genotype)
    state.regenerations += 1
    logger.debug("Regenerated evaluation network #%d at step %d", state.regenerations, state.step)
    return eval_net


# =============================================================================
# UPDATES
# =============================================================================


def _check_finite(value: torch.Tensor, what: str, snapshot: Dict) -> None:
    if not torch.isfinite(value).all():
        raise NumericalError(f"Non-finite {what}", snapshot=snapshot)


def family_loss(
    state: SearchState,
    loss: LossConfig,
    family: str,
    x: torch.Tensor,
    y: torch.Tensor,
) -> Optional[torch.Tensor]:
    """Loss driving ``family``; terms with no path to it are skipped. None if nothing remains."""
    terms = [t for t in loss.terms(family) if t in FAMILY_TERMS[family]]
    if not terms:
        return None
    aux_weight = state.template.aux_weight
    snapshot = {"family": family, "step": state.step, "terms": terms, "preset": loss.name}
    need_search = "S" in terms or "SE" in terms
    need_eval = "E" in terms or "SE" in terms
    if need_eval and state.eval_net is None:
        raise SearchError("No evaluation network has been generated yet")

    logits_S = aux_S = logits_E = aux_E = None
    if need_search:
        if family == "we":
            with torch.no_grad():
                logits_S, aux_S = state.search_net(x)
        else:
            logits_S, aux_S = state.search_net(x)
        _check_finite(logits_S, "search logits", snapshot)
    if need_eval:
        if family == "we":
            logits_E, aux_E = state.eval_net(x)
        else:
            with torch.no_grad():
                logits_E, aux_E = state.eval_net(x)
        _check_finite(logits_E, "evaluation logits", snapshot)

    total = torch.zeros((), dtype=x.dtype)
    if "S" in terms:
        total = total + classification_loss(logits_S, aux_S, y, aux_weight)
    if "E" in terms:
        total = total + classification_loss(logits_E, aux_E, y, aux_weight)
    if "SE" in terms:
        total = total + loss.lam * soft_target_ce(logits_S, logits_E, loss.temperature)
    snapshot["loss"] = float(total.detach())
    _check_finite(total, f"{family} loss", snapshot)
    return total


def family_gradients(
    state: SearchState, loss: LossConfig, family: str, x: torch.Tensor, y: torch.Tensor
) -> List[torch.Tensor]:
    """Gradients of ``family``'s loss w.r.t. its own parameters, without stepping."""
    params = state.family_params(family)
    with preserved_buffers(state.foreign_networks(family)):
        total = family_loss(state, loss, family, x, y)
        if total is None:
            return [torch.zeros_like(p) for p in params]
        grads = torch.autograd.grad(total, params, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


def _update(state: SearchState, loss: LossConfig, family: str, batch: Tuple[torch.Tensor, torch.Tensor]) -> Optional[float]:
    x, y = batch
    params = state.family_params(family)
    before = state.fingerprints() if state.config.verify_isolation else None
    # Buffers are restored after the backward pass, which still reads them.
    with preserved_buffers(state.foreign_networks(family)):
        total = family_loss(state, loss, family, x, y)
        if total is None:
            return None
        grads = torch.autograd.grad(total, params, allow_unused=True)
    optimizer = state.optimizer(family)
    optimizer.zero_grad(set_to_none=True)
    for p, g in zip(params, grads):
        p.grad = g
    if family != "alpha" and state.config.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_([p for p in params if p.grad is not None], state.config.grad_clip)
    optimizer.step()
    if before is not None:
        after = state.fingerprints()
        touched = [f for f in before if f != family and before[f] != after.get(f)]
        if touched:
            raise SearchError(f"{family} update modified {touched} at step {state.step}")
    return float(total.detach())


def pretrain_search(state: SearchState, train_split: Iterable, epochs: int) -> SearchState:
    """Train ``w_S`` on the search loss with the alphas frozen."""
    if epochs < 0:
        raise ConfigError("pretrain epochs must be nonnegative")
    if epochs == 0:
        return state
    pretrain = replace(state.loss, name="pretrain", ws_terms=("S",))
    for epoch in range(epochs):
        losses = [_update(state, pretrain, "ws", batch) for batch in train_split]
        if not losses:
            raise DataError("Pre-training split is empty")
        logger.info("Pretrain epoch %d: search loss %.4f", epoch, sum(losses) / len(losses))
    return state


def warmup_eval(state: SearchState, val_split: Iterable, steps: int) -> SearchState:
    """``steps`` mini-batch updates of ``w_E`` on the evaluation loss."""
    if state.eval_net is None:
        raise SearchError("Warm-up needs an evaluation network")
    if steps <= 0:
        return state
    warmup = replace(state.loss, name="warmup", we_terms=("E",))
    batches = _cycle(val_split)
    losses = [_update(state, warmup, "we", next(batches)) for _ in range(steps)]
    logger.debug("Warm-up: %d steps, final loss %.4f", steps, losses[-1])
    return state


def joint_step(
    state: SearchState,
    val_batch: Tuple[torch.Tensor, torch.Tensor],
    train_batch: Tuple[torch.Tensor, torch.Tensor],
    loss: Optional[LossConfig] = None,
) -> Dict[str, Optional[float]]:
    """Alpha on val, then ``w_S`` on train, then ``w_E`` on its configured split."""
    loss = loss or state.loss
    if state.eval_net is None:
        raise SearchError("joint_step needs an evaluation network generated this cycle")
    batches = {"train": train_batch, "val": val_batch}
    losses = {family: _update(state, loss, family, batches[loss.split(family)]) for family in FAMILIES}
    state.step += 1
    return losses


def _cycle(loader: Iterable) -> Iterator:
    while True:
        empty = True
        for batch in loader:
            empty = False
            yield batch
        if empty:
            raise DataError("Split is empty")


@torch.no_grad()
def accuracy(net: torch.nn.Module, loader: Iterable) -> float:
    was_training = net.training
    net.eval()
    correct = total = 0
    for x, y in loader:
        logits, _ = net(x)
        correct += int((logits.argmax(dim=1) == y).sum())
        total += int(y.numel())
    net.train(was_training)
    return correct / total if total else 0.0


# =============================================================================
# DRIVER
# =============================================================================


def data_root(config: SearchConfig) -> Optional[Path]:
    if config.data_root:
        return Path(config.data_root)
    return getattr(settings, "NAS_DATA_ROOT", None)


@dataclass
class SearchData:
    train: BatchLoader
    val: BatchLoader
    val_eval: BatchLoader
    test: BatchLoader
    n_classes: int


def prepare_search_data(config: SearchConfig, data: Optional[Tuple[ArrayDataset, ArrayDataset]] = None) -> SearchData:
    spec = dataset_spec(config.dataset, data_root(config), seed=config.seed)
    train_full, test = data if data is not None else load_dataset(spec)
    train, val = split_train_val(train_full, config.seed)
    train_loader, (val_eval, test_loader) = make_loaders(
        spec, train, [val, test], config.batch_size, config.seed, max_batches=config.steps_per_epoch
    )
    mean, std = channel_stats(train)
    val_loader = BatchLoader(
        val, config.batch_size, Normalizer(mean, std), shuffle=True, seed=config.seed + 1, max_batches=config.steps_per_epoch
    )
    return SearchData(train_loader, val_loader, val_eval, test_loader, spec.n_classes)


def run_search(
    config: SearchConfig,
    out_dir: Path,
    pools: Optional[Dict[EdgeGroupKey, Sequence[str]]] = None,
    data: Optional[Tuple[ArrayDataset, ArrayDataset]] = None,
    loss: Optional[LossConfig] = None,
    label: Optional[str] = None,
) -> Tuple[Genotype, RunRecord]:
    """Pre-train, then for each search step i in [0, S_S] regenerate every S_U steps and learn jointly."""
    record = RunRecord.create(out_dir)
    torch.manual_seed(config.seed)
    prepared = prepare_search_data(config, data)
    total_steps = config.search_steps + 1
    state = init_search_state(config, prepared.n_classes, pools, loss, total_steps)
    record.write_config(
        {
            **config.to_dict(),
            "label": label or state.loss.name,
            "loss_config": state.loss.to_dict(),
            "pools": _pools_doc(pools),
        }
    )
    logger.info(
        "Search %s: space %s, %s, %s, lambda=%.3g, T=%.3g",
        record.path.name,
        config.space_id,
        config.zero_config,
        state.loss.name,
        state.loss.lam,
        state.loss.temperature,
    )
    started = time.perf_counter()
    try:
        pretrain_search(state, prepared.train, config.pretrain_epochs)
        for i in range(total_steps):
            if i % config.update_interval == 0:
                regenerate_eval_net(state)
                warmup_eval(state, prepared.val, config.warmup_steps)
            search_losses = []
            for val_batch, train_batch in zip(prepared.val, prepared.train):
                losses = joint_step(state, val_batch, train_batch)
                if losses["ws"] is not None:
                    search_losses.append(losses["ws"])
            state.ws_sched.step()
            row = {
                "epoch": i,
                "search_loss": sum(search_losses) / len(search_losses) if search_losses else float("nan"),
                "eval_val_acc": accuracy(state.eval_net, prepared.val_eval),
                "eval_test_acc": accuracy(state.eval_net, prepared.test),
                "wall_time": time.perf_counter() - started,
            }
            record.append_metrics(row)
            record.write_genotype(state.genotype, epoch=i)
            logger.info(
                "Search epoch %d: loss %.4f, eval val %.3f, eval test %.3f",
                i,
                row["search_loss"],
                row["eval_val_acc"],
                row["eval_test_acc"],
            )
    except NumericalError as exc:
        record.write_json("diagnostic.json", {"error": str(exc), **exc.snapshot})
        raise

    final = current_genotype(state)
    record.write_genotype(final)
    record.write_json("alphas.json", state.alphas.to_dict())
    record.write_json("summary.json", {"joint_steps": state.step, "regenerations": state.regenerations})
    save_checkpoint(
        state.search_net,
        record.checkpoint_dir,
        {"template": state.template.to_dict(), "genotype": final.to_dict(), "seed": config.seed, "epoch": config.search_steps},
    )
    logger.info("Search finished after %d joint steps, %d regenerations", state.step, state.regenerations)
    return final, record


def _pools_doc(pools):
    if pools is None:
        return None
    return [{"kind": k, "dst": d, "src": s, "ops": list(ops)} for (k, d, s), ops in sorted(pools.items())]
