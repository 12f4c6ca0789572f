"""Episodic meta-training with auxiliary-set fairness adaptation, evaluation and checkpoints.

Meta-gradients are first order: the query-loss gradient taken at the adapted
parameters is applied to the meta-parameters directly.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, NonFiniteError
from .core import (CandidateDictionary, enqueue_candidate, fairness_adaptation_loss, init_dictionary,
                   loss_gradient)
from .datasets import Batch, DatasetTable, SplitSpec, sample_episode
from .fairness import REGULARIZERS, MetricsReport, regularized_loss, task_metrics
from .models import ParamBundle, classifier_forward, generator_forward, init_classifier, init_generator

log = logging.getLogger(__name__)

VARIANTS = ("feast", "feast_no_mi", "feast_no_select", "feast_no_both", "maml", "m_maml")
DIVERGENCE_LIMIT = 1e6
_EVAL_STREAM = 0x5EED


class ConfigError(ValueError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


@dataclass
class TrainConfig:
    alpha: float = 0.01
    beta1: float = 0.001
    beta2: float = 0.001
    tau: int = 10
    gamma: float = 0.5
    lam: float = 1.0
    k_shot: int = 5
    aux_size: int | None = None
    T: int = 500
    T_test: int = 500
    query_size: int = 10
    capacity: int = 64
    weight_decay: float = 1e-4
    seed: int = 0
    variant: str = "feast"
    regularizer: str = "dp"
    adapted_keys: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("alpha", "beta1", "beta2"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.tau < 1:
            raise ConfigError("tau must be at least 1")
        if self.gamma < 0 or self.lam < 0 or self.weight_decay < 0:
            raise ConfigError("gamma, lam and weight_decay must be non-negative")
        if self.k_shot < 1 or self.query_size < 2 or self.capacity < 1 or self.T < 0 or self.T_test < 0:
            raise ConfigError("k_shot, query_size, capacity, T and T_test out of range")
        if self.aux_size is not None and self.aux_size < 1:
            raise ConfigError("aux_size must be at least 1")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant {self.variant!r} not in {VARIANTS}")
        if self.regularizer not in REGULARIZERS:
            raise ConfigError(f"regularizer {self.regularizer!r} not in {REGULARIZERS}")

    @property
    def is_maml(self) -> bool:
        return self.variant in ("maml", "m_maml")

    @property
    def uses_aux(self) -> bool:
        return not self.is_maml

    @property
    def uses_mi(self) -> bool:
        return self.variant in ("feast", "feast_no_select")

    @property
    def uses_selection(self) -> bool:
        return self.variant in ("feast", "feast_no_mi")

    @property
    def eff_lam(self) -> float:
        return 0.0 if self.is_maml else self.lam

    @property
    def eff_gamma(self) -> float:
        return 0.0 if self.is_maml else self.gamma

    @property
    def eff_aux_size(self) -> int:
        return self.aux_size if self.aux_size is not None else 2 * self.k_shot


@dataclass
class TrainState:
    config: TrainConfig
    theta: ParamBundle
    phi: ParamBundle
    opt_theta: AdamState
    opt_phi: AdamState
    dictionary: CandidateDictionary | None
    rngs: dict[str, np.random.Generator]
    step: int = 0
    history: list[dict] = field(default_factory=list)


def prepare_table(table: DatasetTable, cfg: TrainConfig) -> DatasetTable:
    return table.without_sensitive_feature() if cfg.variant == "m_maml" else table


def init_state(cfg: TrainConfig, table: DatasetTable, split: SplitSpec) -> TrainState:
    """Fresh parameters, optimizers and (for auxiliary variants) a randomly filled dictionary."""
    table = prepare_table(table, cfg)
    streams = np.random.SeedSequence(cfg.seed).spawn(5)
    rng_theta, rng_phi, rng_ep, rng_dict, rng_aux = (np.random.default_rng(s) for s in streams)
    theta = init_classifier(table.n_features, rng_theta)
    phi = init_generator(theta.size, rng_phi)
    dictionary = None
    if cfg.uses_aux:
        dictionary = init_dictionary(table, split.train, theta, cfg.capacity, cfg.eff_lam, rng_dict,
                                     cfg.k_shot, cfg.query_size, cfg.eff_aux_size, cfg.regularizer)
    return TrainState(
        config=cfg, theta=theta, phi=phi,
        opt_theta=AdamState.for_params(theta.values(), cfg.beta1, cfg.weight_decay),
        opt_phi=AdamState.for_params(phi.values(), cfg.beta2, cfg.weight_decay),
        dictionary=dictionary,
        rngs={"episodes": rng_ep, "dictionary": rng_dict, "aux": rng_aux},
    )


def _fa_loss(cfg: TrainConfig, batch: Batch, aux: Batch | None):
    return lambda p: fairness_adaptation_loss(p, batch, aux, cfg.eff_gamma, cfg.eff_lam,
                                              cfg.regularizer, cfg.uses_mi)


def _check(value: float, grads, what: str, step=None) -> None:
    norm = float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads)))
    if not (np.isfinite(value) and np.isfinite(norm)) or abs(value) > DIVERGENCE_LIMIT or norm > DIVERGENCE_LIMIT:
        raise DivergenceError(f"{what} diverged (loss={value:.4g}, grad norm={norm:.4g})", step)


def adapt(theta: ParamBundle, support: Batch, aux: Batch | None, cfg: TrainConfig) -> ParamBundle:
    """``tau`` plain gradient steps on the fairness adaptation loss; ``theta`` is left untouched."""
    cur = theta.copy()
    loss_fn = _fa_loss(cfg, support, aux)
    for t in range(cfg.tau):
        try:
            value, grads = loss_gradient(loss_fn, cur)
        except NonFiniteError as exc:
            raise DivergenceError(f"adaptation step {t + 1}: {exc}", t + 1) from exc
        _check(value, grads, f"adaptation step {t + 1}", t + 1)
        for arr, g in zip(cur.values(), grads):
            arr -= cfg.alpha * g
    return cur


def meta_update_classifier(theta: ParamBundle, theta_tau: ParamBundle, query: Batch, aux: Batch | None,
                           cfg: TrainConfig, opt) -> float:
    """Apply the query-loss gradient taken at ``theta_tau`` to ``theta`` through ``opt`` (in place)."""
    try:
        value, grads = loss_gradient(_fa_loss(cfg, query, aux), theta_tau)
    except NonFiniteError as exc:
        raise DivergenceError(f"meta-update: {exc}") from exc
    _check(value, grads, "meta-update")
    opt.apply(theta.values(), grads)
    return value


def generator_target(theta_tau: ParamBundle, support: Batch, cfg: TrainConfig) -> np.ndarray:
    _, grads = loss_gradient(lambda p: regularized_loss(p, support, cfg.eff_lam, cfg.regularizer), theta_tau)
    return np.concatenate([g.reshape(-1) for g in grads])


def meta_update_generator(phi: ParamBundle, support_embeddings, theta_tau: ParamBundle, support: Batch,
                          cfg: TrainConfig, opt) -> float | None:
    """One step on ``|g(S) - grad L_R(S; theta_tau)|^2``; the target is a constant.

    Returns the loss, or ``None`` when the target is non-finite and the step is skipped.
    """
    try:
        target = generator_target(theta_tau, support, cfg)
    except NonFiniteError:
        target = np.array([np.nan])
    if not np.all(np.isfinite(target)):
        log.warning("non-finite generator target; skipping generator update")
        return None
    value, grads = loss_gradient(
        lambda p: ad.mse(generator_forward(p, support_embeddings, support.y, support.a), target.reshape(1, -1),
                         reduction="sum"), phi)
    _check(value, grads, "generator update")
    opt.apply(phi.values(), grads)
    return value


def support_embeddings(theta: ParamBundle, support: Batch) -> np.ndarray:
    emb, _ = classifier_forward(theta, support.x)
    return emb.data


def choose_aux(state: TrainState, support: Batch, rng: np.random.Generator):
    """Auxiliary batch for a task plus the support embeddings used (``None`` when not selecting)."""
    cfg = state.config
    if not cfg.uses_aux:
        return None, None
    if cfg.uses_selection:
        emb = support_embeddings(state.theta, support)
        direction = generator_forward(state.phi, emb, support.y, support.a).data
        return state.dictionary.select(direction).batch, emb
    return state.dictionary.sample(rng).batch, None


def train_step(state: TrainState, table: DatasetTable, split: SplitSpec) -> dict:
    cfg = state.config
    ep = sample_episode(table, split.train, cfg.k_shot, cfg.query_size, state.rngs["episodes"])
    aux, emb = choose_aux(state, ep.support, state.rngs["aux"])
    theta_tau = adapt(state.theta, ep.support, aux, cfg)
    record = {"step": state.step + 1, "subset": ep.subset}
    record["query_loss"] = meta_update_classifier(state.theta, theta_tau, ep.query, aux, cfg, state.opt_theta)
    if cfg.uses_selection:
        record["generator_loss"] = meta_update_generator(state.phi, emb, theta_tau, ep.support, cfg,
                                                         state.opt_phi)
    if cfg.uses_aux:
        key_params = theta_tau if cfg.adapted_keys else state.theta
        enqueue_candidate(state.dictionary, ep.support, key_params, cfg.eff_lam, state.rngs["aux"],
                          cfg.eff_aux_size, table, ep.subset, cfg.regularizer)
    state.step += 1
    state.history.append(record)
    return record


def train(cfg: TrainConfig, table: DatasetTable, split: SplitSpec, state: TrainState | None = None,
          until: int | None = None) -> TrainState:
    """Run meta-training up to ``cfg.T`` steps (or ``until``), resuming from ``state`` if given."""
    split.validate(table)
    table = prepare_table(table, cfg)
    if state is None:
        state = init_state(cfg, table, split)
    stop = cfg.T if until is None else min(until, cfg.T)
    while state.step < stop:
        try:
            train_step(state, table, split)
        except DivergenceError as exc:
            exc.step = state.step + 1
            exc.state = state
            raise
    return state


def eval_rng(seed: int, task: int) -> np.random.Generator:
    return np.random.default_rng([seed, _EVAL_STREAM, task])


def eval_episode(cfg: TrainConfig, table: DatasetTable, subsets, task: int):
    """Meta-test episode ``task`` and the stream it was drawn from; depends on (seed, k_shot, |Q|, task) only."""
    rng = eval_rng(cfg.seed, task)
    return sample_episode(table, subsets, cfg.k_shot, cfg.query_size, rng), rng


def evaluate_task(state: TrainState, table: DatasetTable, subsets, task: int):
    cfg = state.config
    ep, rng = eval_episode(cfg, table, subsets, task)
    aux, _ = choose_aux(state, ep.support, rng)
    theta_tau = adapt(state.theta, ep.support, aux, cfg)
    _, probs = classifier_forward(theta_tau, ep.query.x)
    return task_metrics(task, probs.data[:, 1], ep.query.a, ep.query.y)


def _evaluate_range(args):
    state, table, subsets, tasks = args
    return [evaluate_task(state, table, subsets, t) for t in tasks]


def evaluate(state: TrainState, table: DatasetTable, subsets, cfg: TrainConfig | None = None,
             workers: int = 1) -> MetricsReport:
    """Adapt and score ``T_test`` tasks drawn from ``subsets``.

    Task ``t`` is sampled from a stream seeded by ``(seed, t)``, so the task
    sequence is shared by every variant and independent of ``workers``.
    """
    if cfg is not None:
        state = _with_config(state, cfg)
    cfg = state.config
    table = prepare_table(table, cfg)
    subsets = list(subsets)
    tasks = list(range(cfg.T_test))
    if workers <= 1 or len(tasks) < 2:
        return MetricsReport(_evaluate_range((state, table, subsets, tasks)))
    chunks = [tasks[i::workers] for i in range(workers)]
    with ProcessPoolExecutor(workers) as pool:
        parts = list(pool.map(_evaluate_range, [(state, table, subsets, c) for c in chunks]))
    merged = sorted((m for part in parts for m in part), key=lambda m: m.task_id)
    return MetricsReport(merged)


def _with_config(state: TrainState, cfg: TrainConfig) -> TrainState:
    return TrainState(cfg, state.theta, state.phi, state.opt_theta, state.opt_phi, state.dictionary,
                      state.rngs, state.step, state.history)


# -- checkpoints --------------------------------------------------------------

def _save_moments(opt: AdamState, path: Path) -> dict:
    np.concatenate([m.reshape(-1) for m in opt.m]).astype("<f8").tofile(path.with_name(path.name + "_m.bin"))
    np.concatenate([v.reshape(-1) for v in opt.v]).astype("<f8").tofile(path.with_name(path.name + "_v.bin"))
    return {"lr": opt.lr, "betas": list(opt.betas), "eps": opt.eps, "weight_decay": opt.weight_decay,
            "step": opt.step}


def _load_moments(meta: dict, path: Path, template: ParamBundle) -> AdamState:
    m = template.unflatten(np.fromfile(path.with_name(path.name + "_m.bin"), dtype="<f8"))
    v = template.unflatten(np.fromfile(path.with_name(path.name + "_v.bin"), dtype="<f8"))
    return AdamState(lr=meta["lr"], betas=tuple(meta["betas"]), eps=meta["eps"],
                     weight_decay=meta["weight_decay"], m=m.values(), v=v.values(), step=meta["step"])


def save_checkpoint(state: TrainState, directory) -> Path:
    """Manifest JSON, little-endian f64 parameter/optimizer blobs, dictionary snapshot and RNG states."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    state.theta.save(d / "theta")
    state.phi.save(d / "phi")
    manifest = {
        "format": 1,
        "step": state.step,
        "config": asdict(state.config),
        "theta_layout": state.theta.manifest(),
        "phi_layout": state.phi.manifest(),
        "adam_theta": _save_moments(state.opt_theta, d / "adam_theta"),
        "adam_phi": _save_moments(state.opt_phi, d / "adam_phi"),
        "rng": {k: g.bit_generator.state for k, g in state.rngs.items()},
        "has_dictionary": state.dictionary is not None,
        "history": state.history,
    }
    if state.dictionary is not None:
        state.dictionary.save(d)
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return d


def load_checkpoint(directory, table: DatasetTable) -> TrainState:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    cfg = TrainConfig(**{f.name: manifest["config"][f.name] for f in fields(TrainConfig)})
    theta = ParamBundle.load(d / "theta")
    phi = ParamBundle.load(d / "phi")
    rngs = {}
    for name, st in manifest["rng"].items():
        g = np.random.default_rng()
        g.bit_generator.state = st
        rngs[name] = g
    dictionary = CandidateDictionary.load(d, prepare_table(table, cfg)) if manifest["has_dictionary"] else None
    return TrainState(cfg, theta, phi, _load_moments(manifest["adam_theta"], d / "adam_theta", theta),
                      _load_moments(manifest["adam_phi"], d / "adam_phi", phi), dictionary, rngs,
                      manifest["step"], manifest["history"])
