"""Margin-ranking training of scoring-graph parameters.

The objective for a parameter set P over a dataset is

    total_loss(P) = sum_mentions margin_loss(mention) +
                    lambda * sum_gates sum(constraint_residuals)

where margin_loss sums max(0, -(s_pos - s_neg) + mu) over each positive
candidate paired with every negative in the same list. Optimization is
plain gradient descent with a fixed learning rate, stepped once per
mention: each step descends that mention's margin loss plus the full
constraint penalty, in an order shuffled deterministically from the seed.
Constraint slacks absorb what the weights cannot; the residual sum is
logged every epoch so constraint satisfaction stays auditable.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .corpus import Dataset
from .errors import TrainingDivergence
from .logic import ScoringGraph, sigmoid
from .simfeatures import FeatureCatalog, FeatureTable

logger = logging.getLogger(__name__)

LR_RANGE = (1e-5, 1e-1)
MU_RANGE = (0.6, 0.95)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    learning_rate: float = 1e-2
    mu: float = 0.6
    alpha: float = 0.7
    penalty_lambda: float = 10.0
    seed: int = 0
    batch: str = "per-mention"

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not LR_RANGE[0] <= self.learning_rate <= LR_RANGE[1]:
            raise ValueError(f"learning_rate must be in {LR_RANGE}")
        if not MU_RANGE[0] <= self.mu <= MU_RANGE[1]:
            raise ValueError(f"mu must be in {MU_RANGE}")
        if not 0.5 <= self.alpha < 1.0:
            raise ValueError("alpha must be in [1/2, 1)")
        if self.penalty_lambda < 0:
            raise ValueError("penalty_lambda must be >= 0")
        if self.batch != "per-mention":
            raise ValueError("only per-mention batching is supported")

    def to_json(self) -> dict:
        return {
            "epochs": self.epochs,
            "learning_rate": self.learning_rate,
            "mu": self.mu,
            "alpha": self.alpha,
            "penalty_lambda": self.penalty_lambda,
            "seed": self.seed,
            "batch": self.batch,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        return cls(**obj)


_CONFIG_KEYS = {
    "epochs": int,
    "learning_rate": float,
    "mu": float,
    "alpha": float,
    "penalty_lambda": float,
    "seed": int,
    "batch": str,
}


def load_config(path) -> TrainConfig:
    """Read a key=value config file; keys mirror TrainConfig fields."""
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path} line {line_no}: expected key = value")
            key, _, raw = line.partition("=")
            key = key.strip()
            if key not in _CONFIG_KEYS:
                raise ValueError(f"{path} line {line_no}: unknown key {key!r}")
            values[key] = _CONFIG_KEYS[key](raw.strip())
    return TrainConfig(**values)


@dataclass
class Model:
    """A scoring graph bound to the configuration and catalog it was fit with."""

    graph: ScoringGraph
    config: TrainConfig
    catalog: FeatureCatalog
    training_log: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "graph": self.graph.to_json(),
            "config": self.config.to_json(),
            "catalog": self.catalog.to_json(),
            "training_log": self.training_log,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Model":
        return cls(
            graph=ScoringGraph.from_json(obj["graph"]),
            config=TrainConfig.from_json(obj["config"]),
            catalog=FeatureCatalog.from_json(obj["catalog"]),
            training_log=list(obj["training_log"]),
        )


def save_model(model: Model, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model.to_json(), fh, sort_keys=True, separators=(",", ":"))


def load_model(path) -> Model:
    with open(path, "r", encoding="utf-8") as fh:
        return Model.from_json(json.load(fh))


def margin_loss(scores, labels, mu: float) -> float:
    """sum over positives p and negatives n of max(0, -(s_p - s_n) + mu)."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    positives = np.flatnonzero(labels == 1)
    if positives.size == 0:
        raise ValueError("margin loss needs at least one positive label")
    negatives = np.flatnonzero(labels == 0)
    if negatives.size == 0:
        return 0.0
    total = 0.0
    for p in positives:
        total += np.maximum(0.0, mu - (scores[p] - scores[negatives])).sum()
    return float(total)


def _margin_grad(scores: np.ndarray, labels, mu: float):
    """Loss plus d(loss)/d(score); sub-gradient 0 at the hinge kink."""
    labels = np.asarray(labels)
    positives = np.flatnonzero(labels == 1)
    negatives = np.flatnonzero(labels == 0)
    dscores = np.zeros_like(scores)
    loss = 0.0
    for p in positives:
        margins = mu - (scores[p] - scores[negatives])
        active = margins > 0.0
        loss += margins[active].sum()
        dscores[p] -= active.sum()
        dscores[negatives] += active
    return float(loss), dscores


def constraint_penalty(graph: ScoringGraph) -> float:
    """Summed hinge residuals over all gates (lnn mode only)."""
    return graph.residual_sum()


def _penalty_grads(graph: ScoringGraph, lam: float, grads: dict) -> None:
    if graph.mode != "lnn" or lam == 0.0:
        return
    alpha = graph.alpha
    for name, node in graph.gates():
        gate = node.gate
        w = gate.weights
        beta = float(gate.bias)
        r0_active = (alpha - (beta - (1.0 - alpha) * w.sum() + gate.slack_big)) > 0.0
        ri_active = ((beta - alpha * w) - (1.0 - alpha + gate.slacks)) > 0.0
        dbeta = lam * (-1.0 * r0_active + ri_active.sum())
        drho = lam * (
            r0_active * (1.0 - alpha) - alpha * ri_active
        ) * sigmoid(gate.raw_weights)
        ddelta = lam * (-1.0) * ri_active * sigmoid(gate.raw_slacks)
        dbig = lam * (-1.0) * r0_active * sigmoid(gate.raw_slack_big)
        grads[f"{name}.beta"] = grads.get(f"{name}.beta", 0.0) + dbeta
        grads[f"{name}.rho"] = grads.get(f"{name}.rho", 0.0) + drho
        grads[f"{name}.delta"] = grads.get(f"{name}.delta", 0.0) + ddelta
        grads[f"{name}.Delta"] = grads.get(f"{name}.Delta", 0.0) + dbig


def total_loss(graph: ScoringGraph, table: FeatureTable, ds: Dataset, config: TrainConfig) -> float:
    """Margin loss summed over mentions plus the weighted constraint penalty."""
    total = 0.0
    for inst in ds.instances:
        cols = table.columns(inst, graph.feature_names)
        scores = graph.evaluate_batch(cols)
        if np.any(~np.isfinite(scores)):
            raise TrainingDivergence(
                f"non-finite score for mention {inst.mention.id!r}", log=[]
            )
        total += margin_loss(scores, inst.labels, config.mu)
    if graph.mode == "lnn":
        total += config.penalty_lambda * constraint_penalty(graph)
    return float(total)


def gradients(graph: ScoringGraph, table: FeatureTable, ds: Dataset, config: TrainConfig) -> dict:
    """Exact d(total_loss)/d(raw parameter), reverse-mode over the graph.

    Matches central finite differences away from clamp and hinge kinks.
    """
    params = graph.parameters()
    grads: dict = {name: np.zeros_like(arr) for name, arr in params.items()}
    if not params:
        return grads
    for inst in ds.instances:
        cols = table.columns(inst, graph.feature_names)
        scores = graph.evaluate_batch(cols)
        _, dscores = _margin_grad(scores, inst.labels, config.mu)
        if np.any(dscores != 0.0):
            graph.backward(cols, dscores, grads)
    if graph.mode == "lnn":
        _penalty_grads(graph, config.penalty_lambda, grads)
    return {name: np.asarray(g) for name, g in grads.items()}


def train(
    ds: Dataset,
    table: FeatureTable,
    graph: ScoringGraph,
    config: TrainConfig,
    catalog: FeatureCatalog | None = None,
) -> Model:
    """Per-mention gradient descent for ``config.epochs`` passes.

    Deterministic given the seed: the mention order is reshuffled each
    epoch from one seeded generator and updates apply in that order. Each
    epoch appends the exact total loss and residual sum to the log.
    """
    if abs(graph.alpha - config.alpha) > 1e-12:
        raise ValueError(
            f"graph alpha {graph.alpha} differs from config alpha {config.alpha}"
        )
    catalog_names = set(table.feature_names)
    missing = [n for n in graph.feature_names if n not in catalog_names]
    if missing:
        raise ValueError(f"feature table lacks columns: {', '.join(missing)}")

    params = graph.parameters()
    rng = np.random.default_rng(config.seed)
    log: list[dict] = []
    instances = list(ds.instances)
    prefetched = [table.columns(inst, graph.feature_names) for inst in instances]

    for epoch in range(config.epochs):
        order = rng.permutation(len(instances))
        for idx in order:
            inst = instances[idx]
            cols = prefetched[idx]
            grads: dict = {}
            if params:
                scores = graph.evaluate_batch(cols)
                _, dscores = _margin_grad(scores, inst.labels, config.mu)
                if np.any(dscores != 0.0):
                    graph.backward(cols, dscores, grads)
                _penalty_grads(graph, config.penalty_lambda, grads)
            for name, g in grads.items():
                params[name] -= config.learning_rate * g
        loss = total_loss(graph, table, ds, config)
        violation = graph.residual_sum()
        log.append({"epoch": epoch, "loss": loss, "violation": violation})
        if not np.isfinite(loss) or loss > 1e6:
            raise TrainingDivergence(f"loss {loss} diverged at epoch {epoch}", log=log)
    if log:
        logger.info(
            "trained %d epochs: loss %.6f, residual sum %.2e",
            config.epochs,
            log[-1]["loss"],
            log[-1]["violation"],
        )
    return Model(graph=graph, config=config, catalog=catalog or FeatureCatalog(), training_log=log)


def hyperparameter_search(
    ds_train: Dataset,
    table_train: FeatureTable,
    ds_dev: Dataset,
    table_dev: FeatureTable,
    graph_factory,
    mu_values,
    lr_values,
    base: TrainConfig | None = None,
) -> TrainConfig:
    """Grid search over margin and learning rate, maximizing dev F1.

    Ties break toward the lower learning rate, then the lower margin. Every
    trial compiles a fresh graph via ``graph_factory``.
    """
    from .evaluation import link, prf1

    base = base or TrainConfig()
    mu_values = list(mu_values)
    lr_values = list(lr_values)
    if not mu_values or not lr_values:
        raise ValueError("empty hyperparameter grid")
    best: tuple | None = None
    failures: list[str] = []
    for mu in mu_values:
        for lr in lr_values:
            config = replace(base, mu=mu, learning_rate=lr)
            graph = graph_factory()
            try:
                model = train(ds_train, table_train, graph, config)
            except TrainingDivergence as exc:
                failures.append(f"mu={mu}, lr={lr}: {exc}")
                continue
            report = prf1(link(model, ds_dev, table_dev), ds_dev)
            key = (-report.f1, lr, mu)
            logger.info("grid mu=%s lr=%s -> dev F1 %.4f", mu, lr, report.f1)
            if best is None or key < best[0]:
                best = (key, config)
    if best is None:
        raise TrainingDivergence(
            "every grid configuration diverged: " + "; ".join(failures), log=failures
        )
    return best[1]
