"""Server-side aggregation strategies behind one dispatching interface.

Strategies
----------
fedavg        sample-count weighted average, beta_k = n_k / sum(n_j)
fairavg       uniform 1/K average
loss          softmax of negated mean local losses as weights
mdawa         uniform average with each client scaled by its whole-model
              angular divergence: (1/K) * sum_k delta_k * w_k
ldawa         as mdawa, but with one divergence per layer:
              layer l of the result = (1/K) * sum_k delta_k(l) * w_k(l)
ldawa_fedavg  sample-count base weights times per-layer divergence
ldawa_loss    loss-softmax base weights times per-layer divergence
ldawa_fedu    server side identical to ldawa_fedavg; the client-side
              partial-update policy lives in the engine

There is deliberately no renormalization by the divergence sum: when clients
diverge the aggregate's norm contracts (an optional ``renormalize`` switch
exists but defaults off). Client contributions are always accumulated in
ascending client_id order so results are bit-reproducible regardless of
input order or worker scheduling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .divergence import DivergenceReport, layer_divergence
from .params import ParamSet, weighted_sum, weighted_sum_per_layer

STRATEGIES = (
    "fedavg",
    "fairavg",
    "loss",
    "mdawa",
    "ldawa",
    "ldawa_fedavg",
    "ldawa_loss",
    "ldawa_fedu",
)

# Strategies whose coefficients consume the uploaded client metadata.
METADATA_STRATEGIES = ("fedavg", "loss", "ldawa_fedavg", "ldawa_loss", "ldawa_fedu")


@dataclass(frozen=True)
class ClientUpdate:
    """One client's trained model plus the metadata it uploads."""

    client_id: int | str
    params: ParamSet
    num_samples: int
    train_loss: float

    def __post_init__(self) -> None:
        if self.num_samples < 1:
            raise ValueError(f"client {self.client_id}: num_samples must be >= 1")
        if not math.isfinite(self.train_loss):
            raise ValueError(f"client {self.client_id}: train_loss is not finite")


@dataclass(frozen=True)
class AggregationSpec:
    """Which strategy to run and how.

    While ``round < warmup_rounds`` the effective strategy is forced to
    fedavg. ``fedu_threshold`` is the client-side policy parameter consumed
    by the engine; None disables the policy.
    """

    strategy: str
    warmup_rounds: int = 0
    fedu_threshold: float | None = None
    renormalize: bool = False

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(
                f"unknown strategy {self.strategy!r} (expected one of {', '.join(STRATEGIES)})"
            )
        if self.warmup_rounds < 0:
            raise ValueError("warmup_rounds must be >= 0")
        if self.fedu_threshold is not None and not self.fedu_threshold > 0:
            raise ValueError("fedu_threshold must be positive")


def effective_strategy(spec: AggregationSpec, round_index: int) -> str:
    return "fedavg" if round_index < spec.warmup_rounds else spec.strategy


def _sorted_updates(updates: Sequence[ClientUpdate]) -> list[ClientUpdate]:
    ups = list(updates)
    if not ups:
        raise ValueError("no client updates to aggregate")
    return sorted(ups, key=lambda u: u.client_id)


def coeffs_fedavg(updates: Sequence[ClientUpdate]) -> list[float]:
    """Coefficients proportional to sample counts, summing to 1."""
    if not updates:
        raise ValueError("coeffs_fedavg: no updates")
    total = sum(u.num_samples for u in updates)
    return [u.num_samples / total for u in updates]


def coeffs_loss(updates: Sequence[ClientUpdate]) -> list[float]:
    """Softmax of negated mean local losses, computed with max-subtraction."""
    if not updates:
        raise ValueError("coeffs_loss: no updates")
    neg = np.array([-u.train_loss for u in updates], dtype=np.float64)
    neg -= neg.max()
    ex = np.exp(neg)
    return [float(v) for v in ex / ex.sum()]


def divergence_reports(
    global_params: ParamSet, updates: Sequence[ClientUpdate]
) -> list[DivergenceReport]:
    """Per-client divergence against the incoming global, in the given order."""
    return [layer_divergence(global_params, u.params, client_id=u.client_id) for u in updates]


def _reports_for(
    global_params: ParamSet,
    updates: Sequence[ClientUpdate],
    reports: Sequence[DivergenceReport] | None,
) -> list[DivergenceReport]:
    if reports is None:
        return divergence_reports(global_params, updates)
    by_id = {r.client_id: r for r in reports}
    try:
        return [by_id[u.client_id] for u in updates]
    except KeyError as exc:
        raise ValueError(f"no divergence report for client {exc.args[0]!r}") from exc


def aggregate_mdawa(
    global_params: ParamSet,
    updates: Sequence[ClientUpdate],
    reports: Sequence[DivergenceReport] | None = None,
) -> ParamSet:
    """Whole-model divergence scaling: (1/K) * sum_k delta_k * w_k."""
    ups = _sorted_updates(updates)
    reps = _reports_for(global_params, ups, reports)
    k = len(ups)
    return weighted_sum([u.params for u in ups], [r.model_delta / k for r in reps])


def aggregate_ldawa(
    global_params: ParamSet,
    updates: Sequence[ClientUpdate],
    reports: Sequence[DivergenceReport] | None = None,
) -> ParamSet:
    """Layer-wise divergence scaling: layer l = (1/K) * sum_k delta_k(l) * w_k(l)."""
    ups = _sorted_updates(updates)
    k = len(ups)
    return aggregate_weighted_ldawa(global_params, ups, [1.0 / k] * k, reports=reports)


def aggregate_weighted_ldawa(
    global_params: ParamSet,
    updates: Sequence[ClientUpdate],
    base_coeffs: Sequence[float],
    reports: Sequence[DivergenceReport] | None = None,
) -> ParamSet:
    """Layer l of the result = sum_k base_coeffs[k] * delta_k(l) * w_k(l).

    With uniform base coefficients 1/K this is exactly ``aggregate_ldawa``;
    with sample-count or loss-softmax base coefficients it yields the
    corresponding hybrid rule.
    """
    if len(base_coeffs) != len(updates):
        raise ValueError(
            f"{len(updates)} updates but {len(base_coeffs)} base coefficients"
        )
    order = sorted(range(len(updates)), key=lambda i: updates[i].client_id)
    ups = [updates[i] for i in order]
    coeffs = [float(base_coeffs[i]) for i in order]
    reps = _reports_for(global_params, ups, reports)
    table = [
        {name: c * r.per_layer_delta[name] for name in global_params.names}
        for c, r in zip(coeffs, reps)
    ]
    return weighted_sum_per_layer([u.params for u in ups], table)


def _renormalize_table(table: list[dict[str, float]], names: Sequence[str]) -> None:
    # Per-layer normalization so coefficients sum to 1; degenerate sums are
    # left untouched rather than amplified.
    for name in names:
        s = sum(row[name] for row in table)
        if abs(s) > 1e-12:
            for row in table:
                row[name] /= s


def aggregate(
    spec: AggregationSpec,
    round_index: int,
    global_params: ParamSet,
    updates: Sequence[ClientUpdate],
) -> tuple[ParamSet, list[DivergenceReport]]:
    """Dispatch one aggregation round.

    Returns the new global model and the divergence reports of every client
    against the incoming global (computed for telemetry regardless of
    strategy). While ``round_index < spec.warmup_rounds`` the fedavg rule is
    applied no matter what ``spec.strategy`` says.
    """
    ups = _sorted_updates(updates)
    for u in ups:
        global_params.require_compatible(u.params)
    reports = divergence_reports(global_params, ups)
    strategy = effective_strategy(spec, round_index)
    k = len(ups)

    if strategy == "fedavg":
        new_global = weighted_sum([u.params for u in ups], coeffs_fedavg(ups))
    elif strategy == "fairavg":
        new_global = weighted_sum([u.params for u in ups], [1.0 / k] * k)
    elif strategy == "loss":
        new_global = weighted_sum([u.params for u in ups], coeffs_loss(ups))
    elif strategy == "mdawa":
        new_global = _dawa(global_params, ups, [1.0 / k] * k, reports, spec.renormalize, whole_model=True)
    elif strategy == "ldawa":
        new_global = _dawa(global_params, ups, [1.0 / k] * k, reports, spec.renormalize)
    elif strategy in ("ldawa_fedavg", "ldawa_fedu"):
        new_global = _dawa(global_params, ups, coeffs_fedavg(ups), reports, spec.renormalize)
    elif strategy == "ldawa_loss":
        new_global = _dawa(global_params, ups, coeffs_loss(ups), reports, spec.renormalize)
    else:  # pragma: no cover - AggregationSpec already validates
        raise ValueError(f"unknown strategy {strategy!r}")
    return new_global, reports


def _dawa(
    global_params: ParamSet,
    ups: list[ClientUpdate],
    base_coeffs: list[float],
    reports: list[DivergenceReport],
    renormalize: bool,
    whole_model: bool = False,
) -> ParamSet:
    if not renormalize:
        if whole_model:
            return aggregate_mdawa(global_params, ups, reports=reports)
        return aggregate_weighted_ldawa(global_params, ups, base_coeffs, reports=reports)
    names = global_params.names
    table = []
    for c, r in zip(base_coeffs, reports):
        if whole_model:
            table.append({name: c * r.model_delta for name in names})
        else:
            table.append({name: c * r.per_layer_delta[name] for name in names})
    _renormalize_table(table, names)
    return weighted_sum_per_layer([u.params for u in ups], table)
