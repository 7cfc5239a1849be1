"""Simulated multi-institution federated averaging.

Each round, every client copies the current global parameters, trains exactly
one epoch on its local data, and uploads the resulting parameters together
with its sample count. The server forms the convex combination of all client
arrays (running batchnorm statistics included by default) and redistributes
the global model. Only ClientUpdate values cross the client/server boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ProtocolError, TrainingError
from .network import (AdamState, LayerSpec, ParameterSet, TrainConfig, Workspace,
                      he_init, train_epoch)

RUNNING_VAR_FLOOR = 1e-12

AGGREGATION_KINDS = ("weighted_by_samples", "uniform")


@dataclass(frozen=True)
class AggregationScheme:
    kind: str = "weighted_by_samples"

    def __post_init__(self):
        if self.kind not in AGGREGATION_KINDS:
            raise ProtocolError(f"unknown aggregation scheme {self.kind!r}")


@dataclass
class ClientState:
    """One institution: its private training data, rng, and optimizer state.

    The optimizer state stays local across rounds and is only reused when
    persist_optimizer_state is set; by default every round starts from fresh
    Adam moments.
    """

    site_id: str
    features: np.ndarray
    labels: np.ndarray
    rng: np.random.Generator
    optimizer_state: AdamState | None = None
    workspace: Workspace | None = None


@dataclass
class ClientUpdate:
    """What a client transmits after a round: parameters and sample count.

    site_id identifies the sender so the server can report shape mismatches
    and keep a fixed aggregation order.
    """

    site_id: str
    params: ParameterSet
    sample_count: int


@dataclass
class TelemetryRecord:
    round_index: int
    site_id: str
    loss: float
    weight: float


def local_round(client: ClientState, global_params: ParameterSet, cfg: TrainConfig,
                persist_optimizer_state: bool = False) -> tuple[ClientUpdate, float]:
    """One client round: copy the global model, train one epoch locally.

    Returns the update plus the client's mean training loss (telemetry only;
    the loss never reaches the aggregation path).
    """
    n = int(client.labels.shape[0])
    if n < 2:
        raise TrainingError(f"client {client.site_id!r} has {n} training samples; "
                            f"at least 2 are required")
    params = global_params.copy()
    if persist_optimizer_state and client.optimizer_state is not None:
        state = client.optimizer_state
    else:
        state = AdamState.zeros_for(params)
    if client.workspace is None:
        client.workspace = Workspace(params.specs, min(n, cfg.batch_size + 1))
    params, state, loss = train_epoch(params, state, client.features, client.labels,
                                      cfg, client.rng, workspace=client.workspace)
    client.optimizer_state = state if persist_optimizer_state else None
    return ClientUpdate(site_id=client.site_id, params=params, sample_count=n), loss


def aggregation_weights(updates: Sequence[ClientUpdate],
                        scheme: AggregationScheme) -> list[float]:
    if scheme.kind == "uniform":
        return [1.0 / len(updates)] * len(updates)
    total = sum(u.sample_count for u in updates)
    return [u.sample_count / total for u in updates]


def aggregate(updates: Sequence[ClientUpdate],
              scheme: AggregationScheme = AggregationScheme()) -> ParameterSet:
    """Convex combination of all client arrays, running statistics included.

    Updates are summed in site_id order so the result is bit-identical under
    any permutation of the input list. The aggregated running variance is
    clamped to stay strictly positive.
    """
    if not updates:
        raise ProtocolError("cannot aggregate an empty round")
    ordered = sorted(updates, key=lambda u: u.site_id)
    reference = ordered[0]
    ref_shapes = [(name, arr.shape) for name, arr in reference.params.named_arrays()]
    for u in ordered[1:]:
        shapes = [(name, arr.shape) for name, arr in u.params.named_arrays()]
        if shapes != ref_shapes:
            raise ProtocolError(f"update from site {u.site_id!r} is not shape-compatible "
                                f"with site {reference.site_id!r}")
    weights = aggregation_weights(ordered, scheme)
    result = reference.params.copy()
    arrays = [list(arr for _, arr in u.params.named_arrays()) for u in ordered]
    for slot, (_, out_arr) in enumerate(result.named_arrays()):
        np.multiply(arrays[0][slot], weights[0], out=out_arr)
        for k in range(1, len(ordered)):
            out_arr += weights[k] * arrays[k][slot]
    for lp in result.layers:
        if lp.running_var is not None:
            np.maximum(lp.running_var, RUNNING_VAR_FLOOR, out=lp.running_var)
    return result


def run_federated_training(clients: Sequence[ClientState], specs: Sequence[LayerSpec],
                           rounds: int, cfg: TrainConfig,
                           scheme: AggregationScheme = AggregationScheme(),
                           init_rng: np.random.Generator | None = None,
                           persist_optimizer_state: bool = False,
                           aggregate_bn_stats: bool = True,
                           ) -> tuple[ParameterSet, list[TelemetryRecord]]:
    """Full federated run: init once, then `rounds` x (local epochs, aggregate).

    With aggregate_bn_stats off, only trainable arrays are averaged and the
    global running statistics keep their previous values. Any client failure
    aborts the run.
    """
    if not clients:
        raise ProtocolError("need at least one client")
    if rounds < 1:
        raise ProtocolError("need at least one round")
    if init_rng is None:
        init_rng = np.random.default_rng(cfg.seed)
    global_params = he_init(specs, init_rng, cfg.bn_momentum, cfg.bn_epsilon)
    telemetry: list[TelemetryRecord] = []
    for round_index in range(rounds):
        updates = []
        losses = []
        for client in clients:
            try:
                update, loss = local_round(client, global_params, cfg,
                                           persist_optimizer_state=persist_optimizer_state)
            except TrainingError as exc:
                raise TrainingError(f"round {round_index}: {exc}") from exc
            updates.append(update)
            losses.append(loss)
        new_global = aggregate(updates, scheme)
        if not aggregate_bn_stats:
            for new_lp, old_lp in zip(new_global.layers, global_params.layers):
                if new_lp.running_mean is not None:
                    np.copyto(new_lp.running_mean, old_lp.running_mean)
                    np.copyto(new_lp.running_var, old_lp.running_var)
        weight_by_site = dict(zip([u.site_id for u in sorted(updates, key=lambda u: u.site_id)],
                                  aggregation_weights(sorted(updates, key=lambda u: u.site_id),
                                                      scheme)))
        for client, loss in zip(clients, losses):
            telemetry.append(TelemetryRecord(round_index=round_index, site_id=client.site_id,
                                             loss=loss, weight=weight_by_site[client.site_id]))
        global_params = new_global
    return global_params, telemetry
