"""Federated round driver: grouping, local training, and aggregation.

A round alternates between two sub-stages. Class-grouping rounds train one
prompt network per domain group and average same-group updates; decoupling
rounds train the shared global prompt plus each client's domain prompt,
aggregate domain prompts by dataset-size weighting, and smooth them with
beta-weighted momentum over the aggregation history.

run_round is a pure transition: it never mutates its inputs, and identical
(state, partitions, store, config) produce bitwise-identical successors.
Aggregation consumes updates sorted by client_id, so results are invariant
to the order clients report in.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .encoder import TextEncoderStub
from .errors import ConfigError, ProtocolError
from .model import (
    OptimizerState,
    PromptBank,
    PromptNetParams,
    add_params,
    bank_copy,
    copy_params,
    cosine_lr,
    init_prompt_bank,
    init_prompt_net,
    scale_params,
    sgd_step,
    stage_a_loss_and_grad,
    stage_b_loss_and_grad,
    sub_params,
    zeros_like_params,
)
from .store import ClientPartition, EmbeddingStore

_SAMPLE_STREAM = 0x53414D50
_SHUFFLE_STREAM = 0x53485546


class Stage(Enum):
    CLASS_GROUPING = "A"
    DOMAIN_DECOUPLING = "B"


def stage_for_round(pattern: str, round_index: int) -> Stage:
    char = pattern[round_index % len(pattern)]
    return Stage.CLASS_GROUPING if char == "A" else Stage.DOMAIN_DECOUPLING


@dataclass
class RoundState:
    """Server-side state between rounds."""

    round: int
    group_nets: dict[int, PromptNetParams]
    bank: PromptBank
    rng_seed: int
    stage: Stage


@dataclass
class ClientUpdate:
    """What one client uploads after local training.

    Exactly the fields of the active stage are present: net_delta for
    class-grouping rounds, the two prompt deltas for decoupling rounds.
    """

    client_id: int
    domain_index: int
    size: int
    local_loss: float
    net_delta: PromptNetParams | None = None
    domain_prompt_delta: np.ndarray | None = None
    global_prompt_delta: np.ndarray | None = None


@dataclass
class BetaSchedule:
    a: float = 2.0
    b: float = 2.0

    def validate(self) -> None:
        if self.a <= 0 or self.b <= 0:
            raise ValueError(f"beta shape parameters must be positive, got a={self.a} b={self.b}")


def group_by_domain(partitions: list[ClientPartition]) -> dict[int, list[int]]:
    """Bucket client ids by domain; keys and id lists in ascending order."""
    if not partitions:
        raise ValueError("partitions must be nonempty")
    groups: dict[int, list[int]] = {}
    for part in partitions:
        groups.setdefault(part.domain_index, []).append(part.client_id)
    return {d: sorted(ids) for d, ids in sorted(groups.items())}


def init_round_state(store: EmbeddingStore, partitions: list[ClientPartition], config) -> RoundState:
    """Fresh state at round 0; every store domain must have at least one client."""
    groups = group_by_domain(partitions)
    missing = [store.domains[d] for d in range(store.num_domains) if d not in groups]
    if missing:
        raise ConfigError(f"domains with no clients: {', '.join(missing)}")
    group_nets = {
        d: init_prompt_net([config.seed, d], config.l_p, config.d_h, store.token_dim, config.heads)
        for d in range(store.num_domains)
    }
    bank = init_prompt_bank(config.seed, store.num_domains, config.l_g, config.l_d, store.token_dim)
    return RoundState(
        round=0,
        group_nets=group_nets,
        bank=bank,
        rng_seed=config.seed,
        stage=stage_for_round(config.stage_pattern, 0),
    )


def _batches(indices: np.ndarray, batch_size: int) -> list[np.ndarray]:
    return [indices[i : i + batch_size] for i in range(0, len(indices), batch_size)]


def local_train_stage_a(
    net: PromptNetParams,
    client: ClientPartition,
    store: EmbeddingStore,
    stub: TextEncoderStub,
    epochs: int,
    batch_size: int,
    opt: OptimizerState,
    tau: float = 0.07,
    shuffle_seed=0,
    expected_domain: int | None = None,
) -> ClientUpdate:
    """Train a local copy of the group net; upload the parameter delta.

    The server's net is untouched. epochs=0 evaluates the loss once and
    returns a zero delta. Identical (data, seeds, opt) give identical
    deltas regardless of which client object runs them.
    """
    if expected_domain is not None and client.domain_index != expected_domain:
        raise ProtocolError(
            f"client {client.client_id} has domain {client.domain_index}, "
            f"expected group {expected_domain}"
        )
    if epochs < 0 or batch_size < 1:
        raise ValueError("epochs must be >= 0 and batch_size >= 1")

    params = copy_params(net)
    if epochs == 0:
        loss, _ = stage_a_loss_and_grad(
            params, stub, store, client.image_indices, client.class_indices, tau=tau
        )
        return ClientUpdate(
            client_id=client.client_id,
            domain_index=client.domain_index,
            size=client.size,
            local_loss=loss,
            net_delta=zeros_like_params(net),
        )

    rng = np.random.default_rng([_SHUFFLE_STREAM, *np.atleast_1d(shuffle_seed)])
    losses: list[float] = []
    for _ in range(epochs):
        order = rng.permutation(client.image_indices)
        for batch in _batches(order, batch_size):
            loss, grads = stage_a_loss_and_grad(
                params, stub, store, batch, client.class_indices, tau=tau
            )
            params = sgd_step(params, grads, opt)
            losses.append(loss)
    return ClientUpdate(
        client_id=client.client_id,
        domain_index=client.domain_index,
        size=client.size,
        local_loss=float(np.mean(losses)),
        net_delta=sub_params(params, net),
    )


def local_train_stage_b(
    bank: PromptBank,
    client: ClientPartition,
    store: EmbeddingStore,
    stub: TextEncoderStub,
    epochs: int,
    batch_size: int,
    opt: OptimizerState,
    mix: float,
    tau: float = 0.07,
    shuffle_seed=0,
    expected_domain: int | None = None,
) -> ClientUpdate:
    """Train local copies of the global and own-domain prompts; upload deltas.

    Prompt-network parameters are not inputs to this path, so they are
    untouched by construction. Both prompts advance with the same learning
    rate each batch (one scheduler step per batch, not per tensor).
    """
    if expected_domain is not None and client.domain_index != expected_domain:
        raise ProtocolError(
            f"client {client.client_id} has domain {client.domain_index}, "
            f"expected group {expected_domain}"
        )
    if epochs < 0 or batch_size < 1:
        raise ValueError("epochs must be >= 0 and batch_size >= 1")

    d = client.domain_index
    p_global = bank.global_prompt.copy()
    p_domain = bank.domain_prompts[d].copy()
    if epochs == 0:
        loss, _, _ = stage_b_loss_and_grad(
            bank, d, stub, store, client.image_indices, tau, mix
        )
        return ClientUpdate(
            client_id=client.client_id,
            domain_index=d,
            size=client.size,
            local_loss=loss,
            domain_prompt_delta=np.zeros_like(p_domain),
            global_prompt_delta=np.zeros_like(p_global),
        )

    local_bank = PromptBank(
        global_prompt=p_global,
        domain_prompts=[p_domain if i == d else p for i, p in enumerate(bank.domain_prompts)],
        prompt_history=bank.prompt_history,
    )
    rng = np.random.default_rng([_SHUFFLE_STREAM, *np.atleast_1d(shuffle_seed)])
    losses: list[float] = []
    for _ in range(epochs):
        order = rng.permutation(client.image_indices)
        for batch in _batches(order, batch_size):
            loss, grad_g, grad_d = stage_b_loss_and_grad(
                local_bank, d, stub, store, batch, tau, mix
            )
            lr = cosine_lr(opt)
            p_global -= lr * grad_g
            p_domain -= lr * grad_d
            opt.step += 1
            losses.append(loss)
    return ClientUpdate(
        client_id=client.client_id,
        domain_index=d,
        size=client.size,
        local_loss=float(np.mean(losses)),
        domain_prompt_delta=p_domain - bank.domain_prompts[d],
        global_prompt_delta=p_global - bank.global_prompt,
    )


def _sorted_updates(updates: list[ClientUpdate]) -> list[ClientUpdate]:
    return sorted(updates, key=lambda u: u.client_id)


def aggregate_group_nets(
    updates: list[ClientUpdate], current: PromptNetParams
) -> PromptNetParams:
    """current + unweighted mean of same-group net deltas (ascending id order)."""
    if not updates:
        raise ValueError("updates must be nonempty")
    domains = {u.domain_index for u in updates}
    if len(domains) != 1:
        raise ProtocolError(f"updates mix domains {sorted(domains)}")
    acc = zeros_like_params(current)
    for update in _sorted_updates(updates):
        if update.net_delta is None:
            raise ProtocolError(f"client {update.client_id} update carries no net delta")
        acc = add_params(acc, update.net_delta)
    return add_params(current, scale_params(acc, 1.0 / len(updates)))


def domain_wise_aggregate(v: np.ndarray, updates: list[ClientUpdate]) -> np.ndarray:
    """v + dataset-size-weighted mean of domain prompt deltas.

    Weighted sum runs in ascending client_id order in float64, so any input
    permutation produces bitwise-identical output.
    """
    if not updates:
        raise ValueError("updates must be nonempty")
    domains = {u.domain_index for u in updates}
    if len(domains) != 1:
        raise ProtocolError(f"updates mix domains {sorted(domains)}")
    total = 0
    acc = np.zeros_like(v, dtype=np.float64)
    for update in _sorted_updates(updates):
        if update.domain_prompt_delta is None:
            raise ProtocolError(f"client {update.client_id} update carries no prompt delta")
        if update.size < 1:
            raise ValueError(f"client {update.client_id} has size {update.size}")
        acc += update.size * update.domain_prompt_delta
        total += update.size
    return v + acc / total


def beta_alphas(schedule: BetaSchedule, s: int) -> np.ndarray:
    """Beta pdf evaluated at the interior points (j+1)/(s+2), j = 0..s.

    Interior abscissae keep every weight finite and strictly positive for
    all shape parameters.
    """
    schedule.validate()
    if s < 0:
        raise ValueError("s must be >= 0")
    a, b = schedule.a, schedule.b
    log_beta = math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)
    x = (np.arange(s + 1) + 1.0) / (s + 2.0)
    return np.exp((a - 1.0) * np.log(x) + (b - 1.0) * np.log1p(-x) - log_beta)


def beta_momentum_average(
    history: list[np.ndarray],
    alphas: np.ndarray,
    v_new: np.ndarray,
    normalized: bool = False,
) -> np.ndarray:
    """Blend the aggregation history with the newest aggregate.

    Default form: (sum_j alpha_j V^j) / (sum_j alpha_j) + alpha_s * v_new,
    with alpha_s the last history weight; the final term is deliberately
    outside the normalizer. With normalized=True the new term joins the
    normalized sum, making the result a convex combination (so all-equal
    inputs are a fixed point).
    """
    if not history:
        raise ValueError("history must be nonempty")
    if len(alphas) != len(history):
        raise ValueError(f"{len(alphas)} weights for {len(history)} history entries")
    acc = np.zeros_like(v_new, dtype=np.float64)
    for alpha, v in zip(alphas, history):
        if v.shape != v_new.shape:
            raise ValueError(f"history shape {v.shape} != v_new shape {v_new.shape}")
        acc += alpha * v
    alpha_s = float(alphas[-1])
    if normalized:
        return (acc + alpha_s * v_new) / (float(np.sum(alphas)) + alpha_s)
    return acc / float(np.sum(alphas)) + alpha_s * v_new


def _sample_groups(
    groups: dict[int, list[int]], participation: float, rng_seed: int, round_index: int
) -> dict[int, list[int]]:
    rng = np.random.default_rng([_SAMPLE_STREAM, rng_seed, round_index])
    sampled: dict[int, list[int]] = {}
    for d, ids in groups.items():
        k = int(math.floor(participation * len(ids)))
        if k == 0:
            sampled[d] = []
        else:
            picked = rng.choice(np.array(ids), size=k, replace=False)
            sampled[d] = sorted(int(i) for i in picked)
    return sampled


def run_round(
    state: RoundState,
    partitions: list[ClientPartition],
    store: EmbeddingStore,
    stub: TextEncoderStub,
    config,
    log: list | None = None,
) -> RoundState:
    """Advance the protocol by one round; optionally append a log record.

    Client sampling is seeded by (rng_seed, round). Groups that sample zero
    clients, or whose sampled clients all report exactly-zero deltas, carry
    over unchanged: consensus means there is nothing to fold in, and
    re-applying momentum to an unchanged aggregate would drift state
    without new information.
    """
    expected = stage_for_round(config.stage_pattern, state.round)
    if state.stage != expected:
        raise ProtocolError(
            f"round {state.round} carries stage {state.stage.value}, pattern says {expected.value}"
        )
    by_id = {p.client_id: p for p in partitions}
    groups = group_by_domain(partitions)
    sampled = _sample_groups(groups, config.participation, state.rng_seed, state.round)

    round_lr = cosine_lr(
        OptimizerState(
            base_lr=config.base_lr,
            min_lr=config.min_lr,
            total_steps=max(config.rounds, 1),
            step=min(state.round, max(config.rounds, 1)),
        )
    )

    started = time.perf_counter()
    carried: list[int] = []
    group_losses: dict[str, float] = {}
    new_nets = dict(state.group_nets)
    new_bank = state.bank

    def client_opt(part: ClientPartition) -> OptimizerState:
        steps = max(1, config.local_epochs * math.ceil(part.size / config.batch_size))
        return OptimizerState(base_lr=round_lr, min_lr=round_lr, total_steps=steps)

    if state.stage is Stage.CLASS_GROUPING:
        for d, ids in sampled.items():
            if not ids:
                carried.append(d)
                continue
            updates = [
                local_train_stage_a(
                    state.group_nets[d],
                    by_id[cid],
                    store,
                    stub,
                    config.local_epochs,
                    config.batch_size,
                    client_opt(by_id[cid]),
                    tau=config.tau,
                    shuffle_seed=[config.seed, state.round, cid],
                    expected_domain=d,
                )
                for cid in ids
            ]
            group_losses[str(d)] = float(np.mean([u.local_loss for u in updates]))
            new_nets[d] = aggregate_group_nets(updates, state.group_nets[d])
    else:
        new_bank = bank_copy(state.bank)
        schedule = BetaSchedule(a=config.beta_a, b=config.beta_b)
        all_updates: list[ClientUpdate] = []
        for d, ids in sampled.items():
            if not ids:
                carried.append(d)
                continue
            updates = [
                local_train_stage_b(
                    state.bank,
                    by_id[cid],
                    store,
                    stub,
                    config.local_epochs,
                    config.batch_size,
                    client_opt(by_id[cid]),
                    config.mix,
                    tau=config.tau,
                    shuffle_seed=[config.seed, state.round, cid],
                    expected_domain=d,
                )
                for cid in ids
            ]
            group_losses[str(d)] = float(np.mean([u.local_loss for u in updates]))
            all_updates.extend(updates)
            current = state.bank.domain_prompts[d]
            v_next = domain_wise_aggregate(current, updates)
            if np.array_equal(v_next, current):
                continue
            history = state.bank.prompt_history[d]
            alphas = beta_alphas(schedule, len(history) - 1)
            new_bank.domain_prompts[d] = beta_momentum_average(
                history, alphas, v_next, normalized=config.normalized_momentum
            )
            new_bank.prompt_history[d].append(v_next.copy())
        if all_updates:
            acc = np.zeros_like(state.bank.global_prompt)
            for update in _sorted_updates(all_updates):
                acc += update.global_prompt_delta
            delta = acc / len(all_updates)
            if delta.any():
                new_bank.global_prompt = state.bank.global_prompt + delta

    if log is not None:
        log.append(
            {
                "round": state.round,
                "stage": state.stage.value,
                "sampled_clients": sorted(c for ids in sampled.values() for c in ids),
                "group_losses": group_losses,
                "carried_over": sorted(carried),
                "wall_ms": (time.perf_counter() - started) * 1000.0,
            }
        )
    return RoundState(
        round=state.round + 1,
        group_nets=new_nets,
        bank=new_bank,
        rng_seed=state.rng_seed,
        stage=stage_for_round(config.stage_pattern, state.round + 1),
    )
