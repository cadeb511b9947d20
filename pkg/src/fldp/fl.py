"""Federated round engine: client selection, local update behaviors, and the
server-side aggregation/defense matrix (plain FedAvg, norm bounding, weak DP,
central DP) with budget-guarded stopping.

Determinism: every stochastic choice draws from a stream keyed by
(round, client), and aggregation reduces updates in client-id order, so
results do not depend on scheduling or arrival order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .nn import Batch, ModelArch, ParamVector, loss_and_grad, sgd_step
from .privacy import (
    CdpConfig,
    DpSgdConfig,
    PrivacyLedger,
    cdp_sigma,
    clip_to_norm,
    dp_sgd_train,
    gaussian_mechanism_eps,
    gaussian_noise,
)

CONTINUE = "continue"
STOP = "stop_with_current_model"


@dataclass(frozen=True)
class ClientUpdate:
    """A client's submitted parameter delta for one round."""

    delta: ParamVector
    n_examples: int
    client_id: int
    behavior_tag: str = "honest"

    def __post_init__(self):
        if self.n_examples < 1:
            raise ValueError("n_examples must be positive")


@dataclass(frozen=True)
class SelectionSpec:
    """Either a fixed number of clients per round or Bernoulli(q) selection."""

    kind: str  # "fixed" | "probability"
    k: int | None = None
    q: float | None = None

    def __post_init__(self):
        if self.kind == "fixed":
            if self.k is None or self.k < 1:
                raise ValueError("fixed selection needs k >= 1")
        elif self.kind == "probability":
            if self.q is None or not (0 < self.q <= 1):
                raise ValueError("probability selection needs q in (0, 1]")
        else:
            raise ValueError(f"unknown selection kind {self.kind!r}")


@dataclass(frozen=True)
class ServerConfig:
    aggregator: str  # "plain" | "norm_bound" | "weak_dp" | "cdp"
    server_lr: float
    selection: SelectionSpec
    rounds: int
    norm_threshold: float | None = None
    weak_dp_sigma: float = 0.0
    cdp: CdpConfig | None = None

    def __post_init__(self):
        if self.aggregator not in ("plain", "norm_bound", "weak_dp", "cdp"):
            raise ValueError(f"unknown aggregator {self.aggregator!r}")
        if self.server_lr <= 0:
            raise ValueError("server_lr must be positive")
        if self.rounds < 1:
            raise ValueError("rounds must be positive")
        if self.aggregator in ("norm_bound", "weak_dp"):
            if self.norm_threshold is None or self.norm_threshold <= 0:
                raise ValueError(f"{self.aggregator} needs a positive norm_threshold")
        if self.aggregator == "weak_dp" and self.weak_dp_sigma < 0:
            raise ValueError("weak_dp_sigma must be non-negative")
        if self.aggregator == "cdp" and self.cdp is None:
            raise ValueError("cdp aggregator needs a CdpConfig")


@dataclass
class RoundRecord:
    round_index: int
    main_accuracy: float | None
    backdoor_accuracy: float | None
    eps_spent: float | None
    selected_ids: tuple[int, ...]
    honest_selected_ids: tuple[int, ...]
    diagnostics: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Client-side behaviors
# ---------------------------------------------------------------------------

def _minibatches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


def client_update_honest(
    global_model: ParamVector,
    arch: ModelArch,
    shard,
    epochs: int,
    batch_size: int,
    lr: float,
    rng: np.random.Generator,
    client_id: int = 0,
) -> ClientUpdate:
    """Plain local minibatch SGD; delta = theta_local - theta_global."""
    x = np.asarray(shard.features, dtype=np.float64)
    y = np.asarray(shard.labels, dtype=np.int64)
    n = x.shape[0]
    if n == 0:
        raise ValueError("shard must be non-empty")
    theta = global_model
    for _ in range(epochs):
        for idx in _minibatches(n, batch_size, rng):
            _, grad = loss_and_grad(theta, arch, Batch(x[idx], y[idx]))
            theta = sgd_step(theta, grad, lr)
    return ClientUpdate(theta - global_model, n, client_id, "honest")


def client_update_ldp(
    global_model: ParamVector,
    arch: ModelArch,
    shard,
    cfg: DpSgdConfig,
    ledger: PrivacyLedger | None,
    rng: np.random.Generator,
    client_id: int = 0,
) -> ClientUpdate:
    """DP-SGD local training (record-level privacy against everyone)."""
    theta = dp_sgd_train(global_model, arch, shard, cfg, ledger, rng)
    return ClientUpdate(theta - global_model, len(shard), client_id, "ldp")


def client_update_clipped(
    global_model: ParamVector,
    arch: ModelArch,
    shard,
    epochs: int,
    batch_size: int,
    lr: float,
    clip_bound: float,
    rng: np.random.Generator,
    client_id: int = 0,
) -> ClientUpdate:
    """Local SGD where the cumulative delta is re-clipped after every batch,
    so the returned update norm never exceeds the bound."""
    x = np.asarray(shard.features, dtype=np.float64)
    y = np.asarray(shard.labels, dtype=np.int64)
    n = x.shape[0]
    if n == 0:
        raise ValueError("shard must be non-empty")
    theta = global_model
    for _ in range(epochs):
        for idx in _minibatches(n, batch_size, rng):
            _, grad = loss_and_grad(theta, arch, Batch(x[idx], y[idx]))
            theta = sgd_step(theta, grad, lr)
            theta = global_model + clip_to_norm(theta - global_model, clip_bound)
    return ClientUpdate(theta - global_model, n, client_id, "honest")


# ---------------------------------------------------------------------------
# Server-side selection and aggregation
# ---------------------------------------------------------------------------

def select_clients(n_clients: int, selection: SelectionSpec, rng: np.random.Generator) -> list[int]:
    """Fixed mode: uniform sample without replacement; probability mode:
    independent Bernoulli(q) per client. Sorted ids either way."""
    if selection.kind == "fixed":
        if selection.k > n_clients:
            raise ValueError(f"cannot select {selection.k} out of {n_clients} clients")
        return sorted(int(i) for i in rng.choice(n_clients, size=selection.k, replace=False))
    mask = rng.random(n_clients) < selection.q
    return [int(i) for i in np.flatnonzero(mask)]


def _sorted_updates(updates: list[ClientUpdate]) -> list[ClientUpdate]:
    if not updates:
        raise ValueError("need at least one update")
    return sorted(updates, key=lambda u: u.client_id)


def aggregate_plain(updates: list[ClientUpdate], weights=None) -> ParamVector:
    """Example-count-weighted mean of deltas (FedAvg in delta form)."""
    ups = _sorted_updates(updates)
    if weights is None:
        total = sum(u.n_examples for u in ups)
        weights = [u.n_examples / total for u in ups]
    else:
        weights = list(weights)
        if len(weights) != len(ups):
            raise ValueError("one weight per update required")
    acc = np.zeros_like(ups[0].delta.values)
    for w, u in zip(weights, ups):
        acc = acc + w * u.delta.values
    return ups[0].delta.with_values(acc)


def aggregate_norm_bound(updates: list[ClientUpdate], threshold: float) -> ParamVector:
    """Unweighted mean of updates scaled by 1 / max(1, ||delta|| / T)."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    ups = _sorted_updates(updates)
    acc = np.zeros_like(ups[0].delta.values)
    for u in ups:
        acc = acc + clip_to_norm(u.delta, threshold).values
    return ups[0].delta.with_values(acc / len(ups))


def aggregate_weak_dp(
    updates: list[ClientUpdate],
    threshold: float,
    sigma: float,
    ledger: PrivacyLedger,
    rng: np.random.Generator,
) -> ParamVector:
    """Norm bounding plus Gaussian noise; the naive ledger composes r * eps."""
    agg = aggregate_norm_bound(updates, threshold)
    noisy = agg + gaussian_noise(agg.shapes, sigma, rng)
    ledger.accumulate_naive(gaussian_mechanism_eps(threshold / len(updates), sigma, ledger.delta))
    return noisy


def aggregate_cdp(
    updates: list[ClientUpdate],
    cfg: CdpConfig,
    ledger: PrivacyLedger,
    rng: np.random.Generator,
) -> ParamVector:
    """Mean of (defensively re-clipped) deltas plus Gaussian noise; one
    accountant step per round."""
    ups = _sorted_updates(updates)
    acc = np.zeros_like(ups[0].delta.values)
    for u in ups:
        acc = acc + clip_to_norm(u.delta, cfg.clip_bound).values
    sigma = cdp_sigma(cfg, len(ups))
    noisy = acc / len(ups) + gaussian_noise(ups[0].delta.shapes, sigma, rng).values
    ledger.accumulate_rdp(q=cfg.selection_prob, z=cfg.noise_scale, steps=1)
    return ups[0].delta.with_values(noisy)


def budget_guard(ledger: PrivacyLedger, budget: float, delta: float | None = None) -> str:
    """Stop once the (eps, delta) spend exceeds the threshold."""
    if budget <= 0:
        raise ValueError("budget must be positive")
    eps = ledger.epsilon(delta)
    return STOP if eps > budget else CONTINUE


# ---------------------------------------------------------------------------
# Round engine
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClientSpec:
    """A participant: its id plus a behavior closure built by the harness."""

    client_id: int
    n_examples: int
    update_fn: Callable[[ParamVector, "RoundContext", np.random.Generator], ClientUpdate]


@dataclass(frozen=True)
class RoundContext:
    round_index: int
    selected_ids: tuple[int, ...]
    n_total_examples: int
    server_lr: float


@dataclass
class AdversaryHooks:
    """Server/selection manipulations available to an adversary.

    ``force_selected`` puts the listed clients in every round (fixed-attacker
    setups). ``isolate_client`` echoes the target's own previous local model
    back instead of the aggregate. ``view_transform`` lets a global attacker
    perturb the model a specific client receives.
    """

    force_selected: tuple[int, ...] = ()
    isolate_client: int | None = None
    view_transform: Callable[[int, ParamVector, int], ParamVector] | None = None


@dataclass
class FlState:
    model: ParamVector
    ledger: PrivacyLedger
    round_index: int = 0
    stopped: bool = False
    stop_reason: str | None = None
    last_local_models: dict[int, ParamVector] = field(default_factory=dict)


@dataclass
class RoundOutput:
    state: FlState
    record: RoundRecord | None
    updates: dict[int, ClientUpdate] = field(default_factory=dict)
    views: dict[int, ParamVector] = field(default_factory=dict)
    view_kinds: dict[int, str] = field(default_factory=dict)


def run_round(
    state: FlState,
    clients: list[ClientSpec],
    server_cfg: ServerConfig,
    hooks: AdversaryHooks,
    streams,
    evaluators: dict[str, Callable[[ParamVector], float]] | None = None,
) -> RoundOutput:
    """One full round: select, collect updates, aggregate, step, evaluate."""
    evaluators = evaluators or {}
    r = state.round_index
    if state.stopped:
        return RoundOutput(state=state, record=None)

    if server_cfg.aggregator == "cdp":
        if budget_guard(state.ledger, server_cfg.cdp.budget_threshold, server_cfg.cdp.delta) == STOP:
            state.stopped = True
            state.stop_reason = "privacy_budget_exhausted"
            return RoundOutput(state=state, record=None)

    by_id = {c.client_id: c for c in clients}
    honest_selected = select_clients(len(clients), server_cfg.selection, streams.derive("select", r))
    forced = set(hooks.force_selected)
    if hooks.isolate_client is not None:
        forced.add(hooks.isolate_client)
    effective = list(honest_selected)
    for fid in sorted(forced - set(effective)):
        # Keep the round size fixed: a forced client takes the seat of a
        # non-forced selected one rather than enlarging the round.
        replaceable = [c for c in effective if c not in forced]
        if replaceable:
            effective.remove(replaceable[-1])
        effective.append(fid)
    effective = sorted(effective)

    updates: dict[int, ClientUpdate] = {}
    views: dict[int, ParamVector] = {}
    view_kinds: dict[int, str] = {}
    if effective:
        n_total = sum(by_id[cid].n_examples for cid in effective)
        ctx = RoundContext(r, tuple(effective), n_total, server_cfg.server_lr)
        for cid in effective:
            view = state.model
            kind = "global"
            if hooks.isolate_client == cid and cid in state.last_local_models:
                view = state.last_local_models[cid]
                kind = "isolated_own_update_echo"
            if hooks.view_transform is not None:
                transformed = hooks.view_transform(cid, view, r)
                if transformed is not view:
                    view = transformed
                    kind += "+ascent"
            update = by_id[cid].update_fn(view, ctx, streams.derive("client", r, cid))
            updates[cid] = update
            views[cid] = view
            view_kinds[cid] = kind
            state.last_local_models[cid] = view + update.delta

        ordered = [updates[cid] for cid in effective]
        pre_norms = [u.delta.norm() for u in ordered]
        if server_cfg.aggregator == "plain":
            agg = aggregate_plain(ordered)
            post_norms = pre_norms
        elif server_cfg.aggregator == "norm_bound":
            agg = aggregate_norm_bound(ordered, server_cfg.norm_threshold)
            post_norms = [min(n, server_cfg.norm_threshold) for n in pre_norms]
        elif server_cfg.aggregator == "weak_dp":
            agg = aggregate_weak_dp(ordered, server_cfg.norm_threshold, server_cfg.weak_dp_sigma,
                                    state.ledger, streams.derive("server_noise", r))
            post_norms = [min(n, server_cfg.norm_threshold) for n in pre_norms]
        else:
            agg = aggregate_cdp(ordered, server_cfg.cdp, state.ledger, streams.derive("server_noise", r))
            post_norms = [min(n, server_cfg.cdp.clip_bound) for n in pre_norms]
        state.model = state.model + server_cfg.server_lr * agg
    else:
        pre_norms, post_norms = [], []

    if server_cfg.aggregator == "weak_dp":
        eps = state.ledger.naive_eps_sum
    elif server_cfg.aggregator == "cdp":
        eps = state.ledger.epsilon()
    else:
        eps = None

    record = RoundRecord(
        round_index=r,
        main_accuracy=evaluators["main"](state.model) if "main" in evaluators else None,
        backdoor_accuracy=evaluators["backdoor"](state.model) if "backdoor" in evaluators else None,
        eps_spent=eps,
        selected_ids=tuple(effective),
        honest_selected_ids=tuple(honest_selected),
        diagnostics={"pre_clip_norms": pre_norms, "post_clip_norms": post_norms},
    )
    state.round_index = r + 1
    return RoundOutput(state=state, record=record, updates=updates, views=views, view_kinds=view_kinds)
