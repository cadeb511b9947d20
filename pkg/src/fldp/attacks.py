"""Adversaries: backdoor injection via model replacement, white-box
membership inference (passive/active, local/global, isolation variants), and
passive property inference from observed updates.

Attack evaluation is read-only over a recorded ``RunTrace``; each attacker
touches only the information its role permits (a local attacker sees the
sequence of aggregated models plus its own data, the global attacker
additionally sees per-client submissions).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import roc_auc_score
from sklearn.preprocessing import StandardScaler

from .data import Dataset, TriggerSpec
from .fl import ClientUpdate, RoundRecord, client_update_honest
from .nn import Batch, ModelArch, ParamVector, loss_and_grad, per_example_grad_matrix, predict, softmax, _forward, _log_probs


# ---------------------------------------------------------------------------
# Recorded trace of one federated run
# ---------------------------------------------------------------------------

@dataclass
class RunTrace:
    """What an observer could have recorded during a run.

    ``global_models[r]`` is the aggregate after round r; ``initial_model`` is
    the broadcast for round 0. ``local_models``/``updates`` hold per-client
    submissions (server-side knowledge) and may be None for censored traces.
    """

    arch: ModelArch
    initial_model: ParamVector
    global_models: list[ParamVector] = field(default_factory=list)
    local_models: list[dict[int, ParamVector]] | None = None
    updates: list[dict[int, ClientUpdate]] | None = None
    view_kinds: list[dict[int, str]] | None = None
    records: list[RoundRecord] = field(default_factory=list)

    def broadcast_model(self, r: int) -> ParamVector:
        """The model clients received at the start of round r."""
        return self.initial_model if r == 0 else self.global_models[r - 1]

    @property
    def n_rounds(self) -> int:
        return len(self.global_models)


# ---------------------------------------------------------------------------
# Backdoor attack (targeted model poisoning via model replacement)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BackdoorTask:
    """What the attacker wants the aggregate to mislearn.

    ``single_pixel`` backdoors carry a TriggerSpec; ``semantic`` backdoors
    relabel the property-holding subgroup without touching features.
    ``boost_mode`` selects between model-replacement scaling and an unscaled
    poisoned update.
    """

    kind: str  # "single_pixel" | "semantic"
    target_label: int
    trigger: TriggerSpec | None = None
    boost_mode: str = "replacement"

    def __post_init__(self):
        if self.kind not in ("single_pixel", "semantic"):
            raise ValueError(f"unknown backdoor kind {self.kind!r}")
        if self.boost_mode not in ("replacement", "plain_poisoned_training"):
            raise ValueError(f"unknown boost_mode {self.boost_mode!r}")
        if self.kind == "single_pixel" and self.trigger is None:
            raise ValueError("single_pixel backdoor needs a trigger")


def backdoor_replacement_update(
    theta_star: ParamVector,
    theta_r: ParamVector,
    n_total: int,
    n_attacker: int,
    eta: float,
    client_id: int = 0,
) -> ClientUpdate:
    """Update scaled so plain aggregation replaces the global model with
    theta_star: (n_total / (eta * n_attacker)) * (theta_star - theta_r)."""
    if n_attacker < 1 or n_total < n_attacker:
        raise ValueError("need 1 <= n_attacker <= n_total")
    if eta <= 0:
        raise ValueError("server learning rate must be positive")
    scale = n_total / (eta * n_attacker)
    return ClientUpdate(scale * (theta_star - theta_r), n_attacker, client_id, "attacker")


def train_backdoored_model(
    global_model: ParamVector,
    arch: ModelArch,
    poisoned_shard: Dataset,
    epochs: int,
    batch_size: int,
    lr: float,
    rng: np.random.Generator,
) -> ParamVector:
    """Local SGD on the attacker's (partially poisoned) shard."""
    update = client_update_honest(global_model, arch, poisoned_shard, epochs, batch_size, lr, rng)
    return global_model + update.delta


def backdoor_accuracy(model: ParamVector, arch: ModelArch, triggered_testset: Dataset, target_label: int) -> float:
    """Fraction of trigger-carrying held-out inputs classified as the target.

    The test set must be built from clean examples whose true label differs
    from the target, so a perfect clean model scores 0 and a constant
    target-label predictor scores 1.
    """
    if len(triggered_testset) == 0:
        raise ValueError("triggered test set is empty")
    pred = predict(model, arch, triggered_testset.features)
    return float((pred == target_label).mean())


# ---------------------------------------------------------------------------
# Membership inference
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MiaConfig:
    """White-box membership inference settings.

    member/non-member candidate sets must be disjoint and equally sized; the
    isolation variants need server-side power (global role).
    """

    attacker_role: str  # "local" | "global"
    mode: str  # "passive" | "active_gradient_ascent" | "isolating" | "isolating_gradient_ascent"
    member_x: np.ndarray | None = None
    member_y: np.ndarray | None = None
    nonmember_x: np.ndarray | None = None
    nonmember_y: np.ndarray | None = None
    target_client: int = 0
    attacker_client: int = 0
    ascent_gamma: float = 0.5
    ascent_start_frac: float = 0.6
    feature_set: str = "summary"  # "summary" | "full_grad"

    def __post_init__(self):
        if self.attacker_role not in ("local", "global"):
            raise ValueError(f"unknown attacker_role {self.attacker_role!r}")
        if self.mode not in ("passive", "active_gradient_ascent", "isolating", "isolating_gradient_ascent"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode.startswith("isolating") and self.attacker_role != "global":
            raise ValueError("isolating modes require a global attacker")
        if self.feature_set not in ("summary", "full_grad"):
            raise ValueError(f"unknown feature_set {self.feature_set!r}")
        if self.member_x is not None and self.nonmember_x is not None:
            if len(self.member_x) != len(self.nonmember_x):
                raise ValueError("member and non-member sets must be the same size")

    @property
    def name(self) -> str:
        return f"mia_{self.attacker_role}_{self.mode}"


@dataclass
class AttackReport:
    name: str
    accuracy: float | None
    auc: float | None
    per_round: list[float]
    config: dict
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        for v, what in ((self.accuracy, "accuracy"), (self.auc, "AUC")):
            if v is not None and not (0.0 <= v <= 1.0):
                raise ValueError(f"{what} outside [0, 1]: {v}")

    def to_json_dict(self) -> dict:
        return {
            "name": self.name,
            "accuracy": self.accuracy,
            "auc": self.auc,
            "per_round": list(self.per_round),
            "config": self.config,
            "extras": self.extras,
        }


def point_features(model: ParamVector, arch: ModelArch, x: np.ndarray, y: int, feature_set: str = "summary") -> np.ndarray:
    """Per-snapshot white-box features of one candidate point:
    (loss, max softmax confidence, per-example gradient norm)."""
    xb = np.asarray(x, dtype=np.float64).reshape(1, -1)
    logits, _ = _forward(model, arch, xb)
    logp = _log_probs(logits)
    loss = float(-logp[0, int(y)])
    conf = float(softmax(logits)[0].max())
    grad_row = per_example_grad_matrix(model, arch, xb, np.array([int(y)]))[0]
    base = [loss, conf, float(np.linalg.norm(grad_row))]
    if feature_set == "full_grad":
        return np.concatenate([base, grad_row])
    return np.array(base)


def mia_features(model_snapshots: list[ParamVector], arch: ModelArch, x: np.ndarray, y: int, feature_set: str = "summary") -> np.ndarray:
    """Concatenation of point_features over all observed snapshots."""
    if not model_snapshots:
        raise ValueError("need at least one snapshot")
    return np.concatenate([point_features(m, arch, x, int(y), feature_set) for m in model_snapshots])


def _mia_snapshots(trace: RunTrace, cfg: MiaConfig) -> list[ParamVector]:
    if cfg.attacker_role == "local":
        # A participant only ever sees the broadcast aggregates.
        return list(trace.global_models)
    if trace.local_models is None:
        raise ValueError("global attacker needs per-client submissions in the trace")
    snaps = [r[cfg.target_client] for r in trace.local_models if cfg.target_client in r]
    if not snaps:
        raise ValueError(f"target client {cfg.target_client} never participated")
    return snaps


def mia_run(trace: RunTrace, cfg: MiaConfig, rng: np.random.Generator) -> AttackReport:
    """Train the attack classifier on half the candidates, report held-out
    accuracy (from its own confusion matrix) and AUC."""
    snapshots = _mia_snapshots(trace, cfg)
    member_x, member_y = np.asarray(cfg.member_x), np.asarray(cfg.member_y)
    nonmember_x, nonmember_y = np.asarray(cfg.nonmember_x), np.asarray(cfg.nonmember_y)
    n = len(member_x)
    if n < 4:
        raise ValueError("need at least 4 members for a 50/50 split")

    feats_m = np.stack([mia_features(snapshots, trace.arch, member_x[i], member_y[i], cfg.feature_set) for i in range(n)])
    feats_n = np.stack([mia_features(snapshots, trace.arch, nonmember_x[i], nonmember_y[i], cfg.feature_set) for i in range(n)])

    half = n // 2
    perm_m, perm_n = rng.permutation(n), rng.permutation(n)
    x_train = np.concatenate([feats_m[perm_m[:half]], feats_n[perm_n[:half]]])
    y_train = np.concatenate([np.ones(half), np.zeros(half)])
    x_test = np.concatenate([feats_m[perm_m[half:]], feats_n[perm_n[half:]]])
    y_test = np.concatenate([np.ones(n - half), np.zeros(n - half)])

    scaler = StandardScaler().fit(x_train)
    clf = LogisticRegression(max_iter=2000).fit(scaler.transform(x_train), y_train)
    prob = clf.predict_proba(scaler.transform(x_test))[:, 1]
    pred = (prob >= 0.5).astype(float)

    tp = int(((pred == 1) & (y_test == 1)).sum())
    tn = int(((pred == 0) & (y_test == 0)).sum())
    fp = int(((pred == 1) & (y_test == 0)).sum())
    fn = int(((pred == 0) & (y_test == 1)).sum())
    accuracy = 1.0 - (fp + fn) / len(y_test)
    auc = float(roc_auc_score(y_test, prob))

    # Diagnostic trace: per-snapshot loss gap between non-members and members.
    gaps = []
    for m in snapshots:
        lm = np.mean([point_features(m, trace.arch, member_x[i], member_y[i])[0] for i in range(n)])
        ln = np.mean([point_features(m, trace.arch, nonmember_x[i], nonmember_y[i])[0] for i in range(n)])
        gaps.append(float(ln - lm))

    return AttackReport(
        name=cfg.name,
        accuracy=float(accuracy),
        auc=auc,
        per_round=gaps,
        config={
            "attacker_role": cfg.attacker_role,
            "mode": cfg.mode,
            "target_client": cfg.target_client,
            "ascent_gamma": cfg.ascent_gamma,
            "ascent_start_frac": cfg.ascent_start_frac,
            "feature_set": cfg.feature_set,
            "n_candidates_per_class": int(n),
            "split": "50/50 disjoint",
        },
        extras={"confusion": {"tp": tp, "fp": fp, "tn": tn, "fn": fn}, "n_snapshots": len(snapshots)},
    )


def ascent_gradient(model: ParamVector, arch: ModelArch, points_x: np.ndarray, points_y: np.ndarray) -> ParamVector:
    """Sum of per-target loss gradients (the direction that raises their loss)."""
    total = np.zeros(len(model.values))
    for i in range(len(points_x)):
        _, g = loss_and_grad(model, arch, Batch(points_x[i : i + 1], points_y[i : i + 1]))
        total = total + g.values
    return model.with_values(total)


def make_update_ascent(base_fn, arch: ModelArch, cfg: MiaConfig, total_rounds: int) -> Callable:
    """Wrap a local attacker's update fn: from the configured round on, add
    +gamma * grad(loss at each candidate point) to the submitted update."""
    start_round = int(np.floor(cfg.ascent_start_frac * total_rounds))
    all_x = np.concatenate([np.asarray(cfg.member_x), np.asarray(cfg.nonmember_x)])
    all_y = np.concatenate([np.asarray(cfg.member_y), np.asarray(cfg.nonmember_y)])

    def update_fn(view, ctx, rng):
        update = base_fn(view, ctx, rng)
        if cfg.ascent_gamma != 0.0 and ctx.round_index >= start_round:
            boost = cfg.ascent_gamma * ascent_gradient(view, arch, all_x, all_y)
            update = ClientUpdate(update.delta + boost, update.n_examples, update.client_id, "attacker")
        return update

    return update_fn


def make_view_ascent(arch: ModelArch, cfg: MiaConfig, total_rounds: int) -> Callable:
    """Server-side view transform: perturb the model sent to the target along
    the ascent direction of the candidate points."""
    start_round = int(np.floor(cfg.ascent_start_frac * total_rounds))
    all_x = np.concatenate([np.asarray(cfg.member_x), np.asarray(cfg.nonmember_x)])
    all_y = np.concatenate([np.asarray(cfg.member_y), np.asarray(cfg.nonmember_y)])

    def view_transform(client_id: int, view: ParamVector, round_index: int) -> ParamVector:
        if client_id != cfg.target_client or cfg.ascent_gamma == 0.0 or round_index < start_round:
            return view
        return view + cfg.ascent_gamma * ascent_gradient(view, arch, all_x, all_y)

    return view_transform


# ---------------------------------------------------------------------------
# Property inference
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PropInfConfig:
    """Passive batch-property inference from observed per-client updates."""

    target_client: int
    control_clients: tuple[int, ...]
    aux_with: Dataset | None = None
    aux_without: Dataset | None = None
    batch_size: int = 32
    pca_components: int = 8

    def __post_init__(self):
        if not self.control_clients:
            raise ValueError("need at least one control client")
        if self.target_client in self.control_clients:
            raise ValueError("target cannot be its own control")
        if self.batch_size < 1 or self.pca_components < 1:
            raise ValueError("batch_size and pca_components must be positive")


def _unit(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v)
    return v / norm if norm > 0 else v


@dataclass
class PropInfSamples:
    """Labeled attacker-side gradients plus observed-update vectors, all as
    unit-norm flat vectors (updates are sign-flipped: delta ~ -lr * grads)."""

    train_vectors: np.ndarray   # (2 * rounds, P)
    train_labels: np.ndarray    # 1 = batch had the property
    observed_vectors: np.ndarray
    observed_labels: np.ndarray  # 1 = update came from the target client
    observed_rounds: np.ndarray
    shapes: tuple


def propinf_collect(trace: RunTrace, cfg: PropInfConfig, rng: np.random.Generator) -> PropInfSamples:
    """Per round: gradients of one batch with and one without the property,
    labeled 1/0, plus identically summarized observed updates."""
    if cfg.aux_with is None or len(cfg.aux_with) == 0 or cfg.aux_without is None or len(cfg.aux_without) == 0:
        raise ValueError("both auxiliary sets must be non-empty")
    if trace.updates is None:
        raise ValueError("property inference needs per-client updates in the trace")
    train_vectors, train_labels = [], []
    observed, observed_labels, observed_rounds = [], [], []
    for r in range(trace.n_rounds):
        model = trace.broadcast_model(r)
        for aux, label in ((cfg.aux_with, 1), (cfg.aux_without, 0)):
            idx = rng.choice(len(aux), size=min(cfg.batch_size, len(aux)), replace=False)
            _, grad = loss_and_grad(model, trace.arch, Batch(aux.features[idx], aux.labels[idx]))
            train_vectors.append(_unit(grad.values))
            train_labels.append(label)
        round_updates = trace.updates[r]
        for cid in (cfg.target_client, *cfg.control_clients):
            if cid in round_updates:
                observed.append(_unit(-round_updates[cid].delta.values))
                observed_labels.append(1 if cid == cfg.target_client else 0)
                observed_rounds.append(r)
    if not observed:
        raise ValueError("no observed updates for target/control clients")
    shapes = trace.initial_model.shapes
    return PropInfSamples(
        np.stack(train_vectors), np.array(train_labels),
        np.stack(observed), np.array(observed_labels), np.array(observed_rounds),
        shapes,
    )


def _layer_norms(flat: np.ndarray, shapes) -> np.ndarray:
    out, offset = [], 0
    for shape in shapes:
        size = int(np.prod(shape))
        out.append(np.linalg.norm(flat[offset : offset + size]))
        offset += size
    return np.array(out)


def _summaries(vectors: np.ndarray, shapes, mean: np.ndarray, basis: np.ndarray) -> np.ndarray:
    norms = np.stack([_layer_norms(v, shapes) for v in vectors])
    coords = (vectors - mean) @ basis.T
    return np.concatenate([norms, coords], axis=1)


def propinf_run(trace: RunTrace, cfg: PropInfConfig, rng: np.random.Generator) -> AttackReport:
    """Fit the batch-property classifier on attacker-side gradient summaries
    and report the AUC of separating the target's updates from controls."""
    samples = propinf_collect(trace, cfg, rng)
    mean = samples.train_vectors.mean(axis=0)
    centered = samples.train_vectors - mean
    k = min(cfg.pca_components, min(centered.shape) - 1) if min(centered.shape) > 1 else 1
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    basis = vt[:k]
    # Fix the sign convention so the basis is reproducible.
    signs = np.sign(basis[np.arange(k), np.abs(basis).argmax(axis=1)])
    basis = basis * signs[:, None]

    x_train = _summaries(samples.train_vectors, samples.shapes, mean, basis)
    x_obs = _summaries(samples.observed_vectors, samples.shapes, mean, basis)
    scaler = StandardScaler().fit(x_train)
    clf = LogisticRegression(max_iter=2000).fit(scaler.transform(x_train), samples.train_labels)
    scores = clf.predict_proba(scaler.transform(x_obs))[:, 1]
    auc = float(roc_auc_score(samples.observed_labels, scores))

    target_mask = samples.observed_labels == 1
    per_round = [float(s) for s in scores[target_mask]]
    return AttackReport(
        name="propinf_passive",
        accuracy=None,
        auc=auc,
        per_round=per_round,
        config={
            "target_client": cfg.target_client,
            "control_clients": list(cfg.control_clients),
            "batch_size": cfg.batch_size,
            "pca_components": int(k),
            "aux_with_size": len(cfg.aux_with),
            "aux_without_size": len(cfg.aux_without),
        },
        extras={"rounds": int(trace.n_rounds), "n_observed": int(len(samples.observed_labels)),
                "n_train": int(len(samples.train_labels))},
    )
