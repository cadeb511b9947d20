"""Declarative experiment configs, deterministic execution, and metrics
persistence.

A config is a JSON key/value tree (see README for the key reference).
Parsing is strict: unknown keys are errors, so typos cannot silently change
an experiment. Runs are deterministic end to end: the same config and master
seed produce byte-identical metrics.csv and report.json.
"""

from __future__ import annotations

import copy
import csv
import json
import math
import os
from dataclasses import dataclass, field
import numpy as np

from . import attacks, data, fl, nn, privacy
from .rng import RngStream


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the key path."""


# ---------------------------------------------------------------------------
# Strict config parsing
# ---------------------------------------------------------------------------

def _require(section: dict, key: str, path: str):
    if key not in section:
        raise ConfigError(f"{path}.{key}: missing required key")
    return section[key]


def _check_known(section: dict, allowed: set[str], path: str):
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {unknown}; allowed: {sorted(allowed)}")


@dataclass(frozen=True)
class DatasetSpec:
    kind: str
    num_classes: int = 0
    dim: int = 0
    per_class: int = 0
    property_fraction: float = 0.0
    separation: float = 4.0
    property_strength: float = 3.0
    side: int = 8
    noise: float = 0.1
    path: str = ""
    label_column: str = "label"
    property_column: str | None = "property"


@dataclass(frozen=True)
class EvalSpec:
    holdout_fraction: float = 0.2
    aux_size: int = 0  # examples reserved for attacker auxiliary data


@dataclass(frozen=True)
class ClientTrainingSpec:
    epochs: int
    batch_size: int
    lr: float


@dataclass(frozen=True)
class LdpSpec:
    clip_bound: float
    noise_multiplier: float
    sampling_prob: float
    noise_scales_with_S: bool = True
    scope: str = "all"  # "all" | "non_attackers"

    def to_dp_sgd(self, client: ClientTrainingSpec) -> privacy.DpSgdConfig:
        return privacy.DpSgdConfig(
            clip_bound=self.clip_bound,
            noise_multiplier=self.noise_multiplier,
            sampling_prob=self.sampling_prob,
            epochs=client.epochs,
            lr=client.lr,
            noise_scales_with_S=self.noise_scales_with_S,
        )


@dataclass(frozen=True)
class AttackSpec:
    family: str  # "none" | "backdoor" | "mia" | "propinf"
    attacker_count: int = 0
    in_every_round: bool = False
    # backdoor
    kind: str = "single_pixel"
    target_label: int = 0
    pixel_index: int = 0
    trigger_value: float = 1.0
    poison_fraction: float = 0.5
    boost_mode: str = "replacement"
    attacker_epochs: int = 0  # 0 = same as honest clients
    # mia
    role: str = "local"
    mode: str = "passive"
    target_client: int = 1
    attacker_client: int = 0
    n_candidates: int = 20
    ascent_gamma: float = 0.5
    ascent_start_frac: float = 0.6
    feature_set: str = "summary"
    # propinf
    control_count: int = 3
    batch_size: int = 32
    pca_components: int = 8


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    master_seed: int
    repetitions: int
    rounds: int
    n_clients: int
    selection: fl.SelectionSpec
    dataset: DatasetSpec
    partition: data.PartitionScheme
    hidden: tuple[int, ...]
    client: ClientTrainingSpec
    server_aggregator: str
    server_lr: float
    norm_threshold: float | None
    weak_dp_sigma: float
    delta: float
    cdp: privacy.CdpConfig | None
    ldp: LdpSpec | None
    attack: AttackSpec
    eval: EvalSpec
    scale: dict
    raw: dict


def parse_config(tree: dict) -> ExperimentConfig:
    """Validate a config tree; unknown keys raise ConfigError with the path."""
    if not isinstance(tree, dict):
        raise ConfigError("config root must be an object")
    top_allowed = {"name", "master_seed", "repetitions", "rounds", "n_clients", "selection",
                   "dataset", "partition", "model", "client", "server", "ldp", "attack",
                   "eval", "scale"}
    _check_known(tree, top_allowed, "config")

    name = str(_require(tree, "name", "config"))
    master_seed = int(_require(tree, "master_seed", "config"))
    repetitions = int(_require(tree, "repetitions", "config"))
    rounds = int(_require(tree, "rounds", "config"))
    n_clients = int(_require(tree, "n_clients", "config"))
    if repetitions < 1:
        raise ConfigError("config.repetitions: must be >= 1")
    if rounds < 1:
        raise ConfigError("config.rounds: must be >= 1")
    if n_clients < 1:
        raise ConfigError("config.n_clients: must be >= 1")

    sel = _require(tree, "selection", "config")
    _check_known(sel, {"kind", "k", "q"}, "config.selection")
    try:
        selection = fl.SelectionSpec(kind=_require(sel, "kind", "config.selection"),
                                     k=sel.get("k"), q=sel.get("q"))
    except ValueError as e:
        raise ConfigError(f"config.selection: {e}") from None
    if selection.kind == "fixed" and selection.k > n_clients:
        raise ConfigError("config.selection.k: cannot exceed n_clients")

    ds = _require(tree, "dataset", "config")
    kind = _require(ds, "kind", "config.dataset")
    if kind == "blobs":
        _check_known(ds, {"kind", "num_classes", "dim", "per_class", "property_fraction",
                          "separation", "property_strength"}, "config.dataset")
        dataset = DatasetSpec(kind="blobs",
                              num_classes=int(_require(ds, "num_classes", "config.dataset")),
                              dim=int(_require(ds, "dim", "config.dataset")),
                              per_class=int(_require(ds, "per_class", "config.dataset")),
                              property_fraction=float(ds.get("property_fraction", 0.0)),
                              separation=float(ds.get("separation", 4.0)),
                              property_strength=float(ds.get("property_strength", 3.0)))
    elif kind == "grid":
        _check_known(ds, {"kind", "num_classes", "side", "per_class", "noise"}, "config.dataset")
        dataset = DatasetSpec(kind="grid",
                              num_classes=int(_require(ds, "num_classes", "config.dataset")),
                              side=int(_require(ds, "side", "config.dataset")),
                              per_class=int(_require(ds, "per_class", "config.dataset")),
                              noise=float(ds.get("noise", 0.1)))
    elif kind == "csv":
        _check_known(ds, {"kind", "path", "label_column", "property_column", "num_classes"}, "config.dataset")
        dataset = DatasetSpec(kind="csv", path=str(_require(ds, "path", "config.dataset")),
                              label_column=str(ds.get("label_column", "label")),
                              property_column=ds.get("property_column", "property"),
                              num_classes=int(ds.get("num_classes", 0)))
    else:
        raise ConfigError(f"config.dataset.kind: unknown kind {kind!r}")

    part = tree.get("partition", {"kind": "iid"})
    _check_known(part, {"kind", "target_client", "stratified"}, "config.partition")
    try:
        partition = data.PartitionScheme(kind=_require(part, "kind", "config.partition"),
                                         target_client=int(part.get("target_client", 0)),
                                         stratified=bool(part.get("stratified", False)))
    except ValueError as e:
        raise ConfigError(f"config.partition: {e}") from None

    model = tree.get("model", {"hidden": []})
    _check_known(model, {"hidden"}, "config.model")
    hidden = tuple(int(h) for h in model.get("hidden", []))

    cl = _require(tree, "client", "config")
    _check_known(cl, {"epochs", "batch_size", "lr"}, "config.client")
    client = ClientTrainingSpec(epochs=int(_require(cl, "epochs", "config.client")),
                                batch_size=int(_require(cl, "batch_size", "config.client")),
                                lr=float(_require(cl, "lr", "config.client")))
    if client.epochs < 1 or client.batch_size < 1 or client.lr <= 0:
        raise ConfigError("config.client: epochs/batch_size must be >= 1 and lr > 0")

    srv = _require(tree, "server", "config")
    _check_known(srv, {"aggregator", "server_lr", "norm_threshold", "weak_dp_sigma", "delta", "cdp"},
                 "config.server")
    aggregator = _require(srv, "aggregator", "config.server")
    server_lr = float(srv.get("server_lr", 1.0))
    delta = float(srv.get("delta", 1e-5))
    norm_threshold = srv.get("norm_threshold")
    norm_threshold = float(norm_threshold) if norm_threshold is not None else None
    weak_dp_sigma = float(srv.get("weak_dp_sigma", 0.0))
    cdp = None
    if aggregator == "cdp":
        cd = _require(srv, "cdp", "config.server")
        _check_known(cd, {"clip_bound", "noise_scale", "selection_prob", "budget_threshold", "sigma_mode"},
                     "config.server.cdp")
        q = cd.get("selection_prob")
        if q is None:
            # Fixed-K selection has no literal q; K/N stands in for accounting.
            q = selection.q if selection.kind == "probability" else selection.k / n_clients
        try:
            cdp = privacy.CdpConfig(clip_bound=float(_require(cd, "clip_bound", "config.server.cdp")),
                                    noise_scale=float(_require(cd, "noise_scale", "config.server.cdp")),
                                    selection_prob=float(q),
                                    budget_threshold=float(_require(cd, "budget_threshold", "config.server.cdp")),
                                    delta=delta,
                                    sigma_mode=cd.get("sigma_mode", "literal_zS_over_q"))
        except ValueError as e:
            raise ConfigError(f"config.server.cdp: {e}") from None
    try:
        fl.ServerConfig(aggregator=aggregator, server_lr=server_lr, selection=selection,
                        rounds=rounds, norm_threshold=norm_threshold,
                        weak_dp_sigma=weak_dp_sigma, cdp=cdp)
    except ValueError as e:
        raise ConfigError(f"config.server: {e}") from None

    ldp = None
    if tree.get("ldp") is not None:
        ld = tree["ldp"]
        _check_known(ld, {"clip_bound", "noise_multiplier", "sampling_prob", "noise_scales_with_S", "scope"},
                     "config.ldp")
        ldp = LdpSpec(clip_bound=float(_require(ld, "clip_bound", "config.ldp")),
                      noise_multiplier=float(_require(ld, "noise_multiplier", "config.ldp")),
                      sampling_prob=float(_require(ld, "sampling_prob", "config.ldp")),
                      noise_scales_with_S=bool(ld.get("noise_scales_with_S", True)),
                      scope=str(ld.get("scope", "all")))
        if ldp.scope not in ("all", "non_attackers"):
            raise ConfigError(f"config.ldp.scope: unknown scope {ldp.scope!r}")
        if aggregator != "plain":
            raise ConfigError("config.ldp: LDP runs use the plain aggregator")
        try:
            ldp.to_dp_sgd(client)
        except ValueError as e:
            raise ConfigError(f"config.ldp: {e}") from None

    at = tree.get("attack", {"family": "none"})
    family = _require(at, "family", "config.attack")
    base_keys = {"family"}
    if family == "none":
        _check_known(at, base_keys, "config.attack")
        attack = AttackSpec(family="none")
    elif family == "backdoor":
        _check_known(at, base_keys | {"attacker_count", "in_every_round", "kind", "target_label",
                                      "pixel_index", "trigger_value", "poison_fraction", "boost_mode",
                                      "attacker_epochs"},
                     "config.attack")
        attack = AttackSpec(family="backdoor",
                            attacker_count=int(at.get("attacker_count", 1)),
                            in_every_round=bool(at.get("in_every_round", True)),
                            kind=str(at.get("kind", "single_pixel")),
                            target_label=int(at.get("target_label", 0)),
                            pixel_index=int(at.get("pixel_index", 0)),
                            trigger_value=float(at.get("trigger_value", 1.0)),
                            poison_fraction=float(at.get("poison_fraction", 0.5)),
                            boost_mode=str(at.get("boost_mode", "replacement")),
                            attacker_epochs=int(at.get("attacker_epochs", 0)))
        if attack.attacker_count < 1:
            raise ConfigError("config.attack.attacker_count: must be >= 1")
        if attack.attacker_count >= n_clients:
            raise ConfigError("config.attack.attacker_count: must be < n_clients")
        if attack.kind not in ("single_pixel", "semantic"):
            raise ConfigError(f"config.attack.kind: unknown kind {attack.kind!r}")
        if attack.kind == "semantic" and partition.kind != "by_property":
            raise ConfigError("config.attack: semantic backdoor needs partition.kind = by_property "
                              "(the attacker holds the property examples)")
    elif family == "mia":
        _check_known(at, base_keys | {"role", "mode", "target_client", "attacker_client",
                                      "n_candidates", "ascent_gamma", "ascent_start_frac", "feature_set"},
                     "config.attack")
        attack = AttackSpec(family="mia",
                            role=str(at.get("role", "local")),
                            mode=str(at.get("mode", "passive")),
                            target_client=int(at.get("target_client", 1)),
                            attacker_client=int(at.get("attacker_client", 0)),
                            n_candidates=int(at.get("n_candidates", 20)),
                            ascent_gamma=float(at.get("ascent_gamma", 0.5)),
                            ascent_start_frac=float(at.get("ascent_start_frac", 0.6)),
                            feature_set=str(at.get("feature_set", "summary")))
        if attack.role not in ("local", "global"):
            raise ConfigError(f"config.attack.role: unknown role {attack.role!r}")
        if attack.mode.startswith("isolating") and attack.role != "global":
            raise ConfigError("config.attack.mode: isolating modes require role = global")
        if not (0 <= attack.target_client < n_clients) or not (0 <= attack.attacker_client < n_clients):
            raise ConfigError("config.attack: target/attacker client ids out of range")
    elif family == "propinf":
        _check_known(at, base_keys | {"target_client", "control_count", "batch_size", "pca_components"},
                     "config.attack")
        attack = AttackSpec(family="propinf",
                            target_client=int(at.get("target_client", 0)),
                            control_count=int(at.get("control_count", 3)),
                            batch_size=int(at.get("batch_size", 32)),
                            pca_components=int(at.get("pca_components", 8)))
        if attack.control_count < 1 or attack.control_count >= n_clients:
            raise ConfigError("config.attack.control_count: must be in [1, n_clients)")
    else:
        raise ConfigError(f"config.attack.family: unknown family {family!r}")

    ev = tree.get("eval", {})
    _check_known(ev, {"holdout_fraction", "aux_size"}, "config.eval")
    eval_spec = EvalSpec(holdout_fraction=float(ev.get("holdout_fraction", 0.2)),
                         aux_size=int(ev.get("aux_size", 0)))
    if not (0 < eval_spec.holdout_fraction < 1):
        raise ConfigError("config.eval.holdout_fraction: must lie in (0, 1)")
    if attack.family == "propinf" and eval_spec.aux_size < 2:
        raise ConfigError("config.eval.aux_size: propinf needs reserved auxiliary examples")

    scale = tree.get("scale", {})
    if not isinstance(scale, dict):
        raise ConfigError("config.scale: must be an object")

    return ExperimentConfig(
        name=name, master_seed=master_seed, repetitions=repetitions, rounds=rounds,
        n_clients=n_clients, selection=selection, dataset=dataset, partition=partition,
        hidden=hidden, client=client, server_aggregator=aggregator, server_lr=server_lr,
        norm_threshold=norm_threshold, weak_dp_sigma=weak_dp_sigma, delta=delta, cdp=cdp,
        ldp=ldp, attack=attack, eval=eval_spec, scale=scale, raw=copy.deepcopy(tree),
    )


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            tree = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON ({e})") from None
    return parse_config(tree)


# ---------------------------------------------------------------------------
# Experiment assembly
# ---------------------------------------------------------------------------

@dataclass
class _Problem:
    """Everything derived from the dataset spec, shared across repetitions."""

    arch: nn.ModelArch
    shards: list[data.Dataset]
    train_shards: list[data.Dataset]  # after any poisoning
    eval_set: data.Dataset
    backdoor_testset: data.Dataset | None
    aux_with: data.Dataset | None
    aux_without: data.Dataset | None
    attacker_ids: tuple[int, ...]


def _generate_pool(cfg: ExperimentConfig, rng) -> data.Dataset:
    ds = cfg.dataset
    if ds.kind == "blobs":
        return data.gen_blobs(ds.num_classes, ds.dim, ds.per_class, ds.property_fraction,
                              ds.separation, rng, property_strength=ds.property_strength)
    if ds.kind == "grid":
        return data.gen_grid_images(ds.num_classes, ds.side, ds.per_class, rng, noise=ds.noise)
    schema = data.CsvSchema(label_column=ds.label_column, property_column=ds.property_column,
                            num_classes=ds.num_classes or None)
    return data.load_csv(ds.path, schema)


def _build_problem(cfg: ExperimentConfig, streams: RngStream) -> _Problem:
    pool = _generate_pool(cfg, streams.derive("data"))
    arch = nn.ModelArch((pool.dim, *cfg.hidden, pool.num_classes))

    perm = streams.derive("holdout").permutation(len(pool))
    n_eval = int(round(cfg.eval.holdout_fraction * len(pool)))
    n_aux = 2 * cfg.eval.aux_size if cfg.attack.family == "propinf" else 0
    if n_eval + n_aux >= len(pool):
        raise ConfigError("config.eval: holdout + aux leave no training data")
    eval_set = pool.subset(np.sort(perm[:n_eval]))
    aux_pool = pool.subset(np.sort(perm[n_eval : n_eval + n_aux])) if n_aux else None
    train_pool = pool.subset(np.sort(perm[n_eval + n_aux :]))

    shards = data.partition(train_pool, cfg.n_clients, cfg.partition, streams.derive("partition"))

    attacker_ids: tuple[int, ...] = ()
    backdoor_testset = None
    train_shards = list(shards)
    atk = cfg.attack
    if atk.family == "backdoor":
        attacker_ids = tuple(range(atk.attacker_count))
        if atk.kind == "single_pixel":
            trigger = data.TriggerSpec(atk.pixel_index, atk.trigger_value, atk.target_label,
                                       atk.poison_fraction)
            for aid in attacker_ids:
                train_shards[aid] = data.apply_trigger(shards[aid], trigger, streams.derive("trigger", aid))
            clean = eval_set.subset(np.flatnonzero(eval_set.labels != atk.target_label))
            full_trigger = data.TriggerSpec(atk.pixel_index, atk.trigger_value, atk.target_label, 1.0)
            backdoor_testset = data.apply_trigger(clean, full_trigger, streams.derive("trigger_test"))
        else:
            for aid in attacker_ids:
                train_shards[aid] = data.semantic_relabel(shards[aid], lambda e: e.has_property,
                                                          atk.target_label)
            mask = eval_set.has_property & (eval_set.labels != atk.target_label)
            if mask.sum() < 5:
                raise ConfigError("semantic backdoor: too few property holdout examples to score")
            backdoor_testset = eval_set.subset(np.flatnonzero(mask))
    elif atk.family == "mia" and atk.mode != "passive":
        attacker_ids = (atk.attacker_client,) if atk.role == "local" else ()

    aux_with = aux_without = None
    if atk.family == "propinf":
        with_idx = np.flatnonzero(aux_pool.has_property)
        without_idx = np.flatnonzero(~aux_pool.has_property)
        if with_idx.size == 0:
            # Null-property world: both auxiliary sets come from the same
            # property-free distribution, so the labels carry no signal.
            half = len(aux_pool) // 2
            with_idx, without_idx = np.arange(half), np.arange(half, len(aux_pool))
        aux_with = aux_pool.subset(with_idx)
        aux_without = aux_pool.subset(without_idx)

    return _Problem(arch=arch, shards=shards, train_shards=train_shards, eval_set=eval_set,
                    backdoor_testset=backdoor_testset, aux_with=aux_with, aux_without=aux_without,
                    attacker_ids=attacker_ids)


def _build_clients(cfg: ExperimentConfig, problem: _Problem, client_ledgers: dict):
    """Wire per-client behaviors for one repetition."""
    arch, ct = problem.arch, cfg.client
    atk = cfg.attack
    attacker_set = set(problem.attacker_ids)
    sizes = {cid: len(s) for cid, s in enumerate(problem.train_shards)}

    def honest_fn(cid):
        shard = problem.train_shards[cid]
        if cfg.ldp is not None and (cfg.ldp.scope == "all" or cid not in attacker_set):
            dp_cfg = cfg.ldp.to_dp_sgd(ct)
            ledger = client_ledgers.setdefault(cid, privacy.PrivacyLedger(cfg.delta))
            return lambda view, ctx, rng: fl.client_update_ldp(view, arch, shard, dp_cfg, ledger, rng, cid)
        if cfg.server_aggregator == "cdp":
            S = cfg.cdp.clip_bound
            return lambda view, ctx, rng: fl.client_update_clipped(
                view, arch, shard, ct.epochs, ct.batch_size, ct.lr, S, rng, cid)
        return lambda view, ctx, rng: fl.client_update_honest(
            view, arch, shard, ct.epochs, ct.batch_size, ct.lr, rng, cid)

    def backdoor_fn(cid):
        shard = problem.train_shards[cid]
        ldp_compliant = cfg.ldp is not None and cfg.ldp.scope == "all"
        if ldp_compliant:
            # Protocol-following attacker: its only lever is poisoned data.
            dp_cfg = cfg.ldp.to_dp_sgd(ct)
            ledger = client_ledgers.setdefault(cid, privacy.PrivacyLedger(cfg.delta))

            def fn(view, ctx, rng):
                up = fl.client_update_ldp(view, arch, shard, dp_cfg, ledger, rng, cid)
                return fl.ClientUpdate(up.delta, up.n_examples, cid, "attacker")
            return fn

        attacker_epochs = atk.attacker_epochs or ct.epochs

        def fn(view, ctx, rng):
            theta_star = attacks.train_backdoored_model(view, arch, shard, attacker_epochs,
                                                        ct.batch_size, ct.lr, rng)
            if atk.boost_mode == "replacement":
                n_att = sum(sizes[i] for i in ctx.selected_ids if i in attacker_set)
                return attacks.backdoor_replacement_update(theta_star, view, ctx.n_total_examples,
                                                           n_att, ctx.server_lr, cid)
            return fl.ClientUpdate(theta_star - view, sizes[cid], cid, "attacker")
        return fn

    specs = []
    for cid in range(cfg.n_clients):
        if atk.family == "backdoor" and cid in attacker_set:
            fn = backdoor_fn(cid)
        else:
            fn = honest_fn(cid)
        specs.append(fl.ClientSpec(client_id=cid, n_examples=sizes[cid], update_fn=fn))
    return specs


def _draw_mia_candidates(cfg: ExperimentConfig, problem: _Problem, rng):
    """Members from training shards the attacker targets, non-members from the
    holdout; equal sizes, disjoint by construction."""
    atk = cfg.attack
    if atk.role == "global":
        pool = problem.shards[atk.target_client]
    else:
        others = [problem.shards[cid] for cid in range(cfg.n_clients) if cid != atk.attacker_client]
        pool = data.concat(others)
    n = min(atk.n_candidates, len(pool), len(problem.eval_set))
    if n < 4:
        raise ConfigError("config.attack.n_candidates: too few candidates available")
    midx = rng.choice(len(pool), size=n, replace=False)
    nidx = rng.choice(len(problem.eval_set), size=n, replace=False)
    return attacks.MiaConfig(
        attacker_role=atk.role, mode=atk.mode,
        member_x=pool.features[np.sort(midx)], member_y=pool.labels[np.sort(midx)],
        nonmember_x=problem.eval_set.features[np.sort(nidx)], nonmember_y=problem.eval_set.labels[np.sort(nidx)],
        target_client=atk.target_client, attacker_client=atk.attacker_client,
        ascent_gamma=atk.ascent_gamma, ascent_start_frac=atk.ascent_start_frac,
        feature_set=atk.feature_set,
    )


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------

@dataclass
class RepResult:
    rep: int
    records: list[fl.RoundRecord]
    attack_report: attacks.AttackReport | None
    stop_reason: str | None
    diverged: bool
    final_eps: float | None
    accountant_mode: str
    attack_metric_by_round: dict[int, float] = field(default_factory=dict)


@dataclass
class RunArtifacts:
    config: dict
    reps: list[RepResult]
    summary: dict
    privacy: dict
    stop_reason: str | None

    @property
    def rounds_executed(self) -> int:
        return max((len(r.records) for r in self.reps), default=0)


def _accountant_mode(cfg: ExperimentConfig) -> str:
    if cfg.server_aggregator == "cdp":
        return "rdp_subsampled_gaussian_central"
    if cfg.server_aggregator == "weak_dp":
        return "naive_sequential"
    if cfg.ldp is not None:
        if cfg.ldp.noise_scales_with_S:
            return "rdp_subsampled_gaussian_local"
        return "untracked_literal_noise"
    return "none"


def _run_repetition(cfg: ExperimentConfig, rep: int, streams: RngStream) -> RepResult:
    # Each repetition is an independent world: fresh data, partition, and
    # training randomness, all derived from (master_seed, rep).
    rs = streams.child("rep", rep)
    problem = _build_problem(cfg, rs)
    client_ledgers: dict[int, privacy.PrivacyLedger] = {}
    clients = _build_clients(cfg, problem, client_ledgers)
    atk = cfg.attack
    mode = _accountant_mode(cfg)

    hooks = fl.AdversaryHooks()
    mia_cfg = None
    if atk.family == "backdoor" and atk.in_every_round:
        hooks.force_selected = problem.attacker_ids
    if atk.family == "mia":
        mia_cfg = _draw_mia_candidates(cfg, problem, rs.derive("mia_candidates"))
        if atk.mode in ("isolating", "isolating_gradient_ascent"):
            hooks.isolate_client = atk.target_client
        if atk.mode in ("active_gradient_ascent", "isolating_gradient_ascent"):
            if atk.role == "global":
                hooks.view_transform = attacks.make_view_ascent(problem.arch, mia_cfg, cfg.rounds)
            else:
                spec = clients[atk.attacker_client]
                wrapped = attacks.make_update_ascent(spec.update_fn, problem.arch, mia_cfg, cfg.rounds)
                clients[atk.attacker_client] = fl.ClientSpec(spec.client_id, spec.n_examples, wrapped)

    server_cfg = fl.ServerConfig(aggregator=cfg.server_aggregator, server_lr=cfg.server_lr,
                                 selection=cfg.selection, rounds=cfg.rounds,
                                 norm_threshold=cfg.norm_threshold, weak_dp_sigma=cfg.weak_dp_sigma,
                                 cdp=cfg.cdp)
    evaluators = {"main": lambda m: nn.evaluate(m, problem.arch, problem.eval_set)[0]}
    if problem.backdoor_testset is not None:
        evaluators["backdoor"] = lambda m: attacks.backdoor_accuracy(
            m, problem.arch, problem.backdoor_testset, atk.target_label)

    model0 = nn.init_model(problem.arch, rs.derive("init"))
    state = fl.FlState(model=model0, ledger=privacy.PrivacyLedger(cfg.delta))
    need_trace = atk.family in ("mia", "propinf")
    trace = attacks.RunTrace(arch=problem.arch, initial_model=model0,
                             local_models=[] if need_trace else None,
                             updates=[] if need_trace else None,
                             view_kinds=[] if need_trace else None)

    records: list[fl.RoundRecord] = []
    stop_reason = None
    diverged = False
    try:
        for _ in range(cfg.rounds):
            out = fl.run_round(state, clients, server_cfg, hooks, rs, evaluators)
            if out.record is None:
                stop_reason = state.stop_reason
                break
            if cfg.ldp is not None and mode == "rdp_subsampled_gaussian_local" and client_ledgers:
                out.record.eps_spent = max(l.epsilon() for l in client_ledgers.values())
            records.append(out.record)
            trace.global_models.append(state.model)
            trace.records.append(out.record)
            if need_trace:
                trace.local_models.append({cid: state.last_local_models[cid] for cid in out.updates})
                trace.updates.append(dict(out.updates))
                trace.view_kinds.append(dict(out.view_kinds))
    except nn.DivergenceError:
        diverged = True
        stop_reason = "diverged"

    attack_report = None
    metric_by_round: dict[int, float] = {}
    if not diverged and records:
        if atk.family == "mia":
            attack_report = attacks.mia_run(trace, mia_cfg, rs.derive("mia_eval"))
            if atk.role == "local":
                # per_round gaps align with global-model snapshots (one per round)
                metric_by_round = {r.round_index: g for r, g in zip(records, attack_report.per_round)}
        elif atk.family == "propinf":
            pi_cfg = attacks.PropInfConfig(
                target_client=atk.target_client,
                control_clients=tuple(cid for cid in range(cfg.n_clients)
                                      if cid != atk.target_client)[: atk.control_count],
                aux_with=problem.aux_with, aux_without=problem.aux_without,
                batch_size=atk.batch_size, pca_components=atk.pca_components)
            attack_report = attacks.propinf_run(trace, pi_cfg, rs.derive("propinf"))
            target_rounds = [r.round_index for r in records
                             if atk.target_client in r.selected_ids]
            metric_by_round = dict(zip(target_rounds, attack_report.per_round))

    if mode == "rdp_subsampled_gaussian_central":
        final_eps = state.ledger.epsilon()
    elif mode == "naive_sequential":
        final_eps = state.ledger.naive_eps_sum
    elif mode == "rdp_subsampled_gaussian_local" and client_ledgers:
        final_eps = max(l.epsilon() for l in client_ledgers.values())
    else:
        final_eps = None

    return RepResult(rep=rep, records=records, attack_report=attack_report,
                     stop_reason=stop_reason, diverged=diverged, final_eps=final_eps,
                     accountant_mode=mode, attack_metric_by_round=metric_by_round)


def run_experiment(cfg: ExperimentConfig) -> RunArtifacts:
    """Execute rounds x repetitions; divergent repetitions are excluded from
    averages but recorded, never silently dropped."""
    streams = RngStream(cfg.master_seed)
    reps = [_run_repetition(cfg, rep, streams) for rep in range(cfg.repetitions)]

    healthy = [r for r in reps if not r.diverged and r.records]
    if not healthy:
        raise RuntimeError("all repetitions diverged")

    def _mean_std(values):
        if not values:
            return None, None
        mean = float(np.mean(values))
        std = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
        return mean, std

    final_main = [r.records[-1].main_accuracy for r in healthy if r.records[-1].main_accuracy is not None]
    final_backdoor = [r.records[-1].backdoor_accuracy for r in healthy
                      if r.records[-1].backdoor_accuracy is not None]
    attack_metrics = []
    for r in healthy:
        if r.attack_report is not None:
            attack_metrics.append(r.attack_report.auc if r.attack_report.auc is not None
                                  else r.attack_report.accuracy)
    main_mean, main_std = _mean_std(final_main)
    bd_mean, bd_std = _mean_std(final_backdoor)
    am_mean, am_std = _mean_std(attack_metrics)

    summary = {
        "final_main_accuracy_mean": main_mean,
        "final_main_accuracy_std": main_std,
        "final_backdoor_accuracy_mean": bd_mean,
        "final_backdoor_accuracy_std": bd_std,
        "attack_metric_mean": am_mean,
        "attack_metric_std": am_std,
        "diverged_repetitions": sum(1 for r in reps if r.diverged),
        "repetitions": cfg.repetitions,
    }
    eps_values = [r.final_eps for r in healthy if r.final_eps is not None]
    privacy_block = {
        "eps": _json_safe_eps(max(eps_values)) if eps_values else None,
        "delta": cfg.delta,
        "accountant_mode": reps[0].accountant_mode,
    }
    stop_reason = next((r.stop_reason for r in reps if r.stop_reason), None)
    return RunArtifacts(config=cfg.raw, reps=reps, summary=summary,
                        privacy=privacy_block, stop_reason=stop_reason)


def _json_safe_eps(eps):
    if eps is None:
        return None
    if math.isinf(eps):
        return "infinite"
    return float(eps)


# ---------------------------------------------------------------------------
# Outputs
# ---------------------------------------------------------------------------

CSV_COLUMNS = ["rep", "round", "main_acc", "backdoor_acc", "eps_spent", "attack_metric",
               "selected_clients"]


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        if math.isinf(value):
            return "inf"
        return repr(value)
    return str(value)


def write_outputs(artifacts: RunArtifacts, out_dir) -> dict[str, str]:
    """Write metrics.csv and report.json; byte-stable for identical artifacts."""
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "metrics.csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for rep in artifacts.reps:
            for rec in rep.records:
                writer.writerow([
                    rep.rep,
                    rec.round_index,
                    _fmt(rec.main_accuracy),
                    _fmt(rec.backdoor_accuracy),
                    _fmt(rec.eps_spent),
                    _fmt(rep.attack_metric_by_round.get(rec.round_index)),
                    ";".join(str(c) for c in rec.selected_ids),
                ])

    report = {
        "config": artifacts.config,
        "rounds_executed": artifacts.rounds_executed,
        "privacy": artifacts.privacy,
        "attack_report": _attack_report_json(artifacts),
        "stop_reason": artifacts.stop_reason,
        "summary": artifacts.summary,
    }
    json_path = os.path.join(out_dir, "report.json")
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return {"metrics": csv_path, "report": json_path}


def _attack_report_json(artifacts: RunArtifacts):
    per_rep = [r.attack_report.to_json_dict() for r in artifacts.reps if r.attack_report is not None]
    if not per_rep:
        return None
    return {
        "name": per_rep[0]["name"],
        "metric_mean": artifacts.summary["attack_metric_mean"],
        "metric_std": artifacts.summary["attack_metric_std"],
        "per_repetition": per_rep,
    }
