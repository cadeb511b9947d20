import numpy as np
import pytest

from fldp.data import gen_blobs
from fldp.fl import (
    CONTINUE,
    STOP,
    AdversaryHooks,
    ClientSpec,
    ClientUpdate,
    FlState,
    SelectionSpec,
    ServerConfig,
    aggregate_cdp,
    aggregate_norm_bound,
    aggregate_plain,
    aggregate_weak_dp,
    budget_guard,
    client_update_clipped,
    client_update_honest,
    client_update_ldp,
    run_round,
    select_clients,
)
from fldp.nn import Batch, ModelArch, ParamVector, init_model, loss_and_grad
from fldp.privacy import CdpConfig, DpSgdConfig, PrivacyLedger
from fldp.rng import RngStream

STREAMS = RngStream(31337)
DELTA = 1e-5
SHAPES = ((2,),)


def vec(*values):
    return ParamVector(np.array(values, dtype=float), ((len(values),),))


def upd(delta, n=1, cid=0, tag="honest"):
    return ClientUpdate(delta, n, cid, tag)


class TestSelectClients:
    def test_fixed_all(self):
        ids = select_clients(4, SelectionSpec("fixed", k=4), STREAMS.derive("s", 0))
        assert ids == [0, 1, 2, 3]

    def test_probability_one_selects_all(self):
        ids = select_clients(6, SelectionSpec("probability", q=1.0), STREAMS.derive("s", 1))
        assert ids == list(range(6))

    def test_deterministic_per_stream(self):
        a = select_clients(50, SelectionSpec("fixed", k=7), STREAMS.derive("s", 2))
        b = select_clients(50, SelectionSpec("fixed", k=7), STREAMS.derive("s", 2))
        assert a == b and len(a) == 7 and len(set(a)) == 7

    def test_k_too_large(self):
        with pytest.raises(ValueError):
            select_clients(3, SelectionSpec("fixed", k=5), STREAMS.derive("s", 3))


@pytest.fixture(scope="module")
def problem():
    arch = ModelArch((4, 6, 3))
    shard = gen_blobs(3, 4, 15, 0.0, 4.0, STREAMS.derive("data"))
    model = init_model(arch, STREAMS.derive("init"))
    return arch, shard, model


class TestClientUpdates:
    def test_zero_lr_means_zero_delta(self, problem):
        arch, shard, model = problem
        out = client_update_honest(model, arch, shard, 2, 8, 1e-300, STREAMS.derive("c", 0))
        np.testing.assert_allclose(out.delta.values, 0.0, atol=1e-290)
        assert out.n_examples == len(shard)

    def test_single_example_single_step(self, problem):
        arch, _, model = problem
        one = gen_blobs(3, 4, 1, 0.0, 4.0, STREAMS.derive("one")).subset([0])
        out = client_update_honest(model, arch, one, 1, 1, 0.5, STREAMS.derive("c", 1))
        _, g = loss_and_grad(model, arch, Batch(one.features, one.labels))
        np.testing.assert_allclose(out.delta.values, -0.5 * g.values, rtol=0, atol=1e-12)

    def test_deterministic_per_stream(self, problem):
        arch, shard, model = problem
        a = client_update_honest(model, arch, shard, 3, 8, 0.1, STREAMS.derive("c", 2, 5))
        b = client_update_honest(model, arch, shard, 3, 8, 0.1, STREAMS.derive("c", 2, 5))
        assert np.array_equal(a.delta.values, b.delta.values)

    def test_ldp_with_dp_disabled_matches_honest_full_batch(self, problem):
        arch, shard, model = problem
        cfg = DpSgdConfig(clip_bound=1e9, noise_multiplier=0.0, sampling_prob=1.0, epochs=2, lr=0.1)
        ldp = client_update_ldp(model, arch, shard, cfg, None, STREAMS.derive("c", 3))
        honest = client_update_honest(model, arch, shard, 2, len(shard), 0.1, STREAMS.derive("c", 4))
        np.testing.assert_allclose(ldp.delta.values, honest.delta.values, rtol=0, atol=1e-9)
        assert ldp.behavior_tag == "ldp"

    def test_clipped_update_norm_bounded(self, problem):
        arch, shard, model = problem
        for bound in (1e6, 0.05, 1e-4):
            out = client_update_clipped(model, arch, shard, 2, 8, 0.5, bound, STREAMS.derive("c", 5))
            assert out.delta.norm() <= bound * (1 + 1e-12)
        big = client_update_clipped(model, arch, shard, 2, 8, 0.5, 1e6, STREAMS.derive("c", 6))
        honest = client_update_honest(model, arch, shard, 2, 8, 0.5, STREAMS.derive("c", 6))
        np.testing.assert_allclose(big.delta.values, honest.delta.values, rtol=0, atol=1e-12)


class TestAggregators:
    def test_plain_weighted_mean(self):
        out = aggregate_plain([upd(vec(1, 1), n=1, cid=0), upd(vec(3, 3), n=3, cid=1)])
        np.testing.assert_allclose(out.values, [2.5, 2.5], rtol=0, atol=1e-15)

    def test_plain_identical_deltas(self):
        out = aggregate_plain([upd(vec(0.7, -0.2), n=2, cid=0), upd(vec(0.7, -0.2), n=5, cid=1)])
        np.testing.assert_allclose(out.values, [0.7, -0.2], rtol=0, atol=1e-15)

    def test_plain_equal_sizes_is_arithmetic_mean(self):
        out = aggregate_plain([upd(vec(1, 0), n=4, cid=0), upd(vec(0, 1), n=4, cid=1)])
        np.testing.assert_allclose(out.values, [0.5, 0.5], rtol=0, atol=1e-15)

    def test_plain_weights_sum_to_one(self):
        rng = STREAMS.derive("w")
        ns = [int(n) for n in rng.integers(1, 50, size=7)]
        weights = np.array(ns) / sum(ns)
        assert weights.sum() == pytest.approx(1.0, abs=1e-12)

    def test_norm_bound_example(self):
        out = aggregate_norm_bound([upd(vec(2, 0), cid=0), upd(vec(8, 0), cid=1)], 4.0)
        np.testing.assert_allclose(out.values, [3.0, 0.0], rtol=0, atol=1e-15)

    def test_norm_bound_inactive_below_threshold(self):
        ups = [upd(vec(0.1, 0.2), cid=0), upd(vec(-0.3, 0.1), cid=1)]
        out = aggregate_norm_bound(ups, 10.0)
        np.testing.assert_allclose(out.values, [-0.1, 0.15], rtol=0, atol=1e-15)

    def test_norm_bound_contains_huge_update(self):
        ups = [upd(vec(1e6, 0), cid=0)]
        out = aggregate_norm_bound(ups, 3.0)
        assert np.linalg.norm(out.values) <= 3.0 * (1 + 1e-12)

    def test_aggregate_norm_always_bounded(self):
        rng = STREAMS.derive("nb")
        for _ in range(20):
            ups = [upd(vec(*rng.normal(size=2) * 100), cid=i) for i in range(5)]
            out = aggregate_norm_bound(ups, 2.0)
            assert np.linalg.norm(out.values) <= 2.0 * (1 + 1e-12)

    def test_weak_dp_zero_sigma_equals_norm_bound(self):
        ups = [upd(vec(2, 0), cid=0), upd(vec(8, 0), cid=1)]
        ledger = PrivacyLedger(DELTA)
        out = aggregate_weak_dp(ups, 4.0, 0.0, ledger, STREAMS.derive("wd", 0))
        np.testing.assert_array_equal(out.values, aggregate_norm_bound(ups, 4.0).values)
        assert np.isinf(ledger.naive_eps_sum)  # zero noise spends everything

    def test_weak_dp_ledger_is_r_times_eps(self):
        ups = [upd(vec(1, 0), cid=0), upd(vec(0, 1), cid=1)]
        ledger = PrivacyLedger(DELTA)
        for r in range(10):
            aggregate_weak_dp(ups, 4.0, 0.5, ledger, STREAMS.derive("wd", 1, r))
        single = PrivacyLedger(DELTA)
        aggregate_weak_dp(ups, 4.0, 0.5, single, STREAMS.derive("wd", 2))
        assert ledger.naive_eps_sum == 10 * single.naive_eps_sum

    def test_weak_dp_noise_deterministic(self):
        ups = [upd(vec(1, 0), cid=0)]
        a = aggregate_weak_dp(ups, 4.0, 0.3, PrivacyLedger(DELTA), STREAMS.derive("wd", 3))
        b = aggregate_weak_dp(ups, 4.0, 0.3, PrivacyLedger(DELTA), STREAMS.derive("wd", 3))
        assert np.array_equal(a.values, b.values)

    def cdp_cfg(self, z=0.0, S=1.0, q=0.5):
        return CdpConfig(clip_bound=S, noise_scale=z, selection_prob=q,
                         budget_threshold=100.0, delta=DELTA)

    def test_cdp_zero_noise_is_mean_of_clipped(self):
        ups = [upd(vec(2, 0), cid=0), upd(vec(0, 0.5), cid=1)]
        out = aggregate_cdp(ups, self.cdp_cfg(S=1.0), PrivacyLedger(DELTA), STREAMS.derive("cdp", 0))
        np.testing.assert_allclose(out.values, [0.5, 0.25], rtol=0, atol=1e-15)

    def test_cdp_one_accountant_step_per_round(self):
        ups = [upd(vec(1, 0), cid=0)]
        ledger = PrivacyLedger(DELTA)
        for r in range(5):
            aggregate_cdp(ups, self.cdp_cfg(z=1.0), ledger, STREAMS.derive("cdp", 1, r))
        assert ledger.rdp_step_count == 5

    def test_cdp_defensive_reclip(self):
        ups = [upd(vec(1e9, 0), cid=0)]
        out = aggregate_cdp(ups, self.cdp_cfg(S=2.0), PrivacyLedger(DELTA), STREAMS.derive("cdp", 2))
        assert np.linalg.norm(out.values) <= 2.0 * (1 + 1e-12)

    def test_order_independence(self):
        rng = STREAMS.derive("ord")
        ups = [upd(vec(*rng.normal(size=2)), n=int(n), cid=i)
               for i, n in enumerate(rng.integers(1, 9, size=6))]
        shuffled = [ups[i] for i in rng.permutation(6)]
        assert np.array_equal(aggregate_plain(ups).values, aggregate_plain(shuffled).values)
        assert np.array_equal(aggregate_norm_bound(ups, 1.0).values,
                              aggregate_norm_bound(shuffled, 1.0).values)

    def test_empty_updates_rejected(self):
        with pytest.raises(ValueError):
            aggregate_plain([])


class TestReplacementIdentity:
    def test_exact_model_replacement(self):
        # attacker update through plain weighted aggregation and the server
        # learning-rate step lands exactly on theta_star
        from fldp.attacks import backdoor_replacement_update

        rng = STREAMS.derive("rep")
        for eta in (0.5, 1.0, 2.0):
            for _ in range(10):
                shapes = ((5,),)
                theta_r = ParamVector(rng.normal(size=5), shapes)
                theta_star = ParamVector(rng.normal(size=5), shapes)
                n_benign = [int(n) for n in rng.integers(1, 20, size=4)]
                n_att = int(rng.integers(1, 20))
                n_total = sum(n_benign) + n_att
                ups = [upd(ParamVector(np.zeros(5), shapes), n=n, cid=i + 1)
                       for i, n in enumerate(n_benign)]
                ups.append(backdoor_replacement_update(theta_star, theta_r, n_total, n_att, eta, client_id=0))
                agg = aggregate_plain(ups)
                theta_next = theta_r + eta * agg
                assert np.max(np.abs(theta_next.values - theta_star.values)) <= 1e-9


class TestBudgetGuard:
    def test_fresh_ledger_continues(self):
        assert budget_guard(PrivacyLedger(DELTA), 3.0) == CONTINUE

    def test_exceeded_budget_stops(self):
        ledger = PrivacyLedger(DELTA)
        ledger.accumulate_rdp(1.0, 1.0, steps=1)  # eps ~ 5.3 > 3
        assert budget_guard(ledger, 3.0) == STOP

    def test_boundary_is_strict(self):
        ledger = PrivacyLedger(DELTA)
        eps = ledger.epsilon()
        assert budget_guard(ledger, eps) == CONTINUE  # stop only when strictly over


def constant_update_fn(delta_values):
    def fn(view, ctx, rng):
        return ClientUpdate(vec(*delta_values), 1, ctx.round_index * 0, "honest")
    return fn


class TestRunRound:
    def make_state(self, model_values=(0.0, 0.0)):
        return FlState(model=vec(*model_values), ledger=PrivacyLedger(DELTA))

    def make_clients(self, deltas):
        specs = []
        for cid, d in enumerate(deltas):
            def fn(view, ctx, rng, d=d, cid=cid):
                return ClientUpdate(vec(*d), 1, cid, "honest")
            specs.append(ClientSpec(cid, 1, fn))
        return specs

    def cfg(self, **kw):
        defaults = dict(aggregator="plain", server_lr=1.0,
                        selection=SelectionSpec("fixed", k=2), rounds=5)
        defaults.update(kw)
        return ServerConfig(**defaults)

    def test_zero_deltas_leave_model_unchanged(self):
        state = self.make_state((0.3, -0.4))
        out = run_round(state, self.make_clients([(0, 0), (0, 0)]), self.cfg(),
                        AdversaryHooks(), STREAMS.child("rr", 0))
        assert np.array_equal(out.state.model.values, [0.3, -0.4])
        assert out.record.round_index == 0 and out.state.round_index == 1

    def test_single_client_equivalent_to_solo_training(self):
        state = self.make_state()
        out = run_round(state, self.make_clients([(1.5, -2.0)]),
                        self.cfg(selection=SelectionSpec("fixed", k=1)),
                        AdversaryHooks(), STREAMS.child("rr", 1))
        assert np.array_equal(out.state.model.values, [1.5, -2.0])

    def test_replay_is_bit_identical(self):
        arch = ModelArch((4, 3))
        shard = gen_blobs(3, 4, 10, 0.0, 4.0, STREAMS.derive("rr-data"))

        def make():
            state = FlState(model=init_model(arch, STREAMS.derive("rr-init")),
                            ledger=PrivacyLedger(DELTA))
            clients = [
                ClientSpec(cid, len(shard),
                           lambda view, ctx, rng, cid=cid: client_update_honest(
                               view, arch, shard, 1, 5, 0.1, rng, cid))
                for cid in range(4)
            ]
            records = []
            for _ in range(3):
                out = run_round(state, clients, self.cfg(selection=SelectionSpec("fixed", k=2)),
                                AdversaryHooks(), STREAMS.child("rr", 2))
                records.append(out.record)
            return state.model.values, records

        m1, r1 = make()
        m2, r2 = make()
        assert np.array_equal(m1, m2)
        assert [r.selected_ids for r in r1] == [r.selected_ids for r in r2]
        assert [r.main_accuracy for r in r1] == [r.main_accuracy for r in r2]

    def test_forced_attacker_keeps_round_size(self):
        state = self.make_state()
        clients = self.make_clients([(0, 0)] * 6)
        out = run_round(state, clients, self.cfg(selection=SelectionSpec("fixed", k=3)),
                        AdversaryHooks(force_selected=(5,)), STREAMS.child("rr", 3))
        assert len(out.record.selected_ids) == 3
        assert 5 in out.record.selected_ids
        assert len(out.record.honest_selected_ids) == 3

    def test_budget_guard_stop_is_sticky(self):
        cdp = CdpConfig(clip_bound=1.0, noise_scale=1.0, selection_prob=1.0,
                        budget_threshold=3.0, delta=DELTA)
        state = self.make_state()
        state.ledger.accumulate_rdp(1.0, 1.0, steps=1)  # already over budget
        clients = self.make_clients([(1, 1), (1, 1)])
        cfg = self.cfg(aggregator="cdp", cdp=cdp)
        out = run_round(state, clients, cfg, AdversaryHooks(), STREAMS.child("rr", 4))
        assert out.record is None and out.state.stopped
        assert out.state.stop_reason == "privacy_budget_exhausted"
        again = run_round(out.state, clients, cfg, AdversaryHooks(), STREAMS.child("rr", 5))
        assert again.record is None
        assert np.array_equal(out.state.model.values, [0.0, 0.0])
