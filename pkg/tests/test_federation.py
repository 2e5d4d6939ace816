import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedssd.data import generate_synthetic
from fedssd.distill import CompositeLossSpec, LossMode, backward, credibility_matrix
from fedssd.federation import (
    FederatedData,
    FederationConfig,
    aggregate,
    build_federated_data,
    client_update,
    load_checkpoint,
    run_federation,
    sample_clients,
    save_checkpoint,
)
from fedssd.errors import FedSSDError, ShapeError
from fedssd.nn import Batch, ModelParams, init_mlp


def scalar_model(v: float) -> ModelParams:
    return ModelParams(((np.array([[v]]), np.array([0.0])),))


@pytest.fixture(scope="module")
def small_data() -> FederatedData:
    full = generate_synthetic(4, 5, 60, 2.5, seed=0)
    test = generate_synthetic(4, 5, 20, 2.5, seed=0)
    return build_federated_data(
        full, test, 4, strategy="dirichlet", parameter=0.5, aux_per_class=8, partition_seed=1
    )


def small_config(**kw) -> FederationConfig:
    base = dict(
        n_clients=4, rounds=3, local_epochs=2, batch_size=16, learning_rate=0.05, hidden=(8,)
    )
    base.update(kw)
    return FederationConfig(**base)


class TestSampleClients:
    def test_full_participation(self):
        for t in range(5):
            assert sample_clients(10, 1.0, seed=3, round=t) == tuple(range(10))

    def test_ten_percent_of_hundred(self):
        ids = sample_clients(100, 0.1, seed=0, round=4)
        assert len(ids) == len(set(ids)) == 10

    def test_deterministic(self):
        assert sample_clients(50, 0.2, 7, 3) == sample_clients(50, 0.2, 7, 3)
        rounds = {sample_clients(50, 0.2, 7, t) for t in range(10)}
        assert len(rounds) > 1

    def test_float_product_not_rounded_up(self):
        assert len(sample_clients(10, 0.7, 0, 0)) == 7


class TestAggregate:
    def test_identical_inputs(self, tiny_net):
        out = aggregate([tiny_net] * 3, [5, 1, 9])
        assert out.equals(tiny_net)

    def test_weighted_scalar(self):
        out = aggregate([scalar_model(0.0), scalar_model(10.0)], [1, 3])
        assert out.layers[0][0][0, 0] == 7.5

    def test_matches_extended_precision(self):
        rng = np.random.default_rng(0)
        base = init_mlp(3, 2, (4,), seed=0)
        models = [base.with_flat(rng.normal(size=base.size)) for _ in range(5)]
        sizes = [13, 7, 1, 40, 22]
        got = aggregate(models, sizes).flat()
        total = sum(sizes)
        ref = [
            math.fsum(s * m.flat()[j] for s, m in zip(sizes, models)) / total
            for j in range(base.size)
        ]
        np.testing.assert_allclose(got, ref, rtol=0, atol=1e-12)

    def test_errors(self, tiny_net):
        with pytest.raises(ValueError):
            aggregate([], [])
        with pytest.raises(ValueError):
            aggregate([tiny_net], [0])
        with pytest.raises(ShapeError):
            aggregate([tiny_net, init_mlp(3, 4, (2,))], [1, 1])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 6))
    def test_convex_hull(self, seed, n):
        rng = np.random.default_rng(seed)
        base = init_mlp(2, 2, (3,), seed=0)
        models = [base.with_flat(rng.normal(scale=10, size=base.size)) for _ in range(n)]
        out = aggregate(models, rng.integers(1, 100, n)).flat()
        stack = np.stack([m.flat() for m in models])
        assert np.all(out >= stack.min(axis=0)) and np.all(out <= stack.max(axis=0))


class TestClientUpdate:
    def test_zero_epochs_returns_global(self, small_data):
        g = init_mlp(5, 4, (8,), seed=0)
        res = client_update(g, None, small_data.clients[0], small_config(local_epochs=0), seed=0)
        assert res.params.equals(g)

    def test_global_untouched(self, small_data):
        g = init_mlp(5, 4, (8,), seed=0)
        before = g.flat().copy()
        client_update(g, None, small_data.clients[0], small_config(), seed=0)
        np.testing.assert_array_equal(g.flat(), before)

    def test_ssd_zero_m_max_equals_fedavg(self, small_data):
        g = init_mlp(5, 4, (8,), seed=0)
        cred = credibility_matrix(g, small_data.auxiliary)
        ssd = client_update(g, cred, small_data.clients[1], small_config(loss=CompositeLossSpec("ssd", 0.0)), 5)
        avg = client_update(g, None, small_data.clients[1], small_config(), 5)
        assert ssd.params.equals(avg.params)

    def test_single_batch_hand_trace(self, small_data):
        local = small_data.clients[2]
        cfg = small_config(local_epochs=1, batch_size=len(local), momentum=0.9)
        g = init_mlp(5, 4, (8,), seed=3)
        res = client_update(g, None, local, cfg, seed=11)
        # one full-batch step; order does not matter for a mean-reduced loss
        order = np.random.default_rng(11).permutation(len(local))
        batch = Batch(local.features[order], local.labels[order])
        _, grads = backward(g, batch, CompositeLossSpec())
        expected = g.flat() - cfg.learning_rate * grads.flat()
        np.testing.assert_array_equal(res.params.flat(), expected)

    def test_empty_client(self, small_data):
        g = init_mlp(5, 4, (8,), seed=0)
        with pytest.raises(FedSSDError):
            client_update(g, None, small_data.clients[0].subset([]), small_config(), 0)

    def test_ssd_needs_credibility(self, small_data):
        g = init_mlp(5, 4, (8,), seed=0)
        with pytest.raises(ValueError):
            client_update(g, None, small_data.clients[0], small_config(loss=CompositeLossSpec("ssd", 0.1)), 0)


class TestRunFederation:
    def test_zero_rounds(self, small_data):
        res = run_federation(small_config(rounds=0), small_data)
        assert res.records == []
        assert res.final.equals(res.initial)

    def test_single_client_single_round(self, small_data):
        one = FederatedData(small_data.clients[:1], small_data.auxiliary, small_data.test)
        cfg = small_config(n_clients=1, rounds=1)
        res = run_federation(cfg, one)
        direct = client_update(res.initial, None, one.clients[0], cfg, seed=np.random.SeedSequence([cfg.training_seed, 0, 0]))
        assert res.final.equals(direct.params)

    def test_deterministic(self, small_data):
        a = run_federation(small_config(loss=CompositeLossSpec("ssd", 0.5)), small_data)
        b = run_federation(small_config(loss=CompositeLossSpec("ssd", 0.5)), small_data)
        assert [r.params_digest for r in a.records] == [r.params_digest for r in b.records]

    def test_workers_do_not_change_results(self, small_data):
        a = run_federation(small_config(workers=1), small_data)
        b = run_federation(small_config(workers=3), small_data)
        assert [r.params_digest for r in a.records] == [r.params_digest for r in b.records]

    @pytest.mark.parametrize("mode", ["ssd", "kl", "mse", "prox"])
    def test_zero_strength_is_fedavg(self, small_data, mode):
        ref = run_federation(small_config(), small_data)
        res = run_federation(small_config(loss=CompositeLossSpec(mode, 0.0)), small_data)
        assert res.final.equals(ref.final)
        assert [r.metrics.acc_global for r in res.records] == [r.metrics.acc_global for r in ref.records]

    def test_partial_participation(self, small_data):
        res = run_federation(small_config(participation=0.5, rounds=4), small_data)
        for rec in res.records:
            assert len(rec.clients) == 2 == len(set(rec.clients))
            assert sorted(rec.metrics.acc_local) == list(rec.clients)

    def test_credibility_only_in_ssd_mode(self, small_data):
        avg = run_federation(small_config(rounds=1), small_data)
        ssd = run_federation(small_config(rounds=1, loss=CompositeLossSpec("ssd", 0.1)), small_data)
        assert avg.records[0].credibility is None
        assert ssd.records[0].credibility.matrix.shape == (4, 4)

    def test_round_start_accuracy_chains(self, small_data):
        res = run_federation(small_config(rounds=3), small_data)
        for prev, cur in zip(res.records, res.records[1:]):
            assert cur.metrics.acc_global_start == prev.metrics.acc_global


class TestCheckpoint:
    def test_round_trip(self, tmp_path, tiny_net):
        path = save_checkpoint(tiny_net, tmp_path / "m.ckpt")
        assert path.read_bytes()[:5] == b"FSSD1"
        assert load_checkpoint(path).equals(tiny_net)

    def test_layout(self, tmp_path):
        p = ModelParams(((np.array([[1.5, -2.0]]), np.array([0.25])),))
        raw = save_checkpoint(p, tmp_path / "m.ckpt").read_bytes()
        expected = b"FSSD1" + (1).to_bytes(4, "little") + (1).to_bytes(4, "little")
        expected += (2).to_bytes(4, "little") + np.array([1.5, -2.0, 0.25], "<f8").tobytes()
        assert raw == expected

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"NOPE1....")
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "x")

    def test_truncated_payload(self, tmp_path, tiny_net):
        raw = save_checkpoint(tiny_net, tmp_path / "m.ckpt").read_bytes()
        (tmp_path / "t.ckpt").write_bytes(raw[:-8])
        with pytest.raises(ShapeError):
            load_checkpoint(tmp_path / "t.ckpt")


def test_config_validation():
    with pytest.raises(ValueError):
        FederationConfig(participation=0.0)
    with pytest.raises(ValueError):
        FederationConfig(batch_size=0)
    assert FederationConfig(n_clients=3, participation=0.01).clients_per_round == 1


def test_default_hyperparameters():
    cfg = FederationConfig()
    assert (cfg.n_clients, cfg.participation, cfg.local_epochs, cfg.batch_size) == (10, 1.0, 10, 64)
    assert (cfg.learning_rate, cfg.momentum) == (0.01, 0.9)
    assert cfg.loss.mode is LossMode.CE_ONLY
