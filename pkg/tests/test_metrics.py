import json

import numpy as np
import pytest

from fedssd.data import LabeledDataset, generate_synthetic
from fedssd.distill import credibility_matrix
from fedssd.federation import FederationConfig, build_federated_data, run_federation
from fedssd.metrics import (
    RoundMetrics,
    RoundRecord,
    emit,
    evaluate,
    forgetting_gap,
    read_metrics_csv,
    rounds_to_target,
)
from fedssd.nn import ModelParams, init_mlp


def argmax_of_features(k: int) -> ModelParams:
    return ModelParams(((np.eye(k), np.zeros(k)),))


class TestEvaluate:
    def test_perfect(self):
        x = np.eye(3)[[0, 1, 2, 2]]
        res = evaluate(argmax_of_features(3), LabeledDataset(x, [0, 1, 2, 2], 3))
        assert res.accuracy == 1.0
        np.testing.assert_array_equal(res.confusion, np.diag([1, 1, 2]))

    def test_constant_logits(self):
        ds = generate_synthetic(4, 3, 5, 1.0, 0)
        p = ModelParams(((np.zeros((4, 3)), np.ones(4)),))
        assert evaluate(p, ds).accuracy == pytest.approx(0.25)

    def test_ten_sample_fixture(self):
        # predictions are the argmax of the feature rows
        preds = [0, 0, 1, 1, 1, 2, 0, 2, 2, 1]
        labels = [0, 0, 0, 1, 1, 1, 2, 2, 2, 2]
        x = np.eye(3)[preds]
        res = evaluate(argmax_of_features(3), LabeledDataset(x, labels, 3))
        assert res.accuracy == pytest.approx(6 / 10)
        np.testing.assert_array_equal(res.confusion, [[2, 1, 0], [0, 2, 1], [1, 1, 2]])
        np.testing.assert_allclose(res.class_accuracy, [2 / 3, 2 / 3, 2 / 4])

    def test_confusion_matches_credibility(self):
        rng = np.random.default_rng(1)
        ds = generate_synthetic(5, 4, 30, 1.5, 2)
        p = init_mlp(4, 5, (6,), seed=rng)
        res = evaluate(p, ds)
        cred = credibility_matrix(p, ds)
        np.testing.assert_array_equal(res.confusion / res.confusion.sum(axis=1, keepdims=True), cred.matrix)
        assert res.confusion.sum() == len(ds)

    def test_empty(self):
        ds = generate_synthetic(2, 2, 1, 1.0, 0).subset([])
        with pytest.raises(ValueError):
            evaluate(argmax_of_features(2).with_flat(np.zeros(6)), ds)


class TestGapAndRounds:
    def test_gap(self):
        assert forgetting_gap(0.4, 0.4) == 0.0
        assert forgetting_gap(0.7, 0.6) == pytest.approx(0.1)
        with pytest.raises(ValueError):
            forgetting_gap(1.2, 0.5)

    def test_rounds_to_target(self):
        assert rounds_to_target([0.1, 0.5, 0.9], 0.5) == 1
        assert rounds_to_target([0.1, 0.5, 0.9], 0.95) is None
        with pytest.raises(ValueError):
            rounds_to_target([], 0.1)

    def test_scan_oracle(self):
        rng = np.random.default_rng(0)
        series = np.cumsum(rng.uniform(-0.02, 0.05, 40)).clip(0, 1)
        target = float(series[25])
        first = next(t for t in range(40) if series[t] >= target)
        assert rounds_to_target(series, target) == first


def fake_record(t: int, k: int = 3) -> RoundRecord:
    m = RoundMetrics(
        acc_global=0.1 + t / 7,
        acc_global_start=1 / 3,
        acc_local={0: 0.2, 2: 0.1 + t / 11},
        class_accuracy=np.linspace(0, 1, k) / (t + 3),
        confusion=np.arange(k * k).reshape(k, k),
        losses={0: (1.0 / 3, 0.0), 2: (0.7, 1e-17)},
    )
    return RoundRecord(t, (0, 2), None, "ab" * 32, m)


class TestEmit:
    def test_header_only(self, tmp_path):
        csv_path, _ = emit([], tmp_path / "m.csv", tmp_path / "r.json", n_classes=3)
        lines = csv_path.read_text().splitlines()
        assert len(lines) == 1
        assert lines[0].startswith("schema_version,round,acc_global")

    def test_one_round_two_lines(self, tmp_path):
        csv_path, _ = emit([fake_record(0)], tmp_path / "m.csv", tmp_path / "r.json", n_classes=3)
        assert len(csv_path.read_text().splitlines()) == 2

    def test_round_trip_lossless(self, tmp_path):
        recs = [fake_record(t) for t in range(4)]
        csv_path, json_path = emit(recs, tmp_path / "m.csv", tmp_path / "r.json", n_classes=3, meta={"seed": 5})
        doc = json.loads(json_path.read_text())
        assert doc["seed"] == 5
        cols = read_metrics_csv(csv_path)
        for rec, row, col_i in zip(recs, doc["rounds"], range(4)):
            m = rec.metrics
            assert row["acc_global"] == m.acc_global == cols["acc_global"][col_i]
            assert row["acc_local_mean"] == m.acc_local_mean == cols["acc_local_mean"][col_i]
            assert row["gap"] == m.gap == cols["gap"][col_i]
            assert row["class_accuracy"] == m.class_accuracy.tolist()
            assert row["confusion"] == m.confusion.tolist()
            assert row["losses"]["2"]["distill"] == 1e-17
            for k in range(3):
                assert cols[f"class_acc_{k}"][col_i] == m.class_accuracy[k]

    def test_identical_bytes(self, tmp_path):
        recs = [fake_record(t) for t in range(3)]
        emit(recs, tmp_path / "a.csv", tmp_path / "a.json", n_classes=3)
        emit(recs, tmp_path / "b.csv", tmp_path / "b.json", n_classes=3)
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_unwritable_path(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError, match="file"):
            emit([], blocker / "m.csv", tmp_path / "r.json", n_classes=2)

    def test_real_run_with_credibility(self, tmp_path):
        full = generate_synthetic(3, 4, 40, 2.0, 0)
        test = generate_synthetic(3, 4, 10, 2.0, 0)
        data = build_federated_data(full, test, 2, aux_per_class=5)
        from fedssd.distill import CompositeLossSpec

        cfg = FederationConfig(n_clients=2, rounds=2, local_epochs=1, hidden=(4,), loss=CompositeLossSpec("ssd", 0.1))
        res = run_federation(cfg, data)
        _, json_path = emit(res.records, tmp_path / "m.csv", tmp_path / "r.json", n_classes=3)
        doc = json.loads(json_path.read_text())
        cred = doc["rounds"][1]["credibility"]
        np.testing.assert_array_equal(cred["matrix"], res.records[1].credibility.matrix)
        assert cred["support"] == [5, 5, 5]


def test_local_mean_is_unweighted():
    m = fake_record(0).metrics
    assert m.acc_local_mean == pytest.approx((0.2 + 0.1) / 2)
