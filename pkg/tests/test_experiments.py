import json

import numpy as np
import pytest

from bubbledetect import experiments as E
from bubbledetect import mlp
from bubbledetect.errors import ConstructionError, WidthMismatchError
from bubbledetect.monte_carlo import McConfig

QUICK_NET = mlp.TrainConfig(epochs=3, batch_size=16, hidden=(8, 4))
QUICK = dict(n_train=40, n_test=20, n_strikes=5, maturities=(1.0, 2.0, 4),
             train_config=QUICK_NET)


class TestMetrics:
    def test_r2_example(self):
        assert E.r2_score([0, 1, 2], [0, 1, 1]) == pytest.approx(0.5)

    def test_r2_perfect(self):
        assert E.r2_score([1.0, 3.0], [1.0, 3.0]) == 1.0

    def test_r2_constant_target(self):
        with pytest.raises(ArithmeticError):
            E.r2_score([1, 1, 1], [1, 2, 3])

    def test_r2_lengths(self):
        with pytest.raises(ConstructionError):
            E.r2_score([1, 2], [1, 2, 3])

    def test_accuracy_and_confusion(self):
        y = [True, True, False, False, True]
        p = [True, False, False, True, True]
        assert E.accuracy(y, p) == 0.6
        assert E.confusion(y, p) == [[1, 1], [1, 2]]

    def test_accuracy_empty(self):
        with pytest.raises(ConstructionError):
            E.accuracy([], [])


class TestReport:
    def make(self):
        return E.EvalReport("cev/otm", 0.99, 0.75, [[1, 1], [0, 2]], 0.9,
                            config={"n": 4}, paper={"a_test": 0.9995},
                            history=[{"epoch": 0, "loss": 0.7, "accuracy": 0.5}],
                            wall_clock=1.5)

    def test_json_round_trip(self):
        r = self.make()
        back = E.EvalReport.from_dict(json.loads(r.to_json()))
        assert back == r

    def test_wall_clock_optional(self):
        assert "wall_clock" not in json.loads(self.make().to_json(wall_clock=False))

    def test_inconsistent_confusion(self):
        with pytest.raises(ConstructionError):
            E.EvalReport("x", 1.0, 0.5, [[2, 0], [0, 2]])

    def test_markdown(self):
        table = E.markdown_table([self.make()])
        assert "| cev/otm | 99.0% | 75.0% | 0.900 | n/a | 100.0% | n/a |" in table

    def test_learning_curve(self, tmp_path):
        path = tmp_path / "curve.csv"
        self.make().write_learning_curve(path)
        assert path.read_text().splitlines()[0] == "epoch,loss,accuracy"


class TestWithinModel:
    def test_quick_run(self):
        report, parts = E.run_within_model(seed=3, **QUICK)
        assert len(parts["train"]) == 40 and len(parts["test"]) == 20
        assert sum(map(sum, report.confusion)) == 20
        assert report.paper["a_test"] == pytest.approx(0.9995)
        assert report.config["grid"]["strikes"][0] == 3.5

    def test_seed_reproducible(self):
        a, pa = E.run_within_model(seed=5, **QUICK)
        b, pb = E.run_within_model(seed=5, **QUICK)
        assert a.to_json(wall_clock=False) == b.to_json(wall_clock=False)
        assert pa["train"].equals(pb["train"])

    def test_transfer_protocols(self):
        report, parts = E.run_displacement_transfer(0.0, 0.5, seed=1, **QUICK)
        assert {s.d for s in parts["train"].specs} == {0.0}
        assert {s.d for s in parts["test"].specs} == {0.5}
        assert report.paper["a_test"] == pytest.approx(0.862)

    def test_bad_inputs(self):
        with pytest.raises(ConstructionError):
            E.run_within_model(n_train=1, n_test=5)
        with pytest.raises(ConstructionError):
            E.run_within_model(family="heston", **QUICK)
        with pytest.raises(ConstructionError):
            E.run_within_model(window="deep", **QUICK)

    def test_evaluate_rejects_width_mismatch(self):
        _, parts = E.run_within_model(seed=2, **QUICK)
        wrong = mlp.init((7, 4, 4))
        with pytest.raises(WidthMismatchError):
            E.evaluate(wrong, parts["train"], parts["test"], "x", {}, [], 0.0)

    def test_evaluate_rejects_empty_test(self):
        _, parts = E.run_within_model(seed=2, **QUICK)
        empty = parts["test"].subset(np.array([], dtype=int))
        with pytest.raises(ConstructionError):
            E.evaluate(parts["model"], parts["train"], empty, "x", {}, [], 0.0)


@pytest.fixture(scope="module")
def pool():
    return E.CrossModelPool(n_train=24, n_test=12, seed=4, n_strikes=6,
                            maturities=(2.0, 5.0, 4), mc_config=McConfig(1024, 0.1))


class TestCrossModel:
    def test_windows_share_the_pool(self, pool):
        low = pool.test_set("sabr", "low")
        high = pool.test_set("sabr", "high")
        assert low.grid.strikes[-1] == 3.5 and high.grid.strikes[0] == 3.0
        np.testing.assert_array_equal(low.labels, high.labels)

    def test_mixed_training_is_split_equally(self, pool):
        train = pool.training_set(("cev", "sin"), "high")
        assert len(train) == 24
        assert sorted(set(train.families)) == ["cev", "sin"]
        assert train.families.count("cev") == 12

    def test_cell_report(self, pool):
        report = E.run_cross_model(("sin", "cev"), "sabr", "high", pool=pool,
                                   train_config=mlp.TrainConfig(epochs=2, hidden=(4, 4)))
        assert report.name == "cev+sin->sabr/high"
        assert report.r2_defect is None
        assert report.paper["a_test"] == pytest.approx(0.957)

    def test_unknown_window(self, pool):
        with pytest.raises(ConstructionError):
            E.run_cross_model(("cev",), "sabr", "mid", pool=pool)

    def test_matrix_config(self):
        cfg = {"seed": 1, "experiments": [
            {"kind": "within", "n_train": 8, "n_test": 4, "n_strikes": 3,
             "maturities": [1.0, 2.0, 3],
             "train_config": {"epochs": 1, "hidden": [4, 4]}},
            {"kind": "cross", "n_train": 8, "n_test": 4, "mc_config": {"n_paths": 512, "dt": 0.2},
             "cells": [[["cev"], "sabr", "low"]]}]}
        with pytest.raises(ConstructionError):
            E.run_matrix({"experiments": [{"kind": "bogus"}]})
        reports = E.run_matrix(cfg)
        assert [r.name for r in reports] == ["cev/otm", "cev->sabr/low"]
