"""The finite-difference harness must pass on correct rules and catch broken ones."""
import numpy as np
import pytest

from vcnet.core import gradcheck
from vcnet.core.gradcheck import (GradCheckReport, check_blocks, check_gradients, check_model, failures,
                                  relative_error)
from vcnet.core.tensor import BACKWARD_RULES, relu, sum_all
from vcnet.main import main


def _broken_dense(saved, g):
    x, w = saved["x"], saved["w"]
    return (g @ w.T, 2.0 * (x.T @ g), g.sum(axis=0))


def _broken_relu(saved, g):
    return (0.5 * np.where(saved["mask"], g, 0.0),)


class TestHarness:

    def test_relative_error(self):
        assert relative_error(1e-8, 2e-8) == pytest.approx(1e-8)
        assert relative_error(100.0, 101.0) == pytest.approx(0.01)

    def test_report_pass_requires_checked_coordinates(self):
        assert GradCheckReport("x", 0.0, "", checked=1, skipped=0).passed
        assert not GradCheckReport("x", 0.0, "", checked=0, skipped=4).passed
        assert not GradCheckReport("x", 1e-3, "w[0]", checked=3, skipped=0).passed

    def test_coordinate_sampling(self, rng):
        values = {"a": rng.normal(size=(4, 4)), "b": rng.normal(size=3)}
        report = check_gradients("sum", lambda p: sum_all(p["a"]), values, rng, max_coordinates=5)
        assert report.checked == 5 and report.passed

    def test_kinks_are_skipped(self, rng):
        values = {"x": np.array([1e-7, -1e-7, 0.5])}
        report = check_gradients("relu", lambda p: sum_all(relu(p["x"])), values, rng)
        assert report.skipped == 2 and report.checked == 1
        assert report.passed

    def test_worst_parameter_path(self, rng, monkeypatch):
        monkeypatch.setitem(BACKWARD_RULES, "relu", _broken_relu)
        values = {"x": np.array([[1.0, 2.0], [3.0, -4.0]])}
        report = check_gradients("relu", lambda p: sum_all(relu(p["x"])), values, rng)
        assert not report.passed
        assert report.worst_parameter in {"x[0,0]", "x[0,1]", "x[1,0]"}


class TestSuite:

    def test_blocks_pass(self, rng):
        reports = check_blocks(rng)
        names = [r.name for r in reports]
        for expected in ("conv_stage", "multi_scale_v1", "recurrent", "cbam", "lateral", "neuromod",
                         "top_down", "predictive_error", "conv2d_strided_grouped", "max_pool",
                         "upsample_nearest", "dense", "softmax_cross_entropy"):
            assert expected in names
        assert failures(reports) == [], [(r.name, r.max_rel_error, r.worst_parameter) for r in failures(reports)]

    def test_model_passes(self):
        report = check_model(seed=0, samples=10)
        assert report.checked == 10
        assert report.passed, report

    def test_broken_dense_rule_is_caught(self, rng, monkeypatch):
        monkeypatch.setitem(BACKWARD_RULES, "dense", _broken_dense)
        bad = {r.name for r in failures(check_blocks(rng))}
        assert "dense" in bad
        assert "conv_stage" not in bad

    def test_broken_relu_rule_is_caught(self, rng, monkeypatch):
        monkeypatch.setitem(BACKWARD_RULES, "relu", _broken_relu)
        bad = {r.name for r in failures(check_blocks(rng))}
        assert {"conv_stage", "predictive_error"} <= bad
        assert "dense" not in bad

    def test_cli_exit_codes(self, monkeypatch, capsys):
        monkeypatch.setattr(gradcheck, "check_model",
                            lambda seed=0, samples=10, **kw: GradCheckReport("model[mini]", 0.0, "", 1, 0))
        assert main(["gradcheck", "--seed", "3"]) == 0
        monkeypatch.setitem(BACKWARD_RULES, "dense", _broken_dense)
        assert main(["gradcheck"]) == 1
        out = capsys.readouterr().out
        assert "exceeded 1e-05: dense at " in out
