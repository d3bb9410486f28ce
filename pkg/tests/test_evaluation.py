import numpy as np
import pytest

from bptriplet import data
from bptriplet import evaluation as E
from bptriplet import model as nets


@pytest.fixture(scope="module")
def iid_task():
    spec = data.ShiftSpec(rotation_deg=0.0, translation=(0.0, 0.0), seed=5)
    return data.generate_shifted_mixture(spec)


@pytest.fixture(scope="module")
def params():
    return nets.init_params(nets.MlpSpec((2, 16, 8)), nets.MlpSpec((8, 3)), nets.MlpSpec((8, 8, 2)), 0)


class TestAccuracy:
    def test_cases(self):
        assert E.accuracy([1, 2, 3], [1, 2, 3]) == 1.0
        assert E.accuracy([0, 0], [1, 1]) == 0.0
        assert E.accuracy([0, 1, 2, 2], [0, 1, 2, 0]) == 0.75

    def test_errors(self):
        with pytest.raises(ValueError):
            E.accuracy([1], [1, 2])
        with pytest.raises(ValueError):
            E.accuracy([], [])


class TestADistance:
    def test_formula(self):
        assert E.a_distance_from_error(0.5) == 0.0
        assert E.a_distance_from_error(0.05) == pytest.approx(1.8, abs=1e-15)

    def test_identical_distributions_near_zero(self, iid_task, params):
        fs = nets.extract_features(params, iid_task.source.x)
        ft = nets.extract_features(params, iid_task.target.x)
        for seed in range(5):
            assert abs(E.a_distance(fs, ft, seed=seed)) <= 0.3

    def test_separated_domains_near_two(self, rng):
        xs = rng.standard_normal((300, 2))
        xt = rng.standard_normal((300, 2)) + 10.0
        assert E.a_distance(xs, xt) > 1.9

    def test_swap_insensitive(self, rng):
        xs = rng.standard_normal((300, 2))
        xt = rng.standard_normal((300, 2)) + [1.0, 0.0]
        for seed in range(3):
            assert abs(E.a_distance(xs, xt, seed=seed) - E.a_distance(xt, xs, seed=seed)) < 0.2

    def test_deterministic(self, rng):
        xs, xt = rng.standard_normal((100, 3)), rng.standard_normal((100, 3)) + 0.5
        assert E.a_distance(xs, xt, seed=2) == E.a_distance(xs, xt, seed=2)

    def test_shape_errors(self):
        with pytest.raises(ValueError):
            E.a_distance(np.zeros((5, 2)), np.zeros((5, 3)))


class TestEvaluate:
    def test_read_only(self, iid_task, params):
        before = params.to_bytes()
        report = E.evaluate(params, iid_task)
        assert params.to_bytes() == before
        assert report.n_source == report.n_target == 600
        assert report.probe == E.ProbeConfig().describe()

    def test_report_round_trip(self, iid_task, params):
        report = E.evaluate(params, iid_task)
        assert E.EvalReport.from_text(report.to_text()) == report

    def test_report_validation(self):
        with pytest.raises(ValueError):
            E.EvalReport(1.5, 0.5, 0.0, 1, 1)
        with pytest.raises(ValueError):
            E.EvalReport(0.5, 0.5, 2.5, 1, 1)
        with pytest.raises(ValueError):
            E.EvalReport.from_text("colour=red\n")

    def test_monitor(self, iid_task, params):
        src, tgt = E.make_monitor(iid_task)(params)
        assert src == E.accuracy(nets.predict(params, iid_task.source.x), iid_task.source.y)
        assert tgt == E.accuracy(nets.predict(params, iid_task.target.x), iid_task.target_labels.y)


class TestExport:
    def test_rows_and_round_trip(self, iid_task, params, tmp_path):
        paths = E.export_features(params, iid_task, tmp_path)
        for domain, path in paths.items():
            lines = path.read_text().splitlines()
            assert len(lines) == 600 + 1
            assert lines[0] == "feature_0,feature_1,feature_2,feature_3,feature_4,feature_5,feature_6,feature_7,label,domain"
            feats, labels, domains = E.read_feature_csv(path)
            x = iid_task.source.x if domain == "source" else iid_task.target.x
            expected = nets.extract_features(params, x)
            np.testing.assert_allclose(feats, expected, rtol=1e-15, atol=0)
            assert set(domains) == {domain}
        _, labels, _ = E.read_feature_csv(paths["target"])
        np.testing.assert_array_equal(labels, iid_task.target_labels.y)

    def test_bad_domain(self, tmp_path):
        with pytest.raises(ValueError):
            E.write_feature_csv(tmp_path / "x.csv", np.zeros((1, 2)), [0], "other")
