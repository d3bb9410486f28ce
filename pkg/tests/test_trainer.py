import math

import mpmath
import numpy as np
import pytest

from bptriplet import data
from bptriplet import losses as L
from bptriplet import mining as M
from bptriplet import model as nets
from bptriplet import trainer as tr
from bptriplet.evaluation import make_monitor
from bptriplet.optim import OptimizerState, grl_schedule, lr_schedule, sgd_momentum_step
from bptriplet.tensor import ConfigError, Tensor

LR_AT_ONE = 0.16556002607617017  # 11 ** -0.75
GRL_AT_HALF = 0.9866142981514303  # 2 / (1 + e^-5) - 1


def test_schedule_oracles_match_mpmath():
    mpmath.mp.dps = 50
    assert float(mpmath.mpf(11) ** mpmath.mpf("-0.75")) == LR_AT_ONE
    assert float(2 / (1 + mpmath.exp(-5)) - 1) == GRL_AT_HALF


def _params(seed=0, dim=2):
    return nets.init_params(nets.MlpSpec((dim, 16, 8)), nets.MlpSpec((8, 3)), nets.MlpSpec((8, 8, 2)), seed)


@pytest.fixture(scope="module")
def task():
    return data.generate_shifted_mixture(data.ShiftSpec(per_category=40, seed=0))


def _cfg(**kw):
    base = dict(s0=60, pretrain_steps=40, batch_size=16,
                mining=M.MiningConfig(refresh_period=25), seed=3)
    base.update(kw)
    return tr.TrainConfig(**base)


class TestSgd:
    def _one(self):
        spec = nets.MlpSpec((2, 2))
        return nets.ModelParams({"f": spec}, {"f.0.weight": Tensor(np.ones((2, 2))), "f.0.bias": Tensor(np.zeros(2))})

    def test_plain_step(self):
        p = self._one()
        g = {"f.0.weight": np.full((2, 2), 2.0), "f.0.bias": np.array([1.0, -1.0])}
        q, _ = sgd_momentum_step(p, g, OptimizerState.zeros_like(p), 0.1, 0.0)
        np.testing.assert_allclose(q["f.0.weight"].data, np.full((2, 2), 0.8), rtol=0, atol=1e-15)
        np.testing.assert_allclose(q["f.0.bias"].data, [-0.1, 0.1], rtol=0, atol=1e-15)

    def test_zero_gradients_fixed(self):
        p = self._one()
        state = OptimizerState.zeros_like(p)
        q = p
        for _ in range(10):
            q, state = sgd_momentum_step(q, {}, state, 0.5, 0.9)
        assert q.equal(p)

    def test_two_momentum_steps(self):
        p = self._one()
        g = {"f.0.weight": np.full((2, 2), 3.0), "f.0.bias": np.array([1.0, 2.0])}
        state = OptimizerState.zeros_like(p)
        q, state = sgd_momentum_step(p, g, state, 0.1, 0.9)
        q, state = sgd_momentum_step(q, g, state, 0.1, 0.9)
        disp = p["f.0.bias"].data - q["f.0.bias"].data
        np.testing.assert_allclose(disp, 0.29 * g["f.0.bias"], rtol=1e-14)
        np.testing.assert_allclose(p["f.0.weight"].data - q["f.0.weight"].data, 0.29 * 3.0, rtol=1e-14)

    def test_group_multiplier(self):
        p = self._one()
        g = {"f.0.weight": np.ones((2, 2)), "f.0.bias": np.ones(2)}
        q, _ = sgd_momentum_step(p, g, OptimizerState.zeros_like(p), 0.1, 0.0, {"f": 10.0})
        np.testing.assert_allclose(q["f.0.bias"].data, [-1.0, -1.0], rtol=1e-15)

    def test_bad_momentum(self):
        p = self._one()
        with pytest.raises(ConfigError):
            sgd_momentum_step(p, {}, OptimizerState.zeros_like(p), 0.1, 1.0)


class TestSchedules:
    def test_lr(self):
        assert lr_schedule(0, 100, 0.01) == 0.01
        assert lr_schedule(100, 100, 0.01) == pytest.approx(0.01 * LR_AT_ONE, rel=1e-14)
        lrs = [lr_schedule(s, 100, 0.01) for s in range(0, 300)]
        assert all(b <= a for a, b in zip(lrs, lrs[1:]))

    def test_grl(self):
        assert grl_schedule(0, 100) == 0.0
        assert grl_schedule(50, 100) == pytest.approx(GRL_AT_HALF, rel=1e-14)
        assert grl_schedule(10**6, 100) == pytest.approx(1.0, abs=1e-15)
        cs = [grl_schedule(s, 100) for s in range(0, 300)]
        assert all(b >= a for a, b in zip(cs, cs[1:]))


class TestConfig:
    def test_defaults(self):
        cfg = tr.TrainConfig()
        assert cfg.n_pretrain == cfg.mining.refresh_period == 2000
        assert cfg.horizon == 6000

    @pytest.mark.parametrize("kw", [{"batch_size": 7}, {"momentum": 1.0}, {"lr0": 0.0}, {"s0": -1}])
    def test_rejects(self, kw):
        with pytest.raises(ConfigError):
            tr.TrainConfig(**kw)


class TestPretrain:
    def test_zero_steps_unchanged(self, task):
        p = _params()
        res = tr.pretrain(p, task.source, task.target, _cfg(pretrain_steps=0))
        assert res.params.equal(p)
        assert len(res.log) == 0

    def test_reaches_source_accuracy(self):
        spec = data.ShiftSpec(radius=3.0, std=0.4, seed=0)
        t = data.generate_shifted_mixture(spec)
        cfg = tr.TrainConfig(pretrain_steps=500, s0=0, seed=0)
        res = tr.pretrain(_params(), t.source, t.target, cfg)
        acc = np.mean(nets.predict(res.params, t.source.x) == t.source.y)
        assert acc >= 0.95
        assert res.log.warnings == []

    def test_finite_losses(self, task):
        res = tr.pretrain(_params(), task.source, task.target, _cfg(pretrain_steps=200))
        assert np.all(np.isfinite(res.log.column("loss_total")))
        assert not res.log.column("loss_bptri").any()

    def test_floor_warning(self, task):
        res = tr.pretrain(_params(), task.source, task.target, _cfg(pretrain_steps=1, src_acc_floor=1.0))
        assert res.log.warnings and "floor" in res.log.warnings[0]


class TestTrain:
    def test_refresh_cadence(self, task):
        _, main = tr.fit(_params(), task.source, task.target, _cfg())
        assert main.log.refresh_steps() == [1, 25, 50]

    def test_deterministic(self, task):
        a = tr.fit(_params(), task.source, task.target, _cfg())[1]
        b = tr.fit(_params(), task.source, task.target, _cfg())[1]
        assert a.log.to_csv() == b.log.to_csv()
        assert a.params.equal(b.params)

    def test_total_decomposes(self, task):
        cfg = _cfg(loss=L.LossConfig(lambda1=0.7, lambda2=1.3))
        _, main = tr.fit(_params(), task.source, task.target, cfg)
        log = main.log
        recon = 0.7 * log.column("loss_adv") + 1.3 * log.column("loss_bptri") + log.column("loss_cls")
        assert np.max(np.abs(recon - log.column("loss_total"))) < 1e-10
        assert log.column("loss_bptri").any()

    def test_lambda2_zero_is_baseline(self, task):
        base = _cfg(loss=L.LossConfig(lambda2=0.0))
        # triplet-only knobs cannot touch the baseline trace
        other = _cfg(loss=L.LossConfig(lambda2=0.0, gamma=3.0, alpha=2.0, margin=5.0),
                     mining=M.MiningConfig(refresh_period=25, triplets_per_anchor=4))
        a = tr.fit(_params(), task.source, task.target, base)[1]
        b = tr.fit(_params(), task.source, task.target, other)[1]
        assert not a.log.column("loss_bptri").any()
        assert not a.log.column("n_triplets").any()
        np.testing.assert_array_equal(a.log.column("loss_total"), b.log.column("loss_total"))
        assert a.params.equal(b.params)

    def test_pseudo_counts_logged(self, task):
        _, main = tr.fit(_params(), task.source, task.target, _cfg())
        n = main.log.column("n_pseudo")
        assert np.all(n <= len(task.target))
        assert len(main.selected) == n[-1]
        thr = main.log.column("threshold_mean")
        assert np.all((thr >= 0.9) & (thr <= 1.0))

    def test_monitor_only_at_refresh_and_end(self, task):
        calls = []
        monitor = make_monitor(task)

        def spy(params):
            calls.append(1)
            return monitor(params)

        _, main = tr.fit(_params(), task.source, task.target, _cfg(eval_period=20), monitor=spy)
        evaluated = [r.step for r in main.log.records if not math.isnan(r.tgt_acc)]
        assert evaluated == [1, 20, 25, 40, 50, 60]
        # one extra call at the end of pretraining
        assert len(calls) == len(evaluated) + 1

    def test_divergence_raises(self, task):
        with pytest.raises(tr.DivergenceError), np.errstate(all="ignore"):
            tr.fit(_params(), task.source, task.target, _cfg(lr0=1e6))

    def test_trainer_sees_no_target_labels(self, task):
        # the target view handed to training has no label field at all
        assert not hasattr(task.target, "y")
        tr.fit(_params(), task.source, data.UnlabeledDataset(task.target.x.copy()), _cfg(s0=5))

    def test_csv_schema(self, task):
        _, main = tr.fit(_params(), task.source, task.target, _cfg(s0=3))
        lines = main.log.to_csv().splitlines()
        assert lines[0] == ",".join(tr.METRICS_COLUMNS)
        assert len(lines) == 4
        assert all("," in ln and ";" not in ln for ln in lines)

    def test_log_monotone(self):
        log = tr.TrainLog()
        log.append(tr.StepRecord(1, 0, 0, 0, 0, 0, 0.9))
        with pytest.raises(ValueError):
            log.append(tr.StepRecord(1, 0, 0, 0, 0, 0, 0.9))
