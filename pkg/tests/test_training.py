import math
from dataclasses import replace

import numpy as np
import pytest

from lupi.data import GenConfig, TripletDataset, generate, split
from lupi.models import ArchConfig, build_model
from lupi.training import (
    Adam,
    METRICS_HEADER,
    PlateauSchedule,
    TrainConfig,
    evaluate,
    train,
    write_metrics_csv,
)
from lupi.tensor import Tensor

GEN = GenConfig(num_classes=3, grid=6, support=6, fragments=1, fragment_size=2, jitter=1)
ARCH = ArchConfig(input_dim=36, trunk=(12,), head_hidden=8, num_classes=3, var_hidden=6)
FAST = TrainConfig(max_epochs=6, batch_size=16, batch_per_n=0)


@pytest.fixture(scope="module")
def splits():
    return split(generate(GEN, 120, 1.0, 0), (0.6, 0.2, 0.2), 0)


class TestSchedule:
    def test_scripted_sequence(self):
        s = PlateauSchedule(patience=2, factor=10, max_decays=2)
        metrics = [0.1, 0.2, 0.2, 0.2, 0.19, 0.2, 0.3, 0.3, 0.3, 0.3, 0.3, 0.3, 0.3]
        got = [s.step(m) for m in metrics]
        assert got == ["improved", "improved", "wait", "decay", "wait", "decay", "improved",
                       "wait", "decay", "wait", "decay", "wait", "stop"]

    def test_equal_metric_is_not_improvement(self):
        s = PlateauSchedule(patience=1)
        s.step(0.5)
        assert s.step(0.5) == "decay"


class TestConfig:
    @pytest.mark.parametrize("kw", [{"lr": -1.0}, {"patience": 0}, {"decay_factor": 1.0}, {"optimizer": "rmsprop"},
                                    {"batch_per_n": -1}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_effective_batch(self):
        cfg = TrainConfig()
        assert [cfg.effective_batch(n) for n in (100, 200, 800, 3200)] == [8, 12, 50, 64]
        assert replace(cfg, batch_per_n=0).effective_batch(100) == 64


class TestOptimizers:
    def test_weight_decay_skips_biases(self):
        W = Tensor(np.ones(3), requires_grad=True)
        b = Tensor(np.ones(3), requires_grad=True)
        W.grad = np.zeros(3)
        b.grad = np.zeros(3)
        opt = Adam({"W": W, "b": b}, lr=0.1, weight_decay=0.5, decay_mask={"W": True, "b": False})
        for _ in range(5):
            opt.step()
        assert np.all(W.data < 1.0)
        np.testing.assert_array_equal(b.data, 1.0)

    def test_adam_first_step_size(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        p.grad = np.array([0.3])
        Adam({"p": p}, lr=0.01).step()
        assert p.data[0] == pytest.approx(0.99, abs=1e-9)


class TestTrain:
    def test_lr_zero_freezes_parameters(self, splits):
        tr, va, _ = splits
        m = build_model("lupi", ARCH, seed=0)
        before = {k: p.data.copy() for k, p in m.named_parameters().items()}
        rec = train(m, tr, va, replace(FAST, lr=0.0, max_epochs=2))
        for k, p in m.named_parameters().items():
            np.testing.assert_array_equal(p.data, before[k])
        vals = [r["top1"] for r in rec.rows if r["split"] == "val"]
        assert len(set(vals)) == 1

    def test_memorises_single_sample(self):
        ds = generate(GEN, 3, 1.0, 1).subset([0])
        m = build_model("noxstar", ARCH, seed=0)
        cfg = TrainConfig(max_epochs=200, patience=200, batch_per_n=0, weight_decay=0.0, lr=1e-2)
        rec = train(m, ds, ds, cfg)
        assert rec.final["train_top1"] == 1.0

    @pytest.mark.parametrize("kind", ["lupi", "noxstar", "gdropout", "multitask"])
    def test_deterministic(self, splits, kind):
        tr, va, te = splits
        recs = [train(build_model(kind, ARCH, seed=2), tr, va, replace(FAST, seed=2), te) for _ in range(2)]
        assert recs[0].rows == recs[1].rows
        assert recs[0].final == recs[1].final

    def test_rows_well_formed(self, splits, tmp_path):
        tr, va, te = splits
        rec = train(build_model("lupi", ARCH), tr, va, FAST, te)
        epochs = [r["epoch"] for r in rec.rows]
        assert epochs == sorted(epochs)
        assert all(0.0 <= r["top1"] <= 1.0 for r in rec.rows)
        assert {"best_epoch", "test_top1", "train_top1", "val_top1"} <= rec.final.keys()
        write_metrics_csv(tmp_path / "m.csv", rec)
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert lines[0] == ",".join(METRICS_HEADER)
        assert len(lines) == 1 + len(rec.rows)

    def test_divergence_recorded(self, splits):
        tr, va, _ = splits
        rec = train(build_model("noxstar", ARCH), tr, va, replace(FAST, lr=1e6, optimizer="sgd"))
        assert rec.status == "diverged"
        assert rec.last_finite_epoch < FAST.max_epochs

    def test_restores_best_checkpoint(self, splits):
        tr, va, _ = splits
        m = build_model("noxstar", ARCH)
        rec = train(m, tr, va, FAST)
        best = max(r["top1"] for r in rec.rows if r["split"] == "val")
        assert evaluate(m, va)["top1"] == best

    def test_rejects_mismatched_width(self, splits):
        tr, va, _ = splits
        with pytest.raises(ValueError, match="input_dim"):
            train(build_model("noxstar"), tr, va, FAST)


class TestEvaluate:
    def _model_with_logits(self, logits):
        class Fixed:
            def forward_eval(self, x):
                return Tensor(logits[: len(x)])
        return Fixed()

    def _split(self, y):
        n = len(y)
        z = np.zeros((n, 1))
        return TripletDataset(z, z, np.zeros(n, bool), np.asarray(y), z)

    def test_perfect(self):
        y = np.array([0, 2, 1])
        assert evaluate(self._model_with_logits(np.eye(3)[y] * 5), self._split(y))["top1"] == 1.0

    def test_ties_go_to_lowest_class(self):
        res = evaluate(self._model_with_logits(np.zeros((2, 4))), self._split([0, 3]))
        assert res["top1"] == 0.5
        assert res["ce"] == pytest.approx(math.log(4))

    def test_random_logits_near_chance(self):
        n = 20_000
        r = np.random.default_rng(0)
        res = evaluate(self._model_with_logits(r.normal(size=(n, 10))), self._split(r.integers(0, 10, n)))
        assert abs(res["top1"] - 0.1) < 3 * math.sqrt(0.09 / n)

    def test_invariant_to_variance_head(self, splits):
        _, va, _ = splits
        m = build_model("lupi", ARCH)
        ref = evaluate(m, va)
        m.var_heads[0][0].W.data[:] = 3.0
        assert evaluate(m, va) == ref

    def test_empty_split(self):
        with pytest.raises(ValueError):
            evaluate(self._model_with_logits(np.zeros((0, 2))), self._split(np.zeros(0, int)))
