import numpy as np
import pytest

from lupi.layers import HeteroDropoutConfig
from lupi.models import (
    ArchConfig,
    BaselineKind,
    build_model,
    checkpoint_document,
    from_checkpoint,
)
from lupi.tensor import RngState, ShapeError, backward, gradcheck_params

SMALL = ArchConfig(input_dim=6, trunk=(5, 4), head_hidden=4, num_classes=3, var_hidden=3)


def batch(n=5, seed=0):
    r = np.random.default_rng(seed)
    x = r.normal(size=(n, 6))
    mask = r.random((n, 6)) < 0.5
    return x, x * mask, r.integers(0, 3, n)


class TestStructure:
    def test_x_path_identical_across_kinds(self):
        ref = build_model("noxstar", SMALL, seed=3)
        for kind in ("lupi", "gdropout", "multitask"):
            other = build_model(kind, SMALL, seed=3)
            for a, b in zip(ref.x_path_parameters(), other.x_path_parameters()):
                np.testing.assert_array_equal(a.data, b.data)

    def test_trunk_shared_between_paths(self):
        m = build_model("lupi", SMALL, seed=0)
        x, xs, _ = batch()
        before_eval = m.forward_eval(x).data.copy()
        before_sig = m.sigmas(xs)[0].data.copy()
        m.trunk[0].W.data += 0.3
        assert not np.allclose(m.forward_eval(x).data, before_eval)
        assert not np.allclose(m.sigmas(xs)[0].data, before_sig)

    def test_site_widths(self):
        m = build_model("lupi", SMALL)
        _, xs, _ = batch()
        assert [s.shape[1] for s in m.sigmas(xs)] == [4, 4]
        assert SMALL.site_widths == (4, 4)

    def test_decay_mask(self):
        mask = build_model("lupi", SMALL).decay_mask()
        assert mask["trunk.0.W"] and mask["var.0.0.W"]
        assert not mask["trunk.0.b"]
        assert not mask["var.1.1.W"]

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            BaselineKind("svm")


class TestForward:
    def test_eval_ignores_variance_heads(self):
        m = build_model("lupi", SMALL, seed=1)
        x, _, _ = batch()
        ref = m.forward_eval(x).data.copy()
        for vh in m.var_heads:
            for layer in vh:
                layer.W.data[:] = 7.0
        np.testing.assert_array_equal(m.forward_eval(x).data, ref)

    def test_zero_variance_train_equals_eval(self):
        m = build_model("lupi", SMALL, seed=1)
        x, xs, _ = batch()
        eps = [np.zeros((5, 4)), np.zeros((5, 4))]
        logits, _ = m.forward_train(x, xs, eps=eps)
        np.testing.assert_array_equal(logits.data, m.forward_eval(x).data)

    def test_absent_rows_get_unit_multiplier(self):
        m = build_model("lupi", SMALL, seed=2)
        x, xs, _ = batch()
        present = np.array([True, False, True, False, False])
        eps = [np.full((5, 4), 3.0), np.full((5, 4), 3.0)]
        logits, sigmas = m.forward_train(x, xs, present=present, eps=eps)
        ref = m.forward_eval(x).data
        np.testing.assert_array_equal(logits.data[~present], ref[~present])
        assert sigmas[0].shape == (2, 4)

    def test_no_privileged_input_uses_no_noise(self, rng):
        m = build_model("lupi", SMALL)
        x, _, _ = batch()
        logits, sigmas = m.forward_train(x, None, rng)
        assert sigmas == [] and rng.draws == 0
        np.testing.assert_array_equal(logits.data, m.forward_eval(x).data)

    def test_mismatched_xstar(self, rng):
        m = build_model("lupi", SMALL)
        x, _, _ = batch()
        with pytest.raises(ShapeError):
            m.forward_train(x, np.zeros((5, 3)), rng)

    def test_input_width_checked(self):
        with pytest.raises(ShapeError):
            build_model("noxstar", SMALL).forward_eval(np.zeros((2, 5)))


class TestLoss:
    @pytest.mark.parametrize("kind", ["lupi", "gdropout", "multitask", "noxstar"])
    def test_gradcheck_frozen_noise(self, kind):
        m = build_model(kind, SMALL, seed=4)
        x, xs, y = batch(seed=4)
        r = np.random.default_rng(9)
        eps = [r.normal(size=(5, 4)), r.normal(size=(5, 4))]
        params = m.parameters()
        if kind == "multitask":
            # the regression target is detached, so trunk finite differences
            # would also move the target
            params = m.privileged_parameters() + [p for layer in m.head for p in layer.parameters()]
        err = gradcheck_params(lambda: m.loss(x, y, xs, 0.5, eps=eps).total, params)
        assert err < 1e-4

    def test_beta_zero_unit_sigma_is_cross_entropy(self):
        m = build_model("lupi", SMALL)
        x, xs, y = batch()
        parts = m.loss(x, y, xs, beta=0.0, eps=[np.zeros((5, 4))] * 2)
        assert parts.penalty.item() == 0.0
        assert parts.total.item() == parts.ce.item()

    def test_multitask_target_detached(self):
        m = build_model("multitask", SMALL, seed=5)
        x, xs, y = batch()
        backward(m.loss(x, y, xs).penalty)
        assert np.any(m.aux[0].W.grad != 0)

    def test_mc_samples_average(self, rng):
        m = build_model("lupi", SMALL)
        x, xs, y = batch()
        single = m.loss(x, y, xs, rng=RngState(0)).ce.item()
        multi = m.loss(x, y, xs, rng=RngState(0), samples=4).ce.item()
        assert np.isfinite(single) and np.isfinite(multi) and single != multi


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        m = build_model("lupi", SMALL, seed=8, dropout=HeteroDropoutConfig(sigma_sq_max=2.0))
        for p in m.parameters():
            p.data += np.random.default_rng(0).normal(size=p.shape)
        m.save(tmp_path / "ck.json")
        back = type(m).load(tmp_path / "ck.json")
        x, _, _ = batch()
        np.testing.assert_array_equal(back.forward_eval(x).data, m.forward_eval(x).data)
        for k, p in m.named_parameters().items():
            np.testing.assert_array_equal(back.named_parameters()[k].data, p.data)
        assert back.dropout.sigma_sq_max == 2.0

    def test_fingerprint_mismatch(self):
        doc = checkpoint_document(build_model("lupi", SMALL))
        doc["header"]["arch"]["head_hidden"] = 5
        with pytest.raises(ValueError, match="fingerprint"):
            from_checkpoint(doc)

    def test_version_checked(self):
        doc = checkpoint_document(build_model("noxstar", SMALL))
        doc["header"]["format_version"] = 99
        with pytest.raises(ValueError, match="format_version"):
            from_checkpoint(doc)
