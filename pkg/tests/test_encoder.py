import math

import numpy as np
import pytest

from voxenc.encoder import (
    CheckpointError,
    EncoderConfig,
    EncoderParams,
    backward,
    condensed_feature,
    forward,
    forward_batch,
    gelu,
    gelu_grad,
    init_params,
    load_params,
    save_params,
)


def normal_cdf(x):
    # independent oracle via the error function
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def tiny_config(rng):
    return EncoderConfig(
        n_voxels=int(rng.integers(1, 4)),
        n_queries=int(rng.integers(1, 4)),
        feat_dim=int(rng.integers(2, 6)),
        hidden=int(rng.integers(1, 5)),
        query_out=int(rng.integers(1, 4)),
    )


class TestGelu:
    def test_zero(self):
        assert gelu(0.0) == 0.0

    def test_one(self):
        assert abs(float(gelu(1.0)) - 1.0 * normal_cdf(1.0)) < 1e-12
        assert abs(float(gelu(1.0)) - 0.841345) < 1e-6

    def test_negative_asymptote(self):
        assert abs(float(gelu(-10.0))) < 1e-22

    def test_matches_cdf_oracle_on_grid(self):
        xs = np.linspace(-6, 6, 101)
        expected = np.array([x * normal_cdf(x) for x in xs])
        assert np.allclose(gelu(xs), expected, atol=1e-12)

    def test_grad_matches_finite_difference(self):
        xs = np.linspace(-4, 4, 41)
        h = 1e-6
        fd = (gelu(xs + h) - gelu(xs - h)) / (2 * h)
        assert np.allclose(gelu_grad(xs), fd, atol=1e-8)


class TestInit:
    def test_deterministic(self):
        cfg = EncoderConfig(n_voxels=3, hidden=8, query_out=2, n_queries=4, feat_dim=16)
        a = init_params(cfg, seed=42)
        b = init_params(cfg, seed=42)
        for name, t in a.tensors().items():
            assert np.array_equal(t, b.tensors()[name])

    def test_fan_scaled_bound(self):
        cfg = EncoderConfig(n_voxels=2, hidden=4, query_out=2, n_queries=3, feat_dim=768)
        params = init_params(cfg, seed=0)
        assert np.abs(params.w1).max() <= math.sqrt(6.0 / (768 + 4))
        assert np.abs(params.w2).max() <= math.sqrt(6.0 / (4 + 2))
        assert np.abs(params.w_head).max() <= math.sqrt(6.0 / (3 * 2 + 2))

    def test_biases_zero(self):
        cfg = EncoderConfig(n_voxels=5, hidden=4, query_out=2, n_queries=3, feat_dim=8)
        params = init_params(cfg, seed=1)
        assert not params.b1.any() and not params.b2.any() and not params.b_head.any()


class TestForward:
    def test_zero_params_returns_bias(self):
        cfg = EncoderConfig(n_voxels=4, hidden=3, query_out=2, n_queries=2, feat_dim=5)
        zeros = {k: np.zeros_like(v) for k, v in init_params(cfg, 0).tensors().items()}
        zeros["b_head"] = np.array([1.0, -2.0, 3.0, 0.5])
        params = EncoderParams(cfg, **zeros)
        pred, _ = forward(params, np.random.default_rng(0).standard_normal((2, 5)))
        assert np.array_equal(pred, zeros["b_head"])

    def test_hand_computed_example(self):
        # Q=1, D=2, hidden=1, query_out=1, V=1; input (5, 7):
        # h = GELU(5*1 + 7*0) = 5 Phi(5); z = h; pred = 2 z + 3
        cfg = EncoderConfig(n_voxels=1, n_queries=1, feat_dim=2, hidden=1, query_out=1)
        params = EncoderParams(
            cfg,
            w1=np.array([[1.0], [0.0]]),
            b1=np.zeros(1),
            w2=np.array([[1.0]]),
            b2=np.zeros(1),
            w_head=np.array([[2.0]]),
            b_head=np.array([3.0]),
        )
        pred, _ = forward(params, np.array([[5.0, 7.0]]))
        expected = 2.0 * 5.0 * normal_cdf(5.0) + 3.0
        assert abs(float(pred[0]) - expected) < 1e-12
        assert abs(float(pred[0]) - 12.99997) < 1e-3

    def test_output_length_is_v(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            cfg = tiny_config(rng)
            params = init_params(cfg, 0)
            pred, _ = forward(params, rng.standard_normal((cfg.n_queries, cfg.feat_dim)))
            assert pred.shape == (cfg.n_voxels,)

    def test_batch_matches_single(self):
        rng = np.random.default_rng(4)
        cfg = EncoderConfig(n_voxels=3, hidden=5, query_out=2, n_queries=4, feat_dim=6)
        params = init_params(cfg, 7)
        batch = rng.standard_normal((9, 4, 6))
        preds, _ = forward_batch(params, batch)
        for i in range(9):
            single, _ = forward(params, batch[i])
            assert np.allclose(preds[i], single, atol=1e-12)

    def test_query_weight_sharing_permutation(self):
        # duplicate head blocks across queries: swapping two queries' inputs
        # permutes the z blocks but leaves the prediction unchanged
        rng = np.random.default_rng(8)
        cfg = EncoderConfig(n_voxels=2, hidden=4, query_out=3, n_queries=5, feat_dim=6)
        params = init_params(cfg, 0)
        block = rng.standard_normal((cfg.query_out, cfg.n_voxels))
        params = EncoderParams(
            cfg,
            w1=params.w1,
            b1=params.b1,
            w2=params.w2,
            b2=params.b2,
            w_head=np.tile(block, (cfg.n_queries, 1)),
            b_head=params.b_head,
        )
        f = rng.standard_normal((cfg.n_queries, cfg.feat_dim))
        swapped = f.copy()
        swapped[[1, 3]] = swapped[[3, 1]]
        pred_a, _ = forward(params, f)
        pred_b, _ = forward(params, swapped)
        assert np.allclose(pred_a, pred_b, atol=1e-12)
        za = condensed_feature(params, f).reshape(cfg.n_queries, cfg.query_out)
        zb = condensed_feature(params, swapped).reshape(cfg.n_queries, cfg.query_out)
        assert np.allclose(za[1], zb[3], atol=0) and np.allclose(za[3], zb[1], atol=0)


class TestBackward:
    def test_zero_grad_out(self):
        rng = np.random.default_rng(0)
        cfg = tiny_config(rng)
        params = init_params(cfg, 0)
        _, trace = forward(params, rng.standard_normal((cfg.n_queries, cfg.feat_dim)))
        grads = backward(params, trace, np.zeros(cfg.n_voxels))
        assert all(not g.any() for g in grads.values())

    def test_bias_head_gradient_exact(self):
        rng = np.random.default_rng(1)
        cfg = tiny_config(rng)
        params = init_params(cfg, 1)
        _, trace = forward(params, rng.standard_normal((cfg.n_queries, cfg.feat_dim)))
        g = rng.standard_normal(cfg.n_voxels)
        grads = backward(params, trace, g)
        assert np.array_equal(grads["b_head"], g)

    def test_stale_trace_rejected(self):
        rng = np.random.default_rng(2)
        cfg = tiny_config(rng)
        params = init_params(cfg, 0)
        other = init_params(cfg, 1)
        _, trace = forward(params, rng.standard_normal((cfg.n_queries, cfg.feat_dim)))
        with pytest.raises(ValueError):
            backward(other, trace, np.zeros(cfg.n_voxels))

    @staticmethod
    def finite_difference_grads(params, f, grad_out, h=1e-5):
        """Central finite differences of prediction . grad_out, the stated oracle."""
        grads = {}
        for name, tensor in params.tensors().items():
            g = np.zeros_like(tensor)
            flat = tensor.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                plus = float(forward(params, f)[0] @ grad_out)
                flat[i] = orig - h
                minus = float(forward(params, f)[0] @ grad_out)
                flat[i] = orig
                g.reshape(-1)[i] = (plus - minus) / (2 * h)
            grads[name] = g
        return grads

    def test_gradcheck_small_fixed_net(self):
        rng = np.random.default_rng(99)
        cfg = EncoderConfig(n_voxels=2, n_queries=2, feat_dim=4, hidden=3, query_out=2)
        params = init_params(cfg, 3)
        f = rng.standard_normal((2, 4))
        grad_out = rng.standard_normal(2)
        _, trace = forward(params, f)
        analytic = backward(params, trace, grad_out)
        numeric = self.finite_difference_grads(params, f, grad_out)
        for name in analytic:
            denom = np.maximum(np.maximum(np.abs(analytic[name]), np.abs(numeric[name])), 1e-8)
            rel = np.abs(analytic[name] - numeric[name]) / denom
            assert rel.max() < 1e-4, name

    def test_batched_backward_sums_samples(self):
        rng = np.random.default_rng(12)
        cfg = EncoderConfig(n_voxels=3, n_queries=2, feat_dim=4, hidden=3, query_out=2)
        params = init_params(cfg, 5)
        batch = rng.standard_normal((4, 2, 4))
        gouts = rng.standard_normal((4, 3))
        _, btrace = forward_batch(params, batch)
        batched = backward(params, btrace, gouts)
        summed = {k: np.zeros_like(v) for k, v in batched.items()}
        for i in range(4):
            _, tr = forward(params, batch[i])
            for k, v in backward(params, tr, gouts[i]).items():
                summed[k] += v
        for k in batched:
            assert np.allclose(batched[k], summed[k], atol=1e-10)


class TestCondensed:
    def test_zero_params_zero_vector(self):
        cfg = EncoderConfig(n_voxels=2, n_queries=3, feat_dim=4, hidden=2, query_out=2)
        zeros = {k: np.zeros_like(v) for k, v in init_params(cfg, 0).tensors().items()}
        params = EncoderParams(cfg, **zeros)
        out = condensed_feature(params, np.ones((3, 4)))
        assert not out.any()

    def test_matches_forward_intermediate(self):
        rng = np.random.default_rng(6)
        cfg = tiny_config(rng)
        params = init_params(cfg, 2)
        f = rng.standard_normal((cfg.n_queries, cfg.feat_dim))
        _, trace = forward(params, f)
        assert np.array_equal(condensed_feature(params, f), trace.condensed)

    def test_default_length(self):
        cfg = EncoderConfig(n_voxels=1)
        assert cfg.condensed_dim == 197 * 64 == 12608


class TestSerialization:
    def test_round_trip(self, tmp_path):
        cfg = EncoderConfig(n_voxels=4, n_queries=3, feat_dim=6, hidden=5, query_out=2)
        params = init_params(cfg, 13)
        save_params(params, tmp_path / "ckpt")
        back = load_params(tmp_path / "ckpt")
        assert back.config == cfg
        for name, t in params.tensors().items():
            assert t.tobytes() == back.tensors()[name].tobytes()

    def test_identical_predictions_after_reload(self, tmp_path):
        rng = np.random.default_rng(7)
        cfg = EncoderConfig(n_voxels=3, n_queries=4, feat_dim=8, hidden=6, query_out=3)
        params = init_params(cfg, 21)
        save_params(params, tmp_path / "ckpt")
        back = load_params(tmp_path / "ckpt")
        f = rng.standard_normal((4, 8))
        assert np.array_equal(forward(params, f)[0], forward(back, f)[0])

    def test_corrupted_manifest(self, tmp_path):
        cfg = EncoderConfig(n_voxels=2, n_queries=2, feat_dim=4, hidden=2, query_out=2)
        save_params(init_params(cfg, 0), tmp_path / "ckpt")
        (tmp_path / "ckpt" / "manifest.json").write_text("{broken")
        with pytest.raises(CheckpointError):
            load_params(tmp_path / "ckpt")

    def test_manifest_shape_mismatch(self, tmp_path):
        import json

        cfg = EncoderConfig(n_voxels=2, n_queries=2, feat_dim=4, hidden=2, query_out=2)
        save_params(init_params(cfg, 0), tmp_path / "ckpt")
        manifest = json.loads((tmp_path / "ckpt" / "manifest.json").read_text())
        manifest["tensors"]["w1"]["shape"] = [4, 3]
        (tmp_path / "ckpt" / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(CheckpointError):
            load_params(tmp_path / "ckpt")
