import numpy as np
import pytest

from bigbird.attn_ref import Hardmax, Softmax
from bigbird.encoder import (
    EncoderConfig,
    LayerParams,
    encoder_layer,
    encoder_stack,
    ffn,
    flatten_grads,
    flatten_layers,
    grad_check,
    layer_forward,
    layer_loss_and_grad,
    layers_from_arrays,
    layers_to_arrays,
    load_params,
    save_params,
    softmax_backward,
    stack_loss_and_grad,
    unflatten_layers,
)
from bigbird.pattern import BlockPatternConfig, Mode, TokenMask, build_bigbird, expand_to_tokens, extend_etc


def bigbird_mask(cfg):
    return expand_to_tokens(build_bigbird(cfg), cfg.block_size)


class TestForward:
    def test_zero_params_is_identity_plus_residual(self, rng):
        p = LayerParams.zeros(4, 4, 8)
        X = rng.standard_normal((8, 4))
        # zero W_V: attention adds 0; zero FFN adds 0
        np.testing.assert_array_equal(encoder_layer(X, p, TokenMask(np.ones((8, 8), dtype=bool))), X)

    def test_ffn_relu(self):
        p = LayerParams.zeros(2, 2, 3)
        p.W1[:] = np.array([[1, -1, 0], [0, 0, 1]])
        p.W2[:] = np.ones((3, 2))
        np.testing.assert_array_equal(ffn(np.array([[2.0, -1.0]]), p), [[2.0, 2.0]])

    @pytest.mark.parametrize("kind", [Softmax(), Hardmax()])
    def test_blocked_matches_dense(self, rng, kind):
        cfg = BlockPatternConfig(32, 4, 3, 1, 1, seed=3)
        p = LayerParams.random(6, 3, 10, rng, n_heads=2)
        X = rng.standard_normal((32, 6))
        np.testing.assert_allclose(encoder_layer(X, p, cfg, kind), encoder_layer(X, p, bigbird_mask(cfg), kind),
                                   atol=1e-12)

    def test_stack_etc_and_positions(self, rng):
        d, n, g = 4, 16, 2
        layers = [LayerParams.random(d, 4, 8, rng) for _ in range(2)]
        mask = TokenMask(np.eye(n, dtype=bool) | np.eye(n, k=1, dtype=bool) | np.eye(n, k=-1, dtype=bool))
        glob = rng.standard_normal((g, d))
        E = rng.standard_normal((d, n))
        X = rng.standard_normal((n, d))
        cfg = EncoderConfig(layers, mask, mode=Mode.ETC, etc_global_vectors=glob, position_embedding=E)
        out = encoder_stack(X, cfg)
        h = np.vstack([glob, X + E.T])
        full = extend_etc(mask, g)
        for p in layers:
            h = encoder_layer(h, p, full)
        np.testing.assert_array_equal(out, h[g:])

    def test_stack_etc_blocked_matches_dense(self, rng):
        pcfg = BlockPatternConfig(16, 2, 3, 1, 1, Mode.ETC, seed=1)
        layers = [LayerParams.random(4, 4, 8, rng)]
        glob = rng.standard_normal((2, 4))
        X = rng.standard_normal((16, 4))
        blocked = encoder_stack(X, EncoderConfig(layers, pcfg, mode=Mode.ETC, etc_global_vectors=glob))
        tokens = bigbird_mask(pcfg)
        h = encoder_layer(np.vstack([glob, X]), layers[0], tokens)
        np.testing.assert_allclose(blocked, h[2:], atol=1e-12)


class TestBackward:
    def test_softmax_backward_numeric(self, rng):
        s = rng.standard_normal((3, 5))
        dP = rng.standard_normal((3, 5))

        def f(s):
            e = np.exp(s - s.max(1, keepdims=True))
            return (e / e.sum(1, keepdims=True) * dP).sum()

        e = np.exp(s - s.max(1, keepdims=True))
        P = e / e.sum(1, keepdims=True)
        g = softmax_backward(P, dP)
        num = np.zeros_like(s)
        for idx in np.ndindex(*s.shape):
            t = s.copy()
            t[idx] += 1e-6
            u = s.copy()
            u[idx] -= 1e-6
            num[idx] = (f(t) - f(u)) / 2e-6
        np.testing.assert_allclose(g, num, atol=1e-8)

    def test_one_layer_gradcheck(self, rng):
        cfg = BlockPatternConfig(8, 2, 1, 1, 1, seed=0)
        mask = bigbird_mask(cfg)
        p = LayerParams.random(4, 4, 8, rng)
        X = rng.standard_normal((8, 4))
        theta = flatten_layers([p])
        err = grad_check(
            lambda t: layer_loss_and_grad(X, unflatten_layers(t, [p])[0], mask)[0],
            lambda t: flatten_grads([layer_loss_and_grad(X, unflatten_layers(t, [p])[0], mask)[1]]),
            theta,
        )
        assert err <= 1e-4

    def test_input_gradient(self, rng):
        mask = TokenMask(np.tril(np.ones((6, 6), dtype=bool)))
        p = LayerParams.random(3, 2, 5, rng, n_heads=2)
        X = rng.standard_normal((6, 3))
        err = grad_check(lambda x: layer_loss_and_grad(x.reshape(6, 3), p, mask)[0],
                         lambda x: layer_loss_and_grad(x.reshape(6, 3), p, mask)[2].ravel(), X.ravel())
        assert err <= 1e-6

    def test_stack_gradcheck(self, rng):
        mask = TokenMask(np.ones((5, 5), dtype=bool))
        layers = [LayerParams.random(3, 3, 4, rng, scale=0.4) for _ in range(2)]
        X = rng.standard_normal((5, 3))
        err = grad_check(
            lambda t: stack_loss_and_grad(X, unflatten_layers(t, layers), mask)[0],
            lambda t: flatten_grads(stack_loss_and_grad(X, unflatten_layers(t, layers), mask)[1]),
            flatten_layers(layers),
        )
        assert err <= 1e-4

    def test_gradcheck_detects_wrong_gradient(self):
        theta = np.array([1.0, -2.0, 0.5])
        assert grad_check(lambda t: float((t**2).sum()), lambda t: 2 * t, theta) < 1e-8
        assert grad_check(lambda t: float((t**2).sum()), lambda t: 2.2 * t, theta) > 0.05

    def test_hardmax_rejected(self, rng):
        with pytest.raises((TypeError, ValueError)):
            layer_forward(rng.standard_normal((3, 2)), LayerParams.random(2, 2, 2, rng),
                          TokenMask(np.ones((3, 3), dtype=bool)), Hardmax())


class TestParams:
    def test_flatten_roundtrip(self, rng):
        layers = [LayerParams.random(3, 2, 4, rng, n_heads=2), LayerParams.random(3, 2, 4, rng)]
        back = unflatten_layers(flatten_layers(layers), layers)
        np.testing.assert_array_equal(flatten_layers(back), flatten_layers(layers))

    def test_unflatten_size_mismatch(self, rng):
        layers = [LayerParams.random(3, 2, 4, rng)]
        with pytest.raises(ValueError):
            unflatten_layers(np.zeros(3), layers)

    def test_container_roundtrip(self, rng, tmp_path):
        layers = [LayerParams.random(3, 2, 4, rng, n_heads=2), LayerParams.random(3, 2, 4, rng)]
        path = tmp_path / "p.bin"
        save_params(path, layers_to_arrays(layers))
        raw = path.read_bytes()
        assert raw[:8] == b"BBPARAMS" and int.from_bytes(raw[8:12], "little") == 1
        back = layers_from_arrays(load_params(path))
        np.testing.assert_array_equal(flatten_layers(back), flatten_layers(layers))

    def test_container_scalar_and_rejects(self, tmp_path):
        path = tmp_path / "s.bin"
        save_params(path, {"x": np.float64(3.5), "v": np.arange(3.0)})
        out = load_params(path)
        assert out["x"].shape == () and out["x"] == 3.5
        path.write_bytes(b"NOTMAGIC" + path.read_bytes()[8:])
        with pytest.raises(ValueError):
            load_params(path)
