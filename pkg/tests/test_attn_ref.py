import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bigbird.attn_ref import (
    EmptyNeighborhoodError,
    Hardmax,
    HeadParams,
    Softmax,
    attention_weights,
    attn_dense,
    furthest_brute_force,
    furthest_vector,
    masked_softmax,
    practical_softmax,
)
from bigbird.pattern import TokenMask


def loop_oracle(X, heads, adj, kind):
    """Row-by-row attention over explicit neighbour lists."""
    n = X.shape[0]
    out = np.zeros((n, heads[0].W_V.shape[1]))
    for h in heads:
        for i in range(n):
            nb = [j for j in range(n) if adj[i, j]]
            q = X[i] @ h.W_Q
            s = np.array([q @ (X[j] @ h.W_K) for j in nb])
            if isinstance(kind, Hardmax):
                w = (s == s.max()).astype(float)
            else:
                s = kind.scale * s
                w = np.exp(s - s.max())
            w /= w.sum()
            out[i] += sum(wk * (X[j] @ h.W_V) for wk, j in zip(w, nb))
    return out


class TestMaskedSoftmax:
    def test_stable_for_large_scores(self):
        p = masked_softmax([1000.0, 1000.0, -1000.0])
        np.testing.assert_allclose(p, [0.5, 0.5, 0.0], atol=1e-15)

    def test_empty(self):
        with pytest.raises(EmptyNeighborhoodError):
            masked_softmax([])

    @settings(max_examples=50)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=20))
    def test_is_distribution(self, s):
        p = masked_softmax(s)
        assert p.min() >= 0 and p.sum() == pytest.approx(1.0)
        assert p[int(np.argmax(s))] == p.max()


class TestDense:
    @pytest.mark.parametrize("kind", [Softmax(), Softmax(0.25), Hardmax()])
    def test_matches_loop(self, rng, kind):
        X = rng.standard_normal((9, 5))
        adj = rng.random((9, 9)) < 0.5
        np.fill_diagonal(adj, True)
        heads = [HeadParams.random(5, 3, rng) for _ in range(2)]
        np.testing.assert_allclose(attn_dense(X, heads, adj, kind), loop_oracle(X, heads, adj, kind), atol=1e-12)

    def test_weights_zero_off_mask(self, rng):
        X = rng.standard_normal((6, 4))
        adj = np.tril(np.ones((6, 6), dtype=bool))
        w = attention_weights(X, HeadParams.random(4, 2, rng), TokenMask(adj), Softmax())
        assert np.all(w[~adj] == 0)
        np.testing.assert_allclose(w.sum(1), 1.0)

    def test_hardmax_ties_average(self):
        X = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
        h = HeadParams(np.eye(2), np.eye(2), np.eye(2))
        out = attn_dense(X, h, np.ones((3, 3), dtype=bool), Hardmax())
        # row 0 scores (1, 0, 0); rows 1, 2 tie between keys 1 and 2
        np.testing.assert_array_equal(out, [[1, 0], [0, 1], [0, 1]])

    def test_empty_row_named(self, rng):
        adj = np.ones((4, 4), dtype=bool)
        adj[2] = False
        with pytest.raises(EmptyNeighborhoodError, match="row 2"):
            attn_dense(rng.standard_normal((4, 3)), HeadParams.random(3, 3, rng), adj)

    def test_rejects_nonfinite(self, rng):
        X = rng.standard_normal((3, 2))
        X[1, 1] = np.nan
        with pytest.raises(ValueError):
            attn_dense(X, HeadParams.random(2, 2, rng), np.ones((3, 3), dtype=bool))

    def test_shape_errors(self, rng):
        with pytest.raises(ValueError):
            HeadParams(np.zeros((3, 2)), np.zeros((3, 3)), np.zeros((3, 3)))
        with pytest.raises(ValueError):
            attn_dense(rng.standard_normal((3, 2)), HeadParams.random(2, 2, rng), np.ones((4, 4), dtype=bool))

    def test_scale_validation(self):
        with pytest.raises(ValueError):
            Softmax(0.0)
        assert practical_softmax(16).scale == 0.25


class TestFurthest:
    def test_demo_vectors(self):
        U = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
        res = furthest_vector(U)
        assert (res[0].index, res[0].tie) == (2, False)
        assert (res[2].index, res[2].tie) == (0, False)
        assert res[1].tie
        np.testing.assert_allclose(res[0].vector, U[2])

    def test_random_agrees_with_brute_force(self, rng):
        for n in (2, 5, 17, 64):
            d = int(np.ceil(np.log2(n) ** 2))
            U = rng.standard_normal((n, d))
            U /= np.linalg.norm(U, axis=1, keepdims=True)
            brute = furthest_brute_force(U)
            for i, r in enumerate(furthest_vector(U)):
                if not r.tie:
                    assert r.index == brute[i]
                    np.testing.assert_allclose(r.vector, U[brute[i]], atol=1e-12)

    def test_requires_unit_vectors(self):
        with pytest.raises(ValueError):
            furthest_vector(np.array([[2.0, 0.0], [0.0, 1.0]]))

    def test_brute_force(self):
        U = np.array([[1.0, 0.0], [0.6, 0.8], [-0.6, -0.8]])
        assert furthest_brute_force(U) == [2, 2, 1]
