import numpy as np
import pytest

from bigbird import _pykernels, kernels


needs_compiled = pytest.mark.skipif("compiled" not in kernels.available_backends(), reason="extension not built")


def case(rng, nb=5, b=4, T=12, m=3, dv=2, p=0.7):
    q = rng.standard_normal((nb, b, m))
    k = rng.standard_normal((nb, T, m))
    v = rng.standard_normal((nb, T, dv))
    valid = (rng.random((nb, T)) < p).astype(np.uint8)
    return q, k, v, valid


def oracle(q, k, v, valid, scale, hardmax):
    out = np.zeros(q.shape[:2] + (v.shape[2],))
    for j in range(q.shape[0]):
        keep = valid[j].astype(bool)
        if not keep.any():
            continue
        for s in range(q.shape[1]):
            sc = scale * (k[j][keep] @ q[j, s])
            w = (sc == sc.max()).astype(float) if hardmax else np.exp(sc - sc.max())
            out[j, s] = (w / w.sum()) @ v[j][keep]
    return out


class TestBackends:
    def test_select(self):
        before = kernels.get_backend()
        kernels.set_backend("python")
        assert kernels.get_backend() == "python"
        kernels.set_backend("auto")
        assert kernels.get_backend() in kernels.available_backends()
        with pytest.raises(ValueError):
            kernels.set_backend("gpu")
        kernels.set_backend(before)

    @pytest.mark.parametrize("hardmax", [False, True])
    def test_python_matches_oracle(self, rng, hardmax):
        q, k, v, valid = case(rng)
        np.testing.assert_allclose(_pykernels.compact_attention(q, k, v, valid, 0.7, hardmax),
                                   oracle(q, k, v, valid, 0.7, hardmax), atol=1e-13)

    @needs_compiled
    @pytest.mark.parametrize("hardmax", [False, True])
    @pytest.mark.parametrize("shape", [dict(), dict(nb=1, b=1, T=1), dict(nb=3, b=16, T=80, m=8, dv=5)])
    def test_compiled_matches_python(self, rng, hardmax, shape):
        from bigbird import _ckernels

        q, k, v, valid = case(rng, **shape)
        valid[0] = 0  # empty row gives zeros
        got = _ckernels.compact_attention(q, k, v, valid, 0.5, hardmax)
        want = _pykernels.compact_attention(q, k, v, valid, 0.5, hardmax)
        np.testing.assert_allclose(got, want, atol=1e-13)
        assert not got[0].any()

    @needs_compiled
    def test_bfs_agree(self, rng):
        from bigbird import _ckernels

        n = 40
        a = rng.random((n, n)) < 0.06
        a = a | a.T
        np.fill_diagonal(a, False)
        indptr = np.concatenate([[0], np.cumsum(a.sum(1))]).astype(np.int32)
        indices = np.nonzero(a)[1].astype(np.int32)
        np.testing.assert_array_equal(_ckernels.bfs_all_pairs(indptr, indices, n),
                                      _pykernels.bfs_all_pairs(indptr, indices, n))
