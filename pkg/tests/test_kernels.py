import numpy as np
import pytest

from scenediff import kernels
from scenediff.kernels import numba_backend, numpy_backend


@pytest.fixture(params=["numpy", "numba"])
def backend(request):
    prev = kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(prev)


def test_env_flag_selection():
    assert kernels.active_backend() in kernels.available_backends()
    prev = kernels.set_backend("numpy")
    assert kernels.active_backend() == "numpy"
    kernels.set_backend(prev)
    with pytest.raises(ValueError):
        kernels.set_backend("cuda")


class TestBackendAgreement:
    """Both implementations must be numerically interchangeable."""

    def _attn_case(self, seed, empty_rows=False):
        g = np.random.default_rng(seed)
        R, H, Tq, Tk, D = 5, 2, 7, 9, 4
        q = g.normal(size=(R, H, Tq, D))
        k = g.normal(size=(R, H, Tk, D))
        v = g.normal(size=(R, H, Tk, D))
        key_valid = g.random((R, Tk)) < 0.7
        if empty_rows:
            key_valid[0] = False
        return q, k, v, key_valid

    @pytest.mark.parametrize("empty_rows", [False, True])
    def test_attention_forward(self, empty_rows):
        q, k, v, kv = self._attn_case(0, empty_rows)
        o1, p1 = numpy_backend.attention_forward(q, k, v, kv)
        o2, p2 = numba_backend.attention_forward(q, k, v, kv)
        assert np.allclose(o1, o2, atol=1e-12)
        assert np.allclose(p1, p2, atol=1e-12)
        if empty_rows:
            assert np.all(o1[0] == 0.0)

    def test_attention_backward(self):
        q, k, v, kv = self._attn_case(1)
        out, probs = numpy_backend.attention_forward(q, k, v, kv)
        d_out = np.random.default_rng(2).normal(size=out.shape)
        g1 = numpy_backend.attention_backward(q, k, v, kv, probs, d_out)
        g2 = numba_backend.attention_backward(q, k, v, kv, probs, d_out)
        for a, b in zip(g1, g2):
            assert np.allclose(a, b, atol=1e-12)

    def test_probabilities_normalized(self, backend):
        q, k, v, kv = self._attn_case(3)
        _, probs = kernels.attention_forward(q, k, v, kv)
        assert np.allclose(probs.sum(axis=-1), 1.0, atol=1e-12)
        # masked keys carry zero probability
        for r in range(kv.shape[0]):
            assert np.all(probs[r][:, :, ~kv[r]] == 0.0)

    def test_layernorm(self):
        g = np.random.default_rng(4)
        x = g.normal(size=(64, 16))
        gamma = g.normal(size=16)
        beta = g.normal(size=16)
        y1, xh1, i1 = numpy_backend.layernorm_forward(x, gamma, beta)
        y2, xh2, i2 = numba_backend.layernorm_forward(x, gamma, beta)
        assert np.allclose(y1, y2, atol=1e-12)
        dy = g.normal(size=x.shape)
        d1 = numpy_backend.layernorm_backward_dx(dy, xh1, i1, gamma)
        d2 = numba_backend.layernorm_backward_dx(dy, xh2, i2, gamma)
        assert np.allclose(d1, d2, atol=1e-12)

    def test_rect_overlap(self):
        g = np.random.default_rng(5)
        from scenediff.mining import footprint_corners

        sa = np.concatenate([g.normal(0, 5, (40, 2)), g.uniform(-np.pi, np.pi, (40, 1))], axis=1)
        sb = np.concatenate([g.normal(0, 5, (40, 2)), g.uniform(-np.pi, np.pi, (40, 1))], axis=1)
        ca = footprint_corners(sa, 4.5, 2.0)
        cb = footprint_corners(sb, 5.0, 2.2)
        m1 = numpy_backend.rect_overlap_matrix(ca, cb)
        m2 = numba_backend.rect_overlap_matrix(ca, cb)
        assert np.array_equal(m1, m2)
        assert m1.any() and not m1.all()


def test_rect_overlap_against_shapely():
    from shapely.geometry import Polygon

    from scenediff.mining import footprint_corners

    g = np.random.default_rng(6)
    sa = np.concatenate([g.normal(0, 4, (60, 2)), g.uniform(-np.pi, np.pi, (60, 1))], axis=1)
    sb = np.concatenate([g.normal(0, 4, (60, 2)), g.uniform(-np.pi, np.pi, (60, 1))], axis=1)
    ca = footprint_corners(sa, 4.6, 1.9)
    cb = footprint_corners(sb, 4.2, 2.1)
    ours = kernels.rect_overlap_matrix(ca, cb)
    for i in range(ca.shape[0]):
        pa = Polygon(ca[i])
        for j in range(cb.shape[0]):
            assert ours[i, j] == pa.intersects(Polygon(cb[j]))
