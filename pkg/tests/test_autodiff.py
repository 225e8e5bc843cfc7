import numpy as np
import pytest

from ltcl import autodiff as ad
from ltcl.errors import ContractError, DegenerateInputError, ShapeError


def t(x, grad=False):
    return ad.Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


def test_matmul_identity():
    a = np.array([[1.5, -2.0], [0.25, 3.0]])
    out = ad.matmul(t(np.eye(2)), t(a))
    assert np.array_equal(out.data, a)


def test_relu_definition():
    out = ad.relu(t([-1.0, 2.0]))
    assert np.array_equal(out.data, [0.0, 2.0])


def test_softmax_symmetry():
    out = ad.softmax(t([0.0, 0.0]))
    assert np.allclose(out.data, [0.5, 0.5], atol=0)


def test_softmax_sums_to_one_for_bounded_logits():
    rng = np.random.default_rng(0)
    for _ in range(50):
        x = rng.uniform(-50, 50, size=rng.integers(2, 40))
        y = ad.softmax(t(x), temperature=1.0).data
        assert (y >= 0).all()
        assert abs(y.sum() - 1.0) < 1e-9


def test_sum_gradient_is_ones():
    x = t(np.arange(12, dtype=float).reshape(3, 4), grad=True)
    ad.sum_all(x).backward()
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_self_dot_gradient_is_2x():
    v = np.array([1.0, -2.0, 0.5])
    x = t(v, grad=True)
    ad.dot(x, x).backward()
    assert np.allclose(x.grad, 2 * v, atol=1e-15)


def test_backward_requires_scalar_root():
    x = t([1.0, 2.0], grad=True)
    with pytest.raises(ContractError):
        ad.relu(x).backward()


def test_repeated_backward_accumulates():
    x = t([2.0], grad=True)
    out = ad.dot(x, x)
    out.backward()
    out.backward()
    assert np.allclose(x.grad, [8.0])


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError) as err:
        ad.matmul(t(np.zeros((2, 3))), t(np.zeros((2, 3))))
    assert "(2, 3)" in str(err.value)


def test_l2_normalize_345_triangle():
    out = ad.l2_normalize(t([3.0, 4.0]))
    assert np.allclose(out.data, [0.6, 0.8], atol=1e-15)


def test_l2_normalize_unit_vector_fixed_point():
    v = np.array([1.0, 0.0, 0.0])
    assert np.allclose(ad.l2_normalize(t(v)).data, v, atol=1e-15)
    rng = np.random.default_rng(3)
    w = rng.normal(size=8)
    w /= np.linalg.norm(w)
    out = ad.l2_normalize(t(w)).data
    assert abs(np.linalg.norm(out) - 1) < 1e-9


def test_l2_normalize_degenerate_input_raises():
    with pytest.raises(DegenerateInputError):
        ad.l2_normalize(t([1e-15, -1e-15]), epsilon=1e-9)


def test_detach_blocks_gradient():
    x = t([1.0, 2.0], grad=True)
    y = ad.scale(x, 3.0)
    ad.sum_all(y.detach()).backward()
    assert x.grad is None


def test_finite_difference_quadratic_is_exact():
    def f(params):
        return ad.dot(params[0], params[0])

    err = ad.finite_difference_check(f, [t([3.0], grad=True)], step=1e-5)
    assert err < 1e-9


def test_finite_difference_softmax_sum_is_flat():
    def f(params):
        return ad.sum_all(ad.softmax(params[0]))

    x = t([0.3, -1.2, 2.0], grad=True)
    assert ad.finite_difference_check(f, [x], step=1e-5) < 1e-9
    x.zero_grad()
    ad.sum_all(ad.softmax(x)).backward()
    assert np.allclose(x.grad, 0.0, atol=1e-12)


def _conv_bruteforce(x, w, b, stride, padding):
    n, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    xp = np.zeros((n, h + 2 * padding, wd + 2 * padding, cin))
    xp[:, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, ho, wo, cout))
    for a in range(ho):
        for c in range(wo):
            patch = xp[:, a * stride:a * stride + kh, c * stride:c * stride + kw, :]
            out[:, a, c, :] = np.tensordot(patch, w, axes=([1, 2, 3], [0, 1, 2])) + b
    return out


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_matches_direct_convolution(stride, padding):
    rng = np.random.default_rng(11)
    x = rng.normal(size=(2, 6, 6, 3))
    w = rng.normal(size=(3, 3, 3, 4))
    b = rng.normal(size=4)
    out = ad.conv2d(t(x), t(w), t(b), stride=stride, padding=padding)
    assert np.allclose(out.data, _conv_bruteforce(x, w, b, stride, padding), atol=1e-12)


def test_spatial_mean_matches_direct_summation():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(3, 4, 4, 6))
    out = ad.spatial_mean(t(x)).data
    direct = x.sum(axis=(1, 2)) / 16.0
    assert np.allclose(out, direct, atol=1e-15)


def test_roi_avg_pool_uniform_row_equals_spatial_mean_bitwise():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(2, 4, 4, 5))
    wts = np.full((2, 1, 16), 1.0 / 16.0)
    pooled = ad.roi_avg_pool(t(x), wts).data[:, 0, :]
    mean = ad.spatial_mean(t(x)).data
    assert np.array_equal(pooled, mean)


def test_roi_avg_pool_two_cell_mean():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(1, 2, 2, 3))
    wts = np.zeros((1, 1, 4))
    wts[0, 0, 0] = wts[0, 0, 1] = 0.5  # cells (0,0) and (0,1)
    pooled = ad.roi_avg_pool(t(x), wts).data[0, 0]
    assert np.allclose(pooled, (x[0, 0, 0] + x[0, 0, 1]) / 2, atol=1e-15)


# every differentiable op passes a central-difference check on random inputs
_OP_CASES = {
    "add": lambda p: ad.sum_all(ad.exp(ad.add(p[0], p[1]))),
    "add_bias": lambda p: ad.sum_all(ad.exp(ad.add(p[0], p[2]))),
    "multiply": lambda p: ad.sum_all(ad.multiply(p[0], p[1])),
    "scale": lambda p: ad.sum_all(ad.scale(p[0], -1.7)),
    "matmul": lambda p: ad.sum_all(ad.exp(ad.matmul(p[3], p[4]))),
    "matvec": lambda p: ad.sum_all(ad.exp(ad.matmul(p[3], p[5]))),
    "dot": lambda p: ad.dot(p[6], p[7]),
    "rowwise_dot": lambda p: ad.sum_all(ad.rowwise_dot(p[3], np.full((3, 3), 0.4))),
    "concat_rows": lambda p: ad.sum_all(ad.exp(ad.concat_rows(p[3], p[3]))),
    "concat_cols": lambda p: ad.sum_all(ad.exp(ad.concat_cols(p[3], p[3]))),
    "log": lambda p: ad.sum_all(ad.log(ad.exp(p[0]))),
    "exp": lambda p: ad.sum_all(ad.exp(p[0])),
    "relu": lambda p: ad.sum_all(ad.relu(p[0])),
    "softmax": lambda p: ad.weighted_sum(ad.softmax(p[0], temperature=0.5), np.arange(8.0).reshape(2, 4)),
    "logsumexp": lambda p: ad.sum_all(ad.logsumexp(p[3])),
    "weighted_sum": lambda p: ad.weighted_sum(p[0], np.linspace(-1, 1, 8).reshape(2, 4)),
    "l2_normalize": lambda p: ad.weighted_sum(ad.l2_normalize(p[5]), np.linspace(0.5, 1.0, 3)),
    "spatial_mean": lambda p: ad.sum_all(ad.exp(ad.spatial_mean(p[8]))),
    "conv2d": lambda p: ad.sum_all(ad.relu(ad.conv2d(p[8], p[9], p[10], stride=2, padding=1))),
    "roi_avg_pool": lambda p: ad.sum_all(
        ad.roi_avg_pool(p[8], np.array([[[0.5, 0.5, 0.0, 0.0], [0.25] * 4]] * 2))
    ),
    "mean_all": lambda p: ad.mean_all(ad.exp(p[0])),
}


def _random_params(rng):
    def mk(shape):
        x = rng.normal(size=shape)
        # keep relu kinks away from the finite-difference step
        x = np.where(np.abs(x) < 1e-3, x + 2e-3, x)
        return ad.Tensor(x, requires_grad=True)

    return [
        mk((2, 4)),            # 0
        mk((2, 4)),            # 1
        mk((4,)),              # 2 bias
        mk((3, 3)),            # 3
        mk((3, 3)),            # 4
        mk((3,)),              # 5
        mk((4,)),              # 6
        mk((4,)),              # 7
        mk((2, 2, 2, 3)),      # 8 feature map
        mk((3, 3, 3, 2)),      # 9 kernel
        mk((2,)),              # 10 conv bias
    ]


@pytest.mark.parametrize("name", sorted(_OP_CASES))
def test_backward_matches_finite_differences(name):
    # 100+ random draws spread across ops: 10 seeds x 22 ops
    fn = _OP_CASES[name]
    for seed in range(10):
        params = _random_params(np.random.default_rng(1000 + seed))
        err = ad.finite_difference_check(fn, params, step=1e-5)
        assert err < 1e-4, f"{name} seed {seed}: fd error {err}"


def test_l2_normalize_probe_gradient_matches_finite_differences():
    rng = np.random.default_rng(42)
    a = rng.normal(size=6)

    def f(params):
        return ad.dot(ad.l2_normalize(params[0]), ad.Tensor(a))

    for seed in range(20):
        v = np.random.default_rng(seed).normal(size=6) + 0.1
        err = ad.finite_difference_check(f, [ad.Tensor(v, requires_grad=True)], step=1e-6)
        assert err < 1e-5
