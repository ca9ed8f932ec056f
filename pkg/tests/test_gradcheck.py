import numpy as np
import pytest

from icrlnet import tensor as T
from icrlnet.gradcheck import grad_check, shadow_params
from icrlnet.tensor import ContractViolation, Tensor


def test_quadratic_loss_checks_to_high_precision():
    p = Tensor(np.linspace(-1, 1, 6), requires_grad=True)

    def build():
        return T.mul(T.reduce_sum(T.mul(p, p)), 0.5)

    report = grad_check(build, {"p": p}, h=1e-3)
    assert report.max_rel_err < 1e-8


def test_sigmoid_chain_depth_five():
    p = Tensor(np.array([0.3, -0.4, 0.7], dtype=np.float64), requires_grad=True)

    def build():
        out = p
        for _ in range(5):
            out = T.sigmoid(out)
        return T.reduce_sum(out)

    report = grad_check(build, {"p": p}, h=1e-3)
    assert report.max_rel_err < 1e-6


def test_requires_float64_params():
    p = Tensor(np.zeros(3, dtype=np.float32), requires_grad=True)
    with pytest.raises(ContractViolation):
        grad_check(lambda: T.reduce_sum(p), {"p": p})


def test_shadow_params_casts_and_detaches():
    p = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    shadow = shadow_params({"p": p})
    assert shadow["p"].data.dtype == np.float64
    shadow["p"].data[0] = 5.0
    assert p.data[0] == 1.0


def test_detects_a_wrong_gradient():
    p = Tensor(np.array([0.5, -0.3]), requires_grad=True)

    def bad_square_sum():
        # correct forward, backward deliberately doubled
        def backward(g):
            p._accumulate(4.0 * p.data * g)
        return T._node(np.asarray((p.data ** 2).sum()), (p,), backward)

    report = grad_check(bad_square_sum, {"p": p}, h=1e-3)
    assert report.max_rel_err > 0.1


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_every_op_family_passes_on_random_seeds(seed):
    """One composed scalar graph touching each differentiable op, evaluated
    away from kinks (relu inputs shifted off zero; pool margins are
    continuous draws, far wider than the step)."""
    rng = np.random.default_rng(seed)
    conv_w = Tensor(rng.standard_normal((2, 2, 3, 3)), requires_grad=True)
    conv_b = Tensor(rng.standard_normal(2) * 0.1, requires_grad=True)
    lin = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
    aff_w = Tensor(rng.standard_normal((2, 4)), requires_grad=True)
    aff_b = Tensor(rng.standard_normal(4) * 0.1, requires_grad=True)
    x = Tensor(rng.random((2, 6, 6)) + 0.5)
    params = {"conv_w": conv_w, "conv_b": conv_b, "lin": lin,
              "aff_w": aff_w, "aff_b": aff_b}

    def build():
        fm = T.conv2d(x, conv_w, conv_b, stride=1, pad=1)
        fm = T.relu(T.add(fm, 0.75))
        pooled = T.maxpool2d(fm, 2)
        vec = T.reduce_mean(T.reshape(pooled, (2, 9)), axis=1)
        vec2 = T.l2_normalize(T.sigmoid(vec))
        logits = T.reshape(T.matmul(lin, vec2), (1, 3))
        ce = T.softmax_cross_entropy(logits, [1])
        mat = T.stack([vec2, T.neg(vec2), T.sub(vec2, 0.25)])      # (3,2)
        mat = T.permute(T.affine(mat, aff_w, aff_b), (1, 0))        # (4,3)
        tail = T.reduce_sum(T.transpose(T.slice_rows(mat, 1, 3)))
        quad = T.mul(T.reduce_sum(T.hadamard(vec2, vec2)), 0.25)
        return T.add(ce, T.add(quad, T.mul(tail, 0.1)))

    report = grad_check(build, params, h=1e-3, rng=np.random.default_rng(seed))
    assert report.max_rel_err < 1e-4, report.per_param
