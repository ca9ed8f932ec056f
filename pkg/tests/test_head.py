import numpy as np
import numpy.testing as npt
import pytest

from icrlnet import head
from icrlnet import tensor as T
from icrlnet.tensor import ContractViolation, Tensor


def _unit(v):
    v = np.asarray(v, dtype=np.float32)
    return v / np.linalg.norm(v)


def test_aligned_query_gets_tau_logit():
    queries = Tensor(np.array([_unit([1, 0, 0])]))
    classes = Tensor(np.array([_unit([1, 0, 0]), _unit([0, 1, 0]), _unit([0, 0, 1])]))
    logits = head.cosine_logits(queries, classes, tau=10.0)
    npt.assert_allclose(logits.data, [[10.0, 0.0, 0.0]], atol=1e-6)


def test_class_scaling_invariance():
    rng = np.random.default_rng(0)
    queries = Tensor(np.stack([_unit(rng.standard_normal(4)) for _ in range(3)]))
    base = rng.standard_normal((2, 4)).astype(np.float32)
    a = head.cosine_logits(queries, Tensor(base.copy()), tau=10.0)
    b = head.cosine_logits(queries, Tensor(base * 7.0), tau=10.0)
    npt.assert_allclose(a.data, b.data, atol=1e-6)


def test_logits_match_dot_product_oracle():
    rng = np.random.default_rng(1)
    queries = np.stack([_unit(rng.standard_normal(5)) for _ in range(4)])
    classes = rng.standard_normal((2, 5)).astype(np.float32)
    logits = head.cosine_logits(Tensor(queries), Tensor(classes), tau=3.0)
    expected = np.zeros((4, 2))
    for i in range(4):
        for j in range(2):
            w = classes[j] / np.linalg.norm(classes[j])
            expected[i, j] = 3.0 * float(w @ queries[i])
    npt.assert_allclose(logits.data, expected, atol=1e-5)


def test_logits_bounded_by_tau():
    rng = np.random.default_rng(2)
    queries = np.stack([_unit(rng.standard_normal(6)) for _ in range(8)])
    classes = rng.standard_normal((5, 6)).astype(np.float32)
    logits = head.cosine_logits(Tensor(queries), Tensor(classes), tau=10.0)
    assert np.all(np.abs(logits.data) <= 10.0 + 1e-5)


def test_zero_norm_class_rep_rejected_with_id():
    queries = Tensor(np.array([_unit([1, 1])]))
    classes = Tensor(np.array([[1.0, 0.0], [0.0, 0.0]], dtype=np.float32))
    with pytest.raises(ContractViolation, match="1"):
        head.cosine_logits(queries, classes, tau=10.0)


def test_predict_argmax_and_tie_rule():
    assert head.predict(np.array([[0.2, 0.9, 0.1]]))[0] == 1
    assert head.predict(np.array([[0.5, 0.5, 0.5]]))[0] == 0
    row = np.array([[0.2, 0.9, 0.1]])
    npt.assert_array_equal(head.predict(row), head.predict(row + 3.0))


def test_loss_cls_uniform_is_log_n():
    logits = Tensor(np.zeros((7, 5), dtype=np.float32))
    labels = np.arange(7) % 5
    assert head.loss_cls(logits, labels).item() == pytest.approx(np.log(5), abs=1e-6)


def test_loss_cls_perfect_is_near_zero():
    logits = np.full((3, 4), -100.0, dtype=np.float32)
    labels = [0, 1, 2]
    for i, label in enumerate(labels):
        logits[i, label] = 100.0
    assert head.loss_cls(Tensor(logits), labels).item() == pytest.approx(0.0, abs=1e-6)


def test_loss_intra_single_class_is_zero():
    support = Tensor(np.array([_unit([1, 2, 3]), _unit([2, 1, 0])]))
    classes = Tensor(np.array([_unit([1, 1, 1])]))
    assert head.loss_intra(support, classes, [0, 0], tau=10.0).item() == pytest.approx(0.0, abs=1e-7)


def test_loss_intra_aligned_supports_near_zero():
    classes = np.eye(3, dtype=np.float32)
    support = np.repeat(classes, 2, axis=0)
    labels = np.repeat(np.arange(3), 2)
    value = head.loss_intra(Tensor(support), Tensor(classes), labels, tau=50.0).item()
    assert value == pytest.approx(0.0, abs=1e-6)


def test_loss_intra_matches_compose_then_xent_oracle():
    rng = np.random.default_rng(3)
    support = np.stack([_unit(rng.standard_normal(4)) for _ in range(6)])
    classes = rng.standard_normal((3, 4)).astype(np.float32)
    labels = np.repeat(np.arange(3), 2)
    got = head.loss_intra(Tensor(support), Tensor(classes), labels, tau=5.0).item()
    normalized = classes / np.linalg.norm(classes, axis=1, keepdims=True)
    logits = 5.0 * support @ normalized.T
    total = 0.0
    for row, label in zip(logits, labels):
        e = np.exp(row - row.max())
        total += -np.log(e[label] / e.sum())
    assert got == pytest.approx(total / 6, abs=1e-5)


def test_loss_inter_orthogonal_is_zero():
    classes = Tensor(np.eye(4, dtype=np.float32) * 3.0)
    assert head.loss_inter(classes).item() == pytest.approx(0.0, abs=1e-6)


def test_loss_inter_identical_is_n_times_n_minus_one():
    v = _unit([1.0, 2.0, 3.0])
    classes = Tensor(np.stack([v * s for s in (1.0, 2.0, 0.5, 4.0, 3.0)]))
    assert head.loss_inter(classes).item() == pytest.approx(20.0, abs=1e-5)


def test_loss_inter_matches_pairwise_loop_oracle():
    rng = np.random.default_rng(4)
    classes = rng.standard_normal((3, 5)).astype(np.float32)
    got = head.loss_inter(Tensor(classes)).item()
    normalized = classes / np.linalg.norm(classes, axis=1, keepdims=True)
    expected = 0.0
    for i in range(3):
        for j in range(3):
            if i != j:
                expected += float(normalized[i] @ normalized[j])
    assert got == pytest.approx(expected, abs=1e-5)


def test_loss_inter_permutation_symmetric():
    rng = np.random.default_rng(5)
    classes = rng.standard_normal((4, 6)).astype(np.float32)
    base = head.loss_inter(Tensor(classes)).item()
    for _ in range(3):
        perm = rng.permutation(4)
        assert head.loss_inter(Tensor(classes[perm])).item() == pytest.approx(base, abs=1e-5)


def test_joint_zero_coefficients_reduce_to_cls():
    l_cls = Tensor(np.asarray(1.5, dtype=np.float32))
    l_intra = Tensor(np.asarray(2.0, dtype=np.float32))
    l_inter = Tensor(np.asarray(-1.0, dtype=np.float32))
    total, bd = head.loss_joint(l_cls, l_intra, l_inter, 0.0, 0.0)
    assert total.item() == pytest.approx(1.5)
    assert bd.joint == pytest.approx(bd.cls)


def test_joint_dropping_inter_matches_two_term_configuration():
    l_cls = Tensor(np.asarray(1.0, dtype=np.float32))
    l_intra = Tensor(np.asarray(0.5, dtype=np.float32))
    total, bd = head.loss_joint(l_cls, l_intra, None, 0.1, 0.1)
    assert bd.lambda2 == 0.0
    assert total.item() == pytest.approx(1.05, abs=1e-6)
    assert bd.joint == pytest.approx(bd.cls + 0.1 * bd.intra)


def test_joint_breakdown_identity_on_random_values():
    rng = np.random.default_rng(6)
    for _ in range(10):
        cls_v, intra_v, inter_v = rng.standard_normal(3)
        total, bd = head.loss_joint(
            Tensor(np.asarray(abs(cls_v), dtype=np.float32)),
            Tensor(np.asarray(abs(intra_v), dtype=np.float32)),
            Tensor(np.asarray(inter_v, dtype=np.float32)), 0.1, 0.1)
        assert bd.joint == pytest.approx(bd.cls + bd.lambda1 * bd.intra + bd.lambda2 * bd.inter,
                                         abs=1e-6)
        assert total.item() == pytest.approx(bd.joint, abs=1e-5)


def test_joint_negative_coefficients_rejected():
    l_cls = Tensor(np.asarray(1.0, dtype=np.float32))
    with pytest.raises(ContractViolation):
        head.loss_joint(l_cls, None, None, -0.1, 0.0)
