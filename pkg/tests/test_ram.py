from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csem.errors import ModelSpecificationError, RankDeficientConstraints, SingularBlock
from csem.ram import (
    LATENT,
    OBSERVED,
    BlockInverse,
    CompositeInfo,
    Const,
    DerivedQuantity,
    Label,
    LinearConstraint,
    ParameterCell,
    RamModel,
    Variable,
    evaluate_derived,
    implied_covariance,
    invert_block,
    recip,
    reduce_constraints,
    sigma_jacobian,
)


def _obs(*names):
    return [Variable(n, OBSERVED) for n in names]


def test_identity_model():
    cells = [ParameterCell("S", v, v, 1.0) for v in "abc"]
    m = RamModel(_obs("a", "b", "c"), cells)
    assert np.array_equal(implied_covariance(m, []), np.eye(3))


def test_single_path():
    cells = [
        ParameterCell("A", "y", "x", 0.0, True, "b"),
        ParameterCell("S", "x", "x", 1.0),
        ParameterCell("S", "y", "y", 0.75),
    ]
    m = RamModel(_obs("x", "y"), cells)
    assert np.allclose(implied_covariance(m, [0.5]), [[1, 0.5], [0.5, 1]], atol=1e-15)


def _refined_fixed_block():
    # eta with loadings 1/3 each (sum of unit weights), two excrescent variables
    xs = ["x1", "x2", "x3"]
    vs = _obs(*xs) + [Variable(n, LATENT) for n in ("eta", "nu1", "nu2")]
    cells = [ParameterCell("A", x, "eta", 1 / 3) for x in xs]
    cells += [ParameterCell("A", "x1", "nu1", 1.0), ParameterCell("A", "x2", "nu1", -1.0),
              ParameterCell("A", "x2", "nu2", 1.0), ParameterCell("A", "x3", "nu2", -1.0)]
    # unit component variances and zero covariances: S for (eta, nu1, nu2) is
    # W Sigma_x W' with W the inverse of the loading block
    L = np.array([[1 / 3, 1, 0], [1 / 3, -1, 1], [1 / 3, 0, -1]])
    W = np.linalg.inv(L)
    P = W @ W.T
    lat = ["eta", "nu1", "nu2"]
    for i in range(3):
        for j in range(i, 3):
            cells.append(ParameterCell("S", lat[i], lat[j], float(P[i, j])))
    return RamModel(vs, cells), W


def test_refined_block_variance_matches_quadratic_form():
    m, W = _refined_fixed_block()
    _, _, _, C = m.moments([])
    Sx = implied_covariance(m, [])
    assert np.allclose(Sx, np.eye(3), atol=1e-12)
    w = np.ones(3)
    assert np.allclose(W[0], w, atol=1e-12)
    assert abs(C[m.index["eta"], m.index["eta"]] - w @ Sx @ w) < 1e-12


def _constraint_model(labels, constraints, fixed=()):
    names = [f"x{i}" for i in range(len(labels) + len(fixed))]
    cells = [ParameterCell("S", names[i], names[i], 0.0, True, lab) for i, lab in enumerate(labels)]
    cells += [ParameterCell("S", names[len(labels) + i], names[len(labels) + i], v, False, lab)
              for i, (lab, v) in enumerate(fixed)]
    return RamModel(_obs(*names), cells, constraints)


def test_sum_constraint_pivot_is_last_label():
    m = _constraint_model(["l1", "l2"], [LinearConstraint((("l1", 1.0), ("l2", 1.0)), 2.0)])
    red = reduce_constraints(m)
    assert red.free == ("l1",) and red.pivots == ("l2",)
    assert np.allclose(red.expand([0.3]), [0.3, 1.7])
    assert m.n_free == 1


def test_two_constraints_drop_two():
    m = _constraint_model(
        ["a", "b", "c", "d", "e"],
        [LinearConstraint((("a", 1.0), ("b", 1.0)), 0.0),
         LinearConstraint((("c", 1.0), ("d", 1.0), ("e", 1.0)), 1.0)])
    assert m.n_free == 3
    theta = m.expand([0.7, -0.2, 0.4])
    assert abs(theta[0] + theta[1]) < 1e-15
    assert abs(theta[2:].sum() - 1.0) < 1e-15


def test_contradictory_constraint():
    with pytest.raises(RankDeficientConstraints):
        _constraint_model(["l2"], [LinearConstraint((("l1", 1.0), ("l2", 0.0)), 2.0)],
                          fixed=[("l1", 1.0)])


def test_dependent_constraints_rejected():
    c = LinearConstraint((("a", 1.0), ("b", 1.0)), 1.0)
    with pytest.raises(RankDeficientConstraints):
        _constraint_model(["a", "b"], [c, c])


def test_block_inverse_identity():
    assert np.array_equal(invert_block(np.eye(3)), np.eye(3))


def test_refined_pattern_block_inverse_matches_dense_oracle():
    # rows are components, columns (eta, nu1, nu2); nu loadings sum to zero
    vs = _obs("x1", "x2", "x3") + [Variable(n, LATENT) for n in ("eta", "nu1", "nu2")]
    cells = [
        ParameterCell("A", "x1", "eta", 1.0),
        ParameterCell("A", "x2", "eta", 0.0, True, "l21"),
        ParameterCell("A", "x3", "eta", 0.0, True, "l31"),
        ParameterCell("A", "x1", "nu1", 0.0, True, "l12"),
        ParameterCell("A", "x2", "nu1", 0.0, True, "l22"),
        ParameterCell("A", "x2", "nu2", 1.0),
        ParameterCell("A", "x3", "nu2", -1.0),
    ] + [ParameterCell("S", v, v, 1.0) for v in ("eta", "nu1", "nu2")]
    m = RamModel(vs, cells, [LinearConstraint((("l12", 1.0), ("l22", 1.0)), 0.0)],
                 composites=[CompositeInfo("eta", ("x1", "x2", "x3"), ("nu1", "nu2"))])
    theta = m.expand([1.0, 1.0, 1.0])  # l21, l31, l12 -> l22 = -1
    assert np.allclose(theta, [1.0, 1.0, 1.0, -1.0])
    L = np.array([[1.0, 1.0, 0.0], [1.0, -1.0, 1.0], [1.0, 0.0, -1.0]])
    assert np.allclose(m.loading_block("eta", theta), L)
    oracle = np.linalg.inv(L)
    for i in range(3):
        for j in range(3):
            got = evaluate_derived(m, theta, DerivedQuantity("q", BlockInverse("eta", i, j)))
            assert abs(got - oracle[i, j]) < 1e-12


def test_phantom_reciprocal():
    vs = _obs("x")
    cells = [ParameterCell("S", "x", "x", 0.0, True, "l")]
    m = RamModel(vs, cells)
    assert evaluate_derived(m, [2.0], DerivedQuantity("w", recip(Label("l")))) == 0.5
    assert evaluate_derived(m, [2.0], Const(3.0) * Label("l") - 1.0) == 5.0


def test_singular_block():
    with pytest.raises(SingularBlock):
        invert_block(np.array([[1.0, 2.0], [2.0, 4.0]]))


def test_label_sharing_equality():
    cells = [
        ParameterCell("A", "y1", "x", 0.0, True, "b"),
        ParameterCell("A", "y2", "x", 0.0, True, "b"),
        ParameterCell("S", "x", "x", 1.0),
        ParameterCell("S", "y1", "y1", 1.0),
        ParameterCell("S", "y2", "y2", 1.0),
    ]
    m = RamModel(_obs("x", "y1", "y2"), cells)
    assert m.n_free == 1
    S = implied_covariance(m, [0.4])
    assert S[0, 1] == S[0, 2] == pytest.approx(0.4)


def test_model_errors():
    with pytest.raises(ModelSpecificationError):
        RamModel(_obs("x", "x"), [])
    with pytest.raises(ModelSpecificationError):
        RamModel(_obs("x"), [ParameterCell("A", "x", "x", 1.0)])
    with pytest.raises(ModelSpecificationError):
        RamModel(_obs("x"), [ParameterCell("S", "x", "z", 1.0)])


def _random_path_model(seed):
    rng = np.random.default_rng(seed)
    p = 4
    names = [f"v{i}" for i in range(p)]
    cells = []
    for i in range(p):
        cells.append(ParameterCell("S", names[i], names[i], 0.0, True, f"s{i}"))
        for j in range(i):
            if rng.uniform() < 0.6:
                cells.append(ParameterCell("A", names[i], names[j], 0.0, True, f"a{i}{j}"))
    m = RamModel(_obs(*names), cells)
    theta = np.array([rng.uniform(0.5, 2.0) if l.startswith("s") else rng.normal(scale=0.7)
                      for l in m.labels])
    return m, theta


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_implied_covariance_symmetric_and_neumann(seed):
    m, theta = _random_path_model(seed)
    A, S = m.matrices(theta)
    Sigma = implied_covariance(m, theta)
    assert np.array_equal(Sigma, Sigma.T)
    assert np.linalg.eigvalsh(Sigma).min() > 0
    # A is strictly lower triangular, so the Neumann series terminates
    B = sum(np.linalg.matrix_power(A, k) for k in range(A.shape[0]))
    assert np.allclose(B @ S @ B.T, Sigma, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_sigma_jacobian_matches_finite_differences(seed):
    m, theta = _random_path_model(seed)
    _, d = sigma_jacobian(m, theta)
    h = 1e-6
    for k in range(m.n_labels):
        e = np.zeros_like(theta)
        e[k] = h
        fd = (implied_covariance(m, theta + e) - implied_covariance(m, theta - e)) / (2 * h)
        assert np.allclose(d[k], fd, atol=1e-7)
