from __future__ import annotations

import numpy as np
import pandas as pd
import pytest

from csem.builders import (
    CompositeBlock,
    Regression,
    StructuralSpec,
    build,
    build_ho_blended,
    build_ho_original,
    build_ho_phantom,
    build_ho_refined,
    build_one_step_modified,
    build_pseudo_indicator,
    build_two_step,
    composite_scores,
    saturation_plan,
)
from csem.errors import (
    FreeWeightsOnOutcome,
    FreeWeightsUnsupported,
    IsolatedComposite,
    ModelSpecificationError,
    UnsupportedFixedValues,
    ZeroPseudoWeight,
    ZeroWeight,
)
from csem.estimator import SampleMoments, estimate
from csem.ram import evaluate_all, implied_covariance, invert_block

from conftest import PAPER_NAMES, paper_blocks, paper_structure, random_correlation


def _a(model, row, col):
    A, _ = model.matrices(model.expand(np.ones(model.n_free)))
    return A[model.index[row], model.index[col]]


def _fixed_a(model, row, col):
    for c in model.cells:
        if c.matrix == "A" and c.row == row and c.col == col:
            return c.value if not c.free else None
    return 0.0


Y = StructuralSpec([Regression("Y", ("X",))])


def test_two_step_scores():
    b = CompositeBlock("X", ("a", "b"), weights="average", spec="two_step")
    data = pd.DataFrame({"a": [1.0], "b": [3.0]})
    assert composite_scores([b], data)["X"].iloc[0] == 2.0


def test_unit_sum_is_twice_average():
    rng = np.random.default_rng(0)
    data = pd.DataFrame(rng.normal(size=(20, 2)), columns=["a", "b"])
    s = composite_scores([CompositeBlock("X", ("a", "b"), weights="unit_sum")], data)
    a = composite_scores([CompositeBlock("X", ("a", "b"), weights="average")], data)
    assert np.allclose(s["X"], 2 * a["X"])


def test_two_step_requires_fixed_weights():
    b = CompositeBlock("X", ("a", "b"), weights="free")
    with pytest.raises(FreeWeightsUnsupported):
        composite_scores([b], pd.DataFrame({"a": [1.0], "b": [2.0]}))


def test_pseudo_average_of_two():
    blocks = [CompositeBlock("X", ("a", "b"), spec="pseudo_indicator", transmission="mimic_two_step"),
              CompositeBlock("Y", ("c", "d"), spec="pseudo_indicator", transmission="mimic_two_step")]
    m = build_pseudo_indicator(blocks, Y)
    assert _fixed_a(m, "b", "X") == 2.0
    assert _fixed_a(m, "b", "a") == -1.0


def test_pseudo_unit_weights_three():
    blocks = [CompositeBlock("X", ("x1", "x2", "x3"), weights="unit_sum", spec="pseudo_indicator",
                             pseudo="x1", transmission="mimic_two_step"),
              CompositeBlock("Y", ("c", "d"), spec="pseudo_indicator", transmission="mimic_two_step")]
    m = build_pseudo_indicator(blocks, Y)
    assert _fixed_a(m, "x1", "X") == 1.0
    assert (_fixed_a(m, "x1", "x2"), _fixed_a(m, "x1", "x3")) == (-1.0, -1.0)


def test_pseudo_zero_weight():
    blocks = [CompositeBlock("X", ("a", "b"), weights="fixed", fixed_values=(1.0, 0.0),
                             spec="pseudo_indicator", transmission="mimic_two_step"),
              CompositeBlock("Y", ("c", "d"), spec="pseudo_indicator", transmission="mimic_two_step")]
    with pytest.raises(ZeroPseudoWeight):
        build_pseudo_indicator(blocks, Y)


def test_blended_fixed_weights_read_off():
    blocks = [CompositeBlock("X", ("x1", "x2", "x3"), weights="fixed", fixed_values=(1.0, 0.0, 2.0),
                             pseudo="x1"),
              CompositeBlock("Y", ("c", "d"))]
    m = build_ho_blended(blocks, Y)
    assert _fixed_a(m, "x1", "X") == 1.0
    assert _fixed_a(m, "x1", "p_X") == -1.0
    assert (_fixed_a(m, "p_X", "x2"), _fixed_a(m, "p_X", "x3")) == (0.0, 2.0)


def test_blended_average_of_two():
    blocks = paper_blocks("average", "ho_blended", "full")
    m = build_ho_blended(blocks, paper_structure())
    assert _fixed_a(m, "Rave", "Gf") == 2.0
    assert _fixed_a(m, "p_Gf", "Lett") == 1.0


def test_blended_zero_pseudo_weight():
    blocks = [CompositeBlock("X", ("a", "b"), weights="fixed", fixed_values=(1.0, 0.0)),
              CompositeBlock("Y", ("c", "d"))]
    with pytest.raises(ZeroPseudoWeight):
        build_ho_blended(blocks, Y)


def test_phantom_fixed_weights_and_variance():
    blocks = [CompositeBlock("X", ("a", "b"), weights="fixed", fixed_values=(0.25, 0.75),
                             spec="ho_phantom"),
              CompositeBlock("Y", ("c", "d"), spec="ho_phantom")]
    m = build_ho_phantom(blocks, Y)
    assert _fixed_a(m, "a", "p_a") == 4.0
    assert _fixed_a(m, "b", "p_b") == pytest.approx(4 / 3, abs=1e-15)
    rng = np.random.default_rng(3)
    theta = m.expand(rng.uniform(0.2, 0.8, size=m.n_free))
    _, _, _, C = m.moments(theta)
    idx = [m.index["a"], m.index["b"]]
    Sx = C[np.ix_(idx, idx)]
    w = np.array([0.25, 0.75])
    assert abs(C[m.index["X"], m.index["X"]] - w @ Sx @ w) < 1e-10


def test_phantom_zero_weight():
    blocks = [CompositeBlock("X", ("a", "b"), weights="fixed", fixed_values=(0.0, 1.0),
                             spec="ho_phantom"),
              CompositeBlock("Y", ("c", "d"), spec="ho_phantom")]
    with pytest.raises(ZeroWeight):
        build_ho_phantom(blocks, Y)


def test_refined_average_gives_half():
    blocks = [CompositeBlock(n, c, spec="ho_refined") for n, c in (("X", ("a", "b")), ("Y", ("c", "d")))]
    m = build_ho_refined(blocks, Y)
    assert m.constraints[0].rhs == 2.0
    vals = evaluate_all(m, m.expand(np.full(m.n_free, 0.3)))
    assert vals["w.a"] == vals["w.b"] == 0.5


def test_refined_rejects_unequal_fixed():
    blocks = [CompositeBlock("X", ("a", "b"), weights="fixed", fixed_values=(0.3, 0.7),
                             spec="ho_refined"),
              CompositeBlock("Y", ("c", "d"), spec="ho_refined")]
    with pytest.raises(UnsupportedFixedValues):
        build_ho_refined(blocks, Y)


def test_original_requires_free():
    blocks = [CompositeBlock(n, c, spec="ho_original") for n, c in (("X", ("a", "b")), ("Y", ("c", "d")))]
    with pytest.raises(ModelSpecificationError):
        build_ho_original(blocks, Y)


def test_original_equals_refined_for_two_components(paper_like_moments):
    r1 = estimate(build_ho_refined(paper_blocks("free", "ho_refined"), paper_structure()),
                  paper_like_moments)
    r2 = estimate(build_ho_original(paper_blocks("free", "ho_original"), paper_structure()),
                  paper_like_moments)
    assert r1.model.n_free == r2.model.n_free
    assert abs(r1.fit.chisq - r2.fit.chisq) < 1e-8
    for k, (v, _) in r1.derived.items():
        assert abs(v - r2.derived[k][0]) < 1e-6


def test_original_cascading_pattern_with_zero_loadings():
    X = StructuralSpec([Regression("Y", ("X",))])
    blocks = [CompositeBlock("X", ("x1", "x2", "x3"), weights="free", spec="ho_original"),
              CompositeBlock("Y", ("c", "d"), weights="free", spec="ho_original")]
    m = build_ho_original(blocks, X)
    theta = np.zeros(m.n_labels)
    L = m.loading_block("X", theta)
    # anchor order puts x3 first; with free loadings 0 only the anchors remain
    rows = [m.composites["X"].components.index(c) for c in ("x3", "x1", "x2")]
    assert np.allclose(L[rows], np.eye(3))
    assert np.allclose(invert_block(L), np.linalg.inv(L), atol=1e-15)


def test_isolated_free_composite():
    # a single free composite has no structural neighbour at all
    for spec in ("ho_original", "ho_refined", "ho_phantom", "ho_blended"):
        with pytest.raises(IsolatedComposite):
            build([CompositeBlock("X", ("a", "b"), weights="free", spec=spec)], StructuralSpec())


def test_unlisted_exogenous_composite_is_not_isolated():
    # exogenous composites covary by default, so Z is connected to X
    blocks = [CompositeBlock("X", ("a", "b"), weights="free", spec="ho_refined"),
              CompositeBlock("Y", ("c", "d"), weights="free", spec="ho_refined"),
              CompositeBlock("Z", ("e", "f"), weights="free", spec="ho_refined")]
    m = build_ho_refined(blocks, Y)
    assert "X~~Z" in m.labels


def test_pseudo_free_unsupported():
    blocks = [CompositeBlock("X", ("a", "b"), weights="free", spec="pseudo_indicator"),
              CompositeBlock("Y", ("c", "d"), spec="pseudo_indicator", transmission="mimic_two_step")]
    with pytest.raises(FreeWeightsUnsupported):
        build_pseudo_indicator(blocks, Y)


def test_one_step_free_outcome():
    blocks = [CompositeBlock("X", ("a", "b")), CompositeBlock("Y", ("c", "d"), weights="free")]
    with pytest.raises(FreeWeightsOnOutcome):
        build_one_step_modified(blocks, Y)


def test_saturation_plan_single_block_full_is_empty():
    assert saturation_plan([CompositeBlock("X", ("a", "b"))], StructuralSpec()) == []


@pytest.mark.parametrize("spec", ["pseudo_indicator", "ho_refined", "ho_phantom", "ho_blended"])
def test_fixed_weight_mimic_is_saturated(spec):
    m = build(paper_blocks("average", spec, "mimic_two_step"), paper_structure())
    assert (m.n_free, m.df) == (36, 0)


def test_df_accounting():
    st = paper_structure()
    one = build_one_step_modified(paper_blocks("average", "one_step_modified"), st)
    assert (one.n_free, one.df) == (29, 7)
    _, two = build_two_step(paper_blocks("average", "two_step"), st)
    assert two.n_free == 10 and two.df == 0
    for spec in ("ho_original", "ho_refined", "ho_phantom", "ho_blended"):
        m = build(paper_blocks("free", spec), st)
        assert (m.n_free, m.df) == (22, 14)
        # brute force: distinct free labels minus one per constraint
        assert m.n_free == len({c.label for c in m.cells if c.free}) - len(m.constraints)


def test_one_step_degenerate_weights():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(400, 4))
    X[:, 2] += 0.5 * X[:, 0]
    X[:, 3] += 0.3 * X[:, 0] + 0.2 * X[:, 1]
    names = ["a", "b", "c", "d"]
    blocks = [CompositeBlock("X", ("a", "b"), weights="fixed", fixed_values=(1.0, 0.0)),
              CompositeBlock("Y", ("c", "d"))]
    res = estimate(build_one_step_modified(blocks, Y), SampleMoments.from_data(X, names))
    direct = 0.5 * (res.value("c~X") + res.value("d~X"))
    assert abs(res.value("Y~X") - direct) < 1e-12
    # X equals component a alone, so the regression of Y-components on X is on a
    S = np.cov(X.T, bias=True)
    ols = S[0, 2:] / S[0, 0]
    assert np.allclose([res.value("c~X"), res.value("d~X")], ols, atol=1e-6)


@pytest.mark.parametrize("spec", ["ho_refined", "ho_phantom", "ho_blended", "ho_original"])
def test_weights_invert_loading_block(spec, paper_like_moments):
    m = build(paper_blocks("free", spec), paper_structure())
    res = estimate(m, paper_like_moments)
    _, _, B, C = m.moments(res.theta)
    for name, info in m.composites.items():
        L = m.loading_block(name, B=B)
        W = invert_block(L)
        assert np.abs(L @ W - np.eye(len(info.components))).max() < 1e-10
        w = np.array([res.value(f"w.{c}") for c in info.components])
        assert np.allclose(W[0], w, atol=1e-10)
        idx = [m.index[c] for c in info.components]
        var_eta = C[m.index[name], m.index[name]]
        assert abs(var_eta - w @ C[np.ix_(idx, idx)] @ w) < 1e-10


def test_refined_exchangeable_components_equal_loadings():
    # X is the average of exchangeable a, b; fit to the exact population
    blocks = [CompositeBlock("X", ("a", "b"), spec="ho_refined"),
              CompositeBlock("Y", ("c", "d"), spec="ho_refined")]
    R = np.array([[1.0, 0.5, 0.3, 0.3], [0.5, 1.0, 0.3, 0.3],
                  [0.3, 0.3, 1.0, 0.4], [0.3, 0.3, 0.4, 1.0]])
    res = estimate(build_ho_refined(blocks, Y), SampleMoments(R, 500, list("abcd")))
    assert abs(res.value("X=~a") - res.value("X=~b")) < 1e-6


def test_mixed_specs_rejected():
    blocks = [CompositeBlock("X", ("a", "b"), spec="two_step"),
              CompositeBlock("Y", ("c", "d"), spec="ho_blended")]
    with pytest.raises(ModelSpecificationError):
        build(blocks, Y)


def test_duplicate_component_across_blocks():
    blocks = [CompositeBlock("X", ("a", "b")), CompositeBlock("Y", ("b", "c"))]
    with pytest.raises(ModelSpecificationError):
        build(blocks, Y)


def test_block_validation():
    with pytest.raises(ModelSpecificationError):
        CompositeBlock("X", ("a",))
    with pytest.raises(ModelSpecificationError):
        CompositeBlock("X", ("a", "b"), weights="fixed")
    with pytest.raises(ModelSpecificationError):
        CompositeBlock("X", ("a", "b"), pseudo="c")


def test_paper_names_cover_blocks():
    m = build(paper_blocks("free", "ho_blended"), paper_structure())
    assert list(m.observed_order) == PAPER_NAMES
    assert m.meta["paths"] == ["Gf~WMC", "Gf~PE", "Gf~PR"]
