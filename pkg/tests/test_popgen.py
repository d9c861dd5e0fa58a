from __future__ import annotations

import numpy as np
import pytest

from csem.builders import CompositeBlock, Regression, StructuralSpec, build
from csem.dsl import parse
from csem.errors import ModelSpecificationError, NotPositiveDefinite
from csem.estimator import SampleMoments, estimate
from csem.popgen import (
    PopulationBlock,
    PopulationSpec,
    composite_covariance,
    population_from_program,
    population_sigma,
    random_population,
    sample,
)


def _one_block():
    return PopulationSpec((PopulationBlock("X", ("a", "b"), (1.0, 1.0), np.eye(2)),))


def test_one_block_composite_moments():
    spec = _one_block()
    assert composite_covariance(spec)[0, 0] == 2.0
    sigma = population_sigma(spec)
    w = np.ones(2)
    assert np.allclose(sigma @ w, [1.0, 1.0])  # cov(x_i, eta)


def test_two_blocks_implied_path():
    R = np.array([[1.0, 0.4], [0.4, 1.0]])
    spec = PopulationSpec((PopulationBlock("X", ("a", "b"), (0.5, 0.5), R),
                           PopulationBlock("Y", ("c", "d"), (0.7, 0.3), R)),
                          {("Y", "X"): 0.6})
    sigma = population_sigma(spec)
    wx = np.array([0.5, 0.5, 0, 0])
    wy = np.array([0, 0, 0.7, 0.3])
    assert (wy @ sigma @ wx) / (wx @ sigma @ wx) == pytest.approx(0.6, abs=1e-12)
    assert wy @ sigma @ wy == pytest.approx(spec.blocks[1].variance, abs=1e-12)


def test_recovery_from_population_sigma():
    R = np.array([[1.0, 0.4], [0.4, 1.0]])
    spec = PopulationSpec((PopulationBlock("X", ("a", "b"), (0.4, 0.9), R),
                           PopulationBlock("Y", ("c", "d"), (0.7, 0.3), R)),
                          {("Y", "X"): 0.5})
    sigma = population_sigma(spec)
    blocks = [CompositeBlock("X", ("a", "b"), weights="free", spec="ho_blended"),
              CompositeBlock("Y", ("c", "d"), weights="free", spec="ho_blended")]
    res = estimate(build(blocks, StructuralSpec([Regression("Y", ("X",))])),
                   SampleMoments(sigma, 1000, spec.names))
    assert res.fit.chisq < 1e-8
    assert res.value("w.a") == pytest.approx(0.4 / 0.9, abs=1e-8)
    assert res.value("w.c") == pytest.approx(0.7 / 0.3, abs=1e-8)
    # rescale to the population composites and read the path
    assert res.standardized["Y~X"][0] == pytest.approx(
        0.5 * np.sqrt(spec.blocks[0].variance / spec.blocks[1].variance), abs=1e-8)


def test_law_of_large_numbers():
    spec = random_population([2, 3, 2], 4)
    data = sample(spec, 100_000, seed=9)
    S = np.cov(data.to_numpy().T)
    assert np.abs(S - population_sigma(spec)).max() < 0.05


def test_seed_determinism_and_small_n():
    spec = random_population([2, 2], 0)
    a = sample(spec, 50, seed=3).to_csv(index=False)
    b = sample(spec, 50, seed=3).to_csv(index=False)
    assert a == b
    assert len(sample(spec, 2, seed=3)) == 2
    with pytest.raises(ValueError):
        sample(spec, 1)


def test_invalid_populations():
    with pytest.raises(NotPositiveDefinite):
        PopulationBlock("X", ("a", "b"), (1, 1), [[1.0, 2.0], [2.0, 1.0]])
    R = np.eye(2)
    blocks = (PopulationBlock("X", ("a", "b"), (1, 1), R), PopulationBlock("Y", ("c", "d"), (1, 1), R))
    with pytest.raises(NotPositiveDefinite):
        population_sigma(PopulationSpec(blocks, {("Y", "X"): 1.5}))
    with pytest.raises(ModelSpecificationError):
        population_sigma(PopulationSpec(blocks, {("Y", "X"): 0.1, ("X", "Y"): 0.1}))


def test_population_from_program():
    prog = parse("composite X <~ free(a, b) using blended\n"
                 "composite Y <~ average(c, d) using blended\n"
                 "Y ~ X\nset pop.weight.a = 2\nset pop.path.Y.X = 0.4\nset pop.within.X = 0.2\n")
    spec = population_from_program(prog)
    assert spec.blocks[0].weights == (2.0, 1.0)
    assert spec.blocks[1].weights == (0.5, 0.5)
    assert spec.paths == {("Y", "X"): 0.4}
    assert spec.blocks[0].sigma[0, 1] == 0.2
