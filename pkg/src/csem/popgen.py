"""
Population covariance matrices from composite models, and Gaussian sampling.

Composites are defined exactly as ``eta = w'x``.  Each composite fully
transmits its relations to other blocks: with ``lambda_a = Sigma_a w_a /
var(eta_a)`` the covariance of components in different blocks is
``lambda_a cov(eta_a, eta_b) lambda_b'``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import ModelSpecificationError, NotPositiveDefinite


@dataclass(frozen=True)
class PopulationBlock:
    name: str
    components: tuple
    weights: tuple
    sigma: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(self.components))
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        sigma = np.array(self.sigma, dtype=float)
        object.__setattr__(self, "sigma", sigma)
        k = len(self.components)
        if len(self.weights) != k or sigma.shape != (k, k):
            raise ModelSpecificationError(f"population block {self.name}: dimension mismatch")
        if not np.allclose(sigma, sigma.T, atol=1e-12):
            raise NotPositiveDefinite(f"population block {self.name}: covariance not symmetric")
        if np.linalg.eigvalsh(sigma).min() <= 0:
            raise NotPositiveDefinite(f"population block {self.name}: covariance not positive definite")

    @property
    def w(self) -> np.ndarray:
        return np.array(self.weights)

    @property
    def variance(self) -> float:
        return float(self.w @ self.sigma @ self.w)


@dataclass(frozen=True)
class PopulationSpec:
    """Composite population.

    Parameters
    ----------
    blocks : sequence of PopulationBlock
    paths : dict
        ``(outcome, predictor) -> coefficient`` among composites.
    correlations : dict
        ``(a, b) -> correlation`` between exogenous composites; omitted pairs
        are uncorrelated.
    seed : int
    """

    blocks: tuple
    paths: dict = field(default_factory=dict)
    correlations: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))

    @property
    def names(self) -> list:
        return [c for b in self.blocks for c in b.components]

    @property
    def composites(self) -> list:
        return [b.name for b in self.blocks]


def _topological(names, paths):
    preds = {n: [p for (o, p) in paths if o == n] for n in names}
    order, done = [], set()

    def visit(n, stack):
        if n in done:
            return
        if n in stack:
            raise ModelSpecificationError("population structural model has a cycle")
        for p in preds[n]:
            visit(p, stack | {n})
        done.add(n)
        order.append(n)

    for n in names:
        visit(n, frozenset())
    return order


def composite_covariance(spec: PopulationSpec) -> np.ndarray:
    """Covariance matrix of the composites implied by the structural model.

    Endogenous composite variances are pinned by ``w'Sigma w`` of their
    block, so the disturbance variance is whatever is left over.
    """
    names = spec.composites
    idx = {n: i for i, n in enumerate(names)}
    for (o, p) in spec.paths:
        if o not in idx or p not in idx:
            raise ModelSpecificationError(f"unknown composite in path {o} ~ {p}")
    var = np.array([b.variance for b in spec.blocks])
    if np.any(var <= 0):
        raise NotPositiveDefinite("a composite has nonpositive variance")
    endo = {o for (o, _) in spec.paths}
    phi = np.zeros((len(names), len(names)))
    for n in names:
        i = idx[n]
        phi[i, i] = var[i]
    for (a, b), r in spec.correlations.items():
        if a in endo or b in endo:
            raise ModelSpecificationError(f"correlation {a} ~~ {b} involves an endogenous composite")
        i, j = idx[a], idx[b]
        phi[i, j] = phi[j, i] = r * np.sqrt(var[i] * var[j])
    # disturbances are uncorrelated with everything processed earlier in
    # topological order, so covariances propagate through the predictors
    done = [idx[n] for n in names if n not in endo]
    for n in _topological(names, spec.paths):
        if n not in endo:
            continue
        i = idx[n]
        beta = np.zeros(len(names))
        for (o, p), g in spec.paths.items():
            if o == n:
                beta[idx[p]] = g
        explained = float(beta @ phi @ beta)
        if explained >= var[i]:
            raise NotPositiveDefinite(
                f"paths into {n} explain more than its variance ({explained:.3g} >= {var[i]:.3g})")
        for j in done:
            phi[i, j] = phi[j, i] = float(beta @ phi[:, j])
        done.append(i)
    return phi


def population_sigma(spec: PopulationSpec) -> np.ndarray:
    """Component covariance matrix in the order of ``spec.names``."""
    phi = composite_covariance(spec)
    lam = [b.sigma @ b.w / b.variance for b in spec.blocks]
    sizes = [len(b.components) for b in spec.blocks]
    offs = np.concatenate([[0], np.cumsum(sizes)])
    p = offs[-1]
    sigma = np.zeros((p, p))
    for a, ba in enumerate(spec.blocks):
        sa = slice(offs[a], offs[a + 1])
        sigma[sa, sa] = ba.sigma
        for b in range(a + 1, len(spec.blocks)):
            sb = slice(offs[b], offs[b + 1])
            block = np.outer(lam[a], lam[b]) * phi[a, b]
            sigma[sa, sb] = block
            sigma[sb, sa] = block.T
    if np.linalg.eigvalsh(sigma).min() <= 1e-12:
        raise NotPositiveDefinite("population covariance matrix is not positive definite")
    return sigma


def sample(spec: PopulationSpec, n: int, seed: int | None = None) -> pd.DataFrame:
    """``n`` multivariate normal rows with covariance ``population_sigma(spec)``."""
    if n < 2:
        raise ValueError("n must be at least 2")
    sigma = population_sigma(spec)
    return sample_normal(sigma, n, spec.names, spec.seed if seed is None else seed)


def sample_normal(sigma, n: int, names, seed: int = 0) -> pd.DataFrame:
    L = np.linalg.cholesky(np.asarray(sigma, dtype=float))
    rng = np.random.default_rng(seed)
    Z = rng.standard_normal((n, L.shape[0]))
    return pd.DataFrame(Z @ L.T, columns=list(names))


def random_pd(p: int, rng: np.random.Generator | int | None = None, *, correlation: bool = True,
              min_eig: float = 0.1) -> np.ndarray:
    """Random positive definite matrix (a correlation matrix by default)."""
    rng = np.random.default_rng(rng)
    M = rng.normal(size=(p, p))
    sigma = M @ M.T / p + min_eig * np.eye(p)
    if correlation:
        d = np.sqrt(np.diag(sigma))
        sigma = sigma / np.outer(d, d)
    return (sigma + sigma.T) / 2.0


def _positive_block(k, rng):
    # one-factor correlation matrix: components of a composite usually
    # correlate positively
    lam = rng.uniform(0.4, 0.85, size=k)
    R = np.outer(lam, lam)
    np.fill_diagonal(R, 1.0)
    return R


def random_population(block_sizes, rng=None, *, paths=None, correlations=None,
                      seed: int = 0, max_tries: int = 100) -> PopulationSpec:
    """Random composite population with positive weights.

    Components within a block are positively correlated.

    ``paths``/``correlations`` default to a chain where the last composite is
    regressed on all others, the others being correlated.
    """
    rng = np.random.default_rng(rng)
    names = [f"C{i + 1}" for i in range(len(block_sizes))]
    for _ in range(max_tries):
        blocks = []
        for i, k in enumerate(block_sizes):
            comps = tuple(f"x{i + 1}{j + 1}" for j in range(k))
            w = rng.uniform(0.2, 1.0, size=k)
            blocks.append(PopulationBlock(names[i], comps, tuple(w), _positive_block(k, rng)))
        ps = paths
        if ps is None:
            ps = {(names[-1], n): float(rng.uniform(-0.4, 0.4)) * np.sqrt(
                blocks[-1].variance / blocks[i].variance) for i, n in enumerate(names[:-1])}
        cs = correlations
        if cs is None:
            cs = {}
            for i in range(len(names) - 1):
                for j in range(i + 1, len(names) - 1):
                    cs[(names[i], names[j])] = float(rng.uniform(-0.4, 0.4))
        spec = PopulationSpec(tuple(blocks), ps, cs, seed)
        try:
            population_sigma(spec)
        except NotPositiveDefinite:
            continue
        return spec
    raise NotPositiveDefinite("could not draw a positive definite population")


def population_from_program(program) -> PopulationSpec:
    """Population described by a model program's ``pop.*`` options.

    Recognized options (all optional):

    ``pop.seed``
        sampling seed (default 0).
    ``pop.within.<composite>``
        equicorrelation of that composite's components (default 0.5).
    ``pop.weight.<component>``
        true weight of a component of a free-weight composite (default 1).
    ``pop.path.<outcome>.<predictor>``
        coefficient of each regression in the program (default 0.3).
    ``pop.cor.<a>.<b>``
        correlation of two exogenous composites (default 0).

    Fixed-weight composites use their declared weights.
    """
    opts = program.options
    blocks = []
    for b in program.blocks:
        k = b.k
        r = float(opts.get(f"pop.within.{b.name}", 0.5))
        R = np.full((k, k), r)
        np.fill_diagonal(R, 1.0)
        w = b.weight_vector()
        if w is None:
            w = np.array([float(opts.get(f"pop.weight.{c}", 1.0)) for c in b.components])
        blocks.append(PopulationBlock(b.name, b.components, tuple(w), R))
    paths = {(o, p): float(opts.get(f"pop.path.{o}.{p}", 0.3))
             for o, p in program.structural.paths()}
    cors = {}
    for key, value in opts.items():
        parts = key.split(".")
        if len(parts) == 4 and parts[:2] == ["pop", "cor"]:
            cors[(parts[2], parts[3])] = float(value)
    return PopulationSpec(tuple(blocks), paths, cors, int(opts.get("pop.seed", 0)))
