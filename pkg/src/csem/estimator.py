"""
Normal-theory maximum-likelihood estimation of RAM models.

The discrepancy function is

    F(theta) = ln|Sigma(theta)| + tr(S Sigma(theta)^-1) - ln|S| - p,

minimized over the reduced (constraint-free) parameter vector with BFGS
and a backtracking Armijo line search.  The test statistic is ``d * F``
with ``d = n`` (default) or ``n - 1``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import fit as fitmetrics
from .errors import (
    CsemError,
    MissingColumn,
    NegativeDF,
    NonPDImplied,
    NotConverged,
    SingularInformation,
    SingularStructure,
    TooFewRows,
    UndefinedDerived,
)
from .numdiff import delta_se, jacobian
from .ram import DerivedQuantity, RamModel, evaluate_derived, implied_covariance, sigma_jacobian

log = logging.getLogger(__name__)

DIVISORS = ("n", "n_minus_1")
INFORMATION = ("expected", "observed")


@dataclass(frozen=True)
class SampleMoments:
    """Sample covariance matrix with divisor ``n`` (the ML estimate) and sample size."""

    S: np.ndarray
    n: int
    names: tuple

    def __post_init__(self):
        S = np.array(self.S, dtype=float)
        object.__setattr__(self, "names", tuple(self.names))
        if S.ndim != 2 or S.shape[0] != S.shape[1] or S.shape[0] != len(self.names):
            raise ValueError("S must be square and match names")
        if not np.allclose(S, S.T, atol=1e-12, rtol=0):
            raise ValueError("S must be symmetric")
        S = 0.5 * (S + S.T)
        if np.any(np.diag(S) <= 0):
            raise ValueError("S must have a strictly positive diagonal")
        if self.n < S.shape[0] + 1:
            raise TooFewRows(f"n = {self.n} is smaller than p + 1 = {S.shape[0] + 1}")
        S.flags.writeable = False
        object.__setattr__(self, "S", S)

    @classmethod
    def from_data(cls, X, names=None) -> "SampleMoments":
        if names is None:
            names = list(X.columns)
            X = X.to_numpy(dtype=float)
        X = np.asarray(X, dtype=float)
        Xc = X - X.mean(axis=0)
        return cls(Xc.T @ Xc / X.shape[0], X.shape[0], names)

    @classmethod
    def from_covariance(cls, cov, n: int, names, ddof: int = 1) -> "SampleMoments":
        """From a covariance matrix computed with divisor ``n - ddof``."""
        cov = np.asarray(cov, dtype=float)
        return cls(cov * (n - ddof) / n, n, names)

    @property
    def p(self) -> int:
        return len(self.names)

    def subset(self, names: Sequence[str]) -> "SampleMoments":
        missing = [v for v in names if v not in self.names]
        if missing:
            raise MissingColumn(f"variables not in the data: {missing}")
        idx = [self.names.index(v) for v in names]
        return SampleMoments(self.S[np.ix_(idx, idx)], self.n, names)

    def scaled(self, divisor: str) -> tuple:
        """``(S_d, d)`` for a divisor convention."""
        if divisor == "n":
            return np.array(self.S), float(self.n)
        if divisor == "n_minus_1":
            return self.S * self.n / (self.n - 1), float(self.n - 1)
        raise ValueError(f"unknown divisor convention {divisor!r}")


@dataclass(frozen=True)
class EstimationSettings:
    max_iterations: int = 10000
    f_tol: float = 1e-10
    grad_tol: float = 1e-6
    divisor_convention: str = "n"
    start_override: Mapping | None = None
    jitter_retries: int = 3
    seed: int = 0
    information: str = "expected"
    weight_start: bool = True

    def __post_init__(self):
        if self.f_tol <= 0 or self.grad_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.divisor_convention not in DIVISORS:
            raise ValueError(f"divisor_convention must be one of {DIVISORS}")
        if self.information not in INFORMATION:
            raise ValueError(f"information must be one of {INFORMATION}")


@dataclass
class FitResult:
    model: RamModel
    moments: SampleMoments
    settings: EstimationSettings
    phi: np.ndarray
    theta: np.ndarray
    theta_hat: dict
    se: dict
    vcov: np.ndarray
    vcov_free: np.ndarray
    fmin: float
    converged: bool
    iterations: int
    gradient: np.ndarray
    sigma_hat: np.ndarray
    derived: dict = field(default_factory=dict)
    fit: "fitmetrics.FitStatistics | None" = None
    standardized: dict = field(default_factory=dict)
    restarts: int = 0
    objective_trace: list = field(default_factory=list)

    @property
    def d(self) -> float:
        return self.moments.scaled(self.settings.divisor_convention)[1]

    def value(self, name: str) -> float:
        """Estimate of a label or a derived quantity."""
        if name in self.theta_hat:
            return self.theta_hat[name]
        if name in self.model.fixed_labels:
            return self.model.fixed_labels[name]
        return self.derived[name][0]

    def stderr(self, name: str):
        if name in self.se:
            return self.se[name]
        return self.derived[name][1]


# ---------------------------------------------------------------------------
# objective


def _chol_logdet(M):
    L = np.linalg.cholesky(M)
    return 2.0 * np.log(np.diag(L)).sum()


def fml(model: RamModel, theta, moments, strict: bool = False, S=None) -> float:
    """ML discrepancy at label values ``theta``.

    Returns ``inf`` when the implied covariance is not positive definite or
    (I - A) is singular (a barrier for line searches); with ``strict=True``
    raises NonPDImplied instead.
    """
    if S is None:
        S = _aligned(model, moments).S
    try:
        Sigma = implied_covariance(model, theta)
        ld = _chol_logdet(Sigma)
    except (np.linalg.LinAlgError, SingularStructure):
        if strict:
            raise NonPDImplied("implied covariance is not positive definite")
        return np.inf
    p = S.shape[0]
    ldS = _chol_logdet(S)
    f = ld + np.trace(np.linalg.solve(Sigma, S)) - ldS - p
    return float(max(f, 0.0)) if f > -1e-12 else float(f)


def _aligned(model: RamModel, moments) -> SampleMoments:
    if tuple(moments.names) == tuple(model.observed_order):
        return moments
    return moments.subset(model.observed_order)


class _Objective:
    """F, gradient and expected Hessian over the reduced vector."""

    def __init__(self, model: RamModel, S: np.ndarray):
        self.model = model
        self.S = S
        self.p = S.shape[0]
        self.ldS = _chol_logdet(S)
        self.T = model.reduction.T
        self.nfev = 0

    def theta(self, phi):
        return self.model.reduction.expand(phi)

    def _sigma(self, phi):
        return sigma_jacobian(self.model, self.theta(phi))

    def f(self, phi) -> float:
        self.nfev += 1
        try:
            Sigma = implied_covariance(self.model, self.theta(phi))
            L = np.linalg.cholesky(Sigma)
        except (np.linalg.LinAlgError, SingularStructure):
            return np.inf
        ld = 2.0 * np.log(np.diag(L)).sum()
        Linv_S = np.linalg.solve(L, self.S)
        tr = np.trace(np.linalg.solve(L.T, Linv_S))
        val = ld + tr - self.ldS - self.p
        return float(val) if np.isfinite(val) else np.inf

    def f_grad(self, phi):
        Sigma, dS = self._sigma(phi)
        Si = np.linalg.inv(Sigma)
        M = Si - Si @ self.S @ Si
        g_theta = np.einsum("ij,kij->k", M, dS)
        return self.T.T @ g_theta

    def grad(self, phi):
        return self.f_grad(phi)

    def expected_hessian(self, phi):
        Sigma, dS = self._sigma(phi)
        Si = np.linalg.inv(Sigma)
        K = np.einsum("ij,kjl->kil", Si, dS)
        H = np.einsum("kij,lji->kl", K, K)
        H = self.T.T @ H @ self.T
        return 0.5 * (H + H.T)

    def observed_hessian(self, phi):
        H = jacobian(self.grad, phi, rel=1e-5)
        return 0.5 * (H + H.T)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class _OptResult:
    x: np.ndarray
    f: float
    g: np.ndarray
    iterations: int
    converged: bool
    trace: list
    message: str


def bfgs(fun, grad, x0, hess0=None, max_iter=10000, grad_tol=1e-6, f_tol=1e-10,
         stall_iterations=20, reset_hessian=None, max_step=1.0,
         max_resets=5) -> _OptResult:
    """BFGS with backtracking Armijo line search.

    ``hess0`` is an initial Hessian approximation (inverted internally);
    ``reset_hessian(x)`` supplies a fresh one when the search direction
    stops being a descent direction.  Accepted steps never increase ``fun``.
    """
    x = np.asarray(x0, dtype=float).copy()
    n = x.size
    fx = fun(x)
    if not np.isfinite(fx):
        return _OptResult(x, fx, np.full(n, np.nan), 0, False, [fx], "infeasible start")
    g = grad(x)
    Hinv = _safe_inverse(hess0, n)
    trace = [fx]
    stall = 0
    resets = 0
    message = "maximum iterations reached"
    it = 0
    for it in range(1, max_iter + 1):
        if np.max(np.abs(g), initial=0.0) < grad_tol:
            message = "gradient tolerance reached"
            return _OptResult(x, fx, g, it - 1, True, trace, message)
        direction = -Hinv @ g
        slope = g @ direction
        if not slope < 0:
            Hinv = _safe_inverse(reset_hessian(x) if reset_hessian else None, n)
            direction = -Hinv @ g
            slope = g @ direction
            if not slope < 0:
                Hinv = np.eye(n)
                direction = -g
                slope = g @ direction
        # cap the trial step so early quasi-Newton steps cannot jump across
        # the admissible region into a distant basin
        t = min(1.0, max_step / max(np.max(np.abs(direction)), 1e-300))
        accepted = False
        while t > 1e-16:
            xn = x + t * direction
            fn = fun(xn)
            if np.isfinite(fn) and fn <= fx + 1e-4 * t * slope:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            # at the noise floor of F: take the full step when F does not
            # increase and the gradient shrinks
            t0 = min(1.0, max_step / max(np.max(np.abs(direction)), 1e-300))
            xn = x + t0 * direction
            fn = fun(xn)
            if np.isfinite(fn) and fn <= fx:
                gn_try = grad(xn)
                if np.max(np.abs(gn_try)) < np.max(np.abs(g)):
                    accepted = True
        if not accepted:
            if reset_hessian is not None and not np.allclose(Hinv, _safe_inverse(reset_hessian(x), n)):
                Hinv = _safe_inverse(reset_hessian(x), n)
                continue
            message = "line search failed"
            break
        gn = grad(xn)
        s = xn - x
        y = gn - g
        sy = s @ y
        if sy > 1e-14 * np.linalg.norm(s) * np.linalg.norm(y):
            rho = 1.0 / sy
            V = np.eye(n) - rho * np.outer(s, y)
            Hinv = V @ Hinv @ V.T + rho * np.outer(s, s)
        if abs(fx - fn) <= f_tol * max(1.0, abs(fx)):
            stall += 1
        else:
            stall = 0
        x, fx, g = xn, fn, gn
        trace.append(fx)
        if stall >= stall_iterations:
            # near the optimum F barely moves; restart from the information
            # matrix a few times before giving up
            if reset_hessian is not None and resets < max_resets:
                resets += 1
                stall = 0
                Hinv = _safe_inverse(reset_hessian(x), n)
                continue
            message = "objective stalled"
            break
    converged = bool(np.max(np.abs(g), initial=0.0) < grad_tol)
    return _OptResult(x, fx, g, it, converged, trace, message)


def _safe_inverse(H, n):
    if H is None:
        return np.eye(n)
    try:
        w, V = np.linalg.eigh(H)
    except np.linalg.LinAlgError:
        return np.eye(n)
    if not np.all(np.isfinite(w)) or w.max() <= 0:
        return np.eye(n)
    w = np.maximum(w, w.max() * 1e-8)
    return (V / w) @ V.T


# ---------------------------------------------------------------------------
# starting values


def starting_values(model: RamModel, moments: SampleMoments, override=None,
                    weights=None) -> np.ndarray:
    """Deterministic start for the reduced vector.

    Loadings, phantom loadings and weight ratios start at 1, free loadings
    of excrescent variables at -1, loadings under a sum constraint at the
    constrained total divided equally, paths and covariances at 0.
    Variances start at half the observed variance (latent variables: half
    the mean variance of their components, or of all observed variables).

    ``weights`` moves the parameters that carry free weights to a start
    consistent with given weights, so that the start lies on the same side
    of every zero weight as the solution: ``"provisional"`` uses
    ``provisional_weights``; a mapping gives one weight vector per composite.
    """
    if model.n_labels == 0:
        return np.zeros(0)
    m = _aligned(model, moments)
    obs_var = dict(zip(m.names, np.diag(m.S)))
    mean_var = float(np.mean(list(obs_var.values())))
    sum_start = {}
    for con in model.constraints:
        share = con.rhs / sum(c for _, c in con.terms)
        for lab, _ in con.terms:
            sum_start[lab] = share
    theta = np.zeros(model.n_labels)
    for k, lab in enumerate(model.labels):
        cell = model.cells_for(lab)[0]
        role = cell.role
        if not role and cell.matrix == "S" and cell.row == cell.col:
            role = "variance"
        if role in ("loading", "phantom", "ratio"):
            v = 1.0
        elif role == "excrescent":
            v = -1.0
        elif role == "loading_sum":
            v = sum_start.get(lab, 1.0)
        elif role in ("variance", "helper_variance"):
            name = cell.row
            if name in obs_var:
                v = 0.5 * obs_var[name]
            elif name in model.composites and role == "variance":
                comps = model.composites[name].components
                v = 0.5 * float(np.mean([obs_var[c] for c in comps if c in obs_var] or [mean_var]))
            else:
                v = 0.5 * mean_var
        else:
            v = 0.0
        theta[k] = v
    if weights is not None:
        if weights == "provisional":
            theta = _weight_start(model, m.S, theta)[0]
        else:
            theta = _reference_start(model, theta, weights)
    if override:
        for lab, v in override.items():
            if lab not in model.labels:
                raise KeyError(f"start override for unknown label {lab!r}")
            theta[model.labels.index(lab)] = float(v)
    return model.reduction.project(theta)


def provisional_weights(S: np.ndarray, blocks: Sequence[Sequence[int]],
                        max_iter: int = 100, tol: float = 1e-10) -> list:
    """Consistent composite weights from moments alone.

    Mode B partial least squares with the factorial inner scheme: each
    block's weights are the regression of a proxy, built from all other
    composites weighted by their correlation with the block, on the block's
    components.  Weights are scaled to unit composite variance; their signs
    are arbitrary.
    """
    ws = []
    for idx in blocks:
        w = np.ones(len(idx))
        ws.append(w / np.sqrt(w @ S[np.ix_(idx, idx)] @ w))
    if len(blocks) < 2:
        return ws
    for _ in range(max_iter):
        change = 0.0
        for b, idx in enumerate(blocks):
            target = np.zeros(len(idx))
            for c, jdx in enumerate(blocks):
                if c == b:
                    continue
                cross = S[np.ix_(idx, jdx)] @ ws[c]
                target += (ws[b] @ cross) * cross
            try:
                w = np.linalg.solve(S[np.ix_(idx, idx)], target)
            except np.linalg.LinAlgError:
                return ws
            v = w @ S[np.ix_(idx, idx)] @ w
            if not np.isfinite(v) or v <= 0:
                return ws
            w /= np.sqrt(v)
            change = max(change, float(np.abs(w - ws[b]).max()))
            ws[b] = w
        if change < tol:
            break
    return ws


HO_SPECS = ("ho_original", "ho_refined", "ho_phantom", "ho_blended")


def _weight_start(model: RamModel, S: np.ndarray, theta: np.ndarray, given=None,
                  cap: float = 1e3):
    """Overwrite starts of weight-carrying parameters.

    ``S`` is the component covariance matrix the start should reproduce.
    Each construction is reached through ``v``, the weights on the model's
    own composite scale: loadings of the composite are ``S v / v'S v``, which
    keeps it uncorrelated with its excrescent variables.  Returns ``theta``,
    whether every composite received weights, and per composite the factor
    by which ``v`` rescales the given weights.
    """
    obs = {x: i for i, x in enumerate(model.observed_order)}
    infos = [c for c in model.composites.values()
             if c.spec in HO_SPECS and all(x in obs for x in c.components)]
    complete = len(infos) == len(model.composites)
    if given is None:
        infos = [c for c in infos if c.weight_mode == "free"]
        ws = provisional_weights(S, [[obs[x] for x in c.components] for c in infos])
    else:
        complete = complete and all(c.name in given for c in infos)
        infos = [c for c in infos if c.name in given]
        ws = [np.asarray(given[c.name], dtype=float) for c in infos]
    scales = {}
    if not infos:
        return theta, False, scales
    pos = {lab: k for k, lab in enumerate(model.labels)}
    free_a, fixed_a = {}, {}
    for cell in model.cells:
        if cell.matrix != "A":
            continue
        if cell.free:
            free_a[(cell.row, cell.col)] = cell.label
        else:
            fixed_a[(cell.row, cell.col)] = cell.value

    def put(key, v):
        lab = free_a.get(key)
        if lab is not None and lab in pos:
            theta[pos[lab]] = float(np.clip(v, -cap, cap)) if np.isfinite(v) else np.sign(v) * cap

    def ratio(a, b):
        return a / b if b != 0 else np.sign(a) * np.inf

    for info, w in zip(infos, ws):
        comps, eta = list(info.components), info.name
        idx = [obs[c] for c in comps]
        Sb = S[np.ix_(idx, idx)]
        v = np.array(w, dtype=float)
        if info.weight_mode == "free":
            if info.spec == "ho_phantom":
                anchor = next((c for c in comps if (c, f"p_{c}") in fixed_a), None)
            else:
                anchor = next((c for c in comps if (c, eta) in fixed_a), None)
            if anchor is None or abs(v[comps.index(anchor)]) < 1e-12:
                complete = False
                continue
            v = v / v[comps.index(anchor)]
            if info.spec in ("ho_original", "ho_refined"):
                # refined fixes the anchor loading instead of the anchor weight
                v = v * (Sb @ v)[comps.index(anchor)] / (v @ Sb @ v)
        q = v @ Sb @ v
        if not q > 0:
            complete = False
            continue
        big = int(np.argmax(np.abs(w)))
        scales[eta] = v[big] / w[big]
        lam = Sb @ v / q
        r = dict(zip(comps, v))
        for j, c in enumerate(comps):
            if info.spec == "ho_phantom":
                put((c, f"p_{c}"), ratio(1.0, v[j]))
                put((f"p_{c}", eta), v[j] * lam[j])
            else:
                put((c, eta), lam[j])
            if info.spec == "ho_blended":
                pseudo = next((x for x in comps if (x, eta) in fixed_a), None)
                if pseudo is not None:
                    put((f"p_{eta}", c), ratio(v[j], r[pseudo]))
        if info.spec == "ho_original":
            if not _original_start(info, comps, Sb - q * np.outer(lam, lam), fixed_a, put):
                complete = False
        elif info.spec == "ho_refined":
            # excrescent columns are orthogonal to the weights: solve for the
            # free loading on the component with the largest weight
            for nu in info.helpers:
                rows = [c for c in comps if (c, nu) in free_a or (c, nu) in fixed_a]
                free = [c for c in rows if (c, nu) in free_a]
                if not free:
                    continue
                pivot = max(free, key=lambda c: abs(r[c]))
                rest = sum(r[c] * (fixed_a[(c, nu)] if (c, nu) in fixed_a
                                   else theta[pos[free_a[(c, nu)]]])
                           for c in rows if c != pivot)
                put((pivot, nu), ratio(-rest, r[pivot]))
    return theta, complete, scales


def _original_start(info, comps, R, fixed_a, put) -> bool:
    """Excrescent loadings of the original construction from ``R = L D L'``.

    Its excrescent variables are uncorrelated and cascade over the components
    in anchor-first order, so the residual covariance ``R`` of the components
    factors as a unit lower-triangular ``L``; each column is rescaled to the
    fixed unit loading one row below its diagonal.
    """
    eta = info.name
    anchor = next((c for c in comps if (c, eta) in fixed_a), None)
    if anchor is None:
        return False
    order = [anchor] + [c for c in comps if c != anchor]
    perm = [comps.index(c) for c in order]
    R = R[np.ix_(perm, perm)]
    k = len(order)
    L = np.eye(k)
    D = np.zeros(k)
    for j in range(k - 1):
        D[j] = R[j, j] - np.sum(L[j, :j] ** 2 * D[:j])
        if abs(D[j]) < 1e-12:
            return False
        for i in range(j + 1, k):
            L[i, j] = (R[i, j] - np.sum(L[i, :j] * L[j, :j] * D[:j])) / D[j]
    for j, nu in enumerate(info.helpers):
        if abs(L[j + 1, j]) < 1e-12:
            return False
        for i in range(j, k):
            put((order[i], nu), L[i, j] / L[j + 1, j])
    return True


def _latent_start(model: RamModel, sigma: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Covariance parameters that reproduce ``sigma`` given the loadings in ``theta``.

    Composites, excrescent variables and observed non-components are linear
    functions of the components; their covariances follow from the inverted
    loading blocks, and disturbance (co)variances from removing the paths.
    """
    try:
        B = model.total_effects(theta)
    except SingularStructure:
        return theta
    obs = list(model.observed_order)
    z, rows = [], []
    in_block = set()
    for info in model.composites.values():
        try:
            W = np.linalg.inv(model.loading_block(info.name, B=B))
        except np.linalg.LinAlgError:
            return theta
        cols = [obs.index(c) for c in info.components]
        in_block.update(info.components)
        for k, name in enumerate((info.name,) + tuple(info.helpers)):
            row = np.zeros(len(obs))
            row[cols] = W[k]
            z.append(name)
            rows.append(row)
    for j, x in enumerate(obs):
        if x not in in_block:
            row = np.zeros(len(obs))
            row[j] = 1.0
            z.append(x)
            rows.append(row)
    Wz = np.array(rows)
    C = Wz @ sigma @ Wz.T
    A, _ = model.matrices(theta)
    iz = [model.index[n] for n in z]
    Az = A[np.ix_(iz, iz)]
    M = np.eye(len(z)) - Az
    Sz = M @ C @ M.T
    where = {n: i for i, n in enumerate(z)}
    pos = {lab: k for k, lab in enumerate(model.labels)}
    for cell in model.cells:
        if cell.matrix == "S" and cell.free and cell.row in where and cell.col in where:
            theta[pos[cell.label]] = Sz[where[cell.row], where[cell.col]]
    return theta


# ---------------------------------------------------------------------------
# estimation


def estimate(model: RamModel, moments: SampleMoments,
             settings: EstimationSettings | None = None) -> FitResult:
    """Fit ``model`` to ``moments`` by maximum likelihood.

    Raises
    ------
    NotConverged
        when the optimizer fails from the deterministic starts and from
        ``jitter_retries`` jittered restarts.  Free-weight models get a
        second deterministic start from provisional weights; the converged
        run with the lower discrepancy is kept.
    SingularInformation
        when the information matrix at the solution is singular.
    """
    settings = settings or EstimationSettings()
    moments = _aligned(model, moments)
    if model.df < 0:
        raise NegativeDF(f"model has {model.n_free} free parameters but only "
                         f"{model.n_observed * (model.n_observed + 1) // 2} moments")
    S, d = moments.scaled(settings.divisor_convention)
    obj = _Objective(model, S)
    phi0 = starting_values(model, moments, settings.start_override)
    starts = [phi0]
    # a start mapped from the blended solution is trusted: its minimum was
    # already chosen among several starts
    n_try = 1
    if settings.weight_start:
        ref = _reference_weights(model, moments, settings)
        phi_w = starting_values(model, moments, settings.start_override,
                                "provisional" if ref is None else ref)
        if not np.array_equal(phi_w, phi0):
            if ref is None:
                starts.append(phi_w)
            else:
                starts.insert(0, phi_w)
        n_try = 1 if ref is not None else len(starts)
    rng = np.random.default_rng(settings.seed)

    best = None
    attempts = 0
    for attempt in range(len(starts) + settings.jitter_retries):
        if attempt >= n_try and best is not None and best.converged:
            break
        attempts = attempt
        start = starts[attempt] if attempt < len(starts) else _jitter(phi0, rng)
        if phi0.size == 0:
            best = _OptResult(phi0, obj.f(phi0), np.zeros(0), 0, True, [obj.f(phi0)], "no free parameters")
            break
        try:
            h0 = obj.expected_hessian(start)
        except (np.linalg.LinAlgError, SingularStructure):
            h0 = None
        res = bfgs(obj.f, obj.grad, start, h0, settings.max_iterations, settings.grad_tol,
                   settings.f_tol, reset_hessian=lambda x: _try(obj.expected_hessian, x))
        # a converged result beats any unconverged one, then lower F wins
        if best is None or (res.converged, -_finite(res.f)) > (best.converged, -_finite(best.f)):
            best = res
        if not res.converged:
            log.info("attempt %d did not converge: %s", attempt, res.message)
    if best is None or not best.converged:
        gn = float(np.max(np.abs(best.g), initial=0.0)) if best is not None else np.nan
        raise NotConverged(
            f"no convergence after {attempts + 1} attempts ({best.message if best else ''}; "
            f"max |gradient| = {gn:.3g})",
            iterations=best.iterations if best else None, gradient_norm=gn)

    phi = _polish(obj, best)
    theta = model.reduction.expand(phi)
    if phi.size:
        H_exp = obj.expected_hessian(phi)
        _check_information(H_exp, model)
        H = H_exp if settings.information == "expected" else obj.observed_hessian(phi)
        try:
            vcov_free = 2.0 * np.linalg.inv(H) / d
        except np.linalg.LinAlgError as exc:
            raise SingularInformation("information matrix is singular") from exc
        vcov_free = 0.5 * (vcov_free + vcov_free.T)
    else:
        vcov_free = np.zeros((0, 0))
    T = model.reduction.T
    vcov = T @ vcov_free @ T.T
    se = {lab: float(np.sqrt(max(vcov[k, k], 0.0))) for k, lab in enumerate(model.labels)}
    result = FitResult(
        model=model,
        moments=moments,
        settings=settings,
        phi=phi,
        theta=theta,
        theta_hat=dict(zip(model.labels, map(float, theta))),
        se=se,
        vcov=vcov,
        vcov_free=vcov_free,
        fmin=float(best.f),
        converged=True,
        iterations=best.iterations,
        gradient=best.g,
        sigma_hat=implied_covariance(model, theta),
        restarts=attempts,
        objective_trace=list(best.trace),
    )
    result.derived = derived_all(result)
    result.fit = fitmetrics.fit_statistics(result)
    result.standardized = fitmetrics.standardize(result, model)
    return result


def _polish(obj: _Objective, res: _OptResult, steps: int = 10) -> np.ndarray:
    """Newton steps after convergence while the gradient shrinks.

    Fisher scoring is tried first; the observed Hessian takes over where
    scoring stalls, which happens for misfitting models.
    """
    x, fx, g = res.x, res.f, res.g
    for _ in range(steps):
        gmax = np.max(np.abs(g), initial=0.0)
        if gmax < 1e-12:
            break
        step = None
        for hess in (obj.expected_hessian, obj.observed_hessian):
            H = _try(hess, x)
            if H is None:
                continue
            try:
                xn = x - np.linalg.solve(H, g)
            except np.linalg.LinAlgError:
                continue
            fn = obj.f(xn)
            # near the optimum F only moves at rounding level
            if not (np.isfinite(fn) and fn <= fx + 1e-13 * max(1.0, abs(fx))):
                continue
            gn = obj.grad(xn)
            if np.max(np.abs(gn)) < gmax:
                step = (xn, fn, gn)
                break
        if step is None:
            break
        x, fx, g = step
        res.trace.append(fx)
    res.x, res.f, res.g = x, fx, g
    return x


def _try(fn, x):
    try:
        return fn(x)
    except (np.linalg.LinAlgError, SingularStructure):
        return None


def _reference_start(model: RamModel, theta: np.ndarray, ref) -> np.ndarray:
    weights, sigma, paths = ref
    theta, complete, scales = _weight_start(model, sigma, theta, weights)
    # paths follow the composite scales, which differ between constructions
    pos = {lab: k for k, lab in enumerate(model.labels)}
    for cell in model.cells:
        if cell.matrix == "A" and cell.free and cell.label in paths:
            theta[pos[cell.label]] = (paths[cell.label] * scales.get(cell.row, 1.0)
                                      / scales.get(cell.col, 1.0))
    return _latent_start(model, sigma, theta) if complete else theta


def _reference_weights(model: RamModel, moments: SampleMoments, settings):
    """Solution of the blended counterpart of a component-level model.

    The blended construction carries weight ratios as plain parameters, so it
    reaches zero and negative weights without passing through a singular
    point; the other constructions start from its solution.  Returns the
    weights per composite, the implied component covariance matrix in the
    model's observed order, and the structural path estimates.
    """
    src = model.source
    if src is None:
        return None
    blocks, structural = src
    if not any(b.is_free and b.spec in ("ho_original", "ho_refined", "ho_phantom")
               for b in blocks):
        return None
    from .builders import build_ho_blended

    try:
        twin = build_ho_blended(blocks, structural)
        res = estimate(twin, moments, replace(settings, start_override=None))
    except CsemError:
        return None
    weights = {b.name: [res.value(f"w.{c}") for c in b.components] for b in blocks}
    order = [twin.observed_order.index(x) for x in model.observed_order]
    sigma = res.sigma_hat[np.ix_(order, order)]
    paths = {c.label: res.theta_hat[c.label] for c in twin.cells
             if c.matrix == "A" and c.free and c.role == "path"}
    return weights, sigma, paths


def _finite(f):
    return float(f) if np.isfinite(f) else np.inf


def _jitter(phi0, rng):
    u = rng.uniform(-0.2, 0.2, size=phi0.shape)
    return np.where(phi0 != 0.0, phi0 * (1.0 + u), 0.5 * u)


def _check_information(H, model, rcond: float = 1e-12):
    # scaling by the diagonal makes the test independent of parameter units
    d = np.sqrt(np.abs(np.diag(H)))
    if np.any(d == 0):
        raise SingularInformation("information matrix has a zero row: a parameter has no "
                                  "influence on the implied covariance")
    w = np.linalg.eigvalsh(H / np.outer(d, d))
    if w.size and (w.max() <= 0 or w.min() <= rcond * w.max()):
        raise SingularInformation(
            "information matrix is singular at the solution: the model is not identified "
            f"(smallest/largest eigenvalue {w.min():.3g}/{w.max():.3g}; "
            "an isolated free-weight composite or free weights under mimic transmission "
            "are typical causes)")


# ---------------------------------------------------------------------------
# derived quantities


def _derived_function(model: RamModel, quantities):
    def func(phi):
        theta = model.reduction.expand(phi)
        return np.array([evaluate_derived(model, theta, q) for q in quantities])

    return func


def delta_method(result: FitResult, model: RamModel, q) -> tuple:
    """Estimate and delta-method SE of a derived quantity at the optimum.

    The gradient is a central difference with step ``1e-6 * max(1, |phi_i|)``
    over the reduced parameters.  The SE is None when ``q`` does not depend
    on any free parameter.
    """
    if not isinstance(q, DerivedQuantity):
        q = DerivedQuantity("q", q)
    try:
        est, se, _ = delta_se(_derived_function(model, [q]), result.phi, result.vcov_free)
    except UndefinedDerived as exc:
        raise UndefinedDerived(f"{q.name} is undefined at the optimum: {exc}") from exc
    s = float(se[0])
    return float(est[0]), (None if np.isnan(s) else s)


def derived_all(result: FitResult) -> dict:
    model = result.model
    out = {}
    for q in model.derived:
        try:
            out[q.name] = delta_method(result, model, q)
        except UndefinedDerived:
            out[q.name] = (float("nan"), None)
    return out
