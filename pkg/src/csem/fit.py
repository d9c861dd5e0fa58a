"""Fit statistics, R-squared and the standardized solution."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NegativeDF, ZeroVariance
from .numdiff import delta_se
from .ram import evaluate_all


@dataclass(frozen=True)
class FitStatistics:
    chisq: float
    df: int
    rmsea: float
    srmr: float
    aic: float
    bic: float
    loglik: float
    n_params: int
    r_squared: dict = field(default_factory=dict)
    rmsea_undefined: bool = False

    def as_dict(self) -> dict:
        return {
            "chisq": self.chisq,
            "df": self.df,
            "rmsea": self.rmsea,
            "srmr": self.srmr,
            "aic": self.aic,
            "bic": self.bic,
            "loglik": self.loglik,
            "n_params": self.n_params,
            "r_squared": dict(self.r_squared),
        }


def degrees_of_freedom(p: int, n_params: int) -> int:
    df = p * (p + 1) // 2 - n_params
    if df < 0:
        raise NegativeDF(f"{n_params} free parameters exceed {p * (p + 1) // 2} moments")
    return df


def chi_square(f_min: float, d: float, p: int, n_params: int) -> tuple:
    """``(d * F_min, df)``; ``d`` is n or n - 1 depending on the divisor convention."""
    if f_min < 0:
        if f_min < -1e-10:
            raise ValueError("F_min must be nonnegative")
        f_min = 0.0
    return d * f_min, degrees_of_freedom(p, n_params)


def rmsea(chisq: float, df: int, d: float) -> float:
    if df == 0:
        return 0.0
    return math.sqrt(max(chisq - df, 0.0) / (df * d))


def srmr(S, Sigma_hat) -> float:
    S = np.asarray(S, dtype=float)
    Sigma_hat = np.asarray(Sigma_hat, dtype=float)
    sd = np.sqrt(np.diag(S))
    R = (S - Sigma_hat) / np.outer(sd, sd)
    il = np.tril_indices(S.shape[0])
    return float(np.sqrt(np.mean(R[il] ** 2)))


def loglik(S, Sigma_hat, d: float) -> float:
    p = S.shape[0]
    _, ld = np.linalg.slogdet(Sigma_hat)
    tr = np.trace(np.linalg.solve(Sigma_hat, S))
    return -0.5 * d * (p * math.log(2 * math.pi) + ld + tr)


def information_criteria(loglik: float, n_params: int, n: int) -> tuple:
    aic = -2.0 * loglik + 2.0 * n_params
    bic = -2.0 * loglik + n_params * math.log(n)
    return aic, bic


def r_squared(model, theta, endogenous: str):
    """``1 - var(disturbance) / implied var``; None for composites formed by their components."""
    info = model.composites.get(endogenous)
    if info is not None and info.spec == "one_step_modified":
        return None
    _, S, _, C = model.moments(theta)
    i = model.index[endogenous]
    if C[i, i] <= 0:
        raise ZeroVariance(f"{endogenous} has zero implied variance")
    return float(1.0 - S[i, i] / C[i, i])


def fit_statistics(result) -> FitStatistics:
    model = result.model
    S, d = result.moments.scaled(result.settings.divisor_convention)
    p = model.n_observed
    q = model.n_free
    chisq, df = chi_square(result.fmin, d, p, q)
    ll = loglik(S, result.sigma_hat, d)
    aic, bic = information_criteria(ll, q, result.moments.n)
    r2 = {}
    for v in model.meta.get("endogenous", []):
        r2[v] = r_squared(model, result.theta, v)
    return FitStatistics(
        chisq=chisq,
        df=df,
        rmsea=rmsea(chisq, df, d),
        srmr=srmr(S, result.sigma_hat),
        aic=aic,
        bic=bic,
        loglik=ll,
        n_params=q,
        r_squared=r2,
        rmsea_undefined=(df == 0),
    )


# ---------------------------------------------------------------------------
# standardized solution


def _standardizable(model):
    """Free cells (one entry per cell) plus derived indirect effects."""
    items = []
    for cell in model.cells:
        if not cell.free:
            continue
        if cell.matrix == "A":
            items.append((f"{cell.row}~{cell.col}", "A", cell.row, cell.col))
        elif cell.row != cell.col:
            items.append((f"{cell.row}~~{cell.col}", "S", cell.row, cell.col))
    names = {it[0] for it in items}
    for q in model.derived:
        if q.kind == "indirect" and q.name not in names:
            o, p = q.name.split("~", 1)
            items.append((q.name, "D", o, p))
    return items


def _std_values(model, items, theta):
    A, S, _, C = model.moments(theta)
    var = np.diag(C)
    derived = None
    out = np.empty(len(items))
    for k, (name, kind, a, b) in enumerate(items):
        ia, ib = model.index[a], model.index[b]
        if var[ia] <= 0 or var[ib] <= 0:
            raise ZeroVariance(f"cannot standardize {name}: zero implied variance")
        if kind == "A":
            out[k] = A[ia, ib] * math.sqrt(var[ib] / var[ia])
        elif kind == "S":
            out[k] = S[ia, ib] / math.sqrt(var[ia] * var[ib])
        else:
            if derived is None:
                derived = evaluate_all(model, theta,
                                       [q for q in model.derived if q.kind == "indirect"])
            out[k] = derived[name] * math.sqrt(var[ib] / var[ia])
    return out


def standardize(result, model=None) -> dict:
    """Standardized estimates with delta-method SEs.

    Paths are rescaled by the implied standard deviations of source and
    target; covariances become correlations.  Returns ``name -> (est, se)``.
    """
    model = model or result.model
    items = _standardizable(model)
    if not items:
        return {}

    def func(phi):
        return _std_values(model, items, model.reduction.expand(phi))

    est, se, _ = delta_se(func, result.phi, result.vcov_free)
    return {
        name: (float(e), None if np.isnan(s) else float(s))
        for (name, *_), e, s in zip(items, est, se)
    }
