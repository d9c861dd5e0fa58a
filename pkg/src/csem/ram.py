"""
Reticular action model (RAM) representation.

Every composite specification compiles into a :class:`RamModel`: an
asymmetric path matrix ``A`` (``A[i, j]`` is the effect of variable ``j`` on
variable ``i``), a symmetric matrix ``S`` of variances/covariances of the
exogenous parts, and a filter selecting the observed variables.  The
model-implied covariance matrix of the observed variables is

    Sigma = F (I - A)^-1 S (I - A)^-T F'.

Free parameters are identified by labels; cells sharing a label are equal.
Linear equality constraints between labels are removed by pivot
substitution, so the optimizer works on an unconstrained reduced vector
``phi`` with ``theta = T @ phi + t0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    DivisionByZero,
    ModelSpecificationError,
    RankDeficientConstraints,
    SingularBlock,
    SingularStructure,
)

OBSERVED = "observed"
LATENT = "latent"

#: reciprocal condition number below which (I - A) or a loading block is singular
RCOND_MIN = 1e-12


@dataclass(frozen=True)
class Variable:
    name: str
    kind: str = OBSERVED

    def __post_init__(self):
        if self.kind not in (OBSERVED, LATENT):
            raise ValueError(f"unknown variable kind {self.kind!r}")


@dataclass(frozen=True)
class ParameterCell:
    """One entry of ``A`` or ``S``.

    ``role`` is a hint for starting values (``loading``, ``excrescent``,
    ``phantom``, ``ratio``, ``path``, ``variance``, ``covariance``,
    ``loading_sum``).
    """

    matrix: str
    row: str
    col: str
    value: float = 0.0
    free: bool = False
    label: str | None = None
    role: str = ""

    def __post_init__(self):
        if self.matrix not in ("A", "S"):
            raise ValueError(f"matrix must be 'A' or 'S', got {self.matrix!r}")

    @property
    def key(self):
        if self.matrix == "S":
            a, b = sorted((self.row, self.col))
            return ("S", a, b)
        return ("A", self.row, self.col)


@dataclass(frozen=True)
class LinearConstraint:
    """``sum(coef * label) == rhs``."""

    terms: tuple
    rhs: float

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple((str(l), float(c)) for l, c in self.terms))
        if len(self.terms) < 2:
            raise ValueError("a linear constraint needs at least two terms")

    def residual(self, values: Mapping[str, float]) -> float:
        return sum(c * values[l] for l, c in self.terms) - self.rhs


# ---------------------------------------------------------------------------
# derived-quantity expressions


class Expr:
    """Small arithmetic expression tree over parameter labels."""

    def evaluate(self, ctx: "_EvalContext") -> float:
        raise NotImplementedError

    def labels(self) -> set:
        return set()

    def __add__(self, other):
        return BinOp("+", self, _wrap(other))

    def __radd__(self, other):
        return BinOp("+", _wrap(other), self)

    def __sub__(self, other):
        return BinOp("-", self, _wrap(other))

    def __rsub__(self, other):
        return BinOp("-", _wrap(other), self)

    def __mul__(self, other):
        return BinOp("*", self, _wrap(other))

    def __rmul__(self, other):
        return BinOp("*", _wrap(other), self)

    def __truediv__(self, other):
        return BinOp("/", self, _wrap(other))

    def __rtruediv__(self, other):
        return BinOp("/", _wrap(other), self)

    def __neg__(self):
        return BinOp("*", Const(-1.0), self)


def _wrap(x):
    return x if isinstance(x, Expr) else Const(float(x))


@dataclass(frozen=True, eq=True)
class Const(Expr):
    value: float

    def evaluate(self, ctx):
        return self.value

    def __str__(self):
        return repr(self.value)


@dataclass(frozen=True, eq=True)
class Label(Expr):
    name: str

    def evaluate(self, ctx):
        return ctx.label_value(self.name)

    def labels(self):
        return {self.name}

    def __str__(self):
        return f"[{self.name}]"


@dataclass(frozen=True, eq=True)
class BinOp(Expr):
    op: str
    left: Expr
    right: Expr

    def evaluate(self, ctx):
        a = self.left.evaluate(ctx)
        b = self.right.evaluate(ctx)
        if self.op == "+":
            return a + b
        if self.op == "-":
            return a - b
        if self.op == "*":
            return a * b
        if b == 0.0:
            raise DivisionByZero(f"division by zero in {self}")
        return a / b

    def labels(self):
        return self.left.labels() | self.right.labels()

    def __str__(self):
        return f"({self.left} {self.op} {self.right})"


def recip(x) -> Expr:
    return BinOp("/", Const(1.0), _wrap(x))


@dataclass(frozen=True, eq=True)
class BlockInverse(Expr):
    """Entry ``(i, j)`` of the inverse of a composite's loading block.

    The loading block of a composite is the matrix of total effects of
    ``(composite, *helpers)`` on its components; the first row of its
    inverse holds the composite's weights.
    """

    block: str
    i: int
    j: int

    def evaluate(self, ctx):
        return ctx.block_inverse(self.block)[self.i, self.j]

    def __str__(self):
        return f"inv({self.block})[{self.i},{self.j}]"


@dataclass(frozen=True)
class DerivedQuantity:
    name: str
    expression: Expr
    kind: str = ""

    def __post_init__(self):
        object.__setattr__(self, "expression", _wrap(self.expression))


@dataclass(frozen=True)
class CompositeInfo:
    """Bookkeeping for one composite inside a RAM model."""

    name: str
    components: tuple
    helpers: tuple = ()
    spec: str = ""
    weight_mode: str = ""


# ---------------------------------------------------------------------------
# constraint reduction


@dataclass(frozen=True)
class Reduction:
    """Affine map from the reduced free vector to full label values."""

    labels: tuple
    free: tuple
    T: np.ndarray
    t0: np.ndarray
    pivots: tuple

    @property
    def n_free(self) -> int:
        return len(self.free)

    def expand(self, phi) -> np.ndarray:
        return self.T @ np.asarray(phi, dtype=float) + self.t0

    def project(self, theta) -> np.ndarray:
        """Reduced coordinates of a full label vector (free labels are kept verbatim)."""
        theta = np.asarray(theta, dtype=float)
        idx = [self.labels.index(f) for f in self.free]
        return theta[idx]


def _reduce(labels: Sequence[str], fixed_labels: Mapping[str, float],
            constraints: Sequence[LinearConstraint], tol: float = 1e-10) -> Reduction:
    """Pivot substitution, last-declared label of each constraint is the pivot."""
    n = len(labels)
    pos = {l: i for i, l in enumerate(labels)}
    # each label value expressed as coef @ theta_free_candidates + const
    rows = {l: (np.eye(n)[i], 0.0) for i, l in enumerate(labels)}
    eliminated = []
    for con in constraints:
        coef = np.zeros(n)
        const = 0.0
        for lab, c in con.terms:
            if lab in rows:
                r, k = rows[lab]
                coef += c * r
                const += c * k
            elif lab in fixed_labels:
                const += c * fixed_labels[lab]
            else:
                raise RankDeficientConstraints(f"constraint references unknown label {lab!r}")
        rhs = con.rhs - const
        scale = max(1.0, np.abs(coef).max(initial=0.0))
        # pivot: last-declared label in the constraint still carrying weight
        pivot = None
        for lab, _ in reversed(con.terms):
            if lab in pos and pos[lab] not in eliminated and abs(coef[pos[lab]]) > tol * scale:
                pivot = pos[lab]
                break
        if pivot is None:
            cand = [i for i in range(n) if i not in eliminated and abs(coef[i]) > tol * scale]
            pivot = cand[-1] if cand else None
        if pivot is None:
            kind = "dependent" if abs(rhs) <= tol * max(1.0, abs(con.rhs)) else "contradictory"
            raise RankDeficientConstraints(f"{kind} constraint: {con}")
        cp = coef[pivot]
        # theta_pivot = (rhs - sum_{j != pivot} coef_j theta_j) / cp
        sub = -coef / cp
        sub[pivot] = 0.0
        sub_const = rhs / cp
        for lab, (r, k) in list(rows.items()):
            w = r[pivot]
            if w != 0.0:
                rows[lab] = (r + w * sub - w * np.eye(n)[pivot], k + w * sub_const)
        eliminated.append(pivot)
    free_idx = [i for i in range(n) if i not in eliminated]
    T = np.zeros((n, len(free_idx)))
    t0 = np.zeros(n)
    for lab, (r, k) in rows.items():
        i = pos[lab]
        T[i] = r[free_idx]
        t0[i] = k
    return Reduction(
        labels=tuple(labels),
        free=tuple(labels[i] for i in free_idx),
        T=T,
        t0=t0,
        pivots=tuple(labels[i] for i in eliminated),
    )


# ---------------------------------------------------------------------------
# the model


class RamModel:
    """Immutable RAM model.

    Parameters
    ----------
    variables : sequence of Variable
        All variables in declaration order.
    cells : sequence of ParameterCell
        Nonzero or free entries of ``A`` and ``S``. Unlisted cells are fixed at 0.
    constraints : sequence of LinearConstraint
    observed_order : sequence of str, optional
        Row/column order of the implied covariance matrix. Defaults to the
        observed variables in declaration order.
    derived : sequence of DerivedQuantity
    composites : sequence of CompositeInfo
    meta : mapping
        Free-form notes recorded in the model dump.
    """

    def __init__(self, variables, cells, constraints=(), observed_order=None,
                 derived=(), composites=(), meta=None):
        self.variables = tuple(variables)
        names = [v.name for v in self.variables]
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise ModelSpecificationError(f"duplicate variable names: {dup}")
        self.index = {n: i for i, n in enumerate(names)}
        self.kinds = {v.name: v.kind for v in self.variables}
        if observed_order is None:
            observed_order = [v.name for v in self.variables if v.kind == OBSERVED]
        self.observed_order = tuple(observed_order)
        for o in self.observed_order:
            if self.kinds.get(o) != OBSERVED:
                raise ModelSpecificationError(f"{o!r} is not an observed variable")
        self.constraints = tuple(constraints)
        self.derived = tuple(derived)
        self.composites = {c.name: c for c in composites}
        self.meta = dict(meta or {})
        # (blocks, structural) a builder made this model from; not serialized
        self.source = None

        seen = {}
        for cell in cells:
            for v in (cell.row, cell.col):
                if v not in self.index:
                    raise ModelSpecificationError(f"cell references unknown variable {v!r}")
            if cell.matrix == "A" and cell.row == cell.col:
                raise ModelSpecificationError(f"A diagonal must be fixed at 0 ({cell.row})")
            if cell.key in seen:
                raise ModelSpecificationError(f"duplicate cell {cell.key}")
            seen[cell.key] = cell
        self.cells = tuple(seen.values())

        labels = []
        fixed_labels = {}
        for i, cell in enumerate(self.cells):
            if cell.free and cell.label is None:
                cell = ParameterCell(cell.matrix, cell.row, cell.col, cell.value, True,
                                     _auto_label(cell), cell.role)
                self.cells = self.cells[:i] + (cell,) + self.cells[i + 1:]
            if cell.label is None:
                continue
            if cell.free:
                if cell.label in fixed_labels:
                    raise ModelSpecificationError(f"label {cell.label!r} is both fixed and free")
                if cell.label not in labels:
                    labels.append(cell.label)
            else:
                if cell.label in labels:
                    raise ModelSpecificationError(f"label {cell.label!r} is both fixed and free")
                if cell.label in fixed_labels and fixed_labels[cell.label] != cell.value:
                    raise ModelSpecificationError(f"fixed label {cell.label!r} has two values")
                fixed_labels[cell.label] = cell.value
        self.labels = tuple(labels)
        self.fixed_labels = dict(fixed_labels)

        m = len(self.variables)
        self._A0 = np.zeros((m, m))
        self._S0 = np.zeros((m, m))
        a_pos = {l: ([], []) for l in self.labels}
        s_pos = {l: ([], []) for l in self.labels}
        for cell in self.cells:
            r, c = self.index[cell.row], self.index[cell.col]
            if cell.free:
                pos = a_pos if cell.matrix == "A" else s_pos
                pos[cell.label][0].append(r)
                pos[cell.label][1].append(c)
            elif cell.matrix == "A":
                self._A0[r, c] = cell.value
            else:
                self._S0[r, c] = self._S0[c, r] = cell.value
        self._a_pos = {l: (np.array(v[0], int), np.array(v[1], int)) for l, v in a_pos.items()}
        self._s_pos = {l: (np.array(v[0], int), np.array(v[1], int)) for l, v in s_pos.items()}
        # flat scatter indices for filling A and S in one step
        k_of = {l: k for k, l in enumerate(self.labels)}
        a_flat = [(r, c, k_of[l]) for l, (rs, cs) in self._a_pos.items() for r, c in zip(rs, cs)]
        s_flat = [(r, c, k_of[l]) for l, (rs, cs) in self._s_pos.items() for r, c in zip(rs, cs)]
        s_flat += [(c, r, k) for r, c, k in s_flat if r != c]
        self._a_idx = tuple(np.array(v, int).reshape(-1) for v in zip(*a_flat)) if a_flat else None
        self._s_idx = tuple(np.array(v, int).reshape(-1) for v in zip(*s_flat)) if s_flat else None
        self._obs_idx = np.array([self.index[o] for o in self.observed_order], int)
        self._A0.flags.writeable = False
        self._S0.flags.writeable = False

        self.reduction = _reduce(self.labels, self.fixed_labels, self.constraints)
        for q in self.derived:
            unknown = q.expression.labels() - set(self.labels) - set(self.fixed_labels)
            if unknown:
                raise ModelSpecificationError(
                    f"derived quantity {q.name!r} references unknown labels {sorted(unknown)}")
        self._cells_by_label = {}
        for cell in self.cells:
            if cell.label is not None:
                self._cells_by_label.setdefault(cell.label, []).append(cell)

    # -- basic accessors -------------------------------------------------
    @property
    def n_labels(self) -> int:
        return len(self.labels)

    @property
    def n_free(self) -> int:
        return self.reduction.n_free

    @property
    def n_observed(self) -> int:
        return len(self.observed_order)

    @property
    def df(self) -> int:
        p = self.n_observed
        return p * (p + 1) // 2 - self.n_free

    def cells_for(self, label: str) -> list:
        return list(self._cells_by_label.get(label, ()))

    def derived_by_name(self, name: str) -> DerivedQuantity:
        for q in self.derived:
            if q.name == name:
                return q
        raise KeyError(name)

    def expand(self, phi) -> np.ndarray:
        return self.reduction.expand(phi)

    # -- matrices --------------------------------------------------------
    def matrices(self, theta):
        """Return ``(A, S)`` filled with the label values ``theta``."""
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_labels,):
            raise ValueError(f"expected {self.n_labels} label values, got shape {theta.shape}")
        A = self._A0.copy()
        S = self._S0.copy()
        if self._a_idx is not None:
            r, c, k = self._a_idx
            A[r, c] = theta[k]
        if self._s_idx is not None:
            r, c, k = self._s_idx
            S[r, c] = theta[k]
        return A, S

    def total_effects(self, theta) -> np.ndarray:
        """``B = (I - A)^-1``, raising SingularStructure when ill-conditioned."""
        A, _ = self.matrices(theta)
        return _inv_i_minus_a(A)

    def moments(self, theta):
        """Return ``(A, S, B, C)`` with ``C`` the implied covariance of all variables."""
        A, S = self.matrices(theta)
        B = _inv_i_minus_a(A)
        C = B @ S @ B.T
        C = 0.5 * (C + C.T)
        return A, S, B, C

    def label_values(self, theta) -> dict:
        out = dict(self.fixed_labels)
        out.update(zip(self.labels, np.asarray(theta, dtype=float)))
        return out

    def loading_block(self, composite: str, theta=None, B=None) -> np.ndarray:
        """Total effects of ``(composite, *helpers)`` on the composite's components."""
        info = self.composites[composite]
        if B is None:
            B = self.total_effects(theta)
        rows = [self.index[c] for c in info.components]
        cols = [self.index[c] for c in (info.name,) + tuple(info.helpers)]
        return B[np.ix_(rows, cols)]

    # -- serialization ---------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "variables": [{"name": v.name, "kind": v.kind} for v in self.variables],
            "observed_order": list(self.observed_order),
            "cells": [
                {"matrix": c.matrix, "row": c.row, "col": c.col, "value": c.value,
                 "free": c.free, "label": c.label}
                for c in self.cells
            ],
            "constraints": [
                {"terms": [[l, c] for l, c in con.terms], "rhs": con.rhs}
                for con in self.constraints
            ],
            "derived": [{"name": q.name, "expression": str(q.expression)} for q in self.derived],
            "composites": [
                {"name": c.name, "components": list(c.components), "helpers": list(c.helpers),
                 "spec": c.spec, "weight_mode": c.weight_mode}
                for c in self.composites.values()
            ],
            "n_free": self.n_free,
            "df": self.df,
            "meta": self.meta,
        }

    def __repr__(self):
        return (f"RamModel({len(self.variables)} variables, {self.n_observed} observed, "
                f"{self.n_free} free parameters, df={self.df})")


def _auto_label(cell: ParameterCell) -> str:
    if cell.matrix == "A":
        return f"{cell.row}~{cell.col}"
    return f"{cell.row}~~{cell.col}"


def _inv_i_minus_a(A: np.ndarray) -> np.ndarray:
    M = np.eye(A.shape[0]) - A
    try:
        B = np.linalg.inv(M)
    except np.linalg.LinAlgError as exc:
        raise SingularStructure("(I - A) is singular") from exc
    norm = np.abs(M).sum(axis=0).max() * np.abs(B).sum(axis=0).max()
    if not np.isfinite(norm) or 1.0 / norm < RCOND_MIN:
        raise SingularStructure("(I - A) is numerically singular")
    return B


def reduce_constraints(model: RamModel) -> Reduction:
    """Reduced parameterization of ``model`` (computed once at construction)."""
    return model.reduction


def implied_covariance(model: RamModel, theta) -> np.ndarray:
    """Model-implied covariance of the observed variables, in ``observed_order``."""
    _, _, _, C = model.moments(theta)
    idx = model._obs_idx
    return C[np.ix_(idx, idx)]


def sigma_jacobian(model: RamModel, theta):
    """Implied covariance and its derivatives with respect to each label.

    Returns
    -------
    Sigma : (p, p) array
    dSigma : (n_labels, p, p) array
    """
    A, S, B, C = model.moments(theta)
    idx = model._obs_idx
    Bo = B[idx]
    Co = C[:, idx]
    p = idx.size
    d = np.zeros((model.n_labels, p, p))
    if model._a_idx is not None:
        # dC = B E_rc C + C E_cr B'
        r, c, k = model._a_idx
        G = np.einsum("in,nj->nij", Bo[:, r], Co[c, :])
        np.add.at(d, k, G + G.transpose(0, 2, 1))
    if model._s_idx is not None:
        # off-diagonal cells are listed in both orientations
        r, c, k = model._s_idx
        np.add.at(d, k, np.einsum("in,jn->nij", Bo[:, r], Bo[:, c]))
    return C[np.ix_(idx, idx)], d


class _EvalContext:
    def __init__(self, model: RamModel, theta):
        self.model = model
        self.theta = np.asarray(theta, dtype=float)
        self.values = model.label_values(self.theta)
        self._B = None
        self._inv = {}

    def label_value(self, name):
        try:
            return self.values[name]
        except KeyError:
            raise KeyError(f"unknown label {name!r}") from None

    def block_inverse(self, block):
        if block not in self._inv:
            if self._B is None:
                self._B = self.model.total_effects(self.theta)
            L = self.model.loading_block(block, B=self._B)
            self._inv[block] = invert_block(L, block)
        return self._inv[block]


def invert_block(L: np.ndarray, name: str = "block") -> np.ndarray:
    """LU inverse of a square loading block; SingularBlock when rcond < 1e-12."""
    try:
        W = np.linalg.inv(L)
    except np.linalg.LinAlgError as exc:
        raise SingularBlock(f"loading block of {name} is singular") from exc
    norm = np.abs(L).sum(axis=0).max() * np.abs(W).sum(axis=0).max()
    if not np.isfinite(norm) or 1.0 / norm < RCOND_MIN:
        raise SingularBlock(f"loading block of {name} is numerically singular")
    return W


def evaluate_derived(model: RamModel, theta, q) -> float:
    """Evaluate a derived quantity (or bare expression) at label values ``theta``."""
    expr = q.expression if isinstance(q, DerivedQuantity) else _wrap(q)
    value = expr.evaluate(_EvalContext(model, theta))
    if not math.isfinite(value):
        raise DivisionByZero(f"derived quantity is not finite: {expr}")
    return float(value)


def evaluate_all(model: RamModel, theta, quantities: Iterable | None = None) -> dict:
    """Evaluate several derived quantities sharing one context."""
    ctx = _EvalContext(model, theta)
    qs = model.derived if quantities is None else quantities
    return {q.name: float(q.expression.evaluate(ctx)) for q in qs}
