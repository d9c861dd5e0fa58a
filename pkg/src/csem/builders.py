"""
Translate composite blocks plus a structural model into RAM models.

Each specification is a different way of writing the same composite
``eta = w'x`` into a covariance structure model:

``two_step``
    composite scores computed outside the model, then a path model on scores.
``one_step_modified``
    composites formed by components (zero disturbance); predictors of an
    outcome composite act on its components, composite-level effects are
    derived as indirect effects.
``pseudo_indicator``
    one component re-expressed as ``x_i = eta/w_i - sum_j (w_j/w_i) x_j``.
``ho_original`` / ``ho_refined``
    composite of interest plus excrescent variables spanning the component
    space, related to the components by a loading matrix.
``ho_phantom``
    refined specification on phantom variables ``p_i = x_i / l_i``, so the
    weights are the inverted phantom loadings.
``ho_blended``
    H-O extraction combined with a pseudo indicator; the weights (relative
    to the pseudo indicator's weight) are model parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .errors import (
    FreeWeightsOnOutcome,
    FreeWeightsUnsupported,
    IsolatedComposite,
    ModelSpecificationError,
    UnsupportedFixedValues,
    ZeroPseudoWeight,
    ZeroWeight,
)
from .ram import (
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
    recip,
)

SPECS = (
    "two_step",
    "one_step_modified",
    "pseudo_indicator",
    "ho_original",
    "ho_refined",
    "ho_phantom",
    "ho_blended",
)
WEIGHT_MODES = ("unit_sum", "average", "fixed", "free")
TRANSMISSIONS = ("full", "mimic_two_step")
HO_FAMILY = ("ho_original", "ho_refined", "ho_phantom", "ho_blended")
COMPONENT_SPECS = ("pseudo_indicator",) + HO_FAMILY


@dataclass(frozen=True)
class CompositeBlock:
    """Declarative description of one composite.

    ``pseudo`` names the pseudo indicator (pseudo-indicator and blended
    specifications) or the scale anchor of a free-weight composite; it
    defaults to the last component.
    """

    name: str
    components: tuple
    weights: str = "average"
    fixed_values: tuple | None = None
    spec: str = "ho_blended"
    transmission: str = "full"
    pseudo: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(self.components))
        if self.fixed_values is not None:
            object.__setattr__(self, "fixed_values", tuple(float(v) for v in self.fixed_values))
        if len(self.components) < 2:
            raise ModelSpecificationError(f"composite {self.name}: needs at least two components")
        if len(set(self.components)) != len(self.components):
            raise ModelSpecificationError(f"composite {self.name}: duplicate components")
        if self.weights not in WEIGHT_MODES:
            raise ModelSpecificationError(f"composite {self.name}: unknown weight mode {self.weights!r}")
        if self.spec not in SPECS:
            raise ModelSpecificationError(f"composite {self.name}: unknown specification {self.spec!r}")
        if self.transmission not in TRANSMISSIONS:
            raise ModelSpecificationError(
                f"composite {self.name}: unknown transmission {self.transmission!r}")
        if self.weights == "fixed":
            if self.fixed_values is None or len(self.fixed_values) != len(self.components):
                raise ModelSpecificationError(
                    f"composite {self.name}: fixed weights need one value per component")
            if not all(np.isfinite(self.fixed_values)):
                raise ModelSpecificationError(f"composite {self.name}: fixed weights must be finite")
        elif self.fixed_values is not None:
            raise ModelSpecificationError(
                f"composite {self.name}: values given for weight mode {self.weights!r}")
        if self.pseudo is not None and self.pseudo not in self.components:
            raise ModelSpecificationError(
                f"composite {self.name}: {self.pseudo!r} is not one of its components")

    @property
    def k(self) -> int:
        return len(self.components)

    @property
    def anchor(self) -> str:
        return self.pseudo if self.pseudo is not None else self.components[-1]

    @property
    def is_free(self) -> bool:
        return self.weights == "free"

    def weight_vector(self) -> np.ndarray | None:
        """Predetermined weights, or None for free weights."""
        if self.weights == "unit_sum":
            return np.ones(self.k)
        if self.weights == "average":
            return np.full(self.k, 1.0 / self.k)
        if self.weights == "fixed":
            return np.array(self.fixed_values)
        return None

    def with_spec(self, spec: str) -> "CompositeBlock":
        return replace(self, spec=spec)


@dataclass(frozen=True)
class Regression:
    outcome: str
    predictors: tuple

    def __post_init__(self):
        object.__setattr__(self, "predictors", tuple(self.predictors))


@dataclass(frozen=True)
class StructuralSpec:
    regressions: tuple = ()
    covariances: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "regressions", tuple(self.regressions))
        object.__setattr__(self, "covariances", tuple(tuple(c) for c in self.covariances))

    def variables(self) -> list:
        out = []
        for r in self.regressions:
            for v in (r.outcome,) + r.predictors:
                if v not in out:
                    out.append(v)
        for a, b in self.covariances:
            for v in (a, b):
                if v not in out:
                    out.append(v)
        return out

    def endogenous(self) -> list:
        out = []
        for r in self.regressions:
            if r.outcome not in out:
                out.append(r.outcome)
        return out

    def paths(self) -> list:
        """``(outcome, predictor)`` pairs in declaration order, duplicates merged."""
        out = []
        for r in self.regressions:
            for p in r.predictors:
                if (r.outcome, p) not in out:
                    out.append((r.outcome, p))
        return out


# ---------------------------------------------------------------------------
# validation helpers


def _check_structure(blocks: Sequence[CompositeBlock], structural: StructuralSpec):
    names = [b.name for b in blocks]
    if len(set(names)) != len(names):
        raise ModelSpecificationError("duplicate composite names")
    comps = {}
    for b in blocks:
        if b.name in comps:
            raise ModelSpecificationError(f"{b.name!r} is both a composite and a component")
        for c in b.components:
            if c in comps or c in names:
                raise ModelSpecificationError(f"component {c!r} used twice")
            comps[c] = b.name
    for v in structural.variables():
        if v in comps:
            raise ModelSpecificationError(
                f"{v!r} is a component of {comps[v]}; use the composite in the structural model")
    for o, p in structural.paths():
        if o == p:
            raise ModelSpecificationError(f"{o!r} regressed on itself")
    # acyclic
    graph = {}
    for o, p in structural.paths():
        graph.setdefault(p, set()).add(o)
    state = {}

    def visit(v):
        state[v] = 1
        for w in graph.get(v, ()):
            if state.get(w) == 1:
                raise ModelSpecificationError(f"structural model has a cycle through {w!r}")
            if w not in state:
                visit(w)
        state[v] = 2

    for v in list(graph):
        if v not in state:
            visit(v)
    return comps


def structural_neighbors(name: str, blocks, structural: StructuralSpec) -> set:
    """Variables connected to ``name`` by a path or a (possibly default) covariance."""
    out = set()
    for o, p in structural.paths():
        if o == name:
            out.add(p)
        if p == name:
            out.add(o)
    for a, b in structural.covariances:
        if a == name:
            out.add(b)
        if b == name:
            out.add(a)
    exo = _exogenous(blocks, structural)
    if name in exo:
        out.update(v for v in exo if v != name)
    return out


def _exogenous(blocks, structural) -> list:
    endo = set(structural.endogenous())
    out = []
    for v in [b.name for b in blocks] + structural.variables():
        if v not in endo and v not in out:
            out.append(v)
    return out


def _check_block(block: CompositeBlock, blocks, structural):
    spec = block.spec
    w = block.weight_vector()
    if spec == "two_step" and block.is_free:
        raise FreeWeightsUnsupported(
            f"composite {block.name}: two-step scores need predetermined weights")
    if spec == "pseudo_indicator":
        if block.is_free:
            raise FreeWeightsUnsupported(
                f"composite {block.name}: the pseudo-indicator approach needs predetermined weights")
        if w[block.components.index(block.anchor)] == 0.0:
            raise ZeroPseudoWeight(
                f"composite {block.name}: pseudo indicator {block.anchor!r} has weight 0")
        if block.transmission != "mimic_two_step":
            raise ModelSpecificationError(
                f"composite {block.name}: the pseudo-indicator approach only supports "
                "transmit mimic")
    if spec == "ho_original" and not block.is_free:
        raise UnsupportedFixedValues(
            f"composite {block.name}: the original H-O specification has no fixed-weight form; "
            "use refined, phantom or blended")
    if spec == "ho_refined" and block.weights == "fixed":
        if not np.allclose(w, w[0], rtol=0, atol=0) or w[0] == 0.0:
            raise UnsupportedFixedValues(
                f"composite {block.name}: the refined H-O specification only fixes equal weights; "
                "use phantom or blended for arbitrary values")
    if spec == "ho_phantom" and w is not None and np.any(w == 0.0):
        raise ZeroWeight(
            f"composite {block.name}: a phantom loading 1/w is undefined for a zero weight")
    if spec == "ho_blended" and w is not None and w[block.components.index(block.anchor)] == 0.0:
        raise ZeroPseudoWeight(
            f"composite {block.name}: pseudo indicator {block.anchor!r} has weight 0; "
            "choose another pseudo indicator")
    if block.is_free and spec in HO_FAMILY:
        if not structural_neighbors(block.name, blocks, structural):
            raise IsolatedComposite(
                f"composite {block.name}: free weights require a structural neighbor")


# ---------------------------------------------------------------------------
# shared pieces


class _Builder:
    """Accumulates variables and cells for one RAM model."""

    def __init__(self):
        self.variables = []
        self.names = set()
        self.cells = []
        self.keys = set()
        self.constraints = []
        self.derived = []
        self.composites = []
        self.meta = {}

    def var(self, name, kind):
        if name in self.names:
            raise ModelSpecificationError(f"variable name clash: {name!r}")
        self.names.add(name)
        self.variables.append(Variable(name, kind))

    def cell(self, matrix, row, col, value=0.0, free=False, label=None, role=""):
        c = ParameterCell(matrix, row, col, float(value), free, label, role)
        if c.key in self.keys:
            return
        self.keys.add(c.key)
        self.cells.append(c)

    def fixed_a(self, row, col, value):
        self.cell("A", row, col, value)

    def free_a(self, row, col, label=None, role="path"):
        self.cell("A", row, col, 0.0, True, label or f"{row}~{col}", role)

    def free_s(self, a, b, role=None):
        if role is None:
            role = "variance" if a == b else "covariance"
        self.cell("S", a, b, 0.0, True, f"{a}~~{b}", role)

    def build(self, observed_order=None):
        return RamModel(self.variables, self.cells, self.constraints, observed_order,
                        self.derived, self.composites, self.meta)


def _structural_part(bld: _Builder, blocks, structural, *, composite_kind=LATENT,
                     skip_cov=frozenset()):
    """Paths, disturbance variances and default exogenous covariances."""
    composite_names = [b.name for b in blocks]
    struct = [v for v in composite_names + structural.variables()]
    seen = []
    for v in struct:
        if v not in seen:
            seen.append(v)
    for v in seen:
        if v not in bld.names:
            bld.var(v, composite_kind if v in composite_names else OBSERVED)
    for o, p in structural.paths():
        bld.free_a(o, p)
    exo = _exogenous(blocks, structural)
    for v in seen:
        if v not in skip_cov:
            bld.free_s(v, v)
    for i, a in enumerate(exo):
        for b in exo[i + 1:]:
            if a not in skip_cov and b not in skip_cov:
                bld.free_s(a, b)
    for a, b in structural.covariances:
        if a not in skip_cov and b not in skip_cov:
            bld.free_s(a, b)
    return seen, exo


def _structural_meta(bld: _Builder, blocks, structural):
    exo = _exogenous(blocks, structural)
    covs = []
    for i, a in enumerate(exo):
        for b in exo[i + 1:]:
            covs.append(f"{a}~~{b}")
    for a, b in structural.covariances:
        if f"{a}~~{b}" not in covs:
            covs.append(f"{a}~~{b}")
    bld.meta.update({
        "endogenous": structural.endogenous(),
        "paths": [f"{o}~{p}" for o, p in structural.paths()],
        "structural_covariances": covs,
    })


def _observed_order(blocks, structural):
    order = []
    for b in blocks:
        order.extend(b.components)
    comp_names = {b.name for b in blocks}
    for v in structural.variables():
        if v not in comp_names and v not in order:
            order.append(v)
    return order


def _anchor_order(block: CompositeBlock) -> list:
    a = block.anchor
    return [a] + [c for c in block.components if c != a]


def _nu_names(block: CompositeBlock) -> list:
    return [f"nu{j + 1}_{block.name}" for j in range(block.k - 1)]


def _fixed_weight_labels(block):
    return block.weight_vector()


# ---------------------------------------------------------------------------
# per-block constructions (component-level specifications)


def _block_refined(bld: _Builder, block: CompositeBlock, original: bool = False):
    eta = block.name
    nus = _nu_names(block)
    for nu in nus:
        bld.var(nu, LATENT)
    order = _anchor_order(block)
    if block.is_free:
        for c in order:
            if c == order[0]:
                bld.fixed_a(c, eta, 1.0)
            else:
                bld.free_a(c, eta, f"{eta}=~{c}", "loading")
        for j, nu in enumerate(nus):
            rows = order[j:] if original else order[j:j + 2]
            for r in rows:
                if r == order[j + 1]:
                    bld.fixed_a(r, nu, 1.0)
                else:
                    bld.free_a(r, nu, f"{nu}=~{r}", "excrescent")
    else:
        w = block.weight_vector()
        total = 1.0 / w[0]
        for c in block.components:
            bld.free_a(c, eta, f"{eta}=~{c}", "loading_sum")
        bld.constraints.append(
            LinearConstraint(tuple((f"{eta}=~{c}", 1.0) for c in block.components), total))
        for j, nu in enumerate(nus):
            bld.fixed_a(order[j], nu, 1.0)
            bld.fixed_a(order[j + 1], nu, -1.0)
    for nu in nus:
        bld.free_s(nu, nu, "helper_variance")
    if not original:
        for i, a in enumerate(nus):
            for b in nus[i + 1:]:
                bld.free_s(a, b)
    w = block.weight_vector()
    for j, c in enumerate(block.components):
        # with fixed weights the constraint pins w = 1 / sum(loadings) exactly
        q = BlockInverse(eta, 0, j) if w is None else Const(float(w[j]))
        bld.derived.append(DerivedQuantity(f"w.{c}", q, "weight"))
    bld.composites.append(CompositeInfo(eta, block.components, tuple(nus), block.spec, block.weights))
    return nus


def _block_phantom(bld: _Builder, block: CompositeBlock):
    eta = block.name
    nus = _nu_names(block)
    for nu in nus:
        bld.var(nu, LATENT)
    phantoms = {c: f"p_{c}" for c in block.components}
    for c in block.components:
        bld.var(phantoms[c], LATENT)
    order = _anchor_order(block)
    w = block.weight_vector()
    for j, c in enumerate(block.components):
        p = phantoms[c]
        if w is not None:
            bld.fixed_a(c, p, 1.0 / w[j])
            weight = Const(float(w[j]))
        elif c == block.anchor:
            bld.fixed_a(c, p, 1.0)
            weight = Const(1.0)
        else:
            lab = f"{p}=~{c}"
            bld.free_a(c, p, lab, "phantom")
            weight = recip(Label(lab))
        bld.derived.append(DerivedQuantity(f"w.{c}", weight, "weight"))
    for c in block.components:
        bld.free_a(phantoms[c], eta, f"{eta}=~{phantoms[c]}", "loading_sum")
    bld.constraints.append(
        LinearConstraint(tuple((f"{eta}=~{phantoms[c]}", 1.0) for c in block.components), 1.0))
    for j, nu in enumerate(nus):
        bld.fixed_a(phantoms[order[j]], nu, 1.0)
        bld.fixed_a(phantoms[order[j + 1]], nu, -1.0)
    for nu in nus:
        bld.free_s(nu, nu, "helper_variance")
    for i, a in enumerate(nus):
        for b in nus[i + 1:]:
            bld.free_s(a, b)
    bld.composites.append(CompositeInfo(eta, block.components, tuple(nus), block.spec, block.weights))
    return nus


def _block_blended(bld: _Builder, block: CompositeBlock):
    eta = block.name
    pseudo = block.anchor
    others = [c for c in block.components if c != pseudo]
    nus = [f"nu_{c}" for c in others]
    for nu in nus:
        bld.var(nu, LATENT)
    p = f"p_{eta}"
    bld.var(p, LATENT)
    w = block.weight_vector()
    if w is not None:
        wi = float(w[block.components.index(pseudo)])
        bld.fixed_a(pseudo, eta, 1.0 / wi)
        w_pseudo = Const(wi)
    else:
        bld.fixed_a(pseudo, eta, 1.0)
        w_pseudo = Const(1.0)
    bld.fixed_a(pseudo, p, -1.0)
    ratios = {}
    for c, nu in zip(others, nus):
        bld.fixed_a(c, nu, 1.0)
        if w is not None:
            r = float(w[block.components.index(c)]) / wi
            if r != 0.0:
                bld.fixed_a(p, c, r)
            ratios[c] = Const(r)
        else:
            lab = f"{p}~{c}"
            bld.free_a(p, c, lab, "ratio")
            ratios[c] = Label(lab)
    for c in block.components:
        if c == pseudo:
            q = w_pseudo
        elif w is None:
            q = ratios[c]
        else:
            q = Const(float(w[block.components.index(c)]))
        bld.derived.append(DerivedQuantity(f"w.{c}", q, "weight"))
    # eta also loads on the non-pseudo components and stays uncorrelated with
    # the excrescent variables, as in the refined construction
    for c in others:
        bld.free_a(c, eta, f"{eta}=~{c}", "loading")
    for nu in nus:
        bld.free_s(nu, nu, "helper_variance")
    for i, a in enumerate(nus):
        for b in nus[i + 1:]:
            bld.free_s(a, b)
    bld.composites.append(CompositeInfo(eta, block.components, tuple(nus), block.spec, block.weights))
    return nus


def _block_pseudo(bld: _Builder, block: CompositeBlock):
    eta = block.name
    pseudo = block.anchor
    others = [c for c in block.components if c != pseudo]
    w = block.weight_vector()
    wi = float(w[block.components.index(pseudo)])
    bld.fixed_a(pseudo, eta, 1.0 / wi)
    for c in others:
        wj = float(w[block.components.index(c)])
        if wj != 0.0:
            bld.fixed_a(pseudo, c, -wj / wi)
    for c in others:
        bld.free_s(c, c)
        bld.free_s(eta, c)
    for i, a in enumerate(others):
        for b in others[i + 1:]:
            bld.free_s(a, b)
    for j, c in enumerate(block.components):
        bld.derived.append(DerivedQuantity(f"w.{c}", Const(float(w[j])), "weight"))
    bld.composites.append(CompositeInfo(eta, block.components, tuple(others), block.spec, block.weights))
    return others


_BLOCK_BUILDERS = {
    "pseudo_indicator": _block_pseudo,
    "ho_original": lambda bld, b: _block_refined(bld, b, original=True),
    "ho_refined": _block_refined,
    "ho_phantom": _block_phantom,
    "ho_blended": _block_blended,
}


def helper_variables(block: CompositeBlock) -> list:
    """Names of the block-internal variables that carry the non-composite variation."""
    if block.spec == "pseudo_indicator":
        return [c for c in block.components if c != block.anchor]
    if block.spec == "ho_blended":
        return [f"nu_{c}" for c in block.components if c != block.anchor]
    if block.spec in HO_FAMILY:
        return _nu_names(block)
    return []


def saturation_plan(blocks: Sequence[CompositeBlock], structural: StructuralSpec,
                    transmission: str | None = None) -> list:
    """Covariance cells between block helpers and other model variables to free.

    Under ``full`` transmission helpers stay uncorrelated with everything
    outside their own block, so the plan is empty.  Under
    ``mimic_two_step`` every helper covaries with every helper of other
    blocks and with every structural variable (for an endogenous variable
    that means its disturbance) except its own composite of interest, which
    leaves the component covariance matrix unrestricted beyond what the
    structural model imposes on the composites.

    ``transmission`` overrides the per-block setting when given.
    """
    struct = []
    for v in [b.name for b in blocks] + structural.variables():
        if v not in struct:
            struct.append(v)
    plan = []
    helpers = {b.name: helper_variables(b) for b in blocks}
    for i, b in enumerate(blocks):
        mode = transmission or b.transmission
        if mode != "mimic_two_step":
            continue
        for h in helpers[b.name]:
            for other in blocks:
                if other.name == b.name:
                    continue
                for h2 in helpers[other.name]:
                    pair = (h, h2) if blocks.index(other) > i else (h2, h)
                    if pair not in plan and pair[::-1] not in plan:
                        plan.append(pair)
            for v in struct:
                if v != b.name:
                    plan.append((h, v))
    return plan


def _build_component_model(blocks: Sequence[CompositeBlock], structural: StructuralSpec,
                           label: str) -> RamModel:
    _check_structure(blocks, structural)
    for b in blocks:
        if b.spec not in COMPONENT_SPECS:
            raise ModelSpecificationError(
                f"composite {b.name}: {b.spec} cannot be mixed into a component-level model")
        _check_block(b, blocks, structural)
    bld = _Builder()
    for b in blocks:
        for c in b.components:
            bld.var(c, OBSERVED)
    _structural_part(bld, blocks, structural)
    for b in blocks:
        _BLOCK_BUILDERS[b.spec](bld, b)
    for a, c in saturation_plan(blocks, structural):
        bld.free_s(a, c)
    _structural_meta(bld, blocks, structural)
    bld.meta.update({
        "specification": label,
        "transmission": {b.name: b.transmission for b in blocks},
        "helper_variances": "free",
    })
    model = bld.build(_observed_order(blocks, structural))
    model.source = (tuple(blocks), structural)
    return model


def build_component_model(blocks, structural) -> RamModel:
    """Component-level model where each block keeps its own specification."""
    specs = sorted({b.spec for b in blocks})
    return _build_component_model(blocks, structural, "+".join(specs))


def _respec(blocks, spec):
    return [b.with_spec(spec) for b in blocks]


def build_pseudo_indicator(blocks, structural) -> RamModel:
    return _build_component_model(_respec(blocks, "pseudo_indicator"), structural,
                                  "pseudo_indicator")


def build_ho_original(blocks, structural) -> RamModel:
    return _build_component_model(_respec(blocks, "ho_original"), structural, "ho_original")


def build_ho_refined(blocks, structural) -> RamModel:
    return _build_component_model(_respec(blocks, "ho_refined"), structural, "ho_refined")


def build_ho_phantom(blocks, structural) -> RamModel:
    return _build_component_model(_respec(blocks, "ho_phantom"), structural, "ho_phantom")


def build_ho_blended(blocks, structural) -> RamModel:
    return _build_component_model(_respec(blocks, "ho_blended"), structural, "ho_blended")


# ---------------------------------------------------------------------------
# one-step (modified)


def build_one_step_modified(blocks, structural) -> RamModel:
    """Composites formed by their components with zero disturbance.

    Predictors of an outcome composite affect each of its components; the
    composite-level effects are registered as derived indirect effects
    ``sum_j w_j * (effect on component j)`` under the usual ``outcome~predictor``
    names.  Components of all non-outcome composites covary freely.
    """
    blocks = _respec(blocks, "one_step_modified")
    _check_structure(blocks, structural)
    by_name = {b.name: b for b in blocks}
    endo = set(structural.endogenous())
    predictors = {p for _, p in structural.paths()}
    for b in blocks:
        if b.is_free and b.name in endo and b.name not in predictors:
            raise FreeWeightsOnOutcome(
                f"composite {b.name}: an outcome composite without consequences needs "
                "predetermined weights in the one-step approach")
        if b.is_free and b.name not in endo and b.name not in predictors:
            raise IsolatedComposite(f"composite {b.name}: free weights require a structural role")
    bld = _Builder()
    for b in blocks:
        for c in b.components:
            bld.var(c, OBSERVED)
    others = [v for v in structural.variables() if v not in by_name]
    for v in others:
        bld.var(v, OBSERVED)
    weights = {}
    for b in blocks:
        bld.var(b.name, LATENT)
        w = b.weight_vector()
        ws = []
        for j, c in enumerate(b.components):
            if w is not None:
                if w[j] != 0.0:
                    bld.fixed_a(b.name, c, w[j])
                ws.append(Const(float(w[j])))
            elif c == b.anchor:
                bld.fixed_a(b.name, c, 1.0)
                ws.append(Const(1.0))
            else:
                lab = f"{b.name}<~{c}"
                bld.free_a(b.name, c, lab, "loading")
                ws.append(Label(lab))
        weights[b.name] = ws
        for c, q in zip(b.components, ws):
            bld.derived.append(DerivedQuantity(f"w.{c}", q, "weight"))
        bld.composites.append(CompositeInfo(b.name, b.components, (), b.spec, b.weights))
    # exogenous observed: components of non-outcome composites and observed predictors
    exo = []
    for b in blocks:
        if b.name not in endo:
            exo.extend(b.components)
    exo.extend(v for v in others if v not in endo)
    for i, a in enumerate(exo):
        bld.free_s(a, a)
        for c in exo[i + 1:]:
            bld.free_s(a, c)
    for b in blocks:
        if b.name in endo:
            for c in b.components:
                bld.free_s(c, c)
    for v in others:
        if v in endo:
            bld.free_s(v, v)
    paths = structural.paths()
    for o, p in paths:
        if o in by_name:
            for c in by_name[o].components:
                bld.free_a(c, p)
        else:
            bld.free_a(o, p)
    skipped = []
    for a, b in structural.covariances:
        if a in by_name or b in by_name:
            skipped.append(f"{a}~~{b}")
        elif a in endo or b in endo:
            bld.free_s(a, b)
    if skipped:
        bld.meta["skipped_covariances"] = skipped
    for o, p in paths:
        if o in by_name:
            expr = None
            for c, w in zip(by_name[o].components, weights[o]):
                term = w * Label(f"{c}~{p}")
                expr = term if expr is None else expr + term
            bld.derived.append(DerivedQuantity(f"{o}~{p}", expr, "indirect"))
    _structural_meta(bld, blocks, structural)
    bld.meta.update({"specification": "one_step_modified",
                     "cross_block_component_covariances": "free"})
    return bld.build(_observed_order(blocks, structural))


# ---------------------------------------------------------------------------
# two-step


def composite_scores(blocks, data):
    """Step 1: weighted sums of the (already preprocessed) component columns."""
    out = {}
    for b in blocks:
        if b.is_free:
            raise FreeWeightsUnsupported(
                f"composite {b.name}: two-step scores need predetermined weights")
        w = b.weight_vector()
        out[b.name] = np.asarray(data[list(b.components)], dtype=float) @ w
    return pd.DataFrame(out, index=getattr(data, "index", None))


def score_weight_matrix(blocks, names: Sequence[str], extra: Sequence[str] = ()) -> np.ndarray:
    """Matrix ``W`` with ``scores = x @ W`` for variables ordered as ``names``.

    Columns are the composites followed by ``extra`` pass-through variables.
    """
    W = np.zeros((len(names), len(blocks) + len(extra)))
    idx = {n: i for i, n in enumerate(names)}
    for j, b in enumerate(blocks):
        w = b.weight_vector()
        if w is None:
            raise FreeWeightsUnsupported(
                f"composite {b.name}: two-step scores need predetermined weights")
        for c, wc in zip(b.components, w):
            W[idx[c], j] = wc
    for j, v in enumerate(extra):
        W[idx[v], len(blocks) + j] = 1.0
    return W


def build_two_step(blocks, structural, data=None):
    """Two-step approach.

    Returns ``(scores, model)``: the step-1 composite scores (a DataFrame
    with the composites and any observed structural variables, or None when
    ``data`` is None) and the step-2 RAM model over the scores.
    """
    blocks = _respec(blocks, "two_step")
    _check_structure(blocks, structural)
    for b in blocks:
        _check_block(b, blocks, structural)
    bld = _Builder()
    _structural_part(bld, blocks, structural, composite_kind=OBSERVED)
    for b in blocks:
        w = b.weight_vector()
        for c, wc in zip(b.components, w):
            bld.derived.append(DerivedQuantity(f"w.{c}", Const(float(wc)), "weight"))
    _structural_meta(bld, blocks, structural)
    bld.meta["specification"] = "two_step"
    order = [b.name for b in blocks] + [v for v in structural.variables()
                                        if v not in {b.name for b in blocks}]
    seen = []
    for v in order:
        if v not in seen:
            seen.append(v)
    model = bld.build(seen)
    scores = None
    if data is not None:
        scores = composite_scores(blocks, data)
        for v in seen[len(blocks):]:
            scores[v] = np.asarray(data[v], dtype=float)
    return scores, model


# ---------------------------------------------------------------------------
# dispatch


def build(blocks, structural, spec: str | None = None, data=None) -> RamModel:
    """Build one RAM model. ``spec`` overrides every block's specification."""
    if spec is not None:
        blocks = _respec(blocks, spec)
    specs = {b.spec for b in blocks}
    if "two_step" in specs or "one_step_modified" in specs:
        if len(specs) > 1:
            raise ModelSpecificationError(
                "two-step and one-step cannot be mixed with other specifications")
        if "two_step" in specs:
            return build_two_step(blocks, structural, data)[1]
        return build_one_step_modified(blocks, structural)
    return build_component_model(blocks, structural)
