"""Hypothesis strategy for random valid model programs."""

from __future__ import annotations

from hypothesis import strategies as st

from csem.builders import CompositeBlock, Regression, StructuralSpec
from csem.dsl import ModelProgram

_FIRST = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz_"
# identifiers [A-Za-z_][A-Za-z0-9_]{0,6}
NAMES = st.builds(lambda a, b: a + b, st.sampled_from(_FIRST),
                  st.text(_FIRST + "0123456789", max_size=6))
FINITE = st.floats(allow_nan=False, allow_infinity=False, width=64)
NONZERO = FINITE.filter(lambda v: v != 0.0)


@st.composite
def blocks_for(draw, name, components):
    k = len(components)
    spec = draw(st.sampled_from(["two_step", "one_step_modified", "pseudo_indicator",
                                 "ho_original", "ho_refined", "ho_phantom", "ho_blended"]))
    if spec == "ho_original":
        weights = "free"
    elif spec in ("two_step", "one_step_modified", "pseudo_indicator"):
        weights = draw(st.sampled_from(["unit_sum", "average", "fixed"]))
    else:
        weights = draw(st.sampled_from(["unit_sum", "average", "fixed", "free"]))
    pseudo = draw(st.none() | st.sampled_from(components))
    anchor = pseudo if pseudo is not None else components[-1]
    values = None
    if weights == "fixed":
        if spec == "ho_refined":
            v = draw(NONZERO)
            values = (v,) * k
        elif spec == "ho_phantom":
            values = tuple(draw(st.lists(NONZERO, min_size=k, max_size=k)))
        else:
            values = list(draw(st.lists(FINITE, min_size=k, max_size=k)))
            if spec in ("pseudo_indicator", "ho_blended") and values[components.index(anchor)] == 0.0:
                values[components.index(anchor)] = 1.0
            values = tuple(values)
    if spec == "pseudo_indicator":
        transmission = "mimic_two_step"
    else:
        transmission = draw(st.sampled_from(["full", "mimic_two_step"]))
    return CompositeBlock(name, components, weights, values, spec, transmission, pseudo)


OPTION_VALUES = (st.integers(-10**6, 10**6) | FINITE | st.booleans() | NAMES
                 | st.text(st.characters(blacklist_characters='"\n\r',
                                         blacklist_categories=("Cs", "Cc")), max_size=8))


@st.composite
def programs(draw, max_blocks=4):
    n = draw(st.integers(0, max_blocks))
    names = draw(st.lists(NAMES, min_size=n * 4 + n, max_size=n * 4 + n, unique=True))
    blocks = []
    pos = n
    for i in range(n):
        k = draw(st.integers(2, 4))
        comps = tuple(names[pos:pos + k])
        pos += k
        blocks.append(draw(blocks_for(names[i], comps)))
    regressions, covariances = [], []
    if n >= 2:
        for i in range(1, n):
            preds = draw(st.lists(st.integers(0, i - 1), max_size=i, unique=True))
            if preds:
                regressions.append(Regression(names[i], tuple(names[j] for j in preds)))
        pairs = [(a, b) for a in range(n) for b in range(a + 1, n)]
        for a, b in draw(st.lists(st.sampled_from(pairs), max_size=2, unique=True)):
            covariances.append((names[a], names[b]))
    keys = draw(st.lists(st.lists(NAMES, min_size=1, max_size=3).map(".".join),
                         max_size=3, unique=True))
    keys = [k for k in keys if k != "transmission"]
    options = {k: draw(OPTION_VALUES) for k in keys}
    if n == 1 and blocks[0].is_free and blocks[0].spec in ("ho_original", "ho_refined",
                                                           "ho_phantom", "ho_blended"):
        blocks[0] = CompositeBlock(blocks[0].name, blocks[0].components, "average",
                                   None, "ho_refined", blocks[0].transmission, blocks[0].pseudo)
    return ModelProgram(tuple(blocks), StructuralSpec(tuple(regressions), tuple(covariances)),
                        options)
