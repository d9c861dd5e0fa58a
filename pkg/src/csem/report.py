"""Fitting a model program under one or more specifications, and reporting."""

from __future__ import annotations

import json
import math
import platform
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from . import __version__
from .builders import (
    SPECS,
    _check_block,
    _check_structure,
    build,
    build_two_step,
    score_weight_matrix,
)
from .data import LoadedData
from .dsl import ModelProgram
from .errors import CsemError, ModelSpecificationError, NotConverged, SingularInformation
from .estimator import EstimationSettings, FitResult, SampleMoments, estimate

SCHEMA = "report_v1"
SPEC_ALIASES = {
    "twostep": "two_step",
    "onestep": "one_step_modified",
    "pseudo": "pseudo_indicator",
    "original": "ho_original",
    "refined": "ho_refined",
    "phantom": "ho_phantom",
    "blended": "ho_blended",
}
SPEC_TITLES = {
    "two_step": "Two-step",
    "one_step_modified": "Modified one-step",
    "pseudo_indicator": "Pseudo-indicator",
    "ho_original": "Original H-O",
    "ho_refined": "Refined H-O",
    "ho_phantom": "Phantom-variable H-O",
    "ho_blended": "Blended H-O",
}
WEIGHT_FLAGS = {"sum": "unit_sum", "unit_sum": "unit_sum", "average": "average", "free": "free"}


def resolve_spec(name: str) -> str:
    name = SPEC_ALIASES.get(name, name)
    if name not in SPECS:
        raise ModelSpecificationError(f"unknown specification {name!r}")
    return name


def model_variables(program: ModelProgram) -> list:
    """Observed variables the data must provide, in model order."""
    out = [c for b in program.blocks for c in b.components]
    names = {b.name for b in program.blocks}
    for v in program.structural.variables():
        if v not in names and v not in out:
            out.append(v)
    return out


def settings_from_program(program: ModelProgram, seed: int = 0) -> EstimationSettings:
    divisor = program.options.get("divisor", "n")
    divisor = {"n-1": "n_minus_1", "n_1": "n_minus_1"}.get(divisor, divisor)
    return EstimationSettings(divisor_convention=divisor, seed=seed)


def program_for(program: ModelProgram, spec: str | None = None, weights: str | None = None,
                transmission: str | None = None) -> ModelProgram:
    """Copy of ``program`` with specification, weight mode or transmission overridden."""
    blocks = []
    for b in program.blocks:
        kw = {}
        if spec is not None:
            kw["spec"] = spec
        if weights is not None:
            mode = WEIGHT_FLAGS[weights]
            kw.update(weights=mode, fixed_values=None)
        if transmission is not None:
            kw["transmission"] = transmission
        blocks.append(replace(b, **kw) if kw else b)
    return replace(program, blocks=tuple(blocks))


def applicable(program: ModelProgram, spec: str) -> str | None:
    """None when every block can use ``spec``, else the reason it cannot."""
    blocks = [b.with_spec(spec) for b in program.blocks]
    try:
        _check_structure(blocks, program.structural)
        for b in blocks:
            _check_block(b, blocks, program.structural)
    except ModelSpecificationError as exc:
        return str(exc)
    return None


def fit_specification(program: ModelProgram, loaded: LoadedData, spec: str,
                      settings: EstimationSettings) -> FitResult:
    blocks = [b.with_spec(spec) for b in program.blocks]
    st = program.structural
    if spec == "two_step":
        if loaded.data is not None:
            scores, model = build_two_step(blocks, st, loaded.data)
            moments = SampleMoments.from_data(scores[list(model.observed_order)].to_numpy(),
                                              list(model.observed_order))
        else:
            _, model = build_two_step(blocks, st)
            extra = list(model.observed_order[len(blocks):])
            W = score_weight_matrix(blocks, loaded.moments.names, extra)
            moments = SampleMoments(W.T @ loaded.moments.S @ W, loaded.moments.n,
                                    model.observed_order)
        return estimate(model, moments, settings)
    model = build(blocks, st)
    return estimate(model, loaded.moments, settings)


@dataclass
class SpecOutcome:
    spec: str
    result: FitResult | None = None
    error: str | None = None
    error_kind: str | None = None


def run_specifications(program: ModelProgram, loaded: LoadedData, specs, settings,
                       skip_inapplicable: bool = False) -> tuple:
    """Fit each specification; returns ``(outcomes, skipped)``."""
    outcomes, skipped = [], []
    for spec in specs:
        reason = applicable(program, spec)
        if reason is not None:
            if skip_inapplicable:
                skipped.append({"specification": spec, "reason": reason})
                continue
            raise ModelSpecificationError(reason)
        try:
            res = fit_specification(program, loaded, spec, settings)
            outcomes.append(SpecOutcome(spec, res))
        except (NotConverged, SingularInformation) as exc:
            outcomes.append(SpecOutcome(spec, None, str(exc), type(exc).__name__))
    return outcomes, skipped


# ---------------------------------------------------------------------------
# JSON


def _num(x):
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else None


def result_dict(res: FitResult) -> dict:
    model = res.model
    params = []
    for lab in model.labels:
        cell = model.cells_for(lab)[0]
        params.append({
            "label": lab,
            "matrix": cell.matrix,
            "role": cell.role,
            "estimate": _num(res.theta_hat[lab]),
            "se": _num(res.se[lab]),
        })
    derived = [{"name": k, "estimate": _num(v[0]), "se": _num(v[1])}
               for k, v in res.derived.items()]
    std = [{"name": k, "estimate": _num(v[0]), "se": _num(v[1])}
           for k, v in res.standardized.items()]
    fit = res.fit.as_dict()
    fit = {k: ({kk: _num(vv) for kk, vv in v.items()} if isinstance(v, dict)
               else (v if isinstance(v, int) else _num(v))) for k, v in fit.items()}
    return {
        "specification": model.meta.get("specification"),
        "converged": bool(res.converged),
        "iterations": int(res.iterations),
        "restarts": int(res.restarts),
        "fmin": _num(res.fmin),
        "n": int(res.moments.n),
        "observed": list(model.observed_order),
        "parameters": params,
        "derived": derived,
        "standardized": std,
        "fit": fit,
        "model": {
            "n_free": model.n_free,
            "constraints": len(model.constraints),
            "helper_variances": model.meta.get("helper_variances"),
            "transmission": model.meta.get("transmission"),
        },
    }


def _lookup(res: FitResult, name: str):
    if name in res.theta_hat:
        return res.theta_hat[name], res.se[name]
    if name in res.derived:
        return res.derived[name]
    if name in res.model.fixed_labels:
        return res.model.fixed_labels[name], None
    return None, None


def comparison(program: ModelProgram, outcomes) -> dict:
    """Rows mirroring the published tables: paths, composite covariances,
    weights, standardized solution and fit statistics, one column per fit."""
    paths = [f"{o}~{p}" for o, p in program.structural.paths()]
    covs = []
    for res in (o.result for o in outcomes if o.result is not None):
        for c in res.model.meta.get("structural_covariances", []):
            if c not in covs:
                covs.append(c)
    weights = [f"w.{c}" for b in program.blocks for c in b.components]
    rows = []

    def add(section, name, getter):
        cells = []
        for o in outcomes:
            if o.result is None:
                cells.append({"estimate": None, "se": None})
                continue
            est, se = getter(o.result, name)
            cells.append({"estimate": _num(est), "se": _num(se)})
        if any(c["estimate"] is not None for c in cells):
            rows.append({"section": section, "name": name, "cells": cells})

    for p in paths:
        add("paths", p, _lookup)
    for c in covs:
        add("composite covariances", c, _lookup)
    for w in weights:
        add("weights", w, _lookup)
    for p in paths + covs:
        add("standardized", p, lambda r, n: r.standardized.get(n, (None, None)))
    stats = ("chisq", "df", "rmsea", "srmr", "aic", "bic")
    for s in stats:
        add("fit", s, lambda r, n: (getattr(r.fit, n), None))
    for v in program.structural.endogenous():
        add("fit", f"R2.{v}", lambda r, n: (r.fit.r_squared.get(n[3:]), None))
    return {"columns": [o.spec for o in outcomes], "rows": rows}


def build_report(program: ModelProgram, loaded: LoadedData, outcomes, skipped, settings,
                 seed: int, model_source: str | None = None) -> dict:
    fits = []
    for o in outcomes:
        if o.result is not None:
            fits.append(result_dict(o.result))
        else:
            fits.append({"specification": o.spec, "converged": False,
                         "error": o.error, "error_kind": o.error_kind})
    return {
        "schema": SCHEMA,
        "metadata": {
            "seed": seed,
            "settings": {
                "max_iterations": settings.max_iterations,
                "f_tol": settings.f_tol,
                "grad_tol": settings.grad_tol,
                "divisor_convention": settings.divisor_convention,
                "jitter_retries": settings.jitter_retries,
                "information": settings.information,
            },
            "versions": {
                "csem": __version__,
                "numpy": np.__version__,
                "pandas": pd.__version__,
                "python": platform.python_version(),
            },
            "model": model_source,
            "n": int(loaded.moments.n),
            "rows_read": int(loaded.n_total),
            "rows_dropped": int(loaded.n_dropped),
            "standardized_input": bool(loaded.standardized),
            "options": {k: program.options[k] for k in sorted(program.options)},
        },
        "fits": fits,
        "skipped": skipped,
        "comparison": comparison(program, outcomes),
    }


def to_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=False) + "\n"


# ---------------------------------------------------------------------------
# text


def fmt3(x) -> str:
    if x is None:
        return "N.A."
    return f"{x:.3f}"


def _fmt_cell(section, name, cell):
    est, se = cell["estimate"], cell["se"]
    if est is None:
        return "N.A."
    if section == "fit":
        return str(int(est)) if name == "df" else fmt3(est)
    return f"{fmt3(est)} ({fmt3(se)})"


def _table(header, rows):
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(str(c).ljust(w) if i == 0 else str(c).rjust(w)
                       for i, (c, w) in enumerate(zip(r, widths))) for r in [header] + rows]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines)


def to_text(report: dict) -> str:
    meta = report["metadata"]
    out = [f"csem {meta['versions']['csem']}  n = {meta['n']}"
           + (f" ({meta['rows_dropped']} incomplete rows dropped)" if meta["rows_dropped"] else "")
           + f"  divisor = {meta['settings']['divisor_convention']}"]
    cmp = report["comparison"]
    if cmp["columns"]:
        header = [""] + [SPEC_TITLES.get(c, c) for c in cmp["columns"]]
        section = None
        rows = []
        for r in cmp["rows"]:
            if r["section"] != section:
                section = r["section"]
                rows.append([section.capitalize()] + [""] * len(cmp["columns"]))
            rows.append(["  " + r["name"]] + [_fmt_cell(section, r["name"], c) for c in r["cells"]])
        out += ["", _table(header, rows)]
    for f in report["fits"]:
        title = SPEC_TITLES.get(f["specification"], f["specification"])
        if not f.get("converged"):
            out += ["", f"{title}: failed ({f.get('error_kind')}): {f.get('error')}"]
            continue
        rows = [[p["label"], fmt3(p["estimate"]), fmt3(p["se"])] for p in f["parameters"]]
        rows += [[d["name"], fmt3(d["estimate"]), fmt3(d["se"])] for d in f["derived"]]
        out += ["", f"{title}: {f['iterations']} iterations",
                _table(["parameter", "Est", "SE"], rows)]
    for s in report["skipped"]:
        out += ["", f"{SPEC_TITLES.get(s['specification'], s['specification'])}: "
                    f"not applicable ({s['reason']})"]
    return "\n".join(out) + "\n"
