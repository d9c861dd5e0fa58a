"""
Text model language for composite models.

One statement per line::

    # comment
    composite WMC <~ average(Ospa, Sspa) using blended transmit mimic
    composite Gf <~ free(anchor=Rave)(Lett, Rave) using phantom
    composite X <~ fixed(a=0.25, b=0.75)(a, b) using phantom pseudo b
    Gf ~ WMC + PE + PR
    WMC ~~ PE
    set divisor = n

Keywords are contextual, so they may also be used as variable names.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .builders import (
    CompositeBlock,
    Regression,
    StructuralSpec,
    _check_block,
    _check_structure,
)
from .errors import ModelSpecificationError, ModelSyntaxError, SemanticError

SPEC_KEYWORDS = {
    "twostep": "two_step",
    "onestep": "one_step_modified",
    "pseudo": "pseudo_indicator",
    "original": "ho_original",
    "refined": "ho_refined",
    "phantom": "ho_phantom",
    "blended": "ho_blended",
}
SPEC_NAMES = {v: k for k, v in SPEC_KEYWORDS.items()}
TRANSMIT_KEYWORDS = {"full": "full", "mimic": "mimic_two_step"}
TRANSMIT_NAMES = {v: k for k, v in TRANSMIT_KEYWORDS.items()}
WEIGHT_KEYWORDS = {"sum": "unit_sum", "average": "average", "fixed": "fixed", "free": "free"}


@dataclass(frozen=True)
class Diagnostic:
    line: int
    column: int
    message: str
    expected: tuple = ()

    def __str__(self):
        out = f"line {self.line}, column {self.column}: {self.message}"
        if self.expected:
            out += " (expected " + " or ".join(self.expected) + ")"
        return out


@dataclass(frozen=True)
class ModelProgram:
    blocks: tuple = ()
    structural: StructuralSpec = field(default_factory=StructuralSpec)
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        object.__setattr__(self, "options", dict(self.options))

    def block(self, name: str) -> CompositeBlock:
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(name)


# ---------------------------------------------------------------------------
# tokenizer

_TOKEN_RE = re.compile(r"""
    (?P<ws>[ \t\r]+)
  | (?P<comment>\#.*)
  | (?P<number>[+-]?(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<string>"[^"\n]*")
  | (?P<op><~|~~|~|\(|\)|,|=|\+|\.)
""", re.VERBOSE)


@dataclass(frozen=True)
class Token:
    kind: str  # name, number, string, op, eol
    text: str
    line: int
    column: int


class _LineError(Exception):
    def __init__(self, diagnostic):
        self.diagnostic = diagnostic


def tokenize_line(text: str, line: int) -> list:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise _LineError(Diagnostic(line, pos + 1, f"unexpected character {text[pos]!r}",
                                        ("a name", "a number", "an operator")))
        kind = m.lastgroup
        if kind == "comment":
            break
        if kind != "ws":
            tokens.append(Token(kind, m.group(), line, pos + 1))
        pos = m.end()
    tokens.append(Token("eol", "", line, len(text) + 1))
    return tokens


# ---------------------------------------------------------------------------
# parser


class _Line:
    def __init__(self, tokens):
        self.tokens = tokens
        self.i = 0

    @property
    def tok(self) -> Token:
        return self.tokens[self.i]

    def peek(self, k=1) -> Token:
        return self.tokens[min(self.i + k, len(self.tokens) - 1)]

    def fail(self, message, expected=()):
        t = self.tok
        found = "end of line" if t.kind == "eol" else repr(t.text)
        raise _LineError(Diagnostic(t.line, t.column, f"{message}, found {found}", tuple(expected)))

    def op(self, text):
        if self.tok.kind == "op" and self.tok.text == text:
            self.i += 1
            return
        self.fail(f"expected {text!r}", (repr(text),))

    def at_op(self, text) -> bool:
        return self.tok.kind == "op" and self.tok.text == text

    def name(self, what="a name") -> Token:
        t = self.tok
        if t.kind != "name":
            self.fail(f"expected {what}", (what,))
        self.i += 1
        return t

    def keyword(self, choices, what) -> Token:
        t = self.tok
        if t.kind != "name" or t.text not in choices:
            self.fail(f"expected {what}", tuple(repr(c) for c in choices))
        self.i += 1
        return t

    def number(self) -> float:
        t = self.tok
        if t.kind != "number":
            self.fail("expected a number", ("a number",))
        self.i += 1
        return float(t.text)

    def end(self):
        if self.tok.kind != "eol":
            self.fail("unexpected trailing input", ("end of line",))


@dataclass
class _RawComposite:
    name: Token
    weights: str
    fixed: list  # [(Token, value)]
    anchor: Token | None
    components: list  # [Token]
    spec: str
    transmission: str | None
    pseudo: Token | None


def _parse_composite(ln: _Line) -> _RawComposite:
    ln.keyword(("composite",), "'composite'")
    name = ln.name("a composite name")
    ln.op("<~")
    wt = ln.keyword(tuple(WEIGHT_KEYWORDS), "a weight mode")
    weights = WEIGHT_KEYWORDS[wt.text]
    fixed, anchor = [], None
    if weights == "fixed":
        ln.op("(")
        while True:
            n = ln.name("a component name")
            ln.op("=")
            fixed.append((n, ln.number()))
            if ln.at_op(","):
                ln.i += 1
                continue
            ln.op(")")
            break
    elif weights == "free" and ln.at_op("(") and ln.peek().kind == "name" \
            and ln.peek().text == "anchor" and ln.peek(2).text == "=":
        ln.op("(")
        ln.keyword(("anchor",), "'anchor'")
        ln.op("=")
        anchor = ln.name("a component name")
        ln.op(")")
    ln.op("(")
    comps = [ln.name("a component name")]
    while ln.at_op(","):
        ln.i += 1
        comps.append(ln.name("a component name"))
    ln.op(")")
    ln.keyword(("using",), "'using'")
    spec = SPEC_KEYWORDS[ln.keyword(tuple(SPEC_KEYWORDS), "a specification").text]
    transmission = None
    pseudo = None
    while ln.tok.kind == "name" and ln.tok.text in ("transmit", "pseudo"):
        if ln.tok.text == "transmit" and transmission is None:
            ln.i += 1
            transmission = TRANSMIT_KEYWORDS[ln.keyword(tuple(TRANSMIT_KEYWORDS), "a transmission").text]
        elif ln.tok.text == "pseudo" and pseudo is None:
            ln.i += 1
            pseudo = ln.name("a component name")
        else:
            ln.fail(f"duplicate {ln.tok.text!r} clause", ("end of line",))
    if ln.tok.kind != "eol":
        expected = tuple(repr(k) for k, v in (("transmit", transmission), ("pseudo", pseudo))
                         if v is None) + ("end of line",)
        ln.fail("unexpected input after the specification", expected)
    return _RawComposite(name, weights, fixed, anchor, comps, spec, transmission, pseudo)


def _parse_value(ln: _Line):
    t = ln.tok
    if t.kind == "number":
        ln.i += 1
        return int(t.text) if re.fullmatch(r"[+-]?\d+", t.text) else float(t.text)
    if t.kind == "string":
        ln.i += 1
        return t.text[1:-1]
    if t.kind == "name":
        ln.i += 1
        if t.text in ("true", "false"):
            return t.text == "true"
        return t.text
    ln.fail("expected a value", ("a number", "a name", "a quoted string"))


def _parse_option(ln: _Line):
    ln.keyword(("set",), "'set'")
    key_tok = ln.name("an option name")
    parts = [key_tok.text]
    while ln.at_op("."):
        ln.i += 1
        parts.append(ln.name("an option name").text)
    ln.op("=")
    value = _parse_value(ln)
    ln.end()
    return key_tok, ".".join(parts), value


def _parse_statement(ln: _Line):
    t0, t1 = ln.tok, ln.peek()
    if t0.kind == "eol":
        return None
    if t0.kind != "name":
        ln.fail("expected a statement", ("'composite'", "'set'", "a name"))
    is_struct = t1.kind == "op" and t1.text in ("~", "~~")
    if t0.text == "composite" and not is_struct:
        return "composite", _parse_composite(ln)
    if t0.text == "set" and not is_struct:
        return "option", _parse_option(ln)
    lhs = ln.name()
    if ln.at_op("~~"):
        ln.i += 1
        rhs = ln.name()
        ln.end()
        return "covariance", (lhs, rhs)
    if ln.at_op("~"):
        ln.i += 1
        preds = [ln.name()]
        while ln.at_op("+"):
            ln.i += 1
            preds.append(ln.name())
        ln.end()
        return "regression", (lhs, preds)
    ln.fail("expected '~' or '~~'", ("'~'", "'~~'"))


# ---------------------------------------------------------------------------
# semantic pass


def _resolve(statements, diags):
    options = {}
    for kind, payload in statements:
        if kind == "option":
            key_tok, key, value = payload
            if key in options:
                diags.append(Diagnostic(key_tok.line, key_tok.column, f"option {key!r} set twice"))
            options[key] = value
    default_tx = options.get("transmission", "full")
    if default_tx in TRANSMIT_KEYWORDS:
        default_tx = TRANSMIT_KEYWORDS[default_tx]
    if default_tx not in TRANSMIT_NAMES:
        diags.append(Diagnostic(1, 1, f"unknown default transmission {default_tx!r}",
                                ("'full'", "'mimic'")))
        default_tx = "full"

    blocks, tokens = [], {}
    for kind, payload in statements:
        if kind != "composite":
            continue
        raw = payload
        nt = raw.name
        comps = [t.text for t in raw.components]
        values = None
        if raw.weights == "fixed":
            given = {t.text: v for t, v in raw.fixed}
            if len(given) != len(raw.fixed) or set(given) != set(comps):
                diags.append(Diagnostic(nt.line, nt.column,
                                        f"composite {nt.text}: fixed weights must name each component once"))
                continue
            values = tuple(given[c] for c in comps)
        pseudo = None
        for t in (raw.anchor, raw.pseudo):
            if t is None:
                continue
            if pseudo is not None and t.text != pseudo:
                diags.append(Diagnostic(t.line, t.column,
                                        f"composite {nt.text}: anchor and pseudo indicator differ"))
            pseudo = t.text
            if t.text not in comps:
                diags.append(Diagnostic(t.line, t.column,
                                        f"composite {nt.text}: {t.text!r} is not one of its components"))
        if pseudo is not None and pseudo not in comps:
            continue
        try:
            block = CompositeBlock(nt.text, tuple(comps), raw.weights, values, raw.spec,
                                   raw.transmission or default_tx, pseudo)
        except ModelSpecificationError as exc:
            diags.append(Diagnostic(nt.line, nt.column, str(exc)))
            continue
        if nt.text in tokens:
            diags.append(Diagnostic(nt.line, nt.column, f"composite {nt.text!r} declared twice"))
            continue
        tokens[nt.text] = nt
        blocks.append(block)

    declared = {b.name for b in blocks}
    regressions, covariances = [], []
    for kind, payload in statements:
        if kind == "regression":
            lhs, preds = payload
            names = [lhs] + preds
        elif kind == "covariance":
            names = list(payload)
        else:
            continue
        bad = [t for t in names if t.text not in declared]
        for t in bad:
            diags.append(Diagnostic(t.line, t.column, f"undeclared composite {t.text!r}",
                                    ("a declared composite",)))
        if bad:
            continue
        if kind == "regression":
            regressions.append(Regression(lhs.text, tuple(t.text for t in preds)))
        else:
            covariances.append((payload[0].text, payload[1].text))
    structural = StructuralSpec(tuple(regressions), tuple(covariances))

    if not diags:
        try:
            _check_structure(blocks, structural)
        except ModelSpecificationError as exc:
            diags.append(Diagnostic(1, 1, str(exc)))
        for b in blocks:
            try:
                _check_block(b, blocks, structural)
            except ModelSpecificationError as exc:
                t = tokens[b.name]
                diags.append(Diagnostic(t.line, t.column, str(exc)))
    return ModelProgram(tuple(blocks), structural, options)


@dataclass(frozen=True)
class ParseOutcome:
    program: ModelProgram | None
    diagnostics: tuple
    syntax_ok: bool

    @property
    def ok(self) -> bool:
        return self.program is not None and not self.diagnostics


def try_parse(source: str) -> ParseOutcome:
    """Parse without raising; every problem is returned as a Diagnostic."""
    statements, syntax = [], []
    for lineno, text in enumerate(source.splitlines(), start=1):
        try:
            ln = _Line(tokenize_line(text, lineno))
            st = _parse_statement(ln)
        except _LineError as exc:
            syntax.append(exc.diagnostic)
            continue
        if st is not None:
            statements.append(st)
    if syntax:
        return ParseOutcome(None, tuple(syntax), False)
    semantic = []
    program = _resolve(statements, semantic)
    return ParseOutcome(None if semantic else program, tuple(semantic), True)


def parse(source: str) -> ModelProgram:
    """Parse a model program.

    Raises
    ------
    ModelSyntaxError
        for malformed lines (all of them are reported).
    SemanticError
        for undeclared names and weight/specification mismatches.
    """
    out = try_parse(source)
    if not out.syntax_ok:
        raise ModelSyntaxError(out.diagnostics)
    if out.diagnostics:
        raise SemanticError(out.diagnostics)
    return out.program


# ---------------------------------------------------------------------------
# rendering


def _fmt_number(v: float) -> str:
    return repr(float(v))


def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return _fmt_number(v)
    s = str(v)
    if re.fullmatch(r"[A-Za-z_][A-Za-z0-9_]*", s) and s not in ("true", "false"):
        return s
    return f'"{s}"'


def render_block(b: CompositeBlock) -> str:
    if b.weights == "fixed":
        ws = "fixed(" + ", ".join(f"{c}={_fmt_number(v)}"
                                  for c, v in zip(b.components, b.fixed_values)) + ")"
    elif b.weights == "free":
        ws = "free" + (f"(anchor={b.pseudo})" if b.pseudo is not None else "")
    else:
        ws = "sum" if b.weights == "unit_sum" else "average"
    out = f"composite {b.name} <~ {ws}({', '.join(b.components)}) using {SPEC_NAMES[b.spec]}"
    out += f" transmit {TRANSMIT_NAMES[b.transmission]}"
    if b.pseudo is not None and b.weights != "free":
        out += f" pseudo {b.pseudo}"
    return out


def render(program: ModelProgram) -> str:
    """Canonical text; ``parse(render(p)) == p``."""
    lines = [render_block(b) for b in program.blocks]
    for r in program.structural.regressions:
        lines.append(f"{r.outcome} ~ {' + '.join(r.predictors)}")
    for a, b in program.structural.covariances:
        lines.append(f"{a} ~~ {b}")
    for key in sorted(program.options):
        lines.append(f"set {key} = {_fmt_value(program.options[key])}")
    return "\n".join(lines) + ("\n" if lines else "")
