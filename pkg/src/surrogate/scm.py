"""Structural causal models over categorical schemas, written in a small DSL.

Grammar (whitespace-insensitive, ``#`` starts a comment, ``;`` optional)::

    document   := (var_stmt | constraint)*
    var_stmt   := "var" NAME ["|" NAME ("," NAME)*] "~" clause* ["else"] dist
    clause     := "when" predicate ":" dist
    constraint := "constraint" [STRING] ":" predicate
    dist       := "categorical" "{" code ":" weight ("," code ":" weight)* "}"
                | "bernoulli" "(" p ")"          # p = P(second listed code)
                | "uniform" "{" code ("," code)* "}"
    predicate  := or ["implies" predicate]
    or         := and ("or" and)*
    and        := not ("and" not)*
    not        := "not" not | "(" predicate ")" | "true" | "false" | comparison
    comparison := NAME ("==" | "!=" | "<" | "<=" | ">" | ">=") (code | NAME)
                | NAME ["not"] "in" "{" code ("," code)* "}"

Guards are evaluated in order and the first match wins; the final clause has
no guard. Ordering comparisons use numeric code values for integer-coded
variables and canonical value order otherwise.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Sequence

import networkx as nx
import numpy as np

from .baselines import GenSpec, _categorical_draw
from .schema import Dataset, Schema, VariableSpec

WEIGHT_TOLERANCE = 1e-3

_KEYWORDS = {"var", "when", "else", "and", "or", "not", "in", "implies", "constraint",
             "categorical", "bernoulli", "uniform", "true", "false"}
_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r]+) | (?P<nl>\n) | (?P<comment>\#[^\n]*)
  | (?P<string>"(?:[^"\\]|\\.)*")
  | (?P<op>==|!=|<=|>=|<|>)
  | (?P<punct>[|~,:;{}()])
  | (?P<word>[A-Za-z0-9_.\-+]+)
  | (?P<bad>.)
    """,
    re.VERBOSE,
)


class ScmError(ValueError):
    def __init__(self, message: str, line: int | None = None, col: int | None = None, variable: str | None = None):
        loc = f" at line {line}, column {col}" if line is not None else ""
        super().__init__(message + loc)
        self.line, self.col, self.variable = line, col, variable


class CycleError(ScmError):
    def __init__(self, cycle: list[str]):
        super().__init__("cycle detected: " + " -> ".join(cycle))
        self.cycle = cycle


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    line: int
    col: int


def tokenize(text: str) -> list[Token]:
    tokens, line, line_start = [], 1, 0
    for m in _TOKEN_RE.finditer(text):
        kind = m.lastgroup
        col = m.start() - line_start + 1
        if kind == "nl":
            line += 1
            line_start = m.end()
        elif kind in ("ws", "comment"):
            continue
        elif kind == "bad":
            raise ScmError(f"unexpected character {m.group()!r}", line, col)
        elif kind == "string":
            tokens.append(Token("string", m.group()[1:-1].replace('\\"', '"'), line, col))
        elif kind == "word" and m.group() in _KEYWORDS:
            tokens.append(Token("kw", m.group(), line, col))
        else:
            tokens.append(Token(kind, m.group(), line, col))
    tokens.append(Token("eof", "", line, 1))
    return tokens


# Predicates -----------------------------------------------------------------

class Predicate:
    def evaluate(self, codes: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def variables(self) -> set[str]:
        raise NotImplementedError


@dataclass(frozen=True)
class Const(Predicate):
    value: bool

    def evaluate(self, codes):
        return np.full(len(codes), self.value)

    def variables(self):
        return set()

    def __str__(self):
        return "true" if self.value else "false"


@dataclass(frozen=True)
class Not(Predicate):
    inner: Predicate

    def evaluate(self, codes):
        return ~self.inner.evaluate(codes)

    def variables(self):
        return self.inner.variables()

    def __str__(self):
        return f"not ({self.inner})"


@dataclass(frozen=True)
class BoolOp(Predicate):
    op: str  # "and" | "or" | "implies"
    left: Predicate
    right: Predicate

    def evaluate(self, codes):
        a, b = self.left.evaluate(codes), self.right.evaluate(codes)
        if self.op == "and":
            return a & b
        if self.op == "or":
            return a | b
        return ~a | b

    def variables(self):
        return self.left.variables() | self.right.variables()

    def __str__(self):
        return f"({self.left}) {self.op} ({self.right})"


def _ordinal_values(var: VariableSpec) -> np.ndarray:
    if var.dtype == "integer-coded":
        try:
            return np.array([float(c) for c in var.codes])
        except ValueError:
            pass
    return np.arange(var.cardinality, dtype=float)


_CMP = {
    "==": np.equal, "!=": np.not_equal, "<": np.less, "<=": np.less_equal,
    ">": np.greater, ">=": np.greater_equal,
}


@dataclass(frozen=True)
class Compare(Predicate):
    """``var op literal`` over code indices, or ``var op other_var``."""

    var: str
    pos: int
    op: str
    lhs_values: tuple  # per code index: comparable value
    rhs_value: object = None  # literal comparable value
    rhs_var: str | None = None
    rhs_pos: int | None = None
    rhs_values: tuple | None = None
    literal: str | None = None

    def evaluate(self, codes):
        left = np.asarray(self.lhs_values, dtype=object)[codes[:, self.pos]]
        if self.rhs_var is None:
            right = self.rhs_value
        else:
            right = np.asarray(self.rhs_values, dtype=object)[codes[:, self.rhs_pos]]
        return np.asarray(_CMP[self.op](left, right), dtype=bool)

    def variables(self):
        return {self.var} | ({self.rhs_var} if self.rhs_var else set())

    def __str__(self):
        return f"{self.var} {self.op} {self.rhs_var if self.rhs_var else _fmt_code(self.literal)}"


@dataclass(frozen=True)
class Member(Predicate):
    var: str
    pos: int
    indices: frozenset
    codes_text: tuple

    def evaluate(self, codes):
        return np.isin(codes[:, self.pos], list(self.indices))

    def variables(self):
        return {self.var}

    def __str__(self):
        return f"{self.var} in {{{', '.join(_fmt_code(c) for c in self.codes_text)}}}"


def _fmt_code(code: str) -> str:
    return code if re.fullmatch(r"[A-Za-z0-9_.\-+]+", code) and code not in _KEYWORDS else '"%s"' % code


# Distributions and model ----------------------------------------------------

@dataclass(frozen=True)
class Distribution:
    kind: str  # "categorical" | "bernoulli" | "uniform"
    weights: tuple  # per code index, floats (or parameter names while unresolved)
    params: tuple = ()  # free parameter names, if any
    p: object = None  # bernoulli parameter (float or name)

    @property
    def resolved(self) -> bool:
        return not self.params

    def probabilities(self) -> np.ndarray:
        if not self.resolved:
            raise ScmError("distribution has free parameters: " + ", ".join(self.params))
        return np.asarray(self.weights, dtype=float)

    def to_text(self, var: VariableSpec) -> str:
        if self.kind == "bernoulli":
            return f"bernoulli({self.p})"
        if self.kind == "uniform":
            chosen = [c for c, w in zip(var.codes, self.weights) if w]
            return "uniform{" + ", ".join(_fmt_code(c) for c in chosen) + "}"
        items = [f"{_fmt_code(c)}: {w!r}" if not isinstance(w, str) else f"{_fmt_code(c)}: {w}"
                 for c, w in zip(var.codes, self.weights) if isinstance(w, str) or w > 0]
        return "categorical{" + ", ".join(items) + "}"

    def substitute(self, values: dict) -> "Distribution":
        if self.resolved:
            return self
        missing = [p for p in self.params if p not in values]
        if missing:
            raise ScmError("unresolved parameter(s): " + ", ".join(missing))
        if self.kind == "bernoulli":
            return _bernoulli(float(values[self.p]), len(self.weights))
        w = [float(values[x]) if isinstance(x, str) else x for x in self.weights]
        return _categorical(w)


def _categorical(weights: Sequence[float]) -> Distribution:
    w = np.asarray(weights, dtype=float)
    if (w < 0).any():
        raise ScmError("negative weight")
    total = w.sum()
    if abs(total - 1.0) > WEIGHT_TOLERANCE:
        raise ScmError(f"weights sum to {total:g}, not 1 (not normalizable)")
    return Distribution("categorical", tuple((w / total).tolist()))


def _bernoulli(p: float, k: int) -> Distribution:
    if k != 2:
        raise ScmError("bernoulli needs a two-valued variable")
    if not 0.0 <= p <= 1.0:
        raise ScmError(f"bernoulli parameter {p} outside [0, 1]")
    return Distribution("bernoulli", (1.0 - p, p), p=p)


@dataclass(frozen=True)
class Clause:
    guard: Predicate | None
    dist: Distribution


@dataclass(frozen=True)
class Constraint:
    description: str
    predicate: Predicate

    def to_text(self) -> str:
        desc = self.description.replace('"', "'")
        return f'constraint "{desc}": {self.predicate}'


@dataclass
class ScmModel:
    schema: Schema
    parents: dict[str, tuple[str, ...]]
    equations: dict[str, list[Clause]]
    constraints: list[Constraint] = field(default_factory=list)

    @property
    def free_params(self) -> list[str]:
        out = []
        for clauses in self.equations.values():
            for c in clauses:
                out += [p for p in c.dist.params if p not in out]
        return out

    @property
    def range_rules(self) -> dict[str, tuple[str, ...]]:
        return {v.name: v.codes for v in self.schema.variables}

    def topological_order(self) -> list[str]:
        return validate_dag(self.parents, self.schema)

    def substitute(self, values: dict) -> "ScmModel":
        eqs = {v: [Clause(c.guard, c.dist.substitute(values)) for c in cl] for v, cl in self.equations.items()}
        return ScmModel(self.schema, dict(self.parents), eqs, list(self.constraints))

    def to_dsl(self) -> str:
        lines = []
        for var in self.schema.variables:
            ps = self.parents.get(var.name, ())
            head = f"var {var.name}" + (f" | {', '.join(ps)}" if ps else "") + " ~"
            clauses = self.equations[var.name]
            parts = []
            for c in clauses:
                if c.guard is None:
                    parts.append(("else " if len(clauses) > 1 else "") + c.dist.to_text(var))
                else:
                    parts.append(f"when {c.guard}: {c.dist.to_text(var)}")
            lines.append(head + "\n    " + "\n    ".join(parts) + ";")
        lines += [c.to_text() + ";" for c in self.constraints]
        return "\n".join(lines) + "\n"


# Parser ---------------------------------------------------------------------

class _Parser:
    def __init__(self, text: str, schema: Schema, allow_free_params: bool):
        self.toks = tokenize(text)
        self.i = 0
        self.schema = schema
        self.allow_free = allow_free_params

    @property
    def tok(self) -> Token:
        return self.toks[self.i]

    def error(self, msg: str, tok: Token | None = None, variable: str | None = None):
        tok = tok or self.tok
        return ScmError(msg, tok.line, tok.col, variable)

    def accept(self, kind: str, text: str | None = None) -> Token | None:
        t = self.tok
        if t.kind == kind and (text is None or t.text == text):
            self.i += 1
            return t
        return None

    def expect(self, kind: str, text: str | None = None) -> Token:
        t = self.accept(kind, text)
        if t is None:
            want = text or kind
            got = self.tok.text or self.tok.kind
            raise self.error(f"expected {want!r}, found {got!r}")
        return t

    def variable(self) -> tuple[Token, VariableSpec]:
        t = self.tok
        if t.kind not in ("word", "string"):
            raise self.error(f"expected a variable name, found {t.text or t.kind!r}")
        self.i += 1
        if t.text not in self.schema:
            raise ScmError(f"unknown variable {t.text!r}", t.line, t.col, t.text)
        return t, self.schema[t.text]

    def code(self, var: VariableSpec) -> tuple[Token, int]:
        t = self.tok
        if t.kind not in ("word", "string"):
            raise self.error(f"expected a code of {var.name}, found {t.text or t.kind!r}")
        self.i += 1
        if t.text not in var.codes:
            raise ScmError(f"unknown code {t.text!r} for variable {var.name!r}", t.line, t.col, var.name)
        return t, var.codes.index(t.text)

    def code_list(self, var: VariableSpec) -> list[int]:
        self.expect("punct", "{")
        out = [self.code(var)[1]]
        while self.accept("punct", ","):
            out.append(self.code(var)[1])
        self.expect("punct", "}")
        return out

    def document(self) -> ScmModel:
        parents, equations, constraints = {}, {}, []
        while self.tok.kind != "eof":
            if self.accept("punct", ";"):
                continue
            if self.accept("kw", "var"):
                name_tok, var = self.variable()
                if var.name in equations:
                    raise ScmError(f"variable {var.name!r} has more than one equation", name_tok.line,
                                   name_tok.col, var.name)
                ps = []
                if self.accept("punct", "|"):
                    ps.append(self.variable()[1].name)
                    while self.accept("punct", ","):
                        ps.append(self.variable()[1].name)
                self.expect("punct", "~")
                parents[var.name] = tuple(ps)
                equations[var.name] = self.clauses(var, set(ps))
            elif self.accept("kw", "constraint"):
                desc = self.accept("string")
                self.expect("punct", ":")
                pred = self.predicate()
                constraints.append(Constraint(desc.text if desc else str(pred), pred))
            else:
                raise self.error(f"expected 'var' or 'constraint', found {self.tok.text or self.tok.kind!r}")
        missing = [v for v in self.schema.names if v not in equations]
        if missing:
            raise ScmError("no equation for variable(s): " + ", ".join(missing), variable=missing[0])
        return ScmModel(self.schema, parents, equations, constraints)

    def clauses(self, var: VariableSpec, parents: set[str]) -> list[Clause]:
        out = []
        while True:
            t = self.tok
            if self.accept("kw", "when"):
                guard = self.predicate()
                stray = guard.variables() - parents
                if stray:
                    bad = sorted(stray)[0]
                    raise ScmError(f"guard for {var.name!r} references non-parent {bad!r}", t.line, t.col, bad)
                self.expect("punct", ":")
                out.append(Clause(guard, self.dist(var)))
                continue
            had_else = self.accept("kw", "else") is not None
            if self.tok.kind == "kw" and self.tok.text in ("categorical", "bernoulli", "uniform"):
                out.append(Clause(None, self.dist(var)))
                return out
            if self.tok.kind == "word":
                raise ScmError(f"unsupported distribution {self.tok.text!r} (use categorical, bernoulli or uniform)",
                               self.tok.line, self.tok.col, var.name)
            if had_else:
                raise self.error("expected a distribution after 'else'")
            raise ScmError(f"equation for {var.name!r} lacks an unconditional default clause",
                           t.line, t.col, var.name)

    def number(self, var: VariableSpec) -> float | str:
        t = self.tok
        if t.kind != "word":
            raise self.error(f"expected a number, found {t.text or t.kind!r}")
        self.i += 1
        try:
            return float(t.text)
        except ValueError:
            if self.allow_free and re.fullmatch(r"[A-Za-z_][A-Za-z0-9_]*", t.text):
                return t.text
            raise ScmError(f"expected a numeric weight, found {t.text!r}", t.line, t.col, var.name) from None

    def dist(self, var: VariableSpec) -> Distribution:
        t = self.expect("kw")
        try:
            if t.text == "categorical":
                self.expect("punct", "{")
                weights: list = [0.0] * var.cardinality
                while True:
                    ct, idx = self.code(var)
                    self.expect("punct", ":")
                    if weights[idx] != 0.0:
                        raise ScmError(f"code {ct.text!r} listed twice", ct.line, ct.col, var.name)
                    weights[idx] = self.number(var)
                    if not self.accept("punct", ","):
                        break
                self.expect("punct", "}")
                params = tuple(w for w in weights if isinstance(w, str))
                if params:
                    return Distribution("categorical", tuple(weights), params)
                return _categorical(weights)
            if t.text == "bernoulli":
                self.expect("punct", "(")
                p = self.number(var)
                self.expect("punct", ")")
                if isinstance(p, str):
                    if var.cardinality != 2:
                        raise ScmError("bernoulli needs a two-valued variable")
                    return Distribution("bernoulli", (0.0, 0.0), (p,), p=p)
                return _bernoulli(p, var.cardinality)
            if t.text == "uniform":
                idx = sorted(set(self.code_list(var)))
                w = [1.0 / len(idx) if i in idx else 0.0 for i in range(var.cardinality)]
                return Distribution("uniform", tuple(w))
        except ScmError as err:
            if err.line is None:
                raise ScmError(str(err), t.line, t.col, var.name) from None
            raise
        raise ScmError(f"unsupported distribution {t.text!r}", t.line, t.col, var.name)

    # predicates
    def predicate(self) -> Predicate:
        left = self.disjunction()
        if self.accept("kw", "implies"):
            return BoolOp("implies", left, self.predicate())
        return left

    def disjunction(self) -> Predicate:
        node = self.conjunction()
        while self.accept("kw", "or"):
            node = BoolOp("or", node, self.conjunction())
        return node

    def conjunction(self) -> Predicate:
        node = self.negation()
        while self.accept("kw", "and"):
            node = BoolOp("and", node, self.negation())
        return node

    def negation(self) -> Predicate:
        if self.accept("kw", "not"):
            return Not(self.negation())
        if self.accept("punct", "("):
            node = self.predicate()
            self.expect("punct", ")")
            return node
        if self.accept("kw", "true"):
            return Const(True)
        if self.accept("kw", "false"):
            return Const(False)
        return self.comparison()

    def comparison(self) -> Predicate:
        _, var = self.variable()
        pos = self.schema.position(var.name)
        negate = self.accept("kw", "not") is not None
        if self.accept("kw", "in"):
            idx = self.code_list(var)
            node = Member(var.name, pos, frozenset(idx), tuple(var.codes[i] for i in idx))
            return Not(node) if negate else node
        if negate:
            raise self.error("expected 'in' after 'not'")
        op = self.expect("op").text
        rhs = self.tok
        if rhs.kind not in ("word", "string"):
            raise self.error(f"expected a code or variable after {op!r}")
        ordinal = op not in ("==", "!=")
        if rhs.text in var.codes or (rhs.text not in self.schema):
            self.i += 1
            if ordinal:
                lhs_vals = _ordinal_values(var)
                if rhs.text in var.codes:
                    value = lhs_vals[var.codes.index(rhs.text)]
                elif var.dtype == "integer-coded":
                    try:
                        value = float(rhs.text)
                    except ValueError:
                        raise ScmError(f"unknown code {rhs.text!r} for variable {var.name!r}",
                                       rhs.line, rhs.col, var.name) from None
                else:
                    raise ScmError(f"unknown code {rhs.text!r} for variable {var.name!r}", rhs.line, rhs.col, var.name)
                return Compare(var.name, pos, op, tuple(lhs_vals.tolist()), value, literal=rhs.text)
            if rhs.text not in var.codes:
                raise ScmError(f"unknown code {rhs.text!r} for variable {var.name!r}", rhs.line, rhs.col, var.name)
            return Compare(var.name, pos, op, tuple(range(var.cardinality)), var.codes.index(rhs.text),
                           literal=rhs.text)
        self.i += 1
        other = self.schema[rhs.text]
        if ordinal:
            lv, rv = _ordinal_values(var), _ordinal_values(other)
        else:
            lv, rv = np.array(var.codes, dtype=object), np.array(other.codes, dtype=object)
        return Compare(var.name, pos, op, tuple(lv.tolist()), rhs_var=other.name,
                       rhs_pos=self.schema.position(other.name), rhs_values=tuple(rv.tolist()))


def parse_predicate(text: str, schema: Schema) -> Predicate:
    p = _Parser(text, schema, False)
    node = p.predicate()
    if p.tok.kind != "eof":
        raise p.error(f"unexpected {p.tok.text!r} after predicate")
    return node


def parse_constraint(text: str, schema: Schema, description: str = "") -> Constraint:
    pred = parse_predicate(text, schema)
    return Constraint(description or str(pred), pred)


def parse_equation(text: str, var: str, parents: Sequence[str], schema: Schema,
                   allow_free_params: bool = True) -> list[Clause]:
    """Parse the clause list (the part after ``~``) for one variable."""
    p = _Parser(text, schema, allow_free_params)
    clauses = p.clauses(schema[var], set(parents))
    p.accept("punct", ";")
    if p.tok.kind != "eof":
        raise p.error(f"unexpected {p.tok.text!r} after equation")
    return clauses


def parse_scm(text: str, schema: Schema, allow_free_params: bool = False) -> ScmModel:
    """Parse and validate a DSL document; raises :class:`ScmError` on any defect."""
    model = _Parser(text, schema, allow_free_params).document()
    validate_dag(model.parents, schema)
    return model


def validate_dag(parents, schema: Schema | None = None) -> list[str]:
    """Topological order of ``parents`` (node -> parent names) or :class:`CycleError`."""
    if isinstance(parents, ScmModel):
        schema, parents = parents.schema, parents.parents
    g = nx.DiGraph()
    nodes = list(schema.names) if schema is not None else list(parents)
    g.add_nodes_from(nodes)
    for child, ps in parents.items():
        for p in ps:
            g.add_edge(p, child)
    rank = {n: i for i, n in enumerate(nodes)}
    try:
        return list(nx.lexicographical_topological_sort(g, key=lambda n: rank.get(n, len(rank))))
    except nx.NetworkXUnfeasible:
        edges = nx.find_cycle(g)
        raise CycleError([edges[0][0]] + [e[1] for e in edges]) from None


def eval_constraint(constraint: Constraint, record: Sequence[str], schema: Schema) -> bool:
    """Truth value of ``constraint`` on one record given as code strings."""
    row = np.array([[schema.variables[j].codes.index(str(c)) for j, c in enumerate(record)]])
    return bool(constraint.predicate.evaluate(row)[0])


@dataclass
class ScmSample:
    dataset: Dataset
    repaired: np.ndarray  # False where the record still violates a constraint
    draws: int
    rejections: int
    violations: dict[str, int]
    attempts_used: int

    @property
    def rejection_rate(self) -> float:
        return self.rejections / self.draws if self.draws else 0.0

    @property
    def n_unrepaired(self) -> int:
        return int((~self.repaired).sum())


def _draw_records(model: ScmModel, order: list[str], m: int, rng: np.random.Generator) -> np.ndarray:
    schema = model.schema
    codes = np.zeros((m, len(schema)), dtype=np.int64)
    for name in order:
        pos = schema.position(name)
        todo = np.ones(m, dtype=bool)
        for clause in model.equations[name]:
            mask = todo if clause.guard is None else todo & clause.guard.evaluate(codes)
            rows = np.flatnonzero(mask)
            if len(rows):
                probs = clause.dist.probabilities()
                codes[rows, pos] = _categorical_draw(np.broadcast_to(probs, (len(rows), len(probs))), rng)
            todo &= ~mask
    return codes


def sample_scm(model: ScmModel, spec: GenSpec, max_attempts_per_record: int = 10) -> ScmSample:
    """Ancestral sampling with per-record rejection of constraint violations.

    Records still violating a constraint after ``max_attempts_per_record`` draws
    are kept from their final draw and flagged ``repaired=False``.
    """
    if model.free_params:
        raise ScmError("model has free parameters: " + ", ".join(model.free_params))
    if max_attempts_per_record < 1:
        raise ValueError("max_attempts_per_record must be >= 1")
    order = model.topological_order()
    m = spec.target_m
    codes = np.zeros((m, len(model.schema)), dtype=np.int64)
    pending = np.arange(m)
    draws = rejections = 0
    violations = {c.description: 0 for c in model.constraints}
    attempt = 0
    bad = np.zeros(0, dtype=bool)
    for attempt in range(1, max_attempts_per_record + 1):
        rng = np.random.default_rng(np.random.SeedSequence([int(spec.seed), attempt]))
        fresh = _draw_records(model, order, len(pending), rng)
        codes[pending] = fresh
        bad = np.zeros(len(pending), dtype=bool)
        for c in model.constraints:
            fails = ~c.predicate.evaluate(fresh)
            violations[c.description] += int(fails.sum())
            bad |= fails
        draws += len(pending)
        rejections += int(bad.sum())
        if not bad.any() or attempt == max_attempts_per_record:
            break
        pending = pending[bad]
    repaired = np.ones(m, dtype=bool)
    if bad.any():
        repaired[pending[bad]] = False
    if not repaired.any():
        raise ScmError(f"constraints unsatisfiable: no record accepted after {attempt} attempts "
                       f"(violations: {violations})")
    return ScmSample(Dataset(model.schema, codes, role="surrogate"), repaired, draws, rejections,
                     violations, attempt)
