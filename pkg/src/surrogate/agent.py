"""LLM agent that builds a structural causal model state by state, plus panel mixing.

Each state sends one prompt, validates the reply, and either advances or
re-prompts itself with the validation failure appended. Steps 1-6 and 8 reply
in JSON; steps 7 and 9-11 reply in the SCM DSL.
"""

from __future__ import annotations

import enum
import json
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .baselines import GenSpec
from .llm import AGENT_TEMPERATURE, ChatRequest, LLMClient, LLMError
from .metrics import tvd
from .scm import ScmError, ScmModel, parse_constraint, parse_scm, sample_scm, validate_dag
from .schema import Dataset, Schema

DEFAULT_PANEL_SIZE = 8


class AgentState(enum.IntEnum):
    SCHEMA = 1
    ELICIT_CONSTRAINTS = 2
    ROOT_NODES = 3
    ROOT_TO_NON_ROOT_EDGES = 4
    NON_ROOT_TO_NON_ROOT_EDGES = 5
    DAG = 6
    STRUCTURAL_EQUATIONS = 7
    PARAMETERS = 8
    ASSEMBLE_MODEL = 9
    ENFORCE_RANGE = 10
    ENFORCE_CONSTRAINTS = 11
    SAMPLE = 12


@dataclass
class StateLog:
    state: AgentState
    attempts: int = 0
    failures: list[str] = field(default_factory=list)
    output: str | None = None

    def to_dict(self) -> dict:
        return {"state": self.state.name, "step": int(self.state), "attempts": self.attempts,
                "failures": list(self.failures), "output": self.output}


@dataclass
class AgentRunLog:
    states: list[StateLog] = field(default_factory=list)
    aborted_at: AgentState | None = None

    @property
    def total_retries(self) -> int:
        return sum(max(0, s.attempts - 1) for s in self.states)

    def get(self, state: AgentState) -> StateLog | None:
        return next((s for s in self.states if s.state == state), None)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(s.to_dict()) + "\n" for s in self.states)

    def save(self, path: str | Path):
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")


class AgentAbort(RuntimeError):
    def __init__(self, state: AgentState, log: AgentRunLog):
        last = log.get(state).failures[-1] if log.get(state) and log.get(state).failures else "?"
        super().__init__(f"agent gave up in state {state.name}: {last}")
        self.state = state
        self.log = log


class ValidationFailure(ValueError):
    pass


# Reply parsing -------------------------------------------------------------

_FENCED = re.compile(r"```[A-Za-z]*\n(.*?)```", re.S)


def _strip_fences(text: str) -> str:
    m = _FENCED.search(text)
    return m.group(1) if m else text


def _json_reply(text: str):
    body = _strip_fences(text).strip()
    starts = [i for i in (body.find("["), body.find("{")) if i >= 0]
    if not starts:
        raise ValidationFailure("the answer contained no JSON value")
    try:
        value, _ = json.JSONDecoder().raw_decode(body[min(starts):])
    except json.JSONDecodeError as err:
        raise ValidationFailure(f"the answer was not valid JSON ({err.msg} at position {err.pos})") from None
    return value


def _name_list(value, key: str) -> list[str]:
    if isinstance(value, dict):
        value = value.get(key)
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise ValidationFailure(f"expected a JSON list of variable names (or an object with key {key!r})")
    return value


def _edge_list(value) -> list[tuple[str, str]]:
    if isinstance(value, dict):
        value = value.get("edges")
    if not isinstance(value, list):
        raise ValidationFailure("expected a JSON list of [parent, child] pairs")
    out = []
    for e in value:
        if isinstance(e, dict):
            e = [e.get("parent"), e.get("child")]
        if not (isinstance(e, (list, tuple)) and len(e) == 2 and all(isinstance(x, str) for x in e)):
            raise ValidationFailure(f"malformed edge {e!r}; use [parent, child]")
        out.append((e[0], e[1]))
    return out


DSL_GUIDE = """Write the model in this exact language (nothing else):
  var NAME | PARENT1, PARENT2 ~
      when PREDICATE: DIST
      else DIST;
Root variables omit "| ...". Clauses are tried in order; the final clause has no "when".
DIST is one of: categorical{CODE: weight, ...} (weights sum to 1), bernoulli(p) for two-valued
variables (p is the probability of the second listed code), uniform{CODE, ...}.
PREDICATE compares parents with codes: A == 1, A != 2, A in {1, 2}, A <= 3, joined by and, or, not, parentheses.
Constraint lines: constraint "description": PREDICATE;  ("X implies Y" is allowed in constraints.)
Use only codes listed in the schema. Comments start with #."""


# Validation gates ----------------------------------------------------------

@dataclass
class _Context:
    schema: Schema
    constraints: list = field(default_factory=list)
    constraint_specs: list = field(default_factory=list)
    roots: list[str] = field(default_factory=list)
    edges_root: list[tuple[str, str]] = field(default_factory=list)
    edges_rest: list[tuple[str, str]] = field(default_factory=list)
    parents: dict[str, tuple[str, ...]] = field(default_factory=dict)
    equations: str = ""
    template: ScmModel | None = None
    model: ScmModel | None = None


def _check_variables(ctx: _Context, text: str):
    names = _name_list(_json_reply(text), "variables")
    want = set(ctx.schema.names)
    missing = [n for n in ctx.schema.names if n not in names]
    extra = sorted(set(names) - want)
    dups = sorted({n for n in names if names.count(n) > 1})
    problems = []
    if missing:
        problems.append("the following variables were missing: " + ", ".join(missing))
    if extra:
        problems.append("the following names are not schema variables: " + ", ".join(extra))
    if dups:
        problems.append("the following variables were listed more than once: " + ", ".join(dups))
    if problems:
        raise ValidationFailure("; ".join(problems))


def _check_constraints(ctx: _Context, text: str):
    value = _json_reply(text)
    if isinstance(value, dict):
        value = value.get("constraints")
    if not isinstance(value, list):
        raise ValidationFailure('expected a JSON list of {"description": ..., "predicate": ...} objects')
    out, specs = [], []
    for i, item in enumerate(value):
        if not isinstance(item, dict) or not isinstance(item.get("predicate"), str):
            raise ValidationFailure(f"constraint #{i + 1} lacks a string 'predicate'")
        desc = str(item.get("description", ""))
        try:
            out.append(parse_constraint(item["predicate"], ctx.schema, desc))
        except ScmError as err:
            raise ValidationFailure(f"constraint #{i + 1} ({item['predicate']!r}) does not parse: {err}") from None
        specs.append({"description": desc, "predicate": item["predicate"]})
    ctx.constraints, ctx.constraint_specs = out, specs


def _check_roots(ctx: _Context, text: str):
    roots = _name_list(_json_reply(text), "roots")
    if not roots:
        raise ValidationFailure("at least one root variable is needed")
    bad = [r for r in roots if r not in ctx.schema]
    if bad:
        raise ValidationFailure("the following roots are not schema variables: " + ", ".join(bad))
    if len(set(roots)) != len(roots):
        raise ValidationFailure("root variables were listed more than once")
    ctx.roots = roots


def _edge_problems(ctx: _Context, edges, parent_ok: Callable, child_ok: Callable, what: str) -> list[str]:
    problems, seen = [], set()
    for p, c in edges:
        for v in (p, c):
            if v not in ctx.schema:
                problems.append(f"{v!r} is not a schema variable")
        if p == c:
            problems.append(f"self-loop on {p}")
        elif p in ctx.schema and c in ctx.schema:
            if not parent_ok(p):
                problems.append(f"edge {p} -> {c}: parent must be {what[0]}")
            if not child_ok(c):
                problems.append(f"edge {p} -> {c}: child must be {what[1]}")
        if (p, c) in seen:
            problems.append(f"duplicate edge {p} -> {c}")
        seen.add((p, c))
    return problems


def _check_root_edges(ctx: _Context, text: str):
    edges = _edge_list(_json_reply(text))
    roots = set(ctx.roots)
    problems = _edge_problems(ctx, edges, lambda p: p in roots, lambda c: c not in roots,
                              ("a root variable", "a non-root variable"))
    if problems:
        raise ValidationFailure("; ".join(problems))
    ctx.edges_root = edges


def _check_rest_edges(ctx: _Context, text: str):
    edges = _edge_list(_json_reply(text))
    roots = set(ctx.roots)
    problems = _edge_problems(ctx, edges, lambda p: p not in roots, lambda c: c not in roots,
                              ("a non-root variable", "a non-root variable"))
    problems += [f"edge {p} -> {c} was already proposed" for p, c in edges if (p, c) in set(ctx.edges_root)]
    if problems:
        raise ValidationFailure("; ".join(problems))
    ctx.edges_rest = edges


def _check_dag(ctx: _Context, text: str):
    value = _json_reply(text)
    if not isinstance(value, dict):
        raise ValidationFailure('expected {"nodes": [...], "edges": [[parent, child], ...]}')
    nodes = _name_list(value, "nodes")
    edges = _edge_list(value.get("edges", []))
    missing = [n for n in ctx.schema.names if n not in nodes]
    dups = sorted({n for n in nodes if nodes.count(n) > 1})
    extra = sorted(set(nodes) - set(ctx.schema.names))
    problems = []
    if missing:
        problems.append("the following variables were missing from the graph: " + ", ".join(missing))
    if dups:
        problems.append("variables appearing more than once: " + ", ".join(dups))
    if extra:
        problems.append("unknown variables: " + ", ".join(extra))
    problems += _edge_problems(ctx, edges, lambda p: True, lambda c: True, ("", ""))
    if problems:
        raise ValidationFailure("; ".join(problems))
    parents = {n: tuple(p for p, c in edges if c == n) for n in ctx.schema.names}
    try:
        validate_dag(parents, ctx.schema)
    except ScmError as err:
        cyc = getattr(err, "cycle", None)
        raise ValidationFailure("the graph has a cycle: " + " -> ".join(cyc) if cyc else str(err)) from None
    ctx.parents = parents


def _parents_mismatch(ctx: _Context, model: ScmModel) -> list[str]:
    out = []
    for n in ctx.schema.names:
        got, want = set(model.parents.get(n, ())), set(ctx.parents[n])
        if got != want:
            out.append(f"{n} must have parents {sorted(want) or 'none'} but has {sorted(got) or 'none'}")
    return out


def _check_equations(ctx: _Context, text: str):
    doc = _strip_fences(text)
    try:
        model = parse_scm(doc, ctx.schema, allow_free_params=True)
    except ScmError as err:
        raise ValidationFailure(f"the equations do not parse: {err}") from None
    problems = _parents_mismatch(ctx, model)
    if problems:
        raise ValidationFailure("the equations disagree with the DAG: " + "; ".join(problems))
    ctx.equations = doc
    ctx.template = model


def _check_parameters(ctx: _Context, text: str):
    value = _json_reply(text)
    if not isinstance(value, dict):
        raise ValidationFailure("expected a JSON object mapping parameter names to numbers")
    free = ctx.template.free_params
    missing = [p for p in free if p not in value]
    if missing:
        raise ValidationFailure("no value was given for parameter(s): " + ", ".join(missing))
    bad = [k for k in free if not isinstance(value[k], (int, float)) or isinstance(value[k], bool)]
    if bad:
        raise ValidationFailure("non-numeric value for parameter(s): " + ", ".join(bad))
    try:
        ctx.model = ctx.template.substitute(value)
    except ScmError as err:
        raise ValidationFailure(f"the parameter values are invalid: {err}") from None


def _check_whole_model(ctx: _Context, text: str, need_constraints: bool = False):
    try:
        model = parse_scm(_strip_fences(text), ctx.schema)
    except ScmError as err:
        raise ValidationFailure(f"the model does not parse: {err}") from None
    problems = _parents_mismatch(ctx, model)
    if problems:
        raise ValidationFailure("the model changed the DAG: " + "; ".join(problems))
    if need_constraints:
        if ctx.constraints and not model.constraints:
            raise ValidationFailure("none of the elicited constraints were included")
        if model.constraints:
            probe = sample_scm(model.__class__(model.schema, model.parents, model.equations, []),
                               GenSpec(2000, 0), 1).dataset.codes
            ok = np.ones(len(probe), dtype=bool)
            for c in model.constraints:
                ok &= c.predicate.evaluate(probe)
            if not ok.any():
                raise ValidationFailure("the constraints reject every record the equations produce")
    ctx.model = model


# Prompts -------------------------------------------------------------------

def _prompt(state: AgentState, ctx: _Context) -> str:
    schema_block = ctx.schema.dumps()
    edges = [list(e) for e in ctx.edges_root + ctx.edges_rest]
    if state == AgentState.SCHEMA:
        return ("Here is a dataset schema:\n" + schema_block +
                '\nList every variable name in the schema. Reply with JSON: {"variables": [...]}.')
    if state == AgentState.ELICIT_CONSTRAINTS:
        return ("Propose realistic consistency constraints that every record of this data should satisfy, "
                "e.g. logical relationships between variables. Schema:\n" + schema_block +
                '\nReply with JSON: [{"description": "...", "predicate": "..."}]. Predicates use the syntax '
                "A == 1, A in {1, 2}, A <= 3, and/or/not/implies, using only schema codes. Reply [] if none.")
    if state == AgentState.ROOT_NODES:
        return ("Which variables are exogenous, i.e. unlikely to be caused by other variables in the schema? "
                "These will be root nodes of a causal graph. Variables: " + ", ".join(ctx.schema.names) +
                '\nReply with JSON: {"roots": [...]}.')
    if state == AgentState.ROOT_TO_NON_ROOT_EDGES:
        rest = [n for n in ctx.schema.names if n not in ctx.roots]
        return (f"Root variables: {ctx.roots}. Other variables: {rest}.\nPropose direct causal edges from root "
                'variables to other variables. Reply with JSON: {"edges": [[parent, child], ...]}.')
    if state == AgentState.NON_ROOT_TO_NON_ROOT_EDGES:
        rest = [n for n in ctx.schema.names if n not in ctx.roots]
        return (f"Non-root variables: {rest}. Edges so far: {edges}.\nPropose additional direct causal edges "
                'between non-root variables only. Reply with JSON: {"edges": [[parent, child], ...]}.')
    if state == AgentState.DAG:
        return (f"Proposed edges: {edges}.\nReturn the final causal graph. It must contain every variable "
                "exactly once and have no directed cycles; drop edges if needed. Reply with JSON: "
                '{"nodes": [...], "edges": [[parent, child], ...]}.')
    if state == AgentState.STRUCTURAL_EQUATIONS:
        parents = "\n".join(f"  {n}: {list(ctx.parents[n])}" for n in ctx.schema.names)
        return ("Schema:\n" + schema_block + "\nParents of each variable:\n" + parents +
                "\nWrite one structural equation per variable, conditioning only on its parents. Weights may "
                "be named parameters (identifiers) to be filled in later.\n" + DSL_GUIDE)
    if state == AgentState.PARAMETERS:
        free = ctx.template.free_params
        return ("Equations:\n" + ctx.equations + f"\nAssign a numeric value to every parameter: {free}. "
                "Probabilities within one distribution must sum to 1. Reply with a JSON object "
                '{"name": value, ...} (reply {} if there are none).')
    if state == AgentState.ASSEMBLE_MODEL:
        return ("Here is the assembled model:\n" + ctx.model.to_dsl() +
                "\nCheck it against the schema and return the complete model unchanged or corrected, "
                "keeping the same parents.\n" + DSL_GUIDE)
    if state == AgentState.ENFORCE_RANGE:
        return ("Schema:\n" + schema_block + "\nModel:\n" + ctx.model.to_dsl() +
                "\nMake sure every distribution only uses codes allowed by the schema and return the complete "
                "model.\n" + DSL_GUIDE)
    if state == AgentState.ENFORCE_CONSTRAINTS:
        cons = json.dumps(ctx.constraint_specs)
        return ("Model:\n" + ctx.model.to_dsl() + "\nAdd these constraints as constraint lines and return the "
                f"complete model: {cons}\n" + DSL_GUIDE)
    raise ValueError(state)


_GATES = {
    AgentState.SCHEMA: _check_variables,
    AgentState.ELICIT_CONSTRAINTS: _check_constraints,
    AgentState.ROOT_NODES: _check_roots,
    AgentState.ROOT_TO_NON_ROOT_EDGES: _check_root_edges,
    AgentState.NON_ROOT_TO_NON_ROOT_EDGES: _check_rest_edges,
    AgentState.DAG: _check_dag,
    AgentState.STRUCTURAL_EQUATIONS: _check_equations,
    AgentState.PARAMETERS: _check_parameters,
    AgentState.ASSEMBLE_MODEL: _check_whole_model,
    AgentState.ENFORCE_RANGE: _check_whole_model,
    AgentState.ENFORCE_CONSTRAINTS: lambda ctx, text: _check_whole_model(ctx, text, need_constraints=True),
}


def _system_prompt(schema: Schema, member: int | None) -> str:
    topic = schema.topic or "this survey"
    s = (f"You are a domain expert in {topic} designing a structural causal model for a dataset, using only "
         "the schema. Follow the requested reply format exactly.")
    if member is not None:
        s += f" You are expert number {member + 1} on a panel; reason independently."
    return s


def run_agent(llm: LLMClient, schema: Schema, max_retries: int = 3, seed: int = 0,
              member: int | None = None) -> tuple[ScmModel, AgentRunLog]:
    """Drive states 1-11 to a validated model; the Sample state is left to :func:`sample_scm`.

    ``max_retries`` bounds the attempts made in each state.
    """
    if max_retries < 1:
        raise ValueError("max_retries must be >= 1")
    ctx = _Context(schema)
    log = AgentRunLog()
    system = _system_prompt(schema, member)
    for state in list(AgentState)[:-1]:
        entry = StateLog(state)
        log.states.append(entry)
        request = ChatRequest(system, (_prompt(state, ctx),), temperature=AGENT_TEMPERATURE)
        while True:
            entry.attempts += 1
            text = llm.complete(request).text
            try:
                _GATES[state](ctx, text)
            except ValidationFailure as err:
                entry.failures.append(str(err))
                if entry.attempts >= max_retries:
                    log.aborted_at = state
                    raise AgentAbort(state, log) from None
                request = request.with_user(f"Your previous answer was:\n{text}\n\nIt was rejected because "
                                            f"{err}. Please answer again, fixing this.")
                continue
            entry.output = text
            break
    log.states.append(StateLog(AgentState.SAMPLE, attempts=0, output=None))
    return ctx.model, log


@dataclass
class PanelResult:
    datasets: list[Dataset]
    models: list[ScmModel]
    logs: list[AgentRunLog]
    failures: list[str]


def run_panel(llm: LLMClient, schema: Schema, target_m: int, panel_size: int = DEFAULT_PANEL_SIZE,
              max_retries: int = 3, seed: int = 0, workers: int = 1,
              max_attempts_per_record: int = 10) -> PanelResult:
    """Independent agent runs; failed members are reported, not fatal."""
    def member(i: int):
        try:
            model, log = run_agent(llm, schema, max_retries, seed, member=i)
            sample = sample_scm(model, GenSpec(target_m, seed * 1000 + i), max_attempts_per_record)
            return sample.dataset, model, log, None
        except (AgentAbort, LLMError, ScmError) as err:
            return None, None, getattr(err, "log", None), f"member {i}: {err}"

    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(member, range(panel_size)))
    out = PanelResult([], [], [], [])
    for ds, model, log, fail in results:
        if fail:
            out.failures.append(fail)
            if log is not None:
                out.logs.append(log)
            continue
        out.datasets.append(ds)
        out.models.append(model)
        out.logs.append(log)
    return out


# Mixing --------------------------------------------------------------------

def _check_pool(datasets: Sequence[Dataset]):
    if not datasets:
        raise ValueError("need at least one dataset")
    names = datasets[0].schema.names
    if any(d.schema.names != names or d.schema.cardinalities != datasets[0].schema.cardinalities
           for d in datasets):
        raise ValueError("datasets must share a schema")
    if sum(len(d) for d in datasets) == 0:
        raise ValueError("empty pool")


def mix_uniform(datasets: Sequence[Dataset], target_m: int, seed=None) -> Dataset:
    """Draw ``target_m`` records uniformly with replacement from the pooled records."""
    _check_pool(datasets)
    pool = np.concatenate([d.codes for d in datasets if len(d)], axis=0)
    idx = np.random.default_rng(seed).integers(0, len(pool), target_m)
    return Dataset(datasets[0].schema, pool[idx], role="surrogate")


def similarity_matrix(datasets: Sequence[Dataset]) -> np.ndarray:
    n = len(datasets)
    s = np.ones((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            s[i, j] = s[j, i] = 1.0 - tvd(datasets[i], datasets[j])
    return s


def facility_location(sim: np.ndarray, selected: Sequence[int]) -> float:
    if not len(selected):
        return 0.0
    return float(sim[:, list(selected)].max(axis=1).sum())


def greedy_facility_location(sim: np.ndarray, k: int) -> list[int]:
    """Greedy maximisation of sum_i max_{j in S} sim[i, j]; ties go to the lower index."""
    n = len(sim)
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}]")
    chosen: list[int] = []
    best = np.zeros(n)
    for _ in range(k):
        gains = np.maximum(sim, best[:, None]).sum(axis=0) - best.sum()
        gains[chosen] = -np.inf
        j = int(np.argmax(gains))
        chosen.append(j)
        best = np.maximum(best, sim[:, j])
    return chosen


def mix_max_coverage(datasets: Sequence[Dataset], k: int | None, target_m: int,
                     seed=None) -> tuple[Dataset, list[int]]:
    """Select ``k`` representative datasets by facility location over TV similarity, then mix uniformly."""
    _check_pool(datasets)
    if k is None:
        k = math.ceil(len(datasets) / 2)
    chosen = greedy_facility_location(similarity_matrix(datasets), k)
    return mix_uniform([datasets[j] for j in chosen], target_m, seed), chosen
