from __future__ import annotations

import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from surrogate.baselines import GenSpec, gen_uniform
from surrogate.llm import (
    ChatRequest, LLMClient, MockTransport, expected_collision_rate, header_test, row_completion_test, score_row,
)

from conftest import mk_schema


def regurgitator(dataset):
    """Mock that finds the prompt block in the data and continues it verbatim."""
    rows = [list(r) for r in dataset.records()]

    def reply(req: ChatRequest) -> str:
        lines = list(csv.reader(io.StringIO(req.user[-1])))[1:]
        for start in range(len(rows)):
            if rows[start:start + len(lines)] == lines:
                rest = rows[start + len(lines):]
                return "\n".join(",".join(r) for r in rest)
        return ""

    return LLMClient(MockTransport(reply), sleep=lambda s: None)


def noise_mock(schema, seed):
    state = {"i": 0}

    def reply(req):
        state["i"] += 1
        ds = gen_uniform(schema, GenSpec(12, seed * 100_000 + state["i"]))
        return "\n".join(",".join(r) for r in ds.records())

    return LLMClient(MockTransport(reply), sleep=lambda s: None)


@pytest.fixture
def data():
    return gen_uniform(mk_schema([3, 4, 2, 5], start=1), GenSpec(60, 0))


def test_regurgitation_header(data):
    rep = header_test(regurgitator(data), data, n_prompt_rows=5, n_completion_rows=10)
    assert rep.exact_match_rate == 1.0 and rep.char_similarity == 1.0
    assert rep.cell_rates()["correct"] == 1.0
    assert not rep.failed_to_reproduce()


def test_regurgitation_row_completion(data):
    rep = row_completion_test(regurgitator(data), data, n_trials=10, seed=1)
    assert rep.exact_match_rate == 1.0 and rep.n_rows == 10


def test_echoed_header_is_dropped(data):
    names = ",".join(data.schema.names)
    body = "\n".join(",".join(r) for r in data.records()[5:15])
    llm = LLMClient(MockTransport(f"```\n{names}\n{body}\n```"), sleep=lambda s: None)
    assert header_test(llm, data).exact_match_rate == 1.0


def test_uniform_noise_near_collision_floor():
    s = mk_schema([2, 2, 3])
    data = gen_uniform(s, GenSpec(200, 5))
    n = 400
    rep = row_completion_test(noise_mock(s, 1), data, n_trials=n, seed=2)
    p = expected_collision_rate(s.cardinalities)
    assert p == pytest.approx(1 / 12)
    assert abs(rep.exact_match_rate - p) <= 3 * np.sqrt(p * (1 - p) / n)
    assert rep.cell_rates()["correct"] == pytest.approx(np.mean([1 / 2, 1 / 2, 1 / 3]), abs=0.05)


def test_noise_header_fails(data):
    rep = header_test(noise_mock(data.schema, 3), data)
    assert rep.exact_match_rate <= 0.3 and rep.failed_to_reproduce()


def test_row_completion_guards(data):
    llm = regurgitator(data)
    with pytest.raises(ValueError):
        row_completion_test(llm, data, n_trials=0)
    with pytest.raises(ValueError):
        row_completion_test(llm, data.take(np.arange(20)), n_trials=3)


def test_score_row_labels():
    ref = ["1", "2", "3", "4"]
    assert score_row(None, ref) == ["missing"] * 4
    assert score_row(["1", "9", "3", "4"], ref) == ["correct", "incorrect", "correct", "correct"]
    # dropped cell is aligned rather than shifting every later cell
    assert score_row(["1", "3", "4"], ref) == ["correct", "missing", "correct", "correct"]
    assert score_row(["1", "2", "x", "3", "4"], ref) == ["correct"] * 4


def test_unparseable_completion_flagged(data):
    llm = LLMClient(MockTransport("I cannot help with that request."), sleep=lambda s: None)
    rep = header_test(llm, data)
    assert rep.parse_failed and rep.exact_match_rate == 0.0
    assert rep.cell_rates()["missing"] == 1.0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from("abc"), min_size=1, max_size=6), st.data())
def test_more_correct_cells_never_scores_lower(ref, draw):
    # a prediction correct on a superset of positions scores at least as high
    wrong = draw.draw(st.lists(st.booleans(), min_size=len(ref), max_size=len(ref)))
    fix = draw.draw(st.integers(0, len(ref) - 1))
    worse = [("z" if w else r) for r, w in zip(ref, wrong)]
    better = list(worse)
    better[fix] = ref[fix]
    c = lambda row: score_row(row, ref).count("correct")
    assert c(better) >= c(worse)
