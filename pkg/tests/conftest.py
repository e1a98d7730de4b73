from __future__ import annotations

import numpy as np
import pytest

from surrogate.schema import Dataset, Schema, VariableSpec


def mk_schema(cards, names=None, start=0, topic="toy survey") -> Schema:
    """Integer-coded schema V0..V{d-1}; variable j has codes start..start+k-1."""
    names = names or [f"V{j}" for j in range(len(cards))]
    return Schema(tuple(
        VariableSpec(n, f"variable {n}", "integer-coded",
                     tuple((str(start + c), f"level {c}") for c in range(k)))
        for n, k in zip(names, cards)
    ), topic)


def mk_dataset(schema: Schema, codes, role="private") -> Dataset:
    return Dataset(schema, np.asarray(codes, dtype=np.int64).reshape(-1, len(schema)), role)


def random_dataset(schema: Schema, n: int, rng) -> Dataset:
    cols = [rng.integers(0, k, n) for k in schema.cardinalities]
    return Dataset(schema, np.stack(cols, axis=1) if cols else np.zeros((n, 0), dtype=np.int64))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# Scripted agent conversation over a 3-variable schema: root R, non-roots A and B.

AGENT_MODEL = """var R ~ bernoulli(0.4);
var A | R ~ when R == 1: categorical{1: 0.5, 2: 0.3, 3: 0.2} else uniform{1, 2, 3};
var B | R, A ~ when A == 3: categorical{2: 1} when R == 2: bernoulli(0.7) else bernoulli(0.5);
"""

AGENT_VALID = {
    1: '{"variables": ["R", "A", "B"]}',
    2: '[{"description": "top A forces B", "predicate": "A == 3 implies B == 2"}]',
    3: '{"roots": ["R"]}',
    4: '{"edges": [["R", "A"], ["R", "B"]]}',
    5: '{"edges": [["A", "B"]]}',
    6: '{"nodes": ["R", "A", "B"], "edges": [["R", "A"], ["R", "B"], ["A", "B"]]}',
    7: """```
var R ~ bernoulli(p_r);
var A | R ~ when R == 1: categorical{1: a1, 2: a2, 3: a3} else uniform{1, 2, 3};
var B | R, A ~ when A == 3: categorical{2: 1} when R == 2: bernoulli(0.7) else bernoulli(p_b);
```""",
    8: '{"p_r": 0.4, "a1": 0.5, "a2": 0.3, "a3": 0.2, "p_b": 0.5}',
    9: AGENT_MODEL,
    10: AGENT_MODEL,
    11: AGENT_MODEL + 'constraint "top A forces B": A == 3 implies B == 2;\n',
}

AGENT_INVALID = {
    1: '{"variables": ["R", "A"]}',
    2: '[{"description": "bad", "predicate": "A == 9"}]',
    3: '{"roots": ["Z"]}',
    4: '{"edges": [["A", "B"]]}',
    5: '{"edges": [["R", "A"]]}',
    6: '{"nodes": ["R", "A", "B"], "edges": [["A", "B"], ["B", "A"]]}',
    7: "var R ~ bernoulli(p_r); var A | R ~ uniform{1, 2, 3}; var B | R ~ bernoulli(p_b);",
    8: '{"p_r": 0.4}',
    9: "var R ~ poisson(1);",
    10: "var R ~ bernoulli(0.4); var A ~ uniform{1, 2, 3}; var B | R, A ~ bernoulli(0.5);",
    11: AGENT_MODEL,
}


def agent_schema():
    return mk_schema([2, 3, 2], names=["R", "A", "B"], start=1, topic="toy household survey")


def agent_script(fail_states=()):
    replies = []
    for s in range(1, 12):
        if s in fail_states:
            replies.append(AGENT_INVALID[s])
        replies.append(AGENT_VALID[s])
    return replies
