"""Baseline surrogate generators: Uniform, Univariate and Arbitrary.

The Arbitrary baseline draws a random Bayesian network over the schema
(random node order, bounded random parent sets, Dirichlet CPT rows) and
samples from it ancestrally. It never sees private records.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .schema import Dataset, Schema


@dataclass(frozen=True)
class GenSpec:
    target_m: int
    seed: int = 0

    def __post_init__(self):
        if self.target_m < 1:
            raise ValueError("target_m must be >= 1")


def _as_schema(X) -> Schema:
    if isinstance(X, Schema):
        return X
    if isinstance(X, Dataset):
        return X.schema
    raise TypeError(f"expected Schema or Dataset, got {type(X).__name__}")


def _categorical_draw(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw one index per row of ``probs`` (rows sum to 1) by inverse CDF."""
    cum = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[0])[:, None] * cum[:, -1:]
    idx = (u >= cum).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


class BayesNet:
    """DAG over schema positions with one CPT per node.

    ``parents[v]`` is a tuple of schema positions; ``cpts[v]`` has shape
    ``(n_configs, k_v)`` where parent configurations are enumerated in
    C order over the parents' code indices (``np.ravel_multi_index``).
    """

    def __init__(self, schema: Schema, order, parents: dict, cpts: dict):
        self.schema = schema
        self.order = [int(v) for v in order]
        self.parents = {int(v): tuple(int(p) for p in ps) for v, ps in parents.items()}
        self.cpts = {int(v): np.asarray(t, dtype=float) for v, t in cpts.items()}
        self._check()

    def _check(self):
        d = len(self.schema)
        if sorted(self.order) != list(range(d)):
            raise ValueError("node order must be a permutation of schema positions")
        rank = {v: i for i, v in enumerate(self.order)}
        card = self.schema.cardinalities
        for v in self.order:
            ps = self.parents.get(v, ())
            if any(rank[p] >= rank[v] for p in ps):
                raise ValueError(f"parent of {self.schema.names[v]} does not precede it")
            n_conf = int(np.prod([card[p] for p in ps])) if ps else 1
            t = self.cpts[v]
            if t.shape != (n_conf, card[v]):
                raise ValueError(f"CPT for {self.schema.names[v]} has shape {t.shape}, expected {(n_conf, card[v])}")
            if (t < 0).any() or not np.allclose(t.sum(axis=1), 1.0, atol=1e-9):
                raise ValueError(f"CPT rows for {self.schema.names[v]} must be distributions")

    def config_index(self, v: int, codes: np.ndarray) -> np.ndarray:
        ps = self.parents.get(v, ())
        if not ps:
            return np.zeros(len(codes), dtype=np.int64)
        card = self.schema.cardinalities
        return np.ravel_multi_index(tuple(codes[:, p] for p in ps), tuple(card[p] for p in ps))

    def sample(self, m: int, seed) -> np.ndarray:
        rng = np.random.default_rng(seed)
        codes = np.zeros((m, len(self.schema)), dtype=np.int64)
        for v in self.order:
            probs = self.cpts[v][self.config_index(v, codes)]
            codes[:, v] = _categorical_draw(probs, rng)
        return codes

    @property
    def edges(self) -> list[tuple[str, str]]:
        names = self.schema.names
        return [(names[p], names[v]) for v in self.order for p in self.parents.get(v, ())]

    def to_dict(self) -> dict:
        names = self.schema.names
        return {
            "order": [names[v] for v in self.order],
            "parents": {names[v]: [names[p] for p in self.parents.get(v, ())] for v in self.order},
            "cpts": {names[v]: self.cpts[v].tolist() for v in self.order},
        }

    @classmethod
    def from_dict(cls, schema: Schema, doc: dict) -> "BayesNet":
        pos = schema.position
        return cls(
            schema,
            [pos(n) for n in doc["order"]],
            {pos(n): [pos(p) for p in ps] for n, ps in doc["parents"].items()},
            {pos(n): t for n, t in doc["cpts"].items()},
        )


def build_random_bn(schema: Schema, d_max: int = 5, alpha: float = 1.0, seed=None) -> BayesNet:
    """Random Bayesian network from the schema alone.

    Parent-set size for the i-th node is uniform on ``0..min(d_max, i-1)``,
    then the set is a uniform subset of the preceding nodes of that size.
    """
    if d_max < 0:
        raise ValueError("d_max must be >= 0")
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    rng = np.random.default_rng(seed)
    d = len(schema)
    card = schema.cardinalities
    order = rng.permutation(d).tolist()
    parents, cpts = {}, {}
    for i, v in enumerate(order):
        cap = min(d_max, i)
        size = int(rng.integers(0, cap + 1))
        ps = tuple(sorted(rng.choice(order[:i], size=size, replace=False).tolist())) if size else ()
        n_conf = int(np.prod([card[p] for p in ps])) if ps else 1
        parents[v] = ps
        cpts[v] = rng.dirichlet(np.full(card[v], alpha), size=n_conf)
    return BayesNet(schema, order, parents, cpts)


def sample_bn(bn: BayesNet, spec: GenSpec) -> Dataset:
    return Dataset(bn.schema, bn.sample(spec.target_m, spec.seed), role="surrogate")


def round_half_up_probs(counts: np.ndarray, decimals: int = 2) -> np.ndarray:
    """Empirical frequencies rounded half away from zero, then renormalised.

    Uses exact integer arithmetic so ties such as 0.125 round up reliably.
    If every value rounds to zero the raw frequencies are returned.
    """
    counts = np.asarray(counts, dtype=np.int64)
    n = int(counts.sum())
    scale = 10**decimals
    units = (2 * scale * counts + n) // (2 * n)
    if units.sum() == 0:
        return counts / n
    return units / units.sum()


class UniformGenerator(BaseEstimator):
    """Samples every cell independently and uniformly over its allowed codes."""

    def __init__(self, random_state=None):
        self.random_state = random_state

    def fit(self, X, y=None):
        self.schema_ = _as_schema(X)
        return self

    def sample(self, n_samples: int, random_state=None) -> Dataset:
        check_is_fitted(self, "schema_")
        rng = np.random.default_rng(self.random_state if random_state is None else random_state)
        card = np.asarray(self.schema_.cardinalities)
        codes = (rng.random((n_samples, len(card))) * card).astype(np.int64)
        return Dataset(self.schema_, np.minimum(codes, card - 1), role="surrogate")


class UnivariateGenerator(BaseEstimator):
    """Independent per-column sampling from rounded empirical marginals.

    Codes whose rounded probability is zero cannot be sampled.
    """

    def __init__(self, decimals: int = 2, random_state=None):
        self.decimals = decimals
        self.random_state = random_state

    def fit(self, X: Dataset, y=None):
        if not isinstance(X, Dataset):
            raise TypeError("UnivariateGenerator needs a Dataset")
        if len(X) == 0:
            raise ValueError("cannot fit on an empty dataset")
        self.schema_ = X.schema
        self.marginals_ = [
            round_half_up_probs(np.bincount(X.codes[:, j], minlength=v.cardinality), self.decimals)
            for j, v in enumerate(X.schema.variables)
        ]
        return self

    def sample(self, n_samples: int, random_state=None) -> Dataset:
        check_is_fitted(self, "marginals_")
        rng = np.random.default_rng(self.random_state if random_state is None else random_state)
        cols = [_categorical_draw(np.broadcast_to(p, (n_samples, len(p))), rng) for p in self.marginals_]
        codes = np.stack(cols, axis=1) if cols else np.zeros((n_samples, 0), dtype=np.int64)
        return Dataset(self.schema_, codes, role="surrogate")


class ArbitraryGenerator(BaseEstimator):
    """Random-structure Bayesian network built from the schema only."""

    def __init__(self, d_max: int = 5, alpha: float = 1.0, random_state=None):
        self.d_max = d_max
        self.alpha = alpha
        self.random_state = random_state

    def fit(self, X, y=None):
        self.bn_ = build_random_bn(_as_schema(X), self.d_max, self.alpha, self.random_state)
        return self

    def sample(self, n_samples: int, random_state=None) -> Dataset:
        check_is_fitted(self, "bn_")
        seed = self.random_state if random_state is None else random_state
        return Dataset(self.bn_.schema, self.bn_.sample(n_samples, seed), role="surrogate")


def gen_uniform(schema: Schema, spec: GenSpec) -> Dataset:
    return UniformGenerator(spec.seed).fit(schema).sample(spec.target_m)


def gen_univariate(private: Dataset, spec: GenSpec) -> Dataset:
    return UnivariateGenerator(random_state=spec.seed).fit(private).sample(spec.target_m)


def gen_arbitrary(schema: Schema, spec: GenSpec, d_max: int = 5, alpha: float = 1.0) -> tuple[Dataset, BayesNet]:
    gen = ArbitraryGenerator(d_max, alpha, spec.seed).fit(schema)
    return gen.sample(spec.target_m), gen.bn_
