"""Dataset-vs-dataset quality metrics.

All error metrics compare empirical distributions, so datasets of unequal
size are handled by rescaling the candidate's counts to the reference size
(equivalently, comparing normalised frequencies).
"""

from __future__ import annotations

import itertools
from dataclasses import astuple, dataclass, fields
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .schema import Dataset, Schema, VariableSpec

METRIC_GROUPS = {
    "marginals": ("tvd", "max_3way", "avg_3way", "max_binarized", "avg_binarized"),
    "correlations": ("max_pearson", "avg_pearson", "max_cramers_v", "avg_cramers_v"),
    "classification": ("error_rate_diff", "auc_diff"),
}


def _check_pair(a: Dataset, b: Dataset):
    if a.schema.cardinalities != b.schema.cardinalities or a.schema.names != b.schema.names:
        raise ValueError("datasets must share a schema")
    if len(a) == 0 or len(b) == 0:
        raise ValueError("empty dataset")


def _row_keys(codes: np.ndarray) -> np.ndarray:
    # rows as void scalars: exact and overflow-free for any domain size
    c = np.ascontiguousarray(codes)
    return c.view(np.dtype((np.void, c.dtype.itemsize * c.shape[1]))).ravel()


def tvd(a: Dataset, b: Dataset) -> float:
    """Total variation distance between the empirical joint distributions."""
    _check_pair(a, b)
    ka, kb = _row_keys(a.codes), _row_keys(b.codes)
    keys, inv = np.unique(np.concatenate([ka, kb]), return_inverse=True)
    pa = np.bincount(inv[: len(ka)], minlength=len(keys)) / len(ka)
    pb = np.bincount(inv[len(ka):], minlength=len(keys)) / len(kb)
    return float(0.5 * np.abs(pa - pb).sum())


def tvs(a: Dataset, b: Dataset) -> float:
    return 1.0 - tvd(a, b)


@dataclass(frozen=True)
class CellQuery:
    """Indicator of one cell of the marginal over ``attrs`` (schema positions)."""

    attrs: tuple[int, ...]
    cell: tuple[int, ...]

    def __call__(self, record_codes: Sequence[int]) -> bool:
        return all(record_codes[a] == c for a, c in zip(self.attrs, self.cell))

    def mask(self, codes: np.ndarray) -> np.ndarray:
        out = np.ones(len(codes), dtype=bool)
        for a, c in zip(self.attrs, self.cell):
            out &= codes[:, a] == c
        return out


Workload = list  # of predicates


def linear_query(predicate: Callable, dataset: Dataset) -> int:
    """Number of records satisfying ``predicate``.

    ``predicate`` receives a row of code indices; :class:`CellQuery` objects
    take a vectorised path.
    """
    if isinstance(predicate, CellQuery):
        return int(predicate.mask(dataset.codes).sum())
    return int(sum(bool(predicate(row)) for row in dataset.codes))


def kway_workload(schema: Schema, k: int) -> Workload:
    out = []
    card = schema.cardinalities
    for attrs in itertools.combinations(range(len(schema)), k):
        for cell in itertools.product(*(range(card[a]) for a in attrs)):
            out.append(CellQuery(attrs, cell))
    return out


def workload_error(workload: Iterable[Callable], a: Dataset, b: Dataset) -> float:
    return float(sum(abs(linear_query(q, a) - linear_query(q, b)) for q in workload))


def marginal_counts(codes: np.ndarray, card: Sequence[int], attrs: Sequence[int]) -> np.ndarray:
    shape = tuple(card[i] for i in attrs)
    if not attrs:
        return np.array([len(codes)])
    flat = np.ravel_multi_index(tuple(codes[:, i] for i in attrs), shape)
    return np.bincount(flat, minlength=int(np.prod(shape)))


def avg_kway_error(a: Dataset, b: Dataset, k: int) -> tuple[float, float]:
    """(average, max) k-way marginal error, normalised by |A| (and |W| for the average).

    The average is taken over attribute subsets, each subset contributing the
    summed absolute cell differences; ``b`` is rescaled to ``|a|`` records.
    """
    _check_pair(a, b)
    d = len(a.schema)
    if k > d or k < 1:
        raise ValueError(f"k={k} invalid for {d} attributes")
    card = a.schema.cardinalities
    scale = len(a) / len(b)
    per_subset = []
    for attrs in itertools.combinations(range(d), k):
        ca = marginal_counts(a.codes, card, attrs)
        cb = marginal_counts(b.codes, card, attrs) * scale
        per_subset.append(np.abs(ca - cb).sum() / len(a))
    per_subset = np.asarray(per_subset)
    return float(per_subset.mean()), float(per_subset.max())


def binarize_schema(schema: Schema) -> Schema:
    def flat(v: VariableSpec) -> VariableSpec:
        if v.cardinality == 1:
            return VariableSpec(v.name, v.description, "integer-coded", (("0", "all"),))
        return VariableSpec(v.name, v.description, "integer-coded", (("0", "low"), ("1", "high")))

    return Schema(tuple(flat(v) for v in schema.variables), schema.topic)


def binarize(dataset: Dataset) -> Dataset:
    """Split each variable's canonical value order at ceil(k/2): lower half -> 0."""
    cut = np.array([(k + 1) // 2 for k in dataset.schema.cardinalities])
    codes = (dataset.codes >= cut).astype(np.int64)
    if len(dataset.schema) == 0:
        return dataset
    if all(k == 2 for k in dataset.schema.cardinalities):
        return dataset
    return Dataset(binarize_schema(dataset.schema), codes, dataset.role, dataset.splits)


def binarized_marginal_error(a: Dataset, b: Dataset, k: int = 3) -> tuple[float, float]:
    return avg_kway_error(binarize(a), binarize(b), k)


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    """Pearson correlation of code indices; 0 when either column is constant."""
    x = x.astype(float) - x.mean()
    y = y.astype(float) - y.mean()
    sx, sy = np.sqrt((x * x).sum()), np.sqrt((y * y).sum())
    if sx == 0 or sy == 0:
        return 0.0
    return float((x * y).sum() / (sx * sy))


def cramers_v_table(table: np.ndarray) -> float:
    """Cramer's V of a contingency table; empty rows/columns are dropped."""
    t = np.asarray(table, dtype=float)
    t = t[t.sum(axis=1) > 0][:, t.sum(axis=0) > 0]
    n = t.sum()
    r, c = t.shape
    if n == 0 or min(r, c) < 2:
        return 0.0
    expected = np.outer(t.sum(axis=1), t.sum(axis=0)) / n
    chi2 = ((t - expected) ** 2 / expected).sum()
    return float(np.sqrt(min(chi2 / (n * (min(r, c) - 1)), 1.0)))


def cramers_v(x: np.ndarray, y: np.ndarray, kx: int, ky: int) -> float:
    table = np.zeros((kx, ky))
    np.add.at(table, (x, y), 1)
    return cramers_v_table(table)


def correlation_diffs(a: Dataset, b: Dataset) -> tuple[float, float, float, float]:
    """(pearson avg, pearson max, cramers_v avg, cramers_v max) over variable pairs."""
    _check_pair(a, b)
    d = len(a.schema)
    if d < 2:
        raise ValueError("need at least two variables")
    card = a.schema.cardinalities
    dp, dv = [], []
    for i, j in itertools.combinations(range(d), 2):
        dp.append(abs(pearson(a.codes[:, i], a.codes[:, j]) - pearson(b.codes[:, i], b.codes[:, j])))
        dv.append(abs(cramers_v(a.codes[:, i], a.codes[:, j], card[i], card[j])
                      - cramers_v(b.codes[:, i], b.codes[:, j], card[i], card[j])))
    return float(np.mean(dp)), float(np.max(dp)), float(np.mean(dv)), float(np.max(dv))


def classification_diffs(train_real: Dataset, train_synth: Dataset, test: Dataset, target: str,
                         seed: int = 0, **train_kw) -> tuple[float, float]:
    """|error-rate difference| and |AUC difference| of models trained on real vs synthetic data."""
    from .classifier import DPLogisticClassifier, auc, encode_features

    train_kw = {"epochs": 20, "batch_size": 64, "learning_rate": 0.05, **train_kw}
    results = []
    X_test, y_test = encode_features(test, target)
    if len(np.unique(y_test)) < 2:
        raise ValueError("test split must contain both classes")
    for train in (train_real, train_synth):
        X, y = encode_features(train, target)
        if len(np.unique(y)) < 2:
            raise ValueError("training set has a single class")
        clf = DPLogisticClassifier(private=False, random_state=seed, **train_kw).fit(X, y)
        scores = clf.decision_function(X_test)
        err = float(np.mean((scores > 0).astype(int) != y_test))
        results.append((err, auc(scores, y_test)))
    (e1, a1), (e2, a2) = results
    return abs(e1 - e2), abs(a1 - a2)


@dataclass(frozen=True)
class MetricVector:
    tvd: float
    max_3way: float
    avg_3way: float
    max_binarized: float
    avg_binarized: float
    max_pearson: float
    avg_pearson: float
    max_cramers_v: float
    avg_cramers_v: float
    error_rate_diff: float
    auc_diff: float

    @classmethod
    def names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.names(), astuple(self)))

    def group_means(self) -> dict[str, float]:
        d = self.as_dict()
        return {g: float(np.mean([d[m] for m in ms])) for g, ms in METRIC_GROUPS.items()}


def metric_vector(real: Dataset, synth: Dataset, test: Dataset, target: str, seed: int = 0) -> MetricVector:
    """Every quality metric of ``synth`` against ``real`` (classification uses ``test``)."""
    k = min(3, len(real.schema))
    avg3, max3 = avg_kway_error(real, synth, k)
    avgb, maxb = binarized_marginal_error(real, synth, k)
    pa, pm, va, vm = correlation_diffs(real, synth)
    try:
        err, aucd = classification_diffs(real, synth, test, target, seed)
    except ValueError:
        # single-class synthetic data: worst-case classification transfer
        err, aucd = 1.0, 1.0
    return MetricVector(tvd(real, synth), max3, avg3, maxb, avgb, pm, pa, vm, va, err, aucd)


@dataclass(frozen=True)
class SimilarityRow:
    name: str
    one_minus_tvd: float
    one_minus_3wm: float


def similarity_report(reference: Dataset, candidates: Mapping[str, Dataset]) -> list[SimilarityRow]:
    """100*(1-TVD) and 100*(1-avg 3-way error) per candidate, one decimal.

    Similarities are floored at 0 since the 3-way error can exceed 1.
    """
    k = min(3, len(reference.schema))
    rows = []
    for name, cand in candidates.items():
        t = tvd(reference, cand)
        w, _ = avg_kway_error(reference, cand, k)
        rows.append(SimilarityRow(name, round(100 * max(0.0, 1 - t), 1), round(100 * max(0.0, 1 - w), 1)))
    return rows


def render_similarity(rows: Sequence[SimilarityRow], sep: str = "\t") -> str:
    def cell(x: float) -> str:
        return "" if x == 0 else f"{x:.1f}"

    lines = [sep.join(["Method", "1-TVD", "1-3WM"])]
    lines += [sep.join([r.name, cell(r.one_minus_tvd), cell(r.one_minus_3wm)]) for r in rows]
    return "\n".join(lines) + "\n"
