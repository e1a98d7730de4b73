"""Schema and dataset model for categorical tabular data.

A :class:`Schema` is an ordered list of categorical variables, each with a
canonical ordered list of codes. A :class:`Dataset` stores records as an
integer matrix of code *indices* (row ``i``, column ``j`` holds the position of
the record's code within variable ``j``'s value list), which keeps every
downstream computation vectorised while preserving exact string codes for I/O.
"""

from __future__ import annotations

import csv
import io
import json
import re
from dataclasses import dataclass, field
from math import prod
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

ROLES = ("private", "public", "surrogate")
SPLITS = ("train", "valid", "test", "none")
SPLIT_RATIO = (0.72, 0.08, 0.20)

_INT_DTYPES = {"int", "int8", "int16", "int32", "int64", "integer", "integer-coded"}
_STR_DTYPES = {"str", "string", "object", "category", "categorical", "string-coded"}


class SchemaError(ValueError):
    """Malformed schema document or invalid schema construction."""

    def __init__(self, message: str, variable: str | None = None, line: int | None = None):
        where = []
        if variable is not None:
            where.append(f"variable {variable!r}")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.variable = variable
        self.line = line


class RecordError(ValueError):
    """A raw row failed validation; ``columns`` names every offending column."""

    def __init__(self, message: str, columns: Sequence[str] = ()):
        super().__init__(message)
        self.columns = list(columns)


@dataclass(frozen=True)
class VariableSpec:
    name: str
    description: str
    dtype: str  # "integer-coded" | "string-coded"
    values: tuple[tuple[str, str], ...]  # (code, meaning), canonical order

    def __post_init__(self):
        if not self.values:
            raise SchemaError("empty values list", self.name)
        codes = [c for c, _ in self.values]
        if len(set(codes)) != len(codes):
            raise SchemaError("duplicate codes", self.name)
        if self.dtype not in ("integer-coded", "string-coded"):
            raise SchemaError(f"unknown dtype {self.dtype!r}", self.name)

    @property
    def codes(self) -> tuple[str, ...]:
        return tuple(c for c, _ in self.values)

    @property
    def cardinality(self) -> int:
        return len(self.values)

    def index_of(self, code: str) -> int:
        try:
            return self.codes.index(code)
        except ValueError:
            raise RecordError(f"unknown code {code!r} for {self.name}", [self.name]) from None


@dataclass(frozen=True)
class Schema:
    variables: tuple[VariableSpec, ...]
    topic: str = ""
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.variables:
            raise SchemaError("schema must contain at least one variable")
        seen = set()
        for v in self.variables:
            if v.name in seen:
                raise SchemaError("duplicate variable name", v.name)
            seen.add(v.name)
        object.__setattr__(self, "_index", {v.name: i for i, v in enumerate(self.variables)})

    @property
    def names(self) -> list[str]:
        return [v.name for v in self.variables]

    @property
    def cardinalities(self) -> list[int]:
        return [v.cardinality for v in self.variables]

    def __len__(self) -> int:
        return len(self.variables)

    def __getitem__(self, name: str) -> VariableSpec:
        return self.variables[self.position(name)]

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def position(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise SchemaError("unknown variable", name) from None

    def subschema(self, names: Iterable[str]) -> "Schema":
        return Schema(tuple(self[n] for n in names), self.topic)

    def to_dict(self) -> dict:
        return {
            v.name: {
                "description": v.description,
                "dtype": "int64" if v.dtype == "integer-coded" else "str",
                "values": {c: m for c, m in v.values},
            }
            for v in self.variables
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False)


def _line_of(text: str, name: str, occurrence: int = 0) -> int | None:
    hits = [m.start() for m in re.finditer(r'"%s"\s*:' % re.escape(name), text)]
    if len(hits) <= occurrence:
        return None
    return text.count("\n", 0, hits[occurrence]) + 1


def _normalize_dtype(raw, name: str, line: int | None) -> str:
    key = str(raw).strip().lower()
    if key in _INT_DTYPES:
        return "integer-coded"
    if key in _STR_DTYPES:
        return "string-coded"
    if key.startswith("float") or key in {"continuous", "real", "double"}:
        raise SchemaError("continuous variables are not supported; discretise into coded values", name, line)
    raise SchemaError(f"unknown dtype {raw!r}", name, line)


def parse_schema(text: str, topic: str = "") -> Schema:
    """Parse a JSON schema document (variable name -> description/dtype/values).

    Raises :class:`SchemaError` naming the variable and line for malformed
    documents, duplicate names, empty value lists, and continuous ranges.
    """
    dup: list[str] = []

    def pairs_hook(pairs):
        keys = [k for k, _ in pairs]
        for k in set(keys):
            if keys.count(k) > 1:
                dup.append(k)
        return dict(pairs)

    try:
        doc = json.loads(text, object_pairs_hook=pairs_hook)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"malformed document: {exc.msg}", line=exc.lineno) from exc
    if dup:
        raise SchemaError("duplicate variable name", dup[0], _line_of(text, dup[0], 1))
    if not isinstance(doc, dict):
        raise SchemaError("schema document must be a JSON object", line=1)

    variables = []
    for name, spec in doc.items():
        line = _line_of(text, name)
        if not isinstance(spec, dict):
            raise SchemaError("variable entry must be an object", name, line)
        if "values" not in spec:
            if any(k in spec for k in ("range", "min", "max")):
                raise SchemaError("continuous ranges are not supported; only coded values", name, line)
            raise SchemaError("missing 'values'", name, line)
        values = spec["values"]
        if isinstance(values, list):
            values = {str(v): str(v) for v in values}
        if not isinstance(values, dict):
            raise SchemaError("'values' must map code to meaning", name, line)
        if not values:
            raise SchemaError("empty values list", name, line)
        dtype = _normalize_dtype(spec.get("dtype", "str"), name, line)
        variables.append(
            VariableSpec(
                name=str(name),
                description=str(spec.get("description", "")),
                dtype=dtype,
                values=tuple((str(c), str(m)) for c, m in values.items()),
            )
        )
    if not variables:
        raise SchemaError("schema must contain at least one variable", line=1)
    return Schema(tuple(variables), topic)


def load_schema(path: str | Path, topic: str = "") -> Schema:
    return parse_schema(Path(path).read_text(encoding="utf-8"), topic)


class DomainSize(NamedTuple):
    count: int
    saturated: bool


_SATURATION = 2**63 - 1


def domain_size(schema: Schema) -> DomainSize:
    """Number of distinct records in the universe; saturates at 2**63 - 1."""
    total = prod(schema.cardinalities)
    if total > _SATURATION:
        return DomainSize(_SATURATION, True)
    return DomainSize(total, False)


Record = tuple  # one code string per schema variable, schema-ordered


def validate_record(schema: Schema, row: Sequence[str]) -> Record:
    """Return the row as a Record or raise :class:`RecordError` listing bad columns."""
    row = [str(t).strip() for t in row]
    if len(row) != len(schema):
        raise RecordError(f"expected {len(schema)} fields, got {len(row)}", [])
    bad = [v.name for v, tok in zip(schema.variables, row) if tok not in v.codes]
    if bad:
        raise RecordError("unknown code in column(s): " + ", ".join(bad), bad)
    return tuple(row)


def validate_rows(schema: Schema, rows: Iterable[Sequence[str]]) -> tuple[list[Record], list[RecordError]]:
    """Validate a batch; returns (accepted records, rejections)."""
    accepted, rejected = [], []
    for row in rows:
        try:
            accepted.append(validate_record(schema, row))
        except RecordError as err:
            rejected.append(err)
    return accepted, rejected


class Dataset:
    """Immutable multiset of schema-valid records with per-record split labels."""

    def __init__(self, schema: Schema, codes, role: str = "private", splits=None):
        codes = np.asarray(codes, dtype=np.int64)
        if codes.ndim != 2 or codes.shape[1] != len(schema):
            if codes.size == 0:
                codes = codes.reshape(0, len(schema))
            else:
                raise ValueError(f"codes must have shape (n, {len(schema)})")
        card = np.asarray(schema.cardinalities)
        if codes.size and ((codes < 0).any() or (codes >= card).any()):
            raise RecordError("code index out of range for schema")
        if role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}")
        if splits is None:
            splits = np.full(len(codes), "none", dtype=object)
        splits = np.asarray(splits, dtype=object)
        if splits.shape != (len(codes),) or not set(splits.tolist()) <= set(SPLITS):
            raise ValueError("split labels must be one of train/valid/test/none per record")
        codes.setflags(write=False)
        splits.setflags(write=False)
        self.schema = schema
        self.codes = codes
        self.role = role
        self.splits = splits

    @classmethod
    def from_records(cls, schema: Schema, records: Iterable[Sequence[str]], role: str = "private") -> "Dataset":
        lookup = [{c: i for i, c in enumerate(v.codes)} for v in schema.variables]
        rows = []
        for rec in records:
            rec = validate_record(schema, rec)
            rows.append([lookup[j][c] for j, c in enumerate(rec)])
        return cls(schema, np.array(rows, dtype=np.int64).reshape(-1, len(schema)), role)

    def __len__(self) -> int:
        return len(self.codes)

    def __repr__(self) -> str:
        return f"Dataset(n={len(self)}, d={len(self.schema)}, role={self.role!r})"

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Dataset)
            and self.schema == other.schema
            and self.role == other.role
            and np.array_equal(self.codes, other.codes)
            and np.array_equal(self.splits, other.splits)
        )

    __hash__ = None

    def records(self) -> list[Record]:
        cols = [np.asarray(v.codes, dtype=object)[self.codes[:, j]] for j, v in enumerate(self.schema.variables)]
        return [tuple(r) for r in zip(*cols)] if cols else []

    def column(self, name: str) -> np.ndarray:
        return self.codes[:, self.schema.position(name)]

    def take(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.schema, self.codes[index], self.role, self.splits[index])

    def split(self, label: str) -> "Dataset":
        return self.take(np.flatnonzero(self.splits == label))

    def with_role(self, role: str) -> "Dataset":
        return Dataset(self.schema, self.codes, role, self.splits)

    def with_splits(self, splits) -> "Dataset":
        return Dataset(self.schema, self.codes, self.role, splits)

    def to_csv(self, path_or_buf=None) -> str | None:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.schema.names)
        writer.writerows(self.records())
        text = buf.getvalue()
        if path_or_buf is None:
            return text
        Path(path_or_buf).write_text(text, encoding="utf-8")
        return None

    @classmethod
    def from_csv(cls, schema: Schema, path_or_text, role: str = "private") -> "Dataset":
        text = str(path_or_text)
        if "\n" not in text and Path(text).exists():
            text = Path(text).read_text(encoding="utf-8")
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if header is None:
            return cls(schema, np.zeros((0, len(schema)), dtype=np.int64), role)
        header = [h.strip() for h in header]
        missing = [n for n in schema.names if n not in header]
        if missing:
            raise RecordError("CSV header lacks column(s): " + ", ".join(missing), missing)
        order = [header.index(n) for n in schema.names]
        rows = [[row[i] for i in order] for row in reader if row]
        return cls.from_records(schema, rows, role)


def split_dataset(dataset: Dataset, seed: int, ratio: Sequence[float] = SPLIT_RATIO) -> Dataset:
    """Label records train/valid/test in ``ratio`` using largest-remainder rounding."""
    n = len(dataset)
    if n < 10:
        raise ValueError(f"dataset too small to split ({n} < 10 records)")
    exact = np.asarray(ratio, dtype=float) / sum(ratio) * n
    counts = np.floor(exact).astype(int)
    remainder = n - counts.sum()
    # stable sort keeps declared order for equal fractions
    order = np.argsort(-(exact - counts), kind="stable")
    counts[order[:remainder]] += 1
    perm = np.random.default_rng(seed).permutation(n)
    labels = np.empty(n, dtype=object)
    start = 0
    for name, c in zip(("train", "valid", "test"), counts):
        labels[perm[start:start + c]] = name
        start += c
    return dataset.with_splits(labels)


def balance_by_downsampling(dataset: Dataset, target: str, seed: int) -> Dataset:
    """Downsample the majority class of a binary ``target`` to the minority count."""
    var = dataset.schema[target]
    if var.cardinality != 2:
        raise ValueError(f"target {target!r} must be binary, has {var.cardinality} values")
    y = dataset.column(target)
    idx = [np.flatnonzero(y == k) for k in (0, 1)]
    sizes = [len(i) for i in idx]
    if min(sizes) == 0:
        raise ValueError(f"target {target!r} has an absent class (counts {sizes})")
    m = min(sizes)
    rng = np.random.default_rng(seed)
    keep = np.concatenate([i if len(i) == m else rng.choice(i, size=m, replace=False) for i in idx])
    return dataset.take(np.sort(keep))
