"""Direct record generation: ask an LLM for CSV rows in batches and keep the schema-valid ones."""

from __future__ import annotations

import csv
import json
import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

from .llm import CSV_TEMPERATURE, ChatRequest, LLMClient
from .schema import Dataset, RecordError, Schema, validate_record

log = logging.getLogger(__name__)

SYSTEM_TEMPLATE = """You are an expert in {domain} who generates synthetic data that closely mirrors real-world {domain} data. Your goal is to create data that would be indistinguishable from real {domain} records.

Follow exactly these rules:
1. Only output the CSV data with no additional text or explanations
2. Always include a header row matching the schema exactly
3. Strictly adhere to the provided schema's data types and possible values for all fields
4. Use comma as the separator
5. Ensure all values and relationships between fields are realistic and statistically plausible
6. Generate diverse data while maintaining real-world patterns and constraints
7. Include occasional edge cases at realistic frequencies"""

USER_TEMPLATE = """Generate {num_rows} rows of data with these fields:

{schema}"""

_FENCE = re.compile(r"^\s*```")


@dataclass(frozen=True)
class CsvGenConfig:
    target_m: int
    rows_per_batch: int = 50
    max_batches: int = 100
    temperature: float = CSV_TEMPERATURE
    max_tokens: int = 8192
    workers: int = 1

    def __post_init__(self):
        if self.target_m < 1:
            raise ValueError("target_m must be >= 1")
        if self.rows_per_batch < 1:
            raise ValueError("rows_per_batch must be >= 1")
        if self.max_batches < 1 or self.workers < 1:
            raise ValueError("max_batches and workers must be >= 1")


@dataclass(frozen=True)
class BatchStats:
    batch: int
    requested: int
    parsed: int
    valid: int

    @property
    def validity(self) -> float:
        return self.valid / self.parsed if self.parsed else 0.0


@dataclass
class CsvGenResult:
    dataset: Dataset
    batches: list[BatchStats]
    batch_of_record: list[int]
    short: bool = False

    def yield_report(self) -> str:
        return "".join(json.dumps({**asdict(b), "validity": b.validity}) + "\n" for b in self.batches)


def build_csv_prompt(schema: Schema, num_rows: int, temperature: float = CSV_TEMPERATURE,
                     domain: str | None = None) -> ChatRequest:
    if num_rows < 1:
        raise ValueError("num_rows must be >= 1")
    topic = domain or schema.topic or "tabular survey data"
    system = SYSTEM_TEMPLATE.format(domain=topic)
    user = USER_TEMPLATE.format(num_rows=num_rows, schema=schema.dumps())
    return ChatRequest(system, (user,), temperature=temperature, max_tokens=8192)


def parse_csv_rows(text: str, schema: Schema) -> list[list[str]]:
    """CSV rows of a completion with fences and header echoes removed.

    A header echo in a different column order is honoured: later rows are
    permuted back to schema order.
    """
    names = schema.names
    lines = [ln for ln in text.splitlines() if ln.strip() and not _FENCE.match(ln)]
    rows, perm = [], None
    for cells in csv.reader(lines, skipinitialspace=True):
        cells = [c.strip() for c in cells]
        if cells == names:
            perm = None
            continue
        if len(cells) == len(names) and sorted(cells) == sorted(names):
            perm = [cells.index(n) for n in names]
            continue
        if perm is not None and len(cells) == len(names):
            cells = [cells[i] for i in perm]
        rows.append(cells)
    return rows


def generate_csv_dataset(llm: LLMClient, schema: Schema, config: CsvGenConfig, seed: int = 0) -> CsvGenResult:
    """Request batches until ``target_m`` valid records are collected or batches run out.

    ``seed`` is recorded only; sampling randomness lives in the LLM.
    """
    records, origin, stats = [], [], []
    batch = 0

    def one(b: int, n: int):
        req = build_csv_prompt(schema, n, config.temperature)
        req = ChatRequest(req.system, req.user, req.model, config.max_tokens, req.temperature)
        return b, n, llm.complete(req).text

    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        while len(records) < config.target_m and batch < config.max_batches:
            remaining = config.target_m - len(records)
            wave = min(config.workers, config.max_batches - batch,
                       max(1, math.ceil(remaining / config.rows_per_batch)))
            jobs = [(batch + i, min(config.rows_per_batch, remaining)) for i in range(wave)]
            batch += wave
            for b, n, text in pool.map(lambda j: one(*j), jobs):
                rows = parse_csv_rows(text, schema)
                valid = 0
                for row in rows:
                    try:
                        rec = validate_record(schema, row)
                    except RecordError:
                        continue
                    valid += 1
                    if len(records) < config.target_m:
                        records.append(rec)
                        origin.append(b)
                stats.append(BatchStats(b, n, len(rows), valid))
    if not records:
        raise ValueError(f"no valid records after {batch} batches")
    short = len(records) < config.target_m
    if short:
        log.warning("CSV generation produced %d of %d records after %d batches",
                    len(records), config.target_m, batch)
    ds = Dataset.from_records(schema, records, role="surrogate")
    return CsvGenResult(ds, stats, origin, short)
