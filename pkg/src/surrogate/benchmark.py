"""Benchmark harness for the three DP auxiliary tasks.

Task 1: pretraining on candidate public data before DP fine-tuning.
Task 2: choosing synthesizer hyperparameters from candidate data.
Task 3: estimating privacy-utility curves from candidate data.
"""

from __future__ import annotations

import copy
import itertools
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .classifier import (FINETUNE_GRID, PRETRAIN_GRID, DPLogisticClassifier, DpSgdParams, PretrainParams, auc,
                         dp_finetune, encode_features, evaluate_run, pretrain)
from .metrics import METRIC_GROUPS, MetricVector, metric_vector
from .privacy import DEFAULT_EPSILONS, PrivacyBudget
from .schema import Dataset, split_dataset
from .synth import MECHANISMS

log = logging.getLogger(__name__)

PRIVATE = "private"


def expand_grid(grid: Mapping[str, Sequence]) -> list[dict]:
    """Cartesian product in declared key and value order (this order breaks ties)."""
    if not grid:
        return [{}]
    keys = list(grid)
    return [dict(zip(keys, vals)) for vals in itertools.product(*(grid[k] for k in keys))]


def config_key(cfg: Mapping) -> str:
    return json.dumps(cfg, sort_keys=True)


def _seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


@dataclass(frozen=True)
class BenchmarkRecord:
    method: str
    mechanism: str
    dataset: str
    hyperparameters: dict
    epsilon: float
    seed: int
    metrics: dict

    def key(self) -> str:
        return json.dumps([self.method, self.mechanism, self.dataset, self.hyperparameters, self.epsilon,
                           self.seed], sort_keys=True)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "BenchmarkRecord":
        return cls(**json.loads(line))


class ResultStore:
    """Line-delimited record file; lets an interrupted run resume from completed records."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self.records: dict[str, BenchmarkRecord] = {}
        if self.path is not None and self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    r = BenchmarkRecord.from_json(line)
                    self.records[r.key()] = r

    def __contains__(self, key: str) -> bool:
        return key in self.records

    def add(self, record: BenchmarkRecord):
        self.records[record.key()] = record
        if self.path is not None:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(record.to_json() + "\n")


# Task 1 --------------------------------------------------------------------

@dataclass
class Task1Result:
    records: list[BenchmarkRecord]
    grid_mean: dict[tuple[str, float], float]
    best_pretrain: dict[tuple[str, float], float]
    chosen_pretrain: dict[str, dict]
    failures: int = 0

    def table(self, which: str = "best_pretrain", sep: str = "\t") -> str:
        src = self.best_pretrain if which == "best_pretrain" else self.grid_mean
        eps = sorted({e for _, e in src})
        names = list(dict.fromkeys(c for c, _ in src))
        lines = [sep.join(["Method"] + [f"eps={e:g}" for e in eps])]
        for n in names:
            lines.append(sep.join([n] + [f"{src[(n, e)]:.3f}" if (n, e) in src else "" for e in eps]))
        return "\n".join(lines) + "\n"


def run_task1(private: Dataset, candidates: Mapping[str, Dataset], target: str,
              epsilons: Sequence[float] = DEFAULT_EPSILONS, pretrain_grid: Mapping = PRETRAIN_GRID,
              finetune_grid: Mapping = FINETUNE_GRID, n_seeds: int = 10, seed: int = 0,
              clip_norm: float = 1.0) -> Task1Result:
    """AUC advantage of candidate pretraining over DP fine-tuning alone.

    For each seed the private data is split 72/8/20; each candidate is split the
    same way and its validation AUC drives the best-pretraining selection.
    """
    pre_cfgs, ft_cfgs = expand_grid(pretrain_grid), expand_grid(finetune_grid)
    records, failures = [], 0
    adv: dict[tuple, float] = {}
    valid_auc: dict[tuple, float] = {}
    for s in range(n_seeds):
        priv = split_dataset(private, _seed(seed, s, 0))
        ptrain, ptest = priv.split("train"), priv.split("test")
        baseline = {}
        for fi, fc in enumerate(ft_cfgs):
            for eps in epsilons:
                try:
                    m = DPLogisticClassifier(random_state=_seed(seed, s, 1, fi))
                    dp_finetune(m, ptrain, target, DpSgdParams(**fc, clip_norm=clip_norm), PrivacyBudget(eps, 1e-5))
                    baseline[fi, eps] = evaluate_run(m, ptest, target, eps)
                except ValueError as err:
                    failures += 1
                    log.warning("baseline run failed (seed %d, %s, eps %g): %s", s, fc, eps, err)
        for name, cand in candidates.items():
            try:
                csplit = split_dataset(cand, _seed(seed, s, 2))
                ctrain, cvalid = csplit.split("train"), csplit.split("valid")
            except ValueError as err:
                failures += 1
                log.warning("candidate %s unusable: %s", name, err)
                continue
            for pi, pc in enumerate(pre_cfgs):
                try:
                    base_model = DPLogisticClassifier(random_state=_seed(seed, s, 1, 0))
                    pretrain(base_model, ctrain, target, PretrainParams(**pc))
                    Xv, yv = encode_features(cvalid, target)
                    valid_auc[name, pi, s] = auc(base_model.decision_function(Xv), yv)
                except ValueError as err:
                    failures += 1
                    log.warning("pretraining on %s failed (%s): %s", name, pc, err)
                    continue
                for fi, fc in enumerate(ft_cfgs):
                    for eps in epsilons:
                        if (fi, eps) not in baseline:
                            continue
                        try:
                            m = copy.deepcopy(base_model)
                            m.set_params(random_state=_seed(seed, s, 1, fi))
                            dp_finetune(m, ptrain, target, DpSgdParams(**fc, clip_norm=clip_norm),
                                        PrivacyBudget(eps, 1e-5))
                            run = evaluate_run(m, ptest, target, eps, pretrained_on=name)
                        except ValueError as err:
                            failures += 1
                            log.warning("fine-tuning after %s failed: %s", name, err)
                            continue
                        b = baseline[fi, eps]
                        a = run.auc - b.auc
                        adv[name, pi, fi, eps, s] = a
                        records.append(BenchmarkRecord(name, "dp_sgd", PRIVATE, {**pc, **fc}, float(eps), s,
                                                       {"auc_pretrained": run.auc, "auc_baseline": b.auc,
                                                        "auc_advantage": a,
                                                        "candidate_valid_auc": valid_auc[name, pi, s]}))
    grid_mean, best, chosen = {}, {}, {}
    for name in candidates:
        scores = [np.mean([valid_auc[name, pi, s] for s in range(n_seeds) if (name, pi, s) in valid_auc])
                  if any((name, pi, s) in valid_auc for s in range(n_seeds)) else -np.inf
                  for pi in range(len(pre_cfgs))]
        if not np.isfinite(max(scores, default=-np.inf)):
            continue
        p_star = int(np.argmax(scores))
        chosen[name] = pre_cfgs[p_star]
        for eps in epsilons:
            allv = [v for (n, pi, fi, e, s), v in adv.items() if n == name and e == eps]
            sel = [v for (n, pi, fi, e, s), v in adv.items() if n == name and e == eps and pi == p_star]
            if allv:
                grid_mean[name, float(eps)] = float(np.mean(allv))
            if sel:
                best[name, float(eps)] = float(np.mean(sel))
    return Task1Result(records, grid_mean, best, chosen, failures)


# Tasks 2 and 3 -------------------------------------------------------------

def _prepare(data: Dataset, s: int, seed: int) -> tuple[Dataset, Dataset]:
    sp = split_dataset(data, _seed(seed, s, 3))
    return sp.split("train"), sp.split("test")


def evaluate_grid(datasets: Mapping[str, Dataset], mechanism: str, target: str,
                  epsilons: Sequence[float] = DEFAULT_EPSILONS, grid: Mapping | None = None,
                  n_seeds: int = 10, seed: int = 0, store: ResultStore | None = None,
                  workers: int = 1) -> tuple[list[BenchmarkRecord], int]:
    """Fit ``mechanism`` on each dataset for every (config, epsilon, seed) and score its output.

    Each dataset is scored against itself: the synthesizer runs on its train
    split and classification metrics use its test split. Fit seeds depend only
    on (seed, config, epsilon), never on the dataset, so identical inputs give
    identical records.
    """
    if mechanism not in MECHANISMS:
        raise ValueError(f"unknown mechanism {mechanism!r}; choose from {sorted(MECHANISMS)}")
    cls, default_grid = MECHANISMS[mechanism]
    cfgs = expand_grid(default_grid if grid is None else grid)
    store = store or ResultStore()
    jobs = []
    splits = {}
    for name, data in datasets.items():
        for s in range(n_seeds):
            splits[name, s] = _prepare(data, s, seed)
            for gi, cfg in enumerate(cfgs):
                for ei, eps in enumerate(epsilons):
                    jobs.append((name, s, gi, cfg, ei, float(eps)))
    failures = 0

    def run(job):
        name, s, gi, cfg, ei, eps = job
        rec = BenchmarkRecord(name, mechanism, name, cfg, eps, s, {})
        if rec.key() in store:
            return store.records[rec.key()], None
        train, test = splits[name, s]
        fit_seed = _seed(seed, s, 4, gi, ei)
        try:
            model = cls(epsilon=eps, random_state=fit_seed, **cfg).fit(train)
            synth = model.sample(len(train), fit_seed)
            mv = metric_vector(train, synth, test, target, seed=s)
        except ValueError as err:
            return None, f"{name} {cfg} eps={eps} seed={s}: {err}"
        return BenchmarkRecord(name, mechanism, name, cfg, eps, s, mv.as_dict()), None

    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(run, jobs))
    out = []
    for rec, err in results:
        if err is not None:
            failures += 1
            log.warning("run failed: %s", err)
            continue
        if rec.key() not in store:
            store.add(rec)
        out.append(rec)
    return out, failures


def _mean_table(records: Sequence[BenchmarkRecord], method: str):
    """(config key, epsilon) -> {metric: [per-seed values indexed by seed]}."""
    table: dict[tuple[str, float], dict[int, dict]] = {}
    for r in records:
        if r.method == method:
            table.setdefault((config_key(r.hyperparameters), r.epsilon), {})[r.seed] = r.metrics
    return table


def _configs_in_order(records: Sequence[BenchmarkRecord]) -> list[str]:
    return list(dict.fromkeys(config_key(r.hyperparameters) for r in records))


@dataclass(frozen=True)
class DegradationRow:
    method: str
    mechanism: str
    metric: str
    epsilon: float
    optimal: float
    chosen: float
    degradation: float
    stderr: float
    mode: str
    optimal_config: str
    chosen_config: str


def _argmin_config(values: Mapping[str, float], order: Sequence[str]) -> str:
    best, best_v = None, math.inf
    for k in order:
        v = values.get(k)
        if v is not None and v < best_v:
            best, best_v = k, v
    return best


def _per_seed_diffs(priv, cand, order, eps, metric):
    diffs, opts, chos = [], [], []
    seeds = set().union(*(priv[k, eps] for k in order if (k, eps) in priv))
    for s in sorted(seeds):
        pv = {k: priv[k, eps][s][metric] for k in order if s in priv.get((k, eps), {})}
        cv = {k: cand[k, eps][s][metric] for k in order if s in cand.get((k, eps), {})}
        if not pv or not cv:
            continue
        cho = _argmin_config(cv, order)
        if cho not in pv:
            continue
        o = pv[_argmin_config(pv, order)]
        diffs.append(pv[cho] - o)
        opts.append(o)
        chos.append(pv[cho])
    return np.array(diffs), opts, chos


def run_task2(private: Dataset, candidates: Mapping[str, Dataset], mechanism: str, target: str,
              epsilons: Sequence[float] = DEFAULT_EPSILONS, grid: Mapping | None = None, n_seeds: int = 10,
              seed: int = 0, metric_modes: Mapping[str, str] | None = None,
              records: Sequence[BenchmarkRecord] | None = None, workers: int = 1,
              store: ResultStore | None = None,
              average_seeds_first: bool = True) -> tuple[list[DegradationRow], int]:
    """Per (candidate, metric, epsilon): cost on the private data of tuning on the candidate.

    By default seeds are averaged before the argmin; with
    ``average_seeds_first=False`` the argmin is taken per seed and the per-seed
    degradations are averaged (the reported configs are then the seed-averaged
    ones). ``metric_modes`` maps metric names to "absolute" (default) or
    "relative".
    """
    failures = 0
    if records is None:
        records, failures = evaluate_grid({PRIVATE: private, **candidates}, mechanism, target, epsilons, grid,
                                          n_seeds, seed, store, workers)
    modes = {m: "absolute" for m in MetricVector.names()}
    modes.update(metric_modes or {})
    order = _configs_in_order(records)
    priv = _mean_table(records, PRIVATE)
    rows = []
    for name in candidates:
        cand = _mean_table(records, name)
        for eps in epsilons:
            eps = float(eps)
            for metric in MetricVector.names():
                pv = {k: [v[metric] for v in priv[k, eps].values()] for k in order if (k, eps) in priv}
                cv = {k: [v[metric] for v in cand[k, eps].values()] for k in order if (k, eps) in cand}
                if not pv or not cv:
                    continue
                opt = _argmin_config({k: float(np.mean(v)) for k, v in pv.items()}, order)
                cho = _argmin_config({k: float(np.mean(v)) for k, v in cv.items()}, order)
                if cho not in pv:
                    continue
                if average_seeds_first:
                    seeds = sorted(set(priv[opt, eps]) & set(priv[cho, eps]))
                    diffs = np.array([priv[cho, eps][s][metric] - priv[opt, eps][s][metric] for s in seeds])
                    o, c = float(np.mean(pv[opt])), float(np.mean(pv[cho]))
                else:
                    diffs, os_, cs = _per_seed_diffs(priv, cand, order, eps, metric)
                    if not len(diffs):
                        continue
                    o, c = float(np.mean(os_)), float(np.mean(cs))
                if modes[metric] == "relative":
                    scale = o if o > 0 else (1.0 if c == o else 0.0)
                    deg = (c - o) / scale if scale else math.inf
                    diffs = diffs / scale if scale else diffs
                else:
                    deg = c - o
                se = float(np.std(diffs, ddof=1) / math.sqrt(len(diffs))) if len(diffs) > 1 else 0.0
                rows.append(DegradationRow(name, mechanism, metric, eps, o, c, deg, se, modes[metric], opt, cho))
    return rows, failures


def group_degradation(rows: Sequence[DegradationRow]) -> dict[str, dict[str, float]]:
    """method -> {group: mean degradation over the group's metrics and all epsilons}."""
    out: dict[str, dict[str, float]] = {}
    for method in dict.fromkeys(r.method for r in rows):
        out[method] = {}
        for g, ms in METRIC_GROUPS.items():
            vals = [r.degradation for r in rows if r.method == method and r.metric in ms]
            if vals:
                out[method][g] = float(np.mean(vals))
    return out


@dataclass(frozen=True)
class CurvePair:
    method: str
    group: str
    epsilons: tuple
    candidate: tuple
    private: tuple
    l1: float
    l2: float

    def __post_init__(self):
        if not (len(self.epsilons) == len(self.candidate) == len(self.private)):
            raise ValueError("curve lengths differ")


def curve_distances(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    return float(np.abs(d).sum()), float(np.sqrt((d * d).sum()))


def _group_curve(table, order, eps_grid, group) -> list[float] | None:
    out = []
    for eps in eps_grid:
        vals = {}
        for k in order:
            if (k, eps) in table:
                per_seed = table[k, eps].values()
                vals[k] = float(np.mean([np.mean([m[x] for x in METRIC_GROUPS[group]]) for m in per_seed]))
        if not vals:
            return None
        best = _argmin_config(vals, order)
        out.append(vals[best])
    return out


@dataclass
class Task3Result:
    pairs: list[CurvePair]
    l1: dict[str, float]
    l2: dict[str, float]
    rejected: list[str] = field(default_factory=list)
    failures: int = 0


def run_task3(private: Dataset, candidates: Mapping[str, Dataset], mechanism: str, target: str,
              epsilons: Sequence[float] = DEFAULT_EPSILONS, grid: Mapping | None = None, n_seeds: int = 10,
              seed: int = 0, records: Sequence[BenchmarkRecord] | None = None, workers: int = 1,
              store: ResultStore | None = None) -> Task3Result:
    """Distance between candidate-estimated and private privacy-utility curves, per metric group.

    At each epsilon the configuration is chosen independently (lowest group
    mean, seeds averaged first) and evaluated on the data it was chosen on.
    """
    failures = 0
    if records is None:
        records, failures = evaluate_grid({PRIVATE: private, **candidates}, mechanism, target, epsilons, grid,
                                          n_seeds, seed, store, workers)
    order = _configs_in_order(records)
    eps_grid = [float(e) for e in epsilons]
    priv = _mean_table(records, PRIVATE)
    pairs, l1, l2, rejected = [], {}, {}, []
    for name in candidates:
        cand = _mean_table(records, name)
        mine = []
        for g in METRIC_GROUPS:
            pc, cc = _group_curve(priv, order, eps_grid, g), _group_curve(cand, order, eps_grid, g)
            if pc is None or cc is None:
                rejected.append(f"{name}/{g}: missing epsilon points")
                continue
            a, b = curve_distances(cc, pc)
            mine.append(CurvePair(name, g, tuple(eps_grid), tuple(cc), tuple(pc), a, b))
        pairs += mine
        if mine:
            l1[name] = float(np.mean([p.l1 for p in mine]))
            l2[name] = float(np.mean([p.l2 for p in mine]))
    return Task3Result(pairs, l1, l2, rejected, failures)


# Pareto frontier -----------------------------------------------------------

def pareto_frontier(rows: Mapping[str, Sequence[float]], minimize: bool = True) -> list[str]:
    """Names of non-dominated rows (dominated = another row is <= everywhere and < somewhere)."""
    if not rows:
        raise ValueError("need at least one row")
    names = list(rows)
    X = np.asarray([rows[n] for n in names], dtype=float)
    if X.ndim != 2 or X.shape[1] < 2:
        raise ValueError("need at least two objectives")
    if not minimize:
        X = -X
    le = (X[:, None, :] <= X[None, :, :]).all(axis=2)  # le[j, i]: j <= i everywhere
    lt = (X[:, None, :] < X[None, :, :]).any(axis=2)
    dominated = (le & lt).any(axis=0)
    return [n for n, d in zip(names, dominated) if not d]


def render_table(header: Sequence[str], rows: Sequence[Sequence], sep: str = "\t") -> str:
    def fmt(x):
        return f"{x:.3f}" if isinstance(x, float) else str(x)

    return "\n".join([sep.join(header)] + [sep.join(fmt(x) for x in r) for r in rows]) + "\n"
