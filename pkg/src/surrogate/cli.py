"""Command line entry point: ``surrogate <command> [options]``.

Every command accepts ``--config`` (JSON or YAML run-config; command-line
options override its keys) and ``--run-dir`` for outputs. Exit codes: 0
success, 2 configuration error, 3 partial failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import yaml

from . import agent as agent_mod
from .baselines import ArbitraryGenerator, GenSpec, gen_uniform, gen_univariate
from .benchmark import (PRIVATE, ResultStore, evaluate_grid, group_degradation, pareto_frontier, render_table,
                        run_task1, run_task2, run_task3)
from .csvgen import CsvGenConfig, generate_csv_dataset
from .llm import (PROFILES, AuthError, LLMClient, LLMError, ReplayTransport, Transcript, header_test,
                  row_completion_test)
from .metrics import METRIC_GROUPS, render_similarity, similarity_report
from .privacy import DEFAULT_EPSILONS
from .schema import Dataset, SchemaError, load_schema
from .scm import ScmError

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 2, 3

log = logging.getLogger("surrogate")


class ConfigError(Exception):
    pass


def load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as err:
        raise ConfigError(f"cannot read run-config {path}: {err}") from err
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError("run-config must be a mapping")
    return data


def _opt(args, cfg: dict, name: str, default=None, required: bool = False):
    v = getattr(args, name, None)
    if v is None:
        v = cfg.get(name, cfg.get(name.replace("_", "-"), default))
    if required and v is None:
        raise ConfigError(f"missing required option --{name.replace('_', '-')}")
    return v


def _eps(v) -> list[float]:
    if v is None:
        return list(DEFAULT_EPSILONS)
    if isinstance(v, str):
        v = [x for x in v.split(",") if x.strip()]
    try:
        out = [float(x) for x in v]
    except (TypeError, ValueError) as err:
        raise ConfigError(f"bad epsilon list {v!r}") from err
    if not out or any(e <= 0 for e in out):
        raise ConfigError("epsilons must be positive")
    return out


def _named_paths(v) -> dict[str, str]:
    if v is None:
        return {}
    if isinstance(v, dict):
        return {str(k): str(p) for k, p in v.items()}
    out = {}
    for item in v:
        if "=" not in item:
            raise ConfigError(f"expected NAME=PATH, got {item!r}")
        k, p = item.split("=", 1)
        out[k] = p
    return out


def _schema(args, cfg):
    return load_schema(_opt(args, cfg, "schema", required=True), topic=_opt(args, cfg, "topic", "") or "")


def _load(schema, path, role="private") -> Dataset:
    try:
        return Dataset.from_csv(schema, path, role=role)
    except OSError as err:
        raise ConfigError(f"cannot read {path}: {err}") from err


def _run_dir(args, cfg, default: str) -> Path:
    d = Path(_opt(args, cfg, "run_dir", default))
    d.mkdir(parents=True, exist_ok=True)
    return d


def _llm(args, cfg, run_dir: Path) -> LLMClient:
    transcript = Transcript(run_dir / "transcript.jsonl")
    replay = getattr(args, "replay_from", None) or _opt(args, cfg, "replay")
    if replay:
        return LLMClient(ReplayTransport(replay), transcript, max_attempts=1)
    profile = _opt(args, cfg, "profile")
    if profile is None:
        raise ConfigError("live LLM modes need --profile (or --replay TRANSCRIPT)")
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    env = PROFILES[profile].api_key_env
    if not os.environ.get(env):
        raise ConfigError(f"missing credentials: set {env} for profile {profile}")
    from .llm import HttpTransport

    return LLMClient(HttpTransport(PROFILES[profile]), transcript,
                     max_attempts=int(_opt(args, cfg, "max_attempts", 5)))


def _write(path: Path, text: str):
    path.write_text(text, encoding="utf-8")
    print(path)


# Commands ------------------------------------------------------------------

def cmd_generate(args, cfg) -> int:
    method = args.method
    schema = _schema(args, cfg)
    m = int(_opt(args, cfg, "m", required=True))
    seed = int(_opt(args, cfg, "seed", 0))
    out = _run_dir(args, cfg, f"runs/generate-{method}")
    status = EXIT_OK
    if method == "uniform":
        ds = gen_uniform(schema, GenSpec(m, seed))
    elif method == "univariate":
        ds = gen_univariate(_load(schema, _opt(args, cfg, "private", required=True)), GenSpec(m, seed))
    elif method == "arbitrary":
        gen = ArbitraryGenerator(int(_opt(args, cfg, "d_max", 5)), float(_opt(args, cfg, "alpha", 1.0)), seed)
        gen.fit(schema)
        ds = gen.sample(m)
        _write(out / "bayesnet.json", json.dumps(gen.bn_.to_dict(), indent=1, sort_keys=True))
    elif method == "csv":
        conf = CsvGenConfig(m, int(_opt(args, cfg, "rows_per_batch", 50)), int(_opt(args, cfg, "max_batches", 100)))
        res = generate_csv_dataset(_llm(args, cfg, out), schema, conf, seed)
        ds = res.dataset
        _write(out / "yield.jsonl", res.yield_report())
        status = EXIT_PARTIAL if res.short else EXIT_OK
    elif method == "agent":
        panel = agent_mod.run_panel(_llm(args, cfg, out), schema, m, int(_opt(args, cfg, "panel_size", 8)),
                                    int(_opt(args, cfg, "max_retries", 3)), seed)
        for i, (d, model) in enumerate(zip(panel.datasets, panel.models)):
            d.to_csv(out / f"agent_{i}.csv")
            (out / f"model_{i}.scm").write_text(model.to_dsl(), encoding="utf-8")
        for i, lg in enumerate(panel.logs):
            lg.save(out / f"agent_log_{i}.jsonl")
        if not panel.datasets:
            print("no panel member produced a model:\n" + "\n".join(panel.failures), file=sys.stderr)
            return EXIT_PARTIAL
        ds = _mix(panel.datasets, args, cfg, m, seed, out)
        status = EXIT_PARTIAL if panel.failures else EXIT_OK
    elif method == "mix":
        inputs = _opt(args, cfg, "inputs", required=True)
        ds = _mix([_load(schema, p, "surrogate") for p in inputs], args, cfg, m, seed, out)
    else:
        raise ConfigError(f"unknown generation method {method!r}")
    ds.to_csv(out / "dataset.csv")
    print(out / "dataset.csv")
    return status


def _mix(datasets, args, cfg, m, seed, out: Path) -> Dataset:
    mode = _opt(args, cfg, "mix", "uniform")
    if mode == "uniform":
        return agent_mod.mix_uniform(datasets, m, seed)
    if mode == "max_coverage":
        k = _opt(args, cfg, "k")
        ds, chosen = agent_mod.mix_max_coverage(datasets, None if k is None else int(k), m, seed)
        _write(out / "selected.json", json.dumps(chosen))
        return ds
    raise ConfigError(f"unknown mix mode {mode!r}")


def _candidates(args, cfg, schema) -> dict[str, Dataset]:
    paths = _named_paths(_opt(args, cfg, "candidate"))
    if not paths:
        raise ConfigError("at least one --candidate NAME=PATH is required")
    return {k: _load(schema, p, "public") for k, p in paths.items()}


def cmd_similarity(args, cfg) -> int:
    schema = _schema(args, cfg)
    ref = _load(schema, _opt(args, cfg, "reference", required=True))
    rows = similarity_report(ref, _candidates(args, cfg, schema))
    out = _run_dir(args, cfg, "runs/similarity")
    _write(out / "similarity.tsv", render_similarity(rows))
    return EXIT_OK


def cmd_task1(args, cfg) -> int:
    schema = _schema(args, cfg)
    private = _load(schema, _opt(args, cfg, "private", required=True))
    res = run_task1(private, _candidates(args, cfg, schema), _opt(args, cfg, "target", required=True),
                    _eps(_opt(args, cfg, "eps")), n_seeds=int(_opt(args, cfg, "seeds", 10)),
                    seed=int(_opt(args, cfg, "seed", 0)))
    out = _run_dir(args, cfg, "runs/task1")
    _write(out / "task1_records.jsonl", "".join(r.to_json() + "\n" for r in res.records))
    _write(out / "task1_best_pretrain.tsv", res.table("best_pretrain"))
    _write(out / "task1_grid_mean.tsv", res.table("grid_mean"))
    return EXIT_PARTIAL if res.failures else EXIT_OK


def _grid_records(args, cfg, out: Path):
    schema = _schema(args, cfg)
    private = _load(schema, _opt(args, cfg, "private", required=True))
    cands = _candidates(args, cfg, schema)
    mech = _opt(args, cfg, "mechanism", "privbayes")
    eps = _eps(_opt(args, cfg, "eps"))
    target = _opt(args, cfg, "target", required=True)
    store = ResultStore(out / f"records_{mech}.jsonl")
    recs, failures = evaluate_grid({PRIVATE: private, **cands}, mech, target, eps,
                                   cfg.get("grid"), int(_opt(args, cfg, "seeds", 10)),
                                   int(_opt(args, cfg, "seed", 0)), store, int(_opt(args, cfg, "workers", 1)))
    return private, cands, mech, target, eps, recs, failures


def cmd_task2(args, cfg) -> int:
    out = _run_dir(args, cfg, "runs/task2")
    private, cands, mech, target, eps, recs, failures = _grid_records(args, cfg, out)
    rows, _ = run_task2(private, cands, mech, target, eps,
                        metric_modes=cfg.get("metric_modes"), records=recs,
                        average_seeds_first=bool(cfg.get("average_seeds_first", True)))
    _write(out / f"degradation_{mech}.jsonl", "".join(json.dumps(r.__dict__, sort_keys=True) + "\n" for r in rows))
    for g, metrics in METRIC_GROUPS.items():
        body = [[r.method, r.metric, r.epsilon, r.optimal, r.chosen, r.degradation, r.stderr]
                for r in rows if r.metric in metrics]
        _write(out / f"degradation_{mech}_{g}.tsv",
               render_table(["Method", "Metric", "epsilon", "optimal", "chosen", "degradation", "stderr"], body))
    groups = group_degradation(rows)
    _write(out / f"degradation_{mech}_groups.tsv",
           render_table(["Method"] + list(METRIC_GROUPS),
                        [[m] + [v.get(g, float("nan")) for g in METRIC_GROUPS] for m, v in groups.items()]))
    return EXIT_PARTIAL if failures else EXIT_OK


def cmd_task3(args, cfg) -> int:
    out = _run_dir(args, cfg, "runs/task3")
    private, cands, mech, target, eps, recs, failures = _grid_records(args, cfg, out)
    res = run_task3(private, cands, mech, target, eps, records=recs)
    _write(out / f"curves_{mech}.jsonl", "".join(json.dumps(p.__dict__, sort_keys=True) + "\n" for p in res.pairs))
    _write(out / f"curve_distances_{mech}.tsv",
           render_table(["Method", "l1", "l2"], [[m, res.l1[m], res.l2[m]] for m in res.l1]))
    return EXIT_PARTIAL if failures or res.rejected else EXIT_OK


def cmd_pareto(args, cfg) -> int:
    path = _opt(args, cfg, "input", required=True)
    try:
        lines = [ln.split("\t") for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    except OSError as err:
        raise ConfigError(f"cannot read {path}: {err}") from err
    header, body = lines[0], lines[1:]
    cols = _opt(args, cfg, "columns")
    cols = cols.split(",") if isinstance(cols, str) else (cols or header[1:])
    missing = [c for c in cols if c not in header]
    if missing:
        raise ConfigError(f"columns not in table: {missing}")
    idx = [header.index(c) for c in cols]
    rows = {r[0]: [float(r[i]) for i in idx] for r in body}
    front = pareto_frontier(rows, minimize=not args.maximize)
    text = render_table(["Method"] + cols, [[n] + rows[n] for n in front])
    out = _run_dir(args, cfg, "runs/pareto")
    _write(out / "pareto.tsv", text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_memorize(args, cfg) -> int:
    schema = _schema(args, cfg)
    data = _load(schema, _opt(args, cfg, "data", required=True))
    out = _run_dir(args, cfg, "runs/memorize")
    llm = _llm(args, cfg, out)
    n_prompt = int(_opt(args, cfg, "n_prompt_rows", 5))
    if args.test == "header":
        rep = header_test(llm, data, n_prompt, int(_opt(args, cfg, "n_completion_rows", 10)))
    else:
        rep = row_completion_test(llm, data, int(_opt(args, cfg, "trials", 10)), int(_opt(args, cfg, "seed", 0)),
                                  n_prompt)
    _write(out / f"memorization_{args.test}.json", json.dumps(rep.to_dict(), indent=1, sort_keys=True))
    return EXIT_OK


def cmd_replay(args, cfg) -> int:
    if not args.command_args:
        raise ConfigError("replay needs a command to rerun")
    inner = build_parser().parse_args(args.command_args)
    inner.replay_from = args.transcript
    return _dispatch(inner)


# Parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="surrogate", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp, schema=True):
        sp.add_argument("--config", help="run-config document (JSON or YAML)")
        sp.add_argument("--run-dir", dest="run_dir")
        if schema:
            sp.add_argument("--schema")
            sp.add_argument("--topic")
        sp.add_argument("--seed", type=int)

    def llm_opts(sp):
        sp.add_argument("--profile", choices=sorted(PROFILES))
        sp.add_argument("--replay", help="serve responses from a recorded transcript")
        sp.add_argument("--max-attempts", dest="max_attempts", type=int)

    g = sub.add_parser("generate", help="generate a surrogate dataset")
    g.add_argument("method", choices=["uniform", "univariate", "arbitrary", "csv", "agent", "mix"])
    common(g)
    llm_opts(g)
    g.add_argument("--m", type=int)
    g.add_argument("--private")
    g.add_argument("--d-max", dest="d_max", type=int)
    g.add_argument("--alpha", type=float)
    g.add_argument("--rows-per-batch", dest="rows_per_batch", type=int)
    g.add_argument("--max-batches", dest="max_batches", type=int)
    g.add_argument("--panel-size", dest="panel_size", type=int)
    g.add_argument("--max-retries", dest="max_retries", type=int)
    g.add_argument("--mix", choices=["uniform", "max_coverage"])
    g.add_argument("--k", type=int)
    g.add_argument("--inputs", nargs="+")
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("similarity", help="1-TVD and 1-3WM of candidates against a reference")
    common(s)
    s.add_argument("--reference")
    s.add_argument("--candidate", action="append")
    s.set_defaults(func=cmd_similarity)

    tasks = (("task1", cmd_task1, "DP-SGD with public pretraining on each candidate"),
             ("task2", cmd_task2, "metric degradation of a DP synthesizer fit on candidates"),
             ("task3", cmd_task3, "privacy-utility curve distances between private and candidates"))
    for name, func, text in tasks:
        t = sub.add_parser(name, help=text)
        common(t)
        t.add_argument("--private")
        t.add_argument("--candidate", action="append")
        t.add_argument("--target")
        t.add_argument("--eps", help="comma-separated epsilon grid")
        t.add_argument("--seeds", type=int)
        t.add_argument("--workers", type=int)
        if name != "task1":
            t.add_argument("--mechanism", choices=["privbayes", "noisy_marginals"])
        t.set_defaults(func=func)

    pa = sub.add_parser("pareto", help="non-dominated rows of a tab-separated table")
    common(pa, schema=False)
    pa.add_argument("--input")
    pa.add_argument("--columns")
    pa.add_argument("--maximize", action="store_true")
    pa.set_defaults(func=cmd_pareto)

    mz = sub.add_parser("memorize", help="header or row-completion memorization test")
    mz.add_argument("test", choices=["header", "row"])
    common(mz)
    llm_opts(mz)
    mz.add_argument("--data")
    mz.add_argument("--n-prompt-rows", dest="n_prompt_rows", type=int)
    mz.add_argument("--n-completion-rows", dest="n_completion_rows", type=int)
    mz.add_argument("--trials", type=int)
    mz.set_defaults(func=cmd_memorize)

    rp = sub.add_parser("replay", help="rerun a command against a recorded transcript")
    rp.add_argument("transcript")
    rp.add_argument("command_args", nargs=argparse.REMAINDER)
    rp.set_defaults(func=cmd_replay)
    return p


def _dispatch(args) -> int:
    cfg = load_config(getattr(args, "config", None))
    return args.func(args, cfg)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return _dispatch(args)
    except (ConfigError, SchemaError, AuthError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (LLMError, ScmError, agent_mod.AgentAbort) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_PARTIAL
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
