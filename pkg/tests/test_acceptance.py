"""Exit criteria. Each test prints one PASS/FAIL line with the measured values.

Run with ``pytest -m acceptance -v`` or directly with ``python3 tests/test_acceptance.py``.
"""

from __future__ import annotations

import itertools
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

import oracles  # noqa: E402
from conftest import agent_schema, agent_script, mk_dataset, mk_schema, random_dataset  # noqa: E402
from surrogate.agent import AgentAbort, AgentState, facility_location, greedy_facility_location, run_agent  # noqa: E402
from surrogate.baselines import GenSpec, build_random_bn, gen_uniform, sample_bn  # noqa: E402
from surrogate.benchmark import pareto_frontier, run_task1, run_task2  # noqa: E402
from surrogate.classifier import DPLogisticClassifier  # noqa: E402
from surrogate.llm import LLMClient, MockTransport, expected_collision_rate, header_test, row_completion_test  # noqa: E402
from surrogate.metrics import (  # noqa: E402
    CellQuery, avg_kway_error, binarized_marginal_error, cramers_v, linear_query, tvd,
)
from surrogate.privacy import calibrate_sigma, exp_mech_probs, gaussian_rho, zcdp_epsilon  # noqa: E402
from surrogate.schema import validate_record  # noqa: E402
from surrogate.scm import sample_scm  # noqa: E402
from surrogate.synth import PrivBayesSynthesizer, mi_sensitivity  # noqa: E402

pytestmark = pytest.mark.acceptance

# tolerances and budgets
ORACLE_TOL = 1e-12
C1_PAIRS, C1_SECONDS = 200, 10
C2_BUILDS, C2_M, C2_TOL, C2_SECONDS = 100, 100_000, 0.01, 60
C3_DRAWS, C3_REL, C3_NMAX, C3_SECONDS = 100_000, 0.05, 20, 60
C4_N, C4_SEEDS, C4_EPS, C4_FLOOR_FACTOR, C4_SECONDS = 5000, 10, (1.0, 2.0, 4.0, 16.0), 2.0, 300
C5_STEPS, C5_REL, C5_EPS_TOL, C5_SECONDS = 10_000, 0.10, 1e-6, 120
C6_SEEDS, C6_EPS, C6_SLACK, C6_UNIFORM_MAX, C6_SECONDS = 10, (1.0, 4.0, 16.0), 0.02, 0.02, 600
C7_EPS, C7_SECONDS = (1.0, 16.0), 300
C8_ROWS, C8_SECONDS = 1000, 30
C9_SECONDS = 10
C10_TRIALS, C10_SIGMAS, C10_SECONDS = 400, 3.0, 10


_capsys = None


@pytest.fixture(autouse=True)
def _grab_capsys(capsys):
    global _capsys
    _capsys = capsys
    yield
    _capsys = None


def report(criterion: int, name: str, ok: bool, detail: str):
    line = f"[criterion {criterion:2d}] {'PASS' if ok else 'FAIL'} {name}: {detail}"
    if _capsys is None:
        print(line, flush=True)
    else:
        with _capsys.disabled():
            print("\n" + line, flush=True)
    return ok


def _oracle_pair(rng):
    cards = rng.integers(1, 5, rng.integers(1, 5)).tolist()
    s = mk_schema(cards)
    return random_dataset(s, int(rng.integers(1, 51)), rng), random_dataset(s, int(rng.integers(1, 51)), rng)


def test_c1_metric_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(C1_PAIRS):
        a, b = _oracle_pair(rng)
        d = len(a.schema)
        worst = max(worst, abs(tvd(a, b) - oracles.tvd(a, b)))
        attrs = tuple(sorted(rng.choice(d, size=int(rng.integers(1, d + 1)), replace=False).tolist()))
        cell = tuple(int(rng.integers(0, a.schema.cardinalities[i])) for i in attrs)
        q = CellQuery(attrs, cell)
        brute = oracles.count(a, lambda r: all(r[i] == c for i, c in zip(attrs, cell)))
        worst = max(worst, abs(linear_query(q, a) - brute), abs(linear_query(lambda r: q(r), a) - brute))
        for k in (2, 3):
            if k > d:
                continue
            for got, want in ((avg_kway_error(a, b, k), oracles.kway_error(a, b, k)),
                              (binarized_marginal_error(a, b, k), oracles.binarized_error(a, b, k))):
                worst = max(worst, abs(got[0] - want[0]), abs(got[1] - want[1]))
        card = a.schema.cardinalities
        for i, j in itertools.combinations(range(d), 2):
            v = cramers_v(a.codes[:, i], a.codes[:, j], card[i], card[j])
            worst = max(worst, abs(v - oracles.cramers_v(a.codes[:, i].tolist(), a.codes[:, j].tolist())))
    secs = time.perf_counter() - t0
    ok = worst <= ORACLE_TOL and secs < C1_SECONDS
    report(1, "metric oracle equivalence", ok, f"{C1_PAIRS} pairs, max deviation {worst:.2e}, {secs:.1f}s")
    assert ok


def _conditional_gap(bn, codes) -> float:
    errs = []
    for v in bn.order:
        cfg = bn.config_index(v, codes)
        counts = np.zeros(bn.cpts[v].shape)
        np.add.at(counts, (cfg, codes[:, v]), 1)
        n_c = counts.sum(axis=1)
        seen = n_c > 0
        mad = np.abs(counts[seen] / n_c[seen, None] - bn.cpts[v][seen]).mean(axis=1)
        errs.append(float((mad * n_c[seen]).sum() / n_c.sum()))
    return float(np.mean(errs))


def test_c2_random_bn_conformance():
    t0 = time.perf_counter()
    s = mk_schema([2, 3] * 5)
    bad_parents = bad_rows = 0
    gaps = []
    for seed in range(C2_BUILDS):
        bn = build_random_bn(s, d_max=5, alpha=1.0, seed=seed)
        for i, v in enumerate(bn.order):
            ps = bn.parents[v]
            bad_parents += int(len(ps) > min(5, i) or any(bn.order.index(p) >= i for p in ps))
            bad_rows += int(np.abs(bn.cpts[v].sum(axis=1) - 1).max() > 1e-9)
        gaps.append(_conditional_gap(bn, sample_bn(bn, GenSpec(C2_M, seed)).codes))
    secs = time.perf_counter() - t0
    ok = bad_parents == 0 and bad_rows == 0 and max(gaps) < C2_TOL and secs < C2_SECONDS
    report(2, "random BN conformance", ok,
           f"{C2_BUILDS} builds, parent violations {bad_parents}, CPT row violations {bad_rows}, "
           f"worst avg conditional gap {max(gaps):.4f} (< {C2_TOL}), {secs:.1f}s")
    assert ok


def _mi_bits(counts):
    t = np.asarray(counts, dtype=float).reshape(2, 2)
    n = t.sum()
    out = 0.0
    for i in range(2):
        for j in range(2):
            if t[i, j]:
                out += t[i, j] / n * math.log2(t[i, j] * n / (t[i].sum() * t[:, j].sum()))
    return out


def test_c3_exponential_mechanism():
    t0 = time.perf_counter()
    scores, eps, sens = [0.0, 0.5, 1.0], 2.0, 1.0
    p = exp_mech_probs(scores, eps, sens)
    closed = np.exp(np.array(scores) * eps / (2 * sens))
    closed /= closed.sum()
    draws = np.random.default_rng(0).choice(3, size=C3_DRAWS, p=p)
    freq = np.bincount(draws, minlength=3) / C3_DRAWS
    rel = float(np.max(np.abs(freq - closed) / closed))
    worst_ratio = 0.0
    for n in range(2, C3_NMAX + 1):
        bound = mi_sensitivity(n)
        for cuts in itertools.combinations(range(n + 3), 3):
            counts = np.diff([-1, *cuts, n + 3]) - 1
            base = _mi_bits(counts)
            for src, dst in itertools.permutations(range(4), 2):
                if counts[src]:
                    moved = counts.copy()
                    moved[src] -= 1
                    moved[dst] += 1
                    worst_ratio = max(worst_ratio, abs(_mi_bits(moved) - base) / bound)
    secs = time.perf_counter() - t0
    ok = rel <= C3_REL and worst_ratio <= 1 + 1e-12 and secs < C3_SECONDS
    report(3, "exponential mechanism calibration", ok,
           f"max relative frequency error {rel:.4f} (<= {C3_REL}), max MI change / bound {worst_ratio:.3f} "
           f"over all binary-pair datasets n <= {C3_NMAX}, {secs:.1f}s")
    assert ok


def test_c4_privbayes_shape():
    t0 = time.perf_counter()
    s = mk_schema([2] * 5)
    bn = build_random_bn(s, seed=11)
    private = sample_bn(bn, GenSpec(C4_N, 1)).with_role("private")

    def median_err(eps):
        return float(np.median([
            avg_kway_error(private, PrivBayesSynthesizer(eps, random_state=r).fit(private).sample(C4_N), 3)[0]
            for r in range(C4_SEEDS)]))

    curve = [median_err(e) for e in C4_EPS]
    near = median_err(1e6)
    floor = float(np.median([avg_kway_error(private, sample_bn(bn, GenSpec(C4_N, 100 + r)), 3)[0]
                             for r in range(C4_SEEDS)]))
    secs = time.perf_counter() - t0
    decreasing = all(a > b for a, b in zip(curve, curve[1:]))
    ok = decreasing and near <= C4_FLOOR_FACTOR * floor and secs < C4_SECONDS
    report(4, "PrivBayes privacy-utility shape", ok,
           "median avg 3-way error " + ", ".join(f"eps={e:g}: {v:.4f}" for e, v in zip(C4_EPS, curve))
           + f"; eps=1e6: {near:.4f} vs floor {floor:.4f} (<= {C4_FLOOR_FACTOR}x), {secs:.1f}s")
    assert ok


def test_c5_dp_sgd_soundness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    X = rng.normal(0, 4, (200, 5))
    y = rng.integers(0, 2, 200)
    C, B, sigma = 0.8, 20, 1.5
    over, noise = [], []

    def monitor(step):
        over.append(float(step["contribution_norms"].max()) - C)
        noise.append(step["noise"])

    DPLogisticClassifier(epochs=C5_STEPS * B // len(y), batch_size=B, clip_norm=C, noise_multiplier=sigma,
                         random_state=1, monitor=monitor).fit(X, y)
    noise = np.concatenate(noise)
    var_rel = abs(noise.var() / (sigma * C / B) ** 2 - 1)
    mean_z = abs(noise.mean()) / (sigma * C / B / math.sqrt(len(noise)))
    worst_eps = 0.0
    for eps, steps in [(1.0, 100), (0.5, 1), (4.0, 2000), (16.0, 50)]:
        sig = calibrate_sigma(eps, 1e-5, steps)
        worst_eps = max(worst_eps, abs(zcdp_epsilon(gaussian_rho(sig, steps), 1e-5) - eps))
    secs = time.perf_counter() - t0
    ok = (len(over) == C5_STEPS and max(over) <= 1e-12 and worst_eps <= C5_EPS_TOL and var_rel <= C5_REL
          and mean_z < 4 and secs < C5_SECONDS)
    report(5, "DP-SGD soundness", ok,
           f"{len(over)} steps, max norm excess {max(over):.2e}, calibration |eps error| {worst_eps:.1e}, "
           f"noise variance rel. error {var_rel:.3f} (<= {C5_REL}), mean z {mean_z:.2f}, {secs:.1f}s")
    assert ok


def test_c6_task1_direction():
    t0 = time.perf_counter()
    s = mk_schema([2, 3, 3, 4, 2, 3, 4, 2])
    bn = build_random_bn(s, seed=4)
    private = sample_bn(bn, GenSpec(1000, 0)).with_role("private")
    cands = {"same_distribution": sample_bn(bn, GenSpec(1000, 1)).with_role("public"),
             "uniform": gen_uniform(s, GenSpec(1000, 2)).with_role("public")}
    res = run_task1(private, cands, "V0", epsilons=C6_EPS, n_seeds=C6_SEEDS, seed=0)
    secs = time.perf_counter() - t0
    same = {e: res.best_pretrain["same_distribution", e] for e in C6_EPS}
    uni = {e: res.best_pretrain["uniform", e] for e in C6_EPS}
    ok = (same[1.0] > 0 and same[1.0] >= same[16.0] - C6_SLACK and all(v <= C6_UNIFORM_MAX for v in uni.values())
          and res.failures == 0 and secs < C6_SECONDS)
    fmt = lambda d: ", ".join(f"eps={e:g}: {v:+.3f}" for e, v in d.items())  # noqa: E731
    report(6, "Task 1 direction", ok, f"same-distribution advantage {fmt(same)}; uniform {fmt(uni)}, {secs:.1f}s")
    assert ok


def test_c7_task2_self_consistency():
    t0 = time.perf_counter()
    s = mk_schema([2, 3, 2, 4, 3])
    private = sample_bn(build_random_bn(s, seed=3), GenSpec(600, 0)).with_role("private")
    worst, n_rows, failures = 0.0, 0, 0
    for mech in ("privbayes", "noisy_marginals"):
        rows, f = run_task2(private, {"private_copy": private}, mech, "V0", epsilons=C7_EPS, n_seeds=2)
        failures += f
        n_rows += len(rows)
        worst = max([worst] + [abs(r.degradation) for r in rows])
    secs = time.perf_counter() - t0
    ok = worst == 0 and n_rows == 2 * len(C7_EPS) * 11 and secs < C7_SECONDS
    report(7, "Task 2 self-consistency", ok,
           f"{n_rows} degradation rows, max |degradation| {worst}, {failures} failed runs, {secs:.1f}s")
    assert ok


def test_c8_pareto_and_facility_location():
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    pts = np.round(rng.random((C8_ROWS, 3)), 2).tolist()
    got = {int(n) for n in pareto_frontier({str(i): p for i, p in enumerate(pts)})}
    pareto_ok = got == oracles.pareto(pts)
    worst, instances = math.inf, 0
    for n in range(1, 6):
        for _ in range(300):
            sim = rng.random((n, n))
            sim = (sim + sim.T) / 2
            np.fill_diagonal(sim, 1.0)
            for k in range(1, min(3, n) + 1):
                opt = max(facility_location(sim, S) for S in itertools.combinations(range(n), k))
                worst = min(worst, facility_location(sim, greedy_facility_location(sim, k)) / opt)
                instances += 1
    secs = time.perf_counter() - t0
    ok = pareto_ok and worst >= 1 - 1 / math.e and secs < C8_SECONDS
    report(8, "Pareto and facility-location oracles", ok,
           f"frontier of {C8_ROWS} rows matches brute force: {pareto_ok} ({len(got)} rows); "
           f"worst greedy/optimum {worst:.4f} over {instances} instances (>= {1 - 1 / math.e:.4f}), {secs:.1f}s")
    assert ok


def test_c9_agent_pipeline():
    t0 = time.perf_counter()
    schema = agent_schema()
    llm = lambda replies: LLMClient(MockTransport(replies), sleep=lambda s: None)  # noqa: E731
    model, log = run_agent(llm(agent_script()), schema)
    ds = sample_scm(model, GenSpec(5000, 0)).dataset
    invalid = 0
    for rec in ds.records():
        try:
            validate_record(schema, rec)
        except ValueError:
            invalid += 1
    _, flog = run_agent(llm(agent_script(fail_states=range(1, 12))), schema)
    loops = [flog.get(s).attempts - 1 for s in list(AgentState)[:-1]]
    aborted = None
    try:
        run_agent(llm(agent_script()[:5] + ['{"nodes": ["R"], "edges": []}'] * 3), schema, max_retries=3)
    except AgentAbort as err:
        aborted = err
    complete = (aborted is not None and aborted.log.aborted_at == AgentState.DAG
                and len(aborted.log.states) == 6 and aborted.log.get(AgentState.DAG).attempts == 3
                and len(aborted.log.get(AgentState.DAG).failures) == 3)
    secs = time.perf_counter() - t0
    ok = log.total_retries == 0 and invalid == 0 and loops == [1] * 11 and complete and secs < C9_SECONDS
    report(9, "agent pipeline", ok,
           f"valid run retries {log.total_retries}, invalid samples {invalid}/{len(ds)}, self-loops per state "
           f"{loops}, abort logged at {aborted.state.name if aborted else None}, {secs:.1f}s")
    assert ok


def test_c10_memorization():
    t0 = time.perf_counter()
    s = mk_schema([2, 2, 3])
    data = gen_uniform(s, GenSpec(200, 5))
    rows = [list(r) for r in data.records()]

    def regurgitate(req):
        prompt = [ln.split(",") for ln in req.user[-1].strip().splitlines()[1:]]
        for i in range(len(rows)):
            if rows[i:i + len(prompt)] == prompt:
                return "\n".join(",".join(r) for r in rows[i + len(prompt):])
        return ""

    counter = {"i": 0}

    def noise(req):
        counter["i"] += 1
        return "\n".join(",".join(r) for r in gen_uniform(s, GenSpec(10, 10_000 + counter["i"])).records())

    mk = lambda f: LLMClient(MockTransport(f), sleep=lambda x: None)  # noqa: E731
    head = header_test(mk(regurgitate), data).exact_match_rate
    row = row_completion_test(mk(regurgitate), data, n_trials=20, seed=1).exact_match_rate
    noisy = row_completion_test(mk(noise), data, n_trials=C10_TRIALS, seed=2).exact_match_rate
    p = expected_collision_rate(s.cardinalities)
    z = abs(noisy - p) / math.sqrt(p * (1 - p) / C10_TRIALS)
    secs = time.perf_counter() - t0
    ok = head == 1.0 and row == 1.0 and z <= C10_SIGMAS and secs < C10_SECONDS
    report(10, "memorization probes", ok,
           f"regurgitation exact match header {head:.2f} row {row:.2f}; uniform noise {noisy:.4f} vs floor "
           f"{p:.4f} ({z:.2f} sigma, <= {C10_SIGMAS}), {secs:.1f}s")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
