from __future__ import annotations

import copy
import math

import numpy as np
import pytest
from sklearn.base import clone

from surrogate.baselines import GenSpec, build_random_bn, sample_bn
from surrogate.classifier import (
    DPLogisticClassifier, DpSgdParams, FinetuneRun, PretrainParams, auc, auc_advantage, dp_finetune,
    encode_features, evaluate_run, pretrain,
)
from surrogate.privacy import PrivacyBudget, gaussian_rho, zcdp_epsilon

from conftest import mk_dataset, mk_schema


def test_auc_examples():
    y = [1, 1, 0, 0]
    assert auc([0.9, 0.8, 0.2, 0.1], y) == 1.0
    assert auc([0.5] * 4, y) == 0.5
    assert auc([0.9, 0.4, 0.5, 0.1], y) == 0.75
    with pytest.raises(ValueError):
        auc([0.1, 0.2], [1, 1])


def test_auc_matches_pair_enumeration(rng):
    s = rng.integers(0, 5, 40).astype(float)
    y = rng.integers(0, 2, 40)
    pos, neg = s[y == 1], s[y == 0]
    pairs = [(p > q) + 0.5 * (p == q) for p in pos for q in neg]
    assert auc(s, y) == pytest.approx(np.mean(pairs))


def test_auc_advantage():
    base = FinetuneRun(0.65, 1.0, "t")
    assert auc_advantage(FinetuneRun(0.84, 1.0, "t"), base) == pytest.approx(0.19)
    assert auc_advantage(FinetuneRun(0.48, 1.0, "t"), FinetuneRun(0.53, 1.0, "t")) == pytest.approx(-0.05)
    assert auc_advantage(base, base) == 0
    with pytest.raises(ValueError):
        auc_advantage(FinetuneRun(0.8, 1.0, "u"), base)
    with pytest.raises(ValueError):
        auc_advantage(FinetuneRun(0.8, 2.0, "t"), base)


def separable(n=200, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 3))
    y = (X @ [1.0, -2.0, 0.5] > 0).astype(int)
    return X, y


def test_pretrain_separable_reaches_zero_error():
    X, y = separable()
    clf = DPLogisticClassifier(random_state=0).pretrain(X, y, epochs=9, batch_size=32, learning_rate=0.1)
    assert np.mean(clf.predict(X) != y) < 0.02
    with pytest.raises(ValueError):
        DPLogisticClassifier().pretrain(X, y, epochs=0)


def test_pretrain_deterministic():
    X, y = separable()
    a = DPLogisticClassifier(random_state=4).pretrain(X, y)
    b = DPLogisticClassifier(random_state=4).pretrain(X, y)
    assert np.array_equal(a.coef_, b.coef_)


def test_clipping_to_exact_norm():
    # one example whose raw gradient has norm 10: residual 1 times x with |(x, 1)| = 10
    x = np.array([[math.sqrt(99.0)], [0.0]])
    y = np.array([0, 1])
    seen = []
    clf = DPLogisticClassifier(epochs=1, batch_size=1, clip_norm=1.0, noise_multiplier=0.0, init_scale=0,
                               learning_rate=0.0 + 1e-12, optimizer="sgd", random_state=0, monitor=seen.append)
    clf.coef_ = np.array([50.0])
    clf.intercept_ = 0.0
    clf.classes_ = np.array([0, 1])
    clf.provenance_, clf.privacy_ledger_ = [], []
    clf.fit(x, y)
    norms = np.concatenate([s["contribution_norms"] for s in seen])
    assert norms.max() == pytest.approx(1.0, abs=1e-9)


def test_clipping_invariant_every_step(rng):
    X = rng.normal(0, 5, (300, 4))
    y = rng.integers(0, 2, 300)
    worst = []
    DPLogisticClassifier(epsilon=1.0, epochs=3, batch_size=16, clip_norm=0.5, random_state=1,
                         monitor=lambda s: worst.append(s["contribution_norms"].max())).fit(X, y)
    assert len(worst) == 3 * math.ceil(300 / 16) and max(worst) <= 0.5 + 1e-12


def test_zero_noise_infinite_clip_equals_plain_sgd():
    X, y = separable(seed=3)
    dp = DPLogisticClassifier(private=True, noise_multiplier=0.0, clip_norm=math.inf, random_state=9,
                              epochs=3, batch_size=16).fit(X, y)
    plain = DPLogisticClassifier(private=False, random_state=9, epochs=3, batch_size=16).fit(X, y)
    assert np.array_equal(dp.coef_, plain.coef_) and dp.intercept_ == plain.intercept_


def test_noise_moments():
    X = np.zeros((100, 2))
    y = np.array([0, 1] * 50)
    noise = []
    sigma, C, B = 2.0, 0.7, 10
    DPLogisticClassifier(epochs=1000, batch_size=B, clip_norm=C, noise_multiplier=sigma, random_state=0,
                         monitor=lambda s: noise.append(s["noise"])).fit(X, y)
    noise = np.concatenate(noise)
    assert len(noise) >= 10_000 * 3
    assert noise.var() == pytest.approx((sigma * C / B) ** 2, rel=0.1)
    assert abs(noise.mean()) < 3 * sigma * C / B / math.sqrt(len(noise))


def test_privacy_ledger_consistent():
    X, y = separable()
    clf = DPLogisticClassifier(epsilon=2.0, delta=1e-5, epochs=2, batch_size=50, random_state=0).fit(X, y)
    e = clf.privacy_ledger_[-1]
    assert e["steps"] == 2 * 4
    assert e["epsilon"] == pytest.approx(zcdp_epsilon(gaussian_rho(e["sigma"], e["steps"]), 1e-5), abs=1e-12)
    assert 2.0 - 1e-6 <= e["epsilon"] <= 2.0


def test_sklearn_contract():
    clf = DPLogisticClassifier(epsilon=3.0, random_state=1)
    assert clone(clf).get_params() == clf.get_params()
    X, y = separable()
    clf.fit(X, y)
    assert clf.predict_proba(X).shape == (len(X), 2) and set(clf.predict(X)) <= {0, 1}
    with pytest.raises(ValueError):
        DPLogisticClassifier().fit(X, np.zeros(len(X)))


def test_encode_features_full_domain():
    s = mk_schema([2, 3, 4])
    ds = mk_dataset(s, [[0, 0, 0], [1, 2, 3]])
    X, y = encode_features(ds, "V0")
    assert X.shape == (2, 7) and y.tolist() == [0, 1]
    with pytest.raises(ValueError):
        encode_features(ds, "V1")


def test_functional_pipeline_and_provenance():
    s = mk_schema([2, 3, 3, 2])
    data = sample_bn(build_random_bn(s, seed=2), GenSpec(600, 0)).with_role("private")
    public = sample_bn(build_random_bn(s, seed=2), GenSpec(600, 1)).with_role("public")
    train, test = data.take(np.arange(500)), data.take(np.arange(500, 600))
    model = pretrain(DPLogisticClassifier(random_state=0), public, "V0", PretrainParams())
    model = dp_finetune(copy.deepcopy(model), train, "V0", DpSgdParams(dp_num_epochs=2), PrivacyBudget(1.0))
    run = evaluate_run(model, test, "V0", 1.0, "public")
    assert 0 <= run.auc <= 1
    assert [p["stage"] for p in model.provenance_] == ["pretrain", "dp_finetune"]
    assert model.provenance_[0]["source"] == "public"
