import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dips import datasets as ds
from dips import metrics as met
from dips import policies as pol
from dips import recmodel as rm
from dips import trainer as tr


# ------------------------------------------------------------------- rmse

def test_rmse_perfect_and_offset():
    assert met.rmse([(1.0, 1.0), (4.0, 4.0)]) == 0.0
    assert met.rmse([(2.0, 3.0), (5.0, 6.0)]) == pytest.approx(1.0)


def test_rmse_empty_rejected():
    with pytest.raises(ValueError):
        met.rmse([])


def test_rmse_formula_oracle():
    rng = np.random.default_rng(0)
    pairs = rng.normal(size=(50, 2))
    expected = float(np.sqrt(np.mean((pairs[:, 0] - pairs[:, 1]) ** 2)))
    assert met.rmse(pairs) == pytest.approx(expected, abs=1e-12)


# ------------------------------------------------------------------- ranks

def test_rank_of_extremes():
    scores = np.array([0.1, 0.9, 0.5])
    assert met.rank_of(1, scores) == 1
    assert met.rank_of(0, scores) == 3


def test_rank_of_all_ties_pessimistic():
    assert met.rank_of(3, np.zeros(10)) == 10


def test_rank_of_out_of_range():
    with pytest.raises(IndexError):
        met.rank_of(5, np.zeros(5))


def test_recall_and_mrr_analytic():
    assert met.recall_at_k([1, 1, 1]) == 1.0
    assert met.recall_at_k([21], k=20) == 0.0
    assert met.mrr_at_k([1, 1]) == 1.0
    assert met.mrr_at_k([2], k=20) == 0.5
    with pytest.raises(ValueError):
        met.recall_at_k([])
    with pytest.raises(ValueError):
        met.mrr_at_k([])


# -------------------------------------------------------------- properties

@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=2, max_size=40),
       st.integers(0, 39))
def test_rank_of_counting_oracle(scores, target):
    target = target % len(scores)
    scores = np.asarray(scores)
    got = met.rank_of(target, scores)
    brute = 1 + sum(1 for j, s in enumerate(scores)
                    if j != target and s >= scores[target])
    assert got == brute
    assert 1 <= got <= len(scores)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(1, 100), min_size=1, max_size=50),
       st.integers(1, 99))
def test_recall_monotone_and_mrr_bounded(ranks, k):
    r1 = met.recall_at_k(ranks, k)
    r2 = met.recall_at_k(ranks, k + 1)
    m = met.mrr_at_k(ranks, k)
    assert 0.0 <= r1 <= r2 <= 1.0
    assert 0.0 <= m <= r1


# ---------------------------------------------------------------- evaluate

def eval_setup(setting="explicit", seed=0, n_users=8):
    cfg = tr.TrainConfig(sketch_size=2, tau=1, queue_size=5, inner_steps=1,
                         inner_lr=0.2, batch_size=4, seed=seed, setting=setting,
                         policy="dips", dim=3, hidden=4, policy_hidden=8,
                         stochastic_train=False)
    sd = ds.synth_stream(
        ds.SynthConfig(n_users=n_users, n_items=30, length=8, n_anchors=2,
                       n_groups=2, setting=setting), seed=seed)
    rng = np.random.default_rng(seed)
    rec = rm.RecParams(30, dim=3, hidden=4, setting=setting, rng=rng)
    phi = pol.PolicyParams(30, hidden=8, rng=rng)
    return rec, phi, sd.splits.test, cfg


def test_evaluate_deterministic():
    rec, phi, streams, cfg = eval_setup()
    a = met.evaluate(rec, phi, streams, cfg)
    b = met.evaluate(rec, phi, streams, cfg)
    assert a == b


def test_evaluate_does_not_mutate_parameters():
    rec, phi, streams, cfg = eval_setup(seed=1)
    before = {**{f"r{n}": a.copy() for n, a in rec.state_arrays().items()},
              **{f"p{n}": a.copy() for n, a in phi.state_arrays().items()}}
    met.evaluate(rec, phi, streams, cfg)
    after = {**{f"r{n}": a for n, a in rec.state_arrays().items()},
             **{f"p{n}": a for n, a in phi.state_arrays().items()}}
    for k in before:
        np.testing.assert_array_equal(before[k], after[k])


def test_evaluate_aggregates_match_records():
    rec, phi, streams, cfg = eval_setup(seed=2)
    res = met.evaluate(rec, phi, streams, cfg, return_records=True)
    assert res.aggregates == met.aggregate_records(res.records, cfg.setting)

    rec_i, phi_i, streams_i, cfg_i = eval_setup(setting="implicit", seed=2)
    res_i = met.evaluate(rec_i, phi_i, streams_i, cfg_i, return_records=True)
    assert res_i.aggregates == met.aggregate_records(res_i.records, "implicit")


def test_evaluate_order_invariant():
    rec, phi, streams, cfg = eval_setup(seed=3)
    a = met.evaluate(rec, phi, streams, cfg)
    b = met.evaluate(rec, phi, list(reversed(streams)), cfg)
    assert a["rmse"] == pytest.approx(b["rmse"], rel=1e-12)


def test_untrained_implicit_recall_near_chance():
    # fresh random model: the target's rank is uniform-ish, recall@k ~ k/M
    M, k = 40, 8
    cfg = tr.TrainConfig(sketch_size=2, tau=1, inner_steps=0, setting="implicit",
                         policy="random", dim=3, hidden=4, policy_hidden=8,
                         stochastic_train=False, seed=0)
    streams = []
    rng = np.random.default_rng(0)
    for u in range(60):
        items = rng.choice(M, size=10, replace=False)
        streams.append(ds.UserStream(user=u, items=items, ratings=np.ones(10)))
    rec = rm.RecParams(M, dim=3, hidden=4, setting="implicit",
                       rng=np.random.default_rng(1))
    phi = pol.PolicyParams(M, hidden=8, rng=np.random.default_rng(1))
    agg = met.evaluate(rec, phi, streams, cfg, k=k)
    n = 60 * 9
    p = k / M
    se = np.sqrt(p * (1 - p) / n)
    assert abs(agg[f"recall@{k}"] - p) < 4 * se + 0.02


def test_exclude_history_improves_rank():
    rec, phi, streams, cfg = eval_setup(setting="implicit", seed=4)
    base = met.evaluate(rec, phi, streams, cfg, return_records=True)
    masked = met.evaluate(rec, phi, streams, cfg, exclude_history=True,
                          return_records=True)
    for a, b in zip(base.records, masked.records):
        assert b.value <= a.value  # removing competitors can only help


def test_summary_table_format():
    rows = {("dips", 4, 1, "rmse"): [1.0, 1.2], ("random", 4, 1, "rmse"): [1.5]}
    out = met.summary_table(rows)
    lines = out.strip().split("\n")
    assert lines[0] == "policy,K,tau,metric,mean,std,n_seeds"
    assert lines[1].startswith("dips,4,1,rmse,1.100000")
    assert lines[2].endswith(",1")
