import numpy as np
import pytest

from dips import diffcore as dc
from dips import policies as pol
from dips import recmodel as rm
from dips.diffcore import Tensor, grad
from dips.policies import IntermediateSketch, Sketch, SketchEntry

from fdcheck import finite_difference, rel_error


def make_sketch(items, K, M, ratings=None, steps=None):
    ratings = ratings if ratings is not None else [1.0] * len(items)
    steps = steps if steps is not None else list(range(1, len(items) + 1))
    return Sketch(K, M, tuple(SketchEntry(i, r, s) for i, r, s in zip(items, ratings, steps)))


# ---------------------------------------------------------------- reservoir

def test_reservoir_under_capacity_always_inserts():
    rng = np.random.default_rng(0)
    s = make_sketch([0, 1, 2], K=4, M=10)
    s2 = pol.reservoir_update(s, 7, 1.0, step=4, rng=rng)
    assert s2.contains(7) and len(s2) == 4


def test_reservoir_rejects_duplicates():
    s = make_sketch([0, 1], K=4, M=10)
    with pytest.raises(ValueError):
        pol.reservoir_update(s, 1, 1.0, step=3, rng=np.random.default_rng(0))


def test_reservoir_size_invariant():
    rng = np.random.default_rng(1)
    K, M, T = 5, 100, 30
    s = Sketch(K, M)
    for t in range(1, T + 1):
        s = pol.reservoir_update(s, t - 1, 1.0, step=t, rng=rng)
        assert len(s) == min(t, K)


def test_reservoir_inclusion_probability():
    # each of 100 streamed items should be retained with probability K/T
    rng = np.random.default_rng(2)
    K, M, T, trials = 10, 100, 100, 20000
    counts = np.zeros(T)
    for _ in range(trials):
        s = Sketch(K, M)
        for t in range(1, T + 1):
            s = pol.reservoir_update(s, t - 1, 1.0, step=t, rng=rng)
        counts[s.items()] += 1
    p = K / T
    sigma = np.sqrt(p * (1 - p) * trials)
    assert np.all(np.abs(counts - p * trials) <= 3 * sigma)


# ------------------------------------------------------------------ hardest

def tiny_model(setting="explicit", n_items=8, seed=0):
    return rm.RecParams(n_items=n_items, dim=3, hidden=4, setting=setting,
                        rng=np.random.default_rng(seed))


def test_hardest_under_capacity_keeps_all():
    rec = tiny_model()
    inter = IntermediateSketch(make_sketch([0], K=3, M=8), (SketchEntry(1, 2.0, 2),))
    out = pol.hardest_update(inter, rm.local_from_global(rec))
    assert sorted(out.items().tolist()) == [0, 1]


def test_hardest_keeps_largest_losses():
    rec = tiny_model(seed=1)
    # force known predictions: zero weights -> prediction = bias = 0, loss = rating^2
    for name in rec.param_names():
        setattr(rec, name, Tensor(np.zeros(getattr(rec, name).shape), requires_grad=True))
    ratings = [0.9, 0.1, 0.5]  # losses 0.81, 0.01, 0.25
    inter = IntermediateSketch(
        make_sketch([3, 4], K=2, M=8, ratings=ratings[:2], steps=[1, 2]),
        (SketchEntry(5, ratings[2], 3),),
    )
    out = pol.hardest_update(inter, rm.local_from_global(rec))
    assert sorted(out.items().tolist()) == [3, 5]


def test_hardest_ties_keep_most_recent():
    rec = tiny_model(seed=2)
    for name in rec.param_names():
        setattr(rec, name, Tensor(np.zeros(getattr(rec, name).shape), requires_grad=True))
    inter = IntermediateSketch(
        make_sketch([0, 1], K=2, M=8, ratings=[1.0, 1.0], steps=[1, 2]),
        (SketchEntry(2, 1.0, 3),),
    )
    out = pol.hardest_update(inter, rm.local_from_global(rec))
    assert sorted(out.items().tolist()) == [1, 2]


# ---------------------------------------------------------------- influence

def test_influence_single_entry_analytic():
    # with one entry, target = its own loss, so I = -g . (H + lam I)^-1 . g
    rec = tiny_model(seed=3)
    inter = IntermediateSketch(make_sketch([2], K=1, M=8, ratings=[4.0]), ())
    theta = rm.local_from_global(rec)
    scores = pol.influence_scores(inter, theta, damping=1e-3)

    u = Tensor(rec.user_emb.data.copy(), requires_grad=True)
    th = rm.LocalParams(user=u, base=rec)
    loss = rm.pointwise_loss(4.0, rm.predict_explicit(th, 2), "mse")
    (g,) = grad(loss, [u], create_graph=True)
    d = rec.dim
    H = np.zeros((d, d))
    for i in range(d):
        (row,) = grad(dc.gather(g, i), [u])
        H[i] = row.data
    H = 0.5 * (H + H.T) + 1e-3 * np.eye(d)
    expected = -float(g.data @ np.linalg.solve(H, g.data))
    assert scores[0] == pytest.approx(expected, rel=1e-10)


def test_influence_equal_gradients_equal_scores():
    rec = tiny_model(seed=4)
    rec.item_emb.data[5] = rec.item_emb.data[2]
    inter = IntermediateSketch(
        make_sketch([2, 5], K=2, M=8, ratings=[3.0, 3.0]), (SketchEntry(1, 1.0, 3),)
    )
    scores = pol.influence_scores(inter, rm.local_from_global(rec))
    assert scores[0] == pytest.approx(scores[1], rel=1e-10)


def _affine_rig():
    """Model whose relu pattern is item-determined with wide margins, so each
    prediction is exactly affine in the user vector: p_j(u) = a_j . u + c_j.

    Returns (rec, entries, A, C, ratings) with the affine coefficients
    computed from plain numpy, independent of the autodiff graph.
    """
    d, hidden, M = 2, 4, 6
    rec = rm.RecParams(n_items=M, dim=d, hidden=hidden, setting="explicit",
                       rng=np.random.default_rng(0))
    w1u = 0.3 * np.array([[1.0, 0.0, 0.5, -0.5],
                          [0.0, 1.0, -0.5, -1.0]])
    w1i = 20.0 * np.array([[1.0, 0.0, 1.0, -1.0],
                           [0.0, 1.0, 1.0, 1.0]])
    rec.w1.data[:] = np.vstack([w1u, w1i])
    rec.b1.data[:] = 0.0
    rec.w2.data[:] = np.array([[1.0], [-1.0], [0.7], [0.4]])
    rec.b2.data[:] = 0.1
    angles = np.array([0.3, 1.2, 2.0, 2.9, 4.0, 5.2])
    rec.item_emb.data[:] = np.stack([np.cos(angles), np.sin(angles)], axis=1)

    items = np.arange(5)
    A, C = [], []
    for it in items:
        pre = rec.item_emb.data[it] @ w1i  # user part is tiny; sign is item-driven
        act = pre > 0
        A.append((w1u[:, act] @ rec.w2.data[act]).ravel())
        C.append(float((pre[act] @ rec.w2.data[act]).ravel()[0] + rec.b2.data[0]))
    A, C = np.array(A), np.array(C)
    rng = np.random.default_rng(3)
    ratings = A @ np.array([0.4, -0.3]) + C + rng.uniform(-0.2, 0.2, size=5)
    entries = [SketchEntry(int(it), float(r), i + 1)
               for i, (it, r) in enumerate(zip(items, ratings))]
    return rec, entries, A, C, ratings


def _check_affine_margins(rec, u, items):
    # the rig is only exact while no relu pre-activation changes sign
    for it in items:
        x = np.concatenate([u, rec.item_emb.data[it]])
        assert np.abs(x @ rec.w1.data + rec.b1.data).min() > 1.0


def test_influence_matches_affine_closed_form():
    # at a non-stationary user vector, I(j) = -g_t . (H + lam)^-1 . g_j with
    # g and H computed in closed form from the affine coefficients
    rec, entries, A, C, ratings = _affine_rig()
    inter = IntermediateSketch(Sketch(5, rec.n_items, tuple(entries[:4])), (entries[4],))
    u = np.array([0.25, 0.1])
    _check_affine_margins(rec, u, [e.item for e in entries])
    damping = 1e-8
    scores = pol.influence_scores(
        inter, rm.LocalParams(user=Tensor(u), base=rec), damping=damping)

    resid = A @ u + C - ratings
    grads = 2.0 * resid[:, None] * A          # per-entry d(resid^2)/du
    H = 2.0 * A.T @ A + damping * np.eye(2)
    g_target = grads.mean(axis=0)
    expected = -grads @ np.linalg.solve(H, g_target)
    assert np.max(np.abs(resid)) > 0.05       # non-degenerate residuals
    np.testing.assert_allclose(scores, expected, rtol=1e-8)


def test_influence_vanishes_at_refit_optimum():
    # the target is the mean loss over the same entries the refit minimizes,
    # so at the exact least-squares optimum every influence score is ~0
    rec, entries, A, C, ratings = _affine_rig()
    inter = IntermediateSketch(Sketch(5, rec.n_items, tuple(entries[:4])), (entries[4],))
    u_star, *_ = np.linalg.lstsq(A, ratings - C, rcond=None)
    _check_affine_margins(rec, u_star, [e.item for e in entries])
    scores = pol.influence_scores(
        inter, rm.LocalParams(user=Tensor(u_star), base=rec), damping=1e-8)
    resid = A @ u_star + C - ratings
    assert np.max(np.abs(resid)) > 0.05       # losses themselves are not zero
    np.testing.assert_allclose(scores, 0.0, atol=1e-10)


# -------------------------------------------------------------- policy net

def test_policy_scores_masking():
    M = 6
    phi = pol.PolicyParams(M, hidden=8, rng=np.random.default_rng(0))
    zhat = np.array([1.0, 0, 1, 0, 1, 0])
    y = np.ones(M)
    scores = pol.policy_scores(zhat, y, phi)
    assert np.all(np.isneginf(scores.data[[1, 3, 5]]))
    probs = dc.softmax(scores).data
    assert np.all(probs[[1, 3, 5]] <= 1e-12)
    assert probs.sum() == pytest.approx(1.0)


def test_policy_scores_symmetry_under_weight_tying():
    M = 4
    phi = pol.PolicyParams(M, hidden=8, rng=np.random.default_rng(1))
    # tie the weights of coordinates 0 and 2 in and out
    phi.w1.data[2] = phi.w1.data[0]
    phi.w3.data[:, 2] = phi.w3.data[:, 0]
    phi.b3.data[2] = phi.b3.data[0]
    zhat = np.array([1.0, 1, 1, 0])
    y = np.array([2.5, 1.0, 2.5, 0.0])
    s = pol.policy_scores(zhat, y, phi).data

    zhat_p = np.array([1.0, 1, 1, 0])
    y_p = np.array([2.5, 1.0, 2.5, 0.0])
    s_p = pol.policy_scores(zhat_p, y_p, phi).data
    assert s[0] == pytest.approx(s[2])
    np.testing.assert_allclose(s, s_p)


def test_policy_scores_forward_oracle():
    M = 5
    phi = pol.PolicyParams(M, hidden=8, rng=np.random.default_rng(2))
    zhat = np.array([1.0, 0, 1, 1, 0])
    y = np.array([3.0, 0, 1.5, 4.0, 0])
    s = pol.policy_scores(zhat, y, phi).data

    x = zhat * y
    h1 = np.maximum(x @ phi.w1.data + phi.b1.data, 0)
    h2 = np.maximum(h1 @ phi.w2.data + phi.b2.data, 0)
    f = h2 @ phi.w3.data + phi.b3.data
    with np.errstate(divide="ignore"):
        expected = f + np.log(zhat)
    np.testing.assert_allclose(s, expected, atol=1e-12)


def test_policy_scores_batched_rows_match_single():
    M = 5
    phi = pol.PolicyParams(M, hidden=8, rng=np.random.default_rng(3))
    y = np.array([3.0, 1.0, 1.5, 4.0, 2.0])
    rows = np.array([[1.0, 1, 0, 1, 0], [0, 1, 1, 0, 1]])
    batch = pol.policy_scores(rows, y, phi).data
    for i in range(2):
        single = pol.policy_scores(rows[i], y, phi).data
        np.testing.assert_allclose(batch[i], single, atol=1e-12)


# ------------------------------------------------------------ online remove

def test_online_remove_forced_choice():
    scores = Tensor(np.array([-np.inf, 2.0, -np.inf]))
    for mode in ("deterministic", "stochastic"):
        w, removed = pol.online_remove(scores, mode, rng=np.random.default_rng(0))
        assert removed == 1
        np.testing.assert_array_equal(w.data, [0, 1, 0])


def test_online_remove_argmax():
    w, removed = pol.online_remove(Tensor(np.array([5.0, 1.0, 1.0])), "deterministic")
    assert removed == 0


def test_online_remove_all_masked_rejected():
    with pytest.raises(ValueError):
        pol.online_remove(Tensor(np.full(3, -np.inf)), "deterministic")


def test_online_remove_stochastic_frequencies():
    scores = np.array([1.0, 0.0, -1.0, -np.inf])
    p = np.exp(scores[:3] - 1.0)
    p = np.concatenate([p / p.sum(), [0.0]])
    rng = np.random.default_rng(4)
    counts = np.zeros(4)
    n = 10000
    for _ in range(n):
        _, removed = pol.online_remove(Tensor(scores), "stochastic", rng=rng)
        counts[removed] += 1
    sigma = np.sqrt(np.maximum(p * (1 - p) * n, 1e-12))
    assert np.all(np.abs(counts - p * n) <= 3 * sigma + 1e-9)


# ------------------------------------------------------------------- top-k

def oracle_topk(f, k, lo=-1e3, hi=1e3):
    """Independent high-precision bisection on the shift."""
    finite = np.isfinite(f)
    for _ in range(10000):
        mid = 0.5 * (lo + hi)
        total = np.sum(1.0 / (1.0 + np.exp(-(f[finite] + mid))))
        if total > k:
            hi = mid
        else:
            lo = mid
        if hi - lo < 1e-14:
            break
    nu = 0.5 * (lo + hi)
    u = np.zeros_like(f)
    u[finite] = 1.0 / (1.0 + np.exp(-(f[finite] + nu)))
    return u


def test_topk_equal_scores_symmetric():
    u = pol.topk_project(Tensor(np.full(4, 1.7)), 2)
    np.testing.assert_allclose(u.data, np.full(4, 0.5), atol=1e-9)
    assert abs(u.data.sum() - 2) <= 1e-8


def test_topk_matches_oracle_and_is_monotone():
    f = np.array([2.0, 1.0, 0.0, -1.0])
    u = pol.topk_project(Tensor(f), 2).data
    expected = oracle_topk(f, 2)
    np.testing.assert_allclose(u, expected, atol=1e-7)
    assert np.all(np.diff(u) < 0)
    assert abs(u.sum() - 2) <= 1e-8


def test_topk_shift_invariance():
    rng = np.random.default_rng(5)
    f = rng.normal(size=6)
    u1 = pol.topk_project(Tensor(f), 3).data
    u2 = pol.topk_project(Tensor(f + 4.2), 3).data
    np.testing.assert_allclose(u1, u2, atol=1e-7)


def test_topk_rejects_k_too_large():
    f = np.array([1.0, 2.0, -np.inf])
    with pytest.raises(ValueError):
        pol.topk_project(Tensor(f), 2)


def test_topk_masked_items_exactly_zero():
    f = np.array([1.0, -np.inf, 0.5, -np.inf, -0.2])
    u = pol.topk_project(Tensor(f), 2).data
    assert u[1] == 0.0 and u[3] == 0.0
    assert abs(u.sum() - 2) <= 1e-8


def test_topk_grad_constraint_direction_is_null():
    rng = np.random.default_rng(6)
    f = rng.normal(size=6)
    u = pol.topk_project(Tensor(f), 2).data
    g = pol.topk_grad(f, u, np.ones(6))
    np.testing.assert_allclose(g, np.zeros(6), atol=1e-10)


def test_topk_grad_matches_finite_differences():
    rng = np.random.default_rng(7)
    f0 = rng.normal(size=6)
    k = 2
    u0 = pol.topk_project(Tensor(f0), k).data
    v = rng.normal(size=6)
    g = pol.topk_grad(f0, u0, v)
    fd = finite_difference(lambda f: float(np.dot(oracle_topk(f, k), v)), f0, h=1e-6)
    assert rel_error(g, fd, floor=1e-6) <= 1e-4


def test_topk_grad_symmetric_rows():
    f = np.full(5, 0.3)
    u = pol.topk_project(Tensor(f), 2).data
    for i in range(5):
        v = np.zeros(5)
        v[i] = 1.0
        row = pol.topk_grad(f, u, v)
        ref = pol.topk_grad(f, u, np.roll(v, 1))
        np.testing.assert_allclose(np.roll(row, 1), ref, atol=1e-12)


def test_topk_grad_degenerate_rejected():
    u = np.array([1.0, 1.0, 0.0, 0.0])
    with pytest.raises(ValueError):
        pol.topk_grad(np.zeros(4), u, np.ones(4))


def test_topk_backward_through_graph():
    rng = np.random.default_rng(8)
    f0 = rng.normal(size=5)
    v = rng.normal(size=5)
    f = Tensor(f0, requires_grad=True)
    u = pol.topk_project(f, 2)
    (g,) = grad(dc.tsum(dc.mul(u, Tensor(v))), [f])
    np.testing.assert_allclose(g.data, pol.topk_grad(f0, u.data, v), atol=1e-12)


# --------------------------------------------------------------- batch keep

def test_batch_keep_saturated_case():
    u = np.array([0.999, 0.995, 0.002, 0.003, 0.001])
    for mode in ("deterministic", "stochastic"):
        w, kept = pol.batch_keep(Tensor(u), 2, mode, rng=np.random.default_rng(9))
        assert sorted(kept.tolist()) == [0, 1]
        assert w.data.sum() == 2


def test_batch_keep_sum_invariant():
    rng = np.random.default_rng(10)
    for _ in range(20):
        f = rng.normal(size=7)
        u = pol.topk_project(Tensor(f), 3)
        w, kept = pol.batch_keep(u, 3, "stochastic", rng=rng)
        assert w.data.sum() == 3
        assert len(kept) == 3


def test_batch_keep_deterministic_equals_topk_of_scores():
    rng = np.random.default_rng(11)
    f = rng.normal(size=8)
    u = pol.topk_project(Tensor(f), 3)
    _, kept = pol.batch_keep(u, 3, "deterministic")
    by_score = np.sort(np.argsort(-f)[:3])
    np.testing.assert_array_equal(kept, by_score)


def test_batch_keep_too_few_candidates():
    u = np.array([0.5, 0.0, 0.0])
    with pytest.raises(ValueError):
        pol.batch_keep(Tensor(u), 2, "stochastic", rng=np.random.default_rng(0))


# ---------------------------------------------------------- straight-through

def test_st_composed_with_softmax_matches_fd():
    # gradient through ST(softmax(f)) should equal gradient of softmax(f).v
    rng = np.random.default_rng(12)
    f0 = rng.normal(size=4)
    v = rng.normal(size=4)

    f = Tensor(f0, requires_grad=True)
    probs = dc.softmax(f)
    hard = np.zeros(4)
    hard[np.argmax(probs.data)] = 1.0
    w = dc.straight_through(probs, hard)
    (g,) = grad(dc.tsum(dc.mul(w, Tensor(v))), [f])

    def soft_value(fv):
        e = np.exp(fv - fv.max())
        return float(np.dot(e / e.sum(), v))

    fd = finite_difference(soft_value, f0)
    assert rel_error(g.data, fd, floor=1e-6) <= 1e-4


def test_st_zero_downstream_gradient():
    f = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    probs = dc.softmax(f)
    w = dc.straight_through(probs, np.array([0.0, 1.0]))
    (g,) = grad(dc.tsum(dc.mul(w, Tensor(np.zeros(2)))), [f])
    np.testing.assert_array_equal(g.data, np.zeros(2))


# ----------------------------------------------------------------- sketches

def test_sketch_duplicate_rejected():
    with pytest.raises(ValueError):
        make_sketch([1, 1], K=3, M=5)


def test_intermediate_zhat_identity():
    s = make_sketch([0, 2], K=2, M=5)
    inter = IntermediateSketch(s, (SketchEntry(4, 1.0, 3),))
    expected = s.z
    expected[4] += 1
    np.testing.assert_array_equal(inter.zhat, expected)


def test_keep_rejects_unknown_items():
    s = make_sketch([0, 2], K=2, M=5)
    inter = IntermediateSketch(s, (SketchEntry(4, 1.0, 3),))
    with pytest.raises(ValueError):
        inter.keep([0, 3])
