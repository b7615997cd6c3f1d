"""Synthetic task, DP training loop, schedules, and baseline plans."""

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from jsam.costs import UniformCosts
from jsam.flsim import (RunRecord, SelectionPlan, SelectionSchedule,
                        TrainSettings, baseline_plan, build_schedule, clip,
                        initial_local_losses, local_noisy_gradient, make_plan,
                        make_task, match_eta_to_cost, model_loss, noise_sigma,
                        parse_mechanism, partition_noniid, train)
from jsam.flsim import test_metrics as eval_metrics
from jsam.mechanism import ServerConfig

SIGMA_T100_E1 = 33.93070212207556  # sqrt(100 * ln(1e5))

FAST = ServerConfig(eta=1.0, q_coefficient=1.0, grid_delta=1e-2)


def _small_task(rng, n_clients=4, m=24, classes=3, dim=5, test=60):
    return make_task(dim, classes, n_clients * m, test, m, rng,
                     center_spread=3.0, noise=0.8)


# ---------------------------------------------------------------------------
# noise calibration


def test_noise_sigma_frozen_value():
    assert noise_sigma(100, 1.0, 1e-5, 1.0) == SIGMA_T100_E1


def test_noise_sigma_scaling_laws_are_exact():
    base = noise_sigma(100, 1.0, 1e-5, 1.0)
    assert noise_sigma(400, 1.0, 1e-5, 1.0) == 2.0 * base
    assert noise_sigma(100, 2.0, 1e-5, 1.0) == base / 2.0


def test_noise_sigma_guards():
    with pytest.raises(ValueError, match="participation"):
        noise_sigma(0, 1.0, 1e-5)
    with pytest.raises(ValueError, match="delta"):
        noise_sigma(10, 1.0, 2.0)
    with pytest.raises(ValueError, match="zero privacy budget"):
        noise_sigma(10, 0.0, 1e-5)


@given(st.integers(1, 10 ** 6), st.floats(1e-3, 1e3), st.floats(1e-8, 0.5),
       st.floats(0.1, 10.0))
def test_noise_sigma_round_trips_the_budget(t_k, eps, delta, c2):
    sigma = noise_sigma(t_k, eps, delta, c2)
    back = c2 * math.sqrt(t_k * math.log(1.0 / delta)) / sigma
    assert back == pytest.approx(eps, rel=1e-9)


# ---------------------------------------------------------------------------
# gradients


def test_clip_examples():
    assert clip(np.array([3.0, 4.0]), 2.5) == pytest.approx([1.5, 2.0])
    g = np.array([0.6, 0.8])
    assert clip(g, 2.0) is not g
    assert clip(g, 2.0) == pytest.approx(g)
    assert np.all(clip(np.zeros(3), 1.0) == 0.0)
    with pytest.raises(ValueError):
        clip(g, 0.0)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=20),
       st.floats(0.01, 10.0))
def test_clip_norm_bound(values, c):
    out = clip(np.array(values), c)
    assert np.linalg.norm(out) <= c * (1 + 1e-12)


def test_single_example_gradient_matches_softmax_algebra(rng):
    classes, dim = 3, 4
    w = rng.normal(0, 0.5, classes * (dim + 1))
    x = rng.normal(0, 1, (1, dim))
    y = np.array([1])
    got = local_noisy_gradient(w, x, y, classes, clip_c=1e9, sigma=0.0, rng=rng)
    mat = w.reshape(classes, dim + 1)
    scores = x[0] @ mat[:, :-1].T + mat[:, -1]
    soft = np.exp(scores - scores.max())
    soft = soft / soft.sum()
    soft[1] -= 1.0
    expected = np.outer(soft, np.concatenate([x[0], [1.0]])).ravel()
    assert got == pytest.approx(expected, abs=1e-12)


def test_tiny_clip_shrinks_the_gradient_to_zero(rng):
    task = _small_task(rng)
    g = local_noisy_gradient(np.zeros(task.weight_dim), task.pool_x[:10],
                             task.pool_y[:10], task.classes, clip_c=1e-9,
                             sigma=0.0, rng=rng)
    assert np.linalg.norm(g) <= 1e-9


def test_noiseless_flag_disables_clipping(rng):
    task = _small_task(rng)
    w = rng.normal(0, 2.0, task.weight_dim)
    raw = local_noisy_gradient(w, task.pool_x[:8], task.pool_y[:8],
                               task.classes, clip_c=1e-6, sigma=5.0, rng=rng,
                               noiseless=True)
    again = local_noisy_gradient(w, task.pool_x[:8], task.pool_y[:8],
                                 task.classes, clip_c=123.0, sigma=0.0,
                                 rng=rng, noiseless=True)
    assert raw == pytest.approx(again, abs=0)


def test_empty_shard_is_rejected(rng):
    with pytest.raises(ValueError, match="empty"):
        local_noisy_gradient(np.zeros(6), np.zeros((0, 2)), np.zeros(0, int),
                             2, 1.0, 0.0, rng)


def test_clipped_mean_matches_finite_differences_of_the_surrogate(rng):
    classes, dim, n = 3, 3, 7
    x = rng.normal(0, 1, (n, dim))
    y = rng.integers(0, classes, n)
    xt = np.concatenate([x, np.ones((n, 1))], axis=1)
    for _ in range(5):
        w = rng.normal(0, 0.8, classes * (dim + 1))
        clip_c = 0.9  # binding for some examples
        got = local_noisy_gradient(w, x, y, classes, clip_c, 0.0, rng)

        def scales(wv):
            scores = x @ wv.reshape(classes, -1)[:, :-1].T + wv.reshape(classes, -1)[:, -1]
            sh = scores - scores.max(axis=1, keepdims=True)
            soft = np.exp(sh) / np.exp(sh).sum(axis=1, keepdims=True)
            soft[np.arange(n), y] -= 1.0
            norms = np.linalg.norm(soft, axis=1) * np.linalg.norm(xt, axis=1)
            return np.minimum(1.0, clip_c / norms)

        s_frozen = scales(w)

        def surrogate(wv):
            scores = x @ wv.reshape(classes, -1)[:, :-1].T + wv.reshape(classes, -1)[:, -1]
            sh = scores - scores.max(axis=1, keepdims=True)
            logp = sh - np.log(np.exp(sh).sum(axis=1, keepdims=True))
            per_example = -logp[np.arange(n), y]
            return float((s_frozen * per_example).mean())

        fd = np.zeros(w.size)
        h = 1e-6
        for i in range(w.size):
            wp, wm = w.copy(), w.copy()
            wp[i] += h
            wm[i] -= h
            fd[i] = (surrogate(wp) - surrogate(wm)) / (2 * h)
        denom = max(np.linalg.norm(got), 1e-12)
        assert np.linalg.norm(got - fd) / denom <= 1e-5


# ---------------------------------------------------------------------------
# task and partition


def test_task_pool_is_label_balanced(rng):
    task = make_task(4, 3, 90, 30, 30, rng)
    counts = np.bincount(task.pool_y, minlength=3)
    assert np.all(counts == 30)
    with pytest.raises(ValueError):
        make_task(4, 1, 90, 30, 30, rng)
    with pytest.raises(ValueError):
        make_task(4, 5, 3, 30, 30, rng)


def test_uniform_partition_matches_pool_proportions(rng):
    task = make_task(4, 4, 400, 40, 40, rng)
    plan = partition_noniid(task, 10, 100, rng)
    assert plan.stage1_count == 40
    for shard in plan.shards:
        counts = np.bincount(task.pool_y[shard], minlength=4)
        # 4-sigma band around the balanced expectation
        expect = 40 / 4
        band = 4 * math.sqrt(40 * 0.25 * 0.75)
        assert np.all(np.abs(counts - expect) <= band)


def test_skewed_partition_caps_labels_at_two(rng):
    task = make_task(4, 5, 400, 40, 40, rng)
    plan = partition_noniid(task, 10, 0, rng)
    assert plan.stage1_count == 0
    for shard in plan.shards:
        assert np.unique(task.pool_y[shard]).size <= 2


def test_mixed_partition_counts_and_disjointness(rng):
    task = make_task(4, 5, 600, 40, 60, rng)
    plan = partition_noniid(task, 10, 30, rng)
    assert plan.stage1_count == 18  # ceil(30% of 60)
    all_idx = np.concatenate(plan.shards)
    assert all_idx.size == 600
    assert np.unique(all_idx).size == 600


def test_partition_guards(rng):
    task = make_task(4, 3, 90, 30, 30, rng)
    with pytest.raises(ValueError, match="pool"):
        partition_noniid(task, 4, 50, rng)
    with pytest.raises(ValueError, match="similarity"):
        partition_noniid(task, 2, 150, rng)
    lopsided = make_task(4, 5, 200, 30, 100, rng)
    with pytest.raises(ValueError, match="two classes"):
        partition_noniid(lopsided, 2, 0, rng)


# ---------------------------------------------------------------------------
# schedule


def test_point_mass_schedule_hits_one_client(rng):
    sched = build_schedule(np.array([1.0, 0.0, 0.0]), 50, 4, rng)
    assert sched.counts[0] == 200
    assert np.all(sched.counts[1:] == 0)


def test_uniform_schedule_concentrates(rng):
    n, t, m = 10, 1000, 10
    sched = build_schedule(np.full(n, 1.0 / n), t, m, rng)
    assert sched.counts.sum() == t * m
    expect = t * m / n
    band = 5 * math.sqrt(t * m * (1 / n) * (1 - 1 / n))
    assert np.all(np.abs(sched.counts - expect) <= band)


def test_schedule_is_seed_deterministic():
    p = np.array([0.25, 0.5, 0.25])
    a = build_schedule(p, 30, 3, np.random.default_rng(11))
    b = build_schedule(p, 30, 3, np.random.default_rng(11))
    assert a.rounds.tobytes() == b.rounds.tobytes()


def test_schedule_rejects_non_simplex_p(rng):
    with pytest.raises(ValueError):
        build_schedule(np.array([0.7, 0.7]), 10, 2, rng)


# ---------------------------------------------------------------------------
# plans and baselines


def test_parse_mechanism_forms():
    assert parse_mechanism("jsam") == ("jsam", None)
    assert parse_mechanism("fsbm-10") == ("fsbm", 10)
    for bad in ("fsbm", "fsbm-x", "fsbm-0", "nope"):
        with pytest.raises(ValueError):
            parse_mechanism(bad)


def test_usbm_plan_is_uniform(uniform01, rng):
    costs = rng.uniform(0.1, 0.9, 5)
    plan = baseline_plan("usbm", costs, uniform01, FAST, payment_grid=80)
    assert plan.probabilities == pytest.approx(np.full(5, 0.2))
    assert plan.selected_count == 5
    assert plan.total_budget > 0


def test_fsbm_with_every_client_equals_usbm(uniform01, rng):
    costs = rng.uniform(0.1, 0.9, 4)
    a = baseline_plan("usbm", costs, uniform01, FAST, payment_grid=60)
    b = baseline_plan("fsbm-4", costs, uniform01, FAST, payment_grid=60)
    assert a.probabilities.tobytes() == b.probabilities.tobytes()
    assert a.epsilons == pytest.approx(b.epsilons, rel=1e-12)
    assert a.total_budget == pytest.approx(b.total_budget, rel=1e-12)


def test_fsbm_selects_the_cheapest_subset(uniform01):
    costs = np.array([0.8, 0.2, 0.5, 0.3])
    plan = baseline_plan("fsbm-2", costs, uniform01, FAST, payment_grid=60)
    assert plan.probabilities == pytest.approx([0.0, 0.5, 0.0, 0.5])
    with pytest.raises(ValueError, match="subset"):
        baseline_plan("fsbm-9", costs, uniform01, FAST)


def test_bbm_needs_probe_losses(uniform01, rng):
    costs = rng.uniform(0.1, 0.9, 4)
    with pytest.raises(ValueError, match="probe"):
        baseline_plan("bbm", costs, uniform01, FAST)
    losses = np.array([1.0, 2.0, 3.0, 4.0])
    plan = baseline_plan("bbm", costs, uniform01, FAST, bbm_losses=losses,
                         payment_grid=60)
    assert plan.probabilities == pytest.approx(losses / losses.sum())


def test_jsam_is_not_a_baseline(uniform01, rng):
    with pytest.raises(ValueError, match="baseline"):
        baseline_plan("jsam", rng.uniform(0.1, 0.9, 3), uniform01, FAST)


def test_jsam_ci_pays_reported_cost_exactly(uniform01, rng):
    costs = rng.uniform(0.1, 0.9, 4)
    plan = make_plan("jsam_ci", costs, uniform01, FAST)
    assert plan.payments == pytest.approx(costs * plan.epsilons, rel=1e-12)


def test_cost_at_a_zero_virtual_boundary_is_rejected(uniform01):
    with pytest.raises(ValueError, match="zero virtual cost"):
        make_plan("jsam", np.array([0.0, 0.5]), uniform01, FAST)


def test_true_cost_variant_pays_less_in_expectation(uniform01, rng):
    gaps = []
    for _ in range(30):
        costs = rng.uniform(0.05, 0.95, 3)
        full = make_plan("jsam", costs, uniform01, FAST, payment_grid=120)
        ci = make_plan("jsam_ci", costs, uniform01, FAST)
        gaps.append(full.total_payment - ci.total_payment)
    gaps = np.asarray(gaps)
    sem = gaps.std(ddof=1) / math.sqrt(gaps.size)
    assert gaps.mean() >= -3 * sem


def test_match_eta_to_cost_brackets_a_monotone_curve():
    class P:
        def __init__(self, eta):
            self.total_payment = 2.0 * eta

    eta, plan = match_eta_to_cost(3.0, P, rel_tol=1e-6)
    assert plan.total_payment == pytest.approx(3.0, rel=1e-5)
    assert eta == pytest.approx(1.5, rel=1e-5)
    with pytest.raises(ValueError):
        match_eta_to_cost(0.0, P)


# ---------------------------------------------------------------------------
# training loop


def _toy_run(rng, plan_eps, rounds=6, noiseless=False, lr=0.3):
    task = _small_task(rng)
    shards = partition_noniid(task, 4, 100, rng).shards
    n = 4
    plan = SelectionPlan(kind="usbm", eta=1.0,
                         probabilities=np.full(n, 0.25),
                         epsilons=np.full(n, plan_eps),
                         total_budget=1.0,
                         payments=np.full(n, 0.25),
                         payment_errors=np.zeros(n))
    settings = TrainSettings(rounds=rounds, per_round=2, clip=6.0,
                             learning_rate=lr, similarity=100,
                             noiseless=noiseless)
    schedule = build_schedule(plan.probabilities, rounds, 2, rng)
    record = train(task, shards, plan, schedule, settings, rng, run_id="t",
                   mechanism="usbm", seed=0)
    return record, plan


def test_zero_learning_rate_freezes_the_model(rng):
    record, _ = _toy_run(rng, plan_eps=5.0, lr=0.0)
    assert np.all(record.train_loss == record.train_loss[0])
    assert np.all(record.test_accuracy == record.test_accuracy[0])


def test_one_noiseless_round_is_a_plain_gradient_step(rng):
    task = _small_task(rng)
    shards = partition_noniid(task, 4, 100, rng).shards
    plan = SelectionPlan(kind="usbm", eta=1.0,
                         probabilities=np.full(4, 0.25),
                         epsilons=np.full(4, 1.0), total_budget=1.0,
                         payments=np.zeros(4), payment_errors=np.zeros(4))
    schedule = SelectionSchedule(rounds=np.array([[0, 2]]),
                                 counts=np.bincount([0, 2], minlength=4))
    settings = TrainSettings(rounds=1, per_round=2, learning_rate=0.5,
                             similarity=100, noiseless=True)
    w0 = rng.normal(0, 0.2, task.weight_dim)
    record = train(task, shards, plan, schedule, settings,
                   np.random.default_rng(0), w0=w0)

    def mean_loss(wv):
        return 0.5 * sum(model_loss(wv, task.pool_x[shards[k]],
                                    task.pool_y[shards[k]], task.classes)
                         for k in (0, 2))

    grad = np.zeros(task.weight_dim)
    h = 1e-6
    for i in range(task.weight_dim):
        wp, wm = w0.copy(), w0.copy()
        wp[i] += h
        wm[i] -= h
        grad[i] = (mean_loss(wp) - mean_loss(wm)) / (2 * h)
    w1 = w0 - 0.5 * grad
    pool = np.concatenate(shards)
    want = model_loss(w1, task.pool_x[pool], task.pool_y[pool], task.classes)
    assert record.train_loss[0] == pytest.approx(want, abs=1e-8)


def test_full_participation_noiseless_matches_centralized(rng):
    task = _small_task(rng, n_clients=4, m=30)
    shards = partition_noniid(task, 4, 100, rng).shards
    plan = SelectionPlan(kind="usbm", eta=1.0,
                         probabilities=np.full(4, 0.25),
                         epsilons=np.full(4, 1.0), total_budget=1.0,
                         payments=np.zeros(4), payment_errors=np.zeros(4))
    t = 50
    schedule = SelectionSchedule(rounds=np.tile(np.arange(4), (t, 1)),
                                 counts=np.full(4, t))
    settings = TrainSettings(rounds=t, per_round=4, learning_rate=0.4,
                             similarity=100, noiseless=True)
    record = train(task, shards, plan, schedule, settings,
                   np.random.default_rng(0))
    # centralized: equal shard sizes make the mean of shard means the pool mean
    w = np.zeros(task.weight_dim)
    pool = np.concatenate(shards)
    for _ in range(t):
        w = w - 0.4 * local_noisy_gradient(w, task.pool_x[pool],
                                           task.pool_y[pool], task.classes,
                                           1.0, 0.0, rng, noiseless=True)
    _, central_acc = eval_metrics(w, task.test_x, task.test_y, task.classes)
    assert abs(record.test_accuracy[-1] - central_acc) <= 0.02


def test_huge_noise_swamps_learning(rng):
    record, _ = _toy_run(rng, plan_eps=1e-6, rounds=40)
    assert record.train_loss[-1] > 100.0
    # one draw can luckily label whole clusters; the mean across rounds cannot
    assert record.test_accuracy.mean() <= 1.0 / 3.0 + 0.25


def test_sigma_overflow_is_recorded_as_divergence(rng):
    with np.errstate(over="ignore"):
        record, _ = _toy_run(rng, plan_eps=5e-324, rounds=3)
    assert record.diverged
    assert not np.isfinite(record.train_loss[-1])


def test_scheduled_client_with_zero_budget_is_a_config_error(rng):
    with pytest.raises(ValueError, match="zero privacy budget"):
        _toy_run(rng, plan_eps=0.0)


def test_run_record_rows_and_header(rng):
    record, plan = _toy_run(rng, plan_eps=5.0, rounds=4)
    rows = list(record.rows())
    assert len(rows) == 4
    assert RunRecord.CSV_HEADER == ("run_id,mechanism,seed,s,eta,round,"
                                    "train_loss,test_loss,test_accuracy,"
                                    "cumulative_monetary_cost")
    for t, row in enumerate(rows):
        parts = row.split(",")
        assert parts[0] == "t" and parts[1] == "usbm"
        assert int(parts[5]) == t + 1
        assert float(parts[9]) == plan.total_payment
        assert float(parts[6]) == record.train_loss[t]  # repr round-trips


def test_initial_local_losses_probe(rng):
    task = _small_task(rng)
    shards = partition_noniid(task, 4, 100, rng).shards
    w = rng.normal(0, 0.1, task.weight_dim)
    losses = initial_local_losses(task, shards, w)
    assert losses.shape == (4,)
    assert np.all(losses > 0)
