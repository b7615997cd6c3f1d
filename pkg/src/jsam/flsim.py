"""Desk-scale DP federated learning under a pre-drawn selection plan.

The model is multinomial logistic regression on Gaussian-blob synthetic data;
it trains in seconds while still exposing the selection/noise trade-offs the
mechanism is about. The protocol per round: draw nothing (the schedule is
fixed up front), each scheduled client computes per-example gradients of its
local loss, clips them individually to norm C, averages, adds
N(0, sigma_k^2 C^2 I) noise, and the server averages the noisy gradients and
takes a step. sigma_k is calibrated from the client's realized participation
count, which is known in advance precisely because the schedule is pre-drawn.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .costs import CostDistribution, make_clients
from .mechanism import (MechanismOutcome, ServerConfig, fixed_probability_solve,
                        jsam_solve, solve_profiles)
from .payments import expost_payments

BASELINE_KINDS = ("usbm", "fsbm", "bbm", "jsam_ci")
MECHANISM_KINDS = ("jsam",) + BASELINE_KINDS


# ---------------------------------------------------------------------------
# synthetic task and model


@dataclass
class SyntheticTask:
    feature_dim: int
    classes: int
    samples_per_client: int
    centers: np.ndarray
    pool_x: np.ndarray
    pool_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray

    @property
    def weight_dim(self) -> int:
        return self.classes * (self.feature_dim + 1)


def make_task(feature_dim, classes, pool_size, test_size, samples_per_client,
              rng: np.random.Generator, center_spread=2.5, noise=1.0) -> SyntheticTask:
    """Gaussian blobs with balanced labels in both pool and test set."""
    if classes < 2:
        raise ValueError("need at least two classes")
    if pool_size < classes:
        raise ValueError("pool must contain every class")
    centers = rng.normal(0.0, center_spread, size=(classes, feature_dim))

    def blob(size):
        y = rng.permutation(np.arange(size) % classes)
        x = centers[y] + rng.normal(0.0, noise, size=(size, feature_dim))
        return x, y

    pool_x, pool_y = blob(pool_size)
    test_x, test_y = blob(test_size)
    return SyntheticTask(feature_dim, classes, samples_per_client, centers,
                         pool_x, pool_y, test_x, test_y)


def _scores(w, x, classes):
    mat = w.reshape(classes, -1)
    return x @ mat[:, :-1].T + mat[:, -1]


def _log_softmax(scores):
    shifted = scores - scores.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def model_loss(w, x, y, classes) -> float:
    """Mean cross-entropy of the flat logistic weight vector on (x, y)."""
    logp = _log_softmax(_scores(w, x, classes))
    return float(-logp[np.arange(y.size), y].mean())


def test_metrics(w, x, y, classes):
    scores = _scores(w, x, classes)
    logp = _log_softmax(scores)
    loss = float(-logp[np.arange(y.size), y].mean())
    accuracy = float((scores.argmax(axis=1) == y).mean())
    return loss, accuracy


def clip(g, c):
    """Scale g to L2 norm at most c: g / max(1, ||g||/c)."""
    if c <= 0:
        raise ValueError("clipping norm must be > 0")
    g = np.asarray(g, dtype=float)
    return g / max(1.0, float(np.linalg.norm(g)) / c)


def noise_sigma(t_k, eps_k, delta, c2=1.0) -> float:
    """Per-release noise scale keeping t_k participations (eps_k, delta)-private."""
    if t_k < 1:
        raise ValueError("participation count must be >= 1")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    if eps_k <= 0:
        raise ValueError("selected client with zero privacy budget")
    return c2 * math.sqrt(t_k * math.log(1.0 / delta)) / eps_k


def local_noisy_gradient(w, x, y, classes, clip_c, sigma, rng,
                         noiseless=False) -> np.ndarray:
    """Per-example-clipped mean gradient of the local loss, plus noise.

    Each example's gradient is the outer product of (softmax - onehot) with
    the augmented input, whose norm factorizes, so clipping never materializes
    per-example matrices.
    """
    if y.size == 0:
        raise ValueError("empty shard")
    errors = np.exp(_log_softmax(_scores(w, x, classes)))
    errors[np.arange(y.size), y] -= 1.0
    xt = np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)
    if noiseless:
        scale = np.ones(y.size)
    else:
        norms = np.linalg.norm(errors, axis=1) * np.linalg.norm(xt, axis=1)
        with np.errstate(divide="ignore"):
            scale = np.minimum(1.0, clip_c / np.where(norms > 0, norms, 1.0))
    grad = (errors * scale[:, None]).T @ xt / y.size
    flat = grad.ravel()
    if not noiseless and sigma > 0:
        flat = flat + rng.normal(0.0, sigma * clip_c, size=flat.size)
    return flat


# ---------------------------------------------------------------------------
# partition and schedule


@dataclass
class PartitionPlan:
    similarity: int
    shards: list[np.ndarray]
    stage1_count: int


def partition_noniid(task: SyntheticTask, n_clients, similarity,
                     rng: np.random.Generator) -> PartitionPlan:
    """Two-stage split: s% uniform per client, the rest label-sorted blocks.

    Stage 2 deals contiguous blocks of the label-sorted remainder, so each
    client's skewed share spans at most two classes; that cap is validated and
    violations (pool too small or too imbalanced) are hard errors.
    """
    if not 0 <= similarity <= 100:
        raise ValueError("similarity must lie in [0, 100]")
    m = task.samples_per_client
    if task.pool_x.shape[0] < n_clients * m:
        raise ValueError("pool too small for the requested shards")
    n1 = math.ceil(similarity * m / 100.0)
    perm = rng.permutation(task.pool_x.shape[0])
    shards = [perm[j * n1:(j + 1) * n1] for j in range(n_clients)]
    rest = perm[n_clients * n1:]
    rest = rest[np.argsort(task.pool_y[rest], kind="stable")]
    n2 = m - n1
    for j in range(n_clients):
        block = rest[j * n2:(j + 1) * n2]
        if np.unique(task.pool_y[block]).size > 2:
            raise ValueError("label-sorted block spans more than two classes; "
                             "grow the pool or rebalance labels")
        shards[j] = np.concatenate([shards[j], block])
    return PartitionPlan(similarity=int(similarity), shards=shards,
                         stage1_count=n1)


@dataclass
class SelectionSchedule:
    rounds: np.ndarray   # (T, m) client indices, 0-based
    counts: np.ndarray   # realized participation per client
    seed: object = None


def build_schedule(p, rounds, per_round, rng: np.random.Generator,
                   seed=None) -> SelectionSchedule:
    """Pre-draw all per-round client multisets i.i.d. from p, with replacement."""
    p = np.asarray(p, dtype=float)
    if abs(p.sum() - 1.0) > 1e-9 or np.any(p < 0):
        raise ValueError("p must lie on the simplex")
    draws = rng.choice(p.size, size=(rounds, per_round), replace=True,
                       p=p / p.sum())
    counts = np.bincount(draws.ravel(), minlength=p.size)
    return SelectionSchedule(rounds=draws, counts=counts, seed=seed)


# ---------------------------------------------------------------------------
# selection plans


@dataclass
class SelectionPlan:
    """Everything the trainer and the accountant need about one mechanism."""

    kind: str
    eta: float
    probabilities: np.ndarray
    epsilons: np.ndarray
    total_budget: float
    payments: np.ndarray
    payment_errors: np.ndarray
    objective: float | None = None
    threshold: int | None = None
    degenerate: bool = False

    @property
    def total_payment(self) -> float:
        return float(self.payments.sum())

    @property
    def selected_count(self) -> int:
        return int(np.count_nonzero(self.probabilities > 0))


def parse_mechanism(name: str):
    """Split a mechanism string into (kind, subset size or None)."""
    if name.startswith("fsbm-"):
        try:
            m = int(name.split("-", 1)[1])
        except ValueError:
            raise ValueError(f"bad subset size in mechanism '{name}'") from None
        if m < 1:
            raise ValueError("fsbm subset size must be >= 1")
        return "fsbm", m
    if name == "fsbm":
        raise ValueError("fsbm needs a subset size, e.g. fsbm-10")
    if name not in MECHANISM_KINDS:
        raise ValueError(f"unknown mechanism '{name}'")
    return name, None


def initial_local_losses(task: SyntheticTask, shards, w) -> np.ndarray:
    return np.array([model_loss(w, task.pool_x[s], task.pool_y[s], task.classes)
                     for s in shards])


def _jsam_eps_of_report(costs, dist, cfg, use_true_costs=False):
    costs = np.asarray(costs, dtype=float)

    def eps_fn(k, z):
        profiles = np.tile(costs, (z.size, 1))
        profiles[:, k] = z
        virtuals = profiles if use_true_costs else dist.virtual(profiles)
        return solve_profiles(virtuals, cfg).privacy_budgets[:, k]

    return eps_fn


def _fixed_p_eps_of_report(costs, dist, cfg, probabilities_of=None, p_fixed=None):
    costs = np.asarray(costs, dtype=float)

    def eps_fn(k, z):
        profiles = np.tile(costs, (z.size, 1))
        profiles[:, k] = z
        virtuals = dist.virtual(profiles)
        if p_fixed is not None:
            p = np.broadcast_to(p_fixed, profiles.shape)
        else:
            p = probabilities_of(profiles)
        eps, _, _ = fixed_probability_solve(p, virtuals, cfg)
        return eps[:, k]

    return eps_fn


def _fsbm_probabilities(subset_size):
    def probabilities_of(profiles):
        order = np.argsort(profiles, axis=1, kind="stable")
        p = np.zeros_like(profiles)
        np.put_along_axis(p, order[:, :subset_size], 1.0 / subset_size, axis=1)
        return p

    return probabilities_of


def make_plan(name, costs, dist: CostDistribution, cfg: ServerConfig,
              bbm_losses=None, payment_grid: int = 200) -> SelectionPlan:
    """Build the selection plan and its payments for any mechanism kind.

    Payments are envelope payments against the realized rival reports (their
    expectation over rivals is the interim rule), except jsam_ci, which pays
    the reported cost outright: c_k * eps_k, leaving no information rent.
    """
    kind, subset = parse_mechanism(name)
    costs = np.asarray(costs, dtype=float)
    n = costs.size
    if np.any(costs <= dist.lower) and dist.virtual(dist.lower) <= 0:
        raise ValueError("cost at the support boundary has zero virtual cost")

    objective = None
    threshold = None
    if kind == "jsam":
        clients = make_clients(dist, costs)
        outcome = jsam_solve(clients, cfg)
        p, eps, budget = outcome.probabilities, outcome.privacy_budgets, outcome.total_budget
        objective, threshold = outcome.objective_value, outcome.threshold
        eps_fn = _jsam_eps_of_report(costs, dist, cfg)
    elif kind == "jsam_ci":
        sol = solve_profiles(costs[None, :], cfg)
        p, eps, budget = sol.probabilities[0], sol.privacy_budgets[0], float(sol.total_budget[0])
        objective, threshold = float(sol.objective_value[0]), int(sol.threshold[0])
        eps_fn = None
    elif kind == "usbm":
        p = np.full(n, 1.0 / n)
        eps, budget, objective = _fixed_plan(p, costs, dist, cfg)
        eps_fn = _fixed_p_eps_of_report(costs, dist, cfg, p_fixed=p)
    elif kind == "fsbm":
        if subset > n:
            raise ValueError("fsbm subset larger than the client count")
        p = _fsbm_probabilities(subset)(costs[None, :])[0]
        eps, budget, objective = _fixed_plan(p, costs, dist, cfg)
        eps_fn = _fixed_p_eps_of_report(costs, dist, cfg,
                                        probabilities_of=_fsbm_probabilities(subset))
    elif kind == "bbm":
        if bbm_losses is None:
            raise ValueError("bbm needs probe losses for the initial model")
        losses = np.asarray(bbm_losses, dtype=float)
        if losses.size != n or np.any(losses <= 0):
            raise ValueError("bbm probe losses must be positive, one per client")
        p = losses / losses.sum()
        eps, budget, objective = _fixed_plan(p, costs, dist, cfg)
        eps_fn = _fixed_p_eps_of_report(costs, dist, cfg, p_fixed=p)
    else:  # pragma: no cover - parse_mechanism already rejects
        raise ValueError(kind)

    degenerate = cfg.eta == 0
    if kind == "jsam_ci":
        payments = costs * eps
        errors = np.zeros(n)
    elif degenerate:
        payments = np.zeros(n)
        errors = np.zeros(n)
    else:
        payments, errors = expost_payments(costs, dist.upper, eps_fn,
                                           grid_size=payment_grid)
    return SelectionPlan(kind=name, eta=cfg.eta, probabilities=p, epsilons=eps,
                         total_budget=budget, payments=payments,
                         payment_errors=errors, objective=objective,
                         threshold=threshold, degenerate=degenerate)


def _fixed_plan(p, costs, dist, cfg):
    virtuals = dist.virtual(costs)
    eps, budget, objective = fixed_probability_solve(p[None, :], virtuals[None, :], cfg)
    return eps[0], float(budget[0]), float(objective[0])


def baseline_plan(name, costs, dist, cfg, **kwargs) -> SelectionPlan:
    """make_plan restricted to the comparison mechanisms."""
    kind, _ = parse_mechanism(name)
    if kind == "jsam":
        raise ValueError("jsam is not a baseline")
    return make_plan(name, costs, dist, cfg, **kwargs)


def match_eta_to_cost(target_cost, plan_fn, lo=1e-8, hi=None, iters=60,
                      rel_tol=1e-3):
    """Find eta so plan_fn(eta).total_payment hits target_cost (monotone).

    Returns (eta, plan). Bisection on log eta; the bracket top doubles until
    the cost exceeds the target.
    """
    if target_cost <= 0:
        raise ValueError("target cost must be > 0")
    hi = hi if hi is not None else 1.0
    plan_hi = plan_fn(hi)
    for _ in range(200):
        if plan_hi.total_payment >= target_cost:
            break
        hi *= 4.0
        plan_hi = plan_fn(hi)
    else:
        raise ArithmeticError("could not bracket the target cost")
    llo, lhi = math.log(lo), math.log(hi)
    best = (hi, plan_hi)
    for _ in range(iters):
        mid = 0.5 * (llo + lhi)
        plan = plan_fn(math.exp(mid))
        if abs(plan.total_payment - target_cost) <= rel_tol * target_cost:
            return math.exp(mid), plan
        if plan.total_payment < target_cost:
            llo = mid
        else:
            lhi = mid
            best = (math.exp(mid), plan)
    return best


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainSettings:
    rounds: int = 1000
    per_round: int = 10
    clip: float = 6.0
    learning_rate: float = 0.3
    delta: float = 1e-5
    c2: float = 1.0
    similarity: int = 100
    noiseless: bool = False   # diagnostic mode: no clipping, no noise


@dataclass
class RunRecord:
    run_id: str
    mechanism: str
    seed: int
    similarity: int
    eta: float
    total_cost: float
    train_loss: np.ndarray
    test_loss: np.ndarray
    test_accuracy: np.ndarray
    diverged: bool = False

    CSV_HEADER = ("run_id,mechanism,seed,s,eta,round,train_loss,test_loss,"
                  "test_accuracy,cumulative_monetary_cost")

    def rows(self):
        """CSV rows; the monetary cost is paid up front, constant per round."""
        for t in range(self.train_loss.size):
            yield (f"{self.run_id},{self.mechanism},{self.seed},"
                   f"{self.similarity},{float(self.eta)!r},{t + 1},"
                   f"{float(self.train_loss[t])!r},{float(self.test_loss[t])!r},"
                   f"{float(self.test_accuracy[t])!r},{float(self.total_cost)!r}")


def train(task: SyntheticTask, shards, plan: SelectionPlan,
          schedule: SelectionSchedule, settings: TrainSettings,
          rng: np.random.Generator, w0=None, run_id="run", mechanism=None,
          seed=0) -> RunRecord:
    """Run the full pre-scheduled DP-FL protocol and record per-round metrics.

    Noise scales come from realized participation counts; a scheduled client
    with a zero budget is a configuration error. Divergence (non-finite loss)
    is recorded in the output, not raised.
    """
    n = len(shards)
    sigma = np.zeros(n)
    for k in range(n):
        if schedule.counts[k] > 0 and not settings.noiseless:
            sigma[k] = noise_sigma(schedule.counts[k], plan.epsilons[k],
                                   settings.delta, settings.c2)
    w = np.zeros(task.weight_dim) if w0 is None else np.asarray(w0, dtype=float).copy()
    pool_idx = np.concatenate(shards)
    px, py = task.pool_x[pool_idx], task.pool_y[pool_idx]

    t_rounds = schedule.rounds.shape[0]
    train_loss = np.zeros(t_rounds)
    test_loss = np.zeros(t_rounds)
    test_acc = np.zeros(t_rounds)
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(t_rounds):
            grads = [
                local_noisy_gradient(w, task.pool_x[shards[k]],
                                     task.pool_y[shards[k]], task.classes,
                                     settings.clip, sigma[k], rng,
                                     noiseless=settings.noiseless)
                for k in schedule.rounds[t]
            ]
            w = w - settings.learning_rate * np.mean(grads, axis=0)
            train_loss[t] = model_loss(w, px, py, task.classes)
            test_loss[t], test_acc[t] = test_metrics(w, task.test_x, task.test_y,
                                                     task.classes)
    return RunRecord(
        run_id=run_id,
        mechanism=mechanism if mechanism is not None else plan.kind,
        seed=seed,
        similarity=settings.similarity,
        eta=plan.eta,
        total_cost=plan.total_payment,
        train_loss=train_loss,
        test_loss=test_loss,
        test_accuracy=test_acc,
        diverged=bool(not np.isfinite(train_loss[-1])),
    )
