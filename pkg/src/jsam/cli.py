"""Config-driven command line: solve plans, simulate training, audit, sweep."""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import seeding
from .config import (ConfigError, ExperimentConfig, from_dict, load,
                     server_config, validate)
from .flsim import (SelectionPlan, build_schedule, initial_local_losses,
                    make_plan, make_task, parse_mechanism, partition_noniid,
                    train)
from .mechanism import optimal_epsilon
from .oracle import cross_check
from .payments import interim_allocation, payment, verify_ic, verify_ir, \
    verify_monotone_allocation
from .costs import make_clients
from .flsim import RunRecord, noise_sigma


def _sample_costs(cfg: ExperimentConfig, dist, seed):
    if cfg.sensitivities is not None:
        return np.asarray(cfg.sensitivities, dtype=float)
    rng = seeding.derive(seed, seeding.COSTS)
    return dist.sample(rng, size=cfg.clients)


def _build_task(cfg: ExperimentConfig, seed):
    pool = cfg.clients * cfg.task.samples_per_client
    return make_task(cfg.task.feature_dim, cfg.task.classes, pool,
                     cfg.task.test_size, cfg.task.samples_per_client,
                     seeding.derive(seed, seeding.TASK),
                     center_spread=cfg.task.center_spread,
                     noise=cfg.task.noise)


def _initial_weights(cfg: ExperimentConfig, seed):
    rng = seeding.derive(seed, seeding.INIT)
    return rng.normal(0.0, 0.01, size=cfg.task.weight_dim)


def _plan_for(cfg, name, seed, dist, costs, scfg, task=None, shards=None,
              w0=None) -> SelectionPlan:
    kind, _ = parse_mechanism(name)
    bbm_losses = None
    if kind == "bbm":
        bbm_losses = initial_local_losses(task, shards, w0)
    return make_plan(name, costs, dist, scfg, bbm_losses=bbm_losses,
                     payment_grid=cfg.payment_grid)


def _write(text, path):
    if path is None:
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def cmd_solve(cfg: ExperimentConfig) -> int:
    seed = cfg.seeds[0]
    name = cfg.mechanisms[0]
    dist = cfg.costs.build()
    costs = _sample_costs(cfg, dist, seed)
    scfg = server_config(cfg)
    kind, _ = parse_mechanism(name)
    task = shards = w0 = None
    if kind == "bbm":
        task = _build_task(cfg, seed)
        shards = partition_noniid(task, cfg.clients, cfg.train.similarity,
                                  seeding.derive(seed, seeding.PARTITION)).shards
        w0 = _initial_weights(cfg, seed)
    plan = _plan_for(cfg, name, seed, dist, costs, scfg, task, shards, w0)
    doc = {
        "mechanism": name,
        "seed": seed,
        "eta": scfg.eta,
        "q_coefficient": scfg.q_coefficient,
        "objective_form": scfg.objective_form,
        "sensitivities": [float(c) for c in costs],
        "virtual_costs": [float(v) for v in np.atleast_1d(dist.virtual(costs))],
        "probabilities": [float(x) for x in plan.probabilities],
        "privacy_budgets": [float(x) for x in plan.epsilons],
        "payments": [float(x) for x in plan.payments],
        "total_payment": plan.total_payment,
        "total_budget": plan.total_budget,
        "threshold": plan.threshold,
        "objective_value": plan.objective,
        "selected_count": plan.selected_count,
        "degenerate": plan.degenerate,
    }
    _write(json.dumps(doc, indent=2, sort_keys=True) + "\n", cfg.out)
    return 0


def _simulate_one(cfg, name, seed, eta=None):
    dist = cfg.costs.build()
    costs = _sample_costs(cfg, dist, seed)
    scfg = server_config(cfg, eta=eta)
    if scfg.eta == 0:
        raise ConfigError("eta must be > 0 to simulate")
    task = _build_task(cfg, seed)
    shards = partition_noniid(task, cfg.clients, cfg.train.similarity,
                              seeding.derive(seed, seeding.PARTITION)).shards
    w0 = _initial_weights(cfg, seed)
    plan = _plan_for(cfg, name, seed, dist, costs, scfg, task, shards, w0)
    tag = seeding.mechanism_tag(name)
    schedule = build_schedule(plan.probabilities, cfg.train.rounds,
                              cfg.train.per_round,
                              seeding.derive(seed, seeding.SCHEDULE, tag))
    run_id = f"{name}-s{cfg.train.similarity}-eta{scfg.eta:g}-seed{seed}"
    record = train(task, shards, plan, schedule, cfg.train,
                   seeding.derive(seed, seeding.NOISE, tag), w0=w0,
                   run_id=run_id, mechanism=name, seed=seed)
    return record, plan


def cmd_simulate(cfg: ExperimentConfig) -> int:
    lines = [RunRecord.CSV_HEADER]
    for name in cfg.mechanisms:
        for seed in cfg.seeds:
            record, _ = _simulate_one(cfg, name, seed)
            if record.diverged:
                print(f"warning: run {record.run_id} diverged", file=sys.stderr)
            lines.extend(record.rows())
    _write("\n".join(lines) + "\n", cfg.out)
    return 0


def cmd_sweep(cfg: ExperimentConfig) -> int:
    if not cfg.eta_grid:
        raise ConfigError("eta_grid is required for sweep")
    header = ("eta,mechanism,seed,total_budget,total_payment,selected_count,"
              "final_test_accuracy,final_test_loss")
    lines = [header]
    for eta in cfg.eta_grid:
        for name in cfg.mechanisms:
            for seed in cfg.seeds:
                record, plan = _simulate_one(cfg, name, seed, eta=eta)
                lines.append(
                    f"{float(eta)!r},{name},{seed},{float(plan.total_budget)!r},"
                    f"{float(plan.total_payment)!r},{plan.selected_count},"
                    f"{float(record.test_accuracy[-1])!r},"
                    f"{float(record.test_loss[-1])!r}")
    _write("\n".join(lines) + "\n", cfg.out)
    return 0


def _audit_checks(cfg: ExperimentConfig):
    if cfg.clients > 4:
        raise ConfigError("clients must be <= 4 for audit (oracle guard)")
    seed = cfg.seeds[0]
    dist = cfg.costs.build()
    scfg = server_config(cfg)
    checks = []

    rng = seeding.derive(seed, seeding.COSTS)
    worst = 0.0
    for _ in range(500):
        n = int(rng.integers(1, 7))
        p = rng.dirichlet(np.ones(n))
        v = rng.uniform(0.05, 2.0, size=n)
        b = float(np.exp(rng.uniform(np.log(0.1), np.log(10.0))))
        eps = optimal_epsilon(p, b, v)
        worst = max(worst, abs(float(np.sum(v * eps)) - b) / b)
    checks.append(("budget-identity", worst <= 1e-9, f"max rel err {worst:.2e}"))

    ok = True
    detail = ""
    for i in range(3):
        costs = dist.sample(seeding.derive(seed, seeding.COSTS, 10 + i),
                            size=cfg.clients)
        clients = make_clients(dist, costs)
        report = cross_check(clients, scfg)
        if not report.passed:
            ok = False
            detail = (f"instance {i}: gap {report.objective_gap:.3e} "
                      f"tol {report.tolerance:.3e} "
                      f"structure={report.structure_ok}")
            break
    checks.append(("grid-vs-brute-force", ok, detail or "3 instances"))

    mc_seed = int(seeding.derive(seed, seeding.INTERIM).integers(2 ** 31))
    interim = interim_allocation(1, dist, cfg.clients, scfg, grid_size=60,
                                 samples=600, seed=mc_seed)
    mono = verify_monotone_allocation(interim)
    checks.append(("interim-monotone", mono.passed,
                   f"max increase {mono.max_increase:.3e} tol {mono.tolerance:.3e}"))

    rng = seeding.derive(seed, seeding.COSTS, 99)
    lo, hi = interim.grid[0], interim.grid[-1]
    ic_ok, ir_ok = True, True
    for _ in range(10):
        c = float(rng.uniform(lo, hi))
        reports = rng.uniform(lo, hi, size=10)
        if not verify_ic(c, reports, interim).passed:
            ic_ok = False
        quote = payment(c, interim)
        if not verify_ir(c, quote.amount, float(interim.at(c))):
            ir_ok = False
    checks.append(("incentive-compatibility", ic_ok, "10 costs x 10 misreports"))
    checks.append(("individual-rationality", ir_ok, "10 sampled costs"))

    rng = seeding.derive(seed, seeding.COSTS, 7)
    worst = 0.0
    for _ in range(200):
        t_k = int(rng.integers(1, 1000))
        eps = float(np.exp(rng.uniform(np.log(1e-3), np.log(1e3))))
        sigma = noise_sigma(t_k, eps, cfg.train.delta, cfg.train.c2)
        back = cfg.train.c2 * np.sqrt(t_k * np.log(1.0 / cfg.train.delta)) / sigma
        worst = max(worst, abs(back - eps) / eps)
    checks.append(("noise-calibration", worst <= 1e-9, f"max rel err {worst:.2e}"))
    return checks


def cmd_audit(cfg: ExperimentConfig) -> int:
    checks = _audit_checks(cfg)
    lines = []
    failed = False
    for name, ok, detail in checks:
        status = "ok" if ok else "FAIL"
        failed = failed or not ok
        lines.append(f"{status}: {name} ({detail})" if detail else f"{status}: {name}")
    _write("\n".join(lines) + "\n", cfg.out)
    return 1 if failed else 0


_AUDIT_DEFAULT = {
    "clients": 3,
    "server": {"eta": 1.0, "q_coefficient": 1.0},
    "train": {"rounds": 50, "per_round": 2},
    "task": {"samples_per_client": 20, "test_size": 50},
}


def _parse_args(argv):
    parser = argparse.ArgumentParser(
        prog="jsam",
        description="Joint client selection and privacy compensation for DP-FL")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in [("solve", "write the mechanism plan"),
                           ("simulate", "train under each mechanism and seed"),
                           ("audit", "run the self-check suite"),
                           ("sweep", "solve and train along an eta grid")]:
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--seed", type=int, help="override the seed list")
        p.add_argument("--out", help="output path (default stdout)")
        p.add_argument("--mechanism", help="comma-separated mechanism list")
        p.add_argument("--objective-form", choices=["exact_l1", "paper_literal"])
    return parser.parse_args(argv)


def main(argv=None) -> int:
    args = _parse_args(argv)
    try:
        if args.config is not None:
            cfg = load(args.config)
        elif args.command == "audit":
            cfg = from_dict(_AUDIT_DEFAULT)
        else:
            raise ConfigError("--config is required")
        if args.seed is not None:
            cfg.seeds = [args.seed]
        if args.mechanism is not None:
            cfg.mechanisms = [m.strip() for m in args.mechanism.split(",") if m.strip()]
        if args.objective_form is not None:
            cfg.server.objective_form = args.objective_form
        if args.out is not None:
            cfg.out = args.out
        validate(cfg)
        handler = {"solve": cmd_solve, "simulate": cmd_simulate,
                   "audit": cmd_audit, "sweep": cmd_sweep}[args.command]
        return handler(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
