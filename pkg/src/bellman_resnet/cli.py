"""Command-line entry point: ``bellman-resnet <command> [--config FILE] ...``.

Exit status: 0 when every checked bound holds (or an infeasible target is
correctly reported), 1 when a scientific check fails, 2 on configuration,
input or other infrastructure errors.

Every CSV gets a header row and a ``.json`` sidecar recording the command,
package version and configuration digest.  Outputs carry no timestamps, so
identical configurations give byte-identical files.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import traceback
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .bellman_engine import (estimate_regularity_constants, regularity_budget, verify_contraction,
                             verify_uniform_regularity, value_iterate)
from .config import ConfigError, ExperimentConfig, load_config
from .grid_space import GridDomain, decode, save_grid_function
from .mdp_model import Mode, SpecError, make_spec, uniform_q_bound, validate_spec
from .operator_net import (FunctionFamily, TrainingDiverged, grad_check, load_block,
                           measure_lfstar, sample_values, save_block, train_block)
from .resnet_stack import stack_bound, verify_theorem, write_stack_csv

OUT_DIR_ENV = "BELLMAN_RESNET_OUT_DIR"

EXIT_OK, EXIT_FAIL, EXIT_INFRA = 0, 1, 2

log = logging.getLogger("bellman_resnet")


class _Ctx:
    """Resolved configuration plus output helpers for one command."""

    def __init__(self, command: str, cfg: ExperimentConfig, out_dir: Path):
        self.command = command
        self.cfg = cfg
        self.out = out_dir
        self.out.mkdir(parents=True, exist_ok=True)

    def meta(self, **extra) -> dict:
        d = {"command": self.command, "version": __version__, "config_sha256": self.cfg.digest,
             "seed": self.cfg.seed}
        d.update(extra)
        return d

    def write_json(self, name: str, payload: dict) -> Path:
        path = self.out / name
        path.write_text(json.dumps(_clean(payload), indent=2, sort_keys=True) + "\n")
        return path

    def write_csv(self, name: str, header, rows, **meta) -> Path:
        path = self.out / name
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) for x in row])
        path.write_text(buf.getvalue())
        self.sidecar(path, columns=list(header), **meta)
        return path

    def sidecar(self, csv_path: Path, **meta) -> Path:
        side = csv_path.with_suffix(".json")
        side.write_text(json.dumps(_clean(self.meta(**meta)), indent=2, sort_keys=True) + "\n")
        return side


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else repr(f)
    return obj


def _grid(cfg: ExperimentConfig, spec) -> GridDomain:
    g = cfg.grid
    return GridDomain.for_spec(spec, g.state_nodes, g.time_nodes, g.action_nodes)


# ---------------------------------------------------------------------------
# commands

def cmd_value_iterate(ctx: _Ctx) -> int:
    cfg = ctx.cfg
    spec = cfg.build_spec()
    grid = _grid(cfg, spec)
    sim = cfg.sim_config()
    vi = cfg.value_iteration
    q0 = decode(np.zeros(grid.size), grid)
    trace = value_iterate(spec, q0, vi.k_max, vi.tol, sim, lipschitz_pairs=vi.lipschitz_pairs,
                          seed=cfg.seed)
    ctx.write_csv("trace.csv", ["k", "sup_distance", "sup_norm", "lipschitz", "ratio"],
                  trace.rows(), converged=trace.converged, tol=vi.tol, beta=trace.beta)
    it_dir = ctx.out / "iterates"
    it_dir.mkdir(exist_ok=True)
    for k, q in enumerate(trace.iterates):
        save_grid_function(q, it_dir / f"Q_{k:04d}", metadata=ctx.meta(iterate=k))

    # sup-norm cap: the bound for as many stages as were iterated
    if spec.mode is Mode.DISCRETE_DETERMINISTIC:
        M_Q = uniform_q_bound(spec, n_stages=max(trace.n_steps, 1))
        n_max = max(trace.n_steps, 1)
    else:
        M_Q = uniform_q_bound(spec)
        n_max = None
    consts = estimate_regularity_constants(spec, grid, sim, seed=cfg.seed,
                                           lipschitz_pairs=vi.lipschitz_pairs)
    budget = regularity_budget(spec, consts.K_A, consts.K_B, 0.0, n_max)
    rep = verify_uniform_regularity(trace, budget, M_Q, tol=1e-9 if spec.mode is
                                    Mode.DISCRETE_DETERMINISTIC else 0.02)
    payload = ctx.meta(converged=trace.converged, steps=trace.n_steps,
                       fixed_point_bound=trace.fixed_point_bound,
                       distances=trace.distances, ratios=trace.ratios,
                       regularity=rep.to_dict(),
                       budget={"K_A": budget.K_A, "K_B": budget.K_B,
                               "K_B_regression": consts.K_B_regression, "L0": budget.L0,
                               "N_max": budget.N_max, "L_unif": budget.L_unif})
    ctx.write_json("regularity.json", payload)
    print(f"value-iterate: {trace.n_steps} steps, converged={trace.converged}, "
          f"regularity {'ok' if rep.ok else 'VIOLATED'}")
    return EXIT_OK if rep.ok else EXIT_FAIL


def appendix_closed_forms(s: np.ndarray, gamma: float = 0.9, step: float = 0.1):
    """Closed-form first and second iterates of the move-left/move-right walk."""
    q1 = -(s - 0.5) ** 2
    sl = np.clip(s - step, 0.0, 1.0)
    sr = np.clip(s + step, 0.0, 1.0)
    q2_l = -(s - 0.5) ** 2 + gamma * (-(sl - 0.5) ** 2)
    q2_r = -(s - 0.5) ** 2 + gamma * (-(sr - 0.5) ** 2)
    return q1, q2_l, q2_r


def cmd_reproduce_appendix(ctx: _Ctx) -> int:
    spec = make_spec("appendix_e")
    grid = GridDomain.for_spec(spec, 11)
    q0 = decode(np.zeros(grid.size), grid)
    trace = value_iterate(spec, q0, 2, 1e-300)
    s = grid.states[0]
    q1_cf, q2l_cf, q2r_cf = appendix_closed_forms(s, spec.gamma, spec.params["step"])
    q1 = trace.iterates[1].array
    q2 = trace.iterates[2].array
    err1 = float(max(np.abs(q1[:, 0] - q1_cf).max(), np.abs(q1[:, 1] - q1_cf).max()))
    err2 = float(max(np.abs(q2[:, 0] - q2l_cf).max(), np.abs(q2[:, 1] - q2r_cf).max()))
    mid = int(np.argmin(np.abs(s - 0.5)))
    checks = {
        "q1_max_abs_diff": {"measured": err1, "tol": 1e-12, "passed": err1 <= 1e-12},
        "q2_max_abs_diff": {"measured": err2, "tol": 1e-9, "passed": err2 <= 1e-9},
        "q1_action_independent": {"passed": bool(np.array_equal(q1[:, 0], q1[:, 1]))},
        "q2_actions_distinct_somewhere": {"passed": bool(np.any(q2[:, 0] != q2[:, 1]))},
    }
    rows = []
    for k, q in enumerate(trace.iterates):
        a = q.array
        rows.extend((k, s[i], a[i, 0], a[i, 1]) for i in range(len(s)))
    ctx.write_csv("appendix_e_iterates.csv", ["iterate", "s", "Q_a_L", "Q_a_R"], rows,
                  panels="one panel per iterate k = 0, 1, 2")
    ok = all(c["passed"] for c in checks.values())
    ctx.write_json("appendix_e_report.json", ctx.meta(
        passed=ok, checks=checks, sup_norms=trace.sup_norms, lipschitz=trace.lipschitz,
        q2_at_half={"a_L": float(q2[mid, 0]), "a_R": float(q2[mid, 1])}))
    print(f"reproduce-appendix: |Q1 - closed form| = {err1:.3e}, "
          f"|Q2 - closed form| = {err2:.3e} -> {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_FAIL


def _family(cfg: ExperimentConfig, spec, grid, sim) -> FunctionFamily:
    from .resnet_stack import lipschitz_cap, plan_stack
    from .operator_net import default_output_bound

    plan = plan_stack(spec, cfg.stack.epsilon)
    consts = estimate_regularity_constants(spec, grid, sim, seed=cfg.seed)
    ceiling = grid.size * default_output_bound(plan.M_hat, plan.beta) / grid.h_min
    return FunctionFamily(grid, plan.M_hat, lipschitz_cap(consts.K_A, consts.K_B, ceiling, plan.L),
                          spec=spec, cfg=sim, tube=cfg.training.tube,
                          n_anchors=cfg.training.n_anchors, seed=cfg.seed)


def cmd_train_operator(ctx: _Ctx) -> int:
    from .bellman_engine import get_operator
    from .resnet_stack import plan_stack

    cfg = ctx.cfg
    spec = cfg.build_spec()
    grid = _grid(cfg, spec)
    sim = cfg.sim_config()
    family = _family(cfg, spec, grid, sim)
    tc = cfg.train_config()
    if tc.target_eps is None:
        from dataclasses import replace
        tc = replace(tc, target_eps=plan_stack(spec, cfg.stack.epsilon).epsilon_1)
    block = train_block(spec, family, grid, tc, sim)
    save_block(block, ctx.out / "block.json")
    rng = np.random.default_rng([cfg.seed, 11])
    x = sample_values(family, 4, rng)
    y = get_operator(spec, grid, sim).residual_values(x)
    gc = grad_check(block, x, y, h_fd=1e-5, n_params=50, seed=cfg.seed)
    lf = measure_lfstar(block, grid, x)
    metrics = ctx.meta(
        test_eps=block.metadata["test_eps"], target_eps=tc.target_eps,
        status=block.metadata.get("status"), lfstar=block.metadata["lfstar"],
        lfstar_ceiling=block.metadata["lfstar_ceiling"], lfstar_ok=lf.ok,
        grad_check=gc, grad_check_ok=gc <= 1e-5, output_bound=block.bound,
        n_parameters=block.n_parameters, epochs=tc.epochs, history=block.metadata["history"])
    ctx.write_json("metrics.json", metrics)
    print(f"train-operator: held-out eps_op = {block.metadata['test_eps']:.4e} "
          f"({block.metadata.get('status')}), grad check {gc:.2e}")
    return EXIT_OK if gc <= 1e-5 else EXIT_FAIL


def cmd_verify_theorem(ctx: _Ctx, oracle_blocks: Optional[bool] = None,
                       shared_block: Optional[bool] = None) -> int:
    cfg = ctx.cfg
    spec = cfg.build_spec()
    grid = _grid(cfg, spec)
    sim = cfg.sim_config()
    st = cfg.stack
    block = load_block(st.block_file) if st.block_file else None
    report = verify_theorem(
        spec, st.epsilon, grid, cfg.train_config(), sim,
        oracle_blocks=st.oracle_blocks if oracle_blocks is None else oracle_blocks,
        shared_block=st.shared_block if shared_block is None else shared_block,
        block=block, injected_error=st.injected_error, tube=cfg.training.tube,
        n_anchors=cfg.training.n_anchors, seed=cfg.seed)
    ctx.write_json("theorem_report.json", ctx.meta(**report.to_dict()))
    if report.trace is not None:
        path = write_stack_csv(report.trace, ctx.out / "stack_trace.csv")
        ctx.sidecar(path, columns=["l", "e_l", "delta_norm", "envelope", "sup_norm", "lipschitz"],
                    plan=report.plan.to_dict())
    print(f"verify-theorem: status {report.status}"
          + (f", final error {report.trace.final_error:.4e} (epsilon {st.epsilon})"
             if report.trace is not None else f", resolution floor {report.resolution_floor:.3e}"))
    return EXIT_FAIL if report.status == "fail" else EXIT_OK


def cmd_verify_contraction(ctx: _Ctx) -> int:
    cfg = ctx.cfg
    spec = cfg.build_spec()
    grid = _grid(cfg, spec)
    rep = verify_contraction(spec, grid, cfg.contraction.n_pairs, cfg.sim_config(), cfg.seed,
                             cfg.contraction.tol)
    ctx.write_json("contraction.json", ctx.meta(**rep.to_dict()))
    print(f"verify-contraction: max ratio {rep.max_ratio:.6f} vs beta {rep.beta:.6f} -> "
          f"{'PASS' if rep.passed else 'FAIL'}")
    return EXIT_OK if rep.passed else EXIT_FAIL


def cmd_audit_spec(ctx: _Ctx) -> int:
    cfg = ctx.cfg
    spec = cfg.build_spec()
    rep = validate_spec(spec, cfg.audit.n_probe, cfg.seed)
    ctx.write_json("audit.json", ctx.meta(problem=spec.name, **rep.to_dict()))
    print(f"audit-spec: {spec.name} {'ok' if rep.ok else 'declared constants violated'}")
    return EXIT_OK if rep.ok else EXIT_FAIL


COMMANDS = {
    "value-iterate": cmd_value_iterate,
    "reproduce-appendix": cmd_reproduce_appendix,
    "train-operator": cmd_train_operator,
    "verify-theorem": cmd_verify_theorem,
    "verify-contraction": cmd_verify_contraction,
    "audit-spec": cmd_audit_spec,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bellman-resnet", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=Path, help="TOML experiment configuration")
        sp.add_argument("--seed", type=int, help="override the configured global seed")
        sp.add_argument("--out-dir", type=Path,
                        help=f"output directory (default: config out_dir, ${OUT_DIR_ENV}, ./results)")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "verify-theorem":
            sp.add_argument("--oracle-blocks", action="store_true", default=None,
                            help="replace trained blocks by the exact residual operator")
            sp.add_argument("--shared-block", action=argparse.BooleanOptionalAction, default=None,
                            help="reuse one trained block for every layer (default) or train one per layer")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.config is not None:
            cfg = load_config(args.config)
        elif args.command == "reproduce-appendix":
            cfg = ExperimentConfig()
        else:
            raise ConfigError(f"{args.command} needs --config")
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("key 'seed' must be a non-negative integer")
            cfg = cfg.with_overrides(seed=args.seed)
        out = args.out_dir or (Path(cfg.out_dir) if cfg.out_dir else None) \
            or Path(os.environ.get(OUT_DIR_ENV, "results"))
        ctx = _Ctx(args.command, cfg, Path(out))
        fn = COMMANDS[args.command]
        if args.command == "verify-theorem":
            return fn(ctx, args.oracle_blocks, args.shared_block)
        return fn(ctx)
    except (ConfigError, SpecError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFRA
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except Exception as exc:  # infrastructure failure of any other kind
        if args.verbose:
            traceback.print_exc()
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INFRA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
