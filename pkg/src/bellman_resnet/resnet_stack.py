"""Residual stacks ``Q̂^(l+1) = Q̂^(l) + F̃_l(Q̂^(l))`` and their error accounting.

A stack is planned from a target accuracy ``ε``: ``L`` layers so that the
truncation error ``β^L M_Q``-type term stays below ``ε/2``, and a per-layer
operator budget ``ε₁ = ε (1 - β) / 2`` so that the accumulated layer errors
``e_l <= ε₁ (1 - β^l) / (1 - β)`` stay below ``ε/2`` as well.
:func:`run_stack` measures every term of that argument on the realised
iterates and :func:`verify_theorem` runs the whole pipeline.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .bellman_engine import (IterationTrace, estimate_regularity_constants, get_operator,
                             value_iterate)
from .grid_space import (GridDomain, GridFunction, _dense_points, _split, decode,
                         estimate_lipschitz)
from .mdp_model import MdpSpec, Mode, contraction_rate, discount_factor, uniform_q_bound
from .operator_net import (FunctionFamily, GridMismatch, OperatorBlock, TrainConfig,
                           apply_block, measure_lfstar, sample_values, train_block)
from .trajectory import SimConfig

__all__ = [
    "StackPlan",
    "StackTrace",
    "TheoremReport",
    "BlockMissing",
    "NetworkBlock",
    "OracleBlock",
    "PerturbedBlock",
    "plan_stack",
    "stack_bound",
    "lipschitz_cap",
    "run_stack",
    "resolution_floor",
    "verify_theorem",
    "write_stack_csv",
]

# slack for comparisons of measured quantities against bounds
TOL_MEASURE = 1e-12


class BlockMissing(LookupError):
    pass


# ---------------------------------------------------------------------------
# planning

def stack_bound(spec: MdpSpec) -> float:
    """``M_Q`` valid for every iterate of an unbounded stack (infinite-stage bound)."""
    if spec.mode is Mode.DISCRETE_DETERMINISTIC:
        return uniform_q_bound(replace(spec, n_stages=None))
    return uniform_q_bound(spec)


@dataclass(frozen=True)
class StackPlan:
    epsilon: float
    L: int
    epsilon_1: float
    beta: float
    M_Q: float
    blocks: tuple = ()

    @property
    def M_hat(self) -> float:
        """Uniform sup bound ``M_Q + ε/2`` on the stack iterates."""
        return self.M_Q + self.epsilon / 2.0

    def envelope(self, l: int) -> float:
        """``ε₁ (1 - β^l) / (1 - β)``."""
        return self.epsilon_1 * (1.0 - self.beta ** l) / (1.0 - self.beta)

    def with_blocks(self, blocks) -> "StackPlan":
        return replace(self, blocks=tuple(blocks))

    def to_dict(self) -> dict:
        return {"epsilon": self.epsilon, "L": self.L, "epsilon_1": self.epsilon_1,
                "beta": self.beta, "M_Q": self.M_Q, "M_hat": self.M_hat}


def plan_stack(spec: MdpSpec, epsilon: float, M_Q: Optional[float] = None) -> StackPlan:
    """Layer count and per-layer budget for target accuracy ``epsilon``.

    ``L = ceil(ln(2 M_Q / ε) / ρ) + 1`` with ``ρ = λδ`` (``ln(1/γ)`` for
    discrete problems), or ``L = 1`` when ``ε >= 2 M_Q``; ``ε₁ = ε (1-β)/2``.
    ``M_Q`` defaults to :func:`stack_bound`.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be > 0")
    beta = discount_factor(spec)
    M_Q = stack_bound(spec) if M_Q is None else float(M_Q)
    if epsilon >= 2.0 * M_Q:
        L = 1
    else:
        L = int(math.ceil(math.log(2.0 * M_Q / epsilon) / contraction_rate(spec))) + 1
    return StackPlan(float(epsilon), L, epsilon * (1.0 - beta) / 2.0, beta, M_Q)


def lipschitz_cap(K_A: float, K_B: float, lfstar: float, L: int) -> float:
    """``L̂`` from ``L̂_{l+1} <= A' + B' L̂_l``, ``L̂_0 = 0``, over ``L - 1`` steps.

    ``A' = 2 K_A + L_F*`` and ``B' = 2 K_B + 1``.
    """
    A = 2.0 * K_A + lfstar
    B = 2.0 * K_B + 1.0
    if L <= 1:
        return 0.0
    if B == 1.0:
        return A * (L - 1)
    return A * (B ** (L - 1) - 1.0) / (B - 1.0)


# ---------------------------------------------------------------------------
# blocks

class NetworkBlock:
    """Adapter giving a trained :class:`OperatorBlock` the ``residual`` interface."""

    def __init__(self, block: OperatorBlock):
        self.block = block

    def residual(self, q: GridFunction) -> GridFunction:
        return apply_block(self.block, q)


class OracleBlock:
    """Exact ``𝓙``, arranged so that ``Q + F(Q)`` equals ``𝓑Q`` bit for bit."""

    def __init__(self, spec: MdpSpec, cfg: Optional[SimConfig] = None):
        self.spec = spec
        self.cfg = cfg

    def residual(self, q: GridFunction) -> GridFunction:
        b = get_operator(self.spec, q.domain, self.cfg).apply(q).values
        r = b - q.values
        for _ in range(4):
            miss = (q.values + r) != b
            if not miss.any():
                break
            r[miss] = np.nextafter(r[miss], np.where(q.values[miss] + r[miss] < b[miss],
                                                     np.inf, -np.inf))
        return GridFunction(q.domain, r)


class PerturbedBlock:
    """Exact ``𝓙`` plus a fixed error field of sup norm ``c``.

    ``field=None`` gives the constant field ``c``; otherwise the given node
    values are rescaled to sup norm ``c``.
    """

    def __init__(self, spec: MdpSpec, c: float, cfg: Optional[SimConfig] = None, field=None):
        self.spec = spec
        self.c = float(c)
        self.cfg = cfg
        self.field = None if field is None else np.asarray(field, dtype=float)

    def residual(self, q: GridFunction) -> GridFunction:
        j = get_operator(self.spec, q.domain, self.cfg).residual(q).values
        if self.field is None:
            err = np.full(q.domain.size, self.c)
        else:
            err = self.field * (self.c / np.max(np.abs(self.field)))
        return GridFunction(q.domain, j + err)


def _as_block(b):
    return NetworkBlock(b) if isinstance(b, OperatorBlock) else b


# ---------------------------------------------------------------------------
# running a stack

@dataclass
class StackTrace:
    """Per-layer measurements; ``delta_norms`` has ``L`` entries, the rest ``L + 1``."""

    errors: list                # e_l = sup|Q̂^(l) - Q^(l)|
    delta_norms: list           # ||δ_l|| = sup|F̃(Q̂^(l)) - 𝓙Q̂^(l)|
    envelopes: list             # ε₁ (1 - β^l) / (1 - β)
    sup_norms: list
    lipschitz: list
    final_error: float          # sup|Q̂^(L) - Q*|
    iterates: list = field(repr=False, default_factory=list)

    @property
    def L(self) -> int:
        return len(self.delta_norms)

    def rows(self) -> list:
        out = []
        for l in range(len(self.errors)):
            d = self.delta_norms[l] if l < len(self.delta_norms) else float("nan")
            out.append((l, self.errors[l], d, self.envelopes[l], self.sup_norms[l], self.lipschitz[l]))
        return out


def run_stack(plan: StackPlan, q0: GridFunction, reference: IterationTrace, q_star: GridFunction,
              spec: MdpSpec, blocks=None, cfg: Optional[SimConfig] = None,
              lipschitz_pairs: int = 200) -> StackTrace:
    """Run ``plan.L`` residual layers from ``q0`` and measure every error term.

    ``blocks`` (default ``plan.blocks``) is either one block reused by every
    layer or a sequence with one block per layer.  ``reference`` holds the
    exact iterates ``Q^(0..)``; when it stopped early because the iteration
    became stationary its last iterate is reused for later layers.
    """
    blocks = plan.blocks if blocks is None else blocks
    if not isinstance(blocks, (list, tuple)):
        blocks = [blocks] * plan.L
    elif len(blocks) == 1:
        blocks = list(blocks) * plan.L
    if len(blocks) < plan.L:
        raise BlockMissing(f"{len(blocks)} blocks supplied for {plan.L} layers")
    ref = reference.iterates
    if ref[0].domain != q0.domain or q_star.domain != q0.domain:
        raise GridMismatch("stack inputs live on different grids")
    if np.max(np.abs(ref[0].values - q0.values)) != 0.0:
        raise ValueError("q0 must equal the reference trace's first iterate")
    op = get_operator(spec, q0.domain, cfg)

    def exact(l):
        return ref[min(l, len(ref) - 1)]

    q = q0
    its = [q0]
    errs = [float(np.max(np.abs(q0.values - exact(0).values)))]
    deltas = []
    for l in range(plan.L):
        f = _as_block(blocks[l]).residual(q)
        j = op.residual(q)
        deltas.append(float(np.max(np.abs(f.values - j.values))))
        q = GridFunction(q.domain, q.values + f.values)
        its.append(q)
        errs.append(float(np.max(np.abs(q.values - exact(l + 1).values))))
    return StackTrace(
        errors=errs, delta_norms=deltas,
        envelopes=[plan.envelope(l) for l in range(plan.L + 1)],
        sup_norms=[x.sup_norm() for x in its],
        lipschitz=[estimate_lipschitz(x, lipschitz_pairs, 0) for x in its],
        final_error=float(np.max(np.abs(q.values - q_star.values))),
        iterates=its,
    )


def write_stack_csv(trace: StackTrace, path) -> Path:
    path = Path(path)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["l", "e_l", "delta_norm", "envelope", "sup_norm", "lipschitz"])
    for row in trace.rows():
        w.writerow([row[0]] + [repr(float(x)) for x in row[1:]])
    path.write_text(buf.getvalue())
    return path


# ---------------------------------------------------------------------------
# end-to-end verification

def resolution_floor(spec: MdpSpec, q_star: GridFunction, cfg: Optional[SimConfig] = None,
                     n_dense: int = 1024, seed: int = 0) -> float:
    """Grid representation error of ``Q*``.

    Off the grid ``Q*`` is evaluated by one Bellman step of the grid fixed
    point, ``(𝓑 Q*_grid)(x)``, which coincides with ``Q*_grid`` at nodes;
    the floor is the largest gap at ``n_dense`` quasi-random points.
    """
    from .bellman_engine import bellman_at_points

    grid = q_star.domain
    x, idx = _dense_points(grid, n_dense, seed)
    t, s, a = _split(grid, x, idx)
    exact = bellman_at_points(spec, q_star, t, s, a, cfg)
    return float(np.max(np.abs(q_star.at(x, idx) - exact)))


@dataclass
class TheoremReport:
    status: str                      # "pass", "fail" or "infeasible-as-configured"
    plan: StackPlan
    checks: dict                     # name -> {"passed", "measured", "bound"}
    resolution_floor: float
    M_hat: float
    L_hat: float
    K_A: float
    K_B: float
    lfstar: float
    trace: Optional[StackTrace] = None
    block_metrics: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.status == "pass"

    def to_dict(self) -> dict:
        d = {
            "status": self.status,
            "plan": self.plan.to_dict(),
            "checks": self.checks,
            "resolution_floor": self.resolution_floor,
            "M_hat": self.M_hat,
            "L_hat": self.L_hat,
            "K_A": self.K_A,
            "K_B": self.K_B,
            "lfstar": self.lfstar,
            "block_metrics": self.block_metrics,
            "notes": list(self.notes),
        }
        if self.trace is not None:
            d["final_error"] = self.trace.final_error
            d["e_L"] = self.trace.errors[-1]
            d["max_delta_norm"] = max(self.trace.delta_norms) if self.trace.delta_norms else 0.0
        return d


def _check(passed, measured, bound) -> dict:
    return {"passed": bool(passed), "measured": float(measured), "bound": float(bound)}


def verify_theorem(spec: MdpSpec, epsilon: float, grid: GridDomain,
                   train_config: Optional[TrainConfig] = None, cfg: Optional[SimConfig] = None,
                   oracle_blocks: bool = False, shared_block: bool = True,
                   block: Optional[OperatorBlock] = None, injected_error: Optional[float] = None,
                   M_Q: Optional[float] = None, tube: Optional[float] = None,
                   n_anchors: Optional[int] = None, q_star_tol: float = 1e-13,
                   lipschitz_pairs: int = 200, seed: int = 0) -> TheoremReport:
    """Plan, build the reference, obtain blocks, run the stack and check the bounds.

    Blocks are exact oracles (``oracle_blocks``), an exact operator with a
    constant injected error (``injected_error``, used for negative tests), a
    supplied trained ``block``, or are trained here (one shared block, or one
    per layer when ``shared_block`` is false).  Bound failures are reported
    in the returned structure, never raised.

    Checks: (i) ``||δ_l|| <= ε₁`` for every layer; (ii) ``e_l`` inside the
    ``ε₁`` envelope; (iii) ``sup|Q̂^(L) - Q*| < ε``; (iv) every ``Q̂^(l)``
    inside ``sup <= M̂`` and ``Lip <= L̂``.  The realised recurrence
    ``e_{l+1} <= β e_l + ||δ_l||`` and the Lipschitz propagation envelope
    are reported as auxiliary checks.
    """
    plan = plan_stack(spec, epsilon, M_Q)
    q0 = decode(np.zeros(grid.size), grid)
    reference = value_iterate(spec, q0, plan.L, 1e-300, cfg, lipschitz_pairs=1)
    fixed = value_iterate(spec, q0, 100_000, q_star_tol, cfg, lipschitz_pairs=1)
    q_star = fixed.q_star
    floor = resolution_floor(spec, q_star, cfg, seed=seed)
    notes = [f"Q* reference: {fixed.n_steps} value-iteration steps, "
             f"a-posteriori error <= {fixed.fixed_point_bound:.3e}"]

    regc = estimate_regularity_constants(spec, grid, cfg, seed=seed, lipschitz_pairs=lipschitz_pairs)
    K_A, K_B = regc.K_A, regc.K_B
    M_hat = plan.M_hat
    block_metrics: dict = {}

    if floor >= epsilon:
        notes.append(f"grid representation error of Q* ({floor:.3e}) is not below epsilon")
        return TheoremReport("infeasible-as-configured", plan, {}, floor, M_hat, float("nan"),
                             K_A, K_B, float("nan"), None, block_metrics, notes)

    # obtain blocks
    family = None
    if oracle_blocks:
        blocks = [OracleBlock(spec, cfg)]
        lfstar = max(estimate_lipschitz(op_res, lipschitz_pairs, 0) for op_res in
                     (get_operator(spec, grid, cfg).residual(q) for q in reference.iterates))
    elif injected_error is not None:
        blocks = [PerturbedBlock(spec, injected_error, cfg)]
        lfstar = float("nan")
    else:
        ceiling_lf = grid.size * 2.0 * (1.0 + plan.beta) * M_hat / grid.h_min
        fam_kw = {}
        if tube is not None:
            fam_kw["tube"] = tube
        if n_anchors is not None:
            fam_kw["n_anchors"] = n_anchors
        family = FunctionFamily(grid, M_hat, lipschitz_cap(K_A, K_B, ceiling_lf, plan.L),
                                spec=spec, cfg=cfg, seed=seed, **fam_kw)
        tc = train_config or TrainConfig()
        tc = replace(tc, target_eps=plan.epsilon_1)
        if block is not None:
            trained = [block]
        elif shared_block:
            trained = [train_block(spec, family, grid, tc, cfg)]
        else:
            trained = [train_block(spec, family, grid, replace(tc, seed=tc.seed + l), cfg)
                       for l in range(plan.L)]
        blocks = trained
        lf_inputs = sample_values(family, 64, np.random.default_rng([seed, 7]))
        lfstar = max(measure_lfstar(b, grid, lf_inputs, lipschitz_pairs).measured for b in trained)
        block_metrics = {
            "n_blocks": len(trained),
            "test_eps": [b.metadata.get("test_eps") for b in trained],
            "status": [b.metadata.get("status") for b in trained],
            "bound": trained[0].bound,
        }

    trace = run_stack(plan, q0, reference, q_star, spec, blocks, cfg, lipschitz_pairs)
    L_hat = lipschitz_cap(K_A, K_B, lfstar if math.isfinite(lfstar) else 0.0, plan.L)
    if not math.isfinite(lfstar):
        lfstar_used = max(estimate_lipschitz(decode(b, grid), lipschitz_pairs, 0) for b in
                          (np.diff(np.array([x.values for x in trace.iterates]), axis=0)))
        L_hat = lipschitz_cap(K_A, K_B, lfstar_used, plan.L)
        lfstar = lfstar_used

    beta, e1 = plan.beta, plan.epsilon_1
    errs, dn = trace.errors, trace.delta_norms
    env_ok = [errs[l] <= trace.envelopes[l] + TOL_MEASURE for l in range(len(errs))]
    rec_slack = [errs[l + 1] - (beta * errs[l] + dn[l]) for l in range(len(dn))]
    reg_env = [0.0]
    for _ in range(plan.L):
        reg_env.append((2 * K_A + lfstar) + (2 * K_B + 1) * reg_env[-1])
    lip_prop_ok = all(trace.lipschitz[l] <= reg_env[l] * (1 + 1e-9) + TOL_MEASURE
                      for l in range(len(trace.lipschitz)))
    checks = {
        "i_per_layer_operator_error": _check(max(dn) <= e1, max(dn), e1),
        "ii_error_envelope": _check(all(env_ok),
                                    max(errs[l] - trace.envelopes[l] for l in range(len(errs))), 0.0),
        "iii_final_error": _check(trace.final_error < epsilon, trace.final_error, epsilon),
        "iv_caps": {
            "passed": bool(max(trace.sup_norms) <= M_hat and max(trace.lipschitz) <= L_hat),
            "sup_norm": float(max(trace.sup_norms)), "M_hat": float(M_hat),
            "lipschitz": float(max(trace.lipschitz)), "L_hat": float(L_hat),
        },
        "aux_recurrence": _check(max(rec_slack) <= 1e-12, max(rec_slack), 1e-12),
        "aux_lipschitz_propagation": {"passed": bool(lip_prop_ok),
                                      "A_prime": 2 * K_A + lfstar, "B_prime": 2 * K_B + 1},
    }
    main = [checks[k]["passed"] for k in ("i_per_layer_operator_error", "ii_error_envelope",
                                          "iii_final_error", "iv_caps")]
    return TheoremReport("pass" if all(main) else "fail", plan, checks, floor, M_hat, L_hat,
                         K_A, K_B, lfstar, trace, block_metrics, notes)
