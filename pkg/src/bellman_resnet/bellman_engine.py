"""Reference Bellman operator, residual operator and value iteration on grids.

``bellman_apply`` evaluates ``(𝓑Q)(p_j)`` at every grid node ``p_j``: exactly
for discrete deterministic problems and by Monte Carlo (common random
numbers over nodes) for held-action diffusions.  The simulated transition
kernel does not depend on ``Q`` and is cached per ``(spec, grid, cfg)``, so
repeated applications (value iteration, training targets, contraction
checks) cost one interpolation pass each.
"""

from __future__ import annotations

import csv
import io
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .grid_space import (DomainMismatch, GridDomain, GridFunction, decode,
                         estimate_lipschitz, random_bump_values)
from .mdp_model import MdpSpec, Mode, discount_factor, uniform_q_bound
from .trajectory import SimConfig, TransitionKernel, simulate_kernel

__all__ = [
    "BellmanOperator",
    "IterationTrace",
    "NotConverged",
    "RegularityBudget",
    "RegularityReport",
    "ViolationReport",
    "ContractionReport",
    "RegularityConstants",
    "get_operator",
    "bellman_apply",
    "residual_apply",
    "bellman_at_points",
    "value_iterate",
    "contraction_ratio",
    "verify_contraction",
    "regularity_budget",
    "verify_uniform_regularity",
    "estimate_regularity_constants",
    "write_trace_csv",
]


class BellmanOperator:
    """𝓑 on a fixed grid, with the simulated transition kernel cached."""

    def __init__(self, spec: MdpSpec, grid: GridDomain, cfg: Optional[SimConfig] = None):
        self.spec = spec
        self.grid = grid
        self.cfg = cfg if cfg is not None else SimConfig()
        self._kernel: Optional[TransitionKernel] = None

    @property
    def exact(self) -> bool:
        return self.spec.mode is Mode.DISCRETE_DETERMINISTIC

    @property
    def beta(self) -> float:
        return discount_factor(self.spec)

    @property
    def kernel(self) -> TransitionKernel:
        if self._kernel is None:
            t, s, a, _ = self.grid.node_points()
            self._kernel = simulate_kernel(self.spec, t, s, a, self.cfg)
        return self._kernel

    def _check(self, q: GridFunction):
        if q.domain != self.grid:
            raise DomainMismatch("Q lives on a different grid than the operator")

    def apply_with_stderr(self, q: GridFunction, method: str = "mc"):
        self._check(q)
        mean, se = self.kernel.estimate(self.spec, q, method)
        return decode(mean, self.grid), se

    def apply(self, q: GridFunction) -> GridFunction:
        return self.apply_with_stderr(q)[0]

    __call__ = apply

    def residual(self, q: GridFunction) -> GridFunction:
        return self.apply(q) - q

    def apply_values(self, values: np.ndarray) -> np.ndarray:
        """𝓑 on node-value rows ``(B, M)``; vectorised over the batch."""
        v = np.atleast_2d(np.asarray(values, dtype=float))
        if v.shape[1] != self.grid.size:
            raise DomainMismatch(f"expected rows of length {self.grid.size}")
        ker = self.kernel
        n_ts = int(np.prod(self.grid.ts_shape))
        out = np.empty_like(v)
        step = max(1, 2_000_000 // max(ker.reward.size, 1))
        for b0 in range(0, len(v), step):
            tables = v[b0:b0 + step].reshape(-1, n_ts, self.grid.n_action_nodes)
            cont = ker.continuation_batch(self.spec, self.grid, tables)
            paths = ker.reward[None] + ker.discount[None, :, None] * cont
            out[b0:b0 + step] = paths.mean(axis=2)
        return out

    def residual_values(self, values: np.ndarray) -> np.ndarray:
        v = np.atleast_2d(np.asarray(values, dtype=float))
        return self.apply_values(v) - v


_CACHE: "OrderedDict[tuple, BellmanOperator]" = OrderedDict()
_CACHE_SIZE = 6


def get_operator(spec: MdpSpec, grid: GridDomain, cfg: Optional[SimConfig] = None) -> BellmanOperator:
    """Shared :class:`BellmanOperator` for ``(spec, grid, cfg)``."""
    cfg = cfg if cfg is not None else SimConfig()
    key = (id(spec), grid.checksum, cfg if spec.mode is Mode.CONTINUOUS_SDE else None)
    op = _CACHE.get(key)
    if op is None or op.spec is not spec:
        op = BellmanOperator(spec, grid, cfg)
        _CACHE[key] = op
        while len(_CACHE) > _CACHE_SIZE:
            _CACHE.popitem(last=False)
    _CACHE.move_to_end(key)
    return op


def bellman_apply(spec: MdpSpec, q: GridFunction, cfg: Optional[SimConfig] = None) -> GridFunction:
    """``𝓑Q`` on the grid of ``q``."""
    return get_operator(spec, q.domain, cfg).apply(q)


def residual_apply(spec: MdpSpec, q: GridFunction, cfg: Optional[SimConfig] = None) -> GridFunction:
    """``𝓙Q = 𝓑Q - Q`` nodewise."""
    return get_operator(spec, q.domain, cfg).residual(q)


def bellman_at_points(spec: MdpSpec, q: GridFunction, t, s, a, cfg: Optional[SimConfig] = None,
                      action_index=None) -> np.ndarray:
    """``(𝓑Q)`` at arbitrary points of ``K_Q`` (not only grid nodes)."""
    s = np.atleast_2d(np.asarray(s, dtype=float))
    if action_index is not None:
        a = q.domain.actions[np.asarray(action_index)]
    ker = simulate_kernel(spec, t, s, a, cfg or SimConfig())
    return ker.estimate(spec, q)[0]


# ---------------------------------------------------------------------------
# value iteration

@dataclass
class IterationTrace:
    """Value-iteration record.

    ``distances[k] = sup|Q^(k+1) - Q^(k)|`` and ``ratios[k] =
    distances[k+1] / distances[k]``; ``sup_norms`` and ``lipschitz`` have one
    entry per iterate.
    """

    iterates: list
    distances: list
    sup_norms: list
    lipschitz: list
    ratios: list
    converged: bool
    tol: float
    beta: float

    @property
    def q_star(self) -> GridFunction:
        return self.iterates[-1]

    @property
    def n_steps(self) -> int:
        return len(self.iterates) - 1

    @property
    def fixed_point_bound(self) -> float:
        """A-posteriori bound ``β d_last / (1 - β)`` on ``sup|Q^(k) - Q*|``."""
        if not self.distances:
            return float("inf")
        return self.beta * self.distances[-1] / (1.0 - self.beta)

    def rows(self) -> list:
        out = []
        for k in range(len(self.iterates)):
            d = self.distances[k - 1] if k >= 1 else float("nan")
            r = self.ratios[k - 2] if k >= 2 else float("nan")
            out.append((k, d, self.sup_norms[k], self.lipschitz[k], r))
        return out


class NotConverged(RuntimeError):
    def __init__(self, trace: IterationTrace):
        super().__init__(f"value iteration stopped after {trace.n_steps} steps with "
                         f"distance {trace.distances[-1]:.3e} > tol {trace.tol:.3e}")
        self.trace = trace


def value_iterate(spec: MdpSpec, q0: GridFunction, k_max: int, tol: float,
                  cfg: Optional[SimConfig] = None, require_convergence: bool = False,
                  lipschitz_pairs: int = 200, seed: int = 0) -> IterationTrace:
    """Iterate ``Q^(k+1) = 𝓑Q^(k)`` until the step falls to ``tol`` or ``k_max`` steps.

    Distances are node maxima, which are exact sup norms for differences of
    interpolants on a common grid.  The final iterate ``Q^(k)`` satisfies
    ``sup|Q^(k) - Q*| <= β/(1-β) * d_last`` (a-posteriori contraction bound).
    With ``require_convergence`` a run that exhausts ``k_max`` raises
    :class:`NotConverged`; otherwise the trace is returned with
    ``converged=False``.
    """
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    if not tol > 0:
        raise ValueError("tol must be > 0")
    op = get_operator(spec, q0.domain, cfg)
    its = [q0]
    dists: list = []
    converged = False
    for _ in range(k_max):
        q_next = op.apply(its[-1])
        dists.append(float(np.max(np.abs(q_next.values - its[-1].values))))
        its.append(q_next)
        if dists[-1] <= tol:
            converged = True
            break
    ratios = [dists[k + 1] / dists[k] if dists[k] > 0 else 0.0 for k in range(len(dists) - 1)]
    trace = IterationTrace(
        iterates=its, distances=dists,
        sup_norms=[q.sup_norm() for q in its],
        lipschitz=[estimate_lipschitz(q, lipschitz_pairs, seed) for q in its],
        ratios=ratios, converged=converged, tol=tol, beta=op.beta,
    )
    if require_convergence and not converged:
        raise NotConverged(trace)
    return trace


def write_trace_csv(trace: IterationTrace, path) -> Path:
    path = Path(path)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["k", "sup_distance", "sup_norm", "lipschitz", "ratio"])
    for row in trace.rows():
        w.writerow([row[0]] + [repr(float(x)) for x in row[1:]])
    path.write_text(buf.getvalue())
    return path


# ---------------------------------------------------------------------------
# contraction

def contraction_ratio(spec: MdpSpec, q1: GridFunction, q2: GridFunction,
                      cfg: Optional[SimConfig] = None) -> float:
    """``sup|𝓑Q1 - 𝓑Q2| / sup|Q1 - Q2|``; 0 for identical inputs."""
    den = float(np.max(np.abs(q1.values - q2.values)))
    if den == 0.0:
        return 0.0
    op = get_operator(spec, q1.domain, cfg)
    num = float(np.max(np.abs(op.apply(q1).values - op.apply(q2).values)))
    return num / den


@dataclass(frozen=True)
class ContractionReport:
    ratios: tuple
    beta: float
    tol: float
    passed: bool

    @property
    def max_ratio(self) -> float:
        return max(self.ratios) if self.ratios else 0.0

    def to_dict(self) -> dict:
        return {"ratios": list(self.ratios), "max_ratio": self.max_ratio, "beta": self.beta,
                "tol": self.tol, "bound": self.beta * (1 + self.tol), "passed": self.passed}


def random_pair_family(spec: MdpSpec, grid: GridDomain, count: int, seed: int,
                       amplitude: Optional[float] = None,
                       lipschitz_cap: float = np.inf) -> np.ndarray:
    """Bump functions used for contraction pairs, ``(count, M)``.

    Sup norms are at most ``amplitude`` (default ``M_Q``, or 1 when that is
    zero) and Lipschitz upper bounds at most ``lipschitz_cap``.
    """
    rng = np.random.default_rng(seed)
    if amplitude is None:
        amplitude = uniform_q_bound(spec)
        amplitude = amplitude if amplitude > 0 else 1.0
    return random_bump_values(grid, rng, count, amplitude=amplitude,
                              lipschitz_cap=lipschitz_cap)


def verify_contraction(spec: MdpSpec, grid: GridDomain, n_pairs: int,
                       cfg: Optional[SimConfig] = None, seed: int = 0,
                       tol: Optional[float] = None, amplitude: Optional[float] = None,
                       lipschitz_cap: float = np.inf) -> ContractionReport:
    """Max of ``sup|𝓑Q1-𝓑Q2| / sup|Q1-Q2|`` over random bump pairs.

    Passes iff every ratio is at most ``β (1 + tol)``; the default ``tol`` is
    1e-9 for exact problems and 0.02 for Monte-Carlo ones.  ``amplitude`` and
    ``lipschitz_cap`` restrict the pairs as in :func:`random_pair_family`.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    op = get_operator(spec, grid, cfg)
    if tol is None:
        tol = 1e-9 if op.exact else 0.02
    family = random_pair_family(spec, grid, 2 * n_pairs, seed, amplitude, lipschitz_cap)
    ratios = []
    for i in range(n_pairs):
        q1, q2 = decode(family[2 * i], grid), decode(family[2 * i + 1], grid)
        ratios.append(contraction_ratio(spec, q1, q2, cfg))
    beta = op.beta
    return ContractionReport(tuple(ratios), beta, tol,
                             all(r <= beta * (1 + tol) for r in ratios))


# ---------------------------------------------------------------------------
# regularity

@dataclass(frozen=True)
class RegularityBudget:
    K_A: float
    K_B: float
    L0: float
    N_max: int
    L_unif: float


def regularity_budget(spec: Optional[MdpSpec], K_A: float, K_B: float, L0: float = 0.0,
                      n_max: Optional[int] = None) -> RegularityBudget:
    """``L_unif = K_A Σ_{j<N} K_B^j + K_B^N L0`` with ``N = ceil(T/δ)`` unless given."""
    if K_A < 0 or K_B < 0:
        raise ValueError("K_A and K_B must be >= 0")
    if n_max is None:
        n_max = int(math.ceil(spec.horizon_T / spec.hold_delta - 1e-9))
    if K_B == 1.0:
        L = K_A * n_max + L0
    else:
        L = K_A * (1.0 - K_B ** n_max) / (1.0 - K_B) + K_B ** n_max * L0
    return RegularityBudget(float(K_A), float(K_B), float(L0), int(n_max), float(L))


@dataclass(frozen=True)
class RegularityReport:
    sup_norms: tuple
    lipschitz: tuple
    M_Q: float
    L_unif: float
    violations: tuple   # (index, quantity, measured, cap)

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {"ok": self.ok, "M_Q": self.M_Q, "L_unif": self.L_unif,
                "sup_norms": list(self.sup_norms), "lipschitz": list(self.lipschitz),
                "violations": [dict(index=i, quantity=q, measured=m, cap=c)
                               for i, q, m, c in self.violations]}


class ViolationReport(AssertionError):
    def __init__(self, report: RegularityReport):
        lines = [f"iterate {i}: {q} {m:.6g} > {c:.6g}" for i, q, m, c in report.violations]
        super().__init__("regularity violated\n  " + "\n  ".join(lines))
        self.report = report


def verify_uniform_regularity(trace: IterationTrace, budget, M_Q: float, tol: float = 1e-9,
                              strict: bool = False) -> RegularityReport:
    """Check every iterate against ``sup <= M_Q (1+tol)`` and ``Lip <= L_unif (1+tol)``.

    ``budget`` is a :class:`RegularityBudget` or a plain Lipschitz cap.
    """
    if not trace.iterates:
        raise ValueError("empty trace")
    cap_l = budget.L_unif if isinstance(budget, RegularityBudget) else float(budget)
    bad = []
    for k, (m, l) in enumerate(zip(trace.sup_norms, trace.lipschitz)):
        if m > M_Q * (1 + tol):
            bad.append((k, "sup_norm", float(m), float(M_Q)))
        if l > cap_l * (1 + tol):
            bad.append((k, "lipschitz", float(l), float(cap_l)))
    rep = RegularityReport(tuple(trace.sup_norms), tuple(trace.lipschitz), float(M_Q),
                           float(cap_l), tuple(bad))
    if strict and bad:
        raise ViolationReport(rep)
    return rep


@dataclass(frozen=True)
class RegularityConstants:
    """Empirical ``Lip(𝓑Q) <= K_A + K_B Lip(Q)`` constants.

    ``K_A = Lip(𝓑0)``; ``K_B`` is the smallest slope that makes the line an
    upper envelope of all sampled pairs; ``K_B_regression`` the least-squares
    slope of ``Lip(𝓑Q) - K_A`` on ``Lip(Q)`` for reference.
    """

    K_A: float
    K_B: float
    K_B_regression: float
    lip_in: tuple = field(repr=False)
    lip_out: tuple = field(repr=False)


def estimate_regularity_constants(spec: MdpSpec, grid: GridDomain, cfg: Optional[SimConfig] = None,
                                  n_funcs: int = 32, seed: int = 0,
                                  lipschitz_pairs: int = 200) -> RegularityConstants:
    op = get_operator(spec, grid, cfg)
    K_A = estimate_lipschitz(op.apply(decode(np.zeros(grid.size), grid)), lipschitz_pairs, seed)
    fam = random_pair_family(spec, grid, n_funcs, seed)
    lin, lout = [], []
    for v in fam:
        q = decode(v, grid)
        lin.append(estimate_lipschitz(q, lipschitz_pairs, seed))
        lout.append(estimate_lipschitz(op.apply(q), lipschitz_pairs, seed))
    x, y = np.array(lin), np.array(lout) - K_A
    pos = x > 0
    K_B = float(max(0.0, np.max(y[pos] / x[pos]))) if pos.any() else 0.0
    K_B_reg = float(max(0.0, x @ y / (x @ x))) if pos.any() else 0.0
    return RegularityConstants(float(K_A), K_B, K_B_reg, tuple(lin), tuple(lout))
