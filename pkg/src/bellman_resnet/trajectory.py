"""Held-action state simulation, Monte-Carlo Bellman targets and the BSDE path.

Paths are Euler-Maruyama discretisations with ``substeps_per_delta`` steps
over ``[t, min(t + δ, T)]``.  Brownian increments come from a counter-based
generator: sample ``i`` owns a Philox stream whose counter carries ``i`` in
its high word and whose key is the seed, and the substep index is the
position in that stream.  Any subset of samples can therefore be regenerated
independently and in any order.  With antithetic pairing samples ``2j`` and
``2j + 1`` share a stream and the odd one negates the increments.

All nodes of a grid share the same increments (common random numbers).  The
paths do not depend on the Q-function being evaluated, so a
:class:`TransitionKernel` can be simulated once and applied to many Q's.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np

from .grid_space import _stencil as _grid_stencil
from .mdp_model import MdpSpec, Mode, SpecError

__all__ = [
    "SimConfig",
    "McEstimate",
    "HeldPath",
    "TransitionKernel",
    "NonFiniteState",
    "brownian_increments",
    "simulate_held_action",
    "simulate_kernel",
    "mc_discounted_reward",
    "bsde_evaluate",
    "StabilityReport",
    "stability_estimate",
]

log = logging.getLogger(__name__)

# tolerance when deciding whether t + δ reaches past the horizon
HORIZON_TOL = 1e-9
# cap on node x sample entries simulated at once
CHUNK_ENTRIES = 2_000_000


class NonFiniteState(FloatingPointError):
    pass


@dataclass(frozen=True)
class SimConfig:
    """Monte-Carlo settings; ignored by discrete problems."""

    substeps_per_delta: int = 16
    n_samples: int = 1000
    seed: int = 0
    antithetic: bool = True

    def __post_init__(self):
        if self.substeps_per_delta < 1:
            raise ValueError("substeps_per_delta must be >= 1")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.antithetic and self.n_samples % 2:
            raise ValueError("antithetic sampling needs an even n_samples")
        if not 0 <= self.seed < 2 ** 63:
            raise ValueError("seed must lie in [0, 2**63)")


@dataclass(frozen=True)
class McEstimate:
    mean: float
    stderr: float
    n_samples: int


@lru_cache(maxsize=8)
def _increments_cached(seed: int, n_samples: int, antithetic: bool, n_steps: int,
                       noise_dim: int) -> np.ndarray:
    out = np.empty((n_samples, n_steps, noise_dim))
    for i in range(n_samples):
        base, sign = (i // 2, -1.0 if i % 2 else 1.0) if antithetic else (i, 1.0)
        if antithetic and i % 2:
            out[i] = -out[i - 1]
            continue
        gen = np.random.Generator(np.random.Philox(key=seed, counter=[0, 0, 0, base]))
        out[i] = sign * gen.standard_normal((n_steps, noise_dim))
    out.setflags(write=False)
    return out


def brownian_increments(cfg: SimConfig, n_steps: int, noise_dim: int,
                        sample_ids=None) -> np.ndarray:
    """Standard normal draws ``(n_ids, n_steps, noise_dim)`` for the given samples.

    Scale by ``sqrt(Δu)`` to obtain Brownian increments.
    """
    full = _increments_cached(cfg.seed, cfg.n_samples, cfg.antithetic, n_steps, noise_dim)
    if sample_ids is None:
        return full
    ids = np.atleast_1d(sample_ids)
    if ids.min() < 0 or ids.max() >= cfg.n_samples:
        raise IndexError("sample id out of range")
    return full[ids]


def _end_time(spec: MdpSpec, t: np.ndarray):
    """``τ_e = min(t+δ, T)`` and whether the horizon is reached first."""
    hits = t + spec.hold_delta > spec.horizon_T + HORIZON_TOL
    tau = np.where(hits, spec.horizon_T, np.minimum(t + spec.hold_delta, spec.horizon_T))
    return tau, hits


def _require_sde(spec: MdpSpec):
    if spec.mode is not Mode.CONTINUOUS_SDE:
        raise SpecError("operation requires a continuous_sde problem")


@dataclass(frozen=True)
class HeldPath:
    times: np.ndarray       # (K+1,)
    states: np.ndarray      # (K+1, n)
    n_clipped: int


def simulate_held_action(spec: MdpSpec, t: float, s, a, cfg: SimConfig,
                         sample_id: int) -> HeldPath:
    """One Euler-Maruyama path of the state with action ``a`` held fixed."""
    _require_sde(spec)
    s = np.asarray(s, dtype=float).reshape(1, -1)
    a = np.asarray(a, dtype=float).reshape(1, -1)
    tau, _ = _end_time(spec, np.array([float(t)]))
    if tau[0] <= t:
        return HeldPath(np.array([float(t)]), s.copy(), 0)
    K = cfg.substeps_per_delta
    du = (tau[0] - t) / K
    z = brownian_increments(cfg, K, spec.noise_dim, [sample_id])[0]
    lo, hi = np.array(spec.state_low), np.array(spec.state_high)
    states = np.empty((K + 1, s.shape[1]))
    states[0] = s[0]
    cur = s
    clipped = 0
    for k in range(K):
        u = np.array([t + k * du])
        h = spec.drift(u, cur, a)
        sig = spec.diffusion(u, cur, a)
        nxt = cur + h * du + np.einsum("nij,j->ni", sig, z[k]) * math.sqrt(du)
        if not np.all(np.isfinite(nxt)):
            raise NonFiniteState(f"non-finite state at substep {k} from ({t}, {s[0]}, {a[0]})")
        out = (nxt < lo) | (nxt > hi)
        clipped += int(out.any())
        cur = np.clip(nxt, lo, hi)
        states[k + 1] = cur[0]
    return HeldPath(t + du * np.arange(K + 1), states, clipped)


@dataclass(frozen=True)
class TransitionKernel:
    """Q-independent part of a Bellman step, per node and sample.

    A path's Monte-Carlo value is ``reward + discount * V`` and its BSDE
    value ``bsde_reward + bsde_discount * V`` where ``V`` is the continuation
    ``max_a' Q(τ_e, s_e, a')`` or, past the horizon, ``g(s_e)``.
    """

    t: np.ndarray               # (N,)
    end_time: np.ndarray        # (N,)
    hits_horizon: np.ndarray    # (N,) bool
    end_state: np.ndarray       # (N, S, n)
    reward: np.ndarray          # (N, S)
    bsde_reward: np.ndarray     # (N, S)
    discount: np.ndarray        # (N,)
    bsde_discount: np.ndarray   # (N,)
    antithetic: bool
    substeps: int
    clip_fraction: float
    _stencils: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_samples(self) -> int:
        return self.reward.shape[1]

    def continuation(self, spec: MdpSpec, q_next) -> np.ndarray:
        """Per-path continuation / terminal value, ``(N, S)``."""
        if q_next is None and not self.hits_horizon.all():
            raise ValueError("continuation needs a Q-function")
        if q_next is None:
            return self.continuation_batch(spec, None, None)[0]
        return self.continuation_batch(spec, q_next.domain, q_next.action_table()[None])[0]

    def continuation_batch(self, spec: MdpSpec, domain, tables) -> np.ndarray:
        """Continuation values for a batch of Q tables ``(B, n_ts_nodes, n_actions)``.

        Returns ``(B, N, S)``.
        """
        N, S, n = self.end_state.shape
        hit = self.hits_horizon
        B = 1 if tables is None else len(tables)
        v = np.empty((B, N, S))
        if (~hit).any():
            idx, w = self._stencil(domain)
            best = None
            for j in range(tables.shape[2]):
                if B == 1:
                    # 1-D gathers are markedly faster for the single-Q case
                    col = np.ascontiguousarray(tables[0, :, j])
                    acc = w[:, 0] * np.take(col, idx[:, 0])
                    for c in range(1, idx.shape[1]):
                        acc += w[:, c] * np.take(col, idx[:, c])
                    acc = acc[None]
                else:
                    col = tables[:, :, j]
                    acc = w[:, 0] * np.take(col, idx[:, 0], axis=1)
                    for c in range(1, idx.shape[1]):
                        acc += w[:, c] * np.take(col, idx[:, c], axis=1)
                best = acc if best is None else np.maximum(best, acc)
            v[:, ~hit] = best.reshape(B, -1, S)
        if hit.any():
            g = np.asarray(spec.terminal(self.end_state[hit].reshape(-1, n)), dtype=float)
            v[:, hit] = g.reshape(-1, S)
        return v

    def _stencil(self, domain):
        """Interpolation stencil of the non-terminal end points, cached per grid."""
        key = domain.checksum
        if key not in self._stencils:
            keep_rows = ~self.hits_horizon
            S, n = self.end_state.shape[1:]
            s = self.end_state[keep_rows].reshape(-1, n)
            if domain.time is None:
                x = s
            else:
                x = np.column_stack([np.repeat(self.end_time[keep_rows], S), s])
            idx, w = _grid_stencil(domain.ts_axes, x)
            keep = (w != 0.0).any(axis=0)
            self._stencils[key] = (np.ascontiguousarray(idx[:, keep]),
                                   np.ascontiguousarray(w[:, keep]))
        return self._stencils[key]

    def path_values(self, spec: MdpSpec, q_next, method: str = "mc") -> np.ndarray:
        v = self.continuation(spec, q_next)
        if method == "mc":
            return self.reward + self.discount[:, None] * v
        if method == "bsde":
            return self.bsde_reward + self.bsde_discount[:, None] * v
        raise ValueError(f"unknown method {method!r}")

    def estimate(self, spec: MdpSpec, q_next, method: str = "mc"):
        """Means and standard errors per node, ``((N,), (N,))``."""
        return summarize(self.path_values(spec, q_next, method), self.antithetic)


def summarize(paths: np.ndarray, antithetic: bool):
    """Row means and standard errors; antithetic pairs count as one draw."""
    n = paths.shape[1]
    mean = paths.mean(axis=1)
    units = paths.reshape(len(paths), n // 2, 2).mean(axis=2) if antithetic and n > 1 else paths
    k = units.shape[1]
    if k < 2:
        return mean, np.zeros(len(paths))
    return mean, units.std(axis=1, ddof=1) / math.sqrt(k)


def _discrete_kernel(spec: MdpSpec, t, s, a) -> TransitionKernel:
    N = len(s)
    s_next = np.asarray(spec.transition(s, a), dtype=float).reshape(N, 1, -1)
    r = np.asarray(spec.reward(t, s, a), dtype=float).reshape(N, 1)
    if not (np.all(np.isfinite(s_next)) and np.all(np.isfinite(r))):
        raise NonFiniteState("non-finite transition or reward")
    g = np.full(N, float(spec.gamma))
    return TransitionKernel(t=np.asarray(t, dtype=float), end_time=np.zeros(N),
                            hits_horizon=np.zeros(N, dtype=bool), end_state=s_next,
                            reward=r, bsde_reward=r, discount=g, bsde_discount=g,
                            antithetic=False, substeps=0, clip_fraction=0.0)


def simulate_kernel(spec: MdpSpec, t, s, a, cfg: Optional[SimConfig] = None) -> TransitionKernel:
    """Simulate all paths for the points ``(t_j, s_j, a_j)``.

    Discrete problems reduce to one exact deterministic transition per point.
    In continuous mode the reward integral uses left-endpoint quadrature with
    weights ``exp(-λ k Δu) Δu`` (Monte-Carlo path) and the backward Euler
    recursion ``Y_k = Y_{k+1} + (r_k - λ Y_{k+1}) Δu`` unrolled into weights
    ``(1 - λΔu)^k Δu`` (BSDE path).
    """
    s = np.atleast_2d(np.asarray(s, dtype=float))
    N = len(s)
    t = np.broadcast_to(np.asarray(t, dtype=float), (N,)).copy()
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if spec.mode is Mode.DISCRETE_DETERMINISTIC:
        return _discrete_kernel(spec, t, s, a)
    cfg = cfg or SimConfig()
    K, S, n = cfg.substeps_per_delta, cfg.n_samples, s.shape[1]
    lam = spec.discount_lambda
    tau, hits = _end_time(spec, t)
    du = (tau - t) / K                                   # (N,)
    z = brownian_increments(cfg, K, spec.noise_dim)      # (S, K, d)
    lo, hi = np.array(spec.state_low), np.array(spec.state_high)

    end_state = np.empty((N, S, n))
    reward = np.zeros((N, S))
    breward = np.zeros((N, S))
    n_clipped = 0
    chunk = max(1, CHUNK_ENTRIES // S)
    for c0 in range(0, N, chunk):
        sl = slice(c0, min(N, c0 + chunk))
        m = sl.stop - sl.start
        dus = du[sl]
        sq = np.sqrt(dus)
        cur = np.repeat(s[sl], S, axis=0)               # (m*S, n)
        act = np.repeat(a[sl], S, axis=0)
        dts = np.repeat(dus, S)
        sqs = np.repeat(sq, S)
        for k in range(K):
            u = np.repeat(t[sl] + k * dus, S)
            r = np.asarray(spec.reward(u, cur, act), dtype=float).reshape(m, S)
            reward[sl] += (np.exp(-lam * k * dus) * dus)[:, None] * r
            breward[sl] += ((1.0 - lam * dus) ** k * dus)[:, None] * r
            h = spec.drift(u, cur, act)
            sig = spec.diffusion(u, cur, act)
            zk = np.tile(z[:, k, :], (m, 1))
            nxt = cur + h * dts[:, None] + np.einsum("nij,nj->ni", sig, zk) * sqs[:, None]
            if not np.all(np.isfinite(nxt)):
                raise NonFiniteState(f"non-finite state at substep {k}")
            out = ((nxt < lo) | (nxt > hi)).any(axis=1)
            n_clipped += int(out.sum())
            cur = np.clip(nxt, lo, hi)
        end_state[sl] = cur.reshape(m, S, n)
    discount = np.where(hits, np.exp(-lam * (tau - t)), math.exp(-lam * spec.hold_delta))
    bdiscount = (1.0 - lam * du) ** K
    clip_fraction = n_clipped / float(N * S * K) if N else 0.0
    if clip_fraction > 0.01:
        log.warning("state clipping on %.2f%% of substeps", 100 * clip_fraction)
    return TransitionKernel(t=t, end_time=tau, hits_horizon=hits, end_state=end_state,
                            reward=reward, bsde_reward=breward, discount=discount,
                            bsde_discount=bdiscount, antithetic=cfg.antithetic, substeps=K,
                            clip_fraction=clip_fraction)


def _point_estimate(spec, q, t, s, a, cfg, method) -> McEstimate:
    ker = simulate_kernel(spec, np.array([float(t)]), np.reshape(s, (1, -1)),
                          np.reshape(a, (1, -1)), cfg)
    mean, se = ker.estimate(spec, q, method)
    return McEstimate(float(mean[0]), float(se[0]), ker.n_samples)


def mc_discounted_reward(spec: MdpSpec, t, s, a, q_next, cfg: Optional[SimConfig] = None) -> McEstimate:
    """Monte-Carlo estimate of ``(𝓑 Q_next)(t, s, a)``.

    Exact (standard error 0) for discrete deterministic problems.
    """
    return _point_estimate(spec, q_next, t, s, a, cfg, "mc")


def bsde_evaluate(spec: MdpSpec, q_c, t, s, a, cfg: Optional[SimConfig] = None) -> McEstimate:
    """``Y_t`` of the one-step BSDE with driver ``r - λ y``, averaged over paths.

    Because the driver is linear and does not involve ``Z``, running the
    backward Euler recursion along each path and averaging is unbiased for
    the discrete scheme's conditional expectation.
    """
    _require_sde(spec)
    return _point_estimate(spec, q_c, t, s, a, cfg, "bsde")


@dataclass(frozen=True)
class StabilityReport:
    perturbations: tuple
    mean_distance: tuple
    slope: float          # fitted C_S: max mean distance / perturbation
    linear_fit: float     # least-squares slope through the origin

    def to_dict(self) -> dict:
        return {"perturbations": list(self.perturbations),
                "mean_distance": list(self.mean_distance),
                "slope": self.slope, "linear_fit": self.linear_fit}


def stability_estimate(spec: MdpSpec, cfg: SimConfig, n_points: int = 20,
                       perturbations=(1e-3, 3e-3, 1e-2, 3e-2), seed: int = 0) -> StabilityReport:
    """Empirical ``E||s_e(X) - s_e(X')||`` against ``d(X, X')`` with shared noise.

    Base points ``X`` are uniform in the interior of ``K_Q``; ``X'`` moves
    ``X`` by ``ε`` along a random direction in the state and action
    coordinates (time held fixed so both paths share ``τ_e``).
    """
    _require_sde(spec)
    rng = np.random.default_rng(seed)
    slo, shi = np.array(spec.state_low), np.array(spec.state_high)
    alo, ahi = np.array(spec.action_low), np.array(spec.action_high)
    margin = 0.1
    t = rng.random(n_points) * max(spec.horizon_T - spec.hold_delta, 0.0)
    s = slo + (margin + (1 - 2 * margin) * rng.random((n_points, len(slo)))) * (shi - slo)
    a = alo + rng.random((n_points, len(alo))) * (ahi - alo)
    base = simulate_kernel(spec, t, s, a, cfg).end_state
    dists = []
    for eps in perturbations:
        d = rng.standard_normal((n_points, len(slo) + len(alo)))
        ds, da = d[:, :len(slo)], d[:, len(slo):]
        norm = np.linalg.norm(ds, axis=1) + np.linalg.norm(da, axis=1)
        ds = ds / norm[:, None] * eps
        da = da / norm[:, None] * eps
        a2 = np.clip(a + da, alo, ahi)
        s2 = np.clip(s + ds, slo, shi)
        dx = np.linalg.norm(s2 - s, axis=1) + np.linalg.norm(a2 - a, axis=1)
        moved = simulate_kernel(spec, t, s2, a2, cfg).end_state
        dist = np.linalg.norm(moved - base, axis=2).mean(axis=1)
        dists.append(float(np.mean(dist / np.maximum(dx, 1e-300)) * eps))
    eps_arr = np.array(perturbations, dtype=float)
    dist_arr = np.array(dists)
    slope = float(np.max(dist_arr / eps_arr))
    fit = float(eps_arr @ dist_arr / (eps_arr @ eps_arr))
    return StabilityReport(tuple(float(e) for e in eps_arr), tuple(dists), slope, fit)
