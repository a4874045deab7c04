"""Control problem definitions: coefficients, discounting and declared constants.

Coefficients are plain vectorised callables.  With ``N`` evaluation points
they receive ``t`` of shape ``(N,)``, ``s`` of shape ``(N, n)`` and ``a`` of
shape ``(N, m)`` and return

* drift ``h``      -> ``(N, n)``
* diffusion ``σ``  -> ``(N, n, d)``
* reward ``r``     -> ``(N,)``
* terminal ``g(s)``-> ``(N,)``
* transition ``(s, a) -> s'`` -> ``(N, n)`` (discrete mode only)

Finite action sets carry numeric action values so the same calling
convention holds in both modes.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

__all__ = [
    "Mode",
    "Constants",
    "MdpSpec",
    "AuditReport",
    "CoefficientAudit",
    "SpecError",
    "NonFiniteCoefficient",
    "BoundViolation",
    "validate_spec",
    "discount_factor",
    "uniform_q_bound",
    "kq_distance",
    "CATALOG",
    "register_problem",
    "make_spec",
    "appendix_e_spec",
    "zero_spec",
    "ou_spec",
    "constant_spec",
]

AUDIT_TOLERANCE = 1.02


class SpecError(ValueError):
    """Invalid problem definition."""


class NonFiniteCoefficient(SpecError):
    def __init__(self, name, point):
        super().__init__(f"coefficient {name!r} is not finite at {point}")
        self.name = name
        self.point = point


class BoundViolation(SpecError):
    """Declared bound or Lipschitz constant refuted by sampling."""

    def __init__(self, report):
        bad = [v for c in report.coefficients.values() for v in c.violations]
        super().__init__(f"{len(bad)} declared-constant violation(s): " + "; ".join(
            f"{v['coefficient']}:{v['kind']} observed {v['observed']:.6g} > declared {v['declared']:.6g}"
            for v in bad[:5]))
        self.report = report


class Mode(str, enum.Enum):
    CONTINUOUS_SDE = "continuous_sde"
    DISCRETE_DETERMINISTIC = "discrete_deterministic"


@dataclass(frozen=True)
class Constants:
    """Declared Lipschitz constants (``lip_*``) and bounds (``bound_*``)."""

    lip_h: float = 0.0
    lip_sigma: float = 0.0
    lip_r: float = 0.0
    lip_g: float = 0.0
    bound_h: float = 0.0
    bound_sigma: float = 0.0
    bound_r: float = 0.0
    bound_g: float = 0.0

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if not (v >= 0 and math.isfinite(v)):
                raise SpecError(f"constant {k} must be finite and >= 0, got {v}")


Coefficient = Callable[..., np.ndarray]


@dataclass(frozen=True, eq=False)
class MdpSpec:
    """An immutable control problem on ``K_Q = [0, T] x S x A``.

    ``S`` is the box ``[state_low, state_high]``.  The action set is either
    the box ``[action_low, action_high]`` or, when ``actions`` is given, the
    finite list of action value rows in ``actions`` (labelled by
    ``action_labels``).

    In discrete mode ``gamma`` is the discount factor, ``n_stages`` the
    number of stages (``None`` for the infinite-stage problem) and time plays
    no role; ``horizon_T`` and ``hold_delta`` are kept only for bookkeeping.
    """

    name: str
    mode: Mode
    state_low: tuple
    state_high: tuple
    horizon_T: float
    hold_delta: float
    reward: Coefficient
    terminal: Coefficient
    constants: Constants
    action_low: tuple = ()
    action_high: tuple = ()
    actions: Optional[tuple] = None
    action_labels: Optional[tuple] = None
    discount_lambda: float = 0.0
    gamma: float = 0.0
    n_stages: Optional[int] = None
    drift: Optional[Coefficient] = None
    diffusion: Optional[Coefficient] = None
    noise_dim: int = 0
    transition: Optional[Coefficient] = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.state_low) != len(self.state_high) or not self.state_low:
            raise SpecError("state box needs matching, non-empty low/high bounds")
        if any(lo >= hi for lo, hi in zip(self.state_low, self.state_high)):
            raise SpecError("state box must satisfy low < high on every axis")
        if not (self.horizon_T > 0 and math.isfinite(self.horizon_T)):
            raise SpecError(f"horizon_T must be finite and > 0, got {self.horizon_T}")
        if not self.hold_delta > 0:
            raise SpecError(f"hold_delta must be > 0, got {self.hold_delta}")
        if self.actions is None:
            if len(self.action_low) != len(self.action_high) or not self.action_low:
                raise SpecError("action box needs matching, non-empty low/high bounds")
            if any(lo > hi for lo, hi in zip(self.action_low, self.action_high)):
                raise SpecError("action box must satisfy low <= high")
        else:
            acts = np.asarray(self.actions, dtype=float)
            if acts.ndim != 2 or len(acts) == 0:
                raise SpecError("finite actions must be a non-empty list of value rows")
            if self.action_labels is not None and len(self.action_labels) != len(acts):
                raise SpecError("action_labels length does not match actions")
        if self.mode is Mode.CONTINUOUS_SDE:
            if not self.discount_lambda > 0:
                raise SpecError(f"discount_lambda must be > 0, got {self.discount_lambda}")
            if self.drift is None or self.diffusion is None or self.noise_dim < 1:
                raise SpecError("continuous mode needs drift, diffusion and noise_dim >= 1")
        else:
            if not 0 < self.gamma < 1:
                raise SpecError(f"gamma must lie in (0, 1), got {self.gamma}")
            if self.transition is None:
                raise SpecError("discrete mode needs a transition mapping")
            if self.n_stages is not None and self.n_stages < 1:
                raise SpecError("n_stages must be >= 1 or None")

    @property
    def state_dim(self) -> int:
        return len(self.state_low)

    @property
    def action_dim(self) -> int:
        if self.actions is not None:
            return len(self.actions[0])
        return len(self.action_low)

    @property
    def finite_actions(self) -> bool:
        return self.actions is not None

    @property
    def action_values(self) -> Optional[np.ndarray]:
        if self.actions is None:
            return None
        return np.asarray(self.actions, dtype=float)

    @property
    def labels(self) -> tuple:
        if self.actions is None:
            return ()
        if self.action_labels is not None:
            return tuple(self.action_labels)
        return tuple(f"a{i}" for i in range(len(self.actions)))

    @property
    def stationary(self) -> bool:
        """True when Q-functions carry no time coordinate."""
        return self.mode is Mode.DISCRETE_DETERMINISTIC

    def with_constants(self, **overrides) -> "MdpSpec":
        return replace(self, constants=replace(self.constants, **overrides))


# ---------------------------------------------------------------------------
# scalar helpers

def discount_factor(spec: MdpSpec) -> float:
    """Contraction factor of the Bellman operator: ``exp(-λδ)`` or ``γ``."""
    if spec.mode is Mode.CONTINUOUS_SDE:
        return math.exp(-spec.discount_lambda * spec.hold_delta)
    return float(spec.gamma)


def contraction_rate(spec: MdpSpec) -> float:
    """``-ln β``: ``λδ`` in continuous mode, ``ln(1/γ)`` in discrete mode."""
    if spec.mode is Mode.CONTINUOUS_SDE:
        return spec.discount_lambda * spec.hold_delta
    return -math.log(spec.gamma)


def uniform_q_bound(spec: MdpSpec, n_stages: Optional[int] = None) -> float:
    """Uniform sup-norm bound ``M_Q`` on the Bellman iterates and ``Q*``.

    Continuous mode uses ``M_r/λ + M_g``.  Discrete mode sums the geometric
    series over ``n_stages`` (argument, else ``spec.n_stages``); ``None`` there
    means the infinite-stage bound ``M_r/(1-γ) + M_g``.
    """
    c = spec.constants
    if spec.mode is Mode.CONTINUOUS_SDE:
        return c.bound_r / spec.discount_lambda + c.bound_g
    g = spec.gamma
    n = spec.n_stages if n_stages is None else n_stages
    if n is None:
        return c.bound_r / (1.0 - g) + c.bound_g
    return c.bound_r * (1.0 - g ** n) / (1.0 - g) + g ** n * c.bound_g


def kq_distance(t1, s1, a1, t2, s2, a2) -> np.ndarray:
    """``|t-t'| + ||s-s'|| + ||a-a'||`` with Euclidean norms, row-wise."""
    dt = np.abs(np.asarray(t1, float) - np.asarray(t2, float))
    ds = np.linalg.norm(np.atleast_2d(s1) - np.atleast_2d(s2), axis=-1)
    da = np.linalg.norm(np.atleast_2d(a1) - np.atleast_2d(a2), axis=-1)
    return dt + ds + da


# ---------------------------------------------------------------------------
# audit

@dataclass
class CoefficientAudit:
    name: str
    max_value: float
    max_slope: float
    declared_bound: float
    declared_lipschitz: float
    violations: list = field(default_factory=list)


@dataclass
class AuditReport:
    n_probe: int
    seed: int
    coefficients: dict

    @property
    def ok(self) -> bool:
        return not any(c.violations for c in self.coefficients.values())

    def to_dict(self) -> dict:
        return {
            "n_probe": self.n_probe,
            "seed": self.seed,
            "ok": self.ok,
            "coefficients": {
                k: {
                    "max_value": c.max_value,
                    "max_slope": c.max_slope,
                    "declared_bound": c.declared_bound,
                    "declared_lipschitz": c.declared_lipschitz,
                    "violations": c.violations,
                }
                for k, c in self.coefficients.items()
            },
        }


def _probe_points(spec: MdpSpec, n: int, rng: np.random.Generator):
    """``n`` uniform points of K_Q, one row of uniforms per point.

    Rows are drawn in index order from a single stream, so the first ``n``
    points do not depend on how many more are requested.
    """
    n_s, m = spec.state_dim, spec.action_dim
    width = 1 + n_s + (1 if spec.finite_actions else m)
    u = rng.random((n, width))
    t = u[:, 0] * spec.horizon_T
    lo, hi = np.asarray(spec.state_low), np.asarray(spec.state_high)
    s = lo + u[:, 1:1 + n_s] * (hi - lo)
    if spec.finite_actions:
        vals = spec.action_values
        idx = np.minimum((u[:, -1] * len(vals)).astype(int), len(vals) - 1)
        a = vals[idx]
    else:
        alo, ahi = np.asarray(spec.action_low), np.asarray(spec.action_high)
        a = alo + u[:, 1 + n_s:] * (ahi - alo)
    if spec.stationary:
        t = np.zeros_like(t)
    return t, s, a


def _local_partners(spec: MdpSpec, t, s, a, rng: np.random.Generator, radius: float = 0.01):
    """Nearby partner points (same finite action) for local slope probes.

    One row of offsets per point, drawn in index order, so partners are
    prefix-stable in the number of probes just like the points themselves.
    """
    n_s = spec.state_dim
    m = 0 if spec.finite_actions else spec.action_dim
    u = rng.uniform(-radius, radius, (len(t), 1 + n_s + m))
    lo, hi = np.asarray(spec.state_low), np.asarray(spec.state_high)
    s2 = np.clip(s + (hi - lo) * u[:, 1:1 + n_s], lo, hi)
    if spec.stationary:
        t2 = t.copy()
    else:
        t2 = np.clip(t + spec.horizon_T * u[:, 0], 0.0, spec.horizon_T)
    if spec.finite_actions:
        a2 = a.copy()
    else:
        alo, ahi = np.asarray(spec.action_low), np.asarray(spec.action_high)
        a2 = np.clip(a + (ahi - alo) * u[:, 1 + n_s:], alo, ahi)
    return t2, s2, a2


def _norm_rows(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.ndim == 1:
        return np.abs(v)
    return np.sqrt((v.reshape(len(v), -1) ** 2).sum(axis=1))


def validate_spec(spec: MdpSpec, n_probe: int = 10_000, seed: int = 0,
                  strict: bool = False, max_listed: int = 10) -> AuditReport:
    """Probe the coefficients of ``spec`` against their declared constants.

    Bounds are checked at ``n_probe`` uniform points of ``K_Q``; Lipschitz
    constants are checked on ``n_probe // 2`` disjoint random pairs plus one
    nearby partner per point, under the 1-sum metric on ``K_Q``.  A declared
    constant counts as violated when the observed value exceeds it by more
    than the factor ``1.02``.  Sampling can refute a constant but never
    certify it.

    Raises
    ------
    NonFiniteCoefficient
        If any evaluation is NaN or infinite.
    BoundViolation
        If ``strict`` and any violation was found.
    """
    if n_probe < 2:
        raise ValueError("n_probe must be >= 2")
    rng = np.random.default_rng(seed)
    t, s, a = _probe_points(spec, n_probe, rng)
    half = n_probe // 2
    i, j = np.arange(0, 2 * half, 2), np.arange(1, 2 * half, 2)
    # local partners come from an independent stream so the probe points
    # above stay a prefix-stable function of (seed, index)
    lrng = np.random.default_rng([seed, 1])
    t2, s2, a2 = _local_partners(spec, t, s, a, lrng)

    c = spec.constants
    coefs = {"r": (spec.reward, c.bound_r, c.lip_r)}
    coefs["g"] = (spec.terminal, c.bound_g, c.lip_g)
    if spec.mode is Mode.CONTINUOUS_SDE:
        coefs["h"] = (spec.drift, c.bound_h, c.lip_h)
        coefs["sigma"] = (spec.diffusion, c.bound_sigma, c.lip_sigma)

    out = {}
    for name, (fn, bound, lip) in coefs.items():
        if name == "g":
            v1 = np.asarray(fn(s), dtype=float)
            v2 = np.asarray(fn(s2), dtype=float)
            d_glob = np.linalg.norm(s[i] - s[j], axis=1)
            d_loc = np.linalg.norm(s - s2, axis=1)
        else:
            v1 = np.asarray(fn(t, s, a), dtype=float)
            v2 = np.asarray(fn(t2, s2, a2), dtype=float)
            d_glob = kq_distance(t[i], s[i], a[i], t[j], s[j], a[j])
            d_loc = kq_distance(t, s, a, t2, s2, a2)
        for arr, pts in ((v1, (t, s, a)), (v2, (t2, s2, a2))):
            bad = ~np.isfinite(arr.reshape(len(arr), -1)).all(axis=1)
            if bad.any():
                k = int(np.argmax(bad))
                raise NonFiniteCoefficient(name, _point(pts, k))
        mags = _norm_rows(v1)
        d_val_glob = _norm_rows(v1[i] - v1[j])
        d_val_loc = _norm_rows(v1 - v2)
        with np.errstate(divide="ignore", invalid="ignore"):
            q_glob = np.where(d_glob > 0, d_val_glob / d_glob, 0.0)
            q_loc = np.where(d_loc > 0, d_val_loc / d_loc, 0.0)
        audit = CoefficientAudit(
            name=name,
            max_value=float(mags.max(initial=0.0)),
            max_slope=float(max(q_glob.max(initial=0.0), q_loc.max(initial=0.0))),
            declared_bound=bound,
            declared_lipschitz=lip,
        )
        for k in np.flatnonzero(mags > bound * AUDIT_TOLERANCE)[:max_listed]:
            audit.violations.append({
                "coefficient": name, "kind": "bound", "observed": float(mags[k]),
                "declared": bound, "points": [_point((t, s, a), k)]})
        order = np.argsort(-q_glob, kind="stable")
        for k in order[:max_listed]:
            if q_glob[k] <= lip * AUDIT_TOLERANCE:
                break
            audit.violations.append({
                "coefficient": name, "kind": "lipschitz", "observed": float(q_glob[k]),
                "declared": lip,
                "points": [_point((t, s, a), i[k]), _point((t, s, a), j[k])]})
        order = np.argsort(-q_loc, kind="stable")
        for k in order[:max_listed]:
            if q_loc[k] <= lip * AUDIT_TOLERANCE:
                break
            audit.violations.append({
                "coefficient": name, "kind": "lipschitz", "observed": float(q_loc[k]),
                "declared": lip,
                "points": [_point((t, s, a), k), _point((t2, s2, a2), k)]})
        out[name] = audit
    report = AuditReport(n_probe=n_probe, seed=seed, coefficients=out)
    if strict and not report.ok:
        raise BoundViolation(report)
    return report


def _point(pts, k) -> dict:
    t, s, a = pts
    return {"t": float(t[k]), "s": [float(x) for x in s[k]], "a": [float(x) for x in a[k]]}


# ---------------------------------------------------------------------------
# catalog

CATALOG: dict[str, Callable[..., MdpSpec]] = {}


def register_problem(name: str):
    def deco(factory):
        CATALOG[name] = factory
        return factory
    return deco


def make_spec(problem: str, params: Optional[dict] = None,
              constants: Optional[dict] = None) -> MdpSpec:
    """Build a catalog problem, optionally overriding declared constants."""
    try:
        factory = CATALOG[problem]
    except KeyError:
        raise SpecError(f"unknown problem {problem!r}; known: {sorted(CATALOG)}") from None
    try:
        spec = factory(**(params or {}))
    except TypeError as exc:
        raise SpecError(f"bad parameters for problem {problem!r}: {exc}") from None
    if constants:
        unknown = set(constants) - set(Constants.__dataclass_fields__)
        if unknown:
            raise SpecError(f"unknown constant(s) {sorted(unknown)}")
        spec = spec.with_constants(**{k: float(v) for k, v in constants.items()})
    return spec


@register_problem("appendix_e")
def appendix_e_spec(step: float = 0.1, gamma: float = 0.9,
                    n_stages: Optional[int] = 2) -> MdpSpec:
    """Move-left / move-right walk on ``[0, 1]`` with reward ``-(s - 0.5)^2``.

    Actions carry the values -1 (``a_L``) and +1 (``a_R``); the transition is
    ``clip(s + a * step, 0, 1)``.
    """
    def reward(t, s, a):
        return -(s[:, 0] - 0.5) ** 2

    def transition(s, a):
        return np.clip(s + a * step, 0.0, 1.0)

    return MdpSpec(
        name="appendix_e",
        mode=Mode.DISCRETE_DETERMINISTIC,
        state_low=(0.0,), state_high=(1.0,),
        horizon_T=1.0, hold_delta=1.0,
        reward=reward,
        terminal=lambda s: np.zeros(len(s)),
        transition=transition,
        actions=((-1.0,), (1.0,)),
        action_labels=("a_L", "a_R"),
        gamma=gamma,
        n_stages=n_stages,
        constants=Constants(lip_r=1.0, bound_r=0.25, lip_g=0.0, bound_g=0.0),
        params={"step": step, "gamma": gamma, "n_stages": n_stages},
    )


@register_problem("zero")
def zero_spec(mode: str = "discrete_deterministic", gamma: float = 0.9,
              discount_lambda: float = 1.0, hold_delta: float = 0.1,
              horizon_T: float = 1.0) -> MdpSpec:
    """Zero rewards; ``Q* = 0`` in either mode."""
    mode = Mode(mode)
    zeros = lambda t, s, a: np.zeros(len(s))  # noqa: E731
    common = dict(
        name="zero", mode=mode, state_low=(0.0,), state_high=(1.0,),
        reward=zeros, terminal=lambda s: np.zeros(len(s)), constants=Constants(),
        params={"mode": mode.value},
    )
    if mode is Mode.DISCRETE_DETERMINISTIC:
        return MdpSpec(horizon_T=1.0, hold_delta=1.0, gamma=gamma,
                       actions=((-1.0,), (1.0,)), action_labels=("a_L", "a_R"),
                       transition=lambda s, a: np.clip(s + 0.1 * a, 0.0, 1.0),
                       **common)
    return MdpSpec(horizon_T=horizon_T, hold_delta=hold_delta, discount_lambda=discount_lambda,
                   action_low=(-1.0,), action_high=(1.0,),
                   drift=lambda t, s, a: np.zeros_like(s),
                   diffusion=lambda t, s, a: np.zeros(s.shape + (1,)),
                   noise_dim=1, **common)


@register_problem("ou_1d")
def ou_spec(kappa: float = 1.5, sigma: float = 0.3, discount_lambda: float = 1.0,
            hold_delta: float = 0.1, horizon_T: float = 1.0, state_bound: float = 3.0,
            action_bound: float = 1.0, action_cost: float = 0.1,
            state_weight: float = 0.25, terminal_weight: float = 0.25) -> MdpSpec:
    """Mean-reverting 1-D diffusion steered by the held action.

    ``ds = κ (a - s) du + σ dW`` on ``S = [-B, B]``, ``A = [-b, b]``, with
    reward ``-(w s^2 + c a^2)`` and terminal reward ``-w_T s^2``.
    """
    B, b = state_bound, action_bound
    w, c, wt = state_weight, action_cost, terminal_weight

    def drift(t, s, a):
        return kappa * (a - s)

    def diffusion(t, s, a):
        return np.full(s.shape + (1,), sigma)

    def reward(t, s, a):
        return -(w * s[:, 0] ** 2 + c * a[:, 0] ** 2)

    def terminal(s):
        return -wt * s[:, 0] ** 2

    constants = Constants(
        lip_h=kappa,
        lip_sigma=0.0,
        lip_r=max(2 * w * B, 2 * c * b),
        lip_g=2 * wt * B,
        bound_h=kappa * (B + b),
        bound_sigma=abs(sigma),
        bound_r=w * B ** 2 + c * b ** 2,
        bound_g=wt * B ** 2,
    )
    return MdpSpec(
        name="ou_1d", mode=Mode.CONTINUOUS_SDE,
        state_low=(-B,), state_high=(B,), action_low=(-b,), action_high=(b,),
        horizon_T=horizon_T, hold_delta=hold_delta, discount_lambda=discount_lambda,
        drift=drift, diffusion=diffusion, noise_dim=1, reward=reward, terminal=terminal,
        constants=constants,
        params=dict(kappa=kappa, sigma=sigma, discount_lambda=discount_lambda,
                    hold_delta=hold_delta, horizon_T=horizon_T, state_bound=B,
                    action_bound=b, action_cost=c, state_weight=w, terminal_weight=wt),
    )


@register_problem("constant")
def constant_spec(drift: float = 0.0, sigma: float = 0.0, reward: float = 0.0,
                  terminal: float = 0.0, discount_lambda: float = 1.0,
                  hold_delta: float = 0.1, horizon_T: float = 1.0,
                  state_bound: float = 1.0) -> MdpSpec:
    """Constant coefficients on ``S = [-B, B]``, ``A = [-1, 1]``; a test family."""
    def h(t, s, a):
        return np.full(s.shape, float(drift))

    def sig(t, s, a):
        return np.full(s.shape + (1,), float(sigma))

    return MdpSpec(
        name="constant", mode=Mode.CONTINUOUS_SDE,
        state_low=(-state_bound,), state_high=(state_bound,),
        action_low=(-1.0,), action_high=(1.0,),
        horizon_T=horizon_T, hold_delta=hold_delta, discount_lambda=discount_lambda,
        drift=h, diffusion=sig, noise_dim=1,
        reward=lambda t, s, a: np.full(len(s), float(reward)),
        terminal=lambda s: np.full(len(s), float(terminal)),
        constants=Constants(bound_h=abs(drift), bound_sigma=abs(sigma),
                            bound_r=abs(reward), bound_g=abs(terminal)),
        params=dict(drift=drift, sigma=sigma, reward=reward, terminal=terminal,
                    discount_lambda=discount_lambda, hold_delta=hold_delta,
                    horizon_T=horizon_T, state_bound=state_bound),
    )
