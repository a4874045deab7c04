"""Grid representation of functions on ``K_Q``.

A :class:`GridDomain` is a tensor grid over the continuous coordinates
(optional time axis, state axes, continuous action axes) optionally followed
by a finite action axis.  Node values are stored row-major with the last axis
varying fastest, so for a finite action set the action index is the fastest
index.  A :class:`GridFunction` is the multilinear interpolant of such node
values; along a finite action axis values are looked up, never interpolated.

Lipschitz constants are measured with the 1-sum metric
``|t - t'| + ||s - s'|| + ||a - a'||`` inside a single finite-action slice;
distinct finite actions are treated as incomparable.
"""

from __future__ import annotations

import hashlib
import csv
import io
import json
from dataclasses import dataclass
from itertools import product
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import qmc

__all__ = [
    "GridDomain",
    "GridFunction",
    "GridError",
    "LengthMismatch",
    "DomainMismatch",
    "NonFiniteValue",
    "SupDistance",
    "encode",
    "decode",
    "sup_distance",
    "estimate_lipschitz",
    "lipschitz_bounds",
    "random_bump_values",
    "save_grid_function",
    "load_grid_function",
]


class GridError(ValueError):
    pass


class LengthMismatch(GridError):
    pass


class DomainMismatch(GridError):
    pass


class NonFiniteValue(GridError):
    def __init__(self, index: int, value: float):
        super().__init__(f"non-finite value {value} at node {index}")
        self.index = index


def _axis(nodes) -> np.ndarray:
    a = np.array(nodes, dtype=float).reshape(-1)
    if a.size == 0 or not np.all(np.isfinite(a)):
        raise GridError("axis nodes must be finite and non-empty")
    if a.size > 1 and not np.all(np.diff(a) > 0):
        raise GridError("axis nodes must be strictly increasing")
    a.setflags(write=False)
    return a


class GridDomain:
    """Tensor grid ``D_M`` over ``K_Q``.

    Parameters
    ----------
    states : sequence of 1-D arrays
        Node coordinates of each state axis.
    time : 1-D array, optional
        Time nodes over ``[0, T]``; omitted for stationary problems.
    action_axes : sequence of 1-D arrays, optional
        Nodes of each continuous action axis (action box problems).
    actions : array of shape (K, m), optional
        Values of a finite action set; becomes the last (fastest) grid axis.
    action_labels : sequence of str, optional
        Names of the finite actions, used in CSV output.
    """

    def __init__(self, states: Sequence, time=None, action_axes: Sequence = (),
                 actions=None, action_labels: Optional[Sequence[str]] = None):
        self.time = None if time is None else _axis(time)
        self.states = tuple(_axis(s) for s in states)
        self.action_axes = tuple(_axis(a) for a in action_axes)
        if not self.states:
            raise GridError("at least one state axis is required")
        if actions is not None and self.action_axes:
            raise GridError("use either continuous action axes or a finite action set")
        if actions is not None:
            acts = np.array(actions, dtype=float)
            if acts.ndim == 1:
                acts = acts[:, None]
            acts.setflags(write=False)
            self.actions = acts
            labels = tuple(action_labels) if action_labels is not None else tuple(
                f"a{i}" for i in range(len(acts)))
            if len(labels) != len(acts):
                raise GridError("action_labels length does not match actions")
            self.action_labels = labels
        else:
            self.actions = None
            self.action_labels = ()

    # -- construction ---------------------------------------------------
    @classmethod
    def for_spec(cls, spec, state_nodes, time_nodes: Optional[int] = None,
                 action_nodes=None) -> "GridDomain":
        """Uniform grid over the domain of ``spec``.

        ``state_nodes`` / ``action_nodes`` are per-axis counts (an int is
        broadcast).  Continuous problems get a time axis of ``time_nodes``
        nodes, by default aligned with multiples of the hold time.
        """
        n = spec.state_dim
        counts = [state_nodes] * n if np.isscalar(state_nodes) else list(state_nodes)
        if len(counts) != n:
            raise GridError(f"expected {n} state node counts, got {len(counts)}")
        states = [np.linspace(lo, hi, int(c)) for lo, hi, c in
                  zip(spec.state_low, spec.state_high, counts)]
        time = None
        if not spec.stationary:
            if time_nodes is None:
                time_nodes = int(round(spec.horizon_T / spec.hold_delta)) + 1
            time = np.linspace(0.0, spec.horizon_T, int(time_nodes))
        if spec.finite_actions:
            return cls(states, time=time, actions=spec.action_values,
                       action_labels=spec.labels)
        m = spec.action_dim
        if action_nodes is None:
            action_nodes = 5
        acounts = [action_nodes] * m if np.isscalar(action_nodes) else list(action_nodes)
        axes = [np.linspace(lo, hi, int(c)) if hi > lo else np.array([lo])
                for lo, hi, c in zip(spec.action_low, spec.action_high, acounts)]
        return cls(states, time=time, action_axes=axes)

    # -- shape bookkeeping ----------------------------------------------
    @property
    def ts_axes(self) -> tuple:
        """Time (if any) and state axes."""
        return ((self.time,) if self.time is not None else ()) + self.states

    @property
    def cont_axes(self) -> tuple:
        return self.ts_axes + self.action_axes

    @property
    def axis_names(self) -> tuple:
        names = ("t",) if self.time is not None else ()
        names += tuple(f"s{i}" for i in range(len(self.states)))
        names += tuple(f"a{i}" for i in range(len(self.action_axes)))
        return names

    @property
    def n_actions(self) -> int:
        return 0 if self.actions is None else len(self.actions)

    @property
    def shape(self) -> tuple:
        shp = tuple(len(a) for a in self.cont_axes)
        if self.actions is not None:
            shp += (len(self.actions),)
        return shp

    @property
    def ts_shape(self) -> tuple:
        return tuple(len(a) for a in self.ts_axes)

    @property
    def n_action_nodes(self) -> int:
        """Number of action nodes per (t, s) node: box nodes or finite actions."""
        n = int(np.prod([len(a) for a in self.action_axes])) if self.action_axes else 1
        return n * max(self.n_actions, 1)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    M = size

    @property
    def mesh(self) -> tuple:
        """Largest node spacing per continuous axis (0 for single-node axes)."""
        return tuple(float(np.max(np.diff(a))) if len(a) > 1 else 0.0 for a in self.cont_axes)

    @property
    def h_min(self) -> float:
        sp = [float(np.min(np.diff(a))) for a in self.cont_axes if len(a) > 1]
        return min(sp) if sp else float("inf")

    @property
    def state_dim(self) -> int:
        return len(self.states)

    @property
    def action_dim(self) -> int:
        if self.actions is not None:
            return self.actions.shape[1]
        return len(self.action_axes)

    # -- identity ---------------------------------------------------------
    @property
    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, ax in zip(self.axis_names, self.cont_axes):
            h.update(name.encode())
            h.update(np.ascontiguousarray(ax, dtype="<f8").tobytes())
        if self.actions is not None:
            h.update(b"actions")
            h.update(np.ascontiguousarray(self.actions, dtype="<f8").tobytes())
            h.update("\x00".join(self.action_labels).encode())
        return h.hexdigest()

    def __eq__(self, other):
        return isinstance(other, GridDomain) and other.checksum == self.checksum

    def __hash__(self):
        return hash(self.checksum)

    def __repr__(self):
        return f"GridDomain(axes={self.axis_names}, shape={self.shape}, M={self.size})"

    def to_dict(self) -> dict:
        return {
            "axes": {n: [float(x) for x in a] for n, a in zip(self.axis_names, self.cont_axes)},
            "actions": None if self.actions is None else self.actions.tolist(),
            "action_labels": list(self.action_labels),
            "shape": list(self.shape),
            "M": self.size,
            "ordering": "row-major, last axis fastest",
            "checksum": self.checksum,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridDomain":
        axes = d["axes"]
        time = axes.get("t")
        states = [axes[k] for k in sorted((k for k in axes if k.startswith("s")), key=lambda k: int(k[1:]))]
        acts = [axes[k] for k in sorted((k for k in axes if k.startswith("a")), key=lambda k: int(k[1:]))]
        dom = cls(states, time=time, action_axes=acts, actions=d.get("actions"),
                  action_labels=d.get("action_labels") or None)
        if "checksum" in d and d["checksum"] != dom.checksum:
            raise GridError("grid metadata checksum mismatch")
        return dom

    # -- node coordinates -----------------------------------------------
    def node_points(self):
        """``(t, s, a, action_index)`` for every node in storage order."""
        cont = np.meshgrid(*self.cont_axes, indexing="ij")
        cont = [c.reshape(-1) for c in cont]
        k = max(self.n_actions, 1)
        cont = [np.repeat(c, k) for c in cont]
        pos = 0
        if self.time is not None:
            t = cont[0]
            pos = 1
        else:
            t = np.zeros(self.size)
        n = len(self.states)
        s = np.stack(cont[pos:pos + n], axis=1)
        pos += n
        if self.actions is not None:
            idx = np.tile(np.arange(self.n_actions), self.size // self.n_actions)
            a = self.actions[idx]
        else:
            idx = None
            a = np.stack(cont[pos:], axis=1) if self.action_axes else np.zeros((self.size, 0))
        return t, s, a, idx

    def cont_coords(self, t, s, a) -> np.ndarray:
        """Stack point coordinates in continuous-axis order."""
        s = np.atleast_2d(np.asarray(s, dtype=float))
        cols = []
        if self.time is not None:
            cols.append(np.broadcast_to(np.asarray(t, dtype=float), (len(s),)))
        cols.extend(s.T)
        if self.action_axes:
            cols.extend(np.atleast_2d(np.asarray(a, dtype=float)).T)
        return np.stack(cols, axis=1)

    def action_index(self, a) -> np.ndarray:
        """Map finite action values to indices (exact match required)."""
        a = np.atleast_2d(np.asarray(a, dtype=float))
        d = np.abs(a[:, None, :] - self.actions[None, :, :]).max(axis=2)
        idx = np.argmin(d, axis=1)
        if np.any(d[np.arange(len(a)), idx] > 1e-12):
            raise GridError("action value not in the finite action set")
        return idx

    def sample_points(self, n: int, rng: np.random.Generator):
        """Uniform random points ``(x_cont, action_index)`` in the domain."""
        lo = np.array([a[0] for a in self.cont_axes])
        hi = np.array([a[-1] for a in self.cont_axes])
        x = lo + rng.random((n, len(lo))) * (hi - lo)
        idx = rng.integers(0, self.n_actions, n) if self.actions is not None else None
        return x, idx


# ---------------------------------------------------------------------------
# multilinear interpolation kernel

def _cells(axes: Sequence[np.ndarray], x: np.ndarray):
    """Lower cell index and fractional position per axis (clamped to the box)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n_pts = len(x)
    lo_idx, fracs = [], []
    for k, z in enumerate(axes):
        if len(z) == 1:
            lo_idx.append(np.zeros(n_pts, dtype=np.int64))
            fracs.append(np.zeros(n_pts))
            continue
        xk = np.clip(x[:, k], z[0], z[-1])
        i = np.clip(np.searchsorted(z, xk, side="right") - 1, 0, len(z) - 2)
        fracs.append((xk - z[i]) / (z[i + 1] - z[i]))
        lo_idx.append(i)
    return lo_idx, fracs


def _corner_index(axes, lo_idx) -> np.ndarray:
    """Flat indices ``(N, 2**d)`` of cell corners, first axis most significant."""
    shape = [len(a) for a in axes]
    strides = np.cumprod([1] + shape[::-1])[:-1][::-1]
    corners = list(product((0, 1), repeat=len(axes)))
    idx = np.zeros((len(lo_idx[0]), len(corners)), dtype=np.int64)
    for c, bits in enumerate(corners):
        for k, b in enumerate(bits):
            step = b if len(axes[k]) > 1 else 0
            idx[:, c] += (lo_idx[k] + step) * strides[k]
    return idx


def _stencil(axes: Sequence[np.ndarray], x: np.ndarray):
    """Corner flat indices and weights, each of shape ``(N, 2**d)``.

    Points outside the box are clamped onto it.
    """
    lo_idx, fracs = _cells(axes, x)
    idx = _corner_index(axes, lo_idx)
    w = np.ones(idx.shape)
    for c, bits in enumerate(product((0, 1), repeat=len(axes))):
        for k, b in enumerate(bits):
            if len(axes[k]) == 1:
                if b:
                    w[:, c] = 0.0
                continue
            w[:, c] *= fracs[k] if b else (1.0 - fracs[k])
    return idx, w


def interpolate(axes: Sequence[np.ndarray], table: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Multilinear interpolation of ``table`` (shape ``(n_nodes, ...)``) at ``x``.

    ``table`` rows follow the row-major node order of ``axes``; trailing
    dimensions are carried through, so the result has shape ``(N, ...)``.
    Evaluated as nested one-dimensional lerps anchored at the nearer corner,
    so node values and constants are reproduced exactly.
    """
    lo_idx, fracs = _cells(axes, x)
    idx = _corner_index(axes, lo_idx)
    vals = table[idx]                                  # (N, 2**d, ...)
    tail = table.shape[1:]
    n = vals.shape[0]
    for k in range(len(axes) - 1, -1, -1):
        vals = vals.reshape((n, -1, 2) + tail)
        v0, v1 = vals[:, :, 0], vals[:, :, 1]
        f = fracs[k].reshape((n, 1) + (1,) * len(tail))
        vals = np.where(f <= 0.5, v0 + f * (v1 - v0), v1 - (1.0 - f) * (v1 - v0))
    return vals.reshape((n,) + tail)


class GridFunction:
    """Multilinear interpolant of node values on a :class:`GridDomain`."""

    __slots__ = ("domain", "values")

    def __init__(self, domain: GridDomain, values):
        v = np.array(values, dtype=float).reshape(-1)
        if v.size != domain.size:
            raise LengthMismatch(f"expected {domain.size} values, got {v.size}")
        v.setflags(write=False)
        self.domain = domain
        self.values = v

    @property
    def array(self) -> np.ndarray:
        return self.values.reshape(self.domain.shape)

    def _cont_table(self) -> np.ndarray:
        """Values as ``(n_cont_nodes, K)`` with K finite actions (or 1)."""
        return self.values.reshape(-1, max(self.domain.n_actions, 1))

    def at(self, x_cont: np.ndarray, action_index=None) -> np.ndarray:
        """Evaluate at continuous coordinates ``x_cont`` (continuous-axis order)."""
        x_cont = np.atleast_2d(x_cont)
        table = self._cont_table()
        vals = interpolate(self.domain.cont_axes, table, x_cont)
        if self.domain.actions is None:
            return vals[:, 0]
        if action_index is None:
            raise GridError("finite-action domain requires action indices")
        action_index = np.broadcast_to(np.asarray(action_index), (len(x_cont),))
        return vals[np.arange(len(x_cont)), action_index]

    def __call__(self, t, s, a) -> np.ndarray:
        d = self.domain
        x = d.cont_coords(t, s, a)
        idx = d.action_index(a) if d.actions is not None else None
        return self.at(x, idx)

    def action_table(self) -> np.ndarray:
        """Values as ``(n_ts_nodes, n_action_nodes)``."""
        return self.values.reshape(int(np.prod(self.domain.ts_shape)), self.domain.n_action_nodes)

    def continuation(self, t, s) -> np.ndarray:
        """``max`` over action nodes of ``Q(t, s, a')`` at points ``(t, s)``."""
        d = self.domain
        s = np.atleast_2d(s)
        cols = []
        if d.time is not None:
            cols.append(np.broadcast_to(np.asarray(t, dtype=float), (len(s),)))
        cols.extend(s.T)
        x = np.stack(cols, axis=1)
        return interpolate(d.ts_axes, self.action_table(), x).max(axis=1)

    # arithmetic on a shared domain
    def _check(self, other):
        if isinstance(other, GridFunction):
            if other.domain is not self.domain and other.domain != self.domain:
                raise DomainMismatch("grid functions live on different domains")
            return other.values
        return other

    def __add__(self, other):
        return GridFunction(self.domain, self.values + self._check(other))

    __radd__ = __add__

    def __sub__(self, other):
        return GridFunction(self.domain, self.values - self._check(other))

    def __rsub__(self, other):
        return GridFunction(self.domain, self._check(other) - self.values)

    def __mul__(self, c):
        return GridFunction(self.domain, self.values * float(c))

    __rmul__ = __mul__

    def __neg__(self):
        return GridFunction(self.domain, -self.values)

    def sup_norm(self) -> float:
        """Exact sup norm: a multilinear interpolant peaks at a node."""
        return float(np.max(np.abs(self.values)))

    def __repr__(self):
        return f"GridFunction(M={self.values.size}, sup={self.sup_norm():.6g})"


# ---------------------------------------------------------------------------
# encoder / decoder

def encode(f: Callable, grid: GridDomain) -> np.ndarray:
    """Sample ``f(t, s, a)`` at every node, in storage order."""
    if isinstance(f, GridFunction) and f.domain == grid:
        return f.values.copy()
    t, s, a, _ = grid.node_points()
    v = np.asarray(f(t, s, a), dtype=float).reshape(-1)
    if v.size != grid.size:
        raise LengthMismatch(f"f returned {v.size} values for {grid.size} nodes")
    bad = ~np.isfinite(v)
    if bad.any():
        k = int(np.argmax(bad))
        raise NonFiniteValue(k, float(v[k]))
    return v


def decode(v, grid: GridDomain) -> GridFunction:
    v = np.asarray(v, dtype=float).reshape(-1)
    if v.size != grid.size:
        raise LengthMismatch(f"expected {grid.size} values, got {v.size}")
    return GridFunction(grid, v)


# ---------------------------------------------------------------------------
# norms and regularity

@dataclass(frozen=True)
class SupDistance:
    value: float
    x_cont: tuple
    action_index: Optional[int]

    def __float__(self):
        return self.value


def _dense_points(grid: GridDomain, n: int, seed: int):
    d = len(grid.cont_axes)
    lo = np.array([a[0] for a in grid.cont_axes])
    hi = np.array([a[-1] for a in grid.cont_axes])
    u = qmc.Halton(d=d, scramble=True, seed=seed).random(n)
    x = lo + u * (hi - lo)
    idx = (np.arange(n) % grid.n_actions) if grid.actions is not None else None
    return x, idx


def sup_distance(f, g, n_dense: int = 4096, seed: int = 0) -> SupDistance:
    """Max ``|f - g|`` over all nodes plus ``n_dense`` quasi-random points.

    ``f`` and ``g`` are grid functions on the same domain, or ``g`` may be a
    plain callable ``g(t, s, a)`` evaluated pointwise.
    """
    dom = f.domain
    if isinstance(g, GridFunction):
        if g.domain != dom:
            raise DomainMismatch("grid functions live on different domains")
        node_diff = np.abs(f.values - g.values)
        g_at = g.at
    else:
        node_diff = np.abs(f.values - encode(g, dom))

        def g_at(x, idx):
            t, s, a = _split(dom, x, idx)
            return np.asarray(g(t, s, a), dtype=float)
    best = int(np.argmax(node_diff))
    value = float(node_diff[best])
    t, s, a, aidx = dom.node_points()
    x_best = tuple(dom.cont_coords(t[best:best + 1], s[best:best + 1], a[best:best + 1])[0])
    i_best = None if aidx is None else int(aidx[best])
    if n_dense > 0:
        x, idx = _dense_points(dom, n_dense, seed)
        diff = np.abs(f.at(x, idx) - g_at(x, idx))
        k = int(np.argmax(diff))
        if diff[k] > value:
            value = float(diff[k])
            x_best = tuple(x[k])
            i_best = None if idx is None else int(idx[k])
    return SupDistance(value, tuple(float(c) for c in x_best), i_best)


def _split(dom: GridDomain, x: np.ndarray, idx):
    pos = 0
    if dom.time is not None:
        t = x[:, 0]
        pos = 1
    else:
        t = np.zeros(len(x))
    n = len(dom.states)
    s = x[:, pos:pos + n]
    if dom.actions is not None:
        a = dom.actions[idx]
    else:
        a = x[:, pos + n:]
    return t, s, a


def _edge_slopes(grid: GridDomain, values: np.ndarray) -> list:
    """Per continuous axis, max adjacent-node slope for each function in ``values``.

    ``values`` has shape ``(B, M)``; returns a list of ``(B,)`` arrays.
    """
    arr = values.reshape((len(values),) + grid.shape)
    out = []
    for k, ax in enumerate(grid.cont_axes):
        if len(ax) < 2:
            out.append(np.zeros(len(values)))
            continue
        shp = [1] * arr.ndim
        shp[k + 1] = len(ax) - 1
        slope = np.abs(np.diff(arr, axis=k + 1)) / np.diff(ax).reshape(shp)
        out.append(slope.reshape(len(values), -1).max(axis=1))
    return out


def lipschitz_bounds(grid: GridDomain, values) -> tuple:
    """Lower and upper Lipschitz bounds of multilinear interpolants.

    ``values`` is ``(M,)`` or ``(B, M)``.  The lower bound is the largest
    adjacent-node slope.  Inside a cell a multilinear interpolant's partial
    derivative along an axis is a convex combination of edge slopes on that
    axis, so the Euclidean norm of the per-axis maxima within the state group
    (and within the action group) bounds the constant from above.  In one
    dimension per group the two bounds coincide.
    """
    v = np.atleast_2d(np.asarray(values, dtype=float))
    slopes = _edge_slopes(grid, v)
    lower = np.max(np.stack(slopes), axis=0)
    groups = []
    pos = 0
    if grid.time is not None:
        groups.append(slopes[0])
        pos = 1
    n = len(grid.states)
    groups.append(np.sqrt(sum(sl ** 2 for sl in slopes[pos:pos + n])))
    if grid.action_axes:
        groups.append(np.sqrt(sum(sl ** 2 for sl in slopes[pos + n:])))
    upper = np.max(np.stack(groups), axis=0)
    if np.ndim(values) == 1:
        return float(lower[0]), float(upper[0])
    return lower, upper


def estimate_lipschitz(f: GridFunction, n_pairs: int = 1000, seed: int = 0) -> float:
    """Lower estimate of the Lipschitz constant of ``f`` on ``K_Q``.

    The maximum of all adjacent-node difference quotients and of ``n_pairs``
    random same-action point pairs.  For a multilinear interpolant the node
    scan alone is within a factor ``sqrt(n)`` of the true constant (``n`` the
    larger of the state and action dimensions), and exact when each
    coordinate group is one-dimensional.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    dom = f.domain
    est, _ = lipschitz_bounds(dom, f.values)
    rng = np.random.default_rng(seed)
    x1, idx = dom.sample_points(n_pairs, rng)
    x2, _ = dom.sample_points(n_pairs, rng)
    v1 = f.at(x1, idx)
    v2 = f.at(x2, idx)
    t1, s1, a1 = _split(dom, x1, idx)
    t2, s2, a2 = _split(dom, x2, idx)
    dist = np.abs(t1 - t2) + np.linalg.norm(s1 - s2, axis=1)
    if dom.action_axes:
        dist = dist + np.linalg.norm(a1 - a2, axis=1)
    ok = dist > 1e-12
    if ok.any():
        est = max(est, float(np.max(np.abs(v1 - v2)[ok] / dist[ok])))
    return float(est)


def random_bump_values(grid: GridDomain, rng: np.random.Generator, count: int,
                       n_bumps: int = 3, amplitude: float = 1.0,
                       lipschitz_cap: float = np.inf, widths=(0.1, 0.4)) -> np.ndarray:
    """Random smooth Gaussian-bump combinations as node-value rows ``(count, M)``.

    Coordinates are rescaled to the unit box.  Each finite-action slice gets
    independent bumps.  Each row is normalised to unit sup norm, scaled by a
    uniform draw from ``[0, amplitude]`` and shrunk further if its Lipschitz
    upper bound exceeds ``lipschitz_cap``.
    """
    t, s, a, _ = grid.node_points()
    x = grid.cont_coords(t, s, a)
    lo = np.array([ax[0] for ax in grid.cont_axes])
    span = np.array([ax[-1] - ax[0] if len(ax) > 1 else 1.0 for ax in grid.cont_axes])
    xu = (x - lo) / span
    k = max(grid.n_actions, 1)
    d = xu.shape[1]
    centers = rng.random((count, n_bumps, k, d))
    width = rng.uniform(widths[0], widths[1], (count, n_bumps, k, 1))
    coef = rng.standard_normal((count, n_bumps, k))
    scale = rng.random(count) * amplitude
    # xu rows are nodes; finite action slice j owns rows with index % k == j
    node_action = np.arange(grid.size) % k
    out = np.zeros((count, grid.size))
    for b in range(n_bumps):
        c = centers[:, b][:, node_action, :]        # (count, M, d)
        w = width[:, b][:, node_action, :]
        r2 = (((xu[None] - c) / w) ** 2).sum(axis=2)
        out += coef[:, b][:, node_action] * np.exp(-r2)
    peak = np.abs(out).max(axis=1)
    out *= (scale / np.where(peak > 0, peak, 1.0))[:, None]
    if np.isfinite(lipschitz_cap):
        _, upper = lipschitz_bounds(grid, out)
        shrink = np.where(upper > lipschitz_cap, lipschitz_cap / np.maximum(upper, 1e-300), 1.0)
        out *= shrink[:, None]
    return out


# ---------------------------------------------------------------------------
# serialization

def _fmt(x: float) -> str:
    return repr(float(x))


def save_grid_function(f: GridFunction, path, metadata: Optional[dict] = None) -> tuple:
    """Write ``f`` as ``<path>.csv`` plus a ``<path>.json`` metadata sidecar.

    One CSV row per node in storage order: coordinates, action label (finite
    action sets only) and value.  Output is byte-stable for equal inputs.
    """
    path = Path(path)
    csv_path = path.with_suffix(".csv")
    json_path = path.with_suffix(".json")
    dom = f.domain
    t, s, a, idx = dom.node_points()
    x = dom.cont_coords(t, s, a)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = list(dom.axis_names) + (["action"] if dom.actions is not None else []) + ["value"]
    w.writerow(header)
    for j in range(dom.size):
        row = [_fmt(c) for c in x[j]]
        if dom.actions is not None:
            row.append(dom.action_labels[idx[j]])
        row.append(_fmt(f.values[j]))
        w.writerow(row)
    csv_path.write_text(buf.getvalue())
    meta = {"format": "grid-function/1", "grid": dom.to_dict(),
            "values_sha256": hashlib.sha256(f.values.astype("<f8").tobytes()).hexdigest()}
    if metadata:
        meta["metadata"] = metadata
    json_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return csv_path, json_path


def load_grid_function(path) -> GridFunction:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    dom = GridDomain.from_dict(meta["grid"])
    with open(path.with_suffix(".csv"), newline="") as fh:
        rows = list(csv.reader(fh))
    if rows[0][-1] != "value":
        raise GridError("CSV must end with a 'value' column")
    vals = np.array([float(r[-1]) for r in rows[1:]])
    f = GridFunction(dom, vals)
    digest = hashlib.sha256(f.values.astype("<f8").tobytes()).hexdigest()
    if digest != meta.get("values_sha256", digest):
        raise GridError("value checksum mismatch")
    return f
