"""Neural operator blocks ``F̃ = decode ∘ N_θ ∘ encode`` approximating 𝓙 = 𝓑 - I.

``N_θ`` is a fully connected network on node-value vectors written directly
in numpy: hidden layers with a pointwise activation, a linear skip path from
input to output pre-activation, and a bounded output ``y = B_y tanh(p / B_y)``
so that every output component satisfies ``|y_j| < B_y`` for every input.

Training pairs ``(encode(Q), encode(𝓙Q))`` are drawn from a
:class:`FunctionFamily`.  The curriculum generator mixes value-iteration
iterates of the problem with smooth random perturbations of them, which is
the set of inputs a residual stack actually visits; the bump generator
produces generic smooth functions.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .bellman_engine import bellman_at_points, get_operator, value_iterate
from .grid_space import (GridDomain, GridFunction, _dense_points, _split, decode,
                         estimate_lipschitz, lipschitz_bounds, random_bump_values)
from .mdp_model import MdpSpec, discount_factor
from .trajectory import SimConfig

__all__ = [
    "FunctionFamily",
    "OperatorBlock",
    "TrainConfig",
    "RejectionBudgetExceeded",
    "TrainingDiverged",
    "ShapeMismatch",
    "GridMismatch",
    "LfStarReport",
    "ErrorDecomposition",
    "sample_values",
    "sample_target_family",
    "default_output_bound",
    "forward",
    "grad_check",
    "train_block",
    "evaluate_block",
    "measure_lfstar",
    "apply_block",
    "error_decomposition",
    "save_block",
    "load_block",
]

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


class RejectionBudgetExceeded(RuntimeError):
    pass


class TrainingDiverged(FloatingPointError):
    pass


class ShapeMismatch(ValueError):
    pass


class GridMismatch(ValueError):
    pass


# ---------------------------------------------------------------------------
# function families

@dataclass(frozen=True, eq=False)
class FunctionFamily:
    """Random functions inside ``K_target = {sup <= M̂, Lip <= L̂}`` on a grid.

    Parameters
    ----------
    grid : GridDomain
    amplitude_cap, lipschitz_cap : float
        ``M̂`` and ``L̂``.  Samples violating either are rejected; the
        Lipschitz test uses the upper bound of
        :func:`~bellman_resnet.grid_space.lipschitz_bounds`.
    generator : {"curriculum", "bumps"}
        ``"bumps"`` draws sums of ``n_bumps`` Gaussian bumps with a uniform
        amplitude in ``[0, M̂]``.  ``"curriculum"`` picks a value-iteration
        iterate ``Q^(k)`` of ``spec`` (``k`` uniform below ``n_anchors``, plus
        an extra third of draws with ``k < early_anchors``) and adds a bump
        perturbation of sup norm uniform in ``[0, tube]``; a fraction
        ``unperturbed`` of draws is left unperturbed.
    """

    grid: GridDomain
    amplitude_cap: float
    lipschitz_cap: float
    generator: str = "curriculum"
    spec: Optional[MdpSpec] = None
    cfg: Optional[SimConfig] = None
    n_bumps: int = 3
    tube: float = 0.05
    n_anchors: int = 45
    early_anchors: int = 6
    unperturbed: float = 0.15
    seed: int = 0
    max_draw_factor: int = 50

    def __post_init__(self):
        if self.generator not in ("curriculum", "bumps"):
            raise ValueError(f"unknown generator {self.generator!r}")
        if self.amplitude_cap < 0 or self.lipschitz_cap < 0:
            raise ValueError("caps must be >= 0")
        if self.generator == "curriculum" and self.spec is None:
            raise ValueError("the curriculum generator needs a spec")
        object.__setattr__(self, "_anchors", None)

    def anchors(self) -> np.ndarray:
        """Value-iteration iterates ``Q^(0..n_anchors-1)`` from ``Q^(0) = 0``, ``(K, M)``."""
        if self._anchors is None:
            q0 = decode(np.zeros(self.grid.size), self.grid)
            if self.n_anchors <= 1:
                vals = q0.values[None]
            else:
                tr = value_iterate(self.spec, q0, self.n_anchors - 1, 1e-300, self.cfg,
                                   lipschitz_pairs=1)
                vals = np.array([q.values for q in tr.iterates])
            vals.setflags(write=False)
            object.__setattr__(self, "_anchors", vals)
        return self._anchors

    def describe(self) -> dict:
        d = {k: getattr(self, k) for k in ("generator", "amplitude_cap", "lipschitz_cap", "n_bumps",
                                           "tube", "n_anchors", "early_anchors", "unperturbed", "seed")}
        d["grid_checksum"] = self.grid.checksum
        return d


def _raw_draw(family: FunctionFamily, n: int, rng: np.random.Generator) -> np.ndarray:
    g = family.grid
    if family.generator == "bumps":
        return random_bump_values(g, rng, n, family.n_bumps, amplitude=family.amplitude_cap)
    anchors = family.anchors()
    n_extra = n // 4
    k = np.concatenate([rng.integers(0, len(anchors), n - n_extra),
                        rng.integers(0, min(family.early_anchors, len(anchors)), n_extra)])
    pert = random_bump_values(g, rng, n, family.n_bumps, amplitude=family.tube)
    pert[rng.random(n) < family.unperturbed] = 0.0
    return anchors[k] + pert


def _inside(family: FunctionFamily, vals: np.ndarray) -> np.ndarray:
    sup = np.abs(vals).max(axis=1)
    _, lip = lipschitz_bounds(family.grid, vals)
    return (sup <= family.amplitude_cap) & (lip <= family.lipschitz_cap)


def sample_values(family: FunctionFamily, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` node-value rows from ``family``, all verified inside the caps."""
    out = np.empty((0, family.grid.size))
    drawn = 0
    budget = family.max_draw_factor * count + 64
    while len(out) < count:
        need = count - len(out)
        batch = _raw_draw(family, max(need, 16), rng)
        drawn += len(batch)
        out = np.concatenate([out, batch[_inside(family, batch)][:need]])
        if len(out) < count and drawn >= budget:
            raise RejectionBudgetExceeded(
                f"only {len(out)} of {count} draws satisfied sup <= {family.amplitude_cap} "
                f"and Lip <= {family.lipschitz_cap} after {drawn} attempts")
    return out


def sample_target_family(family: FunctionFamily, count: int, seed: Optional[int] = None,
                         include_anchors: bool = False) -> list:
    """``count`` grid functions from ``family`` (seeded by ``family.seed`` unless given).

    With ``include_anchors`` the list starts with the unperturbed curriculum
    anchors ``Q^(0), Q^(1), ...`` that lie inside the caps.
    """
    rng = np.random.default_rng(family.seed if seed is None else seed)
    rows = []
    if include_anchors and family.generator == "curriculum":
        a = family.anchors()
        rows = list(a[_inside(family, a)][:count])
    if count > len(rows):
        rows.extend(sample_values(family, count - len(rows), rng))
    return [decode(r, family.grid) for r in rows]


# ---------------------------------------------------------------------------
# network

_ACT = {
    "relu": (lambda z: np.maximum(z, 0.0), lambda z, a: (z > 0).astype(float)),
    "tanh": (np.tanh, lambda z, a: 1.0 - a * a),
    "identity": (lambda z: z, lambda z, a: np.ones_like(z)),
}


def default_output_bound(family_amplitude: float, beta: float) -> float:
    """``B_y = 2 (1 + β) M̂``: twice the largest possible ``sup|𝓙Q|`` on ``K_target``."""
    return 2.0 * (1.0 + beta) * family_amplitude


class OperatorBlock:
    """``N_θ: R^M -> R^M`` with metadata tying it to a grid.

    Parameters
    ----------
    sizes : sequence of int
        Layer widths ``[M, h_1, ..., M]``.
    bound : float
        ``B_y``; ignored when ``output="identity"``.
    activation : {"relu", "tanh", "identity"}
        Hidden-layer activation.
    output : {"tanh", "identity"}
        ``"tanh"`` gives ``y = B_y tanh(p / B_y)``.  ``"identity"`` drops the
        output bound and exists for gradient tests of purely linear networks.
    skip : bool
        Add a linear map of the input to the output pre-activation.
    """

    def __init__(self, sizes: Sequence[int], bound: float, activation: str = "relu",
                 output: str = "tanh", skip: bool = True, grid_checksum: str = "",
                 params: Optional[list] = None, seed: int = 0, metadata: Optional[dict] = None):
        if activation not in _ACT or output not in ("tanh", "identity"):
            raise ValueError("unknown activation")
        if sizes[0] != sizes[-1] or len(sizes) < 2:
            raise ValueError("sizes must start and end with M")
        if output == "tanh" and not bound > 0:
            raise ValueError("bound must be > 0")
        self.sizes = [int(x) for x in sizes]
        self.bound = float(bound)
        self.activation = activation
        self.output = output
        self.skip = bool(skip)
        self.grid_checksum = grid_checksum
        self.seed = seed
        self.metadata = dict(metadata or {})
        if params is None:
            params = self._init(np.random.default_rng([seed, 0]))
        self.params = [np.array(p, dtype=float) for p in params]
        if len(self.params) != self.n_params_arrays:
            raise ValueError("parameter list does not match the layer sizes")

    @property
    def M(self) -> int:
        return self.sizes[0]

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    @property
    def n_params_arrays(self) -> int:
        return 2 * self.n_layers + (1 if self.skip else 0)

    @property
    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params))

    def _init(self, rng):
        gain = 2.0 if self.activation == "relu" else 1.0
        ps = []
        for i in range(self.n_layers):
            fan_in, fan_out = self.sizes[i], self.sizes[i + 1]
            ps.append(rng.standard_normal((fan_in, fan_out)) * math.sqrt(gain / fan_in))
            ps.append(np.zeros(fan_out))
        if self.skip:
            ps.append(np.zeros((self.M, self.M)))
        return ps

    @classmethod
    def for_grid(cls, grid: GridDomain, bound: float, hidden: Optional[Sequence[int]] = None,
                 **kw) -> "OperatorBlock":
        M = grid.size
        hidden = list(hidden) if hidden is not None else [4 * M, 4 * M]
        return cls([M] + hidden + [M], bound, grid_checksum=grid.checksum, **kw)

    def zeroed(self) -> "OperatorBlock":
        return self.copy(params=[np.zeros_like(p) for p in self.params])

    def copy(self, **changes) -> "OperatorBlock":
        kw = dict(sizes=self.sizes, bound=self.bound, activation=self.activation,
                  output=self.output, skip=self.skip, grid_checksum=self.grid_checksum,
                  params=[p.copy() for p in self.params], seed=self.seed,
                  metadata=dict(self.metadata))
        kw.update(changes)
        return OperatorBlock(**kw)

    # -- forward / backward ------------------------------------------------
    def _forward(self, x: np.ndarray):
        act, _ = _ACT[self.activation]
        P = self.params
        h = x
        cache = [(None, x)]
        for i in range(self.n_layers):
            z = h @ P[2 * i] + P[2 * i + 1]
            if i < self.n_layers - 1:
                h = act(z)
                cache.append((z, h))
        if self.skip:
            z = z + x @ P[-1]
        if self.output == "tanh":
            y = self.bound * np.tanh(z / self.bound)
        else:
            y = z
        cache.append((z, y))
        return y, cache

    def forward(self, v) -> np.ndarray:
        x = np.asarray(v, dtype=float)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if x.shape[1] != self.M:
            raise ShapeMismatch(f"expected input length {self.M}, got {x.shape[1]}")
        y, _ = self._forward(x)
        return y[0] if single else y

    __call__ = forward

    def backward(self, x: np.ndarray, dy_fn) -> tuple:
        """Gradients of a loss with ``dL/dy = dy_fn(y)``; returns ``(grads, y)``."""
        _, dact = _ACT[self.activation]
        y, cache = self._forward(x)
        dy = dy_fn(y)
        z_out = cache[-1][0]
        if self.output == "tanh":
            dz = dy * (1.0 - np.tanh(z_out / self.bound) ** 2)
        else:
            dz = dy
        P = self.params
        G = [None] * len(P)
        if self.skip:
            G[-1] = x.T @ dz
        for i in reversed(range(self.n_layers)):
            h = cache[i][1]
            G[2 * i] = h.T @ dz
            G[2 * i + 1] = dz.sum(axis=0)
            if i > 0:
                z, a = cache[i]
                dz = (dz @ P[2 * i].T) * dact(z, a)
        return G, y

    def loss_and_grad(self, x: np.ndarray, target: np.ndarray):
        """``L = 0.5 * mean_batch sum_j (y_j - t_j)^2`` and its gradients."""
        n = len(x)
        G, y = self.backward(x, lambda y: (y - target) / n)
        return 0.5 * float(np.sum((y - target) ** 2)) / n, G


def forward(block: OperatorBlock, v) -> np.ndarray:
    return block.forward(v)


def grad_check(block: OperatorBlock, v, target, h_fd: float = 1e-5, n_params: int = 50,
               seed: int = 0, corrupt: bool = False) -> float:
    """Max relative error between backprop and central-difference gradients.

    ``n_params`` parameters are chosen at random (without replacement);
    relative error is ``|a - b| / max(|a|, |b|, 1e-7)``.  ``corrupt`` flips
    the sign of the backprop gradient, which the check must detect.
    """
    if not 1e-7 <= h_fd <= 1e-4:
        raise ValueError("h_fd must lie in [1e-7, 1e-4]")
    x = np.atleast_2d(np.asarray(v, dtype=float))
    t = np.atleast_2d(np.asarray(target, dtype=float))
    _, G = block.loss_and_grad(x, t)
    sizes = [p.size for p in block.params]
    total = sum(sizes)
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(max(n_params, 50), total), replace=False)
    offsets = np.cumsum([0] + sizes)
    worst = 0.0
    for flat in picks:
        j = int(np.searchsorted(offsets, flat, side="right") - 1)
        k = int(flat - offsets[j])
        p = block.params[j].reshape(-1)
        old = p[k]
        p[k] = old + h_fd
        lp, _ = block.loss_and_grad(x, t)
        p[k] = old - h_fd
        lm, _ = block.loss_and_grad(x, t)
        p[k] = old
        fd = (lp - lm) / (2 * h_fd)
        bp = G[j].reshape(-1)[k] * (-1.0 if corrupt else 1.0)
        rel = abs(fd - bp) / max(abs(fd), abs(bp), 1e-7)
        worst = max(worst, rel)
    return float(worst)


# ---------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters.

    Every epoch draws ``train_count`` fresh functions from the family and
    adds the ``hard_examples`` worst-fit functions of the previous epoch.
    ``optimizer="adam"`` uses a cosine-decayed step from ``learn_rate``;
    ``"sgd"`` uses a fixed step with heavy-ball ``momentum``.
    """

    epochs: int = 2500
    learn_rate: float = 1e-3
    batch_size: int = 256
    train_count: int = 4096
    test_count: int = 64
    hard_examples: int = 1024
    optimizer: str = "adam"
    momentum: float = 0.9
    hidden: Optional[tuple] = None
    activation: str = "relu"
    skip: bool = True
    seed: int = 0
    target_eps: Optional[float] = None
    log_every: int = 0

    def __post_init__(self):
        if self.train_count < 1 or self.test_count < 1:
            raise ValueError("train_count and test_count must be >= 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


def evaluate_block(block: OperatorBlock, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Per-function sup-norm error ``max_j |N(x)_j - y_j|``.

    On a common grid the node maximum equals ``sup|F̃(Q) - decode(𝓙Q)|``.
    """
    return np.abs(block.forward(X) - Y).max(axis=1)


def train_block(spec: MdpSpec, family: FunctionFamily, grid: GridDomain,
                config: TrainConfig = TrainConfig(), cfg: Optional[SimConfig] = None,
                test_set: Optional[np.ndarray] = None) -> OperatorBlock:
    """Fit a block to ``𝓙`` by mini-batch minimisation of the squared error.

    The held-out error ``test_eps`` (max over ``test_count`` family draws of
    the sup-norm error) and ``L_F*`` are written to ``block.metadata``
    together with ``status`` (``"target-met"`` / ``"target-not-met"`` when a
    ``target_eps`` is set).
    """
    if family.grid != grid:
        raise GridMismatch("family and training grid differ")
    op = get_operator(spec, grid, cfg)
    beta = discount_factor(spec)
    bound = default_output_bound(family.amplitude_cap, beta)
    if bound <= 0:
        bound = 1.0
    block = OperatorBlock.for_grid(grid, bound, hidden=config.hidden, activation=config.activation,
                                   skip=config.skip, seed=config.seed)
    data_rng = np.random.default_rng([config.seed, 1])
    shuffle_rng = np.random.default_rng([config.seed, 2])
    if test_set is None:
        test_set = sample_values(family, config.test_count, np.random.default_rng([config.seed, 3]))
    X_test = np.atleast_2d(test_set)
    Y_test = op.residual_values(X_test)

    P = block.params
    m1 = [np.zeros_like(p) for p in P]
    m2 = [np.zeros_like(p) for p in P]
    step = 0
    hard_X = np.empty((0, grid.size))
    hard_Y = np.empty((0, grid.size))
    history = []
    t0 = time.perf_counter()
    for ep in range(config.epochs):
        if config.optimizer == "adam":
            lr = config.learn_rate * 0.5 * (1.0 + math.cos(math.pi * ep / config.epochs))
        else:
            lr = config.learn_rate
        X = sample_values(family, config.train_count, data_rng)
        Y = op.residual_values(X)
        X = np.concatenate([X, hard_X])
        Y = np.concatenate([Y, hard_Y])
        perm = shuffle_rng.permutation(len(X))
        X, Y = X[perm], Y[perm]
        errs = np.empty(len(X))
        loss_sum = 0.0
        for i in range(0, len(X), config.batch_size):
            xb, yb = X[i:i + config.batch_size], Y[i:i + config.batch_size]
            n = len(xb)
            G, y = block.backward(xb, lambda y: 2.0 * (y - yb) / (n * grid.size))
            e = y - yb
            errs[i:i + n] = np.abs(e).max(axis=1)
            loss_sum += float(np.sum(e * e))
            step += 1
            for j in range(len(P)):
                if config.optimizer == "adam":
                    m1[j] = 0.9 * m1[j] + 0.1 * G[j]
                    m2[j] = 0.999 * m2[j] + 0.001 * G[j] ** 2
                    P[j] -= lr * (m1[j] / (1 - 0.9 ** step)) / (np.sqrt(m2[j] / (1 - 0.999 ** step)) + 1e-8)
                else:
                    m1[j] = config.momentum * m1[j] + G[j]
                    P[j] -= lr * m1[j]
        if not math.isfinite(loss_sum) or not all(np.all(np.isfinite(p)) for p in P):
            raise TrainingDiverged(f"non-finite loss at epoch {ep}")
        if config.hard_examples > 0:
            worst = np.argsort(errs, kind="stable")[::-1][:config.hard_examples]
            hard_X, hard_Y = X[worst], Y[worst]
        if config.log_every and (ep % config.log_every == 0 or ep == config.epochs - 1):
            te = float(evaluate_block(block, X_test, Y_test).max())
            history.append((ep, loss_sum / (len(X) * grid.size), te))
            log.info("epoch %d  mse %.3e  test sup %.3e  (%.0fs)", ep, history[-1][1], te,
                     time.perf_counter() - t0)

    test_err = evaluate_block(block, X_test, Y_test)
    block.metadata.update({
        "epochs": config.epochs,
        "train_config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(config).items()},
        "family": family.describe(),
        "test_eps": float(test_err.max()),
        "test_count": int(len(X_test)),
        "history": history,
    })
    lf = measure_lfstar(block, grid, X_test)
    block.metadata["lfstar"] = lf.measured
    block.metadata["lfstar_ceiling"] = lf.ceiling
    if config.target_eps is not None:
        block.metadata["target_eps"] = config.target_eps
        block.metadata["status"] = "target-met" if test_err.max() <= config.target_eps else "target-not-met"
    return block


# ---------------------------------------------------------------------------
# measurements

@dataclass(frozen=True)
class LfStarReport:
    measured: float
    ceiling: float
    per_function: tuple = field(repr=False)

    @property
    def ok(self) -> bool:
        return self.measured <= self.ceiling


def measure_lfstar(block: OperatorBlock, grid: GridDomain, inputs, n_pairs: int = 200,
                   seed: int = 0) -> LfStarReport:
    """Largest Lipschitz estimate of ``F̃(Q)`` over the given inputs.

    ``inputs`` is a :class:`FunctionFamily` (then ``n_pairs`` functions...)
    or an array / list of input functions.  The architectural ceiling is
    ``M B_y L_φ`` with ``L_φ = 1 / h_min``, the largest slope of a
    multilinear hat basis function.
    """
    if isinstance(inputs, FunctionFamily):
        vals = sample_values(inputs, n_pairs, np.random.default_rng(seed))
    elif isinstance(inputs, (list, tuple)) and inputs and isinstance(inputs[0], GridFunction):
        vals = np.array([q.values for q in inputs])
    else:
        vals = np.atleast_2d(np.asarray(inputs, dtype=float))
    if len(vals) < 1:
        raise ValueError("need at least one input function")
    out = block.forward(vals)
    per = [estimate_lipschitz(decode(o, grid), n_pairs, seed) for o in out]
    bound = block.bound if block.output == "tanh" else float(np.max(np.abs(out)))
    ceiling = grid.size * bound / grid.h_min
    return LfStarReport(float(max(per)), float(ceiling), tuple(per))


def apply_block(block: OperatorBlock, q: GridFunction) -> GridFunction:
    """``F̃(Q) = decode(N_θ(encode(Q)))``."""
    if block.grid_checksum and q.domain.checksum != block.grid_checksum:
        raise GridMismatch("block was built for a different grid")
    return decode(block.forward(q.values), q.domain)


@dataclass(frozen=True)
class ErrorDecomposition:
    """Split of ``sup|F̃(Q) - 𝓙Q|`` over ``K_Q``.

    ``network`` is the on-grid error ``max_j |N(E Q)_j - (𝓙Q)(p_j)|``,
    ``interpolation`` the representation error ``sup|D E(𝓙Q) - 𝓙Q|`` and
    ``total`` the direct measurement; ``total <= network + interpolation``.
    """

    network: float
    interpolation: float
    total: float


def error_decomposition(block: OperatorBlock, spec: MdpSpec, q: GridFunction,
                        cfg: Optional[SimConfig] = None, n_dense: int = 512,
                        seed: int = 0) -> ErrorDecomposition:
    grid = q.domain
    jq_nodes = get_operator(spec, grid, cfg).residual(q)
    out = apply_block(block, q)
    network = float(np.max(np.abs(out.values - jq_nodes.values)))
    x, idx = _dense_points(grid, n_dense, seed)
    t, s, a = _split(grid, x, idx)
    jq_dense = bellman_at_points(spec, q, t, s, a, cfg) - q.at(x, idx)
    interp = float(np.max(np.abs(jq_nodes.at(x, idx) - jq_dense)))
    total = max(network, float(np.max(np.abs(out.at(x, idx) - jq_dense))))
    return ErrorDecomposition(network, interp, total)


# ---------------------------------------------------------------------------
# persistence

def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def block_to_dict(block: OperatorBlock) -> dict:
    return {
        "format": "operator-block",
        "version": FORMAT_VERSION,
        "sizes": block.sizes,
        "bound": block.bound,
        "activation": block.activation,
        "output": block.output,
        "skip": block.skip,
        "grid_checksum": block.grid_checksum,
        "seed": block.seed,
        "metadata": _jsonable(block.metadata),
        "params": [{"shape": list(p.shape), "data": p.reshape(-1).tolist()} for p in block.params],
    }


def save_block(block: OperatorBlock, path) -> Path:
    """JSON file; floats are written with round-trip precision."""
    path = Path(path)
    path.write_text(json.dumps(block_to_dict(block), sort_keys=True) + "\n")
    return path


def load_block(path) -> OperatorBlock:
    d = json.loads(Path(path).read_text())
    if d.get("format") != "operator-block" or d.get("version") != FORMAT_VERSION:
        raise ValueError("not an operator block file of a supported version")
    params = [np.array(p["data"], dtype=float).reshape(p["shape"]) for p in d["params"]]
    return OperatorBlock(d["sizes"], d["bound"], activation=d["activation"], output=d["output"],
                         skip=d["skip"], grid_checksum=d["grid_checksum"], params=params,
                         seed=d["seed"], metadata=d["metadata"])
