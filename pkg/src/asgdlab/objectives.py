"""Local objectives, weighted global objectives and stochastic gradient oracles."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from . import rng


class Objective(Protocol):
    dim: int

    def value(self, x: np.ndarray) -> float: ...

    def grad(self, x: np.ndarray) -> np.ndarray: ...


class DivergedError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# quadratics


@dataclass
class QuadraticObjective:
    """``0.5 (x - c)^T H (x - c) + l^T x``."""

    hessian: np.ndarray
    center: np.ndarray
    linear: np.ndarray

    @property
    def dim(self) -> int:
        return self.center.size

    @property
    def smoothness(self) -> float:
        return float(np.linalg.norm(self.hessian, 2))

    def value(self, x):
        d = np.asarray(x, dtype=float) - self.center
        return float(0.5 * d @ self.hessian @ d + self.linear @ x)

    def grad(self, x):
        return self.hessian @ (np.asarray(x, dtype=float) - self.center) + self.linear


def quadratic(curvature, center=0.0, linear=None) -> QuadraticObjective:
    c = np.atleast_1d(np.asarray(center, dtype=float))
    curv = np.asarray(curvature, dtype=float)
    if curv.ndim == 0:
        H = curv * np.eye(c.size)
    elif curv.ndim == 2 and curv.shape[0] == curv.shape[1]:
        H = curv
        if c.size == 1 and H.shape[0] > 1:
            c = np.full(H.shape[0], c[0])
    else:
        raise ValueError("curvature must be a scalar or a square matrix")
    if H.shape[0] != c.size:
        raise ValueError("dimension mismatch between curvature and center")
    lin = np.zeros_like(c) if linear is None else np.atleast_1d(np.asarray(linear, dtype=float))
    if lin.size == 1 and c.size > 1:
        lin = np.full(c.size, lin[0])
    if lin.shape != c.shape:
        raise ValueError("dimension mismatch between linear term and center")
    if not np.allclose(H, H.T):
        raise ValueError("curvature must be symmetric")
    if np.linalg.eigvalsh(H).min() < -1e-12 * max(1.0, np.abs(H).max()):
        raise ValueError("curvature must be positive semidefinite")
    return QuadraticObjective(H, c, lin)


# ---------------------------------------------------------------------------
# suites


def _check_weights(weights, n: int, tol: float = 1e-9) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    if w.shape != (n,):
        raise ValueError(f"expected {n} weights, got shape {w.shape}")
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    if abs(w.sum() - 1.0) > tol:
        raise ValueError(f"weights must sum to 1, got {w.sum()!r}")
    return w


@dataclass
class WeightedObjective:
    locals: Sequence[Objective]
    weights: np.ndarray

    @property
    def dim(self) -> int:
        return self.locals[0].dim

    def value(self, x):
        return float(sum(w * f.value(x) for w, f in zip(self.weights, self.locals) if w != 0))

    def grad(self, x):
        g = np.zeros(self.dim)
        for w, f in zip(self.weights, self.locals):
            if w != 0:
                g += w * f.grad(x)
        return g


@dataclass
class ObjectiveSuite:
    locals: list
    weights: np.ndarray = None
    exact: bool = True  # whether ``locals[i].grad`` is cheap enough to serve as the exact local gradient

    def __post_init__(self):
        if not self.locals:
            raise ValueError("no workers")
        dims = {f.dim for f in self.locals}
        if len(dims) != 1:
            raise ValueError(f"dimension mismatch across local objectives: {sorted(dims)}")
        if self.weights is None:
            self.weights = np.full(self.n, 1.0 / self.n)
        self.weights = _check_weights(self.weights, self.n, tol=1e-12)

    @property
    def n(self) -> int:
        return len(self.locals)

    @property
    def dim(self) -> int:
        return self.locals[0].dim

    @property
    def is_quadratic(self) -> bool:
        return all(isinstance(f, QuadraticObjective) for f in self.locals)

    def local_grad(self, worker: int, x) -> np.ndarray:
        return self.locals[worker - 1].grad(x)

    def objective(self, weights=None) -> WeightedObjective:
        return weighted_objective(self, self.weights if weights is None else weights)


def quadratic_suite(specs, weights=None) -> ObjectiveSuite:
    """Build a suite from ``(curvature, center[, linear])`` tuples."""
    locals_ = []
    for spec in specs:
        if isinstance(spec, QuadraticObjective):
            locals_.append(spec)
            continue
        spec = tuple(spec)
        if not 2 <= len(spec) <= 3:
            raise ValueError("each spec is (curvature, center[, linear])")
        locals_.append(quadratic(*spec))
    return ObjectiveSuite(locals_, weights)


def weighted_objective(suite: ObjectiveSuite, weights) -> WeightedObjective:
    return WeightedObjective(suite.locals, _check_weights(weights, suite.n))


def weighted_minimizer(suite: ObjectiveSuite, weights=None) -> np.ndarray:
    """Closed-form minimizer of a weighted quadratic suite."""
    if not suite.is_quadratic:
        raise TypeError("closed-form minimizer needs a quadratic suite")
    w = suite.weights if weights is None else _check_weights(weights, suite.n)
    H = sum(wi * f.hessian for wi, f in zip(w, suite.locals))
    rhs = sum(wi * (f.hessian @ f.center - f.linear) for wi, f in zip(w, suite.locals))
    return np.linalg.solve(H, rhs)


# ---------------------------------------------------------------------------
# heterogeneity


@dataclass(frozen=True)
class HeterogeneityParams:
    zeta_sq: float
    rho_sq: float
    L: float
    L_max: float
    Delta: float

    def __post_init__(self):
        for name in ("zeta_sq", "rho_sq", "L", "L_max", "Delta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("zeta_sq", "rho_sq", "L", "L_max", "Delta")}


def quadratic_heterogeneity(suite: ObjectiveSuite, x0, weights=None) -> HeterogeneityParams:
    """Global constants for a quadratic suite with invertible averaged curvature.

    ``grad F_i(x) = H_i Hbar^{-1} grad F(x) + grad F_i(x*)`` gives the envelope
    with ``rho^2 = 2 max ||H_i Hbar^{-1}||^2`` and ``zeta^2 = 2 max ||grad F_i(x*)||^2``.
    """
    w = suite.weights if weights is None else _check_weights(weights, suite.n)
    F = weighted_objective(suite, w)
    H = sum(wi * f.hessian for wi, f in zip(w, suite.locals))
    Hinv = np.linalg.inv(H)
    xstar = weighted_minimizer(suite, w)
    rho_sq = 2.0 * max(np.linalg.norm(f.hessian @ Hinv, 2) ** 2 for f in suite.locals)
    zeta_sq = 2.0 * max(float(np.sum(f.grad(xstar) ** 2)) for f in suite.locals)
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    return HeterogeneityParams(
        zeta_sq=float(zeta_sq),
        rho_sq=float(rho_sq),
        L=float(np.linalg.norm(H, 2)),
        L_max=max(f.smoothness for f in suite.locals),
        Delta=max(0.0, F.value(x0) - F.value(xstar)),
    )


def estimate_heterogeneity(suite: ObjectiveSuite, probes, weights=None) -> HeterogeneityParams:
    """Empirical envelope ``||grad F_i||^2 <= zeta^2 + rho^2 ||grad F||^2`` over probe points.

    rho^2 is a least-squares slope over all (probe, worker) pairs, clipped at zero;
    zeta^2 is then the smallest offset covering every pair.  Smoothness is the
    largest observed gradient Lipschitz ratio, Delta the observed spread of F.
    Diagnostics only.
    """
    F = suite.objective(weights)
    probes = [np.atleast_1d(np.asarray(p, dtype=float)) for p in probes]
    gF = [F.grad(p) for p in probes]
    gl = [[f.grad(p) for f in suite.locals] for p in probes]
    u = np.array([gF[k] @ gF[k] for k in range(len(probes)) for _ in suite.locals])
    v = np.array([g @ g for row in gl for g in row])

    if u.size > 1 and np.ptp(u) > 1e-12 * max(1.0, u.max()):
        slope, _ = np.polyfit(u, v, 1)
        rho_sq = max(0.0, float(slope))
    else:
        rho_sq = 0.0
    zeta_sq = max(0.0, float(np.max(v - rho_sq * u)))

    def lipschitz(grads):
        best = 0.0
        for a in range(len(probes)):
            for b in range(a + 1, len(probes)):
                dx = np.linalg.norm(probes[a] - probes[b])
                if dx > 0:
                    best = max(best, float(np.linalg.norm(grads[a] - grads[b]) / dx))
        return best

    L = lipschitz(gF)
    L_max = max(lipschitz([row[i] for row in gl]) for i in range(suite.n))
    values = [F.value(p) for p in probes]
    return HeterogeneityParams(zeta_sq, rho_sq, L, L_max, float(values[0] - min(values)))


# ---------------------------------------------------------------------------
# two-layer MLP


@dataclass(frozen=True)
class MlpModel:
    n_in: int
    n_hidden: int
    n_out: int

    @property
    def sizes(self) -> tuple[int, int, int]:
        return (self.n_in, self.n_hidden, self.n_out)

    @property
    def n_params(self) -> int:
        return self.n_hidden * (self.n_in + 1) + self.n_out * (self.n_hidden + 1)

    def unpack(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {theta.shape}")
        h, i, o = self.n_hidden, self.n_in, self.n_out
        a = h * i
        W1 = theta[:a].reshape(h, i)
        b1 = theta[a : a + h]
        W2 = theta[a + h : a + h + o * h].reshape(o, h)
        b2 = theta[a + h + o * h :]
        return W1, b1, W2, b2

    def init(self, seed: int = 0) -> np.ndarray:
        g = rng.stream(seed, rng.INIT)
        W1 = g.uniform(-1, 1, (self.n_hidden, self.n_in)) / math.sqrt(self.n_in)
        W2 = g.uniform(-1, 1, (self.n_out, self.n_hidden)) / math.sqrt(self.n_hidden)
        return np.concatenate([W1.ravel(), np.zeros(self.n_hidden), W2.ravel(), np.zeros(self.n_out)])

    def logits(self, theta, X):
        W1, b1, W2, b2 = self.unpack(theta)
        return np.maximum(X @ W1.T + b1, 0.0) @ W2.T + b2

    def loss_and_grad(self, theta, X, y):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y)
        if len(y) == 0:
            raise ValueError("empty batch")
        W1, b1, W2, b2 = self.unpack(theta)
        pre = X @ W1.T + b1
        hid = np.maximum(pre, 0.0)
        z = hid @ W2.T + b2
        z = z - z.max(axis=1, keepdims=True)
        logsum = np.log(np.exp(z).sum(axis=1))
        m = len(y)
        loss = float(np.mean(logsum - z[np.arange(m), y]))

        dz = np.exp(z - logsum[:, None])
        dz[np.arange(m), y] -= 1.0
        dz /= m
        gW2 = dz.T @ hid
        gb2 = dz.sum(axis=0)
        dh = (dz @ W2) * (pre > 0)
        gW1 = dh.T @ X
        gb1 = dh.sum(axis=0)
        return loss, np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2])

    def loss(self, theta, X, y) -> float:
        return self.loss_and_grad(theta, X, y)[0]


def mlp_gradient(model: MlpModel, theta, shard, batch) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient over ``shard`` rows ``batch``."""
    batch = np.asarray(batch, dtype=int)
    if batch.size == 0:
        raise ValueError("empty batch")
    if batch.min() < 0 or batch.max() >= len(shard.labels):
        raise IndexError("batch indices outside shard")
    return model.loss_and_grad(theta, shard.features[batch], shard.labels[batch])


@dataclass
class MlpShardObjective:
    """Full-shard cross-entropy of one worker; supports minibatch gradients."""

    model: MlpModel
    shard: object

    @property
    def dim(self) -> int:
        return self.model.n_params

    @property
    def size(self) -> int:
        return len(self.shard.labels)

    def value(self, x):
        return self.model.loss(x, self.shard.features, self.shard.labels)

    def grad(self, x):
        return self.model.loss_and_grad(x, self.shard.features, self.shard.labels)[1]

    def minibatch_grad(self, x, batch):
        return mlp_gradient(self.model, x, self.shard, batch)[1]


def mlp_suite(model: MlpModel, shards) -> ObjectiveSuite:
    return ObjectiveSuite([MlpShardObjective(model, s) for s in shards], exact=False)


# ---------------------------------------------------------------------------
# gradient oracles


@dataclass(frozen=True)
class Exact:
    pass


@dataclass(frozen=True)
class AdditiveGaussian:
    """Isotropic noise with total variance exactly ``sigma_sq``."""

    sigma_sq: float

    def __post_init__(self):
        if self.sigma_sq < 0:
            raise ValueError("sigma_sq must be nonnegative")


@dataclass(frozen=True)
class Minibatch:
    batch_size: int

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


@dataclass
class GradientOracle:
    suite: ObjectiveSuite
    noise: object = field(default_factory=Exact)
    seed: int = 0

    @property
    def sigma_sq(self) -> float | None:
        if isinstance(self.noise, Exact):
            return 0.0
        if isinstance(self.noise, AdditiveGaussian):
            return self.noise.sigma_sq
        return None

    def sample(self, worker: int, x, index: int) -> np.ndarray:
        return sample_gradient(self, worker, x, index)


def sample_gradient(oracle: GradientOracle, worker: int, x, index: int) -> np.ndarray:
    """Stochastic gradient of worker ``worker`` (1-based) for its ``index``-th computation."""
    suite = oracle.suite
    if not 1 <= worker <= suite.n:
        raise IndexError(f"worker {worker} out of range 1..{suite.n}")
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise DivergedError("diverged iterate")
    f = suite.locals[worker - 1]
    noise = oracle.noise
    if isinstance(noise, Exact):
        return f.grad(x)
    if isinstance(noise, AdditiveGaussian):
        g = f.grad(x)
        if noise.sigma_sq == 0:
            return g
        scale = math.sqrt(noise.sigma_sq / g.size)
        return g + scale * rng.stream(oracle.seed, rng.GRADIENT, worker, index).standard_normal(g.size)
    if isinstance(noise, Minibatch):
        size = f.size
        b = min(noise.batch_size, size)
        batch = rng.stream(oracle.seed, rng.BATCH, worker, index).choice(size, b, replace=False)
        return f.minibatch_grad(x, batch)
    raise TypeError(f"unknown noise model {noise!r}")
