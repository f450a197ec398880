"""Euler-Maruyama ensembles with order-independent random streams.

Every path ``p`` draws from its own counter-based stream: numpy's Philox
bit generator keyed by ``(seed, p)``. The stream is consumed in a fixed
layout (initial-state normals first, then the increments of step 0, 1, ...),
so the normal used at ``(path, step, component)`` depends only on those
indices and the seed. Normals come from raw 64-bit outputs through
Box-Muller::

    u = ((bits >> 11) + 0.5) / 2**53           # in (0, 1)
    z1, z2 = r cos(2 pi u2), r sin(2 pi u2),   r = sqrt(-2 log u1)

Ensembles are therefore bit-identical for any chunking or worker count.
"""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ._rows import rowwise_matvec
from .errors import DomainError, SimulationError
from .gaussian_bridge import GaussianState

__all__ = [
    "PathEnsemble",
    "TubeStats",
    "standard_normals",
    "simulate",
    "linear_drift",
    "oscillator_drift",
    "empirical_moments",
    "tube_stats",
    "write_tube_csv",
    "write_paths_csv",
]

log = logging.getLogger(__name__)

_TWO_POW_53 = float(2 ** 53)


def standard_normals(seed: int, path_index: int, count: int) -> np.ndarray:
    """First ``count`` standard normals of the stream keyed by ``(seed, path_index)``."""
    n_pairs = (count + 1) // 2
    bits = np.random.Philox(key=[int(seed), int(path_index)]).random_raw(2 * n_pairs)
    return _box_muller(bits.reshape(1, -1))[0, :count]


def _box_muller(bits):
    u = ((bits >> np.uint64(11)).astype(np.float64) + 0.5) / _TWO_POW_53
    u1, u2 = u[:, 0::2], u[:, 1::2]
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    z = np.empty(u.shape)
    z[:, 0::2] = r * np.cos(theta)
    z[:, 1::2] = r * np.sin(theta)
    return z


def _chunk_normals(seed, first, last, count):
    n_pairs = (count + 1) // 2
    bits = np.empty((last - first, 2 * n_pairs), dtype=np.uint64)
    for row, p in enumerate(range(first, last)):
        bits[row] = np.random.Philox(key=[int(seed), int(p)]).random_raw(2 * n_pairs)
    return _box_muller(bits)[:, :count]


@dataclass
class PathEnsemble:
    times: np.ndarray
    paths: np.ndarray  # (n_paths, len(times), dim)
    seed: int
    n_steps: int
    dt: float
    policy: str = ""

    @property
    def n_paths(self) -> int:
        return self.paths.shape[0]

    @property
    def dim(self) -> int:
        return self.paths.shape[2]


@dataclass
class TubeStats:
    times: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    k: float
    lo: np.ndarray
    hi: np.ndarray

    @property
    def half_width(self) -> np.ndarray:
        return self.k * self.std


def linear_drift(A, B=None, gain: Callable | np.ndarray | None = None, feedforward: Callable | None = None):
    """Drift ``(A - B K(t)) x + B v(t)`` for a linear system under linear feedback."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    Bm = None if B is None else np.asarray(B, dtype=float).reshape(n, -1)
    gain_fn = gain if callable(gain) else (lambda t, K=gain: K)

    def drift(t, X):
        out = rowwise_matvec(X, A)
        if Bm is not None and gain is not None:
            u = -rowwise_matvec(X, gain_fn(t))
            if feedforward is not None:
                u = u + feedforward(t)
            out += rowwise_matvec(u, Bm)
        return out

    return drift


def oscillator_drift(model, grad_potential: Callable | None = None, force: Callable | None = None):
    """Drift of ``dx = v dt, dv = (-beta v - V'(x)/m + force) dt``.

    ``grad_potential`` defaults to the quadratic ``kappa * x``; ``force(t, X)``
    returns the feedback force per path (shape ``(p,)`` or ``(p, 1)``).
    """
    grad = grad_potential or (lambda x: model.kappa * x)

    def drift(t, X):
        x, v = X[:, 0], X[:, 1]
        acc = -model.beta * v - grad(x) / model.m
        if force is not None:
            acc = acc + np.asarray(force(t, X)).reshape(-1)
        return np.stack([v, acc], axis=1)

    return drift


def _simulate_chunk(drift, G_const, diffusion, x0, chunk, seed, n_steps, dt, t0, record_every, dim, m):
    first, last = chunk
    count = dim + n_steps * m
    Z = _chunk_normals(seed, first, last, count)
    if isinstance(x0, GaussianState):
        L = np.linalg.cholesky(x0.covariance)
        X = x0.mean + rowwise_matvec(Z[:, :dim], L)
    else:
        X = np.broadcast_to(x0, (last - first, dim)).copy()
    noise = Z[:, dim:].reshape(last - first, n_steps, m)
    n_rec = n_steps // record_every + 1
    out = np.empty((last - first, n_rec, dim))
    out[:, 0] = X
    sqrt_dt = np.sqrt(dt)
    for k in range(n_steps):
        t = t0 + k * dt
        try:
            f = np.asarray(drift(t, X), dtype=float)
            G = G_const if diffusion is None else np.asarray(diffusion(t, X), dtype=float)
        except Exception as exc:
            raise SimulationError(f"policy evaluation failed at t={t:.6g} (step {k}, paths {first}..{last - 1}): {exc}") from exc
        if f.shape != X.shape:
            raise SimulationError(f"drift returned shape {f.shape} at t={t:.6g}, expected {X.shape}")
        dW = sqrt_dt * noise[:, k]
        if G.ndim == 2:
            inc = rowwise_matvec(dW, G)
        else:
            inc = np.einsum("pij,pj->pi", G, dW)
        X = X + f * dt + inc
        if not np.all(np.isfinite(X)):
            bad = first + int(np.flatnonzero(~np.all(np.isfinite(X), axis=1))[0])
            raise SimulationError(f"state left the finite range at t={t + dt:.6g}, path {bad}")
        if (k + 1) % record_every == 0:
            out[:, (k + 1) // record_every] = X
    return out


def simulate(
    drift: Callable,
    diffusion,
    x0,
    t_final: float,
    n_paths: int,
    n_steps: int,
    seed: int,
    *,
    t0: float = 0.0,
    record_every: int = 1,
    chunk_size: int = 4096,
    workers: int = 1,
    policy: str = "",
) -> PathEnsemble:
    """Euler-Maruyama ensemble of ``dX = drift(t, X) dt + G dW``.

    Parameters
    ----------
    drift : callable
        ``drift(t, X)`` with ``X`` of shape ``(p, d)``; returns ``(p, d)``.
    diffusion : array_like or callable
        Constant ``(d, m)`` matrix, or ``diffusion(t, X)`` returning ``(d, m)``
        or ``(p, d, m)``.
    x0 : GaussianState or array_like
        Initial law (sampled per path) or a fixed initial state.
    record_every : int
        Keep every ``record_every``-th state; must divide ``n_steps``.
    chunk_size, workers
        Paths are simulated in chunks, optionally on a thread pool. Neither
        affects the result.
    """
    if n_paths < 1 or n_steps < 1:
        raise DomainError("n_paths and n_steps must be >= 1")
    if record_every < 1 or n_steps % record_every:
        raise DomainError(f"record_every={record_every} must divide n_steps={n_steps}")
    if not t_final > t0:
        raise DomainError("t_final must exceed t0")
    if isinstance(x0, GaussianState):
        dim = x0.n
    else:
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        dim = x0.size
    if callable(diffusion):
        G0 = np.asarray(diffusion(t0, np.zeros((1, dim))), dtype=float)
        m = G0.shape[-1]
        G_const = None
    else:
        G_const = np.asarray(diffusion, dtype=float).reshape(dim, -1)
        m = G_const.shape[1]
        diffusion = None
    dt = (t_final - t0) / n_steps
    chunks = [(a, min(a + chunk_size, n_paths)) for a in range(0, n_paths, chunk_size)]
    args = (drift, G_const, diffusion, x0)
    rest = (seed, n_steps, dt, t0, record_every, dim, m)
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda c: _simulate_chunk(*args, c, *rest), chunks))
    else:
        parts = [_simulate_chunk(*args, c, *rest) for c in chunks]
    times = t0 + dt * np.arange(0, n_steps + 1, record_every)
    return PathEnsemble(times, np.concatenate(parts, axis=0), int(seed), int(n_steps), dt, policy)


def empirical_moments(ens: PathEnsemble) -> tuple[np.ndarray, np.ndarray]:
    """Per-time sample mean ``(T, d)`` and unbiased covariance ``(T, d, d)``."""
    if ens.n_paths < 2:
        raise DomainError("need at least two paths for a sample covariance")
    mean = ens.paths.mean(axis=0)
    dev = ens.paths - mean
    cov = np.einsum("pti,ptj->tij", dev, dev) / (ens.n_paths - 1)
    return mean, cov


def tube_stats(ens: PathEnsemble, k: float = 3.0) -> TubeStats:
    """Componentwise ``mean ± k * std`` band at every recorded time."""
    if not k > 0:
        raise DomainError("k must be positive")
    mean = ens.paths.mean(axis=0)
    std = ens.paths.std(axis=0, ddof=1) if ens.n_paths > 1 else np.zeros_like(mean)
    return TubeStats(ens.times, mean, std, float(k), mean - k * std, mean + k * std)


def write_tube_csv(path, tube: TubeStats) -> None:
    d = tube.mean.shape[1]
    header = ["t"] + [f"{name}_{i + 1}" for name in ("mean", "std", "lo", "hi") for i in range(d)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for j, t in enumerate(tube.times):
            row = [t, *tube.mean[j], *tube.std[j], *tube.lo[j], *tube.hi[j]]
            w.writerow([repr(float(v)) for v in row])


def write_paths_csv(path, ens: PathEnsemble, n_paths: int | None = None) -> None:
    n = ens.n_paths if n_paths is None else min(n_paths, ens.n_paths)
    if n > 100:
        raise DomainError("per-path export is limited to 100 paths")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "t"] + [f"x_{i + 1}" for i in range(ens.dim)])
        for p in range(n):
            for j, t in enumerate(ens.times):
                w.writerow([p, repr(float(t))] + [repr(float(v)) for v in ens.paths[p, j]])
