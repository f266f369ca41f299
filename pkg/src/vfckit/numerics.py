"""Numerical building blocks: quadrature rules, Newton's method, deduplication."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage

from .report import NEWTON_MAXIT, TOL


@lru_cache(maxsize=64)
def gauss_legendre(q: int) -> tuple:
    """Nodes and weights of the order-``q`` rule on [-1, 1]."""
    x, w = np.polynomial.legendre.leggauss(int(q))
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def gl_interval(a: float, b: float, q: int) -> tuple:
    x, w = gauss_legendre(q)
    half = 0.5 * (b - a)
    return a + half * (x + 1.0), half * w


def gl_box(lower, upper, q: int) -> tuple:
    """Tensor Gauss-Legendre rule on a box: (points (N, n), weights (N,))."""
    lower = np.atleast_1d(np.asarray(lower, dtype=float))
    upper = np.atleast_1d(np.asarray(upper, dtype=float))
    n = lower.size
    if n == 0:
        return np.zeros((1, 0)), np.ones(1)
    axes = [gl_interval(lower[i], upper[i], q) for i in range(n)]
    pts = np.stack(np.meshgrid(*[a[0] for a in axes], indexing="ij"), axis=-1).reshape(-1, n)
    wts = np.ones(1)
    for _, w in axes:
        wts = np.multiply.outer(wts, w)
    return pts, wts.reshape(-1)


def grid_points(lower, upper, per_dim: int, inset: float = 0.0) -> np.ndarray:
    """Uniform cell-centred grid (no points on the faces)."""
    lower = np.atleast_1d(np.asarray(lower, dtype=float))
    upper = np.atleast_1d(np.asarray(upper, dtype=float))
    n = lower.size
    if n == 0:
        return np.zeros((1, 0))
    axes = []
    for i in range(n):
        a, b = lower[i] + inset, upper[i] - inset
        axes.append(a + (np.arange(per_dim) + 0.5) * (b - a) / per_dim)
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)


def newton(F: Callable, J: Callable, seeds: np.ndarray, tol: float = TOL["newton"], maxit: int = NEWTON_MAXIT):
    """Vectorized Newton iteration on square systems.

    ``F`` maps (N, n) to (N, n) and ``J`` to (N, n, n).  Returns the final
    iterates and a boolean mask of seeds that converged (residual < tol).
    Singular Jacobians are handled with least squares steps.
    """
    y = np.array(seeds, dtype=float, copy=True)
    if y.size == 0:
        return y, np.zeros(len(y), dtype=bool)
    active = np.ones(len(y), dtype=bool)
    done = np.zeros(len(y), dtype=bool)
    for _ in range(maxit + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        f = F(y[idx])
        res = np.max(np.abs(f), axis=1) if f.shape[1] else np.zeros(idx.size)
        good = np.isfinite(res) & (res < tol)
        done[idx[good]] = True
        bad = ~np.isfinite(res) | (np.abs(y[idx]).max(axis=1, initial=0.0) > 1e6)
        active[idx[good | bad]] = False
        idx = idx[~(good | bad)]
        if idx.size == 0:
            break
        f = f[~(good | bad)]
        j = J(y[idx])
        with np.errstate(all="ignore"):
            try:
                step = np.linalg.solve(j, f[..., None])[..., 0]
            except np.linalg.LinAlgError:
                step = np.stack([np.linalg.lstsq(jj, ff, rcond=None)[0] for jj, ff in zip(j, f)])
        y[idx] = y[idx] - step
    # one final residual evaluation for iterates that hit the last step
    rest = np.flatnonzero(active & ~done)
    if rest.size:
        f = F(y[rest])
        res = np.max(np.abs(f), axis=1) if f.shape[1] else np.zeros(rest.size)
        done[rest[np.isfinite(res) & (res < tol)]] = True
    return y, done


def gauss_newton(F: Callable, J: Callable, seed: np.ndarray, tol: float = 1e-12, maxit: int = 60):
    """Least-squares Newton for a single (possibly non-square) system."""
    y = np.array(seed, dtype=float)
    for _ in range(maxit):
        f = F(y[None, :])[0]
        if np.max(np.abs(f), initial=0.0) < tol:
            return y, True
        j = J(y[None, :])[0]
        step = np.linalg.lstsq(j, f, rcond=None)[0]
        y = y - step
        if not np.all(np.isfinite(y)):
            return y, False
    f = F(y[None, :])[0]
    return y, bool(np.max(np.abs(f), initial=0.0) < tol * 10)


def cluster(points: np.ndarray, radius: float) -> np.ndarray:
    """Single-linkage cluster labels (0-based, ordered by first occurrence)."""
    points = np.atleast_2d(points)
    if len(points) == 0:
        return np.zeros(0, dtype=int)
    if len(points) == 1:
        return np.zeros(1, dtype=int)
    raw = fcluster(linkage(points, method="single"), t=radius, criterion="distance")
    order = {}
    return np.array([order.setdefault(r, len(order)) for r in raw])


def threads() -> int:
    try:
        return max(1, int(os.environ.get("VFCKIT_THREADS", "1")))
    except ValueError:
        return 1


def parallel_map(fn: Callable, items: Sequence) -> list:
    """Map preserving input order; VFCKIT_THREADS only changes scheduling."""
    items = list(items)
    k = min(threads(), len(items))
    if k <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=k) as ex:
        return list(ex.map(fn, items))


def sorted_rows(a: np.ndarray) -> np.ndarray:
    """Rows in lexicographic order, used before any order-sensitive reduction."""
    a = np.atleast_2d(a)
    if len(a) == 0:
        return a
    return a[np.lexsort(a.T[::-1])]


def project_to_zeros(F: Callable, J: Callable, seeds: np.ndarray, tol: float = 1e-11, maxit: int = 40):
    """Vectorized Gauss-Newton (minimum-norm steps) for underdetermined systems.

    Moves each seed onto {F = 0}; returns (points, converged mask).
    """
    y = np.array(seeds, dtype=float, copy=True)
    if y.size == 0:
        return y, np.zeros(len(y), dtype=bool)
    ok = np.zeros(len(y), dtype=bool)
    active = np.ones(len(y), dtype=bool)
    for _ in range(maxit):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        f = F(y[idx])
        if f.shape[1] == 0:
            ok[idx] = True
            break
        res = np.max(np.abs(f), axis=1)
        good = res < tol
        ok[idx[good]] = True
        bad = ~np.isfinite(res)
        active[idx[good | bad]] = False
        idx, f = idx[~(good | bad)], f[~(good | bad)]
        if idx.size == 0:
            break
        j = J(y[idx])
        with np.errstate(all="ignore"):
            step = (np.linalg.pinv(j) @ f[..., None])[..., 0]
        y[idx] -= step
    return y, ok
