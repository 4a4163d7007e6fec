"""Monte-Carlo Feynman-Kac estimates of the FPE solution."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import LengthMismatch, NonFiniteTarget
from .models import FlowKacSde
from .paths import BrownianBundle, PathSet, TimeGrid, integrate
from .sensitivity import SensitivityBundle, taylor_values

# states held in memory per chunk of start points (entries of S * n_W * d)
CHUNK_ENTRIES = 2_000_000


@dataclass(frozen=True)
class FkTargets:
    x: np.ndarray  # (n, d)
    t: np.ndarray  # (n,)
    values: np.ndarray  # (n,)
    n_W: int
    estimator_variance: np.ndarray  # (n,)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("FLOWKAC_THREADS", "1")))
    except ValueError:
        return 1


def _map_chunks(fn, chunks):
    n = worker_count()
    if n == 1 or len(chunks) == 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, chunks))


def _weights(fk: FlowKacSde, t: np.ndarray, logw: np.ndarray | None) -> np.ndarray:
    if logw is not None:
        return np.exp(logw)
    return np.exp(-fk.q_value * np.asarray(t, dtype=float))


def _mean_var(samples: np.ndarray, axis: int):
    n = samples.shape[axis]
    mean = samples.mean(axis=axis)
    var = samples.var(axis=axis, ddof=1) / n if n > 1 else np.zeros_like(mean)
    if not np.all(np.isfinite(mean)):
        raise NonFiniteTarget("Feynman-Kac estimate overflowed")
    return mean, var


def _query_positions(grid: TimeGrid, times) -> np.ndarray:
    times = np.atleast_1d(np.asarray(times, dtype=float))
    qt = grid.query_times
    pos = np.abs(times[:, None] - qt[None, :]).argmin(axis=1)
    tol = 0.5 * grid.dt + 1e-12
    if np.any(np.abs(qt[pos] - times) > tol):
        bad = times[np.abs(qt[pos] - times) > tol]
        raise LengthMismatch(f"times {bad.tolist()} are not query nodes of the grid")
    return pos


def fk_density(
    fk: FlowKacSde, paths: PathSet, grid: TimeGrid, query_times=None, return_variance=False
):
    """Empirical mean of exp(-int q) psi(X~_t) over the paths, per query time."""
    if query_times is None:
        query_times = paths.times
    pos = _query_positions(grid, query_times)
    out, var = np.empty(len(pos)), np.empty(len(pos))
    for k, j in enumerate(pos):
        psi = fk.psi(paths.values[:, j, :])
        lw = None if paths.log_weight is None else paths.log_weight[:, j]
        if lw is None and fk.q_value is None:
            raise LengthMismatch("paths carry no q-integral but q is not constant")
        samples = psi * _weights(fk, grid.query_times[j], lw)
        mean, v = _mean_var(samples[None], axis=1)
        out[k], var[k] = mean[0], v[0]
    return (out, var) if return_variance else out


def _psi_mean(fk: FlowKacSde, states: np.ndarray, t, logw=None):
    """states (..., W, d) -> (mean, var) over the W axis."""
    shape = states.shape
    psi = fk.psi(states.reshape(-1, shape[-1])).reshape(shape[:-1])
    samples = psi * _weights(fk, t, logw)
    return _mean_var(samples, axis=-1)


def fk_grid_targets(
    fk: FlowKacSde,
    x: np.ndarray,
    bundle: BrownianBundle,
    grid: TimeGrid,
    sens: SensitivityBundle | None = None,
):
    """Targets on the product of start points ``x`` (n, d) and all grid query times.

    Returns ``(values, variance)`` each shaped ``(n, n_query)``. Without
    ``sens`` every start is simulated directly (streamed, paths never stored);
    with ``sens`` the paths come from the Taylor expansion.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n, d = x.shape
    nq = len(grid.query_times)
    W = bundle.n_W
    chunk = max(1, CHUNK_ENTRIES // (W * d * (nq if sens is not None else 1)))
    chunks = [slice(i, min(n, i + chunk)) for i in range(0, n, chunk)]

    if sens is not None:
        _require_constant_q(fk)

        def run(sl):
            states = taylor_values(sens, x[sl])  # (c, W, nq, d)
            states = states.transpose(0, 2, 1, 3)  # (c, nq, W, d)
            return _psi_mean(fk, states, grid.query_times[None, :, None])

    else:

        def run(sl):
            c = sl.stop - sl.start
            vals, var = np.empty((c, nq)), np.empty((c, nq))

            def on_query(j, state, lw):
                vals[:, j], var[:, j] = _psi_mean(fk, state, grid.query_times[j], lw)

            integrate(fk, x[sl], bundle, grid, on_query)
            return vals, var

    parts = _map_chunks(run, chunks)
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def _require_constant_q(fk: FlowKacSde):
    if fk.q_value is None:
        raise NotImplementedError(
            "Taylor-reconstructed paths carry no q-integral; use direct simulation"
        )


def fk_targets_batch(
    fk: FlowKacSde,
    batch,
    sens: SensitivityBundle | None,
    bundle: BrownianBundle,
    grid: TimeGrid,
) -> FkTargets:
    """Targets for arbitrary (x, t) pairs; ``t`` must sit on grid query nodes."""
    x, t = batch
    x = np.atleast_2d(np.asarray(x, dtype=float))
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if len(x) != len(t):
        raise LengthMismatch("batch x and t differ in length")
    qpos = _query_positions(grid, t)
    W = bundle.n_W
    n = len(x)
    values, var = np.empty(n), np.empty(n)

    if sens is not None:
        _require_constant_q(fk)
        if not np.allclose(sens.query_times, grid.query_times):
            raise LengthMismatch("sensitivity bundle was propagated on different query times")
        chunk = max(1, CHUNK_ENTRIES // (W * fk.d))
        for i in range(0, n, chunk):
            sl = slice(i, min(n, i + chunk))
            states = taylor_values(sens, x[sl], qpos[sl])  # (c, W, d)
            values[sl], var[sl] = _psi_mean(fk, states, grid.query_times[qpos[sl]][:, None])
    else:
        uniq, inverse = np.unique(x, axis=0, return_inverse=True)
        inverse = np.asarray(inverse).reshape(-1)
        gv, gvar = fk_grid_targets(fk, uniq, bundle, grid)
        values[:] = gv[inverse, qpos]
        var[:] = gvar[inverse, qpos]
    return FkTargets(x=x, t=grid.query_times[qpos], values=values, n_W=W, estimator_variance=var)
