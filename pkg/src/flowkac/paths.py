"""Fixed-realization Brownian increments and Euler-Maruyama integration."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .errors import LengthMismatch, NonFinitePath
from .models import FlowKacSde

BLOCK_STEPS = 256
MEMORY_BUDGET_BYTES = 2 * 1024**3
POSITIVE_FLOOR = 1e-12


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    t1: float
    n_steps: int
    query_times: np.ndarray
    query_steps: np.ndarray
    snap_distance: float

    @property
    def dt(self) -> float:
        return (self.t1 - self.t0) / self.n_steps

    @classmethod
    def build(cls, t0: float, t1: float, n_steps: int, query_times=None) -> "TimeGrid":
        if n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if t1 <= t0:
            raise ValueError("t1 must exceed t0")
        dt = (t1 - t0) / n_steps
        q = np.atleast_1d(np.asarray(query_times if query_times is not None else [t0, t1], float))
        steps = np.clip(np.rint((q - t0) / dt).astype(np.int64), 0, n_steps)
        snapped = t0 + steps * dt
        dist = float(np.max(np.abs(snapped - q))) if q.size else 0.0
        return cls(float(t0), float(t1), int(n_steps), snapped, steps, dist)

    @classmethod
    def from_dt(cls, t1: float, dt: float, query_times=None, t0: float = 0.0) -> "TimeGrid":
        return cls.build(t0, t1, max(1, int(round((t1 - t0) / dt))), query_times)

    def with_queries(self, query_times) -> "TimeGrid":
        return TimeGrid.build(self.t0, self.t1, self.n_steps, query_times)

    @property
    def last_step(self) -> int:
        return int(self.query_steps.max()) if self.query_steps.size else 0

    def same_nodes(self, other: "TimeGrid") -> bool:
        return (self.t0, self.t1, self.n_steps) == (other.t0, other.t1, other.n_steps)


@dataclass(frozen=True)
class BrownianBundle:
    """Brownian increments regenerated deterministically from ``seed``.

    Increments come in blocks of ``BLOCK_STEPS`` steps, each drawn from its own
    PCG64 stream keyed by ``(seed, block)``, so a block can be regenerated on
    demand without replaying the earlier ones.
    """

    seed: int
    n_W: int
    m: int
    grid: TimeGrid
    _stored: np.ndarray | None = field(default=None, repr=False, compare=False)

    def _block(self, b: int) -> np.ndarray:
        lo = b * BLOCK_STEPS
        hi = min(self.grid.n_steps, lo + BLOCK_STEPS)
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, b])))
        return rng.standard_normal((self.n_W, hi - lo, self.m)) * math.sqrt(self.grid.dt)

    def iter_blocks(self, stop_step: int | None = None) -> Iterator[tuple[int, np.ndarray]]:
        """Yield ``(first_step, increments[n_W, steps, m])`` up to ``stop_step``."""
        stop = self.grid.n_steps if stop_step is None else stop_step
        n_blocks = -(-stop // BLOCK_STEPS)
        for b in range(n_blocks):
            lo = b * BLOCK_STEPS
            if self._stored is not None:
                blk = self._stored[:, lo : min(lo + BLOCK_STEPS, self.grid.n_steps)]
            else:
                blk = self._block(b)
            yield lo, blk[:, : stop - lo]

    @property
    def increments(self) -> np.ndarray:
        if self._stored is not None:
            return self._stored
        return np.concatenate([blk for _, blk in self.iter_blocks()], axis=1)

    @property
    def nbytes(self) -> int:
        return self.n_W * self.grid.n_steps * self.m * 8


def make_brownian(seed: int, n_W: int, m: int, grid: TimeGrid) -> BrownianBundle:
    if n_W < 1 or m < 1:
        raise ValueError("n_W and m must be >= 1")
    bundle = BrownianBundle(int(seed), int(n_W), int(m), grid)
    if bundle.nbytes <= MEMORY_BUDGET_BYTES:
        stored = bundle.increments
        stored.setflags(write=False)
        bundle = BrownianBundle(int(seed), int(n_W), int(m), grid, stored)
    return bundle


@dataclass(frozen=True)
class PathSet:
    start: np.ndarray
    values: np.ndarray  # (n_W, n_query, d)
    times: np.ndarray
    seed: int
    log_weight: np.ndarray | None = None  # -int_0^t q ds, (n_W, n_query); None when q is constant
    reconstructed: bool = False


def _check_finite(x: np.ndarray, step: int):
    if not np.all(np.isfinite(x)):
        raise NonFinitePath(step)


def integrate(
    fk: FlowKacSde,
    starts: np.ndarray,
    bundle: BrownianBundle,
    grid: TimeGrid,
    on_query: Callable[[int, np.ndarray, np.ndarray | None], None],
    track_q: bool | None = None,
) -> None:
    """Euler-Maruyama from every start under the shared bundle.

    ``starts`` is ``(S, d)``; the running state is ``(S, n_W, d)``. Whenever
    the step counter hits a query node, ``on_query(query_position, state,
    log_weight)`` is called (once per query position, in grid order).
    """
    if bundle.m != fk.m:
        raise LengthMismatch(f"bundle has m={bundle.m} but the SDE has m={fk.m}")
    if not bundle.grid.same_nodes(grid):
        raise LengthMismatch("bundle and grid disagree on the time discretization")
    starts = np.asarray(starts, dtype=float)
    if not np.all(np.isfinite(starts)):
        raise NonFinitePath(0, "non-finite start point")
    S, d = starts.shape
    W = bundle.n_W
    dt = grid.dt
    if track_q is None:
        track_q = fk.q_value is None
    positive = fk.base.positive
    const_sigma = fk.base.constant_diffusion
    sig_const = fk.diffusion(starts[:1], grid.t0)[0] if const_sigma else None

    order = np.argsort(grid.query_steps, kind="stable")
    q_steps = grid.query_steps[order]
    qi = 0

    x = np.repeat(starts[:, None, :], W, axis=1)
    flat = x.reshape(S * W, d)
    logw = np.zeros((S, W)) if track_q else None
    q_prev = fk.q(flat, grid.t0).reshape(S, W) if track_q else None

    def emit(step):
        nonlocal qi
        while qi < len(q_steps) and q_steps[qi] == step:
            if step > 0:
                _check_finite(x, step)
            on_query(int(order[qi]), x, logw)
            qi += 1

    emit(0)
    stop = int(q_steps[-1]) if len(q_steps) else 0
    for first, blk in bundle.iter_blocks(stop):
        for k in range(blk.shape[1]):
            step = first + k
            t = grid.t0 + step * dt
            dw = blk[:, k, :]  # (W, m)
            drift = fk.drift_tilde(flat, t)
            if const_sigma:
                noise = np.broadcast_to(dw @ sig_const.T, (S, W, d)).reshape(S * W, d)
            else:
                s = fk.diffusion(flat, t).reshape(S, W, d, -1)
                noise = np.einsum("swil,wl->swi", s, dw).reshape(S * W, d)
            flat += drift * dt
            flat += noise
            if positive:
                np.maximum(flat, POSITIVE_FLOOR, out=flat)
            if track_q:
                q_new = fk.q(flat, t + dt).reshape(S, W)
                logw -= 0.5 * dt * (q_prev + q_new)
                q_prev = q_new
            if step % 128 == 127:
                _check_finite(flat, step + 1)
            emit(step + 1)


def simulate_starts(fk: FlowKacSde, starts: np.ndarray, bundle: BrownianBundle, grid: TimeGrid):
    """Values ``(S, n_W, n_query, d)`` and log-weights (or None) for many starts."""
    starts = np.atleast_2d(np.asarray(starts, dtype=float))
    S, d = starts.shape
    nq = len(grid.query_times)
    vals = np.empty((S, bundle.n_W, nq, d))
    track = fk.q_value is None
    logw = np.zeros((S, bundle.n_W, nq)) if track else None

    def on_query(j, state, lw):
        vals[:, :, j, :] = state
        if track:
            logw[:, :, j] = lw

    integrate(fk, starts, bundle, grid, on_query)
    return vals, logw


def euler_maruyama(fk: FlowKacSde, x0, bundle: BrownianBundle, grid: TimeGrid) -> PathSet:
    x0 = np.asarray(x0, dtype=float).reshape(1, fk.d)
    vals, logw = simulate_starts(fk, x0, bundle, grid)
    return PathSet(
        start=x0[0].copy(),
        values=vals[0],
        times=grid.query_times.copy(),
        seed=bundle.seed,
        log_weight=None if logw is None else logw[0],
    )


def dump_pathset_csv(paths: PathSet, path) -> None:
    """Debug dump: one row per (path, query time)."""
    d = paths.values.shape[-1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path_id", "time"] + [f"x_{i + 1}" for i in range(d)])
        for p in range(paths.values.shape[0]):
            for j, t in enumerate(paths.times):
                w.writerow([p, repr(float(t))] + [repr(float(v)) for v in paths.values[p, j]])
