"""Path-wise Jacobians/Hessians of the discrete stochastic flow and Taylor reconstruction.

The Euler-Maruyama step ``x -> x + mu~(x) dt + sigma(x) dW`` is differentiated
exactly, so the propagated tensors are the derivatives of the *discrete* flow
map with respect to the start point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import HessianBudgetExceeded, LengthMismatch, MissingDerivative
from .models import FlowKacSde
from .paths import POSITIVE_FLOOR, BrownianBundle, PathSet, TimeGrid

HESSIAN_ENTRY_CAP = 10**8


@dataclass(frozen=True)
class SensitivityBundle:
    x_ref: np.ndarray
    base_paths: PathSet
    jac: np.ndarray  # (n_W, n_query, d, d)
    hess: np.ndarray | None  # (n_W, n_query, d, d, d)
    order: int

    @property
    def query_times(self) -> np.ndarray:
        return self.base_paths.times


def propagate(
    fk: FlowKacSde,
    x_ref,
    bundle: BrownianBundle,
    grid: TimeGrid,
    order: int = 1,
) -> SensitivityBundle:
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    if bundle.m != fk.m or not bundle.grid.same_nodes(grid):
        raise LengthMismatch("bundle does not match the SDE/grid")
    d, W = fk.d, bundle.n_W
    nq = len(grid.query_times)
    x_ref = np.asarray(x_ref, dtype=float).reshape(d)
    const_sigma = fk.base.constant_diffusion
    if order == 2:
        if fk.drift_tilde_hess(x_ref[None]) is None:
            raise MissingDerivative("second derivatives of the FlowKac drift are unavailable")
        if fk.diffusion_hess is None and not const_sigma:
            raise MissingDerivative("second derivatives of the diffusion are unavailable")
        if W * nq * d**3 > HESSIAN_ENTRY_CAP:
            raise HessianBudgetExceeded(
                f"order-2 storage needs {W * nq * d**3:.3g} entries (cap {HESSIAN_ENTRY_CAP:.0e})"
            )

    dt = grid.dt
    sig_const = fk.diffusion(x_ref[None], grid.t0)[0] if const_sigma else None
    x = np.repeat(x_ref[None], W, axis=0)
    J = np.repeat(np.eye(d)[None], W, axis=0)
    H = np.zeros((W, d, d, d)) if order == 2 else None
    eye = np.eye(d)

    vals = np.empty((W, nq, d))
    jacs = np.empty((W, nq, d, d))
    hesss = np.empty((W, nq, d, d, d)) if order == 2 else None

    order_q = np.argsort(grid.query_steps, kind="stable")
    q_steps = grid.query_steps[order_q]
    qi = 0

    def emit(step):
        nonlocal qi
        while qi < len(q_steps) and q_steps[qi] == step:
            j = order_q[qi]
            vals[:, j] = x
            jacs[:, j] = J
            if order == 2:
                hesss[:, j] = H
            qi += 1

    emit(0)
    stop = int(q_steps[-1]) if len(q_steps) else 0
    for first, blk in bundle.iter_blocks(stop):
        for k in range(blk.shape[1]):
            t = grid.t0 + (first + k) * dt
            dw = blk[:, k, :]
            # step-map derivatives evaluated at the pre-step state
            S1 = eye + fk.drift_tilde_jac(x, t) * dt
            if not const_sigma:
                S1 = S1 + np.einsum("wilj,wl->wij", fk.diffusion_jac(x, t), dw)
            if order == 2:
                S2 = fk.drift_tilde_hess(x, t) * dt
                if not const_sigma:
                    S2 = S2 + np.einsum("wiljk,wl->wijk", fk.diffusion_hess(x, t), dw)
                H = np.einsum("wij,wjab->wiab", S1, H) + np.einsum(
                    "wijk,wja,wkb->wiab", S2, J, J
                )
                H = 0.5 * (H + H.swapaxes(-1, -2))
            if const_sigma:
                noise = dw @ sig_const.T
            else:
                noise = np.einsum("wil,wl->wi", fk.diffusion(x, t), dw)
            x = x + fk.drift_tilde(x, t) * dt + noise
            if fk.base.positive:
                np.maximum(x, POSITIVE_FLOOR, out=x)
            J = S1 @ J
            emit(first + k + 1)

    base = PathSet(start=x_ref.copy(), values=vals, times=grid.query_times.copy(), seed=bundle.seed)
    return SensitivityBundle(x_ref=x_ref.copy(), base_paths=base, jac=jacs, hess=hesss, order=order)


def taylor_values(sens: SensitivityBundle, x: np.ndarray, query_index=None) -> np.ndarray:
    """Reconstructed states for many starts.

    With ``query_index=None`` returns ``(n, n_W, n_query, d)``; with an integer
    array of per-point query positions returns ``(n, n_W, d)``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    h = x - sens.x_ref
    if query_index is None:
        phi, J, H = sens.base_paths.values, sens.jac, sens.hess
        out = phi[None] + np.einsum("wqij,nj->nwqi", J, h)
        if sens.order == 2:
            out += 0.5 * np.einsum("wqijk,nj,nk->nwqi", H, h, h)
        return out
    qidx = np.asarray(query_index)
    phi = sens.base_paths.values[:, qidx].transpose(1, 0, 2)  # (n, W, d)
    J = sens.jac[:, qidx].transpose(1, 0, 2, 3)
    out = phi + np.einsum("nwij,nj->nwi", J, h)
    if sens.order == 2:
        Hs = sens.hess[:, qidx].transpose(1, 0, 2, 3, 4)
        out += 0.5 * np.einsum("nwijk,nj,nk->nwi", Hs, h, h)
    return out


def taylor_reconstruct(sens: SensitivityBundle, x) -> PathSet:
    x = np.asarray(x, dtype=float).reshape(sens.x_ref.shape)
    vals = taylor_values(sens, x[None])[0]
    return PathSet(
        start=x.copy(),
        values=vals,
        times=sens.query_times.copy(),
        seed=sens.base_paths.seed,
        reconstructed=True,
    )
