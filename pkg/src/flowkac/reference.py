"""Ground-truth densities: closed forms for the linear catalog SDEs and an
ADI finite-difference solution for the Duffing oscillator."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np
from numba import njit
from scipy.linalg import expm

from .errors import (
    DegenerateReference,
    DomainError,
    SingularCovariance,
    UnstableScheme,
    ZeroPivot,
)
from .models import SdeSpec

LYAPUNOV_STEP = 1e-3


@dataclass(frozen=True)
class AnalyticDensity:
    name: str
    d: int
    eval: Callable[[np.ndarray, float], np.ndarray]
    box: tuple[np.ndarray, np.ndarray]
    positive: bool = False
    sampler: Callable[[int, float, np.random.Generator], np.ndarray] | None = None

    def sample(self, n: int, t: float, rng: np.random.Generator) -> np.ndarray:
        if self.sampler is None:
            raise DegenerateReference(f"{self.name} has no exact sampler")
        return self.sampler(int(n), t, rng)

    def __call__(self, x, t) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float)).reshape(-1, self.d)
        if not self.positive:
            return self.eval(x, t)
        out = np.zeros(len(x))
        ok = np.all(x > 0, axis=1)
        if ok.any():
            out[ok] = self.eval(x[ok], t)
        return out


def _gauss_pdf(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    L = np.linalg.cholesky(cov)
    r = np.linalg.solve(L, (x - mean).T)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    return np.exp(-0.5 * np.sum(r * r, axis=0) - 0.5 * (x.shape[1] * math.log(2 * math.pi) + logdet))


# ------------------------------------------------------------------ gbm 1d


def gbm1d_density(mu: float, sigma: float, x, t: float) -> np.ndarray:
    """Log-normal law of GBM started from a log-normal with log-variance sigma^2."""
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise DomainError("gbm1d density is supported on x > 0")
    var = (t + 1.0) * sigma * sigma
    lx = np.log(x) - (mu - 0.5 * sigma * sigma) * t
    return np.exp(-lx * lx / (2.0 * var)) / (x * np.sqrt(2.0 * math.pi * var))


# ------------------------------------------------------------------ ou 2d


@lru_cache(maxsize=256)
def _lyapunov_cached(A_key, SS_key, V0_key, t: float):
    d = int(round(math.sqrt(len(A_key))))
    A = np.array(A_key).reshape(d, d)
    Q = np.array(SS_key).reshape(d, d)
    V = np.array(V0_key).reshape(d, d)
    if t <= 0:
        return V
    n = max(1, int(math.ceil(t / LYAPUNOV_STEP - 1e-9)))
    h = t / n

    def f(V):
        return A @ V + V @ A.T + Q

    for _ in range(n):
        k1 = f(V)
        k2 = f(V + 0.5 * h * k1)
        k3 = f(V + 0.5 * h * k2)
        k4 = f(V + h * k3)
        V = V + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    V.setflags(write=False)
    return V


def lyapunov_covariance(A, Sigma, V0, t: float) -> np.ndarray:
    """V_t solving dV/dt = A V + V A^T + Sigma Sigma^T by classical RK4."""
    A = np.asarray(A, float)
    S = np.asarray(Sigma, float)
    V0 = np.asarray(V0, float)
    key = (tuple(A.ravel()), tuple((S @ S.T).ravel()), tuple(V0.ravel()), float(t))
    return np.array(_lyapunov_cached(*key))


def ou2d_moments(A, Sigma, m0, V0, t: float):
    A = np.asarray(A, float)
    m_t = expm(A * t) @ np.asarray(m0, float)
    V_t = lyapunov_covariance(A, Sigma, V0, t)
    return m_t, V_t


def ou2d_density(A, Sigma, m0, V0, x, t: float) -> np.ndarray:
    m_t, V_t = ou2d_moments(A, Sigma, m0, V0, t)
    if np.linalg.det(V_t) <= 1e-14:
        raise SingularCovariance(f"det V_t = {np.linalg.det(V_t):.3g} at t={t}")
    return _gauss_pdf(np.atleast_2d(np.asarray(x, float)), m_t, V_t)


# ------------------------------------------------------------------ gbm 2d


def gbm2d_moments(a, b, mu0, sigma0, t: float):
    """Mean and covariance of log X_t (one scalar Brownian driver)."""
    a, b, mu0 = (np.asarray(v, float) for v in (a, b, mu0))
    S0 = np.asarray(sigma0, float)
    S0 = S0 * np.eye(len(a)) if S0.ndim == 0 else S0
    return mu0 + a * t, S0 + np.outer(b, b) * t


def gbm2d_density(a, b, mu0, sigma0, x, t: float) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, float))
    if np.any(x <= 0):
        raise DomainError("gbm2d density is supported on the positive quadrant")
    m, S = gbm2d_moments(a, b, mu0, sigma0, t)
    return _gauss_pdf(np.log(x), m, S) / np.prod(x, axis=1)


# ------------------------------------------------------------------ ou nd


def ou_nd_variance(a: float, sigma: float, t: float) -> float:
    e2 = math.exp(2.0 * a * t)
    if a == 0.0:
        return 0.25 + sigma * sigma * t
    return 0.25 * e2 + sigma * sigma * math.expm1(2.0 * a * t) / (2.0 * a)


def ou_nd_density(a: float, sigma: float, d: int, x, t: float) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, float)).reshape(-1, d)
    m = math.exp(a * t)
    v = ou_nd_variance(a, sigma, t)
    r2 = np.sum((x - m) ** 2, axis=1)
    return np.exp(-0.5 * r2 / v - 0.5 * d * math.log(2.0 * math.pi * v))


def ou_nd_marginal(a: float, sigma: float, t: float):
    """Per-coordinate (mean, variance); coordinates are independent."""
    return math.exp(a * t), ou_nd_variance(a, sigma, t)


# ------------------------------------------------------------------ factory


def _gauss_sampler(moments, log_space=False):
    def draw(n, t, rng):
        m, V = moments(t)
        z = rng.standard_normal((n, len(m))) @ np.linalg.cholesky(V).T + m
        return np.exp(z) if log_space else z

    return draw


def analytic_reference(sde: SdeSpec) -> AnalyticDensity:
    p = sde.params
    box = sde.box
    if sde.name == "gbm1d":
        mu, s = float(p["mu"]), float(p["sigma"])
        mom = lambda t: (np.array([(mu - 0.5 * s * s) * t]), np.array([[(t + 1.0) * s * s]]))
        return AnalyticDensity(
            "gbm1d", 1, lambda x, t: gbm1d_density(mu, s, x[:, 0], t), box, True, _gauss_sampler(mom, True)
        )
    if sde.name == "ou2d":
        A, S, m0 = p["A"], p["Sigma"], p["m0"]
        V0 = float(p["v0"]) * np.eye(2)
        return AnalyticDensity(
            "ou2d", 2, lambda x, t: ou2d_density(A, S, m0, V0, x, t), box, False,
            _gauss_sampler(lambda t: ou2d_moments(A, S, m0, V0, t)),
        )
    if sde.name == "gbm2d":
        a, b, mu0, s0 = p["a"], p["b"], p["mu0"], p["sigma0"]
        return AnalyticDensity(
            "gbm2d", 2, lambda x, t: gbm2d_density(a, b, mu0, s0, x, t), box, True,
            _gauss_sampler(lambda t: gbm2d_moments(a, b, mu0, s0, t), True),
        )
    if sde.name == "ou_nd":
        d, a, s = int(p["d"]), float(p["a"]), float(p["sigma"])

        def mom(t):
            m, v = ou_nd_marginal(a, s, t)
            return np.full(d, m), v * np.eye(d)

        return AnalyticDensity(
            "ou_nd", d, lambda x, t: ou_nd_density(a, s, d, x, t), box, False, _gauss_sampler(mom)
        )
    raise DegenerateReference(f"no closed-form density for {sde.name!r}")


# ------------------------------------------------------------------ Thomas


def thomas_solve(a, b, c, d) -> np.ndarray:
    """Tridiagonal solve; ``a`` is the sub-diagonal (n-1), ``c`` the super-diagonal (n-1)."""
    b = np.asarray(b, float)
    n = len(b)
    a = np.asarray(a, float).reshape(-1)
    c = np.asarray(c, float).reshape(-1)
    d = np.asarray(d, float)
    if len(a) != max(n - 1, 0) or len(c) != max(n - 1, 0) or len(d) != n:
        raise ValueError("inconsistent tridiagonal sizes")
    cp = np.empty(n)
    dp = np.empty(n)
    if b[0] == 0:
        raise ZeroPivot("zero pivot at row 0")
    cp[0] = c[0] / b[0] if n > 1 else 0.0
    dp[0] = d[0] / b[0]
    for i in range(1, n):
        den = b[i] - a[i - 1] * cp[i - 1]
        if den == 0:
            raise ZeroPivot(f"zero pivot at row {i}")
        cp[i] = c[i] / den if i < n - 1 else 0.0
        dp[i] = (d[i] - a[i - 1] * dp[i - 1]) / den
    x = np.empty(n)
    x[-1] = dp[-1]
    for i in range(n - 2, -1, -1):
        x[i] = dp[i] - cp[i] * x[i + 1]
    return x


@njit(cache=True)
def _thomas_inplace(a, b, c, d, cp, x):
    """Same recurrence as ``thomas_solve`` with full-length a/b/c (a[0], c[-1] unused)."""
    n = b.shape[0]
    den = b[0]
    if den == 0.0:
        return False
    cp[0] = c[0] / den
    x[0] = d[0] / den
    for i in range(1, n):
        den = b[i] - a[i] * cp[i - 1]
        if den == 0.0:
            return False
        cp[i] = c[i] / den
        x[i] = (d[i] - a[i] * x[i - 1]) / den
    for i in range(n - 2, -1, -1):
        x[i] -= cp[i] * x[i + 1]
    return True


@njit(cache=True)
def thomas_batched(a, b, c, d):
    """Rows of (m, n) arrays are independent tridiagonal systems."""
    m, n = b.shape
    out = np.empty((m, n))
    cp = np.empty(n)
    for r in range(m):
        if not _thomas_inplace(a[r], b[r], c[r], d[r], cp, out[r]):
            out[:, :] = np.nan
            return out
    return out


# ------------------------------------------------------------------ ADI


@njit(cache=True)
def _adi_step(p, x1, x2, g, tau, delta, omega):
    """One Peaceman-Rachford step (two half-steps of length ``tau``) in place.

    ``p[i, j]`` with i along x1 and j along x2; edges are held at zero.
    ``g[i, j]`` is the x2-velocity of the Duffing drift.
    """
    n1, n2 = p.shape
    r = tau / (2.0 * delta)
    k = 0.4 * tau / (delta * delta)
    src = 1.0 + 0.4 * omega * tau
    ps = np.zeros_like(p)
    ok = True

    m = n1 - 2
    a = np.empty(m)
    b = np.ones(m)
    c = np.empty(m)
    d = np.empty(m)
    cp = np.empty(m)
    sol = np.empty(m)
    # x1-implicit half-step, one system per interior column j
    for j in range(1, n2 - 1):
        coef = r * x2[j]
        for ii in range(m):
            i = ii + 1
            a[ii] = -coef
            c[ii] = coef
            d[ii] = (
                src * p[i, j]
                - g[i, j] * r * (p[i, j + 1] - p[i, j - 1])
                + k * (p[i, j + 1] - 2.0 * p[i, j] + p[i, j - 1])
            )
        if not _thomas_inplace(a, b, c, d, cp, sol):
            ok = False
        for ii in range(m):
            ps[ii + 1, j] = sol[ii]

    m = n2 - 2
    a = np.empty(m)
    b = np.full(m, 1.0 + 2.0 * k)
    c = np.empty(m)
    d = np.empty(m)
    cp = np.empty(m)
    sol = np.empty(m)
    # x2-implicit half-step, one system per interior row i
    for i in range(1, n1 - 1):
        for jj in range(m):
            j = jj + 1
            a[jj] = -g[i, j] * r - k
            c[jj] = g[i, j] * r - k
            d[jj] = src * ps[i, j] - x2[j] * r * (ps[i + 1, j] - ps[i - 1, j])
        if not _thomas_inplace(a, b, c, d, cp, sol):
            ok = False
        for jj in range(m):
            p[i, jj + 1] = sol[jj]
    return ok


@njit(cache=True)
def _clip_renorm(p, target_mass):
    """Zero negative entries and rescale to ``target_mass`` (sum of entries)."""
    n_clip = 0
    s = 0.0
    for i in range(p.shape[0]):
        for j in range(p.shape[1]):
            if p[i, j] < 0.0:
                p[i, j] = 0.0
                n_clip += 1
            s += p[i, j]
    if n_clip > 0 and s > 0.0:
        f = target_mass / s
        for i in range(p.shape[0]):
            for j in range(p.shape[1]):
                p[i, j] *= f
    return n_clip


@dataclass
class AdiSolution:
    x1: np.ndarray
    x2: np.ndarray
    times: np.ndarray
    density: np.ndarray  # (n_times, n1, n2)
    h: float
    delta: float
    omega: float
    clip_count: int = 0
    mass: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def box(self):
        return np.array([self.x1[0], self.x2[0]]), np.array([self.x1[-1], self.x2[-1]])

    def time_index(self, t: float) -> int:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 0.5 * self.h + 1e-12:
            raise DegenerateReference(f"t={t} is not a stored ADI time {self.times.tolist()}")
        return k

    def slice(self, t: float) -> np.ndarray:
        return self.density[self.time_index(t)]

    def nodes(self) -> np.ndarray:
        g1, g2 = np.meshgrid(self.x1, self.x2, indexing="ij")
        return np.stack([g1.ravel(), g2.ravel()], axis=1)

    def __call__(self, x, t) -> np.ndarray:
        """Bilinear interpolation of the stored slice; zero outside the grid."""
        from scipy.interpolate import RegularGridInterpolator

        f = RegularGridInterpolator((self.x1, self.x2), self.slice(t), bounds_error=False, fill_value=0.0)
        return f(np.atleast_2d(x))

    def write_csv(self, path, header: str = "") -> None:
        with open(path, "w", newline="") as fh:
            if header:
                fh.write(header)
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "x1", "x2", "p"])
            g1, g2 = np.meshgrid(self.x1, self.x2, indexing="ij")
            for k, t in enumerate(self.times):
                for a, b, v in zip(g1.ravel(), g2.ravel(), self.density[k].ravel()):
                    w.writerow([repr(float(t)), repr(float(a)), repr(float(b)), repr(float(v))])


def adi_duffing(
    omega: float = 1.0,
    delta: float = 0.05,
    h: float = 1e-4,
    T: float = 1.0,
    store_times=(0.0, 0.5, 0.75, 1.0),
    lo: float = -10.0,
    hi: float = 10.0,
    psi: Callable[[np.ndarray], np.ndarray] | None = None,
) -> AdiSolution:
    """Peaceman-Rachford ADI for the Duffing FPE on the square [lo, hi]^2.

    One full step of length ``h`` is two half-steps of length ``h/2``; each
    half-step treats one axis implicitly and the other explicitly.
    """
    n = int(round((hi - lo) / delta)) + 1
    x = np.linspace(lo, hi, n)
    if not np.allclose(np.diff(x), delta):
        raise ValueError("delta must divide the domain width")
    X1, X2 = np.meshgrid(x, x, indexing="ij")
    if psi is None:
        p = np.exp(-(X1**2 + (X2 - 8.0) ** 2)) / math.pi  # N((0,8), I/2)
    else:
        p = np.asarray(psi(np.stack([X1.ravel(), X2.ravel()], 1)), float).reshape(n, n)
    p = np.ascontiguousarray(p)
    p[0, :] = p[-1, :] = p[:, 0] = p[:, -1] = 0.0
    w2 = omega * omega
    g = w2 * X1 - 0.4 * omega * X2 - 0.1 * w2 * X1**3

    n_steps = int(round(T / h))
    store_times = np.asarray(sorted(store_times), float)
    store_steps = np.rint(store_times / h).astype(np.int64)
    snaps = np.empty((len(store_times), n, n))
    masses = np.empty(len(store_times))
    cell = delta * delta
    clips = 0

    def store(step):
        for k in np.nonzero(store_steps == step)[0]:
            snaps[k] = p
            masses[k] = p.sum() * cell

    store(0)
    peak = p.max()
    for step in range(1, n_steps + 1):
        if not _adi_step(p, x, x, g, 0.5 * h, delta, omega):
            raise UnstableScheme(f"zero pivot in ADI step {step}")
        # undershoots are removed without changing the mass the step produced
        clips += _clip_renorm(p, p.sum())
        new_peak = p.max()
        if not np.isfinite(new_peak) or new_peak > 10.0 * peak:
            raise UnstableScheme(f"density peak grew from {peak:.3g} to {new_peak:.3g} at step {step}")
        peak = new_peak
        store(step)
    return AdiSolution(x, x.copy(), store_steps * h, snaps, h, delta, omega, clips, masses)
