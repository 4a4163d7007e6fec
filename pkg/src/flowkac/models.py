"""SDE catalog and the FlowKac transform.

All fields are batched: spatial points arrive as ``(n, d)`` arrays and every
callable returns a leading ``n`` axis. Time arguments are accepted for
interface completeness; the catalog coefficients are time independent.

Derivative layout conventions (``i`` output component, ``j``/``k`` inputs,
``l`` noise column)::

    drift_jac      (n, d, d)        [i, j]       d mu_i / d x_j
    drift_hess     (n, d, d, d)     [i, j, k]
    diffusion      (n, d, m)        [i, l]
    diffusion_jac  (n, d, m, d)     [i, l, j]
    diffusion_hess (n, d, m, d, d)  [i, l, j, k]
    div_D          (n, d)           [i]          sum_j d D_ij / d x_j
    div_D_jac      (n, d, d)
    div_D_hess     (n, d, d, d)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import LengthMismatch, MissingParam, UnknownModel, UnknownParam

Field = Callable[[np.ndarray, float], np.ndarray]

CATALOG_NAMES = ("gbm1d", "ou2d", "gbm2d", "duffing", "ou_nd")


@dataclass(frozen=True)
class SdeSpec:
    name: str
    d: int
    m: int
    drift: Field
    diffusion: Field
    drift_jac: Field
    drift_hess: Field
    diffusion_jac: Field
    diffusion_hess: Field | None
    div_mu: Field
    div_div_D: Field
    div_D: Field
    div_D_jac: Field
    div_D_hess: Field | None
    psi: Callable[[np.ndarray], np.ndarray]
    initial_sampler: Callable[[int, np.random.Generator], np.ndarray]
    params: Mapping[str, object] = field(default_factory=dict)
    # Catalog metadata used by training/eval defaults.
    box: tuple[np.ndarray, np.ndarray] | None = None
    horizon: float = 1.0
    positive: bool = False
    affine: bool = False
    constant_q: bool = False
    constant_diffusion: bool = False

    def D(self, x: np.ndarray, t: float = 0.0) -> np.ndarray:
        s = self.diffusion(x, t)
        return 0.5 * np.einsum("nil,nkl->nik", s, s)


@dataclass(frozen=True)
class FlowKacSde:
    """Auxiliary process whose expectation gives the FPE solution."""

    base: SdeSpec

    @property
    def d(self) -> int:
        return self.base.d

    @property
    def m(self) -> int:
        return self.base.m

    @property
    def diffusion(self) -> Field:
        return self.base.diffusion

    @property
    def diffusion_jac(self) -> Field:
        return self.base.diffusion_jac

    @property
    def diffusion_hess(self) -> Field | None:
        return self.base.diffusion_hess

    @property
    def psi(self):
        return self.base.psi

    @property
    def affine(self) -> bool:
        return self.base.affine

    def drift_tilde(self, x: np.ndarray, t: float = 0.0) -> np.ndarray:
        return -self.base.drift(x, t) + 2.0 * self.base.div_D(x, t)

    def drift_tilde_jac(self, x: np.ndarray, t: float = 0.0) -> np.ndarray:
        return -self.base.drift_jac(x, t) + 2.0 * self.base.div_D_jac(x, t)

    def drift_tilde_hess(self, x: np.ndarray, t: float = 0.0) -> np.ndarray | None:
        if self.base.div_D_hess is None:
            return None
        return -self.base.drift_hess(x, t) + 2.0 * self.base.div_D_hess(x, t)

    def q(self, x: np.ndarray, t: float = 0.0) -> np.ndarray:
        return self.base.div_mu(x, t) - self.base.div_div_D(x, t)

    @property
    def q_value(self) -> float | None:
        """The scalar potential when it is spatially constant, else None."""
        if not self.base.constant_q:
            return None
        return float(self.q(np.zeros((1, self.d)))[0])

    def sigma_dw(self, x: np.ndarray, dw: np.ndarray, t: float = 0.0) -> np.ndarray:
        """sigma(x) @ dW for states ``(n, d)`` and increments ``(n, m)`` or ``(m,)``."""
        if self.base.constant_diffusion:
            s = self.base.diffusion(x[:1], t)[0]
            return dw @ s.T if dw.ndim == 2 else np.broadcast_to(s @ dw, x.shape)
        s = self.base.diffusion(x, t)
        if dw.ndim == 1:
            return s @ dw
        return np.einsum("nil,nl->ni", s, dw)


def flowkac_transform(sde: SdeSpec) -> FlowKacSde:
    return FlowKacSde(sde)


def evaluate_q_along_path(fk: FlowKacSde, path, times) -> np.ndarray:
    path = np.asarray(path, dtype=float)
    times = np.asarray(times, dtype=float)
    if path.ndim == 1:
        path = path[:, None]
    if len(path) != len(times) or len(times) < 1:
        raise LengthMismatch(f"path has {len(path)} points but {len(times)} times")
    return np.array([fk.q(path[k : k + 1], times[k])[0] for k in range(len(times))])


# ---------------------------------------------------------------------------
# helpers

def _zeros(*shape):
    def f(x, t=0.0):
        return np.zeros((x.shape[0],) + shape)

    return f


def _gauss_logpdf(x: np.ndarray, mean: np.ndarray, var: np.ndarray | float) -> np.ndarray:
    """Diagonal-covariance Gaussian log-density, batched over rows of ``x``."""
    var = np.broadcast_to(np.asarray(var, dtype=float), mean.shape)
    r = x - mean
    return -0.5 * np.sum(r * r / var + np.log(2.0 * math.pi * var), axis=1)


def _as_vec(v, d: int) -> np.ndarray:
    a = np.asarray(v, dtype=float)
    if a.ndim == 0:
        return np.full(d, float(a))
    return a.reshape(d)


def _resolve(name: str, params: Mapping[str, object], defaults: dict, required=()) -> dict:
    params = dict(params or {})
    allowed = set(defaults) | set(required)
    unknown = sorted(set(params) - allowed)
    if unknown:
        raise UnknownParam(f"{name}: unknown parameter(s) {unknown}")
    missing = [k for k in required if k not in params]
    if missing:
        raise MissingParam(f"{name}: missing parameter(s) {missing}")
    out = dict(defaults)
    out.update(params)
    return out


# ---------------------------------------------------------------------------
# catalog entries

def _gbm1d(params) -> SdeSpec:
    p = _resolve("gbm1d", params, {"mu": 0.25, "sigma": 0.5})
    mu, sig = float(p["mu"]), float(p["sigma"])
    s2 = sig * sig

    def psi(x):
        x = x[:, 0]
        out = np.zeros_like(x)
        pos = x > 0
        lx = np.log(x[pos])
        out[pos] = np.exp(-lx * lx / (2 * s2)) / (x[pos] * math.sqrt(2 * math.pi * s2))
        return out

    def sampler(n, rng):
        return np.exp(sig * rng.standard_normal((n, 1)))

    return SdeSpec(
        name="gbm1d", d=1, m=1,
        drift=lambda x, t=0.0: mu * x,
        diffusion=lambda x, t=0.0: sig * x[:, :, None],
        drift_jac=lambda x, t=0.0: np.full((x.shape[0], 1, 1), mu),
        drift_hess=_zeros(1, 1, 1),
        diffusion_jac=lambda x, t=0.0: np.full((x.shape[0], 1, 1, 1), sig),
        diffusion_hess=_zeros(1, 1, 1, 1),
        div_mu=lambda x, t=0.0: np.full(x.shape[0], mu),
        div_div_D=lambda x, t=0.0: np.full(x.shape[0], s2),
        div_D=lambda x, t=0.0: s2 * x,
        div_D_jac=lambda x, t=0.0: np.full((x.shape[0], 1, 1), s2),
        div_D_hess=_zeros(1, 1, 1),
        psi=psi, initial_sampler=sampler, params=p,
        box=(np.array([0.0]), np.array([5.0])), horizon=1.0,
        positive=True, affine=True, constant_q=True,
    )


def _ou2d(params) -> SdeSpec:
    p = _resolve(
        "ou2d", params,
        {
            "A": [[0.1, 1.0], [-1.0, -0.1]],
            "Sigma": [[0.6, 0.0], [0.0, 0.0]],
            "m0": [1.0, 1.0],
            "v0": 1.0 / 9.0,
        },
    )
    A = np.asarray(p["A"], dtype=float).reshape(2, 2)
    S = np.asarray(p["Sigma"], dtype=float).reshape(2, 2)
    m0 = _as_vec(p["m0"], 2)
    v0 = float(p["v0"])
    tr = float(np.trace(A))

    return SdeSpec(
        name="ou2d", d=2, m=2,
        drift=lambda x, t=0.0: x @ A.T,
        diffusion=lambda x, t=0.0: np.broadcast_to(S, (x.shape[0], 2, 2)),
        drift_jac=lambda x, t=0.0: np.broadcast_to(A, (x.shape[0], 2, 2)),
        drift_hess=_zeros(2, 2, 2),
        diffusion_jac=_zeros(2, 2, 2),
        diffusion_hess=_zeros(2, 2, 2, 2),
        div_mu=lambda x, t=0.0: np.full(x.shape[0], tr),
        div_div_D=_zeros(),
        div_D=_zeros(2),
        div_D_jac=_zeros(2, 2),
        div_D_hess=_zeros(2, 2, 2),
        psi=lambda x: np.exp(_gauss_logpdf(x, m0, v0)),
        initial_sampler=lambda n, rng: m0 + math.sqrt(v0) * rng.standard_normal((n, 2)),
        params={"A": A.tolist(), "Sigma": S.tolist(), "m0": m0.tolist(), "v0": v0},
        box=(np.array([-5.0, -5.0]), np.array([5.0, 5.0])), horizon=3.0,
        affine=True, constant_q=True, constant_diffusion=True,
    )


def _gbm2d(params) -> SdeSpec:
    p = _resolve(
        "gbm2d", params,
        {"a": [-1.0, -2.0], "b": [0.5, 1.0], "mu0": [0.5, 0.7], "sigma0": 0.5},
    )
    a = _as_vec(p["a"], 2)
    b = _as_vec(p["b"], 2)
    mu0 = _as_vec(p["mu0"], 2)
    s0 = float(p["sigma0"])
    c = a + 0.5 * b * b
    # D_ij = b_i b_j x_i x_j / 2 (one scalar Brownian driver)
    kdiv = 0.5 * b * (b.sum() + b)
    ddD = 0.5 * b.sum() ** 2 + 0.5 * np.sum(b * b)
    jac_b = np.zeros((2, 1, 2))
    jac_b[0, 0, 0], jac_b[1, 0, 1] = b[0], b[1]

    def psi(x):
        out = np.zeros(x.shape[0])
        pos = np.all(x > 0, axis=1)
        lx = np.log(x[pos])
        out[pos] = np.exp(_gauss_logpdf(lx, mu0, s0)) / np.prod(x[pos], axis=1)
        return out

    return SdeSpec(
        name="gbm2d", d=2, m=1,
        drift=lambda x, t=0.0: x * c,
        diffusion=lambda x, t=0.0: (x * b)[:, :, None],
        drift_jac=lambda x, t=0.0: np.broadcast_to(np.diag(c), (x.shape[0], 2, 2)),
        drift_hess=_zeros(2, 2, 2),
        diffusion_jac=lambda x, t=0.0: np.broadcast_to(jac_b, (x.shape[0], 2, 1, 2)),
        diffusion_hess=_zeros(2, 1, 2, 2),
        div_mu=lambda x, t=0.0: np.full(x.shape[0], c.sum()),
        div_div_D=lambda x, t=0.0: np.full(x.shape[0], ddD),
        div_D=lambda x, t=0.0: x * kdiv,
        div_D_jac=lambda x, t=0.0: np.broadcast_to(np.diag(kdiv), (x.shape[0], 2, 2)),
        div_D_hess=_zeros(2, 2, 2),
        psi=psi,
        initial_sampler=lambda n, rng: np.exp(mu0 + math.sqrt(s0) * rng.standard_normal((n, 2))),
        params={"a": a.tolist(), "b": b.tolist(), "mu0": mu0.tolist(), "sigma0": s0},
        box=(np.array([0.0, 0.0]), np.array([6.0, 6.0])), horizon=1.0,
        positive=True, affine=True, constant_q=True,
    )


def _duffing(params) -> SdeSpec:
    p = _resolve("duffing", params, {"omega": 1.0})
    w = float(p["omega"])
    w2 = w * w
    S = np.array([[0.0, 0.0], [0.0, math.sqrt(0.8)]])
    mean0 = np.array([0.0, 8.0])

    def drift(x, t=0.0):
        x1, x2 = x[:, 0], x[:, 1]
        return np.stack([x2, -0.4 * w * x2 + w2 * x1 - 0.1 * w2 * x1**3], axis=1)

    def drift_jac(x, t=0.0):
        out = np.zeros((x.shape[0], 2, 2))
        out[:, 0, 1] = 1.0
        out[:, 1, 0] = w2 - 0.3 * w2 * x[:, 0] ** 2
        out[:, 1, 1] = -0.4 * w
        return out

    def drift_hess(x, t=0.0):
        out = np.zeros((x.shape[0], 2, 2, 2))
        out[:, 1, 0, 0] = -0.6 * w2 * x[:, 0]
        return out

    return SdeSpec(
        name="duffing", d=2, m=2,
        drift=drift,
        diffusion=lambda x, t=0.0: np.broadcast_to(S, (x.shape[0], 2, 2)),
        drift_jac=drift_jac, drift_hess=drift_hess,
        diffusion_jac=_zeros(2, 2, 2),
        diffusion_hess=_zeros(2, 2, 2, 2),
        div_mu=lambda x, t=0.0: np.full(x.shape[0], -0.4 * w),
        div_div_D=_zeros(),
        div_D=_zeros(2), div_D_jac=_zeros(2, 2), div_D_hess=_zeros(2, 2, 2),
        psi=lambda x: np.exp(_gauss_logpdf(x, mean0, 0.5)),
        initial_sampler=lambda n, rng: mean0 + math.sqrt(0.5) * rng.standard_normal((n, 2)),
        params={"omega": w},
        box=(np.array([-10.0, -10.0]), np.array([10.0, 10.0])), horizon=1.0,
        constant_q=True, constant_diffusion=True,
    )


def _ou_nd(params) -> SdeSpec:
    p = _resolve("ou_nd", params, {"a": -0.5, "sigma": 0.4}, required=("d",))
    d = int(p["d"])
    if d < 1:
        raise ValueError("ou_nd needs d >= 1")
    a, sig = float(p["a"]), float(p["sigma"])
    ones = np.ones(d)
    S = sig * np.eye(d)

    return SdeSpec(
        name="ou_nd", d=d, m=d,
        drift=lambda x, t=0.0: a * x,
        diffusion=lambda x, t=0.0: np.broadcast_to(S, (x.shape[0], d, d)),
        drift_jac=lambda x, t=0.0: np.broadcast_to(a * np.eye(d), (x.shape[0], d, d)),
        drift_hess=_zeros(d, d, d),
        diffusion_jac=_zeros(d, d, d),
        diffusion_hess=None,  # identically zero; omitted to avoid a d^4 allocation
        div_mu=lambda x, t=0.0: np.full(x.shape[0], a * d),
        div_div_D=_zeros(),
        div_D=_zeros(d), div_D_jac=_zeros(d, d), div_D_hess=_zeros(d, d, d),
        psi=lambda x: np.exp(_gauss_logpdf(x, ones, 0.25)),
        initial_sampler=lambda n, rng: 1.0 + 0.5 * rng.standard_normal((n, d)),
        params={"d": d, "a": a, "sigma": sig},
        box=(np.full(d, -1.0), np.full(d, 3.0)), horizon=1.0,
        affine=True, constant_q=True, constant_diffusion=True,
    )


_BUILDERS = {
    "gbm1d": _gbm1d,
    "ou2d": _ou2d,
    "gbm2d": _gbm2d,
    "duffing": _duffing,
    "ou_nd": _ou_nd,
}


def catalog(name: str, params: Mapping[str, object] | None = None) -> SdeSpec:
    """Instantiate one of the five experiment SDEs with analytic derivatives."""
    try:
        builder = _BUILDERS[name]
    except KeyError:
        raise UnknownModel(f"unknown SDE {name!r}; expected one of {CATALOG_NAMES}") from None
    return builder(params or {})


def catalog_param_keys(name: str) -> tuple[str, ...]:
    keys = {
        "gbm1d": ("mu", "sigma"),
        "ou2d": ("A", "Sigma", "m0", "v0"),
        "gbm2d": ("a", "b", "mu0", "sigma0"),
        "duffing": ("omega",),
        "ou_nd": ("d", "a", "sigma"),
    }
    if name not in keys:
        raise UnknownModel(name)
    return keys[name]
