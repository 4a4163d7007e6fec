"""Temporal normalizing flow: x -> z at fixed t, with exact log-density.

Layer order in the x -> z direction::

    Cdf  ->  [Actnorm -> Coupling] x depth  ->  z ~ N(0, I)

The Cdf layer squashes the domain box onto [0,1], applies a monotone
quadratic-spline CDF per coordinate and re-centres the unit interval onto
[-spread, spread], so an untrained flow already carries almost all of its base
mass inside the box. Time is never transformed; it only conditions the
coupling subnets.

All parameters live in one flat float64 vector ``theta``. Gradients are taken
with torch autograd on a tensor view of that vector.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import (
    InversionOutOfRange,
    ManifestMismatch,
    NonFiniteActivation,
    NonFiniteGradient,
)

CHECKPOINT_MAGIC = b"FLOWKAC-TNF 1\n"
INVERSION_CLAMP = 1e-6
RESAMPLE_CAP = 10
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class FlowConfig:
    d: int
    box_lo: tuple
    box_hi: tuple
    depth: int = 4
    width: int = 32
    n_bins: int = 32
    alpha: float = 0.6
    beta_init: float = -2.0
    t_max: float = 1.0
    spread: float = 4.0

    def __post_init__(self):
        object.__setattr__(self, "box_lo", tuple(float(v) for v in np.broadcast_to(self.box_lo, (self.d,))))
        object.__setattr__(self, "box_hi", tuple(float(v) for v in np.broadcast_to(self.box_hi, (self.d,))))
        if self.d < 1 or self.depth < 0 or self.width < 1 or self.n_bins < 1:
            raise ValueError("invalid flow dimensions")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if any(h <= l for l, h in zip(self.box_lo, self.box_hi)):
            raise ValueError("box_hi must exceed box_lo")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


# ---------------------------------------------------------------- parameters


@dataclass
class _Slot:
    name: str
    shape: tuple
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    def view(self, theta):
        return theta[self.offset : self.offset + self.size].reshape(self.shape)


class _Registry:
    def __init__(self):
        self.slots: list[_Slot] = []
        self.n = 0

    def add(self, name: str, shape) -> _Slot:
        s = _Slot(name, tuple(int(v) for v in shape), self.n)
        self.slots.append(s)
        self.n += s.size
        return s


# ------------------------------------------------------------------- subnet


class Mlp:
    """Dense net with two tanh hidden layers and a linear head."""

    def __init__(self, reg: _Registry, prefix: str, n_in: int, width: int, n_out: int):
        self.n_in, self.width, self.n_out = n_in, width, n_out
        self.w1 = reg.add(f"{prefix}.w1", (n_in, width))
        self.b1 = reg.add(f"{prefix}.b1", (width,))
        self.w2 = reg.add(f"{prefix}.w2", (width, width))
        self.b2 = reg.add(f"{prefix}.b2", (width,))
        self.w3 = reg.add(f"{prefix}.w3", (width, n_out))
        self.b3 = reg.add(f"{prefix}.b3", (n_out,))

    def init(self, theta: np.ndarray, rng: np.random.Generator):
        for w in (self.w1, self.w2):
            fan_in, fan_out = w.shape
            lim = math.sqrt(6.0 / (fan_in + fan_out))
            w.view(theta)[...] = rng.uniform(-lim, lim, w.shape)
        # b's and the head stay zero: the net starts as the zero function

    def __call__(self, theta, h):
        h = torch.tanh(h @ self.w1.view(theta) + self.b1.view(theta))
        h = torch.tanh(h @ self.w2.view(theta) + self.b2.view(theta))
        return h @ self.w3.view(theta) + self.b3.view(theta)


# ------------------------------------------------------------------- layers


class ActnormLayer:
    """y = exp(log_a) * x + b."""

    kind = "actnorm"

    def __init__(self, reg: _Registry, idx: int, d: int):
        self.log_a = reg.add(f"actnorm{idx}.log_a", (d,))
        self.b = reg.add(f"actnorm{idx}.b", (d,))

    def init(self, theta, rng):
        pass

    def scale(self, theta) -> np.ndarray:
        return np.exp(np.asarray(self.log_a.view(theta)))

    def bias(self, theta) -> np.ndarray:
        return np.asarray(self.b.view(theta))

    def forward(self, theta, x, tf):
        la = self.log_a.view(theta)
        y = x * torch.exp(la) + self.b.view(theta)
        return y, la.sum().expand(x.shape[0])

    def inverse(self, theta, y, tf):
        return (y - self.b.view(theta)) * torch.exp(-self.log_a.view(theta))


class CouplingLayer:
    """Affine coupling ``y2 = x2 (1 + alpha tanh s) + e^beta tanh r``.

    ``s`` and ``r`` are the two halves of one subnet output; the subnet sees
    the untouched block and the (rescaled) time. For d = 1 it sees only time.
    """

    kind = "coupling"

    def __init__(self, reg: _Registry, idx: int, d: int, width: int, alpha: float, beta_init: float):
        head = (d + 1) // 2
        idx_all = np.arange(d)
        if d == 1:
            self.cond, self.tran = idx_all[:0], idx_all
        elif idx % 2 == 0:
            self.cond, self.tran = idx_all[:head], idx_all[head:]
        else:
            self.cond, self.tran = idx_all[d - head :], idx_all[: d - head]
        self.alpha = alpha
        self.beta_init = beta_init
        k = len(self.tran)
        self.net = Mlp(reg, f"coupling{idx}.net", len(self.cond) + 1, width, 2 * k)
        self.beta = reg.add(f"coupling{idx}.beta", (k,))

    def init(self, theta, rng):
        self.net.init(theta, rng)
        self.beta.view(theta)[...] = self.beta_init

    def _sr(self, theta, x, tf):
        h = torch.cat([x[:, self.cond], tf[:, None]], dim=1)
        out = self.net(theta, h)
        k = len(self.tran)
        scale = 1.0 + self.alpha * torch.tanh(out[:, :k])
        shift = torch.exp(self.beta.view(theta)) * torch.tanh(out[:, k:])
        return scale, shift

    def forward(self, theta, x, tf):
        scale, shift = self._sr(theta, x, tf)
        y = x.clone()
        y[:, self.tran] = x[:, self.tran] * scale + shift
        return y, torch.log(scale).sum(dim=1)

    def inverse(self, theta, y, tf):
        scale, shift = self._sr(theta, y, tf)
        x = y.clone()
        x[:, self.tran] = (y[:, self.tran] - shift) / scale
        return x


class CdfLayer:
    """Box squash, quadratic-spline CDF on [0,1], re-centring to [-spread, spread].

    The pdf is piecewise linear between uniform knots with positive knot
    values ``w = exp(v) / Z``; ``Z`` makes the pdf integrate to one so
    F(0) = 0 and F(1) = 1. Outside [0,1] F continues linearly with the edge
    slopes, which keeps the forward map defined (and invertible) on all of R.
    """

    kind = "cdf"

    def __init__(self, reg: _Registry, d: int, n_bins: int, lo, hi, spread: float):
        self.d, self.n_bins = d, n_bins
        self.v = reg.add("cdf.v", (d, n_bins + 1))
        self.lo = np.asarray(lo, float)
        self.width = np.asarray(hi, float) - self.lo
        self.spread = spread
        self.knots = np.linspace(0.0, 1.0, n_bins + 1)
        self.const_logdet = float(np.sum(np.log(2.0 * spread) - np.log(self.width)))

    def init(self, theta, rng):
        pass

    def _tables(self, theta):
        """Knot pdf values (d, K+1) and prefix masses C (d, K+1)."""
        w = torch.exp(self.v.view(theta))
        dh = 1.0 / self.n_bins
        trap = 0.5 * (w[:, 1:] + w[:, :-1]) * dh
        z = trap.sum(dim=1, keepdim=True)
        w = w / z
        trap = trap / z
        c = torch.cat([torch.zeros_like(z), torch.cumsum(trap, dim=1)], dim=1)
        return w, c

    def cdf(self, theta, u):
        """F(u) and F'(u) per coordinate; u is (n, d)."""
        w, c = self._tables(theta)
        K = self.n_bins
        dh = 1.0 / K
        k = torch.clamp(torch.floor(u.detach() * K).long(), 0, K - 1)
        wk = _take(w, k)
        wk1 = _take(w, k + 1)
        ck = _take(c, k)
        s = u - k.to(u.dtype) * dh
        slope = (wk1 - wk) / dh
        F_in = ck + wk * s + 0.5 * slope * s * s
        f_in = wk + slope * s
        w0, wK = w[:, 0], w[:, K]
        below, above = u < 0, u > 1
        F = torch.where(below, w0 * u, torch.where(above, 1.0 + wK * (u - 1.0), F_in))
        f = torch.where(below, w0.expand_as(u), torch.where(above, wK.expand_as(u), f_in))
        return F, f

    def cdf_inverse(self, theta, F):
        """Inverse of ``cdf`` for F in [0,1] (monotone root of the bin quadratic)."""
        w, c = self._tables(theta)
        K = self.n_bins
        dh = 1.0 / K
        cn = c.detach().numpy()
        Fn = F.detach().numpy()
        k = np.empty(Fn.shape, dtype=np.int64)
        for i in range(self.d):
            k[:, i] = np.searchsorted(cn[i], Fn[:, i], side="right") - 1
        k = torch.from_numpy(np.clip(k, 0, K - 1))
        wk, wk1, ck = _take(w, k), _take(w, k + 1), _take(c, k)
        a = 0.5 * (wk1 - wk) / dh
        rem = torch.clamp(F - ck, min=0.0)
        disc = torch.clamp(wk * wk + 4.0 * a * rem, min=0.0)
        s = 2.0 * rem / (wk + torch.sqrt(disc))
        return k.to(F.dtype) * dh + torch.clamp(s, 0.0, dh)

    def forward(self, theta, x, tf):
        lo = torch.as_tensor(self.lo, dtype=x.dtype)
        wd = torch.as_tensor(self.width, dtype=x.dtype)
        u = (x - lo) / wd
        F, f = self.cdf(theta, u)
        y = self.spread * (2.0 * F - 1.0)
        return y, torch.log(f).sum(dim=1) + self.const_logdet

    def inverse(self, theta, y, tf, out_of_range="raise"):
        F = (y / self.spread + 1.0) / 2.0
        bad = (F < 0) | (F > 1)
        if bool(bad.any()):
            if out_of_range == "raise":
                raise InversionOutOfRange(
                    f"{int(bad.any(dim=1).sum())} point(s) fall outside the Cdf range"
                )
            if out_of_range == "clamp":
                F = torch.clamp(F, INVERSION_CLAMP, 1.0 - INVERSION_CLAMP)
        w, _ = self._tables(theta)
        u = self.cdf_inverse(theta, torch.clamp(F, 0.0, 1.0))
        if out_of_range == "extend":
            u = torch.where(F < 0, F / w[:, 0], u)
            u = torch.where(F > 1, 1.0 + (F - 1.0) / w[:, -1], u)
        lo = torch.as_tensor(self.lo, dtype=y.dtype)
        wd = torch.as_tensor(self.width, dtype=y.dtype)
        return lo + u * wd

    def pre_cdf(self, y):
        """Value entering the Cdf inverse, used to flag out-of-range points."""
        return (y / self.spread + 1.0) / 2.0


def _take(table, k):
    """table (d, K+1), k (n, d) -> table[i, k[:, i]] as (n, d)."""
    return torch.gather(table, 1, k.T).T


# -------------------------------------------------------------------- model


def _as_t(x, d):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1 and d == 1 and x.size != 1:
        x = x[:, None]
    return np.atleast_2d(x).reshape(-1, d)


class TnfModel:
    def __init__(self, cfg: FlowConfig, theta: np.ndarray | None = None, seed: int = 0):
        self.cfg = cfg
        reg = _Registry()
        self.cdf_layer = CdfLayer(reg, cfg.d, cfg.n_bins, cfg.box_lo, cfg.box_hi, cfg.spread)
        self.layers: list = [self.cdf_layer]
        for i in range(cfg.depth):
            self.layers.append(ActnormLayer(reg, i, cfg.d))
            self.layers.append(CouplingLayer(reg, i, cfg.d, cfg.width, cfg.alpha, cfg.beta_init))
        self.slots = reg.slots
        self.n_params = reg.n
        if theta is None:
            theta = np.zeros(reg.n)
            rng = np.random.default_rng(seed)
            for layer in self.layers:
                layer.init(theta, rng)
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (reg.n,):
            raise ManifestMismatch(f"theta has {theta.size} entries, manifest declares {reg.n}")
        self.theta = theta

    @property
    def d(self) -> int:
        return self.cfg.d

    def with_theta(self, theta) -> "TnfModel":
        return TnfModel(self.cfg, np.array(theta, dtype=np.float64, copy=True))

    def manifest(self) -> dict:
        return {
            "flow": self.cfg.to_dict(),
            "layers": [layer.kind for layer in self.layers],
            "params": [[s.name, list(s.shape)] for s in self.slots],
            "n_params": self.n_params,
        }

    def slot_index(self, prefix: str) -> np.ndarray:
        """Flat indices of every parameter whose name starts with ``prefix``."""
        idx = [np.arange(s.offset, s.offset + s.size) for s in self.slots if s.name.startswith(prefix)]
        return np.concatenate(idx) if idx else np.zeros(0, dtype=np.int64)

    # torch core ------------------------------------------------------------

    def _inputs(self, x, t):
        x = _as_t(x, self.d)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (len(x),))
        return torch.from_numpy(np.ascontiguousarray(x)), torch.from_numpy(
            np.ascontiguousarray(t / self.cfg.t_max)
        )

    def _forward(self, theta, x, tf, per_layer=False):
        logdet = torch.zeros(x.shape[0], dtype=x.dtype)
        parts = []
        for layer in self.layers:
            x, ld = layer.forward(theta, x, tf)
            logdet = logdet + ld
            if per_layer:
                parts.append(ld)
        if not bool(torch.isfinite(x).all()) or not bool(torch.isfinite(logdet).all()):
            raise NonFiniteActivation("non-finite value in the flow forward pass")
        return (x, logdet, parts) if per_layer else (x, logdet)

    def _log_density(self, theta, x, tf):
        z, logdet = self._forward(theta, x, tf)
        return -0.5 * (z * z).sum(dim=1) - 0.5 * self.d * _LOG_2PI + logdet

    # public numpy API ------------------------------------------------------

    def forward(self, x, t):
        xt, tf = self._inputs(x, t)
        with torch.no_grad():
            z, ld = self._forward(torch.from_numpy(self.theta), xt, tf)
        return z.numpy(), ld.numpy()

    def layer_logdets(self, x, t) -> list[np.ndarray]:
        xt, tf = self._inputs(x, t)
        with torch.no_grad():
            _, _, parts = self._forward(torch.from_numpy(self.theta), xt, tf, per_layer=True)
        return [p.numpy() for p in parts]

    def inverse(self, z, t, out_of_range="raise"):
        zt, tf = self._inputs(z, t)
        theta = torch.from_numpy(self.theta)
        with torch.no_grad():
            y = zt
            for layer in reversed(self.layers[1:]):
                y = layer.inverse(theta, y, tf)
            x = self.cdf_layer.inverse(theta, y, tf, out_of_range=out_of_range)
        return x.numpy()

    def log_density(self, x, t) -> np.ndarray:
        xt, tf = self._inputs(x, t)
        with torch.no_grad():
            return self._log_density(torch.from_numpy(self.theta), xt, tf).numpy()

    def density(self, x, t) -> np.ndarray:
        return np.exp(self.log_density(x, t))

    def __call__(self, x, t) -> np.ndarray:
        return self.density(x, t)

    def sample(self, n: int, t: float, rng: np.random.Generator) -> np.ndarray:
        """Draw ``n`` points at time ``t``.

        Base draws whose image leaves the Cdf range are redrawn up to
        ``RESAMPLE_CAP`` times; survivors are clamped just inside the box.
        """
        n = int(n)
        if n <= 0:
            return np.zeros((0, self.d))
        theta = torch.from_numpy(self.theta)
        z = rng.standard_normal((n, self.d))
        pending = np.arange(n)
        out = np.empty((n, self.d))
        for attempt in range(RESAMPLE_CAP + 1):
            zt, tf = self._inputs(z[pending], t)
            with torch.no_grad():
                y = zt
                for layer in reversed(self.layers[1:]):
                    y = layer.inverse(theta, y, tf)
                F = self.cdf_layer.pre_cdf(y).numpy()
            ok = np.all((F >= 0) & (F <= 1), axis=1)
            last = attempt == RESAMPLE_CAP
            keep = np.ones_like(ok) if last else ok
            if keep.any():
                with torch.no_grad():
                    x = self.cdf_layer.inverse(theta, y[torch.from_numpy(keep)], tf, "clamp")
                out[pending[keep]] = x.numpy()
            pending = pending[~keep]
            if pending.size == 0:
                break
            z[pending] = rng.standard_normal((pending.size, self.d))
        return out

    def backprop(self, x, t, residual) -> np.ndarray:
        """Gradient of ``sum_k residual_k * p_theta(x_k, t_k)`` w.r.t. theta."""
        residual = np.asarray(residual, dtype=np.float64).reshape(-1)
        if not np.any(residual):
            return np.zeros(self.n_params)
        xt, tf = self._inputs(x, t)
        theta = torch.tensor(self.theta, requires_grad=True)
        p = torch.exp(self._log_density(theta, xt, tf))
        (p * torch.from_numpy(residual)).sum().backward()
        g = theta.grad.numpy().copy()
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient("non-finite parameter gradient")
        return g

    def value_and_backprop(self, x, t, target):
        """Squared-error loss mean((p - target)^2), its gradient, and p."""
        target = np.asarray(target, dtype=np.float64).reshape(-1)
        xt, tf = self._inputs(x, t)
        theta = torch.tensor(self.theta, requires_grad=True)
        p = torch.exp(self._log_density(theta, xt, tf))
        loss = ((p - torch.from_numpy(target)) ** 2).mean()
        loss.backward()
        g = theta.grad.numpy().copy()
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient("non-finite parameter gradient")
        return float(loss.detach()), g, p.detach().numpy()


def base_logpdf(z) -> np.ndarray:
    z = np.atleast_2d(np.asarray(z, dtype=float))
    return -0.5 * np.sum(z * z, axis=1) - 0.5 * z.shape[1] * _LOG_2PI


def build_model(cfg: FlowConfig, seed: int = 0) -> TnfModel:
    return TnfModel(cfg, seed=seed)


# --------------------------------------------------------------- checkpoint


def _manifest_bytes(manifest: dict) -> bytes:
    return json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()


def save_checkpoint(model: TnfModel, path, extra: dict | None = None) -> Path:
    manifest = model.manifest()
    if extra:
        manifest["extra"] = extra
    body = _manifest_bytes(manifest)
    digest = hashlib.sha256(body).hexdigest().encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(body + b"\n")
        fh.write(digest + b"\n")
        fh.write(model.theta.astype("<f8").tobytes())
    return path


def load_checkpoint(path, expect: FlowConfig | None = None) -> tuple[TnfModel, dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise ManifestMismatch("not a flow checkpoint")
    rest = raw[len(CHECKPOINT_MAGIC) :]
    body, rest = rest.split(b"\n", 1)
    digest, blob = rest.split(b"\n", 1)
    if hashlib.sha256(body).hexdigest().encode() != digest:
        raise ManifestMismatch("manifest hash does not match")
    manifest = json.loads(body)
    cfg = FlowConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in manifest["flow"].items()})
    if expect is not None and cfg != expect:
        raise ManifestMismatch(f"checkpoint flow {cfg.to_dict()} differs from config {expect.to_dict()}")
    theta = np.frombuffer(blob, dtype="<f8").astype(np.float64)
    model = TnfModel(cfg, theta)
    if _manifest_bytes({k: v for k, v in manifest.items() if k != "extra"}) != _manifest_bytes(model.manifest()):
        raise ManifestMismatch("layer manifest differs from the one rebuilt from the config")
    return model, manifest.get("extra", {})
