"""Relative L2 and KL between a reference density and a learned one."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateReference, LengthMismatch
from .reference import AdiSolution

DENSITY_FLOOR = 1e-30
GRID_DEFAULTS = {1: 200, 2: 200, 3: 40, 4: 20}
SAMPLE_DEFAULT = 100_000


def relative_l2(p_star, p_theta) -> float:
    p_star = np.asarray(p_star, float).ravel()
    p_theta = np.asarray(p_theta, float).ravel()
    if p_star.shape != p_theta.shape:
        raise LengthMismatch("reference and model values differ in length")
    den = float(np.sum(p_star * p_star))
    if den <= 0:
        raise DegenerateReference("reference vanishes on every evaluation point")
    return float(np.sum((p_star - p_theta) ** 2) / den)


def _kl_terms(p_star, p_theta):
    p_star = np.asarray(p_star, float).ravel()
    p_theta = np.asarray(p_theta, float).ravel()
    if p_star.shape != p_theta.shape:
        raise LengthMismatch("reference and model values differ in length")
    pos = p_star > 0
    ps = p_star[pos]
    pt = np.maximum(p_theta[pos], DENSITY_FLOOR)
    return ps * (np.log(np.maximum(ps, DENSITY_FLOOR)) - np.log(pt))


def kl_grid(p_star, p_theta, cell_volume: float) -> float:
    return float(cell_volume * np.sum(_kl_terms(p_star, p_theta)))


def kl_sample(p_star_at_samples, p_theta_at_samples) -> float:
    """Mean of p* log(p*/p_theta) over samples drawn from p*."""
    n = np.asarray(p_star_at_samples).size
    if n == 0:
        return 0.0
    return float(np.sum(_kl_terms(p_star_at_samples, p_theta_at_samples)) / n)


@dataclass(frozen=True)
class EvalSpec:
    mode: str = "grid"
    n_eval: int | None = None
    box: tuple | None = None
    times: Sequence[float] = (0.0, 1.0)
    sampler: Callable[[int, float, np.random.Generator], np.ndarray] | None = None
    seed: int = 0
    adi_stride: int = 1

    def __post_init__(self):
        if self.mode not in ("grid", "sample"):
            raise ValueError("mode must be 'grid' or 'sample'")


@dataclass
class MetricSeries:
    sde: str
    model: str
    records: list = field(default_factory=list)  # (t, l2, kl)

    @property
    def times(self):
        return [r[0] for r in self.records]

    @property
    def l2(self):
        return [r[1] for r in self.records]

    @property
    def kl(self):
        return [r[2] for r in self.records]

    def at(self, t: float):
        for r in self.records:
            if abs(r[0] - t) < 1e-9:
                return r
        raise KeyError(t)

    def write_csv(self, path, header: str = "", append: bool = False) -> None:
        with open(path, "a" if append else "w", newline="") as fh:
            if header and not append:
                fh.write(header)
            w = csv.writer(fh, lineterminator="\n")
            if not append:
                w.writerow(["sde", "model", "t", "l2", "kl"])
            for t, l2, kl in self.records:
                w.writerow([self.sde, self.model, repr(float(t)), repr(float(l2)), repr(float(kl))])


def cell_centered_grid(box, n: int):
    """Cell-centred points ``(n^d, d)`` and the cell volume."""
    lo, hi = (np.asarray(v, float) for v in box)
    axes = [lo[i] + (np.arange(n) + 0.5) * (hi[i] - lo[i]) / n for i in range(len(lo))]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    return pts, float(np.prod((hi - lo) / n)), axes


def _density(obj):
    return obj.density if hasattr(obj, "density") else obj


def evaluate_model(model, reference, spec: EvalSpec, sde_name: str = "", model_name: str = "") -> MetricSeries:
    f_model = _density(model)
    out = MetricSeries(sde_name or getattr(reference, "name", ""), model_name or type(model).__name__)
    rng = np.random.default_rng(spec.seed)

    if isinstance(reference, AdiSolution):
        s = spec.adi_stride
        x1, x2 = reference.x1[::s], reference.x2[::s]
        g1, g2 = np.meshgrid(x1, x2, indexing="ij")
        pts = np.stack([g1.ravel(), g2.ravel()], axis=1)
        vol = (reference.delta * s) ** 2
        for t in spec.times:
            p_star = reference.slice(t)[::s, ::s].ravel()
            p_th = f_model(pts, t)
            out.records.append((float(t), relative_l2(p_star, p_th), kl_grid(p_star, p_th, vol)))
        return out

    d = reference.d
    if spec.mode == "grid":
        if d > 4:
            raise ValueError("grid evaluation is limited to d <= 4")
        n = spec.n_eval or GRID_DEFAULTS[d]
        box = spec.box if spec.box is not None else reference.box
        pts, vol, _ = cell_centered_grid(box, n)
        for t in spec.times:
            p_star = reference(pts, t)
            p_th = f_model(pts, t)
            out.records.append((float(t), relative_l2(p_star, p_th), kl_grid(p_star, p_th, vol)))
        return out

    n = spec.n_eval or SAMPLE_DEFAULT
    sampler = spec.sampler or getattr(reference, "sample", None)
    if sampler is None:
        raise DegenerateReference("sample mode needs a sampler for the reference")
    for t in spec.times:
        pts = sampler(n, t, rng)
        p_star = reference(pts, t)
        p_th = f_model(pts, t)
        out.records.append((float(t), relative_l2(p_star, p_th), kl_sample(p_star, p_th)))
    return out
