"""Fitting the flow (or an MLP) to Feynman-Kac targets."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from .errors import NonFiniteGradient, TrainingDiverged
from .feynman_kac import fk_grid_targets, fk_targets_batch
from .models import SdeSpec, flowkac_transform
from .optim import AdamState, adam_step
from .paths import TimeGrid, make_brownian
from .sensitivity import propagate
from .tnf import FlowConfig, Mlp, TnfModel, _Registry, save_checkpoint

MODES = ("naive", "trick", "dynamic_ref")
DIVERGENCE_PATIENCE = 3
ADAPTIVE_ATTEMPTS = 10


@dataclass(frozen=True)
class AdaptiveConfig:
    enabled: bool = False
    warmup_epochs: int = 50
    mix_ratio: float = 0.5
    every: int = 10


@dataclass(frozen=True)
class TrainConfig:
    n_x: int = 2000
    n_t: int = 10
    n_W: int = 300
    n_epochs: int = 50
    batch_size: int = 2000
    lr: float = 1e-3
    box: tuple | None = None  # (lo, hi); the SDE's catalog box when None
    T: float | None = None  # catalog horizon when None
    mode: str = "trick"
    taylor_order: int = 1
    adaptive: AdaptiveConfig = field(default_factory=AdaptiveConfig)
    seed: int = 0
    depth: int = 4
    width: int = 32
    n_bins: int = 32
    dt: float = 1e-3
    x_ref: tuple | None = None  # trick mode; box centroid when None
    checkpoint_every: int = 0
    checkpoint_path: str | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.n_x * self.n_t < self.batch_size:
            raise ValueError("n_x * n_t must be at least batch_size")
        if not 0.0 <= self.adaptive.mix_ratio <= 1.0:
            raise ValueError("mix_ratio must lie in [0, 1]")
        if self.taylor_order not in (1, 2):
            raise ValueError("taylor_order must be 1 or 2")

    def resolved_box(self, sde: SdeSpec):
        if self.box is None:
            return np.asarray(sde.box[0], float), np.asarray(sde.box[1], float)
        lo, hi = self.box
        return np.broadcast_to(np.asarray(lo, float), (sde.d,)).copy(), np.broadcast_to(
            np.asarray(hi, float), (sde.d,)
        ).copy()

    def horizon(self, sde: SdeSpec) -> float:
        return float(self.T if self.T is not None else sde.horizon)

    def flow_config(self, sde: SdeSpec) -> FlowConfig:
        lo, hi = self.resolved_box(sde)
        return FlowConfig(
            d=sde.d, box_lo=tuple(lo), box_hi=tuple(hi), depth=self.depth, width=self.width,
            n_bins=self.n_bins, t_max=self.horizon(sde),
        )


@dataclass
class TrainReport:
    losses: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    checkpoint: str | None = None

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float("nan")

    @property
    def best_loss(self) -> float:
        return min(self.losses) if self.losses else float("nan")

    def write_csv(self, path, header: str = "") -> None:
        with open(path, "w", newline="") as fh:
            if header:
                fh.write(header)
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "loss", "seconds"])
            for i, (l, s) in enumerate(zip(self.losses, self.seconds)):
                w.writerow([i, repr(float(l)), repr(float(s))])


def loss_empirical(model, batch, targets) -> float:
    x, t = batch
    targets = np.asarray(targets, float).reshape(-1)
    p = model.density(x, t)
    if p.shape != targets.shape:
        raise ValueError("batch and targets differ in length")
    return float(np.mean((p - targets) ** 2)) if targets.size else 0.0


# ------------------------------------------------------------------ MLP


class MlpModel:
    """Plain regression net (x, t) -> scalar; nothing forces a density."""

    def __init__(self, d: int, width: int = 32, t_max: float = 1.0, theta=None, seed: int = 0):
        self.d, self.width, self.t_max = d, width, t_max
        reg = _Registry()
        self.net = Mlp(reg, "mlp", d + 1, width, 1)
        self.n_params = reg.n
        if theta is None:
            theta = np.zeros(reg.n)
            self.net.init(theta, np.random.default_rng(seed))
        self.theta = np.asarray(theta, float)

    def with_theta(self, theta) -> "MlpModel":
        return MlpModel(self.d, self.width, self.t_max, np.array(theta, float))

    def _inputs(self, x, t):
        x = np.atleast_2d(np.asarray(x, float)).reshape(-1, self.d)
        t = np.broadcast_to(np.asarray(t, float), (len(x),)) / self.t_max
        return torch.from_numpy(np.concatenate([x, t[:, None]], axis=1))

    def density(self, x, t) -> np.ndarray:
        with torch.no_grad():
            return self.net(torch.from_numpy(self.theta), self._inputs(x, t))[:, 0].numpy()

    __call__ = density

    def value_and_backprop(self, x, t, target):
        theta = torch.tensor(self.theta, requires_grad=True)
        p = self.net(theta, self._inputs(x, t))[:, 0]
        loss = ((p - torch.from_numpy(np.asarray(target, float))) ** 2).mean()
        loss.backward()
        g = theta.grad.numpy().copy()
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient("non-finite parameter gradient")
        return float(loss.detach()), g, p.detach().numpy()


# ------------------------------------------------------------------ sampling


def uniform_points(n: int, box, rng) -> np.ndarray:
    lo, hi = (np.asarray(v, float) for v in box)
    return lo + (hi - lo) * rng.random((int(n), len(lo)))


def adaptive_resample(model: TnfModel, n_x: int, mix_ratio: float, box, rng, T: float = 1.0) -> np.ndarray:
    """Mix of flow samples (at uniform random times) and uniform box points."""
    lo, hi = (np.asarray(v, float) for v in box)
    n_flow = int(round(mix_ratio * n_x))
    out = [uniform_points(n_x - n_flow, box, rng)]
    if n_flow:
        t = rng.uniform(0.0, T, n_flow)
        pts = np.empty((n_flow, len(lo)))
        pending = np.arange(n_flow)
        for _ in range(ADAPTIVE_ATTEMPTS):
            cand = _sample_at_times(model, t[pending], rng)
            pts[pending] = cand
            inside = np.all((cand >= lo) & (cand <= hi), axis=1)
            pending = pending[~inside]
            if pending.size == 0:
                break
        if pending.size:
            pts[pending] = uniform_points(pending.size, box, rng)
        out.append(pts)
    return np.concatenate(out, axis=0)


def _sample_at_times(model: TnfModel, t: np.ndarray, rng) -> np.ndarray:
    """Invert the flow at per-point times; out-of-range draws land outside the box."""
    if len(t) == 0:
        return np.zeros((0, model.d))
    z = rng.standard_normal((len(t), model.d))
    return model.inverse(z, t, out_of_range="extend")


# ------------------------------------------------------------------ loop


def _epoch_points(cfg, sde, box, T, epoch, rng, model, state):
    ad = cfg.adaptive
    if ad.enabled and epoch >= ad.warmup_epochs and model is not None:
        if state.get("pool") is None or (epoch - ad.warmup_epochs) % ad.every == 0:
            n_flow = int(round(ad.mix_ratio * cfg.n_x))
            state["pool"] = adaptive_resample(model, n_flow, 1.0, box, rng, T) if n_flow else None
        pool = state["pool"]
        n_pool = 0 if pool is None else len(pool)
        parts = [uniform_points(cfg.n_x - n_pool, box, rng)]
        if n_pool:
            parts.append(pool)
        x = np.concatenate(parts)
    else:
        x = uniform_points(cfg.n_x, box, rng)
    t = rng.uniform(0.0, T, cfg.n_t)
    return x, t


def _train(sde: SdeSpec, cfg: TrainConfig, model, log=None, x_ref=None):
    fk = flowkac_transform(sde)
    box = cfg.resolved_box(sde)
    T = cfg.horizon(sde)
    if cfg.mode == "trick":
        x_ref = np.asarray(x_ref if x_ref is not None else (cfg.x_ref if cfg.x_ref is not None else 0.5 * (box[0] + box[1])), float)
    adam = AdamState.like(model.theta)
    report = TrainReport()
    state: dict = {}
    bad = 0

    for epoch in range(cfg.n_epochs):
        t0 = time.perf_counter()
        rng = np.random.default_rng([cfg.seed, epoch])
        x, t_raw = _epoch_points(cfg, sde, box, T, epoch, rng, model if isinstance(model, TnfModel) else None, state)
        grid = TimeGrid.from_dt(T, cfg.dt, t_raw)
        tq = grid.query_times
        bundle = make_brownian(cfg.seed + epoch, cfg.n_W, sde.m, grid)
        n_pairs = len(x) * len(tq)
        xi, ti = np.divmod(rng.permutation(n_pairs), len(tq))

        if cfg.mode == "naive":
            table, _ = fk_grid_targets(fk, x, bundle, grid)
        elif cfg.mode == "trick":
            sens = propagate(fk, x_ref, bundle, grid, cfg.taylor_order)

        total, count = 0.0, 0
        for lo_i in range(0, n_pairs, cfg.batch_size):
            sl = slice(lo_i, min(n_pairs, lo_i + cfg.batch_size))
            bx, bt = x[xi[sl]], tq[ti[sl]]
            if cfg.mode == "naive":
                target = table[xi[sl], ti[sl]]
            else:
                if cfg.mode == "dynamic_ref":
                    sens = propagate(fk, bx.mean(axis=0), bundle, grid, cfg.taylor_order)
                target = fk_targets_batch(fk, (bx, bt), sens, bundle, grid).values
            try:
                loss, grad, _ = model.value_and_backprop(bx, bt, target)
            except (NonFiniteGradient, FloatingPointError):
                loss, grad = float("nan"), None
            if not math.isfinite(loss) or grad is None:
                bad += 1
                if bad >= DIVERGENCE_PATIENCE:
                    raise TrainingDiverged(f"non-finite loss in {bad} consecutive batches (epoch {epoch})")
                continue
            bad = 0
            model.theta = adam_step(adam, model.theta, grad, cfg.lr)
            total += loss * (sl.stop - sl.start)
            count += sl.stop - sl.start
        report.losses.append(total / count if count else float("nan"))
        report.seconds.append(time.perf_counter() - t0)
        if log is not None:
            log(epoch, report.losses[-1], report.seconds[-1])
        if cfg.checkpoint_every and cfg.checkpoint_path and isinstance(model, TnfModel):
            if (epoch + 1) % cfg.checkpoint_every == 0 or epoch + 1 == cfg.n_epochs:
                report.checkpoint = str(save_checkpoint(model, cfg.checkpoint_path))
    return model, report


def _fresh_model(sde, cfg) -> TnfModel:
    return TnfModel(cfg.flow_config(sde), seed=cfg.seed)


def train_naive(sde: SdeSpec, cfg: TrainConfig, log=None):
    if cfg.mode != "naive":
        cfg = replace(cfg, mode="naive")
    return _train(sde, cfg, _fresh_model(sde, cfg), log)


def train_trick(sde: SdeSpec, cfg: TrainConfig, x_ref=None, log=None):
    if cfg.mode != "trick":
        cfg = replace(cfg, mode="trick")
    return _train(sde, cfg, _fresh_model(sde, cfg), log, x_ref=x_ref)


def train_dynamic(sde: SdeSpec, cfg: TrainConfig, log=None):
    if cfg.mode != "dynamic_ref":
        cfg = replace(cfg, mode="dynamic_ref")
    return _train(sde, cfg, _fresh_model(sde, cfg), log)


def train(sde: SdeSpec, cfg: TrainConfig, log=None):
    return {"naive": train_naive, "trick": train_trick, "dynamic_ref": train_dynamic}[cfg.mode](sde, cfg, log=log)


def train_mlp_baseline(sde: SdeSpec, cfg: TrainConfig, log=None):
    model = MlpModel(sde.d, cfg.width, cfg.horizon(sde), seed=cfg.seed)
    return _train(sde, replace(cfg, adaptive=AdaptiveConfig()), model, log)


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
