"""Shared fixtures: an on-disk cache of trained desk models and the criterion report."""

import hashlib
import json
import time
from pathlib import Path

import numpy as np
import pytest

from flowkac import config as cfgmod
from flowkac.reference import AdiSolution, adi_duffing
from flowkac.tnf import load_checkpoint, save_checkpoint
from flowkac.training import MlpModel, train, train_mlp_baseline

ROOT = Path(__file__).resolve().parent.parent
CONFIGS = ROOT / "configs"
CACHE = Path(__file__).resolve().parent / ".model_cache"

_RESULTS: dict = {}


def source_digest() -> str:
    h = hashlib.sha256()
    for p in sorted((ROOT / "src" / "flowkac").glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:12]


def load_config(name: str, overrides: dict | None = None) -> cfgmod.ExperimentConfig:
    cfg = cfgmod.load(CONFIGS / f"{name}.cfg")
    if overrides:
        values = json.loads(json.dumps(cfg.values))
        for section, kv in overrides.items():
            values[section].update(kv)
        cfg = cfgmod.ExperimentConfig(values)
        cfgmod.validate(cfg)
    return cfg


def cache_path(name: str, overrides: dict | None = None, kind: str = "flow") -> Path:
    cfg = load_config(name, overrides)
    key = hashlib.sha256((cfg.canonical() + kind + source_digest()).encode()).hexdigest()[:16]
    return CACHE / (f"{name}-{key}.tnf" if kind == "flow" else f"{name}-mlp-{key}.npz")


def trained(name: str, overrides: dict | None = None, kind: str = "flow"):
    """Train (or fetch from cache) a desk model; returns (model, losses, seconds, cfg)."""
    cfg = load_config(name, overrides)
    path = cache_path(name, overrides, kind)
    CACHE.mkdir(exist_ok=True)
    sde, tc = cfg.sde(), cfg.train_config()
    if kind == "flow":
        if path.exists():
            model, extra = load_checkpoint(path, expect=tc.flow_config(sde))
            return model, extra["losses"], extra["seconds"], cfg
        t0 = time.perf_counter()
        model, report = train(sde, tc)
        seconds = time.perf_counter() - t0
        save_checkpoint(model, path, extra={"losses": report.losses, "seconds": seconds})
        return model, report.losses, seconds, cfg
    if path.exists():
        z = np.load(path)
        model = MlpModel(sde.d, tc.width, tc.horizon(sde), theta=z["theta"])
        return model, z["losses"].tolist(), float(z["seconds"]), cfg
    t0 = time.perf_counter()
    model, report = train_mlp_baseline(sde, tc)
    seconds = time.perf_counter() - t0
    np.savez(path, theta=model.theta, losses=np.array(report.losses), seconds=seconds)
    return model, report.losses, seconds, cfg


def duffing_adi(delta: float = 0.05, h: float = 1e-4) -> AdiSolution:
    """ADI reference at t in {0, 0.5, 1}, cached as .npz."""
    key = hashlib.sha256(f"{delta}-{h}-{source_digest()}".encode()).hexdigest()[:16]
    CACHE.mkdir(exist_ok=True)
    path = CACHE / f"adi-{key}.npz"
    if path.exists():
        z = np.load(path)
        return AdiSolution(z["x1"], z["x2"], z["times"], z["density"], float(z["h"]), float(z["delta"]),
                           float(z["omega"]), int(z["clip_count"]), z["mass"])
    sol = adi_duffing(omega=1.0, delta=delta, h=h, T=1.0, store_times=(0.0, 0.5, 1.0))
    np.savez(path, x1=sol.x1, x2=sol.x2, times=sol.times, density=sol.density, h=sol.h, delta=sol.delta,
             omega=sol.omega, clip_count=sol.clip_count, mass=sol.mass)
    return sol


# ------------------------------------------------------------------ criterion report


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    n, title = mark.args
    if rep.when == "setup" and rep.passed:
        return
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    _RESULTS[n] = (title, "PASS" if rep.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        title, status, detail = _RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d} {status}  {title}" + (f"  [{detail}]" if detail else ""))
