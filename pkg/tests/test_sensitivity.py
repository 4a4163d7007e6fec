import numpy as np
import pytest

from flowkac.errors import HessianBudgetExceeded, MissingDerivative
from flowkac.models import catalog, flowkac_transform
from flowkac.paths import TimeGrid, euler_maruyama, make_brownian
from flowkac.sensitivity import propagate, taylor_reconstruct, taylor_values
from dataclasses import replace


def _setup(name, params=None, n_W=20, T=0.5):
    sde = catalog(name, params)
    fk = flowkac_transform(sde)
    g = TimeGrid.from_dt(T, 1e-3, [0.25 * T, T])
    return sde, fk, g, make_brownian(11, n_W, sde.m, g)


def test_affine_order1_reconstruction_is_exact():
    sde, fk, g, b = _setup("ou2d")
    sens = propagate(fk, [0.3, -0.2], b, g, order=1)
    x = np.array([1.5, 0.7])
    direct = euler_maruyama(fk, x, b, g).values
    rec = taylor_reconstruct(sens, x)
    assert rec.reconstructed
    assert np.allclose(rec.values, direct, rtol=1e-12, atol=1e-12)


def test_zero_offset_gives_base_paths():
    sde, fk, g, b = _setup("duffing")
    sens = propagate(fk, [0.5, 7.0], b, g, order=2)
    vals = taylor_values(sens, np.array([[0.5, 7.0]]))[0]
    assert np.array_equal(vals, sens.base_paths.values)


def test_per_point_query_selection():
    sde, fk, g, b = _setup("gbm2d")
    sens = propagate(fk, [1.0, 1.0], b, g, order=1)
    x = np.array([[1.2, 0.8], [0.9, 1.4]])
    full = taylor_values(sens, x)
    picked = taylor_values(sens, x, np.array([1, 0]))
    assert np.allclose(picked[0], full[0, :, 1])
    assert np.allclose(picked[1], full[1, :, 0])


def test_jacobian_identity_at_time_zero():
    sde, fk, _, b = _setup("duffing")
    g = b.grid.with_queries([0.0, 0.5])
    sens = propagate(fk, [0.0, 8.0], b, g, order=2)
    assert np.allclose(sens.jac[:, 0], np.eye(2))
    assert np.allclose(sens.hess[:, 0], 0.0)


def test_missing_second_derivatives():
    sde = catalog("gbm1d")
    broken = replace(sde, diffusion_hess=None)
    fk = flowkac_transform(broken)
    g = TimeGrid.from_dt(0.1, 1e-3, [0.1])
    with pytest.raises(MissingDerivative):
        propagate(fk, [1.0], make_brownian(0, 4, 1, g), g, order=2)
    # order 1 never needs them
    propagate(fk, [1.0], make_brownian(0, 4, 1, g), g, order=1)


def test_hessian_budget(monkeypatch):
    from flowkac import sensitivity

    monkeypatch.setattr(sensitivity, "HESSIAN_ENTRY_CAP", 100)
    sde, fk, g, b = _setup("duffing")
    with pytest.raises(HessianBudgetExceeded):
        propagate(fk, [0.0, 8.0], b, g, order=2)


def test_bad_order():
    sde, fk, g, b = _setup("ou2d")
    with pytest.raises(ValueError):
        propagate(fk, [0.0, 0.0], b, g, order=3)
