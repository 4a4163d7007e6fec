import numpy as np
import pytest

from flowkac.errors import LengthMismatch
from flowkac.feynman_kac import fk_density, fk_grid_targets, fk_targets_batch
from flowkac.models import catalog, flowkac_transform
from flowkac.paths import TimeGrid, euler_maruyama, make_brownian
from flowkac.reference import gbm1d_density
from flowkac.sensitivity import propagate


def test_t0_returns_psi_exactly():
    sde = catalog("ou2d")
    fk = flowkac_transform(sde)
    g = TimeGrid.from_dt(1.0, 1e-3, [0.0, 1.0])
    x = np.array([[1.0, 0.5], [0.0, 0.0]])
    vals, var = fk_grid_targets(fk, x, make_brownian(0, 10, 2, g), g)
    assert np.allclose(vals[:, 0], sde.psi(x))
    assert np.allclose(var[:, 0], 0.0)


def test_gbm1d_estimate_close_to_closed_form():
    fk = flowkac_transform(catalog("gbm1d"))
    g = TimeGrid.from_dt(1.0, 1e-3, [0.5, 1.0])
    paths = euler_maruyama(fk, [1.0], make_brownian(1, 4000, 1, g), g)
    est, var = fk_density(fk, paths, g, return_variance=True)
    exact = [gbm1d_density(0.25, 0.5, 1.0, t) for t in (0.5, 1.0)]
    assert np.all(np.abs(est - exact) < 4 * np.sqrt(var))


def test_naive_and_trick_targets_agree_for_affine():
    fk = flowkac_transform(catalog("gbm2d"))
    g = TimeGrid.from_dt(1.0, 1e-3, [0.3, 1.0])
    b = make_brownian(2, 50, 1, g)
    x = np.array([[0.5, 2.0], [3.0, 1.0], [1.0, 1.0]])
    naive, _ = fk_grid_targets(fk, x, b, g)
    sens = propagate(fk, [3.0, 3.0], b, g, order=1)
    trick, _ = fk_grid_targets(fk, x, b, g, sens=sens)
    assert np.allclose(trick, naive, rtol=1e-9)
    batch = fk_targets_batch(fk, (x, np.array([1.0, 0.3, 1.0])), sens, b, g)
    assert np.allclose(batch.values, naive[[0, 1, 2], [1, 0, 1]], rtol=1e-9)


def test_batch_without_sensitivities_matches_grid():
    fk = flowkac_transform(catalog("duffing"))
    g = TimeGrid.from_dt(0.5, 1e-3, [0.25, 0.5])
    b = make_brownian(4, 30, 2, g)
    x = np.array([[0.0, 8.0], [0.5, 7.5]])
    grid, _ = fk_grid_targets(fk, x, b, g)
    batch = fk_targets_batch(fk, (np.repeat(x, 2, 0), np.array([0.25, 0.5, 0.25, 0.5])), None, b, g)
    assert np.allclose(batch.values, grid.ravel())
    assert batch.n_W == 30


def test_off_grid_time_rejected():
    fk = flowkac_transform(catalog("ou2d"))
    g = TimeGrid.from_dt(1.0, 1e-3, [0.5])
    b = make_brownian(0, 5, 2, g)
    with pytest.raises(LengthMismatch):
        fk_targets_batch(fk, (np.zeros((1, 2)), np.array([0.7])), None, b, g)
    with pytest.raises(LengthMismatch):
        fk_targets_batch(fk, (np.zeros((2, 2)), np.array([0.5])), None, b, g)


def test_chunking_does_not_change_results(monkeypatch):
    from flowkac import feynman_kac

    fk = flowkac_transform(catalog("ou2d"))
    g = TimeGrid.from_dt(0.2, 1e-3, [0.2])
    b = make_brownian(0, 40, 2, g)
    x = np.random.default_rng(0).uniform(-2, 2, (9, 2))
    whole, _ = fk_grid_targets(fk, x, b, g)
    monkeypatch.setattr(feynman_kac, "CHUNK_ENTRIES", 100)
    chunked, _ = fk_grid_targets(fk, x, b, g)
    assert np.allclose(whole, chunked, rtol=1e-13)


def test_thread_pool_matches_serial(monkeypatch):
    from flowkac import feynman_kac

    fk = flowkac_transform(catalog("gbm1d"))
    g = TimeGrid.from_dt(0.2, 1e-3, [0.2])
    b = make_brownian(0, 40, 1, g)
    x = np.linspace(0.5, 3, 12)[:, None]
    monkeypatch.setattr(feynman_kac, "CHUNK_ENTRIES", 80)
    serial, _ = fk_grid_targets(fk, x, b, g)
    monkeypatch.setenv("FLOWKAC_THREADS", "3")
    threaded, _ = fk_grid_targets(fk, x, b, g)
    assert np.array_equal(serial, threaded)
