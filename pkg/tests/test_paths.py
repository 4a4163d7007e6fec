import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowkac import paths as P
from flowkac.errors import LengthMismatch, NonFinitePath
from flowkac.models import catalog, flowkac_transform
from flowkac.paths import TimeGrid, euler_maruyama, integrate, make_brownian, simulate_starts


def test_time_grid_snaps_queries():
    g = TimeGrid.from_dt(1.0, 1e-3, [0.0, 0.2504, 0.5, 1.0])
    assert g.n_steps == 1000
    assert g.query_steps.tolist() == [0, 250, 500, 1000]
    assert g.snap_distance == pytest.approx(4e-4)
    assert g.query_times[1] == pytest.approx(0.25)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 3), min_size=1, max_size=8))
def test_snapped_times_are_nodes_within_half_step(times):
    g = TimeGrid.from_dt(3.0, 1e-3, times)
    assert np.all(np.abs(g.query_times - np.asarray(times)) <= 0.5e-3 + 1e-12)
    assert np.allclose(g.query_times, g.query_steps * g.dt)


def test_bundle_is_deterministic_and_blockwise():
    g = TimeGrid.from_dt(1.0, 1e-3)
    a = make_brownian(7, 5, 2, g)
    b = make_brownian(7, 5, 2, g)
    assert np.array_equal(a.increments, b.increments)
    lazy = P.BrownianBundle(7, 5, 2, g)  # never stored: regenerated per block
    assert np.array_equal(lazy.increments, a.increments)
    assert a.increments.shape == (5, 1000, 2)
    assert not np.array_equal(make_brownian(8, 5, 2, g).increments, a.increments)


def test_bundle_variance():
    g = TimeGrid.from_dt(1.0, 1e-3)
    inc = make_brownian(0, 2000, 1, g).increments
    assert inc.var() == pytest.approx(1e-3, rel=0.01)


def test_stored_increments_are_read_only():
    g = TimeGrid.from_dt(0.1, 1e-3)
    b = make_brownian(0, 3, 1, g)
    with pytest.raises(ValueError):
        b.increments[0, 0, 0] = 1.0


def test_deterministic_limit_matches_euler_recursion():
    # sigma = 0: the FlowKac OU drift -a x is integrated by explicit Euler
    fk = flowkac_transform(catalog("ou_nd", {"d": 2, "a": -0.5, "sigma": 0.0}))
    g = TimeGrid.from_dt(1.0, 1e-3, [1.0])
    paths = euler_maruyama(fk, [1.0, 2.0], make_brownian(0, 3, 2, g), g)
    factor = (1 + 0.5 * 1e-3) ** 1000
    assert np.allclose(paths.values[:, 0], np.array([1.0, 2.0]) * factor, rtol=1e-12)


def test_shared_noise_across_starts():
    fk = flowkac_transform(catalog("ou2d"))
    g = TimeGrid.from_dt(0.5, 1e-3, [0.5])
    b = make_brownian(3, 4, 2, g)
    vals, logw = simulate_starts(fk, np.array([[0.0, 0.0], [1.0, -1.0]]), b, g)
    assert logw is None  # q is constant
    one = euler_maruyama(fk, [1.0, -1.0], b, g).values
    assert np.array_equal(vals[1], one)


def test_positive_clamp():
    fk = flowkac_transform(catalog("gbm1d", {"mu": 0.0, "sigma": 3.0}))
    g = TimeGrid.from_dt(1.0, 0.05, [1.0])
    vals, _ = simulate_starts(fk, np.array([[1e-3]]), make_brownian(0, 500, 1, g), g)
    assert vals.min() >= P.POSITIVE_FLOOR


def test_mismatched_bundle():
    fk = flowkac_transform(catalog("ou2d"))
    g = TimeGrid.from_dt(1.0, 1e-3)
    with pytest.raises(LengthMismatch):
        euler_maruyama(fk, [0.0, 0.0], make_brownian(0, 2, 1, g), g)
    with pytest.raises(LengthMismatch):
        euler_maruyama(fk, [0.0, 0.0], make_brownian(0, 2, 2, TimeGrid.from_dt(1.0, 1e-2)), g)


@pytest.mark.filterwarnings("ignore:overflow encountered:RuntimeWarning")
def test_non_finite_start_and_blowup():
    fk = flowkac_transform(catalog("ou2d"))
    g = TimeGrid.from_dt(1.0, 1e-3)
    with pytest.raises(NonFinitePath):
        euler_maruyama(fk, [np.nan, 0.0], make_brownian(0, 2, 2, g), g)
    # Duffing's cubic term blows up from a far start with a coarse step
    fk = flowkac_transform(catalog("duffing"))
    g = TimeGrid.from_dt(1.0, 0.1, [1.0])
    with pytest.raises(NonFinitePath) as err:
        euler_maruyama(fk, [1e3, 0.0], make_brownian(0, 2, 2, g), g)
    assert err.value.step > 0


def test_q_integral_tracked_when_requested():
    fk = flowkac_transform(catalog("duffing"))
    g = TimeGrid.from_dt(1.0, 1e-3, [0.5, 1.0])
    got = {}

    def on_query(j, state, lw):
        got[j] = lw.copy()

    integrate(fk, np.zeros((1, 2)), make_brownian(0, 3, 2, g), g, on_query, track_q=True)
    # q = -0.4 for omega = 1, so -int q = 0.4 t
    assert np.allclose(got[0], 0.2)
    assert np.allclose(got[1], 0.4)
