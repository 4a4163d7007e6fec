import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from flowkac.errors import InversionOutOfRange, ManifestMismatch, NonFiniteActivation
from flowkac.tnf import (
    ActnormLayer,
    FlowConfig,
    TnfModel,
    _Registry,
    base_logpdf,
    load_checkpoint,
    save_checkpoint,
)


def _random_model(d, seed=0, scale=0.3, **kw):
    cfg = FlowConfig(d=d, box_lo=-2.0, box_hi=3.0, depth=kw.pop("depth", 3), n_bins=kw.pop("n_bins", 8), **kw)
    m = TnfModel(cfg, seed=seed)
    rng = np.random.default_rng(seed + 100)
    return m.with_theta(m.theta + scale * rng.standard_normal(m.n_params))


def _fd_jacobian(model, x, t, eps=1e-6):
    d = x.shape[1]
    cols = [
        (model.forward(x + eps * e, t)[0] - model.forward(x - eps * e, t)[0])[0] / (2 * eps) for e in np.eye(d)
    ]
    return np.stack(cols, axis=1)


def test_identity_model_is_squash_then_affine():
    cfg = FlowConfig(d=2, box_lo=(0.0, -1.0), box_hi=(5.0, 1.0))
    m = TnfModel(cfg, seed=3)
    x = np.array([[1.0, 0.0], [4.5, -0.9]])
    z, ld = m.forward(x, 0.3)
    u = (x - np.array([0.0, -1.0])) / np.array([5.0, 2.0])
    assert np.allclose(z, 4.0 * (2 * u - 1))
    # only the constant squash/re-centre Jacobian remains
    assert np.allclose(ld, np.log(8 / 5) + np.log(8 / 2))
    assert np.allclose(m.log_density(x, 0.3), base_logpdf(z) + ld)


def test_base_logpdf_origin():
    assert base_logpdf(np.zeros((1, 2)))[0] == pytest.approx(-math.log(2 * math.pi))


def test_single_actnorm_scales():
    reg = _Registry()
    layer = ActnormLayer(reg, 0, 3)
    theta = torch.zeros(reg.n, dtype=torch.float64)
    theta[:3] = math.log(2.0)
    x = torch.tensor([[1.0, -2.0, 0.5]], dtype=torch.float64)
    y, ld = layer.forward(theta, x, None)
    assert torch.allclose(y, 2 * x)
    assert float(ld[0]) == pytest.approx(3 * math.log(2))
    assert torch.allclose(layer.inverse(theta, y, None), x)


def test_single_actnorm_gradient_closed_form():
    # p(x) = phi(a x + b) a with a = exp(s); d/ds and d/db by hand
    reg = _Registry()
    layer = ActnormLayer(reg, 0, 1)
    s, b, x0 = 0.3, -0.4, 0.7
    theta = torch.tensor([s, b], dtype=torch.float64, requires_grad=True)
    y, ld = layer.forward(theta, torch.tensor([[x0]], dtype=torch.float64), None)
    p = torch.exp(-0.5 * y[0, 0] ** 2 - 0.5 * math.log(2 * math.pi) + ld[0])
    p.backward()
    a = math.exp(s)
    z = a * x0 + b
    phi = math.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
    dp_ds = phi * a * (1 - z * a * x0)
    dp_db = -phi * a * z
    assert theta.grad[0].item() == pytest.approx(dp_ds, abs=1e-12)
    assert theta.grad[1].item() == pytest.approx(dp_db, abs=1e-12)


@pytest.mark.parametrize("d", [1, 2, 3, 5])
def test_round_trip(d):
    m = _random_model(d, seed=d)
    rng = np.random.default_rng(d)
    x = rng.uniform(-2, 3, (1000, d))
    t = rng.uniform(0, 1, 1000)
    z, _ = m.forward(x, t)
    assert np.abs(m.inverse(z, t) - x).max() <= 1e-6
    zz = rng.standard_normal((1000, d))
    back = m.inverse(zz, t, out_of_range="extend")
    assert np.abs(m.forward(back, t)[0] - zz).max() <= 1e-6


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(0, 10_000), st.floats(0, 1))
def test_logdet_matches_finite_difference_jacobian(d, seed, t):
    m = _random_model(d, seed=seed % 50)
    x = np.random.default_rng(seed).uniform(-1.8, 2.8, (1, d))
    _, ld = m.forward(x, t)
    J = _fd_jacobian(m, x, t)
    assert ld[0] == pytest.approx(np.log(abs(np.linalg.det(J))), abs=1e-4)


def test_logdet_is_sum_of_layer_logdets():
    m = _random_model(3)
    x = np.random.default_rng(1).uniform(-2, 3, (20, 3))
    _, ld = m.forward(x, 0.4)
    parts = m.layer_logdets(x, 0.4)
    assert len(parts) == 1 + 2 * m.cfg.depth
    assert np.allclose(sum(parts), ld, atol=1e-10)


def test_time_conditioning_changes_density_but_not_t():
    m = _random_model(2)
    x = np.array([[0.1, 0.2]])
    assert m.log_density(x, 0.0)[0] != pytest.approx(m.log_density(x, 1.0)[0])


def test_uniform_cdf_is_identity_on_unit_interval():
    m = TnfModel(FlowConfig(d=1, box_lo=0.0, box_hi=1.0, depth=0, n_bins=10))
    u = np.linspace(0, 1, 11)[:, None]
    F, f = m.cdf_layer.cdf(torch.from_numpy(m.theta), torch.from_numpy(u))
    assert np.allclose(F.numpy(), u) and np.allclose(f.numpy(), 1.0)
    back = m.cdf_layer.cdf_inverse(torch.from_numpy(m.theta), F)
    assert np.allclose(back.numpy(), u)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000))
def test_cdf_monotone_and_pinned(seed):
    m = _random_model(2, seed=seed % 30, scale=1.0)
    th = torch.from_numpy(m.theta)
    u = torch.from_numpy(np.tile(np.linspace(0, 1, 201)[:, None], (1, 2)))
    F, f = m.cdf_layer.cdf(th, u)
    F = F.numpy()
    assert np.allclose(F[0], 0.0) and np.allclose(F[-1], 1.0)
    assert np.all(np.diff(F, axis=0) > 0) and np.all(f.numpy() > 0)


def test_cdf_inverse_raises_out_of_range():
    m = _random_model(2)
    with pytest.raises(InversionOutOfRange):
        m.inverse(np.array([[50.0, 0.0]]), 0.5)
    x = m.inverse(np.array([[50.0, 0.0]]), 0.5, out_of_range="clamp")
    assert np.all(x >= -2) and np.all(x <= 3)


@pytest.mark.parametrize("t", [0.0, 0.25, 0.5, 0.75, 1.0])
def test_random_1d_model_integrates_to_one(t):
    cfg = FlowConfig(d=1, box_lo=0.0, box_hi=5.0, depth=3, n_bins=16)
    m0 = TnfModel(cfg, seed=2)
    m = m0.with_theta(m0.theta + 0.1 * np.random.default_rng(2).standard_normal(m0.n_params))
    xs = np.linspace(0, 5, 2000)
    assert np.trapezoid(m.density(xs, t), xs) == pytest.approx(1.0, abs=1e-2)


def test_gradient_zero_residuals():
    m = _random_model(2)
    assert not np.any(m.backprop(np.zeros((3, 2)), 0.5, np.zeros(3)))


@pytest.mark.parametrize("block", ["actnorm0.log_a", "actnorm1.b", "coupling0.net.w1", "coupling1.net.w3",
                                   "coupling2.net.b3", "coupling0.beta", "cdf.v"])
def test_gradient_matches_central_differences(block):
    m = _random_model(2, seed=4)
    rng = np.random.default_rng(5)
    x = rng.uniform(-2, 3, (6, 2))
    t = rng.uniform(0, 1, 6)
    r = rng.standard_normal(6)
    g = m.backprop(x, t, r)
    idx = m.slot_index(block)
    probe = rng.choice(idx, size=min(16, len(idx)), replace=False)
    f = lambda th: float(np.sum(r * m.with_theta(th).density(x, t)))
    for i in probe:
        h = 1e-5 * (1 + abs(m.theta[i]))
        e = np.zeros(m.n_params)
        e[i] = h
        fd = (f(m.theta + e) - f(m.theta - e)) / (2 * h)
        assert abs(g[i] - fd) <= 1e-4 * max(abs(fd), 1e-3)


def test_value_and_backprop_consistent_with_backprop():
    m = _random_model(2, seed=6)
    rng = np.random.default_rng(7)
    x, t, target = rng.uniform(-2, 3, (5, 2)), rng.uniform(0, 1, 5), rng.uniform(0, 0.2, 5)
    loss, g, p = m.value_and_backprop(x, t, target)
    assert loss == pytest.approx(np.mean((m.density(x, t) - target) ** 2))
    assert np.allclose(g, m.backprop(x, t, 2 * (p - target) / 5))


def test_sampling():
    cfg = FlowConfig(d=2, box_lo=-1.0, box_hi=1.0)
    m = TnfModel(cfg)
    assert m.sample(0, 0.5, np.random.default_rng(0)).shape == (0, 2)
    x = m.sample(5000, 0.5, np.random.default_rng(0))
    # identity flow: squash-inverse of normal draws (those outside the box were redrawn)
    z = np.random.default_rng(0).standard_normal((5000, 2))
    inside = np.all(np.abs(z) <= 4, axis=1)
    assert np.allclose(x[inside], z[inside] / 4)
    assert np.all(np.abs(x) <= 1)
    a = m.sample(10, 0.2, np.random.default_rng(9))
    b = m.sample(10, 0.2, np.random.default_rng(9))
    assert np.array_equal(a, b)


def test_non_finite_activation():
    m = _random_model(2)
    with pytest.raises(NonFiniteActivation):
        m.forward(np.array([[np.nan, 0.0]]), 0.5)


def test_checkpoint_round_trip(tmp_path):
    m = _random_model(3)
    path = save_checkpoint(m, tmp_path / "m.tnf", extra={"seed": 4})
    loaded, extra = load_checkpoint(path, expect=m.cfg)
    assert np.array_equal(loaded.theta, m.theta) and extra == {"seed": 4}
    with open(path, "rb") as fh:
        assert fh.read(14) == b"FLOWKAC-TNF 1\n"


def test_checkpoint_rejects_tampering(tmp_path):
    m = _random_model(2)
    path = save_checkpoint(m, tmp_path / "m.tnf")
    raw = path.read_bytes().replace(b'"depth":3', b'"depth":4')
    bad = tmp_path / "bad.tnf"
    bad.write_bytes(raw)
    with pytest.raises(ManifestMismatch):
        load_checkpoint(bad)
    other = FlowConfig(d=2, box_lo=-2.0, box_hi=3.0, depth=2, n_bins=8)
    with pytest.raises(ManifestMismatch):
        load_checkpoint(path, expect=other)
