import jax
import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bnnp import layers as L
from bnnp.errors import InputValidationError
from bnnp.gaussian import GaussianFactor, Structure, merge_units

from conftest import random_spd, rel_err


def zero_net(hidden=(4,), in_dim=2, units=3):
    net = L.init_inference_net(jax.random.PRNGKey(0), in_dim, units, hidden)
    return jax.tree_util.tree_map(jnp.zeros_like, net)


def toy_pseudo(rng, n, units):
    return L.PseudoLikelihoodBatch(jnp.asarray(rng.standard_normal((n, units))), jnp.asarray(rng.uniform(0.3, 3.0, (n, units))))


# -- encode -------------------------------------------------------------------


def test_zero_net_gives_unit_precision():
    out = L.encode(zero_net(), jnp.ones((5, 1)), jnp.ones((5, 1)))
    assert np.all(np.asarray(out.targets) == 0.0)
    assert np.all(np.asarray(out.precisions) == 1.0)


def test_encode_is_pointwise(rng):
    net = L.init_inference_net(jax.random.PRNGKey(3), 2, 4, (8, 8))
    x, y = rng.standard_normal((6, 1)), rng.standard_normal((6, 1))
    perm = rng.permutation(6)
    a = L.encode(net, jnp.asarray(x), jnp.asarray(y))
    b = L.encode(net, jnp.asarray(x[perm]), jnp.asarray(y[perm]))
    np.testing.assert_array_equal(np.asarray(a.targets)[perm], b.targets)
    np.testing.assert_array_equal(np.asarray(a.precisions)[perm], b.precisions)
    dup = L.encode(net, jnp.asarray(np.repeat(x[:1], 3, 0)), jnp.asarray(np.repeat(y[:1], 3, 0)))
    assert np.all(np.asarray(dup.targets) == np.asarray(dup.targets)[0])


def test_encode_clamps_log_noise():
    net = zero_net(units=1)
    net[-1]["b"] = jnp.array([0.0, 50.0])
    assert float(L.encode(net, jnp.ones((1, 1)), jnp.ones((1, 1))).precisions[0, 0]) == pytest.approx(np.exp(-10.0))
    net[-1]["b"] = jnp.array([0.0, -50.0])
    assert float(L.encode(net, jnp.ones((1, 1)), jnp.ones((1, 1))).precisions[0, 0]) == pytest.approx(np.exp(20.0))


def test_encode_rejects_nan_and_mismatch():
    net = zero_net()
    with pytest.raises(InputValidationError):
        L.encode(net, jnp.array([[np.nan]]), jnp.ones((1, 1)))
    with pytest.raises(ValueError):
        L.encode(net, jnp.ones((2, 1)), jnp.ones((3, 1)))


def test_unknown_nonlinearity():
    with pytest.raises(ValueError):
        L.nonlinearity("gelu")


# -- posterior ------------------------------------------------------------------


def test_empty_context_posterior_is_prior(rng):
    prior = GaussianFactor.from_covariance(rng.standard_normal((3, 2)), np.stack([random_spd(rng, 2)] * 3))
    post = L.posterior(prior, jnp.zeros((0, 2)), L.PseudoLikelihoodBatch(jnp.zeros((0, 3)), jnp.ones((0, 3))))
    np.testing.assert_allclose(post.factor.mean, prior.mean, atol=1e-15)
    np.testing.assert_allclose(post.factor.covariance, prior.covariance, atol=1e-15)


def test_single_weight_quadrature_oracle():
    prior = GaussianFactor.diagonal(np.zeros((1, 1)), np.ones((1, 1))).with_structure(Structure.UNITWISE)
    post = L.posterior(prior, jnp.ones((1, 1)), L.PseudoLikelihoodBatch(jnp.ones((1, 1)), jnp.ones((1, 1))))
    assert float(post.factor.mean[0, 0]) == pytest.approx(0.49999999999999944, abs=1e-12)
    assert float(post.factor.covariance[0, 0, 0]) == pytest.approx(0.49999999999999983, abs=1e-12)


def test_high_precision_limit_is_least_squares(rng):
    a = rng.standard_normal((4, 2))
    t = rng.standard_normal((4, 1))
    lsq = np.linalg.lstsq(a, t[:, 0], rcond=None)[0]
    prior = GaussianFactor.from_covariance(np.zeros((1, 2)), np.eye(2)[None])
    errs = []
    for c in (1e2, 1e5, 1e8):
        post = L.posterior(prior, jnp.asarray(a), L.PseudoLikelihoodBatch(jnp.asarray(t), jnp.full((4, 1), c)))
        errs.append(np.max(np.abs(np.asarray(post.factor.mean[0]) - lsq)))
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 1e-6


@pytest.mark.parametrize("structure", [Structure.UNITWISE, Structure.LAYERWISE])
def test_sequential_split_matches_full(rng, structure):
    n, d, u = 7, 3, 2
    mu = rng.standard_normal((u, d))
    cov = np.stack([random_spd(rng, d) for _ in range(u)])
    prior = GaussianFactor.from_covariance(mu, cov)
    if structure is Structure.LAYERWISE:
        prior = merge_units(prior)
    a = jnp.asarray(rng.standard_normal((n, d)))
    pseudo = toy_pseudo(rng, n, u)
    full = L.posterior(prior, a, pseudo)
    head = L.posterior(prior, a[:1], L.PseudoLikelihoodBatch(pseudo.targets[:1], pseudo.precisions[:1]))
    split = L.sequential_posterior(head, a[1:], L.PseudoLikelihoodBatch(pseudo.targets[1:], pseudo.precisions[1:]))
    assert rel_err(split.factor.mean, full.factor.mean) < 1e-8
    assert rel_err(split.factor.covariance, full.factor.covariance) < 1e-8
    same = L.sequential_posterior(full, a[:0], L.PseudoLikelihoodBatch(pseudo.targets[:0], pseudo.precisions[:0]))
    np.testing.assert_allclose(same.factor.covariance, full.factor.covariance, atol=1e-15)


def test_three_singletons_any_order(rng):
    prior = GaussianFactor.from_covariance(np.zeros((2, 2)), np.stack([random_spd(rng, 2)] * 2))
    a = jnp.asarray(rng.standard_normal((3, 2)))
    pseudo = toy_pseudo(rng, 3, 2)
    full = L.posterior(prior, a, pseudo)
    for order in ([0, 1, 2], [2, 0, 1], [1, 2, 0]):
        post = L.LayerPosterior(prior)
        for i in order:
            post = L.sequential_posterior(post, a[i : i + 1], L.PseudoLikelihoodBatch(pseudo.targets[i : i + 1], pseudo.precisions[i : i + 1]))
        assert rel_err(post.factor.mean, full.factor.mean) < 1e-8
        assert rel_err(post.factor.covariance, full.factor.covariance) < 1e-8


@given(n=st.integers(1, 8), seed=st.integers(0, 2**31 - 1))
def test_permutation_invariance(n, seed):
    rng = np.random.default_rng(seed)
    prior = GaussianFactor.from_covariance(rng.standard_normal((2, 3)), np.stack([random_spd(rng, 3)] * 2))
    a = rng.standard_normal((n, 3))
    pseudo = toy_pseudo(rng, n, 2)
    perm = rng.permutation(n)
    p1 = L.posterior(prior, jnp.asarray(a), pseudo)
    p2 = L.posterior(prior, jnp.asarray(a[perm]), L.PseudoLikelihoodBatch(pseudo.targets[perm], pseudo.precisions[perm]))
    assert rel_err(p2.factor.mean, p1.factor.mean) < 1e-10
    assert rel_err(p2.factor.covariance, p1.factor.covariance) < 1e-10


@given(n=st.integers(0, 6), seed=st.integers(0, 2**31 - 1))
def test_evidence_never_inflates_uncertainty(n, seed):
    rng = np.random.default_rng(seed)
    cov = np.stack([random_spd(rng, 3)] * 2)
    prior = GaussianFactor.from_covariance(np.zeros((2, 3)), cov)
    post = L.posterior(prior, jnp.asarray(rng.standard_normal((n, 3))), toy_pseudo(rng, n, 2))
    for u in range(2):
        diff = cov[u] - np.asarray(post.factor.covariance[u])
        np.linalg.cholesky(diff + 1e-10 * np.eye(3))


def test_posterior_mean_gradient_wrt_net_params(rng):
    net = L.init_inference_net(jax.random.PRNGKey(1), 2, 2, (5,))
    x = jnp.asarray(rng.standard_normal((6, 1)))
    y = jnp.asarray(rng.standard_normal((6, 1)))
    a = L.with_bias(x)
    prior = GaussianFactor.from_covariance(np.zeros((2, 2)), np.stack([np.eye(2)] * 2))
    w = jnp.asarray(rng.standard_normal((2, 2)))

    def f(theta):
        return jnp.sum(L.posterior(prior, a, L.encode(theta, x, y)).factor.mean * w)

    grad = jax.grad(f)(net)
    h = 1e-6
    for layer in range(len(net)):
        for name in ("w", "b"):
            g = np.asarray(grad[layer][name])
            flat_idx = np.unravel_index(np.argmax(np.abs(g)), g.shape)
            plus = jax.tree_util.tree_map(lambda v: v, net)
            minus = jax.tree_util.tree_map(lambda v: v, net)
            plus[layer][name] = net[layer][name].at[flat_idx].add(h)
            minus[layer][name] = net[layer][name].at[flat_idx].add(-h)
            fd = (float(f(plus)) - float(f(minus))) / (2 * h)
            assert abs(g[flat_idx] - fd) <= 1e-4 * max(abs(fd), 1e-8)


def test_with_bias_appends_ones():
    h = L.with_bias(jnp.zeros((2, 3, 4)))
    assert h.shape == (2, 3, 5)
    assert np.all(np.asarray(h[..., -1]) == 1.0)
    assert L.with_bias(jnp.zeros((2, 3)), bias=False).shape == (2, 3)
