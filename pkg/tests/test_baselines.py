import jax
import numpy as np
import pytest

from bnnp import baselines as B
from bnnp import model as M
from bnnp.gaussian import Structure, kl_divergence
from bnnp.priors import PriorLayout, prior_from_covariance, standard_init

from conftest import blr_log_evidence, random_spd

FAMILIES = list(B.Family)


def test_family_structures_and_rates():
    assert [f.structure for f in FAMILIES] == [Structure.UNITWISE, Structure.UNITWISE, Structure.LAYERWISE, Structure.GLOBAL]
    assert B.Family.FULL.default_lr == (5e-4, 5e-5)
    assert B.Family.MEAN_FIELD.default_lr == (5e-3, 5e-5)


@pytest.mark.parametrize("family", FAMILIES)
def test_init_at_prior_has_zero_kl(family):
    prior = standard_init([1, 3, 1])
    q = B.init_at_prior(family, prior)
    assert abs(float(B.kl_to_prior(q.factors(), prior.factors()))) < 1e-12


@pytest.mark.parametrize("family", FAMILIES)
def test_zero_context_fit_returns_to_prior(family):
    prior = standard_init([1, 3, 1])
    q = B.init_at_prior(family, prior)
    params = jax.tree_util.tree_map(lambda a: a, q.params)
    params[0]["mean"] = params[0]["mean"] + 0.3
    q = q.replace(params)
    assert float(B.kl_to_prior(q.factors(), prior.factors())) > 0.1
    fit = B.fit(q, np.zeros((0, 1)), np.zeros((0, 1)), prior, 0.1, steps=2000, lr=(1e-2, 1e-4))
    assert float(B.kl_to_prior(fit.posterior.factors(), prior.factors())) < 0.01


def test_full_covariance_fit_reaches_evidence(rng):
    sigma = 0.3
    x = rng.uniform(-1, 1, (10, 1))
    y = 0.8 * x - 0.1 + sigma * rng.standard_normal((10, 1))
    prior = standard_init([1, 1], Structure.DIAGONAL)
    fit = B.fit("fcvi", x, y, prior, sigma, steps=B.DEFAULT_STEPS, seed=1)
    elbo, se = B.elbo_of(fit.posterior, x, y, prior, sigma, 20_000, seed=2)
    lml = blr_log_evidence(x, y, 0.5, sigma)
    assert lml - elbo < 0.05
    assert elbo <= lml + 3 * se


def test_mean_field_is_frozen_unitwise(rng):
    x = rng.uniform(-2, 2, (12, 1))
    y = np.sin(x)
    prior = standard_init([1, 4, 1])
    mf = B.fit("mfvi", x, y, prior, 0.2, steps=300, seed=3)
    frozen = B.init_at_prior("ucvi", prior)
    frozen.mask = B.init_at_prior("mfvi", prior).mask
    uc = B.fit(frozen, x, y, prior, 0.2, steps=300, seed=3)
    np.testing.assert_allclose(uc.trace, mf.trace, rtol=0, atol=1e-10)
    for a, b in zip(mf.posterior.factors(), uc.posterior.factors()):
        tril = np.asarray(a.scale_tril)
        assert np.all(tril[..., ~np.eye(tril.shape[-1], dtype=bool)] == 0.0)
        np.testing.assert_allclose(a.covariance, b.covariance, atol=1e-12)


def test_fit_is_deterministic(rng):
    x, y = rng.standard_normal((6, 1)), rng.standard_normal((6, 1))
    prior = standard_init([1, 2, 1])
    a = B.fit("lcvi", x, y, prior, 0.5, steps=50, seed=0)
    b = B.fit("lcvi", x, y, prior, 0.5, steps=50, seed=0)
    np.testing.assert_array_equal(a.trace, b.trace)


@pytest.mark.parametrize("src,dst", [("mfvi", "ucvi"), ("ucvi", "lcvi"), ("lcvi", "fcvi"), ("mfvi", "fcvi")])
def test_promote_preserves_distribution(rng, src, dst):
    prior = standard_init([1, 2, 1])
    x, y = rng.standard_normal((5, 1)), rng.standard_normal((5, 1))
    q = B.fit(src, x, y, prior, 0.5, steps=100).posterior
    p = B.promote(q, dst)
    assert p.family is B.Family(dst)
    kl_a = float(B.kl_to_prior(q.factors(), prior.factors()))
    kl_b = float(B.kl_to_prior(p.factors(), prior.factors()))
    assert kl_b == pytest.approx(kl_a, abs=1e-9)
    ea, _ = B.elbo_of(q, x, y, prior, 0.5, 2000, seed=5)
    eb, _ = B.elbo_of(p, x, y, prior, 0.5, 2000, seed=5)
    assert eb == pytest.approx(ea, abs=1e-8)


def test_promote_refuses_coarsening():
    q = B.init_at_prior("fcvi", standard_init([1, 1]))
    with pytest.raises(ValueError):
        B.promote(q, "mfvi")


def test_kl_general_prior_matches_dense(rng):
    layout = PriorLayout(Structure.LAYERWISE, (1, 2, 1))
    covs = [random_spd(rng, s) for s in layout.block_sizes]
    prior = prior_from_covariance(layout, [np.zeros(s) for s in layout.block_sizes], covs)
    q = B.init_at_prior("ucvi", standard_init([1, 2, 1]))
    got = float(B.kl_to_prior(q.factors(), prior.factors()))
    dense_q = B.restructure(q.factors(), Structure.LAYERWISE)
    ref = sum(float(kl_divergence(a, b)) for a, b in zip(dense_q, prior.factors()))
    assert got == pytest.approx(ref, rel=1e-12)


def test_kl_diagonal_prior_fast_path(rng):
    prior = standard_init([1, 2, 1], Structure.DIAGONAL)
    q = B.fit("fcvi", rng.standard_normal((4, 1)), rng.standard_normal((4, 1)), prior, 0.5, steps=50).posterior
    fast = float(B.kl_to_prior(q.factors(), prior.factors()))
    dense_p = B.restructure([f.with_structure(Structure.UNITWISE) for f in prior.factors()], Structure.GLOBAL)
    ref = float(kl_divergence(q.factors()[0], dense_p[0]))
    assert fast == pytest.approx(ref, rel=1e-10)


@pytest.mark.parametrize("family", FAMILIES)
def test_sample_weights_follow_q(family):
    prior = standard_init([1, 2, 1])
    q = B.init_at_prior(family, prior)
    cfg = B.network_for(prior)
    noise = jax.random.normal(jax.random.PRNGKey(0), (40_000, prior.layout.num_weights))
    flat = np.asarray(M.flatten_weights(B.sample_weights(cfg, q, q.params, noise)))
    var = np.concatenate([np.full(4, 0.5), np.full(3, 1 / 3)])
    np.testing.assert_allclose(flat.var(axis=0), var, rtol=0.05)


def test_elbo_of_empty_context_is_minus_kl():
    prior = standard_init([1, 2, 1])
    q = B.init_at_prior("mfvi", prior)
    elbo, _ = B.elbo_of(q, np.zeros((0, 1)), np.zeros((0, 1)), prior, 1.0, 10)
    assert abs(elbo) < 1e-12


def test_elbo_of_single_sample(rng):
    prior = standard_init([1, 1])
    q = B.init_at_prior("mfvi", prior)
    x = rng.standard_normal((3, 1))
    elbo, se = B.elbo_of(q, x, np.zeros((3, 1)), prior, 1.0, 1)
    assert np.isnan(se) and np.isfinite(elbo)
