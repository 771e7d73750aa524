import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from arborart.bart import (
    Chain,
    Ensemble,
    MCMCConfig,
    ModelSpec,
    density_normalizer,
    fit,
    geweke_joint_test,
    log_density,
    predict,
    quadrature_cells,
)
from arborart.geometry import Box, SplitRecord, TreePartition
from arborart.priors import PriorConfig, enumerate_trees, sample_tree, tree_log_prior
from arborart.splitnet import from_axes, from_points, regular_grid


def two_leaf_tree(coord=0, tau=0.5, p=1):
    return TreePartition(Box.unit(p), (SplitRecord(1, coord, tau),))


def quick(**kw):
    base = dict(iterations=200, burnin=100, seed=0, check_every=50)
    base.update(kw)
    return MCMCConfig(**base)


class TestEnsemble:
    def test_evaluates_sum_of_trees(self):
        t1 = two_leaf_tree(0, 0.5, p=2)
        t2 = two_leaf_tree(1, 0.25, p=2)
        ens = Ensemble((t1, t2), (np.array([1.0, 2.0]), np.array([10.0, 20.0])))
        np.testing.assert_allclose(ens([[0.2, 0.1], [0.7, 0.9], [0.5, 0.25]]), [11.0, 22.0, 11.0])

    def test_rejects_wrong_height_length(self):
        with pytest.raises(ValueError):
            Ensemble((two_leaf_tree(),), (np.zeros(3),))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_linear_in_heights(self, seed):
        rng = np.random.default_rng(seed)
        net = regular_grid(2, 8)
        trees = tuple(sample_tree([0.5, 0.5], PriorConfig(nu=0.45), net, rng) for _ in range(3))
        b1 = tuple(rng.normal(size=t.n_leaves) for t in trees)
        b2 = tuple(rng.normal(size=t.n_leaves) for t in trees)
        x = rng.random((50, 2))
        lhs = Ensemble(trees, tuple(a + b for a, b in zip(b1, b2)))(x)
        rhs = Ensemble(trees, b1)(x) + Ensemble(trees, b2)(x)
        np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12)


class TestDensityNormalizer:
    def test_zero_function(self):
        ens = Ensemble((two_leaf_tree(),), (np.zeros(2),))
        assert density_normalizer(ens) == pytest.approx(1.0)

    def test_two_half_leaves(self):
        ens = Ensemble((two_leaf_tree(),), (np.array([math.log(2), 0.0]),))
        assert density_normalizer(ens) == pytest.approx(1.5, abs=1e-15)

    def test_overlay_matches_fine_grid(self):
        rng = np.random.default_rng(0)
        net = regular_grid(2, 8)
        trees = tuple(sample_tree([0.5, 0.5], PriorConfig(nu=0.45), net, rng) for _ in range(2))
        ens = Ensemble(trees, tuple(rng.normal(size=t.n_leaves) for t in trees))
        exact = density_normalizer(ens, net)
        assert density_normalizer(ens, 160) == pytest.approx(exact, abs=1e-4)
        # the single-tree closed form agrees with the cell overlay
        one = Ensemble(trees[:1], ens.heights[:1])
        assert density_normalizer(one) == pytest.approx(density_normalizer(one, net), rel=1e-12)

    def test_cells_tile_the_cube(self):
        pts, vol = quadrature_cells(from_axes([[0.2, 0.7], [0.5]]))
        assert pts.shape == (6, 2)
        assert vol.sum() == pytest.approx(1.0)


class TestValidation:
    def test_empty_data(self):
        with pytest.raises(ValueError):
            fit(np.zeros((0, 1)), np.zeros(0), ModelSpec(), regular_grid(1, 4), PriorConfig(), quick())

    def test_outside_cube(self):
        with pytest.raises(ValueError):
            fit([[1.5]], [0.0], ModelSpec(), regular_grid(1, 4), PriorConfig(), quick())

    def test_labels(self):
        with pytest.raises(ValueError):
            fit([[0.5], [0.2]], [0, 2], ModelSpec("classify"), regular_grid(1, 4), PriorConfig(), quick())

    def test_model_kind(self):
        with pytest.raises(ValueError):
            ModelSpec("poisson")
        with pytest.raises(ValueError):
            ModelSpec("reg-random", height_bound=-1.0)


class TestConjugate:
    def test_fixed_tree_matches_closed_form(self):
        rng = np.random.default_rng(1)
        n, sigma2, T = 40, 0.3, 1
        X = rng.random((n, 1))
        y = np.where(X[:, 0] <= 0.5, 1.0, -0.5) + math.sqrt(sigma2) * rng.standard_normal(n)
        net = regular_grid(1, 4)  # candidates 0.125, 0.375, 0.625, 0.875
        tree = two_leaf_tree(0, 0.625)
        prior = PriorConfig(T=T)
        mcmc = MCMCConfig(
            iterations=20_000, burnin=0, update_topology=False, update_sigma2=False,
            update_eta=False, sigma2_init=sigma2, store_ensembles=True, check_every=0,
        )
        chain = Chain(X, y, ModelSpec(), net, prior, mcmc)
        chain.set_state([tree], [np.zeros(2)])
        post = chain.run()
        h = np.array([e.heights[0] for e in post.ensembles])
        left = X[:, 0] <= 0.625
        for k, mask in enumerate([left, ~left]):
            nk, sk = mask.sum(), y[mask].sum()
            mean = prior.tau2 * sk / (sigma2 + nk * prior.tau2)
            var = prior.tau2 * sigma2 / (sigma2 + nk * prior.tau2)
            se = math.sqrt(var / h.shape[0])
            assert abs(h[:, k].mean() - mean) < 3 * se
            # sample variance: SE of s^2 is about var * sqrt(2/N)
            assert abs(h[:, k].var() - var) < 3 * var * math.sqrt(2 / h.shape[0])

    def test_constant_response(self):
        X = np.random.default_rng(2).random((60, 2))
        y = np.full(60, 0.7)
        mcmc = MCMCConfig(iterations=300, burnin=200, update_sigma2=False, sigma2_init=1e-8, store_ensembles=True)
        post = fit(X, y, ModelSpec(), regular_grid(2, 8), PriorConfig(T=5), mcmc)
        mean, lo, hi = predict(post, np.random.default_rng(3).random((20, 2)))
        np.testing.assert_allclose(mean, 0.7, atol=1e-3)

    def test_fits_signal(self):
        rng = np.random.default_rng(4)
        X = rng.random((300, 1))
        f = lambda x: np.where(x[:, 0] < 0.4, -1.0, 1.0)
        y = f(X) + 0.1 * rng.standard_normal(300)
        xt = rng.random((100, 1))
        post = fit(X, y, ModelSpec(), regular_grid(1, 50), PriorConfig(T=10), quick(store_ensembles=False), x_pred=xt)
        mean, _, _ = post.pred_summary()
        assert np.sqrt(np.mean((mean - f(xt)) ** 2)) < 0.1
        assert 0.005 < post.sigma2.mean() < 0.03

    def test_fixed_design_net(self):
        rng = np.random.default_rng(5)
        X = rng.random((80, 2))
        y = X[:, 0] + 0.05 * rng.standard_normal(80)
        post = fit(X, y, ModelSpec(center=True), from_points(X), PriorConfig(T=5), quick())
        assert np.sqrt(np.mean((post.fit_mean - X[:, 0]) ** 2)) < 0.15


class TestPredict:
    def test_single_draw(self):
        ens = Ensemble((two_leaf_tree(),), (np.array([1.0, 3.0]),))
        mean, lo, hi = predict([ens], [[0.2], [0.9]])
        np.testing.assert_array_equal(mean, ens([[0.2], [0.9]]))

    def test_identical_draws_zero_width(self):
        ens = Ensemble((two_leaf_tree(),), (np.array([1.0, 3.0]),))
        mean, lo, hi = predict([ens] * 5, [[0.2], [0.9]])
        np.testing.assert_array_equal(lo, hi)

    def test_needs_draws(self):
        with pytest.raises(ValueError):
            predict([], [[0.5]])

    def test_tracked_predictions_match_stored_ensembles(self):
        rng = np.random.default_rng(6)
        X = rng.random((50, 2))
        y = X.sum(axis=1)
        xt = rng.random((7, 2))
        post = fit(X, y, ModelSpec(center=True), regular_grid(2, 10), PriorConfig(T=3), quick(iterations=30), x_pred=xt)
        direct = np.stack([e(xt) for e in post.ensembles]) + post.offset
        np.testing.assert_allclose(post.pred, direct, atol=1e-10)
        np.testing.assert_allclose(predict(post, xt)[0], post.pred_summary()[0], atol=1e-10)


class TestPriorOnly:
    """With the likelihood off the chain samples the prior."""

    net = from_axes([[0.3, 0.6], [0.5]])
    eta = np.array([0.3, 0.7])
    prior = PriorConfig(T=1, nu=0.45, max_depth=3)

    def exact_leaf_law(self):
        law = Counter()
        for tp in enumerate_trees(self.net, 3):
            law[min(tp.n_leaves, 4)] += math.exp(tree_log_prior(tp, self.eta, self.prior, self.net))
        return law

    @pytest.mark.parametrize("kind", ["reg-fixed", "reg-random", "classify", "density"])
    def test_leaf_count_law(self, kind):
        X = np.random.default_rng(1).random((5, 2))
        y = None if kind == "density" else (X[:, 0] > 0.5).astype(float)
        model = ModelSpec(kind, height_bound=2.0 if kind == "reg-random" else None)
        mcmc = MCMCConfig(iterations=40_000, burnin=100, thin=10, likelihood=False, update_eta=False, check_every=0, store_ensembles=False)
        post = fit(X, y, model, self.net, self.prior, mcmc, eta=self.eta)
        law = self.exact_leaf_law()
        N = post.n_draws
        got = Counter(np.minimum(post.n_leaves[:, 0], 4).tolist())
        for k, prob in law.items():
            # thinned draws are close to independent; allow for residual correlation
            assert abs(got[k] / N - prob) < 4 * math.sqrt(2 * prob * (1 - prob) / N)

    def test_root_split_frequency_with_sampled_eta(self):
        X = np.random.default_rng(1).random((5, 2))
        prior = PriorConfig(T=2, nu=0.25)
        mcmc = MCMCConfig(iterations=20_000, burnin=100, thin=5, likelihood=False, check_every=0, store_ensembles=False)
        post = fit(X, X[:, 0], ModelSpec(), regular_grid(2, 8), prior, mcmc)
        # every coordinate has candidates at the root, so P(K = 1) = 1 - nu
        frac = np.mean(post.n_leaves == 1)
        assert frac == pytest.approx(0.75, abs=4 * math.sqrt(0.75 * 0.25 / post.n_leaves.size * 2))
        # eta has a symmetric law
        assert post.eta[:, 0].mean() == pytest.approx(0.5, abs=0.05)
        # sigma2 follows its inverse-gamma prior, mean b / (a - 1)
        assert post.sigma2.mean() == pytest.approx(0.5, rel=0.1)


class TestMoveRatios:
    """Grow/prune acceptance ratios against the exact tree prior and brute-force proposal probabilities."""

    net = from_axes([[0.5], [0.5]])
    eta = np.array([0.4, 0.6])
    prior = PriorConfig(T=1, nu=0.45, max_depth=3)

    def chain(self):
        mcmc = MCMCConfig(likelihood=False, update_eta=False, check_every=0)
        return Chain(np.array([[0.1, 0.2]]), np.zeros(1), ModelSpec(), self.net, self.prior, mcmc, eta=self.eta)

    def move_sets(self, chain, tp):
        chain.set_state([tp], [np.zeros(tp.n_leaves)])
        tr = chain.trees[0]
        growable = [k for k in tr.leaves if chain._growable(tr, k)]
        return tr, growable, tr.prunable()

    def test_grow_identity(self):
        ch = self.chain()
        checked = 0
        for tp in enumerate_trees(self.net, 3):
            tr, growable, prunable = self.move_sets(ch, tp)
            pg, _, _ = ch._move_probs(len(growable), len(prunable))
            for node in growable:
                nc = tr.n_cand(node)
                F = self.eta[nc > 0].sum()
                for j in np.flatnonzero(nc > 0):
                    c = int(tr.ilo[node][j])
                    got = ch._structure_log_ratio_grow(tr, node, j, c, growable, prunable, pg)
                    grown = TreePartition(tp.root, tp.splits + (SplitRecord(node, int(j), 0.5),))
                    q_fwd = pg / len(growable) * self.eta[j] / F / nc[j]
                    ch2 = self.chain()
                    tr2, g2, p2 = self.move_sets(ch2, grown)
                    _, pp2, _ = ch2._move_probs(len(g2), len(p2))
                    q_rev = pp2 / len(p2)
                    want = (
                        tree_log_prior(grown, self.eta, self.prior, self.net)
                        - tree_log_prior(tp, self.eta, self.prior, self.net)
                        + math.log(q_rev) - math.log(q_fwd)
                    )
                    assert got == pytest.approx(want, abs=1e-12)
                    checked += 1
        assert checked >= 10

    def test_prune_identity(self):
        ch = self.chain()
        checked = 0
        for tp in enumerate_trees(self.net, 3):
            tr, growable, prunable = self.move_sets(ch, tp)
            _, pp, _ = ch._move_probs(len(growable), len(prunable))
            for node in prunable:
                got = ch._structure_log_ratio_prune(tr, node, growable, prunable)
                pruned = TreePartition(tp.root, tuple(s for s in tp.splits if s.node != node))
                ch2 = self.chain()
                tr2, g2, p2 = self.move_sets(ch2, pruned)
                pg2, _, _ = ch2._move_probs(len(g2), len(p2))
                s = tp.internal[node]
                nc = tr2.n_cand(node)
                q_rev = pg2 / len(g2) * self.eta[s.coord] / self.eta[nc > 0].sum() / nc[s.coord]
                q_fwd = pp / len(prunable)
                want = (
                    tree_log_prior(pruned, self.eta, self.prior, self.net)
                    - tree_log_prior(tp, self.eta, self.prior, self.net)
                    + math.log(q_rev) - math.log(q_fwd)
                )
                assert got == pytest.approx(want, abs=1e-12)
                checked += 1
        assert checked >= 10


class TestTruncatedAndOtherModels:
    def test_truncation_respected(self):
        rng = np.random.default_rng(7)
        X = rng.random((100, 1))
        y = 3.0 * (X[:, 0] > 0.5) + 0.1 * rng.standard_normal(100)
        model = ModelSpec("reg-random", height_bound=0.5, sigma2_bound=4.0)
        post = fit(X, y, model, regular_grid(1, 16), PriorConfig(T=2), quick())
        for e in post.ensembles:
            for h in e.heights:
                assert np.all(np.abs(h) <= 0.5)
        assert np.all(post.sigma2 >= 0.25) and np.all(post.sigma2 <= 4.0)
        assert post.truncation_proposals > 0 and post.truncation_rejections > 0
        assert "truncation" in post.report()

    def test_classification(self):
        rng = np.random.default_rng(8)
        X = rng.random((300, 1))
        y = (rng.random(300) < np.where(X[:, 0] > 0.5, 0.9, 0.1)).astype(float)
        xt = np.array([[0.2], [0.8]])
        post = fit(X, y, ModelSpec("classify"), regular_grid(1, 16), PriorConfig(T=5), quick(), x_pred=xt)
        mean, _, _ = post.pred_summary()
        assert np.all((post.pred > 0) & (post.pred < 1))
        assert mean[0] < 0.3 and mean[1] > 0.7
        assert 0.2 < post.height_acceptance < 0.6

    @pytest.mark.parametrize("T", [1, 3])
    def test_density(self, T):
        rng = np.random.default_rng(9)
        # density 1.6 on [0, 0.5], 0.4 on (0.5, 1]
        X = np.where(rng.random(400) < 0.8, 0.5 * rng.random(400), 0.5 + 0.5 * rng.random(400))[:, None]
        net = regular_grid(1, 8)
        post = fit(X, None, ModelSpec("density"), net, PriorConfig(T=T), quick())
        grid = (np.arange(2000) + 0.5) / 2000
        dens = np.mean([np.exp(log_density(e, grid[:, None], net)) for e in post.ensembles], axis=0)
        for e in post.ensembles[::20]:
            assert np.mean(np.exp(log_density(e, grid[:, None], net))) == pytest.approx(1.0, abs=1e-3)
        assert dens[grid < 0.5].mean() == pytest.approx(1.6, abs=0.2)
        assert dens[grid > 0.5].mean() == pytest.approx(0.4, abs=0.2)


class TestCache:
    def test_periodic_check_passes(self):
        rng = np.random.default_rng(10)
        X = rng.random((40, 2))
        mcmc = MCMCConfig(iterations=50, burnin=0, check_every=1)
        fit(X, X[:, 0], ModelSpec(), regular_grid(2, 8), PriorConfig(T=4), mcmc, x_pred=rng.random((5, 2)))

    def test_detects_stale_fits(self):
        X = np.random.default_rng(11).random((10, 1))
        ch = Chain(X, X[:, 0], ModelSpec(), regular_grid(1, 4), PriorConfig(T=2), MCMCConfig(check_every=0))
        ch.sweep()
        ch.fits[0] = ch.fits[0] + 1e-6
        with pytest.raises(AssertionError):
            ch.check_cache()

    def test_reproducible(self):
        X = np.random.default_rng(12).random((30, 1))
        a = fit(X, X[:, 0], ModelSpec(), regular_grid(1, 8), PriorConfig(T=3), quick(seed=5))
        b = fit(X, X[:, 0], ModelSpec(), regular_grid(1, 8), PriorConfig(T=3), quick(seed=5))
        np.testing.assert_array_equal(a.sigma2, b.sigma2)


class TestGeweke:
    X = np.random.default_rng(0).random((20, 2))
    net = regular_grid(2, 4)
    prior = PriorConfig(T=2, nu=0.45)

    def test_identical_simulators(self):
        z = geweke_joint_test(self.X, self.net, self.prior, trials=100, sweeps=0)
        assert all(abs(v) < 1e-8 for v in z.values())

    def test_correct_sampler(self):
        z = geweke_joint_test(self.X, self.net, self.prior, trials=2000, seed=3)
        assert max(abs(v) for v in z.values()) < 4

    def test_broken_sigma2_update(self):
        def broken(rng, shape, scale, n, ssr):
            return (scale + ssr) / rng.gamma(shape + n / 2)

        z = geweke_joint_test(self.X, self.net, self.prior, trials=2000, seed=3, sigma2_update=broken)
        assert max(abs(v) for v in z.values()) > 6
