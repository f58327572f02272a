import numpy as np
import pytest

from zsosr import datasets as ds
from zsosr import ndcore as nd
from zsosr import zslgen as zg


@pytest.fixture(scope="module")
def world():
    return ds.synth_world(ds.WorldConfig(), seed=0)


@pytest.fixture(scope="module")
def view(world):
    return ds.training_view(world.bundle)


@pytest.fixture(scope="module")
def cvae(view):
    return zg.train_generator(view, zg.GeneratorConfig(hidden=128, steps=2000))


@pytest.fixture(scope="module")
def wgan(view):
    return zg.train_generator(view, zg.GeneratorConfig(mode="wgan-clip", hidden=128, steps=2000, clip=0.1))


def _cos(a, b):
    return np.sum(a * b, axis=1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))


def _toy_generator(M=3, d=4, seed=0):
    return zg.GeneratorModel(nd.build_mlp([2 * M, 8, d], ["leaky_relu", "identity"], seed), M, M)


class TestGenerator:
    def test_cvae_reconstruction_halves(self, cvae):
        r = cvae.trace["recon"]
        assert len(r) == 2000
        assert np.mean(r[-50:]) <= 0.5 * r[0]

    def test_cvae_unseen_means_close_to_oracle(self, cvae, world, view):
        proto = cvae.generator.prototype(view.unseen_attributes)
        assert _cos(proto, world.class_means(view.unseen_ids)).mean() >= 0.8

    def test_wgan_seen_means_match_oracle(self, wgan, world, view):
        syn = zg.synthesize_features(wgan.generator, view.seen_ids, view.seen_attributes, 300, seed=1)
        means = np.stack([syn.features[syn.labels == c].mean(axis=0) for c in view.seen_ids])
        assert _cos(means, world.class_means(view.seen_ids)).mean() >= 0.8

    def test_wgan_critic_prefers_real(self, wgan, world, view):
        rng = np.random.default_rng(123)
        ids = np.repeat(view.seen_ids, 20)
        a = view.attributes_of(ids)
        real = world.class_means(ids) + world.noise_scale * rng.standard_normal((ids.size, 64))
        fake = wgan.generator(a, rng.standard_normal((ids.size, wgan.generator.noise_dim)))
        D = wgan.discriminator.net
        d_real = nd.forward(D, np.concatenate([real, a], 1)).mean()
        d_fake = nd.forward(D, np.concatenate([fake, a], 1)).mean()
        assert d_real > d_fake

    def test_wgan_clip_zero_is_config_error(self, view):
        with pytest.raises(ValueError, match="clip"):
            zg.train_generator(view, zg.GeneratorConfig(mode="wgan-clip", clip=0.0))

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            zg.GeneratorConfig(mode="diffusion").validate()

    def test_divergence_names_step(self, view):
        with pytest.raises(zg.TrainingDivergedError, match="step"):
            zg.train_generator(view, zg.GeneratorConfig(hidden=16, steps=50, lr=1e6))

    def test_deterministic(self, view):
        cfg = zg.GeneratorConfig(hidden=16, steps=30, seed=5)
        a = zg.train_generator(view, cfg).generator.net
        b = zg.train_generator(view, cfg).generator.net
        assert all(p.tobytes() == q.tobytes() for p, q in zip(a.parameters(), b.parameters()))

    def test_noise_dim_default_is_attr_dim(self, cvae, view):
        assert cvae.generator.noise_dim == view.attr_dim


class TestSynthesize:
    def test_bookkeeping(self):
        G = _toy_generator()
        emb = np.random.default_rng(0).normal(size=(25, 3))
        syn = zg.synthesize_features(G, np.arange(25), emb, 300, seed=0)
        assert syn.features.shape == (7500, 4)
        assert (np.bincount(syn.labels) == 300).all()
        assert np.isfinite(syn.features).all()

    def test_same_seed_identical(self):
        G = _toy_generator()
        emb = np.ones((2, 3))
        a = zg.synthesize_features(G, [0, 1], emb, 10, seed=4)
        b = zg.synthesize_features(G, [0, 1], emb, 10, seed=4)
        assert a.features.tobytes() == b.features.tobytes()

    def test_dim_mismatch(self):
        with pytest.raises(nd.ShapeError):
            zg.synthesize_features(_toy_generator(), [0], np.ones((1, 5)), 3)
        with pytest.raises(nd.ShapeError):
            zg.synthesize_features(_toy_generator(), [0, 1], np.ones((1, 3)), 3)

    def test_class_means_distinct(self, cvae, view):
        syn = zg.synthesize_features(cvae.generator, view.unseen_ids, view.unseen_attributes, 100, 0)
        means = np.stack([syn.features[syn.labels == c].mean(0) for c in view.unseen_ids])
        d = np.linalg.norm(means[:, None] - means[None], axis=-1)
        assert d[np.triu_indices(len(means), 1)].min() > 0

    def test_linear_decoder_mean_is_prototype(self, view):
        # E[G(a, eps)] = G(a, 0) exactly when G is affine in eps
        fit = zg.train_generator(view, zg.GeneratorConfig(hidden=64, hidden_activation="identity", steps=500))
        G = fit.generator
        syn = zg.synthesize_features(G, view.unseen_ids, view.unseen_attributes, 300, seed=2)
        devs = []
        for c, a in zip(view.unseen_ids, view.unseen_attributes):
            x = syn.features[syn.labels == c].astype(np.float64)
            se = x.std(axis=0, ddof=1) / np.sqrt(x.shape[0])
            devs.append((x.mean(axis=0) - G.prototype(a)[0]) / se)
        devs = np.abs(np.concatenate(devs))
        assert np.mean(devs > 3) <= 0.01
        assert devs.max() < 4.5


class TestClosedClassifier:
    def test_separable_toy(self):
        rng = np.random.default_rng(0)
        x = np.concatenate([rng.normal(-3, 0.3, (50, 2)), rng.normal(3, 0.3, (50, 2))])
        data = zg.SyntheticDataset(x.astype(np.float32), np.repeat([4, 9], 50))
        clf = zg.train_closed_classifier(data, zg.ClassifierConfig(epochs=20))
        assert zg.zsl_accuracy(clf, x, data.labels) == 1.0
        assert clf.class_ids.tolist() == [4, 9]

    def test_low_noise_world_unseen_accuracy(self):
        w = ds.synth_world(ds.WorldConfig(noise_scale=0.05), seed=1)
        tv = ds.training_view(w.bundle)
        G = zg.train_generator(tv, zg.GeneratorConfig(hidden=128, steps=2000)).generator
        syn = zg.synthesize_features(G, tv.unseen_ids, tv.unseen_attributes, 300, 0)
        clf = zg.train_closed_classifier(syn)
        rows = w.bundle.rows_of(w.bundle.split.unseen)
        assert zg.zsl_accuracy(clf, w.bundle.features[rows], w.bundle.labels[rows]) >= 0.9

    def test_column_permutation(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(20, 3)).astype(np.float32)
        data = zg.SyntheticDataset(x, np.tile([0, 1, 2, 3], 5))
        clf = zg.train_closed_classifier(data, zg.ClassifierConfig(epochs=2))
        perm = np.array([2, 0, 3, 1])
        net = clf.net.copy()
        net.weights[0] = net.weights[0][:, perm]
        net.biases[0] = net.biases[0][perm]
        permuted = zg.ClosedSetClassifier(net, clf.class_ids[perm])
        np.testing.assert_array_equal(permuted.logits(x), clf.logits(x)[:, perm])
        np.testing.assert_array_equal(permuted.predict(x), clf.predict(x))

    def test_logits_affine(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(6, 3)).astype(np.float32)
        clf = zg.train_closed_classifier(zg.SyntheticDataset(x, np.arange(6) % 2), zg.ClassifierConfig(epochs=1))
        W, b = clf.net.weights[0], clf.net.biases[0]
        np.testing.assert_allclose(clf.logits(x), x @ W + b, rtol=1e-6)

    def test_empty_class(self):
        data = zg.SyntheticDataset(np.ones((2, 2), np.float32), np.array([0, 0]))
        with pytest.raises(ValueError, match="without samples"):
            zg.train_closed_classifier(data, class_ids=[0, 1])


class TestZslAccuracy:
    def _clf(self, K):
        net = nd.build_mlp([K, K], "identity", 0)
        net.weights[0][...] = np.eye(K)
        return zg.ClosedSetClassifier(net, np.arange(K))

    def test_perfect(self):
        clf = self._clf(3)
        assert zg.zsl_accuracy(clf, np.eye(3), [0, 1, 2]) == 1.0

    def test_constant(self):
        clf = self._clf(4)
        x = np.tile([1.0, 0, 0, 0], (40, 1))
        assert zg.zsl_accuracy(clf, x, np.repeat(np.arange(4), 10)) == pytest.approx(0.25)

    def test_per_class_mean(self):
        clf = self._clf(2)
        x = np.array([[1.0, 0]] + [[0, 1.0]] * 5 + [[1.0, 0]] * 5)
        y = np.array([0] + [1] * 10)
        assert zg.zsl_accuracy(clf, x, y) == 0.75
