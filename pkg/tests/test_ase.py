import math

import numpy as np
import pytest

from zsosr import ase
from zsosr import datasets as ds
from zsosr import ndcore as nd
from zsosr import pipeline as pl
from zsosr import zslgen as zg


@pytest.fixture(scope="module")
def world():
    return ds.synth_world(ds.WorldConfig(), seed=0)


@pytest.fixture(scope="module")
def view(world):
    return ds.training_view(world.bundle)


@pytest.fixture(scope="module")
def trained(view):
    G = zg.train_generator(view, zg.GeneratorConfig(hidden=128, steps=2000)).generator
    syn = zg.synthesize_features(G, view.unseen_ids, view.unseen_attributes, 300, 0)
    phi = zg.train_closed_classifier(syn, zg.ClassifierConfig(lr=0.01))
    return G, phi, syn


@pytest.fixture(scope="module")
def learned(trained, view):
    G, phi, _ = trained
    cfg = ase.AseConfig()
    emb0 = ase.init_embeddings(view.unseen_ids, view.unseen_attributes, cfg)
    return emb0, ase.learn_embeddings(emb0, G, phi, cfg)


def _small_models(M=3, d=5, K=4, seed=0, dtype=np.float64):
    G = zg.GeneratorModel(nd.build_mlp([2 * M, 7, d], ["leaky_relu", "identity"], seed).astype(dtype), M, M)
    phi = zg.ClosedSetClassifier(nd.build_mlp([d, K], "identity", seed + 1).astype(dtype), np.arange(K))
    return G, phi


class TestEnergy:
    def test_two_zero_logits(self):
        assert ase.adv_energy([0.0, 0.0], 1) == pytest.approx(math.log(2), abs=1e-12)

    def test_uniform_25(self):
        assert ase.adv_energy(np.zeros(25), 1) == pytest.approx(math.log(25), abs=1e-12)

    def test_temperature_two(self):
        # 2 * ln(e^1 + e^0)
        assert ase.adv_energy([2.0, 0.0], 2) == pytest.approx(2 * math.log(math.e + 1), abs=1e-12)
        assert ase.adv_energy([2.0, 0.0], 2) == pytest.approx(2.6265, abs=1e-4)

    def test_bad_temperature(self):
        with pytest.raises(ValueError):
            ase.adv_energy([1.0], 0)


class TestDisLoss:
    def test_zero_at_anchor(self):
        a = np.arange(5.0)
        assert ase.dis_loss(a, a) == 0

    def test_three_four_five(self):
        assert ase.dis_loss([3, 4, 0, 0], np.zeros(4)) == 5.0

    def test_symmetric(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=6), rng.normal(size=6)
        assert ase.dis_loss(a, b) == ase.dis_loss(b, a)

    def test_dim_mismatch(self):
        with pytest.raises(nd.ShapeError):
            ase.dis_loss(np.zeros(3), np.zeros(4))


class TestAseLoss:
    def test_beta_zero_is_adv(self):
        G, phi = _small_models()
        rng = np.random.default_rng(0)
        L, la, ld, _ = ase.ase_loss(rng.normal(size=3), rng.normal(size=3), G, phi, ase.AseConfig(beta=0),
                                    rng.normal(size=(4, 3)))
        assert L == la and ld > 0

    def test_gradient_finite_differences(self):
        for seed in range(20):
            G, phi = _small_models(seed=seed)
            rng = np.random.default_rng(seed)
            a, anchor, noise = rng.normal(size=3), rng.normal(size=3), rng.normal(size=(4, 3))
            cfg = ase.AseConfig(beta=0.7, temperature=1.3)
            _, _, _, g = ase.ase_loss(a, anchor, G, phi, cfg, noise)
            num = np.zeros(3)
            for i in range(3):
                e = np.zeros(3)
                e[i] = 1e-5
                num[i] = (ase.ase_loss(a + e, anchor, G, phi, cfg, noise)[0]
                          - ase.ase_loss(a - e, anchor, G, phi, cfg, noise)[0]) / 2e-5
            err = np.max(np.abs(g - num) / np.maximum(1, np.abs(num)))
            assert err < 1e-3, (seed, err)

    def test_zero_distance_subgradient(self):
        G, phi = _small_models()
        rng = np.random.default_rng(1)
        a, noise = rng.normal(size=3), rng.normal(size=(4, 3))
        _, _, ld, g = ase.ase_loss(a, a, G, phi, ase.AseConfig(beta=5.0), noise)
        _, _, _, g0 = ase.ase_loss(a, a, G, phi, ase.AseConfig(beta=0.0), noise)
        assert ld == 0
        np.testing.assert_array_equal(g, g0)


class TestInit:
    def test_counts(self):
        emb = ase.init_embeddings(np.arange(25), np.ones((25, 4)), ase.AseConfig())
        assert len(emb) == 1250
        assert (np.bincount(emb.anchor_ids) == 50).all()

    def test_zero_noise_equals_anchors(self):
        anchors = np.random.default_rng(0).normal(size=(3, 4))
        emb = ase.init_embeddings([0, 1, 2], anchors, ase.AseConfig(init_noise=0.0))
        np.testing.assert_array_equal(emb.embeddings, np.repeat(anchors, 50, axis=0))

    def test_initial_distance_chi_mean(self):
        M, s = 16, 0.05
        emb = ase.init_embeddings(np.arange(20), np.zeros((20, M)), ase.AseConfig(init_noise=s))
        mean_d = ase.dis_loss(emb.embeddings, emb.anchors).mean()
        assert abs(mean_d - s * math.sqrt(M)) <= 0.1 * s * math.sqrt(M)

    def test_default_noise_scale(self):
        anchors = 2 * np.eye(4)
        assert ase.default_init_noise(anchors) == pytest.approx(0.1)


class TestLearnEmbeddings:
    def test_frozen_models_untouched(self, trained, view):
        G, phi, _ = trained
        before = [p.tobytes() for p in G.net.parameters() + phi.net.parameters()]
        cfg = ase.AseConfig(steps=20, embeddings_per_anchor=4)
        ase.learn_embeddings(ase.init_embeddings(view.unseen_ids, view.unseen_attributes, cfg), G, phi, cfg)
        after = [p.tobytes() for p in G.net.parameters() + phi.net.parameters()]
        assert before == after
        assert all(p.flags.writeable for p in G.net.parameters())

    def test_write_inside_frozen_block_fails(self, trained):
        G, phi, _ = trained
        with ase.frozen(G, phi):
            with pytest.raises(ValueError):
                G.net.weights[0][0, 0] = 0.0

    def test_zero_steps_identity(self, trained, view):
        G, phi, _ = trained
        cfg = ase.AseConfig(steps=0, embeddings_per_anchor=3)
        emb = ase.init_embeddings(view.unseen_ids, view.unseen_attributes, cfg)
        out = ase.learn_embeddings(emb, G, phi, cfg)
        np.testing.assert_array_equal(out.embeddings, emb.embeddings)

    def test_input_not_mutated(self, learned):
        emb0, emb = learned
        assert not np.array_equal(emb0.embeddings, emb.embeddings)
        assert not emb0.trace

    def test_beta_controls_distance(self, trained, view):
        G, phi, _ = trained
        d = {}
        for beta in (0.0, 100.0):
            cfg = ase.AseConfig(beta=beta, steps=100, embeddings_per_anchor=10)
            emb = ase.learn_embeddings(ase.init_embeddings(view.unseen_ids, view.unseen_attributes, cfg), G, phi, cfg)
            d[beta] = emb.losses["dis"].mean()
        assert d[100.0] < d[0.0]

    def test_beta_zero_lowers_adv_energy(self, trained, view):
        G, phi, _ = trained
        cfg = ase.AseConfig(beta=0.0, steps=100, embeddings_per_anchor=10)
        emb0 = ase.init_embeddings(view.unseen_ids, view.unseen_attributes, cfg)
        emb = ase.learn_embeddings(emb0, G, phi, cfg)
        e0 = ase.adv_energy(phi.logits(G.prototype(emb0.embeddings))).mean()
        e1 = ase.adv_energy(phi.logits(G.prototype(emb.embeddings))).mean()
        assert e1 < e0

    def test_separability(self, learned, trained):
        G, phi, syn = trained
        _, emb = learned
        assert emb.losses["dis"].min() > 0
        free_proto = -ase.adv_energy(phi.logits(G.prototype(emb.embeddings))).mean()
        free_unseen = -ase.adv_energy(phi.logits(syn.features)).mean()
        assert free_proto > free_unseen

    def test_anchor_proximity(self, learned, view):
        _, emb = learned
        own = emb.losses["dis"].mean()
        others = []
        for c, a in zip(view.unseen_ids, view.unseen_attributes):
            rows = emb.anchor_ids != c
            others.append(ase.dis_loss(emb.embeddings[rows], a))
        assert own <= np.concatenate(others).mean()

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_aborts_with_index(self, view):
        G, phi = _small_models(M=view.attr_dim, d=4, K=2, dtype=np.float32)
        cfg = ase.AseConfig(steps=2, embeddings_per_anchor=2)
        emb = ase.init_embeddings(view.unseen_ids, view.unseen_attributes, cfg)
        emb.embeddings[3] = 1e300  # overflows the float32 generator
        with pytest.raises(zg.TrainingDivergedError, match="embedding 3 at step 0"):
            ase.learn_embeddings(emb, G, phi, cfg)

    def test_deterministic(self, trained, view):
        G, phi, _ = trained
        cfg = ase.AseConfig(steps=10, embeddings_per_anchor=3)
        runs = [ase.learn_embeddings(ase.init_embeddings(view.unseen_ids, view.unseen_attributes, cfg), G, phi, cfg)
                for _ in range(2)]
        assert runs[0].embeddings.tobytes() == runs[1].embeddings.tobytes()


class TestGenerateUnknown:
    def test_counts(self):
        G, _ = _small_models()
        emb = ase.init_embeddings(np.arange(25), np.ones((25, 3)), ase.AseConfig())
        out = ase.generate_unknown_features(G, emb, 20, seed=0)
        assert out.features.shape[0] == 25_000 == 1000 * 25
        assert (out.labels == ase.UNKNOWN_LABEL).all()
        assert out.provenance == "unknown"

    def test_same_seed(self):
        G, _ = _small_models()
        emb = ase.init_embeddings([0], np.ones((1, 3)), ase.AseConfig(embeddings_per_anchor=2))
        a = ase.generate_unknown_features(G, emb, 5, seed=3)
        b = ase.generate_unknown_features(G, emb, 5, seed=3)
        assert a.features.tobytes() == b.features.tobytes()

    def test_rows_near_own_prototype(self, learned, trained, view):
        G, _, _ = trained
        _, emb = learned
        per = 20
        out = ase.generate_unknown_features(G, emb, per, seed=0)
        own = np.repeat(G.prototype(emb.embeddings), per, axis=0)
        d_own = np.linalg.norm(out.features - own, axis=1)
        anchor_protos = G.prototype(view.unseen_attributes)
        row_anchor = np.repeat(emb.anchor_ids, per)
        d_other = np.linalg.norm(out.features[:, None] - anchor_protos[None], axis=-1)
        d_other[row_anchor[:, None] == view.unseen_ids[None]] = np.inf
        assert np.mean(d_own < d_other.min(axis=1)) >= 0.8


class TestVariants:
    def test_mixup_midpoint(self):
        x = np.array([[0.0, 2.0], [4.0, -2.0]], np.float32)
        out = ase.mixup_unknowns(x, np.array([0, 1]), 6, seed=0, lam_range=(0.5, 0.5))
        np.testing.assert_array_equal(out.features, np.tile([[2.0, 0.0]], (6, 1)))

    def test_semantic_noise_zero_matches_synthesis(self):
        G, _ = _small_models()
        anchors = np.random.default_rng(0).normal(size=(3, 3))
        a = ase.semantic_noise_unknowns(G, [4, 5, 6], anchors, 10, 0.0, seed=7)
        b = zg.synthesize_features(G, [4, 5, 6], anchors, 10, seed=7)
        np.testing.assert_array_equal(a.features, b.features)

    def test_adversarial_features_raise_energy(self, trained):
        _, phi, syn = trained
        _, trace = ase.adversarial_feature_unknowns(syn.features, phi, 100, seed=0)
        assert trace[-1] < trace[0]  # adv energy down = free energy up

    def test_uniform_inside_box(self):
        x = np.random.default_rng(0).normal(size=(50, 3))
        out = ase.uniform_noise_unknowns(x, 200, 0).features
        assert (out >= x.min(0) - 1e-6).all() and (out <= x.max(0) + 1e-6).all()

    def test_unknown_strategy(self):
        with pytest.raises(ValueError, match="strategy"):
            ase.variant_unknowns("cutmix", {"unseen": None})

    def test_dispatch_counts(self, trained, view):
        G, phi, syn = trained
        inputs = {"unseen": syn, "G": G, "anchor_ids": view.unseen_ids, "anchors": view.unseen_attributes,
                  "phi_closed": phi}
        for s in ase.STRATEGIES:
            out = ase.variant_unknowns(s, inputs, {"n": 50, "per_anchor": 10, "steps": 5}, seed=1)
            assert len(out) == 50 and (out.labels == ase.UNKNOWN_LABEL).all()


class TestOpenClassifier:
    def test_separable_recall(self):
        rng = np.random.default_rng(0)
        known = zg.SyntheticDataset(rng.normal(0, 0.2, (100, 2)).astype(np.float32) + [3, 0], np.repeat([5, 6], 50))
        known.features[50:] += [0, 3]
        unk = zg.SyntheticDataset(rng.normal(0, 0.2, (80, 2)).astype(np.float32) - 3, np.full(80, -1))
        clf, rep = ase.train_open_classifier(known, unk, zg.ClassifierConfig(epochs=30, lr=0.01))
        assert rep.unknown_recall >= 0.99
        assert clf.net.out_dim == 3

    def test_needs_unknown_rows(self):
        known = zg.SyntheticDataset(np.ones((2, 2), np.float32), np.array([0, 1]))
        with pytest.raises(ValueError, match="unknown"):
            ase.train_open_classifier(known, None)
        with pytest.raises(ValueError):
            ase.train_open_classifier(known, zg.SyntheticDataset(np.ones((0, 2), np.float32), np.zeros(0)))

    def test_score_extremes(self):
        sp = ase.score_logits(np.array([[0.0, 0.0, 50.0]]), [0, 1])
        assert sp.scores[0] == pytest.approx(1.0)
        sp = ase.score_logits(np.zeros((1, 4)), [0, 1, 2])
        assert sp.scores[0] == pytest.approx(0.25)

    def test_shift_and_affine_invariance(self):
        z = np.random.default_rng(0).normal(size=(30, 5))
        a = ase.score_logits(z, np.arange(4))
        b = ase.score_logits(z + 7.5, np.arange(4))
        np.testing.assert_allclose(a.scores, b.scores, atol=1e-12)
        np.testing.assert_array_equal(a.predicted, b.predicted)
        c = ase.score_logits(3 * z - 1, np.arange(4))
        np.testing.assert_array_equal(a.predicted, c.predicted)
        assert ((a.scores >= 0) & (a.scores <= 1)).all()

    def test_generalized_anchor_set(self, world):
        sv = ds.make_split(world.bundle, "generalized", 0)
        tv = ds.training_view(sv)
        cfg = pl.PipelineConfig.from_dict({
            "generator": {"hidden": 32, "steps": 100}, "closed": {"epochs": 2}, "open": {"epochs": 2},
            "n_per_class": 20, "per_embedding": 2, "ase": {"embeddings_per_anchor": 3, "steps": 3},
        })
        G = pl.stage_generator(tv, cfg, 0).generator
        known = pl.known_training_set(G, tv, cfg, 0, generalized=True)
        phi = pl.stage_closed(known, cfg, 0)
        emb = pl.stage_embeddings(G, phi, known, cfg, 0)
        assert set(np.unique(emb.anchor_ids)) == set(tv.seen_ids) | set(tv.unseen_ids)
        clf, _ = pl.stage_open(G, emb, known, cfg, 0)
        assert clf.net.out_dim == tv.seen_ids.size + tv.unseen_ids.size + 1
