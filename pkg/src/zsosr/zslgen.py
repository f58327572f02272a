"""Generative zero-shot stage: conditional feature generator and closed-set classifier.

The generator maps ``[a, eps]`` to a feature vector. Two trainers are
provided: a conditional VAE whose decoder serves as the generator, and a
weight-clipped Wasserstein GAN that alternates critic and generator updates
on the critic-difference objective ``E[D(x, a)] - E[D(G(a, eps), a)]``.
Both are trained on seen classes only.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import ndcore as nd
from .datasets import TrainingView
from .evalkit import closed_acc

log = logging.getLogger(__name__)

GENERATOR_MODES = ("cvae", "wgan-clip")


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class GeneratorConfig:
    mode: str = "cvae"
    hidden: int = 1024
    hidden_layers: int = 1
    hidden_activation: str = "leaky_relu"
    noise_dim: int | None = None  # None -> attribute dim
    steps: int = 2000
    critic_steps: int = 5
    clip: float = 0.01
    batch: int = 64
    lr: float = 1e-3
    kl_weight: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.mode not in GENERATOR_MODES:
            raise ValueError(f"unknown generator mode {self.mode!r}")
        if self.hidden <= 0 or self.batch <= 0 or self.steps < 0 or self.hidden_layers < 0:
            raise ValueError("hidden, batch must be positive; steps, hidden_layers >= 0")
        if self.noise_dim is not None and self.noise_dim <= 0:
            raise ValueError("noise_dim must be positive")
        if self.mode == "wgan-clip":
            if self.clip <= 0:
                raise ValueError("wgan-clip needs clip > 0; clip=0 freezes the critic at zero")
            if self.critic_steps < 1:
                raise ValueError("critic_steps must be >= 1")


@dataclass
class GeneratorModel:
    net: nd.Mlp  # [a, eps] -> x
    attr_dim: int
    noise_dim: int
    mode: str = "cvae"

    @property
    def feat_dim(self) -> int:
        return self.net.out_dim

    def inputs(self, a, eps) -> np.ndarray:
        a = np.atleast_2d(np.asarray(a, dtype=self.net.dtype))
        eps = np.atleast_2d(np.asarray(eps, dtype=self.net.dtype))
        if a.shape[1] != self.attr_dim:
            raise nd.ShapeError(f"embedding dim {a.shape[1]} != generator attribute dim {self.attr_dim}")
        if eps.shape[1] != self.noise_dim:
            raise nd.ShapeError(f"noise dim {eps.shape[1]} != {self.noise_dim}")
        return np.concatenate([a, eps], axis=1)

    def __call__(self, a, eps) -> np.ndarray:
        return nd.forward(self.net, self.inputs(a, eps))

    def prototype(self, a) -> np.ndarray:
        a = np.atleast_2d(a)
        return self(a, np.zeros((a.shape[0], self.noise_dim)))


@dataclass
class DiscriminatorModel:
    net: nd.Mlp  # [x, a] -> scalar

    def __call__(self, x, a) -> np.ndarray:
        return nd.forward(self.net, np.concatenate([x, a], axis=1).astype(np.float32))[:, 0]


@dataclass
class GeneratorFit:
    generator: GeneratorModel
    discriminator: DiscriminatorModel | None = None
    encoder: nd.Mlp | None = None
    trace: dict = field(default_factory=dict)


def _check_finite(value, step, what):
    if not np.isfinite(value):
        raise TrainingDivergedError(f"{what} became non-finite at step {step}")


def train_generator(view: TrainingView, config: GeneratorConfig | None = None) -> GeneratorFit:
    """Fit G on seen classes; raises TrainingDivergedError naming the step on blow-up."""
    config = config or GeneratorConfig()
    config.validate()
    if view.seen_features.shape[0] == 0:
        raise ValueError("empty seen view")
    train = _train_cvae if config.mode == "cvae" else _train_wgan
    with np.errstate(over="ignore", invalid="ignore"):
        return train(view, config)


def _check_grads(grads, step, what):
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(f"{what} gradient became non-finite at step {step}")


def _guard(step, fn, *args):
    try:
        return fn(*args)
    except nd.NonFiniteError as e:
        raise TrainingDivergedError(f"diverged at step {step}: {e}") from None


def _seen_batches(view: TrainingView, batch: int, rng):
    x = view.seen_features
    attr = view.attributes_of(view.seen_ids)
    row_of = {int(c): i for i, c in enumerate(view.seen_ids)}
    a_rows = np.array([row_of[int(c)] for c in view.seen_labels])
    n = x.shape[0]
    while True:
        idx = rng.integers(0, n, size=min(batch, n))
        yield x[idx], attr[a_rows[idx]]


def _stack(n_in: int, n_out: int, cfg: GeneratorConfig, seed: int) -> nd.Mlp:
    dims = [n_in] + [cfg.hidden] * cfg.hidden_layers + [n_out]
    acts = [cfg.hidden_activation] * cfg.hidden_layers + ["identity"]
    return nd.build_mlp(dims, acts, seed)


def _train_cvae(view: TrainingView, cfg: GeneratorConfig) -> GeneratorFit:
    M, d = view.attr_dim, view.feat_dim
    nz = cfg.noise_dim or M
    enc = _stack(d + M, 2 * nz, cfg, nd.derive_seed(cfg.seed, "enc"))
    dec = _stack(M + nz, d, cfg, nd.derive_seed(cfg.seed, "dec"))
    G = GeneratorModel(dec, M, nz, "cvae")
    opt_e, opt_d = nd.AdamState(lr=cfg.lr), nd.AdamState(lr=cfg.lr)
    rng = np.random.default_rng(nd.derive_seed(cfg.seed, "cvae-data"))
    batches = _seen_batches(view, cfg.batch, rng)
    trace = {"recon": [], "kl": []}

    for step in range(cfg.steps):
        x, a = next(batches)
        n = x.shape[0]
        tr_e = _guard(step, nd.forward_trace, enc, np.concatenate([x, a], axis=1))
        mu = tr_e.output[:, :nz].astype(np.float64)
        logvar = np.clip(tr_e.output[:, nz:].astype(np.float64), -10.0, 10.0)
        e = rng.standard_normal(mu.shape)
        std = np.exp(0.5 * logvar)
        z = mu + std * e
        tr_d = _guard(step, nd.forward_trace, dec, G.inputs(a, z))
        r = tr_d.output.astype(np.float64) - x
        recon = float(np.sum(r * r) / n)
        kl = float(-0.5 * np.sum(1 + logvar - mu**2 - np.exp(logvar)) / n)
        _check_finite(recon + kl, step, "cvae loss")
        trace["recon"].append(recon)
        trace["kl"].append(kl)

        g_dec, g_in = nd.backprop(dec, tr_d, 2.0 * r / n, need_input=True)
        g_z = g_in[:, M:].astype(np.float64)
        g_mu = g_z + cfg.kl_weight * mu / n
        g_lv = g_z * 0.5 * std * e + cfg.kl_weight * 0.5 * (np.exp(logvar) - 1.0) / n
        g_enc, _ = nd.backprop(enc, tr_e, np.concatenate([g_mu, g_lv], axis=1))
        _check_grads(g_dec + g_enc, step, "cvae")
        nd.adam_update(dec.parameters(), g_dec, opt_d)
        nd.adam_update(enc.parameters(), g_enc, opt_e)

    return GeneratorFit(G, None, enc, trace)


def _clip_(model: nd.Mlp, c: float) -> None:
    for p in model.parameters():
        np.clip(p, -c, c, out=p)


def _train_wgan(view: TrainingView, cfg: GeneratorConfig) -> GeneratorFit:
    M, d = view.attr_dim, view.feat_dim
    nz = cfg.noise_dim or M
    gen = _stack(M + nz, d, cfg, nd.derive_seed(cfg.seed, "G"))
    # the critic always keeps its nonlinearity
    crit = nd.build_mlp([d + M, cfg.hidden, 1], ["leaky_relu", "identity"], nd.derive_seed(cfg.seed, "D"))
    _clip_(crit, cfg.clip)
    opt_g = nd.AdamState(lr=cfg.lr, beta1=0.5)
    opt_c = nd.AdamState(lr=cfg.lr, beta1=0.5)
    rng = np.random.default_rng(nd.derive_seed(cfg.seed, "wgan-data"))
    batches = _seen_batches(view, cfg.batch, rng)
    G = GeneratorModel(gen, M, nz, "wgan-clip")
    trace = {"critic": [], "generator": []}

    for step in range(cfg.steps):
        for _ in range(cfg.critic_steps):
            x, a = next(batches)
            n = x.shape[0]
            fake = _guard(step, G, a, rng.standard_normal((n, nz)))
            both = np.concatenate([np.concatenate([x, a], 1), np.concatenate([fake, a], 1)])
            # minimize -(E D(real) - E D(fake))
            coef = np.concatenate([np.full(n, -1.0 / n), np.full(n, 1.0 / n)])
            loss, grads, _ = _guard(step, nd.loss_and_grads, crit, both, coef, nd.LossSpec("critic_difference"))
            _check_finite(loss, step, "critic loss")
            _check_grads(grads, step, "critic")
            nd.adam_update(crit.parameters(), grads, opt_c)
            _clip_(crit, cfg.clip)
        trace["critic"].append(-loss)

        x, a = next(batches)
        n = x.shape[0]
        tr_g = _guard(step, nd.forward_trace, gen, G.inputs(a, rng.standard_normal((n, nz))))
        d_in = np.concatenate([tr_g.output, a], axis=1)
        loss_g, _, g_in = _guard(
            step, nd.loss_and_grads, crit, d_in, np.full(n, -1.0 / n), nd.LossSpec("critic_difference"), True
        )
        _check_finite(loss_g, step, "generator loss")
        g_gen, _ = nd.backprop(gen, tr_g, g_in[:, :d])
        _check_grads(g_gen, step, "generator")
        nd.adam_update(gen.parameters(), g_gen, opt_g)
        trace["generator"].append(loss_g)

    return GeneratorFit(G, DiscriminatorModel(crit), None, trace)


@dataclass
class SyntheticDataset:
    features: np.ndarray
    labels: np.ndarray
    provenance: str = "unseen"

    def __len__(self) -> int:
        return self.features.shape[0]


def synthesize_features(G: GeneratorModel, class_ids, embeddings, n_per_class: int = 300, seed: int = 0,
                        provenance: str = "unseen") -> SyntheticDataset:
    """``n_per_class`` rows ``G(a_c, eps)`` per class, fresh noise per row.

    Each class draws its noise from its own derived stream, so a class's
    rows do not depend on which other classes are requested.
    """
    class_ids = np.asarray(class_ids).reshape(-1)
    emb = np.atleast_2d(np.asarray(embeddings, dtype=np.float32))
    if emb.shape[0] != class_ids.size:
        raise nd.ShapeError(f"{class_ids.size} class ids but {emb.shape[0]} embeddings")
    if emb.shape[1] != G.attr_dim:
        raise nd.ShapeError(f"embedding dim {emb.shape[1]} != generator attribute dim {G.attr_dim}")
    feats, labels = [], []
    for c, a in zip(class_ids, emb):
        rng = np.random.default_rng(nd.derive_seed(seed, "synth", int(c)))
        eps = rng.standard_normal((n_per_class, G.noise_dim))
        feats.append(G(np.repeat(a[None], n_per_class, axis=0), eps))
        labels.append(np.full(n_per_class, c, dtype=np.int64))
    return SyntheticDataset(np.concatenate(feats), np.concatenate(labels), provenance)


# --------------------------------------------------------------------------
# linear classifiers


@dataclass
class ClassifierConfig:
    epochs: int = 40
    batch: int = 128
    lr: float = 1e-3
    seed: int = 0


@dataclass
class ClosedSetClassifier:
    net: nd.Mlp  # single linear layer d -> K
    class_ids: np.ndarray

    def logits(self, x) -> np.ndarray:
        return nd.forward(self.net, x)

    def predict(self, x) -> np.ndarray:
        return self.class_ids[np.argmax(self.logits(x), axis=1)]

    @property
    def n_classes(self) -> int:
        return self.class_ids.size


def fit_linear(x, y_idx, n_out: int, config: ClassifierConfig, spec: nd.LossSpec | None = None,
               row_weights=None) -> nd.Mlp:
    """Minibatch Adam on a single linear layer; targets are column indices."""
    spec = spec or nd.LossSpec("softmax_ce")
    x = np.asarray(x, dtype=np.float32)
    y_idx = np.asarray(y_idx, dtype=np.int64)
    net = nd.build_mlp([x.shape[1], n_out], "identity", nd.derive_seed(config.seed, "linear-init"))
    opt = nd.AdamState(lr=config.lr)
    rng = np.random.default_rng(nd.derive_seed(config.seed, "linear-order"))
    n = x.shape[0]
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch):
            idx = order[start : start + config.batch]
            w = None if row_weights is None else row_weights[idx]
            loss, grads, _ = nd.loss_and_grads(net, x[idx], y_idx[idx], spec, weights=w)
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"classifier loss non-finite in epoch {epoch}")
            nd.adam_update(net.parameters(), grads, opt)
    return net


def _index_labels(labels, class_ids) -> np.ndarray:
    pos = {int(c): i for i, c in enumerate(class_ids)}
    return np.array([pos[int(c)] for c in labels], dtype=np.int64)


def train_closed_classifier(data: SyntheticDataset, config: ClassifierConfig | None = None,
                            class_ids=None, spec: nd.LossSpec | None = None) -> ClosedSetClassifier:
    """Softmax classifier over the classes present in ``data`` (sorted ids by default)."""
    config = config or ClassifierConfig()
    class_ids = np.unique(data.labels) if class_ids is None else np.asarray(class_ids)
    counts = np.array([(data.labels == c).sum() for c in class_ids])
    if (counts == 0).any():
        raise ValueError(f"classes without samples: {class_ids[counts == 0].tolist()}")
    extra = np.setdiff1d(np.unique(data.labels), class_ids)
    if extra.size:
        raise ValueError(f"labels outside the class list: {extra.tolist()}")
    net = fit_linear(data.features, _index_labels(data.labels, class_ids), class_ids.size, config, spec)
    clf = ClosedSetClassifier(net, class_ids.copy())
    log.info("closed-set classifier train acc %.4f", zsl_accuracy(clf, data.features, data.labels))
    return clf


def zsl_accuracy(classifier: ClosedSetClassifier, features, labels) -> float:
    return closed_acc(classifier.predict(features), labels, classifier.class_ids)
