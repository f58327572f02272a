"""Adversarial semantic embeddings for unknown classes and the K+1 open-set classifier.

Around every anchor (unseen-class) embedding a set of pseudo-embeddings is
optimized so that the features the frozen generator produces from them get
a low log-sum-exp under the frozen closed-set classifier (high free energy),
while a Euclidean penalty keeps each one close to its anchor:

    loss(a_hat) = mean_eps T * logsumexp(phi(G(a_hat, eps)) / T) + beta * ||a_hat - a_anchor||

Features generated from the learned embeddings become the extra "unknown"
class of a K+1 linear softmax classifier whose last softmax output is the
open score.
"""

from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass, field

import numpy as np

from . import ndcore as nd
from .zslgen import (
    ClassifierConfig,
    ClosedSetClassifier,
    GeneratorModel,
    SyntheticDataset,
    TrainingDivergedError,
    _index_labels,
    fit_linear,
    synthesize_features,
)

log = logging.getLogger(__name__)

UNKNOWN_LABEL = -1
ANCHOR_SETS = ("unseen", "seen+unseen")
STRATEGIES = ("mixup", "uniform-noise", "semantic-noise", "adversarial-features")


@dataclass
class AseConfig:
    beta: float = 1.0
    temperature: float = 1.0
    embeddings_per_anchor: int = 50
    steps: int = 200
    lr: float = 0.01
    init_noise: float | None = None  # None -> 0.05 * mean anchor norm
    noise_samples: int = 8
    anchor_set: str = "unseen"
    box: tuple | None = None  # optional (lo, hi) projection of embeddings
    seed: int = 0

    def validate(self) -> None:
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.embeddings_per_anchor < 1:
            raise ValueError("embeddings_per_anchor must be >= 1")
        if self.steps < 0 or self.noise_samples < 1 or self.lr <= 0:
            raise ValueError("steps >= 0, noise_samples >= 1 and lr > 0 required")
        if self.anchor_set not in ANCHOR_SETS:
            raise ValueError(f"anchor_set must be one of {ANCHOR_SETS}")


def adv_energy(logits, temperature: float = 1.0):
    """``T * logsumexp(logits / T)`` per row (scalar for a 1-D input).

    This is the negated free energy; driving it down raises the energy.
    """
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    z = np.asarray(logits, dtype=np.float64)
    return temperature * nd.logsumexp(z / temperature, axis=-1)


def dis_loss(a_hat, a_anchor):
    a_hat, a_anchor = np.asarray(a_hat, np.float64), np.asarray(a_anchor, np.float64)
    if a_hat.shape[-1] != a_anchor.shape[-1]:
        raise nd.ShapeError(f"embedding dims differ: {a_hat.shape[-1]} vs {a_anchor.shape[-1]}")
    return np.linalg.norm(a_hat - a_anchor, axis=-1)


@contextlib.contextmanager
def frozen(*models):
    """Mark every parameter array read-only for the duration of the block."""
    arrays = []
    for m in models:
        net = getattr(m, "net", m)
        arrays.extend(net.parameters())
    flags = [a.flags.writeable for a in arrays]
    for a in arrays:
        a.flags.writeable = False
    try:
        yield
    finally:
        for a, f in zip(arrays, flags):
            a.flags.writeable = f


def _batch_ase(A_hat, anchors, G: GeneratorModel, phi: ClosedSetClassifier, beta, T, noise):
    """Per-embedding loss terms and gradients for a stack of embeddings.

    ``noise`` has shape (n, S, noise_dim). Returns (L_ase, L_adv, L_dis,
    grad) with one entry (row) per embedding.
    """
    n, S, _ = noise.shape
    M = G.attr_dim
    A_rep = np.repeat(np.asarray(A_hat, np.float64), S, axis=0)
    tr_g = nd.forward_trace(G.net, G.inputs(A_rep, noise.reshape(n * S, -1)))
    tr_c = nd.forward_trace(phi.net, tr_g.output)
    z = tr_c.output.astype(np.float64)
    e = adv_energy(z, T).reshape(n, S)
    l_adv = e.mean(axis=1)
    g_z = nd.softmax(z / T, axis=1) / S
    _, g_p = nd.backprop(phi.net, tr_c, g_z, need_input=True)
    _, g_in = nd.backprop(G.net, tr_g, g_p, need_input=True)
    g_adv = g_in[:, :M].astype(np.float64).reshape(n, S, M).sum(axis=1)

    diff = np.asarray(A_hat, np.float64) - np.asarray(anchors, np.float64)
    l_dis = np.linalg.norm(diff, axis=1)
    safe = np.where(l_dis > 0, l_dis, 1.0)
    g_dis = np.where(l_dis[:, None] > 0, diff / safe[:, None], 0.0)  # subgradient 0 at the cusp
    return l_adv + beta * l_dis, l_adv, l_dis, g_adv + beta * g_dis


def ase_loss(a_hat, a_anchor, G: GeneratorModel, phi_closed: ClosedSetClassifier, config: AseConfig, noise_batch):
    """Loss terms and gradient for one embedding; ``noise_batch`` is (S, noise_dim).

    Returns ``(L_ase, L_adv, L_dis, grad_a_hat)``.
    """
    a_hat = np.asarray(a_hat, np.float64).reshape(1, -1)
    a_anchor = np.asarray(a_anchor, np.float64).reshape(1, -1)
    if a_hat.shape != a_anchor.shape:
        raise nd.ShapeError(f"embedding dims differ: {a_hat.shape[1]} vs {a_anchor.shape[1]}")
    noise = np.asarray(noise_batch, np.float64)
    noise = noise.reshape(1, -1, G.noise_dim)
    L, la, ld, g = _batch_ase(a_hat, a_anchor, G, phi_closed, config.beta, config.temperature, noise)
    return float(L[0]), float(la[0]), float(ld[0]), g[0]


@dataclass
class AdversarialEmbeddingSet:
    embeddings: np.ndarray  # (n, M)
    anchor_ids: np.ndarray  # (n,) class id of each embedding's anchor
    anchors: np.ndarray  # (n, M) anchor embedding per row
    losses: dict = field(default_factory=dict)  # final per-embedding terms
    trace: list = field(default_factory=list)  # mean L_ase per step

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    def copy(self) -> "AdversarialEmbeddingSet":
        return AdversarialEmbeddingSet(
            self.embeddings.copy(), self.anchor_ids.copy(), self.anchors.copy(),
            {k: v.copy() for k, v in self.losses.items()}, list(self.trace),
        )


def default_init_noise(anchors) -> float:
    return 0.05 * float(np.mean(np.linalg.norm(np.asarray(anchors, np.float64), axis=1)))


def init_embeddings(anchor_ids, anchors, config: AseConfig, seed: int | None = None) -> AdversarialEmbeddingSet:
    anchors = np.atleast_2d(np.asarray(anchors, np.float64))
    anchor_ids = np.asarray(anchor_ids).reshape(-1)
    if anchors.shape[0] == 0:
        raise ValueError("no anchor embeddings")
    if anchor_ids.size != anchors.shape[0]:
        raise nd.ShapeError(f"{anchor_ids.size} anchor ids for {anchors.shape[0]} anchors")
    k = config.embeddings_per_anchor
    scale = default_init_noise(anchors) if config.init_noise is None else config.init_noise
    rng = np.random.default_rng(nd.derive_seed(config.seed if seed is None else seed, "ase-init"))
    rep = np.repeat(anchors, k, axis=0)
    emb = rep + scale * rng.standard_normal(rep.shape)
    return AdversarialEmbeddingSet(emb, np.repeat(anchor_ids, k), rep.copy())


def _guarded_batch(A, anchors, G, phi, config: AseConfig, noise, step):
    """``_batch_ase`` that names the first embedding whose loss is non-finite."""
    def run(rows):
        return _batch_ase(A[rows], anchors[rows], G, phi, config.beta, config.temperature, noise[rows])

    try:
        out = run(slice(None))
        bad = np.flatnonzero(~np.isfinite(out[0]) | ~np.isfinite(out[3]).all(axis=1))
    except nd.NonFiniteError:
        out, bad = None, None
    if bad is None:  # locate the row that broke the forward pass
        bad = []
        for i in range(A.shape[0]):
            try:
                r = run(slice(i, i + 1))
            except nd.NonFiniteError:
                bad.append(i)
                break
            if not (np.isfinite(r[0]).all() and np.isfinite(r[3]).all()):
                bad.append(i)
                break
        bad = np.asarray(bad, dtype=np.int64)
    if bad.size:
        raise TrainingDivergedError(f"non-finite L_ase for embedding {int(bad[0])} at step {step}")
    return out


def learn_embeddings(emb: AdversarialEmbeddingSet, G: GeneratorModel, phi_closed: ClosedSetClassifier,
                     config: AseConfig) -> AdversarialEmbeddingSet:
    """Adam on every embedding independently; G and phi_closed stay untouched."""
    config.validate()
    out = emb.copy()
    A = out.embeddings
    opt = nd.AdamState(lr=config.lr)
    rng = np.random.default_rng(nd.derive_seed(config.seed, "ase-noise"))
    n, S = A.shape[0], config.noise_samples
    with frozen(G, phi_closed):
        for step in range(config.steps):
            noise = rng.standard_normal((n, S, G.noise_dim))
            L, la, ld, g = _guarded_batch(A, out.anchors, G, phi_closed, config, noise, step)
            out.trace.append(float(L.mean()))
            nd.adam_update([A], [g], opt)
            if config.box is not None:
                np.clip(A, config.box[0], config.box[1], out=A)
        noise = rng.standard_normal((n, S, G.noise_dim))
        L, la, ld, _ = _guarded_batch(A, out.anchors, G, phi_closed, config, noise, config.steps)
    out.losses = {"ase": L, "adv": la, "dis": ld}
    return out


def generate_unknown_features(G: GeneratorModel, emb: AdversarialEmbeddingSet, per_embedding: int = 20,
                              seed: int = 0) -> SyntheticDataset:
    if per_embedding < 1:
        raise ValueError("per_embedding must be >= 1")
    rng = np.random.default_rng(nd.derive_seed(seed, "unknown-features"))
    A = np.repeat(emb.embeddings, per_embedding, axis=0)
    eps = rng.standard_normal((A.shape[0], G.noise_dim))
    feats = G(A, eps)
    return SyntheticDataset(feats, np.full(feats.shape[0], UNKNOWN_LABEL, np.int64), "unknown")


# --------------------------------------------------------------------------
# ablation strategies for producing unknown-class features


def mixup_unknowns(features, labels, n: int, seed: int = 0, lam_range=(0.3, 0.7)) -> SyntheticDataset:
    """Convex combinations of feature pairs drawn from two different classes."""
    x = np.asarray(features, np.float64)
    y = np.asarray(labels)
    if np.unique(y).size < 2:
        raise ValueError("mixup needs at least two classes")
    rng = np.random.default_rng(nd.derive_seed(seed, "mixup"))
    i = rng.integers(0, len(y), n)
    j = rng.integers(0, len(y), n)
    same = y[i] == y[j]
    while same.any():
        j[same] = rng.integers(0, len(y), same.sum())
        same = y[i] == y[j]
    lam = rng.uniform(*lam_range, size=(n, 1))
    out = lam * x[i] + (1 - lam) * x[j]
    return SyntheticDataset(out.astype(np.float32), np.full(n, UNKNOWN_LABEL, np.int64), "mixup")


def uniform_noise_unknowns(features, n: int, seed: int = 0) -> SyntheticDataset:
    """Uniform samples inside the per-dimension bounding box of ``features``."""
    x = np.asarray(features, np.float64)
    rng = np.random.default_rng(nd.derive_seed(seed, "uniform-noise"))
    out = rng.uniform(x.min(axis=0), x.max(axis=0), size=(n, x.shape[1]))
    return SyntheticDataset(out.astype(np.float32), np.full(n, UNKNOWN_LABEL, np.int64), "uniform-noise")


def semantic_noise_unknowns(G: GeneratorModel, anchor_ids, anchors, per_anchor: int, noise_scale: float,
                            seed: int = 0) -> SyntheticDataset:
    """Generator output at Gaussian-perturbed anchor embeddings, no optimization.

    Uses the same per-class noise streams as :func:`synthesize_features`, so a
    zero noise scale reproduces its rows exactly.
    """
    anchors = np.atleast_2d(np.asarray(anchors, np.float64))
    rng = np.random.default_rng(nd.derive_seed(seed, "semantic-noise"))
    perturbed = anchors + noise_scale * rng.standard_normal(anchors.shape)
    ds = synthesize_features(G, anchor_ids, perturbed, per_anchor, seed)
    return SyntheticDataset(ds.features, np.full(len(ds), UNKNOWN_LABEL, np.int64), "semantic-noise")


def adversarial_feature_unknowns(features, phi_closed: ClosedSetClassifier, n: int, *, beta: float = 1.0,
                                 temperature: float = 1.0, steps: int = 100, lr: float = 0.05,
                                 seed: int = 0):
    """Start at synthesized unseen features and descend the energy loss in feature space.

    Same objective as the embedding search with the generator removed:
    ``T * logsumexp(phi(x) / T) + beta * ||x - x0||``. Returns the dataset
    and the per-step mean adv energy.
    """
    x0 = np.asarray(features, np.float64)
    rng = np.random.default_rng(nd.derive_seed(seed, "adv-features"))
    start = x0[rng.integers(0, x0.shape[0], n)]
    x = start.copy()
    opt = nd.AdamState(lr=lr)
    trace = []
    with frozen(phi_closed):
        for _ in range(steps + 1):
            tr = nd.forward_trace(phi_closed.net, x)
            z = tr.output.astype(np.float64)
            trace.append(float(adv_energy(z, temperature).mean()))
            if len(trace) > steps:
                break
            _, gx = nd.backprop(phi_closed.net, tr, nd.softmax(z / temperature, axis=1), need_input=True)
            diff = x - start
            dist = np.linalg.norm(diff, axis=1, keepdims=True)
            g = gx.astype(np.float64) + beta * np.where(dist > 0, diff / np.where(dist > 0, dist, 1), 0)
            nd.adam_update([x], [g], opt)
    ds = SyntheticDataset(x.astype(np.float32), np.full(n, UNKNOWN_LABEL, np.int64), "adversarial-features")
    return ds, trace


def variant_unknowns(strategy: str, inputs: dict, config: dict | None = None, seed: int = 0) -> SyntheticDataset:
    """Dispatch to one of the ablation strategies.

    ``inputs`` keys used: ``unseen`` (SyntheticDataset of unseen features),
    ``G``, ``anchor_ids``, ``anchors``, ``phi_closed``. ``config`` keys:
    ``n`` (rows to produce), ``noise_scale``, ``per_anchor`` and the
    adversarial-features optimizer settings.
    """
    config = dict(config or {})
    unseen = inputs.get("unseen")
    n = config.pop("n", len(unseen) if unseen is not None else 1000)
    if strategy == "mixup":
        return mixup_unknowns(unseen.features, unseen.labels, n, seed)
    if strategy == "uniform-noise":
        return uniform_noise_unknowns(unseen.features, n, seed)
    if strategy == "semantic-noise":
        anchors = np.atleast_2d(inputs["anchors"])
        per = config.get("per_anchor", max(1, n // anchors.shape[0]))
        scale = config.get("noise_scale", default_init_noise(anchors))
        return semantic_noise_unknowns(inputs["G"], inputs["anchor_ids"], anchors, per, scale, seed)
    if strategy == "adversarial-features":
        kw = {k: config[k] for k in ("beta", "temperature", "steps", "lr") if k in config}
        return adversarial_feature_unknowns(unseen.features, inputs["phi_closed"], n, seed=seed, **kw)[0]
    raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")


# --------------------------------------------------------------------------
# open-set classifier and scoring


@dataclass
class ScoredPredictions:
    """Open scores (higher = more unknown), predicted known class and raw logits per row."""

    scores: np.ndarray
    predicted: np.ndarray
    logits: np.ndarray

    def __len__(self) -> int:
        return self.scores.size

    def __getitem__(self, i):
        return ScoredPredictions(self.scores[i], self.predicted[i], self.logits[i])


@dataclass
class OpenSetClassifier:
    net: nd.Mlp  # single linear layer d -> K + 1, last column = unknown
    class_ids: np.ndarray  # the K known classes

    @property
    def n_known(self) -> int:
        return self.class_ids.size

    def logits(self, x) -> np.ndarray:
        return nd.forward(self.net, x)

    def predict(self, x) -> np.ndarray:
        return self.class_ids[np.argmax(self.logits(x)[:, : self.n_known], axis=1)]


@dataclass
class OpenTrainReport:
    known_acc: float
    unknown_recall: float


def train_open_classifier(known: SyntheticDataset, unknown: SyntheticDataset, config: ClassifierConfig | None = None,
                          class_ids=None, unknown_weight: float = 1.0):
    """Cross-entropy training of the K+1 linear head on known plus unknown rows.

    Returns ``(classifier, OpenTrainReport)``. ``unknown_weight`` scales the
    unknown rows' contribution relative to known rows.
    """
    config = config or ClassifierConfig()
    if known is None or len(known) == 0:
        raise ValueError("no known-class rows for the open-set classifier")
    if unknown is None or len(unknown) == 0:
        raise ValueError("the K+1 head needs unknown-class rows")
    class_ids = np.unique(known.labels) if class_ids is None else np.asarray(class_ids)
    if np.isin(UNKNOWN_LABEL, class_ids) or np.any(unknown.labels != UNKNOWN_LABEL):
        raise ValueError("known and unknown label spaces overlap")
    counts = np.array([(known.labels == c).sum() for c in class_ids])
    if (counts == 0).any():
        raise ValueError(f"classes without samples: {class_ids[counts == 0].tolist()}")
    K = class_ids.size
    x = np.concatenate([known.features, unknown.features]).astype(np.float32)
    y = np.concatenate([_index_labels(known.labels, class_ids), np.full(len(unknown), K)])
    w = None
    if unknown_weight != 1.0:
        w = np.concatenate([np.ones(len(known)), np.full(len(unknown), float(unknown_weight))])
    net = fit_linear(x, y, K + 1, config, row_weights=w)
    clf = OpenSetClassifier(net, class_ids.copy())
    z = clf.logits(x)
    pred = np.argmax(z, axis=1)
    rep = OpenTrainReport(
        known_acc=float(np.mean(pred[: len(known)] == y[: len(known)])),
        unknown_recall=float(np.mean(pred[len(known) :] == K)),
    )
    log.info("open classifier train: known acc %.4f unknown recall %.4f", rep.known_acc, rep.unknown_recall)
    return clf, rep


def score_logits(logits, class_ids) -> ScoredPredictions:
    z = np.atleast_2d(np.asarray(logits, np.float64))
    K = z.shape[1] - 1
    p = nd.softmax(z, axis=1)
    return ScoredPredictions(p[:, K], np.asarray(class_ids)[np.argmax(z[:, :K], axis=1)], z)


def open_score(classifier: OpenSetClassifier, x) -> ScoredPredictions:
    """Softmax probability of the unknown column; class = argmax of the first K logits."""
    return score_logits(classifier.logits(x), classifier.class_ids)
