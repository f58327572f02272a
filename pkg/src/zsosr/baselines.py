"""Post-hoc and training-time open-set scorers on top of a closed-set classifier.

These form the "generative ZSL + off-the-shelf OSR" combinations: the
classifier is trained on synthesized unseen features and one of the scorers
below turns its logits into an open score (higher = more unknown).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndcore as nd
from .ase import ScoredPredictions, adv_energy
from .zslgen import ClassifierConfig, ClosedSetClassifier, SyntheticDataset, train_closed_classifier

KINDS = ("msp", "maxlogit", "energy", "odin", "logitnorm")


@dataclass
class BaselineSpec:
    kind: str
    temperature: float = 1.0
    eps_odin: float = 0.0
    tau: float = 0.04

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown baseline {self.kind!r}; expected one of {KINDS}")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.eps_odin < 0:
            raise ValueError("eps_odin must be >= 0")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")

    @property
    def name(self) -> str:
        return self.kind


def score_msp(logits, temperature: float = 1.0):
    """1 - max softmax probability."""
    z = np.atleast_2d(np.asarray(logits, np.float64))
    return 1.0 - nd.softmax(z / temperature, axis=1).max(axis=1)


def score_maxlogit(logits):
    return -np.atleast_2d(np.asarray(logits, np.float64)).max(axis=1)


def score_energy(logits, temperature: float = 1.0):
    """Free energy ``-T * logsumexp(z / T)``; exactly ``-adv_energy``."""
    return -adv_energy(np.atleast_2d(logits), temperature)


def odin_perturb(classifier: ClosedSetClassifier, x, temperature: float, eps_odin: float) -> np.ndarray:
    """Step the input against the gradient of -log max softmax(z / T)."""
    x = np.atleast_2d(np.asarray(x, dtype=classifier.net.dtype))
    if eps_odin == 0:
        return x
    pred = np.argmax(classifier.logits(x), axis=1)
    spec = nd.LossSpec("softmax_ce", temperature=temperature)
    _, _, gx = nd.loss_and_grads(classifier.net, x, pred, spec, wrt_input=True)
    return x - np.asarray(eps_odin, x.dtype) * np.sign(gx)


def score_odin(classifier: ClosedSetClassifier, x, temperature: float = 1000.0, eps_odin: float = 0.0014):
    x_adv = odin_perturb(classifier, x, temperature, eps_odin)
    return score_msp(classifier.logits(x_adv), temperature)


def train_logitnorm_classifier(data: SyntheticDataset, tau: float = 0.04, config: ClassifierConfig | None = None,
                               class_ids=None) -> ClosedSetClassifier:
    """Cross-entropy on ``z / (||z|| * tau)``; scored afterwards by MSP on raw logits."""
    if tau <= 0:
        raise ValueError("tau must be > 0")
    return train_closed_classifier(data, config, class_ids, spec=nd.LossSpec("normalized_ce", tau=tau))


def run_baseline(spec: BaselineSpec, classifier: ClosedSetClassifier, x) -> ScoredPredictions:
    x = np.atleast_2d(x)
    z = classifier.logits(x).astype(np.float64)
    pred = classifier.class_ids[np.argmax(z, axis=1)]
    if spec.kind in ("msp", "logitnorm"):
        s = score_msp(z, spec.temperature)
    elif spec.kind == "maxlogit":
        s = score_maxlogit(z)
    elif spec.kind == "energy":
        s = score_energy(z, spec.temperature)
    else:
        s = score_odin(classifier, x, spec.temperature, spec.eps_odin)
    return ScoredPredictions(np.asarray(s, np.float64), pred, z)
