"""Stage functions and the per-seed experiment used by the CLI and the suite.

Stages, in order: generator -> closed-set classifier (on synthesized unseen
features) -> adversarial embeddings -> open-set classifier -> scoring. The
"simply combined" baselines branch off after the closed-set stage, and the
ablation strategies replace the embedding stage.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields, is_dataclass

import numpy as np

from . import __version__
from . import ase
from . import baselines as bl
from . import evalkit as ek
from . import zslgen as zg
from .datasets import UNKNOWN, SplitView, TrainingView, training_view
from .ndcore import derive_seed

log = logging.getLogger(__name__)

DEFAULT_BASELINES = (
    {"kind": "msp"},
    {"kind": "maxlogit"},
    {"kind": "energy"},
    {"kind": "odin", "temperature": 1000.0, "eps_odin": 0.0014},
    {"kind": "logitnorm", "tau": 0.04},
)


@dataclass
class PipelineConfig:
    generator: zg.GeneratorConfig = field(default_factory=zg.GeneratorConfig)
    closed: zg.ClassifierConfig = field(default_factory=zg.ClassifierConfig)
    ase: ase.AseConfig = field(default_factory=ase.AseConfig)
    open: zg.ClassifierConfig = field(default_factory=zg.ClassifierConfig)
    n_per_class: int = 300
    per_embedding: int = 20
    unknown_weight: float = 1.0
    beta_grid: list | None = None  # select beta on a seen-class validation split
    odin_eps_grid: list | None = None  # likewise for the ODIN perturbation size
    val_fraction: float = 0.2  # share of seen classes held out per validation group
    baselines: list = field(default_factory=lambda: [dict(b) for b in DEFAULT_BASELINES])
    variants: list = field(default_factory=list)
    posthoc_on_open: bool = False  # also score the K+1 head with MSP / ODIN
    histogram_bins: int = 20

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d or {})
        sub = {
            "generator": zg.GeneratorConfig,
            "closed": zg.ClassifierConfig,
            "ase": ase.AseConfig,
            "open": zg.ClassifierConfig,
        }
        known = {f.name for f in fields(cls)}
        unknown_keys = set(d) - known
        if unknown_keys:
            raise ValueError(f"unknown pipeline config keys: {sorted(unknown_keys)}")
        for k, typ in sub.items():
            if k in d and not is_dataclass(d[k]):
                d[k] = _build(typ, d[k])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def baseline_specs(self) -> list:
        return [bl.BaselineSpec(**b) for b in self.baselines]


def _build(typ, values: dict):
    names = {f.name for f in fields(typ)}
    bad = set(values) - names
    if bad:
        raise ValueError(f"unknown {typ.__name__} keys: {sorted(bad)}")
    values = dict(values)
    if "box" in values and values["box"] is not None:
        values["box"] = tuple(values["box"])
    return typ(**values)


def config_hash(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        if is_dataclass(p):
            p = asdict(p)
        h.update(json.dumps(p, sort_keys=True, default=_plain).encode())
        h.update(b"\x00")
    return h.hexdigest()[:16]


def _plain(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"cannot hash {type(o)}")


def stage_seeds(master: int) -> dict:
    names = ("generator", "synth", "closed", "ase", "unknown", "open", "baseline", "variant", "validation")
    return {n: derive_seed(master, n) for n in names}


def _with_seed(cfg, seed):
    return type(cfg)(**{**asdict(cfg), "seed": seed}) if not isinstance(cfg, ase.AseConfig) else _ase_with(cfg, seed=seed)


def _ase_with(cfg: ase.AseConfig, **kw) -> ase.AseConfig:
    d = asdict(cfg)
    d.update(kw)
    if d.get("box") is not None:
        d["box"] = tuple(d["box"])
    return ase.AseConfig(**d)


# --------------------------------------------------------------------------
# stages


@dataclass
class KnownSet:
    """Training rows for the known classes of the open-set problem."""

    data: zg.SyntheticDataset
    class_ids: np.ndarray
    anchor_ids: np.ndarray
    anchors: np.ndarray


def stage_generator(view: TrainingView, cfg: PipelineConfig, seed: int) -> zg.GeneratorFit:
    return zg.train_generator(view, _with_seed(cfg.generator, stage_seeds(seed)["generator"]))


def known_training_set(G: zg.GeneratorModel, view: TrainingView, cfg: PipelineConfig, seed: int,
                       generalized: bool = False) -> KnownSet:
    """Synthesized unseen features, plus real seen features in generalized mode."""
    s = stage_seeds(seed)
    syn = zg.synthesize_features(G, view.unseen_ids, view.unseen_attributes, cfg.n_per_class, s["synth"])
    if not generalized:
        return KnownSet(syn, np.asarray(view.unseen_ids), np.asarray(view.unseen_ids), view.unseen_attributes)
    feats = np.concatenate([view.seen_features, syn.features]).astype(np.float32)
    labels = np.concatenate([view.seen_labels, syn.labels])
    ids = np.concatenate([view.seen_ids, view.unseen_ids])
    anchors = np.concatenate([view.seen_attributes, view.unseen_attributes])
    return KnownSet(zg.SyntheticDataset(feats, labels, "seen+unseen"), np.sort(ids), ids, anchors)


def stage_closed(known: KnownSet, cfg: PipelineConfig, seed: int) -> zg.ClosedSetClassifier:
    return zg.train_closed_classifier(known.data, _with_seed(cfg.closed, stage_seeds(seed)["closed"]), known.class_ids)


def stage_embeddings(G, phi, known: KnownSet, cfg: PipelineConfig, seed: int, beta: float | None = None):
    s = stage_seeds(seed)
    acfg = _ase_with(cfg.ase, seed=s["ase"], **({} if beta is None else {"beta": beta}))
    emb = ase.init_embeddings(known.anchor_ids, known.anchors, acfg)
    return ase.learn_embeddings(emb, G, phi, acfg)


def stage_open(G, emb, known: KnownSet, cfg: PipelineConfig, seed: int):
    s = stage_seeds(seed)
    unk = ase.generate_unknown_features(G, emb, cfg.per_embedding, s["unknown"])
    clf, rep = ase.train_open_classifier(
        known.data, unk, _with_seed(cfg.open, s["open"]), known.class_ids, cfg.unknown_weight
    )
    return clf, rep


def stage_baselines(phi, known: KnownSet, x, cfg: PipelineConfig, seed: int, odin_eps: float | None = None) -> dict:
    out = {}
    for spec in cfg.baseline_specs():
        if spec.kind == "logitnorm":
            clf = bl.train_logitnorm_classifier(
                known.data, spec.tau, _with_seed(cfg.closed, stage_seeds(seed)["baseline"]), known.class_ids
            )
        else:
            clf = phi
        if spec.kind == "odin" and odin_eps is not None:
            spec = bl.BaselineSpec("odin", spec.temperature, odin_eps, spec.tau)
        out[spec.name] = bl.run_baseline(spec, clf, x)
    return out


def stage_variants(G, phi, known: KnownSet, x, cfg: PipelineConfig, seed: int) -> dict:
    """Score the test pool with K+1 heads trained on each ablation's unknowns."""
    s = stage_seeds(seed)
    n_unknown = known.anchor_ids.size * cfg.ase.embeddings_per_anchor * cfg.per_embedding
    inputs = {"unseen": known.data, "G": G, "anchor_ids": known.anchor_ids, "anchors": known.anchors,
              "phi_closed": phi}
    out = {}
    for strategy in cfg.variants:
        vcfg = {"n": n_unknown, "per_anchor": n_unknown // known.anchor_ids.size}
        if strategy == "adversarial-features":
            vcfg.update(beta=cfg.ase.beta, temperature=cfg.ase.temperature)
        unk = ase.variant_unknowns(strategy, inputs, vcfg, derive_seed(s["variant"], strategy))
        clf, _ = ase.train_open_classifier(
            known.data, unk, _with_seed(cfg.open, s["open"]), known.class_ids, cfg.unknown_weight
        )
        out[strategy] = ase.open_score(clf, x)
    return out


def posthoc_on_open(open_clf: ase.OpenSetClassifier, x, odin_eps: float = 0.0014) -> dict:
    """MSP / ODIN applied to the K+1 head's first K logits."""
    head = zg.ClosedSetClassifier(_drop_last_column(open_clf.net), open_clf.class_ids)
    return {
        "ase-msp": bl.run_baseline(bl.BaselineSpec("msp"), head, x),
        "ase-odin": bl.run_baseline(bl.BaselineSpec("odin", 1000.0, odin_eps), head, x),
    }


def _drop_last_column(net):
    out = net.copy()
    out.weights[-1] = np.ascontiguousarray(out.weights[-1][:, :-1])
    out.biases[-1] = np.ascontiguousarray(out.biases[-1][:-1])
    return out


# --------------------------------------------------------------------------
# validation-based hyperparameter selection


def validation_view(view: TrainingView, fraction: float, seed: int):
    """Pseudo ZS-OSR problem carved out of the seen classes.

    Returns ``(train_view, test_features, test_labels)`` where a ``fraction``
    of seen classes act as unseen and another ``fraction`` as unknown
    (labelled ``UNKNOWN``).
    """
    rng = np.random.default_rng(derive_seed(seed, "validation-split"))
    ids = rng.permutation(np.asarray(view.seen_ids))
    k = max(1, int(round(fraction * ids.size)))
    if ids.size < 2 * k + 1:
        raise ValueError(f"too few seen classes ({ids.size}) for a validation split")
    v_unseen, v_unknown, v_seen = np.sort(ids[:k]), np.sort(ids[k : 2 * k]), np.sort(ids[2 * k :])
    labels = np.asarray(view.seen_labels)
    tr = np.isin(labels, v_seen)
    te = ~tr
    sub = TrainingView(
        seen_features=view.seen_features[tr],
        seen_labels=labels[tr],
        seen_ids=v_seen,
        seen_attributes=view.attributes_of(v_seen),
        unseen_ids=v_unseen,
        unseen_attributes=view.attributes_of(v_unseen),
    )
    y = labels[te].copy()
    y[np.isin(y, v_unknown)] = UNKNOWN
    return sub, view.seen_features[te], y


def select_hyperparameters(view: TrainingView, cfg: PipelineConfig, seed: int, *, beta: bool = True,
                           odin: bool = True) -> dict:
    """Grid-search beta and ODIN eps by validation AUROC on held-out seen classes.

    Ties go to the smaller value. Grids left unset keep the configured value.
    """
    chosen = {"beta": cfg.ase.beta, "odin_eps": None, "validation": {}}
    beta = beta and bool(cfg.beta_grid)
    odin = odin and bool(cfg.odin_eps_grid)
    if not (beta or odin):
        return chosen
    vseed = stage_seeds(seed)["validation"]
    sub, x, y = validation_view(view, cfg.val_fraction, vseed)
    known_mask = y != UNKNOWN
    G = stage_generator(sub, cfg, vseed).generator
    known = known_training_set(G, sub, cfg, vseed)
    phi = stage_closed(known, cfg, vseed)

    def pick(name, grid, score_fn):
        aucs = {float(v): ek.auroc(s[known_mask], s[~known_mask]) for v, s in ((v, score_fn(float(v))) for v in grid)}
        chosen[name] = max(aucs, key=lambda v: (aucs[v], -v))
        chosen["validation"][name] = aucs

    if beta:
        def beta_scores(b):
            emb = stage_embeddings(G, phi, known, cfg, vseed, beta=b)
            clf, _ = stage_open(G, emb, known, cfg, vseed)
            return ase.open_score(clf, x).scores

        pick("beta", cfg.beta_grid, beta_scores)
    if odin:
        pick("odin_eps", cfg.odin_eps_grid, lambda e: bl.score_odin(phi, x, 1000.0, e))
    log.info("validation picks beta=%s odin_eps=%s", chosen["beta"], chosen["odin_eps"])
    return chosen


# --------------------------------------------------------------------------
# one full run


@dataclass
class RunResult:
    reports: dict  # method -> MetricsReport
    scored: dict  # method -> ScoredPredictions
    selected: dict
    info: dict


def run_experiment(split: SplitView, cfg: PipelineConfig, seed: int, outdir=None) -> RunResult:
    """Train every stage under ``seed`` and evaluate ASE, baselines and variants."""
    generalized = split.mode == "generalized"
    tview = training_view(split)
    if generalized and cfg.ase.anchor_set != "seen+unseen":
        cfg = PipelineConfig.from_dict({**cfg.to_dict(), "ase": {**asdict(cfg.ase), "anchor_set": "seen+unseen"}})
    selected = select_hyperparameters(tview, cfg, seed)

    G = stage_generator(tview, cfg, seed).generator
    known = known_training_set(G, tview, cfg, seed, generalized)
    phi = stage_closed(known, cfg, seed)
    emb = stage_embeddings(G, phi, known, cfg, seed, beta=selected["beta"])
    open_clf, train_rep = stage_open(G, emb, known, cfg, seed)

    x = split.test_features
    scored = {"ase": ase.open_score(open_clf, x)}
    scored.update(stage_baselines(phi, known, x, cfg, seed, selected["odin_eps"]))
    scored.update({f"variant:{k}": v for k, v in stage_variants(G, phi, known, x, cfg, seed).items()})
    if cfg.posthoc_on_open:
        scored.update(posthoc_on_open(open_clf, x, selected["odin_eps"] or 0.0014))

    h = config_hash(cfg, split.info(), seed)
    n_unknown_cls = split.split.unknown.size or None
    reports = {}
    for name, sp in scored.items():
        method = name.replace(":", "-")
        rep = ek.make_report(
            sp, split.test_labels, split.test_groups, method=method, bins=cfg.histogram_bins,
            n_unseen_classes=split.split.unseen.size, n_unknown_classes=n_unknown_cls,
            seed=seed, config_hash=h,
        )
        rep.extra.update(stage_seeds=stage_seeds(seed), version=__version__)
        if outdir is not None:
            ek.write_report(rep, sp.scores, split.test_groups, sp.predicted, f"{outdir}/eval")
        reports[name] = rep
    closed_pred = phi.predict(x)
    unseen_rows = split.test_groups == "unseen"
    info = {
        "closed_acc": ek.closed_acc(closed_pred[unseen_rows], split.test_labels[unseen_rows]),
        "open_train": asdict(train_rep),
        "embedding_distance": float(emb.losses["dis"].mean()),
        "embedding_trace": [emb.trace[0], emb.trace[-1]] if emb.trace else [],
        "config_hash": h,
    }
    return RunResult(reports, scored, selected, info)
