"""Command-line driver: staged commands with checkpoint chaining, suites and sweeps.

Every stage writes to ``<outdir>/<stage>/``. A stage's checkpoint records the
hash of the configuration slice that produced it, chained through the hashes
of its prerequisites, so a later stage refuses inputs built under a different
configuration.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

ENV_OUTDIR = "ZSOSR_OUTDIR"
ENV_THREADS = "ZSOSR_THREADS"
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")

STAGES = ("split", "train-gen", "train-closed", "learn-ase", "train-open", "score", "baseline", "eval")

DEFAULT_RUN = {
    "dataset": {"synthetic": {}, "seed": 0, "per_seed": False},
    "ood_dataset": None,
    "mode": "zs-osr",
    "split": {},
    "pipeline": {},
    "seeds": [0, 1, 2, 3, 4],
    "outdir": "runs",
    "openness": {"k_unseen": 10, "k_unknown_list": [10, 20, 30, 40]},
    "jobs": 1,
}

EXIT_CODES = {"ConfigError": 2, "MissingCheckpointError": 3, "StaleCheckpointError": 4}


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# configuration


def _deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _set_path(d: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    for k in keys[:-1]:
        if not isinstance(d.get(k), dict):
            d[k] = {}
        d = d[k]
    d[keys[-1]] = value


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_run_config(args) -> dict:
    """Defaults < config file < environment < flags."""
    rc = copy.deepcopy(DEFAULT_RUN)
    if args.config:
        p = Path(args.config)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            rc = _deep_merge(rc, json.loads(p.read_text()))
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {p} is not valid JSON: {e}") from None
    if os.environ.get(ENV_OUTDIR):
        rc["outdir"] = os.environ[ENV_OUTDIR]
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        _set_path(rc, k.strip(), _parse_value(v))
    if args.manifest:
        rc["dataset"] = {"manifest": args.manifest}
    if args.mode:
        rc["mode"] = args.mode
    if args.seeds:
        rc["seeds"] = [int(s) for s in args.seeds.split(",") if s.strip()]
    if args.outdir:
        rc["outdir"] = args.outdir
    if getattr(args, "jobs", None):
        rc["jobs"] = args.jobs
    validate_run_config(rc)
    return rc


def validate_run_config(rc: dict) -> None:
    from .datasets import MODES

    if rc["mode"] not in MODES:
        raise ConfigError(f"unknown mode {rc['mode']!r}; expected one of {MODES}")
    if not rc["seeds"]:
        raise ConfigError("seeds must be non-empty")
    for key in ("dataset", "ood_dataset"):
        ds = rc.get(key)
        if ds is None:
            continue
        if "manifest" in ds:
            if not Path(ds["manifest"]).exists():
                raise ConfigError(f"{key} manifest not found: {ds['manifest']}")
        elif "synthetic" not in ds:
            raise ConfigError(f"{key} needs 'manifest' or 'synthetic'")
    if rc["mode"] == "ood" and rc.get("ood_dataset") is None:
        raise ConfigError("mode 'ood' needs an ood_dataset")
    from .pipeline import PipelineConfig

    try:
        PipelineConfig.from_dict(rc["pipeline"])
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def _hash(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(json.dumps(p, sort_keys=True).encode())
        h.update(b"\x00")
    return h.hexdigest()[:16]


def _dataset_fingerprint(ds: dict | None, seed: int):
    if ds is None:
        return None
    if "manifest" in ds:
        p = Path(ds["manifest"]).resolve()
        return {"manifest": str(p), "sha256": hashlib.sha256(p.read_bytes()).hexdigest()}
    world_seed = seed if ds.get("per_seed") else ds.get("seed", 0)
    return {"synthetic": ds["synthetic"], "seed": world_seed}


def stage_hashes(rc: dict, seed: int) -> dict:
    """Chained config hashes; each covers exactly the inputs its stage reads."""
    from dataclasses import asdict

    from .pipeline import PipelineConfig

    pc = PipelineConfig.from_dict(rc["pipeline"])
    h = {}
    h["split"] = _hash(
        "split", _dataset_fingerprint(rc["dataset"], seed), _dataset_fingerprint(rc.get("ood_dataset"), seed),
        rc["mode"], rc["split"], seed,
    )
    h["train-gen"] = _hash(h["split"], asdict(pc.generator))
    h["train-closed"] = _hash(h["train-gen"], asdict(pc.closed), pc.n_per_class)
    h["learn-ase"] = _hash(h["train-closed"], asdict(pc.ase), pc.beta_grid, pc.val_fraction)
    h["train-open"] = _hash(h["learn-ase"], asdict(pc.open), pc.per_embedding, pc.unknown_weight)
    h["score"] = _hash(h["train-open"])
    h["baseline"] = _hash(h["train-closed"], pc.baselines, pc.odin_eps_grid, pc.val_fraction)
    h["eval"] = _hash(h["score"], pc.histogram_bins)
    return h


# --------------------------------------------------------------------------
# data


def _load_dataset(ds: dict, seed: int):
    from .datasets import load_bundle, synth_world

    if "manifest" in ds:
        return load_bundle(ds["manifest"])
    world_seed = seed if ds.get("per_seed") else ds.get("seed", 0)
    return synth_world(ds["synthetic"], world_seed).bundle


def split_view(rc: dict, seed: int):
    from .datasets import make_split

    bundle = _load_dataset(rc["dataset"], seed)
    other = _load_dataset(rc["ood_dataset"], seed) if rc.get("ood_dataset") else None
    s = rc["split"]
    return make_split(
        bundle, rc["mode"], seed, k_unseen=s.get("k_unseen"), k_unknown=s.get("k_unknown"), other=other,
        n_ood_classes=s.get("n_ood_classes"), canonical=s.get("canonical"),
        seen_test_frac=s.get("seen_test_frac", 0.2),
    )


# --------------------------------------------------------------------------
# staged commands


class Stages:
    """Runs one stage at a time for a single master seed."""

    def __init__(self, rc: dict, seed: int, root: Path):
        from .pipeline import PipelineConfig

        self.rc, self.seed, self.root = rc, seed, Path(root)
        self.cfg = PipelineConfig.from_dict(rc["pipeline"])
        self.hashes = stage_hashes(rc, seed)
        self._sv = None

    def dir(self, stage: str) -> Path:
        return self.root / stage

    def need(self, stage: str):
        from .checkpoint import load_checkpoint

        return load_checkpoint(self.dir(stage), stage, self.hashes[stage])

    def save(self, stage: str, tensors: dict, meta: dict):
        from .checkpoint import Checkpoint, save_checkpoint

        save_checkpoint(self.dir(stage), Checkpoint(stage, self.hashes[stage], self.seed, tensors, meta))
        return {"stage": stage, "config_hash": self.hashes[stage], "path": str(self.dir(stage))}

    @property
    def sv(self):
        if self._sv is None:
            self._sv = split_view(self.rc, self.seed)
        return self._sv

    @property
    def generalized(self) -> bool:
        return self.rc["mode"] == "generalized"

    def tview(self):
        from .datasets import training_view

        return training_view(self.sv)

    # loaders -------------------------------------------------------------

    def generator(self):
        from .checkpoint import mlp_from_tensors
        from .zslgen import GeneratorModel

        ck = self.need("train-gen")
        m = ck.meta
        return GeneratorModel(mlp_from_tensors("G", ck.tensors, m["net"]), m["attr_dim"], m["noise_dim"], m["mode"])

    def closed(self):
        from .checkpoint import mlp_from_tensors
        from .pipeline import KnownSet
        from .zslgen import ClosedSetClassifier, SyntheticDataset

        ck = self.need("train-closed")
        t = ck.tensors
        phi = ClosedSetClassifier(mlp_from_tensors("phi", t, ck.meta["net"]), t["class_ids"])
        known = KnownSet(SyntheticDataset(t["known_features"], t["known_labels"], ck.meta["provenance"]),
                         t["class_ids"], t["anchor_ids"], t["anchors"])
        return phi, known

    # stages --------------------------------------------------------------

    def run(self, stage: str) -> dict:
        return getattr(self, "do_" + stage.replace("-", "_"))()

    def do_split(self):
        info = self.sv.info()
        return self.save("split", {}, {"split": info})

    def do_train_gen(self):
        from .checkpoint import mlp_tensors
        from .pipeline import stage_generator

        self.need("split")
        fit = stage_generator(self.tview(), self.cfg, self.seed)
        G = fit.generator
        t, net_meta = mlp_tensors("G", G.net)
        last = {k: v[-1] for k, v in fit.trace.items() if len(v)}
        meta = {"net": net_meta, "attr_dim": G.attr_dim, "noise_dim": G.noise_dim, "mode": G.mode,
                "final_losses": last}
        return self.save("train-gen", t, meta)

    def do_train_closed(self):
        import numpy as np

        from .checkpoint import mlp_tensors
        from .pipeline import known_training_set, stage_closed

        G = self.generator()
        known = known_training_set(G, self.tview(), self.cfg, self.seed, self.generalized)
        phi = stage_closed(known, self.cfg, self.seed)
        t, net_meta = mlp_tensors("phi", phi.net)
        t.update(class_ids=np.asarray(phi.class_ids, np.int64), known_features=known.data.features,
                 known_labels=np.asarray(known.data.labels, np.int64),
                 anchor_ids=np.asarray(known.anchor_ids, np.int64), anchors=np.asarray(known.anchors))
        return self.save("train-closed", t, {"net": net_meta, "provenance": known.data.provenance})

    def do_learn_ase(self):
        from .pipeline import select_hyperparameters, stage_embeddings

        G = self.generator()
        phi, known = self.closed()
        sel = select_hyperparameters(self.tview(), self.cfg, self.seed, odin=False)
        emb = stage_embeddings(G, phi, known, self.cfg, self.seed, beta=sel["beta"])
        t = {"embeddings": emb.embeddings, "anchor_ids": emb.anchor_ids, "anchors": emb.anchors}
        t.update({f"loss_{k}": v for k, v in emb.losses.items()})
        meta = {"beta": sel["beta"], "validation": _str_keys(sel["validation"]),
                "trace_first_last": [emb.trace[0], emb.trace[-1]] if emb.trace else []}
        return self.save("learn-ase", t, meta)

    def do_train_open(self):
        from dataclasses import asdict

        from .ase import AdversarialEmbeddingSet
        from .checkpoint import mlp_tensors
        from .pipeline import stage_open

        G = self.generator()
        _, known = self.closed()
        ck = self.need("learn-ase")
        emb = AdversarialEmbeddingSet(ck.tensors["embeddings"], ck.tensors["anchor_ids"], ck.tensors["anchors"])
        clf, rep = stage_open(G, emb, known, self.cfg, self.seed)
        t, net_meta = mlp_tensors("open", clf.net)
        t["class_ids"] = clf.class_ids.astype("int64")
        return self.save("train-open", t, {"net": net_meta, "train": asdict(rep)})

    def do_score(self):
        from .ase import OpenSetClassifier, open_score
        from .checkpoint import mlp_from_tensors

        ck = self.need("train-open")
        clf = OpenSetClassifier(mlp_from_tensors("open", ck.tensors, ck.meta["net"]), ck.tensors["class_ids"])
        sp = open_score(clf, self.sv.test_features)
        return self.save("score", _scored_tensors("ase", sp), {"methods": ["ase"]})

    def do_baseline(self):
        from .pipeline import select_hyperparameters, stage_baselines

        phi, known = self.closed()
        sel = select_hyperparameters(self.tview(), self.cfg, self.seed, beta=False)
        scored = stage_baselines(phi, known, self.sv.test_features, self.cfg, self.seed, sel["odin_eps"])
        t = {}
        for name, sp in scored.items():
            t.update(_scored_tensors(name, sp))
        meta = {"methods": list(scored), "odin_eps": sel["odin_eps"], "validation": _str_keys(sel["validation"])}
        return self.save("baseline", t, meta)

    def do_eval(self):
        from .checkpoint import MissingCheckpointError
        from .evalkit import make_report
        from .pipeline import stage_seeds
        from . import __version__

        sources = [self.need("score")]
        try:
            sources.append(self.need("baseline"))
        except MissingCheckpointError:
            pass
        sv = self.sv
        out = self.dir("eval")
        reports = {}
        for ck in sources:
            for m in ck.meta["methods"]:
                sp = _scored_from(m, ck.tensors)
                rep = make_report(
                    sp, sv.test_labels, sv.test_groups, method=m, bins=self.cfg.histogram_bins,
                    n_unseen_classes=sv.split.unseen.size, n_unknown_classes=sv.split.unknown.size or None,
                    seed=self.seed, config_hash=ck.config_hash,
                )
                rep.extra.update(stage_seeds=stage_seeds(self.seed), version=__version__,
                                 stage_hashes=self.hashes)
                _write(rep, sp, sv, out)
                reports[m] = {"acc": rep.acc, "auroc": rep.auroc, "fpr95": rep.fpr95}
        return {"stage": "eval", "path": str(out), "reports": reports}


def _str_keys(d):
    if isinstance(d, dict):
        return {str(k): _str_keys(v) for k, v in d.items()}
    return d


def _scored_tensors(name: str, sp) -> dict:
    import numpy as np

    return {f"{name}.scores": np.asarray(sp.scores, np.float64), f"{name}.predicted": np.asarray(sp.predicted, np.int64),
            f"{name}.logits": np.asarray(sp.logits)}


def _scored_from(name: str, t: dict):
    from .ase import ScoredPredictions

    return ScoredPredictions(t[f"{name}.scores"], t[f"{name}.predicted"], t[f"{name}.logits"])


def _write(rep, sp, sv, outdir):
    from .evalkit import write_report

    write_report(rep, sp.scores, sv.test_groups, sp.predicted, outdir)


# --------------------------------------------------------------------------
# suites


def _run_seed(rc: dict, seed: int, outdir: str) -> dict:
    """One full in-memory run; returns report dicts keyed by method."""
    from .pipeline import PipelineConfig, run_experiment

    res = run_experiment(split_view(rc, seed), PipelineConfig.from_dict(rc["pipeline"]), seed, outdir=outdir)
    Path(outdir).mkdir(parents=True, exist_ok=True)
    summary = {"seed": seed, "selected": _str_keys(res.selected), "info": res.info}
    (Path(outdir) / "run.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return {m: r.to_dict() for m, r in res.reports.items()}


def run_suite(rc: dict, root: Path) -> dict:
    from concurrent.futures import ProcessPoolExecutor

    from .evalkit import MetricsReport, aggregate

    seeds = list(rc["seeds"])
    dirs = [str(root / f"seed_{s}") for s in seeds]
    jobs = max(1, int(rc.get("jobs", 1)))
    if jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(seeds))) as ex:
            runs = list(ex.map(_run_seed, [rc] * len(seeds), seeds, dirs))
    else:
        runs = [_run_seed(rc, s, d) for s, d in zip(seeds, dirs)]
    agg = {}
    for m in runs[0]:
        reps = [MetricsReport.from_dict(r[m]) for r in runs]
        agg[m] = aggregate(reps)
        agg[m]["openness"] = reps[0].openness
    root.mkdir(parents=True, exist_ok=True)
    (root / "aggregate.json").write_text(json.dumps(agg, indent=2, sort_keys=True) + "\n")
    return agg


def run_openness_sweep(rc: dict, root: Path) -> list:
    from .evalkit import openness

    o = rc["openness"]
    k_unseen, ks = int(o["k_unseen"]), [int(k) for k in o["k_unknown_list"]]
    if not ks:
        raise ConfigError("k_unknown_list must be non-empty")
    bundle = _load_dataset(rc["dataset"], rc["seeds"][0])
    pool = bundle.split.unseen.size + bundle.split.unknown.size
    if k_unseen < 1 or min(ks) < 1 or k_unseen + max(ks) > pool:
        raise ConfigError(f"infeasible openness sweep: {k_unseen} unseen + up to {max(ks)} unknown "
                          f"from a pool of {pool} classes")
    rows = []
    for k in ks:
        sub = _deep_merge(rc, {"mode": "openness", "split": {"k_unseen": k_unseen, "k_unknown": k}})
        agg = run_suite(sub, root / f"unknown_{k}")
        for m, a in agg.items():
            rows.append({"k_unseen": k_unseen, "k_unknown": k, "openness": openness(k_unseen, k), "method": m,
                         "acc": a["acc"], "auroc": a["auroc"], "fpr95": a["fpr95"]})
    root.mkdir(parents=True, exist_ok=True)
    (root / "sweep.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    return rows


def write_synth_data(rc: dict, root: Path) -> dict:
    from .datasets import save_bundle, synth_world, write_matrix

    ds = rc["dataset"] if "synthetic" in rc["dataset"] else DEFAULT_RUN["dataset"]
    seed = ds.get("seed", 0)
    world = synth_world(ds["synthetic"], seed)
    path = save_bundle(world.bundle, root)
    write_matrix(root / "mixing.zsmx", world.mixing.astype("float32"))
    return {"stage": "synth-data", "manifest": str(path), "summary": world.bundle.summary()}


# --------------------------------------------------------------------------
# entry point


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="zsosr", description="Zero-shot open-set recognition pipeline.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config entry, e.g. pipeline.ase.beta=0.1 (JSON values)")
    common.add_argument("--manifest", help="dataset manifest (replaces the configured dataset)")
    common.add_argument("--mode", help="split protocol: zs-osr, generalized, openness or ood")
    common.add_argument("--seeds", help="comma-separated master seeds")
    common.add_argument("--seed", type=int, help="master seed for staged commands (default: first seed)")
    common.add_argument("--outdir", help=f"output root (env {ENV_OUTDIR})")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in STAGES + ("synth-data",):
        sub.add_parser(name, parents=[common], help=f"run the {name} stage")
    s = sub.add_parser("suite", parents=[common], help="full pipeline over every seed, aggregated")
    s.add_argument("--jobs", type=int, help="parallel seed processes")
    o = sub.add_parser("openness-sweep", parents=[common], help="suite at several unknown-class counts")
    o.add_argument("--k-unseen", type=int)
    o.add_argument("--k-unknown", help="comma-separated unknown-class counts")
    o.add_argument("--jobs", type=int)
    return p


def _apply_thread_env() -> None:
    n = os.environ.get(ENV_THREADS)
    if n:
        for var in _THREAD_VARS:
            os.environ[var] = n


def run(argv=None) -> dict:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    rc = build_run_config(args)
    root = Path(rc["outdir"])
    cmd = args.command
    if cmd == "synth-data":
        return write_synth_data(rc, root / "synth-data")
    if cmd == "suite":
        return {"stage": "suite", "aggregate": run_suite(rc, root / "suite")}
    if cmd == "openness-sweep":
        if args.k_unseen is not None:
            rc["openness"]["k_unseen"] = args.k_unseen
        if args.k_unknown:
            rc["openness"]["k_unknown_list"] = [int(k) for k in args.k_unknown.split(",")]
        return {"stage": "openness-sweep", "rows": run_openness_sweep(rc, root / "openness-sweep")}
    seed = args.seed if args.seed is not None else rc["seeds"][0]
    return Stages(rc, seed, root).run(cmd)


def main(argv=None) -> int:
    _apply_thread_env()
    try:
        result = run(argv)
    except SystemExit:
        raise
    except Exception as e:  # reported as JSON, never a bare traceback
        err = {"error": type(e).__name__, "message": str(e)}
        if getattr(e, "stage", None):
            err["stage"] = e.stage
        print(json.dumps(err), file=sys.stderr)
        return EXIT_CODES.get(type(e).__name__, 1)
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
