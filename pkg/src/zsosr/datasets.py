"""Dataset containers, the ZSMX matrix file format and split construction.

Class ids are 0-based everywhere in code. Manifests may declare 1-based ids
(``"index_base": 1``), which is how the published benchmark splits are
printed; they are converted on load.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .ndcore import derive_seed

MAGIC = b"ZSMX"
VERSION = 1
HEADER = struct.Struct("<4sBBQQ")  # magic, version, dtype code, rows, cols
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<u4")}
UNKNOWN = -1

MODES = ("zs-osr", "generalized", "openness", "ood")


class MatrixFileError(ValueError):
    pass


class BadMagicError(MatrixFileError):
    pass


class UnsupportedVersionError(MatrixFileError):
    pass


class BadDtypeError(MatrixFileError):
    pass


class TruncatedPayloadError(MatrixFileError):
    pass


class BundleError(ValueError):
    """Invalid dataset bundle; ``field`` names the offending manifest entry."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class SplitError(ValueError):
    pass


# --------------------------------------------------------------------------
# ZSMX matrix files


def _dtype_code(a: np.ndarray) -> int:
    if np.issubdtype(a.dtype, np.floating):
        return 0
    if np.issubdtype(a.dtype, np.integer) or a.dtype == bool:
        if a.size and a.min() < 0:
            raise BadDtypeError("uint32 matrices cannot hold negative values")
        return 1
    raise BadDtypeError(f"unsupported dtype {a.dtype}")


def encode_matrix(matrix) -> bytes:
    a = np.asarray(matrix)
    if a.ndim == 1:
        a = a[None, :] if a.size else a.reshape(0, 0)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got {a.ndim} dims")
    code = _dtype_code(a)
    payload = np.ascontiguousarray(a, dtype=DTYPES[code]).tobytes()
    return HEADER.pack(MAGIC, VERSION, code, a.shape[0], a.shape[1]) + payload


def decode_matrix(buf: bytes) -> np.ndarray:
    if len(buf) < HEADER.size:
        raise TruncatedPayloadError(f"file is {len(buf)} bytes, header needs {HEADER.size}")
    magic, version, code, rows, cols = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported format version {version}")
    if code not in DTYPES:
        raise BadDtypeError(f"unknown dtype code {code}")
    expected = rows * cols * DTYPES[code].itemsize
    got = len(buf) - HEADER.size
    if got != expected:
        raise TruncatedPayloadError(
            f"header declares {rows}x{cols} ({expected} payload bytes) but file holds {got}"
        )
    return np.frombuffer(buf, dtype=DTYPES[code], offset=HEADER.size).reshape(rows, cols).copy()


def write_matrix(path, matrix) -> None:
    Path(path).write_bytes(encode_matrix(matrix))


def read_matrix(path) -> np.ndarray:
    return decode_matrix(Path(path).read_bytes())


def read_csv_matrix(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)


def _load_any(path: Path) -> np.ndarray:
    if path.suffix.lower() == ".csv":
        return read_csv_matrix(path)
    return read_matrix(path)


# --------------------------------------------------------------------------
# bundles


@dataclass
class SplitSpec:
    seen: np.ndarray
    unseen: np.ndarray
    unknown: np.ndarray
    seen_test: np.ndarray | None = None  # sample indices held out from seen training

    def __post_init__(self):
        self.seen = np.asarray(self.seen, dtype=np.int64)
        self.unseen = np.asarray(self.unseen, dtype=np.int64)
        self.unknown = np.asarray(self.unknown, dtype=np.int64)
        if self.seen_test is not None:
            self.seen_test = np.asarray(self.seen_test, dtype=np.int64)

    def validate(self, n_classes: int) -> None:
        for name in ("seen", "unseen", "unknown"):
            ids = getattr(self, name)
            if ids.size and (ids.min() < 0 or ids.max() >= n_classes):
                raise BundleError(f"splits.{name}", f"class id outside [0, {n_classes})")
            if len(np.unique(ids)) != len(ids):
                raise BundleError(f"splits.{name}", "duplicate class ids")
        for a, b in (("seen", "unseen"), ("seen", "unknown"), ("unseen", "unknown")):
            common = np.intersect1d(getattr(self, a), getattr(self, b))
            if common.size:
                raise BundleError(
                    f"splits.{a}/{b}", f"split sets must be disjoint, shared ids {common.tolist()}"
                )

    def to_json(self, index_base: int = 0) -> dict:
        d = {k: (getattr(self, k) + index_base).tolist() for k in ("seen", "unseen", "unknown")}
        d["index_base"] = index_base
        return d


@dataclass
class DatasetBundle:
    features: np.ndarray  # (N, d) float32
    labels: np.ndarray  # (N,) int64
    attributes: np.ndarray  # (C, M) float32
    class_names: list
    split: SplitSpec
    transforms: dict = field(default_factory=dict)
    name: str = ""

    @property
    def n_classes(self) -> int:
        return self.attributes.shape[0]

    @property
    def feat_dim(self) -> int:
        return self.features.shape[1]

    @property
    def attr_dim(self) -> int:
        return self.attributes.shape[1]

    def validate(self) -> None:
        if self.features.ndim != 2 or self.features.shape[1] == 0:
            raise BundleError("features", f"need a non-empty (N, d) matrix, got {self.features.shape}")
        if self.attributes.ndim != 2 or self.attributes.shape[1] == 0:
            raise BundleError("attributes", f"need a (C, M) matrix, got {self.attributes.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise BundleError(
                "labels", f"{self.labels.shape[0]} labels for {self.features.shape[0]} feature rows"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise BundleError("labels", f"label outside [0, {self.n_classes})")
        if len(self.class_names) != self.n_classes:
            raise BundleError(
                "class_names", f"{len(self.class_names)} names for {self.n_classes} attribute rows"
            )
        if not np.all(np.isfinite(self.features)):
            raise BundleError("features", "non-finite values")
        if not np.all(np.isfinite(self.attributes)):
            raise BundleError("attributes", "non-finite values")
        self.split.validate(self.n_classes)

    def summary(self) -> dict:
        return {
            "N": int(self.features.shape[0]),
            "d": self.feat_dim,
            "C": self.n_classes,
            "M": self.attr_dim,
            "seen": int(self.split.seen.size),
            "unseen": int(self.split.unseen.size),
            "unknown": int(self.split.unknown.size),
        }

    def rows_of(self, class_ids) -> np.ndarray:
        return np.flatnonzero(np.isin(self.labels, class_ids))


def canonical_splits() -> dict:
    text = resources.files("zsosr.data").joinpath("canonical_splits.json").read_text()
    return {k: v for k, v in json.loads(text).items() if not k.startswith("_")}


def canonical_split(name: str) -> SplitSpec:
    """Benchmark split with 0-based ids; seen = every class not held out."""
    table = canonical_splits()
    if name not in table:
        raise KeyError(f"no canonical split named {name!r}; have {sorted(table)}")
    entry = table[name]
    unseen = np.asarray(entry["unseen"]) - 1
    unknown = np.asarray(entry["unknown"]) - 1
    seen = np.setdiff1d(np.arange(entry["n_classes"]), np.concatenate([unseen, unknown]))
    return SplitSpec(seen, unseen, unknown)


def _apply_transforms(features: np.ndarray, labels, seen_ids, transforms: dict) -> np.ndarray:
    x = features.astype(np.float32)
    if transforms.get("l2_normalize"):
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        x = x / np.where(norms > 0, norms, 1)
    if transforms.get("minmax"):
        # stats from seen-class rows only, so test classes never leak into them
        ref = x[np.isin(labels, seen_ids)]
        lo, hi = ref.min(axis=0), ref.max(axis=0)
        x = (x - lo) / np.where(hi > lo, hi - lo, 1)
    return x.astype(np.float32)


def load_bundle(manifest_path) -> DatasetBundle:
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    try:
        m = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise BundleError("manifest", f"invalid JSON: {exc}") from None
    for key in ("features", "labels", "attributes", "splits"):
        if key not in m:
            raise BundleError(key, "missing from manifest")

    features = _load_any(root / m["features"])
    labels_raw = _load_any(root / m["labels"])
    if labels_raw.ndim == 2 and 1 in labels_raw.shape:
        labels_raw = labels_raw.reshape(-1)
    labels = labels_raw.astype(np.int64) - int(m.get("label_base", 0))
    attributes = _load_any(root / m["attributes"]).astype(np.float32)

    names = m.get("class_names")
    if isinstance(names, str):
        names = (root / names).read_text().splitlines()
    if names is None:
        names = [f"class_{i}" for i in range(attributes.shape[0])]

    splits = m["splits"]
    if "canonical" in splits:
        split = canonical_split(splits["canonical"])
    else:
        base = int(splits.get("index_base", 0))
        split = SplitSpec(
            np.asarray(splits.get("seen", []), dtype=np.int64) - base,
            np.asarray(splits.get("unseen", []), dtype=np.int64) - base,
            np.asarray(splits.get("unknown", []), dtype=np.int64) - base,
        )
    transforms = dict(m.get("transforms", {}))
    bundle = DatasetBundle(
        features, labels, attributes, list(names), split, transforms, m.get("name", manifest_path.stem)
    )
    bundle.validate()
    bundle.features = _apply_transforms(features, labels, split.seen, transforms)
    return bundle


def save_bundle(bundle: DatasetBundle, directory) -> Path:
    """Write matrices and a manifest; returns the manifest path."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_matrix(d / "features.zsmx", bundle.features.astype(np.float32))
    write_matrix(d / "labels.zsmx", bundle.labels.reshape(-1, 1).astype(np.uint32))
    write_matrix(d / "attributes.zsmx", bundle.attributes.astype(np.float32))
    manifest = {
        "name": bundle.name,
        "features": "features.zsmx",
        "labels": "labels.zsmx",
        "attributes": "attributes.zsmx",
        "class_names": list(bundle.class_names),
        "splits": bundle.split.to_json(),
        "transforms": bundle.transforms,
    }
    path = d / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


# --------------------------------------------------------------------------
# split views


@dataclass
class SplitView:
    """A bundle under one evaluation protocol plus its test pool.

    ``test_labels`` carries the true class id for seen/unseen rows and
    ``UNKNOWN`` for unknown rows; ``test_groups`` names the group per row.
    """

    bundle: DatasetBundle
    split: SplitSpec
    mode: str
    seed: int
    test_features: np.ndarray
    test_labels: np.ndarray
    test_groups: np.ndarray
    ood_source: str = ""

    @property
    def known_ids(self) -> np.ndarray:
        if self.mode == "generalized":
            return np.concatenate([self.split.seen, self.split.unseen])
        return self.split.unseen

    def info(self) -> dict:
        groups, counts = np.unique(self.test_groups, return_counts=True)
        return {
            "mode": self.mode,
            "seed": self.seed,
            "seen": self.split.seen.tolist(),
            "unseen": self.split.unseen.tolist(),
            "unknown": self.split.unknown.tolist(),
            "ood_source": self.ood_source,
            "test_counts": dict(zip(groups.tolist(), counts.tolist())),
        }


def _test_pool(bundle: DatasetBundle, split: SplitSpec, include_seen: bool):
    parts = []
    if include_seen and split.seen_test is not None:
        parts.append((split.seen_test, "seen"))
    parts.append((bundle.rows_of(split.unseen), "unseen"))
    parts.append((bundle.rows_of(split.unknown), "unknown"))
    idx = np.concatenate([p[0] for p in parts]).astype(np.int64)
    groups = np.concatenate([np.full(len(p[0]), p[1]) for p in parts])
    labels = bundle.labels[idx].copy()
    labels[groups == "unknown"] = UNKNOWN
    return bundle.features[idx], labels, groups


def _holdout_seen(bundle: DatasetBundle, seen_ids, seed: int, test_frac: float) -> np.ndarray:
    rng = np.random.default_rng(derive_seed(seed, "seen-holdout"))
    held = []
    for c in seen_ids:
        rows = bundle.rows_of([c])
        n_test = int(round(test_frac * len(rows)))
        if n_test:
            held.append(np.sort(rng.permutation(rows)[:n_test]))
    return np.concatenate(held) if held else np.zeros(0, dtype=np.int64)


def make_split(
    bundle: DatasetBundle,
    mode: str = "zs-osr",
    seed: int = 0,
    *,
    k_unseen: int | None = None,
    k_unknown: int | None = None,
    other: DatasetBundle | None = None,
    n_ood_classes: int | None = None,
    canonical: str | None = None,
    seen_test_frac: float = 0.2,
) -> SplitView:
    """Build the class split and test pool for one protocol.

    zs-osr       the bundle's (or a canonical) split; if the bundle declares
                 no unknowns, half of its unseen pool is drawn at random.
    generalized  as zs-osr, plus a per-class holdout of seen samples that
                 joins the test pool.
    openness     the unseen+unknown pool is repartitioned into k_unseen
                 unseen and k_unknown unknown classes.
    ood          unknown test rows come from ``other``; the bundle's own
                 unknown classes are dropped.
    """
    if mode not in MODES:
        raise SplitError(f"unknown split mode {mode!r}; expected one of {MODES}")
    base = canonical_split(canonical) if canonical else bundle.split
    rng = np.random.default_rng(derive_seed(seed, "split", mode))

    if mode == "openness":
        if k_unseen is None or k_unknown is None:
            raise SplitError("openness mode needs k_unseen and k_unknown")
        pool = np.sort(np.concatenate([base.unseen, base.unknown]))
        if k_unseen < 1 or k_unknown < 0 or k_unseen + k_unknown > pool.size:
            raise SplitError(
                f"requested {k_unseen} unseen + {k_unknown} unknown from a pool of {pool.size}"
            )
        perm = rng.permutation(pool)
        split = SplitSpec(base.seen, np.sort(perm[:k_unseen]), np.sort(perm[k_unseen : k_unseen + k_unknown]))
    elif not base.unknown.size and mode != "ood":
        perm = rng.permutation(base.unseen)
        half = perm.size // 2
        split = SplitSpec(base.seen, np.sort(perm[half:]), np.sort(perm[:half]))
    else:
        split = SplitSpec(base.seen, base.unseen, base.unknown)
    split.validate(bundle.n_classes)

    if mode == "generalized":
        split.seen_test = _holdout_seen(bundle, split.seen, seed, seen_test_frac)

    if mode != "ood":
        feats, labels, groups = _test_pool(bundle, split, include_seen=mode == "generalized")
        return SplitView(bundle, split, mode, seed, feats, labels, groups)

    if other is None:
        raise SplitError("ood mode needs a second bundle")
    if other.feat_dim != bundle.feat_dim:
        raise SplitError(f"feature dims differ: {bundle.feat_dim} vs {other.feat_dim}")
    classes = np.unique(other.labels)
    n = n_ood_classes if n_ood_classes is not None else split.unseen.size
    if n < 1 or n > classes.size:
        raise SplitError(f"requested {n} ood classes from {classes.size} available")
    chosen = np.sort(rng.permutation(classes)[:n])
    split = SplitSpec(split.seen, split.unseen, np.zeros(0, dtype=np.int64))
    rows = bundle.rows_of(split.unseen)
    orows = other.rows_of(chosen)
    feats = np.concatenate([bundle.features[rows], other.features[orows]])
    labels = np.concatenate([bundle.labels[rows], np.full(len(orows), UNKNOWN)])
    groups = np.concatenate([np.full(len(rows), "unseen"), np.full(len(orows), "unknown")])
    return SplitView(bundle, split, mode, seed, feats, labels, groups, ood_source=other.name or "other")


@dataclass(frozen=True)
class TrainingView:
    """Everything training code may see: seen samples and seen/unseen attributes.

    Built by copying; holds no reference back to the bundle, so unknown-class
    attributes and unseen/unknown samples are unreachable from here.
    """

    seen_features: np.ndarray
    seen_labels: np.ndarray
    seen_ids: np.ndarray
    seen_attributes: np.ndarray
    unseen_ids: np.ndarray
    unseen_attributes: np.ndarray

    @property
    def attr_dim(self) -> int:
        return self.seen_attributes.shape[1]

    @property
    def feat_dim(self) -> int:
        return self.seen_features.shape[1]

    def attributes_of(self, class_ids) -> np.ndarray:
        lookup = {int(c): i for i, c in enumerate(self.seen_ids)}
        lookup_u = {int(c): i for i, c in enumerate(self.unseen_ids)}
        rows = []
        for c in np.asarray(class_ids).reshape(-1):
            c = int(c)
            if c in lookup:
                rows.append(self.seen_attributes[lookup[c]])
            elif c in lookup_u:
                rows.append(self.unseen_attributes[lookup_u[c]])
            else:
                raise KeyError(f"class {c} has no attributes in this training view")
        return np.stack(rows) if rows else np.zeros((0, self.attr_dim), np.float32)


def _frozen_copy(a) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


def training_view(source) -> TrainingView:
    """Training-time view of a bundle or split view."""
    if isinstance(source, SplitView):
        bundle, split = source.bundle, source.split
    else:
        bundle, split = source, source.split
    rows = bundle.rows_of(split.seen)
    if split.seen_test is not None and split.seen_test.size:
        rows = np.setdiff1d(rows, split.seen_test)
    if rows.size == 0:
        raise SplitError("no seen-class training samples")
    return TrainingView(
        seen_features=_frozen_copy(bundle.features[rows]),
        seen_labels=_frozen_copy(bundle.labels[rows]),
        seen_ids=_frozen_copy(split.seen),
        seen_attributes=_frozen_copy(bundle.attributes[split.seen]),
        unseen_ids=_frozen_copy(split.unseen),
        unseen_attributes=_frozen_copy(bundle.attributes[split.unseen]),
    )


# --------------------------------------------------------------------------
# synthetic world


@dataclass
class WorldConfig:
    n_seen: int = 20
    n_unseen: int = 5
    n_unknown: int = 5
    attr_dim: int = 16
    feat_dim: int = 64
    samples_per_class: int = 200
    noise_scale: float = 0.1
    mixing_scale: float = 1.0

    def validate(self) -> None:
        for k in ("n_seen", "n_unseen", "n_unknown", "attr_dim", "feat_dim", "samples_per_class"):
            if getattr(self, k) <= 0:
                raise ValueError(f"{k} must be positive")
        if self.noise_scale <= 0:
            raise ValueError("noise_scale must be > 0")


@dataclass
class SyntheticWorld:
    """A bundle whose class-conditional feature law is known exactly.

    Class ``c`` has attribute prototype ``a_c`` on the unit sphere and
    features ``N(mixing @ a_c, noise_scale**2 I)``.
    """

    bundle: DatasetBundle
    mixing: np.ndarray  # (d, M)
    noise_scale: float
    config: WorldConfig

    def class_means(self, class_ids=None) -> np.ndarray:
        a = self.bundle.attributes.astype(np.float64)
        if class_ids is not None:
            a = a[np.asarray(class_ids)]
        return a @ self.mixing.T


def synth_world(config: WorldConfig | dict | None = None, seed: int = 0) -> SyntheticWorld:
    if config is None:
        config = WorldConfig()
    elif isinstance(config, dict):
        config = WorldConfig(**config)
    config.validate()
    rng = np.random.default_rng(seed)
    C = config.n_seen + config.n_unseen + config.n_unknown
    protos = rng.standard_normal((C, config.attr_dim))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    mixing = config.mixing_scale * rng.standard_normal((config.feat_dim, config.attr_dim))
    labels = np.repeat(np.arange(C), config.samples_per_class)
    means = protos @ mixing.T
    feats = means[labels] + config.noise_scale * rng.standard_normal((labels.size, config.feat_dim))
    ids = np.arange(C)
    split = SplitSpec(
        ids[: config.n_seen],
        ids[config.n_seen : config.n_seen + config.n_unseen],
        ids[config.n_seen + config.n_unseen :],
    )
    bundle = DatasetBundle(
        feats.astype(np.float32),
        labels.astype(np.int64),
        protos.astype(np.float32),
        [f"synth_{i}" for i in range(C)],
        split,
        {},
        "synthetic",
    )
    bundle.validate()
    return SyntheticWorld(bundle, mixing, config.noise_scale, config)


def nearest_mean_predict(features, means) -> np.ndarray:
    d2 = ((np.asarray(features)[:, None, :] - np.asarray(means)[None, :, :]) ** 2).sum(-1)
    return d2.argmin(axis=1)
