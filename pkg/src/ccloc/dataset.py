"""Labeled/unlabeled CSI datasets: generation, splitting, scaling, JSON-lines I/O.

On disk a dataset is a directory holding ``manifest.json`` and
``samples.jsonl``. Each line of ``samples.jsonl`` is one UE::

    {"ue_id": 17, "label": [x, y, z] | null, "position": [x, y, z],
     "features": [[5L floats] * B], "mask": [[0|1 * L] * B]}

``label`` is present only for the labeled subset. ``position`` is the
ground truth for every UE and is read only by evaluation code (CT/TW on
unlabeled UEs); training never touches it.
"""
import dataclasses
import hashlib
import json
import os
import warnings
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .csi import DisconnectedLinkError, N_FIELDS, CsiFeature, measure_link
from .scene import compute_paths

FORMAT_VERSION = 1
LABEL_LO, LABEL_HI = 0.05, 0.95


class DatasetFormatError(ValueError):
    pass


class IntegrityWarning(UserWarning):
    pass


class ScalerStateError(RuntimeError):
    pass


@dataclasses.dataclass(frozen=True)
class Sample:
    ue_id: int
    features: np.ndarray  # (B, 5L)
    mask: np.ndarray  # (B, L)
    position: np.ndarray
    label: np.ndarray = None


@dataclasses.dataclass(frozen=True)
class Scaler:
    """Per-column feature standardisation plus affine label squashing."""

    feature_mean: np.ndarray
    feature_std: np.ndarray
    label_min: np.ndarray
    label_max: np.ndarray

    def transform_features(self, X):
        X = np.asarray(X, float)
        std = self.feature_std
        safe = np.where(std > 0, std, 1.0)
        return np.where(std > 0, (X - self.feature_mean) / safe, 0.0)

    def transform_labels(self, y):
        y = np.asarray(y, float)
        return LABEL_LO + (LABEL_HI - LABEL_LO) * (y - self.label_min) / (self.label_max - self.label_min)

    def inverse_labels(self, z):
        z = np.asarray(z, float)
        return self.label_min + (z - LABEL_LO) * (self.label_max - self.label_min) / (LABEL_HI - LABEL_LO)

    def to_dict(self):
        return {k: np.asarray(getattr(self, k)).tolist() for k in
                ("feature_mean", "feature_std", "label_min", "label_max")}

    @classmethod
    def from_dict(cls, d):
        return cls(*(np.asarray(d[k], float) for k in
                     ("feature_mean", "feature_std", "label_min", "label_max")))

    def __eq__(self, other):
        return isinstance(other, Scaler) and all(
            np.array_equal(getattr(self, k), getattr(other, k)) for k in
            ("feature_mean", "feature_std", "label_min", "label_max"))


@dataclasses.dataclass(frozen=True, eq=False)
class Dataset:
    """Rows ``0..J-1`` are the labeled subset, ``J..J+U-1`` the unlabeled one."""

    ue_ids: np.ndarray
    features: np.ndarray  # (n, B, 5L), raw units
    masks: np.ndarray  # (n, B, L) bool
    positions: np.ndarray  # (n, 3) ground truth
    n_labeled: int
    manifest: dict
    split: dict = None
    scaler: Scaler = None

    @property
    def n_unlabeled(self):
        return len(self.ue_ids) - self.n_labeled

    @property
    def n_bs(self):
        return self.features.shape[1]

    @property
    def n_paths(self):
        return self.masks.shape[2]

    @property
    def labeled_idx(self):
        return np.arange(self.n_labeled)

    @property
    def unlabeled_idx(self):
        return np.arange(self.n_labeled, len(self.ue_ids))

    def labels(self, idx):
        idx = np.asarray(idx)
        if np.any(idx >= self.n_labeled):
            raise ValueError("requested labels for unlabeled samples")
        return self.positions[idx]

    def rows(self, subset, part):
        if self.split is None:
            raise ScalerStateError("dataset has not been split")
        return np.asarray(self.split[subset][part], dtype=int)

    def sample(self, i):
        lab = self.positions[i].copy() if i < self.n_labeled else None
        return Sample(int(self.ue_ids[i]), self.features[i].copy(), self.masks[i].copy(),
                      self.positions[i].copy(), lab)

    def __len__(self):
        return len(self.ue_ids)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.n_labeled == other.n_labeled
                and np.array_equal(self.ue_ids, other.ue_ids)
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.masks, other.masks)
                and np.array_equal(self.positions, other.positions)
                and _split_eq(self.split, other.split)
                and self.scaler == other.scaler
                and self.manifest == other.manifest)


def _split_eq(a, b):
    if a is None or b is None:
        return a is b
    return all(list(a[s][p]) == list(b[s][p]) for s in ("labeled", "unlabeled") for p in ("train", "test"))


def _link_seed(seed, ue, bs):
    return np.random.default_rng(np.random.SeedSequence([seed, 1, ue, bs]))


def _measure_ue(scene, pathsets, pilot, seed, ue):
    B, L = len(scene.base_stations), pilot.max_paths
    feats = np.zeros((B, N_FIELDS * L))
    masks = np.zeros((B, L), bool)
    low = 0
    for b, (bs, ps) in enumerate(zip(scene.base_stations, pathsets)):
        if not ps.connected:
            continue
        try:
            f = measure_link(ps, bs.array, scene.ue_array, pilot, seed=_link_seed(seed, ue, b))
        except DisconnectedLinkError:
            continue
        feats[b] = f.vector()
        masks[b] = f.valid_mask
        low += f.low_confidence
    return feats, masks, low


def build_dataset(scene, n_labeled, n_unlabeled, pilot, seed, jobs=1):
    """Simulate ``n_labeled + n_unlabeled`` UEs and measure every BS link.

    Placement is sequential from ``seed``; each link then uses its own seed
    derived from (seed, ue, bs), so any ``jobs`` value yields the same data.
    """
    if n_labeled < 1 or n_unlabeled < 1:
        raise ValueError("need at least one labeled and one unlabeled UE")
    n = n_labeled + n_unlabeled
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    positions = np.zeros((n, 3))
    pathsets = []
    resampled = 0
    for i in range(n):
        while True:
            pos = scene.sample_ue(rng)
            ps = [compute_paths(scene, bs.id, pos, pilot.max_paths) for bs in scene.base_stations]
            if any(p.connected for p in ps):
                break
            resampled += 1
        positions[i] = pos
        pathsets.append(ps)

    work = lambda i: _measure_ue(scene, pathsets[i], pilot, seed, i)  # noqa: E731
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(work, range(n)))
    else:
        results = [work(i) for i in range(n)]
    features = np.stack([r[0] for r in results])
    masks = np.stack([r[1] for r in results])
    los = np.array([[p.los for p in ps] for ps in pathsets])

    manifest = {
        "format": "ccloc.dataset",
        "format_version": FORMAT_VERSION,
        "scene_hash": scene.hash(),
        "J": int(n_labeled),
        "U": int(n_unlabeled),
        "L": int(pilot.max_paths),
        "B": len(scene.base_stations),
        "seeds": {"dataset": int(seed)},
        "codeword_index_base": 0,
        "ue_boresight": float(scene.ue_boresight),
        "pilot": pilot.to_dict(),
        "bounds": [list(map(float, scene.bounds[0])), list(map(float, scene.bounds[1]))],
        "n_resampled": int(resampled),
        "n_low_confidence_links": int(sum(r[2] for r in results)),
        "los_link_fraction": float(los.mean()),
    }
    return Dataset(np.arange(n), features, masks, positions, int(n_labeled), manifest)


def split(dataset, train_fraction=0.85, seed=0):
    """Shuffle and split each subset independently; train gets floor(fraction * n)."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must be in (0, 1)")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    out = {}
    for name, idx in (("labeled", dataset.labeled_idx), ("unlabeled", dataset.unlabeled_idx)):
        perm = idx[rng.permutation(len(idx))]
        n_train = int(np.floor(train_fraction * len(idx)))
        out[name] = {"train": perm[:n_train].tolist(), "test": perm[n_train:].tolist()}
    manifest = dict(dataset.manifest)
    manifest["seeds"] = {**manifest["seeds"], "split": int(seed)}
    manifest["train_fraction"] = float(train_fraction)
    return dataclasses.replace(dataset, split=out, manifest=manifest, scaler=None)


def fit_scaler(dataset):
    """Fit feature statistics on the training rows of both subsets only."""
    train = np.concatenate([dataset.rows("labeled", "train"), dataset.rows("unlabeled", "train")])
    X = dataset.features[train]
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    # columns that never vary carry no information and map to 0
    std = np.where(std > 1e-12 * np.maximum(np.abs(mean), 1e-300), std, 0.0)
    lo, hi = (np.asarray(b, float) for b in dataset.manifest["bounds"])
    scaler = Scaler(mean, std, lo, hi)
    manifest = dict(dataset.manifest)
    manifest["scaler"] = scaler.to_dict()
    return dataclasses.replace(dataset, scaler=scaler, manifest=manifest)


def apply_scaler(dataset, rows):
    """Normalised (features, labels-or-None) for ``rows``."""
    if dataset.scaler is None:
        raise ScalerStateError("fit_scaler must run before apply_scaler")
    rows = np.asarray(rows, dtype=int)
    X = dataset.scaler.transform_features(dataset.features[rows])
    if np.all(rows < dataset.n_labeled):
        return X, dataset.scaler.transform_labels(dataset.positions[rows])
    return X, None


# ---------------------------------------------------------------- file I/O

def _sample_line(ds, i):
    rec = {
        "ue_id": int(ds.ue_ids[i]),
        "label": ds.positions[i].tolist() if i < ds.n_labeled else None,
        "position": ds.positions[i].tolist(),
        "features": ds.features[i].tolist(),
        "mask": ds.masks[i].astype(int).tolist(),
    }
    return json.dumps(rec, separators=(",", ":"))


def save(dataset, path):
    """Write ``manifest.json`` and ``samples.jsonl`` under directory ``path``."""
    os.makedirs(path, exist_ok=True)
    h = hashlib.sha256()
    with open(os.path.join(path, "samples.jsonl"), "w") as fh:
        for i in range(len(dataset)):
            line = _sample_line(dataset, i) + "\n"
            h.update(line.encode())
            fh.write(line)
    manifest = dict(dataset.manifest)
    manifest["data_sha256"] = h.hexdigest()
    manifest["split"] = dataset.split
    manifest["scaler"] = dataset.scaler.to_dict() if dataset.scaler is not None else None
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return manifest["data_sha256"]


def read_manifest(path):
    mpath = os.path.join(path, "manifest.json")
    try:
        with open(mpath) as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{mpath}: malformed manifest: {exc}") from exc
    if manifest.get("format") != "ccloc.dataset":
        raise DatasetFormatError(f"{mpath}: not a ccloc dataset manifest")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DatasetFormatError(
            f"{mpath}: format_version {manifest.get('format_version')} unsupported (expected {FORMAT_VERSION})")
    return manifest


def iter_samples(path, manifest=None):
    """Stream :class:`Sample` records from ``samples.jsonl`` one line at a time."""
    manifest = manifest or read_manifest(path)
    B, L = manifest["B"], manifest["L"]
    spath = os.path.join(path, "samples.jsonl")
    last_valid = 0
    with open(spath) as fh:
        for lineno, line in enumerate(fh, start=1):
            try:
                rec = json.loads(line)
                feats = np.asarray(rec["features"], float)
                mask = np.asarray(rec["mask"], int).astype(bool)
                pos = np.asarray(rec["position"], float)
                if feats.shape != (B, N_FIELDS * L) or mask.shape != (B, L) or pos.shape != (3,):
                    raise ValueError(f"shape mismatch (features {feats.shape}, mask {mask.shape})")
                label = None if rec["label"] is None else np.asarray(rec["label"], float)
                sample = Sample(int(rec["ue_id"]), feats, mask, pos, label)
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetFormatError(
                    f"{spath}:{lineno}: malformed sample ({exc}); last valid line is {last_valid}") from exc
            last_valid = lineno
            yield sample


def load(path):
    manifest = read_manifest(path)
    n = manifest["J"] + manifest["U"]
    h = hashlib.sha256()
    with open(os.path.join(path, "samples.jsonl"), "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    if manifest.get("data_sha256") and h.hexdigest() != manifest["data_sha256"]:
        warnings.warn(f"{path}: samples.jsonl does not match the manifest data hash "
                      f"(seeds {manifest.get('seeds')})", IntegrityWarning, stacklevel=2)
    samples = list(iter_samples(path, manifest))
    if len(samples) != n:
        raise DatasetFormatError(
            f"{path}/samples.jsonl: expected {n} samples, found {len(samples)}; "
            f"last valid line is {len(samples)}")
    for i, s in enumerate(samples):
        if (s.label is not None) != (i < manifest["J"]):
            raise DatasetFormatError(f"{path}/samples.jsonl:{i + 1}: label presence does not match J")
    split_ = manifest.pop("split", None)
    scaler = manifest.get("scaler")
    if scaler is None:
        manifest.pop("scaler", None)
    manifest.pop("data_sha256", None)
    ds = Dataset(
        ue_ids=np.array([s.ue_id for s in samples]),
        features=np.stack([s.features for s in samples]),
        masks=np.stack([s.mask for s in samples]),
        positions=np.stack([s.position for s in samples]),
        n_labeled=int(manifest["J"]),
        manifest=manifest,
        split=split_,
        scaler=Scaler.from_dict(scaler) if scaler else None,
    )
    return ds


def data_hash(path):
    return read_manifest(path).get("data_sha256")


def feature_of(dataset, row, bs):
    """Unpack one BS row into a :class:`CsiFeature`."""
    return CsiFeature.from_vector(dataset.features[row, bs], dataset.masks[row, bs])
