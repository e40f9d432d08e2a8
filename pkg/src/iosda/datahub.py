"""Domain streams of feature vectors.

Labels are integer codes: ``k >= 0`` is known class k, :data:`OPEN` marks an
unknown-class sample and :data:`HIDDEN` stands in for any label a training
view is not allowed to see.  Ground truth always travels with the samples;
whether a consumer may read it is decided by which view it is handed.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import DataError, EmptyDatasetError

OPEN = -1
HIDDEN = -2

FEAT_MAGIC = b"IOSDFEAT"
FEAT_VERSION = 1


def label_name(code: int) -> str:
    if code == OPEN:
        return "open"
    if code == HIDDEN:
        return "hidden"
    return f"known{code}"


@dataclass(frozen=True)
class FeatureSample:
    vector: np.ndarray
    domain_id: int
    truth: int


@dataclass(frozen=True, eq=False)
class DomainDataset:
    """All samples of one domain, stored column-wise.

    ``cluster`` carries the generator's cluster id for synthetic data (known
    classes use their class id, open clusters get ids >= K) and is ``None``
    for data loaded from files.
    """

    domain_id: int
    features: np.ndarray
    labels: np.ndarray
    labels_visible: bool
    cluster: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.domain_id < 1:
            raise DataError(f"domain ids start at 1, got {self.domain_id}")
        feats = np.array(self.features, dtype=np.float64)
        if feats.ndim != 2:
            raise DataError(f"features must be a 2-D array, got shape {feats.shape}")
        labels = np.array(self.labels, dtype=np.int64)
        if labels.shape != (feats.shape[0],):
            raise DataError(f"{feats.shape[0]} feature rows but {labels.shape[0]} labels")
        if np.any(labels < HIDDEN):
            raise DataError(f"unknown label code {int(labels.min())}")
        feats.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.features.shape[0]

    def __iter__(self) -> Iterator[FeatureSample]:
        for x, y in zip(self.features, self.labels):
            yield FeatureSample(x, self.domain_id, int(y))

    @property
    def feat_dim(self) -> int:
        return self.features.shape[1]

    def training_view(self) -> DomainDataset:
        """What a learner may see: truth replaced by HIDDEN unless labels are visible."""
        if self.labels_visible:
            return self
        return DomainDataset(self.domain_id, self.features, np.full(len(self), HIDDEN), False)

    def evaluation_view(self) -> DomainDataset:
        if np.any(self.labels == HIDDEN):
            raise DataError(f"domain {self.domain_id}: evaluation needs ground truth, got hidden labels")
        return self

    def subset(self, idx: np.ndarray) -> DomainDataset:
        cluster = None if self.cluster is None else self.cluster[idx]
        return replace(self, features=self.features[idx], labels=self.labels[idx], cluster=cluster)

    def split(self, frac_eval: float, rng: np.random.Generator) -> tuple[DomainDataset, DomainDataset]:
        """Shuffle and cut into (train, eval) parts; eval gets ``round(frac_eval * n)`` rows."""
        perm = rng.permutation(len(self))
        n_eval = int(round(frac_eval * len(self)))
        return self.subset(np.sort(perm[n_eval:])), self.subset(np.sort(perm[:n_eval]))


@dataclass(frozen=True)
class SynthSpec:
    feat_dim: int = 16
    n_known: int = 4
    open_per_domain: int = 2
    samples_per_class: int = 200
    shift: float = 1.5
    std: float = 0.5
    class_sep: float = 6.0
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("feat_dim", "n_known", "open_per_domain", "samples_per_class"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.std <= 0:
            raise ValueError("cluster std must be positive")
        if self.shift < 0 or self.class_sep <= 0:
            raise ValueError("shift must be >= 0 and class_sep > 0")


def _spread_means(n: int, dim: int, radius: float, rng: np.random.Generator,
                  avoid: np.ndarray | None = None, tries: int = 200) -> np.ndarray:
    """``n`` points on a sphere of ``radius``, greedily kept apart from each other and ``avoid``."""
    existing = np.zeros((0, dim)) if avoid is None else avoid
    out = []
    for _ in range(n):
        best, best_gap = None, -1.0
        for _ in range(tries):
            d = rng.normal(size=dim)
            cand = radius * d / np.linalg.norm(d)
            pool = np.vstack([existing] + out) if out else existing
            gap = np.min(np.linalg.norm(pool - cand, axis=1)) if len(pool) else np.inf
            if gap > best_gap:
                best, best_gap = cand, gap
            if gap >= radius:
                break
        out.append(best[None, :])
    return np.vstack(out) if out else np.zeros((0, dim))


def gen_synthetic(spec: SynthSpec, num_domains: int) -> list[DomainDataset]:
    """Isotropic Gaussian clusters with per-domain mean shifts.

    Domain 1 holds only known classes with visible labels.  Every later
    domain holds the same known classes, moved by that domain's shift vector,
    plus ``open_per_domain`` open clusters that appear in no other domain.
    """
    if num_domains < 2:
        raise ValueError("a stream needs at least two domains")
    rng = np.random.default_rng(spec.seed)
    known_means = _spread_means(spec.n_known, spec.feat_dim, spec.class_sep, rng)
    open_means = _spread_means(spec.open_per_domain * (num_domains - 1), spec.feat_dim,
                               spec.class_sep, rng, avoid=known_means)
    datasets = []
    n = spec.samples_per_class
    for d in range(1, num_domains + 1):
        direction = rng.normal(size=spec.feat_dim)
        offset = spec.shift * direction / np.linalg.norm(direction)
        means = [known_means[k] + offset for k in range(spec.n_known)]
        labels = [k for k in range(spec.n_known)]
        clusters = list(range(spec.n_known))
        if d >= 2:
            first = (d - 2) * spec.open_per_domain
            for j in range(spec.open_per_domain):
                means.append(open_means[first + j] + offset)
                labels.append(OPEN)
                clusters.append(spec.n_known + first + j)
        feats = np.vstack([m + spec.std * rng.normal(size=(n, spec.feat_dim)) for m in means])
        datasets.append(DomainDataset(
            domain_id=d,
            features=feats,
            labels=np.repeat(labels, n),
            labels_visible=(d == 1),
            cluster=np.repeat(clusters, n),
        ))
    return datasets


# ------------------------------------------------------------------ files


def _format_for(path: Path, fmt: str | None) -> str:
    if fmt is not None:
        if fmt not in ("csv", "bin"):
            raise ValueError(f"unknown feature file format {fmt!r}")
        return fmt
    return "csv" if path.suffix.lower() == ".csv" else "bin"


def save_features(dataset: DomainDataset, path: str | Path, fmt: str | None = None) -> None:
    """Write a dataset as CSV (exact float64 text) or the binary record format (float32)."""
    path = Path(path)
    fmt = _format_for(path, fmt)
    if fmt == "csv":
        d = dataset.feat_dim
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"f{i}" for i in range(d)] + ["label", "domain"])
            for x, y in zip(dataset.features, dataset.labels):
                w.writerow([repr(float(v)) for v in x] + [int(y), dataset.domain_id])
        return
    rec = _record_dtype(dataset.feat_dim)
    arr = np.zeros(len(dataset), dtype=rec)
    arr["x"] = dataset.features
    arr["label"] = dataset.labels
    arr["domain"] = dataset.domain_id
    header = FEAT_MAGIC + struct.pack("<IIQ", FEAT_VERSION, dataset.feat_dim, len(dataset))
    path.write_bytes(header + arr.tobytes())


def _record_dtype(feat_dim: int) -> np.dtype:
    return np.dtype([("x", "<f4", (feat_dim,)), ("label", "<i4"), ("domain", "<u2")])


def load_features(path: str | Path, fmt: str | None = None,
                  labels_visible: bool | None = None) -> DomainDataset:
    """Read a feature file written by :func:`save_features` or by external tooling.

    All rows must share one domain id.  ``labels_visible`` defaults to true
    for domain 1 only, matching the convention that only the first domain
    is labelled.
    """
    path = Path(path)
    fmt = _format_for(path, fmt)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    if path.stat().st_size == 0:
        raise EmptyDatasetError(f"{path}: file is empty")
    if fmt == "csv":
        feats, labels, domains = _read_csv(path)
    else:
        feats, labels, domains = _read_bin(path)
    if len(labels) == 0:
        raise EmptyDatasetError(f"{path}: no samples")
    if np.any(labels < OPEN):
        raise DataError(f"{path}: unknown label code {int(labels.min())}")
    ids = np.unique(domains)
    if len(ids) != 1:
        raise DataError(f"{path}: rows span several domains {ids.tolist()}")
    domain_id = int(ids[0])
    if labels_visible is None:
        labels_visible = domain_id == 1
    return DomainDataset(domain_id, feats, labels, labels_visible)


def _read_csv(path: Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise EmptyDatasetError(f"{path}: file is empty")
    header = rows[0]
    d = len(header) - 2
    expect = [f"f{i}" for i in range(d)] + ["label", "domain"]
    if d < 1 or header != expect:
        raise DataError(f"{path}: malformed header, expected f0..f{{d-1}},label,domain")
    body = [r for r in rows[1:] if r]
    feats = np.empty((len(body), d))
    labels = np.empty(len(body), dtype=np.int64)
    domains = np.empty(len(body), dtype=np.int64)
    for i, r in enumerate(body):
        if len(r) != d + 2:
            raise DataError(f"{path}: row {i + 2} has {len(r)} fields, expected {d + 2}")
        try:
            feats[i] = [float(v) for v in r[:d]]
            labels[i] = int(r[d])
            domains[i] = int(r[d + 1])
        except ValueError as exc:
            raise DataError(f"{path}: row {i + 2}: {exc}") from exc
    return feats, labels, domains


def _read_bin(path: Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    buf = path.read_bytes()
    if len(buf) < 24 or buf[:8] != FEAT_MAGIC:
        raise DataError(f"{path}: malformed header (bad magic)")
    version, feat_dim, count = struct.unpack_from("<IIQ", buf, 8)
    if version != FEAT_VERSION:
        raise DataError(f"{path}: unsupported feature file version {version}")
    if feat_dim < 1:
        raise DataError(f"{path}: malformed header (feat_dim=0)")
    rec = _record_dtype(feat_dim)
    if len(buf) - 24 != count * rec.itemsize:
        raise DataError(f"{path}: payload size does not match {count} records of width {feat_dim}")
    arr = np.frombuffer(buf, dtype=rec, count=count, offset=24)
    return arr["x"].astype(np.float64), arr["label"].astype(np.int64), arr["domain"].astype(np.int64)
