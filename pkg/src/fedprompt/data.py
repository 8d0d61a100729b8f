"""Synthetic feature datasets, external feature tables, and partitioners."""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .vlm import synth_local_features, unit_rows
from . import rngs


@dataclass
class MasterDataset:
    """Labeled feature set all partitioners operate on."""

    features: np.ndarray                 # (n, d)
    labels: np.ndarray                   # (n,) ints < class_count
    class_count: int
    domain_tags: np.ndarray | None = None
    local_maps: np.ndarray | None = None  # (n, M, d) region features, built on demand

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise DataError("features and labels disagree in length")
        if not np.all(np.isfinite(self.features)):
            raise DataError("features contain non-finite entries")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataError("labels out of range")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices: np.ndarray) -> "MasterDataset":
        idx = np.asarray(indices)
        return MasterDataset(
            features=self.features[idx],
            labels=self.labels[idx],
            class_count=self.class_count,
            domain_tags=None if self.domain_tags is None else self.domain_tags[idx],
            local_maps=None if self.local_maps is None else self.local_maps[idx],
        )

    def ensure_local_maps(self, M: int, seed: int, spread: float = 0.1) -> np.ndarray:
        """Deterministic per-sample region features for transport-based scoring."""
        if self.local_maps is None or self.local_maps.shape[1] != M:
            rng = rngs.derive_rng(seed, rngs.LOCAL_MAP)
            self.local_maps = np.stack(
                [synth_local_features(f, M, rng, spread=spread) for f in self.features]
            )
        return self.local_maps


@dataclass
class ClientDataset:
    """One client's slice of a master dataset; indices stay master-relative."""

    features: np.ndarray
    labels: np.ndarray
    master_indices: np.ndarray
    local_maps: np.ndarray | None = None

    @classmethod
    def from_master(cls, master: MasterDataset, indices: np.ndarray) -> "ClientDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return cls(
            features=master.features[idx],
            labels=master.labels[idx],
            master_indices=idx,
            local_maps=None if master.local_maps is None else master.local_maps[idx],
        )

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass
class PartitionPlan:
    """Disjoint per-client index lists over one master dataset."""

    client_indices: list[np.ndarray]
    scheme: str
    params: dict = field(default_factory=dict)
    class_proportions: np.ndarray | None = None  # (classes, clients) for dirichlet

    @property
    def num_clients(self) -> int:
        return len(self.client_indices)

    def sizes(self) -> np.ndarray:
        return np.array([len(ix) for ix in self.client_indices])

    def validate_partition(self, universe_size: int) -> None:
        seen = np.concatenate([np.asarray(ix) for ix in self.client_indices]) if self.client_indices else np.array([], dtype=int)
        if seen.size != np.unique(seen).size:
            raise DataError("partition assigns some index twice")
        if seen.size and (seen.min() < 0 or seen.max() >= universe_size):
            raise DataError("partition index outside the master dataset")


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a separable synthetic feature dataset."""

    classes: int = 10
    feature_dim: int = 64
    noise_sigma: float = 0.1
    samples_per_class: int = 200
    prototype_seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise ConfigError("synthetic dataset needs at least 2 classes")
        if self.noise_sigma < 0:
            raise ConfigError("noise sigma must be >= 0")
        if self.feature_dim < 1 or self.samples_per_class < 1:
            raise ConfigError("synthetic dimensions must be positive")


def _near_orthogonal_prototypes(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    # pairwise |cos| < 0.5 by rejection; comfortably feasible from ~32 dims up,
    # exhausts the try budget when the dimension is too small for the class count
    protos: list[np.ndarray] = []
    for c in range(spec.classes):
        for _attempt in range(1000):
            v = rng.normal(size=spec.feature_dim)
            v /= np.linalg.norm(v)
            if all(abs(v @ p) < 0.5 for p in protos):
                protos.append(v)
                break
        else:
            raise ConfigError(
                f"could not draw near-orthogonal prototype {c}: feature_dim "
                f"{spec.feature_dim} too small for {spec.classes} classes"
            )
    return np.array(protos)


def generate_synthetic_dataset(spec: SyntheticSpec, rng: np.random.Generator) -> MasterDataset:
    """Unit-norm samples clustered around near-orthogonal class prototypes."""
    protos = _near_orthogonal_prototypes(spec, rng)
    feats, labels = [], []
    for c in range(spec.classes):
        x = protos[c][None, :] + spec.noise_sigma * rng.normal(
            size=(spec.samples_per_class, spec.feature_dim)
        )
        feats.append(unit_rows(x))
        labels.append(np.full(spec.samples_per_class, c))
    return MasterDataset(
        features=np.concatenate(feats), labels=np.concatenate(labels), class_count=spec.classes
    )


@dataclass(frozen=True)
class DomainShift:
    """Fixed orthogonal rotation + scale + noise applied to every feature."""

    angle: float = 0.0
    planes: tuple[tuple[int, int], ...] | None = None  # default: disjoint coordinate pairs
    scale: float = 1.0
    noise_sigma: float = 0.0
    seed: int = 0


def _rotation_matrix(d: int, shift: DomainShift) -> np.ndarray:
    planes = shift.planes
    if planes is None:
        planes = tuple((2 * k, 2 * k + 1) for k in range(d // 2))
    R = np.eye(d)
    cs, sn = np.cos(shift.angle), np.sin(shift.angle)
    for i, j in planes:
        G = np.eye(d)
        G[i, i] = cs
        G[j, j] = cs
        G[i, j] = -sn
        G[j, i] = sn
        R = G @ R
    return R


def apply_domain_shift(dataset: MasterDataset, shift: DomainShift) -> MasterDataset:
    """Same labels, features mapped into a shifted domain and renormalised."""
    if not np.isfinite([shift.angle, shift.scale, shift.noise_sigma]).all():
        raise ConfigError("domain shift parameters must be finite")
    R = _rotation_matrix(dataset.feature_dim, shift)
    x = dataset.features @ R.T * shift.scale
    if shift.noise_sigma > 0:
        rng = rngs.derive_rng(shift.seed, rngs.SHIFT)
        x = x + shift.noise_sigma * rng.normal(size=x.shape)
    return MasterDataset(
        features=unit_rows(x),
        labels=dataset.labels.copy(),
        class_count=dataset.class_count,
        domain_tags=None if dataset.domain_tags is None else dataset.domain_tags.copy(),
    )


def balanced_subsample_indices(labels: np.ndarray, per_class: int,
                               rng: np.random.Generator) -> np.ndarray:
    """Uniformly chosen indices giving exactly per_class samples of every class."""
    chosen = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if len(idx) < per_class:
            raise DataError(
                f"class {c} has only {len(idx)} samples, need {per_class} for a balanced subsample"
            )
        chosen.append(rng.choice(idx, size=per_class, replace=False))
    return np.sort(np.concatenate(chosen))


def balanced_subsample(dataset: MasterDataset, per_class: int,
                       rng: np.random.Generator) -> MasterDataset:
    return dataset.subset(balanced_subsample_indices(dataset.labels, per_class, rng))


def stratified_split(labels: np.ndarray, fractions: tuple[float, float, float],
                     rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-class shuffled split into train/val/test index arrays."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError("split fractions must sum to 1")
    parts: tuple[list, list, list] = ([], [], [])
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n = len(idx)
        n_tr = int(round(fractions[0] * n))
        n_va = int(round(fractions[1] * n))
        n_tr = min(n_tr, n)
        n_va = min(n_va, n - n_tr)
        parts[0].append(idx[:n_tr])
        parts[1].append(idx[n_tr:n_tr + n_va])
        parts[2].append(idx[n_tr + n_va:])
    return tuple(np.sort(np.concatenate(p)) if p else np.array([], dtype=int) for p in parts)


def dirichlet_partition(labels: np.ndarray, num_clients: int, alpha: float,
                        rng: np.random.Generator) -> PartitionPlan:
    """Label-skewed partition: per class, client shares drawn from Dirichlet(alpha).

    Every sample is assigned exactly once; empty clients are permitted
    (small alpha concentrates whole classes on few clients).
    """
    if alpha <= 0:
        raise ConfigError(f"concentration parameter must be positive, got {alpha}")
    if num_clients < 1:
        raise ConfigError("need at least one client")
    labels = np.asarray(labels)
    buckets: list[list[int]] = [[] for _ in range(num_clients)]
    classes = np.unique(labels)
    proportions = np.zeros((len(classes), num_clients))
    for row, c in enumerate(classes):
        idx = np.flatnonzero(labels == c)
        p = rng.dirichlet(np.full(num_clients, alpha))
        proportions[row] = p
        assign = rng.choice(num_clients, size=len(idx), p=p)
        for i, a in zip(idx, assign):
            buckets[a].append(int(i))
    plan = PartitionPlan(
        client_indices=[np.array(sorted(b), dtype=np.int64) for b in buckets],
        scheme="dirichlet",
        params={"alpha": alpha},
        class_proportions=proportions,
    )
    plan.validate_partition(len(labels))
    return plan


def mirror_partition(class_proportions: np.ndarray, labels: np.ndarray,
                     rng: np.random.Generator) -> PartitionPlan:
    """Assign a fresh index set using previously drawn per-class client shares.

    Used to give each client a test split that follows the same label
    distribution as its training split.
    """
    labels = np.asarray(labels)
    num_clients = class_proportions.shape[1]
    buckets: list[list[int]] = [[] for _ in range(num_clients)]
    for row, c in enumerate(np.unique(labels)):
        idx = np.flatnonzero(labels == c)
        assign = rng.choice(num_clients, size=len(idx), p=class_proportions[row])
        for i, a in zip(idx, assign):
            buckets[a].append(int(i))
    plan = PartitionPlan(
        client_indices=[np.array(sorted(b), dtype=np.int64) for b in buckets],
        scheme="dirichlet_mirror",
        class_proportions=class_proportions,
    )
    plan.validate_partition(len(labels))
    return plan


def kshot_iid_partition(labels: np.ndarray, num_clients: int, shots: int,
                        rng: np.random.Generator) -> PartitionPlan:
    """Every client receives exactly `shots` samples of every class, without replacement."""
    if shots < 1 or num_clients < 1:
        raise ConfigError("shots and clients must be positive")
    labels = np.asarray(labels)
    buckets: list[list[int]] = [[] for _ in range(num_clients)]
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        need = shots * num_clients
        if len(idx) < need:
            raise DataError(
                f"class {c} has {len(idx)} samples, need {need} for {shots}-shot x {num_clients} clients"
            )
        perm = rng.permutation(idx)
        for i in range(num_clients):
            buckets[i].extend(int(x) for x in perm[i * shots:(i + 1) * shots])
    plan = PartitionPlan(
        client_indices=[np.array(sorted(b), dtype=np.int64) for b in buckets],
        scheme="iid_kshot",
        params={"shots": shots},
    )
    plan.validate_partition(len(labels))
    return plan


def base_novel_split(class_count: int, mode: str = "first_half",
                     seed: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint covering split of class ids; the base half gets the ceiling."""
    if class_count < 2:
        raise ConfigError("need at least 2 classes to split")
    n_base = (class_count + 1) // 2
    if mode == "first_half":
        order = np.arange(class_count)
    elif mode == "random":
        if seed is None:
            raise ConfigError("random base/novel split needs a seed")
        order = rngs.derive_rng(seed, rngs.SPLIT).permutation(class_count)
    else:
        raise ConfigError(f"unknown split mode {mode!r}")
    return np.sort(order[:n_base]), np.sort(order[n_base:])


def domain_partition(dataset: MasterDataset, clients_per_domain: int = 2,
                     rng: np.random.Generator | None = None) -> PartitionPlan:
    """Each domain's samples split evenly among its own clients; clients are single-domain."""
    if dataset.domain_tags is None:
        raise DataError("domain partition needs domain tags")
    if clients_per_domain < 1:
        raise ConfigError("clients_per_domain must be >= 1")
    rng = np.random.default_rng(0) if rng is None else rng
    buckets: list[np.ndarray] = []
    for tag in np.unique(dataset.domain_tags):
        idx = rng.permutation(np.flatnonzero(dataset.domain_tags == tag))
        for part in np.array_split(idx, clients_per_domain):
            buckets.append(np.sort(part).astype(np.int64))
    plan = PartitionPlan(client_indices=buckets, scheme="domain",
                         params={"clients_per_domain": clients_per_domain})
    plan.validate_partition(len(dataset))
    return plan


# ---------------------------------------------------------------------------
# Feature-table files: '# d=<dim> classes=<C>' header, then
# '<label>,<domain_tag>,<f_0>,...,<f_{d-1}>' per line.
# ---------------------------------------------------------------------------

def save_feature_table(dataset: MasterDataset, path: str) -> None:
    tags = dataset.domain_tags if dataset.domain_tags is not None else np.zeros(len(dataset), dtype=int)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# d={dataset.feature_dim} classes={dataset.class_count}\n")
        for label, tag, row in zip(dataset.labels, tags, dataset.features):
            values = ",".join(repr(float(x)) for x in row)
            fh.write(f"{int(label)},{int(tag)},{values}\n")


def load_feature_table(path: str) -> MasterDataset:
    """Parse a feature table, validating dimensions and label range per line."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read feature table {path}: {exc}") from exc
    if not lines:
        raise DataError(f"{path}: no samples (empty file)")
    header = lines[0]
    if not header.startswith("# "):
        raise DataError(f"{path}:1: missing '# d=<dim> classes=<C>' header")
    try:
        fields = dict(item.split("=") for item in header[2:].split())
        dim = int(fields["d"])
        classes = int(fields["classes"])
    except (ValueError, KeyError) as exc:
        raise DataError(f"{path}:1: malformed header {header!r}") from exc
    labels, tags, rows = [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != dim + 2:
            raise DataError(f"{path}:{lineno}: expected {dim + 2} fields, got {len(parts)}")
        try:
            label = int(parts[0])
            tag = int(parts[1])
            values = [float(x) for x in parts[2:]]
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: malformed row: {exc}") from exc
        if not (0 <= label < classes):
            raise DataError(f"{path}:{lineno}: label {label} outside [0, {classes})")
        labels.append(label)
        tags.append(tag)
        rows.append(values)
    if not rows:
        raise DataError(f"{path}: no samples")
    return MasterDataset(
        features=np.array(rows, dtype=np.float64),
        labels=np.array(labels),
        class_count=classes,
        domain_tags=np.array(tags),
    )
