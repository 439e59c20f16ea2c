"""Synthetic tasks, Dirichlet non-IID partitioning and JSONL datasets."""
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from fdlora.errors import ConfigError, InputError, SchemaError

TEST_FRACTION = 0.2
MAX_PARTITION_RETRIES = 100


@dataclass(frozen=True)
class LabeledExample:
    features: tuple
    label: int


class Dataset:
    """Feature matrix plus integer labels; indexing returns a sub-dataset.

    ``group`` tags each row with the client that owns its private pattern
    (-1 for shared rows); plain tasks leave it at -1.
    """

    def __init__(self, x, y, group=None):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64).reshape(-1)
        if x.ndim == 1:
            x = x.reshape(len(y), -1) if len(y) else np.zeros((0, 0))
        if x.shape[0] != y.shape[0]:
            raise InputError(f"{x.shape[0]} feature rows but {y.shape[0]} labels")
        if np.any(y < 0):
            raise InputError("labels must be non-negative class indices")
        if not np.all(np.isfinite(x)):
            raise InputError("features must be finite")
        self.x = x
        self.y = y
        self.group = (
            np.full(len(y), -1, dtype=np.int64)
            if group is None
            else np.asarray(group, dtype=np.int64).reshape(-1)
        )
        for arr in (self.x, self.y, self.group):
            arr.setflags(write=False)

    def __len__(self):
        return len(self.y)

    def __getitem__(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.x[idx], self.y[idx], self.group[idx])

    def __iter__(self):
        for row, label in zip(self.x, self.y):
            yield LabeledExample(tuple(row.tolist()), int(label))

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.x.shape == other.x.shape
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
        )

    @property
    def dim(self):
        return self.x.shape[1] if self.x.ndim == 2 else 0

    @property
    def num_classes(self):
        return int(self.y.max()) + 1 if len(self.y) else 0

    @classmethod
    def from_examples(cls, examples):
        examples = list(examples)
        if not examples:
            return cls(np.zeros((0, 0)), np.zeros(0, dtype=np.int64))
        return cls([e.features for e in examples], [e.label for e in examples])

    def digest(self):
        h = hashlib.sha256()
        h.update(np.asarray(self.x.shape, dtype=np.int64).tobytes())
        h.update(np.ascontiguousarray(self.x).tobytes())
        h.update(self.y.tobytes())
        return h.hexdigest()


@dataclass
class ClientShard:
    client_id: int
    train: Dataset
    test: Dataset
    train_idx: np.ndarray = field(repr=False)
    test_idx: np.ndarray = field(repr=False)

    def __len__(self):
        return len(self.train) + len(self.test)


@dataclass(frozen=True)
class PartitionSpec:
    alpha: float
    num_clients: int
    seed: int = 0
    equal_size: bool = True

    def __post_init__(self):
        if not (self.alpha > 0 and np.isfinite(self.alpha)):
            raise ConfigError(f"dirichlet alpha must be positive, got {self.alpha}")
        if self.num_clients < 1:
            raise ConfigError(f"need at least one client, got {self.num_clients}")


def make_synthetic_task(num_classes, dim, per_class, noise, seed):
    """Isotropic Gaussian clusters, one per class.

    Class ``c`` is centred on ``e_c / sqrt(2)`` so every pair of class means
    is exactly distance 1 apart.
    """
    if num_classes < 2 or dim < 2:
        raise ConfigError(f"need num_classes >= 2 and dim >= 2, got {num_classes}, {dim}")
    if num_classes > dim:
        raise ConfigError(f"unit-separated means need num_classes <= dim ({num_classes} > {dim})")
    if per_class < 1 or noise < 0:
        raise ConfigError("per_class must be >= 1 and noise >= 0")
    rng = np.random.default_rng(seed)
    means = class_means(num_classes, dim)
    y = np.repeat(np.arange(num_classes), per_class)
    x = means[y] + noise * rng.standard_normal((len(y), dim))
    order = rng.permutation(len(y))
    return Dataset(x[order], y[order])


def class_means(num_classes, dim):
    return np.eye(num_classes, dim) / np.sqrt(2.0)


def make_two_skill_task(num_clients, dim=12, shared_per_class=120, private_per_client=80,
                        noise=0.5, num_classes=4, separation=2.0, seed=0):
    """Shared clusters plus one private rule per client.

    Shared rows are Gaussian clusters whose means lie ``separation`` apart in
    the first ``num_classes`` coordinates; their labels mean the same thing
    on every client. Private rows of every client come from one common
    region (a marker in the remaining coordinates) but client ``i`` labels
    them ``i mod num_classes``, so the private rules contradict each other
    and only a client-local model can get them right.
    """
    if dim <= num_classes:
        raise ConfigError("two-skill task needs dim > num_classes for the marker region")
    if num_classes < 2 or num_clients < 1:
        raise ConfigError("need num_classes >= 2 and num_clients >= 1")
    rng = np.random.default_rng(seed)
    means = class_means(num_classes, dim) * separation
    ys = np.repeat(np.arange(num_classes), shared_per_class)
    xs = means[ys] + noise * rng.standard_normal((len(ys), dim))
    marker = np.zeros(dim)
    marker[num_classes:] = separation / np.sqrt(dim - num_classes)
    xp = marker + noise * rng.standard_normal((num_clients * private_per_client, dim))
    owner = np.repeat(np.arange(num_clients), private_per_client)
    yp = owner % num_classes
    x = np.vstack([xs, xp])
    y = np.concatenate([ys, yp])
    g = np.concatenate([np.full(len(ys), -1), owner])
    order = rng.permutation(len(y))
    return Dataset(x[order], y[order], g[order])


def fit_centroids(data):
    labels = np.unique(data.y)
    return labels, np.stack([data.x[data.y == c].mean(axis=0) for c in labels])


def centroid_predict(centroids, x):
    labels, cents = centroids
    d2 = ((np.asarray(x)[:, None, :] - cents[None, :, :]) ** 2).sum(axis=2)
    return labels[np.argmin(d2, axis=1)]


def largest_remainder(weights, total):
    """Integer counts proportional to ``weights`` summing exactly to ``total``."""
    weights = np.asarray(weights, dtype=np.float64)
    s = weights.sum()
    if total == 0 or s <= 0:
        return np.zeros(len(weights), dtype=np.int64)
    raw = weights / s * total
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    if short:
        # stable sort: ties go to the lower index
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def _balance(props, row_totals, col_totals, iters=2000, tol=1e-12):
    """Sinkhorn scaling of a positive matrix to the given margins."""
    m = np.maximum(props, 1e-12) * row_totals[:, None]
    for _ in range(iters):
        m *= (col_totals / m.sum(axis=0))[None, :]
        m *= (row_totals / m.sum(axis=1))[:, None]
        if np.max(np.abs(m.sum(axis=0) - col_totals)) < tol * max(1.0, col_totals.max()):
            break
    return m


def _integer_allocation(target, row_totals, col_totals):
    """Round a real matrix to integers with exact row and column sums."""
    cap = col_totals.astype(np.int64).copy()
    out = np.zeros(target.shape, dtype=np.int64)
    for c in range(target.shape[0]):
        want = largest_remainder(target[c], int(row_totals[c]))
        take = np.minimum(want, cap)
        left = int(row_totals[c]) - int(take.sum())
        while left:
            room = cap - take
            j = int(np.argmax(room))
            if room[j] <= 0:
                raise ConfigError("column totals cannot absorb the class counts")
            add = min(left, int(room[j]))
            take[j] += add
            left -= add
        out[c] = take
        cap -= take
    return out


def _allocate(labels, spec, rng, num_classes):
    n = len(labels)
    class_counts = np.bincount(labels, minlength=num_classes)
    props = rng.dirichlet(np.full(spec.num_clients, spec.alpha), size=num_classes)
    if spec.equal_size:
        sizes = largest_remainder(np.ones(spec.num_clients), n)
        target = _balance(props, class_counts.astype(np.float64), sizes.astype(np.float64))
        return _integer_allocation(target, class_counts, sizes)
    return np.stack([largest_remainder(props[c], class_counts[c]) for c in range(num_classes)])


def _split(idx, rng):
    idx = rng.permutation(idx)
    n_test = int(round(TEST_FRACTION * len(idx)))
    if len(idx) - n_test < 1:
        n_test = len(idx) - 1
    return np.sort(idx[n_test:]), np.sort(idx[:n_test])


def dirichlet_partition(data, spec, indices=None):
    """Label-skewed shards: per-class client shares drawn from Dir(alpha).

    ``indices`` restricts the partition to those rows of ``data`` (returned
    shard indices always refer to ``data``). Each shard is split 80/20 into
    train and test after a seeded shuffle.
    """
    if indices is None:
        indices = np.arange(len(data))
    indices = np.asarray(indices, dtype=np.int64)
    if len(indices) == 0:
        raise InputError("cannot partition an empty dataset")
    if len(indices) < spec.num_clients:
        raise ConfigError(
            f"{len(indices)} examples cannot give each of {spec.num_clients} clients one"
        )
    labels = data.y[indices]
    num_classes = int(labels.max()) + 1
    rng = np.random.default_rng(spec.seed)
    for _ in range(MAX_PARTITION_RETRIES):
        alloc = _allocate(labels, spec, rng, num_classes)
        if np.all(alloc.sum(axis=0) >= 1):
            break
    else:
        raise ConfigError(
            f"could not give every one of {spec.num_clients} clients an example "
            f"after {MAX_PARTITION_RETRIES} draws (alpha={spec.alpha}, n={len(indices)})"
        )
    owned = [[] for _ in range(spec.num_clients)]
    for c in range(num_classes):
        pool = rng.permutation(indices[labels == c])
        start = 0
        for i in range(spec.num_clients):
            owned[i].append(pool[start : start + alloc[c, i]])
            start += alloc[c, i]
    shards = []
    for i in range(spec.num_clients):
        tr, te = _split(np.concatenate(owned[i]), rng)
        shards.append(ClientShard(i, data[tr], data[te], tr, te))
    return shards


def two_skill_partition(data, spec):
    """Dirichlet split of the shared rows; private rows go to their owner.

    Train and test of each client both mix shared and private rows.
    """
    shared = np.flatnonzero(data.group < 0)
    base = dirichlet_partition(data, spec, indices=shared)
    rng = np.random.default_rng([spec.seed, 1])
    shards = []
    for sh in base:
        p_tr, p_te = _split(np.flatnonzero(data.group == sh.client_id), rng)
        tr = np.sort(np.concatenate([sh.train_idx, p_tr]))
        te = np.sort(np.concatenate([sh.test_idx, p_te]))
        shards.append(ClientShard(sh.client_id, data[tr], data[te], tr, te))
    return shards


def class_proportion_std(shards, num_classes):
    """Mean over clients of the std (across classes) of the client's label mix."""
    stds = []
    for sh in shards:
        y = np.concatenate([sh.train.y, sh.test.y])
        p = np.bincount(y, minlength=num_classes) / max(len(y), 1)
        stds.append(p.std())
    return float(np.mean(stds))


def partition_manifest(shards, spec=None, extra=None):
    doc = {
        "clients": {
            str(sh.client_id): {
                "train": sh.train_idx.tolist(),
                "test": sh.test_idx.tolist(),
            }
            for sh in shards
        }
    }
    if spec is not None:
        doc.update(
            alpha=spec.alpha,
            num_clients=spec.num_clients,
            seed=spec.seed,
            equal_size=spec.equal_size,
        )
    if extra:
        doc.update(extra)
    return doc


def shards_from_manifest(data, manifest):
    shards = []
    for cid, parts in sorted(manifest["clients"].items(), key=lambda kv: int(kv[0])):
        tr = np.asarray(parts["train"], dtype=np.int64)
        te = np.asarray(parts["test"], dtype=np.int64)
        shards.append(ClientShard(int(cid), data[tr], data[te], tr, te))
    return shards


def _field(obj, primary, alternate, lineno):
    if primary in obj:
        return obj[primary]
    if alternate in obj:
        return obj[alternate]
    raise SchemaError(f"missing '{primary}' (or '{alternate}')", line=lineno)


def load_jsonl(path):
    """Examples from a JSON-lines file, in file order.

    Each non-blank line is an object with ``features`` (or ``input``) and
    ``label`` (or ``output``).
    """
    xs, ys = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON ({exc.msg})", line=lineno) from None
            if not isinstance(obj, dict):
                raise SchemaError("expected a JSON object", line=lineno)
            feats = _field(obj, "features", "input", lineno)
            label = _field(obj, "label", "output", lineno)
            if not isinstance(feats, list) or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in feats
            ):
                raise SchemaError("features must be a list of numbers", line=lineno)
            if isinstance(label, bool) or not isinstance(label, int) or label < 0:
                raise SchemaError(f"label must be a non-negative integer, got {label!r}", line=lineno)
            if xs and len(feats) != len(xs[0]):
                raise SchemaError(
                    f"expected {len(xs[0])} features, got {len(feats)}", line=lineno
                )
            xs.append(feats)
            ys.append(label)
    if not xs:
        return Dataset(np.zeros((0, 0)), np.zeros(0, dtype=np.int64))
    return Dataset(np.array(xs, dtype=np.float64), ys)


def save_jsonl(data, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row, label in zip(data.x, data.y):
            fh.write(json.dumps({"features": row.tolist(), "label": int(label)}) + "\n")
