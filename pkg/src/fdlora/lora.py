"""Low-rank adapters: construction, merging, averaging and AdaFusion."""
import enum
import json
from dataclasses import dataclass, field

import numpy as np

from fdlora.errors import ConfigError, FusionError, SchemaError, ShapeError
from fdlora.numerics import as_matrix, matmul

INIT_STD = 0.02
DEFAULT_BOUNDS = (-1.5, 1.5)


def _frozen(a):
    a = as_matrix(a).copy()
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class LoraAdapter:
    """Trainable update ``B @ A`` for one base weight of shape d x k."""

    site_id: str
    b_factor: np.ndarray
    a_factor: np.ndarray
    seed: int | None = field(default=None, compare=False)
    protocol_round: int | None = field(default=None, compare=False)

    def __post_init__(self):
        b = _frozen(self.b_factor)
        a = _frozen(self.a_factor)
        if b.shape[1] != a.shape[0]:
            raise ShapeError(
                f"{self.site_id}: B is {b.shape[0]}x{b.shape[1]} but A is "
                f"{a.shape[0]}x{a.shape[1]}"
            )
        r = a.shape[0]
        if r > min(b.shape[0], a.shape[1]):
            raise ShapeError(
                f"{self.site_id}: rank {r} exceeds min(d={b.shape[0]}, k={a.shape[1]})"
            )
        object.__setattr__(self, "b_factor", b)
        object.__setattr__(self, "a_factor", a)

    @property
    def rank(self):
        return self.a_factor.shape[0]

    @property
    def shape(self):
        return (self.b_factor.shape[0], self.a_factor.shape[1])

    def __eq__(self, other):
        if not isinstance(other, LoraAdapter):
            return NotImplemented
        return (
            self.site_id == other.site_id
            and np.array_equal(self.b_factor, other.b_factor)
            and np.array_equal(self.a_factor, other.a_factor)
        )

    def to_dict(self):
        d, k = self.shape
        return {
            "site_id": self.site_id,
            "rank": self.rank,
            "d": d,
            "k": k,
            "b_factor": self.b_factor.ravel().tolist(),
            "a_factor": self.a_factor.ravel().tolist(),
            "seed": self.seed,
            "protocol_round": self.protocol_round,
        }

    @classmethod
    def from_dict(cls, doc):
        try:
            r, d, k = int(doc["rank"]), int(doc["d"]), int(doc["k"])
            b = np.asarray(doc["b_factor"], dtype=np.float64)
            a = np.asarray(doc["a_factor"], dtype=np.float64)
            site = doc["site_id"]
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"bad adapter document: {exc}") from exc
        if b.size != d * r or a.size != r * k:
            raise SchemaError(
                f"{site}: factor lengths {b.size}/{a.size} do not match d={d}, k={k}, r={r}"
            )
        return cls(
            site,
            b.reshape(d, r),
            a.reshape(r, k),
            seed=doc.get("seed"),
            protocol_round=doc.get("protocol_round"),
        )


def init_adapter(site_id, d, k, rank, rng, seed=None):
    """B = 0 and A ~ N(0, 0.02^2), so the initial update is exactly zero."""
    if rank < 1:
        raise ConfigError(f"{site_id}: rank must be >= 1, got {rank}")
    if rank > min(d, k):
        raise ConfigError(f"{site_id}: rank {rank} exceeds min(d={d}, k={k})")
    a = rng.normal(0.0, INIT_STD, size=(rank, k))
    return LoraAdapter(site_id, np.zeros((d, rank)), a, seed=seed, protocol_round=0)


class AdapterSet:
    """Immutable mapping site_id -> LoraAdapter, iterated in sorted site order."""

    def __init__(self, adapters=()):
        if isinstance(adapters, dict):
            adapters = adapters.values()
        table = {}
        for ad in adapters:
            if ad.site_id in table:
                raise ConfigError(f"duplicate adapter for site {ad.site_id!r}")
            table[ad.site_id] = ad
        self._adapters = dict(sorted(table.items()))

    def __getitem__(self, site_id):
        return self._adapters[site_id]

    def __contains__(self, site_id):
        return site_id in self._adapters

    def __iter__(self):
        return iter(self._adapters)

    def __len__(self):
        return len(self._adapters)

    def items(self):
        return self._adapters.items()

    def values(self):
        return self._adapters.values()

    def __eq__(self, other):
        if not isinstance(other, AdapterSet):
            return NotImplemented
        return list(self._adapters) == list(other._adapters) and all(
            self[s] == other[s] for s in self
        )

    def __repr__(self):
        sites = ", ".join(f"{s}:r{a.rank}" for s, a in self.items())
        return f"AdapterSet({sites})"

    def params(self):
        """Flat view ``{"<site>.b": B, "<site>.a": A}`` used by the optimizers."""
        out = {}
        for site, ad in self.items():
            out[f"{site}.b"] = ad.b_factor
            out[f"{site}.a"] = ad.a_factor
        return out

    def with_params(self, params, protocol_round=None):
        """New set with factors replaced from a ``params()``-shaped dict."""
        new = []
        for site, ad in self.items():
            b = params[f"{site}.b"]
            a = params[f"{site}.a"]
            if b.shape != ad.b_factor.shape or a.shape != ad.a_factor.shape:
                raise ShapeError(f"{site}: replacement factors change shape")
            rnd = ad.protocol_round if protocol_round is None else protocol_round
            new.append(LoraAdapter(site, b, a, seed=ad.seed, protocol_round=rnd))
        return AdapterSet(new)

    def num_entries(self):
        return sum(ad.b_factor.size + ad.a_factor.size for ad in self.values())

    def to_dict(self):
        return {"adapters": [ad.to_dict() for ad in self.values()]}

    @classmethod
    def from_dict(cls, doc):
        if not isinstance(doc, dict) or "adapters" not in doc:
            raise SchemaError("adapter set document needs an 'adapters' list")
        return cls(LoraAdapter.from_dict(d) for d in doc["adapters"])


def dumps(obj):
    """Canonical JSON text for an adapter or adapter set (newline-terminated)."""
    return json.dumps(obj.to_dict(), sort_keys=True) + "\n"


def loads(text):
    doc = json.loads(text)
    if "adapters" in doc:
        return AdapterSet.from_dict(doc)
    return LoraAdapter.from_dict(doc)


def save(obj, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps(obj))


def load(path):
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())


def delta(adapter):
    return matmul(adapter.b_factor, adapter.a_factor)


def effective_weight(base, adapter):
    base = np.asarray(base, dtype=np.float64)
    if base.shape != adapter.shape:
        raise ShapeError(
            f"site {adapter.site_id!r}: base is {base.shape}, adapter update is "
            f"{adapter.shape}"
        )
    return base + delta(adapter)


def pairwise_sum(arrays):
    """Sum in a fixed binary-tree order, independent of how the list was built."""
    arrays = list(arrays)
    if not arrays:
        raise ValueError("pairwise_sum of nothing")
    while len(arrays) > 1:
        nxt = [arrays[i] + arrays[i + 1] for i in range(0, len(arrays) - 1, 2)]
        if len(arrays) % 2:
            nxt.append(arrays[-1])
        arrays = nxt
    return arrays[0]


def _check_compatible(sets):
    first = sets[0]
    for other in sets[1:]:
        if list(other) != list(first):
            raise ConfigError(f"adapter sets cover different sites: {list(first)} vs {list(other)}")
        for site in first:
            if other[site].rank != first[site].rank:
                raise ConfigError(
                    f"site {site!r}: heterogeneous ranks {first[site].rank} and {other[site].rank}"
                )
            if other[site].shape != first[site].shape:
                raise ConfigError(f"site {site!r}: mismatched shapes")


def average_adapters(sets):
    """Factor-space mean: B's averaged with B's and A's with A's."""
    sets = list(sets)
    if not sets:
        raise ConfigError("cannot average an empty list of adapter sets")
    _check_compatible(sets)
    n = len(sets)
    out = []
    for site, ad in sets[0].items():
        b = pairwise_sum(s[site].b_factor for s in sets) / n
        a = pairwise_sum(s[site].a_factor for s in sets) / n
        out.append(LoraAdapter(site, b, a, seed=ad.seed, protocol_round=ad.protocol_round))
    return AdapterSet(out)


@dataclass(frozen=True)
class FusionWeights:
    w1: float
    w2: float

    def __post_init__(self):
        if not (np.isfinite(self.w1) and np.isfinite(self.w2)):
            raise FusionError(f"non-finite fusion weights ({self.w1}, {self.w2})")
        object.__setattr__(self, "w1", float(self.w1))
        object.__setattr__(self, "w2", float(self.w2))

    def clamp(self, bounds=DEFAULT_BOUNDS):
        lo, hi = bounds
        return FusionWeights(min(max(self.w1, lo), hi), min(max(self.w2, lo), hi))

    def l1(self):
        return abs(self.w1) + abs(self.w2)

    def as_tuple(self):
        return (self.w1, self.w2)


class FusionMode(str, enum.Enum):
    ADAFUSION = "adafusion"
    RANDOM = "random"
    AVERAGE = "average"
    SUM = "sum"
    PERSONALIZED_ONLY = "personalized"
    GLOBAL_ONLY = "global"


def ada_fuse(personalized, global_, w):
    """(w1 B1 + w2 B2)(w1 A1 + w2 A2), i.e. combine factors, then multiply.

    The resulting update carries the cross terms w1 w2 (B1 A2 + B2 A1), so it
    is not the weighted sum of the two updates.
    """
    if personalized.rank != global_.rank:
        raise FusionError(
            f"site {personalized.site_id!r}: cannot fuse rank {personalized.rank} "
            f"with rank {global_.rank}"
        )
    if personalized.shape != global_.shape:
        raise FusionError(f"site {personalized.site_id!r}: mismatched adapter shapes")
    b = w.w1 * personalized.b_factor + w.w2 * global_.b_factor
    a = w.w1 * personalized.a_factor + w.w2 * global_.a_factor
    return LoraAdapter(personalized.site_id, b, a)


def ada_fuse_set(personalized, global_, w):
    if list(personalized) != list(global_):
        raise FusionError("personalized and global adapters cover different sites")
    return AdapterSet(ada_fuse(personalized[s], global_[s], w) for s in personalized)


def baseline_fusion(mode, rng=None):
    """Fixed or random weights for the non-optimized fusion modes."""
    mode = FusionMode(mode)
    if mode is FusionMode.AVERAGE:
        return FusionWeights(0.5, 0.5)
    if mode is FusionMode.SUM:
        return FusionWeights(1.0, 1.0)
    if mode is FusionMode.PERSONALIZED_ONLY:
        return FusionWeights(1.0, 0.0)
    if mode is FusionMode.GLOBAL_ONLY:
        return FusionWeights(0.0, 1.0)
    if mode is FusionMode.RANDOM:
        if rng is None:
            raise ConfigError("random fusion needs an rng")
        w1, w2 = rng.uniform(0.0, 1.0, size=2)
        return FusionWeights(w1, w2)
    raise ConfigError(f"{mode.value} weights are found by optimization, not assigned")


def count_trainable(adapters):
    """Sum of r * (d + k) over the adapted sites."""
    total = 0
    for ad in adapters.values():
        d, k = ad.shape
        total += ad.rank * (d + k)
    return total
