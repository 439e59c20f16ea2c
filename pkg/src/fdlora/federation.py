"""Client/server protocol: local SFT, federated inner/outer rounds, adaptive fusion."""
import copy
import dataclasses
import hashlib
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from fdlora import lora
from fdlora.datagen import (
    ClientShard,
    Dataset,
    PartitionSpec,
    dirichlet_partition,
    make_synthetic_task,
    make_two_skill_task,
    partition_manifest,
    two_skill_partition,
)
from fdlora.errors import ConfigError
from fdlora.lora import AdapterSet, FusionMode, FusionWeights, ada_fuse_set, average_adapters
from fdlora.metrics import score_predictions
from fdlora.model import BaseModel
from fdlora.optim import (
    FusionBudget,
    InnerOptState,
    OuterOptState,
    fusion_search,
    inner_step,
    lr_schedule_milestone,
    outer_delta,
    outer_step,
    sgd_step,
)

SITE_HEADER_BYTES = 64
BYTES_PER_ENTRY = 8
ADAPTER_INIT_STREAM = 7919
BASE_MODEL_STREAM = 104729


@dataclass(frozen=True)
class FederationConfig:
    """Every knob of a run. Field names are the JSON config keys.

    ``sync_every`` may be ``math.inf`` (written as ``"inf"`` in JSON) to
    freeze the personalized adapters after local learning. ``batch_size``
    0 means full-batch.
    """

    num_clients: int = 5
    outer_rounds: int = 30
    inner_steps: int = 3
    sync_every: float = 30
    dirichlet_alpha: float = 0.5
    inner_lr: float = 2e-4
    outer_lr: float = 1e-3
    outer_momentum: float = 0.5
    weight_decay: float = 0.01
    lr_decay: float = 0.1
    fusion_lambda: float = 0.05
    fusion_mode: str = "adafusion"
    fusion_steps: int = 5
    fusion_shots: int = 32
    batch_size: int = 1
    local_epochs: int = 3
    rank: int = 4
    seed: int = 0
    inner_optimizer: str = "adamw"
    hidden_dim: int = 32
    adapted_sites: tuple = ("layer0", "layer1")
    task: str = "clusters"
    num_classes: int = 4
    dim: int = 12
    per_class: int = 250
    noise: float = 0.6
    equal_size: bool = True
    jobs: int = 1

    def __post_init__(self):
        object.__setattr__(self, "adapted_sites", tuple(self.adapted_sites))
        if isinstance(self.sync_every, str):
            object.__setattr__(self, "sync_every", _parse_sync(self.sync_every))
        self.validate()

    def validate(self):
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(isinstance(self.num_clients, int) and self.num_clients >= 1, "num_clients must be >= 1")
        need(isinstance(self.outer_rounds, int) and self.outer_rounds >= 0, "outer_rounds must be >= 0")
        need(isinstance(self.inner_steps, int) and self.inner_steps >= 1, "inner_steps must be >= 1")
        need(
            self.sync_every == math.inf
            or (float(self.sync_every).is_integer() and self.sync_every >= 1),
            "sync_every must be a positive integer or inf",
        )
        need(self.dirichlet_alpha > 0, "dirichlet_alpha must be > 0")
        for name in ("inner_lr", "outer_lr"):
            need(getattr(self, name) > 0, f"{name} must be > 0")
        need(0 <= self.outer_momentum < 1, "outer_momentum must be in [0, 1)")
        need(self.weight_decay >= 0, "weight_decay must be >= 0")
        need(0 < self.lr_decay <= 1, "lr_decay must be in (0, 1]")
        need(self.fusion_lambda >= 0, "fusion_lambda must be >= 0")
        try:
            FusionMode(self.fusion_mode)
        except ValueError:
            raise ConfigError(
                f"fusion_mode must be one of {[m.value for m in FusionMode]}, got {self.fusion_mode!r}"
            ) from None
        need(self.fusion_steps >= 1, "fusion_steps must be >= 1")
        need(self.fusion_shots >= 0, "fusion_shots must be >= 0")
        need(self.batch_size >= 0, "batch_size must be >= 0 (0 = full batch)")
        need(self.local_epochs >= 0, "local_epochs must be >= 0")
        need(self.rank >= 1, "rank must be >= 1")
        need(isinstance(self.seed, int) and self.seed >= 0, "seed must be a non-negative integer")
        need(self.inner_optimizer in ("adamw", "sgd"), "inner_optimizer must be 'adamw' or 'sgd'")
        need(self.hidden_dim >= 1, "hidden_dim must be >= 1")
        need(self.task in ("clusters", "two_skill"), "task must be 'clusters' or 'two_skill'")
        need(self.jobs >= 1, "jobs must be >= 1")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["adapted_sites"] = list(self.adapted_sites)
        d["sync_every"] = "inf" if self.sync_every == math.inf else int(self.sync_every)
        return d

    @classmethod
    def from_dict(cls, doc):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    def replace(self, **changes):
        return replace(self, **changes)


def _parse_sync(v):
    if str(v).lower() in ("inf", "infinity", "∞"):
        return math.inf
    try:
        return int(v)
    except ValueError:
        raise ConfigError(f"sync_every must be an integer or 'inf', got {v!r}") from None


@dataclass
class ClientState:
    client_id: int
    train: Dataset
    test: Dataset
    fusion_set: Dataset
    personalized: AdapterSet
    global_copy: AdapterSet | None = None
    fusion_weights: FusionWeights | None = None
    rng: np.random.Generator = field(default=None, repr=False)
    shard: ClientShard | None = field(default=None, repr=False)


@dataclass(frozen=True)
class ServerState:
    global_adapter: AdapterSet
    outer_opt: OuterOptState
    round: int = 0


@dataclass(frozen=True)
class CommLedger:
    rounds_sent: int = 0
    bytes_up: int = 0
    bytes_down: int = 0
    inner_steps_total: int = 0
    sync_events: int = 0
    personalized_bytes: int = 0

    def to_dict(self):
        return dataclasses.asdict(self)


def serialized_size(adapters):
    """Wire size: 8 bytes per factor entry plus a 64-byte header per site."""
    return BYTES_PER_ENTRY * adapters.num_entries() + SITE_HEADER_BYTES * len(adapters)


def client_rng(seed, client_id):
    return np.random.default_rng([seed, client_id])


def build_base_model(cfg, input_dim=None, num_classes=None):
    sizes = [input_dim or cfg.dim, cfg.hidden_dim, num_classes or cfg.num_classes]
    return BaseModel.mlp(sizes, seed=[cfg.seed, BASE_MODEL_STREAM], adapted_sites=cfg.adapted_sites)


def initial_adapters(base, cfg):
    """Common starting point of every client's personalized adapter."""
    return base.init_adapters(cfg.rank, np.random.default_rng([cfg.seed, ADAPTER_INIT_STREAM]), seed=cfg.seed)


def make_clients(shards, base, cfg):
    """Client states with the fusion set Q carved out of each training split."""
    init = initial_adapters(base, cfg)
    clients = []
    for sh in shards:
        if len(sh.train) == 0:
            raise ConfigError(f"client {sh.client_id} has an empty training shard")
        rng = client_rng(cfg.seed, sh.client_id)
        n = len(sh.train)
        q = min(cfg.fusion_shots, n // 2)
        order = rng.permutation(n)
        if q:
            fusion_set, train = sh.train[np.sort(order[:q])], sh.train[np.sort(order[q:])]
        else:
            fusion_set, train = sh.train, sh.train
        clients.append(ClientState(sh.client_id, train, sh.test, fusion_set, init, rng=rng, shard=sh))
    return clients


def _fresh_inner(params, cfg):
    return InnerOptState.fresh(
        params, lr=cfg.inner_lr, weight_decay=cfg.weight_decay, lr_decay=cfg.lr_decay
    )


def _step(base, adapters, batch, state, cfg):
    _, grads = base.loss_and_grads(batch.x, batch.y, adapters)
    if cfg.inner_optimizer == "sgd":
        return sgd_step(adapters, grads, state.lr), state
    return inner_step(adapters, grads, state)


def _batches(n, batch_size, rng):
    if batch_size == 0 or batch_size >= n:
        yield np.arange(n)
        return
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield np.sort(perm[start : start + batch_size])


def _local_sft(client, base, cfg):
    if len(client.train) == 0:
        raise ConfigError(f"client {client.client_id} has an empty training shard")
    rng = copy.deepcopy(client.rng)
    adapters = client.personalized
    state = _fresh_inner(adapters, cfg)
    n = len(client.train)
    per_epoch = 1 if cfg.batch_size == 0 else math.ceil(n / min(cfg.batch_size, n))
    milestone = lr_schedule_milestone(per_epoch * cfg.local_epochs)
    step = 0
    for _ in range(cfg.local_epochs):
        for idx in _batches(n, cfg.batch_size, rng):
            if step == milestone and milestone > 0:
                state = state.decayed()
            adapters, state = _step(base, adapters, client.train[idx], state, cfg)
            step += 1
    return replace(client, personalized=adapters, global_copy=adapters, rng=rng)


def _run_clients(fn, clients, jobs):
    if jobs > 1 and len(clients) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, clients))
    return [fn(c) for c in clients]


def stage1_local_learning(clients, base, cfg):
    """Supervised fine-tuning of each personalized adapter on its own shard.

    Clients get their post-SFT adapter as their initial global copy too, so
    with no federation rounds fusion combines two identical adapters.
    """
    for c in clients:
        if len(c.train) == 0:
            raise ConfigError(f"client {c.client_id} has an empty training shard")
    if cfg.local_epochs == 0:
        return [replace(c, global_copy=c.personalized if c.global_copy is None else c.global_copy) for c in clients]
    return _run_clients(lambda c: _local_sft(c, base, cfg), clients, cfg.jobs)


def stage2_init_global(clients, cfg=None):
    """Server state whose global adapter is the factor-wise mean of the personalized ones."""
    glob = average_adapters([c.personalized for c in clients])
    lr = cfg.outer_lr if cfg is not None else 1e-3
    m = cfg.outer_momentum if cfg is not None else 0.5
    return ServerState(glob, OuterOptState.fresh(glob, lr=lr, momentum=m), 0)


def _inner_round(client, glob, base, cfg):
    rng = copy.deepcopy(client.rng)
    adapters = glob
    state = _fresh_inner(adapters, cfg)
    n = len(client.train)
    b = n if cfg.batch_size == 0 else min(cfg.batch_size, n)
    for _ in range(cfg.inner_steps):
        idx = np.arange(n) if b == n else np.sort(rng.choice(n, size=b, replace=False))
        adapters, state = _step(base, adapters, client.train[idx], state, cfg)
    return adapters, rng


def stage2_round(server, clients, base, cfg, ledger):
    """One outer round; returns new ``(server, clients, ledger)``.

    Inputs are never modified, so a failure in any client leaves the caller
    holding the untouched pre-round state.
    """
    if server.round >= cfg.outer_rounds:
        raise ConfigError(f"round {server.round} is past outer_rounds={cfg.outer_rounds}")
    glob = server.global_adapter
    size = serialized_size(glob)
    n = len(clients)
    results = _run_clients(lambda c: _inner_round(c, glob, base, cfg), clients, cfg.jobs)
    t = server.round + 1
    sync = cfg.sync_every != math.inf and t % int(cfg.sync_every) == 0
    new_clients = []
    for c, (copy_, rng) in zip(clients, results):
        pers = copy_ if sync else c.personalized
        new_clients.append(replace(c, global_copy=copy_, personalized=pers, rng=rng))
    delta = outer_delta(glob, [r[0] for r in results])
    new_glob, new_opt = outer_step(glob, delta, server.outer_opt)
    new_glob = new_glob.with_params(new_glob.params(), protocol_round=t)
    new_ledger = replace(
        ledger,
        rounds_sent=ledger.rounds_sent + 1,
        bytes_down=ledger.bytes_down + n * size,
        bytes_up=ledger.bytes_up + n * size,
        inner_steps_total=ledger.inner_steps_total + n * cfg.inner_steps,
        sync_events=ledger.sync_events + int(sync),
    )
    return ServerState(new_glob, new_opt, t), new_clients, new_ledger


def fusion_objective(base, client):
    q = client.fusion_set

    def objective(w):
        return base.loss(q.x, q.y, ada_fuse_set(client.personalized, client.global_copy, w)).scalar

    return objective


def stage3_fusion(clients, base, cfg):
    """Pick each client's fusion weights (searched, or fixed by a baseline mode)."""
    mode = FusionMode(cfg.fusion_mode)

    def fuse(c):
        if c.global_copy is None:
            c = replace(c, global_copy=c.personalized)
        if mode is FusionMode.ADAFUSION:
            budget = FusionBudget(
                max_steps=cfg.fusion_steps, lambda_reg=cfg.fusion_lambda, seed=cfg.seed * 1009 + c.client_id
            )
            w = fusion_search(fusion_objective(base, c), budget).weights
            return replace(c, fusion_weights=w)
        rng = copy.deepcopy(c.rng)
        w = lora.baseline_fusion(mode, rng)
        return replace(c, fusion_weights=w, rng=rng)

    return _run_clients(fuse, clients, cfg.jobs)


def fused_adapters(client):
    return ada_fuse_set(client.personalized, client.global_copy, client.fusion_weights)


@dataclass
class RunReport:
    config: dict
    clients: list
    mean: dict
    std: dict
    ledger: dict
    base_checksum: dict
    partition: dict = field(repr=False, default_factory=dict)
    timing: dict = field(default_factory=dict)
    global_adapter: AdapterSet | None = field(default=None, repr=False, compare=False)
    final_clients: list = field(default_factory=list, repr=False, compare=False)
    manifest: dict = field(default_factory=dict, repr=False, compare=False)

    def to_dict(self, timing=True):
        d = {
            "config": self.config,
            "clients": self.clients,
            "mean": self.mean,
            "std": self.std,
            "ledger": self.ledger,
            "base_checksum": self.base_checksum,
        }
        if timing:
            d["timing"] = self.timing
        return d

    def to_json(self, timing=True):
        return json.dumps(self.to_dict(timing), indent=2, sort_keys=True) + "\n"


def build_dataset(cfg):
    if cfg.task == "two_skill":
        return make_two_skill_task(
            cfg.num_clients, dim=cfg.dim, noise=cfg.noise, num_classes=cfg.num_classes,
            shared_per_class=cfg.per_class, seed=cfg.seed,
        )
    return make_synthetic_task(cfg.num_classes, cfg.dim, cfg.per_class, cfg.noise, cfg.seed)


def partition(data, cfg):
    spec = PartitionSpec(cfg.dirichlet_alpha, cfg.num_clients, cfg.seed, cfg.equal_size)
    if cfg.task == "two_skill" and np.any(data.group >= 0):
        return two_skill_partition(data, spec), spec
    return dirichlet_partition(data, spec), spec


def git_blob_hash(text):
    raw = text.encode("utf-8")
    return hashlib.sha1(b"blob %d\0" % len(raw) + raw).hexdigest()


def run_manifest(cfg, data, base):
    return {
        "config": cfg.to_dict(),
        "dataset_digest": data.digest(),
        "initial_adapters_hash": git_blob_hash(lora.dumps(initial_adapters(base, cfg))),
        "base_checksum": base.checksum(),
    }


def _client_row(c, base, num_classes):
    adapters = fused_adapters(c)
    pred = base.predict(c.test.x, adapters)
    s = score_predictions(c.test.y, pred, num_classes)
    loss = base.loss(c.test.x, c.test.y, adapters).scalar
    return {
        "client_id": c.client_id,
        "accuracy": s.accuracy,
        "f1": s.f1,
        "f1_degenerate": s.f1_degenerate,
        "loss": loss,
        "fusion_weights": list(c.fusion_weights.as_tuple()),
        "n_train": len(c.train),
        "n_fusion": len(c.fusion_set),
        "n_test": len(c.test),
    }


def write_checkpoint(root, t, server, clients):
    d = os.path.join(root, f"round_{t}")
    os.makedirs(d, exist_ok=True)
    lora.save(server.global_adapter, os.path.join(d, "global.json"))
    for c in clients:
        lora.save(c.personalized, os.path.join(d, f"client_{c.client_id}_personalized.json"))


def run_fdlora(cfg, dataset=None, checkpoint_dir=None):
    """Partition, local SFT, T federated rounds, fusion, then per-client evaluation."""
    timing = {}
    t0 = time.perf_counter()
    data = dataset if dataset is not None else build_dataset(cfg)
    if len(data) == 0:
        raise ConfigError("dataset is empty")
    num_classes = max(data.num_classes, cfg.num_classes if dataset is None else 0)
    base = build_base_model(cfg, data.dim, num_classes)
    checksum_before = base.checksum()
    manifest = run_manifest(cfg, data, base)
    shards, spec = partition(data, cfg)
    clients = make_clients(shards, base, cfg)
    timing["partition"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    clients = stage1_local_learning(clients, base, cfg)
    timing["stage1"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    server = stage2_init_global(clients, cfg)
    ledger = CommLedger()
    if checkpoint_dir:
        write_checkpoint(checkpoint_dir, 0, server, clients)
    for _ in range(cfg.outer_rounds):
        server, clients, ledger = stage2_round(server, clients, base, cfg, ledger)
        if checkpoint_dir:
            write_checkpoint(checkpoint_dir, server.round, server, clients)
    timing["stage2"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    clients = stage3_fusion(clients, base, cfg)
    timing["stage3"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    rows = [_client_row(c, base, num_classes) for c in clients]
    timing["evaluate"] = time.perf_counter() - t0
    keys = ("accuracy", "f1", "loss")
    mean = {k: float(np.mean([r[k] for r in rows])) for k in keys}
    std = {k: float(np.std([r[k] for r in rows])) for k in keys}
    parts = partition_manifest(shards, spec)
    parts["fusion"] = {str(c.client_id): len(c.fusion_set) for c in clients}
    return RunReport(
        config=cfg.to_dict(),
        clients=rows,
        mean=mean,
        std=std,
        ledger=ledger.to_dict(),
        base_checksum={"before": checksum_before, "after": base.checksum()},
        partition=parts,
        timing=timing,
        global_adapter=server.global_adapter,
        final_clients=clients,
        manifest=manifest,
    )
