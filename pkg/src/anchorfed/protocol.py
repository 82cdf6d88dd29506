"""Round-synchronous serverless training engine.

One round: sample clients, sampled clients broadcast their logits on the
shared anchor set to their neighbors, each sampled client averages the
freshest neighbor logits it holds, then runs local mini-batch SGD on the
combined objective. Baselines (standalone, fedavg, logit-only) reuse the
same loop with features switched off so reduction identities hold bit-exactly.

All randomness is drawn from named streams derived from
(seed, client_id, round), so trajectories do not depend on scheduling or on
the worker count.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import ClientData, DataError, Dataset
from .distill import AnchorSet, merge_anchors
from .kernel import NumericError, Tensor
from .losses import LossBatch, total_loss
from .models import Model, forward, make_arch, init_model, sgd_step

ALGORITHMS = ("desa", "standalone", "fedavg", "logit-only")


class ConfigError(ValueError):
    """Invalid run configuration."""


@dataclass
class Topology:
    n_clients: int
    adjacency: list[list[int]]
    kind: str = "full"

    def __post_init__(self):
        adj = [sorted(set(nbrs)) for nbrs in self.adjacency]
        for i, nbrs in enumerate(adj):
            if i in nbrs:
                raise ConfigError(f"self-loop at client {i}")
            for j in nbrs:
                if i not in adj[j]:
                    raise ConfigError(f"asymmetric edge {i}->{j}")
        if self.n_clients > 1 and not self._connected(adj):
            raise ConfigError("topology is not connected")
        self.adjacency = adj

    def _connected(self, adj) -> bool:
        seen, stack = {0}, [0]
        while stack:
            for j in adj[stack.pop()]:
                if j not in seen:
                    seen.add(j)
                    stack.append(j)
        return len(seen) == self.n_clients

    @staticmethod
    def full(n: int) -> "Topology":
        return Topology(n, [[j for j in range(n) if j != i] for i in range(n)], "full")

    @staticmethod
    def ring(n: int) -> "Topology":
        if n == 2:
            return Topology(2, [[1], [0]], "ring")
        return Topology(n, [[(i - 1) % n, (i + 1) % n] for i in range(n)], "ring")

    @staticmethod
    def random_k(n: int, k: int, seed: int) -> "Topology":
        rng = np.random.default_rng([seed, 0x70F0])
        edges = {(i, (i + 1) % n) for i in range(n)}   # ring backbone keeps it connected
        for i in range(n):
            others = [j for j in range(n) if j != i]
            for j in rng.choice(others, size=min(k, len(others)), replace=False):
                edges.add((min(i, int(j)), max(i, int(j))))
        adj = [[] for _ in range(n)]
        for a, b in edges:
            adj[a].append(b)
            adj[b].append(a)
        return Topology(n, adj, "random-k")


@dataclass
class ClientState:
    client_id: int
    model: Model
    data: ClientData
    anchors: AnchorSet | None = None
    broadcast_logits: Tensor | None = None
    broadcast_round: int = -1
    lam_reg: float = 1.0
    lam_kd: float = 1.0
    tau: float = 0.5


@dataclass
class RunConfig:
    rounds: int = 100
    local_epochs: int = 1
    batch_size: int = 32
    lr: float = 0.01
    client_sample_ratio: float = 1.0
    lam_reg: float = 1.0
    lam_kd: float = 1.0
    tau: float = 0.5
    seed: int = 0
    algorithm: str = "desa"
    merge_mode: str = "average"
    topology: str = "full"
    topology_k: int = 2
    arch_ids: list[str] = field(default_factory=lambda: ["arch-S"])
    include_anchor_ce: bool = True
    fedavg_size_weighted: bool = False

    def validate(self):
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if not 0 < self.client_sample_ratio <= 1:
            raise ConfigError("client_sample_ratio must lie in (0, 1]")
        if self.lam_reg < 0:
            raise ConfigError("lam_reg must be >= 0")
        if self.lam_kd < 0:
            raise ConfigError("lam_kd must be >= 0")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}; known: {ALGORITHMS}")
        if self.merge_mode not in ("average", "union"):
            raise ConfigError(f"unknown merge_mode {self.merge_mode!r}")
        if self.topology not in ("full", "ring", "random-k"):
            raise ConfigError(f"unknown topology {self.topology!r}")


@dataclass
class CommEvent:
    round: int
    kind: str      # anchors | logits | params
    sender: int
    receiver: int
    floats: int


@dataclass
class CommLog:
    events: list[CommEvent] = field(default_factory=list)

    def record(self, round_t: int, kind: str, sender: int, receiver: int, floats: int):
        self.events.append(CommEvent(round_t, kind, sender, receiver, floats))

    def total_floats(self, kind: str | None = None) -> int:
        return sum(e.floats for e in self.events if kind is None or e.kind == kind)

    def kinds(self) -> set[str]:
        return {e.kind for e in self.events}


@dataclass
class RoundMetrics:
    round: int
    client: int
    sampled: bool
    ce: float
    reg: float
    kd: float
    total: float


@dataclass
class ExperimentReport:
    config: RunConfig
    metrics: list[RoundMetrics]
    comm: CommLog
    clients: list[ClientState]


def _workers() -> int:
    return max(1, int(os.environ.get("ANCHORFED_WORKERS", "1")))


def _map_clients(fn, items):
    """Apply a pure per-client job, optionally on a thread pool; results are
    returned in input order, so the schedule cannot affect the trajectory."""
    w = _workers()
    if w == 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=w) as pool:
        return list(pool.map(fn, items))


def init_phase(
    clients: list[ClientState],
    topology: Topology,
    client_anchors: list[AnchorSet],
    merge_mode: str,
    comm: CommLog,
) -> AnchorSet:
    """Flood per-client anchor sets over the topology until every client has
    seen all of them, then merge; every client ends with the identical set."""
    if len(client_anchors) != len(clients):
        raise DataError("one anchor set per client is required")
    n = len(clients)
    known = [{i} for i in range(n)]
    changed = True
    while changed:
        changed = False
        snapshot = [set(k) for k in known]
        for i in range(n):
            for j in topology.adjacency[i]:
                new = snapshot[j] - known[i]
                for origin in sorted(new):
                    payload = client_anchors[origin].features.size + len(client_anchors[origin].labels)
                    comm.record(-1, "anchors", j, i, payload)
                known[i] |= new
                changed = changed or bool(new)
    assert all(k == set(range(n)) for k in known)
    merged = merge_anchors(client_anchors, mode=merge_mode)
    for c in clients:
        c.anchors = merged
        c.broadcast_logits = None
        c.broadcast_round = -1
    return merged


def _sample_clients(cfg: RunConfig, n: int, round_t: int) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, 0x5A3B, round_t])
    sampled = rng.random(n) < cfg.client_sample_ratio
    if not sampled.any():
        sampled[int(rng.integers(n))] = True
    return np.flatnonzero(sampled)


def _train_locally(
    client: ClientState,
    cfg: RunConfig,
    round_t: int,
    zbar: Tensor | None,
    use_anchors: bool,
) -> tuple[Model, dict]:
    """local_epochs of mini-batch SGD on the combined objective; returns the
    updated model and the per-step-averaged loss components."""
    model = client.model
    train = client.data.train
    rng_local = np.random.default_rng([cfg.seed, client.client_id, round_t, 0x10CA])
    rng_anchor = np.random.default_rng([cfg.seed, client.client_id, round_t, 0xA2C4])
    sums = {"ce": 0.0, "reg": 0.0, "kd": 0.0, "total": 0.0}
    steps = 0
    anchors = client.anchors if use_anchors else None
    for _ in range(cfg.local_epochs):
        perm = rng_local.permutation(train.n)
        for start in range(0, train.n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            batch = LossBatch(
                local_x=train.features[idx],
                local_y=train.labels[idx],
                lam_reg=client.lam_reg,
                lam_kd=client.lam_kd if zbar is not None else 0.0,
                tau=client.tau,
                include_anchor_ce=cfg.include_anchor_ce,
            )
            if anchors is not None:
                # 1:1 local:anchor mixing per step
                n_a = min(len(idx), anchors.features.shape[0])
                a_idx = rng_anchor.choice(anchors.features.shape[0], size=n_a, replace=False)
                batch.anchor_x = anchors.features[a_idx]
                batch.anchor_y = anchors.labels[a_idx]
                if zbar is not None:
                    batch.mean_neighbor_logits = zbar[a_idx]
            loss, grads, comps = total_loss(model, batch)
            if not np.isfinite(loss):
                raise NumericError(
                    f"non-finite loss at round {round_t}, client {client.client_id}"
                )
            model = sgd_step(model, grads, cfg.lr)
            for k in ("ce", "reg", "kd"):
                sums[k] += comps[k]
            sums["total"] += loss
            steps += 1
    return model, {k: v / max(steps, 1) for k, v in sums.items()}


def run_round(
    clients: list[ClientState],
    topology: Topology,
    cfg: RunConfig,
    round_t: int,
    comm: CommLog,
) -> list[RoundMetrics]:
    """Execute one synchronous round and return per-client metrics."""
    n = len(clients)
    sampled = _sample_clients(cfg, n, round_t)
    sampled_set = set(sampled.tolist())
    algo = cfg.algorithm
    exchange_logits = algo in ("desa", "logit-only")
    use_anchors = algo in ("desa", "logit-only")

    # phase 1: sampled clients compute broadcasts from round-start snapshots
    if exchange_logits:
        def compute_z(i):
            c = clients[i]
            return forward(c.model, c.anchors.features).logits
        new_z = _map_clients(compute_z, list(sampled))
        for i, z in zip(sampled, new_z):
            clients[i].broadcast_logits = z
            clients[i].broadcast_round = round_t
            for j in topology.adjacency[i]:
                comm.record(round_t, "logits", int(i), j, z.size)

    # phase 2: sampled clients aggregate neighbor logits and train
    def train_one(i):
        c = clients[i]
        zbar = None
        if exchange_logits:
            neighbor_z = [
                clients[j].broadcast_logits
                for j in topology.adjacency[i]
                if clients[j].broadcast_logits is not None
            ]
            if neighbor_z:
                zbar = np.mean(neighbor_z, axis=0)
        return _train_locally(c, cfg, round_t, zbar, use_anchors)

    results = _map_clients(train_one, list(sampled))
    for i, (model, comps) in zip(sampled, results):
        clients[i].model = model

    # phase 3: fedavg parameter aggregation and redistribution
    if algo == "fedavg":
        weights = None
        if cfg.fedavg_size_weighted:
            weights = [clients[i].data.train.n for i in sampled]
        from .models import average_models
        avg = average_models([clients[i].model for i in sampled], weights)
        for i in sampled:
            for j in topology.adjacency[i]:
                comm.record(round_t, "params", int(i), j, avg.flat_params().size)
        for c in clients:
            c.model = avg.copy()
            comm.record(round_t, "params", -1, c.client_id, avg.flat_params().size)

    metrics = []
    comps_by_client = {int(i): comps for i, (_, comps) in zip(sampled, results)}
    for c in clients:
        comps = comps_by_client.get(c.client_id)
        metrics.append(RoundMetrics(
            round=round_t,
            client=c.client_id,
            sampled=c.client_id in sampled_set,
            ce=comps["ce"] if comps else float("nan"),
            reg=comps["reg"] if comps else float("nan"),
            kd=comps["kd"] if comps else float("nan"),
            total=comps["total"] if comps else float("nan"),
        ))
    return metrics


def build_clients(cfg: RunConfig, suite: list[ClientData]) -> list[ClientState]:
    cfg.validate()
    input_dim = suite[0].train.dim
    k = suite[0].train.num_classes
    clients = []
    for i, cd in enumerate(suite):
        arch_id = cfg.arch_ids[i % len(cfg.arch_ids)]
        spec = make_arch(arch_id, input_dim, k)
        model = init_model(spec, seed=int(np.random.default_rng([cfg.seed, 0x1A17, i]).integers(2**31)))
        lam_reg = cfg.lam_reg if cfg.algorithm in ("desa",) else 0.0
        lam_kd = cfg.lam_kd if cfg.algorithm in ("desa", "logit-only") else 0.0
        clients.append(ClientState(
            client_id=i, model=model, data=cd,
            lam_reg=lam_reg, lam_kd=lam_kd, tau=cfg.tau,
        ))
    if cfg.algorithm == "fedavg" and len({c.model.spec for c in clients}) != 1:
        raise ConfigError("fedavg requires homogeneous architectures")
    return clients


def make_topology(cfg: RunConfig, n: int) -> Topology:
    if cfg.topology == "full":
        return Topology.full(n)
    if cfg.topology == "ring":
        return Topology.ring(n)
    return Topology.random_k(n, cfg.topology_k, cfg.seed)


def run_experiment(
    cfg: RunConfig,
    suite: list[ClientData],
    client_anchors: list[AnchorSet] | None = None,
) -> ExperimentReport:
    """Run the configured algorithm end to end over the suite."""
    cfg.validate()
    clients = build_clients(cfg, suite)
    topology = make_topology(cfg, len(clients))
    comm = CommLog()
    needs_anchors = cfg.algorithm in ("desa", "logit-only")
    if needs_anchors:
        if client_anchors is None:
            raise ConfigError(f"algorithm {cfg.algorithm!r} requires anchor sets")
        init_phase(clients, topology, client_anchors, cfg.merge_mode, comm)
    if cfg.algorithm == "logit-only":
        # KD-only exchange: no anchor regularization, anchors excluded from CE
        cfg = RunConfig(**{**cfg.__dict__, "include_anchor_ce": False})
    metrics = []
    for t in range(cfg.rounds):
        metrics.extend(run_round(clients, topology, cfg, t, comm))
    if cfg.algorithm == "desa":
        allowed = {"anchors", "logits"}
        if not comm.kinds() <= allowed:
            raise NumericError(f"serverless audit failed: payload kinds {comm.kinds()}")
    return ExperimentReport(config=cfg, metrics=metrics, comm=comm, clients=clients)
