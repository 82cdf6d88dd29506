"""Desk-scale multi-client data generation with controllable covariate shift
(per-client rotation + translation of a shared base distribution) and label
shift (Dirichlet partition of a pooled dataset), plus CSV IO.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kernel import Tensor, as_tensor


class DataError(ValueError):
    """Invalid dataset configuration or malformed dataset file."""


@dataclass
class Dataset:
    features: Tensor              # [N, D]
    labels: np.ndarray            # [N] ints in [0, K)
    num_classes: int
    split: str = "train"          # train | test
    client_id: int = -1
    domain: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = as_tensor(self.features)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.shape[0] != self.labels.shape[0]:
            raise DataError("features and labels disagree on N")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx: np.ndarray, split: str | None = None) -> "Dataset":
        return Dataset(
            features=self.features[idx],
            labels=self.labels[idx],
            num_classes=self.num_classes,
            split=split or self.split,
            client_id=self.client_id,
            domain=dict(self.domain),
        )


@dataclass
class ClientData:
    client_id: int
    train: Dataset
    test: Dataset


@dataclass
class SuiteConfig:
    n_clients: int = 3
    samples_per_client: int = 400
    num_classes: int = 4
    base: str = "gaussian-blobs"         # gaussian-blobs | two-arcs
    rotation_step_deg: float = 60.0
    translation: float = 0.0             # per-client shift along x, times client index
    dirichlet_beta: float | None = None
    feature_dim: int = 2
    blob_radius: float = 2.0
    blob_std: float = 0.45
    # class structure replicated in dims 2-3 (outside the rotated plane);
    # 0 disables it, requires feature_dim >= 4
    invariant_radius: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.n_clients < 2:
            raise DataError("n_clients must be >= 2")
        if self.samples_per_client <= 0:
            raise DataError("samples_per_client must be positive")
        if self.num_classes < 2:
            raise DataError("num_classes must be >= 2")
        if self.base not in ("gaussian-blobs", "two-arcs"):
            raise DataError(f"unknown base distribution {self.base!r}")
        if self.base == "two-arcs" and self.num_classes != 2:
            raise DataError("two-arcs base requires num_classes == 2")
        if self.dirichlet_beta is not None and self.dirichlet_beta <= 0:
            raise DataError("dirichlet_beta must be positive")
        if self.feature_dim < 2:
            raise DataError("feature_dim must be >= 2")
        if self.invariant_radius > 0 and self.feature_dim < 4:
            raise DataError("invariant_radius requires feature_dim >= 4")


def _rotation_matrix(deg: float) -> np.ndarray:
    t = np.deg2rad(deg)
    return np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])


def _sample_base(cfg: SuiteConfig, labels: np.ndarray, rng: np.random.Generator) -> Tensor:
    n = labels.size
    x = rng.normal(0.0, cfg.blob_std, size=(n, cfg.feature_dim))
    if cfg.base == "gaussian-blobs":
        angles = 2.0 * np.pi * labels / cfg.num_classes
        x[:, 0] += cfg.blob_radius * np.cos(angles)
        x[:, 1] += cfg.blob_radius * np.sin(angles)
        if cfg.invariant_radius > 0:
            x[:, 2] += cfg.invariant_radius * np.cos(angles)
            x[:, 3] += cfg.invariant_radius * np.sin(angles)
    else:  # two interleaved arcs
        t = rng.uniform(0.0, np.pi, size=n)
        arc_x = np.where(labels == 0, np.cos(t), 1.0 - np.cos(t))
        arc_y = np.where(labels == 0, np.sin(t), 0.5 - np.sin(t))
        x[:, 0] += cfg.blob_radius * arc_x
        x[:, 1] += cfg.blob_radius * arc_y
    return x


def apply_domain_transform(x: Tensor, rotation_deg: float, translation: float) -> Tensor:
    """Rotate the first two feature dims and translate along the first."""
    out = x.copy()
    out[:, :2] = out[:, :2] @ _rotation_matrix(rotation_deg).T
    out[:, 0] += translation
    return out


def generate_suite(cfg: SuiteConfig) -> list[ClientData]:
    """One domain-shifted client dataset per client, 80/20 train/test."""
    cfg.validate()
    clients = []
    for i in range(cfg.n_clients):
        rng = np.random.default_rng([cfg.seed, 0xDA7A, i])
        n = cfg.samples_per_client
        if cfg.dirichlet_beta is not None:
            props = rng.dirichlet(np.full(cfg.num_classes, cfg.dirichlet_beta))
            labels = rng.choice(cfg.num_classes, size=n, p=props)
        else:
            labels = rng.integers(0, cfg.num_classes, size=n)
        x = _sample_base(cfg, labels, rng)
        rot = i * cfg.rotation_step_deg
        shift = i * cfg.translation
        x = apply_domain_transform(x, rot, shift)
        domain = {"rotation_deg": rot, "translation": shift, "base": cfg.base}
        n_train = int(round(0.8 * n))
        perm = rng.permutation(n)
        tr, te = perm[:n_train], perm[n_train:]
        make = lambda idx, split: Dataset(
            x[idx], labels[idx], cfg.num_classes, split=split, client_id=i, domain=domain
        )
        clients.append(ClientData(i, make(tr, "train"), make(te, "test")))
    return clients


def dirichlet_partition(
    pool: Dataset, n_parts: int, beta: float, seed: int
) -> list[Dataset]:
    """Split a pooled dataset into n_parts with Dirichlet(beta) class skew.

    Parts are disjoint and their union is the pool.
    """
    if n_parts == 1:
        return [pool]
    if n_parts < 1:
        raise DataError("n_parts must be >= 1")
    if beta <= 0:
        raise DataError("beta must be positive")
    if pool.n < n_parts:
        raise DataError("pool too small for requested number of parts")
    rng = np.random.default_rng([seed, 0xD161])
    assignments = [[] for _ in range(n_parts)]
    for c in range(pool.num_classes):
        idx = np.flatnonzero(pool.labels == c)
        if idx.size == 0:
            continue
        idx = rng.permutation(idx)
        props = rng.dirichlet(np.full(n_parts, beta))
        counts = np.floor(props * idx.size).astype(int)
        # hand out the remainder to the largest-proportion parts
        for j in np.argsort(-props)[: idx.size - counts.sum()]:
            counts[j] += 1
        start = 0
        for j in range(n_parts):
            assignments[j].extend(idx[start : start + counts[j]])
            start += counts[j]
    # guarantee every part holds at least one sample
    sizes = [len(a) for a in assignments]
    for j, size in enumerate(sizes):
        if size == 0:
            donor = int(np.argmax([len(a) for a in assignments]))
            if len(assignments[donor]) <= 1:
                raise DataError("pool too small to give every part a sample")
            assignments[j].append(assignments[donor].pop())
    parts = []
    for j, a in enumerate(assignments):
        idx = np.array(sorted(a), dtype=np.int64)
        part = pool.subset(idx)
        part.client_id = j
        parts.append(part)
    return parts


# --- CSV IO: header f0..f{D-1},label; values printed with 17 significant digits

def save_dataset(ds: Dataset, path: str | Path) -> None:
    path = Path(path)
    with open(path, "w") as fh:
        fh.write(",".join(f"f{i}" for i in range(ds.dim)) + ",label\n")
        for row, label in zip(ds.features, ds.labels):
            fh.write(",".join(f"{v:.17g}" for v in row) + f",{label}\n")


def load_dataset(path: str | Path, num_classes: int, **meta) -> Dataset:
    path = Path(path)
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as e:
        raise DataError(f"{path}: {e}") from e
    if not lines:
        raise DataError(f"{path}: empty file (line 1)")
    header = lines[0].split(",")
    if header[-1] != "label" or not all(h == f"f{i}" for i, h in enumerate(header[:-1])):
        raise DataError(f"{path}: malformed header (line 1)")
    dim = len(header) - 1
    feats, labels = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != dim + 1:
            raise DataError(f"{path}: expected {dim + 1} columns (line {lineno})")
        try:
            feats.append([float(c) for c in cells[:-1]])
            labels.append(int(cells[-1]))
        except ValueError as e:
            raise DataError(f"{path}: {e} (line {lineno})") from e
        if not (0 <= labels[-1] < num_classes):
            raise DataError(f"{path}: label {labels[-1]} out of range (line {lineno})")
    if not feats:
        raise DataError(f"{path}: no data rows (line 1)")
    return Dataset(np.array(feats), np.array(labels), num_classes, **meta)


def save_suite(clients: list[ClientData], out_dir: str | Path, extra_manifest: dict | None = None) -> Path:
    """Write per-client train/test CSVs plus a JSON manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"num_classes": clients[0].train.num_classes, "clients": []}
    if extra_manifest:
        manifest.update(extra_manifest)
    for c in clients:
        entry = {"client_id": c.client_id, "domain": c.train.domain, "files": {}}
        for split, ds in (("train", c.train), ("test", c.test)):
            name = f"client_{c.client_id}_{split}.csv"
            save_dataset(ds, out_dir / name)
            entry["files"][split] = name
        manifest["clients"].append(entry)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out_dir / "manifest.json"


def load_suite(suite_dir: str | Path) -> tuple[list[ClientData], dict]:
    suite_dir = Path(suite_dir)
    manifest = json.loads((suite_dir / "manifest.json").read_text())
    k = manifest["num_classes"]
    clients = []
    for entry in manifest["clients"]:
        cid = entry["client_id"]
        splits = {}
        for split in ("train", "test"):
            splits[split] = load_dataset(
                suite_dir / entry["files"][split], k,
                split=split, client_id=cid, domain=entry["domain"],
            )
        clients.append(ClientData(cid, splits["train"], splits["test"]))
    return clients, manifest
