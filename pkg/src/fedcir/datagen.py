"""Synthetic feature-shifted federations.

One latent Gaussian-mixture labelling task is shared by every client; each
domain pushes the latent samples through its own invertible map
``x -> scale * (R x) + bias``. Labels never change, so the federation is a
pure covariate shift.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class ConfigError(ValueError):
    """Inconsistent or infeasible configuration."""


@dataclass(frozen=True)
class LatentTask:
    class_means: np.ndarray  # (C, d_x)
    noise: float
    seed: int

    def __post_init__(self):
        m = np.asarray(self.class_means, dtype=np.float64)
        object.__setattr__(self, "class_means", m)
        if m.ndim != 2 or m.shape[0] < 2:
            raise ConfigError("need at least two class means")
        d = np.linalg.norm(m[:, None, :] - m[None, :, :], axis=-1)
        if np.any(d[~np.eye(len(m), dtype=bool)] == 0):
            raise ConfigError("class means must be pairwise distinct")
        if self.noise < 0:
            raise ConfigError("noise scale must be nonnegative")

    @property
    def n_classes(self) -> int:
        return self.class_means.shape[0]

    @property
    def dim(self) -> int:
        return self.class_means.shape[1]

    @classmethod
    def random(cls, n_classes: int, dim: int, separation: float, noise: float, seed: int) -> "LatentTask":
        """Class means drawn on a sphere of radius ``separation``."""
        rng = np.random.default_rng([seed, 0xDA7A])
        means = rng.normal(size=(n_classes, dim))
        means *= separation / np.linalg.norm(means, axis=1, keepdims=True)
        return cls(means, noise, seed)

    def label_of(self, latent: np.ndarray) -> np.ndarray:
        """Nearest-class-mean labelling of latent points."""
        d = ((latent[:, None, :] - self.class_means[None]) ** 2).sum(-1)
        return d.argmin(axis=1)


def rotation_from_angles(dim: int, angles: Sequence[float]) -> np.ndarray:
    """Compose Givens rotations; ``angles[i]`` (radians) turns plane ``(i, i+1)``."""
    if len(angles) > max(dim - 1, 0):
        raise ConfigError(f"{len(angles)} angles given for dimension {dim}")
    r = np.eye(dim)
    for i, a in enumerate(angles):
        g = np.eye(dim)
        c, s = np.cos(a), np.sin(a)
        g[i, i], g[i, i + 1], g[i + 1, i], g[i + 1, i + 1] = c, -s, s, c
        r = g @ r
    return r


@dataclass(frozen=True)
class DomainSpec:
    rotation: np.ndarray
    scale: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        sc = np.asarray(self.scale, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "scale", sc)
        object.__setattr__(self, "bias", b)
        d = r.shape[0]
        if r.shape != (d, d) or sc.shape != (d,) or b.shape != (d,):
            raise ConfigError(f"domain spec shapes inconsistent: {r.shape}, {sc.shape}, {b.shape}")
        if np.abs(r.T @ r - np.eye(d)).max() > 1e-10:
            raise ConfigError("rotation is not orthogonal")
        if np.any(sc <= 0):
            raise ConfigError("scale coordinates must be positive")

    @property
    def dim(self) -> int:
        return self.rotation.shape[0]

    @classmethod
    def identity(cls, dim: int) -> "DomainSpec":
        return cls(np.eye(dim), np.ones(dim), np.zeros(dim))

    @classmethod
    def from_angles(cls, dim: int, angles: Sequence[float], scale=None, bias=None) -> "DomainSpec":
        return cls(
            rotation_from_angles(dim, angles),
            np.ones(dim) if scale is None else scale,
            np.zeros(dim) if bias is None else bias,
        )


def apply_domain_shift(spec: DomainSpec, x: np.ndarray) -> np.ndarray:
    """``scale * (R x) + bias`` for one sample or a batch of rows."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != spec.dim:
        raise ConfigError(f"sample dim {x.shape[-1]} does not match domain dim {spec.dim}")
    return (x @ spec.rotation.T) * spec.scale + spec.bias


def invert_domain_shift(spec: DomainSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return ((x - spec.bias) / spec.scale) @ spec.rotation


def make_base_dataset(task: LatentTask, n: int, rng: np.random.Generator | None = None):
    """Balanced latent samples ``class_mean[y] + noise``; returns (samples, labels)."""
    if n < task.n_classes:
        raise ConfigError(f"n={n} is smaller than the class count {task.n_classes}")
    if rng is None:
        rng = np.random.default_rng([task.seed, 0xBA5E])
    labels = np.arange(n) % task.n_classes
    labels = labels[rng.permutation(n)]
    noise = rng.normal(size=(n, task.dim)) * task.noise
    return task.class_means[labels] + noise, labels


def dirichlet_partition(labels, n_clients: int, beta: float, rng: np.random.Generator) -> list[np.ndarray]:
    """Split indices across clients with per-class Dirichlet(beta) proportions.

    Each class's indices are shuffled and cut according to a fresh Dirichlet
    draw. An empty client afterwards receives one index from the largest shard.
    """
    labels = np.asarray(labels)
    if beta <= 0:
        raise ConfigError("beta must be positive")
    if n_clients < 1:
        raise ConfigError("need at least one client")
    if len(labels) < n_clients:
        raise ConfigError(f"{len(labels)} samples cannot fill {n_clients} clients")
    shards: list[list[int]] = [[] for _ in range(n_clients)]
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        props = rng.dirichlet(np.full(n_clients, beta))
        cuts = (np.cumsum(props)[:-1] * len(idx)).astype(int)
        for k, part in enumerate(np.split(idx, cuts)):
            shards[k].extend(part.tolist())
    for k in range(n_clients):
        if not shards[k]:
            donor = max(range(n_clients), key=lambda j: (len(shards[j]), -j))
            shards[k].append(shards[donor].pop())
    return [np.array(sorted(s), dtype=np.int64) for s in shards]


@dataclass
class Shard:
    client: int
    x: np.ndarray
    y: np.ndarray
    weight: float = 0.0
    domain: int = 0

    def __len__(self) -> int:
        return len(self.y)


@dataclass
class Federation:
    shards: list[Shard]
    test_x: np.ndarray
    test_y: np.ndarray
    n_classes: int
    domains: list[DomainSpec] = field(default_factory=list)

    @property
    def in_dim(self) -> int:
        return self.test_x.shape[1]


def domain_specs(
    dim: int, n_domains: int, angle: float, bias: float, scale_spread: float, seed: int
) -> list[DomainSpec]:
    """Domain ``i`` rotates every plane by ``i * angle`` and shifts by a random bias of norm ``bias``.

    Domain 0 is the identity map.
    """
    rng = np.random.default_rng([seed, 0xD0])
    specs = []
    for i in range(n_domains):
        if i == 0:
            specs.append(DomainSpec.identity(dim))
            continue
        direction = rng.normal(size=dim)
        direction /= np.linalg.norm(direction)
        scale = np.exp(rng.uniform(-scale_spread, scale_spread, size=dim))
        specs.append(DomainSpec.from_angles(dim, [i * angle] * (dim - 1), scale, bias * direction))
    return specs


def build_federation(
    task: LatentTask,
    domains: Sequence[DomainSpec],
    n_per_domain: int,
    clients_per_domain: int = 1,
    beta: float | None = None,
    test_fraction: float = 0.2,
) -> Federation:
    """Generate every domain's data, hold out a mixed-domain test split, shard the rest.

    With ``clients_per_domain == 1`` each client owns one whole domain. Otherwise
    each domain is spread over its clients by :func:`dirichlet_partition` with
    concentration ``beta``.
    """
    if clients_per_domain > 1 and beta is None:
        raise ConfigError("dirichlet partition needs beta")
    rng = np.random.default_rng([task.seed, 0xFED])
    shards, test_x, test_y = [], [], []
    n_test = int(round(test_fraction * n_per_domain))
    for d, spec in enumerate(domains):
        x_lat, y = make_base_dataset(task, n_per_domain, rng)
        x = apply_domain_shift(spec, x_lat)
        perm = rng.permutation(n_per_domain)
        te, tr = perm[:n_test], perm[n_test:]
        test_x.append(x[te])
        test_y.append(y[te])
        x_tr, y_tr = x[tr], y[tr]
        if clients_per_domain == 1:
            parts = [np.arange(len(y_tr))]
        else:
            parts = dirichlet_partition(y_tr, clients_per_domain, beta, rng)
        for p in parts:
            shards.append(Shard(len(shards), x_tr[p], y_tr[p], domain=d))
    total = sum(len(s) for s in shards)
    for s in shards:
        s.weight = len(s) / total
    return Federation(shards, np.concatenate(test_x), np.concatenate(test_y), task.n_classes, list(domains))


# ---------------------------------------------------------------- dataset file

DATASET_MAGIC = b"FEDCIR-DATA 1\n"


def save_federation(path: str | Path, fed: Federation, comment: str | None = None) -> None:
    """Header (C, d_x, counts, domain specs) then row-major fp64 samples and int64 labels."""
    header = {
        "n_classes": fed.n_classes,
        "dim": fed.in_dim,
        "shards": [{"client": s.client, "domain": s.domain, "count": len(s), "weight": s.weight} for s in fed.shards],
        "test_count": len(fed.test_y),
        "domains": [
            {"rotation": d.rotation.tolist(), "scale": d.scale.tolist(), "bias": d.bias.tolist()} for d in fed.domains
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    if comment is not None:
        buf.write(f"# {comment}\n".encode())
    buf.write(DATASET_MAGIC)
    buf.write(len(blob).to_bytes(8, "little"))
    buf.write(blob)
    for s in list(fed.shards) + [Shard(-1, fed.test_x, fed.test_y)]:
        buf.write(np.ascontiguousarray(s.x, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(s.y, dtype="<i8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_federation(path: str | Path) -> Federation:
    raw = Path(path).read_bytes()
    pos = raw.index(b"\n") + 1 if raw.startswith(b"#") else 0
    if raw[pos : pos + len(DATASET_MAGIC)] != DATASET_MAGIC:
        raise ValueError(f"{path}: not a dataset file")
    pos += len(DATASET_MAGIC)
    n = int.from_bytes(raw[pos : pos + 8], "little")
    pos += 8
    h = json.loads(raw[pos : pos + n])
    pos += n
    dim = h["dim"]

    def take(count):
        nonlocal pos
        x = np.frombuffer(raw, dtype="<f8", count=count * dim, offset=pos).reshape(count, dim).astype(np.float64)
        pos += 8 * count * dim
        y = np.frombuffer(raw, dtype="<i8", count=count, offset=pos).astype(np.int64)
        pos += 8 * count
        return x, y

    shards = []
    for meta in h["shards"]:
        x, y = take(meta["count"])
        shards.append(Shard(meta["client"], x, y, meta["weight"], meta["domain"]))
    tx, ty = take(h["test_count"])
    domains = [DomainSpec(d["rotation"], d["scale"], d["bias"]) for d in h["domains"]]
    return Federation(shards, tx, ty, h["n_classes"], domains)
