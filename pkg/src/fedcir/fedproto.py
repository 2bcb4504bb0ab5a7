"""Federated training loop: FedAvg, FedProx, FedReg, FedAlign and FedCiR.

One round:

1. sample the active clients;
2. broadcast the global model, the generator and the class Gaussian table;
3. every active client runs ``E`` local SGD steps on its variant's objective;
4. the server trains the generator on the uploaded classifiers' ensemble,
   refreshes the class table from generator samples, and averages the
   uploaded models.

All randomness is drawn from streams keyed by ``(seed, purpose, round, client)``
so results do not depend on execution order.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import numerics as nx
from .datagen import ConfigError, Federation, Shard
from .diagnostics import local_risk
from .models import (
    ClassGaussianTable,
    ClassifierParams,
    DataError,
    GeneratorParams,
    ModelParams,
    classify,
    encode,
    fit_class_gaussians,
    generate,
    kl_diag_gaussian,
    reparameterize,
)
from .numerics import DimensionError, GradTape, Tensor

VARIANTS = ("fedavg", "fedprox", "fedreg", "fedalign", "fedcir")
GENERATOR_VARIANTS = ("fedreg", "fedalign", "fedcir")

# rng purposes
_INIT, _GEN_INIT, _SAMPLE, _BATCH, _REPARAM, _GEN_BATCH, _SERVER_GEN, _TABLE, _RISK = range(1, 10)

BYTES_PER_PARAM = 8


class StateError(RuntimeError):
    """Operation called on a state that cannot support it."""


@dataclass(frozen=True)
class FedConfig:
    rounds: int = 100
    local_steps: int = 20
    gen_steps: int = 5
    batch_size: int = 32
    lr: float = 0.01
    gen_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lambda_reg: float = 0.5
    lambda_align: float = 1e-6
    prox_mu: float = 0.1
    active_ratio: float = 1.0
    variant: str = "fedcir"
    seed: int = 0
    table_samples: int = 256
    z_dim: int = 8
    noise_dim: int = 8
    hidden: int = 32
    gen_hidden: int = 32
    scale_bias: float = 0.0

    def __post_init__(self):
        for name in ("rounds", "local_steps", "batch_size", "table_samples", "z_dim", "noise_dim", "gen_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.gen_steps < 0 or self.hidden < 0:
            raise ConfigError("gen_steps and hidden must be >= 0")
        if self.lr <= 0 or self.gen_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        for name in ("weight_decay", "lambda_reg", "lambda_align", "prox_mu"):
            if getattr(self, name) < 0 or not math.isfinite(getattr(self, name)):
                raise ConfigError(f"{name} must be finite and >= 0")
        if not 0 < self.active_ratio <= 1:
            raise ConfigError("active_ratio must be in (0, 1]")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")

    @property
    def reg_weight(self) -> float:
        return self.lambda_reg if self.variant in ("fedreg", "fedcir") else 0.0

    @property
    def align_weight(self) -> float:
        return self.lambda_align if self.variant in ("fedalign", "fedcir") else 0.0

    @property
    def prox_weight(self) -> float:
        return self.prox_mu if self.variant == "fedprox" else 0.0

    @property
    def uses_generator(self) -> bool:
        return self.variant in GENERATOR_VARIANTS


@dataclass
class ServerState:
    model: ModelParams
    generator: GeneratorParams | None
    table: ClassGaussianTable | None
    round: int = 0
    seed: int = 0


@dataclass
class ClientState:
    shard: Shard
    model: ModelParams | None = None

    @property
    def client(self) -> int:
        return self.shard.client

    @property
    def weight(self) -> float:
        return self.shard.weight


@dataclass
class RoundMetrics:
    round: int
    variant: str
    seed: int
    test_acc: float
    mean_local_risk: float
    mean_train_loss: float
    bytes_up: int
    bytes_down: int
    flops: int
    client_losses: dict[int, float] = field(default_factory=dict)
    warmup: bool = False

    CSV_FIELDS = (
        "round", "variant", "seed", "test_acc", "mean_local_risk",
        "mean_train_loss", "bytes_up", "bytes_down", "flops",
    )

    def csv_row(self) -> list[str]:
        out = []
        for name in self.CSV_FIELDS:
            v = getattr(self, name)
            out.append(f"{v:.17g}" if isinstance(v, float) else str(v))
        return out


def rng_for(seed: int, purpose: int, *ids: int) -> np.random.Generator:
    return np.random.default_rng([seed, purpose, *ids])


# ---------------------------------------------------------------- client side


def sample_clients(clients: Sequence[int], ratio: float, rng: np.random.Generator) -> list[int]:
    """``max(1, floor(ratio * n))`` ids, uniformly without replacement, sorted."""
    if len(clients) == 0:
        raise ConfigError("no clients to sample from")
    if not 0 < ratio <= 1:
        raise ConfigError("ratio must be in (0, 1]")
    ids = sorted(clients)
    m = max(1, math.floor(ratio * len(ids)))
    if m == len(ids):
        return ids
    pick = rng.choice(len(ids), size=m, replace=False)
    return sorted(ids[i] for i in pick)


def fedcir_local_loss(
    model: ModelParams,
    generator: GeneratorParams | None,
    table: ClassGaussianTable | None,
    batch: tuple[np.ndarray, np.ndarray, np.ndarray],
    gen_batch: tuple[np.ndarray, np.ndarray] | None,
    lambda_reg: float,
    lambda_align: float,
) -> Tensor:
    """Mini-batch FedCiR objective; records onto the active tape.

    ``batch`` is ``(x, y, eps)`` with one reparameterisation draw per datum;
    ``gen_batch`` is ``(labels, noise)`` for the generator. Terms with a zero
    weight are not evaluated at all, so the function reduces exactly to the
    plain cross-entropy objective.
    """
    x, y, eps = batch
    mu, sigma = encode(model.encoder, x)
    z = reparameterize(mu, sigma, eps)
    loss = nx.mean_all(nx.cross_entropy(classify(model.classifier, z), y))
    if lambda_reg > 0:
        if generator is None or gen_batch is None:
            raise StateError("lambda_reg > 0 needs a generator and a generator batch")
        gy, geps = gen_batch
        zg = generate(generator, gy, geps).value  # generator is frozen on clients
        reg = nx.mean_all(nx.cross_entropy(classify(model.classifier, zg), gy))
        loss = nx.add(loss, nx.mul(reg, lambda_reg))
    if lambda_align > 0:
        if table is None:
            raise StateError("lambda_align > 0 needs a populated class table")
        kl = kl_diag_gaussian(mu, sigma, table.mu[y], table.sigma[y])
        loss = nx.add(loss, nx.mul(nx.mean_all(kl), lambda_align))
    return loss


def sgd_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    buffers: list[np.ndarray | None],
    lr: float,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
) -> list[np.ndarray]:
    """Heavy-ball SGD with L2 weight decay; ``buffers`` is updated in place."""
    out = []
    for i, (w, g) in enumerate(zip(params, grads)):
        d = g + weight_decay * w if weight_decay else g
        if momentum:
            buf = d if buffers[i] is None else momentum * buffers[i] + d
            buffers[i] = buf
            d = buf
        out.append(w - lr * d)
    return out


@dataclass
class LocalResult:
    model: ModelParams
    mean_loss: float
    mults: int


def local_update(
    shard: Shard,
    global_model: ModelParams,
    generator: GeneratorParams | None,
    table: ClassGaussianTable | None,
    config: FedConfig,
    round_idx: int,
    warmup: bool = False,
) -> LocalResult:
    """``config.local_steps`` SGD steps on the client's variant objective."""
    if len(shard) == 0:
        raise DataError(f"client {shard.client} has an empty shard")
    lam_reg = 0.0 if warmup else config.reg_weight
    lam_align = 0.0 if warmup else config.align_weight
    prox = config.prox_weight
    anchor = [t.value for t in global_model.tensors()]
    n_classes = global_model.classifier.n_classes

    r_batch = rng_for(config.seed, _BATCH, round_idx, shard.client)
    r_eps = rng_for(config.seed, _REPARAM, round_idx, shard.client)
    r_gen = rng_for(config.seed, _GEN_BATCH, round_idx, shard.client)

    model = global_model
    buffers: list[np.ndarray | None] = [None] * len(anchor)
    n = len(shard)
    b = min(config.batch_size, n)
    losses, mults = [], 0
    for _ in range(config.local_steps):
        idx = r_batch.choice(n, size=b, replace=False)
        eps = r_eps.standard_normal((b, config.z_dim))
        gen_batch = None
        if lam_reg > 0:
            gen_batch = (r_gen.integers(0, n_classes, config.batch_size),
                         r_gen.standard_normal((config.batch_size, config.noise_dim)))
        params = model.tensors()
        with GradTape() as tape:
            tape.watch(*params)
            loss = fedcir_local_loss(
                model, generator, table, (shard.x[idx], shard.y[idx], eps), gen_batch, lam_reg, lam_align
            )
            if prox > 0:
                dist = [nx.sum_all(nx.square(nx.sub(p, a))) for p, a in zip(params, anchor)]
                total = dist[0]
                for d in dist[1:]:
                    total = nx.add(total, d)
                loss = nx.add(loss, nx.mul(total, prox / 2.0))
        grads = tape.gradient(loss, params)
        grads = [np.zeros(p.shape) if g is None else g for p, g in zip(params, grads)]
        new = sgd_step([p.value for p in params], grads, buffers, config.lr, config.momentum, config.weight_decay)
        model = model.replace_tensors(new)
        losses.append(float(loss.value))
        mults += tape.mults
    return LocalResult(model, float(np.mean(losses)), mults)


# ---------------------------------------------------------------- server side


def aggregate(models: Mapping[int, ModelParams] | Sequence[ModelParams]) -> ModelParams:
    """Unweighted elementwise mean, summed in ascending client-id order.

    Computed as ``first + sum(m - first) / n`` so that averaging identical
    models returns them bit-for-bit.
    """
    if isinstance(models, Mapping):
        ordered = [models[k] for k in sorted(models)]
    else:
        ordered = list(models)
    if not ordered:
        raise ConfigError("nothing to aggregate")
    first = ordered[0]
    base = [t.value for t in first.tensors()]
    acc = [np.zeros_like(b) for b in base]
    for m in ordered[1:]:
        ts = m.tensors()
        if len(ts) != len(acc):
            raise DimensionError("models have different parameter counts")
        for i, t in enumerate(ts):
            if t.shape != acc[i].shape:
                raise DimensionError(f"parameter {i}: shape {t.shape} vs {acc[i].shape}")
            acc[i] += t.value - base[i]
    n = len(ordered)
    return first.replace_tensors([b + a / n for b, a in zip(base, acc)])


def ensemble_probs(classifiers: Sequence[ClassifierParams], z, weights: Sequence[float] | None = None) -> Tensor:
    """Probability-space mixture of the classifiers' predictions."""
    probs = [classify(c, z) for c in classifiers]
    if weights is None:
        return nx.mean_stack(probs)
    w = np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    out = nx.mul(probs[0], w[0])
    for p, wk in zip(probs[1:], w[1:]):
        out = nx.add(out, nx.mul(p, wk))
    return out


def generator_loss(generator: GeneratorParams, classifiers, labels, noise, weights=None) -> Tensor:
    z = generate(generator, labels, noise)
    return nx.mean_all(nx.cross_entropy(ensemble_probs(classifiers, z, weights), labels))


def train_generator(
    classifiers: Sequence[ClassifierParams],
    generator: GeneratorParams,
    config: FedConfig,
    rng: np.random.Generator,
    weights: Sequence[float] | None = None,
) -> GeneratorParams:
    """``config.gen_steps`` plain-SGD steps on the ensemble consensus loss.

    Classifiers are read, never watched, so they cannot change.
    """
    if not classifiers:
        raise StateError("train_generator needs at least one classifier")
    gen = generator
    for _ in range(config.gen_steps):
        labels = rng.integers(0, generator.n_classes, config.batch_size)
        noise = rng.standard_normal((config.batch_size, generator.noise_dim))
        params = gen.tensors()
        with GradTape() as tape:
            tape.watch(*params)
            loss = generator_loss(gen, classifiers, labels, noise, weights)
        grads = tape.gradient(loss, params)
        gen = gen.replace_tensors(
            [p.value if g is None else p.value - config.gen_lr * g for p, g in zip(params, grads)]
        )
    return gen


def refresh_class_table(generator: GeneratorParams, config: FedConfig, rng: np.random.Generator) -> ClassGaussianTable:
    """MLE Gaussian per class from ``config.table_samples`` generator draws."""
    groups = []
    m = config.table_samples
    for y in range(generator.n_classes):
        noise = rng.standard_normal((m, generator.noise_dim))
        groups.append(generate(generator, np.full(m, y), noise).value)
    return fit_class_gaussians(groups)


# ---------------------------------------------------------------- evaluation


def predict(model: ModelParams, x: np.ndarray) -> np.ndarray:
    """Class predictions from the mean representation."""
    mu, _ = encode(model.encoder, x)
    return classify(model.classifier, mu).value.argmax(axis=1)


def accuracy(model: ModelParams, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(predict(model, x) == y))


# ---------------------------------------------------------------- rounds


def init_server(fed: Federation, config: FedConfig) -> ServerState:
    hidden = (config.hidden,) if config.hidden else ()
    model = ModelParams.init(
        rng_for(config.seed, _INIT), fed.in_dim, fed.n_classes, config.z_dim, hidden, config.scale_bias
    )
    gen = None
    if config.uses_generator:
        gen = GeneratorParams.init(
            rng_for(config.seed, _GEN_INIT), fed.n_classes, config.noise_dim, config.z_dim, config.gen_hidden
        )
    return ServerState(model, gen, None, 0, config.seed)


def _download_size(server: ServerState, config: FedConfig) -> int:
    n = server.model.num_params()
    if config.reg_weight > 0 and server.generator is not None:
        n += server.generator.num_params()
    if config.align_weight > 0 and server.table is not None:
        n += server.table.num_params()
    return n * BYTES_PER_PARAM


def run_round(
    server: ServerState,
    clients: Sequence[ClientState],
    fed: Federation,
    config: FedConfig,
    previous: RoundMetrics | None = None,
    map_fn: Callable = map,
) -> tuple[ServerState, RoundMetrics]:
    """One iteration of the protocol. ``map_fn`` may run local updates in parallel."""
    t = server.round + 1
    by_id = {c.client: c for c in clients}
    active = sample_clients(list(by_id), config.active_ratio, rng_for(config.seed, _SAMPLE, t))
    warmup = config.uses_generator and server.table is None
    down = _download_size(server, config) * len(active)

    def work(cid: int) -> LocalResult:
        return local_update(by_id[cid].shard, server.model, server.generator, server.table, config, t, warmup)

    results = dict(zip(active, map_fn(work, active)))
    for cid, res in results.items():
        by_id[cid].model = res.model
    up = server.model.num_params() * BYTES_PER_PARAM * len(active)

    gen, table = server.generator, server.table
    if config.uses_generator:
        r_srv = rng_for(config.seed, _SERVER_GEN, t)
        gen = train_generator([results[c].model.classifier for c in active], gen, config, r_srv)
        table = refresh_class_table(gen, config, rng_for(config.seed, _TABLE, t))
    model = aggregate({c: results[c].model for c in active})

    risks = [local_risk(model, c.shard, rng_for(config.seed, _RISK, t, c.client)) for c in clients]
    metrics = RoundMetrics(
        round=t,
        variant=config.variant,
        seed=config.seed,
        test_acc=accuracy(model, fed.test_x, fed.test_y),
        mean_local_risk=float(np.mean(risks)),
        mean_train_loss=float(np.mean([results[c].mean_loss for c in active])),
        bytes_up=(previous.bytes_up if previous else 0) + up,
        bytes_down=(previous.bytes_down if previous else 0) + down,
        flops=(previous.flops if previous else 0) + sum(r.mults for r in results.values()),
        client_losses={c: results[c].mean_loss for c in active},
        warmup=warmup,
    )
    return ServerState(model, gen, table, t, server.seed), metrics


def run_federated(
    fed: Federation,
    config: FedConfig,
    on_round: Callable[[RoundMetrics], None] | None = None,
) -> tuple[ServerState, list[RoundMetrics]]:
    server = init_server(fed, config)
    clients = [ClientState(s) for s in fed.shards]
    history: list[RoundMetrics] = []
    for _ in range(config.rounds):
        server, m = run_round(server, clients, fed, config, history[-1] if history else None)
        history.append(m)
        if on_round is not None:
            on_round(m)
    return server, history


def write_metrics_csv(path: str | Path, rows: Iterable[RoundMetrics], comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if comment is not None:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RoundMetrics.CSV_FIELDS)
        for r in rows:
            w.writerow(r.csv_row())


def read_metrics_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))
