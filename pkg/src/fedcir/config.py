"""Experiment configuration: flat ``section.key = value`` text with canonical round-trip.

Lines are ``key = value``; ``#`` starts a comment; blank lines are ignored.
Unknown keys, duplicate keys, and malformed values are rejected with the
offending line number. An empty file yields the default experiment.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .datagen import ConfigError, DomainSpec, LatentTask, build_federation, domain_specs, Federation
from .fedproto import VARIANTS, FedConfig

PARTITIONS = ("feature-shift", "dirichlet")


@dataclass(frozen=True)
class TaskConfig:
    n_classes: int = 10
    dim: int = 16
    separation: float = 4.0
    noise: float = 1.0


@dataclass(frozen=True)
class DomainConfig:
    count: int = 4
    angle: float = 1.0
    bias: float = 8.0
    scale_spread: float = 0.7


@dataclass(frozen=True)
class DataConfig:
    n_per_domain: int = 800
    partition: str = "feature-shift"
    clients_per_domain: int = 1
    beta: float = 0.5
    test_fraction: float = 0.2


@dataclass(frozen=True)
class RunConfig:
    variants: tuple[str, ...] = ("fedavg", "fedcir")
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    out: str = "out"


# training defaults for the synthetic benchmark; optimiser values match the usual
# federated setting, the latent sizes are scaled to the synthetic task
FED_DEFAULTS = dict(gen_lr=0.1, z_dim=2, noise_dim=2, hidden=16, lambda_align=5e-5)


@dataclass(frozen=True)
class ExperimentSpec:
    fed: FedConfig = field(default_factory=lambda: FedConfig(**FED_DEFAULTS))
    task: TaskConfig = field(default_factory=TaskConfig)
    domains: DomainConfig = field(default_factory=DomainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def __post_init__(self):
        validate(self)

    def fed_config(self, variant: str, seed: int) -> FedConfig:
        return replace(self.fed, variant=variant, seed=seed)

    def latent_task(self, seed: int) -> LatentTask:
        t = self.task
        return LatentTask.random(t.n_classes, t.dim, t.separation, t.noise, seed)

    def domain_list(self, seed: int) -> list[DomainSpec]:
        d = self.domains
        return domain_specs(self.task.dim, d.count, d.angle, d.bias, d.scale_spread, seed)

    def federation(self, seed: int) -> Federation:
        """The federation for one seed; data and training share the seed."""
        d = self.data
        cpd = 1 if d.partition == "feature-shift" else d.clients_per_domain
        beta = None if d.partition == "feature-shift" else d.beta
        return build_federation(self.latent_task(seed), self.domain_list(seed), d.n_per_domain, cpd, beta, d.test_fraction)

    def digest(self) -> str:
        """Hash of everything that determines a single training run (the run section is excluded)."""
        body = "".join(ln + "\n" for ln in format_config(self).splitlines() if not ln.startswith("run."))
        return hashlib.sha256(body.encode()).hexdigest()[:16]


# fed.variant and fed.seed are per-run and come from the run section
_SECTIONS = {"fed": FedConfig, "task": TaskConfig, "domains": DomainConfig, "data": DataConfig, "run": RunConfig}
_SKIP = {("fed", "variant"), ("fed", "seed")}


def _keys():
    for sec, cls in _SECTIONS.items():
        for f in fields(cls):
            if (sec, f.name) not in _SKIP:
                yield sec, f


def validate(spec: ExperimentSpec) -> None:
    t, dm, d, r = spec.task, spec.domains, spec.data, spec.run
    if t.n_classes < 2 or t.dim < 2:
        raise ConfigError("task.n_classes and task.dim must be >= 2")
    if t.separation <= 0 or t.noise < 0:
        raise ConfigError("task.separation must be > 0 and task.noise >= 0")
    if dm.count < 1 or dm.bias < 0 or dm.scale_spread < 0:
        raise ConfigError("domains.count >= 1, domains.bias >= 0, domains.scale_spread >= 0 required")
    if d.partition not in PARTITIONS:
        raise ConfigError(f"data.partition must be one of {PARTITIONS}")
    if d.clients_per_domain < 1 or d.beta <= 0:
        raise ConfigError("data.clients_per_domain >= 1 and data.beta > 0 required")
    if not 0 < d.test_fraction < 1:
        raise ConfigError("data.test_fraction must be in (0, 1)")
    if d.n_per_domain * (1 - d.test_fraction) < max(t.n_classes, d.clients_per_domain):
        raise ConfigError("data.n_per_domain too small for the class and client counts")
    if not r.seeds:
        raise ConfigError("run.seeds must be nonempty")
    if not r.variants or any(v not in VARIANTS for v in r.variants):
        raise ConfigError(f"run.variants must be a nonempty subset of {VARIANTS}")
    if len(set(r.seeds)) != len(r.seeds) or len(set(r.variants)) != len(r.variants):
        raise ConfigError("run.seeds and run.variants must not repeat")


def _parse_value(raw: str, f, where: str):
    kind = f.type if isinstance(f.type, str) else f.type.__name__
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "str":
            return raw
        if kind == "tuple[int, ...]":
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if kind == "tuple[str, ...]":
            return tuple(v.strip() for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {kind}") from None
    raise AssertionError(kind)


def parse_config_text(text: str, source: str = "<config>") -> ExperimentSpec:
    known = {f"{sec}.{f.name}": (sec, f) for sec, f in _keys()}
    values: dict[str, dict] = {sec: {} for sec in _SECTIONS}
    seen: dict[str, int] = {}
    for n, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        where = f"{source}:{n}"
        if "=" not in body:
            raise ConfigError(f"{where}: expected 'key = value'")
        key, raw = (s.strip() for s in body.split("=", 1))
        if key not in known:
            raise ConfigError(f"{where}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{where}: duplicate key {key!r}")
        seen[key] = n
        sec, f = known[key]
        values[sec][f.name] = _parse_value(raw, f, where)
    try:
        fed = {**FED_DEFAULTS, **values.pop("fed")}
        parts = {sec: _SECTIONS[sec](**kw) for sec, kw in values.items()}
        return ExperimentSpec(fed=FedConfig(**fed), **parts)
    except ConfigError as e:
        # point at the line of the first key named in the message
        msg = str(e)
        for key, n in seen.items():
            if key in msg or key.split(".", 1)[1] in msg:
                raise ConfigError(f"{source}:{n}: {msg}") from None
        raise ConfigError(f"{source}: {msg}") from None


def parse_config(path: str | Path) -> ExperimentSpec:
    """Raises ``OSError`` for unreadable files and ``ConfigError`` for bad content."""
    p = Path(path)
    return parse_config_text(p.read_text(), str(p))


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_config(spec: ExperimentSpec) -> str:
    """Canonical text: every key, sorted by section then declaration order."""
    lines = []
    for sec, f in _keys():
        lines.append(f"{sec}.{f.name} = {_fmt(getattr(getattr(spec, sec), f.name))}")
    return "\n".join(lines) + "\n"
