"""Self-check suite: gradient checks, KL integration, bound sweeps, reduction identities."""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
from scipy import integrate

from . import diagnostics as dg
from . import numerics as nx
from .datagen import LatentTask, build_federation, domain_specs
from .fedproto import FedConfig, RoundMetrics, fedcir_local_loss, generator_loss, run_federated
from .models import (
    ClassGaussianTable,
    ClassifierParams,
    GeneratorParams,
    ModelParams,
    classify,
    encode,
    generate,
    kl_diag_gaussian,
)
from .numerics import Tensor


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str
    seconds: float = 0.0


def _flat(tensors) -> tuple[np.ndarray, list[tuple[int, ...]]]:
    shapes = [t.shape for t in tensors]
    return np.concatenate([t.value.ravel() for t in tensors]), shapes


def _split(vec: Tensor, shapes) -> list[Tensor]:
    """Cut a flat tracked vector into tensors of the given shapes, staying on the tape."""
    out, pos = [], 0
    for s in shapes:
        n = int(np.prod(s))
        out.append(nx.segment(vec, pos, pos + n, s))
        pos += n
    return out


def _tiny_problem(rng: np.random.Generator, n_classes=3, in_dim=3, z_dim=2, hidden=(4,), batch=5, noise_dim=2):
    model = ModelParams.init(rng, in_dim, n_classes, z_dim, hidden, 0.0)
    gen = GeneratorParams.init(rng, n_classes, noise_dim, z_dim, 4)
    table = ClassGaussianTable(rng.normal(size=(n_classes, z_dim)), np.exp(rng.normal(size=(n_classes, z_dim)) * 0.3))
    x = rng.normal(size=(batch, in_dim))
    y = np.arange(batch) % n_classes
    eps = rng.normal(size=(batch, z_dim))
    gy = rng.integers(0, n_classes, batch)
    geps = rng.normal(size=(batch, noise_dim))
    return model, gen, table, (x, y, eps), (gy, geps)


def training_losses(rng: np.random.Generator) -> dict[str, tuple[Callable[[Tensor], Tensor], np.ndarray]]:
    """Every objective minimised during training, as a function of one flat parameter vector."""
    model, gen, table, batch, gen_batch = _tiny_problem(rng)
    m0, m_shapes = _flat(model.tensors())
    g0, g_shapes = _flat(gen.tensors())
    anchor = [a + 0.1 * rng.normal(size=a.shape) for a in model.to_arrays().values()]
    clfs = [ClassifierParams.init(rng, model.encoder.z_dim, model.classifier.n_classes) for _ in range(3)]

    def local(lam_reg, lam_align):
        def f(v):
            return fedcir_local_loss(model.replace_tensors(_split(v, m_shapes)), gen, table, batch, gen_batch,
                                     lam_reg, lam_align)
        return f

    def prox(v):
        ps = _split(v, m_shapes)
        total = nx.sum_all(nx.square(nx.sub(ps[0], anchor[0])))
        for p, a in zip(ps[1:], anchor[1:]):
            total = nx.add(total, nx.sum_all(nx.square(nx.sub(p, a))))
        return nx.add(fedcir_local_loss(model.replace_tensors(ps), None, None, batch, None, 0.0, 0.0),
                      nx.mul(total, 0.05))

    def reg_term(v):
        m = model.replace_tensors(_split(v, m_shapes))
        zg = generate(gen, gen_batch[0], gen_batch[1]).value
        return nx.mean_all(nx.cross_entropy(classify(m.classifier, zg), gen_batch[0]))

    def align_term(v):
        m = model.replace_tensors(_split(v, m_shapes))
        mu, sigma = encode(m.encoder, batch[0])
        return nx.mean_all(kl_diag_gaussian(mu, sigma, table.mu[batch[1]], table.sigma[batch[1]]))

    def gen_loss(v):
        return generator_loss(gen.replace_tensors(_split(v, g_shapes)), clfs, *gen_batch)

    return {
        "cross_entropy": (local(0.0, 0.0), m0),
        "reg_term": (reg_term, m0),
        "align_term": (align_term, m0),
        "fedcir_local": (local(0.5, 0.3), m0),
        "prox_local": (prox, m0),
        "generator": (gen_loss, g0),
    }


def check_gradients(points: int = 10, seed: int = 0, tol: float = 1e-4) -> CheckResult:
    t0 = time.perf_counter()
    worst: dict[str, float] = {}
    for i in range(points):
        for name, (fn, x0) in training_losses(np.random.default_rng([seed, i])).items():
            worst[name] = max(worst.get(name, 0.0), nx.grad_check(fn, x0))
    bad = {k: v for k, v in worst.items() if not v < tol}
    detail = ", ".join(f"{k}={v:.1e}" for k, v in worst.items())
    return CheckResult("grad_check", not bad, detail, time.perf_counter() - t0)


def kl_by_integration(mu_l: float, s_l: float, mu_g: float, s_g: float) -> float:
    def integrand(z):
        lp = -0.5 * ((z - mu_l) / s_l) ** 2 - np.log(s_l) - 0.5 * np.log(2 * np.pi)
        lq = -0.5 * ((z - mu_g) / s_g) ** 2 - np.log(s_g) - 0.5 * np.log(2 * np.pi)
        return np.exp(lp) * (lp - lq)

    lo, hi = mu_l - 40 * s_l, mu_l + 40 * s_l
    val, _ = integrate.quad(integrand, lo, hi, points=[mu_l], limit=200, epsabs=1e-12, epsrel=1e-12)
    return val


def check_kl(pairs: int = 100, seed: int = 0, tol: float = 1e-6, kl_fn=None) -> CheckResult:
    t0 = time.perf_counter()
    kl_fn = kl_diag_gaussian if kl_fn is None else kl_fn
    rng = np.random.default_rng([seed, 0x4B4C])
    worst = 0.0
    for _ in range(pairs):
        mu_l, mu_g = rng.normal(size=2) * 2
        s_l, s_g = np.exp(rng.uniform(-1, 1, size=2))
        closed = float(kl_fn(Tensor([mu_l]), Tensor([s_l]), Tensor([mu_g]), Tensor([s_g])).value)
        worst = max(worst, abs(closed - kl_by_integration(mu_l, s_l, mu_g, s_g)))
    return CheckResult("kl_integration", worst < tol, f"max abs err {worst:.1e}", time.perf_counter() - t0)


def check_sweeps(n: int = 10_000, n_constructed: int = 100, seed: int = 0) -> list[CheckResult]:
    out = []
    for name, fn in [
        ("prop1_sweep", lambda r: dg.sweep_prop1(n, r)),
        ("prop3_sweep", lambda r: dg.sweep_prop3(n, r)),
        ("prop2_iff", lambda r: dg.sweep_prop2(n, n_constructed, r)),
    ]:
        t0 = time.perf_counter()
        res = fn(np.random.default_rng([seed, len(out)]))
        out.append(CheckResult(name, res.ok, f"{res.failures}/{res.trials} failures",
                               time.perf_counter() - t0))
    return out


def small_federation(seed: int = 0, n_per_domain: int = 60):
    task = LatentTask.random(3, 4, 3.0, 1.0, seed)
    return build_federation(task, domain_specs(4, 3, 0.8, 2.0, 0.3, seed), n_per_domain)


def metric_stream(rows: list[RoundMetrics]) -> list[tuple]:
    """CSV rows with the variant column dropped, for cross-variant comparison."""
    return [tuple(v for k, v in zip(RoundMetrics.CSV_FIELDS, r.csv_row()) if k != "variant") for r in rows]


def reduction_streams(rounds: int = 20, seed: int = 0, fed=None) -> dict[str, list[tuple]]:
    fed = small_federation(seed) if fed is None else fed
    base = FedConfig(rounds=rounds, local_steps=5, seed=seed, z_dim=2, noise_dim=2, hidden=8, table_samples=32)
    cfgs = {
        "fedavg": replace(base, variant="fedavg"),
        "fedcir_zero": replace(base, variant="fedcir", lambda_reg=0.0, lambda_align=0.0, gen_steps=0),
        "fedprox_zero": replace(base, variant="fedprox", prox_mu=0.0),
    }
    return {k: metric_stream(run_federated(fed, c)[1]) for k, c in cfgs.items()}


def check_reductions(rounds: int = 20, seed: int = 0) -> CheckResult:
    t0 = time.perf_counter()
    s = reduction_streams(rounds, seed)
    ok_cir = s["fedcir_zero"] == s["fedavg"]
    ok_prox = s["fedprox_zero"] == s["fedavg"]
    return CheckResult("reduction_identities", ok_cir and ok_prox,
                       f"fedcir(0)=={ok_cir} fedprox(0)=={ok_prox}", time.perf_counter() - t0)


def run_all(sweep_n: int = 10_000) -> list[CheckResult]:
    return [check_gradients(), check_kl(), *check_sweeps(sweep_n), check_reductions()]
