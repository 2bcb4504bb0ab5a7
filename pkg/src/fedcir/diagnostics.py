"""Exact discrete information quantities, bound checks, proxy A-distance, local risk.

All information quantities are in nats. Discrete joints are dense tables whose
axes are named (``"k"`` client, ``"x"`` input, ``"y"`` label, ``"z"``
representation); sums run over the full product space and ``0 log 0 = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Sequence

import numpy as np

from . import numerics as nx
from .models import DataError, ModelParams, classify, encode, reparameterize

BOUND_TOL = 1e-10


@dataclass(frozen=True)
class DiscreteJoint:
    table: np.ndarray
    axes: tuple[str, ...]

    def __post_init__(self):
        t = np.asarray(self.table, dtype=np.float64)
        object.__setattr__(self, "table", t)
        object.__setattr__(self, "axes", tuple(self.axes))
        if t.ndim != len(self.axes) or len(set(self.axes)) != len(self.axes):
            raise DataError(f"table rank {t.ndim} does not match axes {self.axes}")
        if np.any(t < 0) or not np.all(np.isfinite(t)):
            raise DataError("joint has negative or non-finite entries")
        if abs(t.sum() - 1.0) > 1e-12:
            raise DataError(f"joint mass is {t.sum()!r}, not 1")

    def size(self, name: str) -> int:
        return self.table.shape[self.axes.index(name)]

    def marginal(self, *names: str) -> np.ndarray:
        """Marginal over ``names``, axes returned in the order requested."""
        drop = tuple(i for i, a in enumerate(self.axes) if a not in names)
        m = self.table.sum(axis=drop)
        kept = [a for a in self.axes if a in names]
        return np.transpose(m, [kept.index(n) for n in names])


def _xlogy_ratio(p: np.ndarray, num: np.ndarray, den: np.ndarray) -> float:
    """sum p * log(num / den) with 0 log 0 = 0."""
    mask = p > 0
    return float(np.sum(p[mask] * (np.log(num[mask]) - np.log(den[mask]))))


def entropy(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64).ravel()
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def conditional_entropy(joint: DiscreteJoint, target: str = "y", given: str = "z") -> float:
    """H(target | given)."""
    p = joint.marginal(target, given)
    pg = p.sum(axis=0, keepdims=True)
    return -_xlogy_ratio(p, p, np.broadcast_to(pg, p.shape))


def mutual_information(joint: DiscreteJoint, over: tuple[str, str] = ("y", "z")) -> float:
    a, b = over
    p = joint.marginal(a, b)
    pa = p.sum(axis=1, keepdims=True)
    pb = p.sum(axis=0, keepdims=True)
    return max(_xlogy_ratio(p, p, pa * pb), 0.0)


def conditional_mutual_information(joint: DiscreteJoint, a: str = "z", b: str = "k", given: str = "y") -> float:
    """I(a; b | given); defaults to I(Z; K | Y)."""
    p = joint.marginal(a, b, given)
    p_ag = p.sum(axis=1, keepdims=True)
    p_bg = p.sum(axis=0, keepdims=True)
    p_g = p.sum(axis=(0, 1), keepdims=True)
    num = p * p_g
    den = p_ag * p_bg
    return max(_xlogy_ratio(p, np.broadcast_to(num, p.shape), np.broadcast_to(den, p.shape)), 0.0)


def max_client_deviation(joint: DiscreteJoint) -> float:
    """max over k, k', y (with p(k,y) > 0) and z of |p(z|k,y) - p(z|k',y)|."""
    p = joint.marginal("k", "y", "z")
    pky = p.sum(axis=2)
    worst = 0.0
    for y in range(p.shape[1]):
        live = np.flatnonzero(pky[:, y] > 0)
        if len(live) < 2:
            continue
        cond = p[live, y, :] / pky[live, y, None]
        worst = max(worst, float((cond.max(axis=0) - cond.min(axis=0)).max()))
    return worst


@dataclass(frozen=True)
class BoundCheck:
    lhs: float
    rhs: float
    holds: bool


def verify_prop1_bound(joint: DiscreteJoint, classifier: np.ndarray) -> BoundCheck:
    """H(Y|Z) against sum_k p(k) E_{p(y)} E_{p(z|y)} [-log q(y|k,z)].

    ``classifier[k, z, y]`` is the client-``k`` predictive distribution over ``y``.
    """
    q = np.asarray(classifier, dtype=np.float64)
    n_k, n_y, n_z = joint.size("k"), joint.size("y"), joint.size("z")
    if q.shape != (n_k, n_z, n_y):
        raise DataError(f"classifier table shape {q.shape}, expected {(n_k, n_z, n_y)}")
    if np.any(q < 0) or np.abs(q.sum(axis=2) - 1).max() > 1e-12:
        raise DataError("classifier rows must be probability vectors")
    lhs = conditional_entropy(joint, "y", "z")
    pk = joint.marginal("k")
    pyz = joint.marginal("y", "z")  # p(y) p(z|y)
    rhs = 0.0
    for k in range(n_k):
        qk = q[k].T  # (y, z)
        mask = pyz > 0
        if np.any(qk[mask] <= 0):
            return BoundCheck(lhs, float("inf"), True)
        rhs += pk[k] * float(np.sum(pyz[mask] * -np.log(qk[mask])))
    return BoundCheck(lhs, rhs, lhs <= rhs + BOUND_TOL)


def verify_prop3_bound(joint: DiscreteJoint) -> BoundCheck:
    """I(Z;K|Y) against sum_{k,x,y} p(k,x,y) KL(p(z|k,x) || p(z|y))."""
    if set(joint.axes) != {"k", "x", "y", "z"}:
        raise DataError(f"need axes k, x, y, z; got {joint.axes}")
    lhs = conditional_mutual_information(joint)
    p = joint.marginal("k", "x", "y", "z")
    pkx_z = p.sum(axis=2)  # (k, x, z)
    pkx = pkx_z.sum(axis=2, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        enc = np.where(pkx > 0, pkx_z / pkx, 0.0)  # p(z|k,x)
    pyz = joint.marginal("y", "z")
    py = pyz.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        q = np.where(py > 0, pyz / py, 0.0)  # p(z|y)
    pkxy = p.sum(axis=3)
    rhs = 0.0
    for k, x, y in zip(*np.nonzero(pkxy)):
        e = enc[k, x]
        mask = e > 0
        if np.any(q[y][mask] <= 0):
            return BoundCheck(lhs, float("inf"), True)
        rhs += pkxy[k, x, y] * float(np.sum(e[mask] * (np.log(e[mask]) - np.log(q[y][mask]))))
    return BoundCheck(lhs, rhs, lhs <= rhs + BOUND_TOL)


# ---------------------------------------------------------------- random instances


def random_joint(rng: np.random.Generator, sizes: Sequence[int], axes: Sequence[str]) -> DiscreteJoint:
    """Uniform draw from the simplex over the product space (Dirichlet(1))."""
    t = rng.dirichlet(np.ones(int(np.prod(sizes)))).reshape(sizes)
    return DiscreteJoint(t / t.sum(), tuple(axes))


def random_encoder_joint(rng: np.random.Generator, n_k: int, n_x: int, n_y: int, n_z: int) -> DiscreteJoint:
    """p(k, x, y) p(z | k, x): representation depends on the datum and client only."""
    pkxy = rng.dirichlet(np.ones(n_k * n_x * n_y)).reshape(n_k, n_x, n_y)
    enc = rng.dirichlet(np.ones(n_z), size=(n_k, n_x))
    t = pkxy[..., None] * enc[:, :, None, :]
    return DiscreteJoint(t / t.sum(), ("k", "x", "y", "z"))


def invariant_joint(rng: np.random.Generator, n_k: int, n_y: int, n_z: int) -> DiscreteJoint:
    """p(k, y) p(z | y): client-invariant by construction."""
    pky = rng.dirichlet(np.ones(n_k * n_y)).reshape(n_k, n_y)
    pzy = rng.dirichlet(np.ones(n_z), size=n_y)
    t = pky[:, :, None] * pzy[None]
    return DiscreteJoint(t / t.sum(), ("k", "y", "z"))


def random_classifier(rng: np.random.Generator, n_k: int, n_z: int, n_y: int) -> np.ndarray:
    return rng.dirichlet(np.ones(n_y), size=(n_k, n_z))


def _sizes(rng: np.random.Generator, n: int, max_size: int = 4) -> list[int]:
    return [int(s) for s in rng.integers(2, max_size + 1, size=n)]


@dataclass
class SweepResult:
    name: str
    trials: int
    failures: int
    worst_gap: float  # max of lhs - rhs (or the offending discrepancy)

    @property
    def ok(self) -> bool:
        return self.failures == 0


def sweep_prop1(n: int, rng: np.random.Generator) -> SweepResult:
    fails, worst = 0, -np.inf
    for _ in range(n):
        n_k, n_y, n_z = _sizes(rng, 3)
        joint = random_joint(rng, (n_k, n_y, n_z), ("k", "y", "z"))
        r = verify_prop1_bound(joint, random_classifier(rng, n_k, n_z, n_y))
        fails += not r.holds
        worst = max(worst, r.lhs - r.rhs)
    return SweepResult("prop1", n, fails, float(worst))


def sweep_prop3(n: int, rng: np.random.Generator) -> SweepResult:
    fails, worst = 0, -np.inf
    for _ in range(n):
        joint = random_encoder_joint(rng, *_sizes(rng, 4))
        r = verify_prop3_bound(joint)
        fails += not r.holds
        worst = max(worst, r.lhs - r.rhs)
    return SweepResult("prop3", n, fails, float(worst))


def sweep_prop2(n_random: int, n_constructed: int, rng: np.random.Generator) -> SweepResult:
    """I(Z;K|Y) == 0 (1e-10) iff conditionals agree across clients (1e-8), both directions."""
    fails, worst = 0, 0.0
    cases = [("random", n_random), ("invariant", n_constructed)]
    for kind, count in cases:
        for _ in range(count):
            sizes = _sizes(rng, 3)
            if kind == "random":
                joint = random_joint(rng, sizes, ("k", "y", "z"))
            else:
                joint = invariant_joint(rng, *sizes)
            cmi = conditional_mutual_information(joint)
            dev = max_client_deviation(joint)
            zero_cmi = cmi <= 1e-10
            invariant = dev < 1e-8
            if zero_cmi != invariant:
                fails += 1
            if kind == "invariant":
                worst = max(worst, cmi)
    return SweepResult("prop2", n_random + n_constructed, fails, worst)


# ---------------------------------------------------------------- proxy A-distance


@dataclass(frozen=True)
class PadReport:
    pair_i: str
    pair_j: str
    err: float
    pad: float


def pad_from_error(err: float) -> float:
    return 2.0 * (1.0 - 2.0 * err)


def _fit_logistic(x: np.ndarray, t: np.ndarray, l2: float, tol: float, max_steps: int) -> np.ndarray:
    """Full-batch gradient descent on L2-regularised logistic loss; bias unpenalised."""
    n, d = x.shape
    xa = np.hstack([x, np.ones((n, 1))])
    lip = 0.25 * np.linalg.eigvalsh(xa.T @ xa / n).max() + l2
    step = 1.0 / lip
    w = np.zeros(d + 1)
    reg = np.full(d + 1, l2)
    reg[-1] = 0.0
    for _ in range(max_steps):
        s = xa @ w
        p = 0.5 * (1.0 + np.tanh(0.5 * s))  # stable sigmoid
        g = xa.T @ (p - t) / n + reg * w
        if np.linalg.norm(g) < tol:
            break
        w -= step * g
    return w


def proxy_a_distance(
    set_a: np.ndarray,
    set_b: np.ndarray,
    rng: np.random.Generator,
    ids: tuple[str, str] = ("a", "b"),
    l2: float = 1e-3,
    tol: float = 1e-6,
    max_steps: int = 5000,
) -> PadReport:
    """Train a logistic discriminator on half of each set, score it on the other half.

    The pair is put in a canonical order first, so swapping the arguments gives
    the same number.
    """
    a = np.atleast_2d(np.asarray(set_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(set_b, dtype=np.float64))
    if len(a) < 4 or len(b) < 4:
        raise DataError("proxy A-distance needs at least 4 samples per set")
    if (len(b), b.tobytes()) < (len(a), a.tobytes()):
        a, b = b, a

    def split(s):
        perm = rng.permutation(len(s))
        h = len(s) // 2
        return s[perm[:h]], s[perm[h:]]

    a_tr, a_te = split(a)
    b_tr, b_te = split(b)
    x_tr = np.vstack([a_tr, b_tr])
    t_tr = np.r_[np.zeros(len(a_tr)), np.ones(len(b_tr))]
    mean = x_tr.mean(axis=0)
    std = x_tr.std(axis=0)
    std[std == 0] = 1.0
    w = _fit_logistic((x_tr - mean) / std, t_tr, l2, tol, max_steps)
    x_te = (np.vstack([a_te, b_te]) - mean) / std
    t_te = np.r_[np.zeros(len(a_te)), np.ones(len(b_te))]
    pred = (x_te @ w[:-1] + w[-1]) > 0
    err = float(np.mean(pred != t_te))
    return PadReport(ids[0], ids[1], err, pad_from_error(err))


# ---------------------------------------------------------------- model-level diagnostics


def local_risk(model: ModelParams, shard, rng: np.random.Generator) -> float:
    """Mean negative log predictive density over the shard, one seeded ``z`` draw per datum."""
    if len(shard) == 0:
        raise DataError(f"client {shard.client} has an empty shard")
    mu, sigma = encode(model.encoder, shard.x)
    z = reparameterize(mu, sigma, rng.standard_normal(mu.shape))
    return float(nx.cross_entropy(classify(model.classifier, z), shard.y).value.mean())


def representations(model: ModelParams, x: np.ndarray) -> np.ndarray:
    """Encoder mean output."""
    return encode(model.encoder, x)[0].value


def pad_table(
    model: ModelParams | None,
    shards: Sequence,
    global_x: np.ndarray,
    seed: int,
) -> list[PadReport]:
    """PAD for every client pair plus one ``GLOBAL`` row per client.

    With ``model=None`` the raw inputs are compared instead of representations.
    """

    def feats(x):
        return x if model is None else representations(model, x)

    local = [feats(s.x) for s in shards]
    glob = feats(global_x)
    rows = []
    for i, j in combinations(range(len(shards)), 2):
        rng = np.random.default_rng([seed, 1, i, j])
        rows.append(proxy_a_distance(local[i], local[j], rng, (str(shards[i].client), str(shards[j].client))))
    for i, s in enumerate(shards):
        rng = np.random.default_rng([seed, 2, i])
        rows.append(proxy_a_distance(glob, local[i], rng, ("GLOBAL", str(s.client))))
    return rows
