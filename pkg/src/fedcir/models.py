"""Probabilistic encoder, softmax classifier, conditional feature generator.

Parameters live in small dataclasses of :class:`~fedcir.numerics.Tensor`.
Every parameter set can be flattened to an ordered ``{name: ndarray}`` dict,
which is what aggregation, optimisers and checkpoints operate on.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from . import numerics as nx
from .numerics import DimensionError, NumericError, Tensor

SIGMA_FLOOR = 1e-3
RAW_SCALE_CLAMP = 10.0

Layer = tuple[Tensor, Tensor]  # (weight d_in x d_out, bias d_out)


class DataError(ValueError):
    """Input data violates a precondition (e.g. a class without samples)."""


def _init_layer(rng: np.random.Generator, d_in: int, d_out: int, bias: float = 0.0) -> Layer:
    # He-normal: the trunk and generator use ReLU
    w = rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d_in, d_out))
    return Tensor(w), Tensor(np.full(d_out, bias))


def _zero_layer(d_in: int, d_out: int) -> Layer:
    return Tensor(np.zeros((d_in, d_out))), Tensor(np.zeros(d_out))


class _ParamSet:
    """Mixin: flatten dataclass-held layers into an ordered name -> array dict."""

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        for f in fields(self):
            val = getattr(self, f.name)
            if isinstance(val, tuple) and len(val) == 2 and isinstance(val[0], Tensor):
                yield f"{f.name}.weight", val[0]
                yield f"{f.name}.bias", val[1]
            elif isinstance(val, (list, tuple)):
                for i, (w, b) in enumerate(val):
                    yield f"{f.name}.{i}.weight", w
                    yield f"{f.name}.{i}.bias", b

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.value for name, t in self.named_tensors()}

    def num_params(self) -> int:
        return sum(t.value.size for t in self.tensors())

    def replace_tensors(self, new: Sequence[np.ndarray | Tensor]):
        """Copy of self with tensors swapped in ``named_tensors`` order."""
        it = iter(new)

        def take() -> Tensor:
            return nx.as_tensor(next(it))

        kwargs = {}
        for f in fields(self):
            val = getattr(self, f.name)
            if isinstance(val, tuple) and len(val) == 2 and isinstance(val[0], Tensor):
                kwargs[f.name] = (take(), take())
            elif isinstance(val, (list, tuple)):
                kwargs[f.name] = [(take(), take()) for _ in val]
            else:
                kwargs[f.name] = val
        out = type(self)(**kwargs)
        if next(it, None) is not None:
            raise DimensionError("too many tensors for parameter set")
        return out


@dataclass(frozen=True)
class EncoderParams(_ParamSet):
    """Trunk of ReLU affine layers, then a mean head and a raw-scale head."""

    trunk: list[Layer]
    mu_head: Layer
    scale_head: Layer

    @property
    def in_dim(self) -> int:
        first = self.trunk[0] if self.trunk else self.mu_head
        return first[0].shape[0]

    @property
    def z_dim(self) -> int:
        return self.mu_head[0].shape[1]

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        in_dim: int,
        z_dim: int = 8,
        hidden: Sequence[int] = (32,),
        scale_bias: float = 0.0,
    ) -> "EncoderParams":
        trunk = []
        d = in_dim
        for h in hidden:
            trunk.append(_init_layer(rng, d, h))
            d = h
        mu_w = rng.normal(0.0, np.sqrt(1.0 / d), size=(d, z_dim))
        sc_w = rng.normal(0.0, np.sqrt(1.0 / d), size=(d, z_dim)) * 0.1
        return cls(
            trunk,
            (Tensor(mu_w), Tensor(np.zeros(z_dim))),
            (Tensor(sc_w), Tensor(np.full(z_dim, scale_bias))),
        )

    @classmethod
    def zeros(cls, in_dim: int, z_dim: int, hidden: Sequence[int] = (32,)) -> "EncoderParams":
        trunk, d = [], in_dim
        for h in hidden:
            trunk.append(_zero_layer(d, h))
            d = h
        return cls(trunk, _zero_layer(d, z_dim), _zero_layer(d, z_dim))


@dataclass(frozen=True)
class ClassifierParams(_ParamSet):
    """Single affine layer z -> C logits (softmax applied by :func:`classify`)."""

    layer: Layer

    @property
    def n_classes(self) -> int:
        return self.layer[0].shape[1]

    @classmethod
    def init(cls, rng: np.random.Generator, z_dim: int, n_classes: int) -> "ClassifierParams":
        w = rng.normal(0.0, np.sqrt(1.0 / z_dim), size=(z_dim, n_classes))
        return cls((Tensor(w), Tensor(np.zeros(n_classes))))

    @classmethod
    def zeros(cls, z_dim: int, n_classes: int) -> "ClassifierParams":
        return cls(_zero_layer(z_dim, n_classes))


@dataclass(frozen=True)
class GeneratorParams(_ParamSet):
    """concat(one_hot(y), eps) -> hidden (ReLU) -> z."""

    hidden: Layer
    out: Layer
    noise_dim: int

    @property
    def n_classes(self) -> int:
        return self.hidden[0].shape[0] - self.noise_dim

    @property
    def z_dim(self) -> int:
        return self.out[0].shape[1]

    @classmethod
    def init(
        cls, rng: np.random.Generator, n_classes: int, noise_dim: int = 8, z_dim: int = 8, width: int = 32
    ) -> "GeneratorParams":
        return cls(_init_layer(rng, n_classes + noise_dim, width), _init_layer(rng, width, z_dim), noise_dim)

    @classmethod
    def zeros(cls, n_classes: int, noise_dim: int = 8, z_dim: int = 8, width: int = 32) -> "GeneratorParams":
        return cls(_zero_layer(n_classes + noise_dim, width), _zero_layer(width, z_dim), noise_dim)


@dataclass(frozen=True)
class ModelParams:
    """Global model ``w = w1 o w2``: encoder followed by classifier."""

    encoder: EncoderParams
    classifier: ClassifierParams

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        for name, t in self.encoder.named_tensors():
            yield f"encoder.{name}", t
        for name, t in self.classifier.named_tensors():
            yield f"classifier.{name}", t

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.value for name, t in self.named_tensors()}

    def num_params(self) -> int:
        return self.encoder.num_params() + self.classifier.num_params()

    def replace_tensors(self, new: Sequence[np.ndarray | Tensor]) -> "ModelParams":
        new = list(new)
        n_enc = len(self.encoder.tensors())
        return ModelParams(self.encoder.replace_tensors(new[:n_enc]), self.classifier.replace_tensors(new[n_enc:]))

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        in_dim: int,
        n_classes: int,
        z_dim: int = 8,
        hidden: Sequence[int] = (32,),
        scale_bias: float = 0.0,
    ) -> "ModelParams":
        enc = EncoderParams.init(rng, in_dim, z_dim, hidden, scale_bias)
        return cls(enc, ClassifierParams.init(rng, z_dim, n_classes))


@dataclass(frozen=True)
class ClassGaussianTable:
    """Per-class diagonal Gaussian ``q(z|y)``: rows of ``mu`` and ``sigma`` indexed by class."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape or self.mu.ndim != 2:
            raise DimensionError(f"table shapes differ: {self.mu.shape} vs {self.sigma.shape}")
        if np.any(self.sigma < SIGMA_FLOOR):
            raise NumericError("table sigma below floor")

    @property
    def n_classes(self) -> int:
        return self.mu.shape[0]

    def num_params(self) -> int:
        return self.mu.size + self.sigma.size


# ---------------------------------------------------------------- forward passes


def _dense(layer: Layer, x) -> Tensor:
    return nx.affine(layer[0], layer[1], x)


def encode(params: EncoderParams, x) -> tuple[Tensor, Tensor]:
    """Mean and standard deviation of ``p(z|x)``; rows of a batch or a single vector."""
    x = nx.as_tensor(x)
    if x.ndim not in (1, 2) or x.shape[-1] != params.in_dim:
        raise DimensionError(f"encoder expects input dim {params.in_dim}, got shape {x.shape}")
    h = x
    for layer in params.trunk:
        h = nx.relu(_dense(layer, h))
    mu = _dense(params.mu_head, h)
    raw = nx.clip(_dense(params.scale_head, h), -RAW_SCALE_CLAMP, RAW_SCALE_CLAMP)
    sigma = nx.maximum(nx.exp(raw), SIGMA_FLOOR)
    return mu, sigma


def reparameterize(mu, sigma, eps) -> Tensor:
    """``z = mu + sigma * eps``; ``eps`` is treated as a constant."""
    mu, sigma = nx.as_tensor(mu), nx.as_tensor(sigma)
    eps_val = np.asarray(eps.value if isinstance(eps, Tensor) else eps, dtype=np.float64)
    if not (mu.shape == sigma.shape == eps_val.shape):
        raise DimensionError(f"reparameterize shapes differ: {mu.shape}, {sigma.shape}, {eps_val.shape}")
    return nx.add(mu, nx.mul(sigma, Tensor(eps_val)))


def classify(params: ClassifierParams, z) -> Tensor:
    z = nx.as_tensor(z)
    w = params.layer[0]
    if z.ndim not in (1, 2) or z.shape[-1] != w.shape[0]:
        raise DimensionError(f"classifier expects z dim {w.shape[0]}, got shape {z.shape}")
    return nx.softmax(_dense(params.layer, z))


def one_hot(y, n_classes: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if np.any((y < 0) | (y >= n_classes)):
        raise IndexError(f"class index out of range for {n_classes} classes: {y}")
    return np.eye(n_classes)[y]


def generate(params: GeneratorParams, y, eps) -> Tensor:
    """Representation for label(s) ``y`` and noise ``eps`` (one row per label)."""
    eps_val = np.asarray(eps.value if isinstance(eps, Tensor) else eps, dtype=np.float64)
    if eps_val.shape[-1] != params.noise_dim:
        raise DimensionError(f"generator expects noise dim {params.noise_dim}, got shape {eps_val.shape}")
    inp = Tensor(np.concatenate([one_hot(y, params.n_classes), eps_val], axis=-1))
    h = nx.relu(_dense(params.hidden, inp))
    return _dense(params.out, h)


def kl_diag_gaussian(mu_l, sigma_l, mu_g, sigma_g) -> Tensor:
    """KL( N(mu_l, sigma_l^2) || N(mu_g, sigma_g^2) ), summed over the last axis.

    Per coordinate: ``log sg - log sl + (sl^2 + (ml - mg)^2) / (2 sg^2) - 1/2``.
    Batched inputs give one value per row. Differentiable in all four arguments.
    """
    mu_l, sigma_l, mu_g, sigma_g = (nx.as_tensor(t) for t in (mu_l, sigma_l, mu_g, sigma_g))
    if not (mu_l.shape == sigma_l.shape and mu_g.shape[-1] == mu_l.shape[-1] and sigma_g.shape == mu_g.shape):
        raise DimensionError(
            f"kl shapes incompatible: {mu_l.shape}, {sigma_l.shape}, {mu_g.shape}, {sigma_g.shape}"
        )
    if np.any(sigma_l.value <= 0) or np.any(sigma_g.value <= 0):
        raise NumericError("kl_diag_gaussian needs strictly positive sigmas")
    diff = nx.sub(mu_l, mu_g)
    num = nx.add(nx.square(sigma_l), nx.square(diff))
    quad = nx.div(num, nx.mul(nx.square(sigma_g), 2.0))
    per_coord = nx.sub(nx.add(nx.sub(nx.log(sigma_g), nx.log(sigma_l)), quad), 0.5)
    return nx.sum_last(per_coord)


def fit_class_gaussians(
    samples: Mapping[int, np.ndarray] | Sequence[np.ndarray], sigma_floor: float = SIGMA_FLOOR
) -> ClassGaussianTable:
    """MLE per-class Gaussian: sample mean and divide-by-n std, std floored."""
    if isinstance(samples, Mapping):
        n_classes = max(samples) + 1 if samples else 0
        groups = [samples.get(c) for c in range(n_classes)]
    else:
        groups = list(samples)
    if not groups:
        raise DataError("no classes given")
    mus, sigmas = [], []
    for c, g in enumerate(groups):
        if g is None or len(g) == 0:
            raise DataError(f"class {c} has no samples")
        arr = np.atleast_2d(np.asarray(g, dtype=np.float64))
        # sort rows so the float reduction is independent of sample order
        arr = arr[np.lexsort(arr.T[::-1])]
        mu = arr.mean(axis=0)
        sd = np.sqrt(((arr - mu) ** 2).mean(axis=0))
        mus.append(mu)
        sigmas.append(np.maximum(sd, sigma_floor))
    return ClassGaussianTable(np.array(mus), np.array(sigmas))


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"FEDCIR-CKPT 1\n"


def save_arrays(path: str | Path, arrays: Mapping[str, np.ndarray], meta: Mapping | None = None,
                comment: str | None = None) -> None:
    """Write arrays as a JSON header plus raw little-endian fp64 payload.

    Output is a pure function of the inputs (no timestamps), so two identical
    runs produce byte-identical files.
    """
    entries, offset = [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = json.dumps({"meta": dict(meta or {}), "tensors": entries}, sort_keys=True).encode()
    buf = io.BytesIO()
    if comment is not None:
        buf.write(f"# {comment}\n".encode())
    buf.write(CHECKPOINT_MAGIC)
    buf.write(len(header).to_bytes(8, "little"))
    buf.write(header)
    for arr in arrays.values():
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    pos = 0
    if raw.startswith(b"#"):
        pos = raw.index(b"\n") + 1
    if raw[pos : pos + len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    pos += len(CHECKPOINT_MAGIC)
    n = int.from_bytes(raw[pos : pos + 8], "little")
    pos += 8
    header = json.loads(raw[pos : pos + n])
    pos += n
    out = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        start = pos + e["offset"]
        out[e["name"]] = np.frombuffer(raw[start : start + 8 * count], dtype="<f8").reshape(e["shape"]).astype(np.float64)
    return out, header["meta"]


def model_from_arrays(arrays: Mapping[str, np.ndarray]) -> ModelParams:
    """Rebuild a :class:`ModelParams` from its flattened names."""
    trunk_idx = sorted({int(k.split(".")[2]) for k in arrays if k.startswith("encoder.trunk.")})
    trunk = [
        (Tensor(arrays[f"encoder.trunk.{i}.weight"]), Tensor(arrays[f"encoder.trunk.{i}.bias"])) for i in trunk_idx
    ]
    enc = EncoderParams(
        trunk,
        (Tensor(arrays["encoder.mu_head.weight"]), Tensor(arrays["encoder.mu_head.bias"])),
        (Tensor(arrays["encoder.scale_head.weight"]), Tensor(arrays["encoder.scale_head.bias"])),
    )
    clf = ClassifierParams((Tensor(arrays["classifier.layer.weight"]), Tensor(arrays["classifier.layer.bias"])))
    return ModelParams(enc, clf)


def save_model(path: str | Path, model: ModelParams, meta: Mapping | None = None, comment: str | None = None) -> None:
    save_arrays(path, model.to_arrays(), meta, comment)


def load_model(path: str | Path) -> tuple[ModelParams, dict]:
    arrays, meta = load_arrays(path)
    return model_from_arrays(arrays), meta
