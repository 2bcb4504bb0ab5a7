import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedcir import numerics as nx
from fedcir.checks import kl_by_integration
from fedcir.models import (
    SIGMA_FLOOR,
    ClassGaussianTable,
    ClassifierParams,
    DataError,
    EncoderParams,
    GeneratorParams,
    ModelParams,
    classify,
    encode,
    fit_class_gaussians,
    generate,
    kl_diag_gaussian,
    load_model,
    reparameterize,
    save_model,
)
from fedcir.numerics import DimensionError, GradTape, NumericError, Tensor

# values of the KL integral from adaptive quadrature (frozen)
KL_SHIFTED_MEAN = 0.5000000000000002  # N(1,1) || N(0,1)
KL_DOUBLED_STD = 0.8068528194400546  # N(0,2^2) || N(0,1)

seeds = st.integers(0, 2**32 - 1)


# ---------------------------------------------------------------- encoder


def test_encode_zero_network():
    enc = EncoderParams.zeros(3, 2)
    mu, sigma = encode(enc, np.array([1.0, -4.0, 2.0]))
    assert mu.value.tolist() == [0.0, 0.0]
    assert sigma.value.tolist() == [1.0, 1.0]


def test_encode_identity_trunk():
    enc = EncoderParams([], (Tensor(np.eye(2)), Tensor(np.zeros(2))), (Tensor(np.zeros((2, 2))), Tensor(np.zeros(2))))
    mu, _ = encode(enc, [1.0, -2.0])
    assert mu.value.tolist() == [1.0, -2.0]


def test_encode_sigma_positive_random_draws():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        enc = EncoderParams.init(rng, 3, 2, (4,), scale_bias=rng.normal() * 5)
        _, sigma = encode(enc, rng.normal(size=3) * 10)
        assert np.all(sigma.value > 0)


def test_encode_sigma_floor_and_clamp():
    enc = EncoderParams([], (Tensor(np.zeros((1, 1))), Tensor([0.0])), (Tensor([[1.0]]), Tensor([0.0])))
    assert encode(enc, [-1e6])[1].item() == pytest.approx(max(np.exp(-10.0), SIGMA_FLOOR))
    assert encode(enc, [1e6])[1].item() == pytest.approx(np.exp(10.0))


def test_encode_shape_mismatch():
    with pytest.raises(DimensionError):
        encode(EncoderParams.zeros(3, 2), np.zeros(4))


# ---------------------------------------------------------------- reparameterisation


def test_reparameterize_standard():
    e = np.array([0.3, -1.2])
    assert reparameterize(np.zeros(2), np.ones(2), e).value.tolist() == e.tolist()


def test_reparameterize_hand_values():
    assert reparameterize([1.0, 2.0], [0.5, 0.5], [2.0, -2.0]).value.tolist() == [2.0, 1.0]


def test_reparameterize_monte_carlo_mean():
    rng = np.random.default_rng(1)
    mu, sigma = np.array([0.7, -2.0]), np.array([1.5, 0.2])
    z = reparameterize(np.broadcast_to(mu, (100_000, 2)), np.broadcast_to(sigma, (100_000, 2)),
                       rng.standard_normal((100_000, 2))).value
    assert np.all(np.abs(z.mean(0) - mu) < 3 * sigma / np.sqrt(100_000))


def test_reparameterize_shape_mismatch():
    with pytest.raises(DimensionError):
        reparameterize([0.0], [1.0, 1.0], [0.0])


def test_reparameterize_gradient_not_to_eps():
    mu, sigma, eps = Tensor([0.5, -1.0]), Tensor([1.0, 2.0]), Tensor([0.3, 0.4])
    with GradTape() as tape:
        tape.watch(mu, sigma, eps)
        loss = nx.sum_all(nx.square(reparameterize(mu, sigma, eps)))
    g_mu, g_sigma, g_eps = tape.gradient(loss, [mu, sigma, eps])
    assert g_eps is None
    z = mu.value + sigma.value * eps.value
    assert np.allclose(g_mu, 2 * z) and np.allclose(g_sigma, 2 * z * eps.value)


@settings(max_examples=20, deadline=None)
@given(seeds)
def test_reparameterize_grad_check(seed):
    rng = np.random.default_rng(seed)
    eps = rng.normal(size=3)

    def loss(v):
        mu = nx.segment(v, 0, 3, (3,))
        sigma = nx.exp(nx.segment(v, 3, 6, (3,)))
        return nx.sum_all(nx.square(reparameterize(mu, sigma, eps)))

    assert nx.grad_check(loss, rng.normal(size=6)) < 1e-6


# ---------------------------------------------------------------- classifier


def test_classify_zero_uniform():
    p = classify(ClassifierParams.zeros(3, 4), [1.0, 2.0, 3.0]).value
    assert p.tolist() == [0.25] * 4


def test_classify_routed_weights():
    w = np.zeros((3, 4))
    w[0, 0] = 1.0
    p = classify(ClassifierParams((Tensor(w), Tensor(np.zeros(4)))), [10.0, 0.0, 0.0]).value
    assert p[0] > 0.99


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_classify_sums_to_one(seed):
    rng = np.random.default_rng(seed)
    p = classify(ClassifierParams.init(rng, 3, 5), rng.normal(size=3) * 10).value
    assert abs(p.sum() - 1) < 1e-12


def test_classify_shape_mismatch():
    with pytest.raises(DimensionError):
        classify(ClassifierParams.zeros(3, 4), [1.0])


# ---------------------------------------------------------------- generator


def test_generate_zero_network():
    g = GeneratorParams.zeros(3, noise_dim=2, z_dim=4, width=5)
    for y in range(3):
        assert generate(g, y, np.array([1.0, -3.0])).value.tolist() == [0.0] * 4


def test_generate_deterministic():
    rng = np.random.default_rng(0)
    g = GeneratorParams.init(rng, 3, 2, 4, 8)
    eps = rng.normal(size=2)
    assert generate(g, 1, eps).value.tobytes() == generate(g, 1, eps).value.tobytes()


def test_generate_label_out_of_range():
    with pytest.raises(IndexError):
        generate(GeneratorParams.zeros(3, 2, 4, 5), 3, np.zeros(2))


def test_generate_distinct_labels_after_training():
    from fedcir.fedproto import FedConfig, train_generator

    rng = np.random.default_rng(3)
    clf = ClassifierParams.init(rng, 2, 3)
    gen = GeneratorParams.init(rng, 3, 2, 2, 8)
    gen = train_generator([clf], gen, FedConfig(gen_steps=50, gen_lr=0.1, z_dim=2, noise_dim=2), rng)
    eps = np.zeros(2)
    zs = [generate(gen, y, eps).value for y in range(3)]
    assert not np.array_equal(zs[0], zs[1]) and not np.array_equal(zs[1], zs[2])


# ---------------------------------------------------------------- KL


def test_kl_identical_is_zero():
    assert kl_diag_gaussian([0.0, 0.0], [1.0, 1.0], [0.0, 0.0], [1.0, 1.0]).item() == 0.0


def test_kl_shifted_mean_matches_integration():
    assert kl_diag_gaussian([1.0], [1.0], [0.0], [1.0]).item() == pytest.approx(KL_SHIFTED_MEAN, abs=1e-12)


def test_kl_doubled_std_matches_integration():
    assert kl_diag_gaussian([0.0], [2.0], [0.0], [1.0]).item() == pytest.approx(KL_DOUBLED_STD, abs=1e-12)


def test_kl_rejects_nonpositive_sigma():
    with pytest.raises(NumericError):
        kl_diag_gaussian([0.0], [0.0], [0.0], [1.0])
    with pytest.raises(NumericError):
        kl_diag_gaussian([0.0], [1.0], [0.0], [-1.0])


def test_kl_batched_rows():
    out = kl_diag_gaussian([[1.0], [0.0]], [[1.0], [2.0]], [[0.0], [0.0]], [[1.0], [1.0]]).value
    assert out == pytest.approx([KL_SHIFTED_MEAN, KL_DOUBLED_STD], abs=1e-12)


def _gauss(rng, d):
    return rng.normal(size=d) * 3, np.exp(rng.uniform(-2, 1.5, size=d))


def test_kl_self_zero_random():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        mu, s = _gauss(rng, 3)
        assert abs(kl_diag_gaussian(mu, s, mu, s).item()) <= 1e-12


def test_kl_nonnegative_random():
    rng = np.random.default_rng(12)
    for _ in range(1000):
        (ml, sl), (mg, sg) = _gauss(rng, 3), _gauss(rng, 3)
        assert kl_diag_gaussian(ml, sl, mg, sg).item() >= 0


def test_kl_matches_integration_random():
    rng = np.random.default_rng(13)
    for _ in range(100):
        ml, mg = rng.normal(size=2) * 2
        sl, sg = rng.uniform(0.1, 5.0, size=2)
        closed = kl_diag_gaussian([ml], [sl], [mg], [sg]).item()
        assert abs(closed - kl_by_integration(ml, sl, mg, sg)) < 1e-6


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_kl_grad_check(seed):
    rng = np.random.default_rng(seed)
    mg, sg = _gauss(rng, 3)

    def loss(v):
        return kl_diag_gaussian(nx.segment(v, 0, 3, (3,)), nx.exp(nx.segment(v, 3, 6, (3,))), mg, sg)

    assert nx.grad_check(loss, rng.normal(size=6)) < 1e-6


# ---------------------------------------------------------------- class table


def test_fit_single_sample_floor():
    t = fit_class_gaussians([np.array([[0.4, -1.0]])])
    assert t.mu.tolist() == [[0.4, -1.0]]
    assert t.sigma.tolist() == [[SIGMA_FLOOR, SIGMA_FLOOR]]


def test_fit_two_points():
    t = fit_class_gaussians([np.array([[0.0], [2.0]])])
    assert t.mu.tolist() == [[1.0]] and t.sigma.tolist() == [[1.0]]


def test_fit_constant_samples_floor():
    t = fit_class_gaussians({0: np.array([[-1.0], [-1.0], [-1.0]])})
    assert t.mu.tolist() == [[-1.0]] and t.sigma.tolist() == [[SIGMA_FLOOR]]


def test_fit_empty_class_named():
    with pytest.raises(DataError, match="class 1"):
        fit_class_gaussians({0: np.ones((2, 1)), 1: np.zeros((0, 1))})
    with pytest.raises(DataError, match="class 1"):
        fit_class_gaussians({0: np.ones((2, 1)), 2: np.ones((2, 1))})


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_fit_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    groups = [rng.normal(size=(int(rng.integers(1, 30)), 3)) * 100 for _ in range(3)]
    shuffled = [g[rng.permutation(len(g))] for g in groups]
    a, b = fit_class_gaussians(groups), fit_class_gaussians(shuffled)
    assert a.mu.tobytes() == b.mu.tobytes() and a.sigma.tobytes() == b.sigma.tobytes()


def test_table_rejects_sigma_below_floor():
    with pytest.raises(NumericError):
        ClassGaussianTable(np.zeros((2, 1)), np.full((2, 1), SIGMA_FLOOR / 2))


# ---------------------------------------------------------------- params / checkpoint


def test_param_names_and_counts():
    m = ModelParams.init(np.random.default_rng(0), 4, 3, 2, (5,), 0.0)
    names = list(m.to_arrays())
    assert names[0] == "encoder.trunk.0.weight" and names[-1] == "classifier.layer.bias"
    assert m.num_params() == (4 * 5 + 5) + 2 * (5 * 2 + 2) + (2 * 3 + 3)


def test_checkpoint_round_trip_bit_exact(tmp_path):
    m = ModelParams.init(np.random.default_rng(0), 4, 3, 2, (5,), 0.0)
    p = tmp_path / "m.ckpt"
    save_model(p, m, {"seed": 3}, comment="hello")
    back, meta = load_model(p)
    assert meta == {"seed": 3}
    for (ka, a), (kb, b) in zip(m.to_arrays().items(), back.to_arrays().items()):
        assert ka == kb and a.tobytes() == b.tobytes()
    p2 = tmp_path / "m2.ckpt"
    save_model(p2, back, {"seed": 3}, comment="hello")
    assert p.read_bytes() == p2.read_bytes()
    assert p.read_bytes().startswith(b"# hello\n")


def test_load_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        load_model(p)
