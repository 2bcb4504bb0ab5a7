import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedcir.config import ExperimentSpec, format_config, parse_config, parse_config_text
from fedcir.datagen import ConfigError


def test_empty_config_gives_defaults():
    spec = parse_config_text("")
    f = spec.fed
    assert (f.lambda_reg, f.batch_size, f.lr, f.momentum, f.weight_decay) == (0.5, 32, 0.01, 0.9, 5e-4)
    assert (f.local_steps, f.gen_steps, f.rounds) == (20, 5, 100)
    assert f.lambda_align in (5e-7, 1e-6, 5e-5)
    assert spec == ExperimentSpec()


def test_comments_and_blank_lines_ignored():
    spec = parse_config_text("# header\n\nfed.rounds = 7  # trailing\n")
    assert spec.fed.rounds == 7


def test_negative_lambda_rejected_with_line():
    with pytest.raises(ConfigError, match=r"cfg:2:.*lambda_align"):
        parse_config_text("fed.rounds = 3\nfed.lambda_align = -1\n", "cfg")


def test_unknown_key_rejected_with_line():
    with pytest.raises(ConfigError, match=r"cfg:1:.*fed\.bogus"):
        parse_config_text("fed.bogus = 1\n", "cfg")


def test_run_identity_keys_are_not_config():
    for key in ("fed.variant", "fed.seed"):
        with pytest.raises(ConfigError, match="unknown key"):
            parse_config_text(f"{key} = 0\n")


def test_duplicate_key_rejected():
    with pytest.raises(ConfigError, match=r"cfg:3:.*duplicate"):
        parse_config_text("fed.rounds = 3\n\nfed.rounds = 4\n", "cfg")


def test_malformed_lines_rejected():
    with pytest.raises(ConfigError, match=":1:"):
        parse_config_text("fed.rounds 3\n")
    with pytest.raises(ConfigError, match=":1:.*cannot parse"):
        parse_config_text("fed.rounds = three\n")


def test_cross_field_validation():
    with pytest.raises(ConfigError, match="partition"):
        parse_config_text("data.partition = random\n")
    with pytest.raises(ConfigError, match="variants"):
        parse_config_text("run.variants = fedavg,sgd\n")
    with pytest.raises(ConfigError, match="repeat"):
        parse_config_text("run.seeds = 1,1\n")


def test_missing_file_is_os_error(tmp_path):
    with pytest.raises(OSError):
        parse_config(tmp_path / "nope.cfg")


def test_round_trip_default():
    text = format_config(ExperimentSpec())
    assert format_config(parse_config_text(text)) == text


@settings(max_examples=50, deadline=None)
@given(
    st.integers(1, 500),
    st.floats(0, 10, allow_nan=False),
    st.sampled_from(["fedavg", "fedprox", "fedreg", "fedalign", "fedcir"]),
    st.lists(st.integers(0, 10**6), min_size=1, max_size=5, unique=True),
)
def test_round_trip_property(rounds, lam, variant, seeds):
    text = (f"fed.rounds = {rounds}\nfed.lambda_reg = {lam!r}\n"
            f"run.variants = {variant}\nrun.seeds = {','.join(map(str, seeds))}\n")
    spec = parse_config_text(text)
    again = parse_config_text(format_config(spec))
    assert again == spec and again.digest() == spec.digest()


def test_digest_tracks_content():
    a = parse_config_text("")
    b = parse_config_text("fed.rounds = 99\n")
    assert a.digest() == parse_config_text("").digest() and a.digest() != b.digest()
    # where results go and which runs are selected does not change a run's identity
    assert parse_config_text("run.out = elsewhere\nrun.seeds = 7\n").digest() == a.digest()


def test_federation_seeded_by_run_seed():
    spec = parse_config_text("data.n_per_domain = 100\ntask.n_classes = 3\ntask.dim = 4\ndomains.count = 2\n")
    a, b = spec.federation(1), spec.federation(1)
    assert a.shards[0].x.tobytes() == b.shards[0].x.tobytes()
    assert spec.federation(2).shards[0].x.tobytes() != a.shards[0].x.tobytes()
    cfg = spec.fed_config("fedreg", 4)
    assert cfg.variant == "fedreg" and cfg.seed == 4
