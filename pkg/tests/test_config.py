import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from apprentice.config import DEFAULT_FINE_TUNE_SCHEDULE, KNOWN_KEYS, ConfigError, parse_config
from apprentice.quant import QuantSpec

BASE = """\
# toy run
scheme = A
model.family = mnist_mlp
model.widths = 784, 32, 16, 10
teacher.widths = 784, 64, 32, 10
student.quant = 8A,2W
lr = 0.1
epochs = 3
distill.gamma = 0.25   # trailing comment
"""


def test_parses_fields():
    cfg = parse_config(BASE)
    assert cfg.scheme == "A" and cfg.epochs == 3 and cfg.lr_schedule == ((0.1, 3),)
    assert cfg.student_spec.widths == (784, 32, 16, 10)
    assert cfg.teacher_spec.widths == (784, 64, 32, 10)
    assert cfg.student_quant == QuantSpec.parse("8A,2W")
    assert cfg.distill.gamma == 0.25 and cfg.distill.alpha == 1.0


def test_overrides_last_wins():
    cfg = parse_config(BASE, ["distill.gamma=0", "distill.gamma = 0.75"])
    assert cfg.distill.gamma == 0.75


def test_override_line_numbers_continue():
    n = len(BASE.splitlines())
    with pytest.raises(ConfigError) as exc:
        parse_config(BASE, ["seed=1", "bogus=2"])
    assert exc.value.line == n + 2


@pytest.mark.parametrize("text,line,match", [
    ("scheme = A\nmodel.famly = mnist_mlp", 2, "unknown key"),
    ("scheme = A\nseed = x", 2, "seed"),
    ("scheme = A\njust words", 2, "key = value"),
    ("scheme = A\nmodel.family = mnist_mlp\nlr_schedule = 0.1", 3, "lr:epochs"),
])
def test_errors_carry_line(text, line, match):
    with pytest.raises(ConfigError, match=match) as exc:
        parse_config(text)
    assert exc.value.line == line


@pytest.mark.parametrize("body,match", [
    ("model.family = mnist_mlp", "scheme"),
    ("scheme = A", "model.family"),
    ("scheme = Z\nmodel.family = mnist_mlp", "scheme must be"),
    ("scheme = B\nmodel.family = mnist_convnet\nmodel.widths = 4,8,16", "teacher.checkpoint"),
    ("scheme = C\nmodel.family = mnist_convnet\nmodel.widths = 4,8,16\nteacher.logit_cache = x", "prime"),
    ("scheme = A\nmodel.family = mnist_convnet\nmodel.widths = 4,8,16\nwarm_start_epochs = 2", "only valid"),
    ("scheme = A\nmodel.family = mnist_convnet\nmodel.widths = 4,8,16\nteacher.quant = 8A,2W", "teacher"),
    ("scheme = A\nmodel.family = mnist_mlp\nmodel.widths = 784,10\nstudent.quant = 8A,4W", "exempt_first_last"),
    ("scheme = A\nmodel.family = mnist_convnet\nmodel.widths = 4,8,16\nlr = 0.1\nlr_schedule = 0.1:2", "either"),
    ("scheme = A\nmodel.family = mnist_convnet\nmodel.widths = 4,8,16\nepochs = 3\nlr_schedule = 0.1:2", "disagrees"),
    ("scheme = A\nmodel.family = mnist_convnet\nmodel.widths = 4,8,16\ndistill.tau = 0", "tau"),
])
def test_invalid_configs(body, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(body)


def test_two_layer_mlp_without_exemption_ok():
    cfg = parse_config("scheme = A\nmodel.family = mnist_mlp\nmodel.widths = 784,10\nstudent.quant = 8A,4W\n"
                       "student.exempt_first_last = false")
    assert not cfg.student_quant.exempt_first_last


def test_scheme_c_default_schedule():
    cfg = parse_config("scheme = C\nmodel.family = mnist_convnet\nmodel.widths = 4,8,16\n"
                       "student.prime_checkpoint = p\nteacher.checkpoint = t")
    assert cfg.lr_schedule == DEFAULT_FINE_TUNE_SCHEDULE == ((1e-3, 12), (1e-4, 8), (1e-5, 5))
    assert cfg.epochs == 25 and cfg.lr_at(12) == 1e-3 and cfg.lr_at(13) == 1e-4 and cfg.lr_at(25) == 1e-5


def test_warm_start_within_run():
    text = "scheme = B\nmodel.family = mnist_convnet\nmodel.widths = 4,8,16\nteacher.logit_cache = c\nepochs = 4\n"
    assert parse_config(text + "warm_start_epochs = 4").warm_start_epochs == 4
    with pytest.raises(ConfigError, match="within"):
        parse_config(text + "warm_start_epochs = 5")


def test_missing_files_checked_on_request(tmp_path):
    cfg = parse_config("scheme = B\nmodel.family = mnist_convnet\nmodel.widths = 4,8,16\n"
                       f"teacher.checkpoint = {tmp_path / 'nope.appr'}")
    with pytest.raises(ConfigError, match="does not exist"):
        cfg.validate(check_files=True)


def test_augment_values():
    body = "scheme = A\nmodel.family = mnist_convnet\nmodel.widths = 4,8,16\n"
    assert parse_config(body + "data.augment = shift").data.augment == "shift"
    assert parse_config(body + "data.augment = yes").data.augment is True


def test_documented_keys_present():
    for key in ("scheme", "lr_schedule", "distill.tau", "teacher.logit_cache", "student.prime_checkpoint",
                "warm_start_epochs", "data.dir", "run.dir"):
        assert key in KNOWN_KEYS


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 1000), min_size=1, max_size=5))
def test_seed_overrides_last_wins(seeds):
    cfg = parse_config(BASE, [f"seed={s}" for s in seeds])
    assert cfg.seed == seeds[-1]
