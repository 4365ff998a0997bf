import pytest
from hypothesis import given, strategies as st

from mrigen.config import RunConfig, load_config, parse_config
from mrigen.errors import InvalidInput


def test_parse_with_comments_and_types():
    text = "# run\nlearning_rate = 2e-3\nmax_steps=50  # short\n\nlr_schedule = constant\nseed = 7\n"
    assert parse_config(text) == {"learning_rate": 2e-3, "max_steps": 50, "lr_schedule": "constant", "seed": 7}


@pytest.mark.parametrize("text, match", [
    ("bogus = 1", "unknown key"),
    ("max_steps 10", "line 1"),
    ("max_steps = ten", "max_steps"),
])
def test_parse_errors(text, match):
    with pytest.raises(InvalidInput, match=match):
        parse_config(text)


def test_defaults_and_precedence(tmp_path):
    assert load_config() == RunConfig()
    path = tmp_path / "run.cfg"
    path.write_text("max_steps = 20\nbatch_size = 4\n")
    cfg = load_config(path)
    assert (cfg.max_steps, cfg.batch_size, cfg.learning_rate) == (20, 4, 1e-4)
    # command-line values override the file; None means "flag not given"
    merged = cfg.merged(max_steps=5, batch_size=None)
    assert (merged.max_steps, merged.batch_size) == (5, 4)


@given(st.integers(1, 10_000), st.floats(1e-8, 1.0), st.sampled_from(["constant", "cosine"]),
       st.one_of(st.none(), st.integers(0, 2**31)))
def test_dumps_round_trip(steps, lr, schedule, seed):
    cfg = RunConfig(max_steps=steps, learning_rate=lr, lr_schedule=schedule, seed=seed)
    assert RunConfig(**parse_config(cfg.dumps())) == cfg


def test_train_config_conversion():
    tc = RunConfig(max_steps=3, seed=5, lr_schedule="constant").train_config()
    assert (tc.max_steps, tc.seed, tc.lr_schedule) == (3, 5, "constant")
