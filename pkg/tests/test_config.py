from dataclasses import fields, replace
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from deepsim import config
from deepsim.config import ConfigError, ExperimentConfig

BASE = "task = autoencoder\ndataset = builtin\n"


def test_parse_with_comments_and_dotted_keys():
    cfg = config.loads(BASE + "# comment\nloss.lambda_adv = 2.5  # trailing\nscale = 1/4\n")
    assert cfg.loss_lambda_adv == 2.5
    assert cfg.scale == Fraction(1, 4)


def test_unknown_key():
    with pytest.raises(ConfigError, match="unknown key 'loss.lambda_zzz'"):
        config.loads(BASE + "loss.lambda_zzz = 1\n")


def test_missing_required_key_is_named():
    with pytest.raises(ConfigError, match="'dataset'"):
        config.loads("task = autoencoder\n")


def test_bad_value_names_line():
    with pytest.raises(ConfigError, match=":3:"):
        config.loads(BASE + "seed = many\n")


def test_bad_choice():
    with pytest.raises(ConfigError, match="task"):
        config.loads("task = gan\ndataset = x\n")


def test_image_size_checks():
    with pytest.raises(ConfigError, match="multiple of 8"):
        config.loads(BASE + "image_size = 20\ndataset.size = 24\n")
    with pytest.raises(ConfigError, match="dataset.size"):
        config.loads(BASE + "image_size = 32\ndataset.size = 24\n")


def test_overrides_apply_after_file():
    cfg = config.loads(BASE + "seed = 1\n", {"seed": "5", "scale": "1/2"})
    assert cfg.seed == 5 and cfg.scale == Fraction(1, 2)


configs = st.builds(
    lambda seed, lr, adv, scale, tap, task: config.loads(
        f"task = {task}\ndataset = builtin\nseed = {seed}\nlr = {lr!r}\nloss.lambda_adv = {adv!r}\n"
        f"scale = {scale}\ncomparator.tap = {tap}\n"),
    st.integers(0, 10**6), st.floats(1e-6, 1.0), st.floats(0.0, 1e3),
    st.fractions(Fraction(1, 64), 2).filter(lambda f: f > 0), st.sampled_from(["conv1", "conv2", "fc4"]),
    st.sampled_from(config.TASKS),
)


@settings(max_examples=50, deadline=None)
@given(configs)
def test_dump_round_trips(cfg):
    assert config.loads(config.dump(cfg)) == cfg


def test_hash_ignores_volatile_keys():
    cfg = config.loads(BASE)
    same = replace(cfg, iters=5, out="elsewhere", eval_every=3, checkpoint_every=2, label="x")
    assert config.config_hash(cfg) == config.config_hash(same)
    assert config.config_hash(cfg) != config.config_hash(replace(cfg, seed=1))
    assert len(config.config_hash(cfg)) == 16


def test_every_field_has_a_parser():
    assert {f.name for f in fields(ExperimentConfig)} == set(config.PARSERS)


def test_unreadable_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        config.load(tmp_path / "none.cfg")
