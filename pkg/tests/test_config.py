import pytest
from hypothesis import given, settings, strategies as st

from collabcp import config as cfgmod
from collabcp.config import ConfigError, ExperimentConfig


def test_defaults_validate():
    cfg = ExperimentConfig().validate()
    assert (cfg.attack.eta, cfg.attack.epsilon, cfg.attack.pgd_iters, cfg.attack.num_attackers) == (0.1, 0.5, 25, 2)
    assert cfg.conformal.alpha == 0.1 and cfg.preset == "desk"


def test_published_hyperparameters():
    cfg = cfgmod.paper_defaults()
    assert cfg.training.learning_rate == 0.001 and cfg.training.epochs == 49
    assert cfg.preset == "paper"


def test_round_trip_text():
    cfg = ExperimentConfig().replace(attack={"epsilon": 0.9, "objective": "cls+reg"}, model={"fusion": "early"})
    assert cfgmod.loads(cfgmod.dumps(cfg)) == cfg


def test_sections_and_comments():
    cfg = cfgmod.loads("# comment\n[attack]\nepsilon = 0.25  # inline\n[model]\nuq_head = false\n")
    assert cfg.attack.epsilon == 0.25 and cfg.model.uq_head is False


@pytest.mark.parametrize(
    "text",
    [
        "[attack]\nepsilon_typo = 1\n",
        "[nonsense]\na = 1\n",
        "[experiment]\nfoo = bar\n",
        "[training]\nepochs = many\n",
        "[model]\nuq_head = maybe\n",
        "[attack]\nnum_attackers = 4\n",
        "[model]\nfusion = late\n",
        "[conformal]\nalpha = 1.5\n",
        "no section here\n",
    ],
)
def test_bad_files_are_hard_errors(text):
    with pytest.raises(ConfigError):
        cfgmod.loads(text)


def test_load_from_path(tmp_path):
    p = tmp_path / "exp.cfg"
    p.write_text("[training]\nepochs = 3\n")
    assert cfgmod.load(p).training.epochs == 3


@settings(max_examples=40, deadline=None)
@given(
    st.floats(0.001, 10, allow_nan=False),
    st.floats(0, 2, allow_nan=False),
    st.integers(0, 60),
    st.sampled_from(cfgmod.OBJECTIVES),
    st.sampled_from(cfgmod.ATTACK_PHASES),
    st.integers(0, 2**31),
)
def test_round_trip_property(eta, eps, iters, objective, phase, seed):
    cfg = ExperimentConfig().replace(
        attack={"eta": eta, "epsilon": eps, "pgd_iters": iters, "objective": objective, "phase": phase, "seed": seed}
    )
    assert cfgmod.loads(cfgmod.dumps(cfg)) == cfg
