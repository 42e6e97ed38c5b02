from pathlib import Path

import pytest

from vlcritic.config import ConfigError, RunConfig, apply_override, from_dict, load_config

DEFAULT = Path(__file__).resolve().parents[1] / "configs" / "default.yaml"


def test_default_file_matches_builtin_defaults():
    assert load_config(DEFAULT).hash() == RunConfig().hash() == load_config().hash()


def test_overrides_and_seed_inheritance():
    cfg = load_config(DEFAULT, ["seed=7", "rl.hidden=[64, 64]", "objective.alpha=0",
                                "trainer.sampling.budget=8"])
    assert cfg.seed == cfg.data.seed == cfg.trainer.seed == cfg.rl.seed == cfg.eval.seed == 7
    assert cfg.rl.hidden == (64, 64)
    assert cfg.trainer.objective.alpha == 0
    assert cfg.trainer.sampling.budget == 8
    own = from_dict({"seed": 7, "rl": {"seed": 2}})
    assert own.rl.seed == 2 and own.trainer.seed == 7


def test_hash_tracks_content():
    assert RunConfig().hash() == from_dict({}).hash()
    assert from_dict({"objective": {"alpha": 1.0}}).hash() != RunConfig().hash()
    prov = RunConfig().provenance()
    assert prov["config_hash"] == RunConfig().hash() and "torch" in prov["versions"]


@pytest.mark.parametrize("data, match", [
    ({"critic": {"embed_dims": 3}}, "unknown key"),
    ({"bogus": {}}, "unknown key"),
    ({"rl": {"gamma": 1.5}}, "gamma"),
    ({"trainer": {"objective": {"alpha": 1}}}, "objective"),
    ({"data": 3}, "mapping"),
    ({"data": {"corrupt_p": 2}}, "corrupt_p"),
])
def test_invalid_configs(data, match):
    with pytest.raises(ConfigError, match=match):
        from_dict(data)


def test_override_syntax_and_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        apply_override({}, "rl.gamma")
    with pytest.raises(ConfigError):
        apply_override({"rl": 3}, "rl.gamma=0.5")
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.yaml")


def test_binary_objective_forces_two_frame_sampling():
    cfg = from_dict({"objective": {"objective": "binary_classification"}})
    assert cfg.trainer.sampling.mode == "first_last"
