import copy
from pathlib import Path

import pytest
import yaml
from hypothesis import given, strategies as st

from fsba import config as config_mod
from fsba.config import ConfigErrors, ExperimentConfig, from_dict, load, loads

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@pytest.mark.parametrize("name", ["reference_benign", "reference_boba", "reference_fsba"])
def test_shipped_configs_round_trip(name, tmp_path):
    cfg = load(CONFIGS / f"{name}.yaml")
    assert cfg.attack.kind == name.split("_")[1]
    text = cfg.to_yaml()
    again = loads(text)
    assert again.to_yaml() == text
    assert again.hash() == cfg.hash()
    config_mod.dump(cfg, tmp_path / "c.yaml")
    assert load(tmp_path / "c.yaml").to_yaml() == text


def test_reference_configs_differ_only_in_name_and_kind():
    dicts = [load(CONFIGS / f"reference_{k}.yaml").to_dict() for k in ("benign", "boba", "fsba")]
    for d in dicts:
        d.pop("name")
        d["attack"].pop("kind")
    assert dicts[0] == dicts[1] == dicts[2]


def test_defaults_are_valid():
    cfg = from_dict({})
    assert cfg == ExperimentConfig()
    assert cfg.train_video_seed == 1 and cfg.eval_video_seed == 2


def test_hash_ignores_output_dir_only():
    a = from_dict({})
    assert from_dict({"output_dir": "/elsewhere"}).hash() == a.hash()
    assert from_dict({"seed": 1}).hash() != a.hash()


def test_seed_propagates_to_data_seeds():
    cfg = from_dict({"seed": 3})
    assert (cfg.train_video_seed, cfg.eval_video_seed, cfg.diagnose_seed) == (3001, 3002, 3003)
    cfg = from_dict({"seed": 3, "dataset": {"train_seed": 9}})
    assert cfg.train_video_seed == 9


def test_all_problems_are_listed():
    bad = {
        "frobnicate": 1,
        "train": {"epochs": -1, "lr": "fast"},
        "attack": {"kind": "trojan"},
        "eval": {"modes": []},
    }
    with pytest.raises(ConfigErrors) as info:
        from_dict(bad)
    text = "\n".join(info.value.problems)
    for needle in ("frobnicate: unknown key", "train.lr", "attack.kind", "eval.modes", "train"):
        assert needle in text
    assert len(info.value.problems) >= 4


def test_train_seed_is_rejected():
    with pytest.raises(ConfigErrors, match="train.seed"):
        from_dict({"train": {"seed": 5}})


@pytest.mark.parametrize(
    "patch, needle",
    [
        ({"diagnose": {"crop": "both"}}, "diagnose.crop"),
        ({"attack": {"trigger": "no_such_trigger.png"}}, "attack.trigger"),
        ({"dataset": {"source": "otb"}}, "otb_train_root"),
        ({"dataset": {"n_samples": 0}}, "dataset.n_samples"),
        ({"tracker": {"template_size": 7}}, "tracker"),
        ({"seed": "zero"}, "seed"),
        ({"train": {"nesterov": True}}, "train.nesterov: unknown key"),
        ({"defenses": [{"kind": "finetune", "source": "elsewhere"}]}, "defenses[0].source"),
        ({"defenses": [{"kind": "finetune", "lr": 0.0}]}, "defenses[0].lr"),
        ({"defenses": [{"kind": "finetune", "source": "outside"}], "dataset": {"source": "otb"}}, "outside fine-tuning"),
        ({"defenses": [{"kind": "noise", "std": 0.5}]}, "defenses[0].std"),
    ],
)
def test_specific_problems(patch, needle):
    with pytest.raises(ConfigErrors) as info:
        from_dict(patch)
    assert any(needle in p for p in info.value.problems)


def test_missing_file_and_bad_yaml(tmp_path):
    with pytest.raises(ConfigErrors, match="does not exist"):
        load(tmp_path / "absent.yaml")
    with pytest.raises(ConfigErrors, match="yaml"):
        loads("a: [1, 2")


def test_relative_trigger_path_resolves_against_config(tmp_path):
    from fsba.trigger import generate_builtin

    generate_builtin("checker").save(tmp_path / "mine.png")
    (tmp_path / "c.yaml").write_text(yaml.safe_dump({"attack": {"trigger": "mine.png"}}))
    cfg = load(tmp_path / "c.yaml")
    assert Path(cfg.attack.trigger) == tmp_path / "mine.png"


@given(
    seed=st.integers(0, 10_000),
    psi=st.floats(0.001, 0.05),
    gamma=st.floats(0.01, 1.0),
    epochs=st.integers(0, 50),
)
def test_round_trip_property(seed, psi, gamma, epochs):
    cfg = from_dict(
        {
            "seed": seed,
            "train": {"epochs": epochs},
            "attack": {"modification_rate": psi, "poisoning_rate": gamma},
        }
    )
    text = cfg.to_yaml()
    assert loads(text).to_yaml() == text


def test_replace_keeps_original():
    cfg = from_dict({})
    before = copy.deepcopy(cfg.to_dict())
    other = cfg.replace(seed=4)
    assert other.seed == 4 and cfg.to_dict() == before
