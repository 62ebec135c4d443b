import json

import numpy as np
import pytest
import yaml

from hybrid_rl import policy as P
from hybrid_rl.config import ConfigError, TrainConfig, apply_override, from_dict, load_config
from hybrid_rl.grpo import collect_groups
from hybrid_rl.mpo import build_preference_pairs
from hybrid_rl.records import read_records, to_record, write_records
from hybrid_rl.ssb import SelectiveSampleBuffer


def test_defaults_validate_and_round_trip(tmp_path):
    cfg = TrainConfig()
    cfg.validate()
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump(cfg.to_dict()))
    assert load_config(path).to_dict() == cfg.to_dict()


def test_manifest_is_a_config_source(tmp_path):
    cfg = apply_override(TrainConfig(), "grpo.iterations=7")
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps({"manifest_version": 1, "config": cfg.to_dict()}))
    assert load_config(path).grpo.iterations == 7


@pytest.mark.parametrize("data,field", [
    ({"grpo": {"iterationz": 3}}, "grpo.iterationz"),
    ({"stages": ["grpo", "mpo"]}, "stages"),
    ({"stages": ["rl"]}, "stages[0]"),
    ({"mpo": {"freeze": "all"}}, "mpo.freeze"),
    ({"grpo": {"clip": {"epsilon": 1.5}}}, "grpo.clip.epsilon"),
    ({"grpo": {"buffer": {"enabled": "yes"}}}, "grpo.buffer.enabled"),
    ({"mpo": {"weights": {"w_pref": 0, "w_qual": 0, "w_gen": 0}}}, "mpo.weights"),
    ({"sft": {"optim": {"kind": "rmsprop"}}}, "sft.optim.kind"),
])
def test_invalid_fields_are_named(data, field):
    with pytest.raises(ConfigError) as err:
        from_dict(data)
    assert err.value.path == field


def test_missing_and_unparsable_files(tmp_path):
    with pytest.raises(ConfigError, match="nope.yaml"):
        load_config(tmp_path / "nope.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("a: [1,\n")
    with pytest.raises(ConfigError, match="cannot parse"):
        load_config(bad)


def test_override_parses_yaml_values():
    cfg = apply_override(TrainConfig(), "grpo.buffer.enabled=false")
    assert cfg.grpo.buffer.enabled is False
    cfg = apply_override(cfg, "stages=[mpo, grpo]")
    assert cfg.stages == ["mpo", "grpo"]
    with pytest.raises(ConfigError):
        apply_override(cfg, "grpo.iterations")


def test_records_round_trip(tmp_path, world, params):
    rng = np.random.default_rng(0)
    tasks = [world.generate_task(s) for s in range(6)] + [world.make_text_task(3, 4), world.make_task(1, 2)]
    pairs = build_preference_pairs(params, world, tasks, 4, 0.0, rng)
    groups = collect_groups(params, world, tasks, 3, 1.0, 8, rng)
    buf = SelectiveSampleBuffer()
    for g in groups:
        buf.insert(g, 1)
    items = pairs + groups + buf.snapshot()
    path = tmp_path / "r.jsonl"
    assert write_records(path, items) == len(items)
    back = list(read_records(world, path))
    assert [to_record(x) for x in back] == [to_record(x) for x in items]
    for a, b in zip(items, back):
        assert np.array_equal(a.task.visual_features, b.task.visual_features)


def test_unknown_record_kind(tmp_path, world):
    t = world.generate_task(0)
    rec = {"kind": "mystery", "task": {"seed": 0, "difficulty": t.difficulty, "operands": list(t.operands),
                                       "prompt": list(t.prompt_tokens)}}
    path = tmp_path / "r.jsonl"
    path.write_text(json.dumps(rec) + "\n")
    with pytest.raises(P.InputError, match="mystery"):
        list(read_records(world, path))
