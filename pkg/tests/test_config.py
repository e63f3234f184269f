import numpy as np
import pytest

from guidedgan import config as config_mod
from guidedgan.checkpoint import Checkpoint, CheckpointError, config_hash
from guidedgan.config import ConfigError, ExperimentConfig
from guidedgan.models import AcousticModelSpec, build_acoustic_model


def test_default_config_round_trips_losslessly(tmp_path):
    cfg = ExperimentConfig()
    path = tmp_path / "run.ini"
    config_mod.save(cfg, path)
    back = config_mod.load(path)
    assert back == cfg
    assert config_mod.dumps(back) == path.read_text()
    assert back.hash() == cfg.hash()


def test_override_changes_value_and_hash():
    cfg = ExperimentConfig()
    zero = config_mod.override(cfg, ["gan.guidance_weight=0"])
    assert zero.gan.guidance_weight == 0
    assert zero.hash() != cfg.hash()
    named = config_mod.override(cfg, ["generator.kind=encoder-decoder", "corruption.gain_range=[0.5, 0.6]"])
    assert named.gan.generator.kind == "encoder-decoder"
    assert named.corruption.gain_range == (0.5, 0.6)


@pytest.mark.parametrize("item", ["gan.guidance_weight", "nosuch.key=1", "gan.nosuch=1",
                                  "gan.guidance_weight=-1", "gan.loss=hinge",
                                  'gan.generator={"init": "identity"}'])
def test_bad_overrides_are_config_errors(item):
    with pytest.raises(ConfigError):
        config_mod.override(ExperimentConfig(), [item])


def test_validation_catches_inconsistent_sections():
    with pytest.raises(ConfigError):
        config_mod.override(ExperimentConfig(), ["corpus.n_utterances=10"])
    with pytest.raises(ConfigError):
        config_mod.override(ExperimentConfig(), ["acoustic_model.n_senones=10"])
    with pytest.raises(ConfigError):
        config_mod.loads("[experiment]\nseeds = []\n")


def test_unknown_section_and_bad_json_rejected():
    with pytest.raises(ConfigError):
        config_mod.loads("[plotting]\nx = 1\n")
    with pytest.raises(ConfigError):
        config_mod.loads("[gan]\nlr_g = fast\n")


def test_missing_file_is_config_error(tmp_path):
    with pytest.raises(ConfigError):
        config_mod.load(tmp_path / "absent.ini")


def test_partial_file_fills_defaults():
    cfg = config_mod.loads("[gan]\nmax_epochs = 3\n")
    assert cfg.gan.max_epochs == 3
    assert cfg.corpus == ExperimentConfig().corpus


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    am = build_acoustic_model(AcousticModelSpec(feature_dim=4, n_senones=6, hidden_units=8,
                                                hidden_layers=2), seed=1)
    for p in am.parameters():
        p.data += np.float32(1e-7) * np.arange(p.data.size, dtype=np.float32).reshape(p.shape)
    ck = Checkpoint.from_module(am, metadata={"seed": 1, "dev_seer": 0.25, "config_hash": "abc"})
    path = tmp_path / "am.ggan"
    ck.save(path)
    back = Checkpoint.load(path)
    assert back.to_bytes() == ck.to_bytes()
    assert back.metadata["dev_seer"] == 0.25
    rebuilt = back.build("acoustic_model")
    for name, arr in am.state_dict().items():
        assert rebuilt.state_dict()[name].tobytes() == np.asarray(arr, np.float32).tobytes()


def test_checkpoint_header_is_text_with_little_endian_payload():
    am = build_acoustic_model(AcousticModelSpec(feature_dim=2, n_senones=2, hidden_units=2,
                                                hidden_layers=1))
    blob = Checkpoint.from_module(am).to_bytes()
    assert blob.startswith(b"GGAN 1\n[architecture]\n")
    header, _, payload = blob.partition(b"\nEND\n")
    n_values = sum(np.asarray(a).size for a in am.state_dict().values())
    assert len(payload) == 4 * n_values


def test_checkpoint_rejects_other_versions_and_garbage():
    am = build_acoustic_model(AcousticModelSpec(feature_dim=2, n_senones=2, hidden_units=2,
                                                hidden_layers=1))
    blob = Checkpoint.from_module(am).to_bytes()
    with pytest.raises(CheckpointError):
        Checkpoint.from_bytes(blob.replace(b"GGAN 1", b"GGAN 2", 1))
    with pytest.raises(CheckpointError):
        Checkpoint.from_bytes(b"hello")
    with pytest.raises(CheckpointError):
        Checkpoint.from_bytes(blob + b"\x00")
    with pytest.raises(CheckpointError):
        Checkpoint.from_module(am).build("generator")


def test_config_hash_is_order_independent():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})
