import json

import numpy as np
import pytest
import torch

from acids.adapter import AdaptConfig
from acids.checkpoint import config_hash, load_checkpoint, read_header, save_checkpoint
from acids.config import RunConfig
from acids.encoder import LayerSpec, ModelConfig, init_model, parameter_digest, register_domain
from acids.errors import IncompatibleCheckpoint, InvalidConfig
from acids.presets import PRESETS
from acids.trainer import TrainConfig, TrainState


def model(**kw):
    m = init_model(ModelConfig(input_shape=(4,), trunk=[LayerSpec(6)], n_clusters=3, n_overclusters=6, **kw))
    register_domain(m, 0)
    register_domain(m, 2)
    register_domain(m, 5, share_with=0)
    m.source_domains[:] = [0, 2]
    return m


def test_round_trip_preserves_outputs_exactly(tmp_path):
    m = model()
    x = np.random.default_rng(0).normal(size=(7, 4)).astype(np.float32)
    m(x, 0, mode="train")  # move the running statistics off their initial values
    save_checkpoint(tmp_path / "m.bin", m, adapt_config=AdaptConfig(), extra={"note": 1})
    ck = load_checkpoint(tmp_path / "m.bin")
    assert parameter_digest(ck.model) == parameter_digest(m)
    for d in (0, 2, 5):
        assert torch.equal(ck.model(x, d, mode="eval"), m(x, d, mode="eval"))
    assert ck.model.bank(5) == 0 and ck.model.source_domains == [0, 2]
    assert ck.adapt_config["epsilon_conf"] == 0.9 and ck.extra == {"note": 1}
    assert ck.config_hash == config_hash(m.config)


def test_header_layout(tmp_path):
    m = model()
    state = TrainState(epoch=2, step=9)
    save_checkpoint(tmp_path / "m.bin", m, state, TrainConfig())
    raw = (tmp_path / "m.bin").read_bytes()
    assert raw[:8] == b"ACIDSCK1"
    header, _ = read_header(tmp_path / "m.bin")
    groups = {b["group"] for b in header["blobs"]}
    assert {"parameter", "bn_statistics"} <= groups
    ck = load_checkpoint(tmp_path / "m.bin")
    assert ck.state.epoch == 2 and ck.state.step == 9


def test_rejects_garbage_and_tampered_hash(tmp_path):
    (tmp_path / "bad.bin").write_bytes(b"not a checkpoint at all")
    with pytest.raises(IncompatibleCheckpoint):
        load_checkpoint(tmp_path / "bad.bin")
    save_checkpoint(tmp_path / "m.bin", model())
    raw = bytearray((tmp_path / "m.bin").read_bytes())
    header, _ = read_header(tmp_path / "m.bin")
    old = header["config_hash"].encode()
    i = raw.find(old)
    raw[i:i + len(old)] = b"0" * len(old)
    (tmp_path / "t.bin").write_bytes(bytes(raw))
    with pytest.raises(IncompatibleCheckpoint):
        load_checkpoint(tmp_path / "t.bin")


def test_config_hash_tracks_architecture():
    a = ModelConfig(input_shape=(4,), n_clusters=3, n_overclusters=6)
    assert config_hash(a) == config_hash(ModelConfig(input_shape=(4,), n_clusters=3, n_overclusters=6))
    assert config_hash(a) != config_hash(ModelConfig(input_shape=(4,), n_clusters=4, n_overclusters=6))


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_run_config_json_round_trip(name, tmp_path):
    cfg = RunConfig.from_preset(name, seed=3)
    assert cfg.train.seed == cfg.adapt.seed == cfg.model.seed == 3
    cfg.save(tmp_path / "c.json")
    back = RunConfig.load(tmp_path / "c.json")
    assert back.to_dict() == cfg.to_dict()
    assert back.with_seed(4).train.seed == 4


def test_run_config_rejects_unknown_keys():
    d = RunConfig.from_preset("vector-4c-4d").to_dict()
    with pytest.raises(InvalidConfig):
        RunConfig.from_dict({**d, "bogus": 1})
    d["train"]["bogus"] = 1
    with pytest.raises(InvalidConfig):
        RunConfig.from_dict(json.loads(json.dumps(d)))
    d = RunConfig.from_preset("vector-4c-4d").to_dict()
    d["schema_version"] = 99
    with pytest.raises(InvalidConfig):
        RunConfig.from_dict(d)
