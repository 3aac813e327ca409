"""Segmentation pretraining: learns patch classes, transfers into a policy."""

import numpy as np
import pytest

from r3d.dataio import load_checkpoint
from r3d.encoder import load_pretrained
from r3d.policy import PolicyModel, TrainConfig
from r3d.pretrain import PretrainConfig, pretrain
from r3d.rng import Rng


def small_cfg(**kw):
    base = dict(n_scenes=6, epochs=3, batch_size=2, lr=1e-3, seed=0,
                n_p=128, encoder_preset="tiny")
    base.update(kw)
    return PretrainConfig(**base)


def test_pretrain_config_validation():
    with pytest.raises(ValueError):
        small_cfg(n_scenes=1)
    with pytest.raises(ValueError):
        small_cfg(epochs=0)
    with pytest.raises(ValueError):
        small_cfg(holdout_fraction=1.0)
    cfg = small_cfg()
    assert cfg.to_dict()["n_p"] == 128


def test_pretrain_learns_above_chance(tmp_path):
    # 4 balanced-ish classes; even a few epochs should beat the 0.25 floor
    res = pretrain(small_cfg(epochs=6), tmp_path)
    assert res.steps == 6 * 2  # (6 scenes - 1 holdout) // 2 per epoch
    assert res.final_accuracy > 0.5
    assert res.checkpoint_path.is_file()
    lines = res.metrics_path.read_text().splitlines()
    assert lines[0] == "step,epoch,split,loss,accuracy,wall_ms"
    val_rows = [l for l in lines[1:] if ",val," in l]
    assert len(val_rows) == 6
    # deterministic mode zeroes wall_ms
    assert all(l.endswith(",0") for l in lines[1:])


def test_pretrain_byte_determinism(tmp_path):
    a = pretrain(small_cfg(), tmp_path / "a")
    b = pretrain(small_cfg(), tmp_path / "b")
    assert a.checkpoint_path.read_bytes() == b.checkpoint_path.read_bytes()
    assert a.metrics_path.read_bytes() == b.metrics_path.read_bytes()


def test_pretrained_encoder_loads_into_policy(tmp_path):
    res = pretrain(small_cfg(), tmp_path)
    ck = load_checkpoint(res.checkpoint_path)
    assert ck.config["n_classes"] == 4
    assert ck.config["pretrain"]["n_scenes"] == 6
    policy_cfg = TrainConfig(epochs=1, batch_size=2, t_o=2, t_a=4, n_p=128,
                             encoder_preset="tiny", decoder_depth=1, schedule_k=5,
                             execute_steps=4)
    model = PolicyModel.build(policy_cfg, rng=Rng(1))
    before = model.params["enc.patch.fc1.w"].data.copy()
    load_pretrained(model.params, model.enc_cfg, ck)
    after = model.params["enc.patch.fc1.w"].data
    assert not np.array_equal(before, after)
    assert np.array_equal(after, ck.tensors["enc.patch.fc1.w"])
    # decoder side untouched
    assert "seg.head.w" not in model.params.names()


def test_pretrained_encoder_rejects_mismatched_layout(tmp_path):
    res = pretrain(small_cfg(), tmp_path)
    ck = load_checkpoint(res.checkpoint_path)
    other = TrainConfig(epochs=1, batch_size=2, t_o=2, t_a=4, n_p=64,
                        encoder_preset="tiny", decoder_depth=1, schedule_k=5,
                        execute_steps=4)
    model = PolicyModel.build(other, rng=Rng(2))
    with pytest.raises(ValueError, match="mismatch"):
        load_pretrained(model.params, model.enc_cfg, ck)
