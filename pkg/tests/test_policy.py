"""Policy lifecycle: configs, normalization, windowing, train/act/evaluate."""

import numpy as np
import pytest

from r3d.dataio import (
    ActionChunk,
    Episode,
    Observation,
    load_checkpoint,
    save_checkpoint,
)
from r3d.encoder import init_encoder_params
from r3d.dataio import Checkpoint
from r3d.pointcloud import AugmentConfig, PointCloud
from r3d.policy import (
    NormStats,
    PolicyModel,
    TrainConfig,
    act,
    default_patch_layout,
    evaluate,
    filter_static_frames,
    make_windows,
    train,
)
from r3d.rng import Rng
from r3d.synthenv import TaskSpec, forward_kinematics, gen_demos, reach_task


def tiny_config(**kw):
    base = dict(epochs=2, batch_size=4, t_o=2, t_a=4, n_p=32, n_q=4,
                encoder_preset="tiny", decoder_depth=1, schedule_k=5,
                lr=1e-3, seed=0, execute_steps=4,
                augment=AugmentConfig(coord_noise_sigma=0.0, proprio_noise_sigma=0.0))
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def demo_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("demos")
    gen_demos(reach_task(n_p=32), 3, Rng(100), path)
    return path


def test_train_config_round_trip_and_validation():
    cfg = tiny_config()
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        tiny_config(batch_size=0)
    with pytest.raises(ValueError):
        tiny_config(execute_steps=9)
    with pytest.raises(ValueError):
        tiny_config(lr_schedule="warmup")


def test_default_patch_layout():
    assert default_patch_layout(1024) == (64, 32)
    assert default_patch_layout(8192) == (256, 64)
    assert default_patch_layout(16) == (16, 16)


def fake_episode(actions):
    cloud = PointCloud(np.zeros((4, 3), dtype=np.float32),
                       np.zeros((4, 3), dtype=np.float32))
    frames = []
    for a in actions:
        joint = np.asarray(a, dtype=np.float32)
        frames.append((Observation(cloud, joint), joint,
                       forward_kinematics(joint).astype(np.float32)))
    return Episode(frames, task_id="reach")


def test_filter_static_frames_dedupes_runs():
    a = [0.1, 0.2, 0.3, 0.0]
    b = [0.4, 0.2, 0.3, 0.0]
    c = [0.4, 0.5, 0.3, 0.0]
    ep = fake_episode([a, a, b, b, b, c])
    out = filter_static_frames(ep)
    assert [tuple(f[1]) for f in out.frames] == [tuple(np.float32(x) for x in v)
                                                 for v in (a, b, c)]
    twice = filter_static_frames(out)
    assert len(twice) == 3  # idempotent
    # exactly-at-tolerance differences still count as static
    eps_ep = fake_episode([a, list(np.asarray(a) + 1e-10)])
    assert len(filter_static_frames(eps_ep)) == 1


def test_make_windows_padding():
    acts = [[float(i), 0.0, 0.0, 0.0] for i in range(3)]
    ep = fake_episode(acts)
    wins = make_windows(ep, t_o=2, t_a=4)
    assert len(wins) == 3
    # first window: history pads with frame 0 twice
    assert np.array_equal(wins[0].proprios[0], wins[0].proprios[1])
    assert wins[0].joint_chunk[:3, 0].tolist() == [0.0, 1.0, 2.0]
    assert wins[0].joint_chunk[3, 0] == 2.0  # chunk pads with the last action
    assert np.array_equal(wins[2].joint_chunk[1], wins[2].joint_chunk[3])
    assert wins[1].proprios[0, 0] == 0.0 and wins[1].proprios[1, 0] == 1.0
    # quaternions in ee chunks stay unit with w >= 0
    norms = np.linalg.norm(wins[0].ee_chunk[:, 3:], axis=1)
    assert np.allclose(norms, 1.0, atol=1e-6)


def test_norm_stats_round_trip_and_degenerate():
    ep = fake_episode([[0.0, -1.0, 5.0, 0.0], [2.0, 3.0, 5.0, 0.0]])
    ns = NormStats.from_episodes([ep])
    assert np.array_equal(ns.joint_lo, [0, -1, 5, 0])
    assert np.array_equal(ns.joint_hi, [2, 3, 5, 0])
    x = np.array([[1.0, 1.0, 5.0, 0.0]], dtype=np.float32)
    n = ns.normalize_joint(x)
    assert np.allclose(n, [[0.0, 0.0, 0.0, 0.0]])  # degenerate channels hit 0
    assert np.allclose(ns.denormalize_joint(n), x)
    lo, hi = ns.joint_envelope(margin=0.1)
    assert np.allclose(lo[:2], [-0.2, -1.4]) and np.allclose(hi[:2], [2.2, 3.4])
    back = NormStats.from_tensors(ns.to_tensors())
    assert np.array_equal(back.joint_lo, ns.joint_lo)
    assert np.array_equal(back.ee_hi, ns.ee_hi)


def test_policy_model_checkpoint_round_trip():
    cfg = tiny_config()
    model = PolicyModel.build(cfg, rng=Rng(1))
    ck = model.to_checkpoint(step_count=7)
    back = PolicyModel.from_checkpoint(ck)
    assert back.enc_cfg.to_dict() == model.enc_cfg.to_dict()
    assert back.dec_cfg == model.dec_cfg
    assert back.train_cfg == cfg
    for p in model.params:
        assert np.array_equal(back.params[p.name].data, p.data)
    assert np.array_equal(back.norm.joint_lo, model.norm.joint_lo)


def test_load_state_negatives():
    model = PolicyModel.build(tiny_config(), rng=Rng(2))
    ck = model.to_checkpoint()
    other = PolicyModel.build(tiny_config(decoder_depth=2), rng=Rng(3))
    with pytest.raises(ValueError, match="config"):
        other.load_state(ck)
    bad = Checkpoint(ck.config, dict(ck.tensors), dict(ck.norm_stats))
    bad.tensors.pop("dec.head_joint.w")
    with pytest.raises(ValueError, match="names"):
        model.load_state(bad)
    bad2 = Checkpoint(ck.config, dict(ck.tensors), dict(ck.norm_stats))
    bad2.tensors["dec.head_joint.w"] = np.zeros((3, 3), dtype=np.float32)
    with pytest.raises(ValueError, match="shape"):
        model.load_state(bad2)


def test_train_smoke_and_byte_determinism(tmp_path, demo_dir):
    cfg = tiny_config()
    res1 = train(cfg, demo_dir, tmp_path / "a")
    res2 = train(cfg, demo_dir, tmp_path / "b")
    assert res1.steps == res2.steps > 0
    assert np.isfinite(res1.final_train_loss)
    assert (tmp_path / "a/checkpoint.r3dc").read_bytes() == \
           (tmp_path / "b/checkpoint.r3dc").read_bytes()
    assert (tmp_path / "a/metrics.csv").read_bytes() == \
           (tmp_path / "b/metrics.csv").read_bytes()
    header = (tmp_path / "a/metrics.csv").read_text().splitlines()[0]
    assert header == "step,epoch,split,loss,loss_joint,loss_ee,wall_ms"
    ck = load_checkpoint(res1.checkpoint_path)
    assert ck.step_count == res1.steps
    assert ck.config["train"]["epochs"] == 2


def test_train_rejects_mismatched_dims(tmp_path, demo_dir):
    with pytest.raises(ValueError, match="disagree"):
        train(tiny_config(n_p=64), demo_dir, tmp_path)


def test_train_with_pretrained_encoder(tmp_path, demo_dir):
    cfg = tiny_config(epochs=1)
    scratch = train(cfg, demo_dir, tmp_path / "scratch")
    enc_cfg = PolicyModel.build(cfg, rng=Rng(4)).enc_cfg
    store = init_encoder_params(enc_cfg, Rng(99))
    warm_ck = Checkpoint(config={"encoder": enc_cfg.to_dict()},
                         tensors={p.name: p.data.copy() for p in store})
    warm = train(cfg, demo_dir, tmp_path / "warm", init_encoder=warm_ck)
    a = load_checkpoint(scratch.checkpoint_path)
    b = load_checkpoint(warm.checkpoint_path)
    assert not np.array_equal(a.tensors["enc.patch.fc1.w"], b.tensors["enc.patch.fc1.w"])


def test_act_contract(tmp_path, demo_dir):
    cfg = tiny_config()
    res = train(cfg, demo_dir, tmp_path / "run")
    model = PolicyModel.from_checkpoint(res.checkpoint)
    env_obs = []
    from r3d.synthenv import SynthEnv

    env = SynthEnv(reach_task(n_p=32))
    env_obs.append(env.reset(Rng(5)))
    env_obs.append(env.observe())
    chunk = act(model, env_obs, Rng(6))
    assert isinstance(chunk, ActionChunk)
    assert chunk.joint.shape == (cfg.t_a, cfg.n_q)
    assert chunk.ee.shape == (cfg.t_a, 7)
    lo, hi = model.norm.joint_envelope()
    assert (chunk.joint >= lo - 1e-6).all() and (chunk.joint <= hi + 1e-6).all()
    assert np.allclose(np.linalg.norm(chunk.ee[:, 3:], axis=1), 1.0, atol=1e-5)
    again = act(res.checkpoint_path, env_obs, Rng(6))  # path form, same seed
    assert np.array_equal(chunk.joint, again.joint)
    assert np.array_equal(chunk.ee, again.ee)


class GreedyReachPolicy:
    """Perception-only scripted policy: read the target off the red points,
    emit a straight-line chunk of bounded steps toward it."""

    def __init__(self, t_a=4, step=0.05):
        self.t_a = t_a
        self.step = step

    def __call__(self, history, rng):
        obs = history[-1]
        # the target renders at (0.8, 0.1, 0.1) +- 0.02 jitter; R > 0.65
        # excludes the gray table, green agent and blue distractors
        red = obs.cloud.colors[:, 0] > 0.65
        target = obs.cloud.points[red].mean(axis=0)
        pos = obs.proprio[:3].astype(np.float64)
        rows = []
        for _ in range(self.t_a):
            delta = target - pos
            dist = np.linalg.norm(delta)
            pos = pos + (delta if dist <= self.step else delta * self.step / dist)
            rows.append(np.concatenate([pos, [0.0]]))
        return ActionChunk(np.stack(rows).astype(np.float32))


def test_evaluate_with_scripted_callable():
    task = reach_task(n_p=256)
    rate, records = evaluate(GreedyReachPolicy(), task, 4, Rng(7),
                             execute_steps=4, t_o=2)
    assert rate == 1.0
    assert len(records) == 4
    for r in records:
        assert r["success"] and r["steps"] <= task.max_steps
        assert r["final_dist"] <= task.success_tolerance


def test_evaluate_with_model_records(tmp_path, demo_dir):
    cfg = tiny_config()
    res = train(cfg, demo_dir, tmp_path / "run")
    task = TaskSpec("reach", reach_task().workspace, 0.03, max_steps=6,
                    n_distractors=2, cloud_points_per_entity=192, n_p=32)
    rate, records = evaluate(res.checkpoint, task, 2, Rng(8), execute_steps=4)
    assert 0.0 <= rate <= 1.0 and len(records) == 2
    assert all(set(r) == {"episode", "steps", "success", "final_dist"} for r in records)
    wrong = TaskSpec("reach", reach_task().workspace, 0.03, max_steps=6,
                     n_distractors=2, cloud_points_per_entity=192, n_p=64)
    with pytest.raises(ValueError):
        evaluate(res.checkpoint, wrong, 1, Rng(9))
