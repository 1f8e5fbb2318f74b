import numpy as np
import pytest

from mflow.flow import CfgConfig, LossConfig
from mflow.nets import teacher_forward
from mflow.tensor import Tensor
from mflow.training import (Adam, NumericalAbort, RunConfig, _lr_at, clip_gradients,
                            distill_student, load_checkpoint, load_student, load_teacher,
                            params_digest, save_checkpoint, train_teacher)


def tiny_config(**kw):
    args = dict(task="gaussian", seed=1, steps=20, batch_size=8, lr=1e-3,
                hidden=[8], time_dim=8, cond_dim=4, log_every=5,
                cfg=CfgConfig(mode="teacher_null", w=0.0))
    args.update(kw)
    return RunConfig(**args)


class TestAdam:
    def test_first_step_moves_by_lr(self):
        # With bias correction, |update| ~= lr on step one regardless of scale.
        adam = Adam(lr=0.1)
        p = {"w": Tensor(np.zeros(3), requires_grad=True)}
        g = {"w": np.array([5.0, -0.01, 100.0])}
        out = adam.step(p, g)
        np.testing.assert_allclose(np.abs(out["w"].data), 0.1, rtol=1e-4)
        np.testing.assert_allclose(np.sign(out["w"].data), [-1, 1, -1])

    def test_converges_on_quadratic(self):
        adam = Adam(lr=0.05)
        p = {"w": Tensor(np.array([3.0, -2.0]), requires_grad=True)}
        for _ in range(500):
            g = {"w": 2.0 * p["w"].data}
            p = adam.step(p, g)
        np.testing.assert_allclose(p["w"].data, 0.0, atol=1e-3)

    def test_rejects_nonfinite_gradient(self):
        adam = Adam()
        with pytest.raises(NumericalAbort):
            adam.step({"w": Tensor(np.zeros(1), requires_grad=True)},
                      {"w": np.array([np.nan])})

    def test_state_roundtrip(self):
        adam = Adam(lr=0.01)
        p = {"w": Tensor(np.ones(2), requires_grad=True)}
        for _ in range(3):
            p = adam.step(p, {"w": np.array([0.3, -0.7])})
        clone = Adam(lr=0.01)
        clone.load_state_arrays(adam.state_arrays(), adam.step_count)
        a = adam.step(dict(p), {"w": np.array([0.1, 0.1])})["w"].data
        b = clone.step(dict(p), {"w": np.array([0.1, 0.1])})["w"].data
        np.testing.assert_array_equal(a, b)


class TestClip:
    def test_noop_under_limit(self):
        g = {"a": np.array([3.0, 4.0])}
        norm, clipped = clip_gradients(g, 10.0)
        assert norm == 5.0 and not clipped
        np.testing.assert_array_equal(g["a"], [3.0, 4.0])

    def test_scales_to_max_norm(self):
        g = {"a": np.array([3.0, 4.0]), "b": np.array([12.0])}
        norm, clipped = clip_gradients(g, 1.0)
        assert norm == 13.0 and clipped
        total = np.sqrt(sum(float(np.sum(v * v)) for v in g.values()))
        assert total == pytest.approx(1.0)

    def test_disabled_when_nonpositive(self):
        g = {"a": np.array([100.0])}
        _, clipped = clip_gradients(g, 0.0)
        assert not clipped


class TestCheckpointContainer:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        tensors = {"b": rng.normal(size=(3, 2)), "a": rng.normal(size=4),
                   "scalar": np.array(3.5)}
        meta = {"step": 7, "note": "x"}
        path = tmp_path / "c.ckpt"
        save_checkpoint(path, tensors, meta)
        back, meta2 = load_checkpoint(path)
        assert meta2 == meta
        assert set(back) == set(tensors)
        for k in tensors:
            np.testing.assert_array_equal(back[k], tensors[k])

    def test_rejects_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(path)

    def test_file_is_deterministic(self, tmp_path):
        tensors = {"w": np.arange(6.0).reshape(2, 3)}
        save_checkpoint(tmp_path / "a.ckpt", tensors, {"k": 1})
        save_checkpoint(tmp_path / "b.ckpt", tensors, {"k": 1})
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_params_digest_orders_and_discriminates(self):
        a = {"x": Tensor(np.ones(2)), "y": Tensor(np.zeros(2))}
        b = dict(reversed(list(a.items())))
        assert params_digest(a) == params_digest(b)
        c = {"x": Tensor(np.ones(2)), "y": Tensor(np.full(2, 1e-300))}
        assert params_digest(a) != params_digest(c)


class TestRunConfig:
    def test_rejects_unknown_keys_and_task(self):
        with pytest.raises(ValueError, match="unknown config keys"):
            RunConfig.from_dict({"task": "gaussian", "banana": 1})
        with pytest.raises(ValueError):
            RunConfig(task="imagenet")

    def test_dict_roundtrip_preserves_digest(self):
        cfg = tiny_config()
        clone = RunConfig.from_dict(cfg.to_dict())
        assert clone.digest() == cfg.digest()
        assert isinstance(clone.cfg, CfgConfig) and isinstance(clone.loss, LossConfig)

    def test_digest_sensitive_to_fields(self):
        assert tiny_config().digest() != tiny_config(seed=2).digest()

    def test_cosine_decay_endpoints(self):
        cfg = tiny_config(steps=101, lr=1e-2, lr_final=1e-4)
        assert _lr_at(cfg, 0) == pytest.approx(1e-2)
        assert _lr_at(cfg, 100) == pytest.approx(1e-4)
        assert _lr_at(cfg, 50) == pytest.approx((1e-2 + 1e-4) / 2)
        flat = tiny_config(lr=3e-3, lr_final=0.0)
        assert _lr_at(flat, 10) == 3e-3


class TestTrainingLoops:
    def test_teacher_trains_and_reloads(self, tmp_path):
        cfg = tiny_config(steps=30)
        path = train_teacher(cfg, tmp_path / "run")
        teacher = load_teacher(path)
        z = np.zeros((2, 2))
        out = teacher_forward(teacher, z, 0.5, np.zeros((2, 0)), 0)
        assert out.shape == (2, 2) and np.all(np.isfinite(out.data))
        log = (tmp_path / "run" / "teacher_log.csv").read_text().splitlines()
        assert log[0] == "step,loss,grad_norm,wall_ms"
        assert len(log) >= 2

    def test_teacher_loss_decreases(self, tmp_path):
        cfg = tiny_config(steps=200, batch_size=32, lr=5e-3, log_every=1)
        train_teacher(cfg, tmp_path / "run")
        rows = (tmp_path / "run" / "teacher_log.csv").read_text().splitlines()[1:]
        losses = [float(r.split(",")[1]) for r in rows]
        assert np.mean(losses[-20:]) < np.mean(losses[:20])

    def test_training_is_bit_reproducible(self, tmp_path):
        cfg = tiny_config(steps=25)
        p1 = train_teacher(cfg, tmp_path / "a")
        p2 = train_teacher(cfg, tmp_path / "b")
        assert p1.read_bytes() == p2.read_bytes()

    def test_resume_matches_straight_run(self, tmp_path):
        cfg = tiny_config(steps=20, ckpt_every=10)
        straight = train_teacher(cfg, tmp_path / "full")
        train_teacher(cfg, tmp_path / "half")
        resumed = train_teacher(cfg, tmp_path / "resumed",
                                resume=str(tmp_path / "half" / "teacher_step10.ckpt"))
        t1 = load_teacher(straight)
        t2 = load_teacher(resumed)
        assert params_digest(t1.parameters()) == params_digest(t2.parameters())

    def test_distill_produces_student_and_freezes_teacher(self, tmp_path):
        t_path = train_teacher(tiny_config(steps=30), tmp_path / "t")
        before = load_checkpoint(t_path)[0]
        s_path = distill_student(tiny_config(steps=30, seed=4), t_path, tmp_path / "s")
        student = load_student(s_path)
        assert student.kind == "student"
        after = load_checkpoint(t_path)[0]
        for k in before:
            np.testing.assert_array_equal(before[k], after[k])

    def test_distill_is_bit_reproducible(self, tmp_path):
        t_path = train_teacher(tiny_config(steps=20), tmp_path / "t")
        cfg = tiny_config(steps=20, seed=9)
        p1 = distill_student(cfg, t_path, tmp_path / "a")
        p2 = distill_student(cfg, t_path, tmp_path / "b")
        assert p1.read_bytes() == p2.read_bytes()

    def test_loaders_check_role(self, tmp_path):
        t_path = train_teacher(tiny_config(steps=5), tmp_path / "t")
        s_path = distill_student(tiny_config(steps=5), t_path, tmp_path / "s")
        with pytest.raises(ValueError):
            load_student(t_path)
        with pytest.raises(ValueError):
            load_teacher(s_path)

    def test_distill_rejects_mismatched_dataset(self, tmp_path):
        t_path = train_teacher(tiny_config(steps=5), tmp_path / "t")
        bad = tiny_config(steps=5, task="toysr", hr_size=16, sr_scale=4)
        with pytest.raises(ValueError, match="does not match"):
            distill_student(bad, t_path, tmp_path / "s")
