"""Stage configuration, freezing, batching, metrics logs, checkpoints and resume."""

import json
import struct

import numpy as np
import pytest

from mage.checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from mage.ian import ConfigError, IanConfig
from mage.model import group_hash
from mage.optim import AdamState
from mage.toy_models import LmConfig
from mage.training import (
    TrainConfig,
    TrainingError,
    batch_indices,
    build_model,
    default_bundle,
    read_metrics,
    run_stage,
    stage_samples,
)

TINY_IAN = IanConfig(d_v=8, d_l=16, d_b=8, grid_in=6, grid_out=3, hidden=16, patch=2)
TINY_LM = LmConfig(d_l=16, d_ff=32)


def fast(**kw):
    base = dict(ian=TINY_IAN, lm=TINY_LM, steps=4, batch_size=2, n_samples=8, lm_warmup_steps=5, lr=1e-2)
    base.update(kw)
    return TrainConfig(**base)


class TestConfig:
    def test_stage_defaults_set_freeze(self):
        assert TrainConfig(stage=1).freeze == ["encoder", "lm"]
        assert TrainConfig(stage=2).freeze == []

    def test_unknown_group(self):
        with pytest.raises(ConfigError, match="unknown freeze group"):
            TrainConfig(freeze=["vision"])

    def test_freeze_must_match_stage(self):
        with pytest.raises(ConfigError, match="stage 1 requires"):
            TrainConfig(stage=1, freeze=["lm"])

    def test_bad_stage(self):
        with pytest.raises(ConfigError):
            TrainConfig(stage=4)

    def test_width_mismatch(self):
        with pytest.raises(ConfigError):
            TrainConfig(ian=IanConfig(d_l=32))

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown TrainConfig keys"):
            TrainConfig.from_dict({"step": 3})

    def test_json_round_trip(self, tmp_path):
        cfg = fast(seed=3)
        (tmp_path / "c.json").write_text(cfg.to_json())
        assert TrainConfig.from_file(tmp_path / "c.json") == cfg


class TestBatching:
    def test_epoch_covers_each_sample_once(self):
        seen = np.concatenate([batch_indices(0, s, 10, 3) for s in range(3)])
        assert len(set(seen.tolist())) == 9  # one sample dropped with the partial batch

    def test_epochs_reshuffle(self):
        assert not np.array_equal(batch_indices(0, 0, 10, 10), batch_indices(0, 1, 10, 10))

    def test_stateless(self):
        assert np.array_equal(batch_indices(5, 17, 20, 4), batch_indices(5, 17, 20, 4))

    def test_batch_larger_than_data(self):
        with pytest.raises(ConfigError):
            batch_indices(0, 0, 3, 4)

    def test_stage_sample_routing(self):
        bundle = default_bundle(fast(n_samples=20))
        assert stage_samples(bundle, 1, 0) is bundle.captions
        assert len(stage_samples(bundle, 2, 0)) == 18
        third = stage_samples(bundle, 3, 0)
        assert len(third) == 2 + len(bundle.plans)


class TestFreezing:
    def test_stage_one_updates_projector_only(self):
        cfg = fast(steps=1)
        before = build_model(cfg)
        res = run_stage(cfg)
        for g in ("encoder", "lm"):
            assert group_hash(res.model.group_parameters(g)) == group_hash(before.group_parameters(g))
        assert group_hash(res.model.group_parameters("ian")) != group_hash(before.group_parameters("ian"))

    def test_stage_two_updates_everything(self):
        cfg = fast(stage=2, steps=1)
        before = build_model(cfg)
        res = run_stage(cfg)
        for g in ("encoder", "ian", "lm"):
            assert group_hash(res.model.group_parameters(g)) != group_hash(before.group_parameters(g))

    def test_zero_steps_keeps_initialisation(self):
        cfg = fast(steps=0)
        res = run_stage(cfg)
        assert res.metrics == []
        assert group_hash(res.model.named_parameters()) == group_hash(build_model(cfg).named_parameters())


class TestMetrics:
    def test_rows_and_determinism(self, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        run_stage(fast(metrics_out=str(a)))
        run_stage(fast(metrics_out=str(b)))
        assert a.read_bytes() == b.read_bytes()
        rows = read_metrics(a)
        assert [r[0] for r in rows] == [1, 2, 3, 4]
        assert all(abs(r[3] - (r[1] + r[2])) < 1e-12 for r in rows)
        assert a.read_text().splitlines()[0] == "step,itg,itdm,total"

    def test_zero_learning_rate_repeats_loss(self):
        """With lr=0 and one batch per epoch the same loss is seen every step."""
        res = run_stage(fast(lr=0.0, n_samples=2, batch_size=2, steps=3))
        totals = [r.total for r in res.metrics]
        assert totals[0] == pytest.approx(totals[1], rel=1e-12) == pytest.approx(totals[2], rel=1e-12)

    def test_different_seed_differs(self):
        a = run_stage(fast(seed=0, steps=1)).metrics[0].total
        b = run_stage(fast(seed=1, steps=1)).metrics[0].total
        assert a != b


class TestResume:
    def test_split_run_is_bit_exact(self, tmp_path):
        full = run_stage(fast(steps=6))
        half = tmp_path / "half.mckpt"
        run_stage(fast(steps=3, checkpoint_out=str(half)))
        rest = run_stage(fast(steps=3, resume_from=str(half)))
        assert rest.first_step == 4
        assert rest.checkpoint.to_bytes() == full.checkpoint.to_bytes()
        assert [r.total for r in rest.metrics] == [r.total for r in full.metrics[3:]]

    def test_init_checkpoint_carries_parameters_only(self, tmp_path):
        path = tmp_path / "s1.mckpt"
        s1 = run_stage(fast(steps=2, checkpoint_out=str(path)))
        s2 = run_stage(fast(stage=2, steps=0, init_checkpoint=str(path)))
        assert group_hash(s2.model.named_parameters()) == group_hash(s1.model.named_parameters())
        assert s2.checkpoint.meta["adam_step"] == 0

    def test_nan_aborts_with_step(self):
        cfg = fast(steps=3)
        model = build_model(cfg)
        model.lm.head.data[:] = np.nan
        with pytest.raises(TrainingError) as err:
            run_stage(cfg, model=model)
        assert err.value.step == 1 and "step 1" in str(err.value)

    def test_missing_dataset_file(self, tmp_path):
        with pytest.raises(OSError):
            run_stage(fast(data=str(tmp_path / "none.jsonl")))


class TestCheckpointFormat:
    @pytest.fixture
    def ckpt(self):
        cfg = fast(steps=1)
        return run_stage(cfg).checkpoint

    def test_round_trip_is_byte_identical(self, ckpt, tmp_path):
        buf = save_checkpoint(ckpt, tmp_path / "x.mckpt")
        again = load_checkpoint(tmp_path / "x.mckpt")
        assert again.to_bytes() == buf
        for k, v in ckpt.tensors.items():
            assert np.array_equal(again.tensors[k], v)

    def test_layout(self, ckpt):
        buf = ckpt.to_bytes()
        assert buf[:8] == b"MAGECKPT"
        (n,) = struct.unpack("<I", buf[8:12])
        manifest = json.loads(buf[12:12 + n])
        assert {"adam_step", "config", "rng", "step", "tensors"} <= set(manifest)
        first = manifest["tensors"][0]
        assert set(first) == {"dtype", "length", "name", "offset", "shape"} and first["offset"] == 0
        assert any(e["name"].startswith("adam.m.") for e in manifest["tensors"])

    def test_bad_magic(self, ckpt):
        with pytest.raises(CheckpointError, match="magic"):
            Checkpoint.from_bytes(b"NOTCKPT!" + ckpt.to_bytes()[8:])

    def test_truncated_blob(self, ckpt):
        with pytest.raises(CheckpointError, match=r"tensors\[\d+\]\.offset"):
            Checkpoint.from_bytes(ckpt.to_bytes()[:-8])

    def test_truncated_manifest(self, ckpt):
        with pytest.raises(CheckpointError, match="manifest_length"):
            Checkpoint.from_bytes(ckpt.to_bytes()[:40])

    def test_trailing_bytes(self, ckpt):
        with pytest.raises(CheckpointError, match="blob"):
            Checkpoint.from_bytes(ckpt.to_bytes() + b"\0" * 8)

    def test_wrong_length_names_tensor(self):
        bad = Checkpoint({"w": np.zeros(2)}).to_bytes().replace(b'"length":16', b'"length":24')
        with pytest.raises(CheckpointError, match=r"tensors\[0\]\.length.*\(w\)"):
            Checkpoint.from_bytes(bad)

    def test_wrong_dtype(self):
        bad = Checkpoint({"w": np.zeros(2)}).to_bytes().replace(b"f64le", b"f32le")
        with pytest.raises(CheckpointError, match="dtype"):
            Checkpoint.from_bytes(bad)

    def test_scalar_tensor(self):
        back = Checkpoint.from_bytes(Checkpoint({"s": np.float64(2.5)}).to_bytes())
        assert back.tensors["s"].shape == () and back.tensors["s"] == 2.5

    def test_shape_mismatch_on_load(self, ckpt, tmp_path):
        ckpt.tensors["lm.head"] = np.zeros((2, 2))
        path = tmp_path / "bad.mckpt"
        save_checkpoint(ckpt, path)
        with pytest.raises(TrainingError, match="lm.head"):
            run_stage(fast(steps=1, resume_from=str(path)))

    def test_adam_state_dataclass(self):
        assert AdamState().step == 0
