"""FINN1 checkpoint files: bitwise round trips and corruption detection."""

import dataclasses
import hashlib

import numpy as np
import pytest

from invfuse.checkpoint import (MAGIC, Checkpoint, checkpoint_bytes,
                                checkpoint_of, config_text, load_checkpoint,
                                restore_model, restore_optimizer,
                                save_checkpoint)
from invfuse.data import SynthConfig, synth_pair
from invfuse.errors import CheckpointError
from invfuse.flow import FlowModel, LatentSpec, ModelConfig, randomize_parameters
from invfuse.losses import LossWeights
from invfuse.training import TrainConfig, Trainer


def trained_snapshot(k=2, steps=3, size=16):
    """A model with non-trivial parameters and non-zero Adam moments."""
    model = FlowModel(ModelConfig(k=k, hidden_channels=4, seed=5))
    cfg = TrainConfig(epochs=1, batch_size=4, lr=1e-3, seed=5)
    trainer = Trainer(model, cfg)
    pairs = [synth_pair(SynthConfig(seed=3, size=size), i) for i in range(4)]
    x1 = np.stack([p.x1 for p in pairs])[:, None]
    x2 = np.stack([p.x2 for p in pairs])[:, None]
    for _ in range(steps):
        trainer.step(x1, x2)
    return model, cfg, trainer.opt


def rehash(data: bytes) -> bytes:
    """Recompute the trailer for surgically edited checkpoint bytes."""
    payload = data[: -(len("sha256 \n") + 64)]
    return payload + b"sha256 %s\n" % hashlib.sha256(payload).hexdigest().encode()


class TestRoundTrip:
    def test_save_load_restore_is_bitwise(self, tmp_path):
        model, cfg, opt = trained_snapshot()
        path = tmp_path / "m.finn1"
        save_checkpoint(path, checkpoint_of(model, cfg, opt))
        ck = load_checkpoint(path)

        restored = restore_model(ck)
        for (name, p), (name2, q) in zip(model.parameters(), restored.parameters()):
            assert name == name2
            assert np.array_equal(p, q), name
        for mine, theirs in zip(model.perms, restored.perms):
            assert np.array_equal(mine, theirs)
        assert restored.config == model.config

        ropt = restore_optimizer(ck, restored)
        assert ropt.step_count == opt.step_count
        assert ropt.lr == opt.lr
        for name in opt.m:
            assert np.array_equal(ropt.m[name], opt.m[name])
            assert np.array_equal(ropt.v[name], opt.v[name])
            assert np.any(opt.m[name] != 0.0) or "b" in name  # steps ran

    def test_resave_is_byte_identical(self, tmp_path):
        model, cfg, opt = trained_snapshot()
        first = checkpoint_bytes(checkpoint_of(model, cfg, opt))
        again = checkpoint_bytes(load_checkpoint_bytes(first, tmp_path))
        assert first == again

    def test_train_config_survives(self, tmp_path):
        model = FlowModel(ModelConfig(k=1, hidden_channels=2, seed=0))
        cfg = TrainConfig(epochs=7, batch_size=3, lr=0.0123,
                          plateau_factor=0.5, plateau_patience=2, seed=11,
                          loss_weights=LossWeights(ssim_weight=0.25,
                                                   fusion_weight=1.0),
                          latent=LatentSpec(kind="uniform", seed=9))
        path = tmp_path / "m.finn1"
        save_checkpoint(path, checkpoint_of(model, cfg))
        ck = load_checkpoint(path)
        assert ck.train_config == cfg
        assert ck.model_config == model.config

    def test_k1_model_has_no_permutations(self, tmp_path):
        model = FlowModel(ModelConfig(k=1, hidden_channels=2, seed=0))
        path = tmp_path / "m.finn1"
        save_checkpoint(path, checkpoint_of(model, TrainConfig()))
        ck = load_checkpoint(path)
        assert ck.permutations == ()
        restore_model(ck)

    def test_decayed_lr_roundtrips_bitwise(self, tmp_path):
        model, cfg, opt = trained_snapshot()
        opt.lr = cfg.lr * 0.95 ** 3  # a plateau-decayed value with long digits
        path = tmp_path / "m.finn1"
        save_checkpoint(path, checkpoint_of(model, cfg, opt))
        assert load_checkpoint(path).lr == opt.lr


def load_checkpoint_bytes(data: bytes, tmp_path):
    p = tmp_path / "scratch.finn1"
    p.write_bytes(data)
    return load_checkpoint(p)


class TestExplicitPermutations:
    def test_stored_permutations_win_over_seed(self, tmp_path):
        """A checkpoint must reproduce its permutations even if they no
        longer match what the config seed would re-derive."""
        model = FlowModel(ModelConfig(k=3, hidden_channels=2, seed=0))
        swapped = model.perms[0][::-1].copy()
        assert not np.array_equal(swapped, model.perms[0])
        model.perms[0] = swapped
        path = tmp_path / "m.finn1"
        save_checkpoint(path, checkpoint_of(model, TrainConfig()))
        restored = restore_model(load_checkpoint(path))
        assert np.array_equal(restored.perms[0], swapped)

    def test_permutations_fixed_across_training(self, tmp_path):
        """Training never touches the channel shuffles: a snapshot taken
        before five optimizer steps stores the same permutation arrays as
        one taken after."""
        model = FlowModel(ModelConfig(k=3, hidden_channels=2, seed=7))
        before = tmp_path / "before.finn1"
        save_checkpoint(before, checkpoint_of(model, TrainConfig()))

        trainer = Trainer(model, TrainConfig(batch_size=4, seed=7))
        pairs = [synth_pair(SynthConfig(seed=7, size=16), i) for i in range(4)]
        x1 = np.stack([p.x1 for p in pairs])[:, None]
        x2 = np.stack([p.x2 for p in pairs])[:, None]
        for _ in range(5):
            trainer.step(x1, x2)

        after = tmp_path / "after.finn1"
        save_checkpoint(after, checkpoint_of(model, TrainConfig()))
        old = load_checkpoint(before)
        new = load_checkpoint(after)
        assert len(new.permutations) == 2
        for a, b in zip(old.permutations, new.permutations):
            assert np.array_equal(a, b)
        for mine, theirs in zip(model.perms, restore_model(new).perms):
            assert np.array_equal(mine, theirs)

    def test_invalid_permutation_rejected(self, tmp_path):
        model = FlowModel(ModelConfig(k=3, hidden_channels=2, seed=0))
        ck = checkpoint_of(model, TrainConfig())
        perms = list(ck.permutations)
        perms[0] = perms[0].copy()
        perms[0][0] = perms[0][1]  # duplicate index
        ck = dataclasses.replace(ck, permutations=tuple(perms))
        with pytest.raises(CheckpointError, match="not a permutation"):
            restore_model(ck)

    def test_wrong_parameter_set_rejected(self):
        model = FlowModel(ModelConfig(k=2, hidden_channels=2, seed=0))
        ck = checkpoint_of(model, TrainConfig())
        tensors = dict(ck.tensors)
        tensors.pop("param:block0.a.w1")
        ck = dataclasses.replace(ck, tensors=tensors)
        with pytest.raises(CheckpointError, match="do not match"):
            restore_model(ck)


class TestCorruptionDetection:
    def test_every_strided_bit_flip_is_detected(self, tmp_path):
        model, cfg, opt = trained_snapshot(k=1, steps=1)
        data = checkpoint_bytes(checkpoint_of(model, cfg, opt))
        for pos in range(0, len(data), 509):  # prime stride hits all regions
            bad = bytearray(data)
            bad[pos] ^= 0x40
            with pytest.raises(CheckpointError):
                load_checkpoint_bytes(bytes(bad), tmp_path)

    def test_truncations_are_detected(self, tmp_path):
        model, cfg, opt = trained_snapshot(k=1, steps=1)
        data = checkpoint_bytes(checkpoint_of(model, cfg, opt))
        for cut in (0, 3, len(MAGIC), len(data) // 2, len(data) - 1):
            with pytest.raises(CheckpointError):
                load_checkpoint_bytes(data[:cut], tmp_path)

    def test_wrong_magic(self, tmp_path):
        with pytest.raises(CheckpointError, match="not a FINN1"):
            load_checkpoint_bytes(b"PNG\n" + b"\x00" * 100, tmp_path)

    def test_unknown_config_key_rejected(self, tmp_path):
        model, cfg, opt = trained_snapshot(k=1, steps=1)
        data = checkpoint_bytes(checkpoint_of(model, cfg, opt))
        # model.seed= has the same byte length as model.sXXd=, keeping the
        # config-block byte count intact
        bad = rehash(data.replace(b"model.seed=", b"model.sXXd=", 1))
        with pytest.raises(CheckpointError, match="missing key 'model.seed'"):
            load_checkpoint_bytes(bad, tmp_path)

    def test_trailing_garbage_rejected(self, tmp_path):
        model, cfg, opt = trained_snapshot(k=1, steps=1)
        data = checkpoint_bytes(checkpoint_of(model, cfg, opt))
        trailer_len = len("sha256 \n") + 64
        bad = rehash(data[:-trailer_len] + b"EXTRA-BYTES" + data[-trailer_len:])
        with pytest.raises(CheckpointError, match="trailing bytes"):
            load_checkpoint_bytes(bad, tmp_path)


class TestConfigText:
    def test_canonical_text_is_stable(self):
        model, cfg, opt = trained_snapshot(k=1, steps=1)
        ck = checkpoint_of(model, cfg, opt)
        text = config_text(ck)
        assert text.startswith("model.k=1\n")
        assert f"opt.step_count={opt.step_count}" in text
        assert text == config_text(ck)

    def test_float_values_roundtrip_bitwise(self, tmp_path):
        # An "ugly" float that needs all 17 digits
        lr = 0.1 + 0.2  # 0.30000000000000004
        model = FlowModel(ModelConfig(k=1, hidden_channels=2, seed=0))
        cfg = TrainConfig(lr=lr)
        path = tmp_path / "m.finn1"
        save_checkpoint(path, checkpoint_of(model, cfg))
        assert load_checkpoint(path).train_config.lr == lr
