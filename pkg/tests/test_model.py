import os
from dataclasses import replace

import numpy as np
import pytest

from mocaps import data as D
from mocaps.bench.checks import tiny_config
from mocaps.model import (
    CheckpointShapeError, CheckpointVersionError, CorruptCheckpointError, NetworkConfig,
    checkpoint_bytes, checkpoint_load, checkpoint_save, forward, init_params, loss_and_grads,
    param_count, param_shapes, parse_checkpoint, predict,
)
from mocaps.optim import AdamState, adam_step
from mocaps.tensor import RngState, normal_init


def batch(cfg, n=3, seed=0):
    x = normal_init((n, cfg.image_channels, cfg.image_size, cfg.image_size), 0, 1, RngState(seed), cfg.np_dtype)
    return x, np.arange(n) % cfg.classes


class TestConfig:
    def test_reference_defaults(self):
        cfg = NetworkConfig()
        assert (cfg.gamma, cfg.capsules, cfg.routing_iterations, cfg.lambda_recon) == (0.9, 32, 3, 5e-4)
        assert cfg.n_primary == 1152

    def test_dataset_shapes(self):
        assert NetworkConfig(dataset="cifar10").pixels == 3 * 32 * 32

    @pytest.mark.parametrize("bad", [dict(gamma=1.5), dict(variant="resnet"), dict(dataset="imagenet"),
                                     dict(dtype="f16"), dict(n_blocks=-1), dict(image_size=8)])
    def test_validation(self, bad):
        with pytest.raises(ValueError):
            NetworkConfig(**bad)

    def test_shapes(self):
        shapes = param_shapes(NetworkConfig(n_blocks=2))
        assert shapes["caps1.W"] == (1152, 32, 16, 8)
        assert shapes["chain.3.W"] == (32, 32, 16, 16)
        assert "chain.4.W" not in shapes
        assert shapes["recon.w3"] == (1024, 784)


class TestForward:
    def test_norms_in_unit_interval(self):
        cfg = tiny_config(n_blocks=2)
        x, _ = batch(cfg)
        norms = forward(x, cfg, init_params(cfg, RngState(0))).class_norms
        assert norms.shape == (3, 3)
        assert np.all((norms >= 0) & (norms < 1))

    def test_capsnet_vs_rescapsnet_at_zero_chain(self):
        cfg = tiny_config(n_blocks=2)
        params = init_params(cfg, RngState(1))
        for k in range(4):
            params[f"chain.{k}.W"] = np.zeros_like(params[f"chain.{k}.W"])
        x, _ = batch(cfg)
        plain = forward(x, replace(cfg, variant="capsnet"), params)
        res = forward(x, replace(cfg, variant="rescapsnet"), params)
        np.testing.assert_array_equal(plain.chain_in, res.chain_in)
        np.testing.assert_array_equal(res.chain_out - plain.chain_out, res.chain_in)

    def test_deterministic(self):
        cfg = tiny_config()
        x, _ = batch(cfg)
        a = forward(x, cfg, init_params(cfg, RngState(4)))
        b = forward(x, cfg, init_params(cfg, RngState(4)))
        assert a.class_norms.tobytes() == b.class_norms.tobytes()
        assert np.asarray(a.recon).tobytes() == np.asarray(b.recon).tobytes()

    def test_reversible_and_stored_forward_agree(self):
        cfg = tiny_config(n_blocks=2)
        x, _ = batch(cfg)
        p = init_params(cfg, RngState(2))
        np.testing.assert_array_equal(forward(x, cfg, p, "reversible").class_norms,
                                      forward(x, cfg, p, "stored").class_norms)

    def test_prediction_invariant_to_recon_scaling(self):
        cfg = tiny_config()
        x, _ = batch(cfg, 6)
        p = init_params(cfg, RngState(3))
        scaled = {k: (v * 7.5 if k.startswith("recon.") else v) for k, v in p.items()}
        np.testing.assert_array_equal(predict(x, cfg, p), predict(x, cfg, scaled))

    def test_wrong_image_shape(self):
        cfg = tiny_config()
        with pytest.raises(ValueError, match="images"):
            forward(np.zeros((1, 1, 9, 9)), cfg, init_params(cfg, RngState(0)))

    def test_params_mismatch(self):
        cfg = tiny_config()
        p = init_params(replace(cfg, capsules=5), RngState(0))
        with pytest.raises(ValueError, match="parameter"):
            forward(batch(cfg)[0], cfg, p)

    def test_reversible_rejected_for_baselines(self):
        cfg = tiny_config(variant="rescapsnet")
        x, y = batch(cfg)
        with pytest.raises(ValueError):
            loss_and_grads(x, y, cfg, init_params(cfg, RngState(0)), "reversible")


class TestParameterCount:
    def test_independent_of_variant(self):
        counts = {v: param_count(init_params(tiny_config(n_blocks=3, variant=v), RngState(0)))
                  for v in ("mocapsnet", "rescapsnet", "capsnet")}
        assert len(set(counts.values())) == 1

    def test_grads_cover_every_parameter_in_both_modes(self):
        cfg = tiny_config(n_blocks=2)
        p = init_params(cfg, RngState(0))
        x, y = batch(cfg)
        for mode in ("reversible", "stored"):
            _, g = loss_and_grads(x, y, cfg, p, mode)
            assert set(g) == set(p)
            assert all(g[k].shape == p[k].shape for k in p)


class TestLossAndGrads:
    @pytest.mark.parametrize("blocks", [1, 3])
    def test_reversible_matches_stored(self, blocks):
        cfg = tiny_config(n_blocks=blocks)
        p = init_params(cfg, RngState(blocks))
        x, y = batch(cfg)
        la, ga = loss_and_grads(x, y, cfg, p, "reversible")
        lb, gb = loss_and_grads(x, y, cfg, p, "stored")
        assert la.total == pytest.approx(lb.total, rel=1e-12)
        for k in gb:
            scale = max(np.abs(gb[k]).max(), 1e-12)
            assert np.abs(ga[k] - gb[k]).max() / scale <= 1e-6, k

    def test_lambda_zero_starves_decoder(self):
        cfg = tiny_config(lambda_recon=0.0)
        x, y = batch(cfg)
        _, g = loss_and_grads(x, y, cfg, init_params(cfg, RngState(0)))
        for k in g:
            if k.startswith("recon."):
                assert not g[k].any(), k

    def test_breakdown_consistent(self):
        cfg = tiny_config()
        x, y = batch(cfg)
        b, _ = loss_and_grads(x, y, cfg, init_params(cfg, RngState(0)))
        assert b.total == cfg.lambda_recon * b.recon + b.margin
        assert b.margin > 0 and b.recon > 0

    def test_ledger_returns_to_idle(self):
        from mocaps.bench.ledger import MemoryLedger
        cfg = tiny_config(n_blocks=2)
        x, y = batch(cfg)
        for mode in ("reversible", "stored"):
            ledger = MemoryLedger()
            loss_and_grads(x, y, cfg, init_params(cfg, RngState(0)), mode, ledger=ledger)
            assert ledger.live_bytes == 0 and ledger.peak_bytes > 0

    def test_overfit_loss_decreases(self):
        cfg = NetworkConfig(dataset="synthetic", stem_channels=8, primary_groups=4, capsules=8,
                            capsule_dim=8, recon_hidden=(32, 64), init_std=0.1)
        ds = D.synthetic(10, 64, 28, RngState(0))
        x = D.normalize(ds.images, cfg.np_dtype)
        target = (ds.images.reshape(64, -1) / 255.0).astype(cfg.np_dtype)
        p = init_params(cfg, RngState(0))
        state = AdamState()
        losses = []
        for _ in range(50):
            b, g = loss_and_grads(x, ds.labels, cfg, p, target=target)
            losses.append(b.total)
            p = adam_step(p, g, state, 1e-3)
        assert np.mean(losses[-5:]) < np.mean(losses[:5])


@pytest.mark.skipif(not os.environ.get("MOCAPS_DATA_DIR"), reason="MOCAPS_DATA_DIR with MNIST IDX files not set")
def test_mnist_overfit_loss_decreases():
    ds = D.load_idx(*D.find_mnist(os.environ["MOCAPS_DATA_DIR"], "train")).subset(slice(0, 64))
    cfg = NetworkConfig(dataset="mnist", stem_channels=32, primary_groups=8, init_std=0.1)
    x = D.normalize(ds.images, cfg.np_dtype)
    target = (ds.images.reshape(64, -1) / 255.0).astype(cfg.np_dtype)
    p = init_params(cfg, RngState(0))
    state = AdamState()
    losses = []
    for _ in range(50):
        b, g = loss_and_grads(x, ds.labels, cfg, p, target=target)
        losses.append(b.total)
        p = adam_step(p, g, state, 1e-3)
    assert np.mean(losses[-5:]) < np.mean(losses[:5])


class TestCheckpoint:
    def test_roundtrip_bit_identical(self, tmp_path):
        cfg = tiny_config()
        p = init_params(cfg, RngState(0))
        checkpoint_save(p, tmp_path / "c.mocp")
        q = checkpoint_load(tmp_path / "c.mocp", cfg)
        assert list(q) == list(p)
        for k in p:
            assert q[k].tobytes() == p[k].tobytes()
        assert checkpoint_bytes(q) == (tmp_path / "c.mocp").read_bytes()

    def test_layout(self):
        buf = checkpoint_bytes({"ab": np.array([[1.5, -2.0]])})
        expected = (b"MOCP" + (1).to_bytes(4, "little") + (2).to_bytes(4, "little") + b"ab"
                    + (2).to_bytes(4, "little") + (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
                    + np.array([1.5, -2.0], "<f8").tobytes())
        assert buf == expected

    @pytest.mark.parametrize("cut", [3, 7, 11, 20, -1])
    def test_truncated(self, cut):
        buf = checkpoint_bytes(init_params(tiny_config(), RngState(0)))
        with pytest.raises(CorruptCheckpointError, match="truncated"):
            parse_checkpoint(buf[:cut])

    def test_version_bump(self):
        buf = bytearray(checkpoint_bytes({"a": np.zeros(2)}))
        buf[4:8] = (2).to_bytes(4, "little")
        with pytest.raises(CheckpointVersionError, match="version 2"):
            parse_checkpoint(bytes(buf))

    def test_bad_magic(self):
        with pytest.raises(CorruptCheckpointError, match="magic"):
            parse_checkpoint(b"NOPE" + bytes(8))

    def test_shape_mismatch(self, tmp_path):
        checkpoint_save(init_params(tiny_config(capsules=5), RngState(0)), tmp_path / "c.mocp")
        with pytest.raises(CheckpointShapeError):
            checkpoint_load(tmp_path / "c.mocp", tiny_config())

    def test_f32_cast(self, tmp_path):
        cfg = tiny_config(dtype="f32")
        checkpoint_save(init_params(cfg, RngState(0)), tmp_path / "c.mocp")
        assert all(v.dtype == np.float32 for v in checkpoint_load(tmp_path / "c.mocp", cfg).values())
