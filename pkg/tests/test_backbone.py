import hashlib

import numpy as np
import pytest

from mistcl.backbone import (
    BackboneConfig,
    BadMagicError,
    ChecksumMismatchError,
    TruncatedCheckpointError,
    VersionMismatchError,
    checkpoint_bytes,
    embed,
    fnv1a64,
    init_backbone,
    load_checkpoint,
    pretrain,
    read_checkpoint,
    save_checkpoint,
)
from mistcl.hosts import PrototypeStore, prototype_accuracy
from mistcl.mi_objective import Batch

TINY = BackboneConfig(input_dim=2, hidden_dims=(4,), feature_dim=3, seed=7)


def separable(seed, n=100, dim=2, offset=3.0):
    rng = np.random.default_rng(seed)
    y = np.repeat([0, 1], n // 2)
    x = rng.standard_normal((n, dim)) * 0.7
    x[:, 0] += np.where(y == 0, -offset, offset)
    return Batch(x, y)


class TestInit:
    def test_param_count(self):
        assert init_backbone(TINY).total_count == 2 * 4 + 4 + 4 * 3 + 3 == 27
        assert TINY.param_count == 27

    def test_default_count(self):
        cfg = BackboneConfig()
        assert cfg.param_count == 64 * 256 + 256 + 256 * 128 + 128

    def test_seeded(self):
        assert init_backbone(TINY).bit_equal(init_backbone(TINY))
        other = BackboneConfig(2, (4,), 3, seed=8)
        assert not init_backbone(TINY).bit_equal(init_backbone(other))

    def test_glorot_bounds(self):
        store = init_backbone(BackboneConfig(10, (20,), 5, seed=1))
        s = np.sqrt(6 / 30)
        assert np.abs(store.value("layer0.weight")).max() <= s
        np.testing.assert_array_equal(store.value("layer0.bias"), 0.0)

    @pytest.mark.parametrize("kw", [{"hidden_dims": ()}, {"input_dim": 0}, {"feature_dim": 0}, {"hidden_dims": (3, 0)}])
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            BackboneConfig(**{"input_dim": 2, "hidden_dims": (4,), "feature_dim": 3, **kw})


class TestEmbed:
    def test_zero_weights_give_bias(self):
        store = init_backbone(TINY)
        for name, v in store.items():
            v[...] = 0.0
        store.value("layer1.bias")[...] = [1.0, -2.0, 0.5]
        out = embed(store, np.ones((5, 2)))
        np.testing.assert_array_equal(out, np.tile([1.0, -2.0, 0.5], (5, 1)))

    def test_shape(self):
        assert embed(init_backbone(TINY), np.zeros((7, 2))).shape == (7, 3)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            embed(init_backbone(TINY), np.zeros((2, 3)))

    def test_pure(self):
        store = init_backbone(TINY)
        x = np.random.default_rng(0).standard_normal((4, 2))
        before = store.to_bytes()
        assert embed(store, x).tobytes() == embed(store, x).tobytes()
        assert store.to_bytes() == before

    def test_golden_checksum(self):
        # Recorded from the first build; guards against silent numeric drift.
        store = init_backbone(BackboneConfig(input_dim=8, hidden_dims=(16,), feature_dim=4, seed=123))
        x = np.linspace(-1.0, 1.0, 24).reshape(3, 8)
        digest = hashlib.sha256(embed(store, x).astype("<f8").tobytes()).hexdigest()
        assert digest == GOLDEN_EMBED_SHA256


GOLDEN_EMBED_SHA256 = "27d448ac5660b54f287b9c6e91701bcadf730677e25f69896d5e5b12b0ba39fa"


class TestPretrain:
    def test_zero_epochs_noop(self):
        store = init_backbone(TINY)
        before = store.to_bytes()
        pretrain(store, [separable(0)], epochs=0, lr=0.1)
        assert store.to_bytes() == before

    def test_empty_data(self):
        with pytest.raises(ValueError):
            pretrain(init_backbone(TINY), [], epochs=1, lr=0.1)

    def test_separable_reaches_high_accuracy(self):
        train, held = separable(0, 200), separable(1, 200)
        # nearest-mean oracle on raw inputs, same data
        oracle = PrototypeStore().fit(train.samples, train.labels)
        oracle_acc = prototype_accuracy(oracle, held.samples, held.labels)
        store = init_backbone(TINY)
        batches = [Batch(train.samples[i::4], train.labels[i::4]) for i in range(4)]
        res = pretrain(store, batches, epochs=50, lr=0.1, held_out=held)
        assert oracle_acc > 90.0
        assert res.held_out_accuracy > 90.0
        assert res.loss_trace[-1] <= res.loss_trace[0]

    def test_deterministic(self):
        stores = []
        for _ in range(2):
            s = init_backbone(TINY)
            pretrain(s, [separable(0)], epochs=5, lr=0.1, seed=3)
            stores.append(s)
        assert stores[0].bit_equal(stores[1])


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        store = init_backbone(BackboneConfig(5, (7, 3), 2, seed=11))
        store.value("layer0.weight")[0, 0] = np.nextafter(0.0, 1.0)
        path = tmp_path / "b.ckpt"
        ck = save_checkpoint(store, path)
        assert ck.version == 1
        assert load_checkpoint(path).bit_equal(store)

    def test_layout(self):
        store = init_backbone(TINY)
        data = checkpoint_bytes(store)
        assert data[:8] == b"MISTCKPT"
        assert int.from_bytes(data[8:12], "little") == 1
        assert int.from_bytes(data[12:16], "little") == 4
        assert int.from_bytes(data[-8:], "little") == fnv1a64(data[:-8])

    def test_fnv_reference_values(self):
        assert fnv1a64(b"") == 0xCBF29CE484222325
        assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
        assert fnv1a64(b"foobar") == 0x85944171F73967E8

    def test_truncated(self, tmp_path):
        data = checkpoint_bytes(init_backbone(TINY))
        path = tmp_path / "t.ckpt"
        for cut in (4, 20, len(data) // 2, len(data) - 3):
            path.write_bytes(data[:cut])
            with pytest.raises(TruncatedCheckpointError):
                load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        data = bytearray(checkpoint_bytes(init_backbone(TINY)))
        data[0:8] = b"NOTACKPT"
        path = tmp_path / "m.ckpt"
        path.write_bytes(bytes(data))
        with pytest.raises(BadMagicError):
            load_checkpoint(path)

    def test_version_mismatch(self, tmp_path):
        data = bytearray(checkpoint_bytes(init_backbone(TINY)))
        data[8:12] = (2).to_bytes(4, "little")
        path = tmp_path / "v.ckpt"
        path.write_bytes(bytes(data))
        with pytest.raises(VersionMismatchError):
            read_checkpoint(path)

    def test_byte_flip_checksum(self, tmp_path):
        data = bytearray(checkpoint_bytes(init_backbone(TINY)))
        data[-20] ^= 0x01  # inside the last tensor's float data
        path = tmp_path / "c.ckpt"
        path.write_bytes(bytes(data))
        with pytest.raises(ChecksumMismatchError):
            load_checkpoint(path)
