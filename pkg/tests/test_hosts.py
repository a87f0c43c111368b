import numpy as np
import pytest

from mistcl.backbone import BackboneConfig, embed, init_backbone
from mistcl.hosts import (
    LinearHead,
    LinearHost,
    PrototypeHost,
    PrototypeStore,
    classify_batch,
    classify_nearest,
    fft_finetune,
    fit_linear_head,
    make_host,
    prototype_accuracy,
)
from mistcl.mi_objective import Batch

SMALL = BackboneConfig(input_dim=4, hidden_dims=(8,), feature_dim=5, seed=1)


def blobs(seed, n_per=30, dim=4, classes=(0, 1), offset=4.0):
    rng = np.random.default_rng(seed)
    y = np.repeat(classes, n_per)
    x = rng.standard_normal((len(y), dim))
    for i, c in enumerate(classes):
        x[y == c, i % dim] += offset
    return Batch(x, y)


class TestPrototypeStore:
    def test_single_sample(self):
        s = PrototypeStore().fit([[1.0, 2.0]], [3])
        np.testing.assert_array_equal(s.prototype(3), [1.0, 2.0])

    def test_mean_of_two(self):
        s = PrototypeStore().fit([[1.0, 0.0], [0.0, 1.0]], [0, 0])
        np.testing.assert_array_equal(s.prototype(0), [0.5, 0.5])

    def test_incremental_matches_recompute(self):
        rng = np.random.default_rng(0)
        f = rng.standard_normal((1000, 6)) * 10
        y = rng.integers(0, 7, 1000)
        inc = PrototypeStore()
        for chunk in np.array_split(np.arange(1000), 13):
            inc.fit(f[chunk], y[chunk])
        for c in range(7):
            np.testing.assert_allclose(inc.prototype(c), f[y == c].mean(axis=0), rtol=0, atol=1e-12)

    def test_order_independent_bits(self):
        rng = np.random.default_rng(1)
        f = rng.standard_normal((200, 3))
        y = rng.integers(0, 3, 200)
        p = rng.permutation(200)
        a, b = PrototypeStore().fit(f, y), PrototypeStore().fit(f[p], y[p])
        for c in range(3):
            assert a.prototype(c).tobytes() == b.prototype(c).tobytes()

    def test_dim_mismatch(self):
        s = PrototypeStore().fit([[1.0, 2.0]], [0])
        with pytest.raises(ValueError):
            s.fit([[1.0, 2.0, 3.0]], [1])


class TestClassify:
    def test_self_match(self):
        s = PrototypeStore().fit([[1.0, 0.2], [0.1, 1.0]], [4, 9])
        assert classify_nearest(s, [0.1, 1.0]) == 9

    def test_scale_invariant(self):
        s = PrototypeStore().fit([[1.0, 0.0], [0.0, 1.0]], [0, 1])
        assert classify_nearest(s, [7.0, 0.0]) == 0

    def test_tie_lowest_class(self):
        s = PrototypeStore().fit([[1.0, 0.0], [0.0, 1.0]], [5, 2])
        assert classify_nearest(s, [1.0, 1.0]) == 2

    def test_empty_store(self):
        with pytest.raises(ValueError):
            classify_batch(PrototypeStore(), np.ones((1, 2)))

    def test_brute_force(self):
        rng = np.random.default_rng(3)
        protos = rng.standard_normal((5, 4))
        s = PrototypeStore().fit(protos, [10, 11, 12, 13, 14])
        q = rng.standard_normal((300, 4))
        got = classify_batch(s, q)
        for row, label in zip(q, got):
            cos = [row @ p / np.linalg.norm(row) / np.linalg.norm(s.prototype(c)) for c, p in zip(range(10, 15), protos)]
            assert label == 10 + int(np.argmax(cos))


class TestLinearHead:
    def test_zero_epochs(self):
        store = init_backbone(SMALL)
        head = LinearHead.empty(5)
        fit_linear_head(head, store, [blobs(0)], epochs=0, lr=0.1, seed=2)
        before = head.weight.copy()
        fit_linear_head(head, store, [blobs(0)], epochs=0, lr=0.1, seed=2)
        np.testing.assert_array_equal(head.weight, before)

    def test_separable(self):
        store = init_backbone(SMALL)
        train, test = blobs(0), blobs(1)
        before = store.to_bytes()
        head = fit_linear_head(LinearHead.empty(5), store, [train], epochs=100, lr=0.1, seed=2)
        acc = 100 * np.mean(head.predict(embed(store, test.samples)) == test.labels)
        oracle = prototype_accuracy(PrototypeStore().fit(embed(store, train.samples), train.labels),
                                    embed(store, test.samples), test.labels)
        assert acc > 90 and oracle > 90
        assert store.to_bytes() == before

    def test_grows(self):
        store = init_backbone(SMALL)
        host = LinearHost(5, epochs=5, seed=0)
        host.fit(store, [blobs(0, classes=(0, 1))])
        host.fit(store, [blobs(1, classes=(2, 3))])
        assert host.head.classes == [0, 1, 2, 3]
        assert host.head.weight.shape == (4, 5)


class TestFFT:
    def test_zero_epochs(self):
        store = init_backbone(SMALL)
        before = store.to_bytes()
        fft_finetune(store, [blobs(0)], epochs=0, lr=0.1)
        assert store.to_bytes() == before

    def test_zero_lr(self):
        store = init_backbone(SMALL)
        before = store.to_bytes()
        fft_finetune(store, [blobs(0)], epochs=3, lr=0.0)
        assert store.to_bytes() == before

    def test_updates_every_scalar(self):
        store = init_backbone(SMALL)
        before = store.flat_values()
        seen = []
        fft_finetune(store, [blobs(0)], epochs=1, lr=0.1, on_batch=lambda *a: seen.append(a))
        assert np.all(store.flat_values() != before)
        assert seen[0][3] == store.total_count


def test_make_host():
    store = init_backbone(SMALL)
    assert isinstance(make_host("prototype", store), PrototypeHost)
    assert isinstance(make_host("linear", store), LinearHost)
    with pytest.raises(ValueError):
        make_host("svm", store)
