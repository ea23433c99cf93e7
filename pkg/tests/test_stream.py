import struct

import numpy as np
import pytest

from gmed import stream as S
from gmed.stream import StreamConfig, TaskStream, build_stream, fuzzify


def write_idx_images(path, images, magic=S.IMAGE_MAGIC, count=None):
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    header = struct.pack(">IIII", magic, n if count is None else count, rows, cols)
    path.write_bytes(header + images.tobytes())


def write_idx_labels(path, labels, magic=S.LABEL_MAGIC, count=None):
    labels = np.asarray(labels, dtype=np.uint8)
    path.write_bytes(struct.pack(">II", magic, len(labels) if count is None else count)
                     + labels.tobytes())


@pytest.fixture
def idx_pair(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, (6, 28, 28), dtype=np.uint8)
    images[0, 0, 0] = 255
    images[0, 0, 1] = 0
    labels = np.array([0, 1, 2, 3, 4, 5])
    write_idx_images(tmp_path / "img", images)
    write_idx_labels(tmp_path / "lab", labels)
    return tmp_path / "img", tmp_path / "lab", images, labels


def synthetic_stream(n_tasks=2, per_task=1000, batch_size=10):
    n = n_tasks * per_task
    x = np.zeros((n, 4), dtype=np.float32)
    x[:, 0] = np.arange(n)
    latent = np.repeat(np.arange(n_tasks), per_task)
    tests = [S.LabeledSet(np.zeros((1, 4), np.float32), np.zeros(1, np.int64), np.zeros(1))
             for _ in range(n_tasks)]
    return TaskStream(x, latent.copy(), latent, np.arange(n), batch_size, tests, [])


class TestIdx:
    def test_roundtrip_and_scaling(self, idx_pair):
        img, lab, images, labels = idx_pair
        data = S.load_idx(img, lab)
        assert data.x.shape == (6, 784)
        assert data.x.dtype == np.float32
        assert data.x[0, 0] == 1.0
        assert data.x[0, 1] == 0.0
        np.testing.assert_array_equal(data.x, images.reshape(6, -1) / np.float32(255))
        assert data.y.tolist() == labels.tolist()
        assert 0.0 <= data.x.min() and data.x.max() <= 1.0

    def test_bad_image_magic(self, tmp_path, idx_pair):
        _, lab, images, _ = idx_pair
        write_idx_images(tmp_path / "bad", images, magic=0x00000801)
        with pytest.raises(S.BadMagic):
            S.load_idx(tmp_path / "bad", lab)

    def test_bad_label_magic(self, tmp_path, idx_pair):
        img, _, _, labels = idx_pair
        write_idx_labels(tmp_path / "bad", labels, magic=0x00000803)
        with pytest.raises(S.BadMagic):
            S.load_idx(img, tmp_path / "bad")

    def test_truncated(self, tmp_path, idx_pair):
        _, lab, images, _ = idx_pair
        write_idx_images(tmp_path / "short", images, count=7)
        with pytest.raises(S.TruncatedFile):
            S.load_idx(tmp_path / "short", lab)
        (tmp_path / "tiny").write_bytes(b"\x00\x00")
        with pytest.raises(S.TruncatedFile):
            S.read_idx_labels(tmp_path / "tiny")

    def test_count_mismatch(self, tmp_path, idx_pair):
        img, _, _, labels = idx_pair
        write_idx_labels(tmp_path / "lab5", labels[:5])
        with pytest.raises(S.CountMismatch):
            S.load_idx(img, tmp_path / "lab5")

    def test_errors_are_distinct(self):
        kinds = {S.BadMagic, S.TruncatedFile, S.CountMismatch}
        assert len(kinds) == 3
        assert all(issubclass(k, S.IdxError) for k in kinds)

    def test_mnist_train_size(self, mnist):
        train, test = mnist
        assert train.x.shape == (60000, 784)
        assert test.x.shape == (10000, 784)
        assert set(np.unique(train.y)) == set(range(10))


class TestGeometry:
    def test_angles(self):
        assert list(S.task_angles(4)) == [0.0, 45.0, 90.0, 135.0]
        assert S.task_angles(20)[-1] < 180.0

    def test_zero_warp_is_identity(self):
        img = np.random.default_rng(0).random((3, 784)).astype(np.float32)
        np.testing.assert_array_equal(S.warp_images(img, 0.0, (0, 0)), img)

    def test_quarter_turn_is_exact(self):
        img = np.random.default_rng(0).random((1, 784)).astype(np.float32)
        rot = S.rotate_images(img, 90.0).reshape(28, 28)
        # exact grid mapping; the direction is either rot90 or its inverse
        a = np.rot90(img.reshape(28, 28), 1)
        b = np.rot90(img.reshape(28, 28), -1)
        assert np.allclose(rot, a, atol=1e-5) or np.allclose(rot, b, atol=1e-5)

    def test_rotation_range_and_mass(self, mnist):
        train, _ = mnist
        # centred digits: no ink outside the circle that stays on the canvas
        yy, xx = np.mgrid[:28, :28]
        outside = ((yy - 13.5) ** 2 + (xx - 13.5) ** 2 > 13.0 ** 2).ravel()
        imgs = train.x[:2000][train.x[:2000][:, outside].sum(axis=1) == 0]
        assert len(imgs) > 500
        for angle in (15.0, 45.0, 90.0, 171.0):
            rot = S.rotate_images(imgs, angle)
            assert rot.min() >= 0.0 and rot.max() <= 1.0 + 1e-6
            ratio = rot.sum(axis=1) / imgs.sum(axis=1)
            assert np.all(np.abs(ratio - 1) < 0.02), angle

    def test_shift_moves_pixels(self):
        img = np.zeros((1, 784), np.float32)
        img[0, 14 * 28 + 10] = 1.0
        out = S.warp_images(img, 0.0, (2, 0)).reshape(28, 28)
        assert out[14, 12] == pytest.approx(1.0)
        assert out.sum() == pytest.approx(1.0)

    def test_permutations(self):
        assert np.array_equal(S.task_permutation(0, 5), np.arange(784))
        p1 = S.task_permutation(1, 5)
        assert sorted(p1.tolist()) == list(range(784))
        assert not np.array_equal(p1, np.arange(784))
        assert np.array_equal(p1, S.task_permutation(1, 5))
        assert not np.array_equal(p1, S.task_permutation(2, 5))


class TestBuildStream:
    def test_split(self, mnist):
        s = build_stream(*mnist, StreamConfig("split", seed=0))
        assert len(s) == 5000
        assert s.n_tasks == 5
        assert s.n_batches == 500
        labels = [set(np.unique(s.y[s.latent == t]).tolist()) for t in range(5)]
        assert labels == [{0, 1}, {2, 3}, {4, 5}, {6, 7}, {8, 9}]
        covered = set()
        for t, ts in enumerate(s.test_sets):
            assert set(np.unique(ts.y).tolist()) == labels[t]
            covered |= set(ts.y.tolist())
        assert covered == set(range(10))
        # full MNIST test split per label pair
        assert sum(len(ts) for ts in s.test_sets) == 10000

    def test_validation_disjoint(self, mnist):
        s = build_stream(*mnist, StreamConfig("split", seed=1))
        assert len(s.val_sets) == 3
        train, _ = mnist
        used = set()
        for t in range(5):
            rows = s.x[s.latent == t]
            assert len(rows) == 1000
        for t, vs in enumerate(s.val_sets):
            pool = np.isin(train.y, [2 * t, 2 * t + 1]).sum()
            assert len(vs) == int(np.ceil(0.05 * pool))
            used |= set(vs.source_index.tolist())
        train_rows = {r.tobytes() for r in s.x}
        for vs in s.val_sets:
            assert not any(r.tobytes() in train_rows for r in vs.x)

    def test_permuted_task0_identity(self, mnist):
        train, _ = mnist
        s = build_stream(*mnist, StreamConfig("permuted", seed=0))
        assert s.n_tasks == 10
        first = s.x[s.latent == 0]
        # every task-0 row is an unmodified MNIST training image
        lookup = {r.tobytes() for r in train.x}
        assert all(r.tobytes() in lookup for r in first[:100])
        second = s.x[s.latent == 1]
        assert not any(r.tobytes() in lookup for r in second[:20])

    def test_rotated(self, mnist):
        s = build_stream(*mnist, StreamConfig("rotated", n_tasks=4, seed=0))
        assert [i["angle"] for i in s.task_info] == [0.0, 45.0, 90.0, 135.0]
        assert all(len(ts) == 1000 for ts in s.test_sets)

    def test_deterministic(self, mnist):
        a = build_stream(*mnist, StreamConfig("split", seed=3))
        b = build_stream(*mnist, StreamConfig("split", seed=3))
        c = build_stream(*mnist, StreamConfig("split", seed=4))
        assert np.array_equal(a.x, b.x) and np.array_equal(a.order, b.order)
        assert not np.array_equal(a.x, c.x)

    def test_iid_modes(self, mnist):
        online = build_stream(*mnist, StreamConfig("iid_online", seed=0))
        assert len(online) == 5000
        assert sorted(online.order.tolist()) == list(range(5000))
        assert not np.array_equal(online.order, np.arange(5000))
        offline = build_stream(*mnist, StreamConfig("iid_offline", seed=0, offline_epochs=3))
        assert offline.n_batches == 1500
        assert np.bincount(offline.order).tolist() == [3] * 5000

    def test_insufficient_data(self, mnist):
        with pytest.raises(S.InsufficientData):
            build_stream(*mnist, StreamConfig("split", examples_per_task=20000))
        with pytest.raises(S.InsufficientData):
            build_stream(*mnist, StreamConfig("split", n_tasks=6))

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            StreamConfig("cifar")
        with pytest.raises(ValueError):
            StreamConfig("split", batch_size=0)


class TestCursor:
    def test_batches(self):
        s = synthetic_stream(n_tasks=5, per_task=1000)
        cur = s.cursor()
        n = 0
        while (batch := S.next_batch(s, cur)) is not None:
            x, y, latent = batch
            assert len(x) == 10
            n += 1
        assert n == 500
        assert cur.next_batch() is None  # single pass

    def test_short_last_batch(self):
        s = synthetic_stream(n_tasks=1, per_task=25)
        sizes = [len(b[0]) for b in s.batches()]
        assert sizes == [10, 10, 5]

    def test_independent_cursors(self):
        s = synthetic_stream(n_tasks=1, per_task=30)
        a, b = s.cursor(), s.cursor()
        a.next_batch()
        assert np.array_equal(b.next_batch()[0], s.x[:10])


class TestFuzzify:
    def test_full_start_is_identity(self):
        s = synthetic_stream()
        assert np.array_equal(fuzzify(s, 1.0, seed=0).order, s.order)

    def test_first_half_pure(self):
        s = fuzzify(synthetic_stream(), 0.5, seed=3)
        assert (s.latent[s.order[:500]] == 0).all()
        assert (s.latent[s.order[1500:]] == 1).all()

    def test_conserves_examples(self):
        base = synthetic_stream(n_tasks=4, per_task=300)
        s = fuzzify(base, 0.3, seed=1)
        assert sorted(s.order.tolist()) == list(range(1200))
        assert np.bincount(s.latent[s.order]).tolist() == [300] * 4

    def test_within_task_order_kept(self):
        s = fuzzify(synthetic_stream(), 0.5, seed=2)
        for t in range(2):
            seq = s.order[s.latent[s.order] == t]
            assert np.all(np.diff(seq) > 0)

    def test_ramp_law(self):
        """Next-task share in the four quarters of the ramp window, 50 seeds."""
        base = synthetic_stream()
        share = np.zeros(4)
        for seed in range(50):
            lat = base.latent[fuzzify(base, 0.5, seed).order][500:1500]
            share += lat.reshape(4, 250).mean(axis=1)
        share /= 50
        np.testing.assert_allclose(share, [0.125, 0.375, 0.625, 0.875], atol=0.05)

    def test_single_task_rejected(self):
        with pytest.raises(ValueError):
            fuzzify(synthetic_stream(n_tasks=1), 0.5)

    def test_build_stream_fuzzy(self, mnist):
        s = build_stream(*mnist, StreamConfig("split", fuzzy=True, seed=0))
        lat = s.latent[s.order]
        assert np.bincount(lat).tolist() == [1000] * 5
        assert (lat[:500] == 0).all()
        assert (lat[500:1500] == 1).any() and (lat[500:1500] == 0).any()
