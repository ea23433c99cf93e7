"""MNIST ingestion and non-stationary task streams.

A stream is a fixed sequence of labeled examples with a hidden task id per
example. Learners only ever see ``(x, y)`` batches; the task ids ride
along for evaluation bookkeeping.
"""

import os
import struct
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
IMAGE_SIDE = 28
N_PIXELS = IMAGE_SIDE * IMAGE_SIDE

KINDS = ("split", "permuted", "rotated", "iid_online", "iid_offline")
TASK_KINDS = ("split", "permuted", "rotated")
DEFAULT_N_TASKS = {"split": 5, "permuted": 10, "rotated": 20}
ROTATED_TEST_PER_TASK = 1000
VALIDATION_TASKS = 3
VALIDATION_FRACTION = 0.05


class IdxError(ValueError):
    pass


class BadMagic(IdxError):
    pass


class TruncatedFile(IdxError):
    pass


class CountMismatch(IdxError):
    pass


class InsufficientData(ValueError):
    pass


class LabeledExample(NamedTuple):
    features: np.ndarray
    label: int
    source_index: int


@dataclass(frozen=True)
class LabeledSet:
    """Column-wise store of labeled examples; ``x`` holds features in [0, 1]."""

    x: np.ndarray
    y: np.ndarray
    source_index: np.ndarray

    def __len__(self):
        return len(self.y)

    def __getitem__(self, i):
        return LabeledExample(self.x[i], int(self.y[i]), int(self.source_index[i]))

    def subset(self, idx):
        return LabeledSet(self.x[idx], self.y[idx], self.source_index[idx])


def _read_header(buf, n_ints, path):
    if len(buf) < 4 * n_ints:
        raise TruncatedFile(f"{path}: header needs {4 * n_ints} bytes, file has {len(buf)}")
    return struct.unpack(f">{n_ints}I", buf[:4 * n_ints])


def read_idx_images(path):
    with open(path, "rb") as f:
        buf = f.read()
    magic, = _read_header(buf, 1, path)
    if magic != IMAGE_MAGIC:
        raise BadMagic(f"{path}: image magic 0x{magic:08x}, expected 0x{IMAGE_MAGIC:08x}")
    _, count, rows, cols = _read_header(buf, 4, path)
    need = 16 + count * rows * cols
    if len(buf) < need:
        raise TruncatedFile(f"{path}: expected {need} bytes, found {len(buf)}")
    return np.frombuffer(buf, dtype=np.uint8, count=count * rows * cols,
                         offset=16).reshape(count, rows * cols)


def read_idx_labels(path):
    with open(path, "rb") as f:
        buf = f.read()
    magic, = _read_header(buf, 1, path)
    if magic != LABEL_MAGIC:
        raise BadMagic(f"{path}: label magic 0x{magic:08x}, expected 0x{LABEL_MAGIC:08x}")
    _, count = _read_header(buf, 2, path)
    if len(buf) < 8 + count:
        raise TruncatedFile(f"{path}: expected {8 + count} bytes, found {len(buf)}")
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=8)


def load_idx(images_path, labels_path):
    """Read an IDX image/label pair; pixels are scaled to [0, 1] by /255."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise CountMismatch(f"{len(images)} images but {len(labels)} labels")
    return LabeledSet(images.astype(np.float32) / np.float32(255.0),
                      labels.astype(np.int64), np.arange(len(labels)))


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def mnist_paths(data_dir, split):
    images, labels = MNIST_FILES[split]
    out = []
    for name in (images, labels):
        candidates = [name, name.replace("-idx", ".idx")]
        for c in candidates:
            p = os.path.join(data_dir, c)
            if os.path.exists(p):
                out.append(p)
                break
        else:
            raise FileNotFoundError(f"no {name} under {data_dir}")
    return tuple(out)


def load_mnist(data_dir):
    """Return ``(train, test)`` :class:`LabeledSet` pairs from a directory of IDX files."""
    return (load_idx(*mnist_paths(data_dir, "train")),
            load_idx(*mnist_paths(data_dir, "test")))


# -- geometry ---------------------------------------------------------------

def warp_images(images, angle_deg=0.0, shift=(0, 0)):
    """Rotate by ``angle_deg`` about the image centre, then translate.

    Inverse-mapped bilinear interpolation with zero background. ``shift``
    is ``(dx, dy)`` in pixels, positive ``dx`` moving content right.
    """
    images = np.asarray(images)
    flat = images.reshape(-1, N_PIXELS)
    rows, cols, weights = _warp_taps(float(angle_deg), float(shift[0]), float(shift[1]))
    out = np.zeros_like(flat)
    for r, c, w in zip(rows, cols, weights):
        src = r * IMAGE_SIDE + c
        out += w.astype(flat.dtype) * flat[:, src]
    return out.reshape(images.shape)


def _warp_taps(angle_deg, dx, dy):
    side = IMAGE_SIDE
    centre = (side - 1) / 2.0
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    # undo translation, then rotate back about the centre
    u = xx - dx - centre
    v = yy - dy - centre
    theta = np.deg2rad(angle_deg)
    c, s = np.cos(theta), np.sin(theta)
    if angle_deg % 360 == 0:
        c, s = 1.0, 0.0
    src_x = c * u - s * v + centre
    src_y = s * u + c * v + centre
    x0 = np.floor(src_x).astype(int)
    y0 = np.floor(src_y).astype(int)
    fx = src_x - x0
    fy = src_y - y0
    taps_r, taps_c, taps_w = [], [], []
    for oy, wy in ((0, 1 - fy), (1, fy)):
        for ox, wx in ((0, 1 - fx), (1, fx)):
            r = y0 + oy
            cc = x0 + ox
            w = wy * wx
            inside = (r >= 0) & (r < side) & (cc >= 0) & (cc < side)
            w = np.where(inside, w, 0.0)
            taps_r.append(np.clip(r, 0, side - 1).ravel())
            taps_c.append(np.clip(cc, 0, side - 1).ravel())
            taps_w.append(w.ravel())
    return taps_r, taps_c, taps_w


def rotate_images(images, angle_deg):
    return np.clip(warp_images(images, angle_deg), 0.0, 1.0)


def task_angles(n_tasks):
    """Evenly spaced rotation angles on [0, 180)."""
    return [180.0 * i / n_tasks for i in range(n_tasks)]


def task_permutation(task, seed):
    if task == 0:
        return np.arange(N_PIXELS)
    return np.random.default_rng([seed, task, 0x9E3779B9]).permutation(N_PIXELS)


# -- streams ----------------------------------------------------------------

@dataclass(frozen=True)
class StreamConfig:
    kind: str = "split"
    n_tasks: int | None = None
    examples_per_task: int = 1000
    batch_size: int = 10
    fuzzy: bool = False
    fuzzy_start_frac: float = 0.5
    seed: int = 0
    offline_epochs: int = 5
    base: str = "split"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown stream kind {self.kind!r}; expected one of {KINDS}")
        if self.base not in TASK_KINDS:
            raise ValueError(f"unknown task layout {self.base!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not 0 < self.fuzzy_start_frac <= 1:
            raise ValueError("fuzzy_start_frac must lie in (0, 1]")
        if self.offline_epochs < 1:
            raise ValueError("offline_epochs must be at least 1")

    @property
    def task_kind(self):
        return self.kind if self.kind in TASK_KINDS else self.base

    def resolved_n_tasks(self):
        return self.n_tasks or DEFAULT_N_TASKS[self.task_kind]


@dataclass(frozen=True)
class TaskStream:
    """An immutable stream; ``order`` indexes rows of ``x`` in visit order."""

    x: np.ndarray
    y: np.ndarray
    latent: np.ndarray
    order: np.ndarray
    batch_size: int
    test_sets: list
    val_sets: list
    kind: str = "split"
    online: bool = True
    task_info: list = field(default_factory=list)

    @property
    def n_tasks(self):
        return len(self.test_sets)

    def __len__(self):
        return len(self.order)

    @property
    def n_batches(self):
        return -(-len(self.order) // self.batch_size)

    def cursor(self):
        return StreamCursor(self)

    def batches(self):
        cur = self.cursor()
        while (batch := cur.next_batch()) is not None:
            yield batch

    def stream_arrays(self):
        """All visited ``(x, y, latent)`` in stream order."""
        return self.x[self.order], self.y[self.order], self.latent[self.order]

    def truncated(self, n_tasks):
        """The prefix stream restricted to tasks ``< n_tasks``."""
        keep = self.latent[self.order] < n_tasks
        return replace(self, order=self.order[keep], test_sets=self.test_sets[:n_tasks],
                       val_sets=self.val_sets[:n_tasks], task_info=self.task_info[:n_tasks])


class StreamCursor:
    """Single-pass reader; exhausted cursors keep returning ``None``."""

    def __init__(self, stream):
        self.stream = stream
        self.position = 0

    def next_batch(self):
        s = self.stream
        if self.position >= len(s.order):
            return None
        rows = s.order[self.position:self.position + s.batch_size]
        self.position += len(rows)
        return s.x[rows], s.y[rows], s.latent[rows]


def next_batch(stream, cursor):
    return cursor.next_batch()


def _draw(rng, pool, n, what):
    if len(pool) < n:
        raise InsufficientData(f"{what}: need {n} examples, only {len(pool)} available")
    return rng.choice(pool, size=n, replace=False)


def build_stream(train, test, cfg):
    """Build a task stream from MNIST ``train``/``test`` sets.

    Each task draws ``examples_per_task`` training rows without replacement;
    the first three tasks also hold out 5% of their task pool as a
    validation set, disjoint from the training draw.
    """
    n_tasks = cfg.resolved_n_tasks()
    kind = cfg.task_kind
    rng = np.random.default_rng([cfg.seed, 0x5EED])
    xs, ys, lat, tests, vals, info = [], [], [], [], [], []

    if kind == "split":
        if n_tasks > 5:
            raise InsufficientData("split MNIST has at most 5 two-class tasks")
        groups = [(2 * t, 2 * t + 1) for t in range(n_tasks)]
    for t in range(n_tasks):
        if kind == "split":
            pool = np.flatnonzero(np.isin(train.y, groups[t]))
            test_idx = np.flatnonzero(np.isin(test.y, groups[t]))
            transform = lambda a: a
            info.append({"labels": list(groups[t])})
        else:
            pool = np.arange(len(train))
            test_idx = np.arange(len(test))
            if kind == "permuted":
                perm = task_permutation(t, cfg.seed)
                transform = lambda a, p=perm: a[:, p]
                info.append({"permutation_seed": cfg.seed, "identity": t == 0})
            else:
                angle = task_angles(n_tasks)[t]
                transform = lambda a, ang=angle: rotate_images(a, ang)
                info.append({"angle": angle})
                test_idx = np.sort(_draw(rng, test_idx, min(ROTATED_TEST_PER_TASK, len(test_idx)),
                                         f"task {t} test"))
        n_val = int(np.ceil(VALIDATION_FRACTION * len(pool))) if t < VALIDATION_TASKS else 0
        drawn = _draw(rng, pool, cfg.examples_per_task + n_val, f"task {t}")
        tr_idx, val_idx = drawn[:cfg.examples_per_task], drawn[cfg.examples_per_task:]
        xs.append(transform(train.x[tr_idx]))
        ys.append(train.y[tr_idx])
        lat.append(np.full(len(tr_idx), t))
        tests.append(LabeledSet(transform(test.x[test_idx]), test.y[test_idx], test_idx))
        if n_val:
            vals.append(LabeledSet(transform(train.x[val_idx]), train.y[val_idx], val_idx))

    x = np.concatenate(xs)
    y = np.concatenate(ys)
    latent = np.concatenate(lat)
    order = np.arange(len(y))
    stream = TaskStream(x, y, latent, order, cfg.batch_size, tests, vals,
                        kind=cfg.kind, online=cfg.kind != "iid_offline", task_info=info)
    if cfg.fuzzy and cfg.kind in TASK_KINDS:
        stream = fuzzify(stream, cfg.fuzzy_start_frac, cfg.seed)
    if cfg.kind == "iid_online":
        stream = replace(stream, order=rng.permutation(order))
    elif cfg.kind == "iid_offline":
        stream = replace(stream, order=np.concatenate(
            [rng.permutation(order) for _ in range(cfg.offline_epochs)]))
    return stream


def fuzzify(stream, start_frac=0.5, seed=0):
    """Blend each task boundary with a linear ramp.

    Once ``start_frac`` of task *i* has been visited, the remaining
    examples of task *i* are interleaved with the same number of leading
    examples of task *i+1*; the chance that a position holds the newer
    task grows linearly from 0 to 1 across that window. Only positions
    move, so every example appears exactly once.
    """
    order = np.asarray(stream.order)
    lat = stream.latent[order]
    tasks = list(dict.fromkeys(lat.tolist()))
    if len(tasks) < 2:
        raise ValueError("fuzzy boundaries need at least two tasks")
    rng = np.random.default_rng([seed, 0xF022])
    spans = [order[lat == t] for t in tasks]
    tails = [int(round((1 - start_frac) * len(s))) for s in spans]
    tails[-1] = 0

    out = [spans[0][:len(spans[0]) - tails[0]]]
    for i in range(len(spans) - 1):
        cur, nxt = spans[i], spans[i + 1]
        tail = cur[len(cur) - tails[i]:]
        n_head = min(len(tail), len(nxt) - tails[i + 1])
        head = nxt[:n_head]
        # keys with densities 2(1-u) and 2u: sorted, newer-task share rises linearly
        old_keys = np.sort(1.0 - np.sqrt(1.0 - rng.random(len(tail))))
        new_keys = np.sort(np.sqrt(rng.random(n_head)))
        keys = np.concatenate([old_keys, new_keys])
        merged = np.concatenate([tail, head])[np.argsort(keys, kind="stable")]
        out.append(merged)
        out.append(nxt[n_head:len(nxt) - tails[i + 1]])
    new_order = np.concatenate(out)
    assert len(new_order) == len(order)
    return replace(stream, order=new_order)
