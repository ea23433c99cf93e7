"""Fixed-capacity replay memory with reservoir insertion and editable slots."""

import csv
from dataclasses import dataclass

import numpy as np


class StaleSlotError(RuntimeError):
    """A slot reference outlived the example it pointed at."""


@dataclass(frozen=True)
class SlotRefs:
    """Handles to sampled slots; ``generation`` pins the example each slot held."""

    index: np.ndarray
    generation: np.ndarray

    def __len__(self):
        return len(self.index)


class ReplayMemory:
    """Reservoir-populated store of ``(x, y)`` with per-slot replay counts.

    Slots are preallocated arrays so sampled batches can be gathered and
    written back without per-example objects.
    """

    def __init__(self, capacity, n_features, dtype=np.float32, track_originals=False):
        if capacity < 0:
            raise ValueError("capacity must be non-negative")
        self.capacity = int(capacity)
        self.n_features = int(n_features)
        self.x = np.zeros((self.capacity, self.n_features), dtype=dtype)
        self.y = np.zeros(self.capacity, dtype=np.int64)
        self.replay_count = np.zeros(self.capacity, dtype=np.int64)
        self.generation = np.zeros(self.capacity, dtype=np.int64)
        self.original_x = (np.zeros((self.capacity, self.n_features), dtype=dtype)
                           if track_originals else None)
        self.size = 0
        self.n_seen = 0
        self.n_writebacks = 0

    def __len__(self):
        return self.size

    @property
    def track_originals(self):
        return self.original_x is not None

    def _store(self, j, x, y):
        self.x[j] = x
        self.y[j] = y
        self.replay_count[j] = 0
        self.generation[j] += 1
        if self.original_x is not None:
            self.original_x[j] = x

    def reservoir_update(self, x, y, rng):
        """Offer each example of a batch, in order, to the reservoir."""
        for xi, yi in zip(np.asarray(x), np.asarray(y)):
            if self.size < self.capacity:
                self._store(self.size, xi, yi)
                self.size += 1
            else:
                j = rng.integers(0, self.n_seen + 1)
                if j < self.capacity:
                    self._store(j, xi, yi)
            self.n_seen += 1

    def sample(self, n, rng):
        """Uniformly draw ``n`` distinct slots."""
        if n > self.size:
            raise ValueError(f"cannot sample {n} slots from a memory holding {self.size}")
        idx = rng.choice(self.size, size=n, replace=False) if n else np.empty(0, dtype=np.int64)
        idx = np.asarray(idx, dtype=np.int64)
        return SlotRefs(idx, self.generation[idx].copy())

    def all_slots(self):
        idx = np.arange(self.size)
        return SlotRefs(idx, self.generation[idx].copy())

    def get(self, refs):
        self._check(refs)
        return self.x[refs.index].copy(), self.y[refs.index].copy(), self.replay_count[refs.index].copy()

    def writeback(self, refs, x_edited):
        """Replace sampled examples with their edits and bump replay counts."""
        self._check(refs)
        x_edited = np.asarray(x_edited)
        if x_edited.shape != (len(refs), self.n_features):
            raise ValueError(f"edited batch shape {x_edited.shape} does not match {len(refs)} slots")
        self.x[refs.index] = x_edited
        # np.add.at handles a slot appearing twice in one batch
        np.add.at(self.replay_count, refs.index, 1)
        self.n_writebacks += len(refs)

    def _check(self, refs):
        if len(refs) and (refs.index.max() >= self.size
                          or np.any(self.generation[refs.index] != refs.generation)):
            raise StaleSlotError("slot was replaced after it was sampled")

    def snapshot(self):
        n = self.size
        snap = {"x": self.x[:n].copy(), "y": self.y[:n].copy(),
                "replay_count": self.replay_count[:n].copy()}
        if self.original_x is not None:
            snap["original_x"] = self.original_x[:n].copy()
        return snap

    def dump_csv(self, path):
        """Write one row per slot: label, replay count, then the pixel values."""
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            header = ["slot", "label", "replay_count"] + [f"p{i}" for i in range(self.n_features)]
            if self.original_x is not None:
                header += [f"orig_p{i}" for i in range(self.n_features)]
            w.writerow(header)
            for j in range(self.size):
                row = [j, int(self.y[j]), int(self.replay_count[j])]
                row += [f"{v:.6g}" for v in self.x[j]]
                if self.original_x is not None:
                    row += [f"{v:.6g}" for v in self.original_x[j]]
                w.writerow(row)
