"""Replay baselines: interference-ranked retrieval, gradient projection, augmentation."""

from dataclasses import dataclass

import numpy as np

from . import nn
from .memory import SlotRefs
from .stream import warp_images

AUGMENT_POLICIES = ("off", "rot_shift")


@dataclass(frozen=True)
class MirSelection:
    refs: SlotRefs
    candidates: SlotRefs
    scores: np.ndarray


def interference_scores(params, params_after, x, y):
    """Per-example loss increase between ``params`` and ``params_after``."""
    before = nn.cross_entropy(nn.forward(params, x)[0], y, reduction="none")
    after = nn.cross_entropy(nn.forward(params_after, x)[0], y, reduction="none")
    return after - before


def top_k_stable(scores, k):
    """Indices of the ``k`` largest scores, earlier entries winning ties."""
    return np.argsort(-np.asarray(scores), kind="stable")[:k]


def mir_retrieve(memory, params, params_after, k, n_candidates, rng):
    """Pick the ``k`` candidates whose loss rises most under the virtual update."""
    if len(memory) == 0:
        raise ValueError("cannot retrieve from an empty memory")
    n_candidates = min(n_candidates, len(memory))
    k = min(k, n_candidates)
    cands = memory.sample(n_candidates, rng)
    x, y, _ = memory.get(cands)
    scores = interference_scores(params, params_after, x, y)
    pick = top_k_stable(scores, k)
    chosen = SlotRefs(cands.index[pick], cands.generation[pick])
    return MirSelection(chosen, cands, scores)


def agem_project(g, g_ref):
    """Remove the component of ``g`` that conflicts with ``g_ref``."""
    g = np.asarray(g)
    g_ref = np.asarray(g_ref)
    if g.shape != g_ref.shape:
        raise ValueError(f"gradient shapes differ: {g.shape} vs {g_ref.shape}")
    g64 = g.astype(np.float64)
    r64 = g_ref.astype(np.float64)
    ref_sq = r64 @ r64
    dot = g64 @ r64
    if ref_sq == 0 or dot >= 0:
        return g
    return (g64 - (dot / ref_sq) * r64).astype(g.dtype)


def augment(x, rng, policy="rot_shift", max_angle=15.0, max_shift=2):
    """Randomly rotate and shift each image; returns a new array in [0, 1].

    ``policy="off"`` returns the batch unchanged. Horizontal flips are
    deliberately absent because digits are not mirror-symmetric.
    """
    if policy == "off":
        return np.asarray(x)
    if policy != "rot_shift":
        raise ValueError(f"unknown augmentation policy {policy!r}")
    x = np.asarray(x)
    n = len(x)
    angles = rng.uniform(-max_angle, max_angle, size=n)
    shifts = rng.integers(-max_shift, max_shift + 1, size=(n, 2))
    out = np.empty_like(x)
    for i in range(n):
        out[i] = warp_images(x[i:i + 1], angles[i], shifts[i])[0]
    return np.clip(out, 0.0, 1.0)

