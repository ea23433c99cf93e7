"""One online training step for each replay variant.

Every variant consumes one stream batch, commits at most one SGD update
and finishes by offering the stream batch to the reservoir. Randomness is
split into named generators so that switching a variant's editing on or
off never shifts the draws of the shared replay machinery.
"""

from dataclasses import dataclass, field

import numpy as np

from . import editing, nn
from .editing import EditConfig
from .memory import ReplayMemory
from .metrics import cosine_similarity
from .strategies import agem_project, augment, mir_retrieve

VARIANTS = ("finetune", "er", "er_gmed", "mir", "mir_gmed", "er_aug", "er_aug_gmed", "agem")
EDIT_VARIANTS = ("er_gmed", "mir_gmed", "er_aug_gmed")
RNG_STREAMS = ("init", "reservoir", "replay", "edit_sample", "edit_noise", "augment",
               "mir", "history")


def make_rngs(seed):
    """Independent generators keyed by purpose, all derived from ``seed``."""
    children = np.random.SeedSequence(seed).spawn(len(RNG_STREAMS))
    return {name: np.random.default_rng(child) for name, child in zip(RNG_STREAMS, children)}


class HistorySample:
    """Uniform sample of every stream example seen so far (hindsight oracle only)."""

    def __init__(self, capacity, n_features, rng):
        self.memory = ReplayMemory(capacity, n_features)
        self.rng = rng

    def add(self, x, y):
        self.memory.reservoir_update(x, y, self.rng)

    def arrays(self):
        n = len(self.memory)
        return self.memory.x[:n], self.memory.y[:n]

    def __len__(self):
        return len(self.memory)


@dataclass
class TrainerState:
    params: nn.MlpParams
    memory: ReplayMemory
    rngs: dict
    lr: float = 0.05
    variant: str = "er"
    replay_size: int = 10
    mir_candidates: int = 50
    agem_ref_size: int = 256
    augment_policy: str = "rot_shift"
    step: int = 0
    history: HistorySample | None = None
    cosine_every: int = 0
    cosine_trace: list = field(default_factory=list)
    edit_trace: list | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")


def new_state(layer_sizes, seed, variant="er", mem_size=500, lr=0.05, replay_size=10,
              track_originals=False, history_size=0, cosine_every=0, trace_edits=False,
              **kwargs):
    rngs = make_rngs(seed)
    init_seed = int(rngs["init"].integers(2**63))
    params = nn.init_mlp(layer_sizes, init_seed)
    memory = ReplayMemory(mem_size, layer_sizes[0], track_originals=track_originals)
    history = HistorySample(history_size, layer_sizes[0], rngs["history"]) if history_size else None
    return TrainerState(params, memory, rngs, lr=lr, variant=variant, replay_size=replay_size,
                        history=history, cosine_every=cosine_every,
                        edit_trace=[] if trace_edits else None, **kwargs)


def _sgd_on(state, x, y):
    _, grads = nn.loss_and_grads(state.params, x, y, input_grad=False)
    state.params = nn.sgd_step(state.params, grads.param_grads, state.lr)


def _optimal_fn(state, y_m, x_d, y_d):
    hist_x, hist_y = state.history.arrays()

    def direction(x):
        return editing.optimal_edit_direction(state.params, x, y_m, x_d, y_d, state.lr,
                                              hist_x, hist_y)
    return direction


def _cosine_due(state):
    return (state.cosine_every and state.history is not None and len(state.history) > 0
            and state.step % state.cosine_every == 0)


def _edit(state, refs, params_after, x_d, y_d, cfg, measure_cosine=False, batch=None):
    """Edit the slots in ``refs``; write them back unless disabled.

    ``batch`` is the already gathered ``(x, y, replay_count)`` of ``refs``.
    """
    mem = state.memory
    x, y, k = mem.get(refs) if batch is None else batch
    direction_fn = _optimal_fn(state, y, x_d, y_d) if cfg.kind == "optimal" else None
    first = None
    if measure_cosine:
        first = editing.edit_direction(x, y, state.params, params_after, cfg,
                                       rng=state.rngs["edit_noise"], direction_fn=direction_fn)
        hist_x, hist_y = state.history.arrays()
        d_opt = editing.optimal_edit_direction(state.params, x, y, x_d, y_d, state.lr,
                                               hist_x, hist_y)
        state.cosine_trace.append((state.step, cosine_similarity(first.ravel(), d_opt.ravel())))
    x_new = editing.edit_step(x, y, k, state.params, params_after, cfg,
                              rng=state.rngs["edit_noise"], direction_fn=direction_fn,
                              first_direction=first)
    if state.edit_trace is not None:
        d_before = editing.interference(state.params, params_after, x, y)
        d_after = editing.interference(state.params, params_after, x_new, y)
        dx = np.linalg.norm((x_new - x).astype(np.float64), axis=1)
        for j in range(len(refs)):
            state.edit_trace.append((state.step, int(refs.index[j]), int(k[j]), float(dx[j]),
                                     float(d_before[j]), float(d_after[j])))
    if cfg.writeback:
        mem.writeback(refs, x_new)
    return x, y, x_new


def train_step(state, x_d, y_d, cfg=None):
    """Advance ``state`` by one stream batch and return it."""
    cfg = cfg or EditConfig(kind="none")
    x_d = np.asarray(x_d, dtype=state.params.dtype)
    y_d = np.asarray(y_d)
    mem = state.memory
    v = state.variant
    b = state.replay_size
    if state.history is not None:
        state.history.add(x_d, y_d)

    if v == "finetune" or len(mem) == 0:
        _sgd_on(state, x_d, y_d)
    elif v == "agem":
        _agem_step(state, x_d, y_d)
    else:
        editing_on = v in EDIT_VARIANTS
        if v in ("er", "er_gmed", "er_aug", "er_aug_gmed"):
            refs = mem.sample(min(b, len(mem)), state.rngs["replay"])
            x_m, y_m, k_m = mem.get(refs)
            params_after = (editing.VirtualStep(state.params, x_d, y_d, state.lr, probe=x_m)
                            if editing_on else None)
        else:
            params_after = (editing.VirtualStep(state.params, x_d, y_d, state.lr) if editing_on
                            else editing.virtual_update(state.params, x_d, y_d, state.lr))
            refs = mir_retrieve(mem, state.params, editing.as_params(params_after), b,
                                state.mir_candidates, state.rngs["mir"]).refs
            x_m, y_m, k_m = mem.get(refs)

        if editing_on:
            if v == "mir_gmed":
                edit_refs = mem.sample(min(b, len(mem)), state.rngs["edit_sample"])
                batch = None
            else:
                edit_refs, batch = refs, (x_m, y_m, k_m)
            x_orig, _, x_edit = _edit(state, edit_refs, params_after, x_d, y_d, cfg,
                                      measure_cosine=_cosine_due(state), batch=batch)
            if v == "er_gmed":
                x_m = x_edit
            elif v == "er_aug_gmed":
                x_m = x_edit
                x_aug = augment(x_orig, state.rngs["augment"], state.augment_policy)
            if cfg.n_extra_edit:
                extra = mem.sample(min(cfg.n_extra_edit, len(mem)), state.rngs["edit_sample"])
                _edit(state, extra, params_after, x_d, y_d, cfg)
        elif v == "er_aug":
            x_aug = augment(x_m, state.rngs["augment"], state.augment_policy)

        if v in ("er_aug", "er_aug_gmed"):
            x_replay = np.concatenate([x_aug, x_m, x_d])
            y_replay = np.concatenate([y_m, y_m, y_d])
        else:
            x_replay = np.concatenate([x_m, x_d])
            y_replay = np.concatenate([y_m, y_d])
        _sgd_on(state, x_replay, y_replay)

    mem.reservoir_update(x_d, y_d, state.rngs["reservoir"])
    state.step += 1
    return state


def _agem_step(state, x_d, y_d):
    mem = state.memory
    _, g = nn.loss_and_grads(state.params, x_d, y_d, input_grad=False)
    refs = mem.sample(min(state.agem_ref_size, len(mem)), state.rngs["replay"])
    x_r, y_r, _ = mem.get(refs)
    _, g_ref = nn.loss_and_grads(state.params, x_r, y_r, input_grad=False)
    g_vec = agem_project(g.param_grads.to_vector(), g_ref.param_grads.to_vector())
    state.params = nn.sgd_step(state.params, state.params.from_vector(g_vec), state.lr)
