"""Experiment configuration, orchestration and result persistence."""

import argparse
import csv
import dataclasses
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

from . import metrics
from .editing import EDIT_KINDS, EditConfig
from .stream import N_PIXELS, StreamConfig, build_stream, load_mnist, mnist_paths
from .trainer import EDIT_VARIANTS, VARIANTS, new_state, train_step

log = logging.getLogger(__name__)

DATASETS = {"split_mnist": "split", "permuted_mnist": "permuted", "rotated_mnist": "rotated"}
IID_VARIANTS = ("iid_online", "iid_offline")
ALL_VARIANTS = VARIANTS + IID_VARIANTS
CLI_EDIT_KINDS = tuple(k for k in EDIT_KINDS if k != "optimal")

# selected per dataset on the first three tasks
TUNED_EDIT_PARAMS = {
    "split": (5.0, 0.01),
    "permuted": (0.05, 0.001),
    "rotated": (1.0, 0.01),
}
TUNED_EDIT_PARAMS_AUG = {
    "split": (5.0, 0.001),
    "permuted": (0.05, 0.001),
    "rotated": (1.0, 0.01),
}
ALPHA_GRID = (0.01, 0.03, 0.05, 0.07, 0.1, 0.5, 1.0, 5.0, 10.0)
BETA_GRID = (0.0, 1e-3, 1e-2, 1e-1, 1.0)


class ConfigError(ValueError):
    pass


class UnknownKey(ConfigError):
    def __init__(self, key):
        super().__init__(f"unknown config key {key!r}")
        self.key = key


def _int_list(s):
    return tuple(int(v) for v in str(s).split(",") if v.strip())


def _float_list(s):
    return tuple(float(v) for v in str(s).split(",") if v.strip())


def _str_list(s):
    return tuple(v.strip() for v in str(s).split(",") if v.strip())


def _bool(s):
    if isinstance(s, bool):
        return s
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_float(s):
    return None if s is None or str(s).strip().lower() in ("", "none", "auto") else float(s)


@dataclass
class ExperimentConfig:
    dataset: str = "split_mnist"
    data_dir: str | None = None
    variant: tuple = ("er",)
    mem_size: tuple = (500,)
    batch_size: int = 10
    lr: float = 0.05
    hidden: tuple = (400, 400)
    examples_per_task: int = 1000
    n_tasks: int | None = None
    alpha: float | None = None
    beta: float | None = None
    gamma: float = 1.0
    edit_steps: int = 1
    edit_kind: str = "gmed"
    writeback: bool = True
    n_extra_edit: int = 0
    random_norm: str = "l2"
    mir_candidates: int = 50
    agem_ref_size: int = 256
    augment_policy: str = "rot_shift"
    fuzzy: bool = False
    fuzzy_start_frac: float = 0.5
    offline_epochs: int = 5
    seeds: int = 10
    base_seed: int = 0
    out: str = "results"
    tune: bool = False
    grid_alpha: tuple = ALPHA_GRID
    grid_beta: tuple = BETA_GRID
    cosine_trace: bool = False
    cosine_every: int = 50
    history_size: int = 512
    pcr: bool = False
    edit_trace: bool = False
    dump_memory: bool = False
    jobs: int = 1

    def edit_params(self, variant):
        """``(alpha, beta)`` for a variant, falling back to the per-dataset tuned values."""
        table = TUNED_EDIT_PARAMS_AUG if variant == "er_aug_gmed" else TUNED_EDIT_PARAMS
        a, b = table[DATASETS[self.dataset]]
        return (a if self.alpha is None else self.alpha, b if self.beta is None else self.beta)

    def edit_config(self, variant, alpha=None, beta=None):
        if variant not in EDIT_VARIANTS:
            return EditConfig(kind="none")
        a, b = self.edit_params(variant)
        return EditConfig(alpha=a if alpha is None else alpha, beta=b if beta is None else beta,
                          gamma=self.gamma, steps=self.edit_steps, kind=self.edit_kind,
                          writeback=self.writeback, n_extra_edit=self.n_extra_edit,
                          random_norm=self.random_norm)

    def stream_config(self, variant, seed):
        base = DATASETS[self.dataset]
        kind = variant if variant in IID_VARIANTS else base
        return StreamConfig(kind=kind, n_tasks=self.n_tasks,
                            examples_per_task=self.examples_per_task, batch_size=self.batch_size,
                            fuzzy=self.fuzzy, fuzzy_start_frac=self.fuzzy_start_frac, seed=seed,
                            offline_epochs=self.offline_epochs, base=base)


_PARSERS = {
    "dataset": str, "data_dir": str, "variant": _str_list, "mem_size": _int_list,
    "batch_size": int, "lr": float, "hidden": _int_list, "examples_per_task": int,
    "n_tasks": lambda s: None if str(s).lower() in ("", "none") else int(s),
    "alpha": _opt_float, "beta": _opt_float, "gamma": float, "edit_steps": int,
    "edit_kind": str, "writeback": _bool, "n_extra_edit": int, "random_norm": str,
    "mir_candidates": int, "agem_ref_size": int, "augment_policy": str, "fuzzy": _bool,
    "fuzzy_start_frac": float, "offline_epochs": int, "seeds": int, "base_seed": int,
    "out": str, "tune": _bool, "grid_alpha": _float_list, "grid_beta": _float_list,
    "cosine_trace": _bool, "cosine_every": int, "history_size": int, "pcr": _bool,
    "edit_trace": _bool, "dump_memory": _bool, "jobs": int,
}
assert set(_PARSERS) == {f.name for f in dataclasses.fields(ExperimentConfig)}


def read_config_file(path):
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in _PARSERS:
                raise UnknownKey(key)
            values[key] = value
    return values


def build_arg_parser():
    p = argparse.ArgumentParser(prog="gmed", description="Online continual-learning experiments "
                                "with replay and gradient-based memory editing.")
    S = argparse.SUPPRESS
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--dataset", choices=sorted(DATASETS), default=S)
    p.add_argument("--data-dir", dest="data_dir", default=S,
                   help="directory of MNIST IDX files (default: $GMED_DATA_DIR)")
    p.add_argument("--variant", default=S,
                   help=f"one or more of {', '.join(ALL_VARIANTS)}, comma separated")
    p.add_argument("--mem-size", dest="mem_size", default=S, help="comma-separated sizes sweep")
    p.add_argument("--lr", default=S)
    p.add_argument("--alpha", default=S)
    p.add_argument("--beta", default=S)
    p.add_argument("--gamma", default=S)
    p.add_argument("--edit-steps", dest="edit_steps", default=S)
    p.add_argument("--edit-kind", dest="edit_kind", choices=CLI_EDIT_KINDS, default=S)
    p.add_argument("--no-writeback", dest="writeback", action="store_const", const=False,
                   default=S)
    p.add_argument("--n-extra-edit", dest="n_extra_edit", default=S)
    p.add_argument("--fuzzy", action="store_const", const=True, default=S)
    p.add_argument("--seeds", default=S)
    p.add_argument("--base-seed", dest="base_seed", default=S)
    p.add_argument("--tune", action="store_const", const=True, default=S)
    p.add_argument("--cosine-trace", dest="cosine_trace", action="store_const", const=True,
                   default=S)
    p.add_argument("--pcr", action="store_const", const=True, default=S)
    p.add_argument("--edit-trace", dest="edit_trace", action="store_const", const=True,
                   default=S)
    p.add_argument("--dump-memory", dest="dump_memory", action="store_const", const=True,
                   default=S)
    p.add_argument("--jobs", default=S, help="parallel worker processes")
    p.add_argument("--out", default=S)
    return p


def parse_config(path=None, argv=None, check_paths=True):
    """Defaults, then the config file, then CLI flags (highest precedence)."""
    cli = vars(build_arg_parser().parse_args([] if argv is None else argv))
    path = cli.pop("config", None) or path
    raw = read_config_file(path) if path else {}
    raw.update(cli)
    kwargs = {}
    for key, value in raw.items():
        if key not in _PARSERS:
            raise UnknownKey(key)
        try:
            kwargs[key] = _PARSERS[key](value)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"cannot parse {key} = {value!r}: {e}") from None
    cfg = ExperimentConfig(**kwargs)
    if cfg.data_dir is None:
        cfg.data_dir = os.environ.get("GMED_DATA_DIR")
    validate_config(cfg, check_paths)
    return cfg


def validate_config(cfg, check_paths=True):
    if cfg.dataset not in DATASETS:
        raise ConfigError(f"unknown dataset {cfg.dataset!r}; expected one of {sorted(DATASETS)}")
    for v in cfg.variant:
        if v not in ALL_VARIANTS:
            raise ConfigError(f"unknown variant {v!r}; expected one of {ALL_VARIANTS}")
    if not cfg.variant or not cfg.mem_size:
        raise ConfigError("variant and mem_size need at least one value")
    if any(m < 1 for m in cfg.mem_size):
        raise ConfigError("mem_size must be positive")
    if cfg.seeds < 1:
        raise ConfigError("seeds must be at least 1")
    if cfg.edit_kind not in EDIT_KINDS:
        raise ConfigError(f"unknown edit kind {cfg.edit_kind!r}")
    try:
        cfg.edit_config("er_gmed")  # runs EditConfig validation
    except ValueError as e:
        raise ConfigError(str(e)) from None
    if check_paths:
        if not cfg.data_dir:
            raise ConfigError("no dataset path: set data_dir, --data-dir or GMED_DATA_DIR")
        try:
            mnist_paths(cfg.data_dir, "train")
            mnist_paths(cfg.data_dir, "test")
        except FileNotFoundError as e:
            raise ConfigError(f"missing dataset file: {e}") from None
    return cfg


# -- running ------------------------------------------------------------------

_DATA_CACHE = {}


def get_data(data_dir):
    key = os.path.abspath(data_dir)
    if key not in _DATA_CACHE:
        _DATA_CACHE[key] = load_mnist(data_dir)
    return _DATA_CACHE[key]


@dataclass
class RunSpec:
    variant: str
    mem_size: int
    seed: int
    alpha: float | None = None
    beta: float | None = None
    extra: dict = field(default_factory=dict)


def train_on_stream(cfg, spec, stream):
    """Train one model over ``stream``; returns the final state and training wall time."""
    variant = "finetune" if spec.variant in IID_VARIANTS else spec.variant
    edit_cfg = cfg.edit_config(variant, spec.alpha, spec.beta)
    editing = variant in EDIT_VARIANTS
    state = new_state((N_PIXELS, *cfg.hidden, 10), spec.seed, variant=variant,
                      mem_size=spec.mem_size, lr=cfg.lr, replay_size=cfg.batch_size,
                      track_originals=cfg.pcr and editing,
                      history_size=cfg.history_size if cfg.cosine_trace and editing else 0,
                      cosine_every=cfg.cosine_every if cfg.cosine_trace and editing else 0,
                      trace_edits=cfg.edit_trace and editing,
                      mir_candidates=cfg.mir_candidates, agem_ref_size=cfg.agem_ref_size,
                      augment_policy=cfg.augment_policy)
    start = time.perf_counter()
    for x, y, _ in stream.batches():
        train_step(state, x, y, edit_cfg)
    return state, time.perf_counter() - start


def run_single(cfg, spec):
    """One seed of one variant; returns ``(RunMetrics, state)``."""
    train, test = get_data(cfg.data_dir)
    stream = build_stream(train, test, cfg.stream_config(spec.variant, spec.seed))
    state, wall = train_on_stream(cfg, spec, stream)
    per_task, mean = metrics.final_accuracy(state.params, stream.test_sets)
    edit_cfg = cfg.edit_config(spec.variant, spec.alpha, spec.beta)
    pcr = (metrics.prediction_change_rate(state.params, state.memory)
           if state.memory.track_originals else None)
    tags = {"variant": spec.variant, "dataset": cfg.dataset, "mem_size": spec.mem_size,
            "alpha": edit_cfg.alpha if spec.variant in EDIT_VARIANTS else None,
            "beta": edit_cfg.beta if spec.variant in EDIT_VARIANTS else None,
            "gamma": edit_cfg.gamma if spec.variant in EDIT_VARIANTS else None,
            "edit_kind": edit_cfg.kind if spec.variant in EDIT_VARIANTS else None}
    run = metrics.RunMetrics(per_task, mean, cosine_trace=state.cosine_trace or None,
                             prediction_change_rate=pcr, wall_time_s=wall, seed=spec.seed,
                             tags=tags)
    return run, state


def _run_job(cfg, spec):
    run, state = run_single(cfg, spec)
    extras = {}
    if cfg.edit_trace and state.edit_trace is not None:
        extras["edit_trace"] = state.edit_trace
    if cfg.dump_memory:
        extras["memory"] = state.memory
    return run, extras


def tune_hyperparams(cfg, grid_alpha=None, grid_beta=None, variant="er_gmed", seed=None,
                     mem_size=None):
    """Grid search on the first three tasks, scored on their validation sets.

    Returns ``(best_alpha, best_beta, scores)``; ties go to the smaller
    alpha, then the smaller beta.
    """
    grid_alpha = cfg.grid_alpha if grid_alpha is None else grid_alpha
    grid_beta = cfg.grid_beta if grid_beta is None else grid_beta
    if len(grid_alpha) == 0 or len(grid_beta) == 0:
        raise ValueError("empty hyper-parameter grid")
    seed = cfg.base_seed if seed is None else seed
    mem_size = cfg.mem_size[0] if mem_size is None else mem_size
    train, test = get_data(cfg.data_dir)
    stream = build_stream(train, test, cfg.stream_config(variant, seed)).truncated(3)
    tune_cfg = dataclasses.replace(cfg, cosine_trace=False, pcr=False, edit_trace=False)
    scores = {}
    best = None
    for a in sorted(grid_alpha):
        for b in sorted(grid_beta):
            spec = RunSpec(variant, mem_size, seed, alpha=a, beta=b)
            state, _ = train_on_stream(tune_cfg, spec, stream)
            _, acc = metrics.final_accuracy(state.params, stream.val_sets)
            scores[(a, b)] = acc
            log.info("tune %s alpha=%g beta=%g val_acc=%.4f", variant, a, b, acc)
            if best is None or acc > scores[best]:
                best = (a, b)
    return best[0], best[1], scores


def run_experiment(cfg):
    """Run every (variant, mem_size, seed) cell and write the result files under ``cfg.out``."""
    os.makedirs(cfg.out, exist_ok=True)
    tuned = {}
    if cfg.tune:
        for v in cfg.variant:
            if v in EDIT_VARIANTS:
                a, b, scores = tune_hyperparams(cfg, variant=v)
                tuned[v] = {"alpha": a, "beta": b,
                            "grid": [{"alpha": k[0], "beta": k[1], "val_acc": s}
                                     for k, s in scores.items()]}
    specs = []
    for m in cfg.mem_size:
        for v in cfg.variant:
            for i in range(cfg.seeds):
                t = tuned.get(v, {})
                specs.append(RunSpec(v, m, cfg.base_seed + i, t.get("alpha"), t.get("beta")))

    if cfg.jobs > 1:
        get_data(cfg.data_dir)
        with ProcessPoolExecutor(cfg.jobs) as pool:
            results = list(pool.map(_run_job, [cfg] * len(specs), specs))
    else:
        results = [_run_job(cfg, s) for s in specs]

    runs = []
    for spec, (run, extras) in zip(specs, results):
        runs.append(run)
        log.info("%s mem=%d seed=%d final_acc=%.4f (%.1fs)", spec.variant, spec.mem_size,
                 spec.seed, run.final_accuracy, run.wall_time_s)
        stem = f"{spec.variant}_m{spec.mem_size}_s{spec.seed}"
        if "edit_trace" in extras:
            write_edit_trace(os.path.join(cfg.out, f"edit_trace_{stem}.csv"), extras["edit_trace"])
        if "memory" in extras:
            extras["memory"].dump_csv(os.path.join(cfg.out, f"memory_{stem}.csv"))

    metrics.write_runs_csv(os.path.join(cfg.out, "runs.csv"), runs)
    extra = {"config": config_dict(cfg)}
    if tuned:
        extra["tuned"] = tuned
    summary = metrics.summarize(runs, extra)
    if len(cfg.mem_size) > 1:
        write_mem_sweep(os.path.join(cfg.out, "mem_sweep.csv"), summary)
    if cfg.cosine_trace:
        write_cosine_trace(os.path.join(cfg.out, "cosine_trace.csv"), runs)
    metrics.write_summary_json(os.path.join(cfg.out, "summary.json"), summary)
    return runs


def config_dict(cfg):
    d = dataclasses.asdict(cfg)
    d.pop("data_dir")
    d.pop("jobs")
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def write_mem_sweep(path, summary):
    """Mean/std final accuracy per (variant, memory size), one row per variant."""
    sizes = sorted({g["mem_size"] for g in summary["groups"]})
    rows = {}
    for g in summary["groups"]:
        rows.setdefault(g["variant"], {})[g["mem_size"]] = g["final_accuracy"]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["variant"] + [f"{s}_{k}" for s in sizes for k in ("mean", "std")])
        for v, cells in rows.items():
            row = [v]
            for s in sizes:
                c = cells.get(s)
                row += [repr(c["mean"]), repr(c["std"])] if c else ["", ""]
            w.writerow(row)


def write_cosine_trace(path, runs):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["variant", "edit_kind", "mem_size", "seed", "step", "cosine"])
        for r in runs:
            for step, c in r.cosine_trace or ():
                w.writerow([r.tags["variant"], r.tags["edit_kind"], r.tags["mem_size"], r.seed,
                            step, repr(c)])


def write_edit_trace(path, trace):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "slot", "replay_count", "delta_norm", "interference_before",
                    "interference_after"])
        for row in trace:
            w.writerow([row[0], row[1], row[2], repr(row[3]), repr(row[4]), repr(row[5])])


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        cfg = parse_config(argv=sys.argv[1:] if argv is None else argv)
    except ConfigError as e:
        build_arg_parser().error(str(e))
    runs = run_experiment(cfg)
    summary = metrics.summarize(runs)
    for g in summary["groups"]:
        acc = g["final_accuracy"]
        print(f"{g['variant']:>12s} mem={g['mem_size']:<5d} final_acc "
              f"{100 * acc['mean']:.2f} +- {100 * acc['std']:.2f} (n={g['n_runs']})")
    print(f"results written to {cfg.out}")
    return 0
