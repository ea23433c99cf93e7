"""Run metrics, significance tests and result files."""

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn


@dataclass
class RunMetrics:
    per_task_accuracy: list
    final_accuracy: float
    cosine_trace: list | None = None
    prediction_change_rate: float | None = None
    wall_time_s: float = 0.0
    seed: int | None = None
    tags: dict = field(default_factory=dict)

    @property
    def cosine_mean(self):
        if not self.cosine_trace:
            return None
        return float(np.mean([c for _, c in self.cosine_trace]))

    def to_dict(self):
        d = asdict(self)
        d["cosine_mean"] = self.cosine_mean
        return d


def final_accuracy(params, test_sets):
    """Per-task test accuracy and its unweighted mean."""
    if not test_sets:
        raise ValueError("no test sets given")
    per_task = []
    for i, ts in enumerate(test_sets):
        if ts is None or len(ts) == 0:
            raise ValueError(f"test set for task {i} is missing or empty")
        per_task.append(nn.evaluate_accuracy(params, ts.x, ts.y))
    return per_task, float(np.mean(per_task))


def cosine_similarity(a, b):
    """``a.b / (|a||b|)``, defined as 0 when either vector is zero."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def prediction_change_rate(params, memory):
    """Fraction of stored slots whose predicted class differs from the unedited copy's."""
    if not memory.track_originals:
        raise ValueError("memory was built without original-example shadows")
    n = len(memory)
    if n == 0:
        return 0.0
    edited = nn.predict(params, memory.x[:n])
    original = nn.predict(params, memory.original_x[:n])
    return float(np.mean(edited != original))


# -- Student t via the regularized incomplete beta ----------------------------

_FPMIN = 1e-300


def _betacf(a, b, x, tol=1e-12, max_iter=500):
    """Continued fraction for the incomplete beta (modified Lentz)."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > _FPMIN else _FPMIN)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _FPMIN else _FPMIN)
        c = 1.0 + aa / c
        c = c if abs(c) > _FPMIN else _FPMIN
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _FPMIN else _FPMIN)
        c = 1.0 + aa / c
        c = c if abs(c) > _FPMIN else _FPMIN
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def regularized_incomplete_beta(a, b, x):
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x in (0.0, 1.0):
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    # the fraction converges fast only on one side of the mean
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_sf(t, df):
    """Survival function ``P(T > t)`` of Student's t with ``df`` degrees of freedom."""
    if df <= 0:
        raise ValueError("df must be positive")
    if math.isinf(t):
        return 0.0 if t > 0 else 1.0
    tail = 0.5 * regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t))
    return tail if t >= 0 else 1.0 - tail


def paired_t_test_one_sided(a, b):
    """p-value for ``mean(a - b) > 0`` under a paired t-test."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("a and b must be 1-D and paired")
    n = len(a)
    if n < 2:
        raise ValueError("a paired t-test needs at least two pairs")
    diff = a - b
    mean = diff.mean()
    sd = diff.std(ddof=1)
    if sd == 0:
        if mean > 0:
            return 0.0
        return 0.5 if mean == 0 else 1.0
    t = mean / (sd / math.sqrt(n))
    return t_sf(t, n - 1)


def mean_std(values):
    """Mean and unbiased sample std; a single value has std 0."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("no values to aggregate")
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


def aggregate_runs(runs):
    """Mean and sample std of each numeric field across runs."""
    if not runs:
        raise ValueError("need at least one run")
    out = {"final_accuracy": mean_std([r.final_accuracy for r in runs]),
           "wall_time_s": mean_std([r.wall_time_s for r in runs])}
    per_task = np.array([r.per_task_accuracy for r in runs], dtype=np.float64)
    out["per_task_accuracy"] = (per_task.mean(axis=0).tolist(),
                                (per_task.std(axis=0, ddof=1) if len(runs) > 1
                                 else np.zeros(per_task.shape[1])).tolist())
    pcr = [r.prediction_change_rate for r in runs if r.prediction_change_rate is not None]
    if pcr:
        out["prediction_change_rate"] = mean_std(pcr)
    cos = [r.cosine_mean for r in runs if r.cosine_mean is not None]
    if cos:
        out["cosine_mean"] = mean_std(cos)
    return out


# -- files --------------------------------------------------------------------

RUN_COLUMNS = ["seed", "variant", "dataset", "mem_size", "alpha", "beta", "gamma", "final_acc",
               "per_task_acc", "pcr", "wall_time_s", "edit_kind", "cosine_mean"]


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def write_runs_csv(path, runs):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(RUN_COLUMNS)
        for r in runs:
            t = r.tags
            w.writerow([_fmt(v) for v in (
                r.seed, t.get("variant"), t.get("dataset"), t.get("mem_size"), t.get("alpha"),
                t.get("beta"), t.get("gamma"), r.final_accuracy,
                ";".join(repr(a) for a in r.per_task_accuracy),
                r.prediction_change_rate, r.wall_time_s, t.get("edit_kind"), r.cosine_mean)])


def read_runs_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def group_key(run):
    return (run.tags.get("variant"), run.tags.get("mem_size"), run.tags.get("edit_kind"))


def summarize(runs, extra=None):
    """JSON-ready summary: per-group aggregates plus pairwise one-sided p-values."""
    groups = {}
    for r in runs:
        groups.setdefault(group_key(r), []).append(r)
    rows = []
    for (variant, mem_size, kind), rs in groups.items():
        agg = aggregate_runs(rs)
        rows.append({"variant": variant, "mem_size": mem_size, "edit_kind": kind,
                     "n_runs": len(rs), "seeds": [r.seed for r in rs],
                     **{k: {"mean": v[0], "std": v[1]} for k, v in agg.items()}})
    pvals = []
    keys = list(groups)
    for i, ka in enumerate(keys):
        for kb in keys[i + 1:]:
            if ka[1] != kb[1]:
                continue
            ra = {r.seed: r.final_accuracy for r in groups[ka]}
            rb = {r.seed: r.final_accuracy for r in groups[kb]}
            seeds = sorted(set(ra) & set(rb))
            if len(seeds) < 2:
                continue
            a = [ra[s] for s in seeds]
            b = [rb[s] for s in seeds]
            for (x, y, nx, ny) in ((a, b, ka, kb), (b, a, kb, ka)):
                pvals.append({"mem_size": ka[1], "a": _label(nx), "b": _label(ny),
                              "n": len(seeds), "mean_diff": float(np.mean(x) - np.mean(y)),
                              "p_one_sided": paired_t_test_one_sided(x, y)})
    out = {"groups": rows, "pairwise": pvals}
    if extra:
        out.update(extra)
    return out


def _label(key):
    variant, _, kind = key
    return variant if kind in (None, "gmed", "none") else f"{variant}[{kind}]"


def write_summary_json(path, summary):
    with open(path, "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True, default=_json_default)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o)}")
