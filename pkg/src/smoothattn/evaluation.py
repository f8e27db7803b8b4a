"""Displacement metrics, attention diagnostics, and variant comparison."""

from __future__ import annotations

import csv
import hashlib
import io
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import betainc

from .errors import ConfigError, DomainError, ShapeError
from .model import Scene, SceneBatch, predict

METRICS = ("ade", "fde", "ade_main", "fde_main")


class DegenerateSampleWarning(UserWarning):
    """A significance test received samples without usable spread."""


def _future(pred, truth):
    pred = np.asarray(pred, dtype=np.float64)
    if isinstance(truth, Scene):
        truth = truth.states[truth.t_obs :]
    elif isinstance(truth, SceneBatch):
        truth = truth.states[truth.t_obs :]
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.shape[-1] != 2 or pred.shape[0] < 1:
        raise ShapeError("displacement", pred.shape, truth.shape)
    return pred, truth


def displacement_errors(pred, truth):
    """Euclidean error per predicted step and agent, shape ``pred.shape[:-1]``."""
    pred, truth = _future(pred, truth)
    return np.hypot(pred[..., 0] - truth[..., 0], pred[..., 1] - truth[..., 1])


def ade(pred, truth, agents=None):
    """Mean Euclidean error over predicted steps and agents.

    ``truth`` is a Scene (its steps after ``t_obs`` are compared) or an array
    with the same shape as ``pred``.  ``agents`` restricts the agent axis.
    """
    err = displacement_errors(pred, truth)
    if agents is not None:
        err = err[..., list(agents)]
    return float(err.mean())


def fde(pred, truth, agents=None):
    """Mean Euclidean error at the final predicted step."""
    err = displacement_errors(pred, truth)[-1]
    if agents is not None:
        err = err[..., list(agents)]
    return float(err.mean())


# ---------------------------------------------------------------------------
# attention


@dataclass(frozen=True, eq=False)
class AttentionCorrectness:
    agents: tuple
    per_step: np.ndarray  # [T, len(agents)]
    window: tuple
    window_mean: np.ndarray  # [len(agents)]


def main_rows(oracle):
    """Agents whose oracle row puts all mass on one other agent."""
    first = np.asarray(oracle)[0]
    return tuple(int(i) for i in np.nonzero(np.isclose(first.max(axis=-1), 1.0))[0])


def attention_correctness(theta, oracle, window=None, agents=None):
    """Attention mass each agent puts on its oracle target, per step.

    ``theta`` and ``oracle`` are [T, N, N-1].  ``window`` is a half-open
    step range ``(start, stop)``; its mean is reported per agent.
    """
    theta = np.asarray(theta, dtype=np.float64)
    oracle = np.asarray(oracle, dtype=np.float64)
    if theta.shape != oracle.shape or theta.ndim != 3:
        raise ShapeError("attention_correctness", theta.shape, oracle.shape)
    agents = main_rows(oracle) if agents is None else tuple(int(a) for a in agents)
    T = theta.shape[0]
    cols = np.argmax(oracle[:, list(agents)], axis=-1)  # [T, A]
    rows = np.take_along_axis(theta[:, list(agents)], cols[..., None], axis=-1)[..., 0]
    start, stop = (0, T) if window is None else (int(window[0]), int(window[1]))
    start, stop = max(0, start), min(T, stop)
    if stop <= start:
        mean = np.full(len(agents), np.nan)
    else:
        mean = rows[start:stop].mean(axis=0)
    return AttentionCorrectness(agents, rows, (start, stop), mean)


def attention_toward(theta, agent, target):
    """Per-step attention ``agent`` pays to ``target`` from a [T, N, N-1] tensor."""
    if agent == target:
        raise ConfigError("an agent does not attend to itself", key="target")
    col = target if target < agent else target - 1
    return np.asarray(theta)[:, agent, col]


# ---------------------------------------------------------------------------
# significance


def welch_statistics(a, b):
    """Welch's t statistic and Welch-Satterthwaite degrees of freedom."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size < 2 or b.size < 2:
        raise DomainError(f"each sample needs at least 2 values, got {a.size} and {b.size}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise DomainError("samples must be finite")
    va = a.var(ddof=1) / a.size
    vb = b.var(ddof=1) / b.size
    diff = a.mean() - b.mean()
    se2 = va + vb
    if se2 == 0.0:
        return (0.0 if diff == 0.0 else math.copysign(math.inf, diff)), math.nan
    t = diff / math.sqrt(se2)
    # normalised by se2 so tiny variances do not underflow to 0/0
    ra, rb = va / se2, vb / se2
    df = 1.0 / (ra * ra / (a.size - 1) + rb * rb / (b.size - 1))
    return float(t), float(df)


def welch_t_test(a, b):
    """Two-sided p-value of Welch's unequal-variance t-test.

    Uses ``p = I_x(df/2, 1/2)`` with ``x = df / (df + t^2)``.  Two
    zero-variance samples give ``p = 1`` for equal means and ``p = 0``
    (with a warning) otherwise.
    """
    t, df = welch_statistics(a, b)
    if math.isnan(df):
        if t == 0.0:
            return 1.0
        warnings.warn("both samples have zero variance and different means", DegenerateSampleWarning, stacklevel=2)
        return 0.0
    x = df / (df + t * t)
    p = float(betainc(df / 2.0, 0.5, x))
    return min(1.0, max(0.0, p))


# ---------------------------------------------------------------------------
# model evaluation


def _group_by_shape(samples):
    groups = {}
    for k, s in enumerate(samples):
        sc = s.scene
        groups.setdefault((sc.T, sc.N, sc.t_obs), []).append(k)
    return groups


def _override_for(mode, samples):
    if mode is None:
        return None
    if mode == "uniform":
        return "uniform"
    if mode == "oracle":
        missing = [s for s in samples if getattr(s, "correct_attention", None) is None]
        if missing:
            raise ConfigError("oracle attention requested but a sample has no oracle labels", key="variant")
        return np.stack([s.correct_attention[0] for s in samples])
    raise ConfigError(f"unknown attention mode {mode!r}", key="attention")


@dataclass(frozen=True, eq=False)
class SampleMetrics:
    """Per-sample metrics of one model on a list of samples."""

    ade: np.ndarray
    fde: np.ndarray
    ade_main: np.ndarray
    fde_main: np.ndarray
    attention: list = field(default_factory=list)  # per sample [T-1, N, N-1]

    def mean(self, metric):
        return float(np.mean(getattr(self, metric)))


def evaluate_samples(params, samples, config=None, *, attention=None, batch_size=16, keep_attention=False):
    """Mean-mode forecasts for every sample's unobserved steps.

    ``attention`` is ``None`` (learned), ``'uniform'``, or ``'oracle'``.
    Main-vehicle aggregates use ``sample.main_agents`` when present.
    """
    n = len(samples)
    out = {m: np.zeros(n) for m in METRICS}
    attn = [None] * n
    for (T, N, t_obs), idx in sorted(_group_by_shape(samples).items()):
        for lo in range(0, len(idx), batch_size):
            chunk = idx[lo : lo + batch_size]
            group = [samples[k] for k in chunk]
            batch = SceneBatch.of([s.scene for s in group])
            pred = predict(batch, T - t_obs, params, config, attention_override=_override_for(attention, group))
            for j, k in enumerate(chunk):
                scene = samples[k].scene
                p = pred.positions[:, j]
                main = getattr(samples[k], "main_agents", None) or tuple(range(N))
                out["ade"][k] = ade(p, scene)
                out["fde"][k] = fde(p, scene)
                out["ade_main"][k] = ade(p, scene, main)
                out["fde_main"][k] = fde(p, scene, main)
                if keep_attention:
                    attn[k] = pred.attention[:, j].copy()
    return SampleMetrics(out["ade"], out["fde"], out["ade_main"], out["fde_main"], attn if keep_attention else [])


def testset_signature(test_sets):
    """Digest identifying a ``{case: samples}`` test collection."""
    h = hashlib.sha256()
    for case in sorted(test_sets):
        h.update(case.encode())
        for s in test_sets[case]:
            h.update(np.ascontiguousarray(s.scene.states).tobytes())
            h.update(str(s.scene.t_obs).encode())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    """Per-run metric values of one variant; ``runs[k][case][metric]``."""

    variant: str
    seeds: list = field(default_factory=list)
    runs: list = field(default_factory=list)
    test_signature: str = ""

    def add_run(self, seed, metrics):
        self.seeds.append(int(seed))
        self.runs.append({c: {m: float(v) for m, v in d.items()} for c, d in metrics.items()})

    @property
    def cases(self):
        seen = []
        for run in self.runs:
            for c in run:
                if c not in seen:
                    seen.append(c)
        return seen

    def values(self, case, metric="ade"):
        return np.array([run[case][metric] for run in self.runs])

    def mean(self, case, metric="ade"):
        return float(np.mean(self.values(case, metric)))

    def std(self, case, metric="ade"):
        v = self.values(case, metric)
        return float(np.std(v, ddof=1)) if v.size > 1 else math.nan

    def to_rows(self):
        rows = []
        for seed, run in zip(self.seeds, self.runs):
            for case in run:
                row = {"variant": self.variant, "seed": seed, "case": case}
                row.update(run[case])
                rows.append(row)
        return rows

    def to_csv(self, path=None):
        rows = self.to_rows()
        keys = ["variant", "seed", "case"]
        for r in rows:
            keys += [k for k in r if k not in keys]
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, path, test_signature=""):
        reports = {}
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                rep = reports.setdefault(row["variant"], cls(row["variant"], test_signature=test_signature))
                seed = int(row["seed"])
                if seed not in rep.seeds:
                    rep.seeds.append(seed)
                    rep.runs.append({})
                k = rep.seeds.index(seed)
                rep.runs[k][row["case"]] = {m: float(v) for m, v in row.items() if m not in ("variant", "seed", "case")}
        return reports


ORACLE_VARIANT = "correct"


@dataclass(frozen=True)
class ComparisonRow:
    variant: str
    case: str
    metric: str
    mean: float
    std: float
    n: int
    p_value: float  # vs the reference variant; nan when not applicable
    oracle: bool


@dataclass(frozen=True)
class ComparisonTable:
    rows: tuple
    target: str
    reference: str

    def get(self, variant, case, metric="ade"):
        for r in self.rows:
            if (r.variant, r.case, r.metric) == (variant, case, metric):
                return r
        raise KeyError((variant, case, metric))

    def to_text(self):
        head = ("variant", "case", "metric", "mean", "std", "n", f"p({self.target} vs {self.reference})")
        body = []
        for r in self.rows:
            name = r.variant + (" (oracle)" if r.oracle else "")
            p = "" if math.isnan(r.p_value) else f"{r.p_value:.3g}"
            body.append((name, r.case, r.metric, f"{r.mean:.4f}", f"{r.std:.4f}", str(r.n), p))
        widths = [max(len(x[i]) for x in [head] + body) for i in range(len(head))]
        fmt = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
        lines = [fmt(head), fmt(tuple("-" * w for w in widths))] + [fmt(b) for b in body]
        return "\n".join(lines) + "\n"

    def to_csv(self, path=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("variant", "case", "metric", "mean", "std", "n", "p_value", "oracle"))
        for r in self.rows:
            w.writerow((r.variant, r.case, r.metric, repr(r.mean), repr(r.std), r.n, repr(r.p_value), int(r.oracle)))
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def compare_variants(reports, target="ours", reference="s_attn", metrics=("ade", "fde")):
    """Mean/std table per variant, case, and metric.

    ``reports`` maps variant name to MetricReport.  Rows of ``target``
    carry the Welch p-value against ``reference`` when both are present
    with at least two runs each.
    """
    if isinstance(reports, (list, tuple)):
        reports = {r.variant: r for r in reports}
    if not reports:
        raise ConfigError("no reports to compare")
    sigs = {r.test_signature for r in reports.values()}
    if len(sigs) > 1:
        raise ConfigError(f"variants were evaluated on different test sets: {sorted(sigs)}", key="test_signature")
    seed_sets = {tuple(r.seeds) for r in reports.values()}
    if len(seed_sets) > 1:
        raise ConfigError("variants were run with different seeds", key="seeds")
    cases = next(iter(reports.values())).cases
    order = [v for v in reports if v != ORACLE_VARIANT] + [v for v in reports if v == ORACLE_VARIANT]
    rows = []
    for case in cases:
        for metric in metrics:
            for v in order:
                rep = reports[v]
                p = math.nan
                if v == target and reference in reports and len(rep.runs) >= 2 and len(reports[reference].runs) >= 2:
                    p = welch_t_test(rep.values(case, metric), reports[reference].values(case, metric))
                rows.append(
                    ComparisonRow(v, case, metric, rep.mean(case, metric), rep.std(case, metric), len(rep.runs), p, v == ORACLE_VARIANT)
                )
    return ComparisonTable(tuple(rows), target, reference)
