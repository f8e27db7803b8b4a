"""Adam training of the trajectory model and multi-seed experiments."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, TrainingError
from .evaluation import METRICS, MetricReport, evaluate_samples, testset_signature
from .losses import LossBreakdown, total_loss, write_loss_rows
from .model import ModelConfig, ModelParams, SceneBatch, forward_pair, forward_teacher_forced, save_params

VARIANTS = ("ours", "s_attn", "non_smooth", "average", "correct")

# named random sub-streams derived from one seed
STREAM_DATA, STREAM_INIT, STREAM_ROLLOUT = 0, 1, 2


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    tau: float = 1e-3
    beta_var: float = 0.01
    beta_smooth: float = 0.01
    batch_size: int = 8
    epochs: int = 200
    seed: int = 0
    variant: str = "ours"
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    adam_eps: float = 1e-8
    rollout_sampling: str = ""  # empty: use the model config's setting
    grad_clip: float = 0.0  # global-norm clip; 0 disables
    max_steps: int = 0  # optimizer-step cap; 0 means epochs alone decide
    val_every: int = 1  # epochs between validation passes

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("must be > 0", key="learning_rate")
        if not self.tau > 0:
            raise ConfigError("must be > 0", key="tau")
        if self.beta_var < 0 or self.beta_smooth < 0:
            raise ConfigError("trade-off weights must be >= 0", key="beta")
        if int(self.batch_size) < 1:
            raise ConfigError("must be >= 1", key="batch_size")
        if int(self.epochs) < 1:
            raise ConfigError("must be >= 1", key="epochs")
        if self.variant not in VARIANTS:
            raise ConfigError(f"must be one of {VARIANTS}, got {self.variant!r}", key="variant")
        if not (0 <= self.adam_b1 < 1 and 0 <= self.adam_b2 < 1 and self.adam_eps > 0):
            raise ConfigError("invalid Adam coefficients", key="adam")
        if self.rollout_sampling not in ("", "mean", "reparameterized"):
            raise ConfigError("must be mean|reparameterized", key="rollout_sampling")
        if self.grad_clip < 0 or self.max_steps < 0 or self.val_every < 1:
            raise ConfigError("grad_clip, max_steps >= 0 and val_every >= 1 required", key="schedule")

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kw = {}
        for k, v in d.items():
            if k not in fields:
                raise ConfigError("unknown key", key=k)
            kw[k] = _coerce(k, v, type(getattr(cls(), k)))
        return cls(**kw)


def _coerce(key, value, kind):
    if isinstance(value, kind) and not (kind is int and isinstance(value, bool)):
        return value
    try:
        if kind is int:
            f = float(value)
            if f != int(f):
                raise ValueError
            return int(f)
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"cannot parse {value!r} as {kind.__name__}", key=key) from None


def parse_config_text(text):
    """``key = value`` lines (``#`` comments) into a dict of strings."""
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'", key=line)
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


# ---------------------------------------------------------------------------
# optimizer


@dataclass(frozen=True, eq=False)
class AdamState:
    step: int
    m: dict
    v: dict

    @classmethod
    def zeros(cls, params):
        return cls(0, {k: np.zeros_like(a) for k, a in params.items()}, {k: np.zeros_like(a) for k, a in params.items()})


def adam_step(params, grads, moments, config):
    """One bias-corrected Adam update; returns ``(params, moments)``.

    ``params``, ``grads``: dicts of same-shaped arrays.  Inputs are not
    modified.
    """
    lr, b1, b2, eps = config.learning_rate, config.adam_b1, config.adam_b2, config.adam_eps
    t = moments.step + 1
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            from .errors import ShapeError

            raise ShapeError("adam_step", p.shape, g.shape, detail=k)
        m = b1 * moments.m[k] + (1.0 - b1) * g
        v = b2 * moments.v[k] + (1.0 - b2) * (g * g)
        new_p[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(t, new_m, new_v)


def clip_by_global_norm(grads, max_norm):
    total = math.sqrt(math.fsum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm <= 0 or total <= max_norm:
        return grads, total
    s = max_norm / total
    return {k: g * s for k, g in grads.items()}, total


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)
    losses: list = field(default_factory=list)  # LossBreakdown per step
    val_epochs: list = field(default_factory=list)
    val_ade: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_ade: float = math.inf

    def append(self, step, breakdown):
        if self.steps and step <= self.steps[-1]:
            raise TrainingError("log steps must increase", step=step)
        breakdown.node = None
        self.steps.append(step)
        self.losses.append(breakdown)

    def totals(self):
        return np.array([lb.total for lb in self.losses])

    def write(self, directory):
        os.makedirs(directory, exist_ok=True)
        write_loss_rows(os.path.join(directory, "train_log.csv"), list(zip(self.steps, self.losses)))
        with open(os.path.join(directory, "val_log.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("epoch", "val_ade"))
            for e, v in zip(self.val_epochs, self.val_ade):
                w.writerow((e, repr(float(v))))


def _stream(seed, stream):
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(stream,)))


def _variant_setup(cfg):
    """(use rollout pass, attention mode, smoothness term, beta_smooth)."""
    return {
        "ours": (True, None, True, cfg.beta_smooth),
        "s_attn": (False, None, True, 0.0),
        "non_smooth": (True, None, True, 0.0),
        "average": (True, "uniform", True, cfg.beta_smooth),
        "correct": (True, "oracle", False, 0.0),
    }[cfg.variant]


def _override(mode, samples):
    if mode is None:
        return None
    if mode == "uniform":
        return "uniform"
    return np.stack([s.correct_attention[0] for s in samples])


def _check_oracle(cfg, *sets):
    if cfg.variant != "correct":
        return
    for samples in sets:
        for s in samples:
            if getattr(s, "correct_attention", None) is None:
                raise ConfigError("variant 'correct' needs samples with oracle attention labels", key="variant")


def batch_loss(samples, params, model_config, cfg, rng):
    """Loss breakdown of one batch on a fresh tape, averaged over its scenes.

    Scenes of different shapes run as separate sub-batches on one tape.
    """
    use_ro, mode, smooth, beta_s = _variant_setup(cfg)
    tape = ad.Tape()
    groups = {}
    for s in samples:
        sc = s.scene
        groups.setdefault((sc.T, sc.N, sc.t_obs), []).append(s)
    sampling = cfg.rollout_sampling or model_config.rollout_sampling
    parts = []
    scale = 1.0 / len(samples)
    for key in sorted(groups):
        group = groups[key]
        batch = SceneBatch.of([s.scene for s in group])
        ov = _override(mode, group)
        if use_ro:
            tf, ro = forward_pair(batch, params, model_config, rng, tape=tape, sampling=sampling, attention_override=ov)
        else:
            tf = forward_teacher_forced(batch, params, model_config, tape=tape, attention_override=ov)
            ro = None
        parts.append(
            (total_loss(batch, tf, ro, cfg.beta_var, beta_s, cfg.tau, smooth=smooth, scale=scale), tf)
        )
    return parts, tape


def _combine(parts):
    out = LossBreakdown()
    node = None
    for lb, _ in parts:
        for k in LossBreakdown.FIELDS:
            setattr(out, k, getattr(out, k) + getattr(lb, k))
        node = lb.node if node is None else node + lb.node
    out.node = node
    return out


def loss_and_grads(samples, params, model_config, cfg, rng):
    parts, tape = batch_loss(samples, params, model_config, cfg, rng)
    lb = _combine(parts)
    grads = {k: np.zeros_like(params[k]) for k in params.names()}
    # each sub-batch owns its own parameter leaves; accumulate over them
    g = ad.backward(tape, lb.node, keep_intermediate=False)
    for _, tf in parts:
        for k, node in tf.params.items():
            grads[k] = grads[k] + g[node]
    return lb, grads


def _validation_ade(params, model_config, cfg, val):
    if not val:
        return math.nan
    _, mode, _, _ = _variant_setup(cfg)
    return evaluate_samples(params, val, model_config, attention=mode).mean("ade")


def train(dataset, model_config=None, config=None, *, out_dir=None, progress=None):
    """Train one model; returns ``(best ModelParams, TrainLog)``.

    ``dataset`` has ``train`` and ``val`` sample lists (objects with a
    ``.scene`` and, for the oracle variant, ``.correct_attention``).  The
    parameters with the lowest validation ADE are returned; without a
    validation split the final parameters are.
    """
    cfg = config or TrainConfig()
    model_config = model_config or ModelConfig()
    train_set = list(dataset.train)
    val_set = list(getattr(dataset, "val", []) or [])
    if not train_set:
        raise ConfigError("training set is empty", key="dataset")
    _check_oracle(cfg, train_set, val_set)

    data_rng = _stream(cfg.seed, STREAM_DATA)
    roll_rng = _stream(cfg.seed, STREAM_ROLLOUT)
    params = ModelParams.init(model_config, _stream(cfg.seed, STREAM_INIT))
    arrays = {k: np.array(params[k]) for k in params.names()}
    moments = AdamState.zeros(arrays)
    log = TrainLog()
    best = params
    step = 0
    n = len(train_set)
    per_epoch = math.ceil(n / cfg.batch_size)
    done = False
    for epoch in range(1, cfg.epochs + 1):
        order = data_rng.permutation(n)
        for b in range(per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            batch = [train_set[i] for i in idx]
            step += 1
            try:
                lb, grads = loss_and_grads(batch, params, model_config, cfg, roll_rng)
            except (FloatingPointError, ArithmeticError, ValueError) as exc:
                raise TrainingError(f"forward/backward failed: {exc}", step=step) from exc
            if not math.isfinite(lb.total):
                raise TrainingError(f"non-finite loss {lb.total} ({lb.row()})", step=step)
            if not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingError("non-finite gradient", step=step)
            if cfg.grad_clip > 0:
                grads, _ = clip_by_global_norm(grads, cfg.grad_clip)
            arrays, moments = adam_step(arrays, grads, moments, cfg)
            params = params.replace_arrays(arrays)
            log.append(step, lb)
            if progress is not None:
                progress(step, epoch, lb)
            if cfg.max_steps and step >= cfg.max_steps:
                done = True
                break
        if val_set and (epoch % cfg.val_every == 0 or done or epoch == cfg.epochs):
            v = _validation_ade(params, model_config, cfg, val_set)
            log.val_epochs.append(epoch)
            log.val_ade.append(v)
            if v < log.best_val_ade:
                log.best_val_ade, log.best_epoch, best = v, epoch, params
        if done:
            break
    if not val_set:
        best, log.best_epoch = params, epoch
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, "best.npz")
        save_params(best, path, {"train_config": cfg.to_dict(), "best_epoch": log.best_epoch})
        log.checkpoints.append(path)
        log.write(out_dir)
    return best, log


# ---------------------------------------------------------------------------
# experiments


def evaluate_run(params, model_config, cfg, test_sets):
    """Per-case mean metrics of one trained model."""
    _, mode, _, _ = _variant_setup(cfg)
    out = {}
    for case, samples in test_sets.items():
        sm = evaluate_samples(params, samples, model_config, attention=mode)
        out[case] = {m: sm.mean(m) for m in METRICS}
    return out


@dataclass
class ExperimentResult:
    report: MetricReport
    params: list
    logs: list


def run_experiment(dataset_fn, model_config=None, config=None, n_runs=10, *, out_dir=None, progress=None):
    """Train ``n_runs`` models with seeds ``seed + k`` and test each one.

    ``dataset_fn(seed)`` returns the dataset (``train``, ``val``, ``test``
    as a ``{case: samples}`` dict) for one run; pass a constant function to
    share a dataset between runs.
    """
    cfg = config or TrainConfig()
    model_config = model_config or ModelConfig()
    if int(n_runs) < 1:
        raise ConfigError("must be >= 1", key="n_runs")
    report = MetricReport(cfg.variant)
    params_out, logs, sigs = [], [], []
    for k in range(int(n_runs)):
        seed = cfg.seed + k
        ds = dataset_fn(seed)
        run_dir = None if out_dir is None else os.path.join(out_dir, f"run_{k:02d}")
        p, log = train(ds, model_config, cfg.replace(seed=seed), out_dir=run_dir, progress=progress)
        metrics = evaluate_run(p, model_config, cfg, ds.test)
        report.add_run(seed, metrics)
        sigs.append(testset_signature(ds.test))
        report.test_signature = hashlib.sha256(" ".join(sigs).encode()).hexdigest()[:16]
        params_out.append(p)
        logs.append(log)
    if out_dir is not None:
        report.to_csv(os.path.join(out_dir, "metrics.csv"))
    return ExperimentResult(report, params_out, logs)
