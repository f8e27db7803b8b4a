"""Command-line entry point: generate, train, eval, predict, plot, compare."""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import data as data_mod
from . import plots
from .errors import ConfigError, DataError, SmoothAttnError
from .evaluation import (
    METRICS,
    MetricReport,
    attention_toward,
    compare_variants,
    evaluate_samples,
    testset_signature,
)
from .model import ModelConfig, Scene, checkpoint_meta, forward_teacher_forced, load_params, predict
from .scenarios import build_dataset
from .training import TrainConfig, _variant_setup, parse_config_text, run_experiment

OUT_ENV = "SMOOTHATTN_OUT"
MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)} - {"rollout_sampling"}
TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}


def _out_root():
    return os.environ.get(OUT_ENV, "runs")


def _ensure_dir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create directory ({exc.strerror})", path=path) from None


def _write_text(path, text):
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    except OSError as exc:
        raise DataError(f"cannot write ({exc.strerror})", path=path) from None


# ---------------------------------------------------------------------------
# generate


def cmd_generate(args):
    ds = build_dataset(
        args.scenario,
        args.major,
        args.minor_ratio,
        args.seed,
        major_case=args.major_case,
        val_fraction=args.val_fraction,
        test_per_case=args.test_per_case,
    )
    _ensure_dir(args.out)
    manifest = data_mod.save_dataset(ds, args.out)
    print(
        f"wrote {args.out}: {len(ds.train)} train, {len(ds.val)} val, "
        + ", ".join(f"{len(v)} test/{k}" for k, v in ds.test.items())
        + f" ({manifest['major_count']} {manifest['major_case']} + {manifest['minor_count']} {manifest['minor_case']})"
    )
    return 0


# ---------------------------------------------------------------------------
# train


def load_config_file(path):
    """Split a ``key = value`` file into (TrainConfig kwargs, ModelConfig kwargs)."""
    try:
        with open(path, encoding="utf-8") as fh:
            raw = parse_config_text(fh.read())
    except OSError as exc:
        raise DataError(f"cannot read config ({exc.strerror})", path=path) from None
    return split_config(raw)


def split_config(raw):
    train_kw, model_kw = {}, {}
    for k, v in raw.items():
        if k in TRAIN_KEYS:
            train_kw[k] = v
        elif k in MODEL_KEYS:
            model_kw[k] = v
        else:
            raise ConfigError("unknown config key", key=k)
    return train_kw, model_kw


def _model_config(model_kw):
    kw = dict(model_kw)
    out = {}
    for f in dataclasses.fields(ModelConfig):
        if f.name in kw:
            kind = type(f.default)
            try:
                out[f.name] = kind(float(kw[f.name])) if kind is int else kind(kw[f.name])
            except (TypeError, ValueError):
                raise ConfigError(f"cannot parse {kw[f.name]!r}", key=f.name) from None
    return ModelConfig(**out)


def build_configs(args):
    train_kw, model_kw = ({}, {}) if not args.config else load_config_file(args.config)
    for key in TRAIN_KEYS | MODEL_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            (train_kw if key in TRAIN_KEYS else model_kw)[key] = v
    return TrainConfig.from_dict(train_kw), _model_config(model_kw)


def cmd_train(args):
    cfg, mcfg = build_configs(args)
    ds = data_mod.load_dataset(args.data)
    out = args.out or os.path.join(_out_root(), cfg.variant)
    _ensure_dir(out)

    def progress(step, epoch, lb):
        if args.verbose:
            print(f"step {step} epoch {epoch} loss {lb.total:.4f}", file=sys.stderr)

    res = run_experiment(lambda seed: ds, mcfg, cfg, args.runs, out_dir=out, progress=progress)
    info = {
        "variant": cfg.variant,
        "data": os.path.abspath(args.data),
        "runs": args.runs,
        "train_config": cfg.to_dict(),
        "model_config": mcfg.to_dict(),
        "test_signature": res.report.test_signature,
    }
    _write_text(os.path.join(out, "run.json"), json.dumps(info, indent=1, sort_keys=True) + "\n")
    table = compare_variants({cfg.variant: res.report}, metrics=METRICS)
    _write_text(os.path.join(out, "summary.txt"), table.to_text())
    print(table.to_text(), end="")
    return 0


# ---------------------------------------------------------------------------
# eval / predict


def _attention_mode(path, override):
    if override:
        variant = override
    else:
        variant = checkpoint_meta(path).get("train_config", {}).get("variant", "ours")
    return variant, _variant_setup(TrainConfig(variant=variant))[1]


def cmd_eval(args):
    params = load_params(args.checkpoint)
    variant, mode = _attention_mode(args.checkpoint, args.variant)
    ds = data_mod.load_dataset(args.data)
    if not ds.test:
        raise DataError("no test scenes (expected test/*.csv)", path=args.data)
    out = args.out or os.path.join(_out_root(), "eval")
    _ensure_dir(out)
    report = MetricReport(variant, test_signature=testset_signature(ds.test))
    metrics, lines = {}, ["case,scene_id," + ",".join(METRICS)]
    for case, samples in ds.test.items():
        sm = evaluate_samples(params, samples, attention=mode)
        metrics[case] = {m: sm.mean(m) for m in METRICS}
        for k, s in enumerate(samples):
            lines.append(f"{case},{s.scene.scene_id}," + ",".join(repr(float(getattr(sm, m)[k])) for m in METRICS))
    seed = checkpoint_meta(args.checkpoint).get("train_config", {}).get("seed", 0)
    report.add_run(seed, metrics)
    report.to_csv(os.path.join(out, "metrics.csv"))
    _write_text(os.path.join(out, "per_scene.csv"), "\n".join(lines) + "\n")
    text = compare_variants({variant: report}, metrics=METRICS).to_text()
    _write_text(os.path.join(out, "metrics.txt"), text)
    print(text, end="")
    return 0


def cmd_predict(args):
    params = load_params(args.checkpoint)
    scenes = data_mod.load_csv(args.scene, t_obs=1, center=False)
    rows = ["scene_id,agent_id,step,timestamp_ms,x,y"]
    for scene in scenes:
        t_obs = args.t_obs or scene.T
        if not 2 <= t_obs <= scene.T:
            raise ConfigError(f"t_obs must be in [2, {scene.T}]", key="t_obs")
        prefix = scene.states[:t_obs]
        centred = Scene(scene.states, 1, scene.agent_ids).centered().states
        offset = scene.states - centred
        pred = predict(prefix - offset[:t_obs], args.horizon, params)
        pos = pred.positions + offset[0]
        for j, aid in enumerate(scene.agent_ids):
            for k in range(args.horizon):
                t = t_obs + k
                rows.append(
                    f"{scene.scene_id},{aid},{t},{t * data_mod.STEP_MS},"
                    f"{data_mod.COORD_FORMAT % pos[k, j, 0]},{data_mod.COORD_FORMAT % pos[k, j, 1]}"
                )
    text = "\n".join(rows) + "\n"
    if args.out:
        _write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# plot / compare


def _run_dirs(path):
    if os.path.exists(os.path.join(path, "best.npz")):
        return [path]
    found = sorted(os.path.join(path, d) for d in os.listdir(path) if os.path.exists(os.path.join(path, d, "best.npz")))
    if not found:
        raise DataError("no checkpoint (best.npz) in run directory", path=path)
    return found


def _run_info(path):
    for p in (os.path.join(path, "run.json"), os.path.join(os.path.dirname(os.path.abspath(path)), "run.json")):
        if os.path.exists(p):
            with open(p, encoding="utf-8") as fh:
                return json.load(fh)
    return {}


def cmd_plot(args):
    if not os.path.isdir(args.run):
        raise DataError("run directory not found", path=args.run)
    info = _run_info(args.run)
    data_dir = args.data or info.get("data")
    if not data_dir:
        raise ConfigError("dataset unknown; pass --data", key="data")
    ds = data_mod.load_dataset(data_dir)
    out = args.out or os.path.join(args.run, "plots")
    _ensure_dir(out)
    count = 0
    for run_dir in _run_dirs(args.run):
        ckpt = os.path.join(run_dir, "best.npz")
        params = load_params(ckpt)
        variant, mode = _attention_mode(ckpt, None)
        tag = os.path.basename(os.path.normpath(run_dir))
        for case, samples in ds.test.items():
            s = samples[args.index]
            ov = None if mode is None else ("uniform" if mode == "uniform" else s.correct_attention[0])
            theta = forward_teacher_forced(s.scene, params, trainable=False, attention_override=ov).attention()
            main = s.main_agents or (0, 1)
            for agent in main:
                other = [a for a in main if a != agent][0]
                series = {f"agent {agent} -> agent {other}": attention_toward(theta, agent, other)}
                stem = os.path.join(out, f"{tag}_{case}_attention_agent{agent}")
                plots.attention_timeline_svg(series, stem + ".svg", window=s.highlight, title=f"{variant} / {case}: attention of agent {agent}")
                plots.write_series_csv(stem + ".csv", series)
                count += 2
            pred = predict(s.scene, s.scene.T - s.scene.t_obs, params, attention_override=ov)
            plots.trajectory_svg(
                s.scene.states, s.scene.t_obs, os.path.join(out, f"{tag}_{case}_trajectories.svg"),
                pred=pred.positions, main_agents=main, title=f"{variant} / {case}",
            )
            count += 1
    print(f"wrote {count} files to {out}")
    return 0


def cmd_compare(args):
    reports = {}
    for d in args.runs:
        path = os.path.join(d, "metrics.csv")
        if not os.path.exists(path):
            raise DataError("missing metrics.csv", path=path)
        sig = _run_info(d).get("test_signature", "")
        for variant, rep in MetricReport.from_csv(path, sig).items():
            if variant in reports:
                raise ConfigError(f"variant {variant!r} given twice", key="runs")
            reports[variant] = rep
    table = compare_variants(reports, metrics=METRICS)
    out = args.out or os.path.join(_out_root(), "compare")
    _ensure_dir(out)
    _write_text(os.path.join(out, "comparison.txt"), table.to_text())
    table.to_csv(os.path.join(out, "comparison.csv"))
    for metric in ("ade", "fde"):
        groups = {}
        for r in table.rows:
            if r.metric == metric:
                groups.setdefault(r.case, {})[r.variant] = (r.mean, r.std)
        plots.bar_chart_svg(groups, os.path.join(out, f"{metric}.svg"), ylabel=metric.upper())
    print(table.to_text(), end="")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_train_flags(p):
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--beta-var", dest="beta_var", type=float)
    p.add_argument("--beta-smooth", dest="beta_smooth", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--variant", choices=("ours", "s_attn", "non_smooth", "average", "correct"))
    p.add_argument("--rollout-sampling", dest="rollout_sampling", choices=("mean", "reparameterized"))
    p.add_argument("--grad-clip", dest="grad_clip", type=float)
    p.add_argument("--max-steps", dest="max_steps", type=int)
    p.add_argument("--val-every", dest="val_every", type=int)
    p.add_argument("--embed-dim", dest="embed_dim", type=int)
    p.add_argument("--hidden-dim", dest="hidden_dim", type=int)
    p.add_argument("--attn-dim", dest="attn_dim", type=int)
    p.add_argument("--mean-base", dest="mean_base", choices=("position", "velocity"))


def make_parser():
    ap = argparse.ArgumentParser(prog="smoothattn", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset directory")
    g.add_argument("--scenario", choices=("double_merge", "halting_car"), default="double_merge")
    g.add_argument("--major", type=int, default=50)
    g.add_argument("--minor-ratio", dest="minor_ratio", type=float, default=0.3)
    g.add_argument("--major-case", dest="major_case", default=None)
    g.add_argument("--val-fraction", dest="val_fraction", type=float, default=0.2)
    g.add_argument("--test-per-case", dest="test_per_case", type=int, default=50)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one variant for several seeds")
    t.add_argument("--data", required=True)
    t.add_argument("--config", default=None, help="key = value file")
    t.add_argument("--runs", type=int, default=10)
    t.add_argument("--out", default=None)
    t.add_argument("--verbose", action="store_true")
    _add_train_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="test metrics of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", default=None)
    e.add_argument("--variant", default=None, choices=("ours", "s_attn", "non_smooth", "average", "correct"))
    e.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="forecast scenes from a trajectory CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--horizon", type=int, required=True)
    p.add_argument("--t-obs", dest="t_obs", type=int, default=None, help="observed steps (default: all)")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_predict)

    pl = sub.add_parser("plot", help="attention timelines and trajectory overlays")
    pl.add_argument("--run", required=True)
    pl.add_argument("--data", default=None)
    pl.add_argument("--index", type=int, default=0, help="test scene index per case")
    pl.add_argument("--out", default=None)
    pl.set_defaults(func=cmd_plot)

    c = sub.add_parser("compare", help="comparison table across variant runs")
    c.add_argument("--runs", nargs="+", required=True)
    c.add_argument("--out", default=None)
    c.set_defaults(func=cmd_compare)
    return ap


def main(argv=None):
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except SmoothAttnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
