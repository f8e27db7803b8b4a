"""Trajectory CSV format, windowing, splitting, and dataset directories.

CSV format (UTF-8, header required, ``.`` decimal separator)::

    scene_id,agent_id,step,timestamp_ms,x,y

Coordinates are written with 12 decimals.  Rows of one scene may appear in
any order; agents are ordered by first appearance.  INTERACTION track
files load directly: ``case_id``, ``track_id`` and ``frame_id`` are read as
``scene_id``, ``agent_id`` and ``step``, and extra columns are ignored.

A dataset directory holds ``train/``, ``val/`` and ``test/`` subdirectories
of CSV files plus an optional ``manifest.json``.  Test files are named
after their case (``test/minor.csv``); the manifest records ``t_obs`` and
per-scene scenario metadata.
"""

from __future__ import annotations

import csv
import json
import math
import os
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, DataError
from .model import Scene
from .scenarios import ScenarioDataset, ScenarioSample, oracle_attention

COLUMNS = ("scene_id", "agent_id", "step", "timestamp_ms", "x", "y")
ALIASES = {"case_id": "scene_id", "track_id": "agent_id", "frame_id": "step"}
COORD_FORMAT = "%.12f"
STEP_MS = 100


class DataWarning(UserWarning):
    """Input data was partially skipped."""


def default_t_obs(T):
    """Observed length for scenes loaded without one: 40% of the steps."""
    return min(T - 1, max(1, int(math.floor(0.4 * T + 0.5))))


def _read_rows(path):
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open: {exc.strerror}", path=path) from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("empty file", path=path) from None
        names = [ALIASES.get(h.strip(), h.strip()) for h in header]
        need = ("scene_id", "agent_id", "step", "x", "y")
        missing = [c for c in need if c not in names]
        if missing:
            raise DataError(f"missing columns {missing}", path=path, line=1)
        col = {c: names.index(c) for c in need}
        rows = []
        for line, rec in enumerate(reader, start=2):
            if not rec or all(not f.strip() for f in rec):
                continue
            if len(rec) != len(names):
                raise DataError(f"expected {len(names)} fields, got {len(rec)}", path=path, line=line)
            try:
                step = int(rec[col["step"]])
                x = float(rec[col["x"]])
                y = float(rec[col["y"]])
            except ValueError as exc:
                raise DataError(f"malformed value ({exc})", path=path, line=line) from None
            if not (math.isfinite(x) and math.isfinite(y)):
                raise DataError("non-finite coordinate", path=path, line=line)
            rows.append((rec[col["scene_id"]].strip(), rec[col["agent_id"]].strip(), step, x, y, line))
    if not rows:
        raise DataError("no data rows", path=path)
    return rows


def _build_scene(path, scene_id, tracks, order, t_obs, center):
    spans = {}
    for aid in order:
        steps = sorted(tracks[aid])
        if steps[-1] - steps[0] + 1 != len(steps):
            gap = next(a + 1 for a, b in zip(steps, steps[1:]) if b != a + 1)
            raise DataError(f"scene {scene_id!r}: agent {aid!r} has a gap at step {gap}", path=path)
        spans[aid] = (steps[0], steps[-1])
    if len(order) < 2:
        raise DataError(f"scene {scene_id!r} has {len(order)} agent(s); at least 2 are required", path=path)
    lo = max(s[0] for s in spans.values())
    hi = min(s[1] for s in spans.values())
    if hi - lo + 1 < 2:
        raise DataError(f"scene {scene_id!r}: agents share fewer than 2 steps", path=path)
    T = hi - lo + 1
    states = np.empty((T, len(order), 2))
    for j, aid in enumerate(order):
        tr = tracks[aid]
        for k in range(T):
            states[k, j] = tr[lo + k]
    obs = default_t_obs(T) if t_obs is None else int(t_obs)
    if not 1 <= obs < T:
        raise DataError(f"scene {scene_id!r}: t_obs={obs} does not fit {T} steps", path=path)
    scene = Scene(states, obs, tuple(order), scene_id)
    return scene.centered() if center else scene


def load_csv(path, t_obs=None, center=True):
    """Read every scene in a trajectory CSV.

    Agents whose lifetimes differ are cropped to the longest interval in
    which all of them are present.  ``t_obs`` defaults to
    :func:`default_t_obs`; ``center`` moves the first-step centroid to the
    origin.
    """
    rows = _read_rows(path)
    scenes, tracks, orders = [], {}, {}
    for sid, aid, step, x, y, line in rows:
        if sid not in tracks:
            scenes.append(sid)
            tracks[sid], orders[sid] = {}, []
        if aid not in tracks[sid]:
            tracks[sid][aid] = {}
            orders[sid].append(aid)
        if step in tracks[sid][aid]:
            raise DataError(f"duplicate row for scene {sid!r}, agent {aid!r}, step {step}", path=path, line=line)
        tracks[sid][aid][step] = (x, y)
    return [_build_scene(path, sid, tracks[sid], orders[sid], t_obs, center) for sid in scenes]


def save_csv(path, scenes, step_ms=STEP_MS):
    """Write scenes in the trajectory CSV format (agent-major rows)."""
    seen = set()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for k, scene in enumerate(scenes):
            sid = scene.scene_id or f"scene{k:05d}"
            if sid in seen:
                raise DataError(f"duplicate scene id {sid!r}", path=path)
            seen.add(sid)
            ids = scene.agent_ids or tuple(f"a{j}" for j in range(scene.N))
            for j, aid in enumerate(ids):
                for t in range(scene.T):
                    x, y = scene.states[t, j]
                    w.writerow((sid, aid, t, t * step_ms, COORD_FORMAT % x, COORD_FORMAT % y))


# ---------------------------------------------------------------------------
# windows and splits


@dataclass(frozen=True)
class WindowSpec:
    window: int
    observed: int
    stride: int = 0  # 0 means stride == window

    def __post_init__(self):
        if not 0 < self.observed < self.window:
            raise ConfigError(f"need 0 < observed < window, got {self.observed}, {self.window}", key="observed")
        if self.stride < 0:
            raise ConfigError(f"stride must be >= 1 (0 selects the window length), got {self.stride}", key="stride")

    @property
    def step(self):
        return self.stride or self.window

    def count(self, T):
        """Number of windows that fit in ``T`` steps."""
        return 0 if T < self.window else (T - self.window) // self.step + 1


def window(scenes, spec):
    """Cut scenes into standalone windows of ``spec.window`` steps.

    Each window is re-centred and observes its first ``spec.observed``
    steps.  Scenes shorter than a window are skipped with a warning.
    """
    out, skipped = [], 0
    for scene in scenes:
        n = spec.count(scene.T)
        if n == 0:
            skipped += 1
            continue
        for k in range(n):
            a = k * spec.step
            part = Scene(
                scene.states[a : a + spec.window],
                spec.observed,
                scene.agent_ids,
                f"{scene.scene_id}#{k}" if scene.scene_id else f"#{k}",
            )
            out.append(part.centered())
    if skipped:
        warnings.warn(f"{skipped} scene(s) shorter than the {spec.window}-step window were skipped", DataWarning, stacklevel=2)
    return out


def split_counts(n, fractions):
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(math.fsum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must be three non-negative numbers summing to 1, got {tuple(fractions)}", key="fractions")
    n_train = int(math.floor(fractions[0] * n + 0.5))
    n_val = min(n - n_train, int(math.floor(fractions[1] * n + 0.5)))
    return n_train, n_val, n - n_train - n_val


def split(items, fractions=(0.8, 0.1, 0.1), seed=0):
    """Shuffle by ``seed`` and cut into (train, val, test) lists."""
    items = list(items)
    n_train, n_val, _ = split_counts(len(items), fractions)
    order = np.random.default_rng(seed).permutation(len(items))
    pick = lambda idx: [items[i] for i in idx]
    return pick(order[:n_train]), pick(order[n_train : n_train + n_val]), pick(order[n_train + n_val :])


# ---------------------------------------------------------------------------
# dataset directories

MANIFEST = "manifest.json"


def _sample_meta(s):
    return {
        "scenario": s.scenario,
        "case": s.case,
        "main_agents": list(s.main_agents),
        "front_agent": s.front_agent,
        "rear_agent": s.rear_agent,
        "highlight": list(s.highlight),
    }


def _named(samples, prefix):
    out = []
    for k, s in enumerate(samples):
        scene = replace(s.scene, scene_id=f"{prefix}{k:04d}")
        out.append(replace(s, scene=scene))
    return out


def save_dataset(dataset, directory):
    """Write a ScenarioDataset as a dataset directory; returns the manifest."""
    parts = {"train": _named(dataset.train, "train-"), "val": _named(dataset.val, "val-")}
    tests = {case: _named(v, f"test-{case}-") for case, v in dataset.test.items()}
    scenes = {}
    try:
        for name in ("train", "val", "test"):
            os.makedirs(os.path.join(directory, name), exist_ok=True)
        for name, samples in parts.items():
            save_csv(os.path.join(directory, name, "scenes.csv"), [s.scene for s in samples])
            scenes.update({s.scene.scene_id: _sample_meta(s) for s in samples})
        for case, samples in tests.items():
            save_csv(os.path.join(directory, "test", f"{case}.csv"), [s.scene for s in samples])
            scenes.update({s.scene.scene_id: _sample_meta(s) for s in samples})
        t_obs = sorted({s.scene.t_obs for group in list(parts.values()) + list(tests.values()) for s in group})
        manifest = dict(dataset.manifest)
        manifest["t_obs"] = t_obs[0] if len(t_obs) == 1 else None
        manifest["format"] = {"columns": list(COLUMNS), "coordinates": COORD_FORMAT, "step_ms": STEP_MS}
        manifest["scenes"] = scenes
        with open(os.path.join(directory, MANIFEST), "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise DataError(f"cannot write dataset: {exc.strerror}", path=exc.filename or directory) from None
    return manifest


def _to_sample(scene, meta, default_case):
    if meta is None:
        return ScenarioSample(scene, "external", default_case, None, main_agents=None, front_agent=-1, rear_agent=-1, highlight=(0, scene.T))
    main = tuple(meta["main_agents"])
    return ScenarioSample(
        scene,
        meta["scenario"],
        meta["case"],
        oracle_attention(scene.T, scene.N, main),
        main_agents=main,
        front_agent=meta["front_agent"],
        rear_agent=meta["rear_agent"],
        highlight=tuple(meta["highlight"]),
    )


def _csv_files(directory):
    if not os.path.isdir(directory):
        return []
    return sorted(os.path.join(directory, f) for f in os.listdir(directory) if f.endswith(".csv"))


def load_dataset(directory, t_obs=None):
    """Read a dataset directory into a ScenarioDataset.

    Scenes listed in the manifest get their case label and oracle
    attention; others are labelled by file name and carry no oracle.
    """
    if not os.path.isdir(directory):
        raise DataError("dataset directory not found", path=directory)
    manifest = {}
    mpath = os.path.join(directory, MANIFEST)
    if os.path.exists(mpath):
        try:
            with open(mpath, encoding="utf-8") as fh:
                manifest = json.load(fh)
        except (OSError, ValueError) as exc:
            raise DataError(f"unreadable manifest ({exc})", path=mpath) from None
    t_obs = manifest.get("t_obs") if t_obs is None else t_obs
    metas = manifest.get("scenes", {})

    def read(path, case):
        return [_to_sample(sc, metas.get(sc.scene_id), case) for sc in load_csv(path, t_obs)]

    train = [s for f in _csv_files(os.path.join(directory, "train")) for s in read(f, "all")]
    val = [s for f in _csv_files(os.path.join(directory, "val")) for s in read(f, "all")]
    test = {}
    for f in _csv_files(os.path.join(directory, "test")):
        case = os.path.splitext(os.path.basename(f))[0]
        for s in read(f, case):
            test.setdefault(s.case if s.case != "external" else case, []).append(s)
    if not train:
        raise DataError("no training scenes (expected train/*.csv)", path=directory)
    manifest = {k: v for k, v in manifest.items() if k != "scenes"}
    return ScenarioDataset(train, val, test, manifest)
