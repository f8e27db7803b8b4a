"""Synthetic Double Merge and Halting Car driving scenarios.

Vehicles are kinematic points on a straight four-lane road.  Traffic moves
toward +y; x is lateral.  Lengths are in *scene units* where one lane is
1.0 wide, and one step is 0.1 s.  The two inner lanes carry the two main
vehicles; 20 background vehicles drive at constant speed on the two outer
lanes.

Agent order in every generated scene: 0 = green main vehicle, 1 = brown
main vehicle, 2..21 = background.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .model import Scene

GENERATOR_VERSION = "1"
DT = 0.1
SAFETY_RADIUS = 0.9


@dataclass(frozen=True)
class LaneLayout:
    lane_count: int = 4
    lane_width: float = 1.0
    road_length: float = 60.0

    @property
    def centers(self):
        """Lane-center x coordinates, left to right."""
        w = self.lane_width
        return tuple((k - (self.lane_count - 1) / 2.0) * w for k in range(self.lane_count))


@dataclass(frozen=True)
class VehicleSpec:
    role: str  # main_a | main_b | background
    lane: int
    y0: float
    speed: float


@dataclass(frozen=True)
class ScenarioConfig:
    """Episode shape and randomization ranges shared by both scenarios."""

    T: int = 40
    t_obs: int = 15
    background_count: int = 20
    main_speed: tuple = (0.30, 0.36)  # units per step
    main_gap: tuple = (2.0, 3.0)
    background_speed: tuple = (0.25, 0.40)
    background_spacing: tuple = (1.5, 3.0)
    background_start: tuple = (-8.0, -4.0)
    # double merge
    merge_start: tuple = (6, 10)  # inclusive step range for the front vehicle
    merge_duration: int = 12
    merge_wait: tuple = (1, 3)
    # halting car
    brake_start: tuple = (8, 12)
    brake_steps: tuple = (6, 8)
    stop_steps: tuple = (3, 5)
    accel_steps: int = 10
    follow_kp: float = 0.04
    follow_kd: float = 0.25
    follow_max_accel: float = 0.08
    follow_min_gap: float = 1.2


@dataclass(frozen=True, eq=False)
class ScenarioSample:
    scene: Scene
    scenario: str
    case: str
    correct_attention: np.ndarray  # [T, N, N-1]
    main_agents: tuple = (0, 1)
    front_agent: int = 1
    rear_agent: int = 0
    highlight: tuple = (0, 0)  # [start, end) steps needing high attention
    meta: dict = field(default_factory=dict)


def oracle_attention(T, N, main_agents=(0, 1)):
    """Main vehicles attend fully to each other; everyone else is uniform."""
    a, b = main_agents
    att = np.full((N, N - 1), 1.0 / (N - 1))
    for i, j in ((a, b), (b, a)):
        att[i] = 0.0
        att[i, j if j < i else j - 1] = 1.0
    return np.broadcast_to(att, (T, N, N - 1)).copy()


def _ease(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def _uniform(rng, lo_hi):
    lo, hi = lo_hi
    return float(rng.uniform(lo, hi))


def _integer(rng, lo_hi):
    lo, hi = lo_hi
    return int(rng.integers(lo, hi + 1))


def _background(rng, cfg, layout):
    """Constant-speed vehicles split evenly over the two outer lanes."""
    specs = []
    outer = (0, layout.lane_count - 1)
    per_lane = [cfg.background_count // 2, cfg.background_count - cfg.background_count // 2]
    for lane, count in zip(outer, per_lane):
        speed = _uniform(rng, cfg.background_speed)
        y = _uniform(rng, cfg.background_start)
        for _ in range(count):
            specs.append(VehicleSpec("background", lane, y, speed))
            y += _uniform(rng, cfg.background_spacing)
    return specs


def _constant_track(spec, layout, T):
    k = np.arange(T, dtype=np.float64)
    xy = np.empty((T, 2))
    xy[:, 0] = layout.centers[spec.lane]
    xy[:, 1] = spec.y0 + spec.speed * k
    return xy


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def gen_double_merge(case, seed, config=None, layout=None):
    """Two inner-lane vehicles swap lanes; the rear one waits for the front one.

    ``case='major'``: green (left inner lane) starts behind brown.
    ``case='minor'``: green starts ahead.
    """
    if case not in ("major", "minor"):
        raise ConfigError(f"double merge case must be major|minor, got {case!r}", key="case")
    cfg = config or ScenarioConfig()
    layout = layout or LaneLayout()
    rng = _rng(seed)
    T = cfg.T
    speed = _uniform(rng, cfg.main_speed)
    gap = _uniform(rng, cfg.main_gap)
    k0 = _integer(rng, cfg.merge_start)
    wait = _integer(rng, cfg.merge_wait)
    D = cfg.merge_duration
    green_lane, brown_lane = 1, 2
    green_front = case == "minor"
    front, rear = (0, 1) if green_front else (1, 0)
    lanes = {0: green_lane, 1: brown_lane}
    y0 = {front: gap, rear: 0.0}
    starts = {front: k0, rear: k0 + D + wait}

    k = np.arange(T, dtype=np.float64)
    tracks = []
    for agent in (0, 1):
        src = layout.centers[lanes[agent]]
        dst = layout.centers[lanes[1 - agent]]
        xy = np.empty((T, 2))
        xy[:, 0] = src + (dst - src) * _ease((k - starts[agent]) / D)
        xy[:, 1] = y0[agent] + speed * k
        tracks.append(xy)
    for spec in _background(rng, cfg, layout):
        tracks.append(_constant_track(spec, layout, T))
    states = np.stack(tracks, axis=1)
    N = states.shape[1]
    scene = Scene(states, cfg.t_obs, tuple(f"v{i}" for i in range(N))).centered()
    return ScenarioSample(
        scene=scene,
        scenario="double_merge",
        case=case,
        correct_attention=oracle_attention(T, N),
        front_agent=front,
        rear_agent=rear,
        highlight=(k0, starts[rear]),
        meta={
            "speed": speed,
            "gap": gap,
            "front_start": k0,
            "rear_start": starts[rear],
            "front_end": k0 + D,
            "rear_end": starts[rear] + D,
        },
    )


def _leader_speeds(rng, cfg, speed, stop):
    T = cfg.T
    v = np.full(T, speed)
    if not stop:
        return v, (0, T)
    kb = _integer(rng, cfg.brake_start)
    nd = _integer(rng, cfg.brake_steps)
    ns = _integer(rng, cfg.stop_steps)
    na = cfg.accel_steps
    for t in range(T):
        if t < kb:
            continue
        s = t - kb
        if s < nd:
            v[t] = speed * (1.0 - (s + 1) / nd)
        elif s < nd + ns:
            v[t] = 0.0
        elif s < nd + ns + na:
            v[t] = speed * (s - nd - ns + 1) / na
    return v, (kb, min(T, kb + nd + ns + na))


def gen_halting_car(case, seed, config=None, layout=None):
    """Leader (brown) ahead of follower (green) in one lane.

    ``case='stop'``: the leader brakes to a halt, waits, then accelerates
    back; the follower regulates its gap.  ``case='go'``: both cruise.
    """
    if case not in ("stop", "go"):
        raise ConfigError(f"halting car case must be stop|go, got {case!r}", key="case")
    cfg = config or ScenarioConfig()
    layout = layout or LaneLayout()
    rng = _rng(seed)
    T = cfg.T
    speed = _uniform(rng, cfg.main_speed)
    gap = _uniform(rng, cfg.main_gap)
    lead_v, window = _leader_speeds(rng, cfg, speed, case == "stop")
    lane_x = layout.centers[1]

    lead_y = np.empty(T)
    lead_y[0] = gap
    for t in range(1, T):
        lead_y[t] = lead_y[t - 1] + lead_v[t - 1]
    follow_y = np.empty(T)
    follow_y[0] = 0.0
    if case == "go":
        follow_y[:] = speed * np.arange(T, dtype=np.float64)
    else:
        vf = speed
        for t in range(1, T):
            cur_gap = lead_y[t - 1] - follow_y[t - 1]
            acc = cfg.follow_kp * (cur_gap - gap) + cfg.follow_kd * (lead_v[t - 1] - vf)
            acc = min(max(acc, -cfg.follow_max_accel), cfg.follow_max_accel)
            vf = max(0.0, vf + acc)
            nxt = min(follow_y[t - 1] + vf, lead_y[t] - cfg.follow_min_gap)
            nxt = max(nxt, follow_y[t - 1])  # no reversing
            vf = nxt - follow_y[t - 1]
            follow_y[t] = nxt

    tracks = [np.column_stack([np.full(T, lane_x), follow_y]), np.column_stack([np.full(T, lane_x), lead_y])]
    for spec in _background(rng, cfg, layout):
        tracks.append(_constant_track(spec, layout, T))
    states = np.stack(tracks, axis=1)
    N = states.shape[1]
    scene = Scene(states, cfg.t_obs, tuple(f"v{i}" for i in range(N))).centered()
    return ScenarioSample(
        scene=scene,
        scenario="halting_car",
        case=case,
        correct_attention=oracle_attention(T, N),
        front_agent=1,
        rear_agent=0,
        highlight=window,
        meta={"speed": speed, "gap": gap},
    )


SCENARIOS = {
    "double_merge": (gen_double_merge, ("major", "minor")),
    "halting_car": (gen_halting_car, ("stop", "go")),
}


def scenario_cases(scenario, major_case=None):
    """Return ``(major_case, minor_case)`` labels for a scenario."""
    if scenario not in SCENARIOS:
        raise ConfigError(f"unknown scenario {scenario!r}", key="scenario")
    cases = SCENARIOS[scenario][1]
    major = major_case or cases[0]
    if major not in cases:
        raise ConfigError(f"{scenario} cases are {cases}, got {major!r}", key="major_case")
    minor = cases[1] if major == cases[0] else cases[0]
    return major, minor


def generate(scenario, case, seed, config=None):
    if scenario not in SCENARIOS:
        raise ConfigError(f"unknown scenario {scenario!r}", key="scenario")
    return SCENARIOS[scenario][0](case, seed, config)


@dataclass(frozen=True, eq=False)
class ScenarioDataset:
    train: list
    val: list
    test: dict  # case -> list of samples
    manifest: dict


_TRAIN_STREAM, _TEST_STREAM, _SPLIT_STREAM = 0, 1, 2


def _sample_seed(seed, stream, case_index, k):
    return np.random.SeedSequence(entropy=seed, spawn_key=(stream, case_index, k))


def minor_count(major_count, minor_ratio):
    return max(1, int(math.floor(major_count * minor_ratio + 0.5)))


def build_dataset(
    scenario,
    major_count=50,
    minor_ratio=0.3,
    seed=0,
    *,
    major_case=None,
    val_fraction=0.2,
    test_per_case=50,
    config=None,
):
    """Train/val pool of ``major_count`` major plus ``minor_ratio`` as many minor
    samples, split ``val_fraction`` for validation; independent test sets per case.
    """
    if not 0.0 < minor_ratio <= 1.0:
        raise ConfigError(f"minor_ratio must be in (0, 1], got {minor_ratio}", key="minor_ratio")
    if int(major_count) < 1:
        raise ConfigError(f"major_count must be >= 1, got {major_count}", key="major_count")
    if int(test_per_case) < 0:
        raise ConfigError("test_per_case must be >= 0", key="test_per_case")
    if not 0.0 <= val_fraction < 1.0:
        raise ConfigError("val_fraction must be in [0, 1)", key="val_fraction")
    major, minor = scenario_cases(scenario, major_case)
    n_minor = minor_count(major_count, minor_ratio)
    cases = SCENARIOS[scenario][1]

    pool = []
    for case, count in ((major, major_count), (minor, n_minor)):
        ci = cases.index(case)
        for k in range(count):
            pool.append(generate(scenario, case, _sample_seed(seed, _TRAIN_STREAM, ci, k), config))
    order = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(_SPLIT_STREAM,))).permutation(len(pool))
    n_val = int(math.floor(val_fraction * len(pool) + 0.5))
    val = [pool[i] for i in order[:n_val]]
    train = [pool[i] for i in order[n_val:]]
    test = {}
    for case in (major, minor):
        ci = cases.index(case)
        test[case] = [
            generate(scenario, case, _sample_seed(seed, _TEST_STREAM, ci, k), config)
            for k in range(test_per_case)
        ]
    manifest = {
        "scenario": scenario,
        "major_case": major,
        "minor_case": minor,
        "major_count": int(major_count),
        "minor_count": n_minor,
        "minor_ratio": float(minor_ratio),
        "val_fraction": float(val_fraction),
        "test_per_case": int(test_per_case),
        "seed": int(seed),
        "generator_version": GENERATOR_VERSION,
    }
    return ScenarioDataset(train, val, test, manifest)
