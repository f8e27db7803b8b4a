import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from smoothattn import scenarios as S
from smoothattn import autodiff as ad
from smoothattn.losses import smoothness_loss
from smoothattn.errors import ConfigError

SEEDS = range(25)


def raw_states(sample):
    # centering shifts all agents equally, so relative geometry is unchanged
    return np.asarray(sample.scene.states)


def min_pair_distance(states):
    d = np.linalg.norm(states[:, :, None, :] - states[:, None, :, :], axis=-1)
    n = states.shape[1]
    d[:, np.arange(n), np.arange(n)] = np.inf
    return d.min()


class TestDoubleMerge:
    @pytest.mark.parametrize("case", ["major", "minor"])
    def test_agent_count_and_horizon(self, case):
        s = S.gen_double_merge(case, 0)
        assert s.scene.N == 22
        assert s.scene.T == S.ScenarioConfig().T
        assert s.scene.t_obs == S.ScenarioConfig().t_obs

    def test_green_ahead_only_in_minor_case(self):
        for seed in SEEDS:
            for case, green_ahead in (("minor", True), ("major", False)):
                st0 = raw_states(S.gen_double_merge(case, seed))[0]
                assert (st0[0, 1] > st0[1, 1]) == green_ahead

    def test_main_vehicles_swap_lanes(self):
        centers = S.LaneLayout().centers
        for case in ("major", "minor"):
            s = S.gen_double_merge(case, 3)
            x = raw_states(s)[:, :2, 0]
            offset = x[0, 0] - centers[1]
            np.testing.assert_allclose(x[-1] - offset, [centers[2], centers[1]], atol=1e-12)

    @pytest.mark.parametrize("case", ["major", "minor"])
    def test_safety_radius(self, case):
        for seed in SEEDS:
            assert min_pair_distance(raw_states(S.gen_double_merge(case, seed))) > S.SAFETY_RADIUS

    def test_rear_waits_for_front(self):
        for seed in SEEDS:
            s = S.gen_double_merge("minor", seed)
            x = raw_states(s)[:, :, 0]
            moving = lambda a: np.flatnonzero(np.abs(np.diff(x[:, a])) > 0)
            front, rear = moving(s.front_agent), moving(s.rear_agent)
            assert rear[0] > front[-1]

    def test_background_constant_velocity_on_outer_lanes(self):
        layout = S.LaneLayout()
        for seed in SEEDS:
            st_ = raw_states(S.gen_double_merge("major", seed))
            bg = st_[:, 2:]
            v = np.diff(bg, axis=0)
            assert np.abs(v - v[:1]).max() < 1e-12
            lanes_x = bg[0, :, 0] - st_[0, 0, 0] + layout.centers[1]
            assert np.all(np.isin(np.round(lanes_x, 9), np.round([layout.centers[0], layout.centers[-1]], 9)))

    def test_deterministic(self):
        a, b = S.gen_double_merge("minor", 7), S.gen_double_merge("minor", 7)
        assert a.scene.states.tobytes() == b.scene.states.tobytes()
        assert a.meta == b.meta
        assert S.gen_double_merge("minor", 8).scene.states.tobytes() != a.scene.states.tobytes()

    def test_unknown_case(self):
        with pytest.raises(ConfigError):
            S.gen_double_merge("stop", 0)


class TestHaltingCar:
    def leader_speed(self, s):
        return np.diff(raw_states(s)[:, 1, 1])

    def test_go_leader_constant(self):
        for seed in SEEDS:
            v = self.leader_speed(S.gen_halting_car("go", seed))
            assert np.abs(v - v[0]).max() < 1e-12

    def test_stop_leader_halts_then_recovers(self):
        for seed in SEEDS:
            v = self.leader_speed(S.gen_halting_car("stop", seed))
            stopped = np.flatnonzero(np.abs(v) < 1e-12)
            assert stopped.size > 0
            assert v[stopped[-1] + 1 :].max() > 0
            assert v.min() >= -1e-12

    @pytest.mark.parametrize("case", ["stop", "go"])
    def test_follower_stays_behind_and_clear(self, case):
        for seed in SEEDS:
            st_ = raw_states(S.gen_halting_car(case, seed))
            assert np.all(st_[:, 1, 1] > st_[:, 0, 1])
            assert min_pair_distance(st_) > S.SAFETY_RADIUS

    def test_follower_slows_for_stop(self):
        s = S.gen_halting_car("stop", 0)
        vf = np.diff(raw_states(s)[:, 0, 1])
        assert vf.min() < 0.5 * vf[0]

    def test_highlight_is_brake_window(self):
        s = S.gen_halting_car("stop", 2)
        v = self.leader_speed(s)
        start = s.highlight[0]
        assert np.all(np.abs(v[:start] - v[0]) < 1e-12)
        assert v[start] < v[0]


class TestOracle:
    @given(st.integers(1, 8), st.integers(2, 9))
    def test_rows_are_distributions(self, T, N):
        att = S.oracle_attention(T, N)
        assert att.shape == (T, N, N - 1)
        assert np.all(att >= 0)
        np.testing.assert_allclose(att.sum(axis=-1), 1.0, atol=1e-15)

    def test_main_vehicles_attend_fully(self):
        att = S.oracle_attention(3, 5)
        assert att[0, 0, 0] == 1.0  # agent 0 -> agent 1
        assert att[0, 1, 0] == 1.0  # agent 1 -> agent 0
        np.testing.assert_array_equal(att[:, 2:], 0.25)

    def test_time_constant_so_not_penalized(self):
        att = S.gen_double_merge("major", 0).correct_attention
        assert float(smoothness_loss(ad.Tape().constant(att)).value) == 0.0


class TestBuildDataset:
    def test_default_composition(self):
        ds = S.build_dataset("double_merge", 50, 0.3, 0, test_per_case=2)
        pool = ds.train + ds.val
        assert sum(s.case == "major" for s in pool) == 50
        assert sum(s.case == "minor" for s in pool) == 15
        assert (len(ds.train), len(ds.val)) == (52, 13)
        assert {k: len(v) for k, v in ds.test.items()} == {"major": 2, "minor": 2}

    @pytest.mark.parametrize("minor, major", [(3, 10), (15, 30), (30, 100)])
    def test_reduced_settings(self, minor, major):
        assert S.minor_count(major, minor / major) == minor

    def test_balanced_ratio(self):
        assert S.minor_count(20, 1.0) == 20

    def test_halting_major_case(self):
        ds = S.build_dataset("halting_car", 4, 0.5, 0, test_per_case=1)
        assert ds.manifest["major_case"] == "stop"
        ds = S.build_dataset("halting_car", 4, 0.5, 0, major_case="go", test_per_case=1)
        assert sum(s.case == "go" for s in ds.train + ds.val) == 4

    def test_deterministic_and_test_disjoint(self):
        a = S.build_dataset("double_merge", 6, 0.5, 1, test_per_case=3)
        b = S.build_dataset("double_merge", 6, 0.5, 1, test_per_case=3)
        key = lambda s: s.scene.states.tobytes()
        assert [key(s) for s in a.train] == [key(s) for s in b.train]
        pool = {key(s) for s in a.train + a.val}
        assert not pool & {key(s) for v in a.test.values() for s in v}

    @pytest.mark.parametrize(
        "kw",
        [dict(minor_ratio=0.0), dict(minor_ratio=1.5), dict(major_count=0), dict(test_per_case=-1), dict(val_fraction=1.0)],
    )
    def test_invalid_arguments(self, kw):
        args = dict(scenario="double_merge", major_count=2, minor_ratio=0.5)
        args.update(kw)
        with pytest.raises(ConfigError):
            S.build_dataset(**args)

    def test_unknown_scenario(self):
        with pytest.raises(ConfigError):
            S.build_dataset("roundabout", 2, 0.5)
