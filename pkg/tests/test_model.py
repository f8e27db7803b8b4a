import numpy as np
import pytest

from smoothattn import autodiff as ad
from smoothattn import model as M
from smoothattn.errors import ConfigError, CovarianceError, DataError, DomainError, ShapeError


def random_scene(rng, T=6, N=3, t_obs=3):
    steps = rng.normal(scale=0.3, size=(T, N, 2))
    steps[:, :, 1] += 0.3
    return M.Scene(np.cumsum(steps, axis=0) + rng.normal(size=(1, N, 2)) * 2, t_obs).centered()


def small_config(**kw):
    return M.ModelConfig(embed_dim=4, hidden_dim=5, attn_dim=3, **kw)


def random_params(config, rng, scale=1.0):
    p = M.ModelParams.init(config, rng)
    return p.replace_arrays({k: p[k] + rng.normal(scale=0.1 * scale, size=p[k].shape) for k in p.names()})


class TestScene:
    def test_invariants(self):
        with pytest.raises(ShapeError):
            M.Scene(np.zeros((4, 1, 2)), 2)
        with pytest.raises(ConfigError):
            M.Scene(np.zeros((4, 2, 2)), 4)
        with pytest.raises(ConfigError):
            M.Scene(np.zeros((4, 2, 2)), 0)
        with pytest.raises(DomainError):
            M.Scene(np.full((4, 2, 2), np.nan), 2)

    def test_states_read_only(self):
        s = M.Scene(np.zeros((3, 2, 2)), 1)
        with pytest.raises(ValueError):
            s.states[0, 0, 0] = 1.0

    def test_centered_first_step_centroid(self, rng):
        s = random_scene(rng)
        np.testing.assert_allclose(s.states[0].mean(axis=0), 0.0, atol=1e-14)

    def test_centering_ignores_agent_order(self, rng):
        raw = M.Scene(rng.normal(size=(4, 7, 2)) * 100, 2)
        perm = rng.permutation(7)
        a = raw.centered().permuted(perm).states
        b = raw.permuted(perm).centered().states
        np.testing.assert_array_equal(a, b)

    def test_batch_requires_equal_shapes(self):
        a = M.Scene(np.zeros((4, 2, 2)), 2)
        b = M.Scene(np.zeros((4, 3, 2)), 2)
        with pytest.raises(ShapeError):
            M.SceneBatch.of([a, b])


class TestParams:
    def test_shapes_follow_config(self):
        cfg = small_config()
        shapes = M.param_shapes(cfg)
        assert shapes["pred_w"] == (5, 5)
        assert shapes["g_interact_w"] == (4, 4 + 5, 5)
        assert shapes["g_pred_w"] == (4, 4 + 3 * 5, 5)
        assert shapes["attn_w"] == (5, 3)

    def test_dims_validated(self):
        with pytest.raises(ConfigError):
            M.ModelConfig(embed_dim=0)
        with pytest.raises(ConfigError):
            M.ModelConfig(rollout_sampling="mode")

    def test_arrays_immutable(self, rng):
        p = M.ModelParams.init(small_config(), rng)
        with pytest.raises(ValueError):
            p["pred_b"][0] = 1.0

    def test_checkpoint_round_trip_bit_exact(self, rng, tmp_path):
        p = random_params(small_config(), rng)
        path = tmp_path / "p.npz"
        M.save_params(p, path, {"note": "x"})
        q = M.load_params(path)
        assert q.config == p.config
        for k in p.names():
            assert q[k].tobytes() == p[k].tobytes()
        assert M.checkpoint_meta(path) == {"note": "x"}
        path2 = tmp_path / "q.npz"
        M.save_params(q, path2, {"note": "x"})
        assert path.read_bytes() == path2.read_bytes()

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(DataError, match="not found"):
            M.load_params(tmp_path / "nope.npz")


class TestBuildingBlocks:
    def test_interaction_embedding_order_matters(self, rng):
        cfg = small_config()
        p = random_params(cfg, rng)
        tape = ad.Tape()
        nodes = {k: tape.constant(p[k]) for k in p.names()}
        a = tape.constant([[1.0, 2.0]])
        b = tape.constant([[-0.5, 0.3]])
        ab = M.embed_interaction(a, b, nodes, cfg).value
        ba = M.embed_interaction(b, a, nodes, cfg).value
        assert not np.allclose(ab, ba)

    def test_zero_params_give_zero_features(self):
        cfg = small_config()
        p = M.ModelParams.zeros(cfg)
        tape = ad.Tape()
        nodes = {k: tape.constant(p[k]) for k in p.names()}
        s = tape.constant([[1.0, 2.0]])
        assert np.all(M.embed_interaction(s, s, nodes, cfg).value == 0.0)
        assert np.all(M.embed_self(s, s, nodes, cfg).value == 0.0)

    def test_stationary_self_embedding(self, rng):
        cfg = small_config()
        p = random_params(cfg, rng)
        tape = ad.Tape()
        nodes = {k: tape.constant(p[k]) for k in p.names()}
        s = tape.constant([[1.0, -2.0]])
        out = M.embed_self(s, s, nodes, cfg).value
        w = p["self_w"]
        expected = np.tanh(np.array([0.0, 0.0, 0.1, -0.2]) @ w + p["self_b"])
        np.testing.assert_allclose(out[0], expected, atol=1e-15)

    def test_single_other_agent_gets_full_attention(self, rng):
        cfg = small_config()
        p = random_params(cfg, rng)
        tape = ad.Tape()
        nodes = {k: tape.constant(p[k]) for k in p.names()}
        theta = M.compute_attention(tape.constant(rng.normal(size=(4, 5))), tape.constant(rng.normal(size=(4, 1, 5))), nodes)
        np.testing.assert_array_equal(theta.value, np.ones((4, 1)))

    def test_orthogonal_features_give_uniform_attention(self):
        cfg = M.ModelConfig(embed_dim=2, hidden_dim=3, attn_dim=3)
        p = M.ModelParams.zeros(cfg).replace_arrays({"attn_w": np.eye(3)})
        tape = ad.Tape()
        nodes = {k: tape.constant(p[k]) for k in p.names()}
        o_self = tape.constant([[0.7, 0.0, 0.0]])
        o_edges = tape.constant([[[0.0, 0.2, 0.0], [0.0, 0.0, -0.4], [0.0, 1.0, 1.0]]])
        theta = M.compute_attention(o_self, o_edges, nodes).value
        np.testing.assert_allclose(theta, [[1 / 3, 1 / 3, 1 / 3]], atol=1e-15)

    def test_attention_matches_brute_force(self, rng):
        cfg = small_config()
        p = random_params(cfg, rng)
        tape = ad.Tape()
        nodes = {k: tape.constant(p[k]) for k in p.names()}
        o_self = rng.normal(size=(2, 5))
        o_edges = rng.normal(size=(2, 4, 5))
        theta = M.compute_attention(tape.constant(o_self), tape.constant(o_edges), nodes).value
        f = lambda v: np.tanh(v @ p["attn_w"] + p["attn_b"])
        for r in range(2):
            logits = np.array([f(o_self[r]) @ f(o_edges[r, k]) for k in range(4)])
            e = np.exp(logits - logits.max())
            np.testing.assert_allclose(theta[r], e / e.sum(), atol=1e-14)

    def test_empty_edge_list_rejected(self, rng):
        cfg = small_config()
        p = random_params(cfg, rng)
        tape = ad.Tape()
        nodes = {k: tape.constant(p[k]) for k in p.names()}
        with pytest.raises(ShapeError):
            M.compute_attention(tape.constant(np.zeros((2, 5))), tape.constant(np.zeros((2, 0, 5))), nodes)


class TestForward:
    def test_output_shapes(self, rng):
        scene = random_scene(rng, T=10, N=3)
        cfg = small_config()
        res = M.forward_teacher_forced(scene, random_params(cfg, rng), cfg)
        assert res.gaussian_params().raw.shape == (10, 3, 5)
        assert res.attention().shape == (10, 3, 2)

    def test_zero_params_mean_is_base_plus_bias(self, rng):
        scene = random_scene(rng, T=5, N=3)
        for base in ("position", "velocity"):
            cfg = small_config(mean_base=base)
            bias = np.array([0.3, -0.2, 0.0, 0.0, 0.0])
            p = M.ModelParams.zeros(cfg).replace_arrays({"pred_b": bias})
            mean = M.forward_teacher_forced(scene, p, cfg, trainable=False).gaussian_params().mean
            s = scene.states
            prev = np.concatenate([s[:1], s[:-1]])
            expect = s + bias[:2] if base == "position" else 2 * s - prev + bias[:2]
            np.testing.assert_allclose(mean, expect, atol=1e-15)

    def test_covariances_positive_definite(self, rng):
        scene = random_scene(rng, T=8, N=4)
        cfg = small_config()
        cov = M.forward_teacher_forced(scene, random_params(cfg, rng, 10), cfg).gaussian_params().cov
        det = cov[..., 0, 0] * cov[..., 1, 1] - cov[..., 0, 1] ** 2
        assert np.all(det > 0) and np.all(cov[..., 0, 0] + cov[..., 1, 1] > 0)
        np.testing.assert_array_equal(cov[..., 0, 1], cov[..., 1, 0])

    def test_teacher_forced_and_rollout_agree_on_observed_steps(self, rng):
        scene = random_scene(rng, T=8, N=3, t_obs=5)
        cfg = small_config()
        p = random_params(cfg, rng)
        tf = M.forward_teacher_forced(scene, p, cfg)
        ro = M.rollout(scene, p, cfg, rng_seed=3)
        g1, g2 = tf.gaussian_params().raw, ro.gaussian_params().raw
        np.testing.assert_array_equal(g1[:5], g2[:5])
        np.testing.assert_array_equal(tf.attention()[:5], ro.attention()[:5])
        assert not np.array_equal(g1[5:], g2[5:])

    def test_forward_pair_matches_separate_passes(self, rng):
        scene = random_scene(rng, T=8, N=3, t_obs=4)
        cfg = small_config()
        p = random_params(cfg, rng)
        tf, ro = M.forward_pair(scene, p, cfg, rng_seed=11)
        np.testing.assert_array_equal(tf.gaussian_params().raw, M.forward_teacher_forced(scene, p, cfg).gaussian_params().raw)
        np.testing.assert_array_equal(ro.gaussian_params().raw, M.rollout(scene, p, cfg, 11).gaussian_params().raw)

    def test_mean_rollout_with_last_step_unobserved_is_teacher_forced(self, rng):
        scene = random_scene(rng, T=6, N=3, t_obs=5)
        cfg = small_config()
        p = random_params(cfg, rng)
        tf = M.forward_teacher_forced(scene, p, cfg).gaussian_params().raw
        ro_res = M.rollout(scene, p, cfg, sampling="mean")
        np.testing.assert_array_equal(ro_res.gaussian_params().raw[:5], tf[:5])
        # the single rolled-out input is the teacher-forced prediction of the last step
        np.testing.assert_array_equal(ro_res.states()[5], tf[4, :, :2])

    def test_rollout_deterministic_per_seed(self, rng):
        scene = random_scene(rng, T=7, N=3, t_obs=3)
        cfg = small_config()
        p = random_params(cfg, rng)
        a = M.rollout(scene, p, cfg, 5).gaussian_params().raw
        b = M.rollout(scene, p, cfg, 5).gaussian_params().raw
        c = M.rollout(scene, p, cfg, 6).gaussian_params().raw
        assert a.tobytes() == b.tobytes()
        assert not np.array_equal(a, c)

    def test_attention_rows_are_distributions(self, rng):
        scene = random_scene(rng, T=6, N=5)
        cfg = small_config()
        th = M.rollout(scene, random_params(cfg, rng, 5), cfg, 0).attention()
        assert np.all(th >= 0)
        np.testing.assert_allclose(th.sum(axis=-1), 1.0, atol=1e-9)

    def test_attention_override(self, rng):
        scene = random_scene(rng, T=5, N=3)
        cfg = small_config()
        p = random_params(cfg, rng)
        th = M.forward_teacher_forced(scene, p, cfg, attention_override="uniform").attention()
        np.testing.assert_array_equal(th, np.full((5, 3, 2), 0.5))
        one_hot = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
        th = M.forward_teacher_forced(scene, p, cfg, attention_override=one_hot).attention()
        np.testing.assert_array_equal(th, np.broadcast_to(one_hot, (5, 3, 2)))
        with pytest.raises(ShapeError):
            M.forward_teacher_forced(scene, p, cfg, attention_override=np.ones((3, 3)))

    def test_batched_equals_individual(self, rng):
        cfg = small_config()
        p = random_params(cfg, rng)
        scenes = [random_scene(rng, T=6, N=3) for _ in range(3)]
        batched = M.forward_teacher_forced(M.SceneBatch.of(scenes), p, cfg).gaussian_params().raw
        for b, s in enumerate(scenes):
            single = M.forward_teacher_forced(s, p, cfg).gaussian_params().raw
            np.testing.assert_array_equal(batched[:, b], single)

    def test_saturated_correlation_reports_step_and_agent(self, rng):
        scene = random_scene(rng, T=6, N=3, t_obs=3)
        cfg = small_config()
        bias = np.array([0.0, 0.0, -2.0, -2.0, 40.0])
        p = M.ModelParams.zeros(cfg).replace_arrays({"pred_b": bias})
        with pytest.raises(CovarianceError) as info:
            M.rollout(scene, p, cfg, 0)
        assert info.value.step == 3 and info.value.agent == 0


class TestPermutation:
    @pytest.mark.parametrize("seed", range(3))
    def test_relabeling_permutes_outputs_exactly(self, seed):
        rng = np.random.default_rng(seed)
        cfg = M.ModelConfig(embed_dim=6, hidden_dim=7, attn_dim=5)
        scene = random_scene(rng, T=6, N=5)
        p = random_params(cfg, rng)
        perm = rng.permutation(5)
        base = M.forward_teacher_forced(scene, p, cfg, trainable=False)
        moved = M.forward_teacher_forced(scene.permuted(perm), p, cfg, trainable=False)
        g0, g1 = base.gaussian_params().raw, moved.gaussian_params().raw
        assert g0[:, perm].tobytes() == g1.tobytes()
        a0 = M.full_attention(base.attention())[:, perm][:, :, perm]
        assert M.compact_attention(a0).tobytes() == moved.attention().tobytes()


class TestPredict:
    def test_horizon_validation(self, rng):
        scene = random_scene(rng)
        cfg = small_config()
        p = random_params(cfg, rng)
        with pytest.raises(ConfigError):
            M.predict(scene, 0, p, cfg)
        with pytest.raises(ConfigError):
            M.predict(scene.states[:1], 3, p, cfg)

    def test_output_length(self, rng):
        scene = random_scene(rng, T=6, N=3, t_obs=4)
        cfg = small_config()
        p = random_params(cfg, rng)
        out = M.predict(scene, 7, p, cfg)
        assert out.positions.shape == (7, 3, 2)
        assert out.attention.shape == (4 + 7 - 1, 3, 2)

    def test_array_prefix_matches_scene(self, rng):
        scene = random_scene(rng, T=6, N=3, t_obs=4)
        cfg = small_config()
        p = random_params(cfg, rng)
        a = M.predict(scene, 2, p, cfg).positions
        b = M.predict(np.array(scene.states[:4]), 2, p, cfg).positions
        np.testing.assert_array_equal(a, b)

    def test_matches_mean_rollout(self, rng):
        scene = random_scene(rng, T=7, N=3, t_obs=4)
        cfg = small_config()
        p = random_params(cfg, rng)
        ro = M.rollout(scene, p, cfg, sampling="mean").gaussian_params().mean
        np.testing.assert_array_equal(M.predict(scene, 3, p, cfg).positions, ro[3:6])


class TestReparameterizedSampling:
    def test_monte_carlo_moments(self):
        cfg = small_config()
        tape = ad.Tape()
        runner = M._Runner(M.ModelParams.zeros(cfg), cfg, 1, 2, tape, False, None)
        raw = np.array([0.5, -1.0, np.log(2.0), np.log(0.5), np.arctanh(0.6)])
        n = 100_000
        eps = np.random.default_rng(0).standard_normal((n, 2))
        s = runner.sample(tape.constant(np.tile(raw, (n, 1))), eps, 0).value
        cov = np.array([[4.0, 0.6], [0.6, 0.25]])
        se = np.sqrt(np.diag(cov) / n)
        assert np.all(np.abs(s.mean(axis=0) - raw[:2]) < 3 * se)
        emp = np.cov(s.T)
        np.testing.assert_allclose(emp, cov, rtol=0.05)
