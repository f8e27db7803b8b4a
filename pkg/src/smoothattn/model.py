"""Structural recurrent trajectory predictor with attention over agent pairs.

Every agent pair ``(i, j)``, ``i != j``, carries an interaction embedding
and its own LSTM state; every agent carries a self-loop embedding of its
last displacement with a second LSTM.  Each agent attends over its pair
features with a softmax of inner products, and a third LSTM consumes the
attended summary to emit a bivariate Gaussian over the agent's next
position.

All sub-networks are shared across agents and pairs, so relabeling the
agents of a scene relabels the outputs in exactly the same way.

Index conventions (0-based): the input state at step ``t`` produces
``gaussians[t]``, the prediction for step ``t + 1``; ``theta[t]`` is the
attention computed from inputs at ``t``.  Pairs are ordered agent-major,
``(0,1), (0,2), ..., (1,0), (1,2), ...``, so ``theta[t, i, k]`` is agent
``i``'s attention on the ``k``-th other agent in ascending label order.
"""

from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, CovarianceError, DataError, DomainError, ShapeError

GAUSS_WIDTH = 5  # mu_x, mu_y, log sigma_x, log sigma_y, pre-correlation
INIT_LOG_STD = math.log(0.1)  # initial predicted std, in scene units


# ---------------------------------------------------------------------------
# scenes


@dataclass(frozen=True, eq=False)
class Scene:
    """A fixed-cast multi-agent episode of 2D positions, shape [T, N, 2]."""

    states: np.ndarray
    t_obs: int
    agent_ids: tuple = ()
    scene_id: str = ""

    def __post_init__(self):
        states = np.array(self.states, dtype=np.float64)
        if states.ndim != 3 or states.shape[2] != 2:
            raise ShapeError("Scene", states.shape, detail="states must be [T, N, 2]")
        T, N = states.shape[:2]
        if N < 2:
            raise ShapeError("Scene", states.shape, detail="need at least two agents")
        if not 1 <= self.t_obs < T:
            raise ConfigError(f"need 1 <= t_obs < T, got t_obs={self.t_obs}, T={T}", key="t_obs")
        if not np.all(np.isfinite(states)):
            raise DomainError("Scene states must be finite")
        states.flags.writeable = False
        object.__setattr__(self, "states", states)
        ids = tuple(self.agent_ids) if self.agent_ids else tuple(str(k) for k in range(N))
        if len(ids) != N:
            raise ShapeError("Scene", (len(ids),), (N,), detail="agent_ids length")
        object.__setattr__(self, "agent_ids", ids)
        object.__setattr__(self, "t_obs", int(self.t_obs))

    @property
    def T(self):
        return self.states.shape[0]

    @property
    def N(self):
        return self.states.shape[1]

    def centered(self):
        """Translate so the agents' centroid at the first step is the origin."""
        first = self.states[0]
        # fsum is exactly rounded, hence independent of agent order
        centroid = np.array([math.fsum(first[:, 0]), math.fsum(first[:, 1])]) / self.N
        return replace(self, states=self.states - centroid)

    def permuted(self, perm):
        """Relabel agents so that new agent ``k`` is old agent ``perm[k]``."""
        perm = np.asarray(perm)
        return replace(
            self,
            states=self.states[:, perm],
            agent_ids=tuple(self.agent_ids[p] for p in perm),
        )

    def with_t_obs(self, t_obs):
        return replace(self, t_obs=t_obs)


@dataclass(frozen=True, eq=False)
class SceneBatch:
    """Scenes of identical shape stacked on a batch axis: states [T, B, N, 2]."""

    states: np.ndarray
    t_obs: int

    @classmethod
    def of(cls, scenes):
        scenes = [scenes] if isinstance(scenes, Scene) else list(scenes)
        if not scenes:
            raise ValueError("empty batch")
        shape, t_obs = scenes[0].states.shape, scenes[0].t_obs
        for s in scenes[1:]:
            if s.states.shape != shape or s.t_obs != t_obs:
                raise ShapeError("SceneBatch", shape, s.states.shape, detail="scenes must share T, N, t_obs")
        return cls(np.stack([s.states for s in scenes], axis=1), t_obs)

    @property
    def T(self):
        return self.states.shape[0]

    @property
    def B(self):
        return self.states.shape[1]

    @property
    def N(self):
        return self.states.shape[2]


# ---------------------------------------------------------------------------
# configuration and parameters


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 32
    hidden_dim: int = 64
    attn_dim: int = 32
    rollout_sampling: str = "reparameterized"
    # fixed input conditioning applied before the first affine layers
    position_scale: float = 0.1
    displacement_scale: float = 3.0
    relative_scale: float = 0.25
    # the mean head predicts an offset from: "position" (s_t) or
    # "velocity" (s_t + s_t - s_{t-1}, a constant-velocity extrapolation)
    mean_base: str = "velocity"

    def __post_init__(self):
        for key in ("embed_dim", "hidden_dim", "attn_dim"):
            if int(getattr(self, key)) < 1:
                raise ConfigError("must be >= 1", key=key)
        if self.rollout_sampling not in ("mean", "reparameterized"):
            raise ConfigError("must be 'mean' or 'reparameterized'", key="rollout_sampling")
        if self.mean_base not in ("position", "velocity"):
            raise ConfigError("must be 'position' or 'velocity'", key="mean_base")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)


def param_shapes(config):
    E, H, A = config.embed_dim, config.hidden_dim, config.attn_dim
    return {
        "interact_w": (4, E),
        "interact_b": (E,),
        "self_w": (4, E),
        "self_b": (E,),
        "embed_w": (2, E),
        "embed_b": (E,),
        "attn_w": (H, A),
        "attn_b": (A,),
        "g_interact_w": (4, E + H, H),
        "g_interact_b": (4, H),
        "g_self_w": (4, E + H, H),
        "g_self_b": (4, H),
        "g_pred_w": (4, E + 3 * H, H),
        "g_pred_b": (4, H),
        "pred_w": (H, GAUSS_WIDTH),
        "pred_b": (GAUSS_WIDTH,),
    }


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Immutable snapshot of every learnable array, keyed by name."""

    config: ModelConfig
    arrays: dict = field(default_factory=dict)

    def __post_init__(self):
        shapes = param_shapes(self.config)
        if set(self.arrays) != set(shapes):
            raise ConfigError(
                f"parameter names {sorted(self.arrays)} do not match {sorted(shapes)}"
            )
        frozen = {}
        for name in shapes:
            arr = np.array(self.arrays[name], dtype=np.float64)
            if arr.shape != shapes[name]:
                raise ShapeError(name, arr.shape, shapes[name])
            arr.flags.writeable = False
            frozen[name] = arr
        object.__setattr__(self, "arrays", frozen)

    def __getitem__(self, name):
        return self.arrays[name]

    def names(self):
        return list(self.arrays)

    def replace_arrays(self, new):
        merged = dict(self.arrays)
        merged.update(new)
        return ModelParams(self.config, merged)

    @classmethod
    def zeros(cls, config):
        return cls(config, {k: np.zeros(s) for k, s in param_shapes(config).items()})

    @classmethod
    def init(cls, config, rng):
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights; small prediction head."""
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        arrays = {}
        shapes = param_shapes(config)
        H = config.hidden_dim
        fan_in = {
            "interact": 4,
            "self": 4,
            "embed": 2,
            "attn": H,
            "g_interact": config.embed_dim + H,
            "g_self": config.embed_dim + H,
            "g_pred": config.embed_dim + 3 * H,
            "pred": H,
        }
        for name, shape in shapes.items():
            stem = name.rsplit("_", 1)[0]
            bound = 1.0 / np.sqrt(fan_in[stem])
            arrays[name] = rng.uniform(-bound, bound, size=shape)
        for cell in ("g_interact_b", "g_self_b", "g_pred_b"):
            arrays[cell][1] += 1.0  # forget gate starts open
        arrays["pred_w"] *= 0.1
        arrays["pred_b"] = np.zeros(GAUSS_WIDTH)
        arrays["pred_b"][2:4] = INIT_LOG_STD
        return cls(config, arrays)

    def save(self, path):
        save_params(self, path)

    @classmethod
    def load(cls, path):
        return load_params(path)


_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def save_params(params, path, meta=None):
    """Write a zip of ``config.json`` plus one ``.npy`` per array.

    ``meta`` is an optional JSON-serializable dict stored alongside the
    config.  Entry timestamps are fixed so identical parameters give
    identical bytes.
    """
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        head = {"config": params.config.to_dict(), "names": params.names(), "meta": meta or {}}
        zf.writestr(zipfile.ZipInfo("config.json", _ZIP_DATE), json.dumps(head, sort_keys=True))
        for name in params.names():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(params[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", _ZIP_DATE), buf.getvalue())


def _open_checkpoint(path):
    try:
        return zipfile.ZipFile(path, "r")
    except FileNotFoundError:
        raise DataError("checkpoint not found", path=path) from None
    except (OSError, zipfile.BadZipFile) as exc:
        raise DataError(f"unreadable checkpoint ({exc})", path=path) from None


def load_params(path):
    with _open_checkpoint(path) as zf:
        try:
            meta = json.loads(zf.read("config.json"))
            config = ModelConfig.from_dict(meta["config"])
            arrays = {}
            for name in meta["names"]:
                arrays[name] = np.lib.format.read_array(io.BytesIO(zf.read(f"{name}.npy")), allow_pickle=False)
        except (KeyError, ValueError) as exc:
            raise DataError(f"malformed checkpoint ({exc})", path=path) from None
    return ModelParams(config, arrays)


def checkpoint_meta(path):
    """The ``meta`` dict stored by :func:`save_params`."""
    with _open_checkpoint(path) as zf:
        try:
            return json.loads(zf.read("config.json")).get("meta", {})
        except (KeyError, ValueError) as exc:
            raise DataError(f"malformed checkpoint ({exc})", path=path) from None


# ---------------------------------------------------------------------------
# Gaussian outputs


@dataclass(frozen=True, eq=False)
class GaussianParams:
    """Raw head outputs [..., 5] with derived mean and covariance."""

    raw: np.ndarray

    @property
    def mean(self):
        return self.raw[..., 0:2]

    @property
    def std(self):
        return np.exp(self.raw[..., 2:4])

    @property
    def rho(self):
        return np.tanh(self.raw[..., 4])

    @property
    def cov(self):
        sx, sy = np.exp(self.raw[..., 2]), np.exp(self.raw[..., 3])
        r = np.tanh(self.raw[..., 4])
        out = np.empty(self.raw.shape[:-1] + (2, 2))
        out[..., 0, 0] = sx * sx
        out[..., 1, 1] = sy * sy
        out[..., 0, 1] = out[..., 1, 0] = r * sx * sy
        return out

    def __getitem__(self, index):
        return GaussianParams(self.raw[index])


def full_attention(theta):
    """Expand compact attention [..., N, N-1] to [..., N, N] with a zero diagonal."""
    theta = np.asarray(theta)
    N = theta.shape[-2]
    out = np.zeros(theta.shape[:-1] + (N,))
    for i in range(N):
        others = [j for j in range(N) if j != i]
        out[..., i, others] = theta[..., i, :]
    return out


def compact_attention(full):
    full = np.asarray(full)
    N = full.shape[-1]
    mask = ~np.eye(N, dtype=bool)
    return full[..., mask].reshape(full.shape[:-2] + (N, N - 1))


def uniform_attention(N):
    return np.full((N, N - 1), 1.0 / (N - 1))


# ---------------------------------------------------------------------------
# single-step building blocks


def _pair_index(B, N):
    """Row indices (tail i, head j) of every ordered pair, batch-major then agent-major."""
    i, j = np.nonzero(~np.eye(N, dtype=bool))
    offs = (np.arange(B) * N)[:, None]
    return (offs + i).ravel(), (offs + j).ravel()


def _pair_inputs(s_tail, s_head, config):
    """Fixed invertible recombination of ``concat(s_tail, s_head)``."""
    rel = (s_head - s_tail) * config.relative_scale
    return ad.concat([rel, s_tail * config.position_scale], axis=1)


def _self_inputs(s_prev, s_curr, config):
    disp = (s_curr - s_prev) * config.displacement_scale
    return ad.concat([disp, s_curr * config.position_scale], axis=1)


def embed_interaction(s_i, s_j, p, config):
    """Interaction feature of ordered pairs; ``s_i``, ``s_j`` are [m, 2] nodes."""
    return ad.tanh(ad.affine(_pair_inputs(s_i, s_j, config), p["interact_w"], p["interact_b"]))


def embed_self(s_prev, s_curr, p, config):
    return ad.tanh(ad.affine(_self_inputs(s_prev, s_curr, config), p["self_w"], p["self_b"]))


def step_recurrent(w, b, state, x):
    """Advance an LSTM; returns ``(output, new_state)`` with state packed as [2, m, H]."""
    new = ad.lstm_cell(x, state, w, b)
    return new[0], new


def attention_logits(o_self, o_edges, p):
    """Inner products of attention features: o_self [R, H], o_edges [R, K, H] -> [R, K]."""
    R, K, H = o_edges.shape
    if K < 1:
        raise ShapeError("compute_attention", o_edges.shape, detail="need at least one edge")
    a_self = ad.tanh(ad.affine(o_self, p["attn_w"], p["attn_b"]))
    a_edge = ad.tanh(ad.affine(ad.reshape(o_edges, (R * K, H)), p["attn_w"], p["attn_b"]))
    rows = np.repeat(np.arange(R), K)
    return ad.reshape(ad.inner(ad.take(a_self, rows), a_edge), (R, K))


def compute_attention(o_self, o_edges, p):
    """Categorical attention of each row over its K edges."""
    return ad.softmax(attention_logits(o_self, o_edges, p))


def step_prediction(p, state, s_input, attended, o_self, config, s_prev=None):
    """Prediction LSTM step and Gaussian head; returns ``(o, new_state, gauss[R, 5])``.

    The head's first two outputs are added to ``s_input`` (``mean_base =
    'position'``) or to ``2 s_input - s_prev`` (``'velocity'``).
    """
    emb = ad.tanh(ad.affine(s_input * config.position_scale, p["embed_w"], p["embed_b"]))
    x = ad.concat([emb, attended, o_self], axis=1)
    o, new_state = step_recurrent(p["g_pred_w"], p["g_pred_b"], state, x)
    head = ad.affine(o, p["pred_w"], p["pred_b"])
    base = s_input
    if config.mean_base == "velocity" and s_prev is not None:
        base = s_input + (s_input - s_prev)
    gauss = ad.concat([base + head[:, 0:2], head[:, 2:GAUSS_WIDTH]], axis=1)
    return o, new_state, gauss


# ---------------------------------------------------------------------------
# full passes


@dataclass
class HiddenBank:
    edges: object  # [2, B*N*(N-1), H]
    selves: object  # [2, B*N, H]
    preds: object  # [2, B*N, H]


@dataclass
class ForwardResult:
    """Per-step nodes of one pass, batched as rows ``b * N + i``.

    ``inputs[t]`` is the state fed at step ``t`` (ground truth or rolled out).
    """

    tape: ad.Tape
    B: int
    N: int
    gaussians: list
    thetas: list
    inputs: list
    squeeze: bool = False
    params: dict = field(default_factory=dict)

    @property
    def T(self):
        return len(self.gaussians)

    def _shape(self, arr):
        arr = arr.reshape((arr.shape[0], self.B, self.N) + arr.shape[2:])
        return arr[:, 0] if self.squeeze else arr

    def gaussian_params(self):
        """GaussianParams [T, (B,) N]; entry ``t`` predicts step ``t + 1``."""
        return GaussianParams(self._shape(np.stack([g.value for g in self.gaussians])))

    def attention(self):
        """AttentionTensor [T, (B,) N, N-1]."""
        return self._shape(np.stack([th.value for th in self.thetas]))

    def states(self):
        """Input states [T, (B,) N, 2]."""
        return self._shape(np.stack([s.value for s in self.inputs]))

    def gaussian_stack(self, upto=None):
        return ad.stack(self.gaussians[:upto])

    def theta_stack(self):
        return ad.stack(self.thetas)


class _Runner:
    def __init__(self, params, config, B, N, tape, trainable, attention_override):
        self.config = config
        self.B, self.N = B, N
        self.tape = tape
        make = tape.variable if trainable else tape.constant
        self.p = {name: make(params[name]) for name in params.names()}
        self.tail, self.head = _pair_index(B, N)
        self.override = _normalize_override(attention_override, B, N)
        H = config.hidden_dim
        R = B * N
        zeros = tape.constant
        self.initial = HiddenBank(
            zeros(np.zeros((2, R * (N - 1), H))),
            zeros(np.zeros((2, R, H))),
            zeros(np.zeros((2, R, H))),
        )

    def step(self, t, s_prev, s_curr, bank):
        p, cfg = self.p, self.config
        R, K = self.B * self.N, self.N - 1
        x_edge = embed_interaction(ad.take(s_curr, self.tail), ad.take(s_curr, self.head), p, cfg)
        x_self = embed_self(s_prev, s_curr, p, cfg)
        o_edge, edges = step_recurrent(p["g_interact_w"], p["g_interact_b"], bank.edges, x_edge)
        o_self, selves = step_recurrent(p["g_self_w"], p["g_self_b"], bank.selves, x_self)
        o_edge3 = ad.reshape(o_edge, (R, K, o_edge.shape[1]))
        if self.override is None:
            theta = compute_attention(o_self, o_edge3, p)
        else:
            ov = self.override
            theta = self.tape.constant(ov if ov.ndim == 2 else ov[min(t, len(ov) - 1)])
        attended = ad.weighted_sum(theta, o_edge3)
        _, preds, gauss = step_prediction(p, bank.preds, s_curr, attended, o_self, cfg, s_prev)
        return gauss, theta, HiddenBank(edges, selves, preds)

    def sample(self, gauss, eps, step):
        """Draw the next input from a predicted Gaussian (or take its mean)."""
        mu = gauss[:, 0:2]
        if eps is None:
            return mu
        rho = ad.tanh(gauss[:, 4:5])
        one_minus = 1.0 - ad.square(rho)
        bad = np.nonzero(one_minus.value[:, 0] <= 0.0)[0]
        if bad.size:
            row = int(bad[0])
            raise CovarianceError(
                f"Cholesky factor undefined at step {step}, agent {row % self.N} "
                f"(batch item {row // self.N}): correlation saturated",
                step=step,
                agent=row % self.N,
            )
        sx = ad.exp(gauss[:, 2:3])
        sy = ad.exp(gauss[:, 3:4])
        e1 = self.tape.constant(eps[:, 0:1])
        e2 = self.tape.constant(eps[:, 1:2])
        x = mu[:, 0:1] + sx * e1
        y = mu[:, 1:2] + sy * (rho * e1 + ad.sqrt(one_minus) * e2)
        return ad.concat([x, y], axis=1)


def _normalize_override(override, B, N):
    if override is None:
        return None
    if isinstance(override, str):
        if override != "uniform":
            raise ConfigError(f"unknown attention override {override!r}")
        return np.tile(uniform_attention(N), (B, 1))
    ov = np.asarray(override, dtype=np.float64)
    # accepted: [N, N-1], [B, N, N-1], [T, N, N-1] (B == 1), [T, B, N, N-1]
    if ov.shape == (N, N - 1):
        return np.tile(ov, (B, 1))
    if ov.ndim == 3 and ov.shape == (B, N, N - 1):
        return ov.reshape(B * N, N - 1)
    if ov.ndim == 3 and B == 1 and ov.shape[1:] == (N, N - 1):
        return ov
    if ov.ndim == 4 and ov.shape[1:] == (B, N, N - 1):
        return ov.reshape(ov.shape[0], B * N, N - 1)
    raise ShapeError("attention_override", ov.shape, (B, N, N - 1))


def _as_batch(scene):
    if isinstance(scene, SceneBatch):
        return scene, False
    if isinstance(scene, Scene):
        return SceneBatch.of([scene]), True
    return SceneBatch.of(scene), False


def _truth_nodes(tape, batch):
    T, B, N = batch.T, batch.B, batch.N
    flat = batch.states.reshape(T, B * N, 2)
    return [tape.constant(flat[t]) for t in range(T)]


def _run_teacher_forced(runner, truth, upto, bank=None):
    gaussians, thetas = [], []
    bank = bank or runner.initial
    for t in range(upto):
        s_prev = truth[t - 1] if t > 0 else truth[0]
        gauss, theta, bank = runner.step(t, s_prev, truth[t], bank)
        gaussians.append(gauss)
        thetas.append(theta)
    return gaussians, thetas, bank


def _continue_rollout(runner, truth, gaussians, thetas, bank, start, stop, eps):
    inputs = list(truth[:start])
    for t in range(start, stop):
        s_curr = runner.sample(gaussians[t - 1], None if eps is None else eps[t], t)
        gauss, theta, bank = runner.step(t, inputs[t - 1], s_curr, bank)
        inputs.append(s_curr)
        gaussians.append(gauss)
        thetas.append(theta)
    return inputs


def _draw_eps(rng, T, rows):
    if isinstance(rng, np.random.Generator):
        gen = rng
    else:
        gen = np.random.default_rng(rng)
    return gen.standard_normal((T, rows, 2))


def forward_teacher_forced(scene, params, config=None, *, tape=None, trainable=True, attention_override=None):
    """One-step pass: ground-truth inputs at every step."""
    config = config or params.config
    batch, squeeze = _as_batch(scene)
    tape = ad.Tape() if tape is None else tape
    runner = _Runner(params, config, batch.B, batch.N, tape, trainable, attention_override)
    truth = _truth_nodes(tape, batch)
    gaussians, thetas, _ = _run_teacher_forced(runner, truth, batch.T)
    return ForwardResult(tape, batch.B, batch.N, gaussians, thetas, truth, squeeze, runner.p)


def rollout(scene, params, config=None, rng_seed=0, *, tape=None, trainable=True, sampling=None, attention_override=None):
    """Simulated test-time pass: own predictions fed back after ``t_obs``.

    With reparameterized sampling the fed-back state is ``mu + L @ eps``
    (``L`` the Cholesky factor of the predicted covariance), so gradients
    reach both mean and covariance.  ``sampling='mean'`` feeds ``mu``.
    """
    config = config or params.config
    sampling = sampling or config.rollout_sampling
    batch, squeeze = _as_batch(scene)
    tape = ad.Tape() if tape is None else tape
    runner = _Runner(params, config, batch.B, batch.N, tape, trainable, attention_override)
    truth = _truth_nodes(tape, batch)
    eps = None if sampling == "mean" else _draw_eps(rng_seed, batch.T, batch.B * batch.N)
    gaussians, thetas, bank = _run_teacher_forced(runner, truth, batch.t_obs)
    inputs = _continue_rollout(runner, truth, gaussians, thetas, bank, batch.t_obs, batch.T, eps)
    return ForwardResult(tape, batch.B, batch.N, gaussians, thetas, inputs, squeeze, runner.p)


def forward_pair(scene, params, config=None, rng_seed=0, *, tape=None, sampling=None, attention_override=None):
    """Teacher-forced and rollout passes on one tape, sharing the observed prefix.

    Up to ``t_obs`` both passes consume ground truth and are identical, so
    the rollout reuses the teacher-forced nodes there.
    """
    config = config or params.config
    sampling = sampling or config.rollout_sampling
    batch, squeeze = _as_batch(scene)
    tape = ad.Tape() if tape is None else tape
    runner = _Runner(params, config, batch.B, batch.N, tape, True, attention_override)
    truth = _truth_nodes(tape, batch)
    eps = None if sampling == "mean" else _draw_eps(rng_seed, batch.T, batch.B * batch.N)
    g_pre, th_pre, bank = _run_teacher_forced(runner, truth, batch.t_obs)
    # teacher-forced tail continues from the shared prefix state
    g_tail, th_tail = [], []
    tail_bank = bank
    for t in range(batch.t_obs, batch.T):
        gauss, theta, tail_bank = runner.step(t, truth[t - 1], truth[t], tail_bank)
        g_tail.append(gauss)
        th_tail.append(theta)
    tf = ForwardResult(tape, batch.B, batch.N, g_pre + g_tail, th_pre + th_tail, truth, squeeze, runner.p)
    g_ro, th_ro = list(g_pre), list(th_pre)
    inputs = _continue_rollout(runner, truth, g_ro, th_ro, bank, batch.t_obs, batch.T, eps)
    ro = ForwardResult(tape, batch.B, batch.N, g_ro, th_ro, inputs, squeeze, runner.p)
    return tf, ro


@dataclass(frozen=True, eq=False)
class Prediction:
    positions: np.ndarray  # [horizon, (B,) N, 2]
    attention: np.ndarray  # [t_obs + horizon - 1, (B,) N, N-1]
    gaussians: GaussianParams


def predict(prefix, horizon, params, config=None, *, attention_override=None):
    """Mean-propagated forecast of ``horizon`` steps after an observed prefix.

    ``prefix`` is a Scene/SceneBatch (only its first ``t_obs`` steps are
    read) or a raw array [t_obs, N, 2].
    """
    config = config or params.config
    if horizon < 1:
        raise ConfigError(f"horizon must be >= 1, got {horizon}", key="horizon")
    if isinstance(prefix, np.ndarray):
        prefix = np.asarray(prefix, dtype=np.float64)
        batch, squeeze = SceneBatch(prefix[:, None], prefix.shape[0]), True
    else:
        batch, squeeze = _as_batch(prefix)
    t_obs = batch.t_obs
    if t_obs < 2:
        raise ConfigError("prefix must contain at least two observed steps", key="t_obs")
    observed = SceneBatch(batch.states[:t_obs], t_obs)
    tape = ad.Tape()
    runner = _Runner(params, config, batch.B, batch.N, tape, False, attention_override)
    truth = _truth_nodes(tape, observed)
    gaussians, thetas, bank = _run_teacher_forced(runner, truth, t_obs)
    total = t_obs + horizon - 1
    _continue_rollout(runner, truth, gaussians, thetas, bank, t_obs, total, None)
    res = ForwardResult(tape, batch.B, batch.N, gaussians, thetas, [], squeeze)
    g = res.gaussian_params()
    future = g[t_obs - 1 :]
    return Prediction(future.mean.copy(), res.attention(), future)
