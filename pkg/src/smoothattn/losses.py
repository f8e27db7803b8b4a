"""Likelihood, variance, smoothness, and aggregate training losses.

All terms are sums over agents and steps.  Gaussian inputs are nodes with
the head's raw layout on the last axis: ``[mu_x, mu_y, log sigma_x,
log sigma_y, pre-correlation]``; attention inputs are nodes shaped
``[T, rows, N-1]``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import CovarianceError

LOG_2PI = math.log(2.0 * math.pi)


def _node(tape, x):
    return x if isinstance(x, ad.Node) else tape.constant(x)


def likelihood_loss(targets, gaussians):
    """Negative log-likelihood of ``targets`` [..., 2] under ``gaussians`` [..., 5]."""
    tape = gaussians.tape
    targets = _node(tape, targets)
    if targets.shape[:-1] != gaussians.shape[:-1] or targets.shape[-1] != 2:
        from .errors import ShapeError

        raise ShapeError("likelihood_loss", targets.shape, gaussians.shape)
    mu = gaussians[..., 0:2]
    log_sigma = gaussians[..., 2:4]
    rho = ad.tanh(gaussians[..., 4])
    one_minus = 1.0 - ad.square(rho)
    bad = np.argwhere(one_minus.value <= 0.0)
    if bad.size:
        where = tuple(int(v) for v in bad[0])
        raise CovarianceError(f"covariance not positive-definite at index {where}")
    d = (targets - mu) * ad.exp(-log_sigma)
    dx, dy = d[..., 0], d[..., 1]
    quad = ad.square(dx) + ad.square(dy) - 2.0 * rho * dx * dy
    nll = (
        ad.sum(log_sigma)
        + 0.5 * ad.sum(ad.log(one_minus))
        + ad.sum(quad / (2.0 * one_minus))
    )
    return nll + LOG_2PI * float(np.prod(dx.shape))


def variance_loss(gaussians, tau):
    """Sum of ``exp(std)`` over coordinates whose std exceeds ``tau``.

    The indicator is a constant gate: no gradient flows through it.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    std = ad.exp(gaussians[..., 2:4])
    gate = (std.value > tau).astype(np.float64)
    return ad.sum(ad.exp(std) * gaussians.tape.constant(gate))


def smoothness_loss(theta):
    """Total variation over time of each agent's attention distribution."""
    if theta.shape[0] < 2:
        return theta.tape.constant(0.0)
    diff = theta[1:] - theta[:-1]
    return ad.sum(ad.norm(diff))


@dataclass
class LossBreakdown:
    likelihood_one_step: float = 0.0
    likelihood_seq: float = 0.0
    var_one_step: float = 0.0
    var_seq: float = 0.0
    smooth_one_step: float = 0.0
    smooth_seq: float = 0.0
    total: float = 0.0
    node: object = field(default=None, repr=False, compare=False)

    FIELDS = (
        "likelihood_one_step",
        "likelihood_seq",
        "var_one_step",
        "var_seq",
        "smooth_one_step",
        "smooth_seq",
        "total",
    )

    def row(self):
        return {k: getattr(self, k) for k in self.FIELDS}


def _targets(states, n):
    """Ground-truth next positions for the first ``n`` predictions, [n, rows, 2]."""
    T, B, N = states.shape[:3]
    return states[1 : n + 1].reshape(n, B * N, 2)


def _gauss_stack(result, n):
    return ad.stack(result.gaussians[:n])


def total_loss(batch, tf, ro=None, beta_var=0.01, beta_smooth=0.01, tau=0.001, *, smooth=True, scale=None):
    """Aggregate loss on a batch.

    ``tf`` and ``ro`` are the teacher-forced and rollout results for the
    same batch and parameters; ``ro=None`` drops the sequence terms.  The
    prediction from the last input step has no target and is not scored.
    Terms are summed within a scene and averaged over the batch.
    """
    states = batch.states
    T = states.shape[0]
    n = T - 1
    tape = tf.tape
    scale = 1.0 / batch.B if scale is None else scale
    targets = tape.constant(_targets(states, n))

    def terms(result):
        g = _gauss_stack(result, n)
        lik = likelihood_loss(targets, g)
        var = variance_loss(g, tau)
        sm = smoothness_loss(ad.stack(result.thetas)) if smooth else None
        return lik, var, sm

    lik1, var1, sm1 = terms(tf)
    total = lik1 + beta_var * var1
    if smooth and beta_smooth:
        total = total + beta_smooth * sm1
    out = LossBreakdown(
        likelihood_one_step=float(lik1.value) * scale,
        var_one_step=float(var1.value) * scale,
        smooth_one_step=float(sm1.value) * scale if sm1 is not None else 0.0,
    )
    if ro is not None:
        lik2, var2, sm2 = terms(ro)
        total = total + lik2 + beta_var * var2
        if smooth and beta_smooth:
            total = total + beta_smooth * sm2
        out.likelihood_seq = float(lik2.value) * scale
        out.var_seq = float(var2.value) * scale
        out.smooth_seq = float(sm2.value) * scale if sm2 is not None else 0.0
    total = total * scale
    out.total = float(total.value)
    out.node = total
    return out


def write_loss_rows(path, rows, append=False):
    """Write ``(step, LossBreakdown)`` pairs as CSV."""
    mode = "a" if append else "w"
    with open(path, mode, newline="") as fh:
        w = csv.writer(fh)
        if not append:
            w.writerow(("step",) + LossBreakdown.FIELDS)
        for step, lb in rows:
            w.writerow([step] + [repr(float(getattr(lb, k))) for k in LossBreakdown.FIELDS])
