"""Planar normalizing flows over the weight-generating vector.

A planar flow is the invertible map ``z -> z + u * tanh(w.z + b)`` with a
closed-form log-Jacobian-determinant.  Chaining K flows on top of a fully
factorized Gaussian base distribution produces a non-Gaussian posterior whose
variational objective replaces the analytic KL term with a single-sample
estimator built from ``log q0(z0)``, the accumulated log-determinants, and
``log p(zK)`` under an isotropic Gaussian prior.

Every operation exists in two forms: a plain numpy version used by oracles
and tests, and a tape version (suffix ``_tape``) used inside differentiable
training objectives.  The two are kept numerically identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad

__all__ = [
    "PlanarFlowParams",
    "FlowChain",
    "invertibility_adjust",
    "flow_forward",
    "flow_elbo_terms",
    "invertibility_adjust_tape",
    "flow_forward_tape",
    "flow_elbo_terms_tape",
]

_LOG_2PI = math.log(2.0 * math.pi)


def _softplus(x):
    return np.logaddexp(0.0, x)


@dataclass(frozen=True)
class PlanarFlowParams:
    """Raw parameters of one planar flow: two D-vectors and a bias."""

    u: np.ndarray
    w: np.ndarray
    b: float

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.float64)
        w = np.asarray(self.w, dtype=np.float64)
        if u.ndim != 1 or w.shape != u.shape:
            raise ValueError(
                f"planar flow expects matching 1-D u and w, got {u.shape} and {w.shape}"
            )
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "b", float(self.b))

    @property
    def dim(self) -> int:
        return self.u.shape[0]

    @property
    def param_count(self) -> int:
        # u and w contribute D each, the bias contributes 1
        return 2 * self.dim + 1


@dataclass(frozen=True)
class FlowChain:
    """Factorized Gaussian base distribution plus K planar flows."""

    base_mu: np.ndarray
    base_sigma: np.ndarray
    flows: tuple = field(default_factory=tuple)

    def __post_init__(self):
        mu = np.asarray(self.base_mu, dtype=np.float64)
        sigma = np.asarray(self.base_sigma, dtype=np.float64)
        if mu.ndim != 1 or sigma.shape != mu.shape:
            raise ValueError("base distribution needs matching 1-D mu and sigma")
        if np.any(sigma <= 0.0):
            raise ValueError("base sigma must be positive")
        flows = tuple(self.flows)
        for f in flows:
            if f.dim != mu.shape[0]:
                raise ValueError(
                    f"flow dimension {f.dim} does not match base dimension {mu.shape[0]}"
                )
        object.__setattr__(self, "base_mu", mu)
        object.__setattr__(self, "base_sigma", sigma)
        object.__setattr__(self, "flows", flows)

    @property
    def dim(self) -> int:
        return self.base_mu.shape[0]

    @property
    def n_flows(self) -> int:
        return len(self.flows)

    @property
    def param_count(self) -> int:
        return 2 * self.dim + sum(f.param_count for f in self.flows)


def invertibility_adjust(u, w):
    """Project u so that ``u.w >= -1``, which keeps the flow invertible.

    Returns ``u + (softplus(u.w) - 1 - u.w) * w / ||w||^2``.  The adjusted
    inner product equals ``softplus(u.w) - 1``, which is strictly greater
    than -1 for every finite input.
    """
    u = np.asarray(u, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if u.ndim != 1 or w.shape != u.shape:
        raise ValueError(f"expected matching 1-D vectors, got {u.shape} and {w.shape}")
    wn2 = float(w @ w)
    if wn2 == 0.0:
        raise ValueError("invertibility adjustment requires w != 0")
    uw = float(u @ w)
    return u + (_softplus(uw) - 1.0 - uw) * w / wn2


def flow_forward(params: PlanarFlowParams, z):
    """Apply one planar flow to a batch of points.

    ``params.u`` is used as-is and must already satisfy the invertibility
    condition (run :func:`invertibility_adjust` first when it might not).
    ``z`` has shape (..., D); returns ``(z_out, logdet)`` with logdet of
    shape (...,).
    """
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != params.dim:
        raise ValueError(f"z last axis {z.shape[-1]} does not match flow dim {params.dim}")
    pre = z @ params.w + params.b
    t = np.tanh(pre)
    z_out = z + t[..., None] * params.u[None, :] if z.ndim > 1 else z + t * params.u
    uw = float(params.u @ params.w)
    logdet = np.log(np.abs(1.0 + uw * (1.0 - t * t)))
    return z_out, logdet


def _log_std_normal(noise):
    # log-density of the base draw expressed through the standard noise:
    # log q0(mu + sigma*eps) = sum_d [-0.5 log 2pi - log sigma_d - 0.5 eps_d^2]
    return -0.5 * (_LOG_2PI * noise.shape[-1] + np.sum(noise * noise, axis=-1))


def flow_elbo_terms(chain: FlowChain, z0_noise, lam: float = 1.0):
    """Evaluate the pieces of the flow variational objective for one draw.

    ``z0_noise`` is standard normal of shape (..., D).  Flow parameters are
    used exactly as stored, so a chain with all-zero ``u`` reproduces the
    base Gaussian sampler; when parameters come from an optimizer, pass them
    through :func:`invertibility_adjust` when building the chain.  Returns
    ``(zK, log_q0, sum_logdets, log_p)`` where the last three have shape
    (...,).  The single-sample KL estimator is
    ``log_q0 - sum_logdets - log_p``.
    """
    if lam <= 0.0:
        raise ValueError(f"prior variance must be positive, got {lam}")
    noise = np.asarray(z0_noise, dtype=np.float64)
    if noise.shape[-1] != chain.dim:
        raise ValueError(
            f"noise last axis {noise.shape[-1]} does not match chain dim {chain.dim}"
        )
    z = chain.base_mu + chain.base_sigma * noise
    log_q0 = _log_std_normal(noise) - np.sum(np.log(chain.base_sigma))
    sum_logdets = np.zeros(noise.shape[:-1])
    for f in chain.flows:
        z, logdet = flow_forward(f, z)
        sum_logdets = sum_logdets + logdet
    log_p = -0.5 * (
        chain.dim * (_LOG_2PI + math.log(lam)) + np.sum(z * z, axis=-1) / lam
    )
    return z, log_q0, sum_logdets, log_p


# ---------------------------------------------------------------------------
# tape versions


def invertibility_adjust_tape(tape: ad.Tape, u: ad.Variable, w: ad.Variable) -> ad.Variable:
    """Differentiable version of :func:`invertibility_adjust`."""
    if u.shape != w.shape or len(u.shape) != 1:
        raise ValueError(f"expected matching 1-D vectors, got {u.shape} and {w.shape}")
    if not np.any(w.value != 0.0):
        raise ValueError("invertibility adjustment requires w != 0")
    uw = ad.mul(u, w).sum()
    wn2 = ad.mul(w, w).sum()
    one = tape.constant(np.array(1.0))
    coef = ad.sub(ad.softplus(uw), ad.add(one, uw))
    # division by ||w||^2 via exp(-log .); ||w||^2 > 0 is checked above
    inv_wn2 = ad.exp(ad.scalar_mul(ad.log(wn2), -1.0))
    return ad.add(u, ad.mul(ad.mul(coef, inv_wn2), w))


def flow_forward_tape(tape: ad.Tape, u_hat: ad.Variable, w: ad.Variable, b: ad.Variable, z: ad.Variable):
    """Differentiable planar flow step; z has shape (B, D).

    Returns ``(z_out, logdet)`` with logdet of shape (B,).  As in the numpy
    version, ``u_hat`` must already satisfy the invertibility condition,
    which also makes the Jacobian argument strictly positive, so no absolute
    value is needed.
    """
    if len(z.shape) != 2 or z.shape[1] != w.shape[0]:
        raise ValueError(f"z must be (B, D) matching w, got {z.shape} and {w.shape}")
    D = w.shape[0]
    pre = ad.add(ad.matmul(z, w.reshape((D, 1))), b)  # (B, 1)
    t = ad.tanh(pre)
    z_out = ad.add(z, ad.mul(t, u_hat))  # broadcast (B,1)*(D,)
    uw = ad.mul(u_hat, w).sum()
    one = tape.constant(np.array(1.0))
    hprime = ad.sub(one, ad.mul(t, t))
    arg = ad.add(one, ad.mul(uw, hprime))  # (B, 1), strictly positive
    logdet = ad.log(arg).sum(axis=1)  # (B,)
    return z_out, logdet


def flow_elbo_terms_tape(
    tape: ad.Tape,
    base_mu: ad.Variable,
    base_sigma_param: ad.Variable,
    flows: Sequence[dict],
    z0_noise: np.ndarray,
    lam: float = 1.0,
):
    """Differentiable version of :func:`flow_elbo_terms` for raw parameters.

    ``base_sigma_param`` is the unconstrained parameter; the base scale is
    ``softplus(base_sigma_param)``.  ``flows`` is a sequence of dicts with
    Variables under keys ``u``, ``w``, ``b`` holding raw optimizer
    parameters; unlike the numpy twin, this version applies the
    invertibility adjustment in-graph, so it agrees with
    :func:`flow_elbo_terms` on a chain whose ``u`` vectors were adjusted.
    ``z0_noise`` is a (B, D) constant.  Returns
    ``(zK, log_q0, sum_logdets, log_p)`` with per-sample shapes (B,).
    """
    if lam <= 0.0:
        raise ValueError(f"prior variance must be positive, got {lam}")
    noise = np.asarray(z0_noise, dtype=np.float64)
    if noise.ndim != 2 or noise.shape[1] != base_mu.shape[0]:
        raise ValueError(
            f"noise must be (B, D) matching the base, got {noise.shape}"
        )
    B, D = noise.shape
    eps = tape.constant(noise)
    sigma = ad.softplus(base_sigma_param)
    z = ad.add(ad.mul(eps, sigma), base_mu)  # (B, D)
    base_term = tape.constant(
        -0.5 * (_LOG_2PI * D + np.sum(noise * noise, axis=1))
    )
    log_q0 = ad.sub(base_term, ad.log(sigma).sum())  # (B,) - () broadcast
    sum_logdets = tape.constant(np.zeros(B))
    for f in flows:
        u_hat = invertibility_adjust_tape(tape, f["u"], f["w"])
        z, logdet = flow_forward_tape(tape, u_hat, f["w"], f["b"], z)
        sum_logdets = ad.add(sum_logdets, logdet)
    quad = ad.scalar_mul(ad.mul(z, z).sum(axis=1), -0.5 / lam)
    log_p = ad.add(tape.constant(np.full(B, -0.5 * D * (_LOG_2PI + math.log(lam)))), quad)
    return z, log_q0, sum_logdets, log_p
