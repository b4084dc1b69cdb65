"""Gaussian process regression through random feature expansion.

An RBF-kernel GP is approximated by the feature map

    Phi = sqrt(2 * signal_var / n_rf) * [cos(X~ Omega), sin(X~ Omega)]

with ``X~ = X / lengthscales`` columnwise and ``Omega`` a fixed Gaussian
projection, so that ``Phi Phi^T`` approximates the kernel matrix and GP
regression reduces to Bayesian linear regression ``y = Phi w + eps``.

The posterior over the ``n_rf`` linear weights is either a mean-field
Gaussian baseline or the structured Hadamard-factorized posterior applied
through vector reshaping: ``w`` is the row-major flattening of the D x D
structured weight matrix truncated to length ``n_rf``, where D is the
smallest power of two with ``D^2 >= n_rf``.  The structured variant needs
O(sqrt(n_rf)) parameters instead of O(n_rf).

Training maximizes the ELBO of the linear model with Adam; the observation
noise starts at ``noise_std`` and stays frozen for a leading fraction of the
steps before being optimized.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import layers as ly
from .bnn import Predictions

__all__ = [
    "RffConfig",
    "GpRffModel",
    "make_rff_config",
    "rff_transform",
    "gp_rff_init",
    "gp_param_count",
    "sample_weights",
    "gp_rff_elbo",
    "gp_rff_train",
    "gp_rff_predict",
]

NOISE_FROZEN_FRACTION = 5.0 / 6.0
DEFAULT_NOISE_STD = 0.02
DEFAULT_GP_LR = 6e-4


@dataclass(frozen=True)
class RffConfig:
    """Fixed random-feature expansion parameters."""

    omega: np.ndarray  # (d_in, n_rf/2)
    lengthscales: np.ndarray  # (d_in,)
    signal_var: float = 1.0
    noise_std: float = DEFAULT_NOISE_STD

    def __post_init__(self):
        omega = np.asarray(self.omega, dtype=np.float64)
        ls = np.asarray(self.lengthscales, dtype=np.float64)
        if omega.ndim != 2:
            raise ValueError("omega must be a (d_in, n_rf/2) matrix")
        if ls.ndim != 1 or ls.shape[0] != omega.shape[0]:
            raise ValueError("need one lengthscale per input dimension")
        if np.any(ls <= 0.0):
            raise ValueError("lengthscales must be positive")
        if self.signal_var <= 0.0 or self.noise_std <= 0.0:
            raise ValueError("signal variance and noise std must be positive")
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "lengthscales", ls)

    @property
    def d_in(self) -> int:
        return self.omega.shape[0]

    @property
    def n_rf(self) -> int:
        return 2 * self.omega.shape[1]


@dataclass(frozen=True)
class GpRffModel:
    rff: RffConfig
    kind: str  # "whvi" | "meanfield"
    lam: float = 1.0
    shape: Optional[ly.WhviShape] = None  # vector reshape (whvi only)

    def __post_init__(self):
        if self.kind not in ("whvi", "meanfield"):
            raise ValueError(f"unknown posterior kind {self.kind!r}")
        if self.lam <= 0.0:
            raise ValueError("prior variance must be positive")
        if self.kind == "whvi":
            if self.shape is None or not self.shape.vector_mode:
                raise ValueError("whvi posterior needs a vector-mode shape")
            if self.shape.D * self.shape.D < self.rff.n_rf:
                raise ValueError("reshape dimension too small for n_rf")


def make_rff_config(
    d_in,
    n_rf,
    rng,
    signal_var=1.0,
    noise_std=DEFAULT_NOISE_STD,
    lengthscales=None,
):
    """Draw the Gaussian projection; lengthscales default to sqrt(d_in/2)."""
    if n_rf < 2 or n_rf % 2 != 0:
        raise ValueError(f"n_rf must be even and >= 2, got {n_rf}")
    if lengthscales is None:
        lengthscales = np.full(d_in, math.sqrt(d_in / 2.0))
    omega = rng.standard_normal((d_in, n_rf // 2))
    return RffConfig(omega, lengthscales, signal_var, noise_std)


def rff_transform(rff: RffConfig, X):
    """Feature matrix Phi of shape (N, n_rf)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != rff.d_in:
        raise ValueError(
            f"X of shape {X.shape} does not match input dimension {rff.d_in}"
        )
    proj = (X / rff.lengthscales[None, :]) @ rff.omega
    scale = math.sqrt(2.0 * rff.signal_var / rff.n_rf)
    return scale * np.concatenate([np.cos(proj), np.sin(proj)], axis=1)


def gp_rff_init(rff: RffConfig, kind, lam, rng):
    """Build the model description and its initial parameters."""
    if kind == "whvi":
        shape = ly.reshape_vector_shape(rff.n_rf)
        model = GpRffModel(rff, kind, lam, shape)
        params = ly.init_whvi_block(
            shape.D, ly.StructureSpec(), ly.PriorConfig(lam), rng
        )
    else:
        model = GpRffModel(rff, kind, lam)
        params = {
            "w_mu": rng.normal(0.0, math.sqrt(lam), rff.n_rf),
            "w_sigma_param": np.full(
                rff.n_rf, ly.softplus_inv(1e-3 * math.sqrt(lam))
            ),
        }
    params["noise_logvar"] = np.array(2.0 * math.log(rff.noise_std))
    return model, params


def gp_param_count(model: GpRffModel) -> int:
    """Posterior parameter count, excluding the shared noise parameter."""
    if model.kind == "whvi":
        return ly.layer_param_count(model.shape, ly.StructureSpec())
    return 2 * model.rff.n_rf


def _noise_dim(model: GpRffModel) -> int:
    return model.shape.D if model.kind == "whvi" else model.rff.n_rf


def sample_weights(model: GpRffModel, params, noise):
    """Numpy weight draws (S, n_rf) from standard-normal noise rows."""
    noise = np.asarray(noise, dtype=np.float64)
    if noise.ndim != 2 or noise.shape[1] != _noise_dim(model):
        raise ValueError(f"noise must be (S, {_noise_dim(model)}), got {noise.shape}")
    if model.kind == "meanfield":
        sigma = ly.softplus(params["w_sigma_param"])
        return params["w_mu"][None, :] + noise * sigma[None, :]
    post = ly.posterior_from_params(params)
    n_rf = model.rff.n_rf
    out = np.empty((noise.shape[0], n_rf))
    for i in range(noise.shape[0]):
        g = ly.sample_g(post, noise[i])
        W = ly.materialize_weight(post.s1, post.s2, g)
        out[i] = W.ravel()[:n_rf]  # row-major flatten, truncated
    return out


def _weight_tape(tape, model, pvars, eps):
    """One tape-side weight sample from a (D,) or (n_rf,) noise vector."""
    if model.kind == "meanfield":
        sigma = ad.softplus(pvars["w_sigma_param"])
        return ad.add(ad.mul(tape.constant(eps), sigma), pvars["w_mu"])
    g = ad.add(
        ad.mul(tape.constant(eps), ad.softplus(pvars["sigma_param"])), pvars["mu"]
    )
    W = ly.build_weight_tape(pvars["s1"], pvars["s2"], g)
    D = model.shape.D
    flat = W.reshape((D * D,))
    n_rf = model.rff.n_rf
    return flat[:n_rf] if n_rf != D * D else flat


def _meanfield_kl_tape(tape, pvars, lam):
    sigma = ad.softplus(pvars["w_sigma_param"])
    var = ad.mul(sigma, sigma)
    mu = pvars["w_mu"]
    n = float(mu.shape[0])
    quad = ad.scalar_mul(ad.add(var, ad.mul(mu, mu)).sum(), 1.0 / lam)
    logdet = ad.log(var).sum()
    const = tape.constant(np.array(n * (math.log(lam) - 1.0)))
    return ad.scalar_mul(ad.add(ad.sub(quad, logdet), const), 0.5)


def gp_rff_elbo(model: GpRffModel, params, Phi, y, N_total, noise):
    """Negative ELBO of the linear model on a (possibly mini-) batch.

    ``Phi`` is the precomputed feature matrix of the batch, ``noise`` an
    (S, dim) array of standard-normal rows, one weight sample per row.
    Returns ``(neg_elbo, parts)`` as in the network objective.
    """
    Phi = np.asarray(Phi, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    B = Phi.shape[0]
    if B == 0:
        raise ValueError("empty batch")
    if Phi.shape[1] != model.rff.n_rf:
        raise ValueError(
            f"Phi has {Phi.shape[1]} features, expected {model.rff.n_rf}"
        )
    if N_total < B:
        raise ValueError(f"N_total={N_total} smaller than batch size {B}")
    noise = np.asarray(noise, dtype=np.float64)
    S = noise.shape[0]
    tape = ad.Tape()
    pvars = {name: tape.leaf(value) for name, value in params.items()}
    phi_c = tape.constant(Phi)
    y_c = tape.constant(y.reshape(B, 1))
    nll_terms = []
    for s in range(S):
        w = _weight_tape(tape, model, pvars, noise[s])
        f = ad.matmul(phi_c, w.reshape((model.rff.n_rf, 1)))
        nll = ad.gaussian_nll(y_c, f, pvars["noise_logvar"])
        if not np.all(np.isfinite(nll.value)):
            idx = int(np.argmax(~np.isfinite(nll.value.ravel())))
            raise FloatingPointError(f"non-finite likelihood at batch index {idx}")
        nll_terms.append(nll.sum())
    nll_mean = nll_terms[0] if S == 1 else ad.scalar_mul(
        ad.concat([t.reshape((1,)) for t in nll_terms], axis=0).sum(), 1.0 / S
    )
    data_term = ad.scalar_mul(nll_mean, N_total / B)
    if model.kind == "whvi":
        blockvars = {k: v for k, v in pvars.items() if k != "noise_logvar"}
        kl = ly.whvi_block_kl_tape(tape, blockvars, ly.StructureSpec(), model.lam)
    else:
        kl = _meanfield_kl_tape(tape, pvars, model.lam)
    neg_elbo = ad.add(data_term, kl)
    parts = {
        "nll": float(data_term.value),
        "kl": float(kl.value),
        "tape": tape,
        "param_vars": pvars,
    }
    return neg_elbo, parts


def gp_rff_train(
    model: GpRffModel,
    X,
    y,
    seed,
    total_steps=2000,
    lr=DEFAULT_GP_LR,
    batch_size=None,
    mc_train=1,
    eval_interval=100,
    rng_params=None,
    noise_frozen_steps=None,
):
    """Adam-optimize the GP-RFF ELBO; deterministic given the seed.

    The noise log-variance stays frozen for the first 5/6 of the steps by
    default; ``noise_frozen_steps`` overrides the count.  ``rng_params``
    optionally supplies pre-built parameters (e.g. to resume); otherwise
    parameters are drawn from the seed.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    N = X.shape[0]
    rng = np.random.default_rng(seed)
    if rng_params is None:
        _, params = gp_rff_init(model.rff, model.kind, model.lam, rng)
    else:
        params = {k: np.array(v) for k, v in rng_params.items()}
    Phi = rff_transform(model.rff, X)
    dim = _noise_dim(model)
    m1 = {k: np.zeros_like(v) for k, v in params.items()}
    m2 = {k: np.zeros_like(v) for k, v in params.items()}
    if noise_frozen_steps is None:
        frozen_steps = int(NOISE_FROZEN_FRACTION * total_steps)
    else:
        frozen_steps = int(noise_frozen_steps)
        if frozen_steps < 0:
            raise ValueError("noise_frozen_steps must be non-negative")
    log = []
    t0 = time.perf_counter()
    for t in range(total_steps):
        if batch_size is None or batch_size >= N:
            phi_b, y_b = Phi, y
        else:
            idx = rng.integers(0, N, size=batch_size)
            phi_b, y_b = Phi[idx], y[idx]
        noise = rng.standard_normal((mc_train, dim))
        neg_elbo, parts = gp_rff_elbo(model, params, phi_b, y_b, N, noise)
        if not np.isfinite(neg_elbo.value):
            raise FloatingPointError(f"training diverged: non-finite loss at step {t}")
        ad.backward(parts["tape"], neg_elbo)
        grads = {
            name: var.grad
            for name, var in parts["param_vars"].items()
            if var.grad is not None and not (name == "noise_logvar" and t < frozen_steps)
        }
        ly._adam_step(params, grads, m1, m2, t, lr)
        if t % eval_interval == 0 or t == total_steps - 1:
            log.append(
                {
                    "step": t,
                    "lr": lr,
                    "neg_elbo": float(neg_elbo.value),
                    "nll": parts["nll"],
                    "kl": parts["kl"],
                    "wall_ms": (time.perf_counter() - t0) * 1000.0,
                }
            )
    return params, log


def gp_rff_predict(model: GpRffModel, params, X, mc_test=64, seed=0):
    """Monte Carlo predictive distribution of the GP-RFF regressor."""
    Phi = rff_transform(model.rff, X)
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((mc_test, _noise_dim(model)))
    W = sample_weights(model, params, noise)  # (S, n_rf)
    f_samples = W @ Phi.T  # (S, N)
    return Predictions(
        task="regression",
        f_samples=f_samples,
        noise_var=float(np.exp(params["noise_logvar"])),
    )
