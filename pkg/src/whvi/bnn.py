"""Bayesian feed-forward networks with structured variational layers.

A network is a stack of layers, each one of four kinds:

``whvi``
    Structured Gaussian posterior over a Hadamard-factorized weight matrix,
    evaluated through the local reparameterization of :mod:`whvi.layers`.
``whvi-flow``
    The same structured weight with a planar-flow posterior over the
    generating vector; forward passes sample a weight (no local
    reparameterization is available once the posterior is non-Gaussian),
    and the KL term is the single-sample flow estimator.
``meanfield``
    Fully factorized Gaussian over a dense weight matrix with its own local
    reparameterization: the pre-activation is Gaussian with mean ``h W_mu``
    and variance ``h^2 W_sigma^2``.
``deterministic``
    Plain dense weight, no posterior, no KL.

All layers carry a deterministic bias.  The training objective is the
negative evidence lower bound

    (N_total / B) * mean_s [ sum_batch nll(y, f_s(x)) ] + kl_scale * sum KL

optimized by Adam under the power-law learning-rate decay
``lr_t = lr0 * (1 + gamma * t)**(-p)``.  The Gaussian likelihood noise
variance is a trainable log-variance parameter, frozen for the first
``fixed_noise_steps`` steps of training.

Every stochastic quantity flows from explicit noise bundles generated by a
seeded Generator, so training and prediction are exactly reproducible.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from . import autodiff as ad
from . import flows as fl
from . import layers as ly

__all__ = [
    "LayerSpec",
    "NetworkConfig",
    "TrainSchedule",
    "Metrics",
    "Predictions",
    "regression_network",
    "init_network_params",
    "make_noise_bundle",
    "network_forward",
    "elbo",
    "learning_rate_at",
    "train",
    "predict",
    "compute_metrics",
    "meanfield_layer_forward",
    "meanfield_kl",
]

LAYER_KINDS = ("whvi", "whvi-flow", "meanfield", "deterministic")
ACTIVATIONS = ("relu", "cos", "tanh", "identity")
DEFAULT_FLOWS = 3
ECE_BINS = 15


# ---------------------------------------------------------------------------
# configuration types


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int
    out_dim: int
    activation: str = "identity"
    structure: ly.StructureSpec = field(default_factory=ly.StructureSpec)
    n_flows: int = DEFAULT_FLOWS
    full_cov: bool = False

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}; expected one of {LAYER_KINDS}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(
                f"unknown activation {self.activation!r}; expected one of {ACTIVATIONS}"
            )
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError("layer dimensions must be positive")
        if self.kind == "whvi-flow" and self.n_flows < 0:
            raise ValueError("n_flows must be >= 0")

    @property
    def shape(self) -> ly.WhviShape:
        return ly.setup_dimensions(self.in_dim, self.out_dim)


@dataclass(frozen=True)
class NetworkConfig:
    layers: tuple
    likelihood: str = "gaussian"
    lam: float = 1.0
    mc_train: int = 1
    mc_test: int = 64
    kl_scale: float = 1.0
    noise_logvar_init: float = math.log(0.01)

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ValueError("network needs at least one layer")
        if self.likelihood not in ("gaussian", "categorical"):
            raise ValueError(f"unknown likelihood {self.likelihood!r}")
        if self.mc_train < 1 or self.mc_test < 1:
            raise ValueError("Monte Carlo sample counts must be >= 1")
        if self.lam <= 0.0:
            raise ValueError("prior variance must be positive")
        for a, b in zip(layers, layers[1:]):
            if a.out_dim != b.in_dim:
                raise ValueError(
                    f"layer dims do not chain: {a.out_dim} feeds {b.in_dim}"
                )
        if layers[-1].activation != "identity":
            raise ValueError("the last layer must use the identity activation")
        object.__setattr__(self, "layers", layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim


@dataclass(frozen=True)
class TrainSchedule:
    lr0: float = 0.001
    gamma: float = 0.0005
    p: float = 0.3
    total_steps: int = 5000
    fixed_noise_steps: int = 500
    batch_size: int = 64
    eval_interval: int = 100

    def __post_init__(self):
        if self.lr0 < 0.0:
            raise ValueError("lr0 must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.fixed_noise_steps <= max(self.total_steps, 0):
            raise ValueError("fixed_noise_steps must lie within total_steps")


@dataclass(frozen=True)
class Metrics:
    rmse: Optional[float] = None
    mnll: Optional[float] = None
    error_rate: Optional[float] = None
    ece: Optional[float] = None

    def __post_init__(self):
        if self.error_rate is not None and not 0.0 <= self.error_rate <= 1.0:
            raise ValueError("error_rate must lie in [0, 1]")
        if self.ece is not None and not 0.0 <= self.ece <= 1.0:
            raise ValueError("ece must lie in [0, 1]")


@dataclass(frozen=True)
class Predictions:
    task: str  # "regression" | "classification"
    f_samples: Optional[np.ndarray] = None  # (S, B) regression sample means
    noise_var: Optional[float] = None
    probs: Optional[np.ndarray] = None  # (B, C) averaged class probabilities

    @property
    def mean(self):
        if self.task == "regression":
            return self.f_samples.mean(axis=0)
        return self.probs

    @property
    def variance(self):
        if self.task != "regression":
            raise ValueError("variance is defined for regression predictions")
        return self.f_samples.var(axis=0) + self.noise_var


def regression_network(
    in_dim,
    hidden_dims,
    kind="whvi",
    activation="relu",
    structure=None,
    n_flows=DEFAULT_FLOWS,
):
    """Hidden layers of the requested kind; the output layer is a
    fully factorized Gaussian (mean-field) head with identity activation."""
    structure = structure if structure is not None else ly.StructureSpec()
    dims = [in_dim, *hidden_dims]
    layers = [
        LayerSpec(kind, dims[i], dims[i + 1], activation, structure, n_flows=n_flows)
        for i in range(len(dims) - 1)
    ]
    layers.append(LayerSpec("meanfield", dims[-1], 1))
    return tuple(layers)


# ---------------------------------------------------------------------------
# parameters


def _layer_prefix(i):
    return f"layer{i}"


def init_network_params(config: NetworkConfig, rng) -> dict:
    """Flat parameter dictionary keyed layer{i}[.block{j}].name."""
    params = {}
    prior = ly.PriorConfig(config.lam)
    for i, spec in enumerate(config.layers):
        pre = _layer_prefix(i)
        if spec.kind == "whvi":
            shape = spec.shape
            for j in range(shape.stack):
                block = ly.init_whvi_block(
                    shape.D, spec.structure, prior, rng, full_cov=spec.full_cov
                )
                for name, value in block.items():
                    params[f"{pre}.block{j}.{name}"] = value
        elif spec.kind == "whvi-flow":
            shape = spec.shape
            for j in range(shape.stack):
                D = shape.D
                params[f"{pre}.block{j}.mu"] = rng.normal(0.0, math.sqrt(config.lam), D)
                params[f"{pre}.block{j}.sigma_param"] = np.full(
                    D, ly.softplus_inv(1e-3 * math.sqrt(config.lam))
                )
                signs = rng.integers(0, 2, D) * 2.0 - 1.0
                params[f"{pre}.block{j}.s1"] = signs * (1.0 + 0.01 * rng.standard_normal(D))
                signs = rng.integers(0, 2, D) * 2.0 - 1.0
                params[f"{pre}.block{j}.s2"] = signs * (1.0 + 0.01 * rng.standard_normal(D))
                for k in range(spec.n_flows):
                    params[f"{pre}.block{j}.flow{k}.u"] = 0.01 * rng.standard_normal(D)
                    params[f"{pre}.block{j}.flow{k}.w"] = rng.standard_normal(D)
                    params[f"{pre}.block{j}.flow{k}.b"] = np.array(0.0)
        elif spec.kind == "meanfield":
            params[f"{pre}.w_mu"] = rng.normal(
                0.0, math.sqrt(config.lam), (spec.in_dim, spec.out_dim)
            )
            params[f"{pre}.w_sigma_param"] = np.full(
                (spec.in_dim, spec.out_dim), ly.softplus_inv(1e-3 * math.sqrt(config.lam))
            )
        else:  # deterministic
            params[f"{pre}.w"] = rng.normal(
                0.0, 1.0 / math.sqrt(spec.in_dim), (spec.in_dim, spec.out_dim)
            )
        params[f"{pre}.bias"] = np.zeros(spec.out_dim)
    if config.likelihood == "gaussian":
        params["noise_logvar"] = np.array(config.noise_logvar_init)
    return params


def make_noise_bundle(config: NetworkConfig, rng, n_samples, batch_size):
    """One independent noise structure per MC sample per stochastic layer."""
    bundle = []
    for _ in range(n_samples):
        per_layer = []
        for spec in config.layers:
            if spec.kind == "whvi":
                shape = spec.shape
                blocks = []
                for _ in range(shape.stack):
                    entry = {"act": rng.standard_normal((batch_size, shape.D))}
                    if spec.structure.s_treatment == "variational":
                        entry["s_noise"] = {
                            name: rng.standard_normal(shape.D)
                            for name in ("s1", "s2")[: spec.structure.n_s_vectors]
                        }
                    blocks.append(entry)
                per_layer.append({"blocks": blocks})
            elif spec.kind == "whvi-flow":
                shape = spec.shape
                per_layer.append(
                    {
                        "blocks": [
                            {"z0": rng.standard_normal((1, shape.D))}
                            for _ in range(shape.stack)
                        ]
                    }
                )
            elif spec.kind == "meanfield":
                per_layer.append({"eps": rng.standard_normal((batch_size, spec.out_dim))})
            else:
                per_layer.append(None)
        bundle.append(per_layer)
    return bundle


# ---------------------------------------------------------------------------
# numpy forward (prediction path)


def _activate_np(name, x):
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "cos":
        return np.cos(x)
    if name == "tanh":
        return np.tanh(x)
    return x


def _whvi_posterior_np(params, pre, j, spec, noise_entry):
    mu = params[f"{pre}.block{j}.mu"]
    sigma_param = params[f"{pre}.block{j}.sigma_param"]
    chol_t = params.get(f"{pre}.block{j}.chol_t")
    chol = np.tril(chol_t.T, k=-1) if chol_t is not None else None
    names = ("s1", "s2")[: spec.structure.n_s_vectors]
    svals = {"s1": None, "s2": None}
    for name in names:
        s_mu = params[f"{pre}.block{j}.{name}"]
        if spec.structure.s_treatment == "variational":
            s_sigma = ly.softplus(params[f"{pre}.block{j}.{name}_sigma_param"])
            svals[name] = s_mu + s_sigma * noise_entry["s_noise"][name]
        else:
            svals[name] = s_mu
    D = mu.shape[0]
    ones = np.ones(D)
    kind = spec.structure.kind
    # posterior objects carry the S1HGHS2 form; other structure kinds are
    # only reachable through the tape path used in training
    if kind != "S1HGHS2":
        raise ValueError(
            f"the prediction path supports structure kind 'S1HGHS2', got {kind!r}"
        )
    return ly.WhviPosterior(
        mu=mu,
        sigma_param=sigma_param,
        s1=svals["s1"] if svals["s1"] is not None else ones,
        s2=svals["s2"] if svals["s2"] is not None else ones,
        chol_offdiag=chol,
    )


def _layer_forward_np(spec, params, i, x, noise_entry, lam):
    pre = _layer_prefix(i)
    if spec.kind == "whvi":
        shape = spec.shape
        x_pad = np.pad(x, ((0, 0), (0, shape.padding)))
        outs = []
        for j in range(shape.stack):
            post = _whvi_posterior_np(params, pre, j, spec, noise_entry["blocks"][j])
            outs.append(
                ly.forward_local_reparam(post, x_pad, noise_entry["blocks"][j]["act"])
            )
        out = np.concatenate(outs, axis=1)[:, : spec.out_dim]
    elif spec.kind == "whvi-flow":
        shape = spec.shape
        x_pad = np.pad(x, ((0, 0), (0, shape.padding)))
        outs = []
        for j in range(shape.stack):
            chain = _flow_chain_np(params, pre, j, spec)
            zK, *_ = fl.flow_elbo_terms(chain, noise_entry["blocks"][j]["z0"], lam=lam)
            W = ly.materialize_weight(
                params[f"{pre}.block{j}.s1"], params[f"{pre}.block{j}.s2"], zK[0]
            )
            outs.append(x_pad @ W.T)
        out = np.concatenate(outs, axis=1)[:, : spec.out_dim]
    elif spec.kind == "meanfield":
        out = meanfield_layer_forward(
            params[f"{pre}.w_mu"],
            ly.softplus(params[f"{pre}.w_sigma_param"]),
            x,
            noise_entry["eps"],
        )
    else:
        out = x @ params[f"{pre}.w"]
    out = out + params[f"{pre}.bias"]
    return _activate_np(spec.activation, out)


def _flow_chain_np(params, pre, j, spec):
    # mirror the tape path: raw flow u is adjusted before use
    flows = []
    for k in range(spec.n_flows):
        u = params[f"{pre}.block{j}.flow{k}.u"]
        w = params[f"{pre}.block{j}.flow{k}.w"]
        b = float(params[f"{pre}.block{j}.flow{k}.b"])
        flows.append(fl.PlanarFlowParams(fl.invertibility_adjust(u, w), w, b))
    return fl.FlowChain(
        params[f"{pre}.block{j}.mu"],
        ly.softplus(params[f"{pre}.block{j}.sigma_param"]),
        tuple(flows),
    )


def meanfield_layer_forward(w_mu, w_sigma, x, eps):
    """Local reparameterization of a fully factorized Gaussian layer.

    Pre-activations are Gaussian with mean ``x W_mu`` and variance
    ``x^2 (W_sigma^2)``; ``eps`` is standard normal of the output shape.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != w_mu.shape[0]:
        raise ValueError(f"input {x.shape} does not match weight {w_mu.shape}")
    if eps.shape != (x.shape[0], w_mu.shape[1]):
        raise ValueError(f"noise shape {eps.shape} does not match output")
    mean = x @ w_mu
    var = (x * x) @ (w_sigma * w_sigma)
    return mean + np.sqrt(var) * eps


def meanfield_kl(w_mu, w_sigma, lam):
    """KL(N(mu, sigma^2) || N(0, lam)) summed over all weights."""
    if lam <= 0.0:
        raise ValueError("prior variance must be positive")
    var = w_sigma * w_sigma
    return 0.5 * float(
        np.sum(var / lam + w_mu * w_mu / lam - 1.0 + np.log(lam) - np.log(var))
    )


def network_forward(config: NetworkConfig, params: dict, X, noise_bundle):
    """Monte Carlo forward passes; returns outputs of shape (S, B, out)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != config.in_dim:
        raise ValueError(
            f"input of shape {X.shape} does not match network input dim {config.in_dim}"
        )
    outs = []
    for per_layer in noise_bundle:
        h = X
        for i, spec in enumerate(config.layers):
            h = _layer_forward_np(spec, params, i, h, per_layer[i], config.lam)
        outs.append(h)
    return np.stack(outs, axis=0)


# ---------------------------------------------------------------------------
# tape forward and the ELBO


def _activate_tape(name, x):
    if name == "relu":
        return ad.relu(x)
    if name == "cos":
        return ad.cos(x)
    if name == "tanh":
        return ad.tanh(x)
    return x


def _pad_cols_tape(x, padding):
    if padding == 0:
        return x
    return ad.pad(x, ((0, 0), (0, padding)))


def _whvi_layer_tape(tape, spec, pvars, x, noise_entry):
    shape = spec.shape
    x_pad = _pad_cols_tape(x, shape.padding)
    outs = []
    for j in range(shape.stack):
        blockvars = {
            name.split(".")[-1]: var
            for name, var in pvars.items()
            if name.startswith(f"block{j}.")
        }
        entry = noise_entry["blocks"][j]
        outs.append(
            ly.whvi_block_forward_tape(
                tape,
                blockvars,
                x_pad,
                entry["act"],
                spec.structure,
                s_noise=entry.get("s_noise"),
            )
        )
    out = outs[0] if len(outs) == 1 else ad.concat(outs, axis=1)
    return out[:, : spec.out_dim] if shape.padded_dout != spec.out_dim else out


def _flow_layer_tape(tape, spec, pvars, x, noise_entry, lam):
    """Sampled-weight forward pass plus the per-block flow KL estimator."""
    shape = spec.shape
    D = shape.D
    x_pad = _pad_cols_tape(x, shape.padding)
    outs = []
    kl_terms = []
    for j in range(shape.stack):
        flows = [
            {
                "u": pvars[f"block{j}.flow{k}.u"],
                "w": pvars[f"block{j}.flow{k}.w"],
                "b": pvars[f"block{j}.flow{k}.b"],
            }
            for k in range(spec.n_flows)
        ]
        zK, log_q0, sum_ld, log_p = fl.flow_elbo_terms_tape(
            tape,
            pvars[f"block{j}.mu"],
            pvars[f"block{j}.sigma_param"],
            flows,
            noise_entry["blocks"][j]["z0"],
            lam=lam,
        )
        kl_terms.append(ad.sub(ad.sub(log_q0, sum_ld), log_p).mean())
        g = zK.reshape((D,))
        s1 = pvars[f"block{j}.s1"]
        s2 = pvars[f"block{j}.s2"]
        # apply the sampled weight S1 H diag(g) H S2 to each row of x
        h = ad.fwht(ad.mul(x_pad, s2))
        outs.append(ad.mul(ad.fwht(ad.mul(h, g)), s1))
    out = outs[0] if len(outs) == 1 else ad.concat(outs, axis=1)
    out = out[:, : spec.out_dim] if shape.padded_dout != spec.out_dim else out
    return out, kl_terms


def _meanfield_layer_tape(tape, pvars, x, eps):
    w_mu = pvars["w_mu"]
    sigma = ad.softplus(pvars["w_sigma_param"])
    mean = ad.matmul(x, w_mu)
    var = ad.matmul(ad.mul(x, x), ad.mul(sigma, sigma))
    return ad.add(mean, ad.mul(tape.constant(eps), ad.sqrt_positive(var)))


def _meanfield_kl_tape(tape, pvars, lam):
    w_mu = pvars["w_mu"]
    sigma = ad.softplus(pvars["w_sigma_param"])
    var = ad.mul(sigma, sigma)
    n = float(np.prod(w_mu.shape))
    quad = ad.scalar_mul(ad.add(var, ad.mul(w_mu, w_mu)).sum(), 1.0 / lam)
    logdet = ad.log(var).sum()
    const = tape.constant(np.array(n * (math.log(lam) - 1.0)))
    return ad.scalar_mul(ad.add(ad.sub(quad, logdet), const), 0.5)


def _network_tape(tape, config, pvars_by_layer, X, per_layer_noise):
    """One MC sample through the network; returns (output, flow KL terms)."""
    h = tape.constant(np.asarray(X, dtype=np.float64))
    flow_kls = []
    for i, spec in enumerate(config.layers):
        pvars = pvars_by_layer[i]
        if spec.kind == "whvi":
            out = _whvi_layer_tape(tape, spec, pvars, h, per_layer_noise[i])
        elif spec.kind == "whvi-flow":
            out, kls = _flow_layer_tape(
                tape, spec, pvars, h, per_layer_noise[i], config.lam
            )
            flow_kls.extend(kls)
        elif spec.kind == "meanfield":
            out = _meanfield_layer_tape(tape, pvars, h, per_layer_noise[i]["eps"])
        else:
            out = ad.matmul(h, pvars["w"])
        out = ad.add(out, pvars["bias"])
        h = _activate_tape(spec.activation, out)
    return h, flow_kls


def _group_param_vars(config, param_vars):
    grouped = []
    for i in range(len(config.layers)):
        pre = _layer_prefix(i) + "."
        grouped.append(
            {name[len(pre):]: var for name, var in param_vars.items() if name.startswith(pre)}
        )
    return grouped


def elbo(config: NetworkConfig, params: dict, batch, N_total, noise_bundle):
    """Negative ELBO of a minibatch as a scalar Variable.

    ``batch`` is ``(X_batch, y_batch)``.  Returns ``(neg_elbo, parts)`` where
    ``parts`` carries the scalar nll/kl values, the tape, and the parameter
    leaves for the optimizer.
    """
    X, y = batch
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    B = X.shape[0]
    if B == 0:
        raise ValueError("empty batch")
    if N_total < B:
        raise ValueError(f"N_total={N_total} smaller than batch size {B}")
    S = len(noise_bundle)
    tape = ad.Tape()
    param_vars = {name: tape.leaf(value) for name, value in params.items()}
    grouped = _group_param_vars(config, param_vars)

    nll_terms = []
    flow_kl_terms = []
    for per_layer in noise_bundle:
        out, flow_kls = _network_tape(tape, config, grouped, X, per_layer)
        flow_kl_terms.extend(flow_kls)
        if config.likelihood == "gaussian":
            y2 = y.reshape(B, -1).astype(np.float64)
            nll = ad.gaussian_nll(tape.constant(y2), out, param_vars["noise_logvar"])
        else:
            n_classes = config.out_dim
            onehot = np.zeros((B, n_classes))
            onehot[np.arange(B), y.astype(int)] = 1.0
            nll = ad.softmax_cross_entropy(out, tape.constant(onehot))
        if not np.all(np.isfinite(nll.value)):
            idx = int(np.argmax(~np.isfinite(np.sum(nll.value.reshape(B, -1), axis=1))))
            raise FloatingPointError(f"non-finite likelihood at batch index {idx}")
        nll_terms.append(nll.sum())

    nll_mean = nll_terms[0] if S == 1 else ad.scalar_mul(
        ad.concat([t.reshape((1,)) for t in nll_terms], axis=0).sum(), 1.0 / S
    )
    data_term = ad.scalar_mul(nll_mean, N_total / B)

    kl_terms = list(flow_kl_terms)
    for i, spec in enumerate(config.layers):
        if spec.kind == "whvi":
            for j in range(spec.shape.stack):
                blockvars = {
                    name.split(".")[-1]: var
                    for name, var in grouped[i].items()
                    if name.startswith(f"block{j}.")
                }
                kl_terms.append(
                    ly.whvi_block_kl_tape(tape, blockvars, spec.structure, config.lam)
                )
        elif spec.kind == "meanfield":
            kl_terms.append(_meanfield_kl_tape(tape, grouped[i], config.lam))

    if kl_terms:
        kl_total = kl_terms[0]
        for term in kl_terms[1:]:
            kl_total = ad.add(kl_total, term)
    else:
        kl_total = tape.constant(np.array(0.0))

    neg_elbo = ad.add(data_term, ad.scalar_mul(kl_total, config.kl_scale))
    parts = {
        "nll": float(data_term.value),
        "kl": float(kl_total.value),
        "tape": tape,
        "param_vars": param_vars,
    }
    return neg_elbo, parts


# ---------------------------------------------------------------------------
# training


def learning_rate_at(schedule: TrainSchedule, t: int) -> float:
    """Power-law decay lr0 * (1 + gamma * t)**(-p) at step t (0-based)."""
    return schedule.lr0 * (1.0 + schedule.gamma * t) ** (-schedule.p)


def train(config: NetworkConfig, schedule: TrainSchedule, dataset, seed):
    """Adam-optimize the negative ELBO; fully deterministic given the seed.

    ``dataset`` is ``(X, y)`` with standardized features.  Returns
    ``(params, log)`` where ``log`` is a list of per-interval records with
    keys step, lr, neg_elbo, nll, kl, wall_ms.
    """
    X, y = dataset
    X = np.asarray(X, dtype=np.float64)
    N = X.shape[0]
    rng = np.random.default_rng(seed)
    params = init_network_params(config, rng)
    m1 = {k: np.zeros_like(v) for k, v in params.items()}
    m2 = {k: np.zeros_like(v) for k, v in params.items()}
    log = []
    t0 = time.perf_counter()
    for t in range(schedule.total_steps):
        lr = learning_rate_at(schedule, t)
        idx = rng.integers(0, N, size=min(schedule.batch_size, N))
        noise = make_noise_bundle(config, rng, config.mc_train, len(idx))
        neg_elbo, parts = elbo(config, params, (X[idx], y[idx]), N, noise)
        if not np.isfinite(neg_elbo.value):
            raise FloatingPointError(f"training diverged: non-finite loss at step {t}")
        ad.backward(parts["tape"], neg_elbo)
        frozen = "noise_logvar" if t < schedule.fixed_noise_steps else None
        grads = {
            name: var.grad
            for name, var in parts["param_vars"].items()
            if name != frozen and var.grad is not None
        }
        ly._adam_step(params, grads, m1, m2, t, lr)
        if t % schedule.eval_interval == 0 or t == schedule.total_steps - 1:
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


# ---------------------------------------------------------------------------
# prediction and metrics


def predict(config: NetworkConfig, params: dict, X, mc_test, seed):
    """Monte Carlo predictive distribution at the given inputs."""
    X = np.asarray(X, dtype=np.float64)
    rng = np.random.default_rng(seed)
    noise = make_noise_bundle(config, rng, mc_test, X.shape[0])
    outs = network_forward(config, params, X, noise)  # (S, B, out)
    if config.likelihood == "gaussian":
        return Predictions(
            task="regression",
            f_samples=outs[:, :, 0] if outs.shape[2] == 1 else outs,
            noise_var=float(np.exp(params["noise_logvar"])),
        )
    z = outs - logsumexp(outs, axis=2, keepdims=True)
    probs = np.mean(np.exp(z), axis=0)
    return Predictions(task="classification", probs=probs)


def compute_metrics(predictions: Predictions, targets, task=None) -> Metrics:
    """Evaluation metrics on unnormalized targets."""
    task = task or predictions.task
    targets = np.asarray(targets)
    if targets.size == 0:
        raise ValueError("empty targets")
    if task == "regression":
        f = predictions.f_samples
        if f is None or f.size == 0:
            raise ValueError("empty predictions")
        y = targets.reshape(-1).astype(np.float64)
        mean = f.mean(axis=0)
        rmse = float(np.sqrt(np.mean((mean - y) ** 2)))
        S = f.shape[0]
        lognorm = -0.5 * (math.log(2.0 * math.pi) + math.log(predictions.noise_var))
        lp = lognorm - 0.5 * (y[None, :] - f) ** 2 / predictions.noise_var
        mnll = float(-np.mean(logsumexp(lp, axis=0) - math.log(S)))
        return Metrics(rmse=rmse, mnll=mnll)
    probs = predictions.probs
    if probs is None or probs.size == 0:
        raise ValueError("empty predictions")
    labels = targets.reshape(-1).astype(int)
    picked = np.argmax(probs, axis=1)
    error_rate = float(np.mean(picked != labels))
    eps = 1e-300
    mnll = float(-np.mean(np.log(probs[np.arange(len(labels)), labels] + eps)))
    conf = probs[np.arange(len(labels)), picked]
    correct = (picked == labels).astype(np.float64)
    bins = np.minimum((conf * ECE_BINS).astype(int), ECE_BINS - 1)
    ece = 0.0
    for b in range(ECE_BINS):
        mask = bins == b
        if not np.any(mask):
            continue
        ece += (mask.sum() / len(labels)) * abs(correct[mask].mean() - conf[mask].mean())
    return Metrics(mnll=mnll, error_rate=error_rate, ece=float(ece))
