"""Structured variational layers built from Walsh-Hadamard products.

A layer's weight posterior is the law of W = S1 H diag(g) H S2 with
g ~ N(mu, Sigma), S1/S2 diagonal sign-like matrices and H the orthonormal
Walsh-Hadamard matrix.  Matrix products against W never materialize W:
they ride on the fast transform, so a D x D layer costs O(D log D) time
and O(D) parameters.

Everything here comes in two flavors where training needs it: plain
numpy (inference, oracles) and tape-recorded (differentiable).  The two
are checked against each other in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .transform import fwht, fwht_batch, is_power_of_two

STRUCTURE_KINDS = ("GH", "SHGH", "S1HGHS2H", "S1HGHS2")
S_TREATMENTS = ("optimized", "variational")

# number of distinct s-diagonals each structure carries
_S_VECTORS = {"GH": 0, "SHGH": 1, "S1HGHS2H": 2, "S1HGHS2": 2}

_DENSE_GUARD = 64  # ops building D^2-sized intermediates refuse beyond this


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    # inverse of log(1 + e^x); exact for the positive scales used here
    return np.log(np.expm1(y))


@dataclass(frozen=True)
class WhviShape:
    """Block geometry of one layer.

    Matrix mode (from setup_dimensions): inputs are padded from din_orig
    to D with zeros and `stack` independent D x D blocks are concatenated
    along the output axis, then truncated to dout_orig.

    Vector mode (from reshape_vector_shape): the weight is a length-
    din_orig vector stored as the row-major flattening of one D x D
    block; `padding` counts the D*D - n unused cells and stack is 1.
    """

    din_orig: int
    dout_orig: int
    D: int
    padding: int
    stack: int
    vector_mode: bool = False

    def __post_init__(self):
        if not is_power_of_two(self.D):
            raise ValueError(f"D must be a power of two, got {self.D}")
        if self.vector_mode:
            ok = self.stack == 1 and self.D * self.D - self.padding == self.din_orig
        else:
            ok = (
                self.din_orig + self.padding == self.D
                and self.stack == -(-self.dout_orig // self.D)
            )
        if not ok:
            raise ValueError(f"inconsistent shape record: {self}")

    @property
    def padded_dout(self):
        return self.D * self.stack


@dataclass(frozen=True)
class StructureSpec:
    """Which scaling diagonals exist and how they are treated.

    kind picks the weight structure (GH, SHGH, S1HGHS2H, or the default
    S1HGHS2); s_treatment picks point-optimized s versus a mean-field
    Gaussian posterior over s with a N(0,1) prior.
    """

    kind: str = "S1HGHS2"
    s_treatment: str = "optimized"

    def __post_init__(self):
        if self.kind not in STRUCTURE_KINDS:
            raise ValueError(f"unknown structure kind {self.kind!r}")
        if self.s_treatment not in S_TREATMENTS:
            raise ValueError(f"unknown s treatment {self.s_treatment!r}")

    @property
    def n_s_vectors(self):
        return _S_VECTORS[self.kind]


@dataclass(frozen=True)
class PriorConfig:
    """Isotropic Gaussian prior over g: p(g) = N(0, lam * I)."""

    lam: float = 1e-5

    def validate(self):
        if not (self.lam > 0):
            raise ValueError(f"prior variance must be positive, got {self.lam}")


@dataclass
class WhviPosterior:
    """Variational state of one D x D block.

    sigma = softplus(sigma_param) elementwise.  When chol_offdiag is set
    the posterior root is the full lower triangle L = diag(sigma) +
    chol_offdiag; otherwise Sigma is diagonal.  s1/s2 may be None for
    structures that lack them; *_sigma_param are set only under the
    variational s treatment (then s1/s2 hold the means).
    """

    mu: np.ndarray
    sigma_param: np.ndarray
    s1: np.ndarray | None = None
    s2: np.ndarray | None = None
    chol_offdiag: np.ndarray | None = None
    s1_sigma_param: np.ndarray | None = None
    s2_sigma_param: np.ndarray | None = None

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma_param = np.asarray(self.sigma_param, dtype=np.float64)
        D = self.mu.shape[0]
        if self.mu.ndim != 1 or self.sigma_param.shape != (D,):
            raise ValueError("mu and sigma_param must be matching 1-d vectors")
        if not is_power_of_two(D):
            raise ValueError(f"block size must be a power of two, got {D}")
        for name in ("s1", "s2"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=np.float64)
                if v.shape != (D,):
                    raise ValueError(f"{name} must have shape ({D},)")
                setattr(self, name, v)
        if self.chol_offdiag is not None:
            C = np.asarray(self.chol_offdiag, dtype=np.float64)
            if C.shape != (D, D):
                raise ValueError(f"chol_offdiag must have shape ({D}, {D})")
            if np.any(np.triu(C) != 0.0):
                raise ValueError("chol_offdiag must be strictly lower triangular")
            self.chol_offdiag = C

    @property
    def D(self):
        return self.mu.shape[0]

    @property
    def sigma(self):
        return softplus(self.sigma_param)

    def sigma_root(self):
        """Lower-triangular root of Sigma (positive diagonal)."""
        L = np.diag(self.sigma)
        if self.chol_offdiag is not None:
            L = L + self.chol_offdiag
        return L


@dataclass(frozen=True)
class MatrixVariateParams:
    """Mean and covariance roots of the induced matrix Gaussian.

    degenerate=True flags Sigma = 0 (no randomness): U_root is zero and
    V_root is undefined (None), since the trace normalization divides by
    tr(U) = 0.
    """

    M: np.ndarray
    U_root: np.ndarray
    V_root: np.ndarray | None
    degenerate: bool


# ---------------------------------------------------------------------------
# shape handling


def setup_dimensions(din, dout):
    """Block geometry for a din -> dout layer.

    The input is padded to the next power of two D and ceil(dout / D)
    independent D x D blocks are stacked along the output axis.  Integer
    bit operations compute the power exactly, so no floating-point log is
    involved.
    """
    din, dout = int(din), int(dout)
    if din < 1 or dout < 1:
        raise ValueError(f"layer dims must be positive, got ({din}, {dout})")
    next_power = 1 if din == 1 else 1 << (din - 1).bit_length()
    stack = -(-dout // next_power)
    return WhviShape(
        din_orig=din,
        dout_orig=dout,
        D=next_power,
        padding=next_power - din,
        stack=stack,
    )


def reshape_vector_shape(n_total):
    """Geometry for treating a length-n parameter vector as one block.

    Returns the smallest power-of-two D with D^2 >= n_total; the vector
    is read off the row-major flattening of the D x D weight, truncated
    to n_total entries.
    """
    n_total = int(n_total)
    if n_total < 1:
        raise ValueError(f"vector length must be positive, got {n_total}")
    D = 1
    while D * D < n_total:
        D <<= 1
    return WhviShape(
        din_orig=n_total,
        dout_orig=n_total,
        D=D,
        padding=D * D - n_total,
        stack=1,
        vector_mode=True,
    )


# ---------------------------------------------------------------------------
# sampling and weight materialization (numpy side)


def sample_g(posterior, noise):
    """One posterior draw g = mu + Sigma^{1/2} noise."""
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != (posterior.D,):
        raise ValueError(f"noise must have shape ({posterior.D},)")
    if posterior.chol_offdiag is None:
        return posterior.mu + posterior.sigma * noise
    return posterior.mu + posterior.sigma_root() @ noise


def materialize_weight(s1, s2, g):
    """Dense W = S1 H diag(g) H S2 (orthonormal H), via the transform only.

    Row i of S1 H is s1_i * H_{i,:}, so two batched transforms sandwich
    the diagonal of g; the dense Hadamard matrix is never built.
    """
    s1, s2, g = (np.asarray(v, dtype=np.float64) for v in (s1, s2, g))
    if not (s1.shape == s2.shape == g.shape) or s1.ndim != 1:
        raise ValueError(
            f"s1, s2, g must be equal-length vectors, got {s1.shape}, {s2.shape}, {g.shape}"
        )
    x = fwht_batch(np.diag(s1))            # S1 H, row by row
    x = fwht_batch(x * g[None, :])         # S1 H diag(g) H
    return x * s2[None, :]                  # S1 H diag(g) H S2


def _dense_hadamard_rows(D):
    # orthonormal H via the transform itself (oracle-scale helper)
    return fwht_batch(np.eye(D))


def _guard_dense(D, what):
    if D > _DENSE_GUARD:
        raise ValueError(
            f"{what} builds D^2-sized intermediates and is guarded to D <= {_DENSE_GUARD}, got D={D}"
        )


def build_a_matrix(s1, s2):
    """The D^2 x D map A with vect(W) = A g (column-major vect).

    Block i holds rows i*D:(i+1)*D of A and equals S1 H diag(v_i) with
    v_i = s2_i * H_{:,i}, i.e. column i of W as a linear function of g.
    """
    s1 = np.asarray(s1, dtype=np.float64)
    s2 = np.asarray(s2, dtype=np.float64)
    if s1.shape != s2.shape or s1.ndim != 1:
        raise ValueError(f"s1, s2 must be equal-length vectors, got {s1.shape}, {s2.shape}")
    D = s1.shape[0]
    _guard_dense(D, "build_a_matrix")
    Hn = _dense_hadamard_rows(D)
    S1H = s1[:, None] * Hn
    A = np.empty((D * D, D))
    for i in range(D):
        A[i * D : (i + 1) * D] = S1H * (s2[i] * Hn[:, i])[None, :]
    return A


def _block_s(posterior):
    ones = np.ones(posterior.D)
    s1 = ones if posterior.s1 is None else posterior.s1
    s2 = ones if posterior.s2 is None else posterior.s2
    return s1, s2


def local_reparam_moments(posterior, h):
    """Gaussian moments of W h for fixed input h.

    Returns (m, A_h) with W h ~ N(m, A_h A_h^T):
    m = S1 H diag(mu) H S2 h and A_h = S1 H diag(H S2 h) Sigma^{1/2}.
    """
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (posterior.D,):
        raise ValueError(f"h must have shape ({posterior.D},)")
    s1, s2 = _block_s(posterior)
    u = fwht(s2 * h)
    m = s1 * fwht(posterior.mu * u)
    Hdiag_u = fwht_batch(np.diag(u)).T  # H diag(u)
    if posterior.chol_offdiag is None:
        A_h = s1[:, None] * (Hdiag_u * posterior.sigma[None, :])
    else:
        A_h = s1[:, None] * (Hdiag_u @ posterior.sigma_root())
    return m, A_h


def forward_local_reparam(posterior, H_batch, noise):
    """Batched stochastic layer output, one fresh weight draw per row.

    Row i is W(mu) h_i + W(Sigma^{1/2} eps_i) h_i, which by linearity of
    the structure collapses to a single transform pass with the diagonal
    argument mu + Sigma^{1/2} eps_i.
    """
    H_batch = np.asarray(H_batch, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if H_batch.ndim != 2 or H_batch.shape[1] != posterior.D:
        raise ValueError(f"input batch must be (B, {posterior.D})")
    if noise.shape != H_batch.shape:
        raise ValueError(
            f"noise shape {noise.shape} must match batch shape {H_batch.shape}"
        )
    s1, s2 = _block_s(posterior)
    if posterior.chol_offdiag is None:
        u = noise * posterior.sigma[None, :]
    else:
        u = noise @ posterior.sigma_root().T
    pre = fwht_batch(H_batch * s2[None, :])
    return fwht_batch(pre * (posterior.mu[None, :] + u)) * s1[None, :]


# ---------------------------------------------------------------------------
# KL divergence


def _gaussian_kl_terms(tr_sigma, sq_mu, logdet_sigma, D, lam):
    return 0.5 * (
        (tr_sigma + sq_mu) / lam - D - logdet_sigma + D * math.log(lam)
    )


def kl_to_prior(posterior, prior):
    """KL( N(mu, Sigma) || N(0, lam I) ) for one block, in closed form.

    Variational s-diagonals add their own mean-field KL against a N(0,1)
    prior on each entry.
    """
    prior.validate()
    D = posterior.D
    sigma = posterior.sigma
    with np.errstate(divide="ignore"):
        logdet = 2.0 * float(np.sum(np.log(sigma)))
    if posterior.chol_offdiag is None:
        tr = float(np.sum(sigma**2))
    else:
        L = posterior.sigma_root()
        tr = float(np.sum(L**2))
    kl = _gaussian_kl_terms(tr, float(posterior.mu @ posterior.mu), logdet, D, prior.lam)
    for s_mu, s_sp in (
        (posterior.s1, posterior.s1_sigma_param),
        (posterior.s2, posterior.s2_sigma_param),
    ):
        if s_sp is not None:
            ss = softplus(s_sp)
            kl += 0.5 * float(np.sum(ss**2 + s_mu**2 - 1.0 - 2.0 * np.log(ss)))
    return float(kl)


# ---------------------------------------------------------------------------
# matrix-variate view and LQ geometry (oracle-scale, D <= 64)


def matrix_variate_params(posterior):
    """Mean M and roots of the row/column covariances (U, V) of q(W).

    U = E[(W-M)(W-M)^T] and V = E[(W-M)^T (W-M)] / tr(U), so tr(V) = 1
    fixes the scale non-identifiability of the pair.  Roots: with T2 the
    D x D^2 matrix whose i-th row vectorizes (column-major) the outer
    product of Sigma^{1/2} row i with (H S2) row i,

        U_root = S1 H T2,       V_root = S2 H T1 / sqrt(tr U),

    and T1 likewise with S1.  U_root @ U_root.T reproduces U exactly.
    """
    D = posterior.D
    _guard_dense(D, "matrix_variate_params")
    s1, s2 = _block_s(posterior)
    P = posterior.sigma_root()
    M = materialize_weight(s1, s2, posterior.mu)
    Hn = _dense_hadamard_rows(D)

    def root(s_outer, s_inner):
        Q = Hn * s_inner[None, :]  # rows of H S_inner
        T = np.empty((D, D * D))
        for i in range(D):
            T[i] = np.outer(P[i], Q[i]).ravel(order="F")
        return s_outer[:, None] * fwht_batch(T.T).T  # S_outer H T

    U_root = root(s1, s2)
    tr_u = float(np.sum(U_root**2))
    if tr_u == 0.0:
        return MatrixVariateParams(M=M, U_root=U_root, V_root=None, degenerate=True)
    V_root = root(s2, s1) / math.sqrt(tr_u)
    return MatrixVariateParams(M=M, U_root=U_root, V_root=V_root, degenerate=False)


def lq_factors(s1, s2):
    """Explicit LQ split of the A matrix: A = diag(l) Q, Q^T Q = I.

    l is returned as the length-D^2 diagonal (block i carries s2_i * s1);
    Q stacks the blocks H diag(H_{:,i}), which are independent of s1, s2.
    """
    s1 = np.asarray(s1, dtype=np.float64)
    s2 = np.asarray(s2, dtype=np.float64)
    if s1.shape != s2.shape or s1.ndim != 1:
        raise ValueError(f"s1, s2 must be equal-length vectors, got {s1.shape}, {s2.shape}")
    D = s1.shape[0]
    _guard_dense(D, "lq_factors")
    l_diag = (s2[:, None] * s1[None, :]).ravel()
    Hn = _dense_hadamard_rows(D)
    Q = np.concatenate([Hn * Hn[:, i][None, :] for i in range(D)], axis=0)
    return l_diag, Q


# ---------------------------------------------------------------------------
# tape-side building blocks


def build_weight_tape(s1, s2, g, normalized=True):
    """Tape Variable for W = S1 H diag(g) H S2, batched over leading dims.

    Inputs are (..., D) Variables; output is (..., D, D).  Uses the
    row-identity W = ((diag(s1) H) * g) H * s2 so only the transform and
    elementwise products appear on the tape.
    """
    tape = s1.tape
    D = s1.shape[-1]
    eye = tape.constant(np.eye(D))
    s1m = ad.mul(s1.reshape(s1.shape + (1,)), eye)          # diag(s1), batched
    x = ad.fwht(s1m, normalized=normalized)                  # S1 H
    x = ad.mul(x, g.reshape(g.shape[:-1] + (1, D)))          # S1 H diag(g)
    x = ad.fwht(x, normalized=normalized)                    # S1 H diag(g) H
    return ad.mul(x, s2.reshape(s2.shape[:-1] + (1, D)))     # ... S2


def _resolve_s_tape(tape, blockvars, name, structure, s_noise):
    """The s-diagonal as a tape Variable: a free parameter or a draw."""
    base = blockvars[name]
    if structure.s_treatment == "optimized":
        return base
    ss = ad.softplus(blockvars[f"{name}_sigma_param"])
    eps = tape.constant(s_noise[name])
    return ad.add(base, ad.mul(ss, eps))


def whvi_block_forward_tape(tape, blockvars, h, noise, structure, s_noise=None):
    """Differentiable local-reparameterization forward for one block.

    h: (B, D) Variable; noise: (B, D) standard normal array (constant);
    returns the (B, D) output Variable.  blockvars maps parameter names
    (mu, sigma_param, s1, s2, chol_t, *_sigma_param) to tape Variables.
    s_noise supplies per-call draws for variational s-diagonals.
    """
    D = h.shape[-1]
    sigma = ad.softplus(blockvars["sigma_param"])
    eps = tape.constant(noise)
    if "chol_t" in blockvars:
        eye = tape.constant(np.eye(D))
        upper = tape.constant(np.triu(np.ones((D, D)), k=1))
        # transposed root: rows of noise hit L^T from the right
        Lt = ad.add(ad.mul(eye, sigma), ad.mul(blockvars["chol_t"], upper))
        u = ad.matmul(eps, Lt)
    else:
        u = ad.mul(eps, sigma)
    gtilde = ad.add(u, blockvars["mu"])

    kind = structure.kind
    if kind == "GH":
        pre = ad.fwht(h)
        return ad.mul(pre, gtilde)
    if kind == "SHGH":
        s = _resolve_s_tape(tape, blockvars, "s1", structure, s_noise)
        pre = ad.fwht(h)
        return ad.mul(ad.fwht(ad.mul(pre, gtilde)), s)
    s1 = _resolve_s_tape(tape, blockvars, "s1", structure, s_noise)
    s2 = _resolve_s_tape(tape, blockvars, "s2", structure, s_noise)
    if kind == "S1HGHS2H":
        pre = ad.fwht(ad.mul(ad.fwht(h), s2))
    else:  # S1HGHS2
        pre = ad.fwht(ad.mul(h, s2))
    return ad.mul(ad.fwht(ad.mul(pre, gtilde)), s1)


def whvi_block_kl_tape(tape, blockvars, structure, lam):
    """KL of one block to its prior, as a scalar tape Variable."""
    if lam <= 0:
        raise ValueError(f"prior variance must be positive, got {lam}")
    mu = blockvars["mu"]
    D = mu.shape[0]
    sigma = ad.softplus(blockvars["sigma_param"])
    logdet = ad.scalar_mul(ad.log(sigma).sum(), 2.0)
    if "chol_t" in blockvars:
        eye = tape.constant(np.eye(D))
        upper = tape.constant(np.triu(np.ones((D, D)), k=1))
        Lt = ad.add(ad.mul(eye, sigma), ad.mul(blockvars["chol_t"], upper))
        tr = ad.mul(Lt, Lt).sum()
    else:
        tr = ad.mul(sigma, sigma).sum()
    sq_mu = ad.mul(mu, mu).sum()
    const = tape.constant(np.asarray(D * math.log(lam) - D))
    kl = ad.scalar_mul(
        ad.add(ad.sub(ad.scalar_mul(ad.add(tr, sq_mu), 1.0 / lam), logdet), const),
        0.5,
    )
    if structure.s_treatment == "variational":
        for name in ("s1", "s2")[: structure.n_s_vectors]:
            smu = blockvars[name]
            ss = ad.softplus(blockvars[f"{name}_sigma_param"])
            terms = ad.sub(
                ad.add(ad.mul(ss, ss), ad.mul(smu, smu)),
                ad.add(ad.scalar_mul(ad.log(ss), 2.0), tape.constant(np.ones(smu.shape[0]))),
            )
            kl = ad.add(kl, ad.scalar_mul(terms.sum(), 0.5))
    return kl


# ---------------------------------------------------------------------------
# layer-level numpy forward (padding / stacking / truncation)


def whvi_layer_forward(posteriors, shape, x, noises):
    """Numpy forward of a full (din -> dout) layer.

    Pads x to (B, D), runs each stacked block with its own noise, then
    concatenates block outputs and truncates to dout_orig columns.
    """
    if shape.vector_mode:
        raise ValueError("vector-mode layers sample the weight; use the bnn path")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != shape.din_orig:
        raise ValueError(f"input must be (B, {shape.din_orig}), got {x.shape}")
    if len(posteriors) != shape.stack or len(noises) != shape.stack:
        raise ValueError("one posterior and one noise array per stacked block")
    h = np.pad(x, ((0, 0), (0, shape.padding)))
    outs = [
        forward_local_reparam(post, h, eps) for post, eps in zip(posteriors, noises)
    ]
    return np.concatenate(outs, axis=1)[:, : shape.dout_orig]


# ---------------------------------------------------------------------------
# parameter initialization and counting


def init_whvi_block(D, structure, prior, rng, full_cov=False):
    """Fresh parameter arrays for one block, as a flat dict.

    mu is a prior draw, sigma starts at 1e-3 * sqrt(lam) (a shrunk
    prior), and the s-diagonals start near-Rademacher: random signs with
    1% Gaussian jitter.
    """
    prior.validate()
    root_lam = math.sqrt(prior.lam)
    params = {
        "mu": rng.standard_normal(D) * root_lam,
        "sigma_param": np.full(D, softplus_inv(1e-3 * root_lam)),
    }
    if full_cov:
        params["chol_t"] = np.zeros((D, D))
    for name in ("s1", "s2")[: structure.n_s_vectors]:
        signs = rng.integers(0, 2, size=D) * 2.0 - 1.0
        params[name] = signs * (1.0 + 0.01 * rng.standard_normal(D))
        if structure.s_treatment == "variational":
            params[f"{name}_sigma_param"] = np.full(D, softplus_inv(1e-3))
    return params


def posterior_from_params(params):
    """Assemble a WhviPosterior view from a flat block-parameter dict."""
    chol_t = params.get("chol_t")
    return WhviPosterior(
        mu=params["mu"],
        sigma_param=params["sigma_param"],
        s1=params.get("s1"),
        s2=params.get("s2"),
        chol_offdiag=None if chol_t is None else np.tril(chol_t.T, k=-1),
        s1_sigma_param=params.get("s1_sigma_param"),
        s2_sigma_param=params.get("s2_sigma_param"),
    )


def layer_param_count(shape, structure):
    """Number of posterior parameters in the layer (bias excluded)."""
    per_s = 2 if structure.s_treatment == "variational" else 1
    return shape.stack * (2 * shape.D + structure.n_s_vectors * per_s * shape.D)


# ---------------------------------------------------------------------------
# appendix study: fit S1 H diag(g) H S2 to an arbitrary matrix


def _adam_step(state, grads, m1, m2, t, step):
    for k, g in grads.items():
        m1[k] = 0.9 * m1[k] + 0.1 * g
        m2[k] = 0.999 * m2[k] + 0.001 * g * g
        mhat = m1[k] / (1.0 - 0.9 ** (t + 1))
        vhat = m2[k] / (1.0 - 0.999 ** (t + 1))
        state[k] = state[k] - step * mhat / (np.sqrt(vhat) + 1e-8)


def approximate_matrix(gamma, iters=3000, restarts=4, rng=None, lr=0.1):
    """Best-effort fit of the structured form to a dense target.

    Minimizes rmse(s1, s2, g) = ||gamma - S1 H diag(g) H S2||_F / D by
    first-order gradient-based descent through the tape (adaptive steps,
    geometrically decaying rate), running `restarts` random
    initializations as one batched program.  Returns the best
    (rmse, s1, s2, g) seen at any iterate of any restart.
    """
    gamma = np.asarray(gamma, dtype=np.float64)
    if not np.all(np.isfinite(gamma)):
        raise FloatingPointError("non-finite entries in target matrix")
    if gamma.ndim != 2 or gamma.shape[0] != gamma.shape[1]:
        raise ValueError(f"target must be square, got {gamma.shape}")
    D = gamma.shape[0]
    if not is_power_of_two(D):
        raise ValueError(f"target size must be a power of two, got {D}")
    if rng is None:
        rng = np.random.default_rng()
    R = int(restarts)

    signs = rng.integers(0, 2, size=(2, R, D)) * 2.0 - 1.0
    state = {
        "s1": signs[0] * (1.0 + 0.01 * rng.standard_normal((R, D))),
        "s2": signs[1] * (1.0 + 0.01 * rng.standard_normal((R, D))),
        "g": rng.standard_normal((R, D)),
    }
    m1 = {k: np.zeros_like(v) for k, v in state.items()}
    m2 = {k: np.zeros_like(v) for k, v in state.items()}
    names = ("s1", "s2", "g")

    best = (math.inf, None, None, None)
    decay = 1e-4 ** (1.0 / max(int(iters) - 1, 1))  # geometric: lr -> lr * 1e-4
    for t in range(int(iters)):
        tape = ad.Tape()
        leaves = {k: tape.leaf(state[k]) for k in names}
        w = build_weight_tape(leaves["s1"], leaves["s2"], leaves["g"])
        err = ad.sub(w, tape.constant(gamma[None, :, :]))
        sq = ad.mul(err, err).mean(axis=(1, 2))  # per-restart mean square
        rmse = np.sqrt(sq.value)
        r = int(np.argmin(rmse))
        if rmse[r] < best[0]:
            best = (float(rmse[r]), state["s1"][r].copy(), state["s2"][r].copy(), state["g"][r].copy())
        ad.backward(tape, sq.sum())
        _adam_step(state, {k: leaves[k].grad for k in names}, m1, m2, t, lr * decay**t)

    # score the final iterate too
    w_final = np.stack(
        [materialize_weight(state["s1"][r], state["s2"][r], state["g"][r]) for r in range(R)]
    )
    rmse_final = np.sqrt(((w_final - gamma[None]) ** 2).mean(axis=(1, 2)))
    r = int(np.argmin(rmse_final))
    if rmse_final[r] < best[0]:
        best = (float(rmse_final[r]), state["s1"][r], state["s2"][r], state["g"][r])
    return best


def approximation_study(dims, n_targets, iters=1500, restarts=3, rng=None, lr=0.1):
    """Per-target best rmse of the structured fit, batched for speed.

    For each D in dims draws n_targets i.i.d. Uniform(-1, 1) targets and
    fits each with `restarts` random initializations.  All targets and
    restarts of one D run as a single batched tape program; gradients
    stay per-(target, restart) independent because the loss is a sum of
    independent terms.  Returns {D: array of n_targets best rmses}.
    """
    if rng is None:
        rng = np.random.default_rng()
    decay = 1e-4 ** (1.0 / max(int(iters) - 1, 1))
    out = {}
    for D in dims:
        if not is_power_of_two(D):
            raise ValueError(f"study dims must be powers of two, got {D}")
        T, R = int(n_targets), int(restarts)
        targets = rng.uniform(-1.0, 1.0, size=(T, D, D))
        rep = np.repeat(targets, R, axis=0)  # (T*R, D, D)
        signs = rng.integers(0, 2, size=(2, T * R, D)) * 2.0 - 1.0
        state = {
            "s1": signs[0] * (1.0 + 0.01 * rng.standard_normal((T * R, D))),
            "s2": signs[1] * (1.0 + 0.01 * rng.standard_normal((T * R, D))),
            "g": rng.standard_normal((T * R, D)),
        }
        m1 = {k: np.zeros_like(v) for k, v in state.items()}
        m2 = {k: np.zeros_like(v) for k, v in state.items()}
        best = np.full(T, np.inf)
        for t in range(int(iters)):
            tape = ad.Tape()
            leaves = {k: tape.leaf(v) for k, v in state.items()}
            w = build_weight_tape(leaves["s1"], leaves["s2"], leaves["g"])
            err = ad.sub(w, tape.constant(rep))
            sq = ad.mul(err, err).mean(axis=(1, 2))
            best = np.minimum(best, np.sqrt(sq.value).reshape(T, R).min(axis=1))
            ad.backward(tape, sq.sum())
            _adam_step(
                state, {k: leaves[k].grad for k in state}, m1, m2, t, lr * decay**t
            )
        out[D] = best
    return out
