"""Walsh-Hadamard variational inference.

Structured variational posteriors over linear-layer weights of the form
S1 H diag(g) H S2, where H is a Hadamard matrix applied by the fast
Walsh-Hadamard transform.  The package bundles the transform kernel, a
small reverse-mode autodiff tape, the structured layer with its closed-form
identities, planar-flow posteriors, ELBO training for feed-forward
networks, a random-feature Gaussian process variant, and a command-line
interface.
"""

from .transform import fwht, fwht_batch, fwht_inplace, hadamard_dense, fastfood_sample

__all__ = [
    "fwht",
    "fwht_batch",
    "fwht_inplace",
    "hadamard_dense",
    "fastfood_sample",
]

__version__ = "0.1.0"
