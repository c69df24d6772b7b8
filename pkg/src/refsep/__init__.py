"""Reflection separation toolkit built on a Gaussian mixture patch prior.

A summed image patch y = x1 + x2 of two natural-image patches admits an
exact posterior over the decomposition: if the patch prior is a K-component
GMM, the posterior over x1 given y is a K^2-component GMM whose top-weight
means are good local decomposition candidates. This package trains the
prior, enumerates that posterior, proposes candidates for annotation, and
propagates chosen annotations to a full-image separation by optimizing an
expected patch log likelihood with annotation constraints.
"""

from .errors import InvalidInputError, RefsepError

__all__ = ["InvalidInputError", "RefsepError"]
__version__ = "0.1.0"
