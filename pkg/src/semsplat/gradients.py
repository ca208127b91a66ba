"""``GradientBundle``: a name -> array mapping with parameter-wise arithmetic."""

import numpy as np


class GradientBundle(dict):
    """Gradients keyed by parameter name.

    Values are arrays, or lists of arrays for per-view quantities. Merging
    is a parameter-wise weighted sum, so it is associative and independent of
    merge order up to floating-point addition.
    """

    def scaled(self, weight):
        return GradientBundle({k: _scale(v, weight) for k, v in self.items()})

    def accumulate(self, other, weight=1.0):
        """In-place ``self += weight * other``."""
        for k, v in other.items():
            v = _scale(v, weight)
            self[k] = v if k not in self else _add(self[k], v)
        return self

    @classmethod
    def merge(cls, bundles, weights=None):
        out = cls()
        weights = [1.0] * len(bundles) if weights is None else weights
        for b, w in zip(bundles, weights):
            out.accumulate(b, w)
        return out


def _scale(v, w):
    if isinstance(v, list):
        return [np.asarray(x) * w for x in v]
    return np.asarray(v) * w


def _add(a, b):
    if isinstance(a, list):
        return [x + y for x, y in zip(a, b)]
    return a + b
