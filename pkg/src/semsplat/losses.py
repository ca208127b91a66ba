"""Training objective: photometric, semantic-distillation and geometry losses.

Every loss returns a ``LossResult`` carrying the scalar, per-view values and
analytic gradients with respect to its prediction inputs.
"""

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .config import default
from .exceptions import DegenerateAlignmentError, DimensionMismatchError
from .gradients import GradientBundle
from .neighbors import NearestNeighborIndex
from .scene import GeometryMask, PredictedPointMap, ReferencePointMap

ZERO_NORM = 1e-12


@dataclass(frozen=True)
class LossWeights:
    lambda_lpips: float = field(default_factory=lambda: default("loss_weights", "lambda_lpips"))
    lambda_sem: float = field(default_factory=lambda: default("loss_weights", "lambda_sem"))
    lambda_geo: float = field(default_factory=lambda: default("loss_weights", "lambda_geo"))
    conf_ratio: float = field(default_factory=lambda: default("loss_weights", "conf_ratio"))

    def __post_init__(self):
        for name in ("lambda_lpips", "lambda_sem", "lambda_geo"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 < self.conf_ratio <= 1.0:
            raise ValueError("conf_ratio must lie in (0, 1]")

    @classmethod
    def from_dict(cls, data):
        known = {"lambda_lpips", "lambda_sem", "lambda_geo", "conf_ratio"}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown loss weight keys: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in data.items()})

    def to_dict(self):
        return {"lambda_lpips": self.lambda_lpips, "lambda_sem": self.lambda_sem,
                "lambda_geo": self.lambda_geo, "conf_ratio": self.conf_ratio}


@dataclass
class LossResult:
    value: float
    per_view: List[float]
    grads: List[np.ndarray]


@dataclass(frozen=True)
class SimilarityTransform:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    @classmethod
    def identity(cls):
        return cls(1.0, np.eye(3), np.zeros(3))

    def apply(self, points):
        return self.scale * (np.asarray(points, dtype=np.float64) @ self.rotation.T) + self.translation

    def vjp(self, grad):
        """Pull a gradient on transformed points back to the inputs."""
        return self.scale * (np.asarray(grad) @ self.rotation)


def _pairs(a, b, what):
    a, b = list(a), list(b)
    if len(a) != len(b) or not a:
        raise DimensionMismatchError(f"{what}: need the same nonzero number of views, got {len(a)} and {len(b)}")
    return a, b


def loss_rgb(rendered, targets, weights: Optional[LossWeights] = None,
             perceptual: Optional[Callable] = None) -> LossResult:
    """Sum over views of the mean absolute error, plus an optional perceptual term.

    ``perceptual(target, rendered)`` must return ``(value, grad_on_rendered)``
    and is weighted by ``lambda_lpips``. Without a hook the term is zero.
    """
    weights = weights or LossWeights()
    rendered, targets = _pairs(rendered, targets, "loss_rgb")
    total, per_view, grads = 0.0, [], []
    for r, t in zip(rendered, targets):
        r, t = np.asarray(r, dtype=np.float64), np.asarray(t, dtype=np.float64)
        if r.shape != t.shape:
            raise DimensionMismatchError(f"loss_rgb: rendered {r.shape} vs target {t.shape}")
        diff = r - t
        value = float(np.mean(np.abs(diff)))
        grad = np.sign(diff) / diff.size
        if perceptual is not None:
            p_val, p_grad = perceptual(t, r)
            value += weights.lambda_lpips * float(p_val)
            grad = grad + weights.lambda_lpips * np.asarray(p_grad)
        per_view.append(value)
        grads.append(grad)
        total += value
    return LossResult(total, per_view, grads)


def loss_sem(decoded, teacher) -> LossResult:
    """Sum over views of ``1 - mean pixel cosine(teacher, decoded)``.

    Pixels whose teacher has norm below 1e-12 carry no supervision and count
    as similarity 1. Pixels where only the decoded vector is that small
    contribute similarity 0.
    """
    decoded, teacher = _pairs(decoded, teacher, "loss_sem")
    total, per_view, grads = 0.0, [], []
    for y, x in zip(decoded, teacher):
        y, x = np.asarray(y, dtype=np.float64), np.asarray(x, dtype=np.float64)
        if y.shape != x.shape:
            raise DimensionMismatchError(f"loss_sem: decoded {y.shape} vs teacher {x.shape}")
        nx2 = np.sum(x * x, axis=-1, keepdims=True)
        ny2 = np.sum(y * y, axis=-1, keepdims=True)
        ok = (np.sqrt(nx2) >= ZERO_NORM) & (np.sqrt(ny2) >= ZERO_NORM)
        # sqrt(nx2 * ny2) keeps cos exactly 1 when x == y
        denom = np.where(ok, np.sqrt(nx2 * ny2), 1.0)
        unsupervised = np.sqrt(nx2) < ZERO_NORM
        cos = np.where(ok, np.sum(x * y, axis=-1, keepdims=True) / denom, np.where(unsupervised, 1.0, 0.0))
        n_pix = cos.size
        value = 1.0 - float(np.sum(cos)) / n_pix
        safe_ny2 = np.where(ok, ny2, 1.0)
        grad = np.where(ok, -(x / denom - cos * y / safe_ny2) / n_pix, 0.0)
        per_view.append(value)
        grads.append(grad)
        total += value
    return LossResult(total, per_view, grads)


def build_confidence_mask(confidence, ratio) -> GeometryMask:
    """Keep the ``ceil(ratio * H * W)`` most confident pixels.

    Ties are broken in favor of the lower row-major pixel index.
    """
    if not 0.0 < ratio <= 1.0:
        raise ValueError("ratio must lie in (0, 1]")
    conf = np.asarray(confidence, dtype=np.float64)
    if conf.ndim == 3 and conf.shape[-1] == 1:
        conf = conf[..., 0]
    n = conf.size
    # guard against ratio * n landing a hair above an integer
    k = min(n, math.ceil(ratio * n - 1e-9))
    order = np.argsort(-conf.ravel(), kind="stable")
    mask = np.zeros(n, dtype=bool)
    mask[order[:k]] = True
    return GeometryMask(mask.reshape(conf.shape), ratio)


def umeyama(source, target) -> SimilarityTransform:
    """Least-squares similarity ``(s, R, t)`` with ``s R x + t ~ y``."""
    X = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    Y = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if X.shape != Y.shape or X.shape[0] < 3:
        raise DegenerateAlignmentError()
    if np.array_equal(X, Y):
        return SimilarityTransform.identity()
    mx, my = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - mx, Y - my
    var_x = np.mean(np.sum(Xc * Xc, axis=1))
    sv_x = np.linalg.svd(Xc, compute_uv=False)
    if var_x <= 0 or sv_x[1] <= 1e-12 * sv_x[0]:
        raise DegenerateAlignmentError()
    cov = Yc.T @ Xc / X.shape[0]
    U, D, Vt = np.linalg.svd(cov)
    S = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2] = -1.0
    R = (U * S) @ Vt
    s = float(np.sum(D * S) / var_x)
    return SimilarityTransform(s, R, my - s * R @ mx)


def chamfer_single(source, target, index: Optional[NearestNeighborIndex] = None):
    """Mean squared distance from each source point to its nearest target.

    Returns ``(value, grad_on_source)``; the gradient holds each nearest
    neighbor fixed.
    """
    S = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    T = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if S.shape[0] == 0 or T.shape[0] == 0:
        raise ValueError("chamfer_single needs nonempty point sets")
    index = index or NearestNeighborIndex(T)
    nn, d2 = index.query(S)
    value = float(np.mean(d2))
    grad = 2.0 * (S - T[nn]) / S.shape[0]
    return value, grad


def loss_geo(pred, ref, weights: Optional[LossWeights] = None) -> LossResult:
    """Confidence-masked, similarity-aligned single-direction Chamfer loss.

    Per view: mask the top ``conf_ratio`` reference pixels, fit a Umeyama
    similarity from masked predicted points onto masked reference points,
    and score the aligned prediction with ``chamfer_single``. The fitted
    transform is a constant in the backward pass.
    """
    weights = weights or LossWeights()
    pred, ref = _pairs(pred, ref, "loss_geo")
    total, per_view, grads = 0.0, [], []
    for p, r in zip(pred, ref):
        p = p if isinstance(p, PredictedPointMap) else PredictedPointMap(p)
        if not isinstance(r, ReferencePointMap):
            raise TypeError("ref entries must be ReferencePointMap")
        if p.points.shape != r.points.shape:
            raise DimensionMismatchError(f"loss_geo: predicted {p.points.shape} vs reference {r.points.shape}")
        mask = build_confidence_mask(r.confidence, weights.conf_ratio).mask
        src, tgt = p.points[mask], r.points[mask]
        sim = umeyama(src, tgt)
        value, g_aligned = chamfer_single(sim.apply(src), tgt)
        grad = np.zeros_like(p.points)
        grad[mask] = sim.vjp(g_aligned)
        per_view.append(value)
        grads.append(grad)
        total += value
    return LossResult(total, per_view, grads)


def _value(x):
    return x.value if isinstance(x, LossResult) else float(x)


def loss_total(l_rgb, l_sem, l_geo, weights: Optional[LossWeights] = None):
    """``L_rgb + lambda_sem * L_sem + lambda_geo * L_geo``.

    Components may be floats or ``LossResult``s. Returns ``(value, grads)``
    where ``grads`` is a GradientBundle with keys ``color``, ``features`` and
    ``points`` for whichever components carried gradients, already weighted.
    """
    weights = weights or LossWeights()
    value = _value(l_rgb) + weights.lambda_sem * _value(l_sem) + weights.lambda_geo * _value(l_geo)
    parts, coefs = [], []
    for name, comp, w in (("color", l_rgb, 1.0), ("features", l_sem, weights.lambda_sem),
                          ("points", l_geo, weights.lambda_geo)):
        if isinstance(comp, LossResult):
            parts.append(GradientBundle({name: comp.grads}))
            coefs.append(w)
    return value, GradientBundle.merge(parts, coefs)
