"""Per-scene fitting: render, score, backpropagate and take Adam steps."""

import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .bundle import View
from .exceptions import NonFiniteLossError
from .gradients import GradientBundle
from .losses import LossWeights, loss_geo, loss_rgb, loss_sem, loss_total
from .optim import AdamState, adam_step
from .rasterizer import render, render_backward
from .scene import GaussianScene, ReferencePointMap
from .semantic import FeatureCodec, codec_gradients, decode_features, encode_features, encoder_gradients

GEOMETRY = ("centers", "opacity_raw", "color", "scale_raw", "rotation_raw")
SEMANTIC = ("sem_feature",)
CODEC = ("enc_weight", "enc_bias", "dec_weight", "dec_bias")
GROUPS = {"geometry": GEOMETRY, "semantic": SEMANTIC, "codec": CODEC}


@dataclass(frozen=True)
class FitConfig:
    iterations: int = 500
    lr: float = 0.01
    weights: LossWeights = field(default_factory=LossWeights)
    trainable: tuple = ("geometry", "semantic", "codec")
    seed: int = 0
    threads: Optional[int] = None

    def __post_init__(self):
        if int(self.iterations) < 1:
            raise ValueError("iterations must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        unknown = set(self.trainable) - set(GROUPS)
        if unknown:
            raise ValueError(f"unknown parameter groups: {sorted(unknown)}")

    @property
    def trainable_names(self):
        return [n for g in self.trainable for n in GROUPS[g]]


@dataclass
class FitResult:
    scene: GaussianScene
    codec: FeatureCodec
    trace: List[Dict[str, float]]
    final_losses: Dict[str, float]
    seconds: float = 0.0


def _check_finite(named):
    for name, arr in named:
        if not np.all(np.isfinite(arr)):
            raise NonFiniteLossError(f"non-finite values in {name}")


def evaluate(scene: GaussianScene, codec: FeatureCodec, views: Sequence[View],
             weights: LossWeights, threads=None, backward=False):
    """Total loss over all views; optionally the gradients of every parameter.

    Returns ``(losses, grads)`` where ``losses`` has keys ``total, rgb, sem, geo``
    and ``grads`` (or ``None``) maps parameter names to arrays.
    """
    scene = encode_features(scene, codec)
    outs = [render(scene, v.camera, threads=threads) for v in views]
    decoded = [decode_features(o.features, codec).data for o in outs]
    points = [v.camera.unproject(o.depth.data) for v, o in zip(views, outs)]
    l_rgb = loss_rgb([o.color.data for o in outs], [v.color for v in views], weights)
    l_sem = loss_sem(decoded, [v.features for v in views])
    l_geo = loss_geo(points, [ReferencePointMap(v.points, v.confidence) for v in views], weights)
    total, g = loss_total(l_rgb, l_sem, l_geo, weights)
    losses = {"total": total, "rgb": l_rgb.value, "sem": l_sem.value, "geo": l_geo.value}
    _check_finite([(f"loss '{k}'", losses[k]) for k in ("rgb", "sem", "geo", "total")])
    if not backward:
        return losses, None

    acc = GradientBundle()
    for i, (view, out) in enumerate(zip(views, outs)):
        dec = codec_gradients(codec, out.features.data, g["features"][i])
        upstream = {"color": g["color"][i], "features": dec["codes"],
                    "depth": view.camera.unproject_vjp(g["points"][i])}
        acc.accumulate(GradientBundle(dec_weight=dec["dec_weight"], dec_bias=dec["dec_bias"]))
        acc.accumulate(render_backward(scene, view.camera, upstream, threads=threads))
    enc = encoder_gradients(codec, scene.sem_feature, acc.pop("sem_compressed"))
    acc.update(enc_weight=enc["enc_weight"], enc_bias=enc["enc_bias"], sem_feature=enc["features"])
    _check_finite([(f"gradient '{k}'", v) for k, v in acc.items()])
    return losses, dict(acc)


def _params(scene: GaussianScene, codec: FeatureCodec):
    p = {n: np.array(getattr(scene, n)) for n in GEOMETRY + SEMANTIC}
    p.update(codec.get_weights())
    return p


def _rebuild(scene: GaussianScene, codec: FeatureCodec, params):
    params = dict(params)
    params["color"] = np.clip(params["color"], 0.0, 1.0)
    new_scene = scene.with_raw(**{n: params[n] for n in GEOMETRY + SEMANTIC})
    new_codec = codec.with_weights(**{n: params[n] for n in CODEC})
    return new_scene, new_codec


def fit_scene(init: GaussianScene, views: Sequence[View], cfg: FitConfig,
              codec: FeatureCodec) -> FitResult:
    """Adam on the trainable parameter groups for ``cfg.iterations`` steps.

    ``trace[k]`` holds the losses before step ``k``; ``final_losses`` are
    measured on the returned scene. Colors are clipped to [0, 1] after every
    step. The loop is deterministic for given inputs.
    """
    if not views:
        raise ValueError("fit_scene needs at least one view")
    start = time.perf_counter()
    scene, state = init, AdamState(lr=cfg.lr)
    names = cfg.trainable_names
    trace = []
    for _ in range(int(cfg.iterations)):
        losses, grads = evaluate(scene, codec, views, cfg.weights, cfg.threads, backward=True)
        trace.append(losses)
        params = _params(scene, codec)
        params, state = adam_step(state, params, {n: grads[n] for n in names})
        scene, codec = _rebuild(scene, codec, params)
    final, _ = evaluate(scene, codec, views, cfg.weights, cfg.threads)
    return FitResult(encode_features(scene, codec), codec, trace, final, time.perf_counter() - start)


class SceneFitter(BaseEstimator):
    """Estimator wrapper around ``fit_scene``.

    ``fit(views, init_scene, codec)`` stores ``scene_``, ``codec_`` and
    ``trace_``; ``predict(camera)`` renders the fitted scene.
    """

    def __init__(self, iterations=500, lr=0.01, lambda_sem=None, lambda_geo=None,
                 conf_ratio=None, trainable=("geometry", "semantic", "codec"), seed=0, threads=None):
        self.iterations = iterations
        self.lr = lr
        self.lambda_sem = lambda_sem
        self.lambda_geo = lambda_geo
        self.conf_ratio = conf_ratio
        self.trainable = trainable
        self.seed = seed
        self.threads = threads

    def _config(self):
        overrides = {k: getattr(self, k) for k in ("lambda_sem", "lambda_geo", "conf_ratio")
                     if getattr(self, k) is not None}
        return FitConfig(self.iterations, self.lr, LossWeights.from_dict(overrides),
                         tuple(self.trainable), self.seed, self.threads)

    def fit(self, views, init_scene, codec):
        res = fit_scene(init_scene, list(views), self._config(), codec)
        self.scene_, self.codec_, self.trace_ = res.scene, res.codec, res.trace
        self.final_losses_ = res.final_losses
        return self

    def predict(self, camera):
        check_is_fitted(self, "scene_")
        return render(self.scene_, camera, threads=self.threads)
