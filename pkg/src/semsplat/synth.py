"""Seeded synthetic scenes and self-consistent multi-view supervision bundles."""

import numpy as np

from .bundle import Bundle, View, f32_exact
from .rasterizer import render
from .scene import Camera, GaussianScene, compute_median_depth
from .semantic import FeatureCodec, PrototypeSet, decode_features, encode_features, segment

DEFAULT_SPEC = {
    "gaussians": 10,
    "views": 3,
    "resolution": 48,
    "classes": 4,
    "sem_dim": 64,
    "compressed_dim": 16,
    "seed": 0,
}

SPEC_USAGE = (
    "scene spec JSON keys: gaussians (int, required), views (int, required), "
    "resolution (int >= 8), classes, sem_dim, compressed_dim, seed"
)

LABEL_ALPHA = 0.5


def orthonormal_prototypes(n_classes, dim, rng):
    q, _ = np.linalg.qr(rng.normal(size=(dim, n_classes)))
    return PrototypeSet(f32_exact(q.T), [f"class_{c}" for c in range(n_classes)])


def ring_cameras(n_views, resolution, distance=3.0, spread_deg=25.0, elevation_deg=10.0):
    az = np.deg2rad(np.linspace(-spread_deg, spread_deg, n_views) if n_views > 1 else [0.0])
    el = np.deg2rad(elevation_deg)
    cams = []
    for a in az:
        eye = distance * np.array([np.sin(a) * np.cos(el), -np.sin(el), -np.cos(a) * np.cos(el)])
        cams.append(Camera.look_at(eye, np.zeros(3), resolution, resolution, fx=1.1 * resolution))
    return cams


def random_scene(n, protos: PrototypeSet, compressed_dim, camera, rng):
    """Gaussians in a box around the origin, one class prototype per Gaussian."""
    centers = rng.uniform([-0.7, -0.7, -0.4], [0.7, 0.7, 0.4], size=(n, 3))
    median = compute_median_depth(centers, camera)
    sigma = rng.uniform(0.12, 0.28, size=(n, 3))
    classes = rng.permutation(np.arange(n) % protos.num_classes)
    sem = protos.prototypes[classes] * rng.uniform(0.8, 1.2, size=(n, 1))
    scene = GaussianScene.from_raw(
        centers=centers,
        opacity_raw=rng.uniform(0.5, 2.5, size=n),
        color=rng.uniform(0.05, 0.95, size=(n, 3)),
        scale_raw=np.log(sigma / median),
        rotation_raw=rng.normal(size=(n, 4)),
        sem_feature=sem,
        median_depth=median,
        compressed_dim=compressed_dim,
    )
    return scene, classes


def render_view(scene, codec, camera, protos=None, rng=None, threads=None):
    """Render every map of a view. Confidence is alpha scaled by seeded noise in [0.5, 1]."""
    out = render(scene, camera, threads=threads)
    decoded = decode_features(out.features, codec).data
    points = camera.unproject(out.depth.data)
    view = View(camera=camera, color=out.color.data, features=decoded, depth=out.depth.data,
                alpha=out.alpha.data, points=points)
    if rng is not None:
        view.confidence = out.alpha.data * rng.uniform(0.5, 1.0, size=out.alpha.data.shape)
    if protos is not None:
        _, labels = segment(decoded, protos)
        view.labels = np.where(out.alpha.data > LABEL_ALPHA, labels.data, protos.num_classes)
    return view


def make_synthetic(spec=None, threads=None) -> Bundle:
    """Build a seeded scene, codec, prototypes and rendered ground-truth views.

    All stored quantities are float32-representable so writing the bundle to
    disk loses nothing; re-rendering the scene reproduces the targets exactly.
    """
    cfg = dict(DEFAULT_SPEC)
    cfg.update(spec or {})
    if int(cfg["resolution"]) < 8:
        raise ValueError("resolution must be >= 8")
    rng = np.random.default_rng(int(cfg["seed"]))
    protos = orthonormal_prototypes(int(cfg["classes"]), int(cfg["sem_dim"]), rng)
    cams = ring_cameras(int(cfg["views"]), int(cfg["resolution"]))
    scene, classes = random_scene(int(cfg["gaussians"]), protos, int(cfg["compressed_dim"]), cams[0], rng)
    fitted = FeatureCodec(int(cfg["compressed_dim"])).fit(scene.sem_feature)
    codec = FeatureCodec.from_weights(**{k: f32_exact(v) for k, v in fitted.get_weights().items()})
    scene = encode_features(scene, codec)
    views = [render_view(scene, codec, cam, protos, rng, threads) for cam in cams]
    meta = {k: cfg[k] for k in DEFAULT_SPEC}
    meta["classes_per_gaussian"] = classes.tolist()
    return Bundle(views=views, scene=scene, codec=codec, prototypes=protos, meta=meta)


def perturb_scene(scene: GaussianScene, rng, strength=1.0):
    """Seeded noise on every raw parameter; compressed features are dropped."""
    s = strength
    feat_scale = np.linalg.norm(scene.sem_feature, axis=1, keepdims=True) / np.sqrt(scene.sem_dim)
    return scene.with_raw(
        centers=scene.centers + rng.normal(0.0, 0.05 * s, scene.centers.shape),
        opacity_raw=scene.opacity_raw + rng.normal(0.0, 0.3 * s, scene.opacity_raw.shape),
        color=np.clip(scene.color + rng.normal(0.0, 0.1 * s, scene.color.shape), 0.0, 1.0),
        scale_raw=scene.scale_raw + rng.normal(0.0, 0.15 * s, scene.scale_raw.shape),
        rotation_raw=scene.rotation_raw + rng.normal(0.0, 0.2 * s, scene.rotation_raw.shape),
        sem_feature=scene.sem_feature + feat_scale * rng.normal(0.0, 0.3 * s, scene.sem_feature.shape),
    )
