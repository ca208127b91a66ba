"""Multi-view bundles: a directory of per-view maps plus optional scene, codec and prototypes.

Layout::

    manifest.json            {"views": n, "width", "height", ...}
    scene.sgs                optional
    codec/manifest.json      optional, with enc/dec weight and bias FMAPs
    prototypes.json/.fmap    optional
    view_000/camera.json, color.fmap, color.ppm, features.fmap, depth.fmap,
             alpha.fmap, points.fmap, confidence.fmap, labels.fmap
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .exceptions import FormatError
from .io import load_camera, load_scene, read_fmap, save_camera, save_scene, write_fmap, write_ppm
from .scene import Camera, GaussianScene, ReferencePointMap
from .semantic import FeatureCodec, PrototypeSet

_MAPS = ("color", "features", "depth", "alpha", "points", "confidence", "labels")
_CODEC_BLOCKS = ("enc_weight", "enc_bias", "dec_weight", "dec_bias")


@dataclass
class View:
    """One camera with its supervision and evaluation maps (all ``(H, W, C)``)."""

    camera: Camera
    color: Optional[np.ndarray] = None
    features: Optional[np.ndarray] = None
    depth: Optional[np.ndarray] = None
    alpha: Optional[np.ndarray] = None
    points: Optional[np.ndarray] = None
    confidence: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None

    @property
    def reference(self):
        return ReferencePointMap(self.points, self.confidence)


@dataclass
class Bundle:
    views: List[View]
    scene: Optional[GaussianScene] = None
    codec: Optional[FeatureCodec] = None
    prototypes: Optional[PrototypeSet] = None
    meta: dict = field(default_factory=dict)


def save_codec(directory, codec: FeatureCodec):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    blocks = {}
    for name, arr in codec.get_weights().items():
        write_fmap(d / f"{name}.fmap", np.atleast_2d(arr))
        blocks[name] = f"{name}.fmap"
    manifest = {"sem_dim": codec.sem_dim, "compressed_dim": codec.compressed_dim, "blocks": blocks}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_codec(directory) -> FeatureCodec:
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
        blocks = {k: read_fmap(d / manifest["blocks"][k])[..., 0] for k in _CODEC_BLOCKS}
    except (KeyError, json.JSONDecodeError) as exc:
        raise FormatError(d / "manifest.json", f"invalid codec manifest: {exc}") from None
    return FeatureCodec.from_weights(blocks["enc_weight"], blocks["enc_bias"].ravel(),
                                     blocks["dec_weight"], blocks["dec_bias"].ravel())


def save_prototypes(directory, protos: PrototypeSet):
    d = Path(directory)
    (d / "prototypes.json").write_text(json.dumps({"labels": list(protos.labels), "dim": protos.dim}))
    write_fmap(d / "prototypes.fmap", protos.prototypes)


def load_prototypes(path) -> PrototypeSet:
    """Load from a bundle directory or from the ``prototypes.json`` file itself."""
    p = Path(path)
    meta_path = p / "prototypes.json" if p.is_dir() else p
    try:
        meta = json.loads(meta_path.read_text())
        labels, dim = meta["labels"], int(meta["dim"])
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise FormatError(meta_path, f"invalid prototype manifest: {exc}") from None
    mat = read_fmap(meta_path.with_suffix(".fmap"))[..., 0]
    if mat.shape != (len(labels), dim):
        raise FormatError(meta_path, f"prototype matrix {mat.shape} disagrees with {len(labels)} labels x dim {dim}")
    return PrototypeSet(mat, labels)


def save_bundle(directory, bundle: Bundle):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    first = bundle.views[0].camera if bundle.views else None
    manifest = dict(bundle.meta)
    manifest.update(views=len(bundle.views),
                    width=None if first is None else first.width,
                    height=None if first is None else first.height)
    if bundle.scene is not None:
        save_scene(d / "scene.sgs", bundle.scene)
    if bundle.codec is not None:
        save_codec(d / "codec", bundle.codec)
    if bundle.prototypes is not None:
        save_prototypes(d, bundle.prototypes)
    for i, view in enumerate(bundle.views):
        vd = d / f"view_{i:03d}"
        vd.mkdir(exist_ok=True)
        save_camera(vd / "camera.json", view.camera)
        for name in _MAPS:
            arr = getattr(view, name)
            if arr is not None:
                write_fmap(vd / f"{name}.fmap", arr)
        if view.color is not None:
            write_ppm(vd / "color.ppm", view.color)
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_bundle(directory) -> Bundle:
    d = Path(directory)
    mpath = d / "manifest.json"
    if not mpath.exists():
        raise FormatError(mpath, "bundle manifest not found")
    try:
        meta = json.loads(mpath.read_text())
        n = int(meta["views"])
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise FormatError(mpath, f"invalid bundle manifest: {exc}") from None
    views = []
    for i in range(n):
        vd = d / f"view_{i:03d}"
        maps = {name: read_fmap(vd / f"{name}.fmap") for name in _MAPS if (vd / f"{name}.fmap").exists()}
        views.append(View(camera=load_camera(vd / "camera.json"), **maps))
    return Bundle(
        views=views,
        scene=load_scene(d / "scene.sgs") if (d / "scene.sgs").exists() else None,
        codec=load_codec(d / "codec") if (d / "codec").exists() else None,
        prototypes=load_prototypes(d) if (d / "prototypes.json").exists() else None,
        meta=meta,
    )


def f32_exact(a):
    """Round to the nearest float32 so FMAP round-trips are lossless."""
    return np.asarray(a, dtype=np.float64).astype(np.float32).astype(np.float64)
