"""Forward-only miniature of a cross-view transformer front end.

Each view's image is concatenated with an intrinsic embedding, cut into
non-overlapping patches, projected to tokens, given per-patch position
parameters and a shared camera token (appended last). The stack alternates
intra-frame attention (odd layers, within each view) and cross-frame
attention (even layers, over all views' tokens). Every layer is pre-norm
multi-head attention plus an MLP, each with a residual.

All parameters are seeded and frozen. Reductions over feature axes run in a
fixed sequential order and reductions over tokens are sorted first, so each
token's output depends only on its own value and the multiset of tokens it
attends to. That makes view-permutation equivariance hold bit-for-bit.
"""

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .config import default
from .exceptions import DimensionMismatchError
from .scene import Camera

LN_EPS = 1e-6


@dataclass(frozen=True)
class FusionConfig:
    layers: int = 2
    d_t: int = 16
    heads: int = 2
    patch: int = 4
    embed_channels: int = 4
    mlp_ratio: int = 2

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.d_t % self.heads:
            raise ValueError("d_t must be divisible by heads")

    @classmethod
    def full_scale(cls, **kw):
        """Full-scale depth and patch size; still a toy width unless overridden."""
        return cls(layers=default("fusion", "full_scale_layers"), patch=default("fusion", "full_scale_patch"), **kw)


def _dense(x, W, b=None):
    """``x @ W`` accumulated one input feature at a time."""
    acc = x[..., 0, None] * W[0]
    for k in range(1, W.shape[0]):
        acc = acc + x[..., k, None] * W[k]
    return acc if b is None else acc + b


def _seq_sum(x, axis=-1):
    x = np.moveaxis(x, axis, 0)
    acc = x[0]
    for k in range(1, x.shape[0]):
        acc = acc + x[k]
    return acc


def _orderless_sum(x, axis):
    return _seq_sum(np.sort(x, axis=axis), axis=axis)


def _layer_norm(x, gamma, beta):
    d = x.shape[-1]
    mean = _seq_sum(x) / d
    c = x - mean[..., None]
    var = _seq_sum(c * c) / d
    return c / np.sqrt(var + LN_EPS)[..., None] * gamma + beta


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x ** 3)))


def intrinsic_embed(camera: Camera, width, height, projection):
    """Per-pixel ``(height, width, k)`` embedding of normalized intrinsics."""
    vec = np.array([camera.fx / width, camera.fy / height, camera.cx / width, camera.cy / height])
    proj = np.asarray(projection, dtype=np.float64)
    emb = _dense(vec, proj.T)
    return np.broadcast_to(emb, (height, width, proj.shape[0])).copy()


def tokenize(image, patch, projection):
    """Row-major non-overlapping patches, flattened ``(py, px, c)`` and projected."""
    img = np.asarray(image, dtype=np.float64)
    H, W, C = img.shape
    if H % patch or W % patch:
        raise DimensionMismatchError(f"image {H}x{W} is not divisible by patch size {patch}")
    gh, gw = H // patch, W // patch
    patches = img.reshape(gh, patch, gw, patch, C).transpose(0, 2, 1, 3, 4).reshape(gh * gw, -1)
    proj = np.asarray(projection, dtype=np.float64)
    if proj.shape[0] != patches.shape[1]:
        raise DimensionMismatchError(f"projection expects {proj.shape[0]} inputs, patches have {patches.shape[1]}")
    return _dense(patches, proj)


def attention(x, layer, heads):
    """Multi-head self-attention over tokens ``x (T, d)``. Returns ``(out, probs)``."""
    T, d = x.shape
    dh = d // heads
    q = _dense(x, layer["wq"]).reshape(T, heads, dh)
    k = _dense(x, layer["wk"]).reshape(T, heads, dh)
    v = _dense(x, layer["wv"]).reshape(T, heads, dh)
    scores = _seq_sum(q[:, None] * k[None, :]) / np.sqrt(dh)
    e = np.exp(scores - np.max(scores, axis=1, keepdims=True))
    probs = e / _orderless_sum(e, axis=1)[:, None]
    out = _orderless_sum(probs[..., None] * v[None, :], axis=1)
    return _dense(out.reshape(T, d), layer["wo"]), probs


def _block(x, layer, heads):
    h, probs = attention(_layer_norm(x, layer["ln1_g"], layer["ln1_b"]), layer, heads)
    x = x + h
    m = _dense(_gelu(_dense(_layer_norm(x, layer["ln2_g"], layer["ln2_b"]), layer["w1"], layer["b1"])),
               layer["w2"], layer["b2"])
    return x + m, probs


def is_cross_frame(layer_number):
    """Layers are numbered from 1; even layers attend across views."""
    return layer_number % 2 == 0


def fuse(tokens, params, heads, return_attention=False):
    """Run the alternating stack on tokens ``(N, P + 1, d_t)``."""
    x = np.asarray(tokens, dtype=np.float64)
    if x.ndim != 3:
        raise DimensionMismatchError(f"tokens must be (views, tokens, width), got {x.shape}")
    N, T, d = x.shape
    attn = []
    for number, layer in enumerate(params["layers"], start=1):
        if is_cross_frame(number):
            out, probs = _block(x.reshape(N * T, d), layer, heads)
            x = out.reshape(N, T, d)
            attn.append(probs)
        else:
            results = [_block(x[i], layer, heads) for i in range(N)]
            x = np.stack([r[0] for r in results])
            attn.append(np.stack([r[1] for r in results]))
    return (x, attn) if return_attention else x


def self_attention_stack(tokens, params, heads):
    """Every layer as plain self-attention over one token set ``(T, d_t)``."""
    x = np.asarray(tokens, dtype=np.float64)
    for layer in params["layers"]:
        x, _ = _block(x, layer, heads)
    return x


def init_params(cfg: FusionConfig, n_patches, seed=0):
    rng = np.random.default_rng(seed)
    d, hidden = cfg.d_t, cfg.d_t * cfg.mlp_ratio
    in_dim = cfg.patch * cfg.patch * (3 + cfg.embed_channels)

    def mat(rows, cols):
        return rng.normal(0.0, 1.0 / np.sqrt(rows), (rows, cols))

    layers = []
    for _ in range(cfg.layers):
        layers.append({
            "ln1_g": 1.0 + 0.1 * rng.normal(size=d), "ln1_b": 0.1 * rng.normal(size=d),
            "wq": mat(d, d), "wk": mat(d, d), "wv": mat(d, d), "wo": mat(d, d),
            "ln2_g": 1.0 + 0.1 * rng.normal(size=d), "ln2_b": 0.1 * rng.normal(size=d),
            "w1": mat(d, hidden), "b1": 0.1 * rng.normal(size=hidden),
            "w2": mat(hidden, d), "b2": 0.1 * rng.normal(size=d),
        })
    return {
        "intrinsic": rng.normal(0.0, 1.0, (cfg.embed_channels, 4)),
        "patch": mat(in_dim, d),
        "position": 0.1 * rng.normal(size=(n_patches, d)),
        "camera_token": rng.normal(size=d),
        "layers": layers,
    }


class CrossViewFusion(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` seeds parameters for an image size,
    ``transform(images, cameras)`` returns fused tokens ``(N, P + 1, d_t)``."""

    def __init__(self, layers=2, d_t=16, heads=2, patch=4, embed_channels=4, mlp_ratio=2, seed=0):
        self.layers = layers
        self.d_t = d_t
        self.heads = heads
        self.patch = patch
        self.embed_channels = embed_channels
        self.mlp_ratio = mlp_ratio
        self.seed = seed

    @property
    def config(self):
        return FusionConfig(self.layers, self.d_t, self.heads, self.patch, self.embed_channels, self.mlp_ratio)

    def fit(self, images, cameras=None):
        imgs = np.asarray(images, dtype=np.float64)
        H, W = imgs.shape[1:3]
        if H % self.patch or W % self.patch:
            raise DimensionMismatchError(f"image {H}x{W} is not divisible by patch size {self.patch}")
        self.image_shape_ = (H, W)
        self.params_ = init_params(self.config, (H // self.patch) * (W // self.patch), self.seed)
        return self

    def build_tokens(self, images, cameras):
        check_is_fitted(self, "params_")
        imgs = np.asarray(images, dtype=np.float64)
        if imgs.shape[1:3] != self.image_shape_ or len(cameras) != imgs.shape[0]:
            raise DimensionMismatchError("images or cameras do not match the fitted layout")
        p = self.params_
        out = []
        for img, cam in zip(imgs, cameras):
            H, W = img.shape[:2]
            x = np.concatenate([img, intrinsic_embed(cam, W, H, p["intrinsic"])], axis=-1)
            tok = tokenize(x, self.patch, p["patch"]) + p["position"]
            out.append(np.vstack([tok, p["camera_token"]]))
        return np.stack(out)

    def transform(self, images, cameras):
        return fuse(self.build_tokens(images, cameras), self.params_, self.heads)

    def fit_transform(self, images, cameras):
        return self.fit(images, cameras).transform(images, cameras)
