"""Semantic feature codec and prototype-based open-vocabulary segmentation."""

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import DimensionMismatchError
from .gradients import GradientBundle
from .scene import GaussianScene, ImageBuffer

ZERO_NORM = 1e-12


class FeatureCodec(TransformerMixin, BaseEstimator):
    """Affine autoencoder between d-dim semantic features and d_c-dim codes.

    ``transform`` encodes (``enc_weight_ @ f + enc_bias_``) and
    ``inverse_transform`` decodes (``dec_weight_ @ z + dec_bias_``). ``fit``
    initializes both sides from an uncentered SVD of the training features,
    so the codec reproduces anything inside the fitted subspace and zero
    maps to zero.

    Parameters
    ----------
    n_components : int
        Code width d_c.
    """

    def __init__(self, n_components=16):
        self.n_components = n_components

    def fit(self, X, y=None):
        X = _as_matrix(X, "features")
        k = self.n_components
        if k > X.shape[1]:
            raise DimensionMismatchError(f"n_components={k} exceeds feature dim {X.shape[1]}")
        _, _, vt = np.linalg.svd(X, full_matrices=True)
        basis = vt[:k]
        self.enc_weight_ = basis.copy()
        self.enc_bias_ = np.zeros(k)
        self.dec_weight_ = basis.T.copy()
        self.dec_bias_ = np.zeros(X.shape[1])
        return self

    @classmethod
    def from_weights(cls, enc_weight, enc_bias, dec_weight, dec_bias):
        enc_weight = np.asarray(enc_weight, dtype=np.float64)
        dec_weight = np.asarray(dec_weight, dtype=np.float64)
        codec = cls(n_components=enc_weight.shape[0])
        codec.enc_weight_ = enc_weight
        codec.enc_bias_ = np.asarray(enc_bias, dtype=np.float64).reshape(enc_weight.shape[0])
        codec.dec_weight_ = dec_weight
        codec.dec_bias_ = np.asarray(dec_bias, dtype=np.float64).reshape(dec_weight.shape[0])
        if dec_weight.shape != enc_weight.shape[::-1]:
            raise DimensionMismatchError(
                f"decoder {dec_weight.shape} is not the transpose shape of encoder {enc_weight.shape}")
        return codec

    @property
    def sem_dim(self):
        check_is_fitted(self, "enc_weight_")
        return self.enc_weight_.shape[1]

    @property
    def compressed_dim(self):
        check_is_fitted(self, "enc_weight_")
        return self.enc_weight_.shape[0]

    def get_weights(self):
        check_is_fitted(self, "enc_weight_")
        return {"enc_weight": self.enc_weight_, "enc_bias": self.enc_bias_,
                "dec_weight": self.dec_weight_, "dec_bias": self.dec_bias_}

    def with_weights(self, **weights):
        w = {k: v.copy() for k, v in self.get_weights().items()}
        w.update(weights)
        return FeatureCodec.from_weights(**w)

    def transform(self, X):
        check_is_fitted(self, "enc_weight_")
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.sem_dim:
            raise DimensionMismatchError(f"expected {self.sem_dim} feature channels, got {X.shape[-1]}")
        return X @ self.enc_weight_.T + self.enc_bias_

    def inverse_transform(self, Z):
        check_is_fitted(self, "enc_weight_")
        Z = np.asarray(Z, dtype=np.float64)
        if Z.shape[-1] != self.compressed_dim:
            raise DimensionMismatchError(f"expected {self.compressed_dim} code channels, got {Z.shape[-1]}")
        return Z @ self.dec_weight_.T + self.dec_bias_


def _as_matrix(X, name):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise DimensionMismatchError(f"{name} must be 2-D, got shape {X.shape}")
    return X


def encode_features(scene: GaussianScene, codec: FeatureCodec) -> GaussianScene:
    if codec.sem_dim != scene.sem_dim:
        raise DimensionMismatchError(f"codec expects d={codec.sem_dim}, scene has d={scene.sem_dim}")
    return scene.with_compressed(codec.transform(scene.sem_feature))


def decode_features(rendered, codec: FeatureCodec) -> ImageBuffer:
    data = np.asarray(rendered, dtype=np.float64)
    if data.ndim != 3 or data.shape[-1] != codec.compressed_dim:
        raise DimensionMismatchError(
            f"rendered features need {codec.compressed_dim} channels, got shape {data.shape}")
    return ImageBuffer(codec.inverse_transform(data))


def codec_gradients(codec: FeatureCodec, codes, upstream) -> GradientBundle:
    """Backward through the decoder.

    ``codes`` are the decoder inputs (``(..., d_c)``), ``upstream`` the
    gradient on its outputs (``(..., d)``). Returns gradients for
    ``dec_weight``, ``dec_bias`` and the inputs (key ``codes``).
    """
    Z = np.asarray(codes, dtype=np.float64)
    G = np.asarray(upstream, dtype=np.float64)
    if Z.shape[:-1] != G.shape[:-1] or Z.shape[-1] != codec.compressed_dim or G.shape[-1] != codec.sem_dim:
        raise DimensionMismatchError(f"codes {Z.shape} and upstream {G.shape} do not match the codec")
    Zf, Gf = Z.reshape(-1, Z.shape[-1]), G.reshape(-1, G.shape[-1])
    return GradientBundle(dec_weight=Gf.T @ Zf, dec_bias=Gf.sum(axis=0), codes=G @ codec.dec_weight_)


def encoder_gradients(codec: FeatureCodec, features, upstream) -> GradientBundle:
    """Backward through the encoder: keys ``enc_weight``, ``enc_bias``, ``features``."""
    F = np.asarray(features, dtype=np.float64)
    G = np.asarray(upstream, dtype=np.float64)
    if F.shape[:-1] != G.shape[:-1] or F.shape[-1] != codec.sem_dim or G.shape[-1] != codec.compressed_dim:
        raise DimensionMismatchError(f"features {F.shape} and upstream {G.shape} do not match the codec")
    Ff, Gf = F.reshape(-1, F.shape[-1]), G.reshape(-1, G.shape[-1])
    return GradientBundle(enc_weight=Gf.T @ Ff, enc_bias=Gf.sum(axis=0), features=G @ codec.enc_weight_)


@dataclass(frozen=True, eq=False)
class PrototypeSet:
    prototypes: np.ndarray
    labels: Sequence[str]

    def __post_init__(self):
        P = np.array(self.prototypes, dtype=np.float64)
        if P.ndim != 2 or P.shape[0] < 1:
            raise ValueError("prototypes must be a non-empty (N_C, d) matrix")
        if np.any(np.linalg.norm(P, axis=1) <= ZERO_NORM):
            raise ValueError("every prototype needs a nonzero norm")
        if len(self.labels) != P.shape[0]:
            raise ValueError(f"{len(self.labels)} labels for {P.shape[0]} prototypes")
        P.flags.writeable = False
        object.__setattr__(self, "prototypes", P)
        object.__setattr__(self, "labels", tuple(self.labels))

    @property
    def num_classes(self):
        return self.prototypes.shape[0]

    @property
    def dim(self):
        return self.prototypes.shape[1]


def cosine_similarity(features, prototypes):
    """``(..., N_C)`` cosine similarities; rows with ~zero norm give zeros."""
    F = np.asarray(features, dtype=np.float64)
    P = np.asarray(prototypes, dtype=np.float64)
    fn = np.linalg.norm(F, axis=-1, keepdims=True)
    pn = np.linalg.norm(P, axis=-1)
    safe = np.where(fn > ZERO_NORM, fn, 1.0)
    sim = (F / safe) @ (P / pn[:, None]).T
    return np.where(fn > ZERO_NORM, sim, 0.0), fn[..., 0] > ZERO_NORM


def _softmax(x, axis=-1):
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


class PrototypeSegmenter(BaseEstimator):
    """Per-pixel classifier scoring features against text prototypes.

    ``predict_proba`` returns the softmax over cosine similarities (divided
    by ``temperature``); ``predict`` returns the argmax, or ``N_C`` (void)
    where the feature vector is zero.
    """

    def __init__(self, temperature=1.0):
        self.temperature = temperature

    def fit(self, prototypes, labels=None):
        if isinstance(prototypes, PrototypeSet):
            self.prototypes_ = prototypes
        else:
            P = np.asarray(prototypes, dtype=np.float64)
            names = labels if labels is not None else [f"class_{i}" for i in range(P.shape[0])]
            self.prototypes_ = PrototypeSet(P, names)
        self.classes_ = np.arange(self.prototypes_.num_classes)
        return self

    @property
    def void_label(self):
        check_is_fitted(self, "prototypes_")
        return self.prototypes_.num_classes

    def _similarity(self, X):
        check_is_fitted(self, "prototypes_")
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.prototypes_.dim:
            raise DimensionMismatchError(
                f"features have {X.shape[-1]} channels, prototypes have {self.prototypes_.dim}")
        return cosine_similarity(X, self.prototypes_.prototypes)

    def predict_proba(self, X):
        sim, _ = self._similarity(X)
        return _softmax(sim / self.temperature)

    def predict(self, X):
        sim, valid = self._similarity(X)
        return np.where(valid, np.argmax(sim, axis=-1), self.void_label)


def segment(decoded, protos: PrototypeSet, temperature=1.0):
    """Segment a decoded ``(H, W, d)`` feature map.

    Returns ``(probabilities, labels)`` as ImageBuffers with ``N_C`` and 1
    channels; void pixels carry label ``N_C``.
    """
    seg = PrototypeSegmenter(temperature=temperature).fit(protos)
    data = np.asarray(decoded, dtype=np.float64)
    return ImageBuffer(seg.predict_proba(data)), ImageBuffer(seg.predict(data)[..., None].astype(np.float64))
