"""Scene, camera, image and point-map value types.

A ``GaussianScene`` stores its primitives column-wise (one array per field)
so that rendering and fitting stay vectorized; ``scene[j]`` gives the
per-primitive view as a ``GaussianPrimitive``. All types are immutable after
construction: arrays are copied and flagged read-only.
"""

from dataclasses import dataclass, field, fields, replace
from typing import Optional, Sequence

import numpy as np

from .exceptions import DimensionMismatchError, NoVisibleGeometryError
from .gaussians import activate_opacity, activate_rotation, activate_scale

NORM_TOL = 1e-9
OPACITY_TOL = 1e-12


def _frozen(a, dtype=np.float64):
    out = np.array(a, dtype=dtype, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class GaussianPrimitive:
    center: np.ndarray
    opacity_raw: Optional[float]
    opacity: float
    color: np.ndarray
    scale_raw: Optional[np.ndarray]
    scale: np.ndarray
    rotation_raw: Optional[np.ndarray]
    rotation: np.ndarray
    sem_feature: np.ndarray
    sem_compressed: Optional[np.ndarray] = None


# Column order of the on-disk record; each entry is (name, width or None for d/d_c).
PRIMITIVE_FIELDS = (
    ("center", 3),
    ("opacity_raw", 1),
    ("opacity", 1),
    ("color", 3),
    ("scale_raw", 3),
    ("scale", 3),
    ("rotation_raw", 4),
    ("rotation", 4),
    ("sem_feature", "d"),
    ("sem_compressed", "d_c"),
)


@dataclass(frozen=True, eq=False)
class GaussianScene:
    """N Gaussian primitives sharing a semantic width and a median depth.

    ``sem_compressed`` is ``None`` until features are encoded by a codec.
    Use :meth:`from_raw` to build a scene whose activated fields are
    consistent with its latents by construction.
    """

    centers: np.ndarray
    opacity_raw: np.ndarray
    opacity: np.ndarray
    color: np.ndarray
    scale_raw: np.ndarray
    scale: np.ndarray
    rotation_raw: np.ndarray
    rotation: np.ndarray
    sem_feature: np.ndarray
    median_depth: float
    compressed_dim: int
    sem_compressed: Optional[np.ndarray] = None

    def __post_init__(self):
        n = np.shape(self.centers)[0] if np.ndim(self.centers) else 0
        shapes = {
            "centers": (n, 3), "opacity_raw": (n,), "opacity": (n,), "color": (n, 3),
            "scale_raw": (n, 3), "scale": (n, 3), "rotation_raw": (n, 4), "rotation": (n, 4),
        }
        for name, shape in shapes.items():
            arr = _frozen(np.reshape(getattr(self, name), shape))
            object.__setattr__(self, name, arr)
        sem = np.asarray(self.sem_feature, dtype=np.float64)
        if sem.ndim != 2 or sem.shape[0] != n:
            raise DimensionMismatchError(f"sem_feature must have shape (N, d), got {sem.shape}")
        object.__setattr__(self, "sem_feature", _frozen(sem))
        object.__setattr__(self, "compressed_dim", int(self.compressed_dim))
        object.__setattr__(self, "median_depth", float(self.median_depth))
        if self.sem_compressed is not None:
            comp = np.asarray(self.sem_compressed, dtype=np.float64)
            if comp.shape != (n, self.compressed_dim):
                raise DimensionMismatchError(
                    f"sem_compressed must have shape ({n}, {self.compressed_dim}), got {comp.shape}")
            object.__setattr__(self, "sem_compressed", _frozen(comp))

    @classmethod
    def from_raw(cls, centers, opacity_raw, color, scale_raw, rotation_raw, sem_feature,
                 median_depth, compressed_dim, sem_compressed=None):
        opacity_raw = np.asarray(opacity_raw, dtype=np.float64)
        rotation_raw = np.asarray(rotation_raw, dtype=np.float64).reshape(-1, 4)
        return cls(
            centers=centers,
            opacity_raw=opacity_raw,
            opacity=activate_opacity(opacity_raw),
            color=color,
            scale_raw=scale_raw,
            scale=activate_scale(scale_raw, median_depth),
            rotation_raw=rotation_raw,
            rotation=activate_rotation(rotation_raw) if len(rotation_raw) else rotation_raw,
            sem_feature=sem_feature,
            median_depth=median_depth,
            compressed_dim=compressed_dim,
            sem_compressed=sem_compressed,
        )

    @classmethod
    def from_primitives(cls, primitives: Sequence[GaussianPrimitive], median_depth,
                        sem_dim=None, compressed_dim=None):
        """Stack primitives into a scene. Missing raw fields become NaN."""
        prims = list(primitives)
        if not prims:
            if sem_dim is None or compressed_dim is None:
                raise ValueError("empty scene needs explicit sem_dim and compressed_dim")
            return cls.empty(sem_dim, compressed_dim, median_depth)

        def col(name, width):
            rows = []
            for p in prims:
                v = getattr(p, name)
                rows.append(np.full(width, np.nan) if v is None else np.ravel(v))
            return np.array(rows, dtype=np.float64)

        sem = np.array([np.ravel(p.sem_feature) for p in prims], dtype=np.float64)
        comps = [p.sem_compressed for p in prims]
        if all(c is None for c in comps):
            comp = None
            d_c = compressed_dim if compressed_dim is not None else sem.shape[1]
        elif any(c is None for c in comps):
            raise ValueError("either all or no primitives may carry compressed features")
        else:
            comp = np.array([np.ravel(c) for c in comps], dtype=np.float64)
            d_c = comp.shape[1]
        return cls(
            centers=col("center", 3), opacity_raw=col("opacity_raw", 1)[:, 0],
            opacity=col("opacity", 1)[:, 0], color=col("color", 3),
            scale_raw=col("scale_raw", 3), scale=col("scale", 3),
            rotation_raw=col("rotation_raw", 4), rotation=col("rotation", 4),
            sem_feature=sem, median_depth=median_depth, compressed_dim=d_c,
            sem_compressed=comp,
        )

    @classmethod
    def empty(cls, sem_dim, compressed_dim, median_depth=1.0):
        z = np.zeros
        return cls(z((0, 3)), z(0), z(0), z((0, 3)), z((0, 3)), z((0, 3)), z((0, 4)),
                   z((0, 4)), z((0, sem_dim)), median_depth, compressed_dim,
                   sem_compressed=z((0, compressed_dim)))

    def __len__(self):
        return self.centers.shape[0]

    def __getitem__(self, j) -> GaussianPrimitive:
        comp = None if self.sem_compressed is None else self.sem_compressed[j]
        return GaussianPrimitive(
            center=self.centers[j], opacity_raw=float(self.opacity_raw[j]),
            opacity=float(self.opacity[j]), color=self.color[j],
            scale_raw=self.scale_raw[j], scale=self.scale[j],
            rotation_raw=self.rotation_raw[j], rotation=self.rotation[j],
            sem_feature=self.sem_feature[j], sem_compressed=comp,
        )

    @property
    def primitives(self):
        return [self[j] for j in range(len(self))]

    @property
    def sem_dim(self):
        return self.sem_feature.shape[1]

    def with_compressed(self, sem_compressed):
        comp = np.asarray(sem_compressed, dtype=np.float64)
        return replace(self, sem_compressed=comp, compressed_dim=comp.shape[1])

    def with_raw(self, sem_compressed=None, **raw):
        """Rebuild from raw latents, overriding any of
        ``centers, opacity_raw, color, scale_raw, rotation_raw, sem_feature``.

        Compressed features are dropped unless passed explicitly.
        """
        kw = dict(centers=self.centers, opacity_raw=self.opacity_raw, color=self.color,
                  scale_raw=self.scale_raw, rotation_raw=self.rotation_raw,
                  sem_feature=self.sem_feature)
        unknown = set(raw) - set(kw)
        if unknown:
            raise TypeError(f"not raw scene fields: {sorted(unknown)}")
        kw.update(raw)
        return GaussianScene.from_raw(median_depth=self.median_depth,
                                      compressed_dim=self.compressed_dim,
                                      sem_compressed=sem_compressed, **kw)

    def permuted(self, order):
        order = np.asarray(order)
        kw = {}
        for f in fields(self):
            v = getattr(self, f.name)
            kw[f.name] = v[order] if isinstance(v, np.ndarray) else v
        return GaussianScene(**kw)


def validate_scene(scene: GaussianScene):
    """Return a list of human-readable invariant violations (empty when valid)."""
    problems = []
    if not (np.isfinite(scene.median_depth) and scene.median_depth > 0):
        problems.append(f"scene: median_depth must be > 0 (got {scene.median_depth})")
    if scene.compressed_dim > scene.sem_dim:
        problems.append(f"scene: compressed_dim {scene.compressed_dim} exceeds sem_dim {scene.sem_dim}")
    for j in range(len(scene)):
        op, op_raw = scene.opacity[j], scene.opacity_raw[j]
        if not (0.0 <= op <= 1.0):
            problems.append(f"primitive {j}: opacity {op} outside [0, 1]")
        elif np.isfinite(op_raw) and abs(activate_opacity(op_raw) - op) > OPACITY_TOL:
            problems.append(f"primitive {j}: opacity {op} != sigmoid(opacity_raw)")
        if not np.all(scene.scale[j] > 0):
            problems.append(f"primitive {j}: scale must be componentwise positive, got {scene.scale[j].tolist()}")
        qn = np.linalg.norm(scene.rotation[j])
        if not abs(qn - 1.0) <= NORM_TOL:
            problems.append(f"primitive {j}: rotation quaternion norm {qn} != 1")
        for name in ("centers", "color", "sem_feature"):
            if not np.all(np.isfinite(getattr(scene, name)[j])):
                problems.append(f"primitive {j}: non-finite {name}")
    return problems


@dataclass(frozen=True, eq=False)
class Camera:
    """Pinhole camera with a world-to-camera pose ``x_cam = R x_world + t``.

    Camera axes: x right, y down, z forward; pixel ``(u, v)`` sits at column
    ``u``, row ``v``.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for name in ("fx", "fy", "cx", "cy"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        R = _frozen(np.reshape(self.rotation, (3, 3)))
        t = _frozen(np.reshape(self.translation, (3,)))
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("camera focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("camera width and height must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("camera principal point must lie inside the image")
        if np.max(np.abs(R.T @ R - np.eye(3))) >= 1e-9 or abs(np.linalg.det(R) - 1) > 1e-9:
            raise ValueError("camera rotation must be orthonormal with det +1")

    @classmethod
    def look_at(cls, eye, target, width, height, fx, fy=None, up=(0.0, -1.0, 0.0)):
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        # re-orthonormalize so the 1e-9 invariant holds exactly enough
        u, _, vt = np.linalg.svd(R)
        R = u @ vt
        return cls(fx=fx, fy=fx if fy is None else fy, cx=width / 2, cy=height / 2,
                   width=width, height=height, rotation=R, translation=-R @ eye)

    def to_camera(self, points):
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def pixel_rays(self):
        """Camera-space rays ``(H, W, 3)`` with unit z for every pixel center."""
        v, u = np.mgrid[0:self.height, 0:self.width].astype(np.float64)
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], -1)

    def unproject(self, depth):
        """World points for a per-pixel z-depth map ``(H, W)`` or ``(H, W, 1)``."""
        depth = np.asarray(depth, dtype=np.float64).reshape(self.height, self.width, 1)
        cam = self.pixel_rays() * depth
        return (cam - self.translation) @ self.rotation

    def unproject_vjp(self, grad_points):
        """Gradient on the depth map given dL/d(world points)."""
        return np.sum((grad_points @ self.rotation.T) * self.pixel_rays(), axis=-1, keepdims=True)


@dataclass(frozen=True, eq=False)
class ImageBuffer:
    """Dense ``(height, width, channels)`` float map."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float64)
        if a.ndim == 2:
            a = a[..., None]
        if a.ndim != 3:
            raise DimensionMismatchError(f"image data must be (H, W, C), got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError("image data must be finite")
        object.__setattr__(self, "data", _frozen(a))

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)


@dataclass(frozen=True, eq=False)
class ReferencePointMap:
    points: np.ndarray
    confidence: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64)
        c = np.asarray(self.confidence, dtype=np.float64)
        if c.ndim == 3 and c.shape[-1] == 1:
            c = c[..., 0]
        if p.ndim != 3 or p.shape[-1] != 3 or c.shape != p.shape[:2]:
            raise DimensionMismatchError(
                f"points (H, W, 3) and confidence (H, W) disagree: {p.shape} vs {c.shape}")
        if not np.all(np.isfinite(c)) or np.any(c < 0):
            raise ValueError("confidence must be finite and non-negative")
        object.__setattr__(self, "points", _frozen(p))
        object.__setattr__(self, "confidence", _frozen(c))

    @property
    def height(self):
        return self.points.shape[0]

    @property
    def width(self):
        return self.points.shape[1]


@dataclass(frozen=True, eq=False)
class PredictedPointMap:
    points: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64)
        if p.ndim != 3 or p.shape[-1] != 3:
            raise DimensionMismatchError(f"points must be (H, W, 3), got {p.shape}")
        if not np.all(np.isfinite(p)):
            raise ValueError("predicted points must be finite")
        object.__setattr__(self, "points", _frozen(p))

    @property
    def height(self):
        return self.points.shape[0]

    @property
    def width(self):
        return self.points.shape[1]


@dataclass(frozen=True, eq=False)
class GeometryMask:
    mask: np.ndarray
    ratio: float

    def __post_init__(self):
        object.__setattr__(self, "mask", _frozen(self.mask, dtype=bool))
        if not 0.0 < self.ratio <= 1.0:
            raise ValueError("mask ratio must lie in (0, 1]")

    @property
    def count(self):
        return int(self.mask.sum())


def compute_median_depth(centers, camera: Camera):
    """Median camera-space z over the centers in front of the camera."""
    z = camera.to_camera(np.reshape(centers, (-1, 3)))[:, 2]
    z = z[z > 0]
    if z.size == 0:
        raise NoVisibleGeometryError()
    # np.median averages the two middle order statistics for even counts
    return float(np.median(z))
