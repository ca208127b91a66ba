"""Tile-based alpha-compositing rasterizer with an analytic backward pass.

Forward, per pixel: visible splats sorted front-to-back by the camera-space z
of their centers (ties by primitive index); effective alpha
``a = min(0.99, opacity * G)``; splats with ``a < 1/255`` are skipped;
weights ``a * T`` blend color, compressed features and depth; a pixel stops
accumulating once its transmittance falls below 1e-4. Background is zero and
the alpha channel is ``1 - T_final``.

Pixel ``(u, v)`` is evaluated at integer coordinates, so a point on the
optical axis lands exactly on the pixel at the principal point.
"""

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .exceptions import DimensionMismatchError, FeaturesNotCompressedError
from .gaussians import build_covariance, covariance_vjp, rotation_vjp
from .gradients import GradientBundle
from .scene import Camera, GaussianPrimitive, GaussianScene, ImageBuffer

NEAR_PLANE = 0.01
LOWPASS = 0.3
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4
TILE_SIZE = 16
BIN_SIGMA = 3.0
_BIN_MARGIN = 1e-3


@dataclass(frozen=True)
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    source_index: int


@dataclass(frozen=True, eq=False)
class RenderOutput:
    color: ImageBuffer
    features: ImageBuffer
    depth: ImageBuffer
    alpha: ImageBuffer
    weight_sum: Optional[ImageBuffer] = None


def _camera_jacobian(t, camera):
    x, y, z = t[..., 0], t[..., 1], t[..., 2]
    J = np.zeros(t.shape[:-1] + (2, 3))
    J[..., 0, 0] = camera.fx / z
    J[..., 0, 2] = -camera.fx * x / (z * z)
    J[..., 1, 1] = camera.fy / z
    J[..., 1, 2] = -camera.fy * y / (z * z)
    return J


def _screen_covariance(cov3d, J, W):
    M = J @ W
    cov2d = M @ cov3d @ np.swapaxes(M, -1, -2)
    cov2d[..., 0, 0] += LOWPASS
    cov2d[..., 1, 1] += LOWPASS
    return cov2d


def project_gaussian(primitive: GaussianPrimitive, cov, camera: Camera, source_index=0):
    """EWA projection of one primitive. Returns ``None`` when it is culled."""
    t = camera.to_camera(primitive.center)
    if not t[2] > NEAR_PLANE:
        return None
    J = _camera_jacobian(t, camera)
    cov2d = _screen_covariance(np.asarray(cov, dtype=np.float64), J, camera.rotation)
    mean2d = np.array([camera.fx * t[0] / t[2] + camera.cx, camera.fy * t[1] / t[2] + camera.cy])
    return Splat2D(mean2d=mean2d, cov2d=cov2d, depth=float(t[2]), source_index=source_index)


def gaussian_weight(splat: Splat2D, pixel):
    d = np.asarray(pixel, dtype=np.float64) - splat.mean2d
    return float(np.exp(-0.5 * d @ np.linalg.solve(splat.cov2d, d)))


class Projection:
    """All visible splats of a scene for one camera, in blending order."""

    def __init__(self, scene: GaussianScene, camera: Camera):
        self.camera = camera
        t_all = camera.to_camera(scene.centers)
        visible = np.flatnonzero(t_all[:, 2] > NEAR_PLANE)
        order = np.lexsort((visible, t_all[visible, 2]))
        self.index = visible[order]
        idx = self.index
        self.t = t_all[idx]
        self.cov3d = build_covariance(scene.scale[idx], scene.rotation[idx])
        self.J = _camera_jacobian(self.t, camera)
        self.cov2d = _screen_covariance(self.cov3d, self.J, camera.rotation)
        a, b, c = self.cov2d[:, 0, 0], self.cov2d[:, 0, 1], self.cov2d[:, 1, 1]
        det = a * c - b * b
        self.conic = np.empty_like(self.cov2d)
        self.conic[:, 0, 0] = c / det
        self.conic[:, 0, 1] = self.conic[:, 1, 0] = -b / det
        self.conic[:, 1, 1] = a / det
        z = self.t[:, 2]
        self.mean2d = np.stack([camera.fx * self.t[:, 0] / z + camera.cx,
                                camera.fy * self.t[:, 1] / z + camera.cy], -1)
        self.depth = z
        self.opacity = scene.opacity[idx]
        self.color = scene.color[idx]
        self.features = scene.sem_compressed[idx]
        lam_max = 0.5 * (a + c) + np.sqrt(0.25 * (a - c) ** 2 + b * b)
        with np.errstate(divide="ignore", invalid="ignore"):
            cutoff = np.sqrt(np.maximum(2.0 * np.log(255.0 * self.opacity), 0.0))
        # beyond this box opacity * G < 1/255, so the splat can never contribute there
        extent = np.maximum(BIN_SIGMA, cutoff) + _BIN_MARGIN
        self.radius = np.where(self.opacity >= ALPHA_MIN, extent * np.sqrt(lam_max), -1.0)

    def __len__(self):
        return self.index.size

    def splat(self, k):
        return Splat2D(self.mean2d[k], self.cov2d[k], float(self.depth[k]), int(self.index[k]))

    def tile_bins(self, tiles_x, tiles_y):
        """Per-tile lists of local splat indices, in blending order."""
        bins = [[] for _ in range(tiles_x * tiles_y)]
        W, H = self.camera.width, self.camera.height
        for k in range(len(self)):
            r = self.radius[k]
            if r < 0:
                continue
            mx, my = self.mean2d[k]
            x0, x1 = max(math.floor(mx - r), 0), min(math.ceil(mx + r), W - 1)
            y0, y1 = max(math.floor(my - r), 0), min(math.ceil(my + r), H - 1)
            if x0 > x1 or y0 > y1:
                continue
            for ty in range(y0 // TILE_SIZE, y1 // TILE_SIZE + 1):
                for tx in range(x0 // TILE_SIZE, x1 // TILE_SIZE + 1):
                    bins[ty * tiles_x + tx].append(k)
        return bins


def _blend(proj: Projection, ids, px, py, record=False):
    """Front-to-back compositing of splats ``ids`` over pixels ``(px, py)``."""
    n_pix = px.size
    T = np.ones(n_pix)
    color = np.zeros((n_pix, 3))
    feat = np.zeros((n_pix, proj.features.shape[1]))
    depth = np.zeros(n_pix)
    wsum = np.zeros(n_pix)
    done = np.zeros(n_pix, dtype=bool)
    rec = None
    if record:
        rec = {k: np.zeros((len(ids), n_pix)) for k in ("a", "g", "T", "dx", "dy")}
        rec["use"] = np.zeros((len(ids), n_pix), dtype=bool)
        rec["clamp"] = np.zeros((len(ids), n_pix), dtype=bool)
    for k, i in enumerate(ids):
        Q = proj.conic[i]
        dx = px - proj.mean2d[i, 0]
        dy = py - proj.mean2d[i, 1]
        power = -0.5 * (Q[0, 0] * dx * dx + Q[1, 1] * dy * dy) - Q[0, 1] * dx * dy
        g = np.exp(power)
        raw = proj.opacity[i] * g
        a = np.minimum(ALPHA_MAX, raw)
        use = (a >= ALPHA_MIN) & ~done
        w = np.where(use, a * T, 0.0)
        if record:
            rec["a"][k], rec["g"][k], rec["T"][k] = a, g, T
            rec["dx"][k], rec["dy"][k] = dx, dy
            rec["use"][k], rec["clamp"][k] = use, raw > ALPHA_MAX
        color += w[:, None] * proj.color[i]
        feat += w[:, None] * proj.features[i]
        depth += w * proj.depth[i]
        wsum += w
        T = np.where(use, T * (1.0 - a), T)
        done |= T < T_MIN
    return color, feat, depth, 1.0 - T, wsum, T, rec


def _tiles(camera):
    tx = -(-camera.width // TILE_SIZE)
    ty = -(-camera.height // TILE_SIZE)
    tiles = []
    for j in range(ty):
        for i in range(tx):
            x0, y0 = i * TILE_SIZE, j * TILE_SIZE
            x1, y1 = min(x0 + TILE_SIZE, camera.width), min(y0 + TILE_SIZE, camera.height)
            yy, xx = np.mgrid[y0:y1, x0:x1]
            tiles.append((slice(y0, y1), slice(x0, x1), xx.ravel().astype(np.float64),
                          yy.ravel().astype(np.float64)))
    return tx, ty, tiles


def _resolve_threads(threads):
    return max(1, os.cpu_count() or 1) if threads is None else max(1, int(threads))


def _map_tiles(fn, items, threads):
    if threads == 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _check_renderable(scene):
    if scene.sem_compressed is None:
        raise FeaturesNotCompressedError()


def render(scene: GaussianScene, camera: Camera, threads=None, diagnostics=False) -> RenderOutput:
    """Render color, compressed features, depth and alpha for one camera.

    Output is bit-identical for any ``threads`` value: each tile is blended
    independently in a fixed splat order.
    """
    _check_renderable(scene)
    proj = Projection(scene, camera)
    H, W, dc = camera.height, camera.width, scene.compressed_dim
    color, feat = np.zeros((H, W, 3)), np.zeros((H, W, dc))
    depth, alpha, wsum = np.zeros((H, W)), np.zeros((H, W)), np.zeros((H, W))
    tx, ty, tiles = _tiles(camera)
    bins = proj.tile_bins(tx, ty)

    def work(t):
        (ys, xs, px, py), ids = t
        return _blend(proj, ids, px, py)

    results = _map_tiles(work, list(zip(tiles, bins)), _resolve_threads(threads))
    for (ys, xs, _, _), (c, f, d, a, w, _, _) in zip(tiles, results):
        shape = (ys.stop - ys.start, xs.stop - xs.start)
        color[ys, xs] = c.reshape(shape + (3,))
        feat[ys, xs] = f.reshape(shape + (dc,))
        depth[ys, xs] = d.reshape(shape)
        alpha[ys, xs] = a.reshape(shape)
        wsum[ys, xs] = w.reshape(shape)
    return RenderOutput(ImageBuffer(color), ImageBuffer(feat), ImageBuffer(depth),
                        ImageBuffer(alpha), ImageBuffer(wsum) if diagnostics else None)


def _upstream(upstream, name, shape):
    g = None if upstream is None else upstream.get(name)
    if g is None:
        return np.zeros(shape)
    g = np.asarray(g, dtype=np.float64)
    if g.size != int(np.prod(shape)):
        raise DimensionMismatchError(f"upstream '{name}' has shape {g.shape}, expected {shape}")
    return g.reshape(shape)


def _tile_backward(proj, ids, px, py, g_color, g_feat, g_depth, g_alpha):
    n = len(ids)
    if n == 0:
        return None
    *_, T_final, rec = _blend(proj, ids, px, py, record=True)
    ids = np.asarray(ids)
    a, g, T, use = rec["a"], rec["g"], rec["T"], rec["use"]
    w = np.where(use, a * T, 0.0)
    # per-splat, per-pixel upstream dot value: <g, v_k>
    gv = (proj.color[ids] @ g_color.T + proj.features[ids] @ g_feat.T
          + proj.depth[ids][:, None] * g_depth[None, :])
    wgv = w * gv
    behind = np.sum(wgv, axis=0) - np.cumsum(wgv, axis=0)
    d_a = np.where(use, T * gv - (behind - g_alpha * T_final) / (1.0 - a), 0.0)
    d_raw = np.where(rec["clamp"], 0.0, d_a)
    d_opacity = np.sum(d_raw * g, axis=1)
    d_power = d_raw * proj.opacity[ids][:, None] * g
    Q = proj.conic[ids]
    dx, dy = rec["dx"], rec["dy"]
    d_mean = np.stack([
        np.sum(d_power * (Q[:, 0, 0, None] * dx + Q[:, 0, 1, None] * dy), axis=1),
        np.sum(d_power * (Q[:, 0, 1, None] * dx + Q[:, 1, 1, None] * dy), axis=1),
    ], -1)
    d_conic = np.empty((n, 2, 2))
    d_conic[:, 0, 0] = -0.5 * np.sum(d_power * dx * dx, axis=1)
    d_conic[:, 1, 1] = -0.5 * np.sum(d_power * dy * dy, axis=1)
    d_conic[:, 0, 1] = d_conic[:, 1, 0] = -0.5 * np.sum(d_power * dx * dy, axis=1)
    return {
        "ids": ids,
        "color": w @ g_color,
        "features": w @ g_feat,
        "depth": w @ g_depth,
        "opacity": d_opacity,
        "mean2d": d_mean,
        "conic": d_conic,
    }


def render_backward(scene: GaussianScene, camera: Camera, upstream, threads=None) -> GradientBundle:
    """Gradients of ``sum(upstream * render(scene, camera))`` w.r.t. the raw scene.

    ``upstream`` maps any of ``color, features, depth, alpha`` to per-pixel
    gradients; missing channels count as zero. The returned bundle has keys
    ``centers, opacity_raw, color, scale_raw, rotation_raw, sem_compressed``.
    """
    _check_renderable(scene)
    proj = Projection(scene, camera)
    H, W, dc = camera.height, camera.width, scene.compressed_dim
    G_color = _upstream(upstream, "color", (H, W, 3))
    G_feat = _upstream(upstream, "features", (H, W, dc))
    G_depth = _upstream(upstream, "depth", (H, W))
    G_alpha = _upstream(upstream, "alpha", (H, W))
    tx, ty, tiles = _tiles(camera)
    bins = proj.tile_bins(tx, ty)

    def work(t):
        (ys, xs, px, py), ids = t
        return _tile_backward(proj, ids, px, py, G_color[ys, xs].reshape(-1, 3),
                              G_feat[ys, xs].reshape(-1, dc), G_depth[ys, xs].ravel(),
                              G_alpha[ys, xs].ravel())

    results = _map_tiles(work, list(zip(tiles, bins)), _resolve_threads(threads))
    m = len(proj)
    acc = {"color": np.zeros((m, 3)), "features": np.zeros((m, dc)), "depth": np.zeros(m),
           "opacity": np.zeros(m), "mean2d": np.zeros((m, 2)), "conic": np.zeros((m, 2, 2))}
    for res in results:
        if res is None:
            continue
        for key, arr in acc.items():
            np.add.at(arr, res["ids"], res[key])
    return _projection_backward(scene, proj, acc)


def _projection_backward(scene, proj, acc):
    cam = proj.camera
    Wr = cam.rotation
    n = len(scene)
    out = GradientBundle(
        centers=np.zeros((n, 3)), opacity_raw=np.zeros(n), color=np.zeros((n, 3)),
        scale_raw=np.zeros((n, 3)), rotation_raw=np.zeros((n, 4)),
        sem_compressed=np.zeros((n, scene.compressed_dim)),
    )
    if len(proj) == 0:
        return out
    idx = proj.index
    Q = proj.conic
    d_cov2d = -Q @ acc["conic"] @ Q
    M = proj.J @ Wr
    d_cov3d = np.swapaxes(M, -1, -2) @ d_cov2d @ M
    d_M = (d_cov2d + np.swapaxes(d_cov2d, -1, -2)) @ M @ proj.cov3d
    d_J = d_M @ Wr.T
    x, y, z = proj.t[:, 0], proj.t[:, 1], proj.t[:, 2]
    fx, fy = cam.fx, cam.fy
    dmx, dmy = acc["mean2d"][:, 0], acc["mean2d"][:, 1]
    d_t = np.empty((len(proj), 3))
    d_t[:, 0] = -d_J[:, 0, 2] * fx / (z * z) + dmx * fx / z
    d_t[:, 1] = -d_J[:, 1, 2] * fy / (z * z) + dmy * fy / z
    d_t[:, 2] = (-d_J[:, 0, 0] * fx / (z * z) + d_J[:, 0, 2] * 2 * fx * x / z ** 3
                 - d_J[:, 1, 1] * fy / (z * z) + d_J[:, 1, 2] * 2 * fy * y / z ** 3
                 - dmx * fx * x / (z * z) - dmy * fy * y / (z * z) + acc["depth"])
    d_scale, d_quat = covariance_vjp(scene.scale[idx], scene.rotation[idx], d_cov3d)
    op = scene.opacity[idx]
    out["centers"][idx] = d_t @ Wr
    out["opacity_raw"][idx] = acc["opacity"] * op * (1.0 - op)
    out["color"][idx] = acc["color"]
    out["scale_raw"][idx] = d_scale * scene.scale[idx]
    out["rotation_raw"][idx] = rotation_vjp(scene.rotation_raw[idx], d_quat)
    out["sem_compressed"][idx] = acc["features"]
    return out

