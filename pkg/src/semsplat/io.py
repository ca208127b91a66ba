"""On-disk formats.

- Scene: ``SGS1`` little-endian binary (header ``u32 count, u32 d, u32 d_c,
  f64 median_depth`` then one f64 record per primitive) or a JSON twin with
  the same field names.
- Camera: JSON ``{fx, fy, cx, cy, width, height, rotation[9], translation[3]}``.
- PPM ``P6`` for 8-bit color previews.
- ``FMAP`` float maps: ``u32 w, u32 h, u32 c`` then row-major f32 data.
"""

import json
import struct
from pathlib import Path

import numpy as np

from .exceptions import FormatError
from .scene import PRIMITIVE_FIELDS, Camera, GaussianScene

SCENE_MAGIC = b"SGS1"
FMAP_MAGIC = b"FMAP"
_SCENE_HEADER = struct.Struct("<4sIIId")
_FMAP_HEADER = struct.Struct("<4sIII")

_SCENE_ATTR = {"center": "centers"}


def _field_widths(d, d_c):
    return [(name, d if w == "d" else d_c if w == "d_c" else w) for name, w in PRIMITIVE_FIELDS]


def _scene_columns(scene):
    comp = scene.sem_compressed
    if comp is None:
        comp = np.full((len(scene), scene.compressed_dim), np.nan)
    cols = []
    for name, width in _field_widths(scene.sem_dim, scene.compressed_dim):
        v = comp if name == "sem_compressed" else getattr(scene, _SCENE_ATTR.get(name, name))
        cols.append(np.reshape(v, (len(scene), width)))
    return cols


def _scene_from_columns(cols, d_c, median_depth):
    kw = {}
    for (name, _), v in zip(PRIMITIVE_FIELDS, cols):
        kw[_SCENE_ATTR.get(name, name)] = v
    for scalar in ("opacity_raw", "opacity"):
        kw[scalar] = kw[scalar][:, 0]
    comp = kw.pop("sem_compressed")
    if comp.size and np.all(np.isnan(comp)):
        comp = None
    return GaussianScene(median_depth=median_depth, compressed_dim=d_c, sem_compressed=comp, **kw)


def save_scene(path, scene: GaussianScene, text=False):
    path = Path(path)
    if text:
        path.write_text(json.dumps(scene_to_dict(scene), indent=1))
        return
    header = _SCENE_HEADER.pack(SCENE_MAGIC, len(scene), scene.sem_dim,
                                scene.compressed_dim, scene.median_depth)
    body = np.concatenate(_scene_columns(scene), axis=1).astype("<f8")
    path.write_bytes(header + body.tobytes())


def scene_to_dict(scene: GaussianScene):
    prims = []
    cols = _scene_columns(scene)
    for j in range(len(scene)):
        rec = {}
        for (name, width), col in zip(_field_widths(scene.sem_dim, scene.compressed_dim), cols):
            vals = col[j].tolist()
            if name == "sem_compressed" and scene.sem_compressed is None:
                continue
            rec[name] = vals[0] if width == 1 and name in ("opacity_raw", "opacity") else vals
        prims.append(rec)
    return {"format": "SGS1", "sem_dim": scene.sem_dim, "compressed_dim": scene.compressed_dim,
            "median_depth": scene.median_depth, "primitives": prims}


def scene_from_dict(data, path="<dict>"):
    try:
        d, d_c = int(data["sem_dim"]), int(data["compressed_dim"])
        median = float(data["median_depth"])
        prims = data["primitives"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(path, f"missing or invalid scene header field: {exc}") from None
    widths = _field_widths(d, d_c)
    cols = [np.zeros((len(prims), w)) for _, w in widths]
    for j, rec in enumerate(prims):
        for k, (name, w) in enumerate(widths):
            if name not in rec:
                # raw latents and compressed features are optional in hand-authored files
                if name in ("opacity_raw", "scale_raw", "rotation_raw", "sem_compressed"):
                    cols[k][j] = np.nan
                    continue
                raise FormatError(path, f"primitive {j} lacks field '{name}'")
            v = np.ravel(np.asarray(rec[name], dtype=np.float64))
            if v.size != w:
                raise FormatError(path, f"primitive {j} field '{name}' has {v.size} values, expected {w}")
            cols[k][j] = v
    return _scene_from_columns(cols, d_c, median)


def load_scene(path) -> GaussianScene:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != SCENE_MAGIC:
        if raw.lstrip()[:1] == b"{":
            try:
                return scene_from_dict(json.loads(raw), path)
            except json.JSONDecodeError as exc:
                raise FormatError(path, f"invalid JSON: {exc.msg}", exc.pos) from None
        raise FormatError(path, "bad magic, expected SGS1 or JSON", 0)
    if len(raw) < _SCENE_HEADER.size:
        raise FormatError(path, "truncated header", len(raw))
    _, n, d, d_c, median = _SCENE_HEADER.unpack_from(raw)
    widths = _field_widths(d, d_c)
    rec = sum(w for _, w in widths)
    expected = _SCENE_HEADER.size + 8 * rec * n
    if len(raw) != expected:
        raise FormatError(path, f"size {len(raw)} does not match header (expected {expected})",
                          min(len(raw), expected))
    body = np.frombuffer(raw, dtype="<f8", offset=_SCENE_HEADER.size).reshape(n, rec)
    cols, k = [], 0
    for _, w in widths:
        cols.append(body[:, k:k + w].astype(np.float64))
        k += w
    return _scene_from_columns(cols, d_c, median)


def camera_to_dict(camera: Camera):
    return {"fx": camera.fx, "fy": camera.fy, "cx": camera.cx, "cy": camera.cy,
            "width": camera.width, "height": camera.height,
            "rotation": camera.rotation.ravel().tolist(),
            "translation": camera.translation.tolist()}


def save_camera(path, camera: Camera):
    Path(path).write_text(json.dumps(camera_to_dict(camera), indent=1))


def load_camera(path) -> Camera:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(path, f"invalid JSON: {exc.msg}", exc.pos) from None
    try:
        return Camera(fx=data["fx"], fy=data["fy"], cx=data["cx"], cy=data["cy"],
                      width=data["width"], height=data["height"],
                      rotation=np.asarray(data["rotation"], dtype=np.float64).reshape(3, 3),
                      translation=np.asarray(data["translation"], dtype=np.float64).reshape(3))
    except (KeyError, ValueError, TypeError) as exc:
        raise FormatError(path, f"invalid camera: {exc}") from None


def write_ppm(path, image):
    """Write an ``(H, W, 3)`` float image in [0, 1] as binary PPM."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"PPM needs (H, W, 3) data, got {img.shape}")
    h, w, _ = img.shape
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + data.tobytes())


def read_ppm(path):
    path = Path(path)
    raw = path.read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(path, "truncated PPM header", pos)
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != b"P6":
        raise FormatError(path, "not a binary PPM (P6)", 0)
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(path, "only 8-bit PPM is supported", pos)
    if len(raw) - pos != w * h * 3:
        raise FormatError(path, f"expected {w * h * 3} pixel bytes", pos)
    data = np.frombuffer(raw, dtype=np.uint8, offset=pos).reshape(h, w, 3)
    return data.astype(np.float64) / 255.0


def write_fmap(path, data):
    a = np.asarray(data)
    if a.ndim == 2:
        a = a[..., None]
    h, w, c = a.shape
    Path(path).write_bytes(_FMAP_HEADER.pack(FMAP_MAGIC, w, h, c) + a.astype("<f4").tobytes())


def read_fmap(path):
    """Read an FMAP file into an ``(H, W, C)`` float64 array."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _FMAP_HEADER.size:
        raise FormatError(path, "truncated FMAP header", len(raw))
    magic, w, h, c = _FMAP_HEADER.unpack_from(raw)
    if magic != FMAP_MAGIC:
        raise FormatError(path, "bad magic, expected FMAP", 0)
    n = w * h * c
    if len(raw) - _FMAP_HEADER.size != 4 * n:
        raise FormatError(path, f"payload is {len(raw) - _FMAP_HEADER.size} bytes, header implies {4 * n}",
                          _FMAP_HEADER.size)
    data = np.frombuffer(raw, dtype="<f4", offset=_FMAP_HEADER.size).reshape(h, w, c)
    return data.astype(np.float64)
