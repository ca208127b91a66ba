import os

import numpy as np
import pytest

from semsplat.exceptions import FeaturesNotCompressedError
from semsplat.rasterizer import Projection, project_gaussian, render, render_backward
from semsplat.scene import Camera, GaussianScene

from oracles import directional_fd, project_all, random_camera, random_scene, rel_err, render_per_pixel


def _single(center, opacity_raw=10.0, sigma=0.2, color=(1.0, 0.5, 0.25)):
    return GaussianScene.from_raw(
        centers=[center], opacity_raw=[opacity_raw], color=[color], scale_raw=[np.log([sigma] * 3)],
        rotation_raw=[[1.0, 0, 0, 0]], sem_feature=[[1.0, 0.0]], median_depth=1.0, compressed_dim=2,
        sem_compressed=[[1.0, -1.0]])


def test_empty_scene_renders_background():
    cam = Camera(10, 10, 4, 4, 8, 8)
    out = render(GaussianScene.empty(4, 2), cam)
    for buf in (out.color, out.features, out.depth, out.alpha):
        assert not np.any(buf.data)


def test_uncompressed_scene_is_rejected():
    scene = random_scene(np.random.default_rng(0), 2, compressed=False)
    with pytest.raises(FeaturesNotCompressedError, match="features not compressed"):
        render(scene, random_camera(np.random.default_rng(0)))


def test_centered_gaussian_peaks_at_principal_point():
    cam = Camera.look_at([0, 0, -3.0], [0, 0, 0], 16, 16, fx=20)
    out = render(_single([0, 0, 0]), cam)
    a = out.alpha.data[..., 0]
    assert np.unravel_index(np.argmax(a), a.shape) == (8, 8)
    assert a[8, 8] == pytest.approx(0.99, abs=1e-12)
    # symmetric about the principal point (8, 8)
    np.testing.assert_allclose(a[1:, 1:], a[1:, 1:].T, atol=1e-15)
    np.testing.assert_allclose(a[1:, 1:], a[1:, 1:][::-1, ::-1], atol=1e-15)
    # opacity ~1 clamps to 0.99; depth is blended, not normalized
    assert out.depth.data[8, 8, 0] == pytest.approx(0.99 * 3.0, rel=1e-12)
    np.testing.assert_allclose(out.color.data[8, 8], 0.99 * np.array([1.0, 0.5, 0.25]), rtol=1e-12)


def test_gaussian_behind_camera_is_culled():
    cam = Camera.look_at([0, 0, -3.0], [0, 0, 0], 8, 8, fx=10)
    scene = _single([0, 0, -5.0])
    assert project_gaussian(scene[0], np.eye(3), cam) is None
    assert not np.any(render(scene, cam).alpha.data)


def test_projection_matches_per_primitive_formula():
    rng = np.random.default_rng(1)
    for _ in range(5):
        scene, cam = random_scene(rng, 8), random_camera(rng)
        proj = Projection(scene, cam)
        ref = sorted(project_all(scene, cam), key=lambda r: (r["z"], r["index"]))
        assert [r["index"] for r in ref] == proj.index.tolist()
        for k, r in enumerate(ref):
            np.testing.assert_allclose(proj.mean2d[k], r["mean"], rtol=1e-12)
            np.testing.assert_allclose(proj.cov2d[k], r["cov"], rtol=1e-10, atol=1e-12)
            np.testing.assert_allclose(proj.conic[k] @ proj.cov2d[k], np.eye(2), atol=1e-9)


def test_depth_ties_break_by_index():
    cam = Camera.look_at([0, 0, -3.0], [0, 0, 0], 8, 8, fx=10)
    scene = GaussianScene.from_raw(
        centers=[[0.1, 0, 0], [-0.1, 0, 0]], opacity_raw=[0.0, 0.0], color=[[1, 0, 0], [0, 1, 0]],
        scale_raw=np.log(np.full((2, 3), 0.3)), rotation_raw=[[1, 0, 0, 0]] * 2, sem_feature=np.ones((2, 2)),
        median_depth=1.0, compressed_dim=2, sem_compressed=np.ones((2, 2)))
    assert Projection(scene, cam).index.tolist() == [0, 1]
    assert Projection(scene.permuted([1, 0]), cam).index.tolist() == [0, 1]


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_tiled_render_equals_per_pixel_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    scene, cam = random_scene(rng, 24), random_camera(rng, 32)
    ref = render_per_pixel(Projection(scene, cam), 32, 32)
    for threads in (1, 4):
        out = render(scene, cam, threads=threads, diagnostics=True)
        np.testing.assert_array_equal(out.color.data, ref[0])
        np.testing.assert_array_equal(out.features.data, ref[1])
        np.testing.assert_array_equal(out.depth.data[..., 0], ref[2])
        np.testing.assert_array_equal(out.alpha.data[..., 0], ref[3])
        assert np.max(np.abs(out.weight_sum.data - out.alpha.data)) < 1e-10


def test_non_square_image_with_partial_tiles():
    rng = np.random.default_rng(7)
    scene = random_scene(rng, 12)
    cam = Camera.look_at([0.2, 0.1, -3.0], [0, 0, 0], 37, 21, fx=30)
    ref = render_per_pixel(Projection(scene, cam), 37, 21)
    np.testing.assert_array_equal(render(scene, cam).color.data, ref[0])


def test_opaque_stack_stops_early():
    cam = Camera.look_at([0, 0, -3.0], [0, 0, 0], 8, 8, fx=10)
    n = 6
    scene = GaussianScene.from_raw(
        centers=[[0, 0, 0.05 * k] for k in range(n)], opacity_raw=[12.0] * n, color=np.eye(3)[np.arange(n) % 3],
        scale_raw=np.log(np.full((n, 3), 0.5)), rotation_raw=[[1, 0, 0, 0]] * n, sem_feature=np.ones((n, 2)),
        median_depth=1.0, compressed_dim=2, sem_compressed=np.ones((n, 2)))
    out = render(scene, cam, diagnostics=True)
    # two 0.99 layers leave T = 1e-4, which is not < 1e-4; the third drives it below
    assert out.alpha.data[4, 4, 0] == pytest.approx(1 - 0.01 ** 3, abs=1e-15)
    np.testing.assert_allclose(out.color.data[4, 4], [0.99, 0.0099, 0.000099], rtol=1e-12)


def test_render_is_thread_count_invariant():
    rng = np.random.default_rng(8)
    scene, cam = random_scene(rng, 40), random_camera(rng, 48)
    outs = [render(scene, cam, threads=t) for t in (1, 3, os.cpu_count() or 1)]
    for o in outs[1:]:
        np.testing.assert_array_equal(o.color.data, outs[0].color.data)
        np.testing.assert_array_equal(o.features.data, outs[0].features.data)


def _fd_scene(rng):
    return random_scene(rng, 4, d=5, d_c=3, sigma=(0.1, 0.25)), Camera.look_at([0.3, -0.2, -3], [0, 0, 0], 16, 16, fx=20)


def _objective(cam, up):
    def f(sc):
        o = render(sc, cam)
        return sum(np.sum(up[k] * getattr(o, k).data) for k in up)
    return f


@pytest.mark.parametrize("name", ["centers", "opacity_raw", "color", "scale_raw", "rotation_raw", "sem_compressed"])
def test_backward_matches_finite_differences(name):
    rng = np.random.default_rng(11)
    scene, cam = _fd_scene(rng)
    up = {"color": rng.normal(size=(16, 16, 3)), "features": rng.normal(size=(16, 16, 3)),
          "depth": rng.normal(size=(16, 16, 1)), "alpha": rng.normal(size=(16, 16, 1))}
    grads = render_backward(scene, cam, up)
    f = _objective(cam, up)
    base = getattr(scene, name)
    v = rng.normal(size=base.shape)

    def along(x):
        if name == "sem_compressed":
            return f(scene.with_compressed(x))
        return f(scene.with_raw(sem_compressed=scene.sem_compressed, **{name: x}))

    assert rel_err(np.sum(grads[name] * v), directional_fd(along, base, v)) < 1e-6


def test_zero_upstream_gives_zero_gradients():
    rng = np.random.default_rng(12)
    scene, cam = _fd_scene(rng)
    grads = render_backward(scene, cam, {})
    assert all(not np.any(g) for g in grads.values())
