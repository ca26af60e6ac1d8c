import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hoflow.geometry import CameraIntrinsics, Mesh
from hoflow.harness import plane_mesh, render_image, smooth_texture, two_body_scene
from hoflow.photoflow import (FlowField, PhotometricLoss, TopologyError, bilinear_sample,
                              bilinear_sample_many, check_image, cyclic_mask, load_f32, load_png,
                              photometric_loss, render_flow, sample_valid, save_f32, save_png,
                              warp)
from hoflow.rasterizer import points_in_silhouette, project_vertices, rasterize_geometry


def naive_bilinear(img, x, y):
    H, W = img.shape[:2]
    if not (0 <= x <= W - 1 and 0 <= y <= H - 1):
        return np.zeros(img.shape[2]), False
    x0 = min(int(np.floor(x)), W - 2)
    y0 = min(int(np.floor(y)), H - 2)
    fx, fy = x - x0, y - y0
    out = np.zeros(img.shape[2])
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            out += wy * wx * img[y0 + dy, x0 + dx]
    return out, True


@pytest.fixture
def img(rng):
    return rng.uniform(0, 1, (9, 11, 3))


def test_bilinear_matches_naive_oracle(img, rng):
    locs = rng.uniform(-1.5, 12.0, (500, 2))
    vals, inb = bilinear_sample_many(img, locs)
    for (x, y), v, ok in zip(locs, vals.numpy(), inb.numpy()):
        ref, ref_ok = naive_bilinear(img, x, y)
        assert ok == ref_ok
        np.testing.assert_allclose(v, ref, atol=1e-14)


def test_integer_location_returns_pixel(img):
    v, ok = bilinear_sample(img, [4.0, 6.0])
    assert ok and np.array_equal(v.numpy(), img[6, 4])
    v, ok = bilinear_sample(img, [10.0, 8.0])  # last row and column are in bounds
    assert ok and np.array_equal(v.numpy(), img[8, 10])


def test_out_of_bounds_is_zero(img):
    v, ok = bilinear_sample(img, [-0.01, 3.0])
    assert not ok and np.all(v.numpy() == 0)


def test_bilinear_location_gradient_matches_fd_inside_cell(img, rng):
    for _ in range(20):
        loc = torch.tensor(rng.uniform(0.1, 0.9, 2) + rng.integers(0, 8, 2), requires_grad=True)
        w = torch.tensor(rng.normal(size=3))
        (bilinear_sample(img, loc)[0] * w).sum().backward()
        eps = 1e-7
        fd = []
        for i in range(2):
            d = np.zeros(2)
            d[i] = eps
            fp = naive_bilinear(img, *(loc.detach().numpy() + d))[0] @ w.numpy()
            fm = naive_bilinear(img, *(loc.detach().numpy() - d))[0] @ w.numpy()
            fd.append((fp - fm) / (2 * eps))
        np.testing.assert_allclose(loc.grad.numpy(), fd, rtol=1e-6, atol=1e-9)


def test_pinned_cells_extrapolate_the_same_polynomial(img):
    loc = torch.tensor([[3.2, 4.7]], dtype=torch.float64)
    x0, y0 = torch.tensor([3]), torch.tensor([4])
    a, _ = bilinear_sample_many(img, loc, (x0, y0))
    b, _ = bilinear_sample_many(img, loc)
    assert torch.equal(a, b)


def test_warp_zero_flow_is_identity(img):
    flow = FlowField(torch.zeros(9, 11, 2, dtype=torch.float64), np.ones((9, 11), bool))
    out, mask = warp(img, flow)
    assert mask.all() and np.array_equal(out.numpy(), img)


def test_warp_integer_flow_shifts(img):
    f = torch.zeros(9, 11, 2, dtype=torch.float64)
    f[..., 0] = 2.0
    out, mask = warp(img, FlowField(f, np.ones((9, 11), bool)))
    np.testing.assert_array_equal(out.numpy()[:, :9], img[:, 2:])
    assert not mask[:, 9:].any() and np.all(out.numpy()[:, 9:] == 0)


def test_warp_respects_flow_validity(img):
    valid = np.zeros((9, 11), bool)
    valid[2:4, 3:5] = True
    out, mask = warp(img, FlowField(torch.zeros(9, 11, 2, dtype=torch.float64), valid))
    assert np.array_equal(mask, valid)
    assert np.all(out.numpy()[~valid] == 0)


def test_sample_valid_renormalizes(rng):
    field = rng.normal(size=(4, 4, 2))
    valid = np.ones((4, 4), bool)
    valid[1, 2] = False
    vals, ok = sample_valid(field, valid, np.array([[1.5, 0.5], [2.0, 1.0]]))
    # first location: neighbours (1,1),(1,2)x,(0,1),(0,2); weights 0.25 each, one missing
    expected = (field[0, 1] + field[0, 2] + field[1, 1]) / 3
    np.testing.assert_allclose(vals[0], expected, atol=1e-14)
    assert ok[0] and not ok[1]  # the second sits exactly on the invalid pixel


cam16 = CameraIntrinsics.centered(32.0, 32, 32)


def quad(z=1.0, half=0.3, dx=0.0):
    return plane_mesh((dx, 0.0, z), (half, half), (3, 3))


def test_flow_of_identical_meshes_is_zero():
    m = quad()
    f = render_flow(m, m, cam16)
    assert f.valid.any() and np.all(f.flow.numpy() == 0)


def test_flow_of_fronto_parallel_translation_is_constant():
    a, b = quad(z=1.0), quad(z=1.0, dx=0.05)
    f = render_flow(a, b, cam16)
    np.testing.assert_allclose(f.flow.numpy()[f.valid], [[32 * 0.05, 0.0]] * int(f.valid.sum()), atol=1e-12)


def test_flow_topology_checked():
    with pytest.raises(TopologyError):
        render_flow(quad(), plane_mesh((0, 0, 1), (0.3, 0.3), (2, 2)), cam16)


def test_cyclic_mask_consistent_flows_keep_everything():
    a, b = quad(), quad(dx=0.05)
    keep = cyclic_mask(render_flow(a, b, cam16), render_flow(b, a, cam16))
    fwd = render_flow(a, b, cam16)
    # every pixel whose forward target stays in the image round-trips exactly
    H, W = fwd.shape
    ys, xs = np.nonzero(fwd.valid)
    q = np.stack([xs, ys], 1) + fwd.flow.numpy()[ys, xs]
    inside = (q[:, 0] <= W - 1)
    assert keep[ys[inside], xs[inside]].all()


def test_cyclic_mask_infinite_threshold_is_chain_validity():
    sc = two_body_scene(0)
    cam = CameraIntrinsics.centered(128.0, 128, 128)
    fwd = render_flow(sc.mesh_ref, sc.mesh_target, cam)
    bwd = render_flow(sc.mesh_target, sc.mesh_ref, cam)
    inf = cyclic_mask(fwd, bwd, np.inf)
    ys, xs = np.nonzero(fwd.valid)
    q = np.stack([xs, ys], 1) + fwd.flow.numpy()[ys, xs]
    _, ok = sample_valid(bwd.flow.numpy(), bwd.valid, q)
    expected = np.zeros_like(inf)
    expected[ys, xs] = ok
    assert np.array_equal(inf, expected)
    assert cyclic_mask(fwd, bwd, 2.0).sum() < inf.sum()


def occluded_at_target(sc, cam):
    """Geometric visibility oracle: the reference-visible surface point is
    hidden at the target when the nearest target pixel sees nearer geometry."""
    rr = rasterize_geometry(sc.mesh_ref, cam)
    rt = rasterize_geometry(sc.mesh_target, cam)
    ys, xs = np.nonzero(rr.coverage)
    tri = sc.mesh_ref.faces[rr.triangle_id[ys, xs]]
    P = (rr.barycentric[ys, xs][:, :, None] * sc.mesh_target.vertices.numpy()[tri]).sum(1)
    uv = project_vertices(P, cam) - 0.5
    xi = np.clip(np.round(uv[:, 0]).astype(int), 0, cam.width - 1)
    yi = np.clip(np.round(uv[:, 1]).astype(int), 0, cam.height - 1)
    occ = np.zeros(rr.coverage.shape, bool)
    occ[ys, xs] = rt.depth[yi, xi] < P[:, 2] - 1e-9
    return occ


@pytest.mark.parametrize("seed", [0, 1])
def test_occluded_surface_points_are_discarded(seed):
    cam = CameraIntrinsics.centered(128.0, 128, 128)
    sc = two_body_scene(seed)
    Ir, It = sc.images(cam)
    res = photometric_loss(Ir, It, sc.mesh_ref, sc.mesh_target, cam)
    occ = occluded_at_target(sc, cam)
    assert occ.sum() > 50
    assert not (res.mask & occ).any()


def test_mask_is_subset_of_reference_coverage_and_est_silhouette():
    cam = CameraIntrinsics.centered(128.0, 128, 128)
    sc = two_body_scene(0)
    Ir, It = sc.images(cam)
    term = PhotometricLoss(Ir, It, sc.mesh_ref, cam)
    res = term(sc.mesh_target)
    assert not (res.mask & ~term.coverage).any()
    ys, xs = np.nonzero(res.mask)
    flow = render_flow(sc.mesh_ref, sc.mesh_target, cam).flow.numpy()
    q = np.stack([xs, ys], 1) + flow[ys, xs]
    assert points_in_silhouette(sc.mesh_target, cam, q + 0.5).all()


def test_points_in_silhouette_matches_pixel_center_coverage():
    cam = CameraIntrinsics.centered(32.0, 32, 32)
    m = quad(half=0.21)
    cov = rasterize_geometry(m, cam).coverage
    ys, xs = np.mgrid[0:32, 0:32]
    inside = points_in_silhouette(m, cam, np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5], 1))
    assert np.array_equal(inside.reshape(32, 32), cov)


def test_identical_frames_give_zero_loss_and_gradient():
    cam = CameraIntrinsics.centered(64.0, 64, 64)
    m = quad()
    colors = smooth_texture(m.vertices.numpy(), np.random.default_rng(0))
    I = render_image(m, colors, cam)
    v = m.vertices.clone().requires_grad_(True)
    res = photometric_loss(I, I, m, Mesh(v, m.faces), cam)
    res.loss.backward()
    assert not res.empty and float(res.loss.detach()) == 0.0
    assert float(v.grad.abs().max()) == 0.0


def test_integer_pixel_shift_is_an_exact_fixed_point():
    """A fronto-parallel plane moved by exactly two pixels: bilinear sampling
    hits pixel centers, so at the true pose loss and gradient vanish."""
    cam = CameraIntrinsics.centered(64.0, 64, 64)
    a = plane_mesh((0.0, 0.0, 1.0), (0.25, 0.25), (6, 6))
    b = Mesh(a.vertices + torch.tensor([2.0 / 64.0, 0.0, 0.0], dtype=torch.float64), a.faces)
    colors = smooth_texture(a.vertices.numpy(), np.random.default_rng(1))
    Ia, Ib = render_image(a, colors, cam), render_image(b, colors, cam)
    v = b.vertices.clone().requires_grad_(True)
    res = photometric_loss(Ia, Ib, a, Mesh(v, b.faces), cam)
    res.loss.backward()
    assert res.count > 100
    assert float(res.loss.detach()) < 1e-12
    assert float(v.grad.norm()) < 1e-9


def test_empty_mask_flags_no_supervision():
    cam = CameraIntrinsics.centered(32.0, 32, 32)
    a = quad()
    far = quad(dx=5.0)  # projects outside the image
    I = np.full((32, 32, 3), 0.5)
    res = photometric_loss(I, I, a, far, cam)
    assert res.empty and res.count == 0 and float(res.loss.detach()) == 0.0


def test_frozen_piece_reproduces_loss_value():
    cam = CameraIntrinsics.centered(128.0, 128, 128)
    sc = two_body_scene(0)
    Ir, It = sc.images(cam)
    term = PhotometricLoss(Ir, It, sc.mesh_ref, cam)
    est = Mesh(sc.mesh_target.vertices + 0.001, sc.mesh_target.faces)
    free = term(est)
    frozen = term(est, piece=free.piece)
    assert float(frozen.loss.detach()) == pytest.approx(float(free.loss.detach()), rel=1e-12)


def test_image_validation():
    with pytest.raises(ValueError):
        check_image(np.zeros((4, 4)))
    with pytest.raises(ValueError):
        check_image(np.full((4, 4, 3), 1.5))


def test_image_io_round_trip(tmp_path, rng):
    img = rng.uniform(0, 1, (5, 7, 3))
    save_f32(tmp_path / "a.f32", img)
    np.testing.assert_array_equal(load_f32(tmp_path / "a.f32"), img.astype(np.float32))
    save_png(tmp_path / "a.png", img)
    np.testing.assert_allclose(load_png(tmp_path / "a.png"), img, atol=0.5 / 255 + 1e-12)


@given(st.floats(-3, 3), st.floats(-3, 3))
@settings(max_examples=50, deadline=None)
def test_bilinear_is_bounded_by_neighbours(x, y):
    img = np.random.default_rng(0).uniform(0, 1, (6, 6, 1))
    v, ok = bilinear_sample(img, [x + 2.5, y + 2.5])
    if ok:
        assert img.min() - 1e-12 <= float(v[0]) <= img.max() + 1e-12
