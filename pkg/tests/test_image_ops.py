import hypothesis.strategies as st
import pytest
import torch
from hypothesis import given

from faceanon.core_data import Box
from faceanon.image_ops import (
    crop,
    enlarge_box,
    grid_sample,
    make_crop_grid,
    make_crop_grids,
    paste_composite,
    pixel_extent,
)


def central_fd(f, x, eps=1e-3):
    """Central finite differences of a scalar function w.r.t. every entry of ``x``."""
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + eps
        hi = f(x).item()
        flat[i] = old - eps
        lo = f(x).item()
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def test_enlarge_centered():
    assert enlarge_box(Box(45, 45, 55, 55), 1.6, (100, 100)) == Box(42, 42, 58, 58)


def test_enlarge_clipped():
    assert enlarge_box(Box(0, 0, 10, 10), 1.6, (100, 100)) == Box(0, 0, 13, 13)


def test_enlarge_identity():
    b = Box(3.5, 7, 20, 30.25)
    assert enlarge_box(b, 1.0, (100, 100)) == b


def test_enlarge_rejects_bad_factor():
    with pytest.raises(ValueError):
        enlarge_box(Box(0, 0, 5, 5), 0.0, (10, 10))


def test_grid_corners():
    g = make_crop_grid(Box(0, 0, 2, 2), (2, 2))
    assert g.tolist() == [[[0, 0], [2, 0]], [[0, 2], [2, 2]]]


def test_grid_midpoint():
    g = make_crop_grid(Box(0, 0, 4, 4), (3, 3))
    assert g[1, 1].tolist() == [2, 2]


@pytest.mark.parametrize("h,w", [(5, 7), (16, 16), (2, 3)])
def test_identity_grid_is_exact(h, w):
    img = torch.rand(3, h, w)
    g = make_crop_grid(Box(0, 0, w - 1, h - 1), (h, w))
    assert torch.equal(g[..., 0][0], torch.arange(w, dtype=torch.float64))
    assert torch.equal(grid_sample(img, g), img)


def test_batched_grid_matches_single():
    boxes = [Box(1, 2, 9, 7.5), Box(0.25, 0, 3, 3)]
    batched = make_crop_grids(torch.tensor([b.to_list() for b in boxes], dtype=torch.float64), (4, 5))
    for b, g in zip(boxes, batched):
        assert torch.allclose(make_crop_grid(b, (4, 5)), g, atol=1e-12)


def test_center_of_2x2_is_mean():
    img = torch.tensor([[[0.1, 0.4], [0.7, 1.0]]])
    out = grid_sample(img, torch.tensor([[0.5, 0.5]], dtype=torch.float64))
    assert out.item() == pytest.approx(0.55, abs=1e-7)


def test_grid_sample_image_gradient_fd():
    torch.manual_seed(0)
    img = torch.rand(3, 8, 8, dtype=torch.float64)
    grid = torch.rand(5, 6, 2, dtype=torch.float64) * 7
    weights = torch.rand(3, 5, 6, dtype=torch.float64)

    def f(x):
        return (grid_sample(x, grid) * weights).sum()

    x = img.clone().requires_grad_(True)
    f(x).backward()
    fd = central_fd(f, img.clone())
    assert torch.allclose(x.grad, fd, rtol=1e-4, atol=1e-8)


def test_grid_sample_coordinate_gradient_fd():
    torch.manual_seed(1)
    img = torch.rand(2, 8, 8, dtype=torch.float64)
    # keep points away from integer lattice lines where bilinear is not differentiable
    grid = (torch.randint(0, 7, (4, 4, 2)) + 0.2 + 0.6 * torch.rand(4, 4, 2)).double()

    def f(g):
        return grid_sample(img, g).sum()

    g = grid.clone().requires_grad_(True)
    f(g).backward()
    fd = central_fd(f, grid.clone(), eps=1e-4)
    assert torch.allclose(g.grad, fd, rtol=1e-4, atol=1e-8)


def test_sum_gradient_fd():
    torch.manual_seed(2)
    img = torch.rand(1, 8, 8, dtype=torch.float64)
    grid = make_crop_grid(Box(0.3, 1.7, 6.2, 7.0), (5, 5))
    x = img.clone().requires_grad_(True)
    grid_sample(x, grid).sum().backward()
    fd = central_fd(lambda t: grid_sample(t, grid).sum(), img.clone())
    assert torch.allclose(x.grad, fd, rtol=1e-4, atol=1e-8)


def test_paste_gradient_fd():
    torch.manual_seed(3)
    frame = torch.rand(3, 8, 8, dtype=torch.float64)
    patch = torch.rand(3, 4, 4, dtype=torch.float64)
    box = Box(1.5, 2.0, 6.25, 6.5)
    weights = torch.rand(3, 8, 8, dtype=torch.float64)

    def f(p):
        return (paste_composite(frame, box, p) * weights).sum()

    p = patch.clone().requires_grad_(True)
    f(p).backward()
    fd = central_fd(f, patch.clone())
    assert torch.allclose(p.grad, fd, rtol=1e-4, atol=1e-8)


def test_paste_locality_with_original_patch():
    torch.manual_seed(4)
    frame = torch.rand(3, 20, 24)
    box = Box(4, 5, 13, 17)
    patch = crop(frame, box, (9, 7))
    out = paste_composite(frame, box, patch)
    c0, r0, c1, r1 = pixel_extent(box)
    mask = torch.zeros(20, 24, dtype=torch.bool)
    mask[r0 : r1 + 1, c0 : c1 + 1] = True
    assert torch.equal(out[:, ~mask], frame[:, ~mask])


def test_paste_zero_patch():
    frame = torch.rand(3, 10, 10)
    box = Box(2, 3, 6, 8)
    out = paste_composite(frame, box, torch.zeros(3, 5, 5))
    assert torch.all(out[:, 3:9, 2:7] == 0)
    out[:, 3:9, 2:7] = frame[:, 3:9, 2:7]
    assert torch.equal(out, frame)


def test_identity_round_trip_256():
    torch.manual_seed(5)
    frame = torch.rand(3, 300, 300)
    box = Box(20, 30, 275, 285)  # 256 pixel centers per side
    patch = crop(frame, box, (256, 256))
    assert torch.equal(patch, frame[:, 30:286, 20:276])
    assert torch.equal(paste_composite(frame, box, patch), frame)


def test_paste_outside_frame_rejected():
    with pytest.raises(ValueError):
        paste_composite(torch.zeros(3, 8, 8), Box(2, 2, 8.5, 7), torch.zeros(3, 2, 2))


@given(
    st.integers(0, 20), st.integers(0, 20), st.integers(1, 11), st.integers(1, 11),
    st.floats(0.0, 0.9), st.floats(0.0, 0.9),
)
def test_paste_never_touches_pixels_outside_extent(x1, y1, bw, bh, fx, fy):
    torch.manual_seed(x1 * 31 + y1)
    frame = torch.rand(3, 32, 32)
    box = Box(x1 + fx, y1 + fy, x1 + fx + bw, y1 + fy + bh)
    out = paste_composite(frame, box, torch.rand(3, 6, 6))
    c0, r0, c1, r1 = pixel_extent(box)
    keep = torch.ones(32, 32, dtype=torch.bool)
    keep[r0 : r1 + 1, c0 : c1 + 1] = False
    assert torch.equal(out[:, keep], frame[:, keep])


@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_grid_sample_is_linear_in_image(a, b):
    torch.manual_seed(0)
    u, v = torch.rand(2, 3, 6, 6, dtype=torch.float64)
    grid = torch.rand(4, 4, 2, dtype=torch.float64) * 5
    lhs = grid_sample(a * u + b * v, grid)
    rhs = a * grid_sample(u, grid) + b * grid_sample(v, grid)
    assert torch.allclose(lhs, rhs, atol=1e-12)


@given(st.floats(0.0, 40.0), st.floats(0.0, 40.0), st.floats(0.5, 20.0), st.floats(0.5, 20.0), st.floats(0.1, 3.0))
def test_enlarge_stays_in_bounds(x, y, bw, bh, factor):
    b = Box(x, y, x + bw, y + bh)
    try:
        e = enlarge_box(b, factor, (64, 64))
    except ValueError:
        return
    assert 0 <= e.x1 < e.x2 <= 63 and 0 <= e.y1 < e.y2 <= 63
