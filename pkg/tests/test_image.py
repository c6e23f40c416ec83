import numpy as np
import pytest
import torch

from msfuse.image import (Heatmap, ResidualBlock3D, ResidualEncoder3D, augment_rotate, embed_volume, grad_cam,
                          rotate, rotation_matrix)
from msfuse.synth import Volume, render_volume


def test_rotation_matrix_orthonormal():
    m = rotation_matrix([10.0, -20.0, 5.0])
    np.testing.assert_allclose(m @ m.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(m) == pytest.approx(1.0)


def test_zero_rotation_is_identity():
    v = np.random.default_rng(0).random((8, 8, 6)).astype(np.float32)
    np.testing.assert_allclose(rotate(v, [0, 0, 0]), v, atol=1e-6)


def test_augment_probability_zero_copies():
    v = Volume((8, 8, 8), np.ones((8, 8, 8), dtype=np.float32))
    out = augment_rotate(v, np.random.default_rng(0), probability=0.0)
    assert out.voxels is not v.voxels and np.array_equal(out.voxels, v.voxels)


def test_small_angle_barely_changes_volume():
    vol, _ = render_volume(0.6, "FLAIR", 3, (16, 16, 8))
    out = augment_rotate(vol, np.random.default_rng(1), probability=1.0, max_angle=0.02)
    inner = (slice(2, -2),) * 3
    assert np.abs(out.voxels[inner] - vol.voxels[inner]).max() < 0.05


def test_encoder_shapes_and_min_dims():
    enc = ResidualEncoder3D(width=4, embed_dim=64)
    assert enc(torch.zeros(2, 1, 16, 16, 8)).shape == (2, 64)
    with pytest.raises(ValueError):
        enc(torch.zeros(1, 1, 4, 16, 16))


def test_residual_block_identity_when_convs_zero():
    blk = ResidualBlock3D(2)
    for conv in (blk.conv1, blk.conv2):
        torch.nn.init.zeros_(conv.weight)
        torch.nn.init.zeros_(conv.bias)
    x = torch.rand(1, 2, 4, 4, 4)
    assert torch.equal(blk(x), x)


def test_embed_volume_deterministic():
    enc = ResidualEncoder3D(width=4)
    vol, _ = render_volume(0.5, "T2", 1, (16, 16, 8))
    assert np.array_equal(embed_volume(vol, enc), embed_volume(vol, enc))


@pytest.mark.parametrize("target", ["closeness", "distance"])
def test_grad_cam_nonnegative_and_shaped(target):
    torch.manual_seed(0)
    enc = ResidualEncoder3D(width=4)
    vol, _ = render_volume(0.8, "FLAIR", 2, (16, 16, 8))
    heat = grad_cam(vol, enc, target=target)
    assert isinstance(heat, Heatmap)
    assert heat.voxels.shape == (16, 16, 8)
    assert heat.coarse.shape == (8, 8, 4)
    assert np.all(heat.voxels >= 0) and np.all(heat.coarse >= 0)
    assert all(0 <= i < s for i, s in zip(heat.argmax(), heat.voxels.shape))


def test_grad_cam_rejects_unknown_target():
    with pytest.raises(ValueError):
        grad_cam(np.zeros((8, 8, 8), dtype=np.float32), ResidualEncoder3D(width=2), target="logit")


def test_augment_deterministic_and_finite():
    vol, _ = render_volume(0.5, "T2", 4, (16, 16, 8))
    a = augment_rotate(vol, np.random.default_rng(9), probability=1.0)
    b = augment_rotate(vol, np.random.default_rng(9), probability=1.0)
    assert np.array_equal(a.voxels, b.voxels)
    assert a.dims == vol.dims and np.isfinite(a.voxels).all()


def test_zero_volumes_give_bias_embedding():
    enc = ResidualEncoder3D(width=4)
    torch.nn.init.zeros_(enc.proj.bias)
    z1 = embed_volume(np.zeros((8, 8, 8), dtype=np.float32), enc)
    z2 = embed_volume(np.zeros((8, 8, 8), dtype=np.float32), enc)
    assert np.array_equal(z1, z2)


def test_zero_projection_gives_zero_heatmap():
    enc = ResidualEncoder3D(width=4)
    torch.nn.init.zeros_(enc.proj.weight)
    vol, _ = render_volume(0.7, "FLAIR", 1, (16, 16, 8))
    assert np.all(grad_cam(vol, enc).voxels == 0)


def _conv3d(x, w, b, stride):
    """Direct convolution, padding 1, for (C, X, Y, Z) arrays."""
    c_out, c_in, k = w.shape[0], w.shape[1], w.shape[2]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
    dims = [(x.shape[i + 1] + 2 - k) // stride + 1 for i in range(3)]
    cols = np.lib.stride_tricks.sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))
    cols = cols[:, ::stride, ::stride, ::stride][:, :dims[0], :dims[1], :dims[2]]
    return np.einsum("cxyzijk,ocijk->oxyz", cols, w) + b[:, None, None, None]


def test_forward_matches_straight_line_oracle():
    torch.manual_seed(0)
    enc = ResidualEncoder3D(width=4, embed_dim=64)
    vol = np.random.default_rng(0).random((32, 32, 16)).astype(np.float32)
    p = {k: v.detach().double().numpy() for k, v in enc.state_dict().items()}
    x = vol[None].astype(np.float64)
    x = x - np.sort(x.ravel())[(x.size - 1) // 2]
    h = np.maximum(_conv3d(x, p["stem.weight"], p["stem.bias"], 2), 0)
    for i in range(2):
        inner = np.maximum(_conv3d(h, p[f"blocks.{i}.conv1.weight"], p[f"blocks.{i}.conv1.bias"], 1), 0)
        h = np.maximum(h + _conv3d(inner, p[f"blocks.{i}.conv2.weight"], p[f"blocks.{i}.conv2.bias"], 1), 0)
    ref = p["proj.weight"] @ h.mean(axis=(1, 2, 3)) + p["proj.bias"]
    np.testing.assert_allclose(embed_volume(vol, enc), ref, rtol=0, atol=1e-5)
