"""Volumetric image channel: residual 3D CNN, rotation augmentation, Grad-CAM."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from torch import nn

from .metric import anchor_distances
from .synth import Volume

MIN_DIMS = (8, 8, 8)

def rotation_matrix(angles_deg):
    ax, ay, az = (math.radians(a) for a in angles_deg)
    rx = np.array([[1, 0, 0], [0, math.cos(ax), -math.sin(ax)], [0, math.sin(ax), math.cos(ax)]])
    ry = np.array([[math.cos(ay), 0, math.sin(ay)], [0, 1, 0], [-math.sin(ay), 0, math.cos(ay)]])
    rz = np.array([[math.cos(az), -math.sin(az), 0], [math.sin(az), math.cos(az), 0], [0, 0, 1]])
    return rz @ ry @ rx


def rotate(voxels, angles_deg):
    """Rotate about the volume center with trilinear resampling, zero fill."""
    m = rotation_matrix(angles_deg)
    center = (np.array(voxels.shape) - 1) / 2.0
    offset = center - m @ center
    out = ndimage.affine_transform(voxels.astype(np.float64), m, offset=offset, order=1, mode="constant", cval=0.0)
    return out.astype(voxels.dtype)


def augment_rotate(volume, rng, probability=0.5, max_angle=0.02):
    """With ``probability``, rotate by angles uniform in [-max_angle, max_angle] degrees on all axes."""
    voxels = volume.voxels if isinstance(volume, Volume) else volume
    if rng.random() >= probability:
        out = voxels.copy()
    else:
        out = rotate(voxels, rng.uniform(-max_angle, max_angle, size=3))
    return Volume(voxels.shape, out) if isinstance(volume, Volume) else out


def center_intensity(x):
    """Subtract each volume's (lower) median so background sits near zero.

    Without it the stem can key on the bright background rather than on
    lesions, and Grad-CAM then has nothing local to point at.
    """
    med = x.flatten(1).median(dim=1).values
    return x - med.view(-1, *([1] * (x.dim() - 1)))


class ResidualBlock3D(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv3d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv3d(channels, channels, 3, padding=1)

    def forward(self, x):
        return torch.relu(x + self.conv2(torch.relu(self.conv1(x))))


class ResidualEncoder3D(nn.Module):
    """Stem conv (stride 2), residual blocks, global average pool, projection."""

    def __init__(self, width=8, embed_dim=64, blocks=2):
        super().__init__()
        self.stem = nn.Conv3d(1, width, 3, stride=2, padding=1)
        self.blocks = nn.Sequential(*[ResidualBlock3D(width) for _ in range(blocks)])
        self.proj = nn.Linear(width, embed_dim)
        self.embed_dim = embed_dim

    def features(self, x):
        if any(s < m for s, m in zip(x.shape[-3:], MIN_DIMS)):
            raise ValueError(f"volume dims {tuple(x.shape[-3:])} below minimum {MIN_DIMS}")
        return self.blocks(torch.relu(self.stem(center_intensity(x))))

    def head(self, feats):
        return self.proj(feats.mean(dim=(2, 3, 4)))

    def forward(self, x):
        """``x`` (B, 1, X, Y, Z) -> (B, embed_dim)."""
        return self.head(self.features(x))


def as_batch(voxels, dtype=torch.float32):
    arr = np.stack([v.voxels if isinstance(v, Volume) else v for v in voxels])
    return torch.as_tensor(arr, dtype=dtype).unsqueeze(1)


@torch.no_grad()
def embed_volume(volume, encoder):
    dtype = next(encoder.parameters()).dtype
    was = encoder.training
    encoder.eval()
    try:
        return encoder(as_batch([volume], dtype))[0].double().numpy()
    finally:
        encoder.train(was)


@torch.no_grad()
def embed_volumes(voxels, encoder, batch_size=32):
    dtype = next(encoder.parameters()).dtype
    encoder.eval()
    out = [encoder(as_batch(voxels[i:i + batch_size], dtype)) for i in range(0, len(voxels), batch_size)]
    return torch.cat(out).double().numpy() if out else np.zeros((0, encoder.embed_dim))


@dataclass
class Heatmap:
    coarse: np.ndarray     # at the last conv feature-map resolution
    voxels: np.ndarray     # upsampled to input dims

    def argmax(self):
        return tuple(int(i) for i in np.unravel_index(np.argmax(self.voxels), self.voxels.shape))


def grad_cam(volume, encoder, anchor=None, target="closeness"):
    """Grad-CAM over the last residual block.

    The scalar target is the embedding's distance to the anchor; with
    ``target="closeness"`` its sign is flipped so that evidence for the
    positive class (pulled toward the anchor) lights up.
    """
    if target not in ("closeness", "distance"):
        raise ValueError(f"unknown Grad-CAM target {target!r}")
    dtype = next(encoder.parameters()).dtype
    was = encoder.training
    encoder.eval()
    try:
        x = as_batch([volume], dtype)
        feats = encoder.features(x)
        d = anchor_distances(encoder.head(feats), None if anchor is None else torch.as_tensor(anchor, dtype=dtype))[0]
        score = -d if target == "closeness" else d
        (grads,) = torch.autograd.grad(score, feats)
        weights = grads.mean(dim=(2, 3, 4), keepdim=True)
        cam = torch.relu((weights * feats).sum(dim=1, keepdim=True)).detach()
        up = F.interpolate(cam, size=tuple(x.shape[-3:]), mode="trilinear", align_corners=False)
    finally:
        encoder.train(was)
    return Heatmap(cam[0, 0].double().numpy(), np.maximum(up[0, 0].double().numpy(), 0.0))
