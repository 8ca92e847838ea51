"""Compact stereo backbone: shared encoder, group-wise correlation volume,
soft-argmin disparity regression, and bilinear descriptor sampling.

The encoder downsamples by a fixed stride of 4 and deliberately uses no
normalization layers: features stay shift-equivariant and independent of
batch composition, which keeps evaluation deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ContractError

STRIDE = 4
EPS = 1e-8


@dataclass
class FeaturePair:
    f_l: torch.Tensor  # (B, C, H/s, W/s)
    f_r: torch.Tensor
    stride: int = STRIDE

    @property
    def channels(self) -> int:
        return self.f_l.shape[1]


@dataclass
class DisparityPrediction:
    disp: torch.Tensor       # (B, H, W) full resolution
    disp_aux: torch.Tensor   # (B, H, W) from the raw (unaggregated) volume


@dataclass
class DescriptorSet:
    """Unit-norm descriptors, one row per point, aligned with a PointSet."""

    vectors: torch.Tensor  # (k, C)

    def __len__(self) -> int:
        return self.vectors.shape[0]


class ResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        out = self.conv2(F.relu(self.conv1(x)))
        return F.relu(out + x)


class FeatureEncoder(nn.Module):
    """Shared-weight encoder: two stride-2 convs then residual blocks."""

    def __init__(self, channels: int = 64, blocks: int = 6):
        super().__init__()
        mid = max(channels // 2, 8)
        self.stem = nn.Sequential(
            nn.Conv2d(1, mid, 3, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(mid, channels, 3, stride=2, padding=1), nn.ReLU(inplace=True),
        )
        self.blocks = nn.Sequential(*[ResBlock(channels) for _ in range(blocks)])
        self.head = nn.Conv2d(channels, channels, 3, padding=1)  # signed output

    def forward(self, x):
        return self.head(self.blocks(self.stem(x)))


def _check_image(t: torch.Tensor) -> torch.Tensor:
    if t.dim() == 2:
        t = t[None, None]
    elif t.dim() == 3:
        t = t[:, None]
    if t.dim() != 4 or t.shape[1] != 1:
        raise ContractError(f"expected grayscale image tensor, got shape {tuple(t.shape)}")
    if t.shape[-1] % STRIDE or t.shape[-2] % STRIDE:
        raise ContractError(f"image size {tuple(t.shape[-2:])} must be divisible by {STRIDE}")
    return t


def build_cost_volume(fp: FeaturePair, d_max: int, groups: int = 8) -> torch.Tensor:
    """Group-wise cosine correlation volume of shape (B, d_max/stride, H', W').

    Entry (d, y, x) is the mean over groups of the cosine similarity between
    f_l[:, y, x] and f_r[:, y, x-d]; shifts past the left border get the
    minimum-correlation sentinel -1.
    """
    f_l, f_r = fp.f_l, fp.f_r
    b, c, h, w = f_l.shape
    if d_max % fp.stride:
        raise ContractError(f"d_max={d_max} must be divisible by stride {fp.stride}")
    if c % groups:
        raise ContractError(f"channels {c} not divisible by {groups} groups")
    bins = d_max // fp.stride
    ln = f_l.view(b, groups, c // groups, h, w)
    rn = f_r.view(b, groups, c // groups, h, w)
    ln = ln / ln.norm(dim=2, keepdim=True).clamp_min(EPS)
    rn = rn / rn.norm(dim=2, keepdim=True).clamp_min(EPS)
    volume = f_l.new_full((b, bins, h, w), -1.0)
    for d in range(bins):
        if d == 0:
            corr = (ln * rn).sum(dim=2).mean(dim=1)
            volume[:, 0] = corr
        elif d < w:
            corr = (ln[..., d:] * rn[..., :w - d]).sum(dim=2).mean(dim=1)
            volume[:, d, :, d:] = corr
    return volume


def regress_disparity(volume: torch.Tensor, stride: int = STRIDE) -> torch.Tensor:
    """Soft-argmin: softmax over the disparity axis, expectation over bins,
    bilinear upsample by `stride`, scaled to full-resolution pixels."""
    squeeze = volume.dim() == 3
    if squeeze:
        volume = volume[None]
    if volume.dim() != 4:
        raise ContractError(f"cost volume must be (B,D,H,W), got {tuple(volume.shape)}")
    prob = torch.softmax(volume, dim=1)
    bins = torch.arange(volume.shape[1], dtype=volume.dtype, device=volume.device)
    cells = (prob * bins.view(1, -1, 1, 1)).sum(dim=1)
    disp = F.interpolate(cells[:, None], scale_factor=stride, mode="bilinear",
                         align_corners=False)[:, 0] * stride
    return disp[0] if squeeze else disp


class CostAggregator(nn.Module):
    """3-layer 3D conv stack refining the correlation volume."""

    def __init__(self, hidden: int = 16):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv3d(1, hidden, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv3d(hidden, hidden, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv3d(hidden, 1, 3, padding=1),
        )

    def forward(self, volume):
        return self.net(volume[:, None])[:, 0] + volume


class StereoNet(nn.Module):
    def __init__(self, channels: int = 64, d_max: int = 64, groups: int = 8,
                 blocks: int = 6):
        super().__init__()
        if d_max % STRIDE or d_max < STRIDE:
            raise ContractError(f"d_max={d_max} must be a positive multiple of {STRIDE}")
        self.channels = channels
        self.d_max = d_max
        self.groups = groups
        self.encoder = FeatureEncoder(channels, blocks)
        self.aggregator = CostAggregator()

    def extract_features(self, left, right) -> FeaturePair:
        left = _check_image(left)
        right = _check_image(right)
        if left.shape != right.shape:
            raise ContractError(f"left/right shapes differ: {left.shape} vs {right.shape}")
        return FeaturePair(self.encoder(left), self.encoder(right))

    def forward(self, left, right):
        fp = self.extract_features(left, right)
        volume = build_cost_volume(fp, self.d_max, self.groups)
        refined = self.aggregator(volume)
        pred = DisparityPrediction(
            disp=regress_disparity(refined, STRIDE),
            disp_aux=regress_disparity(volume, STRIDE),
        )
        return pred, fp


def sample_descriptors(feature_map: torch.Tensor, coords, stride: int = STRIDE) -> DescriptorSet:
    """Bilinearly sample unit-norm descriptors at full-resolution coords (x, y).

    Coordinates map to feature cells as coords/stride; border cells clamp.
    The sampling is differentiable so gradients reach the feature map.
    """
    if feature_map.dim() != 3:
        raise ContractError(f"feature map must be (C,H,W), got {tuple(feature_map.shape)}")
    if not torch.is_tensor(coords):
        coords = torch.as_tensor(
            getattr(coords, "coords", coords), dtype=feature_map.dtype,
            device=feature_map.device)
    coords = coords.reshape(-1, 2).to(feature_map.dtype)
    c, h, w = feature_map.shape
    if len(coords) == 0:
        return DescriptorSet(feature_map.new_zeros((0, c)))
    if ((coords[:, 0] < 0).any() or (coords[:, 0] >= w * stride).any()
            or (coords[:, 1] < 0).any() or (coords[:, 1] >= h * stride).any()):
        raise ContractError("point coordinates outside image bounds")
    x = coords[:, 0] / stride
    y = coords[:, 1] / stride
    x0 = x.floor().long().clamp(0, w - 1)
    y0 = y.floor().long().clamp(0, h - 1)
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)
    fx = (x - x0.to(x.dtype)).clamp(0, 1)
    fy = (y - y0.to(y.dtype)).clamp(0, 1)
    f00 = feature_map[:, y0, x0]
    f01 = feature_map[:, y0, x1]
    f10 = feature_map[:, y1, x0]
    f11 = feature_map[:, y1, x1]
    desc = (f00 * (1 - fy) * (1 - fx) + f01 * (1 - fy) * fx
            + f10 * fy * (1 - fx) + f11 * fy * fx).transpose(0, 1)
    desc = desc / desc.norm(dim=1, keepdim=True).clamp_min(EPS)
    return DescriptorSet(desc)
