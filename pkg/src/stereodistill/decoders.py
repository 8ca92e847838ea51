"""Train-time-only heads: interest-map decoding from backbone features and
attention-based point matching with a dustbin-augmented assignment matrix.

Both heads exist only while training; evaluation never constructs them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ContractError, DegenerateInputError
from .stereonet import STRIDE, DescriptorSet, FeaturePair


@dataclass
class Assignment:
    """Soft correspondence matrix of shape (m+1, n+1); the last row and
    column are dustbins for unmatched points."""

    matrix: torch.Tensor

    @property
    def m(self) -> int:
        return self.matrix.shape[0] - 1

    @property
    def n(self) -> int:
        return self.matrix.shape[1] - 1

    def validate(self, tol: float = 1e-3, require_zero_corner: bool = False) -> None:
        p = self.matrix
        if p.dim() != 2 or p.shape[0] < 2 or p.shape[1] < 2:
            raise ContractError(f"assignment must be (m+1)x(n+1), got {tuple(p.shape)}")
        if (p < -tol).any() or (p > 1 + tol).any():
            raise ContractError("assignment entries outside [0, 1]")
        row_sums = p[:-1].sum(dim=1)
        col_sums = p[:, :-1].sum(dim=0)
        if (row_sums - 1).abs().max() > tol or (col_sums - 1).abs().max() > tol:
            raise ContractError("assignment marginals drift beyond tolerance")
        if require_zero_corner and float(p[-1, -1]) != 0.0:
            raise ContractError("dustbin-dustbin corner must be exactly zero")


def sinkhorn_normalize(scores: torch.Tensor, iters: int,
                       constrain_dustbins: bool = True) -> Assignment:
    """Log-domain alternating row/column normalization of a dustbin-augmented
    score matrix; returns the exponentiated result.

    With constrain_dustbins=True every line is scaled to its marginal
    (rows: 1,...,1,n; columns: 1,...,1,m). With False the dustbin row and
    column are left as free absorbers and only the m real rows / n real
    columns are scaled to 1, which keeps a zero dustbin-dustbin corner
    feasible. iters=0 returns exp(scores) untouched.
    """
    if scores.dim() != 2 or scores.shape[0] < 2 or scores.shape[1] < 2:
        raise ContractError(f"scores must be (m+1)x(n+1), got {tuple(scores.shape)}")
    m, n = scores.shape[0] - 1, scores.shape[1] - 1
    z = scores
    if constrain_dustbins:
        log_r = scores.new_zeros(m + 1)
        log_r[m] = math.log(n)
        log_c = scores.new_zeros(n + 1)
        log_c[n] = math.log(m)
        for _ in range(iters):
            z = z + (log_r - torch.logsumexp(z, dim=1)).unsqueeze(1)
            z = z + (log_c - torch.logsumexp(z, dim=0)).unsqueeze(0)
    else:
        for _ in range(iters):
            top = z[:m] - torch.logsumexp(z[:m], dim=1, keepdim=True)
            z = torch.cat([top, z[m:]], dim=0)
            left = z[:, :n] - torch.logsumexp(z[:, :n], dim=0, keepdim=True)
            z = torch.cat([left, z[:, n:]], dim=1)
    return Assignment(z.exp())


class Bottleneck(nn.Module):
    """Residual bottleneck: 1x1 reduce, 3x3 process, 1x1 expand."""

    def __init__(self, channels: int, reduction: int = 2):
        super().__init__()
        mid = max(channels // reduction, 4)
        self.reduce = nn.Conv2d(channels, mid, 1)
        self.conv = nn.Conv2d(mid, mid, 3, padding=1)
        self.expand = nn.Conv2d(mid, channels, 1)

    def forward(self, x):
        out = F.relu(self.reduce(x))
        out = F.relu(self.conv(out))
        return F.relu(self.expand(out) + x)


class IntraDecoder(nn.Module):
    """Decodes full-resolution interest logits from both views' features
    with shared weights."""

    def __init__(self, channels: int = 64, blocks: int = 2):
        super().__init__()
        self.blocks = nn.Sequential(*[Bottleneck(channels) for _ in range(blocks)])
        self.head = nn.Conv2d(channels, 1, 1)

    def _decode(self, feat):
        logits = self.head(self.blocks(feat))
        return F.interpolate(logits, scale_factor=STRIDE, mode="bilinear",
                             align_corners=False)[:, 0]

    def forward(self, fp: FeaturePair):
        return self._decode(fp.f_l), self._decode(fp.f_r)


class MultiHeadAttention(nn.Module):
    def __init__(self, channels: int, heads: int):
        super().__init__()
        if channels % heads:
            raise ContractError(f"channels {channels} not divisible by {heads} heads")
        self.heads = heads
        self.dim = channels // heads
        self.proj_q = nn.Linear(channels, channels)
        self.proj_k = nn.Linear(channels, channels)
        self.proj_v = nn.Linear(channels, channels)
        self.merge = nn.Linear(channels, channels)

    def forward(self, x, source):
        q = self.proj_q(x).view(-1, self.heads, self.dim)
        k = self.proj_k(source).view(-1, self.heads, self.dim)
        v = self.proj_v(source).view(-1, self.heads, self.dim)
        attn = torch.einsum("ihd,jhd->hij", q, k) / math.sqrt(self.dim)
        weights = torch.softmax(attn, dim=-1)
        message = torch.einsum("hij,jhd->ihd", weights, v)
        return self.merge(message.reshape(len(x), -1))


class AttentionLayer(nn.Module):
    """One message-passing step: attention then a residual merge MLP."""

    def __init__(self, channels: int, heads: int):
        super().__init__()
        self.attention = MultiHeadAttention(channels, heads)
        self.mlp = nn.Sequential(
            nn.Linear(2 * channels, 2 * channels), nn.ReLU(inplace=True),
            nn.Linear(2 * channels, channels),
        )

    def forward(self, x, source):
        message = self.attention(x, source)
        return x + self.mlp(torch.cat([x, message], dim=1))


class PointEncoder(nn.Module):
    """Feedforward encoding of normalized (x/W, y/H, score) into C dims."""

    def __init__(self, channels: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(3, channels), nn.ReLU(inplace=True),
            nn.Linear(channels, channels),
        )

    def forward(self, geom):
        return self.net(geom)


class CrossDecoder(nn.Module):
    """Point-matching head: positional encoding added to descriptors,
    alternating self/cross attention, inner-product scores with a learned
    dustbin, and slack Sinkhorn normalization.

    num_layers=0 selects the decoder-free baseline: raw cosine similarity
    between descriptors goes straight into the dustbin/normalization stage.
    """

    def __init__(self, channels: int = 64, num_layers: int = 4, heads: int = 4,
                 sinkhorn_iters: int = 100):
        super().__init__()
        self.channels = channels
        self.num_layers = num_layers
        self.sinkhorn_iters = sinkhorn_iters
        self.alpha = nn.Parameter(torch.tensor(1.0))
        if num_layers > 0:
            self.posenc = PointEncoder(channels)
            self.layers = nn.ModuleList(
                [AttentionLayer(channels, heads) for _ in range(num_layers)])
            self.final_proj = nn.Linear(channels, channels)

    def _geometry(self, points, image_hw, like: torch.Tensor):
        height, width = image_hw
        coords = torch.as_tensor(points.coords, dtype=like.dtype, device=like.device)
        scores = torch.as_tensor(points.scores, dtype=like.dtype, device=like.device)
        return torch.stack([coords[:, 0] / width, coords[:, 1] / height, scores], dim=1)

    def forward(self, points_l, desc_l, points_r, desc_r, image_hw) -> Assignment:
        d_l = desc_l.vectors if isinstance(desc_l, DescriptorSet) else desc_l
        d_r = desc_r.vectors if isinstance(desc_r, DescriptorSet) else desc_r
        m, n = d_l.shape[0], d_r.shape[0]
        if m == 0 or n == 0:
            raise DegenerateInputError(f"cannot match empty point sets (m={m}, n={n})")
        if len(points_l) != m or len(points_r) != n:
            raise ContractError("descriptor count does not match point count")

        if self.num_layers == 0:
            scores = d_l @ d_r.transpose(0, 1)
        else:
            x_l = d_l + self.posenc(self._geometry(points_l, image_hw, d_l))
            x_r = d_r + self.posenc(self._geometry(points_r, image_hw, d_r))
            for idx, layer in enumerate(self.layers):
                if idx % 2 == 0:  # self-attention within each view
                    x_l = layer(x_l, x_l)
                    x_r = layer(x_r, x_r)
                else:  # cross-attention between views, updated simultaneously
                    new_l = layer(x_l, x_r)
                    x_r = layer(x_r, x_l)
                    x_l = new_l
            p = self.final_proj(x_l)
            q = self.final_proj(x_r)
            scores = p @ q.transpose(0, 1) / math.sqrt(self.channels)

        alpha = self.alpha.to(scores.dtype)
        top = torch.cat([scores, alpha.expand(m, 1)], dim=1)
        corner = scores.new_full((1, 1), float("-inf"))
        bottom = torch.cat([alpha.expand(1, n), corner], dim=1)
        full = torch.cat([top, bottom], dim=0)
        return sinkhorn_normalize(full, self.sinkhorn_iters, constrain_dustbins=False)
