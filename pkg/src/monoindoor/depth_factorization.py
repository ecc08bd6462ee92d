"""Depth factorization: relative depth from an encoder-decoder, global scale from an attention-guided regressor."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

REL_MIN = 0.01
REL_MAX = 1.0
MIN_SCALE = 1e-3
# metric range of the backbone variant without a scale branch
BACKBONE_MIN_DEPTH = 0.1
BACKBONE_MAX_DEPTH = 10.0
# encoder input normalization, as used by ImageNet-style backbones
IMAGE_MEAN = 0.45
IMAGE_STD = 0.225


def he_init(module: nn.Module):
    """He-normal weights and zero biases for every conv in ``module``."""
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


@dataclass(frozen=True)
class ScaleBins:
    d_max: float = 10.0
    n_bins: int = 101

    def __post_init__(self):
        if self.n_bins < 2:
            raise ValueError("need at least two scale bins")
        if not self.d_max > 0:
            raise ValueError("d_max must be positive")

    def centers(self, dtype=torch.float64, device=None) -> torch.Tensor:
        k = torch.arange(self.n_bins, dtype=dtype, device=device)
        return k * (self.d_max / (self.n_bins - 1))


@dataclass
class FactorizedDepth:
    """relative ``(B, H, W)`` in (0, 1], scale ``(B,)`` metres, metric = scale * relative."""

    relative: torch.Tensor
    scale: torch.Tensor
    metric: torch.Tensor

    @classmethod
    def compose(cls, relative: torch.Tensor, scale: torch.Tensor) -> "FactorizedDepth":
        return cls(relative, scale, scale[:, None, None] * relative)

    def __getitem__(self, idx) -> "FactorizedDepth":
        return FactorizedDepth(self.relative[idx], self.scale[idx], self.metric[idx])


def sigmoid_to_relative_depth(sigma: torch.Tensor, min_depth: float = REL_MIN, max_depth: float = REL_MAX) -> torch.Tensor:
    """Interpolate inverse depth between the bounds: sigma=0 is far, sigma=1 is near."""
    if not bool(torch.isfinite(sigma).all()) or bool((sigma < 0).any()) or bool((sigma > 1).any()):
        raise ValueError("sigma must lie in [0, 1]")
    disp = (1.0 / max_depth) * (1 - sigma) + (1.0 / min_depth) * sigma
    return 1.0 / disp


def probabilistic_scale_regression(logits: torch.Tensor, bins: ScaleBins) -> torch.Tensor:
    """Expected bin centre under ``softmax(logits)`` along the last dimension."""
    probs = torch.softmax(logits, dim=-1)
    return (probs * bins.centers(logits.dtype, logits.device)).sum(-1)


class SelfAttention(nn.Module):
    """Non-local block: ``out = W_out (softmax(q^T k) v) + F`` over flattened positions."""

    def __init__(self, channels: int, inner: Optional[int] = None):
        super().__init__()
        inner = inner or channels
        self.query = nn.Conv2d(channels, inner, 1, bias=False)
        self.key = nn.Conv2d(channels, inner, 1, bias=False)
        self.value = nn.Conv2d(channels, inner, 1, bias=False)
        self.out = nn.Conv2d(inner, channels, 1, bias=False)

    def forward(self, x):
        b, c, h, w = x.shape
        q = self.query(x).flatten(2)  # B, C', N
        k = self.key(x).flatten(2)
        v = self.value(x).flatten(2)
        attn = torch.softmax(q.transpose(1, 2) @ k, dim=-1)  # B, N(query), N(key)
        g = (attn @ v.transpose(1, 2)).transpose(1, 2).reshape(b, -1, h, w)
        return self.out(g) + x


def conv3x3(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1)


class ResidualBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = conv3x3(cin, cout, stride)
        self.conv2 = conv3x3(cout, cout)
        self.skip = None
        if stride != 1 or cin != cout:
            self.skip = nn.Conv2d(cin, cout, 1, stride=stride)

    def forward(self, x):
        y = self.conv2(F.relu(self.conv1(x)))
        return F.relu(y + (x if self.skip is None else self.skip(x)))


class DepthEncoder(nn.Module):
    """Residual encoder; returns features at 1/2, 1/4, 1/8, 1/16 and the 1/32 head."""

    def __init__(self, widths: Sequence[int] = (32, 64, 128, 256), head_channels: int = 512, in_channels: int = 3):
        super().__init__()
        self.widths = tuple(widths)
        self.stem = conv3x3(in_channels, widths[0], stride=2)
        stages = [ResidualBlock(widths[0], widths[0])]
        for cin, cout in zip(widths[:-1], widths[1:]):
            stages.append(ResidualBlock(cin, cout, stride=2))
        self.stages = nn.ModuleList(stages)
        self.head = ResidualBlock(widths[-1], head_channels, stride=2)
        self.channels = self.widths + (head_channels,)
        he_init(self)

    def forward(self, x):
        feats = []
        x = F.relu(self.stem((x - IMAGE_MEAN) / IMAGE_STD))
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        feats.append(self.head(x))
        return feats


class DepthDecoder(nn.Module):
    """Skip-connected decoder emitting a single sigmoid map at input resolution."""

    def __init__(self, enc_channels: Sequence[int], widths: Sequence[int] = (16, 32, 64, 128, 256), sigma_bias: float = -4.0):
        super().__init__()
        enc_channels = list(enc_channels)
        n = len(enc_channels)
        self.upconv = nn.ModuleList()
        self.iconv = nn.ModuleList()
        cin = enc_channels[-1]
        # level i upsamples to the resolution of encoder feature i-1 (or full-res/2 for i=0)
        for i in range(n - 1, -1, -1):
            cout = widths[i]
            skip = enc_channels[i - 1] if i > 0 else 0
            self.upconv.append(conv3x3(cin, cout))
            self.iconv.append(conv3x3(cout + skip, cout))
            cin = cout
        self.out = conv3x3(cin, 1)
        nn.init.constant_(self.out.bias, sigma_bias)

    def forward(self, feats, size):
        x = feats[-1]
        n = len(feats)
        for j, (up, ic) in enumerate(zip(self.upconv, self.iconv)):
            i = n - 1 - j
            x = F.elu(up(x))
            target = feats[i - 1].shape[-2:] if i > 0 else size
            x = F.interpolate(x, size=target, mode="nearest")
            if i > 0:
                x = torch.cat([x, feats[i - 1]], 1)
            x = F.elu(ic(x))
        return torch.sigmoid(self.out(x)).squeeze(1)


class ScaleRegressor(nn.Module):
    """Attention, two residual conv stages, pooled, three FC layers, probabilistic head."""

    def __init__(self, in_channels: int = 512, hidden_channels: int = 1024, fc_width: int = 1024,
                 bins: ScaleBins = ScaleBins(), dropout: float = 0.5):
        super().__init__()
        self.bins = bins
        self.attention = SelfAttention(in_channels)
        self.block1 = ResidualBlock(in_channels, in_channels)
        self.down = nn.Conv2d(in_channels, hidden_channels, 1, stride=2)
        self.block2 = ResidualBlock(hidden_channels, hidden_channels)
        self.fc1 = nn.Linear(hidden_channels, fc_width)
        self.fc2 = nn.Linear(fc_width, fc_width)
        self.fc3 = nn.Linear(fc_width, bins.n_bins)
        self.dropout = nn.Dropout(dropout)
        self.clamp_count = 0

    def logits(self, features):
        x = self.attention(features)
        x = self.block1(x)
        x = F.relu(self.down(x))
        x = self.block2(x)
        x = x.mean(dim=(2, 3))
        x = self.dropout(F.relu(self.fc1(x)))
        x = self.dropout(F.relu(self.fc2(x)))
        return self.fc3(x)

    def forward(self, features):
        scale = probabilistic_scale_regression(self.logits(features), self.bins)
        low = scale < MIN_SCALE
        if bool(low.any()):
            self.clamp_count += int(low.sum())
            warnings.warn(f"scale below {MIN_SCALE} m clamped ({self.clamp_count} so far)")
            scale = scale.clamp(min=MIN_SCALE)
        return scale


class DepthNet(nn.Module):
    """Relative depth and global scale from a single image.

    With ``factorized=False`` the scale branch is dropped and the relative map is
    stretched to a fixed metric range, which is the plain backbone.
    """

    def __init__(self, encoder_widths=(32, 64, 128, 256), head_channels=512, decoder_widths=(16, 32, 64, 128, 256),
                 scale_hidden=1024, fc_width=1024, bins: ScaleBins = ScaleBins(), dropout=0.5,
                 factorized=True, sigma_bias=-4.0):
        super().__init__()
        self.factorized = factorized
        self.encoder = DepthEncoder(encoder_widths, head_channels)
        self.decoder = DepthDecoder(self.encoder.channels, decoder_widths, sigma_bias)
        self.scale_net = ScaleRegressor(head_channels, scale_hidden, fc_width, bins, dropout) if factorized else None

    def forward(self, image) -> FactorizedDepth:
        feats = self.encoder(image)
        sigma = self.decoder(feats, image.shape[-2:])
        relative = sigmoid_to_relative_depth(sigma)
        if self.factorized:
            scale = self.scale_net(feats[-1])
        else:
            scale = relative.new_full((relative.shape[0],), BACKBONE_MAX_DEPTH / REL_MAX)
        return FactorizedDepth.compose(relative, scale)


def predict_depth(image: torch.Tensor, model: Optional[DepthNet]) -> FactorizedDepth:
    """Inference-mode depth prediction (dropout disabled)."""
    if model is None:
        raise ValueError("depth model is not initialized")
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            return model(image)
    finally:
        model.train(was_training)
