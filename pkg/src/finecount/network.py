"""Two-branch coupled architecture for category-aware crowd counting.

A shared fully-convolutional extractor feeds a density head and a soft
segmentation head at output stride 4. Segmentation features are refined
by iterated context propagation (hourglass encoder-decoder modules or
local graph convolutions), attenuated in low-density regions by a
dampening matrix derived from the first-stage density prediction. Each
branch is additionally conditioned on the other branch's prediction
(complementary attention), and per-category density maps are the
product of the refined segmentation and refined overall density.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

ACT_SLOPE = 0.1
OUTPUT_STRIDE = 4

PROPAGATION_KINDS = ("hourglass", "gcn", "none")
ATTENTION_KINDS = ("coatt", "naive", "none")


@dataclass(frozen=True)
class ArchConfig:
    """Architecture metadata; parameter shapes are a pure function of this."""

    k: int = 2
    in_channels: int = 1
    widths: tuple = (16, 16, 32, 32, 64)
    head_width: int = 32
    propagation: str = "hourglass"
    attention: str = "coatt"
    iterations: int = 3
    hourglass_depth: int = 2
    gcn_radius: int = 3
    dampening: float = 0.2
    epsilon: float = 1e-3

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if len(self.widths) != 5:
            raise ValueError("extractor needs exactly 5 layer widths")
        if self.propagation not in PROPAGATION_KINDS:
            raise ValueError(f"unknown propagation {self.propagation!r}")
        if self.attention not in ATTENTION_KINDS:
            raise ValueError(f"unknown attention {self.attention!r}")
        if self.propagation != "none" and self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.dampening < 0 or self.epsilon <= 0:
            raise ValueError("dampening must be >= 0 and epsilon > 0")

    @property
    def prop_channels(self) -> int:
        """Channel width entering the segmentation refinement path."""
        return self.head_width + (1 if self.attention == "coatt" else 0)

    @property
    def density_refine_channels(self) -> int:
        return self.head_width + (self.k + 1 if self.attention == "coatt" else 0)

    @property
    def min_input_side(self) -> int:
        if self.propagation == "hourglass":
            return OUTPUT_STRIDE * 2 ** self.hourglass_depth
        return OUTPUT_STRIDE

    def to_dict(self) -> dict:
        return {"k": self.k, "in_channels": self.in_channels,
                "widths": list(self.widths), "head_width": self.head_width,
                "propagation": self.propagation, "attention": self.attention,
                "iterations": self.iterations,
                "hourglass_depth": self.hourglass_depth,
                "gcn_radius": self.gcn_radius,
                "dampening": self.dampening, "epsilon": self.epsilon}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return cls(**d)


@dataclass
class ForwardOutputs:
    """All prediction maps of one forward pass, at stride 4.

    ``fine_grained`` is refined_seg[:, :k] * refined_density by
    construction. The raw segmentation logits are kept alongside the
    softmax maps so losses can take log-probabilities without underflow.
    Models without a segmentation branch leave those fields as None.
    """

    first_density: torch.Tensor          # (n, 1, h, w)
    refined_density: torch.Tensor        # (n, 1, h, w)
    fine_grained: torch.Tensor           # (n, k, h, w)
    first_seg: torch.Tensor | None = None      # (n, k+1, h, w)
    refined_seg: torch.Tensor | None = None    # (n, k+1, h, w)
    first_seg_logits: torch.Tensor | None = None
    refined_seg_logits: torch.Tensor | None = None
    dampening: torch.Tensor | None = None      # (n, 1, h, w)


def conv5(cin, cout):
    return nn.Conv2d(cin, cout, kernel_size=5, padding=2)


def pad_to_stride(x, stride=OUTPUT_STRIDE):
    h, w = x.shape[-2:]
    return F.pad(x, (0, (-w) % stride, 0, (-h) % stride))


def sum_pool(x):
    """2x2 mass-preserving pooling; odd trailing rows/cols are zero-padded in."""
    h, w = x.shape[-2:]
    x = F.pad(x, (0, w % 2, 0, h % 2))
    return F.avg_pool2d(x, 2) * 4.0


def dampening_matrix(first_density, dampening, epsilon):
    """Per-pixel propagation weight: 1 where density >= epsilon, else dampening.

    The density map is clamped at zero before thresholding; negative raw
    head outputs count as background.
    """
    active = first_density.clamp(min=0) >= epsilon
    one = torch.ones((), dtype=first_density.dtype, device=first_density.device)
    lam = torch.full((), dampening, dtype=first_density.dtype,
                     device=first_density.device)
    return torch.where(active, one, lam)


def naive_attention(features, attention_map):
    """Broadcast element-wise product of features with a per-pixel map."""
    if features.shape[-2:] != attention_map.shape[-2:]:
        raise ValueError(
            f"attention map {tuple(attention_map.shape)} does not align with "
            f"features {tuple(features.shape)}")
    return features * attention_map


def mix_fine_grained(seg, density, k):
    """Per-category maps: segmentation channel j times the overall density."""
    return seg[:, :k] * density


class SharedExtractor(nn.Module):
    """Five 5x5 conv layers with leaky activations and two 2x2 max-pools."""

    def __init__(self, widths, in_channels=1):
        super().__init__()
        w1, w2, w3, w4, w5 = widths
        self.conv1 = conv5(in_channels, w1)
        self.conv2 = conv5(w1, w2)
        self.conv3 = conv5(w2, w3)
        self.conv4 = conv5(w3, w4)
        self.conv5 = conv5(w4, w5)

    def forward(self, x):
        h = F.leaky_relu(self.conv1(x), ACT_SLOPE)
        h = F.max_pool2d(F.leaky_relu(self.conv2(h), ACT_SLOPE), 2)
        h = F.leaky_relu(self.conv3(h), ACT_SLOPE)
        h = F.max_pool2d(F.leaky_relu(self.conv4(h), ACT_SLOPE), 2)
        return F.leaky_relu(self.conv5(h), ACT_SLOPE)


class PredictionHead(nn.Module):
    """Conv5-mid + leaky activation, then a linear Conv5-out layer.

    forward returns (output, hidden) so refinement stages can reuse the
    32-channel branch features.
    """

    def __init__(self, cin, mid, cout):
        super().__init__()
        self.conv_a = conv5(cin, mid)
        self.conv_b = conv5(mid, cout)

    def forward(self, x):
        hidden = F.leaky_relu(self.conv_a(x), ACT_SLOPE)
        return self.conv_b(hidden), hidden


class HourglassModule(nn.Module):
    """One bottom-up/top-down pass at constant channel width.

    ``depth`` levels of (3x3 conv + leaky activation, 2x2 sum-preserving
    pool), a bottleneck conv, then nearest-neighbor upsampling with a
    skip-connection addition at each level. Output dims equal input dims.
    """

    def __init__(self, channels, depth=2):
        super().__init__()
        self.depth = depth
        self.encoders = nn.ModuleList(
            [nn.Conv2d(channels, channels, 3, padding=1) for _ in range(depth)])
        self.bottleneck = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        if min(x.shape[-2:]) < 2 ** self.depth:
            raise ValueError(
                f"feature map {tuple(x.shape[-2:])} too small for an "
                f"hourglass of depth {self.depth}")
        skips = []
        h = x
        for conv in self.encoders:
            h = F.leaky_relu(conv(h), ACT_SLOPE)
            skips.append(h)
            h = sum_pool(h)
        h = F.leaky_relu(self.bottleneck(h), ACT_SLOPE)
        for skip in reversed(skips):
            h = F.interpolate(h, size=skip.shape[-2:], mode="nearest") + skip
        return h


class LocalGraphConv(nn.Module):
    """Graph convolution over a local window with feature-similarity edges.

    Edge weights are cosine similarities between the center pixel's feature
    vector and each neighbor in a (2r+1)^2 window, clamped at 0 and
    row-normalized; aggregation is followed by a linear map and a leaky
    activation.
    """

    def __init__(self, channels, radius=3):
        super().__init__()
        self.radius = radius
        self.linear = nn.Conv2d(channels, channels, 1, bias=False)

    def forward(self, x):
        b, c, h, w = x.shape
        win = 2 * self.radius + 1
        neigh = F.unfold(x, win, padding=self.radius).view(b, c, win * win, h * w)
        center = x.view(b, c, 1, h * w)
        dot = (neigh * center).sum(dim=1)
        norms = neigh.norm(dim=1) * center.norm(dim=1)
        sim = (dot / norms.clamp(min=1e-12)).clamp(min=0)
        adj = sim / sim.sum(dim=1, keepdim=True).clamp(min=1e-12)
        agg = (neigh * adj.unsqueeze(1)).sum(dim=2).view(b, c, h, w)
        return F.leaky_relu(self.linear(agg), ACT_SLOPE)


class DensityAwarePropagation(nn.Module):
    """T refinement modules, each preceded by dampening multiplication."""

    def __init__(self, channels, kind, iterations, hourglass_depth=2, gcn_radius=3):
        super().__init__()
        if kind == "hourglass":
            blocks = [HourglassModule(channels, hourglass_depth)
                      for _ in range(iterations)]
        elif kind == "gcn":
            blocks = [LocalGraphConv(channels, gcn_radius)
                      for _ in range(iterations)]
        else:
            raise ValueError(f"unknown propagation kind {kind!r}")
        self.blocks = nn.ModuleList(blocks)

    def forward(self, features, dampening, module_inputs=None):
        if features.shape[-2:] != dampening.shape[-2:]:
            raise ValueError("features and dampening matrix are misaligned")
        h = features
        for block in self.blocks:
            h = h * dampening
            if module_inputs is not None:
                module_inputs.append(h.detach().clone())
            h = block(h)
        return h


class FirstStage(NamedTuple):
    density: torch.Tensor
    seg: torch.Tensor
    seg_logits: torch.Tensor
    shared: torch.Tensor
    density_feat: torch.Tensor
    seg_feat: torch.Tensor


class FirstStageNet(nn.Module):
    """Shared extractor plus first-stage density and segmentation heads."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        self.extractor = SharedExtractor(arch.widths, arch.in_channels)
        self.density_head = PredictionHead(arch.widths[-1], arch.head_width, 1)
        self.seg_head = PredictionHead(arch.widths[-1], arch.head_width, arch.k + 1)

    def forward(self, image) -> FirstStage:
        if min(image.shape[-2:]) < OUTPUT_STRIDE:
            raise ValueError(
                f"input {tuple(image.shape[-2:])} smaller than the output stride")
        x = pad_to_stride(image)
        shared = self.extractor(x)
        density, dfeat = self.density_head(shared)
        logits, sfeat = self.seg_head(shared)
        return FirstStage(density, torch.softmax(logits, dim=1), logits,
                          shared, dfeat, sfeat)


class SegmentNet(nn.Module):
    """First-stage-only model: category maps are first_seg * first_density."""

    kind = "segment"

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        self.first_stage = FirstStageNet(arch)

    def forward(self, image, module_inputs=None) -> ForwardOutputs:
        first = self.first_stage(image)
        fine = mix_fine_grained(first.seg, first.density, self.arch.k)
        return ForwardOutputs(first_density=first.density, refined_density=first.density,
                              fine_grained=fine, first_seg=first.seg,
                              refined_seg=first.seg,
                              first_seg_logits=first.seg_logits,
                              refined_seg_logits=first.seg_logits)


class TwoBranchNet(nn.Module):
    """Full model: first stage, guided propagation, cross-branch refinement."""

    kind = "ours"

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        self.first_stage = FirstStageNet(arch)
        if arch.propagation != "none":
            self.propagation = DensityAwarePropagation(
                arch.prop_channels, arch.propagation, arch.iterations,
                arch.hourglass_depth, arch.gcn_radius)
        else:
            self.propagation = None
        self.seg_refine = PredictionHead(arch.prop_channels, arch.head_width,
                                         arch.k + 1)
        self.density_refine = PredictionHead(arch.density_refine_channels,
                                             arch.head_width, 1)

    def forward(self, image, module_inputs=None) -> ForwardOutputs:
        if min(image.shape[-2:]) < self.arch.min_input_side:
            raise ValueError(
                f"input {tuple(image.shape[-2:])} below the minimum side "
                f"{self.arch.min_input_side} for this architecture")
        first = self.first_stage(image)
        # The dampening matrix is a constant during backpropagation: the
        # indicator is non-differentiable, so it is built from a detached copy.
        wd = dampening_matrix(first.density.detach(), self.arch.dampening,
                              self.arch.epsilon)

        if self.arch.attention == "coatt":
            h = torch.cat([first.seg_feat, first.density], dim=1)
        elif self.arch.attention == "naive":
            h = naive_attention(first.seg_feat, first.density)
        else:
            h = first.seg_feat
        if self.propagation is not None:
            h = self.propagation(h, wd, module_inputs)
        seg_logits, _ = self.seg_refine(h)
        refined_seg = torch.softmax(seg_logits, dim=1)

        if self.arch.attention == "coatt":
            d_in = torch.cat([first.density_feat, refined_seg], dim=1)
        elif self.arch.attention == "naive":
            d_in = naive_attention(first.density_feat, 1.0 - refined_seg[:, -1:])
        else:
            d_in = first.density_feat
        refined_density, _ = self.density_refine(d_in)

        fine = mix_fine_grained(refined_seg, refined_density, self.arch.k)
        return ForwardOutputs(first_density=first.density,
                              refined_density=refined_density,
                              fine_grained=fine, first_seg=first.seg,
                              refined_seg=refined_seg,
                              first_seg_logits=first.seg_logits,
                              refined_seg_logits=seg_logits, dampening=wd)


class OneNet(nn.Module):
    """Single network predicting all category density maps directly."""

    kind = "onenet"

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        self.extractor = SharedExtractor(arch.widths, arch.in_channels)
        self.head = PredictionHead(arch.widths[-1], arch.head_width, arch.k)

    def forward(self, image, module_inputs=None) -> ForwardOutputs:
        if min(image.shape[-2:]) < OUTPUT_STRIDE:
            raise ValueError("input smaller than the output stride")
        fine, _ = self.head(self.extractor(pad_to_stride(image)))
        overall = fine.sum(dim=1, keepdim=True)
        return ForwardOutputs(first_density=overall, refined_density=overall,
                              fine_grained=fine)


class TwoNets(nn.Module):
    """One independent single-channel network per category."""

    kind = "twonets"

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        self.nets = nn.ModuleList()
        for _ in range(arch.k):
            net = nn.Module()
            net.extractor = SharedExtractor(arch.widths, arch.in_channels)
            net.head = PredictionHead(arch.widths[-1], arch.head_width, 1)
            self.nets.append(net)

    def forward(self, image, module_inputs=None) -> ForwardOutputs:
        if min(image.shape[-2:]) < OUTPUT_STRIDE:
            raise ValueError("input smaller than the output stride")
        x = pad_to_stride(image)
        maps = [net.head(net.extractor(x))[0] for net in self.nets]
        fine = torch.cat(maps, dim=1)
        overall = fine.sum(dim=1, keepdim=True)
        return ForwardOutputs(first_density=overall, refined_density=overall,
                              fine_grained=fine)


def init_parameters(model: nn.Module, seed: int) -> nn.Module:
    """Deterministic init: fan-in-scaled normal kernels, zero biases.

    Weights are drawn from one seeded generator in parameter registration
    order, so two builds with the same seed are bitwise identical.
    """
    rng = np.random.default_rng(seed)
    gain = float(np.sqrt(2.0 / (1.0 + ACT_SLOPE ** 2)))
    with torch.no_grad():
        for name, p in model.named_parameters():
            if p.ndim > 1:
                fan_in = int(np.prod(p.shape[1:]))
                std = gain / np.sqrt(fan_in)
                values = rng.standard_normal(tuple(p.shape)) * std
                p.copy_(torch.from_numpy(values.astype(np.float32)))
            else:
                p.zero_()
    return model


MODEL_KINDS = {
    "ours": TwoBranchNet,
    "segment": SegmentNet,
    "onenet": OneNet,
    "twonets": TwoNets,
}


def build_model(arch: ArchConfig, seed: int, kind: str = "ours") -> nn.Module:
    """Construct and deterministically initialize a model variant."""
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    return init_parameters(MODEL_KINDS[kind](arch), seed)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def image_to_tensor(image: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """(h, w[, c]) float array in [0, 1] -> (1, c, h, w) tensor."""
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return torch.from_numpy(arr.copy()).to(dtype).unsqueeze(0)
