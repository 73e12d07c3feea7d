"""Pyramid encoder pair for montage pretraining.

The online and target networks share one architecture: a small strided
backbone, a neck that produces a feature pyramid with a constant channel
width, and a convolutional head shared across levels. Montages built
from subimages shrunk by 2**s are routed to the pyramid level whose
stride compensates, so every subimage is described by features of a
comparable receptive extent: the coarsest map serves full-size images
and each finer map serves the next smaller subimage scale.

The online network adds a projector and predictor MLP; the target
network mirrors the encoder and projector only and is advanced as an
exponential moving average of the online weights, never by gradients.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .montage import MontageBatch
from .seeding import SeededRng


@dataclass(frozen=True)
class NetConfig:
    stage_channels: tuple[int, ...] = (16, 32, 64, 128)
    pyramid_levels: int = 3
    pyramid_channels: int = 64
    head_depth: int = 4
    proj_hidden: int = 256
    embed_dim: int = 64
    fpn: bool = True

    def __post_init__(self):
        if not 1 <= self.pyramid_levels <= len(self.stage_channels):
            raise ValueError(
                f"pyramid_levels {self.pyramid_levels} needs between 1 and "
                f"{len(self.stage_channels)} backbone stages")

    @staticmethod
    def full_scale() -> "NetConfig":
        """Projector/predictor widths used at full scale; the toy default
        shrinks them to keep a CPU run inside the time budget."""
        return NetConfig(proj_hidden=2048, embed_dim=256)


@dataclass
class FeaturePyramid:
    """maps[0] is the finest level; strides[i] is the total downsampling
    of maps[i] relative to the input image."""

    maps: list[T.Tensor]
    strides: list[int]

    def __post_init__(self):
        if len(self.maps) != len(self.strides):
            raise ValueError("one stride per map required")


def assign_level(scale: int, n_levels: int) -> int:
    """Index into finest-first pyramid maps for montage scale s.

    Scale 0 (full-size subimages) maps to the coarsest level; each unit
    of scale moves one level finer, mirroring the 2x shrink of the
    subimages with the 2x finer stride.
    """
    if not 0 <= scale < n_levels:
        raise ValueError(f"scale {scale} outside [0, {n_levels})")
    return n_levels - 1 - scale


def momentum_schedule(step: int, total_steps: int, m0: float) -> float:
    """Cosine ramp of the target EMA momentum from m0 at step 0 to 1.0."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return 1.0 - (1.0 - m0) * (math.cos(math.pi * step / total_steps) + 1.0) / 2.0


class ConvBnRelu(nn.Module):
    def __init__(self, cin, cout, k, stride=1, pad=0, *, init, dtype):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, k, stride=stride, pad=pad, bias=False,
                              init=init, dtype=dtype)
        self.bn = nn.BatchNorm2d(cout, dtype=dtype)
        self.update_running: bool | None = None

    def forward(self, x):
        return T.relu(self.bn(self.conv(x), update_running=self.update_running))


class Backbone(nn.Module):
    """Stem at stride 1 plus one stride-2 block per stage; returns every
    stage output, so stage i has total stride 2**(i+1)."""

    def __init__(self, channels: tuple[int, ...], *, init, dtype):
        super().__init__()
        self.stem = ConvBnRelu(3, channels[0], 3, stride=1, pad=1, init=init, dtype=dtype)
        self.stages = [
            ConvBnRelu(channels[i - 1] if i else channels[0], channels[i],
                       3, stride=2, pad=1, init=init, dtype=dtype)
            for i in range(len(channels))
        ]

    def forward(self, x: T.Tensor) -> list[T.Tensor]:
        outs = []
        h = self.stem(x)
        for stage in self.stages:
            h = stage(h)
            outs.append(h)
        return outs


class FpnNeck(nn.Module):
    """Lateral 1x1 projections merged top-down with nearest upsampling,
    each merged map finished by a 3x3 smoothing convolution."""

    def __init__(self, in_channels: list[int], out_channels: int, *, init, dtype):
        super().__init__()
        self.laterals = [nn.Conv2d(c, out_channels, 1, init=init, dtype=dtype)
                         for c in in_channels]
        self.smooths = [nn.Conv2d(out_channels, out_channels, 3, pad=1, init=init, dtype=dtype)
                        for _ in in_channels]

    def level(self, stages: list[T.Tensor], idx: int) -> T.Tensor:
        """Compute only the top-down path needed for one level."""
        n = len(self.laterals)
        p = self.laterals[n - 1](stages[n - 1])
        for i in range(n - 2, idx - 1, -1):
            p = T.add(self.laterals[i](stages[i]), T.upsample_nearest2x(p))
        return self.smooths[idx](p)

    def forward(self, stages: list[T.Tensor]) -> list[T.Tensor]:
        n = len(self.laterals)
        p = self.laterals[n - 1](stages[n - 1])
        merged = [p]
        for i in range(n - 2, -1, -1):
            p = T.add(self.laterals[i](stages[i]), T.upsample_nearest2x(p))
            merged.append(p)
        merged.reverse()
        return [self.smooths[i](m) for i, m in enumerate(merged)]


class InterpNeck(nn.Module):
    """Ablation neck: project the coarsest stage once and bilinearly
    resize it to each level's resolution. No cross-scale convolutions."""

    def __init__(self, in_channels: list[int], out_channels: int, *, init, dtype):
        super().__init__()
        self.proj = nn.Conv2d(in_channels[-1], out_channels, 1, init=init, dtype=dtype)
        self.n_levels = len(in_channels)

    def level(self, stages: list[T.Tensor], idx: int) -> T.Tensor:
        base = self.proj(stages[-1])
        target = stages[idx]
        return T.bilinear_resize(base, target.shape[2], target.shape[3])

    def forward(self, stages: list[T.Tensor]) -> list[T.Tensor]:
        return [self.level(stages, i) for i in range(self.n_levels)]


class PyramidEncoder(nn.Module):
    """Backbone + neck + shared head. The pyramid uses the last
    `pyramid_levels` backbone stages, finest first."""

    def __init__(self, cfg: NetConfig, *, init: nn.InitStream, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg.stage_channels, init=init, dtype=dtype)
        n_stages = len(cfg.stage_channels)
        self.first_stage = n_stages - cfg.pyramid_levels
        selected = list(cfg.stage_channels[self.first_stage:])
        neck_cls = FpnNeck if cfg.fpn else InterpNeck
        self.neck = neck_cls(selected, cfg.pyramid_channels, init=init, dtype=dtype)
        self.head = nn.Sequential(*[
            ConvBnRelu(cfg.pyramid_channels, cfg.pyramid_channels, 3, pad=1,
                       init=init, dtype=dtype)
            for _ in range(cfg.head_depth)
        ])
        self.strides = [2 ** (self.first_stage + 1 + i) for i in range(cfg.pyramid_levels)]

    def selected_stages(self, x: T.Tensor) -> list[T.Tensor]:
        return self.backbone(x)[self.first_stage:]

    def forward_pyramid(self, x: T.Tensor) -> FeaturePyramid:
        maps = self.neck(self.selected_stages(x))
        return FeaturePyramid(maps=maps, strides=list(self.strides))

    def level_features(self, x: T.Tensor, idx: int) -> T.Tensor:
        """Head output of a single pyramid level, skipping the rest of
        the top-down path; this is the training fast path."""
        if not 0 <= idx < self.cfg.pyramid_levels:
            raise ValueError(f"level {idx} outside pyramid")
        return self.head(self.neck.level(self.selected_stages(x), idx))

    def backbone_features(self, x: T.Tensor) -> T.Tensor:
        return self.backbone(x)[-1]


class ProjectionMlp(nn.Module):
    def __init__(self, din, hidden, dout, *, init, dtype):
        super().__init__()
        self.fc1 = nn.Linear(din, hidden, bias=False, init=init, dtype=dtype)
        self.bn1 = nn.BatchNorm1d(hidden, dtype=dtype)
        self.fc2 = nn.Linear(hidden, dout, bias=False, init=init, dtype=dtype)
        self.bn2 = nn.BatchNorm1d(dout, dtype=dtype)
        self.update_running: bool | None = None

    def forward(self, x):
        h = T.relu(self.bn1(self.fc1(x), update_running=self.update_running))
        return self.bn2(self.fc2(h), update_running=self.update_running)


class PredictionMlp(nn.Module):
    def __init__(self, dim, hidden, *, init, dtype):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden, bias=False, init=init, dtype=dtype)
        self.bn1 = nn.BatchNorm1d(hidden, dtype=dtype)
        self.fc2 = nn.Linear(hidden, dim, init=init, dtype=dtype)
        self.update_running: bool | None = None

    def forward(self, x):
        h = T.relu(self.bn1(self.fc1(x), update_running=self.update_running))
        return self.fc2(h)


def pool_subimage_latents(fmap: T.Tensor, mb: MontageBatch) -> T.Tensor:
    """Average-pool each subimage's region of a montage feature map.

    fmap is [n_montages, C, h, w] computed from mb.images; the output is
    [B, C] with row b describing source image b, whatever slot the
    shuffle sent it to. Requires the map to split evenly into the grid,
    which holds whenever image size is divisible by grid * stride.
    """
    if fmap.shape[0] != mb.n_montages:
        raise ValueError(f"{fmap.shape[0]} maps for {mb.n_montages} montage images")
    pooled = T.grid_avg_pool(fmap, mb.grid)  # rows in tile-slot order
    inv = np.argsort(mb.src_ids)
    return T.gather_rows(pooled, inv)


class MclNetworks(nn.Module):
    """Online encoder/projector/predictor plus EMA target encoder/projector."""

    def __init__(self, cfg: NetConfig, rng: SeededRng, dtype=np.float32):
        super().__init__()
        init = nn.InitStream(rng)
        self.online_encoder = PyramidEncoder(cfg, init=init, dtype=dtype)
        self.online_projector = ProjectionMlp(cfg.pyramid_channels, cfg.proj_hidden,
                                              cfg.embed_dim, init=init, dtype=dtype)
        self.online_predictor = PredictionMlp(cfg.embed_dim, cfg.proj_hidden,
                                              init=init, dtype=dtype)
        # target starts as an exact copy and is never touched by gradients
        tgt_init = nn.InitStream(rng)  # placeholder draws, overwritten below
        self.target_encoder = PyramidEncoder(cfg, init=tgt_init, dtype=dtype)
        self.target_projector = ProjectionMlp(cfg.pyramid_channels, cfg.proj_hidden,
                                              cfg.embed_dim, init=tgt_init, dtype=dtype)
        self._copy_online_to_target()
        for mod in (self.target_encoder, self.target_projector):
            mod.freeze()
            _set_running_updates(mod, False)
        self.cfg = cfg

    def _ema_pairs(self):
        yield self.online_encoder, self.target_encoder
        yield self.online_projector, self.target_projector

    def _copy_online_to_target(self):
        for online, target in self._ema_pairs():
            src = online.state_arrays()
            target.load_state_arrays(src)

    def project_online(self, pooled: T.Tensor) -> T.Tensor:
        return self.online_predictor(self.online_projector(pooled))

    def project_target(self, pooled: T.Tensor) -> T.Tensor:
        return self.target_projector(pooled)

    def encode_online(self, images: T.Tensor, mb: MontageBatch) -> T.Tensor:
        idx = assign_level(mb.scale, self.cfg.pyramid_levels)
        fmap = self.online_encoder.level_features(images, idx)
        pooled = pool_subimage_latents(fmap, mb)
        return T.l2_normalize(self.project_online(pooled))

    def encode_target(self, images: T.Tensor, mb: MontageBatch) -> T.Tensor:
        idx = assign_level(mb.scale, self.cfg.pyramid_levels)
        fmap = self.target_encoder.level_features(images, idx)
        pooled = pool_subimage_latents(fmap, mb)
        return T.l2_normalize(self.project_target(pooled)).detach()


def _set_running_updates(mod: nn.Module, enabled: bool) -> None:
    flag = None if enabled else False
    def walk(m):
        if isinstance(m, (ConvBnRelu, ProjectionMlp, PredictionMlp)):
            m.update_running = flag
        for _, child in vars(m).items():
            if isinstance(child, nn.Module):
                walk(child)
            elif isinstance(child, (list, tuple)):
                for item in child:
                    if isinstance(item, nn.Module):
                        walk(item)
    walk(mod)


def ema_update(nets: MclNetworks, m: float) -> None:
    """theta_target <- m * theta_target + (1 - m) * theta_online.

    Applies to parameters and to batch-norm running statistics; batch
    counters are copied so eval-readiness tracks the online network.
    """
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum {m} outside [0, 1]")
    for online, target in nets._ema_pairs():
        src_p = dict(online.named_parameters())
        for name, pt in target.named_parameters():
            po = src_p[name]
            pt.data *= m
            pt.data += (1.0 - m) * po.data
        src_b = dict(online.named_buffers())
        for name, bt in target.named_buffers():
            bo = src_b[name]
            if name.endswith("batches_seen"):
                bt.data[...] = bo.data
            else:
                bt.data[...] = m * bt.data + (1.0 - m) * bo.data
