"""Efficient deep aggregation pyramid pooling (EDAPP) context head.

Branch recursion over k = 1..n::

    y1 = conv1x1(x)
    yk = conv1x3(conv3x1(up(conv1x1(pool_k(x))) + y_{k-1}))     1 < k < n
    yn = conv3x3(up(conv1x1(global_pool(x))) + y_{n-1})

    out = compress(blend(concat(y1..yn))) + skip(x)

Every convolution is preceded by batch norm and ReLU unless the head is built in
``linear`` mode, which drops both so the network is a pure composition of linear
maps (used to check the separable pair against a dense 3x3 kernel).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

BN_MOMENTUM = 0.1


def default_pool_specs() -> list[tuple[int, int, int]]:
    # kernel 2^k + 1, stride 2^(k-1) for k = 2, 3, 4
    return [(2**k + 1, 2 ** (k - 1), 2 ** (k - 1)) for k in (2, 3, 4)]


@dataclass
class EdappConfig:
    in_channels: int = 512
    branch_channels: int = 128
    out_channels: int = 256
    pool_specs: list[tuple[int, int, int]] = field(default_factory=default_pool_specs)
    include_global: bool = True
    linear: bool = False

    def __post_init__(self):
        self.pool_specs = [tuple(int(v) for v in p) for p in self.pool_specs]
        for k, s, p in self.pool_specs:
            if k % 2 == 0:
                raise ValueError(f"pooling kernel {k} must be odd")
            if not k >= s >= 1:
                raise ValueError(f"pooling spec ({k}, {s}, {p}) needs kernel >= stride >= 1")
        if min(self.in_channels, self.branch_channels, self.out_channels) < 1:
            raise ValueError("channel widths must be positive")
        if not self.include_global and not self.pool_specs:
            raise ValueError("EDAPP needs at least one pooled branch")

    @property
    def num_branches(self) -> int:
        return 1 + len(self.pool_specs) + int(self.include_global)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pool_specs"] = [list(p) for p in self.pool_specs]
        return d


def avg_pool(x: torch.Tensor, kernel: int, stride: int, padding: int, exclude_pad: bool = True):
    """Average pooling; with ``exclude_pad`` only in-bounds taps enter the mean."""
    if not kernel >= stride >= 1:
        raise ValueError(f"need kernel >= stride >= 1, got kernel={kernel}, stride={stride}")
    h, w = x.shape[-2:]
    oh = (h + 2 * padding - kernel) // stride + 1
    ow = (w + 2 * padding - kernel) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError(
            f"avg_pool(kernel={kernel}, stride={stride}, padding={padding}) on "
            f"{h}x{w} input gives empty output"
        )
    if 2 * padding > kernel:
        # torch refuses this; pad explicitly and count taps ourselves
        xp = F.pad(x, (padding,) * 4)
        s = F.avg_pool2d(xp, kernel, stride, 0) * (kernel * kernel)
        if not exclude_pad:
            return s / (kernel * kernel)
        ones = F.pad(torch.ones_like(x[:1, :1]), (padding,) * 4)
        n = F.avg_pool2d(ones, kernel, stride, 0) * (kernel * kernel)
        return s / n
    return F.avg_pool2d(x, kernel, stride, padding, count_include_pad=not exclude_pad)


def separable_blend(x: torch.Tensor, w31: torch.Tensor, w13: torch.Tensor, b31=None, b13=None):
    """A 3x1 convolution followed by a 1x3 convolution, both size preserving.

    ``w31`` has shape (C_mid, C_in, 3, 1) and ``w13`` (C_out, C_mid, 1, 3).
    """
    if w31.shape[1] != x.shape[1]:
        raise ValueError(f"3x1 kernel expects {w31.shape[1]} channels, input has {x.shape[1]}")
    if w13.shape[1] != w31.shape[0]:
        raise ValueError(f"1x3 kernel expects {w13.shape[1]} channels, 3x1 emits {w31.shape[0]}")
    y = F.conv2d(x, w31, b31, padding=(1, 0))
    return F.conv2d(y, w13, b13, padding=(0, 1))


class PreActConv(nn.Sequential):
    """BN -> ReLU -> conv, or a bare conv in linear mode."""

    def __init__(self, cin, cout, kernel_size, padding=0, linear=False, bias=False):
        layers = [] if linear else [nn.BatchNorm2d(cin, momentum=BN_MOMENTUM), nn.ReLU(inplace=False)]
        layers.append(nn.Conv2d(cin, cout, kernel_size, padding=padding, bias=bias))
        super().__init__(*layers)

    @property
    def conv(self) -> nn.Conv2d:
        return self[-1]


class PooledProjection(nn.Module):
    """BN -> ReLU -> average pool -> 1x1 conv.

    Normalizing ahead of the pool keeps batch norm well defined when the pooled
    map collapses to 1x1 at batch size 1.
    """

    def __init__(self, cin, cout, pool, linear=False):
        super().__init__()
        self.pool = pool  # (kernel, stride, padding) or None for global pooling
        self.norm = nn.Identity() if linear else nn.Sequential(nn.BatchNorm2d(cin, momentum=BN_MOMENTUM), nn.ReLU())
        self.conv = nn.Conv2d(cin, cout, 1, bias=False)

    def forward(self, x):
        x = self.norm(x)
        x = x.mean((2, 3), keepdim=True) if self.pool is None else avg_pool(x, *self.pool)
        return self.conv(x)


class SeparableBlend(nn.Module):
    def __init__(self, channels, linear=False):
        super().__init__()
        self.conv31 = PreActConv(channels, channels, (3, 1), padding=(1, 0), linear=linear)
        self.conv13 = PreActConv(channels, channels, (1, 3), padding=(0, 1), linear=linear)

    def forward(self, x):
        return self.conv13(self.conv31(x))


def upsample_to(x: torch.Tensor, size) -> torch.Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    if x.shape[-2:] == (1, 1):
        return x.expand(*x.shape[:2], *size)
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class EDAPP(nn.Module):
    def __init__(self, cfg: EdappConfig):
        super().__init__()
        self.cfg = cfg
        cin, cb, lin = cfg.in_channels, cfg.branch_channels, cfg.linear
        self.scale0 = PreActConv(cin, cb, 1, linear=lin)
        self.pool_convs = nn.ModuleList(PooledProjection(cin, cb, spec, linear=lin) for spec in cfg.pool_specs)
        self.process = nn.ModuleList(SeparableBlend(cb, linear=lin) for _ in cfg.pool_specs)
        if cfg.include_global:
            self.global_conv = PooledProjection(cin, cb, None, linear=lin)
            self.global_process = PreActConv(cb, cb, 3, padding=1, linear=lin)
        n = cfg.num_branches
        self.blend = PreActConv(n * cb, 2 * cb, 1, linear=lin)
        self.compress = PreActConv(2 * cb, cfg.out_channels, 1, linear=lin)
        self.skip = PreActConv(cin, cfg.out_channels, 1, linear=lin)

    def check_input(self, x: torch.Tensor) -> None:
        if x.ndim != 4:
            raise ValueError(f"expected NxCxHxW input, got shape {tuple(x.shape)}")
        if x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"EDAPP expects {self.cfg.in_channels} channels, got {x.shape[1]}")
        h, w = x.shape[-2:]
        for idx, (k, s, p) in enumerate(self.cfg.pool_specs):
            if (h + 2 * p - k) // s + 1 < 1 or (w + 2 * p - k) // s + 1 < 1:
                raise ValueError(
                    f"input {h}x{w} too small for pooled branch {idx + 2} "
                    f"(kernel={k}, stride={s}, padding={p})"
                )

    def branches(self, x: torch.Tensor) -> list[torch.Tensor]:
        self.check_input(x)
        size = x.shape[-2:]
        ys = [self.scale0(x)]
        for conv, proc in zip(self.pool_convs, self.process):
            pooled = conv(x)
            ys.append(proc(upsample_to(pooled, size) + ys[-1]))
        if self.cfg.include_global:
            g = self.global_conv(x)
            ys.append(self.global_process(upsample_to(g, size) + ys[-1]))
        return ys

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        ys = self.branches(x)
        return self.compress(self.blend(torch.cat(ys, dim=1))) + self.skip(x)


def edapp_forward(x: torch.Tensor, cfg: EdappConfig, params: dict | None = None) -> torch.Tensor:
    """Functional entry point: build the head, load ``params`` (a state dict), run it."""
    head = EDAPP(cfg).to(dtype=x.dtype, device=x.device)
    if params is not None:
        head.load_state_dict(params)
    return head(x)
