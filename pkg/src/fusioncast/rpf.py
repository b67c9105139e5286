"""Radar-PWV fusion: a spatial gate from moisture features, channel attention on
radar features, and gated multiplicative fusion with a residual path."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .layers import BranchState, Conv2DLayer, Module, SharedMLP, channel_pool, conv2d, global_pool, mlp_apply


class SpatialGate(Module):
    def __init__(self, rng: np.random.Generator | None = None, name: str = "spatial"):
        self.conv = Conv2DLayer(2, 1, kernel=7, stride=1, padding=3, rng=rng, name=f"{name}.conv")


class ChannelGate(Module):
    def __init__(self, channels: int, reduction: int = 4, rng: np.random.Generator | None = None,
                 name: str = "channel"):
        self.mlp = SharedMLP(channels, reduction=reduction, rng=rng, name=f"{name}.mlp")


class RPFGates(Module):
    """Gate parameters for one fusion block.

    With ``share_hc_gates`` the hidden and cell states are fused with the same
    spatial and channel gates; otherwise each state gets its own pair.
    """

    def __init__(self, radar_channels: int, share_hc_gates: bool = True, reduction: int = 4,
                 rng: np.random.Generator | None = None, name: str = "rpf"):
        rng = rng or np.random.default_rng(0)
        self.share_hc_gates = share_hc_gates
        self.spatial_h = SpatialGate(rng, f"{name}.spatial_h" if not share_hc_gates else f"{name}.spatial")
        self.channel_h = ChannelGate(radar_channels, reduction, rng,
                                     f"{name}.channel_h" if not share_hc_gates else f"{name}.channel")
        if share_hc_gates:
            self.spatial_c, self.channel_c = self.spatial_h, self.channel_h
        else:
            self.spatial_c = SpatialGate(rng, f"{name}.spatial_c")
            self.channel_c = ChannelGate(radar_channels, reduction, rng, f"{name}.channel_c")


@dataclass
class FusedState:
    h: Tensor
    c: Tensor


def spatial_attention(f_pwv: Tensor, gate: SpatialGate) -> Tensor:
    """Sigmoid of a 7x7 conv over the [mean; max] channel descriptors. Output has one channel."""
    return ad.sigmoid(conv2d(channel_pool(f_pwv), gate.conv))


def channel_attention(f_radar: Tensor, gate: ChannelGate) -> Tensor:
    if f_radar.shape[-3] != gate.mlp.channels:
        raise ShapeError(f"channel gate built for {gate.mlp.channels} channels, got {f_radar.shape[-3]}")
    avg, mx = global_pool(f_radar)
    return ad.sigmoid(ad.ew_add(mlp_apply(avg, gate.mlp), mlp_apply(mx, gate.mlp)))


def refine_radar(f_radar: Tensor, w_channel: Tensor) -> Tensor:
    if w_channel.shape != f_radar.shape[:-2]:
        raise ShapeError(f"channel weights {w_channel.shape} do not match features {f_radar.shape}")
    return ad.ew_mul(f_radar, w_channel)


def gated_fuse(m_spatial: Tensor, f_prime: Tensor, f_radar: Tensor) -> Tensor:
    """``M * F' + F`` with the one-channel gate broadcast across channels."""
    if f_prime.shape != f_radar.shape:
        raise ShapeError(f"refined {f_prime.shape} and residual {f_radar.shape} differ")
    if m_spatial.shape != f_radar.shape[:-3] + (1,) + f_radar.shape[-2:]:
        raise ShapeError(f"gate map {m_spatial.shape} does not fit features {f_radar.shape}")
    return ad.ew_add(ad.ew_mul(f_prime, m_spatial), f_radar)


def fuse_one(f_pwv: Tensor, f_radar: Tensor, spatial: SpatialGate, channel: ChannelGate) -> Tensor:
    m = spatial_attention(f_pwv, spatial)
    f_prime = refine_radar(f_radar, channel_attention(f_radar, channel))
    return gated_fuse(m, f_prime, f_radar)


def rpf_fuse(pwv: BranchState, radar: BranchState, gates: RPFGates) -> FusedState:
    if pwv.h.shape[-2:] != radar.h.shape[-2:]:
        raise ShapeError(f"PWV state extent {pwv.h.shape[-2:]} differs from radar {radar.h.shape[-2:]}")
    h = fuse_one(pwv.h, radar.h, gates.spatial_h, gates.channel_h)
    c = fuse_one(pwv.c, radar.c, gates.spatial_c, gates.channel_c)
    return FusedState(h, c)
