"""Three-branch encoder, radar-state merge, fusion and autoregressive decoder."""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, ShapeError, Tensor
from .layers import (BranchState, Conv2DLayer, ConvLSTMCell, Deconv2DLayer, Module, conv2d, deconv2d,
                     encode_sequence)
from .rpf import FusedState, RPFGates, channel_attention, refine_radar, rpf_fuse, spatial_attention

VARIANTS = ("full", "no_pwv", "no_prior", "no_rpf_concat", "rpf_concat_fusion")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    grid: int = 64
    t_in: int = 4
    t_out: int = 12
    enc_channels: tuple[int, int] = (32, 64)
    prior_channels: tuple[int, int] = (32, 128)
    hidden: int = 64
    prior_hidden: int = 128
    proj_channels: int = 64
    dec_channels: tuple[int, int] = (32, 64)
    head_channels: tuple[int, int] = (32, 16)
    mlp_reduction: int = 4
    share_hc_gates: bool = True
    variant: str = "full"
    seed: int = 0

    def __post_init__(self):
        for name in ("enc_channels", "prior_channels", "dec_channels", "head_channels"):
            setattr(self, name, tuple(int(c) for c in getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        if self.grid % 4:
            raise ConfigError(f"grid extent {self.grid} is not divisible by 4")
        if self.t_in < 1 or self.t_out < 1:
            raise ConfigError("t_in and t_out must be >= 1")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.variant == "no_prior" and self.hidden != self.proj_channels:
            raise ConfigError("no_prior passes the history state through, so hidden must equal proj_channels")

    @property
    def state_extent(self) -> int:
        return self.grid // 4

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class InputBundle:
    """Normalized model inputs, each (T, n, n) or batched (B, T, n, n)."""

    x_pwv: np.ndarray
    x_radar_hist: np.ndarray
    x_radar_prior: np.ndarray


class ConvStack(Module):
    """Two stride-2 3x3 convolutions with ReLU, applied to every frame."""

    def __init__(self, in_ch: int, channels: tuple[int, int], rng, name: str):
        self.conv1 = Conv2DLayer(in_ch, channels[0], 3, stride=2, padding=1, rng=rng, name=f"{name}.conv1")
        self.conv2 = Conv2DLayer(channels[0], channels[1], 3, stride=2, padding=1, rng=rng, name=f"{name}.conv2")

    def __call__(self, x: Tensor) -> Tensor:
        return ad.relu(conv2d(ad.relu(conv2d(x, self.conv1)), self.conv2))


class Encoder(Module):
    def __init__(self, channels: tuple[int, int], hidden: int, rng, name: str):
        self.stack = ConvStack(1, channels, rng, f"{name}.stack")
        self.cell = ConvLSTMCell(channels[1], hidden, rng=rng, name=f"{name}.cell")

    def __call__(self, frames: Tensor) -> BranchState:
        """``frames`` is (B, T, n, n)."""
        b, t, n, _ = frames.shape
        feats = self.stack(ad.reshape(frames, (b, t, 1, n, n)))
        return encode_sequence([ad.select(feats, k, axis=1) for k in range(t)], self.cell)


class Projection(Module):
    """1x1 convolution used for merging concatenated states."""

    def __init__(self, in_ch: int, out_ch: int, rng, name: str):
        self.conv = Conv2DLayer(in_ch, out_ch, 1, rng=rng, name=f"{name}.conv")

    def __call__(self, xs: list[Tensor]) -> Tensor:
        return conv2d(ad.concat_channels(xs), self.conv)


class Decoder(Module):
    def __init__(self, cfg: ModelConfig, rng):
        self.stack = ConvStack(1, cfg.dec_channels, rng, "decoder.stack")
        self.cell = ConvLSTMCell(cfg.dec_channels[1], cfg.proj_channels, rng=rng, name="decoder.cell")
        self.up1 = Deconv2DLayer(cfg.proj_channels, cfg.head_channels[0], rng=rng, name="decoder.up1")
        self.up2 = Deconv2DLayer(cfg.head_channels[0], cfg.head_channels[1], rng=rng, name="decoder.up2")
        self.out = Conv2DLayer(cfg.head_channels[1], 1, 1, rng=rng, name="decoder.out")

    def head(self, h: Tensor) -> Tensor:
        y = ad.relu(deconv2d(h, self.up1))
        y = ad.relu(deconv2d(y, self.up2))
        return ad.relu(conv2d(y, self.out))


class FusionCast(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        v = cfg.variant
        self.enc_hist = Encoder(cfg.enc_channels, cfg.hidden, rng, "encoder.hist")
        self.enc_pwv = Encoder(cfg.enc_channels, cfg.hidden, rng, "encoder.pwv") if v != "no_pwv" else None
        self.enc_prior = (Encoder(cfg.prior_channels, cfg.prior_hidden, rng, "encoder.prior")
                          if v != "no_prior" else None)
        self.merge = None
        if v in ("full", "no_pwv", "rpf_concat_fusion"):
            self.merge = Projection(cfg.hidden + cfg.prior_hidden, cfg.proj_channels, rng, "merge")
        self.gates = None
        if v in ("full", "no_prior", "rpf_concat_fusion"):
            self.gates = RPFGates(cfg.proj_channels, cfg.share_hc_gates, cfg.mlp_reduction, rng, "rpf")
        self.fusion_proj = None
        if v == "no_rpf_concat":
            self.fusion_proj = Projection(2 * cfg.hidden + cfg.prior_hidden, cfg.proj_channels, rng, "concat")
        elif v == "rpf_concat_fusion":
            self.fusion_proj = Projection(cfg.hidden + cfg.proj_channels, cfg.proj_channels, rng, "concat")
        self.decoder = Decoder(cfg, rng)

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    # -- stages --------------------------------------------------------------

    def encode(self, x_pwv: Tensor, x_hist: Tensor, x_prior: Tensor):
        hist = self.enc_hist(x_hist)
        pwv = self.enc_pwv(x_pwv) if self.enc_pwv is not None else None
        prior = self.enc_prior(x_prior) if self.enc_prior is not None else None
        return pwv, hist, prior

    def merge_radar_states(self, hist: BranchState, prior: BranchState | None) -> BranchState:
        if prior is None:
            return hist
        if hist.h.shape[-2:] != prior.h.shape[-2:]:
            raise ShapeError(f"history state {hist.h.shape} and prior state {prior.h.shape} differ in extent")
        return BranchState(self.merge([hist.h, prior.h]), self.merge([hist.c, prior.c]))

    def fuse(self, pwv: BranchState | None, hist: BranchState, prior: BranchState | None) -> FusedState:
        v = self.cfg.variant
        if v == "no_rpf_concat":
            return FusedState(self.fusion_proj([pwv.h, hist.h, prior.h]), self.fusion_proj([pwv.c, hist.c, prior.c]))
        radar = self.merge_radar_states(hist, prior)
        if v == "no_pwv":
            return FusedState(radar.h, radar.c)
        if v == "rpf_concat_fusion":
            return FusedState(self._attend_concat(pwv.h, radar.h, self.gates.spatial_h, self.gates.channel_h),
                              self._attend_concat(pwv.c, radar.c, self.gates.spatial_c, self.gates.channel_c))
        return rpf_fuse(pwv, radar, self.gates)

    def _attend_concat(self, f_pwv, f_radar, spatial, channel) -> Tensor:
        if f_pwv.shape[-2:] != f_radar.shape[-2:]:
            raise ShapeError("PWV and radar states differ in spatial extent")
        m = spatial_attention(f_pwv, spatial)
        f_prime = refine_radar(f_radar, channel_attention(f_radar, channel))
        return self.fusion_proj([ad.ew_mul(f_pwv, m), f_prime])

    def decode(self, fused: FusedState, last_obs: Tensor, targets: np.ndarray | None = None,
               teacher_p: float = 0.0, rng: np.random.Generator | None = None) -> Tensor:
        """Roll the decoder for ``t_out`` steps from Y_0 = ``last_obs`` (B, 1, n, n).

        With ``targets`` (B, T_out, n, n) and ``teacher_p`` > 0 the next input is
        the ground-truth frame with that probability. Returns (B, T_out, n, n).
        """
        dec = self.decoder
        h, c = fused.h, fused.c
        y_prev = last_obs
        outs = []
        for t in range(self.cfg.t_out):
            x = dec.stack(y_prev)
            h, c = dec.cell(x, h, c)
            y = dec.head(h)
            outs.append(y)
            if targets is not None and teacher_p > 0 and rng is not None and rng.random() < teacher_p:
                y_prev = Tensor(targets[:, t:t + 1])
            else:
                y_prev = y
        out = ad.stack(outs, axis=1)  # B, T, 1, n, n
        b, t, _, n, m = out.shape
        return ad.reshape(out, (b, t, n, m))

    def forward(self, bundle: InputBundle, targets: np.ndarray | None = None, teacher_p: float = 0.0,
                rng: np.random.Generator | None = None) -> Tensor:
        hist = np.asarray(bundle.x_radar_hist)
        batched = hist.ndim == 4
        if not batched:
            bundle = InputBundle(bundle.x_pwv[None], hist[None], bundle.x_radar_prior[None])
            hist = hist[None]
        self._check(bundle)
        x_hist = Tensor(hist)
        x_pwv = Tensor(bundle.x_pwv) if self.enc_pwv is not None else None
        x_prior = Tensor(bundle.x_radar_prior) if self.enc_prior is not None else None
        pwv, hs, prior = self.encode(x_pwv, x_hist, x_prior)
        fused = self.fuse(pwv, hs, prior)
        last = Tensor(hist[:, -1:])
        out = self.decode(fused, last, targets, teacher_p, rng)
        if not batched:
            out = ad.select(out, 0, axis=0)
        return out

    __call__ = forward

    def _check(self, bundle: InputBundle) -> None:
        cfg = self.cfg
        n = cfg.grid
        exp = {"x_radar_hist": cfg.t_in, "x_pwv": cfg.t_in, "x_radar_prior": cfg.t_out}
        for name, t in exp.items():
            arr = np.asarray(getattr(bundle, name))
            if arr.shape[1:] != (t, n, n):
                raise ShapeError(f"{name}: expected (B, {t}, {n}, {n}), got {arr.shape}")


# -- checkpoints ----------------------------------------------------------------

CKPT_MAGIC = b"FCKP"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: dict[str, Parameter] | list[Parameter]) -> None:
    if not isinstance(params, dict):
        params = {p.name: p for p in params}
    buf = bytearray(CKPT_MAGIC)
    buf += struct.pack("<I", CKPT_VERSION)
    for name, p in params.items():
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", p.data.ndim)
        buf += struct.pack(f"<{p.data.ndim}Q", *p.data.shape)
        buf += np.ascontiguousarray(p.data, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


def read_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos, out = 8, {}
    try:
        while pos < len(raw):
            (ln,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos:pos + ln].decode("utf-8")
            pos += ln
            (rank,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", raw, pos)
            pos += 8 * rank
            count = int(np.prod(shape)) if rank else 1
            if pos + 8 * count > len(raw):
                raise CheckpointError(f"{path}: truncated payload for {name!r}")
            out[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
            pos += 8 * count
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint ({exc})") from None
    return out


def load_checkpoint(path, model: FusionCast) -> None:
    """Copy stored values into ``model``; names and shapes must match exactly."""
    stored = read_checkpoint(path)
    params = model.named_parameters()
    if set(stored) != set(params):
        missing, extra = set(params) - set(stored), set(stored) - set(params)
        raise CheckpointError(f"checkpoint/model mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
    for name, arr in stored.items():
        p = params[name]
        if p.shape != arr.shape:
            raise CheckpointError(f"{name}: stored shape {arr.shape} != model shape {p.shape}")
        p.data[...] = arr
