"""U-Net spectrogram inpainter with partial (informed) or full (blind) convolutions."""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import config_hash, load_checkpoint, save_checkpoint
from .dsp import ContractError, LogMagnitude

ENCODER = ((7, 16), (5, 32), (5, 64), (3, 128), (3, 128), (3, 128))
# blocks 6..1; block 0 is the 1x1 linear output conv
DECODER = ((3, 128), (3, 128), (3, 64), (3, 32), (3, 16), (3, 1))
MODEL_KIND = "unet"


class Mode(enum.Enum):
    INFORMED = "Informed"
    BLIND = "Blind"


@dataclass(frozen=True)
class UNetConfig:
    mode: Mode = Mode.INFORMED
    encoder: tuple = ENCODER
    decoder: tuple = DECODER
    filter_scale: float = 1.0
    leaky_slope: float = 0.2
    input_size: int = 128

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "encoder", tuple(tuple(b) for b in self.encoder))
        object.__setattr__(self, "decoder", tuple(tuple(b) for b in self.decoder))
        if len(self.encoder) != len(self.decoder):
            raise ContractError("encoder and decoder need the same number of blocks")
        if self.input_size % (2 ** len(self.encoder)):
            raise ContractError(
                f"input size {self.input_size} is not divisible by 2**{len(self.encoder)}")
        if self.filter_scale <= 0:
            raise ContractError("filter_scale must be positive")

    @classmethod
    def toy(cls, mode=Mode.INFORMED, size: int = 8) -> "UNetConfig":
        """Three-level network for gradient checks on tiny inputs."""
        return cls(mode=mode, encoder=((3, 4), (3, 8), (3, 8)),
                   decoder=((3, 8), (3, 4), (3, 1)), input_size=size)

    def channels(self, n: int) -> int:
        return max(1, int(round(n * self.filter_scale)))

    def encoder_channels(self) -> list[int]:
        return [self.channels(f) for _, f in self.encoder]

    def decoder_channels(self) -> list[int]:
        # the last decoder block emits the single output map regardless of scale
        return [self.channels(f) for _, f in self.decoder[:-1]] + [self.decoder[-1][1]]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        d["encoder"] = [list(b) for b in self.encoder]
        d["decoder"] = [list(b) for b in self.decoder]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        return cls(**d)

    def hash(self) -> str:
        return config_hash(self.to_dict())


def same_padding(size: int, kernel: int, stride: int) -> tuple[int, int]:
    """(before, after) padding giving ``ceil(size / stride)`` outputs."""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


class PartialConv2d(nn.Module):
    """Convolution renormalized over valid inputs, with mask propagation.

    Called with ``mask=None`` it is an ordinary zero-padded convolution.
    Padding positions count as valid, so an all-ones mask reproduces the
    ordinary convolution exactly. ``mask`` may have one channel (shared by
    all input channels) or one channel per input channel.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int = 1):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, kernel, stride, bias=True)
        self.kernel, self.stride = kernel, stride

    def _pad(self, t: torch.Tensor, value: float) -> torch.Tensor:
        ph = same_padding(t.shape[-2], self.kernel, self.stride)
        pw = same_padding(t.shape[-1], self.kernel, self.stride)
        return F.pad(t, (pw[0], pw[1], ph[0], ph[1]), value=value)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None):
        if mask is None:
            return self.conv(self._pad(x, 0.0)), None
        if mask.shape[-2:] != x.shape[-2:]:
            raise ContractError("mask and input spatial shapes differ")
        in_ch = self.conv.in_channels
        if mask.shape[1] not in (1, in_ch):
            raise ContractError(f"mask has {mask.shape[1]} channels, expected 1 or {in_ch}")
        xm = self._pad(x * mask, 0.0)
        mp = self._pad(mask, 1.0)
        with torch.no_grad():
            ones = torch.ones(1, mp.shape[1], self.kernel, self.kernel,
                              dtype=mp.dtype, device=mp.device)
            count = F.conv2d(mp, ones, stride=self.stride)
            if mp.shape[1] == 1:
                count = count * in_ch
            window = float(in_ch * self.kernel * self.kernel)
            covered = count > 0
            ratio = torch.where(covered, window / count.clamp(min=1.0), torch.zeros_like(count))
        raw = F.conv2d(xm, self.conv.weight, None, self.stride)
        bias = self.conv.bias.view(1, -1, 1, 1)
        out = (raw * ratio + bias) * covered.to(raw.dtype)
        return out, covered.to(mask.dtype)


class _Block(nn.Module):
    def __init__(self, cin, cout, kernel, stride, act):
        super().__init__()
        self.pconv = PartialConv2d(cin, cout, kernel, stride)
        self.bn = nn.BatchNorm2d(cout)
        self.act = act

    def forward(self, x, mask):
        y, m = self.pconv(x, mask)
        return self.act(self.bn(y)), m


class UNet(nn.Module):
    def __init__(self, cfg: UNetConfig = UNetConfig()):
        super().__init__()
        self.cfg = cfg
        enc_ch = cfg.encoder_channels()
        dec_ch = cfg.decoder_channels()
        enc_in = [1] + enc_ch[:-1]
        self.encoders = nn.ModuleList(
            _Block(cin, cout, k, 2, nn.ReLU())
            for cin, cout, (k, _) in zip(enc_in, enc_ch, cfg.encoder))
        decoders = []
        prev = enc_ch[-1]
        # decoder i (block depth-i) joins the input of encoder block depth-i
        for i, ((k, _), cout) in enumerate(zip(cfg.decoder, dec_ch)):
            skip = enc_in[len(enc_in) - 1 - i]
            decoders.append(_Block(prev + skip, cout, k, 1, nn.LeakyReLU(cfg.leaky_slope)))
            prev = cout
        self.decoders = nn.ModuleList(decoders)
        self.output = nn.Conv2d(prev, 1, 1)

    @property
    def informed(self) -> bool:
        return self.cfg.mode is Mode.INFORMED

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """``x`` and ``mask`` are ``(N, 1, H, W)``; mask is 1 on valid bins."""
        if x.dim() == 3:
            x = x.unsqueeze(1)
        size = self.cfg.input_size
        if tuple(x.shape[-2:]) != (size, size):
            raise ContractError(f"expected {size}x{size} input, got {tuple(x.shape[-2:])}")
        if self.informed:
            if mask is None:
                raise ContractError("informed mode requires a mask")
            if mask.dim() == 3:
                mask = mask.unsqueeze(1)
            mask = mask.to(x.dtype)
        else:
            mask = None
        skips = []
        h, m = x, mask
        for enc in self.encoders:
            skips.append((h, m))
            h, m = enc(h, m)
        for dec in self.decoders:
            sh, sm = skips.pop()
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            if m is not None:
                m = F.interpolate(m, scale_factor=2, mode="nearest")
                m = torch.cat([m.expand(-1, h.shape[1], -1, -1),
                               sm.expand(-1, sh.shape[1], -1, -1)], dim=1)
            h, m = dec(torch.cat([h, sh], dim=1), m)
        return self.output(h)

    # ------------------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().copy() for k, v in self.state_dict().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in arrays.items()})


def parameter_count(cfg: UNetConfig) -> int:
    """Trainable parameters: conv kernels and biases plus batch-norm scale/shift."""
    enc_ch = cfg.encoder_channels()
    dec_ch = cfg.decoder_channels()
    enc_in = [1] + enc_ch[:-1]
    total = 0
    for cin, cout, (k, _) in zip(enc_in, enc_ch, cfg.encoder):
        total += k * k * cin * cout + cout + 2 * cout
    prev = enc_ch[-1]
    for i, ((k, _), cout) in enumerate(zip(cfg.decoder, dec_ch)):
        cin = prev + enc_in[len(enc_in) - 1 - i]
        total += k * k * cin * cout + cout + 2 * cout
        prev = cout
    return total + prev + 1


def save_weights(model: UNet, path, extra: dict | None = None) -> str:
    return save_checkpoint(path, model.state_arrays(), kind=MODEL_KIND,
                           config=model.cfg.to_dict(), extra=extra)


def load_weights(path, cfg: UNetConfig | None = None) -> UNet:
    """Load a U-Net; with ``cfg`` given the stored config hash must match."""
    tensors, meta = load_checkpoint(path, kind=MODEL_KIND,
                                    expected_hash=None if cfg is None else cfg.hash())
    model = UNet(cfg or UNetConfig.from_dict(meta["config"]))
    model.load_arrays(tensors)
    model.eval()
    return model


def restore(model: UNet, m: LogMagnitude, valid: np.ndarray | None = None) -> LogMagnitude:
    """Run one normalized log-magnitude through ``model`` in eval mode."""
    if not m.normalized:
        raise ContractError("the network operates on normalized log-magnitudes")
    return restore_batch(model, m.values[None], None if valid is None else valid[None])[0]


def restore_batch(model: UNet, values: np.ndarray, valid: np.ndarray | None = None,
                  batch_size: int = 16) -> list[LogMagnitude]:
    model.eval()
    dtype = next(model.parameters()).dtype
    outs = []
    with torch.no_grad():
        for i in range(0, len(values), batch_size):
            x = torch.as_tensor(values[i:i + batch_size], dtype=dtype).unsqueeze(1)
            mk = None
            if valid is not None:
                mk = torch.as_tensor(valid[i:i + batch_size], dtype=dtype).unsqueeze(1)
            outs.append(model(x, mk)[:, 0].numpy().astype(np.float64))
    return [LogMagnitude(v, normalized=True) for v in np.concatenate(outs)] if outs else []
