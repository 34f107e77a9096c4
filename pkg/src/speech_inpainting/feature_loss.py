"""VGG-16-shaped speech feature extractor and the losses built on it."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import config_hash, load_checkpoint, save_checkpoint
from .dsp import ContractError, LogMagnitude

BLOCKS = ((2, 64), (2, 128), (3, 256), (3, 512), (3, 512))
MODEL_KIND = "speechvgg"

Extractor = Callable[[torch.Tensor], Sequence[torch.Tensor]]


@dataclass(frozen=True)
class SpeechVGGConfig:
    n_classes: int = 1000
    width: float = 1.0      # channel multiplier (toy-scale knob)
    fc_units: int = 4096    # hidden units of the two dense layers
    batch_norm: bool = False  # lets small from-scratch toy runs converge
    input_size: int = 128

    def __post_init__(self):
        if self.input_size % 32:
            raise ContractError("input size must be divisible by 32")
        if self.n_classes < 1 or self.width <= 0 or self.fc_units < 1:
            raise ContractError(f"invalid extractor config {self}")

    def block_channels(self) -> list[int]:
        return [max(1, int(round(c * self.width))) for _, c in BLOCKS]

    def tap_shapes(self) -> list[tuple[int, int, int]]:
        return [(c, self.input_size >> (i + 1), self.input_size >> (i + 1))
                for i, c in enumerate(self.block_channels())]

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return config_hash(self.to_dict())


class SpeechVGG(nn.Module):
    def __init__(self, cfg: SpeechVGGConfig = SpeechVGGConfig()):
        super().__init__()
        self.cfg = cfg
        blocks, cin = [], 1
        for (n_conv, _), cout in zip(BLOCKS, cfg.block_channels()):
            layers = []
            for _ in range(n_conv):
                layers.append(nn.Conv2d(cin, cout, 3, padding=1))
                if cfg.batch_norm:
                    layers.append(nn.BatchNorm2d(cout))
                layers.append(nn.ReLU())
                cin = cout
            blocks.append(nn.Sequential(*layers))
        self.blocks = nn.ModuleList(blocks)
        side = cfg.input_size // 32
        self.head = nn.Sequential(
            nn.Flatten(),
            nn.Linear(cin * side * side, cfg.fc_units), nn.ReLU(),
            nn.Linear(cfg.fc_units, cfg.fc_units), nn.ReLU(),
            nn.Linear(cfg.fc_units, cfg.n_classes))
        self._init_weights()

    def _init_weights(self):
        # He initialization; the framework default starves deep plain stacks
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)

    def taps(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Outputs of the five max-pooling layers."""
        if x.dim() == 3:
            x = x.unsqueeze(1)
        size = self.cfg.input_size
        if tuple(x.shape[1:]) != (1, size, size):
            raise ContractError(f"expected (N, 1, {size}, {size}) input, got {tuple(x.shape)}")
        out = []
        for block in self.blocks:
            x = F.max_pool2d(block(x), 2)
            out.append(x)
        return out

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.taps(x)[-1])

    def freeze(self) -> "SpeechVGG":
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self


def _as_tensor(v) -> torch.Tensor:
    if isinstance(v, LogMagnitude):
        if not v.normalized:
            raise ContractError("losses operate on normalized log-magnitudes")
        v = v.values
    if isinstance(v, torch.Tensor):
        return v
    return torch.as_tensor(np.asarray(v, dtype=np.float64))


def pixel_loss(y, y_hat):
    """Mean absolute elementwise difference."""
    a, b = _as_tensor(y), _as_tensor(y_hat)
    if a.shape != b.shape:
        raise ContractError(f"shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    loss = (a - b).abs().mean()
    return loss if isinstance(y, torch.Tensor) else float(loss.detach())


def deep_feature_loss(y, y_hat, extractor: Extractor):
    """Sum over extractor taps of the mean absolute activation difference.

    ``extractor`` maps a tensor to a sequence of tap tensors (for a
    :class:`SpeechVGG` pass ``model.taps``). Returns a tensor when given
    tensors, a float otherwise.
    """
    a, b = _as_tensor(y), _as_tensor(y_hat)
    if a.shape != b.shape:
        raise ContractError(f"shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    owner = getattr(extractor, "__self__", None)
    if isinstance(owner, nn.Module):
        dtype = next(owner.parameters()).dtype
        a, b = a.to(dtype), b.to(dtype)
    taps_a, taps_b = extractor(a), extractor(b)
    if len(taps_a) != len(taps_b):
        raise ContractError("extractor returned different tap counts")
    loss = sum((ta - tb).abs().mean() for ta, tb in zip(taps_a, taps_b))
    return loss if isinstance(y, torch.Tensor) else float(loss.detach())


def target_features(extractor: Extractor, y: torch.Tensor) -> list[torch.Tensor]:
    with torch.no_grad():
        return [t.detach() for t in extractor(y)]


def feature_loss_to(taps_y: Sequence[torch.Tensor], y_hat: torch.Tensor,
                    extractor: Extractor) -> torch.Tensor:
    """Deep feature loss against precomputed target taps (training fast path)."""
    return sum((ty - th).abs().mean() for ty, th in zip(taps_y, extractor(y_hat)))


def classify_word(m, model: SpeechVGG) -> int:
    """Index of the largest logit; ties go to the lowest index."""
    x = _as_tensor(m).to(next(model.parameters()).dtype)
    model.eval()
    with torch.no_grad():
        logits = model(x.reshape(1, 1, *x.shape[-2:]))[0].numpy()
    return int(np.argmax(logits))


def save_extractor(model: SpeechVGG, path, vocabulary: Sequence[str] | None = None) -> str:
    if vocabulary is not None and len(vocabulary) != model.cfg.n_classes:
        raise ContractError(
            f"vocabulary of {len(vocabulary)} words does not fit a {model.cfg.n_classes}-way head")
    arrays = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
    return save_checkpoint(path, arrays, kind=MODEL_KIND, config=model.cfg.to_dict(),
                           extra={"vocabulary": list(vocabulary or [])})


def load_extractor(path, cfg: SpeechVGGConfig | None = None) -> tuple[SpeechVGG, list[str]]:
    tensors, meta = load_checkpoint(path, kind=MODEL_KIND,
                                    expected_hash=None if cfg is None else cfg.hash())
    model = SpeechVGG(cfg or SpeechVGGConfig(**meta["config"]))
    model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in tensors.items()})
    model.eval()
    return model, list(meta["extra"].get("vocabulary", []))
