"""Seeded, resumable training of the word-classifier extractor and the inpainter."""
from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .corpus import spec_augment
from .dsp import (ChannelStats, ContractError, LogMagnitude, analyze, normalize)
from .feature_loss import (SpeechVGG, SpeechVGGConfig, feature_loss_to,
                           save_extractor, target_features)
from .masks import (FillMode, MaskKind, MaskSizeSampler, MaskSpec, apply_mask,
                    sample_mask)
from .unet import Mode, UNet, UNetConfig, save_weights

log = logging.getLogger(__name__)

TRAINING_MASK_KINDS = (MaskKind.TIME_FREQ, MaskKind.RANDOM)


class Phase(enum.Enum):
    PRETRAIN_VGG = "PretrainVGG"
    TRAIN_INPAINTER = "TrainInpainter"


class LossKind(enum.Enum):
    DEEP_FEATURE = "DeepFeature"
    PIXEL = "Pixel"


_DEFAULT_EPOCHS = {Phase.PRETRAIN_VGG: 50, Phase.TRAIN_INPAINTER: 30}
_DEFAULT_LR = {Phase.PRETRAIN_VGG: 5e-5, Phase.TRAIN_INPAINTER: 2e-4}


@dataclass
class TrainConfig:
    phase: Phase = Phase.TRAIN_INPAINTER
    epochs: Optional[int] = None
    lr: Optional[float] = None
    batch_size: int = 16
    loss: LossKind = LossKind.DEEP_FEATURE
    mode: Mode = Mode.INFORMED
    fill_mode: FillMode = FillMode.ZEROS
    additive_snr_db: float = -15.0
    seed: int = 0
    workers: int = 1
    filter_scale: float = 1.0
    vgg_width: float = 1.0
    vgg_fc_units: int = 4096
    vgg_batch_norm: bool = False
    augment: bool = True
    max_steps: Optional[int] = None
    checkpoint_dir: Optional[str] = None
    checkpoint_every: Optional[int] = None
    log_path: Optional[str] = None

    def __post_init__(self):
        for name, enum_type in (("phase", Phase), ("loss", LossKind), ("mode", Mode),
                                ("fill_mode", FillMode)):
            setattr(self, name, enum_type(getattr(self, name)))
        if self.epochs is None:
            self.epochs = _DEFAULT_EPOCHS[self.phase]
        if self.lr is None:
            self.lr = _DEFAULT_LR[self.phase]
        if self.lr <= 0:
            raise ContractError("learning rate must be positive")
        if self.epochs < 1:
            raise ContractError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ContractError("batch size must be at least 1")
        if self.phase is Phase.TRAIN_INPAINTER and self.mode is Mode.INFORMED \
                and self.fill_mode is not FillMode.ZEROS:
            raise ContractError("informed training masks inputs with zeros")

    def unet_config(self) -> UNetConfig:
        return UNetConfig(mode=self.mode, filter_scale=self.filter_scale)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, enum.Enum):
                d[k] = v.value
        return d


def _parse_value(raw: str, current):
    raw = raw.strip()
    if raw.lower() in ("none", "null", ""):
        return None
    if isinstance(current, bool):
        if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ContractError(f"expected a boolean, got {raw!r}")
        return raw.lower() in ("true", "1", "yes")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, enum.Enum):
        return type(current)(raw)
    # Optional fields: guess from the literal
    for conv in (int, float):
        try:
            return conv(raw)
        except ValueError:
            pass
    return raw


def parse_config_text(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractError(f"config line {n}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def make_config(values: dict, **defaults) -> TrainConfig:
    """Build a TrainConfig from string ``values`` over keyword ``defaults``."""
    base = TrainConfig(**defaults)
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    kwargs = dict(defaults)
    for key, raw in values.items():
        if key not in known:
            raise ContractError(f"unknown training option {key!r}")
        kwargs[key] = _parse_value(raw, getattr(base, key)) if isinstance(raw, str) else raw
    # phase-dependent defaults are resolved after the phase is known
    if "epochs" not in values and "epochs" not in defaults:
        kwargs["epochs"] = None
    if "lr" not in values and "lr" not in defaults:
        kwargs["lr"] = None
    return TrainConfig(**kwargs)


def load_config(path, overrides: dict | None = None, **defaults) -> TrainConfig:
    values = parse_config_text(Path(path).read_text()) if path else {}
    values.update(overrides or {})
    return make_config(values, **defaults)


# --------------------------------------------------------------------------
# run bookkeeping

@dataclass
class RunState:
    epoch: int = 0
    step: int = 0
    model: dict = field(default_factory=dict)
    optimizer: dict = field(default_factory=dict)
    torch_rng: Optional[torch.Tensor] = None
    history: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def save(self, path) -> None:
        torch.save(dataclasses.asdict(self), path)

    @classmethod
    def load(cls, path) -> "RunState":
        return cls(**torch.load(path, weights_only=False))


class _JsonlLog:
    def __init__(self, path):
        self.fh = open(path, "a") if path else None

    def write(self, rec: dict) -> None:
        if self.fh:
            self.fh.write(json.dumps(rec) + "\n")
            self.fh.flush()

    def close(self):
        if self.fh:
            self.fh.close()


def sample_rng(run_seed: int, epoch: int, index: int) -> np.random.Generator:
    """Generator owned by one training sample; independent of worker layout."""
    return np.random.default_rng([run_seed, epoch, index])


def epoch_order(run_seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([run_seed, epoch, 2 ** 32 - 1]).permutation(n)


def model_digest(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in module.state_dict().items():
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# inpainter

def segment_magnitudes(segments: Sequence[np.ndarray], stats: ChannelStats) -> np.ndarray:
    """Normalized log-magnitudes of waveform segments as a float32 stack."""
    return np.stack([normalize(analyze(s)[0], stats).values for s in segments]).astype(np.float32)


def corrupt_training_sample(clean: np.ndarray, cfg: TrainConfig, epoch: int,
                            index: int, sampler: MaskSizeSampler = MaskSizeSampler()):
    """Mask one normalized training input; returns ``(input, valid, kind)``."""
    rng = sample_rng(cfg.seed, epoch, index)
    kind = TRAINING_MASK_KINDS[int(rng.integers(len(TRAINING_MASK_KINDS)))]
    size = sampler.sample(rng)
    mask = sample_mask(MaskSpec(kind, size, int(rng.integers(2 ** 63))))
    fill = FillMode.ZEROS if cfg.mode is Mode.INFORMED else cfg.fill_mode
    m = LogMagnitude(clean.astype(np.float64), normalized=True)
    out, _ = apply_mask(m, np.zeros_like(clean, dtype=np.float64), mask, fill,
                        additive_snr_db=cfg.additive_snr_db,
                        seed=int(rng.integers(2 ** 63)))
    return out.values.astype(np.float32), mask.valid, kind


def _batch(data: np.ndarray, idx: np.ndarray, cfg: TrainConfig, epoch: int, pool=None):
    jobs = [(data[i], cfg, epoch, int(i)) for i in idx]
    results = pool.starmap(corrupt_training_sample, jobs) if pool else \
        [corrupt_training_sample(*j) for j in jobs]
    x = torch.from_numpy(np.stack([r[0] for r in results])).unsqueeze(1)
    valid = torch.from_numpy(np.stack([r[1] for r in results]).astype(np.float32)).unsqueeze(1)
    y = torch.from_numpy(data[idx]).unsqueeze(1)
    return x, valid, y, [r[2] for r in results]


@dataclass
class TrainResult:
    model: torch.nn.Module
    history: list
    state: RunState
    mask_kinds: list = field(default_factory=list)


def train_inpainter(cfg: TrainConfig, data: np.ndarray, extractor: SpeechVGG | None = None,
                    *, resume: RunState | str | Path | None = None,
                    on_step: Callable[[dict], None] | None = None) -> TrainResult:
    """Train the U-Net on normalized clean log-magnitudes ``data`` (N, 128, 128).

    Every step draws each sample's mask kind uniformly from TimeFreq and
    Random with a size from :class:`MaskSizeSampler`, all seeded from
    ``(cfg.seed, epoch, sample index)``.
    """
    if cfg.phase is not Phase.TRAIN_INPAINTER:
        raise ContractError("train_inpainter needs a TrainInpainter config")
    if cfg.loss is LossKind.DEEP_FEATURE and extractor is None:
        raise ContractError("deep-feature loss requires a pretrained extractor")
    data = np.ascontiguousarray(data, dtype=np.float32)
    if data.ndim != 3 or len(data) == 0:
        raise ContractError("training data must be a non-empty (N, H, W) stack")

    torch.manual_seed(cfg.seed)
    model = UNet(cfg.unet_config())
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    if extractor is not None:
        extractor.freeze()
        extractor_digest = model_digest(extractor)

    state = RunState(config=cfg.to_dict())
    if resume is not None:
        state = resume if isinstance(resume, RunState) else RunState.load(resume)
        model.load_state_dict(state.model)
        opt.load_state_dict(state.optimizer)
        if state.torch_rng is not None:
            torch.set_rng_state(state.torch_rng)

    steps_per_epoch = -(-len(data) // cfg.batch_size)
    ckpt_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    logger = _JsonlLog(cfg.log_path)
    pool = None
    if cfg.workers > 1:
        import multiprocessing
        pool = multiprocessing.get_context("spawn").Pool(cfg.workers)
    kinds_seen: list = []

    def snapshot():
        state.model = model.state_dict()
        state.optimizer = opt.state_dict()
        state.torch_rng = torch.get_rng_state()

    try:
        done = False
        for epoch in range(state.epoch, cfg.epochs):
            order = epoch_order(cfg.seed, epoch, len(data))
            first = state.step - epoch * steps_per_epoch
            model.train()
            for b in range(max(first, 0), steps_per_epoch):
                if cfg.max_steps is not None and state.step >= cfg.max_steps:
                    done = True
                    break
                idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                x, valid, y, kinds = _batch(data, idx, cfg, epoch, pool)
                kinds_seen.extend(kinds)
                opt.zero_grad()
                out = model(x, valid if model.informed else None)
                if cfg.loss is LossKind.DEEP_FEATURE:
                    loss = feature_loss_to(target_features(extractor.taps, y), out,
                                           extractor.taps)
                else:
                    loss = (out - y).abs().mean()
                loss.backward()
                opt.step()
                state.step += 1
                rec = {"step": state.step, "epoch": epoch, "loss": loss.item(), "lr": cfg.lr}
                state.history.append(rec)
                logger.write(rec)
                if on_step:
                    on_step(rec)
                if ckpt_dir and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                    snapshot()
                    state.save(ckpt_dir / "state.pt")
            if done:
                break
            state.epoch = epoch + 1
            if ckpt_dir:
                snapshot()
                state.save(ckpt_dir / "state.pt")
                save_weights(model, ckpt_dir / f"unet_epoch{epoch + 1:03d}.npz",
                             extra={"epoch": epoch + 1, "step": state.step})
    finally:
        logger.close()
        if pool:
            pool.close()
    if extractor is not None and model_digest(extractor) != extractor_digest:
        raise RuntimeError("extractor weights changed during inpainter training")
    snapshot()
    model.eval()
    return TrainResult(model, state.history, state, kinds_seen)


# --------------------------------------------------------------------------
# extractor pretraining

def pretrain_extractor(cfg: TrainConfig, samples: np.ndarray, labels: np.ndarray,
                       vocabulary: Sequence[str], *, test: tuple | None = None,
                       on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Train the word classifier with cross-entropy on word samples.

    ``test`` is an optional ``(samples, labels)`` pair scored after every epoch.
    """
    if cfg.phase is not Phase.PRETRAIN_VGG:
        raise ContractError("pretrain_extractor needs a PretrainVGG config")
    vcfg = SpeechVGGConfig(n_classes=len(vocabulary), width=cfg.vgg_width,
                           fc_units=cfg.vgg_fc_units, batch_norm=cfg.vgg_batch_norm)
    labels = np.asarray(labels, dtype=np.int64)
    if len(samples) == 0:
        raise ContractError("no word samples to train on")
    if labels.min() < 0 or labels.max() >= vcfg.n_classes:
        raise ContractError(
            f"labels span {labels.min()}..{labels.max()} but the head has {vcfg.n_classes} classes")
    samples = np.ascontiguousarray(samples, dtype=np.float32)

    torch.manual_seed(cfg.seed)
    model = SpeechVGG(vcfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    state = RunState(config=cfg.to_dict())
    logger = _JsonlLog(cfg.log_path)
    ckpt_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    try:
        for epoch in range(cfg.epochs):
            model.train()
            order = epoch_order(cfg.seed, epoch, len(samples))
            losses = []
            for b in range(0, len(order), cfg.batch_size):
                idx = order[b:b + cfg.batch_size]
                xb = samples[idx]
                if cfg.augment:
                    xb = np.stack([spec_augment(x, int(sample_rng(cfg.seed, epoch, int(i))
                                                       .integers(2 ** 63)))
                                   for x, i in zip(xb, idx)])
                x = torch.from_numpy(np.ascontiguousarray(xb, dtype=np.float32)).unsqueeze(1)
                opt.zero_grad()
                loss = F.cross_entropy(model(x), torch.from_numpy(labels[idx]))
                loss.backward()
                opt.step()
                state.step += 1
                losses.append(loss.item())
                logger.write({"step": state.step, "epoch": epoch, "loss": losses[-1],
                              "lr": cfg.lr})
            rec = {"epoch": epoch + 1, "step": state.step, "loss": float(np.mean(losses)),
                   "train_accuracy": accuracy(model, samples, labels)}
            if test is not None and len(test[0]):
                rec["test_accuracy"] = accuracy(model, *test)
            state.history.append(rec)
            state.epoch = epoch + 1
            log.info("pretrain epoch %d: %s", epoch + 1, rec)
            if on_epoch:
                on_epoch(rec)
            if ckpt_dir:
                save_extractor(model, ckpt_dir / f"speechvgg_epoch{epoch + 1:03d}.npz",
                               vocabulary)
    finally:
        logger.close()
    model.eval()
    return TrainResult(model, state.history, state)


def accuracy(model: SpeechVGG, samples: np.ndarray, labels: np.ndarray,
             batch_size: int = 64) -> float:
    was_training = model.training
    model.eval()
    correct = 0
    with torch.no_grad():
        for b in range(0, len(samples), batch_size):
            x = torch.from_numpy(np.asarray(samples[b:b + batch_size], np.float32)).unsqueeze(1)
            pred = model(x).argmax(dim=1).numpy()
            correct += int((pred == np.asarray(labels[b:b + batch_size])).sum())
    model.train(was_training)
    return correct / max(len(samples), 1)
