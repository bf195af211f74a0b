"""Voxel embedding network and whole-volume inference.

The network is a small UNet working at 1/4 resolution: a stride-4 stem
convolution, an encoder/decoder with skip connections, a 1x1x1 projection to
3 channels, batch normalization without affine parameters and a final x4
trilinear upsampling back to the input grid.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .volume_io import EmbeddingMap, Volume

__all__ = [
    "ModelConfig",
    "APENet",
    "ModelSizeError",
    "CheckpointError",
    "intensity_to_input",
    "embed_patches",
    "calibrate",
    "window_starts",
    "triangular_window",
    "sliding_window_embed",
    "tiled_embed",
    "config_hash",
    "save_checkpoint",
    "load_checkpoint",
]

STEM_STRIDE = 4
UPSAMPLE = 4
CHECKPOINT_VERSION = 1


class ModelSizeError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    stem_channels: int = 16
    encoder_channels: tuple[int, ...] = (16, 32, 64)
    decoder_channels: tuple[int, ...] = (64, 32)
    kernel_size: int = 3
    bn_eps: float = 1e-8
    bn_momentum: float = 0.1
    negative_slope: float = 0.01

    def validate(self) -> None:
        if not self.encoder_channels or not self.decoder_channels:
            raise ValueError("encoder_channels and decoder_channels must be non-empty")
        if len(self.decoder_channels) < len(self.encoder_channels) - 1:
            raise ValueError("need one decoder stage per encoder downsampling step")
        if min(self.stem_channels, *self.encoder_channels, *self.decoder_channels) < 1:
            raise ValueError("channel counts must be positive")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")
        if self.bn_eps <= 0 or not 0 < self.bn_momentum <= 1:
            raise ValueError("invalid batch-norm parameters")

    @property
    def downsampling(self) -> int:
        """Total downsampling factor between input and bottleneck."""
        return STEM_STRIDE * 2 ** (len(self.encoder_channels) - 1)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        d["decoder_channels"] = list(self.decoder_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["encoder_channels"] = tuple(d["encoder_channels"])
        d["decoder_channels"] = tuple(d["decoder_channels"])
        return cls(**d)


def config_hash(cfg: ModelConfig) -> str:
    return hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()


def intensity_to_input(hu) -> np.ndarray:
    """Map Hounsfield-like intensities to the network's input scale."""
    return np.clip(np.asarray(hu, dtype=np.float32), -1024.0, 3071.0) / 1000.0


class APENet(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        cfg.validate()
        k, pad = cfg.kernel_size, cfg.kernel_size // 2
        enc = cfg.encoder_channels
        self.stem = nn.Conv3d(1, cfg.stem_channels, STEM_STRIDE, stride=STEM_STRIDE)
        self.encoder = nn.ModuleList()
        in_ch = cfg.stem_channels
        for i, ch in enumerate(enc):
            layers = [nn.Conv3d(in_ch, ch, k, stride=1 if i == 0 else 2, padding=pad)]
            if i > 0:
                layers.append(nn.Conv3d(ch, ch, k, padding=pad))
            self.encoder.append(nn.ModuleList(layers))
            in_ch = ch
        self.decoder = nn.ModuleList()
        for i, ch in enumerate(cfg.decoder_channels):
            skip = enc[len(enc) - 2 - i] if i < len(enc) - 1 else 0
            self.decoder.append(nn.Conv3d(in_ch + skip, ch, k, padding=pad))
            in_ch = ch
        self.proj = nn.Conv3d(in_ch, 3, 1)
        self.norm = nn.BatchNorm3d(3, eps=cfg.bn_eps, momentum=cfg.bn_momentum, affine=False)
        for m in self.modules():
            if isinstance(m, nn.Conv3d):
                nn.init.kaiming_normal_(m.weight, a=cfg.negative_slope, nonlinearity="leaky_relu")
                nn.init.zeros_(m.bias)

    def _act(self, x):
        return F.leaky_relu(x, self.cfg.negative_slope)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Normalized 3-channel map at 1/4 resolution (input already padded)."""
        h = self._act(self.stem(x))
        skips = []
        for stage in self.encoder:
            for conv in stage:
                h = self._act(conv(h))
            skips.append(h)
        n_up = len(self.cfg.encoder_channels) - 1
        for i, conv in enumerate(self.decoder):
            if i < n_up:
                skip = skips[n_up - 1 - i]
                h = F.interpolate(h, size=skip.shape[2:], mode="trilinear", align_corners=False)
                h = torch.cat([h, skip], dim=1)
            h = self._act(conv(h))
        return self.norm(self.proj(h))

    def forward(self, x: torch.Tensor, return_features: bool = False):
        if x.ndim != 5 or x.shape[1] != 1:
            raise ValueError(f"expected input of shape (B, 1, H, W, D), got {tuple(x.shape)}")
        size = tuple(x.shape[2:])
        if min(size) < self.cfg.downsampling:
            raise ModelSizeError(
                f"patch {size} is smaller than the total downsampling factor {self.cfg.downsampling}"
            )
        if self.training and x.shape[0] < 2:
            raise ValueError("train-mode forward needs a batch of at least 2 patches")
        pad = [(-n) % STEM_STRIDE for n in size]
        if any(pad):
            x = F.pad(x, (0, pad[2], 0, pad[1], 0, pad[0]), mode="replicate")
        feats = self.features(x)
        out = F.interpolate(feats, scale_factor=UPSAMPLE, mode="trilinear", align_corners=False)
        out = out[:, :, : size[0], : size[1], : size[2]]
        return (out, feats) if return_features else out


def _device_of(model: nn.Module) -> tuple[torch.device, torch.dtype]:
    p = next(model.parameters())
    return p.device, p.dtype


def embed_patches(model: APENet, arrays: Sequence[np.ndarray]) -> np.ndarray:
    """Eval-mode embeddings for same-shaped HU patches, returned as (B, 3, H, W, D)."""
    device, dtype = _device_of(model)
    x = torch.as_tensor(np.stack([intensity_to_input(a) for a in arrays])[:, None], dtype=dtype, device=device)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            return model(x).cpu().numpy()
    finally:
        model.train(was_training)


def calibrate(model: APENet, batches: Iterable[np.ndarray]) -> int:
    """Recompute the output normalization's running statistics.

    ``batches`` yields arrays shaped (B, H, W, D) of HU patches; the running
    statistics become the cumulative average over all of them. Returns the
    number of batches seen.
    """
    device, dtype = _device_of(model)
    norm = model.norm
    was_training, momentum = model.training, norm.momentum
    norm.reset_running_stats()
    norm.momentum = None
    model.train()
    count = 0
    try:
        with torch.no_grad():
            for batch in batches:
                x = torch.as_tensor(intensity_to_input(batch)[:, None], dtype=dtype, device=device)
                model(x)
                count += 1
    finally:
        norm.momentum = momentum
        model.train(was_training)
    if count == 0:
        raise ValueError("calibrate needs at least one batch")
    return count


def window_starts(n: int, window: int, step: int) -> list[int]:
    """Window start offsets covering [0, n); the last window is flush with the end."""
    if n <= window:
        return [0]
    starts = list(range(0, n - window, max(1, step)))
    starts.append(n - window)
    return sorted(set(starts))


def triangular_window(shape: Sequence[int]) -> np.ndarray:
    """Separable tent weights, strictly positive, peaking at the window center."""
    w = np.ones(tuple(shape), dtype=np.float64)
    for axis, n in enumerate(shape):
        t = 1.0 - np.abs(2.0 * (np.arange(n) + 0.5) / n - 1.0)
        view = [1, 1, 1]
        view[axis] = n
        w = w * t.reshape(view)
    return w


def _check_ready(model: APENet) -> None:
    if int(model.norm.num_batches_tracked) == 0:
        raise RuntimeError("running statistics are uninitialized; train or calibrate the model first")


def _run_windows(model: APENet, data: np.ndarray, starts, window, batch_size: int):
    """Yield (start, eval-mode prediction) for each window start."""
    size = np.minimum(np.asarray(window), data.shape)
    min_size = model.cfg.downsampling
    for i in range(0, len(starts), batch_size):
        chunk = starts[i:i + batch_size]
        crops = []
        for s in chunk:
            crop = data[s[0]:s[0] + size[0], s[1]:s[1] + size[1], s[2]:s[2] + size[2]]
            short = [max(0, min_size - n) for n in crop.shape]
            if any(short):  # too small for the network: edge-pad, crop back below
                crop = np.pad(crop, [(0, p) for p in short], mode="edge")
            crops.append(crop)
        preds = embed_patches(model, crops)
        for s, pred in zip(chunk, preds):
            yield s, pred[:, : size[0], : size[1], : size[2]]


def sliding_window_embed(
    model: APENet,
    v: Volume,
    window: Sequence[int] = (32, 32, 24),
    overlap: float = 0.5,
    batch_size: int = 4,
) -> EmbeddingMap:
    """Whole-volume embedding map from overlapping windows blended with tent weights."""
    _check_ready(model)
    if not 0 <= overlap < 1:
        raise ValueError("overlap must be in [0, 1)")
    data = np.asarray(v.data)
    size = np.minimum(np.asarray(window), data.shape)
    per_axis = [window_starts(n, w, int(round(w * (1 - overlap)))) for n, w in zip(data.shape, size)]
    starts = [(a, b, c) for a in per_axis[0] for b in per_axis[1] for c in per_axis[2]]
    weight = triangular_window(size)
    acc = np.zeros((3, *data.shape), dtype=np.float64)
    wsum = np.zeros(data.shape, dtype=np.float64)
    for s, pred in _run_windows(model, data, starts, size, batch_size):
        sl = tuple(slice(a, a + n) for a, n in zip(s, size))
        acc[(slice(None), *sl)] += weight * pred
        wsum[sl] += weight
    return EmbeddingMap((acc / wsum).astype(np.float32), v.spacing, v.origin)


def tiled_embed(model: APENet, v: Volume, window: Sequence[int] = (32, 32, 24), batch_size: int = 4) -> EmbeddingMap:
    """Non-overlapping tiling without blending; every voxel comes from exactly one window."""
    _check_ready(model)
    data = np.asarray(v.data)
    per_axis = [list(range(0, n, w)) for n, w in zip(data.shape, window)]
    out = np.zeros((3, *data.shape), dtype=np.float32)
    for s in [(a, b, c) for a in per_axis[0] for b in per_axis[1] for c in per_axis[2]]:
        size = [min(w, n - a) for w, n, a in zip(window, data.shape, s)]
        crop = data[s[0]:s[0] + size[0], s[1]:s[1] + size[1], s[2]:s[2] + size[2]]
        (_, pred), = _run_windows(model, crop, [(0, 0, 0)], size, batch_size)
        out[:, s[0]:s[0] + size[0], s[1]:s[1] + size[1], s[2]:s[2] + size[2]] = pred
    return EmbeddingMap(out, v.spacing, v.origin)


def save_checkpoint(path, model: APENet, step: int, optimizer=None, extra: dict | None = None) -> Path:
    """Atomically write model config, parameters, running stats and step counter."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": CHECKPOINT_VERSION,
        "model_config": model.cfg.to_dict(),
        "config_hash": config_hash(model.cfg),
        "state_dict": model.state_dict(),
        "step": int(step),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "extra": extra or {},
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path, expected: ModelConfig | None = None) -> tuple[APENet, dict]:
    """Rebuild the network from a checkpoint; returns (model, raw payload)."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"missing checkpoint {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:  # torch raises a grab bag of pickle/zip errors
        raise CheckpointError(f"{path}: not a readable checkpoint ({e})") from e
    if not isinstance(payload, dict) or payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    cfg = ModelConfig.from_dict(payload["model_config"])
    if config_hash(cfg) != payload["config_hash"]:
        raise CheckpointError(f"{path}: config hash does not match the stored config")
    if expected is not None and config_hash(expected) != payload["config_hash"]:
        raise CheckpointError(f"{path}: checkpoint was trained with a different model config")
    model = APENet(cfg)
    dtype = next(iter(payload["state_dict"].values())).dtype
    if dtype.is_floating_point:
        model = model.to(dtype)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload
