"""Training loop for the three variants.

``naive``  independent native-spacing patches, distances within one set of embeddings.
``augm``   overlapping augmented patch pairs, distances across the pair, lambda = 0.
``equiv``  as ``augm`` with the positive-pair penalty, lambda = 1 by default.

All randomness of step ``t`` comes from ``default_rng([seed, 0, t])`` so that a
resumed run replays exactly the batches an uninterrupted run would have seen.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .loss import loss_dist, loss_equiv, loss_total, pairwise_distances
from .model import APENet, ModelConfig, calibrate, intensity_to_input, load_checkpoint, save_checkpoint
from .phantom import PhantomSpec, generate_phantom
from .sampler import (
    SamplerConfig,
    draw_patch_shape,
    normalize_coords,
    sample_independent_patches,
    sample_patch_pair,
    sample_positive_pairs,
    sample_voxels,
)
from .volume_io import Volume, foreground_crop

__all__ = [
    "VARIANTS",
    "TrainConfig",
    "TrainBatch",
    "TrainState",
    "TrainResult",
    "NonFiniteLossError",
    "METRIC_COLUMNS",
    "make_batch",
    "batch_rng",
    "train_step",
    "build_pool",
    "init_state",
    "train",
    "read_metrics",
]

log = logging.getLogger(__name__)

VARIANTS = ("naive", "augm", "equiv")
METRIC_COLUMNS = ("step", "loss", "loss_dist", "loss_equiv", "mean_dpred_ii", "grad_norm")


class NonFiniteLossError(RuntimeError):
    def __init__(self, step: int, seed: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step} (batch rng = default_rng([{seed}, 0, {step}]))")
        self.step, self.seed, self.loss = step, seed, loss


@dataclass
class TrainConfig:
    variant: str = "equiv"
    lam: float | None = None
    steps: int = 2000
    n: int = 4
    k: int = 250
    lr: float = 3e-4
    weight_decay: float = 1e-6
    clip: float = 1.0
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    checkpoint_every: int = 500
    seed: int = 0
    num_phantoms: int = 50
    phantom_seed_offset: int = 0
    foreground_threshold: float = -500.0
    calibration_batches: int = 16

    @property
    def lam_value(self) -> float:
        if self.lam is not None:
            return float(self.lam)
        return 1.0 if self.variant == "equiv" else 0.0

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.variant in ("naive", "augm") and self.lam not in (None, 0, 0.0):
            raise ValueError(f"variant {self.variant!r} requires lambda = 0, got {self.lam}")
        if self.lam_value < 0:
            raise ValueError("lambda must be non-negative")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.n < 1 or self.k < 1 or self.n * self.k < 2:
            raise ValueError("need n >= 1, k >= 1 and N = n * k >= 2")
        if self.variant == "naive" and self.n < 2:
            raise ValueError("naive variant needs n >= 2 patches per step for batch normalization")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.weight_decay < 0 or self.clip <= 0:
            raise ValueError("weight_decay must be >= 0 and clip > 0")
        if self.checkpoint_every < 1 or self.num_phantoms < 1 or self.calibration_batches < 0:
            raise ValueError("checkpoint_every and num_phantoms must be >= 1, calibration_batches >= 0")


@dataclass
class TrainBatch:
    mode: str  # "naive" or "pairs"
    patches: np.ndarray  # (B, H, W, D) HU; for pairs the first half are A patches, the second half B
    patch_a: np.ndarray  # (N,) patch index of each voxel in A
    index_a: np.ndarray  # (N, 3)
    patch_b: np.ndarray | None
    index_b: np.ndarray | None
    points: np.ndarray  # (N, 3) raw-frame mm
    aug_ops: int = 0


@dataclass
class TrainState:
    model: APENet
    optimizer: torch.optim.Optimizer
    step: int = 0


@dataclass
class TrainResult:
    checkpoint: Path
    metrics: Path
    model: APENet
    summary: dict = field(default_factory=dict)


def batch_rng(seed: int, step: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, stream, step])


def make_batch(v: Volume, rng: np.random.Generator, variant: str, scfg: SamplerConfig, n: int, k: int) -> TrainBatch:
    """Sample one training batch from a single volume."""
    shape = draw_patch_shape(rng, scfg)
    if variant == "naive":
        patches = sample_independent_patches(v, n, rng, scfg, shape)
        picks = [sample_voxels(p, k, rng) for p in patches]
        return TrainBatch(
            mode="naive",
            patches=np.stack([p.data for p in patches]),
            patch_a=np.repeat(np.arange(n), k),
            index_a=np.concatenate([b.index_a for b in picks]),
            patch_b=None,
            index_b=None,
            points=np.concatenate([b.points for b in picks]),
        )
    if variant not in ("augm", "equiv"):
        raise ValueError(f"unknown variant {variant!r}")
    pairs = [sample_patch_pair(v, rng, scfg, shape) for _ in range(n)]
    picks = [sample_positive_pairs(pp, k, rng) for pp in pairs]
    shapes = {pp.patch_a.shape for pp in pairs} | {pp.patch_b.shape for pp in pairs}
    if len(shapes) != 1:
        raise ValueError("patches in a batch must share one shape; keep aug.p_rescale = 1 for pair training")
    return TrainBatch(
        mode="pairs",
        patches=np.stack([pp.patch_a.data for pp in pairs] + [pp.patch_b.data for pp in pairs]),
        patch_a=np.repeat(np.arange(n), k),
        index_a=np.concatenate([b.index_a for b in picks]),
        patch_b=np.repeat(np.arange(n, 2 * n), k),
        index_b=np.concatenate([b.index_b for b in picks]),
        points=np.concatenate([b.points for b in picks]),
        aug_ops=sum(len(pp.patch_a.augmentations) + len(pp.patch_b.augmentations) for pp in pairs),
    )


def _gather(out: torch.Tensor, patch: np.ndarray, index: np.ndarray) -> torch.Tensor:
    pi = torch.as_tensor(patch, dtype=torch.long)
    ix = torch.as_tensor(index, dtype=torch.long)
    return out[pi, :, ix[:, 0], ix[:, 1], ix[:, 2]]


def batch_losses(model: APENet, batch: TrainBatch, lam: float) -> tuple[torch.Tensor, dict]:
    """Forward pass and loss terms for one batch (model mode is left to the caller)."""
    p = next(model.parameters())
    x = torch.as_tensor(intensity_to_input(batch.patches)[:, None], dtype=p.dtype, device=p.device)
    out = model(x)
    a = _gather(out, batch.patch_a, batch.index_a)
    target = torch.as_tensor(normalize_coords(batch.points).values, dtype=p.dtype)
    d_true = pairwise_distances(target, target)
    if batch.mode == "naive":
        d_pred = pairwise_distances(a, a)
        total = loss_dist(d_pred, d_true)
        return total, {"loss_dist": total.item(), "loss_equiv": None, "mean_dpred_ii": None}
    b = _gather(out, batch.patch_b, batch.index_b)
    d_pred = pairwise_distances(a, b)
    total = loss_total(d_pred, d_true, lam)
    return total, {
        "loss_dist": loss_dist(d_pred, d_true).item(),
        "loss_equiv": loss_equiv(d_pred).item(),
        "mean_dpred_ii": torch.diagonal(d_pred).mean().item(),
    }


def _global_norm(params) -> float:
    grads = [p.grad.detach().flatten() for p in params if p.grad is not None]
    return float(torch.cat(grads).norm()) if grads else 0.0


def train_step(state: TrainState, batch: TrainBatch, cfg: TrainConfig, seed: int | None = None) -> tuple[TrainState, float, dict]:
    """One clipped AdamW update. Mutates and returns ``state``."""
    expected = "naive" if cfg.variant == "naive" else "pairs"
    if batch.mode != expected:
        raise ValueError(f"variant {cfg.variant!r} needs a {expected!r} batch, got {batch.mode!r}")
    model, opt = state.model, state.optimizer
    model.train()
    opt.zero_grad(set_to_none=True)
    total, diag = batch_losses(model, batch, cfg.lam_value)
    value = total.item()
    if not math.isfinite(value):
        raise NonFiniteLossError(state.step, cfg.seed if seed is None else seed, value)
    total.backward()
    params = [p for p in model.parameters() if p.requires_grad]
    raw = float(torch.nn.utils.clip_grad_norm_(params, cfg.clip))
    diag["grad_norm_raw"] = raw
    diag["grad_norm"] = _global_norm(params)
    diag["aug_ops"] = batch.aug_ops
    opt.step()
    state.step += 1
    return state, value, diag


def build_pool(
    cfg: TrainConfig,
    spec: PhantomSpec | None = None,
    volumes: Sequence[Volume] | None = None,
) -> list[Volume]:
    """Foreground-cropped training volumes: given ones, or freshly generated phantoms."""
    if volumes is None:
        spec = spec or PhantomSpec()
        volumes = [generate_phantom(spec, cfg.phantom_seed_offset + i).volume for i in range(cfg.num_phantoms)]
    return [foreground_crop(v, cfg.foreground_threshold).volume for v in volumes]


def init_state(cfg: TrainConfig, model_cfg: ModelConfig | None = None, dtype=torch.float32) -> TrainState:
    torch.manual_seed(cfg.seed)
    model = APENet(model_cfg or ModelConfig()).to(dtype)
    opt = torch.optim.AdamW(
        model.parameters(), lr=cfg.lr, betas=tuple(cfg.betas), eps=cfg.adam_eps, weight_decay=cfg.weight_decay
    )
    return TrainState(model, opt, 0)


def _fmt(x) -> str:
    return "" if x is None else repr(float(x)) if not isinstance(x, int) else str(x)


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as f:
        return [
            {k: (int(v) if k == "step" else float(v) if v != "" else None) for k, v in row.items()}
            for row in csv.DictReader(f)
        ]


def _restart_metrics(path: Path, upto_step: int) -> None:
    """Drop metric rows past ``upto_step`` (left over from an interrupted run)."""
    rows = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        rows = [r for r in reader if int(r[0]) <= upto_step]
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def train(
    cfg: TrainConfig,
    out_dir,
    spec: PhantomSpec | None = None,
    scfg: SamplerConfig | None = None,
    model_cfg: ModelConfig | None = None,
    volumes: Sequence[Volume] | None = None,
    resume: bool = False,
) -> TrainResult:
    """Run (or resume) training; writes ``last.pt``, ``final.pt``, ``metrics.csv`` and ``timing.log``."""
    cfg.validate()
    scfg = scfg or SamplerConfig()
    scfg.validate()
    if cfg.variant != "naive" and scfg.aug.p_rescale != 1.0:
        raise ValueError("pair training stacks patches of one shape and requires aug.p_rescale = 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    last_path, final_path = out_dir / "last.pt", out_dir / "final.pt"
    metrics_path, timing_path = out_dir / "metrics.csv", out_dir / "timing.log"

    pool = build_pool(cfg, spec, volumes)
    state = init_state(cfg, model_cfg)
    if resume and last_path.exists():
        model, payload = load_checkpoint(last_path, expected=state.model.cfg)
        state.model.load_state_dict(model.state_dict())
        state.optimizer.load_state_dict(payload["optimizer"])
        state.step = payload["step"]
        _restart_metrics(metrics_path, state.step)
        log.info("resumed from %s at step %d", last_path, state.step)
    else:
        with open(metrics_path, "w", newline="") as f:
            csv.writer(f, lineterminator="\n").writerow(METRIC_COLUMNS)
        timing_path.write_text("step\twallclock_s\n")

    t0 = time.perf_counter()
    aug_ops = 0
    with open(metrics_path, "a", newline="") as mf, open(timing_path, "a") as tf:
        writer = csv.writer(mf, lineterminator="\n")
        while state.step < cfg.steps:
            step = state.step
            volume = pool[step % len(pool)]
            batch = make_batch(volume, batch_rng(cfg.seed, step), cfg.variant, scfg, cfg.n, cfg.k)
            _, value, diag = train_step(state, batch, cfg)
            aug_ops += diag["aug_ops"]
            writer.writerow([
                step + 1, _fmt(value), _fmt(diag["loss_dist"]), _fmt(diag["loss_equiv"]),
                _fmt(diag["mean_dpred_ii"]), _fmt(diag["grad_norm"]),
            ])
            tf.write(f"{step + 1}\t{time.perf_counter() - t0:.3f}\n")
            if state.step % cfg.checkpoint_every == 0 or state.step == cfg.steps:
                mf.flush()
                tf.flush()
                save_checkpoint(last_path, state.model, state.step, state.optimizer,
                                extra={"train_config": _cfg_dict(cfg)})
            if step % 100 == 0:
                log.info("step %d loss %.4f", step + 1, value)

    if cfg.calibration_batches:
        calib = (
            make_batch(pool[i % len(pool)], batch_rng(cfg.seed, i, stream=1), cfg.variant, scfg, cfg.n, cfg.k).patches
            for i in range(cfg.calibration_batches)
        )
        calibrate(state.model, calib)
    save_checkpoint(final_path, state.model, state.step, None, extra={"train_config": _cfg_dict(cfg)})
    summary = {"steps": state.step, "variant": cfg.variant, "lambda": cfg.lam_value, "aug_ops": aug_ops}
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return TrainResult(final_path, metrics_path, state.model, summary)


def _cfg_dict(cfg: TrainConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["betas"] = list(cfg.betas)
    return d
