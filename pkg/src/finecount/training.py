"""Training loop, configuration, checkpointing, evaluation, baselines.

Training is batch-size-1 over random crops with Adam (moment decays
0.9/0.999, epsilon 1e-8). Everything is driven by seeded generators, so
identical configs produce bitwise-identical checkpoints.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch

from . import mapio
from .annotations import DatasetManifest, ManifestError, Sample
from .groundtruth import (DEFAULT_EPSILON, DEFAULT_ETA, KernelSpec,
                          render_category_densities, targets_from_densities)
from .losses import compute_losses, scalar
from .metrics import EvalReport, build_report
from .network import (MODEL_KINDS, OUTPUT_STRIDE, ArchConfig, build_model,
                      image_to_tensor)

CHECKPOINT_FORMAT = "finecount-checkpoint"


class NonFiniteLossError(RuntimeError):
    """Raised when a loss component stops being finite during training."""


@dataclass
class TrainConfig:
    """Every knob of a run; defaults follow the reference hyperparameters."""

    learning_rate: float = 1e-4
    steps: int = 500
    seed: int = 0
    kernel: KernelSpec = field(default_factory=KernelSpec)
    dampening: float = 0.2
    epsilon: float = DEFAULT_EPSILON
    eta: float = DEFAULT_ETA
    alpha: float = 100.0
    beta: float = 10.0
    iterations: int = 3
    propagation: str = "hourglass"
    attention: str = "coatt"
    model: str = "ours"
    crop: int = 64
    checkpoint_every: int = 0   # 0 writes the final checkpoint only

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.crop < OUTPUT_STRIDE or self.crop % OUTPUT_STRIDE != 0:
            raise ValueError(f"crop must be a positive multiple of "
                             f"{OUTPUT_STRIDE}, got {self.crop}")
        if min(self.learning_rate, self.dampening, self.epsilon, self.eta) < 0 \
                or self.learning_rate == 0 or self.epsilon == 0 or self.eta == 0:
            raise ValueError("rates and thresholds must be positive")
        if self.model not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.model!r}")

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["kernel"] = self.kernel.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "kernel" in d and isinstance(d["kernel"], dict):
            d["kernel"] = KernelSpec.from_dict(d["kernel"])
        return cls(**d)

    def arch(self, k: int, in_channels: int = 1, **overrides) -> ArchConfig:
        base = dict(k=k, in_channels=in_channels, propagation=self.propagation,
                    attention=self.attention, iterations=self.iterations,
                    dampening=self.dampening, epsilon=self.epsilon)
        base.update(overrides)
        return ArchConfig(**base)


@dataclass
class Checkpoint:
    """Model parameters plus optimizer moments and the run configuration."""

    kind: str
    arch: ArchConfig
    state: dict            # parameter name -> float32 ndarray
    optimizer_state: dict  # parameter name -> {"m": ndarray, "v": ndarray}
    adam_step: int
    step: int
    config: TrainConfig

    def build_model(self) -> torch.nn.Module:
        model = MODEL_KINDS[self.kind](self.arch)
        tensors = {name: torch.from_numpy(arr.copy())
                   for name, arr in self.state.items()}
        model.load_state_dict(tensors)
        return model

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        meta = {"format": CHECKPOINT_FORMAT, "version": 1, "kind": self.kind,
                "step": self.step, "adam_step": self.adam_step,
                "arch": self.arch.to_dict(), "config": self.config.to_dict(),
                "param_names": list(self.state.keys())}
        with open(path, "wb") as f:
            mapio.write_json_line(f, meta)
            for name, arr in self.state.items():
                mapio.write_record(f, name, arr)
            for name, mv in self.optimizer_state.items():
                mapio.write_record(f, f"adam.m/{name}", mv["m"])
                mapio.write_record(f, f"adam.v/{name}", mv["v"])
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, "rb") as f:
            meta = mapio.read_json_line(f)
            if meta.get("format") != CHECKPOINT_FORMAT:
                raise ValueError(f"{path} is not a checkpoint file")
            records = {}
            while True:
                rec = mapio.read_record(f)
                if rec is None:
                    break
                records[rec[0]] = rec[1]
        state = {name: records[name] for name in meta["param_names"]}
        opt_state = {}
        for name in meta["param_names"]:
            if f"adam.m/{name}" in records:
                opt_state[name] = {"m": records[f"adam.m/{name}"],
                                   "v": records[f"adam.v/{name}"]}
        return cls(kind=meta["kind"], arch=ArchConfig.from_dict(meta["arch"]),
                   state=state, optimizer_state=opt_state,
                   adam_step=meta["adam_step"], step=meta["step"],
                   config=TrainConfig.from_dict(meta["config"]))


class TrainResult(NamedTuple):
    checkpoint: Checkpoint
    log: list


def _manifest_channels(manifest: DatasetManifest) -> int:
    return 3 if any(s.image.ndim == 3 for s in manifest.samples) else 1


def _as_channels(image: np.ndarray, in_channels: int) -> np.ndarray:
    if image.ndim == 2 and in_channels == 3:
        return np.repeat(image[:, :, None], 3, axis=2)
    if image.ndim == 3 and in_channels == 1:
        return image.mean(axis=2)
    return image


class _CachedSample(NamedTuple):
    image: np.ndarray       # padded to at least the crop side
    densities: np.ndarray   # (k, h, w) full-resolution category density


def _prepare_sample(sample: Sample, kernel: KernelSpec, crop: int,
                    in_channels: int) -> _CachedSample:
    image = _as_channels(sample.image, in_channels)
    dens = render_category_densities(sample.annotation, kernel)
    h, w = image.shape[:2]
    ph, pw = max(crop - h, 0), max(crop - w, 0)
    if ph or pw:
        pad_img = [(0, ph), (0, pw)] + [(0, 0)] * (image.ndim - 2)
        image = np.pad(image, pad_img)
        dens = np.pad(dens, [(0, 0), (0, ph), (0, pw)])
    return _CachedSample(image=image, densities=dens)


def _crop_tensors(cached: _CachedSample, top: int, left: int, crop: int,
                  config: TrainConfig):
    img = cached.image[top:top + crop, left:left + crop]
    dens = cached.densities[:, top:top + crop, left:left + crop]
    cat4, total4, seg4 = targets_from_densities(
        dens, OUTPUT_STRIDE, epsilon=config.epsilon, eta=config.eta)
    gt_cat = torch.from_numpy(cat4.astype(np.float32)).unsqueeze(0)
    gt_total = torch.from_numpy(total4.astype(np.float32)[None]).unsqueeze(0)
    gt_seg = torch.from_numpy(seg4.astype(np.float32)).unsqueeze(0)
    return image_to_tensor(img), gt_cat, gt_total, gt_seg


def _check_finite(breakdown, step: int) -> None:
    for name in ("counting", "segmentation", "fine_grained", "total"):
        value = scalar(getattr(breakdown, name))
        if not np.isfinite(value):
            raise NonFiniteLossError(
                f"{name} loss became {value} at step {step}; aborting")


def _snapshot(model, optimizer, config, step) -> Checkpoint:
    state = {name: p.detach().cpu().numpy().astype(np.float32).copy()
             for name, p in model.state_dict().items()}
    opt_state = {}
    adam_step = 0
    param_names = {id(p): name for name, p in model.named_parameters()}
    for group in optimizer.param_groups:
        for p in group["params"]:
            st = optimizer.state.get(p)
            if not st:
                continue
            name = param_names[id(p)]
            opt_state[name] = {
                "m": st["exp_avg"].cpu().numpy().astype(np.float32).copy(),
                "v": st["exp_avg_sq"].cpu().numpy().astype(np.float32).copy()}
            adam_step = int(st["step"])
    return Checkpoint(kind=model.kind, arch=model.arch, state=state,
                      optimizer_state=opt_state, adam_step=adam_step,
                      step=step, config=config)


def write_log(rows, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(
            f, fieldnames=["step", "counting", "segmentation",
                           "fine_grained", "total"])
        writer.writeheader()
        writer.writerows(rows)
    return path


def train(manifest: DatasetManifest, config: TrainConfig,
          checkpoint_path=None, log_path=None) -> TrainResult:
    """Optimize a model on the manifest; returns the final checkpoint and log."""
    if not manifest.samples:
        raise ManifestError("cannot train on an empty manifest")
    in_channels = _manifest_channels(manifest)
    arch = config.arch(manifest.k, in_channels)
    model = build_model(arch, config.seed, kind=config.model)
    torch.manual_seed(config.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate,
                                 betas=(0.9, 0.999), eps=1e-8)
    rng = np.random.default_rng([config.seed, 1])
    cache = [_prepare_sample(s, config.kernel, config.crop, in_channels)
             for s in manifest.samples]
    rows = []
    checkpoint = None
    for step in range(1, config.steps + 1):
        idx = int(rng.integers(len(cache)))
        cached = cache[idx]
        h, w = cached.image.shape[:2]
        top = int(rng.integers(h - config.crop + 1))
        left = int(rng.integers(w - config.crop + 1))
        img, gt_cat, gt_total, gt_seg = _crop_tensors(
            cached, top, left, config.crop, config)
        outputs = model(img)
        breakdown = compute_losses(outputs, gt_cat, gt_total, gt_seg,
                                   alpha=config.alpha, beta=config.beta)
        _check_finite(breakdown, step)
        optimizer.zero_grad()
        breakdown.total.backward()
        optimizer.step()
        rows.append(breakdown.row(step))
        if checkpoint_path and config.checkpoint_every \
                and step % config.checkpoint_every == 0:
            _snapshot(model, optimizer, config, step).save(checkpoint_path)
    checkpoint = _snapshot(model, optimizer, config, config.steps)
    if checkpoint_path:
        checkpoint.save(checkpoint_path)
    if log_path:
        write_log(rows, log_path)
    return TrainResult(checkpoint=checkpoint, log=rows)


def build_baseline(kind: str, k: int, seed: int, in_channels: int = 1,
                   config: TrainConfig | None = None) -> torch.nn.Module:
    """Construct a comparison model: onenet, twonets, or segment."""
    if kind not in ("onenet", "twonets", "segment"):
        raise ValueError(f"unknown baseline {kind!r}")
    config = config or TrainConfig(model=kind)
    return build_model(config.arch(k, in_channels), seed, kind=kind)


def predictions_for_sample(model, sample: Sample, config: TrainConfig):
    """Full-image forward pass; density maps are clamped at 0 for reporting."""
    arch = model.arch
    image = _as_channels(sample.image, arch.in_channels)
    with torch.no_grad():
        out = model(image_to_tensor(image))
    k = arch.k
    if out.refined_seg is not None:
        density = out.refined_density.clamp(min=0)
        fine = out.refined_seg[:, :k] * density
        seg = out.refined_seg[0].numpy().astype(np.float64)
    else:
        fine = out.fine_grained.clamp(min=0)
        density = fine.sum(dim=1, keepdim=True)
        seg = None
    return (fine[0].numpy().astype(np.float64),
            density[0, 0].numpy().astype(np.float64), seg)


def sample_targets(sample: Sample, config: TrainConfig):
    dens = render_category_densities(sample.annotation, config.kernel)
    return targets_from_densities(dens, OUTPUT_STRIDE,
                                  epsilon=config.epsilon, eta=config.eta)


def evaluate(checkpoint: Checkpoint, manifest: DatasetManifest) -> EvalReport:
    """Full-image evaluation of a checkpoint against a manifest."""
    if manifest.k != checkpoint.arch.k:
        raise ValueError(f"checkpoint has k={checkpoint.arch.k} but manifest "
                         f"has k={manifest.k}")
    if not manifest.samples:
        raise ManifestError("cannot evaluate an empty manifest")
    model = checkpoint.build_model()
    model.eval()
    pred_fine, pred_overall, pred_seg = [], [], []
    gt_fine, gt_seg = [], []
    for sample in manifest.samples:
        fine, density, seg = predictions_for_sample(model, sample,
                                                    checkpoint.config)
        cat4, _, seg4 = sample_targets(sample, checkpoint.config)
        pred_fine.append(fine)
        pred_overall.append(density)
        gt_fine.append(cat4)
        if seg is not None:
            pred_seg.append(seg)
            gt_seg.append(seg4)
    return build_report(pred_fine, pred_overall,
                        pred_seg if pred_seg else None,
                        gt_fine, gt_seg, manifest.k)
